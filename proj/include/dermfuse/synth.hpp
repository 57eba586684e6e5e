#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dermfuse/dataset.hpp"
#include "dermfuse/image.hpp"
#include "dermfuse/metadata.hpp"
#include "dermfuse/rng.hpp"
#include "dermfuse/serialize.hpp"

namespace dermfuse {

// Seeded synthetic multimodal dataset. Class c is the pair
// (pattern = c mod P, token = c div P): the image carries only the pattern
// and the metadata only the token, so with P < n_classes neither modality
// alone can separate the classes; the gap is what fusion must close.
struct SynthConfig {
  int n_classes = 6;
  int patterns = 3;  // P
  int samples_per_class = 20;
  int image_size = 32;
  double noise_sigma = 0.03;
  double background = 0.12;
  double meta_missing_fraction = 0.0;  // injected into the nuisance columns only
  bool emit_sr_targets = false;        // writes bicubic x2 `<stem>.sr.png` siblings
  std::uint64_t seed = 0;

  int tokens() const { return n_classes / patterns; }

  void validate() const {
    if (n_classes < 2) throw ConfigError("synth: n_classes must be >= 2");
    if (patterns < 1 || patterns > 6) throw ConfigError("synth: patterns must be in [1,6]");
    if (n_classes % patterns != 0) {
      throw ConfigError("synth: n_classes must be a multiple of the pattern count");
    }
    if (samples_per_class < 1) throw ConfigError("synth: samples_per_class must be >= 1");
    if (image_size < 8 || image_size % 4 != 0) {
      throw ConfigError("synth: image_size must be >= 8 and divisible by 4");
    }
    if (noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be >= 0");
    if (meta_missing_fraction < 0.0 || meta_missing_fraction > 1.0) {
      throw ConfigError("synth: meta_missing_fraction must be in [0,1]");
    }
  }
};

inline MetadataSchema synth_schema(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<std::string> marker_vocab;
  for (int t = 0; t < cfg.tokens(); ++t) marker_vocab.push_back("T" + std::to_string(t));
  std::vector<std::string> classes;
  if (cfg.n_classes == 6) {
    classes = {"ACK", "BCC", "MEL", "NEV", "SCC", "SEK"};
  } else {
    for (int c = 0; c < cfg.n_classes; ++c) classes.push_back("C" + std::to_string(c));
  }
  MetadataSchema s;
  s.columns = {
      {"img_id", ColumnKind::identifier, {}, 0, 1},
      {"patient_id", ColumnKind::identifier, {}, 0, 1},
      {"age", ColumnKind::numeric, {}, 0, 100},
      {"region", ColumnKind::categorical, {"HEAD", "ARM", "LEG", "TRUNK"}, 0, 1},
      {"marker", ColumnKind::categorical, marker_vocab, 0, 1},
      {"diagnostic", ColumnKind::label, classes, 0, 1},
  };
  s.missing_markers = {"", "UNK"};
  s.sample_id_column = "img_id";
  s.patient_id_column = "patient_id";
  s.validate();
  return s;
}

// Clean axis-aligned pattern, one per pattern index; intensity varies with
// the pattern so tiny encoders separate them quickly.
inline Image synth_template(const SynthConfig& cfg, int pattern) {
  cfg.validate();
  if (pattern < 0 || pattern >= cfg.patterns) throw ContractError("synth: pattern index out of range");
  const int s = cfg.image_size;
  Image img(s, s, 3, static_cast<float>(cfg.background));
  auto paint = [&](int y0, int y1, int x0, int x1, float v) {
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = v;
  };
  const int q = s / 4, t = s / 3, f = std::max(1, s / 8);
  switch (pattern) {
    case 0: paint(q, 3 * q, q, 3 * q, 0.95f); break;
    case 1: paint(t, 2 * t, 0, s, 0.80f); break;
    case 2: paint(0, s, t, 2 * t, 0.65f); break;
    case 3:
      paint(0, f, 0, s, 0.88f);
      paint(s - f, s, 0, s, 0.88f);
      paint(0, s, 0, f, 0.88f);
      paint(0, s, s - f, s, 0.88f);
      break;
    case 4: paint(0, s / 2, 0, s / 2, 0.72f); break;
    default: paint(s / 2, s, s / 2, s, 0.60f); break;
  }
  return img;
}

namespace detail {

inline Image synth_sample_image(const SynthConfig& cfg, int pattern, Rng& rng) {
  Image img = synth_template(cfg, pattern);
  if (cfg.noise_sigma > 0.0) {
    for (auto& v : img.pixels) v += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));
    clip_pixels(img);
  }
  return img;
}

inline std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

}  // namespace detail

// Writes images/, metadata.csv and schema.json in the same layout real
// datasets use. Byte-identical for a given config.
inline void generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  const MetadataSchema schema = synth_schema(cfg);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IOError("synth: cannot create " + (out_dir / "images").string() + ": " + ec.message());

  const char* regions[] = {"HEAD", "ARM", "LEG", "TRUNK"};
  std::string csv = "img_id,patient_id,age,region,marker,diagnostic\n";
  int index = 0;
  for (int c = 0; c < cfg.n_classes; ++c) {
    const int pattern = c % cfg.patterns;
    const int token = c / cfg.patterns;
    for (int j = 0; j < cfg.samples_per_class; ++j, ++index) {
      Rng rng(mix_seed(cfg.seed, 0x73796e7468ull, static_cast<std::uint64_t>(index)));
      Image img = detail::synth_sample_image(cfg, pattern, rng);
      const std::string img_id = "IMG_" + detail::zero_pad(index, 5) + ".png";
      const auto img_path = out_dir / "images" / img_id;
      save_image(img, img_path);
      if (cfg.emit_sr_targets) {
        save_image(resize_bicubic(img, img.height * 2, img.width * 2), sr_sibling_path(img_path));
      }
      std::string age = std::to_string(20 + static_cast<int>(rng.below(60)));
      std::string region = regions[rng.below(4)];
      if (cfg.meta_missing_fraction > 0.0) {
        if (rng.bernoulli(cfg.meta_missing_fraction)) age = "UNK";
        if (rng.bernoulli(cfg.meta_missing_fraction)) region = "UNK";
      }
      csv += img_id + ",PAT_" + detail::zero_pad(index, 5) + "," + age + "," + region + ",T" +
             std::to_string(token) + "," + schema.class_names()[static_cast<std::size_t>(c)] + "\n";
    }
  }
  write_file_text(out_dir / "metadata.csv", csv);
  write_file_text(out_dir / "schema.json", schema.to_json().dump(2) + "\n");
}

enum class OracleMode { multimodal, image_only, meta_only };

struct OracleResult {
  std::vector<std::string> sample_ids;
  std::vector<int> truth;
  std::vector<int> predicted;
};

// Brute-force reference classifier: nearest template for the pattern, the
// marker token for the group. Independent of the learned model; serves as
// the accuracy ceiling per modality.
inline OracleResult oracle_classify(const SynthConfig& cfg, const std::filesystem::path& dataset_dir,
                                    OracleMode mode = OracleMode::multimodal) {
  cfg.validate();
  const MetadataSchema schema = MetadataSchema::load(dataset_dir / "schema.json");
  auto records = parse_csv(dataset_dir / "metadata.csv", schema);
  std::vector<Image> templates;
  for (int p = 0; p < cfg.patterns; ++p) templates.push_back(synth_template(cfg, p));

  OracleResult out;
  const Column& marker = *schema.find("marker");
  for (const auto& rec : records) {
    out.sample_ids.push_back(rec.sample_id(schema));
    out.truth.push_back(rec.label(schema));

    int pattern = 0;
    if (mode != OracleMode::meta_only) {
      Image img = load_image(resolve_image_path(dataset_dir / "images", rec.sample_id(schema)));
      double best = -1.0;
      for (int p = 0; p < cfg.patterns; ++p) {
        double ssd = 0.0;
        for (std::size_t i = 0; i < img.pixels.size(); ++i) {
          const double d = static_cast<double>(img.pixels[i]) - templates[static_cast<std::size_t>(p)].pixels[i];
          ssd += d * d;
        }
        if (best < 0.0 || ssd < best) {
          best = ssd;
          pattern = p;
        }
      }
    }
    int token = 0;
    if (mode != OracleMode::image_only) {
      auto idx = marker.vocab_index(rec.field(schema, "marker"));
      token = idx ? *idx : 0;
    }
    out.predicted.push_back(token * cfg.patterns + pattern);
  }
  return out;
}

}  // namespace dermfuse
