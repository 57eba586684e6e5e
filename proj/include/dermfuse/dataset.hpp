#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dermfuse/image.hpp"
#include "dermfuse/metadata.hpp"
#include "dermfuse/tensor.hpp"

namespace dermfuse {

// One sample, fully materialized: preprocessed image in memory, encoded and
// imputed metadata, label index.
struct DataItem {
  std::string sample_id;
  std::string patient_id;
  int label = 0;
  Image image;
  EncodedMeta meta;
  std::filesystem::path image_path;
  Image sr_file_target;  // populated only for the file-based upscale method
  bool has_sr_target = false;
};

struct SplitSpec {
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  bool group_by_patient = true;
  std::filesystem::path split_file;
};

struct PipelineData {
  MetadataSchema schema;
  std::vector<std::string> class_names;
  std::vector<DataItem> items;
  SplitAssignment split;
  std::vector<std::size_t> train_idx, val_idx, test_idx;
  std::vector<std::int64_t> train_class_counts;
  ImputerStats imputer_stats;
  ImputeMode impute_mode = ImputeMode::statistic;
  nlohmann::json preprocess_settings;  // echoed from the preprocess manifest when present

  const std::vector<std::size_t>& indices_of(Partition p) const {
    switch (p) {
      case Partition::train: return train_idx;
      case Partition::val: return val_idx;
      default: return test_idx;
    }
  }
};

// Standard dataset directory: images/ + metadata.csv + schema.json, with
// every piece overridable.
struct DatasetPaths {
  std::filesystem::path data_dir;
  std::filesystem::path images_dir;
  std::filesystem::path metadata_csv;
  std::filesystem::path schema_json;

  DatasetPaths resolved() const {
    DatasetPaths p = *this;
    if (p.images_dir.empty()) p.images_dir = p.data_dir / "images";
    if (p.metadata_csv.empty()) p.metadata_csv = p.data_dir / "metadata.csv";
    if (p.schema_json.empty()) p.schema_json = p.data_dir / "schema.json";
    return p;
  }
};

inline std::filesystem::path resolve_image_path(const std::filesystem::path& images_dir,
                                                const std::string& sample_id) {
  std::filesystem::path p = images_dir / sample_id;
  if (p.extension().empty()) p += ".png";
  return p;
}

// Reads a dataset directory end to end: parse, split, encode, impute (fit on
// the training partition only), and load every image into memory. A preset
// split and fitted imputer statistics (e.g. from a checkpoint) override the
// split spec and the imputer fit, so evaluation sees exactly the training
// preprocessing.
inline PipelineData load_pipeline_data(const DatasetPaths& raw_paths, const SplitSpec& split_spec,
                                       ImputeMode impute_mode = ImputeMode::statistic,
                                       std::uint64_t impute_seed = 0,
                                       bool load_sr_targets = false,
                                       const SplitAssignment* preset_split = nullptr,
                                       const ImputerStats* preset_imputer = nullptr) {
  const DatasetPaths paths = raw_paths.resolved();
  PipelineData data;
  data.schema = MetadataSchema::load(paths.schema_json);
  data.class_names = data.schema.class_names();
  data.impute_mode = impute_mode;

  auto records = parse_csv(paths.metadata_csv, data.schema);
  if (records.empty()) throw StateError("dataset: no records in " + paths.metadata_csv.string());
  data.split = preset_split ? *preset_split
                            : split(records, data.schema, split_spec.ratios, split_spec.seed,
                                    split_spec.group_by_patient, split_spec.split_file);

  std::vector<EncodedMeta> encoded;
  encoded.reserve(records.size());
  for (const auto& r : records) encoded.push_back(encode(r, data.schema));

  if (preset_imputer) {
    Imputer imputer;
    imputer.restore(*preset_imputer);
    encoded = imputer.apply_all(data.schema, encoded);
    data.imputer_stats = *preset_imputer;
  } else {
    std::vector<std::size_t> train_rows;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (data.split.of(records[i].sample_id(data.schema)) == Partition::train) train_rows.push_back(i);
    }
    Imputer imputer;
    encoded = impute(encoded, impute_mode, data.schema, train_rows, impute_seed, &imputer);
    data.imputer_stats = imputer.stats();
  }

  data.train_class_counts.assign(static_cast<std::size_t>(data.schema.n_classes()), 0);
  for (std::size_t i = 0; i < records.size(); ++i) {
    DataItem item;
    item.sample_id = records[i].sample_id(data.schema);
    item.patient_id = records[i].patient_id(data.schema);
    item.label = records[i].label(data.schema);
    item.meta = std::move(encoded[i]);
    item.image_path = resolve_image_path(paths.images_dir, item.sample_id);
    item.image = load_image(item.image_path);
    if (load_sr_targets) {
      item.sr_file_target = sr_target(item.image, SrMethod::file, 2, item.image_path);
      item.has_sr_target = true;
    }
    const Partition p = data.split.of(item.sample_id);
    const std::size_t idx = data.items.size();
    if (p == Partition::train) {
      data.train_idx.push_back(idx);
      data.train_class_counts[static_cast<std::size_t>(item.label)] += 1;
    } else if (p == Partition::val) {
      data.val_idx.push_back(idx);
    } else {
      data.test_idx.push_back(idx);
    }
    data.items.push_back(std::move(item));
  }

  const auto manifest = paths.data_dir / "manifest.json";
  if (std::filesystem::exists(manifest)) {
    try {
      auto j = nlohmann::json::parse(read_file_text(manifest));
      if (j.contains("settings")) data.preprocess_settings = j.at("settings");
    } catch (const nlohmann::json::exception&) {
      // manifest is advisory; a malformed one does not block loading
    }
  }
  return data;
}

// HWC [0,1] images to an NCHW tensor.
template <typename T>
Tensor<T> image_batch(const std::vector<const Image*>& images) {
  if (images.empty()) throw ContractError("image_batch: empty batch");
  const int h = images[0]->height, w = images[0]->width, c = images[0]->channels;
  Tensor<T> out({static_cast<std::int64_t>(images.size()), c, h, w});
  auto& ov = out.values();
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = *images[n];
    if (img.height != h || img.width != w || img.channels != c) {
      throw ShapeError("image_batch: inconsistent image dimensions in batch");
    }
    const std::size_t base = n * static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int ch = 0; ch < c; ++ch) {
          ov[base + (static_cast<std::size_t>(ch) * h + y) * w + x] =
              static_cast<T>(img.at(y, x, ch));
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> meta_batch(const std::vector<const EncodedMeta*>& metas) {
  if (metas.empty()) throw ContractError("meta_batch: empty batch");
  const std::size_t d = metas[0]->values.size();
  Tensor<T> out({static_cast<std::int64_t>(metas.size()), static_cast<std::int64_t>(d)});
  auto& ov = out.values();
  for (std::size_t n = 0; n < metas.size(); ++n) {
    if (metas[n]->values.size() != d) throw ShapeError("meta_batch: inconsistent encoded lengths");
    for (std::size_t j = 0; j < d; ++j) ov[n * d + j] = static_cast<T>(metas[n]->values[j]);
  }
  return out;
}

template <typename T>
Tensor<T> onehot_batch(const std::vector<int>& labels, int n_classes) {
  Tensor<T> out({static_cast<std::int64_t>(labels.size()), n_classes});
  auto& ov = out.values();
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] < 0 || labels[n] >= n_classes) {
      throw ContractError("onehot_batch: label " + std::to_string(labels[n]) + " out of range");
    }
    ov[n * static_cast<std::size_t>(n_classes) + static_cast<std::size_t>(labels[n])] = T(1);
  }
  return out;
}

}  // namespace dermfuse
