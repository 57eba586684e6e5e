#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dermfuse/errors.hpp"
#include "dermfuse/nn.hpp"
#include "dermfuse/rng.hpp"
#include "dermfuse/serialize.hpp"
#include "dermfuse/tensor.hpp"

namespace dermfuse {

enum class FusionMode { multiply, concat };

inline FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "multiply") return FusionMode::multiply;
  if (s == "concat") return FusionMode::concat;
  throw ConfigError("unknown fusion mode: " + s);
}

inline std::string to_string(FusionMode m) {
  return m == FusionMode::multiply ? "multiply" : "concat";
}

// Architecture description. Parameter shapes are a pure function of this
// struct, so a checkpoint stores it verbatim.
struct ModelConfig {
  int input_size = 64;
  std::vector<int> encoder_channels = {16, 32, 64};
  int fusion_dim = 512;
  std::vector<int> meta_dims = {64, 128, 256, 512};
  int classifier_hidden = 256;
  int n_classes = 6;
  int sr_factor = 2;
  FusionMode fusion_mode = FusionMode::multiply;
  bool image_only = false;  // ablation: metadata features replaced by ones
  int meta_input_dim = 0;   // encoded metadata length, from the schema
  std::uint64_t seed = 0;

  static constexpr int decoder_layers = 6;

  int feature_extent() const {
    int e = input_size;
    for (std::size_t i = 0; i < encoder_channels.size(); ++i) e /= 2;
    return e;
  }

  // Number of x2 upsampling stages the decoder needs to reach
  // sr_factor * input_size from the encoder's final feature extent.
  int upsample_stages() const {
    const long target = static_cast<long>(sr_factor) * input_size;
    const int extent = feature_extent();
    if (extent < 1 || target % extent != 0) return -1;
    long ratio = target / extent;
    int u = 0;
    while (ratio > 1 && ratio % 2 == 0) {
      ratio /= 2;
      ++u;
    }
    return ratio == 1 ? u : -1;
  }

  int classifier_input() const {
    if (image_only || fusion_mode == FusionMode::multiply) return fusion_dim;
    return fusion_dim + meta_dims.back();
  }

  std::vector<int> decoder_channels() const {
    std::vector<int> outs(decoder_layers);
    const int c0 = encoder_channels.back();
    for (int i = 0; i + 1 < decoder_layers; ++i) outs[static_cast<std::size_t>(i)] = std::max(4, c0 >> (i + 1));
    outs[decoder_layers - 1] = 3;
    return outs;
  }

  void validate() const {
    if (input_size < 2) throw ConfigError("model: input_size must be >= 2");
    if (encoder_channels.empty()) throw ConfigError("model: encoder_channels must be non-empty");
    for (int c : encoder_channels) {
      if (c < 1) throw ConfigError("model: encoder channel widths must be positive");
    }
    int size = input_size;
    for (std::size_t i = 0; i < encoder_channels.size(); ++i) {
      if (size % 2 != 0) throw ConfigError("model: input_size must halve cleanly at every encoder stage");
      size /= 2;
    }
    if (size < 1) throw ConfigError("model: feature extent must be >= 1");
    if (fusion_dim < 1) throw ConfigError("model: fusion_dim must be positive");
    if (meta_dims.empty()) throw ConfigError("model: meta_dims must be non-empty");
    for (int d : meta_dims) {
      if (d < 1) throw ConfigError("model: meta layer widths must be positive");
    }
    if (classifier_hidden < 1) throw ConfigError("model: classifier_hidden must be positive");
    if (n_classes < 2) throw ConfigError("model: n_classes must be >= 2");
    if (sr_factor < 2 || (sr_factor & (sr_factor - 1)) != 0) {
      throw ConfigError("model: sr_factor must be a power of two >= 2");
    }
    if (fusion_mode == FusionMode::multiply && meta_dims.back() != fusion_dim) {
      throw ConfigError("model: multiply fusion requires meta_dims back (" +
                        std::to_string(meta_dims.back()) + ") == fusion_dim (" +
                        std::to_string(fusion_dim) + ")");
    }
    if (image_only && fusion_mode == FusionMode::concat) {
      throw ConfigError("model: image_only ablation is defined for multiply fusion");
    }
    const int u = upsample_stages();
    if (u < 0 || u > decoder_layers) {
      throw ConfigError("model: decoder cannot reach " + std::to_string(sr_factor * input_size) +
                        " from feature extent " + std::to_string(feature_extent()) + " in " +
                        std::to_string(decoder_layers) + " layers");
    }
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"input_size", input_size},
                          {"encoder_channels", encoder_channels},
                          {"fusion_dim", fusion_dim},
                          {"meta_dims", meta_dims},
                          {"classifier_hidden", classifier_hidden},
                          {"n_classes", n_classes},
                          {"sr_factor", sr_factor},
                          {"fusion_mode", to_string(fusion_mode)},
                          {"image_only", image_only},
                          {"meta_input_dim", meta_input_dim},
                          {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.input_size = j.value("input_size", c.input_size);
    if (j.contains("encoder_channels")) c.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
    c.fusion_dim = j.value("fusion_dim", c.fusion_dim);
    if (j.contains("meta_dims")) c.meta_dims = j.at("meta_dims").get<std::vector<int>>();
    c.classifier_hidden = j.value("classifier_hidden", c.classifier_hidden);
    c.n_classes = j.value("n_classes", c.n_classes);
    c.sr_factor = j.value("sr_factor", c.sr_factor);
    if (j.contains("fusion_mode")) c.fusion_mode = fusion_mode_from_string(j.at("fusion_mode").get<std::string>());
    c.image_only = j.value("image_only", c.image_only);
    c.meta_input_dim = j.value("meta_input_dim", c.meta_input_dim);
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

// Reference configuration at the published operating point: 224x224 inputs,
// a five-stage encoder (feature extent 7) and 448x448 upscale targets.
inline ModelConfig paper_scale_config() {
  ModelConfig c;
  c.input_size = 224;
  c.encoder_channels = {16, 32, 64, 128, 256};
  return c;
}

// All learnable parameters, named, in a fixed creation order.
template <typename T>
struct ModelBundle {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor<T>>> params;

  Tensor<T>& param(const std::string& name) {
    for (auto& [n, t] : params) {
      if (n == name) return t;
    }
    throw StateError("model: no parameter named '" + name + "'");
  }

  const Tensor<T>& param(const std::string& name) const {
    for (const auto& [n, t] : params) {
      if (n == name) return t;
    }
    throw StateError("model: no parameter named '" + name + "'");
  }

  // Handles for the optimizer; storage is shared with the bundle.
  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (const auto& [n, t] : params) out.push_back(t);
    return out;
  }

  // In the image-only ablation the metadata tower is out of the graph and
  // must not be handed to the optimizer.
  std::vector<Tensor<T>> trainable_parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& [n, t] : params) {
      if (config.image_only && n.rfind("meta.", 0) == 0) continue;
      out.push_back(t);
    }
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
  }

  ModelBundle clone() const {
    ModelBundle out;
    out.config = config;
    for (const auto& [n, t] : params) out.params.emplace_back(n, t.clone());
    return out;
  }

  template <typename U>
  ModelBundle<U> cast() const {
    ModelBundle<U> out;
    out.config = config;
    for (const auto& [n, t] : params) out.params.emplace_back(n, t.template cast<U>());
    return out;
  }
};

namespace detail {

template <typename T>
Tensor<T> init_uniform(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  t.enable_grad();
  return t;
}

}  // namespace detail

// Deterministic fan-in-scaled uniform initialization from config.seed.
// Weights carry the ReLU gain (bound = sqrt(6/fan_in)); plain sqrt(1/fan_in)
// leaves the multiplicative fusion too weak to train at these widths.
template <typename T>
ModelBundle<T> build_model(const ModelConfig& config) {
  config.validate();
  if (config.meta_input_dim < 1) {
    throw ConfigError("model: meta_input_dim must be set from the schema before building");
  }
  ModelBundle<T> bundle;
  bundle.config = config;
  Rng rng(mix_seed(config.seed, 0x6d6f64656cull));

  auto add = [&](const std::string& name, Shape shape, std::int64_t fan_in) {
    const double bound = name.ends_with(".bias") ? std::sqrt(1.0 / static_cast<double>(fan_in))
                                                 : std::sqrt(6.0 / static_cast<double>(fan_in));
    bundle.params.emplace_back(name, detail::init_uniform<T>(std::move(shape), bound, rng));
  };

  int in_ch = 3;
  for (std::size_t i = 0; i < config.encoder_channels.size(); ++i) {
    const int out_ch = config.encoder_channels[i];
    add("encoder." + std::to_string(i) + ".weight", {out_ch, in_ch, 3, 3}, static_cast<std::int64_t>(in_ch) * 9);
    add("encoder." + std::to_string(i) + ".bias", {out_ch}, static_cast<std::int64_t>(in_ch) * 9);
    in_ch = out_ch;
  }
  add("bridge.weight", {config.fusion_dim, in_ch, 1, 1}, in_ch);
  add("bridge.bias", {config.fusion_dim}, in_ch);

  int d = config.meta_input_dim;
  for (std::size_t i = 0; i < config.meta_dims.size(); ++i) {
    const int m = config.meta_dims[i];
    add("meta." + std::to_string(i) + ".weight", {d, m}, d);
    add("meta." + std::to_string(i) + ".bias", {m}, d);
    d = m;
  }

  add("classifier.0.weight", {config.classifier_input(), config.classifier_hidden},
      config.classifier_input());
  add("classifier.0.bias", {config.classifier_hidden}, config.classifier_input());
  add("classifier.1.weight", {config.classifier_hidden, config.n_classes}, config.classifier_hidden);
  add("classifier.1.bias", {config.n_classes}, config.classifier_hidden);

  int dec_in = config.encoder_channels.back();
  const auto dec_out = config.decoder_channels();
  for (int i = 0; i < ModelConfig::decoder_layers; ++i) {
    add("decoder." + std::to_string(i) + ".weight", {dec_out[static_cast<std::size_t>(i)], dec_in, 3, 3},
        static_cast<std::int64_t>(dec_in) * 9);
    add("decoder." + std::to_string(i) + ".bias", {dec_out[static_cast<std::size_t>(i)]},
        static_cast<std::int64_t>(dec_in) * 9);
    dec_in = dec_out[static_cast<std::size_t>(i)];
  }
  return bundle;
}

// Strided conv stages then the 1x1 bridge + global average pool that fixes
// the flattened length to fusion_dim for the element-wise fusion.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> visual_forward(const ModelBundle<T>& bundle, const Tensor<T>& images) {
  const auto& cfg = bundle.config;
  if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != cfg.input_size ||
      images.dim(3) != cfg.input_size) {
    throw ShapeError("visual_forward: expected Nx3x" + std::to_string(cfg.input_size) + "x" +
                     std::to_string(cfg.input_size) + ", got " + shape_str(images.shape()));
  }
  Tensor<T> x = images;
  for (std::size_t i = 0; i < cfg.encoder_channels.size(); ++i) {
    const std::string base = "encoder." + std::to_string(i);
    x = relu(conv2d(x, bundle.param(base + ".weight"), bundle.param(base + ".bias"), 2, 1));
  }
  Tensor<T> feature_map = x;
  Tensor<T> bridged = relu(conv2d(feature_map, bundle.param("bridge.weight"), bundle.param("bridge.bias"), 1, 0));
  Tensor<T> fv_image = global_avg_pool(bridged);
  return {feature_map, fv_image};
}

// Four fully connected layers, ReLU between, no activation after the last.
template <typename T>
Tensor<T> meta_forward(const ModelBundle<T>& bundle, const Tensor<T>& encoded_meta) {
  const auto& cfg = bundle.config;
  if (encoded_meta.ndim() != 2 || encoded_meta.dim(1) != cfg.meta_input_dim) {
    throw ShapeError("meta_forward: expected Nx" + std::to_string(cfg.meta_input_dim) + ", got " +
                     shape_str(encoded_meta.shape()));
  }
  Tensor<T> x = encoded_meta;
  for (std::size_t i = 0; i < cfg.meta_dims.size(); ++i) {
    const std::string base = "meta." + std::to_string(i);
    x = linear(x, bundle.param(base + ".weight"), bundle.param(base + ".bias"));
    if (i + 1 < cfg.meta_dims.size()) x = relu(x);
  }
  return x;
}

// Element-wise product (metadata gates the visual features) or plain
// concatenation for the ablation baseline.
template <typename T>
Tensor<T> fuse(const Tensor<T>& fv_image, const Tensor<T>& fv_meta, FusionMode mode) {
  if (mode == FusionMode::multiply) return mul(fv_image, fv_meta);
  return concat_cols(fv_image, fv_meta);
}

template <typename T>
Tensor<T> classify_forward(const ModelBundle<T>& bundle, const Tensor<T>& fv_final) {
  const auto& cfg = bundle.config;
  if (fv_final.ndim() != 2 || fv_final.dim(1) != cfg.classifier_input()) {
    throw ShapeError("classify_forward: expected Nx" + std::to_string(cfg.classifier_input()) +
                     ", got " + shape_str(fv_final.shape()));
  }
  Tensor<T> h = relu(linear(fv_final, bundle.param("classifier.0.weight"), bundle.param("classifier.0.bias")));
  return linear(h, bundle.param("classifier.1.weight"), bundle.param("classifier.1.bias"));
}

// Six conv layers; the first upsample_stages() of them are preceded by a x2
// nearest-neighbor upsample. Sigmoid keeps the prediction in image range.
template <typename T>
Tensor<T> sr_decode(const ModelBundle<T>& bundle, const Tensor<T>& feature_map) {
  const auto& cfg = bundle.config;
  const int extent = cfg.feature_extent();
  if (feature_map.ndim() != 4 || feature_map.dim(1) != cfg.encoder_channels.back() ||
      feature_map.dim(2) != extent || feature_map.dim(3) != extent) {
    throw ShapeError("sr_decode: expected Nx" + std::to_string(cfg.encoder_channels.back()) + "x" +
                     std::to_string(extent) + "x" + std::to_string(extent) + ", got " +
                     shape_str(feature_map.shape()));
  }
  const int u = cfg.upsample_stages();
  Tensor<T> x = feature_map;
  for (int i = 0; i < ModelConfig::decoder_layers; ++i) {
    if (i < u) x = nearest_upsample(x, 2);
    const std::string base = "decoder." + std::to_string(i);
    x = conv2d(x, bundle.param(base + ".weight"), bundle.param(base + ".bias"), 1, 1);
    x = (i + 1 < ModelConfig::decoder_layers) ? relu(x) : sigmoid(x);
  }
  return x;
}

template <typename T>
struct ForwardOutput {
  Tensor<T> logits;     // N x n_classes
  Tensor<T> sr_pred;    // N x 3 x sr_factor*S x sr_factor*S
  Tensor<T> embedding;  // N x fusion length (the fused feature vector)
};

// Full pass: both heads share the visual encoder, so its parameters receive
// gradients from the classification and the upscaling losses.
template <typename T>
ForwardOutput<T> forward(const ModelBundle<T>& bundle, const Tensor<T>& images,
                         const Tensor<T>& encoded_meta, bool with_sr = true) {
  const auto& cfg = bundle.config;
  auto [feature_map, fv_image] = visual_forward(bundle, images);
  Tensor<T> fv_final;
  if (cfg.image_only) {
    fv_final = fv_image;
  } else {
    if (encoded_meta.ndim() != 2 || encoded_meta.dim(0) != images.dim(0)) {
      throw ShapeError("forward: image batch " + std::to_string(images.dim(0)) +
                       " vs metadata batch " + shape_str(encoded_meta.shape()));
    }
    Tensor<T> fv_meta = meta_forward(bundle, encoded_meta);
    fv_final = fuse(fv_image, fv_meta, cfg.fusion_mode);
  }
  ForwardOutput<T> out;
  out.logits = classify_forward(bundle, fv_final);
  if (with_sr) out.sr_pred = sr_decode(bundle, feature_map);
  out.embedding = fv_final;
  return out;
}

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Checkpoint layout: "DFCK", version, one JSON blob ({"config":..,"aux":..}),
// then named float32 tensors. Byte-identical for identical states.
inline void save_checkpoint(const ModelBundle<float>& bundle, const nlohmann::json& aux,
                            const std::filesystem::path& path) {
  ByteWriter w;
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("DFCK"), 4));
  w.u32(kCheckpointVersion);
  nlohmann::json meta{{"config", bundle.config.to_json()}, {"aux", aux}};
  w.str(meta.dump());
  w.u32(static_cast<std::uint32_t>(bundle.params.size()));
  for (const auto& [name, t] : bundle.params) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) w.i64(d);
    for (auto v : t.values()) w.f32(v);
  }
  write_file_bytes(path, w.bytes());
}

inline std::pair<ModelBundle<float>, nlohmann::json> load_checkpoint(
    const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), "DFCK", 4) != 0) {
    throw VersionError("checkpoint " + path.string() + ": bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint " + path.string() + ": unsupported version " +
                       std::to_string(version));
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path.string() + ": bad metadata: " + e.what());
  }
  ModelConfig config = ModelConfig::from_json(meta.at("config"));
  ModelBundle<float> bundle = build_model<float>(config);
  const std::uint32_t count = r.u32();
  if (count != bundle.params.size()) {
    throw ShapeError("checkpoint " + path.string() + ": expected " +
                     std::to_string(bundle.params.size()) + " tensors, found " + std::to_string(count));
  }
  for (auto& [name, t] : bundle.params) {
    const std::string stored = r.str();
    if (stored != name) {
      throw ShapeError("checkpoint " + path.string() + ": tensor '" + stored + "' where '" + name +
                       "' was expected");
    }
    Shape shape(r.u32());
    for (auto& d : shape) d = r.i64();
    if (shape != t.shape()) {
      throw ShapeError("checkpoint " + path.string() + ": tensor '" + name + "' has shape " +
                       shape_str(shape) + ", model expects " + shape_str(t.shape()));
    }
    for (auto& v : t.values()) v = r.f32();
  }
  return {std::move(bundle), meta.value("aux", nlohmann::json::object())};
}

}  // namespace dermfuse
