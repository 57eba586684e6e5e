#include <gtest/gtest.h>

#include <filesystem>

#include "dermfuse/model.hpp"
#include "dermfuse/serialize.hpp"
#include "testutil.hpp"

using namespace dermfuse;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.input_size = 16;
  c.encoder_channels = {4, 8};
  c.fusion_dim = 16;
  c.meta_dims = {8, 16, 16, 16};
  c.classifier_hidden = 8;
  c.n_classes = 6;
  c.meta_input_dim = 6;
  c.seed = 3;
  return c;
}

template <typename T>
Tensor<T> random_images(int n, int s, Rng& rng) {
  Tensor<T> t({n, 3, s, s});
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(0.0, 1.0));
  return t;
}

template <typename T>
Tensor<T> random_meta(int n, int d, Rng& rng) {
  Tensor<T> t({n, d});
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(0.0, 1.0));
  return t;
}

}  // namespace

TEST(BuildModel, DefaultConfigMetaTowerWidths) {
  ModelConfig c;  // paper defaults: 64x64 desk scale, fusion 512
  c.meta_input_dim = 30;
  auto bundle = build_model<float>(c);
  EXPECT_EQ(bundle.param("meta.0.weight").shape(), (Shape{30, 64}));
  EXPECT_EQ(bundle.param("meta.1.weight").shape(), (Shape{64, 128}));
  EXPECT_EQ(bundle.param("meta.2.weight").shape(), (Shape{128, 256}));
  EXPECT_EQ(bundle.param("meta.3.weight").shape(), (Shape{256, 512}));
  EXPECT_GT(bundle.parameter_count(), 0);
  EXPECT_EQ(c.feature_extent(), 8);
}

TEST(BuildModel, FusionWidthMismatchIsConfigError) {
  auto c = small_config();
  c.meta_dims = {8, 16, 16, 24};  // last != fusion_dim in multiply mode
  EXPECT_THROW(build_model<float>(c), ConfigError);
  c.fusion_mode = FusionMode::concat;  // concat mode allows it
  EXPECT_NO_THROW(build_model<float>(c));
}

TEST(BuildModel, SameSeedGivesBitIdenticalParameters) {
  auto c = small_config();
  auto a = build_model<float>(c);
  auto b = build_model<float>(c);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(a.params[i].first, b.params[i].first);
    EXPECT_EQ(a.params[i].second.values(), b.params[i].second.values());
  }
  c.seed = 4;
  auto d = build_model<float>(c);
  EXPECT_NE(a.params[0].second.values(), d.params[0].second.values());
}

TEST(BuildModel, RejectsBadGeometry) {
  auto c = small_config();
  c.input_size = 18;  // not divisible by 2^stages
  EXPECT_THROW(build_model<float>(c), ConfigError);

  auto c2 = small_config();
  c2.meta_input_dim = 0;
  EXPECT_THROW(build_model<float>(c2), ConfigError);

  ModelConfig deep;  // 6 stages + x2 target needs 7 upsamples, one too many
  deep.input_size = 64;
  deep.encoder_channels = {4, 4, 4, 4, 4, 4};
  deep.fusion_dim = 16;
  deep.meta_dims = {8, 16};
  deep.meta_input_dim = 4;
  EXPECT_THROW(build_model<float>(deep), ConfigError);
}

TEST(VisualForward, ShapesAndZeroCase) {
  auto c = small_config();
  auto bundle = build_model<float>(c);
  Rng rng(1);
  auto [fm, fv] = visual_forward(bundle, random_images<float>(2, 16, rng));
  EXPECT_EQ(fm.shape(), (Shape{2, 8, 4, 4}));  // 16 / 2^2
  EXPECT_EQ(fv.shape(), (Shape{2, 16}));

  // zero input and zero biases pass nothing through conv + relu chains
  for (auto& [name, t] : bundle.params) {
    if (name.find("bias") != std::string::npos) {
      std::fill(t.values().begin(), t.values().end(), 0.0f);
    }
  }
  Tensor<float> zero({1, 3, 16, 16});
  auto [fm0, fv0] = visual_forward(bundle, zero);
  for (auto v : fv0.values()) EXPECT_FLOAT_EQ(v, 0.0f);

  EXPECT_THROW(visual_forward(bundle, Tensor<float>({1, 3, 8, 8})), ShapeError);
}

TEST(MetaForward, ShapesZeroAndLastLayerLinearity) {
  auto c = small_config();
  auto bundle = build_model<float>(c);
  Rng rng(2);
  auto fv = meta_forward(bundle, random_meta<float>(3, 6, rng));
  EXPECT_EQ(fv.shape(), (Shape{3, 16}));

  for (auto& [name, t] : bundle.params) {
    if (name.rfind("meta.", 0) == 0 && name.find("bias") != std::string::npos) {
      std::fill(t.values().begin(), t.values().end(), 0.0f);
    }
  }
  Tensor<float> zero({1, 6});
  auto meta_out = meta_forward(bundle, zero);
  for (auto v : meta_out.values()) EXPECT_FLOAT_EQ(v, 0.0f);

  // the final layer applies no activation: y(a*x) - b == a * (y(x) - b)
  const auto& w = bundle.param("meta.3.weight");
  const auto& b = bundle.param("meta.3.bias");
  auto pre = random_meta<double>(2, 16, rng);
  auto wd = w.cast<double>();
  auto bd = b.cast<double>();
  auto y1 = linear(pre, wd, bd);
  auto y2 = linear(scale(pre, 2.0), wd, bd);
  for (std::int64_t i = 0; i < y1.numel(); ++i) {
    const double lhs = y2.values()[i] - bd.values()[i % 16];
    const double rhs = 2.0 * (y1.values()[i] - bd.values()[i % 16]);
    EXPECT_NEAR(lhs, rhs, 1e-9);
  }

  EXPECT_THROW(meta_forward(bundle, Tensor<float>({1, 5})), ShapeError);
}

TEST(Fuse, MultiplyGateAndConcat) {
  Tensor<float> a({1, 2}, {2, 3});
  Tensor<float> b({1, 2}, {4, 5});
  auto prod = fuse(a, b, FusionMode::multiply);
  EXPECT_FLOAT_EQ(prod.values()[0], 8.0f);
  EXPECT_FLOAT_EQ(prod.values()[1], 15.0f);

  auto ones = Tensor<float>::full({1, 2}, 1.0f);
  auto gated = fuse(a, ones, FusionMode::multiply);
  EXPECT_EQ(gated.values(), a.values());
  auto zeros = Tensor<float>({1, 2});
  auto blocked = fuse(a, zeros, FusionMode::multiply);
  for (auto v : blocked.values()) EXPECT_FLOAT_EQ(v, 0.0f);

  Tensor<float> c({1, 3}, {1, 2, 3});
  EXPECT_THROW(fuse(a, c, FusionMode::multiply), ShapeError);
  EXPECT_EQ(fuse(a, c, FusionMode::concat).shape(), (Shape{1, 5}));
}

TEST(ClassifyForward, ShapeAndGradientReachesBothTowers) {
  auto c = small_config();
  auto bundle = build_model<double>(c);
  Rng rng(5);
  auto images = random_images<double>(2, 16, rng);
  auto meta = random_meta<double>(2, 6, rng);
  auto out = forward(bundle, images, meta, false);
  EXPECT_EQ(out.logits.shape(), (Shape{2, 6}));

  // pseudo cross-entropy pressure: backward through softmax of the logits
  auto probs = softmax(out.logits);
  auto loss = sum(mul(probs, probs));
  backward(loss);
  auto grad_norm = [&](const std::string& name) {
    double acc = 0;
    for (auto g : bundle.param(name).grad()) acc += std::abs(g);
    return acc;
  };
  EXPECT_GT(grad_norm("encoder.0.weight"), 0.0);
  EXPECT_GT(grad_norm("meta.0.weight"), 0.0);

  EXPECT_THROW(classify_forward(bundle, Tensor<double>({1, 7})), ShapeError);
}

TEST(SrDecode, UpsampleArithmeticAndRange) {
  ModelConfig c;  // 64 -> extent 8, x2 target 128 -> 4 upsample stages
  c.meta_input_dim = 10;
  EXPECT_EQ(c.upsample_stages(), 4);
  auto bundle = build_model<float>(c);
  Rng rng(6);
  auto images = random_images<float>(2, 64, rng);
  auto out = forward(bundle, images, random_meta<float>(2, 10, rng));
  EXPECT_EQ(out.sr_pred.shape(), (Shape{2, 3, 128, 128}));
  EXPECT_EQ(out.logits.shape(), (Shape{2, 6}));
  EXPECT_EQ(out.embedding.shape(), (Shape{2, 512}));
  for (auto v : out.sr_pred.values()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(SrDecode, PaperScaleReaches448) {
  ModelConfig c = paper_scale_config();
  c.meta_input_dim = 30;
  EXPECT_EQ(c.feature_extent(), 7);
  EXPECT_EQ(c.upsample_stages(), 6);
  auto bundle = build_model<float>(c);
  Rng rng(7);
  auto images = random_images<float>(1, 224, rng);
  NoGrad<float> ng;
  auto [fm, fv] = visual_forward(bundle, images);
  EXPECT_EQ(fm.shape(), (Shape{1, 256, 7, 7}));
  auto sr = sr_decode(bundle, fm);
  EXPECT_EQ(sr.shape(), (Shape{1, 3, 448, 448}));
}

TEST(Forward, MetadataOfOnesGatesNothing) {
  auto c = small_config();
  auto bundle = build_model<float>(c);
  Rng rng(8);
  auto images = random_images<float>(2, 16, rng);
  NoGrad<float> ng;
  auto [fm, fvi] = visual_forward(bundle, images);
  auto gated = fuse(fvi, Tensor<float>::full({2, 16}, 1.0f), FusionMode::multiply);
  EXPECT_EQ(gated.values(), fvi.values());
  auto logits_gated = classify_forward(bundle, gated);

  auto c2 = small_config();
  c2.image_only = true;
  auto ablated = build_model<float>(c2);  // same seed, same shapes -> same params
  auto out = forward(ablated, images, Tensor<float>(), false);
  EXPECT_EQ(out.logits.values(), logits_gated.values());
}

TEST(Forward, FiniteOutputsOnUnitRangeInputs) {
  auto c = small_config();
  auto bundle = build_model<float>(c);
  Rng rng(9);
  NoGrad<float> ng;
  for (int it = 0; it < 3; ++it) {
    auto out = forward(bundle, random_images<float>(2, 16, rng), random_meta<float>(2, 6, rng));
    for (auto v : out.logits.values()) ASSERT_TRUE(std::isfinite(v));
    for (auto v : out.sr_pred.values()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Forward, BatchSizeMismatchThrows) {
  auto c = small_config();
  auto bundle = build_model<float>(c);
  Rng rng(10);
  EXPECT_THROW(forward(bundle, random_images<float>(2, 16, rng), random_meta<float>(3, 6, rng)),
               ShapeError);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  testutil::TempDir dir("ckpt");
  auto c = small_config();
  auto bundle = build_model<float>(c);
  nlohmann::json aux{{"note", "fitted"}, {"classes", {"A", "B"}}};
  auto p1 = dir.path() / "a.ckpt";
  auto p2 = dir.path() / "b.ckpt";
  save_checkpoint(bundle, aux, p1);
  auto [loaded, aux2] = load_checkpoint(p1);
  save_checkpoint(loaded, aux2, p2);
  EXPECT_EQ(read_file_bytes(p1), read_file_bytes(p2));

  // loaded model reproduces logits bit-exactly
  Rng rng(11);
  auto images = random_images<float>(2, 16, rng);
  auto meta = random_meta<float>(2, 6, rng);
  NoGrad<float> ng;
  auto a = forward(bundle, images, meta, false);
  auto b = forward(loaded, images, meta, false);
  EXPECT_EQ(a.logits.values(), b.logits.values());
}

TEST(Checkpoint, CorruptedMagicIsVersionError) {
  testutil::TempDir dir("ckpt");
  auto bundle = build_model<float>(small_config());
  auto path = dir.path() / "a.ckpt";
  save_checkpoint(bundle, {}, path);
  auto bytes = read_file_bytes(path);
  bytes[0] = 'Z';
  write_file_bytes(path, bytes);
  EXPECT_THROW(load_checkpoint(path), VersionError);
}

TEST(Checkpoint, MismatchedTensorShapeIsShapeError) {
  testutil::TempDir dir("ckpt");
  auto c = small_config();
  auto bundle = build_model<float>(c);
  // hand-build a checkpoint whose first tensor has the wrong extents
  ByteWriter w;
  const char* magic = "DFCK";
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(magic), 4));
  w.u32(kCheckpointVersion);
  nlohmann::json meta{{"config", c.to_json()}, {"aux", nlohmann::json::object()}};
  w.str(meta.dump());
  w.u32(static_cast<std::uint32_t>(bundle.params.size()));
  for (const auto& [name, t] : bundle.params) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.ndim()));
    bool first = true;
    for (auto d : t.shape()) {
      w.i64(first ? d + 1 : d);
      first = false;
    }
    for (std::int64_t i = 0; i < t.numel(); ++i) w.f32(0.0f);
  }
  auto path = dir.path() / "bad.ckpt";
  write_file_bytes(path, w.bytes());
  EXPECT_THROW(load_checkpoint(path), ShapeError);

  // truncated payload surfaces as FormatError
  auto bytes = read_file_bytes(path);
  bytes.resize(bytes.size() / 3);
  write_file_bytes(path, bytes);
  EXPECT_THROW(load_checkpoint(path), Error);
}
