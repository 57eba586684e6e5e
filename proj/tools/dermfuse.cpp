// dermfuse: multimodal skin-lesion classifier with an auxiliary upscaling
// task. Subcommands: synth, preprocess, train, evaluate, predict.

#include <CLI11.hpp>
#include <json.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dermfuse/dataset.hpp"
#include "dermfuse/evaluation.hpp"
#include "dermfuse/image.hpp"
#include "dermfuse/metadata.hpp"
#include "dermfuse/model.hpp"
#include "dermfuse/serialize.hpp"
#include "dermfuse/synth.hpp"
#include "dermfuse/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dermfuse;

namespace {

struct PreprocessSettings {
  int size = 64;
  double sog_p = 6.0;
  double clahe_clip = 2.0;
  int clahe_tiles = 8;
  bool clahe_per_channel = false;
  bool skip_clahe = false;
  bool skip_color_constancy = false;

  json to_json() const {
    return json{{"size", size},
                {"sog_p", sog_p},
                {"clahe_clip", clahe_clip},
                {"clahe_tiles", clahe_tiles},
                {"clahe_per_channel", clahe_per_channel},
                {"skip_clahe", skip_clahe},
                {"skip_color_constancy", skip_color_constancy}};
  }

  static PreprocessSettings from_json(const json& j) {
    PreprocessSettings s;
    s.size = j.value("size", s.size);
    s.sog_p = j.value("sog_p", s.sog_p);
    s.clahe_clip = j.value("clahe_clip", s.clahe_clip);
    s.clahe_tiles = j.value("clahe_tiles", s.clahe_tiles);
    s.clahe_per_channel = j.value("clahe_per_channel", s.clahe_per_channel);
    s.skip_clahe = j.value("skip_clahe", s.skip_clahe);
    s.skip_color_constancy = j.value("skip_color_constancy", s.skip_color_constancy);
    return s;
  }

  Image apply(const Image& img) const {
    Image out = img;
    if (!skip_color_constancy) out = shades_of_gray(out, sog_p);
    if (!skip_clahe) out = clahe(out, clahe_clip, clahe_tiles, clahe_per_channel);
    if (out.height != size || out.width != size) out = resize_bilinear(out, size, size);
    return out;
  }
};

// Everything a run needs, merged from defaults < --config file < flags and
// persisted as resolved_config.json before any work starts.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string data_dir, images_dir, metadata_csv, schema_json, split_file, out_dir, checkpoint;
  std::string partition = "test";
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  bool group_by_patient = true;
  ImputeMode impute_mode = ImputeMode::statistic;
  PreprocessSettings preprocess;
  SynthConfig synth;
  bool paper_scale = false;
  std::string emit_sr_targets;  // preprocess: "", "bilinear" or "bicubic"

  void finalize() {
    if (paper_scale) {
      const ModelConfig tuned = paper_scale_config();
      model.input_size = tuned.input_size;
      model.encoder_channels = tuned.encoder_channels;
      preprocess.size = tuned.input_size;
    }
    model.seed = seed;
    train.seed = seed;
    synth.seed = seed;
  }

  json to_json(const std::string& command) const {
    return json{{"command", command},
                {"seed", seed},
                {"paths",
                 {{"data_dir", data_dir},
                  {"images_dir", images_dir},
                  {"metadata", metadata_csv},
                  {"schema", schema_json},
                  {"split_file", split_file},
                  {"out", out_dir},
                  {"checkpoint", checkpoint}}},
                {"partition", partition},
                {"model", model.to_json()},
                {"train",
                 {{"epochs", train.epochs},
                  {"batch_size", train.batch_size},
                  {"base_lr", train.base_lr},
                  {"step_size", train.step_size},
                  {"gamma", train.gamma},
                  {"sr_method", to_string(train.sr_method)},
                  {"augment",
                   {{"hflip_prob", train.augment.hflip_prob},
                    {"vflip_prob", train.augment.vflip_prob},
                    {"scale_lo", train.augment.scale_lo},
                    {"scale_hi", train.augment.scale_hi},
                    {"brightness", train.augment.brightness},
                    {"contrast", train.augment.contrast},
                    {"saturation", train.augment.saturation},
                    {"noise_sigma", train.augment.noise_sigma}}}}},
                {"loss",
                 {{"alpha", loss.alpha},
                  {"beta", loss.beta},
                  {"weight_mode", to_string(loss.weight_mode)},
                  {"ce_form", to_string(loss.ce_form)}}},
                {"split", {{"ratios", ratios}, {"group_by_patient", group_by_patient}}},
                {"impute_mode", to_string(impute_mode)},
                {"preprocess", preprocess.to_json()},
                {"synth",
                 {{"n_classes", synth.n_classes},
                  {"patterns", synth.patterns},
                  {"samples_per_class", synth.samples_per_class},
                  {"image_size", synth.image_size},
                  {"noise_sigma", synth.noise_sigma},
                  {"meta_missing_fraction", synth.meta_missing_fraction},
                  {"emit_sr_targets", synth.emit_sr_targets}}},
                {"paper_scale", paper_scale}};
  }

  void apply_json(const json& j) {
    seed = j.value("seed", seed);
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      data_dir = p.value("data_dir", data_dir);
      images_dir = p.value("images_dir", images_dir);
      metadata_csv = p.value("metadata", metadata_csv);
      schema_json = p.value("schema", schema_json);
      split_file = p.value("split_file", split_file);
      out_dir = p.value("out", out_dir);
      checkpoint = p.value("checkpoint", checkpoint);
    }
    partition = j.value("partition", partition);
    if (j.contains("model")) model = ModelConfig::from_json(j.at("model"));
    if (j.contains("train")) {
      const auto& t = j.at("train");
      train.epochs = t.value("epochs", train.epochs);
      train.batch_size = t.value("batch_size", train.batch_size);
      train.base_lr = t.value("base_lr", train.base_lr);
      train.step_size = t.value("step_size", train.step_size);
      train.gamma = t.value("gamma", train.gamma);
      if (t.contains("sr_method")) {
        train.sr_method = sr_method_from_string(t.at("sr_method").get<std::string>());
      }
      if (t.contains("augment")) {
        const auto& a = t.at("augment");
        train.augment.hflip_prob = a.value("hflip_prob", train.augment.hflip_prob);
        train.augment.vflip_prob = a.value("vflip_prob", train.augment.vflip_prob);
        train.augment.scale_lo = a.value("scale_lo", train.augment.scale_lo);
        train.augment.scale_hi = a.value("scale_hi", train.augment.scale_hi);
        train.augment.brightness = a.value("brightness", train.augment.brightness);
        train.augment.contrast = a.value("contrast", train.augment.contrast);
        train.augment.saturation = a.value("saturation", train.augment.saturation);
        train.augment.noise_sigma = a.value("noise_sigma", train.augment.noise_sigma);
      }
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      loss.alpha = l.value("alpha", loss.alpha);
      loss.beta = l.value("beta", loss.beta);
      if (l.contains("weight_mode")) {
        loss.weight_mode = weight_mode_from_string(l.at("weight_mode").get<std::string>());
      }
      if (l.contains("ce_form")) loss.ce_form = ce_form_from_string(l.at("ce_form").get<std::string>());
    }
    if (j.contains("split")) {
      const auto& s = j.at("split");
      if (s.contains("ratios")) ratios = s.at("ratios").get<std::array<double, 3>>();
      group_by_patient = s.value("group_by_patient", group_by_patient);
    }
    if (j.contains("impute_mode")) {
      impute_mode = impute_mode_from_string(j.at("impute_mode").get<std::string>());
    }
    if (j.contains("preprocess")) preprocess = PreprocessSettings::from_json(j.at("preprocess"));
    if (j.contains("synth")) {
      const auto& s = j.at("synth");
      synth.n_classes = s.value("n_classes", synth.n_classes);
      synth.patterns = s.value("patterns", synth.patterns);
      synth.samples_per_class = s.value("samples_per_class", synth.samples_per_class);
      synth.image_size = s.value("image_size", synth.image_size);
      synth.noise_sigma = s.value("noise_sigma", synth.noise_sigma);
      synth.meta_missing_fraction = s.value("meta_missing_fraction", synth.meta_missing_fraction);
      synth.emit_sr_targets = s.value("emit_sr_targets", synth.emit_sr_targets);
    }
    paper_scale = j.value("paper_scale", paper_scale);
  }
};

fs::path prepare_out_dir(const RunConfig& cfg, const std::string& command) {
  if (cfg.out_dir.empty()) throw ConfigError(command + ": --out is required");
  fs::path out(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IOError("cannot create output directory " + out.string() + ": " + ec.message());
  write_file_text(out / "resolved_config.json", cfg.to_json(command).dump(2) + "\n");
  return out;
}

DatasetPaths dataset_paths(const RunConfig& cfg) {
  DatasetPaths p;
  p.data_dir = cfg.data_dir;
  if (!cfg.images_dir.empty()) p.images_dir = cfg.images_dir;
  if (!cfg.metadata_csv.empty()) p.metadata_csv = cfg.metadata_csv;
  if (!cfg.schema_json.empty()) p.schema_json = cfg.schema_json;
  return p;
}

int cmd_synth(RunConfig cfg) {
  cfg.finalize();
  fs::path out = prepare_out_dir(cfg, "synth");
  generate(cfg.synth, out);
  std::printf("synth: wrote %d samples (%d classes x %d) under %s\n",
              cfg.synth.n_classes * cfg.synth.samples_per_class, cfg.synth.n_classes,
              cfg.synth.samples_per_class, out.string().c_str());
  return 0;
}

int cmd_preprocess(RunConfig cfg) {
  cfg.finalize();
  if (cfg.data_dir.empty()) throw ConfigError("preprocess: --data-dir is required");
  fs::path out = prepare_out_dir(cfg, "preprocess");
  const DatasetPaths paths = dataset_paths(cfg).resolved();
  std::error_code ec;
  fs::create_directories(out / "images", ec);

  MetadataSchema schema = MetadataSchema::load(paths.schema_json);
  auto records = parse_csv(paths.metadata_csv, schema);

  std::map<std::string, std::string> hashes;
  std::vector<std::string> failures;
  for (const auto& rec : records) {
    const std::string& id = rec.sample_id(schema);
    try {
      fs::path src = resolve_image_path(paths.images_dir, id);
      Image img = cfg.preprocess.apply(load_image(src));
      fs::path dst = resolve_image_path(out / "images", id);
      save_image(img, dst);
      hashes["images/" + dst.filename().string()] = fnv1a64_hex(read_file_bytes(dst));
      if (!cfg.emit_sr_targets.empty()) {
        Image target = sr_target(img, sr_method_from_string(cfg.emit_sr_targets), 2);
        fs::path sr_dst = sr_sibling_path(dst);
        save_image(target, sr_dst);
        hashes["images/" + sr_dst.filename().string()] = fnv1a64_hex(read_file_bytes(sr_dst));
      }
    } catch (const Error& e) {
      failures.push_back(id + ": " + e.what());
    }
  }

  fs::copy_file(paths.metadata_csv, out / "metadata.csv", fs::copy_options::overwrite_existing);
  fs::copy_file(paths.schema_json, out / "schema.json", fs::copy_options::overwrite_existing);

  json manifest{{"settings", cfg.preprocess.to_json()}, {"files", hashes}, {"failures", failures}};
  write_file_text(out / "manifest.json", manifest.dump(2) + "\n");
  std::printf("preprocess: %zu files written, %zu failed, manifest at %s\n", hashes.size(),
              failures.size(), (out / "manifest.json").string().c_str());
  if (!failures.empty()) {
    for (const auto& f : failures) std::fprintf(stderr, "preprocess failure: %s\n", f.c_str());
    return 1;
  }
  return 0;
}

json training_aux(const RunConfig& cfg, const PipelineData& data, const FitResult<float>& result) {
  return json{{"schema", data.schema.to_json()},
              {"class_names", data.class_names},
              {"imputer", data.imputer_stats.to_json()},
              {"split", data.split.to_json()},
              {"preprocess", data.preprocess_settings.is_null() ? cfg.preprocess.to_json()
                                                                : data.preprocess_settings},
              {"fit", {{"best_epoch", result.best_epoch}, {"best_val_bacc", result.best_val_bacc}}}};
}

int cmd_train(RunConfig cfg) {
  cfg.finalize();
  if (cfg.data_dir.empty()) throw ConfigError("train: --data-dir is required");
  fs::path out = prepare_out_dir(cfg, "train");

  SplitSpec split_spec;
  split_spec.ratios = cfg.ratios;
  split_spec.seed = cfg.seed;
  split_spec.group_by_patient = cfg.group_by_patient;
  if (!cfg.split_file.empty()) split_spec.split_file = cfg.split_file;

  PipelineData data = load_pipeline_data(dataset_paths(cfg), split_spec, cfg.impute_mode, cfg.seed,
                                         cfg.train.sr_method == SrMethod::file);
  if (data.items.front().image.height != cfg.model.input_size ||
      data.items.front().image.width != cfg.model.input_size) {
    throw ConfigError("train: images are " + std::to_string(data.items.front().image.height) +
                      "px but the model expects " + std::to_string(cfg.model.input_size) +
                      "px; run preprocess with a matching --size or set --input-size");
  }
  cfg.model.meta_input_dim = static_cast<int>(data.schema.encoded_length());
  cfg.model.n_classes = data.schema.n_classes();

  ModelBundle<float> bundle = build_model<float>(cfg.model);
  std::printf("train: %lld parameters, %zu train / %zu val / %zu test samples\n",
              static_cast<long long>(bundle.parameter_count()), data.train_idx.size(),
              data.val_idx.size(), data.test_idx.size());

  const fs::path history_path = out / "history.jsonl";
  write_file_text(history_path, "");
  FitHooks<float> hooks;
  hooks.on_epoch = [&](int epoch, const json& row, const ModelBundle<float>& live) {
    const std::string line = row.dump() + "\n";
    std::FILE* f = std::fopen(history_path.string().c_str(), "ab");
    if (f) {
      std::fwrite(line.data(), 1, line.size(), f);
      std::fclose(f);
    }
    FitResult<float> partial;
    partial.best_epoch = epoch;
    save_checkpoint(live, training_aux(cfg, data, partial), out / "last.ckpt");
    std::printf("epoch %3d  lr %.5f  loss %.4f  val_bacc %.4f\n", epoch, row.at("lr").get<double>(),
                row.at("loss_final").get<double>(), row.at("val_bacc").get<double>());
    std::fflush(stdout);
  };

  FitResult<float> result = fit(bundle, data, cfg.loss, cfg.train, &hooks);
  save_checkpoint(result.best, training_aux(cfg, data, result), out / "best.ckpt");
  save_checkpoint(bundle, training_aux(cfg, data, result), out / "last.ckpt");
  std::printf("train: best val_bacc %.4f at epoch %d; checkpoints under %s\n", result.best_val_bacc,
              result.best_epoch, out.string().c_str());
  return 0;
}

int cmd_evaluate(RunConfig cfg) {
  cfg.finalize();
  if (cfg.checkpoint.empty()) throw ConfigError("evaluate: --checkpoint is required");
  if (cfg.data_dir.empty()) throw ConfigError("evaluate: --data-dir is required");
  if (!fs::exists(cfg.checkpoint)) throw IOError("evaluate: checkpoint not found: " + cfg.checkpoint);
  fs::path out = prepare_out_dir(cfg, "evaluate");

  auto [bundle, aux] = load_checkpoint(cfg.checkpoint);
  SplitAssignment stored_split = SplitAssignment::from_json(aux.at("split"));
  ImputerStats stored_stats = ImputerStats::from_json(aux.at("imputer"));
  PipelineData data = load_pipeline_data(dataset_paths(cfg), SplitSpec{}, ImputeMode::statistic,
                                         cfg.seed, false, &stored_split, &stored_stats);

  const Partition part = partition_from_string(cfg.partition);
  const auto& indices = data.indices_of(part);
  if (indices.empty()) throw StateError("evaluate: partition '" + cfg.partition + "' is empty");

  EvalReport report = evaluate(bundle, data, indices);
  write_file_text(out / "report.json", report.to_json().dump(2) + "\n");
  write_confusion_csv(report.cm, out / "confusion.csv");
  write_roc_csv(report, out / "roc.csv");
  export_embeddings(bundle, data, indices, out / "embeddings.csv");
  std::printf("evaluate[%s]: n=%lld acc=%.4f bacc=%.4f auc_macro=%.4f -> %s\n",
              cfg.partition.c_str(), static_cast<long long>(report.total), report.acc, report.bacc,
              report.auc_macro, out.string().c_str());
  return 0;
}

int cmd_predict(RunConfig cfg, const std::string& image_path, const std::string& meta_json_arg) {
  cfg.finalize();
  if (cfg.checkpoint.empty()) throw ConfigError("predict: --checkpoint is required");
  if (!fs::exists(cfg.checkpoint)) throw IOError("predict: checkpoint not found: " + cfg.checkpoint);

  auto [bundle, aux] = load_checkpoint(cfg.checkpoint);
  MetadataSchema schema = MetadataSchema::from_json(aux.at("schema"));
  PreprocessSettings prep = PreprocessSettings::from_json(aux.at("preprocess"));
  prep.size = bundle.config.input_size;

  json meta_obj;
  try {
    meta_obj = meta_json_arg.rfind('@', 0) == 0
                   ? json::parse(read_file_text(meta_json_arg.substr(1)))
                   : json::parse(meta_json_arg);
  } catch (const json::exception& e) {
    throw ParseError(std::string("predict: bad --meta-json: ") + e.what());
  }
  if (!meta_obj.is_object()) throw ParseError("predict: --meta-json must be a JSON object");
  for (const auto& [key, value] : meta_obj.items()) {
    if (!schema.find(key)) throw SchemaError("predict: metadata field '" + key + "' not in schema");
  }

  MetadataRecord record;
  record.fields.resize(schema.columns.size());
  for (std::size_t i = 0; i < schema.columns.size(); ++i) {
    const auto& name = schema.columns[i].name;
    if (!meta_obj.contains(name)) continue;
    const auto& v = meta_obj.at(name);
    std::string raw = v.is_string() ? v.get<std::string>() : v.dump();
    if (schema.is_missing(raw)) raw.clear();
    record.fields[i] = raw;
  }

  Image img = prep.apply(load_image(image_path));
  EncodedMeta encoded = encode(record, schema);
  Imputer imputer;
  imputer.restore(ImputerStats::from_json(aux.at("imputer")));
  encoded = imputer.apply(schema, encoded);

  NoGrad<float> ng;
  std::vector<const Image*> images{&img};
  std::vector<const EncodedMeta*> metas{&encoded};
  auto fwd = forward(bundle, image_batch<float>(images), meta_batch<float>(metas), false);
  Tensor<float> probs = softmax(fwd.logits);

  const auto class_names = aux.at("class_names").get<std::vector<std::string>>();
  int best = 0;
  for (int j = 1; j < bundle.config.n_classes; ++j) {
    if (probs.values()[static_cast<std::size_t>(j)] > probs.values()[static_cast<std::size_t>(best)]) {
      best = j;
    }
  }
  std::printf("prediction: %s\n", class_names.at(static_cast<std::size_t>(best)).c_str());
  for (int j = 0; j < bundle.config.n_classes; ++j) {
    std::printf("p(%s) = %.6f\n", class_names.at(static_cast<std::size_t>(j)).c_str(),
                probs.values()[static_cast<std::size_t>(j)]);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal skin-lesion classification with an auxiliary upscaling task"};
  app.require_subcommand(1);

  RunConfig cfg;
  std::string config_path, image_path, meta_json_arg;
  std::string sr_method = "bilinear", fusion = "multiply", ce_form = "as_written",
              impute_mode = "statistic";

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file (defaults < file < flags)");
    cmd->add_option("--out", cfg.out_dir, "output directory");
    cmd->add_option("--seed", cfg.seed, "run seed");
    cmd->add_option("--data-dir", cfg.data_dir,
                    "dataset directory (images/ + metadata.csv + schema.json)");
    cmd->add_option("--images-dir", cfg.images_dir, "override images directory");
    cmd->add_option("--metadata", cfg.metadata_csv, "override metadata CSV path");
    cmd->add_option("--schema", cfg.schema_json, "override schema JSON path");
    cmd->add_option("--split-file", cfg.split_file, "fixed split file (CSV: sample_id,partition)");
    cmd->add_flag("--paper-scale", cfg.paper_scale,
                  "224px inputs, five encoder stages, 448px upscale targets");
    return cmd;
  };

  auto* synth_cmd = add_common(app.add_subcommand("synth", "generate a synthetic multimodal dataset"));
  synth_cmd->get_option("--out")->required();
  synth_cmd->add_option("--n-classes", cfg.synth.n_classes, "number of classes");
  synth_cmd->add_option("--patterns", cfg.synth.patterns, "distinct image patterns");
  synth_cmd->add_option("--samples-per-class", cfg.synth.samples_per_class, "samples per class");
  synth_cmd->add_option("--image-size", cfg.synth.image_size, "square image extent");
  synth_cmd->add_option("--noise-sigma", cfg.synth.noise_sigma, "pixel noise sigma");
  synth_cmd->add_option("--meta-missing-fraction", cfg.synth.meta_missing_fraction,
                        "missing rate injected into nuisance metadata columns");
  synth_cmd->add_flag("--emit-sr-targets", cfg.synth.emit_sr_targets,
                      "write bicubic x2 .sr.png siblings");

  auto* prep_cmd = add_common(app.add_subcommand("preprocess", "color constancy + CLAHE + resize"));
  prep_cmd->add_option("--size", cfg.preprocess.size, "output square extent");
  prep_cmd->add_option("--sog-p", cfg.preprocess.sog_p, "shades-of-gray Minkowski order");
  prep_cmd->add_option("--clahe-clip", cfg.preprocess.clahe_clip, "CLAHE clip limit");
  prep_cmd->add_option("--clahe-tiles", cfg.preprocess.clahe_tiles, "CLAHE tile grid");
  prep_cmd->add_flag("--clahe-per-channel", cfg.preprocess.clahe_per_channel,
                     "equalize RGB channels independently instead of luma");
  prep_cmd->add_flag("--skip-clahe", cfg.preprocess.skip_clahe, "skip the CLAHE stage");
  prep_cmd->add_flag("--skip-color-constancy", cfg.preprocess.skip_color_constancy,
                     "skip the color constancy stage");
  prep_cmd->add_option("--emit-sr-targets", cfg.emit_sr_targets,
                       "also write x2 .sr.png siblings (bilinear|bicubic)");

  auto* train_cmd = add_common(app.add_subcommand("train", "train the multimodal model"));
  train_cmd->add_option("--epochs", cfg.train.epochs, "training epochs");
  train_cmd->add_option("--batch-size", cfg.train.batch_size, "batch size");
  train_cmd->add_option("--lr", cfg.train.base_lr, "initial learning rate");
  train_cmd->add_option("--step-size", cfg.train.step_size, "epochs per learning-rate decay");
  train_cmd->add_option("--gamma", cfg.train.gamma, "learning-rate decay factor");
  auto* sr_opt = train_cmd->add_option("--sr-method", sr_method, "bilinear|bicubic|file");
  auto* fusion_opt = train_cmd->add_option("--fusion", fusion, "multiply|concat");
  auto* ce_opt = train_cmd->add_option("--ce-form", ce_form, "as_written|categorical");
  train_cmd->add_option("--alpha", cfg.loss.alpha, "classification loss weight");
  train_cmd->add_option("--beta", cfg.loss.beta, "upscaling loss weight");
  auto* impute_opt = train_cmd->add_option("--impute-mode", impute_mode, "statistic|autoencoder");
  train_cmd->add_flag("--image-only", cfg.model.image_only,
                      "ablation: metadata features replaced by ones");
  train_cmd->add_option("--input-size", cfg.model.input_size, "model input extent");
  train_cmd->add_option("--encoder-channels", cfg.model.encoder_channels, "encoder stage widths");
  train_cmd->add_option("--fusion-dim", cfg.model.fusion_dim, "fused feature length");
  train_cmd->add_option("--meta-dims", cfg.model.meta_dims, "metadata tower widths");
  train_cmd->add_option("--classifier-hidden", cfg.model.classifier_hidden,
                        "classifier hidden width");
  train_cmd->add_option("--ratios", cfg.ratios, "train/val/test ratios");
  train_cmd->add_flag("!--no-group-by-patient", cfg.group_by_patient,
                      "allow lesions of one patient to cross partitions");

  auto* eval_cmd = add_common(app.add_subcommand("evaluate", "metric suite over one partition"));
  eval_cmd->add_option("--checkpoint", cfg.checkpoint, "trained checkpoint")->required();
  eval_cmd->add_option("--partition", cfg.partition, "train|val|test");

  auto* predict_cmd = add_common(app.add_subcommand("predict", "classify one image + metadata row"));
  predict_cmd->add_option("--checkpoint", cfg.checkpoint, "trained checkpoint")->required();
  predict_cmd->add_option("--image", image_path, "input image (png/ppm)")->required();
  predict_cmd->add_option("--meta-json", meta_json_arg,
                          "metadata row as a JSON object, or @file to read one")
      ->required();

  try {
    app.parse(argc, argv);
    if (!config_path.empty()) {
      json file_cfg;
      try {
        file_cfg = json::parse(read_file_text(config_path));
      } catch (const json::exception& e) {
        throw ParseError("config " + config_path + ": " + e.what());
      }
      // precedence defaults < file < flags: rebuild from the file, then let a
      // second parse re-apply only the flags that were actually given
      RunConfig merged;
      merged.apply_json(file_cfg);
      cfg = merged;
      sr_method = to_string(cfg.train.sr_method);
      fusion = to_string(cfg.model.fusion_mode);
      ce_form = to_string(cfg.loss.ce_form);
      impute_mode = to_string(cfg.impute_mode);
      app.clear();
      app.parse(argc, argv);
    }
    if (sr_opt->count()) cfg.train.sr_method = sr_method_from_string(sr_method);
    if (fusion_opt->count()) cfg.model.fusion_mode = fusion_mode_from_string(fusion);
    if (ce_opt->count()) cfg.loss.ce_form = ce_form_from_string(ce_form);
    if (impute_opt->count()) cfg.impute_mode = impute_mode_from_string(impute_mode);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }

  try {
    if (synth_cmd->parsed()) return cmd_synth(cfg);
    if (prep_cmd->parsed()) return cmd_preprocess(cfg);
    if (train_cmd->parsed()) return cmd_train(cfg);
    if (eval_cmd->parsed()) return cmd_evaluate(cfg);
    if (predict_cmd->parsed()) return cmd_predict(cfg, image_path, meta_json_arg);
    std::fprintf(stderr, "no subcommand given\n");
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
