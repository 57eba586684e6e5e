#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dermfuse/errors.hpp"
#include "dermfuse/nn.hpp"
#include "dermfuse/optim.hpp"
#include "dermfuse/rng.hpp"
#include "dermfuse/serialize.hpp"
#include "dermfuse/tensor.hpp"

namespace dermfuse {

enum class ColumnKind { categorical, numeric, identifier, label };

inline std::string to_string(ColumnKind k) {
  switch (k) {
    case ColumnKind::categorical: return "categorical";
    case ColumnKind::numeric: return "numeric";
    case ColumnKind::identifier: return "identifier";
    default: return "label";
  }
}

inline ColumnKind column_kind_from_string(const std::string& s) {
  if (s == "categorical") return ColumnKind::categorical;
  if (s == "numeric") return ColumnKind::numeric;
  if (s == "identifier") return ColumnKind::identifier;
  if (s == "label") return ColumnKind::label;
  throw SchemaError("unknown column kind: " + s);
}

struct Column {
  std::string name;
  ColumnKind kind = ColumnKind::categorical;
  std::vector<std::string> vocab;  // categorical and label
  double lo = 0.0, hi = 1.0;       // numeric normalization bounds

  std::optional<int> vocab_index(const std::string& value) const {
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      if (vocab[i] == value) return static_cast<int>(i);
    }
    return std::nullopt;
  }
};

// Declares the clinical CSV layout: column kinds, category vocabularies and
// numeric bounds come from a schema file rather than from the data, so the
// encoding is fixed before any record is seen.
struct MetadataSchema {
  std::vector<Column> columns;
  std::vector<std::string> missing_markers = {""};
  std::string sample_id_column;
  std::string patient_id_column;

  void validate() const {
    int labels = 0;
    for (const auto& c : columns) {
      if (c.name.empty()) throw SchemaError("schema: empty column name");
      if (c.kind == ColumnKind::label) ++labels;
      if ((c.kind == ColumnKind::categorical || c.kind == ColumnKind::label) && c.vocab.empty()) {
        throw SchemaError("schema: column '" + c.name + "' needs a vocabulary");
      }
      if (c.kind == ColumnKind::numeric && !(c.lo < c.hi)) {
        throw SchemaError("schema: column '" + c.name + "' needs bounds with min < max");
      }
    }
    if (labels != 1) throw SchemaError("schema: exactly one label column required, found " +
                                       std::to_string(labels));
    auto check_id = [&](const std::string& name, const char* what) {
      const Column* c = find(name);
      if (!c) throw SchemaError(std::string("schema: ") + what + " column '" + name + "' not declared");
      if (c->kind != ColumnKind::identifier) {
        throw SchemaError(std::string("schema: ") + what + " column '" + name + "' must be an identifier");
      }
    };
    check_id(sample_id_column, "sample id");
    check_id(patient_id_column, "patient id");
  }

  const Column* find(const std::string& name) const {
    for (const auto& c : columns) {
      if (c.name == name) return &c;
    }
    return nullptr;
  }

  int column_index(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (columns[i].name == name) return static_cast<int>(i);
    }
    throw SchemaError("schema: no column named '" + name + "'");
  }

  const Column& label_column() const {
    for (const auto& c : columns) {
      if (c.kind == ColumnKind::label) return c;
    }
    throw SchemaError("schema: no label column");
  }

  const std::vector<std::string>& class_names() const { return label_column().vocab; }
  int n_classes() const { return static_cast<int>(class_names().size()); }

  // Fixed length of the encoded vector: one slot per category plus one per
  // numeric column.
  std::int64_t encoded_length() const {
    std::int64_t n = 0;
    for (const auto& c : columns) {
      if (c.kind == ColumnKind::categorical) n += static_cast<std::int64_t>(c.vocab.size());
      if (c.kind == ColumnKind::numeric) n += 1;
    }
    return n;
  }

  bool is_missing(const std::string& raw) const {
    for (const auto& m : missing_markers) {
      if (raw == m) return true;
    }
    return false;
  }

  nlohmann::json to_json() const {
    nlohmann::json cols = nlohmann::json::array();
    for (const auto& c : columns) {
      nlohmann::json jc;
      jc["name"] = c.name;
      jc["kind"] = to_string(c.kind);
      if (c.kind == ColumnKind::categorical || c.kind == ColumnKind::label) jc["vocab"] = c.vocab;
      if (c.kind == ColumnKind::numeric) {
        jc["min"] = c.lo;
        jc["max"] = c.hi;
      }
      cols.push_back(jc);
    }
    return nlohmann::json{{"columns", cols},
                          {"missing_markers", missing_markers},
                          {"sample_id_column", sample_id_column},
                          {"patient_id_column", patient_id_column}};
  }

  static MetadataSchema from_json(const nlohmann::json& j) {
    MetadataSchema s;
    if (!j.contains("columns")) throw SchemaError("schema json: missing 'columns'");
    for (const auto& jc : j.at("columns")) {
      Column c;
      c.name = jc.at("name").get<std::string>();
      c.kind = column_kind_from_string(jc.at("kind").get<std::string>());
      if (jc.contains("vocab")) c.vocab = jc.at("vocab").get<std::vector<std::string>>();
      if (jc.contains("min")) c.lo = jc.at("min").get<double>();
      if (jc.contains("max")) c.hi = jc.at("max").get<double>();
      s.columns.push_back(std::move(c));
    }
    if (j.contains("missing_markers")) {
      s.missing_markers = j.at("missing_markers").get<std::vector<std::string>>();
    }
    s.sample_id_column = j.value("sample_id_column", "");
    s.patient_id_column = j.value("patient_id_column", "");
    s.validate();
    return s;
  }

  static MetadataSchema load(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file_text(path));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("schema " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }
};

// One CSV row, raw strings in schema column order; missing entries are
// normalized to the empty string.
struct MetadataRecord {
  std::vector<std::string> fields;

  const std::string& field(const MetadataSchema& schema, const std::string& column) const {
    return fields[static_cast<std::size_t>(schema.column_index(column))];
  }

  const std::string& sample_id(const MetadataSchema& schema) const {
    return field(schema, schema.sample_id_column);
  }

  const std::string& patient_id(const MetadataSchema& schema) const {
    return field(schema, schema.patient_id_column);
  }

  int label(const MetadataSchema& schema) const {
    const Column& lc = schema.label_column();
    auto idx = lc.vocab_index(field(schema, lc.name));
    if (!idx) throw SchemaError("record: label '" + field(schema, lc.name) + "' not in vocabulary");
    return *idx;
  }
};

namespace detail {

// RFC-4180: quoted fields, doubled quotes, newlines inside quotes, CRLF.
inline std::vector<std::pair<std::vector<std::string>, int>> parse_csv_rows(const std::string& text) {
  std::vector<std::pair<std::vector<std::string>, int>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool row_started = false;
  int line = 1, row_line = 1;

  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
  };
  auto end_row = [&] {
    end_field();
    rows.emplace_back(std::move(row), row_line);
    row.clear();
    row_started = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (!row_started) {
      row_started = true;
      row_line = line;
    }
    if (in_quotes) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (ch == '\n') ++line;
        field.push_back(ch);
      }
    } else if (ch == '"') {
      in_quotes = true;
    } else if (ch == ',') {
      end_field();
    } else if (ch == '\r') {
      // swallowed; the following \n ends the row
    } else if (ch == '\n') {
      ++line;
      end_row();
    } else {
      field.push_back(ch);
    }
  }
  if (in_quotes) throw ParseError("csv: unterminated quote at line " + std::to_string(row_line));
  if (row_started || !field.empty()) end_row();
  return rows;
}

}  // namespace detail

inline std::vector<MetadataRecord> parse_csv_text(const std::string& text,
                                                  const MetadataSchema& schema) {
  schema.validate();
  auto rows = detail::parse_csv_rows(text);
  if (rows.empty()) throw ParseError("csv: empty file");

  const auto& header = rows.front().first;
  std::vector<int> positions(schema.columns.size(), -1);
  for (std::size_t ci = 0; ci < schema.columns.size(); ++ci) {
    for (std::size_t hi = 0; hi < header.size(); ++hi) {
      if (header[hi] == schema.columns[ci].name) {
        positions[ci] = static_cast<int>(hi);
        break;
      }
    }
    if (positions[ci] < 0) {
      throw SchemaError("csv: missing column '" + schema.columns[ci].name + "' in header");
    }
  }

  const Column& label = schema.label_column();
  std::vector<MetadataRecord> records;
  records.reserve(rows.size() - 1);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& [row, line] = rows[r];
    if (row.size() == 1 && row[0].empty()) continue;  // trailing blank line
    if (row.size() != header.size()) {
      throw ParseError("csv line " + std::to_string(line) + ": expected " +
                       std::to_string(header.size()) + " fields, got " + std::to_string(row.size()));
    }
    MetadataRecord rec;
    rec.fields.resize(schema.columns.size());
    for (std::size_t ci = 0; ci < schema.columns.size(); ++ci) {
      std::string value = row[static_cast<std::size_t>(positions[ci])];
      if (schema.is_missing(value)) value.clear();
      rec.fields[ci] = std::move(value);
    }
    const std::string& lv = rec.fields[static_cast<std::size_t>(schema.column_index(label.name))];
    if (lv.empty() || !label.vocab_index(lv)) {
      throw SchemaError("csv line " + std::to_string(line) + ": label '" + lv +
                        "' not in class vocabulary");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::vector<MetadataRecord> parse_csv(const std::filesystem::path& path,
                                             const MetadataSchema& schema) {
  return parse_csv_text(read_file_text(path), schema);
}

// Fixed-length numeric encoding of one record plus a mask of the positions
// that were missing in the raw data.
struct EncodedMeta {
  std::vector<float> values;
  std::vector<std::uint8_t> missing;
};

// Categorical -> one-hot (all-zero group while missing), numeric ->
// (v - lo) / (hi - lo) clipped to [0,1]. A categorical value outside the
// schema vocabulary is treated as missing.
inline EncodedMeta encode(const MetadataRecord& record, const MetadataSchema& schema) {
  if (record.fields.size() != schema.columns.size()) {
    throw SchemaError("encode: record does not match schema column count");
  }
  EncodedMeta out;
  out.values.assign(static_cast<std::size_t>(schema.encoded_length()), 0.0f);
  out.missing.assign(out.values.size(), 0);
  std::size_t pos = 0;
  for (std::size_t ci = 0; ci < schema.columns.size(); ++ci) {
    const Column& col = schema.columns[ci];
    const std::string& raw = record.fields[ci];
    if (col.kind == ColumnKind::categorical) {
      const std::size_t width = col.vocab.size();
      auto idx = raw.empty() ? std::nullopt : col.vocab_index(raw);
      if (idx) {
        out.values[pos + static_cast<std::size_t>(*idx)] = 1.0f;
      } else {
        for (std::size_t k = 0; k < width; ++k) out.missing[pos + k] = 1;
      }
      pos += width;
    } else if (col.kind == ColumnKind::numeric) {
      if (raw.empty()) {
        out.missing[pos] = 1;
      } else {
        char* end = nullptr;
        const double v = std::strtod(raw.c_str(), &end);
        if (end == raw.c_str() || *end != '\0') {
          throw ParseError("encode: column '" + col.name + "': cannot parse numeric value '" + raw + "'");
        }
        out.values[pos] = static_cast<float>(std::clamp((v - col.lo) / (col.hi - col.lo), 0.0, 1.0));
      }
      pos += 1;
    }
  }
  return out;
}

enum class ImputeMode { statistic, autoencoder };

inline ImputeMode impute_mode_from_string(const std::string& s) {
  if (s == "statistic") return ImputeMode::statistic;
  if (s == "autoencoder") return ImputeMode::autoencoder;
  throw ConfigError("unknown impute mode: " + s);
}

inline std::string to_string(ImputeMode m) {
  return m == ImputeMode::statistic ? "statistic" : "autoencoder";
}

// Training-set statistics used to fill missing entries: per categorical
// column the modal category, per numeric column the median (in normalized
// units). Serialized into checkpoints so inference can impute a bare record.
struct ImputerStats {
  struct Entry {
    std::string column;
    bool categorical = false;
    int mode_index = 0;
    double median = 0.5;
  };
  std::vector<Entry> entries;

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : entries) {
      if (e.categorical) {
        arr.push_back({{"column", e.column}, {"mode_index", e.mode_index}});
      } else {
        arr.push_back({{"column", e.column}, {"median", e.median}});
      }
    }
    return arr;
  }

  static ImputerStats from_json(const nlohmann::json& j) {
    ImputerStats s;
    for (const auto& je : j) {
      Entry e;
      e.column = je.at("column").get<std::string>();
      e.categorical = je.contains("mode_index");
      if (e.categorical) {
        e.mode_index = je.at("mode_index").get<int>();
      } else {
        e.median = je.at("median").get<double>();
      }
      s.entries.push_back(std::move(e));
    }
    return s;
  }
};

namespace detail {

inline ImputerStats fit_statistics(const MetadataSchema& schema,
                                   const std::vector<EncodedMeta>& train) {
  ImputerStats stats;
  std::size_t pos = 0;
  for (const auto& col : schema.columns) {
    if (col.kind == ColumnKind::categorical) {
      const std::size_t width = col.vocab.size();
      std::vector<double> counts(width, 0.0);
      for (const auto& e : train) {
        if (e.missing[pos]) continue;
        for (std::size_t k = 0; k < width; ++k) counts[k] += e.values[pos + k];
      }
      int mode = 0;
      for (std::size_t k = 1; k < width; ++k) {
        if (counts[k] > counts[static_cast<std::size_t>(mode)]) mode = static_cast<int>(k);
      }
      stats.entries.push_back({col.name, true, mode, 0.0});
      pos += width;
    } else if (col.kind == ColumnKind::numeric) {
      std::vector<float> observed;
      for (const auto& e : train) {
        if (!e.missing[pos]) observed.push_back(e.values[pos]);
      }
      double median = 0.5;
      if (!observed.empty()) {
        std::sort(observed.begin(), observed.end());
        const std::size_t m = observed.size() / 2;
        median = observed.size() % 2 ? observed[m]
                                     : 0.5 * (static_cast<double>(observed[m - 1]) + observed[m]);
      }
      stats.entries.push_back({col.name, false, 0, median});
      pos += 1;
    }
  }
  return stats;
}

}  // namespace detail

// Fills missing entries of encoded records. Fit on the training partition
// only; observed entries are never modified by apply().
class Imputer {
 public:
  void fit(const MetadataSchema& schema, const std::vector<EncodedMeta>& train, ImputeMode mode,
           std::uint64_t seed = 0) {
    if (train.empty()) throw StateError("imputer: training partition is empty");
    mode_ = mode;
    stats_ = detail::fit_statistics(schema, train);
    if (mode == ImputeMode::autoencoder) fit_autoencoder(schema, train, seed);
    fitted_ = true;
  }

  // Inference-time imputation from serialized statistics (no autoencoder).
  void restore(const ImputerStats& stats) {
    mode_ = ImputeMode::statistic;
    stats_ = stats;
    fitted_ = true;
  }

  EncodedMeta apply(const MetadataSchema& schema, const EncodedMeta& in) const {
    if (!fitted_) throw StateError("imputer: not fitted");
    bool any_missing = false;
    for (auto m : in.missing) any_missing |= m != 0;
    if (!any_missing) return in;
    if (mode_ == ImputeMode::autoencoder) return apply_autoencoder(schema, in);
    return apply_statistic(schema, in);
  }

  std::vector<EncodedMeta> apply_all(const MetadataSchema& schema,
                                     const std::vector<EncodedMeta>& in) const {
    std::vector<EncodedMeta> out;
    out.reserve(in.size());
    for (const auto& e : in) out.push_back(apply(schema, e));
    return out;
  }

  const ImputerStats& stats() const { return stats_; }
  ImputeMode mode() const { return mode_; }

 private:
  EncodedMeta apply_statistic(const MetadataSchema& schema, const EncodedMeta& in) const {
    EncodedMeta out = in;
    std::size_t pos = 0, entry = 0;
    for (const auto& col : schema.columns) {
      if (col.kind == ColumnKind::categorical) {
        const std::size_t width = col.vocab.size();
        if (in.missing[pos]) {
          for (std::size_t k = 0; k < width; ++k) out.values[pos + k] = 0.0f;
          out.values[pos + static_cast<std::size_t>(stats_.entries[entry].mode_index)] = 1.0f;
        }
        pos += width;
        ++entry;
      } else if (col.kind == ColumnKind::numeric) {
        if (in.missing[pos]) out.values[pos] = static_cast<float>(stats_.entries[entry].median);
        pos += 1;
        ++entry;
      }
    }
    return out;
  }

  // Denoising reconstruction: random column groups are blanked during
  // training and the network learns to restore the observed values.
  void fit_autoencoder(const MetadataSchema& schema, const std::vector<EncodedMeta>& train,
                       std::uint64_t seed) {
    const std::int64_t dim = schema.encoded_length();
    const std::int64_t h1 = std::max<std::int64_t>(8, dim / 2);
    const std::int64_t h2 = std::max<std::int64_t>(4, dim / 4);
    const std::vector<std::int64_t> dims = {dim, h1, h2, h1, dim};
    Rng init(mix_seed(seed, 0x61656d6f64656cull));
    ae_weights_.clear();
    ae_biases_.clear();
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      Tensor<float> w({dims[i], dims[i + 1]});
      Tensor<float> b({dims[i + 1]});
      const double bound = std::sqrt(1.0 / static_cast<double>(dims[i]));
      for (auto& v : w.values()) v = static_cast<float>(init.uniform(-bound, bound));
      for (auto& v : b.values()) v = static_cast<float>(init.uniform(-bound, bound));
      w.enable_grad();
      b.enable_grad();
      ae_weights_.push_back(w);
      ae_biases_.push_back(b);
    }

    std::vector<Tensor<float>> params;
    for (std::size_t i = 0; i < ae_weights_.size(); ++i) {
      params.push_back(ae_weights_[i]);
      params.push_back(ae_biases_[i]);
    }
    OptimizerState opt;
    opt.base_lr = 0.1;
    opt.step_size = 80;
    opt.gamma = 0.5;

    // group layout (start, width) for masking
    std::vector<std::pair<std::size_t, std::size_t>> groups;
    std::size_t pos = 0;
    for (const auto& col : schema.columns) {
      if (col.kind == ColumnKind::categorical) {
        groups.emplace_back(pos, col.vocab.size());
        pos += col.vocab.size();
      } else if (col.kind == ColumnKind::numeric) {
        groups.emplace_back(pos, 1);
        pos += 1;
      }
    }

    const int epochs = 200;
    Rng order(mix_seed(seed, 0x7065726d75746574ull));
    std::vector<std::size_t> idx(train.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::size_t batch = std::min<std::size_t>(32, train.size());
    for (int e = 0; e < epochs; ++e) {
      order.shuffle(idx.begin(), idx.end());
      opt.current_epoch = e;
      for (std::size_t start = 0; start < idx.size(); start += batch) {
        const std::size_t bs = std::min(batch, idx.size() - start);
        Tensor<float> x({static_cast<std::int64_t>(bs), dim});
        Tensor<float> target({static_cast<std::int64_t>(bs), dim});
        Tensor<float> weight_mask({static_cast<std::int64_t>(bs), dim});
        Rng noise(mix_seed(seed, static_cast<std::uint64_t>(e), start));
        for (std::size_t r = 0; r < bs; ++r) {
          const auto& rec = train[idx[start + r]];
          for (std::int64_t j = 0; j < dim; ++j) {
            x.values()[r * dim + j] = rec.values[static_cast<std::size_t>(j)];
            target.values()[r * dim + j] = rec.values[static_cast<std::size_t>(j)];
            weight_mask.values()[r * dim + j] = rec.missing[static_cast<std::size_t>(j)] ? 0.0f : 1.0f;
          }
          for (const auto& [gpos, gwidth] : groups) {
            if (noise.bernoulli(0.25)) {
              for (std::size_t k = 0; k < gwidth; ++k) x.values()[r * dim + gpos + k] = 0.0f;
            }
          }
        }
        Tensor<float> recon = forward_ae(x);
        Tensor<float> diff = sub(recon, target);
        Tensor<float> masked = mul(mul(diff, diff), weight_mask);
        Tensor<float> loss = scale(sum(masked), 1.0 / static_cast<double>(bs * dim));
        backward(loss);
        sgd_step(params, opt);
      }
    }
  }

  Tensor<float> forward_ae(const Tensor<float>& x) const {
    Tensor<float> h = x;
    for (std::size_t i = 0; i < ae_weights_.size(); ++i) {
      h = linear(h, ae_weights_[i], ae_biases_[i]);
      if (i + 1 < ae_weights_.size()) h = relu(h);
    }
    return sigmoid(h);
  }

  EncodedMeta apply_autoencoder(const MetadataSchema& schema, const EncodedMeta& in) const {
    if (ae_weights_.empty()) throw StateError("imputer: autoencoder was not fitted");
    NoGrad<float> ng;
    const std::int64_t dim = schema.encoded_length();
    Tensor<float> x({1, dim});
    for (std::int64_t j = 0; j < dim; ++j) x.values()[j] = in.values[static_cast<std::size_t>(j)];
    Tensor<float> recon = forward_ae(x);

    EncodedMeta out = in;
    std::size_t pos = 0;
    for (const auto& col : schema.columns) {
      if (col.kind == ColumnKind::categorical) {
        const std::size_t width = col.vocab.size();
        if (in.missing[pos]) {
          std::size_t best = 0;
          for (std::size_t k = 1; k < width; ++k) {
            if (recon.values()[pos + k] > recon.values()[pos + best]) best = k;
          }
          for (std::size_t k = 0; k < width; ++k) out.values[pos + k] = k == best ? 1.0f : 0.0f;
        }
        pos += width;
      } else if (col.kind == ColumnKind::numeric) {
        if (in.missing[pos]) out.values[pos] = std::clamp(recon.values()[pos], 0.0f, 1.0f);
        pos += 1;
      }
    }
    return out;
  }

  bool fitted_ = false;
  ImputeMode mode_ = ImputeMode::statistic;
  ImputerStats stats_;
  std::vector<Tensor<float>> ae_weights_;
  std::vector<Tensor<float>> ae_biases_;
};

// Spec'd convenience form: fits on the listed training rows, applies to all.
inline std::vector<EncodedMeta> impute(const std::vector<EncodedMeta>& dataset, ImputeMode mode,
                                       const MetadataSchema& schema,
                                       const std::vector<std::size_t>& train_indices,
                                       std::uint64_t seed = 0, Imputer* fitted = nullptr) {
  std::vector<EncodedMeta> train;
  train.reserve(train_indices.size());
  for (auto i : train_indices) train.push_back(dataset.at(i));
  Imputer imp;
  imp.fit(schema, train, mode, seed);
  auto out = imp.apply_all(schema, dataset);
  if (fitted) *fitted = std::move(imp);
  return out;
}

enum class Partition { train, val, test };

inline std::string to_string(Partition p) {
  switch (p) {
    case Partition::train: return "train";
    case Partition::val: return "val";
    default: return "test";
  }
}

inline Partition partition_from_string(const std::string& s) {
  if (s == "train") return Partition::train;
  if (s == "val") return Partition::val;
  if (s == "test") return Partition::test;
  throw ParseError("unknown partition: " + s);
}

struct SplitAssignment {
  std::map<std::string, Partition> by_sample;
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;

  Partition of(const std::string& sample_id) const {
    auto it = by_sample.find(sample_id);
    if (it == by_sample.end()) throw SchemaError("split: unknown sample id '" + sample_id + "'");
    return it->second;
  }

  std::array<std::size_t, 3> counts() const {
    std::array<std::size_t, 3> c{0, 0, 0};
    for (const auto& [id, p] : by_sample) c[static_cast<std::size_t>(p)]++;
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json assignment = nlohmann::json::object();
    for (const auto& [id, p] : by_sample) assignment[id] = to_string(p);
    return nlohmann::json{{"ratios", ratios}, {"seed", seed}, {"assignment", assignment}};
  }

  static SplitAssignment from_json(const nlohmann::json& j) {
    SplitAssignment s;
    if (j.contains("ratios")) s.ratios = j.at("ratios").get<std::array<double, 3>>();
    s.seed = j.value("seed", std::uint64_t{0});
    for (const auto& [id, p] : j.at("assignment").items()) {
      s.by_sample[id] = partition_from_string(p.get<std::string>());
    }
    return s;
  }
};

// Deterministic grouped split: all lesions of one patient land in the same
// partition. Groups are shuffled by seed and assigned greedily to the
// partition with the largest remaining sample deficit. A split file
// (CSV: sample_id,partition) overrides everything.
inline SplitAssignment split(const std::vector<MetadataRecord>& records,
                             const MetadataSchema& schema,
                             std::array<double, 3> ratios = {0.8, 0.1, 0.1},
                             std::uint64_t seed = 0, bool group_by_patient = true,
                             const std::filesystem::path& split_file = {}) {
  for (double r : ratios) {
    if (r <= 0.0) throw ContractError("split: ratios must be positive");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw ContractError("split: ratios must sum to 1");
  }

  SplitAssignment out;
  out.ratios = ratios;
  out.seed = seed;

  std::vector<std::string> ids;
  ids.reserve(records.size());
  for (const auto& r : records) {
    const std::string& id = r.sample_id(schema);
    if (out.by_sample.count(id)) throw SchemaError("split: duplicate sample id '" + id + "'");
    out.by_sample[id] = Partition::train;
    ids.push_back(id);
  }

  if (!split_file.empty()) {
    auto rows = detail::parse_csv_rows(read_file_text(split_file));
    std::size_t start = 0;
    if (!rows.empty() && rows[0].first.size() >= 2 && rows[0].first[0] == "sample_id") start = 1;
    std::map<std::string, Partition> filed;
    for (std::size_t i = start; i < rows.size(); ++i) {
      const auto& row = rows[i].first;
      if (row.size() == 1 && row[0].empty()) continue;
      if (row.size() != 2) {
        throw ParseError("split file line " + std::to_string(rows[i].second) + ": expected 2 fields");
      }
      if (!out.by_sample.count(row[0])) {
        throw SchemaError("split file references unknown sample id '" + row[0] + "'");
      }
      filed[row[0]] = partition_from_string(row[1]);
    }
    for (const auto& id : ids) {
      auto it = filed.find(id);
      if (it == filed.end()) throw SchemaError("split file does not cover sample id '" + id + "'");
      out.by_sample[id] = it->second;
    }
    return out;
  }

  // group -> member sample ids, keyed for deterministic ordering
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& r : records) {
    const std::string key = group_by_patient ? r.patient_id(schema) : r.sample_id(schema);
    groups[key].push_back(r.sample_id(schema));
  }
  std::vector<std::string> keys;
  keys.reserve(groups.size());
  for (const auto& [k, v] : groups) keys.push_back(k);
  Rng rng(mix_seed(seed, 0x73706c6974ull));
  rng.shuffle(keys.begin(), keys.end());

  const double total = static_cast<double>(records.size());
  std::array<double, 3> target{ratios[0] * total, ratios[1] * total, ratios[2] * total};
  std::array<double, 3> assigned{0.0, 0.0, 0.0};
  for (const auto& key : keys) {
    int best = 0;
    for (int p = 1; p < 3; ++p) {
      if (target[p] - assigned[p] > target[best] - assigned[best]) best = p;
    }
    for (const auto& id : groups[key]) out.by_sample[id] = static_cast<Partition>(best);
    assigned[static_cast<std::size_t>(best)] += static_cast<double>(groups[key].size());
  }
  return out;
}

// Versioned binary cache of an encoded dataset.
struct EncodedDataset {
  std::vector<std::string> sample_ids;
  std::vector<std::string> patient_ids;
  std::vector<int> labels;
  std::vector<EncodedMeta> encoded;
};

inline void save_encoded_cache(const EncodedDataset& ds, const std::filesystem::path& path) {
  ByteWriter w;
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("DFEC"), 4));
  w.u32(1);
  const std::uint32_t n = static_cast<std::uint32_t>(ds.encoded.size());
  const std::uint32_t dim = n ? static_cast<std::uint32_t>(ds.encoded[0].values.size()) : 0;
  w.u32(n);
  w.u32(dim);
  for (std::uint32_t i = 0; i < n; ++i) {
    w.str(ds.sample_ids[i]);
    w.str(ds.patient_ids[i]);
    w.u32(static_cast<std::uint32_t>(ds.labels[i]));
    for (auto v : ds.encoded[i].values) w.f32(v);
    for (auto m : ds.encoded[i].missing) w.u8(m);
  }
  write_file_bytes(path, w.bytes());
}

inline EncodedDataset load_encoded_cache(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), "DFEC", 4) != 0) throw VersionError("encoded cache: bad magic");
  const std::uint32_t version = r.u32();
  if (version != 1) throw VersionError("encoded cache: unsupported version " + std::to_string(version));
  const std::uint32_t n = r.u32();
  const std::uint32_t dim = r.u32();
  EncodedDataset ds;
  for (std::uint32_t i = 0; i < n; ++i) {
    ds.sample_ids.push_back(r.str());
    ds.patient_ids.push_back(r.str());
    ds.labels.push_back(static_cast<int>(r.u32()));
    EncodedMeta e;
    e.values.resize(dim);
    e.missing.resize(dim);
    for (auto& v : e.values) v = r.f32();
    for (auto& m : e.missing) m = r.u8();
    ds.encoded.push_back(std::move(e));
  }
  return ds;
}

}  // namespace dermfuse
