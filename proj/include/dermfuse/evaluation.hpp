#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dermfuse/dataset.hpp"
#include "dermfuse/errors.hpp"
#include "dermfuse/model.hpp"
#include "dermfuse/serialize.hpp"
#include "dermfuse/tensor.hpp"

namespace dermfuse {

// K x K counts, rows are the true class, columns the prediction.
struct ConfusionMatrix {
  int k = 0;
  std::vector<std::int64_t> counts;
  std::vector<std::string> class_names;

  ConfusionMatrix() = default;
  ConfusionMatrix(int classes, std::vector<std::string> names)
      : k(classes), counts(static_cast<std::size_t>(classes) * classes, 0),
        class_names(std::move(names)) {}

  std::int64_t& at(int t, int p) { return counts[static_cast<std::size_t>(t) * k + p]; }
  std::int64_t at(int t, int p) const { return counts[static_cast<std::size_t>(t) * k + p]; }

  std::int64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

  std::int64_t row_sum(int t) const {
    std::int64_t s = 0;
    for (int p = 0; p < k; ++p) s += at(t, p);
    return s;
  }

  std::int64_t col_sum(int p) const {
    std::int64_t s = 0;
    for (int t = 0; t < k; ++t) s += at(t, p);
    return s;
  }
};

inline ConfusionMatrix confusion(std::span<const int> labels, std::span<const int> predictions,
                                 int n_classes, std::vector<std::string> class_names = {}) {
  if (labels.size() != predictions.size()) {
    throw ContractError("confusion: labels and predictions differ in length");
  }
  if (class_names.empty()) {
    for (int i = 0; i < n_classes; ++i) class_names.push_back("class" + std::to_string(i));
  }
  ConfusionMatrix cm(n_classes, std::move(class_names));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes || predictions[i] < 0 || predictions[i] >= n_classes) {
      throw ContractError("confusion: class index out of range at sample " + std::to_string(i));
    }
    cm.at(labels[i], predictions[i]) += 1;
  }
  return cm;
}

struct ClassMetrics {
  std::string name;
  std::int64_t support = 0;
  double recall = 0.0;       // == sensitivity
  double precision = 0.0;
  double f1 = 0.0;
  double specificity = 0.0;
  double class_accuracy = 0.0;  // 100 * recall
  bool recall_defined = true;
  bool precision_defined = true;
  bool specificity_defined = true;
  double auc = 0.0;
  bool auc_defined = false;
};

struct MetricSummary {
  double acc = 0.0;
  double bacc = 0.0;
  std::vector<ClassMetrics> per_class;
};

inline double f1_score(double precision, double recall) {
  const double denom = precision + recall;
  return denom > 0.0 ? 2.0 * precision * recall / denom : 0.0;
}

inline double balanced_accuracy(const std::vector<double>& per_class_recall) {
  double acc = 0.0;
  for (double r : per_class_recall) acc += r;
  return acc / static_cast<double>(per_class_recall.size());
}

// Undefined ratios (no support / no predicted positives) are reported as 0
// and flagged, so the report shape never changes.
inline MetricSummary metrics(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (total <= 0) throw ContractError("metrics: empty confusion matrix");
  MetricSummary out;
  std::int64_t trace = 0;
  std::vector<double> recalls;
  for (int i = 0; i < cm.k; ++i) {
    const std::int64_t tp = cm.at(i, i);
    const std::int64_t fn = cm.row_sum(i) - tp;
    const std::int64_t fp = cm.col_sum(i) - tp;
    const std::int64_t tn = total - tp - fn - fp;
    trace += tp;
    ClassMetrics m;
    m.name = cm.class_names[static_cast<std::size_t>(i)];
    m.support = tp + fn;
    m.recall_defined = (tp + fn) > 0;
    m.recall = m.recall_defined ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    m.precision_defined = (tp + fp) > 0;
    m.precision = m.precision_defined ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    m.f1 = f1_score(m.precision, m.recall);
    m.specificity_defined = (tn + fp) > 0;
    m.specificity = m.specificity_defined ? static_cast<double>(tn) / static_cast<double>(tn + fp) : 0.0;
    m.class_accuracy = 100.0 * m.recall;
    recalls.push_back(m.recall);
    out.per_class.push_back(std::move(m));
  }
  out.acc = static_cast<double>(trace) / static_cast<double>(total);
  out.bacc = balanced_accuracy(recalls);
  return out;
}

// Mann-Whitney AUC with average ranks, so exact ties count one half.
inline double auc_binary(std::span<const double> scores, std::span<const char> positive) {
  if (scores.size() != positive.size()) throw ContractError("auc: scores/labels length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t pos = 0, neg = 0;
  for (auto p : positive) (p ? pos : neg) += 1;
  if (pos == 0 || neg == 0) throw ContractError("auc: needs at least one positive and one negative");
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = static_cast<double>(i + j + 2) / 2.0;  // 1-based
    for (std::size_t t = i; t <= j; ++t) {
      if (positive[order[t]]) rank_sum_pos += avg_rank;
    }
    i = j + 1;
  }
  const double p = static_cast<double>(pos);
  return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

struct AucResult {
  std::vector<double> per_class;
  std::vector<bool> defined;
  double macro = 0.0;
  double weighted = 0.0;  // support-weighted over the defined classes
};

// One-vs-rest over score columns; classes without both a positive and a
// negative are skipped and flagged.
inline AucResult roc_auc_ovr(const std::vector<std::vector<double>>& scores,
                             std::span<const int> labels, int n_classes) {
  if (scores.size() != labels.size()) throw ContractError("auc: scores/labels length mismatch");
  AucResult out;
  out.per_class.assign(static_cast<std::size_t>(n_classes), 0.0);
  out.defined.assign(static_cast<std::size_t>(n_classes), false);
  std::vector<std::int64_t> support(static_cast<std::size_t>(n_classes), 0);
  double macro_sum = 0.0, weighted_sum = 0.0;
  std::int64_t macro_n = 0, weighted_n = 0;
  for (int k = 0; k < n_classes; ++k) {
    std::vector<double> col(scores.size());
    std::vector<char> pos(scores.size());
    std::size_t npos = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      col[i] = scores[i][static_cast<std::size_t>(k)];
      pos[i] = labels[i] == k ? 1 : 0;
      npos += pos[i];
    }
    support[static_cast<std::size_t>(k)] = static_cast<std::int64_t>(npos);
    if (npos == 0 || npos == scores.size()) continue;
    const double auc = auc_binary(col, pos);
    out.per_class[static_cast<std::size_t>(k)] = auc;
    out.defined[static_cast<std::size_t>(k)] = true;
    macro_sum += auc;
    macro_n += 1;
    weighted_sum += auc * static_cast<double>(npos);
    weighted_n += support[static_cast<std::size_t>(k)];
  }
  if (macro_n == 0) throw ContractError("auc: no class had both positives and negatives");
  out.macro = macro_sum / static_cast<double>(macro_n);
  out.weighted = weighted_sum / static_cast<double>(weighted_n);
  return out;
}

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

// One operating point per distinct threshold, sorted by descending score.
inline std::vector<RocPoint> roc_points(std::span<const double> scores,
                                        std::span<const char> positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double pos = 0, neg = 0;
  for (auto p : positive) (p ? pos : neg) += 1;
  std::vector<RocPoint> points;
  double tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < n) {
    const double thr = scores[order[i]];
    while (i < n && scores[order[i]] == thr) {
      if (positive[order[i]]) {
        tp += 1;
      } else {
        fp += 1;
      }
      ++i;
    }
    points.push_back({thr, neg > 0 ? fp / neg : 0.0, pos > 0 ? tp / pos : 0.0});
  }
  return points;
}

struct EvalReport {
  std::int64_t total = 0;
  double acc = 0.0;
  double bacc = 0.0;
  double auc_macro = 0.0;
  double auc_weighted = 0.0;
  std::vector<ClassMetrics> per_class;
  ConfusionMatrix cm;
  std::vector<std::vector<RocPoint>> roc;  // per class, may be empty

  nlohmann::json to_json() const {
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& m : per_class) {
      classes.push_back({{"name", m.name},
                         {"support", m.support},
                         {"recall", m.recall},
                         {"recall_defined", m.recall_defined},
                         {"precision", m.precision},
                         {"precision_defined", m.precision_defined},
                         {"f1", m.f1},
                         {"sensitivity", m.recall},
                         {"specificity", m.specificity},
                         {"specificity_defined", m.specificity_defined},
                         {"class_accuracy", m.class_accuracy},
                         {"auc", m.auc},
                         {"auc_defined", m.auc_defined}});
    }
    nlohmann::json confusion_rows = nlohmann::json::array();
    for (int t = 0; t < cm.k; ++t) {
      nlohmann::json row = nlohmann::json::array();
      for (int p = 0; p < cm.k; ++p) row.push_back(cm.at(t, p));
      confusion_rows.push_back(row);
    }
    nlohmann::json roc_obj = nlohmann::json::object();
    for (std::size_t k = 0; k < roc.size(); ++k) {
      nlohmann::json pts = nlohmann::json::array();
      for (const auto& pt : roc[k]) pts.push_back({pt.threshold, pt.fpr, pt.tpr});
      roc_obj[cm.class_names[k]] = pts;
    }
    return nlohmann::json{{"n", total},
                          {"acc", acc},
                          {"bacc", bacc},
                          {"auc_macro", auc_macro},
                          {"auc_weighted", auc_weighted},
                          {"classes", classes},
                          {"class_names", cm.class_names},
                          {"confusion", confusion_rows},
                          {"roc", roc_obj}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.total = j.at("n").get<std::int64_t>();
    r.acc = j.at("acc").get<double>();
    r.bacc = j.at("bacc").get<double>();
    r.auc_macro = j.at("auc_macro").get<double>();
    r.auc_weighted = j.at("auc_weighted").get<double>();
    auto names = j.at("class_names").get<std::vector<std::string>>();
    r.cm = ConfusionMatrix(static_cast<int>(names.size()), names);
    const auto& rows = j.at("confusion");
    for (int t = 0; t < r.cm.k; ++t) {
      for (int p = 0; p < r.cm.k; ++p) {
        r.cm.at(t, p) = rows.at(static_cast<std::size_t>(t)).at(static_cast<std::size_t>(p)).get<std::int64_t>();
      }
    }
    for (const auto& jc : j.at("classes")) {
      ClassMetrics m;
      m.name = jc.at("name").get<std::string>();
      m.support = jc.at("support").get<std::int64_t>();
      m.recall = jc.at("recall").get<double>();
      m.recall_defined = jc.at("recall_defined").get<bool>();
      m.precision = jc.at("precision").get<double>();
      m.precision_defined = jc.at("precision_defined").get<bool>();
      m.f1 = jc.at("f1").get<double>();
      m.specificity = jc.at("specificity").get<double>();
      m.specificity_defined = jc.at("specificity_defined").get<bool>();
      m.class_accuracy = jc.at("class_accuracy").get<double>();
      m.auc = jc.at("auc").get<double>();
      m.auc_defined = jc.at("auc_defined").get<bool>();
      r.per_class.push_back(std::move(m));
    }
    if (j.contains("roc")) {
      r.roc.resize(static_cast<std::size_t>(r.cm.k));
      for (int k = 0; k < r.cm.k; ++k) {
        const auto& name = r.cm.class_names[static_cast<std::size_t>(k)];
        if (!j.at("roc").contains(name)) continue;
        for (const auto& pt : j.at("roc").at(name)) {
          r.roc[static_cast<std::size_t>(k)].push_back(
              {pt.at(0).get<double>(), pt.at(1).get<double>(), pt.at(2).get<double>()});
        }
      }
    }
    return r;
  }
};

namespace detail {

template <typename T>
struct BatchedPredictions {
  std::vector<int> labels;
  std::vector<int> predictions;
  std::vector<std::vector<double>> scores;      // softmax probabilities
  std::vector<std::vector<double>> embeddings;  // fused feature vectors
};

// Deterministic batched inference over a partition; no augmentation, and the
// upscale head is not evaluated.
template <typename T>
BatchedPredictions<T> run_inference(const ModelBundle<T>& bundle, const PipelineData& data,
                                    std::span<const std::size_t> indices, int batch_size,
                                    bool keep_embeddings) {
  if (indices.empty()) throw ContractError("evaluate: empty partition");
  NoGrad<T> ng;
  BatchedPredictions<T> out;
  const int k = bundle.config.n_classes;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t bs = std::min(static_cast<std::size_t>(batch_size), indices.size() - start);
    std::vector<const Image*> images;
    std::vector<const EncodedMeta*> metas;
    for (std::size_t i = 0; i < bs; ++i) {
      const DataItem& item = data.items[indices[start + i]];
      images.push_back(&item.image);
      metas.push_back(&item.meta);
      out.labels.push_back(item.label);
    }
    Tensor<T> x = image_batch<T>(images);
    Tensor<T> m = meta_batch<T>(metas);
    auto fwd = forward(bundle, x, m, false);
    Tensor<T> probs = softmax(fwd.logits);
    for (std::size_t i = 0; i < bs; ++i) {
      std::vector<double> row(static_cast<std::size_t>(k));
      int best = 0;
      for (int j = 0; j < k; ++j) {
        row[static_cast<std::size_t>(j)] = static_cast<double>(probs.values()[i * k + j]);
        if (row[static_cast<std::size_t>(j)] > row[static_cast<std::size_t>(best)]) best = j;
      }
      out.predictions.push_back(best);
      out.scores.push_back(std::move(row));
      if (keep_embeddings) {
        const std::int64_t f = fwd.embedding.dim(1);
        std::vector<double> emb(static_cast<std::size_t>(f));
        for (std::int64_t j = 0; j < f; ++j) {
          emb[static_cast<std::size_t>(j)] = static_cast<double>(fwd.embedding.values()[static_cast<std::size_t>(i) * f + j]);
        }
        out.embeddings.push_back(std::move(emb));
      }
    }
  }
  return out;
}

}  // namespace detail

// Full metric suite over one partition.
template <typename T>
EvalReport evaluate(const ModelBundle<T>& bundle, const PipelineData& data,
                    std::span<const std::size_t> indices, bool with_roc = true,
                    int batch_size = 32) {
  auto preds = detail::run_inference(bundle, data, indices, batch_size, false);
  const int k = bundle.config.n_classes;
  EvalReport report;
  report.cm = confusion(preds.labels, preds.predictions, k, data.class_names);
  report.total = report.cm.total();
  MetricSummary summary = metrics(report.cm);
  report.acc = summary.acc;
  report.bacc = summary.bacc;
  report.per_class = std::move(summary.per_class);
  AucResult auc = roc_auc_ovr(preds.scores, preds.labels, k);
  report.auc_macro = auc.macro;
  report.auc_weighted = auc.weighted;
  for (int i = 0; i < k; ++i) {
    report.per_class[static_cast<std::size_t>(i)].auc = auc.per_class[static_cast<std::size_t>(i)];
    report.per_class[static_cast<std::size_t>(i)].auc_defined = auc.defined[static_cast<std::size_t>(i)];
  }
  if (with_roc) {
    report.roc.resize(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) {
      std::vector<double> col(preds.scores.size());
      std::vector<char> pos(preds.scores.size());
      for (std::size_t i = 0; i < preds.scores.size(); ++i) {
        col[i] = preds.scores[i][static_cast<std::size_t>(c)];
        pos[i] = preds.labels[i] == c ? 1 : 0;
      }
      report.roc[static_cast<std::size_t>(c)] = roc_points(col, pos);
    }
  }
  return report;
}

// Cheap per-epoch validation: predictions plus (bacc, acc) only.
template <typename T>
std::pair<double, double> validate_metrics(const ModelBundle<T>& bundle, const PipelineData& data,
                                           std::span<const std::size_t> indices,
                                           int batch_size = 32) {
  auto preds = detail::run_inference(bundle, data, indices, batch_size, false);
  auto cm = confusion(preds.labels, preds.predictions, bundle.config.n_classes, data.class_names);
  auto summary = metrics(cm);
  return {summary.bacc, summary.acc};
}

inline void write_confusion_csv(const ConfusionMatrix& cm, const std::filesystem::path& path) {
  std::string text = "true\\pred";
  for (const auto& n : cm.class_names) text += "," + n;
  text += "\n";
  for (int t = 0; t < cm.k; ++t) {
    text += cm.class_names[static_cast<std::size_t>(t)];
    for (int p = 0; p < cm.k; ++p) text += "," + std::to_string(cm.at(t, p));
    text += "\n";
  }
  write_file_text(path, text);
}

inline void write_roc_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::string text = "class,threshold,fpr,tpr\n";
  char buf[128];
  for (std::size_t k = 0; k < report.roc.size(); ++k) {
    for (const auto& pt : report.roc[k]) {
      std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g\n",
                    report.cm.class_names[k].c_str(), pt.threshold, pt.fpr, pt.tpr);
      text += buf;
    }
  }
  write_file_text(path, text);
}

// CSV: sample_id, true label name, then the fused feature vector, for
// external projection tools.
template <typename T>
void export_embeddings(const ModelBundle<T>& bundle, const PipelineData& data,
                       std::span<const std::size_t> indices, const std::filesystem::path& path,
                       int batch_size = 32) {
  auto preds = detail::run_inference(bundle, data, indices, batch_size, true);
  const std::size_t f = preds.embeddings.empty() ? 0 : preds.embeddings[0].size();
  std::string text = "sample_id,label";
  for (std::size_t j = 0; j < f; ++j) text += ",e" + std::to_string(j);
  text += "\n";
  char buf[64];
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const DataItem& item = data.items[indices[i]];
    text += item.sample_id + "," + data.class_names[static_cast<std::size_t>(item.label)];
    for (std::size_t j = 0; j < f; ++j) {
      std::snprintf(buf, sizeof(buf), ",%.9g", preds.embeddings[i][j]);
      text += buf;
    }
    text += "\n";
  }
  write_file_text(path, text);
}

}  // namespace dermfuse
