#pragma once

// Task heads on frozen or fine-tuned encoders: labels, losses, metrics,
// label-scarce subsets and the scratch / probe / fine-tune protocol.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pclr/checkpoint.hpp"
#include "pclr/dataset.hpp"
#include "pclr/encoder.hpp"
#include "pclr/nn/optim.hpp"

namespace pclr::downstream {

// ---------------------------------------------------------------------------
// Tasks

enum class TaskKind { age, sex, intervals, afib };
enum class LossKind { mse, bce, normalized_mae };
enum class MetricKind { mae, auroc, mape };
enum class TrainMode { from_scratch, linear_probe, fine_tune };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::age: return "age";
    case TaskKind::sex: return "sex";
    case TaskKind::intervals: return "intervals";
    case TaskKind::afib: return "afib";
  }
  return "?";
}

inline TaskKind task_from_string(const std::string& s) {
  for (TaskKind k : {TaskKind::age, TaskKind::sex, TaskKind::intervals, TaskKind::afib})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown task '" + s + "'");
}

inline const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::from_scratch: return "from_scratch";
    case TrainMode::linear_probe: return "linear_probe";
    case TrainMode::fine_tune: return "fine_tune";
  }
  return "?";
}

inline TrainMode mode_from_string(const std::string& s) {
  for (TrainMode m : {TrainMode::from_scratch, TrainMode::linear_probe, TrainMode::fine_tune})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown training mode '" + s + "'");
}

inline const char* to_string(MetricKind m) {
  switch (m) {
    case MetricKind::mae: return "mae";
    case MetricKind::auroc: return "auroc";
    case MetricKind::mape: return "mape";
  }
  return "?";
}

/// Interval targets, in output order.
inline const std::vector<std::string>& interval_names() {
  static const std::vector<std::string> k{"qrs_ms", "qt_ms", "pr_ms", "ventricular_rate_bpm"};
  return k;
}

struct LabelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

struct TaskSpec {
  TaskKind kind = TaskKind::age;
  LossKind loss = LossKind::mse;
  MetricKind selection_metric = MetricKind::mae;
  int output_dim = 1;
  std::optional<LabelStats> label_stats;

  static TaskSpec make(TaskKind k) {
    TaskSpec t;
    t.kind = k;
    switch (k) {
      case TaskKind::age: t.loss = LossKind::mse; t.selection_metric = MetricKind::mae; break;
      case TaskKind::sex:
      case TaskKind::afib: t.loss = LossKind::bce; t.selection_metric = MetricKind::auroc; break;
      case TaskKind::intervals:
        t.loss = LossKind::normalized_mae;
        t.selection_metric = MetricKind::mape;
        t.output_dim = 4;
        break;
    }
    return t;
  }

  bool classification() const { return loss == LossKind::bce; }
  bool higher_is_better() const { return selection_metric == MetricKind::auroc; }
};

/// Targets of a segment for a task, or nothing when a label is missing.
inline std::optional<std::vector<double>> task_targets(const SegmentLabels& l, TaskKind k) {
  auto one = [](const std::optional<double>& v) -> std::optional<std::vector<double>> {
    if (!v) return std::nullopt;
    return std::vector<double>{*v};
  };
  switch (k) {
    case TaskKind::age: return one(l.age_years);
    case TaskKind::sex: return one(l.sex);
    case TaskKind::afib: return one(l.afib);
    case TaskKind::intervals:
      if (!l.qrs_ms || !l.qt_ms || !l.pr_ms || !l.ventricular_rate_bpm) return std::nullopt;
      return std::vector<double>{*l.qrs_ms, *l.qt_ms, *l.pr_ms, *l.ventricular_rate_bpm};
  }
  return std::nullopt;
}

struct Example {
  std::size_t segment;
  std::vector<double> target;
};

/// Labelled examples of the given patients (in store order).
inline std::vector<Example> collect_examples(const SegmentStore& store, const std::vector<std::string>& patients,
                                             TaskKind k) {
  std::vector<Example> out;
  for (const auto& pid : patients)
    for (std::size_t i : store.of_patient(pid))
      if (auto t = task_targets(store[i].labels, k)) out.push_back({i, std::move(*t)});
  return out;
}

inline LabelStats compute_label_stats(const std::vector<Example>& ex, int dim) {
  if (ex.empty()) throw DomainError("label statistics need at least one example");
  LabelStats s;
  s.mean.assign(static_cast<std::size_t>(dim), 0.0);
  s.std.assign(static_cast<std::size_t>(dim), 0.0);
  for (const auto& e : ex)
    for (int d = 0; d < dim; ++d) s.mean[static_cast<std::size_t>(d)] += e.target[static_cast<std::size_t>(d)];
  for (double& m : s.mean) m /= static_cast<double>(ex.size());
  for (const auto& e : ex)
    for (int d = 0; d < dim; ++d) {
      const double r = e.target[static_cast<std::size_t>(d)] - s.mean[static_cast<std::size_t>(d)];
      s.std[static_cast<std::size_t>(d)] += r * r;
    }
  for (double& v : s.std) v = std::sqrt(v / static_cast<double>(ex.size()));
  // A constant target (e.g. a single labelled patient) would divide by zero.
  for (double& v : s.std)
    if (!(v > 1e-9)) v = 1.0;
  return s;
}

// ---------------------------------------------------------------------------
// Label subsets

struct LabelSubset {
  double fraction = 1.0;
  std::vector<std::string> patient_ids;
  std::uint64_t seed = 0;
};

/// Patient-level subset: the first round(f * n) entries of one seeded
/// permutation, so subsets of the same seed are nested.
inline LabelSubset make_label_subset(std::vector<std::string> train_patients, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw DomainError("fraction must be in (0, 1]");
  std::sort(train_patients.begin(), train_patients.end());
  Rng rng(mix_seed(seed, 0x1abe1));
  std::shuffle(train_patients.begin(), train_patients.end(), rng);
  const auto n = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(train_patients.size())));
  if (n == 0) throw DomainError("label subset is empty at fraction " + std::to_string(fraction));
  LabelSubset s;
  s.fraction = fraction;
  s.seed = seed;
  s.patient_ids.assign(train_patients.begin(), train_patients.begin() + static_cast<long>(n));
  std::sort(s.patient_ids.begin(), s.patient_ids.end());
  return s;
}

// ---------------------------------------------------------------------------
// Losses. Regression heads emit z-scores; predictions in label units are
// mean + std * z.

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

namespace detail {

inline void require_stats(const TaskSpec& t) {
  if (t.loss == LossKind::normalized_mae && !t.label_stats)
    throw ConfigError("the intervals loss needs label_stats");
}

inline double stat_mean(const TaskSpec& t, int d) {
  return t.label_stats ? t.label_stats->mean[static_cast<std::size_t>(d)] : 0.0;
}
inline double stat_std(const TaskSpec& t, int d) {
  return t.label_stats ? t.label_stats->std[static_cast<std::size_t>(d)] : 1.0;
}

}  // namespace detail

/// Head outputs to label units (probabilities for classification).
inline Mat<double> to_predictions(const TaskSpec& t, const Mat<double>& out) {
  Mat<double> p(out.rows(), out.cols());
  for (Eigen::Index d = 0; d < out.rows(); ++d)
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      p(d, j) = t.classification() ? sigmoid(out(d, j))
                                   : detail::stat_mean(t, static_cast<int>(d)) +
                                         detail::stat_std(t, static_cast<int>(d)) * out(d, j);
  return p;
}

/// Loss on label-unit predictions (logits for classification), targets
/// output_dim x B.
inline double task_loss(const TaskSpec& t, const Mat<double>& predictions, const Mat<double>& targets) {
  detail::require_stats(t);
  if (predictions.rows() != t.output_dim || predictions.rows() != targets.rows() ||
      predictions.cols() != targets.cols() || predictions.cols() == 0)
    throw DomainError("prediction/target shape mismatch");
  const auto B = static_cast<double>(predictions.cols());
  double s = 0;
  switch (t.loss) {
    case LossKind::mse:
      return (predictions - targets).squaredNorm() / (B * t.output_dim);
    case LossKind::bce:
      for (Eigen::Index j = 0; j < predictions.cols(); ++j)
        for (Eigen::Index d = 0; d < predictions.rows(); ++d)
          s += softplus(predictions(d, j)) - targets(d, j) * predictions(d, j);
      return s / (B * t.output_dim);
    case LossKind::normalized_mae:
      for (Eigen::Index d = 0; d < predictions.rows(); ++d)
        s += (predictions.row(d) - targets.row(d)).cwiseAbs().sum() / B / detail::stat_std(t, static_cast<int>(d));
      return s / t.output_dim;
  }
  return s;
}

/// Loss and gradient with respect to raw head outputs.
inline std::pair<double, Mat<double>> loss_and_grad(const TaskSpec& t, const Mat<double>& out,
                                                    const Mat<double>& targets) {
  detail::require_stats(t);
  const Mat<double> pred = t.classification() ? out : to_predictions(t, out);
  const double loss = task_loss(t, pred, targets);
  const auto B = static_cast<double>(out.cols());
  const double n = B * t.output_dim;
  Mat<double> g(out.rows(), out.cols());
  for (Eigen::Index d = 0; d < out.rows(); ++d) {
    const double sd = detail::stat_std(t, static_cast<int>(d));
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      const double r = pred(d, j) - targets(d, j);
      switch (t.loss) {
        case LossKind::mse: g(d, j) = 2.0 * r * sd / n; break;
        case LossKind::bce: g(d, j) = (sigmoid(out(d, j)) - targets(d, j)) / n; break;
        case LossKind::normalized_mae: g(d, j) = (r > 0 ? 1.0 : r < 0 ? -1.0 : 0.0) / n; break;
      }
    }
  }
  return {loss, g};
}

// ---------------------------------------------------------------------------
// Metrics

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Nothing when a class is absent.
inline std::optional<double> auroc(const std::vector<double>& scores, const std::vector<double>& labels) {
  if (scores.size() != labels.size()) throw DomainError("score/label count mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with average ranks for ties.
  double rank_sum = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]] > 0.5) {
        rank_sum += avg_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double u = rank_sum - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// F1 of the positive class at a probability threshold.
inline double f1_score(const std::vector<double>& probs, const std::vector<double>& labels, double threshold = 0.5) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool p = probs[i] >= threshold, y = labels[i] > 0.5;
    tp += p && y;
    fp += p && !y;
    fn += !p && y;
  }
  return tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
}

inline double mae(const std::vector<double>& p, const std::vector<double>& y) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - y[i]);
  return s / static_cast<double>(p.size());
}

/// Mean absolute percentage error, in percent.
inline double mape(const std::vector<double>& p, const std::vector<double>& y) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs((p[i] - y[i]) / y[i]);
  return 100.0 * s / static_cast<double>(p.size());
}

/// 1 - SSE/SST. A constant target with a perfect prediction scores 1.
inline double r2(const std::vector<double>& p, const std::vector<double>& y) {
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double sse = 0, sst = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sse += (p[i] - y[i]) * (p[i] - y[i]);
    sst += (y[i] - mean) * (y[i] - mean);
  }
  if (sst == 0) return sse == 0 ? 1.0 : -std::numeric_limits<double>::infinity();
  return 1.0 - sse / sst;
}

struct MetricReport {
  /// Selection metric; NaN when undefined (single-class AUROC).
  double selection = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, double> values;
};

/// Metrics on label-unit predictions (probabilities for classification).
inline MetricReport compute_metrics(const TaskSpec& t, const Mat<double>& pred, const Mat<double>& targets) {
  if (pred.cols() < 2) throw DomainError("metrics need at least 2 samples");
  MetricReport r;
  auto row = [](const Mat<double>& m, Eigen::Index d) {
    return std::vector<double>(m.row(d).data(), m.row(d).data() + m.cols());
  };
  if (t.classification()) {
    const auto p = row(pred, 0), y = row(targets, 0);
    const auto a = auroc(p, y);
    r.values["auroc"] = a ? *a : std::numeric_limits<double>::quiet_NaN();
    r.values["f1"] = f1_score(p, y);
    r.selection = r.values["auroc"];
    return r;
  }
  if (t.kind == TaskKind::intervals) {
    double mape_sum = 0;
    for (Eigen::Index d = 0; d < pred.rows(); ++d) {
      const auto p = row(pred, d), y = row(targets, d);
      const std::string& n = interval_names()[static_cast<std::size_t>(d)];
      r.values["mae_" + n] = mae(p, y);
      r.values["mape_" + n] = mape(p, y);
      r.values["r2_" + n] = r2(p, y);
      mape_sum += r.values["mape_" + n];
    }
    r.values["mape"] = mape_sum / static_cast<double>(pred.rows());
    r.selection = r.values["mape"];
    return r;
  }
  const auto p = row(pred, 0), y = row(targets, 0);
  r.values["mae"] = mae(p, y);
  r.values["mape"] = mape(p, y);
  r.values["r2"] = r2(p, y);
  r.selection = r.values["mae"];
  return r;
}

// ---------------------------------------------------------------------------
// Models

/// Backbone plus a single affine task head. The encoder's projection head is
/// carried along but never used or trained.
class TaskModel {
 public:
  TaskModel() = default;
  TaskModel(Encoder<float> encoder, TaskSpec task, std::uint64_t head_seed)
      : encoder_(std::move(encoder)), task_(std::move(task)),
        head_(encoder_.embedding_dim(), task_.output_dim) {
    Rng rng(mix_seed(head_seed, 0x4ead));
    head_.init(rng);
  }

  Encoder<float>& encoder() { return encoder_; }
  const TaskSpec& task() const { return task_; }
  TaskSpec& task() { return task_; }
  nn::Linear<float>& head() { return head_; }

  template <typename F>
  void visit_params(F&& f, bool include_backbone) {
    if (include_backbone) encoder_.visit_params(f, false);
    head_.visit_params("task_head", f);
  }

  /// Raw head outputs for a batch of windows.
  Mat<float> forward(const std::vector<Signal>& windows, bool backbone_train, bool keep_graph) {
    encoder_.set_mode(backbone_train ? Mode::train : Mode::eval);
    const Mat<float> e = encoder_.forward(make_batch<float>(windows), {keep_graph && backbone_train, true});
    return head_.forward(e, keep_graph);
  }

  void backward(const Mat<float>& d_out, bool backbone) {
    Mat<float> de = head_.backward(d_out, backbone);
    if (backbone) encoder_.backward(de);
  }

  /// Label-unit predictions (probabilities for classification), eval mode.
  Mat<double> predict(const std::vector<Signal>& windows, int chunk = 64) {
    Mat<double> out(task_.output_dim, static_cast<Eigen::Index>(windows.size()));
    for (std::size_t i = 0; i < windows.size(); i += static_cast<std::size_t>(chunk)) {
      const std::size_t n = std::min(windows.size() - i, static_cast<std::size_t>(chunk));
      std::vector<Signal> part(windows.begin() + static_cast<long>(i), windows.begin() + static_cast<long>(i + n));
      out.middleCols(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(n)) =
          forward(part, false, false).cast<double>();
    }
    return to_predictions(task_, out);
  }

 private:
  Encoder<float> encoder_;
  TaskSpec task_;
  nn::Linear<float> head_;
};

inline nlohmann::json to_json(const TaskSpec& t) {
  nlohmann::json j = {{"kind", to_string(t.kind)}, {"output_dim", t.output_dim}};
  if (t.label_stats) j["label_stats"] = {{"mean", t.label_stats->mean}, {"std", t.label_stats->std}};
  return j;
}

inline TaskSpec task_spec_from_json(const nlohmann::json& j) {
  TaskSpec t = TaskSpec::make(task_from_string(j.at("kind").get<std::string>()));
  if (j.contains("label_stats"))
    t.label_stats = LabelStats{j.at("label_stats").at("mean").get<std::vector<double>>(),
                               j.at("label_stats").at("std").get<std::vector<double>>()};
  return t;
}

inline void save_task_model(const std::filesystem::path& path, TaskModel& m, const nlohmann::json& extra = {}) {
  ckpt::Archive a;
  a.meta = {{"kind", "task_model"}, {"spec", ckpt::to_json(m.encoder().spec())}, {"task", to_json(m.task())}};
  if (!extra.is_null()) a.meta["extra"] = extra;
  ckpt::put_encoder(a, "model.", m.encoder());
  a.put("task_head.weight", m.head().weight().value);
  a.put("task_head.bias", m.head().bias().value);
  a.save(path);
}

inline TaskModel load_task_model(const std::filesystem::path& path) {
  const ckpt::Archive a = ckpt::Archive::load(path);
  if (a.meta.value("kind", std::string{}) != "task_model") throw FormatError(path.string() + ": not a task model");
  Encoder<float> enc(ckpt::encoder_spec_from_json(a.meta.at("spec")), 0);
  ckpt::get_encoder(a, "model.", enc);
  TaskModel m(std::move(enc), task_spec_from_json(a.meta.at("task")), 0);
  a.get_into("task_head.weight", m.head().weight().value);
  a.get_into("task_head.bias", m.head().bias().value);
  m.encoder().set_mode(Mode::eval);
  return m;
}

// ---------------------------------------------------------------------------
// Training

struct HeadHyper {
  int batch = 256;
  int epochs = 60;
  double lr = 5e-3;
  int milestone = 20;  // lr *= 0.1 from this epoch on
  int warmup = 5;
  /// Gradient accumulation: the batch is processed as this many micro-batches.
  int accumulate = 1;
  double lr_scale = 1.0;

  void validate() const {
    if (batch <= 0 || epochs <= 0 || !(lr > 0) || milestone < 0 || warmup < 0 || accumulate <= 0 || !(lr_scale > 0))
      throw ConfigError("invalid downstream hyperparameters");
  }
};

/// Table 5 rows.
inline HeadHyper table5(TaskKind k, TrainMode m) {
  const bool demo = k == TaskKind::age || k == TaskKind::sex;
  switch (m) {
    case TrainMode::from_scratch:
      if (demo) return {512, 60, 5e-3, 20, 5};
      if (k == TaskKind::intervals) return {256, 60, 5e-3, 20, 5};
      return {128, 60, 2e-3, 20, 5};
    case TrainMode::linear_probe:
      if (demo) return {1024, 15, 1e-1, 5, 0};
      if (k == TaskKind::intervals) return {512, 15, 2e-1, 5, 0};
      return {128, 15, 1e-1, 5, 0};
    case TrainMode::fine_tune:
      if (demo) return {1024, 30, 1e-4, 20, 0};
      if (k == TaskKind::intervals) return {512, 45, 2e-4, 20, 0};
      return {128, 50, 1e-4, 20, 0};
  }
  return {};
}

inline nlohmann::json to_json(const HeadHyper& h) {
  return {{"batch", h.batch},   {"epochs", h.epochs},         {"lr", h.lr},
          {"milestone", h.milestone}, {"warmup", h.warmup}, {"accumulate", h.accumulate},
          {"lr_scale", h.lr_scale}};
}

struct EpochRow {
  int epoch = 0;
  double lr = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double val_loss = 0;
  double val_metric = 0;
  std::map<std::string, double> aux;
};

inline nlohmann::json to_json(const EpochRow& r) {
  nlohmann::json j = {{"epoch", r.epoch},       {"lr", r.lr},
                      {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
                      {"val_metric", r.val_metric}};
  for (const auto& [k, v] : r.aux) j["aux"][k] = v;
  return j;
}

struct TrainResult {
  std::vector<EpochRow> epochs;  // epoch 0 is the starting point
  int best_epoch = 0;
  double best_metric = std::numeric_limits<double>::quiet_NaN();
  double best_val_loss = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, double> best_aux;
};

struct Evaluation {
  double loss = 0;
  MetricReport metrics;
};

/// Center-crop evaluation in eval mode.
inline Evaluation evaluate(TaskModel& model, const SegmentStore& store, const std::vector<Example>& ex) {
  if (ex.size() < 2) throw DomainError("validation needs at least 2 examples");
  std::vector<Signal> windows;
  Mat<double> targets(model.task().output_dim, static_cast<Eigen::Index>(ex.size()));
  for (std::size_t i = 0; i < ex.size(); ++i) {
    windows.push_back(center_crop(store[ex[i].segment].samples));
    for (int d = 0; d < model.task().output_dim; ++d)
      targets(d, static_cast<Eigen::Index>(i)) = ex[i].target[static_cast<std::size_t>(d)];
  }
  const Mat<double> pred = model.predict(windows);
  Evaluation e;
  if (model.task().classification()) {
    // Loss on logits.
    Mat<double> logits = pred.unaryExpr([](double p) {
      const double q = std::clamp(p, 1e-12, 1.0 - 1e-12);
      return std::log(q / (1.0 - q));
    });
    e.loss = task_loss(model.task(), logits, targets);
  } else {
    e.loss = task_loss(model.task(), pred, targets);
  }
  e.metrics = compute_metrics(model.task(), pred, targets);
  return e;
}

namespace detail {

struct Snapshot {
  std::vector<Mat<float>> params, buffers;
};

inline Snapshot snapshot(TaskModel& m) {
  Snapshot s;
  m.visit_params([&](const std::string&, nn::Parameter<float>& p) { s.params.push_back(p.value); }, true);
  m.encoder().visit_buffers([&](const std::string&, nn::Buffer<float>& b) { s.buffers.push_back(b.value); });
  return s;
}

inline void restore(TaskModel& m, const Snapshot& s) {
  std::size_t i = 0, j = 0;
  m.visit_params([&](const std::string&, nn::Parameter<float>& p) { p.value = s.params[i++]; }, true);
  m.encoder().visit_buffers([&](const std::string&, nn::Buffer<float>& b) { b.value = s.buffers[j++]; });
}

inline bool better(const TaskSpec& t, double a, double b) {
  if (std::isnan(a)) return false;
  if (std::isnan(b)) return true;
  return t.higher_is_better() ? a > b : a < b;
}

}  // namespace detail

/// Trains the model in place and leaves it at the best validation epoch.
/// linear_probe updates only the task head with the backbone in eval mode.
inline TrainResult train_head(TaskModel& model, const SegmentStore& store, const std::vector<Example>& train,
                              const std::vector<Example>& val, TrainMode mode, const HeadHyper& hp,
                              std::uint64_t seed, const LogFn& log = {}) {
  hp.validate();
  if (train.empty()) throw DomainError("no training examples");
  const bool backbone = mode != TrainMode::linear_probe;
  nn::Adam<float> opt(nn::collect_params<float>(model, backbone));
  const TaskSpec& task = model.task();
  TrainResult res;

  auto record = [&](EpochRow row) {
    const Evaluation ev = evaluate(model, store, val);
    row.val_loss = ev.loss;
    row.val_metric = ev.metrics.selection;
    row.aux = ev.metrics.values;
    if (!std::isfinite(row.val_loss)) throw NumericalError("non-finite validation loss at epoch " + std::to_string(row.epoch));
    res.epochs.push_back(row);
    return row;
  };

  EpochRow first = record(EpochRow{});
  detail::Snapshot best = detail::snapshot(model);
  res.best_epoch = 0;
  res.best_metric = first.val_metric;
  res.best_val_loss = first.val_loss;
  res.best_aux = first.aux;

  const int micro = std::max(1, hp.batch / hp.accumulate);
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    Rng rng(mix_seed(seed, 0xd0, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = nn::warmup_step(epoch, hp.lr * hp.lr_scale, hp.warmup, hp.milestone);
    double loss_sum = 0;
    std::size_t loss_n = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hp.batch));
      // A lone sample gives degenerate batch statistics.
      if (backbone && end - start < 2) continue;
      opt.zero_grad();
      const auto total = static_cast<double>(end - start);
      for (std::size_t m0 = start; m0 < end; m0 += static_cast<std::size_t>(micro)) {
        const std::size_t m1 = std::min(end, m0 + static_cast<std::size_t>(micro));
        if (backbone && m1 - m0 < 2) continue;
        std::vector<Signal> windows;
        Mat<double> targets(task.output_dim, static_cast<Eigen::Index>(m1 - m0));
        for (std::size_t i = m0; i < m1; ++i) {
          const Example& e = train[order[i]];
          windows.push_back(random_crop(store[e.segment].samples, rng));
          for (int d = 0; d < task.output_dim; ++d)
            targets(d, static_cast<Eigen::Index>(i - m0)) = e.target[static_cast<std::size_t>(d)];
        }
        const Mat<float> out = model.forward(windows, backbone, true);
        auto [loss, g] = loss_and_grad(task, out.cast<double>(), targets);
        if (!std::isfinite(loss)) throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch + 1));
        const double w = static_cast<double>(m1 - m0) / total;
        model.backward((g * w).cast<float>(), backbone);
        loss_sum += loss * static_cast<double>(m1 - m0);
        loss_n += m1 - m0;
      }
      opt.step(lr);
    }
    EpochRow row;
    row.epoch = epoch + 1;
    row.lr = lr;
    if (loss_n) row.train_loss = loss_sum / static_cast<double>(loss_n);
    row = record(row);
    if (detail::better(task, row.val_metric, res.best_metric)) {
      res.best_epoch = row.epoch;
      res.best_metric = row.val_metric;
      res.best_val_loss = row.val_loss;
      res.best_aux = row.aux;
      best = detail::snapshot(model);
    }
    if (log)
      log(std::string(to_string(mode)) + " " + to_string(task.kind) + " epoch " + std::to_string(row.epoch) +
          " train=" + std::to_string(row.train_loss) + " val=" + std::to_string(row.val_loss) + " " +
          to_string(task.selection_metric) + "=" + std::to_string(row.val_metric));
  }
  detail::restore(model, best);
  model.encoder().set_mode(Mode::eval);
  return res;
}

// ---------------------------------------------------------------------------
// Experiment protocol

struct Hyper3 {
  HeadHyper scratch, probe, finetune;
  static Hyper3 table5_for(TaskKind k) {
    return {table5(k, TrainMode::from_scratch), table5(k, TrainMode::linear_probe), table5(k, TrainMode::fine_tune)};
  }
};

struct RunSpec {
  TaskKind task = TaskKind::age;
  double fraction = 1.0;
  std::uint64_t seed = 0;
  Hyper3 hyper = Hyper3::table5_for(TaskKind::age);
};

struct RunOutcome {
  TrainResult scratch, probe, finetune;
  bool have_scratch = false, have_pretrained = false;
  TaskSpec task;
  std::size_t n_train = 0, n_val = 0;
};

/// Percent improvement of a pretrained run over scratch on validation loss.
inline double percent_improvement(double scratch_loss, double pretrained_loss) {
  if (scratch_loss == 0) return 0.0;
  return 100.0 * (scratch_loss - pretrained_loss) / scratch_loss;
}

/// Builds the labelled train/val sets for a run; label_stats come from the
/// training subset actually used.
inline std::pair<std::vector<Example>, std::vector<Example>> run_examples(const SegmentStore& store,
                                                                          const std::vector<std::string>& train_patients,
                                                                          const std::vector<std::string>& val_patients,
                                                                          const RunSpec& r, TaskSpec& task) {
  const LabelSubset sub = make_label_subset(train_patients, r.fraction, r.seed);
  const std::set<std::string> vs(val_patients.begin(), val_patients.end());
  for (const auto& p : sub.patient_ids)
    if (vs.count(p)) throw DomainError("label subset overlaps the validation patients");
  auto train = collect_examples(store, sub.patient_ids, r.task);
  auto val = collect_examples(store, val_patients, r.task);
  if (train.empty()) throw DataError("label subset has no labelled examples for " + std::string(to_string(r.task)));
  task = TaskSpec::make(r.task);
  if (!task.classification()) task.label_stats = compute_label_stats(train, task.output_dim);
  return {std::move(train), std::move(val)};
}

/// Scratch, probe and fine-tune for one (task, fraction, seed) cell. The
/// pretrained encoder is optional; scratch is skipped when `with_scratch` is
/// false.
inline RunOutcome run_cell(const SegmentStore& store, const std::vector<std::string>& train_patients,
                           const std::vector<std::string>& val_patients, const EncoderSpec& scratch_spec,
                           const Encoder<float>* pretrained, const RunSpec& r, bool with_scratch,
                           const LogFn& log = {}, TaskModel* finetuned_out = nullptr) {
  RunOutcome o;
  auto [train, val] = run_examples(store, train_patients, val_patients, r, o.task);
  o.n_train = train.size();
  o.n_val = val.size();
  if (with_scratch) {
    TaskModel m(Encoder<float>(scratch_spec, mix_seed(r.seed, 0x5c)), o.task, mix_seed(r.seed, 0x5d));
    o.scratch = train_head(m, store, train, val, TrainMode::from_scratch, r.hyper.scratch, mix_seed(r.seed, 1), log);
    o.have_scratch = true;
  }
  if (pretrained) {
    TaskModel m(*pretrained, o.task, mix_seed(r.seed, 0x9d));
    o.probe = train_head(m, store, train, val, TrainMode::linear_probe, r.hyper.probe, mix_seed(r.seed, 2), log);
    o.finetune = train_head(m, store, train, val, TrainMode::fine_tune, r.hyper.finetune, mix_seed(r.seed, 3), log);
    o.have_pretrained = true;
    if (finetuned_out) *finetuned_out = std::move(m);
  }
  return o;
}

struct GridRow {
  std::string variant;
  std::string task;
  std::string mode;
  double fraction = 1.0;
  std::uint64_t seed = 0;
  int best_epoch = 0;
  std::string selection_metric_name;
  double selection_metric = 0;
  double val_loss = 0;
  std::map<std::string, double> aux;
  std::optional<double> percent_improvement;
  std::int64_t backbone_params = 0;
};

inline nlohmann::json to_json(const GridRow& r) {
  nlohmann::json j = {{"variant", r.variant},
                      {"task", r.task},
                      {"mode", r.mode},
                      {"fraction", r.fraction},
                      {"seed", r.seed},
                      {"best_epoch", r.best_epoch},
                      {"selection_metric_name", r.selection_metric_name},
                      {"selection_metric", r.selection_metric},
                      {"val_loss", r.val_loss},
                      {"backbone_params", r.backbone_params}};
  j["aux"] = nlohmann::json::object();
  for (const auto& [k, v] : r.aux) j["aux"][k] = v;
  j["percent_improvement"] = r.percent_improvement ? nlohmann::json(*r.percent_improvement) : nlohmann::json(nullptr);
  return j;
}

inline GridRow grid_row_from_json(const nlohmann::json& j) {
  GridRow r;
  r.variant = j.at("variant").get<std::string>();
  r.task = j.at("task").get<std::string>();
  r.mode = j.at("mode").get<std::string>();
  r.fraction = j.at("fraction").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.best_epoch = j.at("best_epoch").get<int>();
  r.selection_metric_name = j.at("selection_metric_name").get<std::string>();
  r.selection_metric = j.at("selection_metric").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                          : j.at("selection_metric").get<double>();
  r.val_loss = j.at("val_loss").get<double>();
  r.backbone_params = j.value("backbone_params", std::int64_t{0});
  if (j.contains("aux"))
    for (const auto& [k, v] : j.at("aux").items()) r.aux[k] = v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  if (!j.at("percent_improvement").is_null()) r.percent_improvement = j.at("percent_improvement").get<double>();
  return r;
}

struct GridSpec {
  /// Variant name -> pretraining checkpoint.
  std::vector<std::pair<std::string, std::filesystem::path>> variants;
  std::vector<TaskKind> tasks{TaskKind::age, TaskKind::sex, TaskKind::intervals, TaskKind::afib};
  std::vector<double> fractions{1.0, 0.1, 0.01};
  std::vector<std::uint64_t> seeds{0};
  std::map<TaskKind, Hyper3> hyper;  // missing tasks use Table 5
};

/// Every (variant, task, fraction, seed) cell in scratch / probe / fine-tune
/// modes. Failing cells are logged and skipped.
inline std::vector<GridRow> run_experiment_grid(const SegmentStore& store, const std::vector<std::string>& train_patients,
                                                const std::vector<std::string>& val_patients, const GridSpec& g,
                                                const LogFn& log = log_stderr,
                                                const std::function<void(const GridRow&)>& on_row = {}) {
  std::vector<GridRow> rows;
  for (const auto& [variant, path] : g.variants) {
    Encoder<float> enc;
    try {
      enc = ckpt::load_encoder(path);
    } catch (const std::exception& e) {
      if (log) log("warning: variant " + variant + " skipped: " + e.what());
      continue;
    }
    const std::int64_t nparams = enc.param_count(false);
    for (TaskKind task : g.tasks) {
      for (double f : g.fractions) {
        for (std::uint64_t seed : g.seeds) {
          RunSpec r;
          r.task = task;
          r.fraction = f;
          r.seed = seed;
          auto it = g.hyper.find(task);
          r.hyper = it != g.hyper.end() ? it->second : Hyper3::table5_for(task);
          try {
            const RunOutcome o = run_cell(store, train_patients, val_patients, enc.spec(), &enc, r, true);
            auto emit = [&](const char* mode, const TrainResult& tr, std::optional<double> pi) {
              GridRow row{variant, to_string(task), mode, f, seed, tr.best_epoch,
                          to_string(o.task.selection_metric), tr.best_metric, tr.best_val_loss, tr.best_aux, pi, nparams};
              rows.push_back(row);
              if (on_row) on_row(row);
            };
            emit("from_scratch", o.scratch, std::nullopt);
            emit("linear_probe", o.probe, percent_improvement(o.scratch.best_val_loss, o.probe.best_val_loss));
            emit("fine_tune", o.finetune, percent_improvement(o.scratch.best_val_loss, o.finetune.best_val_loss));
          } catch (const std::exception& e) {
            if (log)
              log("warning: cell " + variant + "/" + to_string(task) + "/" + std::to_string(f) + "/" +
                  std::to_string(seed) + " missing: " + e.what());
          }
        }
      }
    }
  }
  return rows;
}

}  // namespace pclr::downstream
