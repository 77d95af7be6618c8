#pragma once

// Patient-contrastive momentum pretraining.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pclr/checkpoint.hpp"
#include "pclr/dataset.hpp"
#include "pclr/encoder.hpp"
#include "pclr/nn/optim.hpp"

namespace pclr::pretrain {

inline constexpr double kUnitNormTolerance = 1e-4;

// ---------------------------------------------------------------------------
// Splits and epoch sampling

struct PatientSplit {
  std::vector<std::string> train_patient_ids;
  std::vector<std::string> val_patient_ids;

  void check() const {
    std::set<std::string> t(train_patient_ids.begin(), train_patient_ids.end());
    for (const auto& v : val_patient_ids)
      if (t.count(v)) throw DomainError("patient " + v + " is in both train and validation");
  }
};

/// Patient-level split; the validation share is round(n * val_fraction),
/// kept within [1, n - 1].
inline PatientSplit make_split(std::vector<std::string> patient_ids, double val_fraction, std::uint64_t seed) {
  if (patient_ids.empty()) throw DomainError("cannot split an empty cohort");
  if (patient_ids.size() < 2) throw DomainError("a split needs at least 2 patients");
  if (!(val_fraction > 0 && val_fraction < 1)) throw DomainError("val_fraction must be in (0, 1)");
  std::sort(patient_ids.begin(), patient_ids.end());
  patient_ids.erase(std::unique(patient_ids.begin(), patient_ids.end()), patient_ids.end());
  const auto n = static_cast<long>(patient_ids.size());
  const long n_val = std::clamp(std::lround(static_cast<double>(n) * val_fraction), 1L, n - 1);
  Rng rng(mix_seed(seed, 0x5b117));
  std::shuffle(patient_ids.begin(), patient_ids.end(), rng);
  PatientSplit s;
  s.val_patient_ids.assign(patient_ids.begin(), patient_ids.begin() + n_val);
  s.train_patient_ids.assign(patient_ids.begin() + n_val, patient_ids.end());
  std::sort(s.val_patient_ids.begin(), s.val_patient_ids.end());
  std::sort(s.train_patient_ids.begin(), s.train_patient_ids.end());
  return s;
}

struct EpochItem {
  std::string patient_id;
  std::size_t segment;  // index into the store
};

/// One uniformly chosen segment per patient, in shuffled order.
inline std::vector<EpochItem> sample_epoch(const SegmentStore& store, const std::vector<std::string>& patients,
                                           std::uint64_t seed, const LogFn& log = log_stderr) {
  Rng rng(seed);
  std::vector<EpochItem> out;
  for (const auto& pid : patients) {
    const auto& segs = store.of_patient(pid);
    if (segs.empty()) {
      if (log) log("warning: patient " + pid + " has no segments, skipped");
      continue;
    }
    std::uniform_int_distribution<std::size_t> d(0, segs.size() - 1);
    out.push_back({pid, segs[d(rng)]});
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

/// Query and key views: crops of two different segments of the patient when
/// available, else two crops of the same segment.
inline std::pair<Signal, Signal> positive_pair(const SegmentStore& store, std::size_t segment, Rng& rng) {
  const Segment& a = store[segment];
  const auto& segs = store.of_patient(a.patient_id);
  std::size_t other = segment;
  if (segs.size() >= 2) {
    std::uniform_int_distribution<std::size_t> d(0, segs.size() - 2);
    std::size_t j = d(rng);
    // Skip over the anchor so the draw is uniform over the others.
    const auto pos = static_cast<std::size_t>(std::find(segs.begin(), segs.end(), segment) - segs.begin());
    if (j >= pos) ++j;
    other = segs[j];
  }
  Signal q = random_crop(a.samples, rng);
  Signal k = random_crop(store[other].samples, rng);
  return {std::move(q), std::move(k)};
}

// ---------------------------------------------------------------------------
// Losses

namespace detail {

template <typename Derived>
void require_unit(const Eigen::MatrixBase<Derived>& v, const char* what) {
  const double n = static_cast<double>(v.norm());
  if (!(std::abs(n - 1.0) <= kUnitNormTolerance))
    throw DomainError(std::string(what) + " must be unit-norm (norm " + std::to_string(n) + ")");
}

template <typename T>
void require_unit_cols(const Mat<T>& m, const char* what) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) require_unit(m.col(j), what);
}

template <typename T>
void require_unit_rows(const Mat<T>& m, const char* what) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) require_unit(m.row(i), what);
}

}  // namespace detail

/// Single-pair InfoNCE against a K x d queue; the positive term is part of
/// the denominator.
template <typename T>
double info_nce(const nn::Vec<T>& q, const nn::Vec<T>& k_pos, const Mat<T>& queue, double tau) {
  if (!(tau > 0)) throw DomainError("temperature must be positive");
  detail::require_unit(q, "query");
  detail::require_unit(k_pos, "positive key");
  detail::require_unit_rows(queue, "queue row");
  if (queue.rows() > 0 && queue.cols() != q.size()) throw DomainError("queue width differs from embedding width");
  const double pos = static_cast<double>(q.dot(k_pos)) / tau;
  double mx = pos;
  std::vector<double> neg(static_cast<std::size_t>(queue.rows()));
  for (Eigen::Index j = 0; j < queue.rows(); ++j) {
    neg[static_cast<std::size_t>(j)] = static_cast<double>(queue.row(j).dot(q.transpose())) / tau;
    mx = std::max(mx, neg[static_cast<std::size_t>(j)]);
  }
  double s = std::exp(pos - mx);
  for (double v : neg) s += std::exp(v - mx);
  return std::max(0.0, mx + std::log(s) - pos);
}

template <typename T>
struct LossAndGrad {
  double loss = 0;
  Mat<T> grad;  // dL/dq, same shape as q
};

/// Minibatch InfoNCE: q, k are d x B (unit columns), queue K x d. Returns the
/// batch mean and its gradient with respect to q (k is treated as constant).
template <typename T>
LossAndGrad<T> info_nce_batch(const Mat<T>& q, const Mat<T>& k, const Mat<T>& queue, double tau) {
  if (!(tau > 0)) throw DomainError("temperature must be positive");
  if (q.rows() != k.rows() || q.cols() != k.cols()) throw DomainError("query/key shape mismatch");
  if (queue.rows() > 0 && queue.cols() != q.rows()) throw DomainError("queue width differs from embedding width");
  detail::require_unit_cols(q, "query");
  detail::require_unit_cols(k, "positive key");
  detail::require_unit_rows(queue, "queue row");
  const Eigen::Index B = q.cols();
  LossAndGrad<T> out;
  out.grad = Mat<T>::Zero(q.rows(), B);
  if (B == 0) return out;
  const Mat<T> neg = queue * q;  // K x B
  const double inv_b = 1.0 / static_cast<double>(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const double pos = static_cast<double>(q.col(b).dot(k.col(b))) / tau;
    double mx = pos;
    for (Eigen::Index j = 0; j < neg.rows(); ++j) mx = std::max(mx, static_cast<double>(neg(j, b)) / tau);
    const double ep = std::exp(pos - mx);
    double s = ep;
    nn::Vec<T> w(neg.rows());
    for (Eigen::Index j = 0; j < neg.rows(); ++j) {
      const double e = std::exp(static_cast<double>(neg(j, b)) / tau - mx);
      w(j) = static_cast<T>(e);
      s += e;
    }
    out.loss += (mx + std::log(s) - pos) * inv_b;
    // d/dq = (sum_j p_j x_j - k) / tau, x_0 = k.
    const T scale = static_cast<T>(inv_b / tau);
    const T p0 = static_cast<T>(ep / s);
    nn::Vec<T> g = (p0 - T(1)) * k.col(b);
    if (neg.rows() > 0) g += queue.transpose() * (w / static_cast<T>(s));
    out.grad.col(b) = scale * g;
  }
  out.loss = std::max(0.0, out.loss);
  return out;
}

/// InfoNCE where each query's negatives are the other queries' keys.
template <typename T>
double info_nce_in_batch(const Mat<T>& q, const Mat<T>& k, double tau) {
  if (!(tau > 0)) throw DomainError("temperature must be positive");
  const Mat<T> sim = q.transpose() * k;  // B x B
  double total = 0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < sim.cols(); ++j) mx = std::max(mx, static_cast<double>(sim(i, j)) / tau);
    double s = 0;
    for (Eigen::Index j = 0; j < sim.cols(); ++j) s += std::exp(static_cast<double>(sim(i, j)) / tau - mx);
    total += mx + std::log(s) - static_cast<double>(sim(i, i)) / tau;
  }
  return sim.rows() ? total / static_cast<double>(sim.rows()) : 0.0;
}

/// NT-Xent over 2N embeddings (columns), with column i paired to i + N.
template <typename T>
double nt_xent(const Mat<T>& z, double tau) {
  if (!(tau > 0)) throw DomainError("temperature must be positive");
  if (z.cols() % 2 != 0 || z.cols() == 0) throw DomainError("nt_xent needs an even, non-empty batch");
  const Mat<T> zn = nn::l2_normalize_cols(z);
  const Eigen::Index n2 = z.cols(), n = n2 / 2;
  const Mat<T> sim = zn.transpose() * zn;
  double total = 0;
  for (Eigen::Index i = 0; i < n2; ++i) {
    const Eigen::Index j = (i + n) % n2;
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < n2; ++c)
      if (c != i) mx = std::max(mx, static_cast<double>(sim(i, c)) / tau);
    double s = 0;
    for (Eigen::Index c = 0; c < n2; ++c)
      if (c != i) s += std::exp(static_cast<double>(sim(i, c)) / tau - mx);
    total += mx + std::log(s) - static_cast<double>(sim(i, j)) / tau;
  }
  return std::max(0.0, total / static_cast<double>(n2));
}

// ---------------------------------------------------------------------------
// Momentum encoder and queue

/// key <- m * key + (1 - m) * query for every parameter and running
/// statistic.
template <typename T>
void momentum_update(Encoder<T>& query, Encoder<T>& key, double m) {
  if (!(m >= 0 && m <= 1)) throw DomainError("momentum must be in [0, 1]");
  std::vector<std::pair<std::string, Mat<T>*>> qs, ks;
  query.visit_params([&](const std::string& n, nn::Parameter<T>& p) { qs.emplace_back(n, &p.value); });
  query.visit_buffers([&](const std::string& n, nn::Buffer<T>& b) { qs.emplace_back(n, &b.value); });
  key.visit_params([&](const std::string& n, nn::Parameter<T>& p) { ks.emplace_back(n, &p.value); });
  key.visit_buffers([&](const std::string& n, nn::Buffer<T>& b) { ks.emplace_back(n, &b.value); });
  if (qs.size() != ks.size()) throw DomainError("momentum_update: encoders differ in structure");
  for (std::size_t i = 0; i < qs.size(); ++i)
    if (qs[i].first != ks[i].first || qs[i].second->rows() != ks[i].second->rows() ||
        qs[i].second->cols() != ks[i].second->cols())
      throw DomainError("momentum_update: tensor " + ks[i].first + " differs in structure");
  const T a = static_cast<T>(m), b = static_cast<T>(1.0 - m);
  for (std::size_t i = 0; i < qs.size(); ++i) *ks[i].second = a * *ks[i].second + b * *qs[i].second;
}

struct MocoState {
  Encoder<float> query;
  Encoder<float> key;
  Mat<float> queue;  // K x d, unit rows
  int cursor = 0;
  double momentum = 0.999;
  double temperature = 0.1;

  /// Fresh state: key copies query; queue holds K random unit vectors.
  static MocoState init(const EncoderSpec& spec, int queue_size, double momentum, double temperature,
                        std::uint64_t seed) {
    if (queue_size <= 0) throw ConfigError("queue size must be positive");
    MocoState s;
    s.query = Encoder<float>(spec, mix_seed(seed, 0x1417));
    s.key = s.query;
    s.momentum = momentum;
    s.temperature = temperature;
    Rng rng(mix_seed(seed, 0x9e0e));
    std::normal_distribution<double> g(0.0, 1.0);
    Mat<double> qd(queue_size, s.query.projection_dim());
    for (Eigen::Index i = 0; i < qd.size(); ++i) qd.data()[i] = g(rng);
    for (Eigen::Index i = 0; i < qd.rows(); ++i) qd.row(i) /= qd.row(i).norm();
    s.queue = qd.cast<float>();
    return s;
  }

  int queue_size() const { return static_cast<int>(queue.rows()); }

  double max_queue_norm_error() const {
    double e = 0;
    for (Eigen::Index i = 0; i < queue.rows(); ++i)
      e = std::max(e, std::abs(static_cast<double>(queue.row(i).norm()) - 1.0));
    return e;
  }
};

/// Writes B keys (d x B) at the cursor and advances it modulo K.
inline void enqueue(MocoState& s, const Mat<float>& keys) {
  const int K = s.queue_size();
  const auto B = static_cast<int>(keys.cols());
  if (B <= 0 || K % B != 0)
    throw ConfigError("batch size " + std::to_string(B) + " does not divide queue size " + std::to_string(K));
  if (keys.rows() != s.queue.cols()) throw DomainError("key width differs from queue width");
  detail::require_unit_cols(keys, "key");
  s.queue.middleRows(s.cursor, B) = keys.transpose();
  s.cursor = (s.cursor + B) % K;
}

// ---------------------------------------------------------------------------
// Schedule

struct ScheduleSpec {
  int total_epochs = 500;
  int warmup_epochs = 5;
  double initial_lr = 0.000625;
  double final_lr = 1e-6;
  int batch = 256;
  double weight_decay = 1e-4;

  void validate() const {
    if (total_epochs <= 0 || warmup_epochs < 0 || initial_lr <= 0 || final_lr <= 0 || batch <= 0 ||
        weight_decay < 0)
      throw ConfigError("schedule values must be positive");
    if (warmup_epochs >= total_epochs) throw ConfigError("warmup must be shorter than training");
  }
};

/// Linear warmup from initial/10, then cosine annealing to final_lr.
inline double lr_schedule(double epoch, const ScheduleSpec& s) {
  if (!(epoch >= 0 && epoch <= s.total_epochs)) throw DomainError("epoch outside [0, total_epochs]");
  return nn::warmup_cosine(epoch, s.initial_lr, s.final_lr, s.warmup_epochs, s.total_epochs);
}

// ---------------------------------------------------------------------------
// Retrieval

/// Fraction of columns whose cosine nearest neighbour (excluding itself)
/// carries the same label.
template <typename T>
double retrieval_score(const Mat<T>& emb, const std::vector<std::string>& labels) {
  if (emb.cols() != static_cast<Eigen::Index>(labels.size())) throw DomainError("label count mismatch");
  if (emb.cols() < 2) throw DomainError("retrieval needs at least 2 embeddings");
  const Mat<double> zn = nn::l2_normalize_cols<double>(emb.template cast<double>());
  const Mat<double> sim = zn.transpose() * zn;
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    Eigen::Index best = -1;
    double bv = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < sim.cols(); ++j)
      if (j != i && sim(i, j) > bv) {
        bv = sim(i, j);
        best = j;
      }
    hits += labels[static_cast<std::size_t>(best)] == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hits) / static_cast<double>(sim.rows());
}

/// Chance level for n_patients groups of n_each: (n_each - 1) / (n - 1).
inline double retrieval_chance(int n_patients, int n_each) {
  return static_cast<double>(n_each - 1) / (static_cast<double>(n_patients) * n_each - 1);
}

/// Nearest-neighbour patient retrieval on center-crop backbone embeddings of
/// up to n_patients x n_segments_each segments (patients in sorted order,
/// each needing at least 2 segments).
inline double patient_retrieval_score(Encoder<float>& enc, const SegmentStore& store,
                                      const std::vector<std::string>& patients, int n_patients,
                                      int n_segments_each) {
  std::vector<Signal> windows;
  std::vector<std::string> labels;
  int used = 0;
  for (const auto& pid : patients) {
    if (used >= n_patients) break;
    const auto& segs = store.of_patient(pid);
    if (segs.size() < 2) continue;
    const std::size_t n = std::min(segs.size(), static_cast<std::size_t>(n_segments_each));
    for (std::size_t i = 0; i < n; ++i) {
      windows.push_back(center_crop(store[segs[i]].samples));
      labels.push_back(pid);
    }
    ++used;
  }
  if (used < 2) throw DomainError("retrieval needs at least 2 patients with 2+ segments");
  return retrieval_score(embed_windows(enc, std::span<const Signal>(windows)), labels);
}

// ---------------------------------------------------------------------------
// Training loop

struct PretrainConfig {
  EncoderSpec encoder;
  ScheduleSpec schedule;
  int queue_size = 38912;
  double temperature = 0.1;
  double momentum = 0.999;
  int val_batch = 512;  // embeddings, i.e. val_batch / 2 pairs
  int retrieval_patients = 10;
  int retrieval_segments = 20;
  std::uint64_t seed = 0;
  /// Key encoder normalizes with batch statistics (true) or with its
  /// running statistics (false).
  bool key_batch_stats = true;
  /// Also score the swapped pair (key view through the query encoder) and
  /// average the two losses. Only the first pass's keys are enqueued.
  bool symmetric_loss = false;
  /// Stop after this epoch (simulated interruption); -1 runs to the end.
  int stop_after_epoch = -1;

  void validate() const {
    encoder.validate();
    schedule.validate();
    if (queue_size <= 0) throw ConfigError("queue_size must be positive");
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
    if (!(momentum > 0 && momentum < 1)) throw ConfigError("momentum must be in (0, 1)");
    if (val_batch < 2 || val_batch % 2) throw ConfigError("val_batch must be even and >= 2");
  }
};

inline nlohmann::json to_json(const ScheduleSpec& s) {
  return {{"total_epochs", s.total_epochs}, {"warmup_epochs", s.warmup_epochs}, {"initial_lr", s.initial_lr},
          {"final_lr", s.final_lr},         {"batch", s.batch},                 {"weight_decay", s.weight_decay}};
}

inline nlohmann::json to_json(const PretrainConfig& c) {
  return {{"encoder", ckpt::to_json(c.encoder)},
          {"schedule", to_json(c.schedule)},
          {"queue_size", c.queue_size},
          {"temperature", c.temperature},
          {"momentum", c.momentum},
          {"val_batch", c.val_batch},
          {"retrieval_patients", c.retrieval_patients},
          {"retrieval_segments", c.retrieval_segments},
          {"key_batch_stats", c.key_batch_stats},
          {"symmetric_loss", c.symmetric_loss},
          {"seed", c.seed}};
}

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_infonce = std::numeric_limits<double>::quiet_NaN();
  double val_infonce = 0;
  double val_ntxent = 0;
  std::optional<double> retrieval_score;
  double seconds = 0;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  nlohmann::json j = {{"epoch", m.epoch},          {"lr", m.lr},
                      {"train_infonce", m.train_infonce}, {"val_infonce", m.val_infonce},
                      {"val_ntxent", m.val_ntxent}, {"seconds", m.seconds}};
  j["retrieval_score"] = m.retrieval_score ? nlohmann::json(*m.retrieval_score) : nlohmann::json(nullptr);
  return j;
}

inline EpochMetrics epoch_metrics_from_json(const nlohmann::json& j) {
  EpochMetrics m;
  m.epoch = j.at("epoch").get<int>();
  m.lr = j.at("lr").get<double>();
  m.train_infonce = j.at("train_infonce").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                    : j.at("train_infonce").get<double>();
  m.val_infonce = j.at("val_infonce").get<double>();
  m.val_ntxent = j.at("val_ntxent").get<double>();
  if (!j.at("retrieval_score").is_null()) m.retrieval_score = j.at("retrieval_score").get<double>();
  m.seconds = j.value("seconds", 0.0);
  return m;
}

struct PretrainResult {
  EpochMetrics initial;  // evaluation before any update
  std::vector<EpochMetrics> epochs;
  int best_epoch = 0;
  int effective_batch = 0;
  std::filesystem::path best_checkpoint, last_checkpoint, metric_log;
};

struct PretrainHooks {
  LogFn log = log_stderr;
  /// Held-out patients for retrieval; defaults to the validation patients.
  const SegmentStore* retrieval_store = nullptr;
  bool resume = false;
};

/// Largest divisor of K not exceeding limit.
inline int divisor_batch(int K, int limit) {
  for (int b = std::min(K, limit); b >= 1; --b)
    if (K % b == 0) return b;
  return 1;
}

inline void save_moco(const std::filesystem::path& path, MocoState& s, nn::Adam<float>& opt,
                      const PretrainConfig& cfg, int epoch, double best_val, int best_epoch) {
  ckpt::Archive a;
  a.meta = {{"kind", "pretrain"},      {"spec", ckpt::to_json(s.query.spec())},
            {"epoch", epoch},          {"cursor", s.cursor},
            {"momentum", s.momentum},  {"temperature", s.temperature},
            {"adam_steps", opt.steps()}, {"best_val", best_val},
            {"best_epoch", best_epoch}, {"config", to_json(cfg)}};
  ckpt::put_encoder(a, "query.", s.query);
  ckpt::put_encoder(a, "key.", s.key);
  a.put("queue", s.queue);
  const auto& ps = opt.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    a.put("adam.m." + ps[i].first, opt.first_moments()[i]);
    a.put("adam.v." + ps[i].first, opt.second_moments()[i]);
  }
  a.save(path);
}

struct LoadedMoco {
  int epoch = 0;
  double best_val = 0;
  int best_epoch = 0;
};

inline LoadedMoco load_moco(const std::filesystem::path& path, MocoState& s, nn::Adam<float>& opt) {
  const ckpt::Archive a = ckpt::Archive::load(path);
  if (a.meta.value("kind", std::string{}) != "pretrain") throw FormatError(path.string() + ": not a pretraining checkpoint");
  ckpt::get_encoder(a, "query.", s.query);
  ckpt::get_encoder(a, "key.", s.key);
  a.get_into("queue", s.queue);
  s.cursor = a.meta.at("cursor").get<int>();
  const auto& ps = opt.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    a.get_into("adam.m." + ps[i].first, opt.first_moments()[i]);
    a.get_into("adam.v." + ps[i].first, opt.second_moments()[i]);
  }
  opt.set_steps(a.meta.at("adam_steps").get<std::int64_t>());
  return {a.meta.at("epoch").get<int>(), a.meta.at("best_val").get<double>(), a.meta.at("best_epoch").get<int>()};
}

namespace detail {

struct ValidationSet {
  std::vector<Signal> q, k;
};

inline ValidationSet make_validation_set(const SegmentStore& store, std::vector<std::string> patients,
                                         int max_pairs, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xfa11da7e));
  if (static_cast<int>(patients.size()) > max_pairs) {
    std::shuffle(patients.begin(), patients.end(), rng);
    patients.resize(static_cast<std::size_t>(max_pairs));
    std::sort(patients.begin(), patients.end());
  }
  ValidationSet v;
  for (const auto& item : sample_epoch(store, patients, rng())) {
    auto [a, b] = positive_pair(store, item.segment, rng);
    v.q.push_back(std::move(a));
    v.k.push_back(std::move(b));
  }
  return v;
}

inline std::pair<double, double> evaluate(MocoState& s, const ValidationSet& v) {
  if (v.q.empty()) return {0.0, 0.0};
  const Mode mq = s.query.mode(), mk = s.key.mode();
  s.query.set_mode(Mode::eval);
  s.key.set_mode(Mode::eval);
  const Mat<float> qz = s.query.project(embed_windows(s.query, std::span<const Signal>(v.q)));
  const Mat<float> kz = s.key.project(embed_windows(s.key, std::span<const Signal>(v.k)));
  const Mat<float> qz2 = s.query.project(embed_windows(s.query, std::span<const Signal>(v.k)));
  s.query.set_mode(mq);
  s.key.set_mode(mk);
  Mat<float> both(qz.rows(), qz.cols() * 2);
  both << qz, qz2;
  return {info_nce_in_batch(qz, kz, s.temperature), v.q.size() >= 1 ? nt_xent(both, s.temperature) : 0.0};
}

}  // namespace detail

/// Runs (or resumes) pretraining, writing metrics.jsonl, last.ckpt,
/// best.ckpt and summary.json into out_dir.
inline PretrainResult pretrain_loop(const SegmentStore& store, const PatientSplit& split, const PretrainConfig& cfg,
                                    const std::filesystem::path& out_dir, const PretrainHooks& hooks = {}) {
  cfg.validate();
  split.check();
  if (split.train_patient_ids.size() + split.val_patient_ids.size() < 2)
    throw DomainError("pretraining needs at least 2 patients");
  std::filesystem::create_directories(out_dir);
  const LogFn& log = hooks.log;

  PretrainResult res;
  res.metric_log = out_dir / "metrics.jsonl";
  res.last_checkpoint = out_dir / "last.ckpt";
  res.best_checkpoint = out_dir / "best.ckpt";

  MocoState s = MocoState::init(cfg.encoder, cfg.queue_size, cfg.momentum, cfg.temperature, cfg.seed);
  nn::Adam<float> opt(nn::collect_params<float>(s.query), nn::AdamOptions{0.9, 0.999, 1e-8, cfg.schedule.weight_decay});

  std::size_t n_train = 0;
  for (const auto& p : split.train_patient_ids) n_train += !store.of_patient(p).empty();
  if (n_train == 0) throw DataError("no training patient has segments");
  const int B = divisor_batch(cfg.queue_size, std::min<int>(cfg.schedule.batch, static_cast<int>(n_train)));
  if (B != cfg.schedule.batch && log)
    log("warning: batch reduced to " + std::to_string(B) + " (must divide the queue and fit the cohort)");
  res.effective_batch = B;

  const auto val = detail::make_validation_set(store, split.val_patient_ids, cfg.val_batch / 2, cfg.seed);
  const SegmentStore& rstore = hooks.retrieval_store ? *hooks.retrieval_store : store;
  const std::vector<std::string> rpatients =
      hooks.retrieval_store ? hooks.retrieval_store->patient_ids() : split.val_patient_ids;

  auto retrieval = [&]() -> std::optional<double> {
    try {
      return patient_retrieval_score(s.query, rstore, rpatients, cfg.retrieval_patients, cfg.retrieval_segments);
    } catch (const DomainError&) {
      return std::nullopt;
    }
  };

  int start_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  nlohmann::json summary;
  const auto summary_path = out_dir / "summary.json";

  if (hooks.resume && std::filesystem::exists(res.last_checkpoint)) {
    const LoadedMoco lm = load_moco(res.last_checkpoint, s, opt);
    start_epoch = lm.epoch;
    best_val = lm.best_val;
    best_epoch = lm.best_epoch;
    // Drop log rows written after the checkpoint.
    std::vector<nlohmann::json> kept;
    if (std::filesystem::exists(res.metric_log))
      for (auto& row : io::read_jsonl(res.metric_log)) {
        if (row.at("epoch").get<int>() <= start_epoch) {
          res.epochs.push_back(epoch_metrics_from_json(row));
          kept.push_back(std::move(row));
        }
      }
    io::write_jsonl(res.metric_log, kept);
    if (std::filesystem::exists(summary_path)) {
      summary = nlohmann::json::parse(io::detail::read_all(summary_path));
      res.initial = epoch_metrics_from_json(summary.at("initial"));
    }
    if (log) log("resumed from epoch " + std::to_string(start_epoch));
  } else {
    std::filesystem::remove(res.metric_log);
    auto [vi, vn] = detail::evaluate(s, val);
    res.initial.epoch = 0;
    res.initial.lr = lr_schedule(0, cfg.schedule);
    res.initial.val_infonce = vi;
    res.initial.val_ntxent = vn;
    res.initial.retrieval_score = retrieval();
    summary = {{"initial", to_json(res.initial)}, {"config", to_json(cfg)}, {"effective_batch", B}};
    io::write_file(summary_path, summary.dump(2));
    if (log) log("init val_infonce=" + std::to_string(vi) + " val_ntxent=" + std::to_string(vn));
  }

  io::JsonlAppender metrics(res.metric_log);
  const int total = cfg.schedule.total_epochs;
  for (int epoch = start_epoch; epoch < total; ++epoch) {
    split.check();
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(mix_seed(cfg.seed, 0xe90c, static_cast<std::uint64_t>(epoch)));
    const auto items = sample_epoch(store, split.train_patient_ids, rng(), log);
    const std::size_t steps = items.size() / static_cast<std::size_t>(B);
    double loss_sum = 0;
    s.query.set_mode(Mode::train);
    s.key.set_mode(cfg.key_batch_stats ? Mode::train : Mode::eval);
    EpochMetrics em;
    em.epoch = epoch + 1;
    em.lr = lr_schedule(epoch, cfg.schedule);
    for (std::size_t step = 0; step < steps; ++step) {
      std::vector<Signal> qv, kv;
      for (int b = 0; b < B; ++b) {
        auto [a, k] = positive_pair(store, items[step * static_cast<std::size_t>(B) + static_cast<std::size_t>(b)].segment, rng);
        qv.push_back(std::move(a));
        kv.push_back(std::move(k));
      }
      const double lr = lr_schedule(epoch + static_cast<double>(step) / static_cast<double>(steps), cfg.schedule);
      Mat<float> enqueue_keys;
      opt.zero_grad();
      double loss = 0;
      const int passes = cfg.symmetric_loss ? 2 : 1;
      for (int pass = 0; pass < passes; ++pass) {
        const auto& a = pass == 0 ? qv : kv;
        const auto& b = pass == 0 ? kv : qv;
        const Mat<float> qz = s.query.project(s.query.forward(make_batch<float>(a), {true, true}), true);
        const Mat<float> kz = s.key.project(s.key.forward(make_batch<float>(b), {false, false}));
        auto lg = info_nce_batch(qz, kz, s.queue, s.temperature);
        if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) {
          save_moco(out_dir / "diagnostic.ckpt", s, opt, cfg, epoch, best_val, best_epoch);
          throw NumericalError("non-finite InfoNCE at epoch " + std::to_string(epoch + 1) + " step " +
                               std::to_string(step) + "; diagnostic checkpoint written");
        }
        lg.grad /= static_cast<float>(passes);
        loss += lg.loss / passes;
        s.query.backward(s.query.project_backward(lg.grad));
        if (pass == 0) enqueue_keys = kz;
      }
      opt.step(lr);
      if (!s.query.all_finite()) {
        save_moco(out_dir / "diagnostic.ckpt", s, opt, cfg, epoch, best_val, best_epoch);
        throw NumericalError("non-finite parameters at epoch " + std::to_string(epoch + 1));
      }
      momentum_update(s.query, s.key, s.momentum);
      enqueue(s, enqueue_keys);
      loss_sum += loss;
    }
    if (steps) em.train_infonce = loss_sum / static_cast<double>(steps);
    auto [vi, vn] = detail::evaluate(s, val);
    em.val_infonce = vi;
    em.val_ntxent = vn;
    em.retrieval_score = retrieval();
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (vi < best_val) {
      best_val = vi;
      best_epoch = em.epoch;
      save_moco(res.best_checkpoint, s, opt, cfg, em.epoch, best_val, best_epoch);
    }
    metrics.append(to_json(em));
    save_moco(res.last_checkpoint, s, opt, cfg, em.epoch, best_val, best_epoch);
    res.epochs.push_back(em);
    if (log)
      log("epoch " + std::to_string(em.epoch) + " lr=" + std::to_string(em.lr) +
          " train=" + std::to_string(em.train_infonce) + " val=" + std::to_string(vi) +
          " ntxent=" + std::to_string(vn) +
          (em.retrieval_score ? " retrieval=" + std::to_string(*em.retrieval_score) : std::string{}));
    if (cfg.stop_after_epoch >= 0 && em.epoch >= cfg.stop_after_epoch) break;
  }
  res.best_epoch = best_epoch;
  summary["best_epoch"] = best_epoch;
  summary["best_val_infonce"] = best_val;
  summary["epochs_completed"] = res.epochs.empty() ? 0 : res.epochs.back().epoch;
  io::write_file(summary_path, summary.dump(2));
  return res;
}

}  // namespace pclr::pretrain
