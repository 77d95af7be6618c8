// Acceptance suite: one PASS/FAIL line per criterion.
//
// Expensive artifacts (cohorts, the pretraining run, downstream outcomes and
// task models) are cached under --cache and reused on later runs.

#include <unsupported/Eigen/FFT>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pclr/annotate.hpp"
#include "pclr/checkpoint.hpp"
#include "pclr/curate.hpp"
#include "pclr/dataset.hpp"
#include "pclr/downstream.hpp"
#include "pclr/harness/formats.hpp"
#include "pclr/pretrain.hpp"

using namespace pclr;
namespace fs = std::filesystem;
using nlohmann::json;
using downstream::TaskKind;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

std::string slurp(const fs::path& p) { return io::detail::read_all(p); }

// ---------------------------------------------------------------------------
// Shared fixtures

struct Fixtures {
  fs::path cache;
  LogFn log;

  static constexpr int kPatients = 200;
  static constexpr double kHours = 3;
  static constexpr int kHeldOut = 10;
  static constexpr double kHeldOutHours = 20;
  static constexpr std::uint64_t kSplitSeed = 1;

  fs::path cohort_dir() const { return cache / "cohort"; }
  fs::path heldout_dir() const { return cache / "heldout"; }
  fs::path pretrain_dir() const { return cache / "pretrain"; }

  static void build_cohort(const fs::path& dir, int n, double hours, std::uint64_t seed, const std::string& prefix,
                           const LogFn& log) {
    if (fs::exists(dir / "manifest.jsonl")) return;
    if (log) log("generating " + std::to_string(n) + " x " + fmt(hours) + " h into " + dir.string());
    fs::remove_all(dir);
    const synth::CohortConfig cfg;
    curate::DatasetBuilder db(dir, kClipThresholdMv, cfg);
    for (int i = 0; i < n; ++i) {
      auto p = synth::sample_profile(mix_seed(seed, static_cast<std::uint64_t>(i)), cfg);
      p.patient_id = prefix + std::to_string(i);
      const auto plan = synth::make_plan(p, hours * 3600, p.patient_id + "_r0");
      db.add(synth::render_telemetry(plan, mix_seed(seed, static_cast<std::uint64_t>(i), 1), {}, cfg), plan);
    }
    db.finish();
  }

  const SegmentStore& cohort() {
    if (!cohort_) {
      build_cohort(cohort_dir(), kPatients, kHours, 11, "p", log);
      cohort_ = SegmentStore::from_manifest(io::read_manifest(cohort_dir() / "manifest.jsonl"));
    }
    return *cohort_;
  }

  const SegmentStore& heldout() {
    if (!heldout_) {
      build_cohort(heldout_dir(), kHeldOut, kHeldOutHours, 12, "h", log);
      heldout_ = SegmentStore::from_manifest(io::read_manifest(heldout_dir() / "manifest.jsonl"));
    }
    return *heldout_;
  }

  pretrain::PatientSplit split() { return pretrain::make_split(cohort().patient_ids(), 0.1, kSplitSeed); }

  static pretrain::PretrainConfig desk_pretrain() {
    pretrain::PretrainConfig c;
    c.encoder = EncoderSpec::named("resnet18");
    c.schedule.total_epochs = 30;
    c.schedule.batch = 16;
    c.schedule.initial_lr = 2e-3;
    c.queue_size = 2048;
    c.momentum = 0.95;
    c.symmetric_loss = true;
    c.seed = 5;
    return c;
  }

  /// Runs (or resumes) the desk-scale pretraining once.
  json pretrained_summary() {
    const fs::path dir = pretrain_dir();
    const auto cfg = desk_pretrain();
    auto done = [&] {
      if (!fs::exists(dir / "summary.json")) return false;
      return json::parse(slurp(dir / "summary.json")).value("epochs_completed", 0) == cfg.schedule.total_epochs;
    };
    if (!done()) {
      pretrain::PretrainHooks h;
      h.log = log;
      h.retrieval_store = &heldout();
      h.resume = fs::exists(dir / "last.ckpt");
      pretrain::pretrain_loop(cohort(), split(), cfg, dir, h);
    }
    return json::parse(slurp(dir / "summary.json"));
  }

  Encoder<float>& pretrained() {
    if (!encoder_) {
      pretrained_summary();
      encoder_ = ckpt::load_encoder(pretrain_dir() / "best.ckpt");
    }
    return *encoder_;
  }

  /// Table values scaled to a ~1000-segment cohort on one core.
  static downstream::Hyper3 desk_hyper(TaskKind k) {
    auto h = downstream::Hyper3::table5_for(k);
    for (auto* m : {&h.scratch, &h.probe, &h.finetune}) m->batch = std::max(1, m->batch / 16);
    h.probe.lr *= 0.02;
    h.finetune.lr *= 25;
    return h;
  }

  struct Cell {
    double scratch = NAN, probe = NAN, finetune = NAN;  // best validation loss
    std::size_t n_train = 0;
  };

  Cell cell(TaskKind task, double fraction, std::uint64_t seed) {
    const fs::path dir = cache / "downstream";
    const std::string tag = std::string(downstream::to_string(task)) + "_" + fmt(fraction) + "_s" + std::to_string(seed);
    const fs::path file = dir / (tag + ".json");
    const fs::path model_file = dir / (tag + ".model");
    const bool keep_model = fraction == 1.0 && seed == 0;
    if (fs::exists(file) && (!keep_model || fs::exists(model_file))) {
      const auto j = json::parse(slurp(file));
      return {j.at("scratch"), j.at("probe"), j.at("finetune"), j.at("n_train")};
    }
    downstream::RunSpec r;
    r.task = task;
    r.fraction = fraction;
    r.seed = seed;
    r.hyper = desk_hyper(task);
    const auto sp = split();
    downstream::TaskModel model;
    if (log) log("downstream " + tag);
    const auto o = downstream::run_cell(cohort(), sp.train_patient_ids, sp.val_patient_ids, pretrained().spec(),
                                        &pretrained(), r, true, {}, &model);
    Cell c{o.scratch.best_val_loss, o.probe.best_val_loss, o.finetune.best_val_loss, o.n_train};
    fs::create_directories(dir);
    if (keep_model) downstream::save_task_model(model_file, model);
    io::write_file(file, json{{"scratch", c.scratch}, {"probe", c.probe}, {"finetune", c.finetune}, {"n_train", c.n_train}}
                             .dump(1));
    return c;
  }

  downstream::TaskModel task_model(TaskKind task) {
    cell(task, 1.0, 0);
    const std::string tag = std::string(downstream::to_string(task)) + "_1_s0";
    return downstream::load_task_model(cache / "downstream" / (tag + ".model"));
  }

  struct Medians {
    double scratch, probe, finetune;
    std::size_t n_train;
  };

  Medians medians(TaskKind task, double fraction) {
    std::vector<double> s, p, f;
    std::size_t n = 0;
    for (std::uint64_t seed : {0, 1, 2}) {
      const Cell c = cell(task, fraction, seed);
      s.push_back(c.scratch);
      p.push_back(c.probe);
      f.push_back(c.finetune);
      n = c.n_train;
    }
    auto med = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      return v[1];
    };
    return {med(s), med(p), med(f), n};
  }

 private:
  std::optional<SegmentStore> cohort_, heldout_;
  std::optional<Encoder<float>> encoder_;
};

// ---------------------------------------------------------------------------
// Independent oracles

double info_nce_oracle(const std::vector<double>& q, const std::vector<double>& k,
                       const std::vector<std::vector<double>>& queue, double tau) {
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  double denom = std::exp(dot(q, k) / tau);
  for (const auto& n : queue) denom += std::exp(dot(q, n) / tau);
  return -std::log(std::exp(dot(q, k) / tau) / denom);
}

double nt_xent_oracle(const std::vector<std::vector<double>>& z, double tau) {
  const std::size_t n2 = z.size();
  auto cos = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
  };
  double total = 0;
  for (std::size_t i = 0; i < n2; ++i) {
    const std::size_t j = (i + n2 / 2) % n2;
    double denom = 0;
    for (std::size_t k = 0; k < n2; ++k)
      if (k != i) denom += std::exp(cos(z[i], z[k]) / tau);
    total += -std::log(std::exp(cos(z[i], z[j]) / tau) / denom);
  }
  return total / static_cast<double>(n2);
}

double auroc_oracle(const std::vector<double>& s, const std::vector<double>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        den += 1;
        num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return num / den;
}

// Out-of-band energy by an FFT independent of the library's backend.
double band_energy_oracle(const Signal& s, Eigen::Index offset) {
  static Eigen::FFT<double> fft;
  const int N = kSegmentSamples;
  double total = 0;
  for (Eigen::Index l = 0; l < s.rows(); ++l) {
    std::vector<double> x(N);
    for (int i = 0; i < N; ++i) x[static_cast<std::size_t>(i)] = s(l, offset + i);
    std::vector<std::complex<double>> X;
    fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
    fft.fwd(X, x);
    for (int k = 0; k < N; ++k) {
      const int kk = std::min(k, N - k);
      const double f = kk * kSampleRateHz / N;
      if (!(f < 0.75 || f > 40.0)) continue;
      total += std::norm(X[static_cast<std::size_t>(kk)]) / N;
    }
  }
  return total;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::vector<Signal> random_windows(int n, Rng& rng) {
  std::normal_distribution<float> g;
  std::vector<Signal> out;
  for (int i = 0; i < n; ++i) {
    Signal w(kNumLeads, kWindowSamples);
    for (Eigen::Index j = 0; j < w.size(); ++j) w.data()[j] = g(rng);
    out.push_back(w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome loss_oracles(Fixtures&) {
  Rng rng(101);
  std::normal_distribution<double> g;
  std::uniform_int_distribution<int> small(1, 8);
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    const int d = small(rng), K = small(rng);
    const double tau = 0.05 + 0.5 * std::uniform_real_distribution<double>()(rng);
    auto unit = [&] {
      nn::Vec<double> v(d);
      for (int i = 0; i < d; ++i) v(i) = g(rng);
      return nn::Vec<double>(v.normalized());
    };
    const nn::Vec<double> q = unit(), k = unit();
    Mat<double> queue(K, d);
    std::vector<std::vector<double>> qv;
    for (int i = 0; i < K; ++i) {
      queue.row(i) = unit().transpose();
      qv.emplace_back(queue.row(i).data(), queue.row(i).data() + d);
    }
    Mat<double> queue_rm = queue;
    const double got = pretrain::info_nce<double>(q, k, queue_rm, tau);
    const double want = info_nce_oracle({q.data(), q.data() + d}, {k.data(), k.data() + d}, qv, tau);
    worst = std::max(worst, rel_err(got, want));

    const int N = small(rng);
    Mat<double> z(d + 1, 2 * N);
    std::vector<std::vector<double>> zv;
    for (int c = 0; c < 2 * N; ++c) {
      zv.emplace_back();
      for (int r = 0; r <= d; ++r) zv.back().push_back(z(r, c) = g(rng));
    }
    const double nt = pretrain::nt_xent<double>(z, tau), ntw = nt_xent_oracle(zv, tau);
    worst = std::max(worst, N == 1 ? std::abs(nt - ntw) : rel_err(nt, ntw));
  }
  // identities
  nn::Vec<double> q(3), k(3);
  q << 1, 0, 0;
  k << 0, 1, 0;
  const double k0 = pretrain::info_nce<double>(q, k, Mat<double>(0, 3), 0.1);
  Mat<double> ortho(4, 3);
  ortho << 0, 0, 1, 0, 0, -1, 0, 1, 0, 0, -1, 0;
  const double uni = pretrain::info_nce<double>(q, k, ortho, 0.1);
  Mat<double> pair(3, 2);
  pair << 1, 2, 3, 4, 5, 7;
  const double nt1 = pretrain::nt_xent<double>(pair, 0.1);
  const bool ident = k0 == 0.0 && std::abs(uni - std::log(5.0)) <= 1e-15 && nt1 == 0.0;
  return {worst < 1e-6 && ident, "worst rel err " + fmt(worst, 3) + " over 100 instances; K=0 -> " + fmt(k0) +
                                     ", uniform -> " + fmt(uni, 12) + " (ln 5 = " + fmt(std::log(5.0), 12) +
                                     "), N=1 -> " + fmt(nt1)};
}

Outcome gradients(Fixtures&) {
  Rng rng(202);
  std::normal_distribution<double> g;
  double worst = 0;
  std::string worst_where;
  int checked = 0, kinks = 0;
  for (const auto& name : EncoderSpec::named_variants()) {
    EncoderSpec spec = EncoderSpec::named(name);
    spec.chan_start = std::max(spec.bottleneck() ? 4 : 1, spec.chan_start / 16);
    spec.projection_dims = {16, 16, 16};
    Encoder<double> e(spec, mix_seed(7, static_cast<std::uint64_t>(checked)));
    e.set_mode(Mode::train);
    const auto batch = make_batch<double>(random_windows(2, rng));
    const int d = e.projection_dim();
    Mat<double> keys(d, 2), queue(4, d);
    for (Eigen::Index i = 0; i < keys.size(); ++i) keys.data()[i] = g(rng);
    for (Eigen::Index i = 0; i < queue.size(); ++i) queue.data()[i] = g(rng);
    keys = nn::l2_normalize_cols(keys);
    for (Eigen::Index i = 0; i < queue.rows(); ++i) queue.row(i).normalize();
    ForwardOptions fo;
    fo.update_stats = false;
    auto loss = [&] { return pretrain::info_nce_batch(e.project(e.forward(batch, fo)), keys, queue, 0.1).loss; };
    e.zero_grad();
    fo.keep_graph = true;
    const Mat<double> q = e.project(e.forward(batch, fo), true);
    e.backward(e.project_backward(pretrain::info_nce_batch(q, keys, queue, 0.1).grad));
    fo.keep_graph = false;
    std::vector<std::pair<std::string, nn::Parameter<double>*>> all;
    e.visit_params([&](const std::string& n, nn::Parameter<double>& p) { all.emplace_back(n, &p); });
    // A stencil that straddles a ReLU kink gives different slopes at h and
    // h/10; such points are redrawn and counted.
    auto central = [&](double& v, double h) {
      const double v0 = v;
      v = v0 + h;
      const double lp = loss();
      v = v0 - h;
      const double lm = loss();
      v = v0;
      return (lp - lm) / (2 * h);
    };
    for (int s = 0; s < 20;) {
      auto& [pname, p] = all[std::uniform_int_distribution<std::size_t>(0, all.size() - 1)(rng)];
      const Eigen::Index idx = std::uniform_int_distribution<Eigen::Index>(0, p->size() - 1)(rng);
      double& v = p->value.data()[idx];
      const double coarse = central(v, 1e-6), fd = central(v, 1e-7), an = p->grad.data()[idx];
      if (std::abs(coarse - fd) > 1e-4 * std::max({std::abs(fd), std::abs(coarse), 1e-5})) {
        ++kinks;
        continue;
      }
      const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      if (err > worst) worst = err, worst_where = name + ":" + pname;
      ++checked;
      ++s;
    }
  }
  return {worst < 1e-3 && kinks <= checked / 4,
          std::to_string(checked) + " parameters over 10 variants, worst rel err " + fmt(worst, 3) +
              (worst_where.empty() ? "" : " at " + worst_where) + "; " + std::to_string(kinks) +
              " draws redrawn at non-smooth points"};
}

Outcome architecture(Fixtures&) {
  const std::vector<std::pair<std::string, double>> table{
      {"resnet18", 0.24},   {"resnet34", 1.81},   {"resnet50", 0.26},   {"resnet101", 0.45},
      {"resnet152", 2.43},  {"resnet18x2", 0.96}, {"resnet34x2", 7.22}, {"resnet50x2", 1.01},
      {"resnet101x2", 1.79}, {"resnet152x2", 9.64}};
  bool ok = true;
  std::map<std::string, std::int64_t> got;
  std::ostringstream os;
  double worst = 0;
  for (const auto& [name, millions] : table) {
    Encoder<float> e(EncoderSpec::named(name), 1);
    got[name] = e.param_count(false);
    const double dev = std::abs(static_cast<double>(got[name]) / 1e6 - millions) / millions;
    worst = std::max(worst, dev);
    ok = ok && dev <= 0.10;
    os << name << "=" << got[name] << " ";
  }
  const bool nonmono = got["resnet50"] < got["resnet34"];
  return {ok && nonmono, os.str() + "| worst deviation " + fmt(100 * worst, 3) + "%, resnet50 < resnet34: " +
                             (nonmono ? "yes" : "no")};
}

Outcome schedule(Fixtures&) {
  const pretrain::ScheduleSpec s;
  const double e0 = pretrain::lr_schedule(0, s), e5 = pretrain::lr_schedule(5, s), e500 = pretrain::lr_schedule(500, s);
  bool mono = true;
  for (int e = 5; e < 500; ++e) mono = mono && pretrain::lr_schedule(e + 1, s) <= pretrain::lr_schedule(e, s);
  const bool ok = std::abs(e0 - 6.25e-5) <= 1e-12 && std::abs(e5 - 6.25e-4) <= 1e-12 && std::abs(e500 - 1e-6) <= 1e-12;
  return {ok && mono, "epoch 0 -> " + fmt(e0, 12) + ", 5 -> " + fmt(e5, 12) + ", 500 -> " + fmt(e500, 12) +
                          ", monotone after warmup: " + (mono ? "yes" : "no")};
}

Outcome curation(Fixtures&) {
  Rng rng(505);
  std::uniform_int_distribution<int> pick(0, 60);
  std::uniform_real_distribution<double> u(0, 1);
  int clean_hits = 0, argmin_hits = 0;
  for (int b = 0; b < 50; ++b) {
    auto p = synth::sample_profile(mix_seed(505, static_cast<std::uint64_t>(b)), {});
    p.noise_levels.clear();
    synth::RenderOptions ro;
    ro.clean = true;
    const auto rec = synth::render_telemetry(synth::make_plan(p, 120), mix_seed(506, static_cast<std::uint64_t>(b)), ro);
    curate::HourBlock block;
    block.record_id = "b" + std::to_string(b);
    block.samples = rec.samples;
    block.mask.assign(static_cast<std::size_t>(block.length()), 0);
    const int clean = pick(rng);
    const Eigen::Index c0 = clean * kSampleRateHz, c1 = c0 + kSegmentSamples;
    // 50 Hz hum plus slow wander everywhere outside the clean candidate
    const double hum = 0.05 + 0.3 * u(rng), wander = 0.1 + 0.5 * u(rng), ph = 2 * M_PI * u(rng);
    for (Eigen::Index i = 0; i < block.length(); ++i) {
      if (i >= c0 && i < c1) continue;
      const double t = static_cast<double>(i) / kSampleRateHz;
      for (int l = 0; l < kNumLeads; ++l)
        block.samples(l, i) += static_cast<float>(hum * std::sin(2 * M_PI * 50 * t + l) +
                                                  wander * std::sin(2 * M_PI * 0.3 * t + ph + l));
    }
    const auto s = curate::select_best_segment(block);
    if (!s) continue;
    const long chosen = std::lround(s->source_offset_s);
    clean_hits += chosen == clean;
    double best = 1e300;
    long arg = -1;
    for (long o = 0; o * kSampleRateHz + kSegmentSamples <= block.length(); ++o) {
      const double v = band_energy_oracle(block.samples, o * kSampleRateHz);
      if (v < best) best = v, arg = o;
    }
    argmin_hits += chosen == arg;
  }
  return {clean_hits >= 49 && argmin_hits == 50,
          "clean candidate chosen " + std::to_string(clean_hits) + "/50, equals exhaustive argmin " +
              std::to_string(argmin_hits) + "/50"};
}

Outcome pretraining_signal(Fixtures& fx) {
  const json summary = fx.pretrained_summary();
  const double v0 = summary.at("initial").at("val_infonce").get<double>();
  const auto rows = io::read_jsonl(fx.pretrain_dir() / "metrics.jsonl");
  const double vlast = rows.back().at("val_infonce").get<double>();
  const double score =
      pretrain::patient_retrieval_score(fx.pretrained(), fx.heldout(), fx.heldout().patient_ids(), 10, 20);
  const double chance = pretrain::retrieval_chance(10, 20);
  const double ratio = vlast / v0;
  return {ratio < 0.5 && score > 5 * chance,
          "val InfoNCE " + fmt(v0) + " -> " + fmt(vlast) + " (ratio " + fmt(ratio, 3) + " < 0.5); retrieval " +
              fmt(score, 3) + " vs 5 x chance " + fmt(5 * chance, 3) + " (" + std::to_string(fx.cohort().size()) +
              " segments, " + std::to_string(fx.split().train_patient_ids.size()) + " train patients)"};
}

Outcome label_scarcity(Fixtures& fx) {
  const auto m1 = fx.medians(TaskKind::intervals, 0.01), m100 = fx.medians(TaskKind::intervals, 1.0);
  const double gain1 = downstream::percent_improvement(m1.scratch, m1.finetune);
  const double gain100 = downstream::percent_improvement(m100.scratch, m100.finetune);
  return {gain1 >= 10 && gain100 >= -2,
          "intervals nMAE, 1% (" + std::to_string(m1.n_train) + " segments): scratch " + fmt(m1.scratch) +
              " fine-tune " + fmt(m1.finetune) + " (" + fmt(gain1, 3) + "%, need >= 10); 100%: scratch " +
              fmt(m100.scratch) + " fine-tune " + fmt(m100.finetune) + " (" + fmt(gain100, 3) + "%, need >= -2)"};
}

Outcome probe_contrast(Fixtures& fx) {
  const auto age = fx.medians(TaskKind::age, 0.01), iv = fx.medians(TaskKind::intervals, 1.0);
  const bool a = age.probe < age.scratch, b = !(iv.probe < iv.scratch);
  return {a && b, "age 1% val loss: probe " + fmt(age.probe) + " vs scratch " + fmt(age.scratch) +
                      (a ? " (probe wins)" : " (probe loses)") + "; intervals 100%: probe " + fmt(iv.probe) +
                      " vs scratch " + fmt(iv.scratch) + (b ? " (probe does not win)" : " (probe wins)")};
}

Outcome afib_annotation(Fixtures& fx) {
  auto model = fx.task_model(TaskKind::afib);
  synth::CohortConfig cfg;
  auto p = synth::sample_profile(mix_seed(909, 0), cfg);
  p.patient_id = "annot";
  p.afib_flag = false;
  const double on = 3 * 3600, off = 12 * 3600, r_on = 7 * 3600, r_off = r_on + 300;
  const auto plan = synth::schedule_afib_episode(synth::make_plan(p, 15 * 3600, "annot_r0"), on, off, {{r_on, r_off}});
  const auto rec = synth::render_telemetry(plan, mix_seed(909, 1), {}, cfg);
  const auto track = annotate::annotate(rec, model, TaskKind::afib);
  const auto eps = annotate::detect_transitions(track);
  const double ws = track.stride_s();
  auto idx = [&](double t) { return t / ws; };
  std::ostringstream os;
  os << eps.size() << " episode(s):";
  for (const auto& e : eps) os << " [" << e.onset_index << ", " << e.offset_index << ")";
  os << "; truth onset " << fmt(idx(on), 5) << ", reversion [" << fmt(idx(r_on), 5) << ", " << fmt(idx(r_off), 5)
     << "), offset " << fmt(idx(off), 5);
  if (eps.empty()) return {false, os.str()};
  const bool onset_ok = std::abs(static_cast<double>(eps.front().onset_index) - idx(on)) <= 2;
  const bool offset_ok = std::abs(static_cast<double>(eps.back().offset_index) - idx(off)) <= 2;
  // the reversion must fall in a gap between consecutive episodes
  bool reversion_ok = false;
  for (std::size_t i = 0; i + 1 < eps.size(); ++i) {
    const double g0 = static_cast<double>(eps[i].offset_index), g1 = static_cast<double>(eps[i + 1].onset_index);
    if (g0 < idx(r_off) && g1 > idx(r_on)) reversion_ok = true;
  }
  return {onset_ok && offset_ok && reversion_ok, os.str()};
}

Outcome qt_tracking(Fixtures& fx) {
  auto model = fx.task_model(TaskKind::intervals);
  synth::CohortConfig cfg;
  auto p = synth::sample_profile(mix_seed(1010, 0), cfg);
  p.patient_id = "drift";
  p.afib_flag = false;
  const auto plan = synth::schedule_interval_drift(synth::make_plan(p, 20 * 3600, "drift_r0"), synth::DriftField::qt_ms,
                                                   400, 500, cfg);
  const auto rec = synth::render_telemetry(plan, mix_seed(1010, 1), {}, cfg);
  const auto track = annotate::annotate(rec, model, TaskKind::intervals, kWindowSamples, 15);
  const auto& names = track.value_names;
  const std::size_t qt = static_cast<std::size_t>(std::find(names.begin(), names.end(), "qt_ms") - names.begin());
  std::vector<double> est, truth;
  const double half = 0.5 * kWindowSamples / kSampleRateHz;
  for (std::size_t i = 0; i < track.size(); ++i) {
    est.push_back(track.smoothed[i][qt]);
    truth.push_back(synth::truth_at(plan, track.times[i] + half).qt_ms);
  }
  const double r = pearson(est, truth);
  const double e0 = std::abs(est.front() - truth.front()), e1 = std::abs(est.back() - truth.back());
  return {r > 0.9 && std::max(e0, e1) < 25,
          "Pearson " + fmt(r, 4) + " over " + std::to_string(track.size()) + " windows; endpoints " + fmt(est.front()) +
              " vs " + fmt(truth.front()) + ", " + fmt(est.back()) + " vs " + fmt(truth.back()) + " ms"};
}

Outcome auroc_metric(Fixtures&) {
  Rng rng(1111);
  std::uniform_int_distribution<int> n(2, 40), lvl(0, 6);
  int exact = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> s, y;
    const int m = n(rng);
    for (int i = 0; i < m; ++i) {
      s.push_back(lvl(rng) / 6.0);
      y.push_back(i < 1 ? 0 : i < 2 ? 1 : lvl(rng) % 2);
    }
    exact += downstream::auroc(s, y).value_or(-1) == auroc_oracle(s, y);
  }
  const auto worked = downstream::auroc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1});
  return {exact == 100 && worked && *worked == 0.75,
          std::to_string(exact) + "/100 exact matches; worked case " + (worked ? fmt(*worked) : "none")};
}

Outcome persistence(Fixtures& fx) {
  const fs::path dir = fx.cache / "persistence";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const SegmentStore& st = fx.cohort();
  // segment file
  io::write_segment(dir / "seg.ecgt", st[0]);
  const Signal back = io::read_segment(dir / "seg.ecgt");
  const bool seg_ok = std::memcmp(back.data(), st[0].samples.data(), sizeof(float) * kNumLeads * kSegmentSamples) == 0;
  // checkpoint: archive bytes and encoder outputs
  fx.pretrained_summary();
  const auto arch = ckpt::Archive::load(fx.pretrain_dir() / "best.ckpt");
  arch.save(dir / "copy.ckpt");
  const bool ckpt_bytes = slurp(dir / "copy.ckpt") == slurp(fx.pretrain_dir() / "best.ckpt");
  Encoder<float>& enc = fx.pretrained();
  ckpt::save_encoder(dir / "enc.ckpt", enc);
  Encoder<float> enc2 = ckpt::load_encoder(dir / "enc.ckpt");
  Rng rng(1212);
  const auto w = random_windows(3, rng);
  const Mat<float> a = embed_windows<float>(enc, w), b = embed_windows<float>(enc2, w);
  const bool enc_ok = a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0;
  // metric log
  bool log_ok = true;
  for (const auto& row : io::read_jsonl(fx.pretrain_dir() / "metrics.jsonl"))
    log_ok = log_ok && pretrain::to_json(pretrain::epoch_metrics_from_json(row)) == row;
  // resume on a 40-patient slice of the cohort
  std::set<std::string> keep;
  for (const auto& p : st.patient_ids())
    if (keep.size() < 40) keep.insert(p);
  auto m = io::read_manifest(fx.cohort_dir() / "manifest.jsonl");
  std::erase_if(m.rows, [&](const io::ManifestRow& r) { return !keep.count(r.patient_id); });
  const SegmentStore small = SegmentStore::from_manifest(m);
  const auto sp = pretrain::make_split(small.patient_ids(), 0.2, 3);
  auto cfg = Fixtures::desk_pretrain();
  cfg.schedule.total_epochs = 4;
  cfg.schedule.warmup_epochs = 1;
  cfg.queue_size = 256;
  cfg.retrieval_patients = 2;
  cfg.retrieval_segments = 2;
  const auto full = pretrain::pretrain_loop(small, sp, cfg, dir / "full");
  cfg.stop_after_epoch = 2;
  pretrain::pretrain_loop(small, sp, cfg, dir / "resumed");
  cfg.stop_after_epoch = -1;
  pretrain::PretrainHooks h;
  h.resume = true;
  const auto res = pretrain::pretrain_loop(small, sp, cfg, dir / "resumed", h);
  const double vf = full.epochs.at(2).val_infonce, vr = res.epochs.at(2).val_infonce;
  const double re = rel_err(vr, vf);
  fs::remove_all(dir);
  return {seg_ok && ckpt_bytes && enc_ok && log_ok && re <= 1e-5,
          std::string("segment ") + (seg_ok ? "bit-exact" : "DIFFERS") + ", checkpoint bytes " +
              (ckpt_bytes ? "identical" : "DIFFER") + ", reloaded encoder output " + (enc_ok ? "bit-exact" : "DIFFERS") +
              ", metric log " + (log_ok ? "exact" : "DIFFERS") + "; resumed epoch 3 val InfoNCE " + fmt(vr, 10) +
              " vs " + fmt(vf, 10) + " (rel " + fmt(re, 3) + ")"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria, one line per criterion"};
  std::string cache = "acceptance_cache", only;
  bool strict = false, verbose = false;
  app.add_option("--cache", cache, "Directory for cohorts, checkpoints and downstream outcomes");
  app.add_option("--only", only, "Comma-separated criterion numbers");
  app.add_flag("--strict", strict, "Exit non-zero when any criterion fails");
  app.add_flag("-v,--verbose", verbose, "Progress on stderr");
  CLI11_PARSE(app, argc, argv);

  Fixtures fx;
  fx.cache = cache;
  fs::create_directories(fx.cache);
  if (verbose) fx.log = log_stderr;

  const std::vector<std::pair<std::string, std::function<Outcome(Fixtures&)>>> criteria{
      {"loss oracles", loss_oracles},
      {"gradient check", gradients},
      {"architecture", architecture},
      {"lr schedule", schedule},
      {"curation", curation},
      {"pretraining signal", pretraining_signal},
      {"label scarcity", label_scarcity},
      {"linear probe contrast", probe_contrast},
      {"afib annotation", afib_annotation},
      {"QT tracking", qt_tracking},
      {"AUROC", auroc_metric},
      {"persistence", persistence},
  };
  std::set<int> selected;
  std::stringstream ss(only);
  for (std::string part; std::getline(ss, part, ',');)
    if (!part.empty()) selected.insert(std::stoi(part));

  int failed = 0, errors = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second(fx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
      ++errors;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << "criterion " << std::setw(2) << id << "  " << (o.pass ? "PASS" : "FAIL") << "  " << std::left
              << std::setw(22) << criteria[i].first << std::right << "  " << o.detail << "  [" << fmt(secs, 4) << " s]"
              << std::endl;
  }
  std::cout << failed << " criterion(s) failed" << std::endl;
  if (errors) return 2;
  return strict && failed ? 1 : 0;
}
