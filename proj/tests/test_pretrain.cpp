#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "pclr/pretrain.hpp"

using namespace pclr;
using namespace pclr::pretrain;

namespace {

nn::Vec<double> unit(std::initializer_list<double> v) {
  nn::Vec<double> x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double a : v) x(i++) = a;
  return x / x.norm();
}

Mat<double> random_unit_cols(int d, int n, Rng& rng) {
  std::normal_distribution<double> g;
  Mat<double> m(d, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return nn::l2_normalize_cols(m);
}

// Eq. 1 by direct scalar evaluation.
double info_nce_oracle(const nn::Vec<double>& q, const nn::Vec<double>& k, const Mat<double>& queue, double tau) {
  double num = std::exp(q.dot(k) / tau), den = num;
  for (Eigen::Index j = 0; j < queue.rows(); ++j) den += std::exp(q.dot(queue.row(j).transpose()) / tau);
  return -std::log(num / den);
}

// Eq. 2 by double loop over ordered positive pairs.
double nt_xent_oracle(const Mat<double>& z, double tau) {
  const Eigen::Index n2 = z.cols(), n = n2 / 2;
  auto sim = [&](Eigen::Index a, Eigen::Index b) { return z.col(a).dot(z.col(b)) / (z.col(a).norm() * z.col(b).norm()); };
  double total = 0;
  for (Eigen::Index i = 0; i < n2; ++i) {
    const Eigen::Index j = i < n ? i + n : i - n;
    double den = 0;
    for (Eigen::Index k = 0; k < n2; ++k)
      if (k != i) den += std::exp(sim(i, k) / tau);
    total += -std::log(std::exp(sim(i, j) / tau) / den);
  }
  return total / static_cast<double>(n2);
}

Segment fake_segment(const std::string& pid, int idx, Rng& rng) {
  Segment s;
  s.patient_id = pid;
  s.segment_id = pid + "_" + std::to_string(idx);
  s.samples = Signal(kNumLeads, kSegmentSamples);
  std::normal_distribution<float> g(0.f, 0.1f);
  const double f = 0.8 + 0.1 * static_cast<double>(std::hash<std::string>{}(pid) % 17);
  for (Eigen::Index i = 0; i < s.samples.cols(); ++i)
    for (int l = 0; l < kNumLeads; ++l)
      s.samples(l, i) = static_cast<float>(std::sin(2 * M_PI * f * i / 120.0 + l)) + g(rng);
  s.source_record_id = pid + "_r0";
  s.source_offset_s = 3600.0 * idx;
  return s;
}

SegmentStore fake_store(int patients, int each, std::uint64_t seed) {
  Rng rng(seed);
  SegmentStore st;
  for (int p = 0; p < patients; ++p)
    for (int i = 0; i < each; ++i) st.add(fake_segment("p" + std::to_string(100 + p), i, rng));
  return st;
}

EncoderSpec toy_spec() {
  EncoderSpec s;
  s.custom_stage_units = {1, 1};
  s.chan_start = 4;
  s.projection_dims = {8, 8, 8};
  return s;
}

}  // namespace

TEST(InfoNce, TrivialIdentities) {
  const auto q = unit({1, 0}), k = unit({0.6, 0.8});
  EXPECT_EQ(info_nce(q, q, Mat<double>(0, 2), 0.1), 0.0);
  Mat<double> same(3, 2);
  for (int j = 0; j < 3; ++j) same.row(j) = k.transpose();
  EXPECT_NEAR(info_nce(q, k, same, 0.1), std::log(4.0), 1e-12);
}

TEST(InfoNce, WorkedExample) {
  const auto q = unit({1, 0}), k = unit({0.6, 0.8});
  Mat<double> queue(2, 2);
  queue << 1, 0, 0, 1;
  // -log(e^6 / (e^6 + e^10 + e^0))
  const double expect = -std::log(std::exp(6.0) / (std::exp(6.0) + std::exp(10.0) + 1.0));
  EXPECT_NEAR(info_nce(q, k, queue, 0.1), expect, 1e-12);
}

TEST(InfoNce, RandomInstancesMatchOracle) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const int d = 2 + t % 5, K = t % 9;
    const Mat<double> qk = random_unit_cols(d, 2, rng);
    const Mat<double> queue = random_unit_cols(d, K, rng).transpose();
    const double tau = 0.05 + 0.01 * (t % 20);
    const double o = info_nce_oracle(qk.col(0), qk.col(1), queue, tau);
    EXPECT_NEAR(info_nce<double>(qk.col(0), qk.col(1), queue, tau), o, 1e-9 * std::max(1.0, o));
  }
}

TEST(InfoNce, InvariantUnderQueuePermutation) {
  Rng rng(2);
  const Mat<double> qk = random_unit_cols(4, 2, rng);
  Mat<double> queue = random_unit_cols(4, 6, rng).transpose();
  const double a = info_nce<double>(qk.col(0), qk.col(1), queue, 0.2);
  Mat<double> rev = queue.colwise().reverse();
  EXPECT_NEAR(info_nce<double>(qk.col(0), qk.col(1), rev, 0.2), a, 1e-12);
}

TEST(InfoNce, DecreasesAsPositiveAligns) {
  Rng rng(3);
  const Mat<double> queue = random_unit_cols(2, 5, rng).transpose();
  const auto q = unit({1, 0});
  double prev = std::numeric_limits<double>::infinity();
  for (double a = M_PI; a >= 0; a -= 0.1) {
    const double v = info_nce(q, unit({std::cos(a), std::sin(a)}), queue, 0.1);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(InfoNce, RejectsNonUnitInputs) {
  EXPECT_THROW(info_nce(nn::Vec<double>(nn::Vec<double>::Constant(2, 1.0)), unit({1, 0}), Mat<double>(0, 2), 0.1),
               DomainError);
  EXPECT_THROW(info_nce(unit({1, 0}), unit({1, 0}), Mat<double>(0, 2), 0.0), DomainError);
}

TEST(InfoNceBatch, MeanAndGradientMatchScalarForm) {
  Rng rng(4);
  const int d = 5, B = 3;
  const Mat<double> q = random_unit_cols(d, B, rng), k = random_unit_cols(d, B, rng);
  const Mat<double> queue = random_unit_cols(d, 7, rng).transpose();
  const auto lg = info_nce_batch(q, k, queue, 0.1);
  double mean = 0;
  for (int b = 0; b < B; ++b) mean += info_nce_oracle(q.col(b), k.col(b), queue, 0.1) / B;
  EXPECT_NEAR(lg.loss, mean, 1e-12);
  // The loss as a function of unconstrained q (no renormalization).
  auto f = [&](const Mat<double>& x) {
    double s = 0;
    for (int b = 0; b < B; ++b) {
      double num = std::exp(x.col(b).dot(k.col(b)) / 0.1), den = num;
      for (Eigen::Index j = 0; j < queue.rows(); ++j) den += std::exp(x.col(b).dot(queue.row(j).transpose()) / 0.1);
      s += -std::log(num / den) / B;
    }
    return s;
  };
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    Mat<double> p = q, m = q;
    p.data()[i] += 1e-6;
    m.data()[i] -= 1e-6;
    EXPECT_NEAR(lg.grad.data()[i], (f(p) - f(m)) / 2e-6, 1e-6);
  }
}

TEST(NtXent, TrivialIdentities) {
  Mat<double> one(3, 2);
  one << 1, 0.3, 0, 0.2, 0, -0.5;
  EXPECT_NEAR(nt_xent(one, 0.1), 0.0, 1e-12);
  for (int n : {2, 4, 8}) {
    const Mat<double> same = Mat<double>::Constant(3, 2 * n, 0.5).eval();
    EXPECT_NEAR(nt_xent(same, 0.1), std::log(2.0 * n - 1), 1e-12);
  }
  EXPECT_THROW(nt_xent(Mat<double>(Mat<double>::Ones(3, 3)), 0.1), DomainError);
}

TEST(NtXent, RandomInstancesMatchOracle) {
  Rng rng(5);
  std::normal_distribution<double> g;
  for (int t = 0; t < 100; ++t) {
    const int n = 1 + t % 8, d = 2 + t % 4;
    Mat<double> z(d, 2 * n);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = g(rng);
    const double tau = 0.1 + 0.05 * (t % 5);
    const double o = nt_xent_oracle(z, tau);
    EXPECT_NEAR(nt_xent(z, tau), o, 1e-9 * std::max(1.0, o));
  }
}

TEST(NtXent, ScaleAndPairPermutationInvariance) {
  Rng rng(6);
  std::normal_distribution<double> g;
  Mat<double> z(4, 8);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = g(rng);
  const double a = nt_xent(z, 0.2);
  Mat<double> s = z;
  s.col(3) *= 7.5;
  EXPECT_NEAR(nt_xent(s, 0.2), a, 1e-12);
  // swap pairs 0 and 2 on both halves
  Mat<double> p = z;
  p.col(0).swap(p.col(2));
  p.col(4).swap(p.col(6));
  EXPECT_NEAR(nt_xent(p, 0.2), a, 1e-12);
}

TEST(Momentum, ArithmeticFixedPointAndComposition) {
  EncoderSpec spec = toy_spec();
  Encoder<double> q(spec, 1), k(spec, 2), k0 = k;
  Encoder<double> same = q;
  momentum_update(q, same, 0.9);
  same.visit_params([&](const std::string& n, nn::Parameter<double>& p) {
    nn::Parameter<double>* ref = nullptr;
    q.visit_params([&](const std::string& m, nn::Parameter<double>& r) {
      if (m == n) ref = &r;
    });
    EXPECT_LE((p.value - ref->value).cwiseAbs().maxCoeff(), 1e-15) << n;
  });

  Encoder<double> zero(spec, 3), ones(spec, 3);
  zero.visit_params([](const std::string&, nn::Parameter<double>& p) { p.value.setZero(); });
  ones.visit_params([](const std::string&, nn::Parameter<double>& p) { p.value.setOnes(); });
  momentum_update(ones, zero, 0.9);
  zero.visit_params([](const std::string&, nn::Parameter<double>& p) {
    EXPECT_NEAR(p.value.maxCoeff(), 0.1, 1e-15);
    EXPECT_NEAR(p.value.minCoeff(), 0.1, 1e-15);
  });

  Encoder<double> twice = k0, squared = k0;
  momentum_update(q, twice, 0.7);
  momentum_update(q, twice, 0.7);
  momentum_update(q, squared, 0.49);
  std::vector<Mat<double>> a, b;
  twice.visit_params([&](const std::string&, nn::Parameter<double>& p) { a.push_back(p.value); });
  squared.visit_params([&](const std::string&, nn::Parameter<double>& p) { b.push_back(p.value); });
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE((a[i] - b[i]).cwiseAbs().maxCoeff(), 1e-12);

  EncoderSpec other = spec;
  other.chan_start = 8;
  Encoder<double> mismatch(other, 0);
  EXPECT_THROW(momentum_update(q, mismatch, 0.9), DomainError);
}

TEST(Momentum, DefaultsFromTable) {
  PretrainConfig c;
  EXPECT_EQ(c.momentum, 0.999);
  EXPECT_EQ(c.queue_size, 38912);
  EXPECT_EQ(c.temperature, 0.1);
  ScheduleSpec s;
  EXPECT_EQ(s.total_epochs, 500);
  EXPECT_EQ(s.batch, 256);
  EXPECT_EQ(s.weight_decay, 1e-4);
}

TEST(Queue, CursorAndRingBufferOracle) {
  auto s = MocoState::init(toy_spec(), 12, 0.9, 0.1, 0);
  EXPECT_LE(s.max_queue_norm_error(), 1e-5);
  Rng rng(7);
  std::vector<nn::Vec<float>> ring;
  for (int i = 0; i < 12; ++i) ring.push_back(s.queue.row(i).transpose());
  int cursor = 0;
  for (int step = 0; step < 3; ++step) {
    const Mat<float> keys = random_unit_cols(8, 4, rng).cast<float>();
    enqueue(s, keys);
    for (int b = 0; b < 4; ++b) ring[static_cast<std::size_t>((cursor + b) % 12)] = keys.col(b);
    cursor = (cursor + 4) % 12;
    EXPECT_EQ(s.cursor, cursor);
  }
  EXPECT_EQ(s.cursor, 0);
  for (int i = 0; i < 12; ++i) EXPECT_EQ((s.queue.row(i).transpose() - ring[static_cast<std::size_t>(i)]).norm(), 0.0f);
  EXPECT_THROW(enqueue(s, random_unit_cols(8, 5, rng).cast<float>()), ConfigError);
}

TEST(Queue, PaperSizedCursor) {
  auto s = MocoState::init(toy_spec(), 38912, 0.999, 0.1, 0);
  Rng rng(8);
  const Mat<float> keys = random_unit_cols(8, 256, rng).cast<float>();
  enqueue(s, keys);
  enqueue(s, keys);
  EXPECT_EQ(s.cursor, 512);
  for (int i = 2; i < 152; ++i) enqueue(s, keys);
  EXPECT_EQ(s.cursor, 0);
  EXPECT_EQ(s.queue_size(), 38912);
}

TEST(Schedule, Anchors) {
  ScheduleSpec s;
  EXPECT_NEAR(lr_schedule(0, s), 6.25e-5, 1e-12);
  EXPECT_NEAR(lr_schedule(5, s), 6.25e-4, 1e-12);
  EXPECT_NEAR(lr_schedule(500, s), 1e-6, 1e-12);
  EXPECT_NEAR(lr_schedule(252.5, s), 1e-6 + (6.25e-4 - 1e-6) / 2, 1e-12);
  double prev = lr_schedule(5, s);
  for (double e = 5.5; e <= 500; e += 0.5) {
    const double v = lr_schedule(e, s);
    EXPECT_LE(v, prev);
    prev = v;
  }
}

TEST(Split, RoundingDeterminismAndDisjointness) {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("p" + std::to_string(i));
  const auto a = make_split(ids, 0.1, 5), b = make_split(ids, 0.1, 5);
  EXPECT_EQ(a.val_patient_ids.size(), 1u);
  EXPECT_EQ(a.val_patient_ids, b.val_patient_ids);
  std::set<std::string> all(a.train_patient_ids.begin(), a.train_patient_ids.end());
  for (const auto& v : a.val_patient_ids) EXPECT_TRUE(all.insert(v).second);
  EXPECT_EQ(all.size(), 10u);
  EXPECT_THROW(make_split({}, 0.1, 0), DomainError);
}

TEST(Split, ValidationFrequencyOverSeeds) {
  std::vector<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.push_back("p" + std::to_string(i));
  std::map<std::string, int> hits;
  const int seeds = 1000;
  for (int s = 0; s < seeds; ++s)
    for (const auto& v : make_split(ids, 0.1, static_cast<std::uint64_t>(s)).val_patient_ids) ++hits[v];
  for (const auto& id : ids) EXPECT_NEAR(hits[id] / static_cast<double>(seeds), 0.1, 0.03) << id;
}

TEST(SampleEpoch, OnePerPatientAndUniformChoice) {
  SegmentStore st;
  Rng rng(9);
  for (int i = 0; i < 5; ++i) st.add(fake_segment("a", i, rng));
  st.add(fake_segment("b", 0, rng));
  const std::vector<std::string> pts{"a", "b", "ghost"};
  std::vector<int> counts(5, 0);
  const int epochs = 10000;
  for (int e = 0; e < epochs; ++e) {
    const auto items = sample_epoch(st, pts, static_cast<std::uint64_t>(e), nullptr);
    ASSERT_EQ(items.size(), 2u);
    EXPECT_NE(items[0].patient_id, items[1].patient_id);
    for (const auto& it : items) {
      if (it.patient_id == "b") EXPECT_EQ(it.segment, 5u);
      else ++counts[it.segment];
    }
  }
  // chi-square, 4 dof, critical value at p = 0.01 is 13.28
  double chi = 0;
  for (int c : counts) chi += std::pow(c - epochs / 5.0, 2) / (epochs / 5.0);
  EXPECT_LT(chi, 13.28);
}

TEST(PositivePair, DistinctSegmentsWhenAvailable) {
  SegmentStore st;
  Rng rng(10);
  st.add(fake_segment("a", 0, rng));
  st.add(fake_segment("a", 1, rng));
  st.add(fake_segment("b", 0, rng));
  auto in_segment = [&](const Signal& w, std::size_t seg) {
    for (int o = 0; o <= kMaxCropOffset; ++o)
      if (w(0, 0) == st[seg].samples(0, o) && (crop_at(st[seg].samples, o) - w).cwiseAbs().maxCoeff() == 0.0f)
        return true;
    return false;
  };
  for (int t = 0; t < 5; ++t) {
    auto [q, k] = positive_pair(st, 0, rng);
    EXPECT_EQ(q.rows(), 4);
    EXPECT_EQ(k.cols(), 1024);
    EXPECT_TRUE(in_segment(q, 0));
    EXPECT_TRUE(in_segment(k, 1));
  }
  auto [q, k] = positive_pair(st, 2, rng);
  EXPECT_TRUE(in_segment(q, 2));
  EXPECT_TRUE(in_segment(k, 2));
}

TEST(Retrieval, PerfectAndChance) {
  Rng rng(11);
  const Mat<double> centers = random_unit_cols(16, 10, rng);
  Mat<double> emb(16, 200);
  std::vector<std::string> labels;
  for (int i = 0; i < 200; ++i) {
    emb.col(i) = centers.col(i / 20);
    labels.push_back("p" + std::to_string(i / 20));
  }
  EXPECT_EQ(retrieval_score(emb, labels), 1.0);
  EXPECT_NEAR(retrieval_chance(10, 20), 19.0 / 199.0, 1e-15);
  double mean = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) mean += retrieval_score(random_unit_cols(16, 200, rng), labels) / trials;
  EXPECT_NEAR(mean, 19.0 / 199.0, 0.01);
}

TEST(PretrainLoop, SmokeRunLogsEpochsAndKeepsQueueUnit) {
  const auto dir = std::filesystem::temp_directory_path() / "pclr_test_pretrain";
  std::filesystem::remove_all(dir);
  const SegmentStore st = fake_store(12, 2, 1);
  const auto split = make_split(st.patient_ids(), 0.25, 0);
  PretrainConfig cfg;
  cfg.encoder = toy_spec();
  cfg.schedule.total_epochs = 2;
  cfg.schedule.warmup_epochs = 1;
  cfg.schedule.batch = 4;
  cfg.queue_size = 16;
  cfg.retrieval_patients = 3;
  cfg.retrieval_segments = 2;
  const auto r = pretrain_loop(st, split, cfg, dir, {nullptr});
  ASSERT_EQ(r.epochs.size(), 2u);
  EXPECT_EQ(io::read_jsonl(r.metric_log).size(), 2u);
  EXPECT_TRUE(std::filesystem::exists(r.best_checkpoint));
  MocoState s = MocoState::init(cfg.encoder, cfg.queue_size, cfg.momentum, cfg.temperature, 0);
  nn::Adam<float> opt(nn::collect_params<float>(s.query));
  load_moco(r.last_checkpoint, s, opt);
  EXPECT_LE(s.max_queue_norm_error(), 1e-5);
  EXPECT_EQ(s.cursor, (2 * (9 / 4) * 4) % 16);
  std::filesystem::remove_all(dir);
}

TEST(PretrainLoop, ResumeMatchesUninterrupted) {
  const auto a = std::filesystem::temp_directory_path() / "pclr_test_resume_a";
  const auto b = std::filesystem::temp_directory_path() / "pclr_test_resume_b";
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
  const SegmentStore st = fake_store(12, 2, 2);
  const auto split = make_split(st.patient_ids(), 0.25, 1);
  PretrainConfig cfg;
  cfg.encoder = toy_spec();
  cfg.schedule.total_epochs = 3;
  cfg.schedule.warmup_epochs = 1;
  cfg.schedule.batch = 4;
  cfg.queue_size = 16;
  const auto full = pretrain_loop(st, split, cfg, a, {nullptr});
  cfg.stop_after_epoch = 1;
  pretrain_loop(st, split, cfg, b, {nullptr});
  cfg.stop_after_epoch = -1;
  PretrainHooks h{nullptr};
  h.resume = true;
  const auto resumed = pretrain_loop(st, split, cfg, b, h);
  ASSERT_EQ(resumed.epochs.size(), 3u);
  for (int e = 1; e < 3; ++e)
    EXPECT_NEAR(resumed.epochs[static_cast<std::size_t>(e)].val_infonce,
                full.epochs[static_cast<std::size_t>(e)].val_infonce,
                1e-5 * full.epochs[static_cast<std::size_t>(e)].val_infonce);
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}
