#include <gtest/gtest.h>

#include <cmath>

#include "pclr/synthgen.hpp"

using namespace pclr;
using namespace pclr::synth;

namespace {

PatientProfile quiet_profile(double hr = 60) {
  PatientProfile p;
  p.patient_id = "q";
  p.base_heart_rate_bpm = hr;
  p.lead_amplitudes = reference_amplitudes(false);
  return p;
}

// Independent Gaussian bump sum: onsets/offsets at centre -/+ 2 sigma.
double oracle_beat(double pr, double qrs, double qt, const WaveAmplitudes& a, double t) {
  auto g = [](double c, double s, double amp, double x) { return amp * std::exp(-0.5 * (x - c) * (x - c) / (s * s)); };
  const double sq = qrs / 12, sr = qrs / 8, st = (qt - qrs) / 6;
  return g(30, 15, a.p, t) + g(pr + 2 * sq, sq, a.q, t) + g(pr + qrs / 2, sr, a.r, t) +
         g(pr + qrs - 2 * sq, sq, a.s, t) + g(pr + qt - 2 * st, st, a.t, t);
}

std::vector<Eigen::Index> r_peaks(const Signal& s, int lead, float thr) {
  std::vector<Eigen::Index> out;
  for (Eigen::Index i = 1; i + 1 < s.cols(); ++i)
    if (s(lead, i) > thr && s(lead, i) >= s(lead, i - 1) && s(lead, i) > s(lead, i + 1)) out.push_back(i);
  return out;
}

}  // namespace

TEST(SampleProfile, DeterministicForSeed) {
  CohortConfig cfg;
  const auto a = sample_profile(7, cfg), b = sample_profile(7, cfg);
  EXPECT_EQ(to_json(a), to_json(b));
  EXPECT_NE(to_json(a), to_json(sample_profile(8, cfg)));
}

TEST(SampleProfile, DegenerateAgeRange) {
  CohortConfig cfg;
  cfg.age_years = {50, 50};
  for (int s = 0; s < 20; ++s) EXPECT_EQ(sample_profile(static_cast<std::uint64_t>(s), cfg).age_years, 50.0);
}

TEST(SampleProfile, FieldsWithinRanges) {
  CohortConfig cfg;
  for (int s = 0; s < 300; ++s) {
    const auto p = sample_profile(static_cast<std::uint64_t>(s), cfg);
    EXPECT_TRUE(cfg.age_years.contains(p.age_years));
    EXPECT_TRUE(cfg.pr_ms.contains(p.pr_ms));
    EXPECT_TRUE(cfg.qrs_ms.contains(p.qrs_ms));
    EXPECT_TRUE(cfg.qt_ms.contains(p.qt_ms));
    EXPECT_TRUE(cfg.hrv_std_ms.contains(p.hrv_std_ms));
    EXPECT_LT(p.qrs_ms, p.qt_ms);
    EXPECT_GE(p.base_heart_rate_bpm, 40);
  }
}

TEST(SampleProfile, AfibPrevalenceMonteCarlo) {
  CohortConfig cfg;
  cfg.afib_prevalence = 0.2;
  int n = 0;
  for (int s = 0; s < 1000; ++s) n += sample_profile(static_cast<std::uint64_t>(s), cfg).afib_flag;
  EXPECT_NEAR(n / 1000.0, 0.2, 0.03);
}

TEST(SampleProfile, InvalidRangeIsConfigError) {
  CohortConfig cfg;
  cfg.age_years = {60, 40};
  EXPECT_THROW(sample_profile(1, cfg), ConfigError);
  cfg = {};
  cfg.qrs_ms = {70, 400};
  EXPECT_THROW(sample_profile(1, cfg), ConfigError);
}

TEST(SampleProfile, AgeLowersHeartRateVariability) {
  CohortConfig cfg;
  double young = 0, old = 0;
  for (int s = 0; s < 200; ++s) {
    CohortConfig c = cfg;
    c.age_years = {20, 20};
    young += sample_profile(static_cast<std::uint64_t>(s), c).hrv_std_ms;
    c.age_years = {90, 90};
    old += sample_profile(static_cast<std::uint64_t>(s), c).hrv_std_ms;
  }
  EXPECT_GT(young, 2 * old);
}

TEST(RenderBeat, ZeroAmplitudesGiveZero) {
  PatientProfile p = quiet_profile();
  p.lead_amplitudes = {};
  for (double ph = 0; ph < 1000; ph += 7.3) EXPECT_EQ(render_beat(p, 1, ph), 0.0);
}

TEST(RenderBeat, MatchesGaussianOracle) {
  PatientProfile p = quiet_profile(50);
  p.pr_ms = 172;
  p.qrs_ms = 96;
  p.qt_ms = 430;
  for (int lead = 0; lead < kNumLeads; ++lead) {
    double lo = 1e9, hi = -1e9, olo = 1e9, ohi = -1e9;
    for (double ph = 0; ph < 1200; ph += 0.05) {
      const double v = render_beat(p, lead, ph);
      const double o = oracle_beat(172, 96, 430, p.lead_amplitudes[static_cast<std::size_t>(lead)], ph);
      EXPECT_NEAR(v, o, 1e-12);
      lo = std::min(lo, v), hi = std::max(hi, v), olo = std::min(olo, o), ohi = std::max(ohi, o);
    }
    EXPECT_NEAR(hi - lo, ohi - olo, 1e-9);
  }
}

TEST(RenderBeat, AfibRemovesPWave) {
  PatientProfile p = quiet_profile();
  p.afib_flag = true;
  WaveAmplitudes no_p = p.lead_amplitudes[1];
  no_p.p = 0;
  for (double ph = 0; ph < 80; ph += 1) EXPECT_NEAR(render_beat(p, 1, ph), oracle_beat(160, 90, 400, no_p, ph), 1e-12);
}

TEST(RenderBeat, PhaseOutsideBeatIsDomainError) {
  PatientProfile p = quiet_profile(60);
  EXPECT_THROW(render_beat(p, 0, -1), DomainError);
  EXPECT_THROW(render_beat(p, 0, 1000), DomainError);
  EXPECT_THROW(render_beat(p, 4, 10), DomainError);
}

TEST(RenderBeat, MeasuredIntervalsWithinOneSample) {
  // Onset/offset measured as the 2-sigma level (exp(-2) of the peak) of
  // isolated bumps rendered at 120 Hz.
  PatientProfile p = quiet_profile(50);
  p.pr_ms = 150;
  p.qrs_ms = 100;
  p.qt_ms = 420;
  const double dt = 1000.0 / kSampleRateHz;
  auto isolated = [&](double WaveAmplitudes::*field) {
    PatientProfile q = p;
    for (auto& a : q.lead_amplitudes) {
      const double keep = a.*field;
      a = {};
      a.*field = keep;
    }
    std::vector<double> v;
    for (double t = 0; t < 1100; t += dt) v.push_back(render_beat(q, 1, t));
    return v;
  };
  auto edges = [&](const std::vector<double>& v) {
    std::size_t peak = 0;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (std::abs(v[i]) > std::abs(v[peak])) peak = i;
    const double thr = std::exp(-2.0) * std::abs(v[peak]);
    std::size_t a = peak, b = peak;
    while (a > 0 && std::abs(v[a - 1]) >= thr) --a;
    while (b + 1 < v.size() && std::abs(v[b + 1]) >= thr) ++b;
    return std::pair<double, double>(a * dt, b * dt);
  };
  const auto pw = edges(isolated(&WaveAmplitudes::p));
  const auto qw = edges(isolated(&WaveAmplitudes::q));
  const auto sw = edges(isolated(&WaveAmplitudes::s));
  const auto tw = edges(isolated(&WaveAmplitudes::t));
  EXPECT_NEAR(qw.first - pw.first, p.pr_ms, dt);
  EXPECT_NEAR(sw.second - qw.first, p.qrs_ms, dt);
  EXPECT_NEAR(tw.second - qw.first, p.qt_ms, dt);
}

TEST(RenderTelemetry, JitterFreePeriodicity) {
  PatientProfile p = quiet_profile(60);
  const auto rec = render_telemetry(p, 120, 3);
  ASSERT_GT(rec.beats.size(), 100u);
  for (std::size_t i = 0; i + 1 < rec.beats.size(); ++i) {
    EXPECT_EQ(rec.beats[i].rr_ms, 1000.0);
    EXPECT_NEAR(rec.beats[i + 1].start_s - rec.beats[i].start_s, 1.0, 1e-9);
  }
  // Heart rate recovered from detected R peaks.
  const auto peaks = r_peaks(rec.samples, 1, 0.7f);
  ASSERT_GT(peaks.size(), 100u);
  const double rr_s = static_cast<double>(peaks.back() - peaks.front()) / (peaks.size() - 1) / kSampleRateHz;
  EXPECT_NEAR(60.0 / rr_s, 60.0, 1.0);
}

TEST(RenderTelemetry, DurationToSamples) {
  const auto rec = render_telemetry(quiet_profile(), 60, 1);
  EXPECT_EQ(rec.samples.rows(), 4);
  EXPECT_EQ(rec.samples.cols(), 7200);
  EXPECT_EQ(rec.sample_rate_hz, 120.0);
}

TEST(RenderTelemetry, DeterministicForSeed) {
  PatientProfile p = sample_profile(5, {});
  const auto a = render_telemetry(p, 300, 9), b = render_telemetry(p, 300, 9), c = render_telemetry(p, 300, 10);
  EXPECT_TRUE(a.samples.cwiseEqual(b.samples).all());
  EXPECT_FALSE(a.samples.cwiseEqual(c.samples).all());
}

TEST(RenderTelemetry, LeadsShareBeatTiming) {
  PatientProfile p = quiet_profile(72);
  const auto rec = render_telemetry(p, 60, 2);
  const auto a = r_peaks(rec.samples, 0, 0.5f), b = r_peaks(rec.samples, 1, 0.7f);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(RenderTelemetry, DropoutsMatchEventLog) {
  PatientProfile p = quiet_profile(70);
  p.noise_levels[NoiseKind::dropout] = 20;
  p.noise_levels[NoiseKind::wander] = 0.1;
  const auto rec = render_telemetry(p, 3600, 11);
  int logged = 0;
  for (const auto& e : rec.event_log) logged += e.kind == EventKind::dropout;
  // Independent scan: runs of >= 2 s where every lead is exactly zero.
  int runs = 0;
  Eigen::Index len = 0;
  for (Eigen::Index i = 0; i <= rec.samples.cols(); ++i) {
    const bool flat = i < rec.samples.cols() && (rec.samples.col(i).array() == 0.0f).all();
    if (flat) {
      ++len;
    } else {
      runs += len >= 240;
      len = 0;
    }
  }
  EXPECT_GT(logged, 5);
  EXPECT_EQ(runs, logged);
}

TEST(RenderTelemetry, AfibJitterAtLeastFiveFold) {
  PatientProfile p = quiet_profile(70);
  p.hrv_std_ms = 20;
  p.afib_flag = true;
  const auto rec = render_telemetry(p, 1800, 4);
  double m = 0, s = 0;
  for (const auto& b : rec.beats) m += b.rr_ms;
  m /= static_cast<double>(rec.beats.size());
  for (const auto& b : rec.beats) s += (b.rr_ms - m) * (b.rr_ms - m);
  s = std::sqrt(s / static_cast<double>(rec.beats.size() - 1));
  EXPECT_GT(s, 5 * 20 * 0.9);
  for (const auto& b : rec.beats) EXPECT_GT(b.rr_ms, 0);
}

TEST(Schedule, AfibEpisodeBookkeeping) {
  auto plan = make_plan(quiet_profile(), 600, "r");
  EXPECT_THROW(schedule_afib_episode(plan, 200, 200), DomainError);
  EXPECT_THROW(schedule_afib_episode(plan, 200, 150), DomainError);
  plan = schedule_afib_episode(plan, 100, 200);
  EXPECT_THROW(schedule_afib_episode(plan, 150, 300), DomainError);
  const auto rec = render_telemetry(plan, 1);
  std::vector<double> on, off;
  for (const auto& e : rec.event_log) {
    if (e.kind == EventKind::afib_onset) on.push_back(e.time_s);
    if (e.kind == EventKind::afib_offset) off.push_back(e.time_s);
  }
  ASSERT_EQ(on.size(), 1u);
  ASSERT_EQ(off.size(), 1u);
  EXPECT_EQ(on[0], 100);
  EXPECT_EQ(off[0], 200);
}

TEST(Schedule, PWaveEnergyVanishesInsideEpisode) {
  PatientProfile p = quiet_profile(70);
  p.hrv_std_ms = 10;
  for (auto& a : p.lead_amplitudes) a = {a.p, 0, 0, 0, 0};
  auto plan = schedule_afib_episode(make_plan(p, 1200, "r"), 400, 800);
  const auto rec = render_telemetry(plan, 2, {true});
  double in = 0, out = 0;
  for (Eigen::Index i = 0; i < rec.samples.cols(); ++i) {
    const double t = static_cast<double>(i) / kSampleRateHz;
    const double e = rec.samples.col(i).cast<double>().squaredNorm();
    (t >= 400 && t < 800 ? in : out) += e;
  }
  in /= 400, out /= 800;
  EXPECT_GT(out, 0);
  EXPECT_LT(in, 0.01 * out);
}

TEST(Schedule, ReversionWindowsAreSinus) {
  auto plan = schedule_afib_episode(make_plan(quiet_profile(), 1000, "r"), 100, 900, {{400, 500}});
  EXPECT_TRUE(afib_at(plan, 300));
  EXPECT_FALSE(afib_at(plan, 450));
  EXPECT_TRUE(afib_at(plan, 600));
  EXPECT_FALSE(afib_at(plan, 950));
  EXPECT_THROW(schedule_afib_episode(make_plan(quiet_profile(), 1000), 100, 900, {{50, 500}}), DomainError);
}

TEST(Schedule, IntervalDrift) {
  auto base = make_plan(quiet_profile(), 20 * 3600.0, "r");
  auto flat = schedule_interval_drift(base, DriftField::qt_ms, 420, 420);
  for (const auto& g : ground_truth_track(flat, 600)) EXPECT_EQ(g.qt_ms, 420);
  auto drift = schedule_interval_drift(base, "qt_ms", 400, 500);
  EXPECT_DOUBLE_EQ(truth_at(drift, 10 * 3600.0).qt_ms, 450.0);
  EXPECT_THROW(schedule_interval_drift(base, "st_ms", 1, 2), ConfigError);
  EXPECT_THROW(schedule_interval_drift(base, DriftField::qt_ms, 400, 900), ConfigError);
}

TEST(Schedule, MeasuredQtFollowsDrift) {
  PatientProfile p = quiet_profile(60);
  for (auto& a : p.lead_amplitudes) a = {0, 0, 0, 0, a.t};
  auto plan = schedule_interval_drift(make_plan(p, 20 * 3600.0, "r"), DriftField::qt_ms, 400, 500);
  const auto rec = render_telemetry(plan, 1, {true});
  // Beat nearest 10 h: T offset from the isolated T bump, QRS onset from the
  // beat mark plus PR.
  std::size_t k = 0;
  for (std::size_t i = 0; i < rec.beats.size(); ++i)
    if (std::abs(rec.beats[i].start_s - 36000) < std::abs(rec.beats[k].start_s - 36000)) k = i;
  const auto i0 = static_cast<Eigen::Index>(rec.beats[k].start_s * kSampleRateHz);
  Eigen::Index peak = i0;
  for (Eigen::Index i = i0; i < i0 + 100; ++i)
    if (std::abs(rec.samples(1, i)) > std::abs(rec.samples(1, peak))) peak = i;
  const double thr = std::exp(-2.0) * std::abs(rec.samples(1, peak));
  Eigen::Index end = peak;
  while (std::abs(rec.samples(1, end + 1)) >= thr) ++end;
  const double qrs_onset_s = rec.beats[k].start_s + p.pr_ms / 1000.0;
  const double qt = (static_cast<double>(end) / kSampleRateHz - qrs_onset_s) * 1000.0;
  const double expected = truth_at(plan, rec.beats[k].start_s).qt_ms;
  EXPECT_NEAR(expected, 450, 0.1);
  EXPECT_NEAR(qt, expected, 1000.0 / kSampleRateHz);
}

TEST(Serialization, PlanRoundTrip) {
  auto plan = make_plan(sample_profile(3, {}), 7200, "x_r0");
  plan = schedule_afib_episode(plan, 100, 900, {{300, 400}});
  plan = schedule_interval_drift(plan, DriftField::pr_ms, 140, 180);
  const auto back = plan_from_json(to_json(plan));
  EXPECT_EQ(to_json(back), to_json(plan));
  const auto rec = render_telemetry(plan, 3);
  const auto lines = sidecar_lines(plan, rec);
  ASSERT_FALSE(lines.empty());
  EXPECT_EQ(lines.front().at("type"), "record");
}
