#pragma once

// Synthetic multichannel telemetry with known ground truth.
//
// Each beat is a sum of five Gaussian bumps (P, Q, R, S, T). A bump with
// center c and width s is taken to start at c - 2s and end at c + 2s (the
// points where it falls to exp(-2) of its peak), and the bump geometry is
// laid out so that these onsets/offsets reproduce the profile's PR, QRS and
// QT intervals literally:
//
//   phase 0            P onset
//   pr                 Q onset (QRS onset)
//   pr + qrs           S offset (QRS offset)
//   pr + qt            T offset
//
// The label couplings (age -> QT and RR variability, sex -> amplitude
// pattern) are synthetic stand-ins chosen so labels are recoverable from the
// signal; they are not physiological claims.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pclr/common.hpp"
#include "pclr/encoder.hpp"

namespace pclr::synth {

struct Range {
  double lo = 0;
  double hi = 0;

  bool contains(double v) const { return v >= lo && v <= hi; }
  double sample(Rng& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return lo + (hi - lo) * u(rng);
  }
  void check(const std::string& what, double min_allowed, double max_allowed) const {
    if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi)
      throw ConfigError("empty or invalid range for " + what);
    if (lo < min_allowed || hi > max_allowed)
      throw ConfigError("range for " + what + " outside [" + std::to_string(min_allowed) + ", " +
                        std::to_string(max_allowed) + "]");
  }
};

enum class NoiseKind { wander, motion, dropout, pacemaker, pvc };

inline const char* to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::wander: return "wander";
    case NoiseKind::motion: return "motion";
    case NoiseKind::dropout: return "dropout";
    case NoiseKind::pacemaker: return "pacemaker";
    case NoiseKind::pvc: return "pvc";
  }
  return "?";
}

inline NoiseKind noise_kind_from_string(const std::string& s) {
  for (NoiseKind k : {NoiseKind::wander, NoiseKind::motion, NoiseKind::dropout, NoiseKind::pacemaker,
                      NoiseKind::pvc})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown noise kind '" + s + "'");
}

inline constexpr std::array<NoiseKind, 5> kNoiseKinds{NoiseKind::wander, NoiseKind::motion, NoiseKind::dropout,
                                                      NoiseKind::pacemaker, NoiseKind::pvc};

/// Bump amplitudes (mV) of one lead.
struct WaveAmplitudes {
  double p = 0, q = 0, r = 0, s = 0, t = 0;
};

/// Noise intensities:
///   wander     baseline sinusoid amplitude, mV
///   motion     broadband noise std inside bursts, mV (a tenth of it is always present)
///   dropout    expected flat-line gaps per hour
///   pacemaker  spikes per minute
///   pvc        premature ventricular beats per minute
using NoiseLevels = std::map<NoiseKind, double>;

struct PatientProfile {
  std::string patient_id;
  double age_years = 50;
  bool male = false;
  double base_heart_rate_bpm = 60;
  double pr_ms = 160;
  double qrs_ms = 90;
  double qt_ms = 400;
  std::array<WaveAmplitudes, kNumLeads> lead_amplitudes{};
  double hrv_std_ms = 0;
  bool afib_flag = false;
  NoiseLevels noise_levels;

  void validate() const {
    if (!(pr_ms > 0 && qrs_ms > 0 && qt_ms > 0)) throw ConfigError("intervals must be positive");
    if (!(qrs_ms < qt_ms)) throw ConfigError("QRS must be contained in QT");
    if (!(base_heart_rate_bpm > 0)) throw ConfigError("heart rate must be positive");
    if (!(hrv_std_ms >= 0)) throw ConfigError("hrv_std_ms must be >= 0");
    for (const auto& [k, v] : noise_levels)
      if (!(v >= 0)) throw ConfigError(std::string("negative noise level for ") + to_string(k));
  }

  double noise(NoiseKind k) const {
    auto it = noise_levels.find(k);
    return it == noise_levels.end() ? 0.0 : it->second;
  }
};

/// Value ranges for every profile field.
struct CohortConfig {
  Range age_years{18, 95};
  double male_fraction = 0.5;
  Range heart_rate_bpm{50, 100};
  Range pr_ms{120, 200};
  Range qrs_ms{70, 110};
  /// QT = center + slope * (age - mid age) + N(0, spread), clamped to qt_ms.
  Range qt_ms{360, 500};
  double qt_age_slope_ms_per_year = 1.0;
  double qt_spread_ms = 22;
  /// RR jitter falls linearly from hi (youngest) to lo (oldest), times U(0.8, 1.2).
  Range hrv_std_ms{15, 60};
  double afib_prevalence = 0.2;
  /// Afib RR jitter is max(afib_jitter_factor * hrv, afib_min_rr_std_ms); factor >= 5.
  double afib_jitter_factor = 5.0;
  double afib_min_rr_std_ms = 150;
  double afib_rate_factor = 1.25;
  /// Per-patient multiplicative spread of each bump amplitude.
  double amplitude_spread = 0.2;
  std::map<NoiseKind, Range> noise{
      {NoiseKind::wander, {0.02, 0.25}}, {NoiseKind::motion, {0.02, 0.25}},
      {NoiseKind::dropout, {0.0, 1.5}},  {NoiseKind::pacemaker, {0.0, 0.0}},
      {NoiseKind::pvc, {0.0, 0.3}},
  };

  void validate() const {
    age_years.check("age_years", 18, 95);
    heart_rate_bpm.check("heart_rate_bpm", 40, 140);
    pr_ms.check("pr_ms", 60, 400);
    qrs_ms.check("qrs_ms", 40, 200);
    qt_ms.check("qt_ms", 200, 700);
    hrv_std_ms.check("hrv_std_ms", 0, 300);
    if (!(male_fraction >= 0 && male_fraction <= 1)) throw ConfigError("male_fraction outside [0,1]");
    if (!(afib_prevalence >= 0 && afib_prevalence <= 1)) throw ConfigError("afib_prevalence outside [0,1]");
    if (!(afib_jitter_factor >= 5)) throw ConfigError("afib_jitter_factor must be >= 5");
    if (!(afib_rate_factor > 0)) throw ConfigError("afib_rate_factor must be positive");
    if (!(amplitude_spread >= 0 && amplitude_spread < 1)) throw ConfigError("amplitude_spread outside [0,1)");
    if (qrs_ms.hi >= qt_ms.lo) throw ConfigError("qrs range must lie below qt range");
    for (const auto& [k, r] : noise) r.check(std::string("noise.") + to_string(k), 0, 1e3);
  }
};

// ---------------------------------------------------------------------------
// Beat geometry

inline constexpr double kPWidthMs = 15.0;  // sigma of the P bump

/// Typical amplitudes (mV) per lead (I, II, III, V1).
inline std::array<WaveAmplitudes, kNumLeads> reference_amplitudes(bool male) {
  std::array<WaveAmplitudes, kNumLeads> a{{
      {0.10, -0.08, 1.00, -0.15, 0.25},
      {0.15, -0.10, 1.40, -0.20, 0.35},
      {0.06, -0.06, 0.60, -0.25, 0.15},
      {0.08, 0.00, 0.40, -1.20, -0.10},
  }};
  if (male) {
    for (auto& l : a) {
      l.r *= 1.3;
      l.s *= 1.3;
      l.t *= 1.2;
    }
    a[3].t = 0.15;  // upright V1 T wave
  }
  return a;
}

struct Bump {
  double center_ms;
  double sigma_ms;
  double amplitude_mv;

  double at(double t_ms) const {
    const double z = (t_ms - center_ms) / sigma_ms;
    return amplitude_mv * std::exp(-0.5 * z * z);
  }
  double onset() const { return center_ms - 2 * sigma_ms; }
  double offset() const { return center_ms + 2 * sigma_ms; }
};

/// Timing parameters of one rendered beat.
struct BeatShape {
  double pr_ms = 160, qrs_ms = 90, qt_ms = 400;
  bool afib = false;
  bool pvc = false;
};

/// The five bumps of a beat on one lead, phase 0 at P onset.
inline std::array<Bump, 5> beat_bumps(const BeatShape& b, const WaveAmplitudes& amp) {
  double qrs = b.qrs_ms;
  double r_amp = amp.r, s_amp = amp.s, t_amp = amp.t, q_amp = amp.q;
  if (b.pvc) {
    // wide, tall, discordant T
    qrs *= 1.8;
    r_amp = 1.8 * (std::abs(amp.r) > std::abs(amp.s) ? amp.r : -amp.s);
    s_amp = 0.3 * amp.s;
    q_amp = 0;
    t_amp = -0.8 * r_amp * 0.3;
  }
  const double q_on = b.pr_ms;
  const double qt = std::max(b.qt_ms, qrs + 60.0);
  const double sq = qrs / 12.0;
  const double sr = qrs / 8.0;
  const double st = (qt - qrs) / 6.0;
  const double p_amp = (b.afib || b.pvc) ? 0.0 : amp.p;
  return {{
      {2 * kPWidthMs, kPWidthMs, p_amp},
      {q_on + 2 * sq, sq, q_amp},
      {q_on + qrs / 2, sr, r_amp},
      {q_on + qrs - 2 * sq, sq, s_amp},
      {q_on + qt - 2 * st, st, t_amp},
  }};
}

inline double beat_value(const BeatShape& b, const WaveAmplitudes& amp, double phase_ms) {
  double v = 0;
  for (const Bump& bump : beat_bumps(b, amp)) v += bump.at(phase_ms);
  return v;
}

inline BeatShape shape_of(const PatientProfile& p) {
  return {p.pr_ms, p.qrs_ms, p.qt_ms, p.afib_flag, false};
}

/// Nominal RR interval of a profile, ms.
inline double nominal_rr_ms(const PatientProfile& p) { return 60000.0 / p.base_heart_rate_bpm; }

/// Value (mV) of one beat of `profile` on `lead` at `phase_ms` after P onset.
inline double render_beat(const PatientProfile& profile, int lead, double phase_ms) {
  if (lead < 0 || lead >= kNumLeads) throw DomainError("lead index out of range");
  if (!(phase_ms >= 0 && phase_ms < nominal_rr_ms(profile)))
    throw DomainError("phase " + std::to_string(phase_ms) + " ms outside beat [0, " +
                      std::to_string(nominal_rr_ms(profile)) + ")");
  return beat_value(shape_of(profile), profile.lead_amplitudes[static_cast<std::size_t>(lead)], phase_ms);
}

// ---------------------------------------------------------------------------
// Profiles

inline PatientProfile sample_profile(std::uint64_t rng_seed, const CohortConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(rng_seed, 0x70726f66));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  PatientProfile p;
  p.patient_id = "P" + std::to_string(rng_seed);
  p.age_years = cfg.age_years.sample(rng);
  p.male = u01(rng) < cfg.male_fraction;
  p.pr_ms = cfg.pr_ms.sample(rng);
  p.qrs_ms = cfg.qrs_ms.sample(rng);
  const double age_mid = 0.5 * (18.0 + 95.0);
  const double qt_center = 0.5 * (cfg.qt_ms.lo + cfg.qt_ms.hi);
  p.qt_ms = std::clamp(qt_center + cfg.qt_age_slope_ms_per_year * (p.age_years - age_mid) +
                           cfg.qt_spread_ms * n01(rng),
                       cfg.qt_ms.lo, cfg.qt_ms.hi);
  p.base_heart_rate_bpm = cfg.heart_rate_bpm.sample(rng);
  // sinus beats must end before the next P wave
  const double max_hr = 60000.0 / (p.pr_ms + p.qt_ms + 80.0);
  p.base_heart_rate_bpm = std::min(p.base_heart_rate_bpm, std::max(cfg.heart_rate_bpm.lo, max_hr));
  const double age_frac = (p.age_years - 18.0) / (95.0 - 18.0);
  p.hrv_std_ms = std::clamp(
      (cfg.hrv_std_ms.hi - (cfg.hrv_std_ms.hi - cfg.hrv_std_ms.lo) * age_frac) * (0.8 + 0.4 * u01(rng)),
      cfg.hrv_std_ms.lo, cfg.hrv_std_ms.hi);
  p.afib_flag = u01(rng) < cfg.afib_prevalence;
  p.lead_amplitudes = reference_amplitudes(p.male);
  for (auto& lead : p.lead_amplitudes) {
    for (double* a : {&lead.p, &lead.q, &lead.r, &lead.s, &lead.t})
      *a *= std::max(0.2, 1.0 + cfg.amplitude_spread * n01(rng));
  }
  for (NoiseKind k : kNoiseKinds) {
    auto it = cfg.noise.find(k);
    p.noise_levels[k] = it == cfg.noise.end() ? 0.0 : it->second.sample(rng);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Record plans

enum class EventKind { afib_onset, afib_offset, reversion_onset, reversion_offset, dropout, pvc, pacemaker };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::afib_onset: return "afib_onset";
    case EventKind::afib_offset: return "afib_offset";
    case EventKind::reversion_onset: return "reversion_onset";
    case EventKind::reversion_offset: return "reversion_offset";
    case EventKind::dropout: return "dropout";
    case EventKind::pvc: return "pvc";
    case EventKind::pacemaker: return "pacemaker";
  }
  return "?";
}

inline EventKind event_kind_from_string(const std::string& s) {
  for (EventKind k : {EventKind::afib_onset, EventKind::afib_offset, EventKind::reversion_onset,
                      EventKind::reversion_offset, EventKind::dropout, EventKind::pvc, EventKind::pacemaker})
    if (s == to_string(k)) return k;
  throw FormatError("unknown event kind '" + s + "'");
}

struct Event {
  double time_s = 0;
  EventKind kind = EventKind::pvc;
  double duration_s = 0;
};

struct AfibEpisode {
  double onset_s = 0;
  double offset_s = 0;
  /// Brief sinus-rhythm windows inside the episode.
  std::vector<std::pair<double, double>> reversions;
};

enum class DriftField { qt_ms, pr_ms, base_heart_rate_bpm };

inline const char* to_string(DriftField f) {
  switch (f) {
    case DriftField::qt_ms: return "qt_ms";
    case DriftField::pr_ms: return "pr_ms";
    case DriftField::base_heart_rate_bpm: return "base_heart_rate_bpm";
  }
  return "?";
}

inline DriftField drift_field_from_string(const std::string& s) {
  for (DriftField f : {DriftField::qt_ms, DriftField::pr_ms, DriftField::base_heart_rate_bpm})
    if (s == to_string(f)) return f;
  throw ConfigError("unknown drift field '" + s + "'");
}

struct IntervalDrift {
  DriftField field = DriftField::qt_ms;
  double start_value = 0;
  double end_value = 0;
};

struct RecordPlan {
  PatientProfile profile;
  double duration_s = 3600;
  std::string record_id;
  std::int64_t start_time = 1'600'000'000;
  std::vector<AfibEpisode> episodes;
  std::vector<IntervalDrift> drifts;
};

inline RecordPlan make_plan(const PatientProfile& profile, double duration_s, std::string record_id = {}) {
  if (!(duration_s > 0)) throw DomainError("duration must be positive");
  RecordPlan plan;
  plan.profile = profile;
  plan.duration_s = duration_s;
  plan.record_id = record_id.empty() ? profile.patient_id + "_r0" : std::move(record_id);
  return plan;
}

/// Adds an Afib episode on [onset, offset], optionally with sinus-reversion
/// sub-windows.
inline RecordPlan schedule_afib_episode(RecordPlan plan, double onset_s, double offset_s,
                                        std::vector<std::pair<double, double>> reversions = {}) {
  if (!(onset_s >= 0 && onset_s < offset_s && offset_s <= plan.duration_s))
    throw DomainError("afib episode must satisfy 0 <= onset < offset <= duration");
  for (const auto& e : plan.episodes)
    if (onset_s < e.offset_s && e.onset_s < offset_s) throw DomainError("overlapping afib episodes");
  std::sort(reversions.begin(), reversions.end());
  double prev_end = onset_s;
  for (const auto& [a, b] : reversions) {
    if (!(a > prev_end && a < b && b < offset_s))
      throw DomainError("reversion windows must be ordered, disjoint and strictly inside the episode");
    prev_end = b;
  }
  plan.episodes.push_back({onset_s, offset_s, std::move(reversions)});
  std::sort(plan.episodes.begin(), plan.episodes.end(),
            [](const AfibEpisode& a, const AfibEpisode& b) { return a.onset_s < b.onset_s; });
  return plan;
}

/// Linear drift of one profile parameter from the record start to its end.
inline RecordPlan schedule_interval_drift(RecordPlan plan, DriftField field, double start_value,
                                          double end_value, const CohortConfig& ranges = {}) {
  const Range& r = field == DriftField::qt_ms   ? ranges.qt_ms
                   : field == DriftField::pr_ms ? ranges.pr_ms
                                                : ranges.heart_rate_bpm;
  if (!r.contains(start_value) || !r.contains(end_value))
    throw ConfigError(std::string("drift values for ") + to_string(field) + " outside configured range");
  for (const auto& d : plan.drifts)
    if (d.field == field) throw ConfigError(std::string("duplicate drift for ") + to_string(field));
  plan.drifts.push_back({field, start_value, end_value});
  return plan;
}

inline RecordPlan schedule_interval_drift(RecordPlan plan, const std::string& field, double start_value,
                                          double end_value, const CohortConfig& ranges = {}) {
  return schedule_interval_drift(std::move(plan), drift_field_from_string(field), start_value, end_value, ranges);
}

/// Ground-truth state of the generator at time t.
struct Truth {
  double time_s = 0;
  double heart_rate_bpm = 0;  // nominal ventricular rate
  double pr_ms = 0, qrs_ms = 0, qt_ms = 0;
  bool afib = false;
};

inline bool afib_at(const RecordPlan& plan, double t) {
  if (plan.profile.afib_flag) return true;
  for (const auto& e : plan.episodes) {
    if (t >= e.onset_s && t < e.offset_s) {
      for (const auto& [a, b] : e.reversions)
        if (t >= a && t < b) return false;
      return true;
    }
  }
  return false;
}

inline Truth truth_at(const RecordPlan& plan, double t) {
  const PatientProfile& p = plan.profile;
  Truth g;
  g.time_s = t;
  g.heart_rate_bpm = p.base_heart_rate_bpm;
  g.pr_ms = p.pr_ms;
  g.qrs_ms = p.qrs_ms;
  g.qt_ms = p.qt_ms;
  const double frac = std::clamp(t / plan.duration_s, 0.0, 1.0);
  for (const auto& d : plan.drifts) {
    const double v = d.start_value + (d.end_value - d.start_value) * frac;
    switch (d.field) {
      case DriftField::qt_ms: g.qt_ms = v; break;
      case DriftField::pr_ms: g.pr_ms = v; break;
      case DriftField::base_heart_rate_bpm: g.heart_rate_bpm = v; break;
    }
  }
  g.afib = afib_at(plan, t);
  return g;
}

/// Nominal ventricular rate at t (raised during Afib).
inline double ventricular_rate_at(const RecordPlan& plan, double t, const CohortConfig& cfg = {}) {
  const Truth g = truth_at(plan, t);
  return g.afib ? g.heart_rate_bpm * cfg.afib_rate_factor : g.heart_rate_bpm;
}

// ---------------------------------------------------------------------------
// Rendering

struct BeatMark {
  double start_s = 0;  // P onset
  double r_peak_s = 0;
  double rr_ms = 0;    // interval to the next beat
  bool afib = false;
  bool pvc = false;
};

struct WaveformRecord {
  std::string record_id;
  std::string patient_id;
  double sample_rate_hz = kSampleRateHz;
  int n_leads = kNumLeads;
  Signal samples;  // n_leads x N, mV
  std::int64_t start_time = 0;
  std::vector<Event> event_log;
  std::vector<BeatMark> beats;

  Eigen::Index length() const { return samples.cols(); }
  double duration_s() const { return static_cast<double>(samples.cols()) / sample_rate_hz; }
};

struct RenderOptions {
  /// Skip every noise injector (clean render of the same beat train).
  bool clean = false;
  double min_rr_ms = 300;
  double max_rr_ms = 2000;
};

namespace detail {

inline void add_beat(Signal& out, const BeatShape& shape, const PatientProfile& p, double start_s) {
  const double fs = kSampleRateHz;
  for (int lead = 0; lead < kNumLeads; ++lead) {
    const auto bumps = beat_bumps(shape, p.lead_amplitudes[static_cast<std::size_t>(lead)]);
    for (const Bump& b : bumps) {
      if (b.amplitude_mv == 0.0) continue;
      const double c_s = start_s + b.center_ms / 1000.0;
      const double w_s = 6.0 * b.sigma_ms / 1000.0;
      const auto i0 = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::ceil((c_s - w_s) * fs)));
      const auto i1 = std::min<Eigen::Index>(out.cols() - 1, static_cast<Eigen::Index>(std::floor((c_s + w_s) * fs)));
      for (Eigen::Index i = i0; i <= i1; ++i) {
        const double phase_ms = (static_cast<double>(i) / fs - start_s) * 1000.0;
        out(lead, i) += static_cast<float>(b.at(phase_ms));
      }
    }
  }
}

inline double poisson_rate_count(Rng& rng, double mean) {
  if (mean <= 0) return 0;
  std::poisson_distribution<int> d(mean);
  return d(rng);
}

}  // namespace detail

/// Renders a full record: the beat train (with RR jitter, Afib episodes,
/// interval drift and PVCs) plus independently seeded noise injectors.
inline WaveformRecord render_telemetry(const RecordPlan& plan, std::uint64_t rng_seed,
                                       const RenderOptions& opt = {}, const CohortConfig& cfg = {}) {
  if (!(plan.duration_s > 0)) throw DomainError("duration must be positive");
  const PatientProfile& p = plan.profile;
  p.validate();
  const double fs = kSampleRateHz;
  const auto n = static_cast<Eigen::Index>(std::llround(plan.duration_s * fs));

  WaveformRecord rec;
  rec.record_id = plan.record_id;
  rec.patient_id = p.patient_id;
  rec.start_time = plan.start_time;
  rec.samples = Signal::Zero(kNumLeads, n);

  for (const auto& e : plan.episodes) {
    rec.event_log.push_back({e.onset_s, EventKind::afib_onset, 0});
    for (const auto& [a, b] : e.reversions) {
      rec.event_log.push_back({a, EventKind::reversion_onset, 0});
      rec.event_log.push_back({b, EventKind::reversion_offset, 0});
    }
    rec.event_log.push_back({e.offset_s, EventKind::afib_offset, 0});
  }

  // Beat train.
  Rng beat_rng(mix_seed(rng_seed, 1));
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double pvc_per_min = opt.clean ? 0.0 : p.noise(NoiseKind::pvc);
  double t = u01(beat_rng) * nominal_rr_ms(p) / 1000.0;
  while (t < plan.duration_s) {
    const Truth g = truth_at(plan, t);
    BeatShape shape{g.pr_ms, g.qrs_ms, g.qt_ms, g.afib, false};
    double rate = g.afib ? g.heart_rate_bpm * cfg.afib_rate_factor : g.heart_rate_bpm;
    const double mean_rr = 60000.0 / rate;
    double sd = p.hrv_std_ms;
    if (g.afib) sd = std::max(cfg.afib_jitter_factor * p.hrv_std_ms, cfg.afib_min_rr_std_ms);
    double rr = mean_rr;
    if (sd > 0) rr = std::clamp(mean_rr + sd * n01(beat_rng), opt.min_rr_ms, opt.max_rr_ms);
    if (pvc_per_min > 0 && u01(beat_rng) < pvc_per_min * mean_rr / 60000.0) {
      shape.pvc = true;
      rec.event_log.push_back({t, EventKind::pvc, 0});
    }
    detail::add_beat(rec.samples, shape, p, t);
    const double qrs = shape.pvc ? 1.8 * shape.qrs_ms : shape.qrs_ms;
    rec.beats.push_back({t, t + (shape.pr_ms + qrs / 2) / 1000.0, rr, g.afib, shape.pvc});
    t += rr / 1000.0;
  }

  if (!opt.clean) {
    const double hours = plan.duration_s / 3600.0;
    // Baseline wander: two slow sinusoids per lead, < 0.5 Hz.
    if (double amp = p.noise(NoiseKind::wander); amp > 0) {
      Rng rng(mix_seed(rng_seed, 2));
      for (int lead = 0; lead < kNumLeads; ++lead) {
        for (int comp = 0; comp < 2; ++comp) {
          const double f = 0.05 + 0.4 * u01(rng);
          const double a = amp * (0.5 + 0.5 * u01(rng));
          const double ph = 2 * M_PI * u01(rng);
          for (Eigen::Index i = 0; i < n; ++i)
            rec.samples(lead, i) += static_cast<float>(a * std::sin(2 * M_PI * f * static_cast<double>(i) / fs + ph));
        }
      }
    }
    // Broadband motion noise: a low floor plus bursts.
    if (double sd = p.noise(NoiseKind::motion); sd > 0) {
      Rng rng(mix_seed(rng_seed, 3));
      std::normal_distribution<double> g(0.0, 1.0);
      std::vector<float> level(static_cast<std::size_t>(n), static_cast<float>(0.1 * sd));
      const int bursts = static_cast<int>(detail::poisson_rate_count(rng, 15.0 * hours));
      for (int b = 0; b < bursts; ++b) {
        const double start = u01(rng) * plan.duration_s;
        const double dur = 3.0 + 37.0 * u01(rng);
        const float s = static_cast<float>(sd * (0.5 + u01(rng)));
        const auto i0 = static_cast<Eigen::Index>(start * fs);
        const auto i1 = std::min(n, static_cast<Eigen::Index>((start + dur) * fs));
        for (Eigen::Index i = i0; i < i1; ++i) level[static_cast<std::size_t>(i)] = std::max(level[static_cast<std::size_t>(i)], s);
      }
      for (int lead = 0; lead < kNumLeads; ++lead)
        for (Eigen::Index i = 0; i < n; ++i)
          rec.samples(lead, i) += static_cast<float>(level[static_cast<std::size_t>(i)] * g(rng));
    }
    // Pacemaker spikes: two-sample deflections on every lead.
    if (double per_min = p.noise(NoiseKind::pacemaker); per_min > 0) {
      Rng rng(mix_seed(rng_seed, 4));
      const int count = static_cast<int>(detail::poisson_rate_count(rng, per_min * plan.duration_s / 60.0));
      std::vector<double> times(static_cast<std::size_t>(count));
      for (double& x : times) x = u01(rng) * plan.duration_s;
      std::sort(times.begin(), times.end());
      for (double ts : times) {
        const auto i = static_cast<Eigen::Index>(ts * fs);
        for (int lead = 0; lead < kNumLeads; ++lead) {
          if (i < n) rec.samples(lead, i) += 4.0f;
          if (i + 1 < n) rec.samples(lead, i + 1) -= 1.5f;
        }
        rec.event_log.push_back({ts, EventKind::pacemaker, 2.0 / fs});
      }
    }
    // Dropouts: flat-line gaps (0 mV on every lead), 2-10 s, at least 5 s apart.
    if (double per_hour = p.noise(NoiseKind::dropout); per_hour > 0) {
      Rng rng(mix_seed(rng_seed, 5));
      const int count = static_cast<int>(detail::poisson_rate_count(rng, per_hour * hours));
      std::vector<std::pair<double, double>> gaps;
      for (int k = 0; k < count; ++k) {
        const double dur = 2.0 + 8.0 * u01(rng);
        const double start = u01(rng) * std::max(0.0, plan.duration_s - dur);
        gaps.emplace_back(start, dur);
      }
      std::sort(gaps.begin(), gaps.end());
      double last_end = -1e9;
      for (const auto& [start, dur] : gaps) {
        if (start < last_end + 5.0) continue;
        const auto i0 = static_cast<Eigen::Index>(std::ceil(start * fs));
        const auto i1 = std::min(n, static_cast<Eigen::Index>(std::ceil((start + dur) * fs)));
        if (i1 - i0 < static_cast<Eigen::Index>(2.0 * fs)) continue;
        rec.samples.block(0, i0, kNumLeads, i1 - i0).setZero();
        rec.event_log.push_back({static_cast<double>(i0) / fs, EventKind::dropout,
                                 static_cast<double>(i1 - i0) / fs});
        last_end = start + dur;
      }
    }
  }

  std::stable_sort(rec.event_log.begin(), rec.event_log.end(),
                   [](const Event& a, const Event& b) { return a.time_s < b.time_s; });
  return rec;
}

/// Clean-or-noisy render of a bare profile (no episodes or drift).
inline WaveformRecord render_telemetry(const PatientProfile& profile, double duration_s, std::uint64_t rng_seed,
                                       const RenderOptions& opt = {}) {
  return render_telemetry(make_plan(profile, duration_s), rng_seed, opt);
}

/// Ground truth sampled every `step_s` seconds, at window starts t = k*step.
inline std::vector<Truth> ground_truth_track(const RecordPlan& plan, double step_s) {
  if (!(step_s > 0)) throw DomainError("step must be positive");
  std::vector<Truth> out;
  for (double t = 0; t < plan.duration_s; t += step_s) out.push_back(truth_at(plan, t));
  return out;
}

// ---------------------------------------------------------------------------
// JSON (ground-truth sidecar)

inline nlohmann::json to_json(const PatientProfile& p) {
  nlohmann::json amps = nlohmann::json::array();
  for (const auto& a : p.lead_amplitudes) amps.push_back({a.p, a.q, a.r, a.s, a.t});
  nlohmann::json noise = nlohmann::json::object();
  for (const auto& [k, v] : p.noise_levels) noise[to_string(k)] = v;
  return {{"patient_id", p.patient_id},
          {"age_years", p.age_years},
          {"sex", p.male ? 1 : 0},
          {"base_heart_rate_bpm", p.base_heart_rate_bpm},
          {"pr_ms", p.pr_ms},
          {"qrs_ms", p.qrs_ms},
          {"qt_ms", p.qt_ms},
          {"lead_amplitudes", amps},
          {"hrv_std_ms", p.hrv_std_ms},
          {"afib_flag", p.afib_flag},
          {"noise_levels", noise}};
}

inline PatientProfile profile_from_json(const nlohmann::json& j) {
  PatientProfile p;
  p.patient_id = j.at("patient_id").get<std::string>();
  p.age_years = j.at("age_years").get<double>();
  p.male = j.at("sex").get<int>() != 0;
  p.base_heart_rate_bpm = j.at("base_heart_rate_bpm").get<double>();
  p.pr_ms = j.at("pr_ms").get<double>();
  p.qrs_ms = j.at("qrs_ms").get<double>();
  p.qt_ms = j.at("qt_ms").get<double>();
  const auto& amps = j.at("lead_amplitudes");
  for (std::size_t l = 0; l < kNumLeads; ++l) {
    const auto& a = amps.at(l);
    p.lead_amplitudes[l] = {a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>(),
                            a.at(3).get<double>(), a.at(4).get<double>()};
  }
  p.hrv_std_ms = j.at("hrv_std_ms").get<double>();
  p.afib_flag = j.at("afib_flag").get<bool>();
  for (const auto& [k, v] : j.at("noise_levels").items()) p.noise_levels[noise_kind_from_string(k)] = v.get<double>();
  return p;
}

inline nlohmann::json to_json(const RecordPlan& plan) {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : plan.episodes) {
    nlohmann::json rev = nlohmann::json::array();
    for (const auto& [a, b] : e.reversions) rev.push_back({a, b});
    eps.push_back({{"onset_s", e.onset_s}, {"offset_s", e.offset_s}, {"reversions", rev}});
  }
  nlohmann::json drifts = nlohmann::json::array();
  for (const auto& d : plan.drifts)
    drifts.push_back({{"field", to_string(d.field)}, {"start", d.start_value}, {"end", d.end_value}});
  return {{"record_id", plan.record_id}, {"duration_s", plan.duration_s}, {"start_time", plan.start_time},
          {"profile", to_json(plan.profile)}, {"episodes", eps}, {"drifts", drifts}};
}

inline RecordPlan plan_from_json(const nlohmann::json& j) {
  RecordPlan plan;
  plan.record_id = j.at("record_id").get<std::string>();
  plan.duration_s = j.at("duration_s").get<double>();
  plan.start_time = j.at("start_time").get<std::int64_t>();
  plan.profile = profile_from_json(j.at("profile"));
  for (const auto& e : j.at("episodes")) {
    AfibEpisode ep{e.at("onset_s").get<double>(), e.at("offset_s").get<double>(), {}};
    for (const auto& r : e.at("reversions")) ep.reversions.emplace_back(r.at(0).get<double>(), r.at(1).get<double>());
    plan.episodes.push_back(std::move(ep));
  }
  for (const auto& d : j.at("drifts"))
    plan.drifts.push_back({drift_field_from_string(d.at("field").get<std::string>()), d.at("start").get<double>(),
                           d.at("end").get<double>()});
  return plan;
}

/// Sidecar lines: one "record" line carrying the full plan, one "event" line
/// per event-log entry, and one "truth" line per `truth_step_s`.
inline std::vector<nlohmann::json> sidecar_lines(const RecordPlan& plan, const WaveformRecord& rec,
                                                 double truth_step_s = 60.0) {
  std::vector<nlohmann::json> lines;
  lines.push_back({{"type", "record"}, {"format_version", 1}, {"plan", to_json(plan)},
                   {"sample_rate_hz", rec.sample_rate_hz}, {"n_samples", rec.length()}});
  for (const auto& e : rec.event_log)
    lines.push_back({{"type", "event"}, {"time_s", e.time_s}, {"kind", to_string(e.kind)}, {"duration_s", e.duration_s}});
  for (const Truth& g : ground_truth_track(plan, truth_step_s))
    lines.push_back({{"type", "truth"}, {"time_s", g.time_s}, {"heart_rate_bpm", g.heart_rate_bpm},
                     {"pr_ms", g.pr_ms}, {"qrs_ms", g.qrs_ms}, {"qt_ms", g.qt_ms}, {"afib", g.afib}});
  return lines;
}

}  // namespace pclr::synth
