#pragma once

// Sliding-window annotation of long records and run-length transition
// detection on probability tracks.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pclr/downstream.hpp"
#include "pclr/segment.hpp"
#include "pclr/synthgen.hpp"

namespace pclr::annotate {

struct WindowRef {
  Eigen::Index start_sample = 0;
  double start_time_s = 0;
  /// Window touches a clipped or non-finite sample.
  bool flagged = false;
};

/// Left-to-right window starts. Empty when the record is shorter than one
/// window.
inline std::vector<WindowRef> slide_windows(const Signal& samples, int stride = kWindowSamples,
                                            double clip_threshold_mv = kClipThresholdMv) {
  if (stride <= 0) throw DomainError("stride must be positive");
  std::vector<WindowRef> out;
  const Eigen::Index n = samples.cols();
  if (n < kWindowSamples) return out;
  // Prefix count of bad columns so each flag is O(1).
  std::vector<Eigen::Index> bad(static_cast<std::size_t>(n) + 1, 0);
  for (Eigen::Index j = 0; j < n; ++j) {
    bool b = false;
    for (Eigen::Index l = 0; l < samples.rows(); ++l) {
      const float v = samples(l, j);
      b = b || !std::isfinite(v) || std::abs(v) > clip_threshold_mv;
    }
    bad[static_cast<std::size_t>(j) + 1] = bad[static_cast<std::size_t>(j)] + (b ? 1 : 0);
  }
  for (Eigen::Index s = 0; s + kWindowSamples <= n; s += stride) {
    const auto e = static_cast<std::size_t>(s + kWindowSamples);
    out.push_back({s, static_cast<double>(s) / kSampleRateHz, bad[e] - bad[static_cast<std::size_t>(s)] > 0});
  }
  return out;
}

inline std::vector<WindowRef> slide_windows(const synth::WaveformRecord& rec, int stride = kWindowSamples,
                                            double clip_threshold_mv = kClipThresholdMv) {
  return slide_windows(rec.samples, stride, clip_threshold_mv);
}

inline Signal window_at(const Signal& samples, const WindowRef& w) {
  return samples.middleCols(w.start_sample, kWindowSamples);
}

struct AnnotationTrack {
  std::string record_id;
  downstream::TaskKind task = downstream::TaskKind::afib;
  int window_length_samples = kWindowSamples;
  int stride_samples = kWindowSamples;
  int smoothing = 1;
  std::vector<std::string> value_names;
  std::vector<double> times;
  std::vector<std::vector<double>> raw;       // one vector per window
  std::vector<std::vector<double>> smoothed;  // equals raw when smoothing == 1
  std::vector<bool> flags;

  std::size_t size() const { return times.size(); }
  double stride_s() const { return stride_samples / kSampleRateHz; }

  /// Column `d` of the smoothed values.
  std::vector<double> series(std::size_t d = 0) const {
    std::vector<double> s;
    s.reserve(smoothed.size());
    for (const auto& v : smoothed) s.push_back(v.at(d));
    return s;
  }
};

/// Centered moving average over w windows, truncated at the edges.
inline std::vector<std::vector<double>> smooth(const std::vector<std::vector<double>>& raw, int w) {
  if (w < 1) throw DomainError("smoothing window must be >= 1");
  if (w == 1) return raw;
  const auto n = static_cast<long>(raw.size());
  const long lo_off = (w - 1) / 2, hi_off = w / 2;
  std::vector<std::vector<double>> out(raw.size());
  for (long i = 0; i < n; ++i) {
    const long a = std::max(0L, i - lo_off), b = std::min(n - 1, i + hi_off);
    std::vector<double> acc(raw[static_cast<std::size_t>(i)].size(), 0.0);
    for (long j = a; j <= b; ++j)
      for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += raw[static_cast<std::size_t>(j)][d];
    for (double& v : acc) v /= static_cast<double>(b - a + 1);
    out[static_cast<std::size_t>(i)] = std::move(acc);
  }
  return out;
}

inline std::vector<std::string> value_names_for(downstream::TaskKind k) {
  switch (k) {
    case downstream::TaskKind::intervals: return downstream::interval_names();
    case downstream::TaskKind::afib: return {"afib_probability"};
    case downstream::TaskKind::sex: return {"male_probability"};
    case downstream::TaskKind::age: return {"age_years"};
  }
  return {};
}

/// Runs the model over every window; `chunk` windows per forward pass.
inline AnnotationTrack annotate(const synth::WaveformRecord& rec, downstream::TaskModel& model,
                                downstream::TaskKind task, int stride = kWindowSamples, int smoothing = 1,
                                int chunk = 64) {
  if (model.task().kind != task)
    throw ConfigError(std::string("model is trained for ") + downstream::to_string(model.task().kind) +
                      ", not " + downstream::to_string(task));
  if (smoothing < 1) throw ConfigError("smoothing must be >= 1");
  AnnotationTrack t;
  t.record_id = rec.record_id;
  t.task = task;
  t.stride_samples = stride;
  t.smoothing = smoothing;
  t.value_names = value_names_for(task);
  const auto wins = slide_windows(rec, stride);
  for (std::size_t i = 0; i < wins.size(); i += static_cast<std::size_t>(chunk)) {
    const std::size_t n = std::min(wins.size() - i, static_cast<std::size_t>(chunk));
    std::vector<Signal> batch;
    for (std::size_t j = i; j < i + n; ++j) batch.push_back(window_at(rec.samples, wins[j]));
    const Mat<double> p = model.predict(batch, chunk);
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      std::vector<double> v(static_cast<std::size_t>(p.rows()));
      for (Eigen::Index d = 0; d < p.rows(); ++d) v[static_cast<std::size_t>(d)] = p(d, j);
      t.raw.push_back(std::move(v));
    }
  }
  for (const auto& w : wins) {
    t.times.push_back(w.start_time_s);
    t.flags.push_back(w.flagged);
  }
  t.smoothed = smooth(t.raw, smoothing);
  return t;
}

struct Episode {
  std::size_t onset_index = 0;
  std::size_t offset_index = 0;  // one past the last above-threshold window
  double onset_time_s = 0;
  double offset_time_s = 0;
};

/// Run-length rule: the state flips once min_run consecutive windows sit on
/// the other side of the threshold. An episode spans from the first window of
/// its confirming run to the last above-threshold window before the state
/// flips back (or the track ends).
inline std::vector<Episode> detect_transitions(const std::vector<double>& values, const std::vector<double>& times,
                                               double stride_s, double threshold = 0.5, int min_run = 3) {
  if (values.size() != times.size()) throw DomainError("values/times length mismatch");
  if (min_run < 1) throw DomainError("min_run must be >= 1");
  std::vector<Episode> out;
  bool on = false;
  std::size_t run_start = 0, run_len = 0, last_above = 0;
  Episode cur;
  auto close = [&] {
    cur.offset_index = last_above + 1;
    cur.offset_time_s = times[last_above] + stride_s;
    out.push_back(cur);
  };
  for (std::size_t i = 0; i < values.size(); ++i) {
    const bool above = values[i] >= threshold;
    if (above) last_above = i;
    if (above != on) {
      if (run_len == 0) run_start = i;
      ++run_len;
      if (run_len >= static_cast<std::size_t>(min_run)) {
        if (!on) {
          cur = Episode{run_start, 0, times[run_start], 0};
        } else {
          last_above = run_start - 1;
          close();
        }
        on = !on;
        run_len = 0;
      }
    } else {
      run_len = 0;
    }
  }
  if (on) close();
  return out;
}

inline std::vector<Episode> detect_transitions(const AnnotationTrack& t, double threshold = 0.5, int min_run = 3) {
  return detect_transitions(t.series(0), t.times, t.stride_s(), threshold, min_run);
}

// ---------------------------------------------------------------------------
// Output

inline void write_track_csv(const std::filesystem::path& path, const AnnotationTrack& t) {
  std::ostringstream os;
  os.precision(9);
  os << "time_s";
  for (const auto& n : t.value_names) os << ',' << n;
  if (t.smoothing > 1)
    for (const auto& n : t.value_names) os << ",smoothed_" << n;
  os << ",flagged\n";
  for (std::size_t i = 0; i < t.size(); ++i) {
    os << t.times[i];
    for (double v : t.raw[i]) os << ',' << v;
    if (t.smoothing > 1)
      for (double v : t.smoothed[i]) os << ',' << v;
    os << ',' << (t.flags[i] ? 1 : 0) << '\n';
  }
  io::write_file(path, os.str());
}

inline nlohmann::json track_sidecar(const AnnotationTrack& t, const std::string& checkpoint_id) {
  return {{"format_version", 1},
          {"record_id", t.record_id},
          {"checkpoint", checkpoint_id},
          {"task", downstream::to_string(t.task)},
          {"window_length_samples", t.window_length_samples},
          {"stride_samples", t.stride_samples},
          {"smoothing", t.smoothing},
          {"columns", t.value_names},
          {"n_windows", t.size()},
          {"n_flagged", std::count(t.flags.begin(), t.flags.end(), true)}};
}

inline std::vector<nlohmann::json> episodes_json(const std::vector<Episode>& eps) {
  std::vector<nlohmann::json> out;
  for (const auto& e : eps)
    out.push_back({{"onset_time_s", e.onset_time_s}, {"offset_time_s", e.offset_time_s},
                   {"onset_window", e.onset_index}, {"offset_window", e.offset_index}});
  return out;
}

}  // namespace pclr::annotate
