#pragma once

// Curation: one-hour blocks, amplitude clipping, Fourier-band noise scoring
// and least-noisy 60 s segment selection.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pclr/common.hpp"
#include "pclr/harness/formats.hpp"
#include "pclr/segment.hpp"
#include "pclr/synthgen.hpp"

namespace pclr::curate {

struct HourBlock {
  std::string patient_id;
  std::string record_id;
  int index = 0;
  Eigen::Index start_sample = 0;  // offset in the source record
  Signal samples;                 // 4 x (432000, or less for the trailing block)
  std::vector<std::uint8_t> mask; // 1 = removed
  bool partial = false;

  Eigen::Index length() const { return samples.cols(); }
  double start_s() const { return static_cast<double>(start_sample) / kSampleRateHz; }
  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }
};

/// Consecutive non-overlapping one-hour blocks; a trailing partial hour is
/// kept and flagged.
inline std::vector<HourBlock> split_hour_blocks(const synth::WaveformRecord& record) {
  if (record.length() == 0) throw DomainError("record is empty");
  std::vector<HourBlock> blocks;
  for (Eigen::Index start = 0, i = 0; start < record.length(); start += kHourSamples, ++i) {
    HourBlock b;
    b.patient_id = record.patient_id;
    b.record_id = record.record_id;
    b.index = static_cast<int>(i);
    b.start_sample = start;
    const Eigen::Index len = std::min<Eigen::Index>(kHourSamples, record.length() - start);
    b.samples = record.samples.block(0, start, record.samples.rows(), len);
    b.mask.assign(static_cast<std::size_t>(len), 0);
    b.partial = len < kHourSamples;
    blocks.push_back(std::move(b));
  }
  return blocks;
}

/// Masks every time index where any lead exceeds the threshold in absolute
/// value (or is non-finite), across all leads.
inline HourBlock clip_mask(HourBlock block, double threshold_mv = kClipThresholdMv) {
  if (!(threshold_mv > 0)) throw DomainError("clip threshold must be positive");
  const auto thr = static_cast<float>(threshold_mv);
  block.mask.assign(static_cast<std::size_t>(block.length()), 0);
  for (Eigen::Index i = 0; i < block.length(); ++i) {
    for (Eigen::Index l = 0; l < block.samples.rows(); ++l) {
      const float v = block.samples(l, i);
      if (!(std::abs(v) <= thr)) {
        block.mask[static_cast<std::size_t>(i)] = 1;
        break;
      }
    }
  }
  return block;
}

// ---------------------------------------------------------------------------
// Noise score

inline constexpr double kLowCutHz = 0.75;
inline constexpr double kHighCutHz = 40.0;

/// Reusable FFTW plan for 7200-point real transforms. Not thread-safe; use
/// one instance per thread.
class BandEnergyScorer {
 public:
  BandEnergyScorer() : n_(kSegmentSamples) {
    in_ = fftw_alloc_real(static_cast<std::size_t>(n_));
    out_ = fftw_alloc_complex(static_cast<std::size_t>(n_ / 2 + 1));
    plan_ = fftw_plan_dft_r2c_1d(n_, in_, out_, FFTW_ESTIMATE);
    // Bins strictly below 0.75 Hz or strictly above 40 Hz; bins on the
    // edges are excluded. Non-edge bins stand for the mirrored pair.
    for (int k = 0; k <= n_ / 2; ++k) {
      const double f = k * kSampleRateHz / n_;
      if (f < kLowCutHz || f > kHighCutHz) {
        const double w = (k == 0 || 2 * k == n_) ? 1.0 : 2.0;
        bins_.push_back({k, w});
      }
    }
  }
  ~BandEnergyScorer() {
    fftw_destroy_plan(plan_);
    fftw_free(in_);
    fftw_free(out_);
  }
  BandEnergyScorer(const BandEnergyScorer&) = delete;
  BandEnergyScorer& operator=(const BandEnergyScorer&) = delete;

  /// Out-of-band energy of one lead, sum |X_k|^2 / N over the two-sided
  /// spectrum.
  double lead_score(const float* x) {
    for (int i = 0; i < n_; ++i) in_[i] = x[i];
    fftw_execute(plan_);
    double s = 0;
    for (const auto& [k, w] : bins_) s += w * (out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1]);
    return s / n_;
  }

  double score(const Signal& samples, Eigen::Index offset = 0) {
    if (samples.cols() - offset < n_ || offset < 0) throw DomainError("noise_score needs 7200 samples per lead");
    double s = 0;
    for (Eigen::Index l = 0; l < samples.rows(); ++l) s += lead_score(samples.row(l).data() + offset);
    return s;
  }

 private:
  struct BinWeight {
    int k;
    double w;
  };
  int n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
  std::vector<BinWeight> bins_;
};

inline BandEnergyScorer& thread_scorer() {
  thread_local BandEnergyScorer scorer;
  return scorer;
}

/// Sum over leads of the DFT energy in bins below 0.75 Hz (DC included) and
/// above 40 Hz, normalized by N.
inline double noise_score(const Signal& samples) {
  if (samples.cols() != kSegmentSamples) throw DomainError("noise_score needs exactly 7200 samples per lead");
  return thread_scorer().score(samples);
}

// ---------------------------------------------------------------------------
// Selection

inline constexpr Eigen::Index kCandidateStride = static_cast<Eigen::Index>(kSampleRateHz);  // 1 s

struct Candidate {
  Eigen::Index offset = 0;  // within the block
  double score = 0;
};

/// Every unmasked 60 s window at 1 s stride, with its score.
inline std::vector<Candidate> enumerate_candidates(const HourBlock& block) {
  std::vector<std::size_t> prefix(block.mask.size() + 1, 0);
  for (std::size_t i = 0; i < block.mask.size(); ++i) prefix[i + 1] = prefix[i] + block.mask[i];
  std::vector<Candidate> out;
  auto& scorer = thread_scorer();
  for (Eigen::Index o = 0; o + kSegmentSamples <= block.length(); o += kCandidateStride) {
    const auto a = static_cast<std::size_t>(o);
    if (prefix[a + kSegmentSamples] - prefix[a] != 0) continue;
    out.push_back({o, scorer.score(block.samples, o)});
  }
  return out;
}

/// Least-noisy unmasked candidate (earliest on ties), or nothing.
inline std::optional<Segment> select_best_segment(const HourBlock& block) {
  const auto cands = enumerate_candidates(block);
  if (cands.empty()) return std::nullopt;
  const Candidate* best = &cands.front();
  for (const auto& c : cands)
    if (c.score < best->score) best = &c;
  Segment s;
  s.patient_id = block.patient_id;
  s.segment_id = block.record_id + "_h" + std::to_string(block.index);
  s.samples = block.samples.block(0, best->offset, block.samples.rows(), kSegmentSamples);
  s.source_record_id = block.record_id;
  s.source_offset_s = static_cast<double>(block.start_sample + best->offset) / kSampleRateHz;
  s.quality_score = best->score;
  s.partial_block = block.partial;
  return s;
}

/// Labels of a segment from the generator's ground truth at its midpoint.
inline SegmentLabels labels_for(const synth::RecordPlan& plan, double offset_s,
                                const synth::CohortConfig& cfg = {}) {
  const double mid = offset_s + kSegmentSeconds / 2.0;
  const synth::Truth g = synth::truth_at(plan, mid);
  SegmentLabels l;
  l.age_years = plan.profile.age_years;
  l.sex = plan.profile.male ? 1.0 : 0.0;
  l.qrs_ms = g.qrs_ms;
  l.qt_ms = g.qt_ms;
  if (!g.afib) l.pr_ms = g.pr_ms;
  l.ventricular_rate_bpm = synth::ventricular_rate_at(plan, mid, cfg);
  l.afib = g.afib ? 1.0 : 0.0;
  return l;
}

/// Curated, labelled segments of one record, one per usable hour block.
inline std::vector<Segment> curate_record(const synth::WaveformRecord& rec, const synth::RecordPlan& plan,
                                          double clip_threshold_mv = kClipThresholdMv,
                                          const synth::CohortConfig& cfg = {}) {
  std::vector<Segment> out;
  for (auto& raw : split_hour_blocks(rec)) {
    auto seg = select_best_segment(clip_mask(std::move(raw), clip_threshold_mv));
    if (!seg) continue;
    seg->labels = labels_for(plan, seg->source_offset_s, cfg);
    out.push_back(std::move(*seg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset building

struct RecordSidecar {
  synth::RecordPlan plan;
  std::vector<synth::Event> events;
};

inline RecordSidecar read_sidecar(const std::filesystem::path& path) {
  RecordSidecar sc;
  bool have_record = false;
  for (const auto& j : io::read_jsonl(path)) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "record") {
      sc.plan = synth::plan_from_json(j.at("plan"));
      have_record = true;
    } else if (type == "event") {
      sc.events.push_back({j.at("time_s").get<double>(), synth::event_kind_from_string(j.at("kind").get<std::string>()),
                           j.value("duration_s", 0.0)});
    }
  }
  if (!have_record) throw FormatError(path.string() + ": sidecar has no record line");
  return sc;
}

inline void write_sidecar(const std::filesystem::path& path, const synth::RecordPlan& plan,
                          const synth::WaveformRecord& rec) {
  io::write_jsonl(path, synth::sidecar_lines(plan, rec));
}

struct DatasetError {
  std::string record;
  std::string message;
};

/// Streams records through block splitting, clipping and selection, writing
/// one segment file per usable hour and collecting manifest rows. Failures
/// are recorded per record and do not stop the stream.
class DatasetBuilder {
 public:
  explicit DatasetBuilder(std::filesystem::path out_dir, double clip_threshold_mv = kClipThresholdMv,
                          synth::CohortConfig cfg = {})
      : out_dir_(std::move(out_dir)), clip_(clip_threshold_mv), cfg_(std::move(cfg)) {
    std::filesystem::create_directories(out_dir_ / "segments");
  }

  void add(const synth::WaveformRecord& rec, const synth::RecordPlan& plan) {
    try {
      for (const Segment& seg : curate_record(rec, plan, clip_, cfg_)) {
        const std::string rel = "segments/" + seg.segment_id + ".ecgt";
        io::write_segment(out_dir_ / rel, seg);
        rows_.push_back({seg.patient_id, seg.segment_id, rel, seg.source_record_id, seg.source_offset_s,
                         seg.quality_score, seg.partial_block, seg.labels});
      }
    } catch (const std::exception& e) {
      errors_.push_back({rec.record_id, e.what()});
    }
  }

  void add_files(const std::filesystem::path& record_path, const std::filesystem::path& sidecar_path) {
    try {
      RecordSidecar sc = read_sidecar(sidecar_path);
      io::SignalFile f = io::read_signal(record_path);
      synth::WaveformRecord rec;
      rec.record_id = sc.plan.record_id;
      rec.patient_id = sc.plan.profile.patient_id;
      rec.samples = std::move(f.samples);
      rec.event_log = std::move(sc.events);
      add(rec, sc.plan);
    } catch (const std::exception& e) {
      errors_.push_back({record_path.string(), e.what()});
    }
  }

  /// Writes manifest.jsonl and returns its path.
  std::filesystem::path finish() const {
    const auto path = out_dir_ / "manifest.jsonl";
    io::write_manifest(path, rows_);
    return path;
  }

  const std::vector<io::ManifestRow>& rows() const { return rows_; }
  const std::vector<DatasetError>& errors() const { return errors_; }

 private:
  std::filesystem::path out_dir_;
  double clip_;
  synth::CohortConfig cfg_;
  std::vector<io::ManifestRow> rows_;
  std::vector<DatasetError> errors_;
};

}  // namespace pclr::curate
