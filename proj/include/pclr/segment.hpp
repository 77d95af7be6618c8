#pragma once

#include <cmath>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "pclr/common.hpp"
#include "pclr/encoder.hpp"

namespace pclr {

inline constexpr double kClipThresholdMv = 60.0;

/// Task labels carried by a curated segment. Absent fields are unknown (e.g.
/// PR is undefined during Afib).
struct SegmentLabels {
  std::optional<double> age_years;
  std::optional<double> sex;  // 1 = male
  std::optional<double> pr_ms;
  std::optional<double> qrs_ms;
  std::optional<double> qt_ms;
  std::optional<double> ventricular_rate_bpm;
  std::optional<double> afib;  // 0/1
};

/// A curated 60 s, 4-lead excerpt.
struct Segment {
  std::string patient_id;
  std::string segment_id;
  Signal samples;  // 4 x 7200
  std::string source_record_id;
  double source_offset_s = 0;
  double quality_score = 0;
  bool partial_block = false;
  SegmentLabels labels;

  void validate() const {
    if (samples.rows() != kNumLeads || samples.cols() != kSegmentSamples)
      throw DomainError("segment must be 4 x 7200 samples");
    if (!samples.allFinite()) throw DomainError("segment contains non-finite samples");
    if (samples.cwiseAbs().maxCoeff() > kClipThresholdMv) throw DomainError("segment exceeds 60 mV");
    if (!(quality_score >= 0)) throw DomainError("quality score must be >= 0");
  }
};

inline nlohmann::json to_json(const SegmentLabels& l) {
  nlohmann::json j = nlohmann::json::object();
  auto put = [&](const char* k, const std::optional<double>& v) {
    if (v) j[k] = *v;
  };
  put("age_years", l.age_years);
  put("sex", l.sex);
  put("pr_ms", l.pr_ms);
  put("qrs_ms", l.qrs_ms);
  put("qt_ms", l.qt_ms);
  put("ventricular_rate_bpm", l.ventricular_rate_bpm);
  put("afib", l.afib);
  return j;
}

inline SegmentLabels labels_from_json(const nlohmann::json& j) {
  SegmentLabels l;
  auto get = [&](const char* k, std::optional<double>& v) {
    if (j.contains(k) && !j.at(k).is_null()) v = j.at(k).get<double>();
  };
  get("age_years", l.age_years);
  get("sex", l.sex);
  get("pr_ms", l.pr_ms);
  get("qrs_ms", l.qrs_ms);
  get("qt_ms", l.qt_ms);
  get("ventricular_rate_bpm", l.ventricular_rate_bpm);
  get("afib", l.afib);
  return l;
}

}  // namespace pclr
