#pragma once

// Run configuration: one JSON document with a section per command. Every
// table default is present; unknown keys are rejected. Overrides are
// dotted-path assignments applied to the document before it is read.

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pclr/downstream.hpp"
#include "pclr/pretrain.hpp"
#include "pclr/synthgen.hpp"

namespace pclr::config {

using nlohmann::json;

struct SynthSection {
  int patients = 20;
  double hours = 3;
  std::string id_prefix = "p";
  synth::CohortConfig cohort;
  /// Applied to every record: [onset_s, offset_s, [[reversion_on, reversion_off], ...]].
  std::vector<synth::AfibEpisode> afib_episodes;
  std::vector<synth::IntervalDrift> drifts;
};

struct CurateSection {
  double clip_threshold_mv = kClipThresholdMv;
};

struct PretrainSection {
  std::string encoder = "resnet18";
  pretrain::PretrainConfig run;  // run.encoder is derived from `encoder`
  double val_fraction = 0.1;
};

struct DownstreamSection {
  downstream::TaskKind task = downstream::TaskKind::intervals;
  double fraction = 1.0;
  std::vector<downstream::TaskKind> tasks{downstream::TaskKind::age, downstream::TaskKind::sex,
                                          downstream::TaskKind::intervals, downstream::TaskKind::afib};
  std::vector<double> fractions{1.0, 0.1, 0.01};
  std::vector<std::uint64_t> seeds{0};
  std::map<downstream::TaskKind, downstream::Hyper3> hyper;

  DownstreamSection() {
    for (auto k : tasks) hyper[k] = downstream::Hyper3::table5_for(k);
  }
};

struct AnnotateSection {
  int stride = kWindowSamples;
  int smoothing = 1;
  double threshold = 0.5;
  int min_run = 3;
};

struct PathsSection {
  std::string data_dir;
  std::string out_dir;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  PathsSection paths;
  SynthSection synth;
  CurateSection curate;
  PretrainSection pretrain;
  DownstreamSection downstream;
  AnnotateSection annotate;
};

// ---------------------------------------------------------------------------
// Serialization

inline json to_json(const synth::CohortConfig& c) {
  auto range = [](const synth::Range& r) { return json::array({r.lo, r.hi}); };
  json noise = json::object();
  for (const auto& [k, r] : c.noise) noise[synth::to_string(k)] = range(r);
  return {{"age_years", range(c.age_years)},
          {"male_fraction", c.male_fraction},
          {"heart_rate_bpm", range(c.heart_rate_bpm)},
          {"pr_ms", range(c.pr_ms)},
          {"qrs_ms", range(c.qrs_ms)},
          {"qt_ms", range(c.qt_ms)},
          {"qt_age_slope_ms_per_year", c.qt_age_slope_ms_per_year},
          {"qt_spread_ms", c.qt_spread_ms},
          {"hrv_std_ms", range(c.hrv_std_ms)},
          {"afib_prevalence", c.afib_prevalence},
          {"afib_jitter_factor", c.afib_jitter_factor},
          {"afib_min_rr_std_ms", c.afib_min_rr_std_ms},
          {"afib_rate_factor", c.afib_rate_factor},
          {"amplitude_spread", c.amplitude_spread},
          {"noise", noise}};
}

inline json to_json(const RunConfig& c) {
  json episodes = json::array();
  for (const auto& e : c.synth.afib_episodes) {
    json rev = json::array();
    for (const auto& [a, b] : e.reversions) rev.push_back({a, b});
    episodes.push_back({e.onset_s, e.offset_s, rev});
  }
  json drifts = json::array();
  for (const auto& d : c.synth.drifts)
    drifts.push_back({{"field", synth::to_string(d.field)}, {"start_value", d.start_value}, {"end_value", d.end_value}});
  const auto& p = c.pretrain.run;
  json hyper = json::object();
  for (const auto& [k, h] : c.downstream.hyper)
    hyper[downstream::to_string(k)] = {{"from_scratch", downstream::to_json(h.scratch)},
                                      {"linear_probe", downstream::to_json(h.probe)},
                                      {"fine_tune", downstream::to_json(h.finetune)}};
  json tasks = json::array();
  for (auto k : c.downstream.tasks) tasks.push_back(downstream::to_string(k));
  return {
      {"seed", c.seed},
      {"threads", c.threads},
      {"paths", {{"data_dir", c.paths.data_dir}, {"out_dir", c.paths.out_dir}}},
      {"synth",
       {{"patients", c.synth.patients},
        {"hours", c.synth.hours},
        {"id_prefix", c.synth.id_prefix},
        {"cohort", to_json(c.synth.cohort)},
        {"afib_episodes", episodes},
        {"drifts", drifts}}},
      {"curate", {{"clip_threshold_mv", c.curate.clip_threshold_mv}}},
      {"pretrain",
       {{"encoder", c.pretrain.encoder},
        {"queue_size", p.queue_size},
        {"temperature", p.temperature},
        {"momentum", p.momentum},
        {"batch", p.schedule.batch},
        {"initial_lr", p.schedule.initial_lr},
        {"final_lr", p.schedule.final_lr},
        {"warmup_epochs", p.schedule.warmup_epochs},
        {"total_epochs", p.schedule.total_epochs},
        {"weight_decay", p.schedule.weight_decay},
        {"val_batch", p.val_batch},
        {"val_fraction", c.pretrain.val_fraction},
        {"key_batch_stats", p.key_batch_stats},
        {"symmetric_loss", p.symmetric_loss},
        {"retrieval_patients", p.retrieval_patients},
        {"retrieval_segments", p.retrieval_segments}}},
      {"downstream",
       {{"task", downstream::to_string(c.downstream.task)},
        {"fraction", c.downstream.fraction},
        {"tasks", tasks},
        {"fractions", c.downstream.fractions},
        {"seeds", c.downstream.seeds},
        {"hyper", hyper}}},
      {"annotate",
       {{"stride", c.annotate.stride},
        {"smoothing", c.annotate.smoothing},
        {"threshold", c.annotate.threshold},
        {"min_run", c.annotate.min_run}}},
  };
}

namespace detail {

/// Reads keys from one JSON object and rejects any it did not consume.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  void range(const std::string& key, synth::Range& out) {
    std::vector<double> v{out.lo, out.hi};
    get(key, v);
    if (v.size() != 2) throw ConfigError(where(key) + " must be [lo, hi]");
    out = {v[0], v[1]};
  }

  /// Nested object, if present.
  template <typename F>
  void section(const std::string& key, F&& f) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    Reader r(j_.at(key), where(key));
    f(r);
    r.finish();
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string where(const std::string& key = {}) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + where(k) + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_hyper(Reader& r, downstream::HeadHyper& h) {
  r.get("batch", h.batch);
  r.get("epochs", h.epochs);
  r.get("lr", h.lr);
  r.get("milestone", h.milestone);
  r.get("warmup", h.warmup);
  r.get("accumulate", h.accumulate);
  r.get("lr_scale", h.lr_scale);
  h.validate();
}

inline downstream::TaskKind read_task(const std::string& where, const std::string& s) {
  try {
    return downstream::task_from_string(s);
  } catch (const ConfigError&) {
    throw ConfigError(where + ": unknown task '" + s + "'");
  }
}

}  // namespace detail

inline RunConfig from_json(const json& j) {
  RunConfig c;
  detail::Reader r(j, "");
  r.get("seed", c.seed);
  r.get("threads", c.threads);
  r.section("paths", [&](detail::Reader& s) {
    s.get("data_dir", c.paths.data_dir);
    s.get("out_dir", c.paths.out_dir);
  });
  r.section("synth", [&](detail::Reader& s) {
    s.get("patients", c.synth.patients);
    s.get("hours", c.synth.hours);
    s.get("id_prefix", c.synth.id_prefix);
    s.section("cohort", [&](detail::Reader& k) {
      auto& cc = c.synth.cohort;
      k.range("age_years", cc.age_years);
      k.get("male_fraction", cc.male_fraction);
      k.range("heart_rate_bpm", cc.heart_rate_bpm);
      k.range("pr_ms", cc.pr_ms);
      k.range("qrs_ms", cc.qrs_ms);
      k.range("qt_ms", cc.qt_ms);
      k.get("qt_age_slope_ms_per_year", cc.qt_age_slope_ms_per_year);
      k.get("qt_spread_ms", cc.qt_spread_ms);
      k.range("hrv_std_ms", cc.hrv_std_ms);
      k.get("afib_prevalence", cc.afib_prevalence);
      k.get("afib_jitter_factor", cc.afib_jitter_factor);
      k.get("afib_min_rr_std_ms", cc.afib_min_rr_std_ms);
      k.get("afib_rate_factor", cc.afib_rate_factor);
      k.get("amplitude_spread", cc.amplitude_spread);
      k.section("noise", [&](detail::Reader& n) {
        for (synth::NoiseKind nk : synth::kNoiseKinds) n.range(synth::to_string(nk), cc.noise[nk]);
      });
    });
    if (s.has("afib_episodes")) {
      c.synth.afib_episodes.clear();
      for (const auto& e : s.raw("afib_episodes")) {
        if (!e.is_array() || e.size() < 2 || e.size() > 3)
          throw ConfigError("synth.afib_episodes entries are [onset_s, offset_s, reversions?]");
        synth::AfibEpisode ep{e[0].get<double>(), e[1].get<double>(), {}};
        if (e.size() == 3)
          for (const auto& rv : e[2]) ep.reversions.emplace_back(rv.at(0).get<double>(), rv.at(1).get<double>());
        c.synth.afib_episodes.push_back(ep);
      }
    }
    if (s.has("drifts")) {
      c.synth.drifts.clear();
      for (const auto& d : s.raw("drifts")) {
        detail::Reader dr(d, "synth.drifts[]");
        std::string field = "qt_ms";
        synth::IntervalDrift drift;
        dr.get("field", field);
        dr.get("start_value", drift.start_value);
        dr.get("end_value", drift.end_value);
        dr.finish();
        drift.field = synth::drift_field_from_string(field);
        c.synth.drifts.push_back(drift);
      }
    }
  });
  r.section("curate", [&](detail::Reader& s) { s.get("clip_threshold_mv", c.curate.clip_threshold_mv); });
  r.section("pretrain", [&](detail::Reader& s) {
    auto& p = c.pretrain.run;
    s.get("encoder", c.pretrain.encoder);
    s.get("queue_size", p.queue_size);
    s.get("temperature", p.temperature);
    s.get("momentum", p.momentum);
    s.get("batch", p.schedule.batch);
    s.get("initial_lr", p.schedule.initial_lr);
    s.get("final_lr", p.schedule.final_lr);
    s.get("warmup_epochs", p.schedule.warmup_epochs);
    s.get("total_epochs", p.schedule.total_epochs);
    s.get("weight_decay", p.schedule.weight_decay);
    s.get("val_batch", p.val_batch);
    s.get("val_fraction", c.pretrain.val_fraction);
    s.get("key_batch_stats", p.key_batch_stats);
    s.get("symmetric_loss", p.symmetric_loss);
    s.get("retrieval_patients", p.retrieval_patients);
    s.get("retrieval_segments", p.retrieval_segments);
  });
  r.section("downstream", [&](detail::Reader& s) {
    auto& d = c.downstream;
    std::string task = downstream::to_string(d.task);
    s.get("task", task);
    d.task = detail::read_task(s.where("task"), task);
    s.get("fraction", d.fraction);
    if (s.has("tasks")) {
      d.tasks.clear();
      for (const auto& t : s.raw("tasks")) d.tasks.push_back(detail::read_task(s.where("tasks"), t.get<std::string>()));
    }
    s.get("fractions", d.fractions);
    s.get("seeds", d.seeds);
    s.section("hyper", [&](detail::Reader& h) {
      for (auto k : {downstream::TaskKind::age, downstream::TaskKind::sex, downstream::TaskKind::intervals,
                     downstream::TaskKind::afib}) {
        h.section(downstream::to_string(k), [&](detail::Reader& t) {
          auto& hh = d.hyper[k];
          t.section("from_scratch", [&](detail::Reader& m) { detail::read_hyper(m, hh.scratch); });
          t.section("linear_probe", [&](detail::Reader& m) { detail::read_hyper(m, hh.probe); });
          t.section("fine_tune", [&](detail::Reader& m) { detail::read_hyper(m, hh.finetune); });
        });
      }
    });
  });
  r.section("annotate", [&](detail::Reader& s) {
    s.get("stride", c.annotate.stride);
    s.get("smoothing", c.annotate.smoothing);
    s.get("threshold", c.annotate.threshold);
    s.get("min_run", c.annotate.min_run);
  });
  r.finish();

  c.pretrain.run.encoder = EncoderSpec::named(c.pretrain.encoder);
  c.pretrain.run.seed = c.seed;
  c.synth.cohort.validate();
  c.pretrain.run.validate();
  if (c.synth.patients <= 0 || !(c.synth.hours > 0)) throw ConfigError("synth.patients and synth.hours must be positive");
  if (!(c.pretrain.val_fraction > 0 && c.pretrain.val_fraction < 1)) throw ConfigError("pretrain.val_fraction must be in (0, 1)");
  if (c.annotate.stride <= 0 || c.annotate.smoothing < 1 || c.annotate.min_run < 1)
    throw ConfigError("annotate.stride, smoothing and min_run must be positive");
  if (c.threads <= 0) throw ConfigError("threads must be positive");
  return c;
}

/// Applies "a.b.c=value". The value is parsed as JSON when possible and
/// taken as a string otherwise.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Config file (optional) plus overrides, later overrides winning.
inline RunConfig load(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides = {}) {
  json doc = file ? read_json_file(*file) : json::object();
  for (const auto& o : overrides) apply_override(doc, o);
  return from_json(doc);
}

}  // namespace pclr::config
