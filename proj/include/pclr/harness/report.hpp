#pragma once

// Plot-ready CSV tables from grid results and pretraining metric logs.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "pclr/downstream.hpp"
#include "pclr/harness/formats.hpp"
#include "pclr/pretrain.hpp"

namespace pclr::report {

using downstream::GridRow;

inline double median(std::vector<double> v) {
  std::erase_if(v, [](double x) { return std::isnan(x); });
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace detail {

inline std::string num(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

struct Cell {
  std::vector<double> metric, loss;
  std::int64_t params = 0;
};

using CellKey = std::tuple<std::string, std::string, double, std::string>;  // task, mode, fraction, variant

inline std::map<CellKey, Cell> aggregate(const std::vector<GridRow>& rows) {
  std::map<CellKey, Cell> cells;
  for (const auto& r : rows) {
    Cell& c = cells[{r.task, r.mode, r.fraction, r.variant}];
    c.metric.push_back(r.selection_metric);
    c.loss.push_back(r.val_loss);
    c.params = r.backbone_params;
  }
  return cells;
}

inline std::string metric_name(const std::vector<GridRow>& rows, const std::string& task) {
  for (const auto& r : rows)
    if (r.task == task) return r.selection_metric_name;
  return "";
}

}  // namespace detail

/// Selection metric against backbone size, per task, mode and fraction
/// (medians over seeds).
inline std::string metric_vs_size_csv(const std::vector<GridRow>& rows) {
  std::ostringstream os;
  os << "task,mode,fraction,variant,backbone_params,metric_name,metric,val_loss,n_seeds\n";
  for (const auto& [k, c] : detail::aggregate(rows)) {
    const auto& [task, mode, fraction, variant] = k;
    os << task << ',' << mode << ',' << detail::num(fraction) << ',' << variant << ',' << c.params << ','
       << detail::metric_name(rows, task) << ',' << detail::num(median(c.metric)) << ','
       << detail::num(median(c.loss)) << ',' << c.metric.size() << '\n';
  }
  return os.str();
}

/// Percent improvement in validation loss over scratch, per fraction, for one
/// pretrained mode. The raw losses are included so the column can be checked.
inline std::string improvement_csv(const std::vector<GridRow>& rows, const std::string& mode) {
  const auto cells = detail::aggregate(rows);
  std::ostringstream os;
  os << "task,fraction,variant,backbone_params,mode,scratch_val_loss,pretrained_val_loss,percent_improvement\n";
  for (const auto& [k, c] : cells) {
    const auto& [task, m, fraction, variant] = k;
    if (m != mode) continue;
    auto s = cells.find({task, "from_scratch", fraction, variant});
    if (s == cells.end()) continue;
    const double sl = median(s->second.loss), pl = median(c.loss);
    os << task << ',' << detail::num(fraction) << ',' << variant << ',' << c.params << ',' << mode << ','
       << detail::num(sl) << ',' << detail::num(pl) << ',' << detail::num(downstream::percent_improvement(sl, pl))
       << '\n';
  }
  return os.str();
}

/// Linear probe against scratch for every (task, fraction, variant).
inline std::string linear_eval_csv(const std::vector<GridRow>& rows) {
  const auto cells = detail::aggregate(rows);
  std::ostringstream os;
  os << "task,fraction,variant,backbone_params,metric_name,probe_metric,scratch_metric,probe_val_loss,"
        "scratch_val_loss,percent_improvement\n";
  for (const auto& [k, c] : cells) {
    const auto& [task, m, fraction, variant] = k;
    if (m != "linear_probe") continue;
    auto s = cells.find({task, "from_scratch", fraction, variant});
    if (s == cells.end()) continue;
    const double sl = median(s->second.loss), pl = median(c.loss);
    os << task << ',' << detail::num(fraction) << ',' << variant << ',' << c.params << ','
       << detail::metric_name(rows, task) << ',' << detail::num(median(c.metric)) << ','
       << detail::num(median(s->second.metric)) << ',' << detail::num(pl) << ',' << detail::num(sl) << ','
       << detail::num(downstream::percent_improvement(sl, pl)) << '\n';
  }
  return os.str();
}

struct LossCurve {
  std::string run;
  std::optional<pretrain::EpochMetrics> initial;
  std::vector<pretrain::EpochMetrics> epochs;
};

/// Reads a pretraining output directory (summary.json and metrics.jsonl).
inline LossCurve read_loss_curve(const std::filesystem::path& dir) {
  LossCurve c;
  c.run = dir.filename().string();
  if (c.run.empty()) c.run = dir.parent_path().filename().string();
  const auto summary = dir / "summary.json";
  if (std::filesystem::exists(summary)) {
    const auto j = nlohmann::json::parse(io::detail::read_all(summary));
    if (j.contains("initial")) c.initial = pretrain::epoch_metrics_from_json(j.at("initial"));
  }
  for (const auto& row : io::read_jsonl(dir / "metrics.jsonl")) c.epochs.push_back(pretrain::epoch_metrics_from_json(row));
  return c;
}

inline std::string loss_curves_csv(const std::vector<LossCurve>& curves) {
  std::ostringstream os;
  os << "run,epoch,lr,train_infonce,val_infonce,val_ntxent,retrieval_score\n";
  auto line = [&](const std::string& run, const pretrain::EpochMetrics& m) {
    os << run << ',' << m.epoch << ',' << detail::num(m.lr) << ',' << detail::num(m.train_infonce) << ','
       << detail::num(m.val_infonce) << ',' << detail::num(m.val_ntxent) << ','
       << (m.retrieval_score ? detail::num(*m.retrieval_score) : "") << '\n';
  };
  for (const auto& c : curves) {
    if (c.initial) line(c.run, *c.initial);
    for (const auto& m : c.epochs) line(c.run, m);
  }
  return os.str();
}

struct ReportFiles {
  std::vector<std::filesystem::path> written;
  std::vector<std::string> warnings;
};

/// Writes every table into out_dir. Empty inputs give header-only files.
inline ReportFiles write_report(const std::filesystem::path& out_dir, const std::vector<GridRow>& rows,
                                const std::vector<LossCurve>& curves) {
  std::filesystem::create_directories(out_dir);
  ReportFiles f;
  if (rows.empty()) f.warnings.push_back("no grid results; grid tables are header-only");
  if (curves.empty()) f.warnings.push_back("no pretraining logs; loss_curves.csv is header-only");
  auto put = [&](const std::string& name, const std::string& text) {
    io::write_file(out_dir / name, text);
    f.written.push_back(out_dir / name);
  };
  put("metric_vs_size.csv", metric_vs_size_csv(rows));
  put("improvement_fine_tune.csv", improvement_csv(rows, "fine_tune"));
  put("improvement_linear_probe.csv", improvement_csv(rows, "linear_probe"));
  put("linear_eval.csv", linear_eval_csv(rows));
  put("loss_curves.csv", loss_curves_csv(curves));
  return f;
}

}  // namespace pclr::report
