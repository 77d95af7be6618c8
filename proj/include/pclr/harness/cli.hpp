#pragma once

// Command-line front end. Every subcommand reads the shared run config
// (file plus --set overrides plus its own flags), owns its output directory
// through a lock file and appends a reproducibility record there.

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pclr/annotate.hpp"
#include "pclr/curate.hpp"
#include "pclr/dataset.hpp"
#include "pclr/downstream.hpp"
#include "pclr/harness/config.hpp"
#include "pclr/harness/formats.hpp"
#include "pclr/harness/report.hpp"
#include "pclr/pretrain.hpp"
#include "pclr/synthgen.hpp"

#ifndef PCLR_VERSION
#define PCLR_VERSION "0.1.0"
#endif

namespace pclr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumerical = 4, kLocked = 5 };

class LockError : public Error {
 public:
  using Error::Error;
};

/// Exclusive ownership of an output directory for the lifetime of a run.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw LockError("output directory " + dir.string() + " is in use (remove " + path_.string() + " if stale)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

inline void write_run_record(const fs::path& dir, const std::string& command, const std::vector<std::string>& argv,
                             const config::RunConfig& cfg) {
  io::JsonlAppender(dir / "run_manifest.jsonl")
      .append({{"command", command},
               {"argv", argv},
               {"code_version", PCLR_VERSION},
               {"seed", cfg.seed},
               {"config", config::to_json(cfg)}});
}

namespace detail {

inline SegmentStore load_store(const fs::path& data) {
  const fs::path manifest = fs::is_directory(data) ? data / "manifest.jsonl" : data;
  if (!fs::exists(manifest)) throw DataError("no manifest at " + manifest.string());
  return SegmentStore::from_manifest(io::read_manifest(manifest));
}

inline pretrain::PatientSplit split_for(const SegmentStore& store, const config::RunConfig& cfg) {
  return pretrain::make_split(store.patient_ids(), cfg.pretrain.val_fraction, cfg.seed);
}

inline synth::RecordPlan plan_for(const config::RunConfig& cfg, int i) {
  auto p = synth::sample_profile(mix_seed(cfg.seed, static_cast<std::uint64_t>(i)), cfg.synth.cohort);
  p.patient_id = cfg.synth.id_prefix + std::to_string(i);
  auto plan = synth::make_plan(p, cfg.synth.hours * 3600.0, p.patient_id + "_r0");
  for (const auto& e : cfg.synth.afib_episodes) plan = synth::schedule_afib_episode(plan, e.onset_s, e.offset_s, e.reversions);
  for (const auto& d : cfg.synth.drifts)
    plan = synth::schedule_interval_drift(plan, d.field, d.start_value, d.end_value, cfg.synth.cohort);
  return plan;
}

inline synth::WaveformRecord load_record(const fs::path& record, const std::optional<fs::path>& sidecar) {
  io::SignalFile f = io::read_signal(record);
  synth::WaveformRecord rec;
  rec.samples = std::move(f.samples);
  rec.record_id = record.stem().stem().string();
  if (sidecar) {
    const auto sc = curate::read_sidecar(*sidecar);
    rec.record_id = sc.plan.record_id;
    rec.patient_id = sc.plan.profile.patient_id;
    rec.event_log = sc.events;
  }
  return rec;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');)
    if (!part.empty()) out.push_back(part);
  return out;
}

}  // namespace detail

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;

  config::RunConfig load() const {
    auto ov = overrides;
    if (seed) ov.push_back("seed=" + std::to_string(*seed));
    return config::load(config_file.empty() ? std::nullopt : std::optional<fs::path>(config_file), ov);
  }
};

inline void add_common(CLI::App* app, Common& c, bool needs_out = true) {
  app->add_option("--config", c.config_file, "JSON run config");
  app->add_option("--set", c.overrides, "Override a config value, e.g. --set pretrain.total_epochs=2");
  app->add_option("--seed", c.seed, "Global seed");
  auto* o = app->add_option("--out", c.out, "Output directory");
  if (needs_out) o->required();
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_synth(const config::RunConfig& cfg, const fs::path& out, const LogFn& log) {
  fs::create_directories(out / "records");
  for (int i = 0; i < cfg.synth.patients; ++i) {
    const auto plan = detail::plan_for(cfg, i);
    const auto rec = synth::render_telemetry(plan, mix_seed(cfg.seed, static_cast<std::uint64_t>(i), 1), {}, cfg.synth.cohort);
    io::write_signal(out / "records" / (plan.record_id + ".ecgt"), rec.samples);
    curate::write_sidecar(out / "records" / (plan.record_id + ".jsonl"), plan, rec);
    if (log) log("synth: " + plan.record_id + " (" + std::to_string(rec.length()) + " samples)");
  }
}

inline std::size_t cmd_curate(const config::RunConfig& cfg, const fs::path& in, const fs::path& out, const LogFn& log) {
  const fs::path dir = fs::exists(in / "records") ? in / "records" : in;
  std::vector<fs::path> records;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".ecgt") records.push_back(e.path());
  std::sort(records.begin(), records.end());
  if (records.empty()) throw DataError("no .ecgt records in " + dir.string());
  curate::DatasetBuilder db(out, cfg.curate.clip_threshold_mv, cfg.synth.cohort);
  for (const auto& r : records) {
    fs::path sidecar = r;
    sidecar.replace_extension(".jsonl");
    db.add_files(r, sidecar);
  }
  db.finish();
  for (const auto& e : db.errors())
    if (log) log("warning: record " + e.record + " skipped: " + e.message);
  if (log) log("curate: " + std::to_string(db.rows().size()) + " segments from " + std::to_string(records.size()) + " records");
  return db.rows().size();
}

inline void cmd_pretrain(const config::RunConfig& cfg, const fs::path& data, const fs::path& out, bool resume,
                         const LogFn& log) {
  const SegmentStore store = detail::load_store(data);
  const auto split = detail::split_for(store, cfg);
  pretrain::PretrainHooks hooks;
  hooks.log = log;
  hooks.resume = resume;
  io::write_file(out / "split.json",
                 json{{"train", split.train_patient_ids}, {"val", split.val_patient_ids}}.dump(1) + "\n");
  const auto res = pretrain::pretrain_loop(store, split, cfg.pretrain.run, out, hooks);
  if (log) log("pretrain: best epoch " + std::to_string(res.best_epoch) + ", checkpoint " + res.best_checkpoint.string());
}

struct TrainArgs {
  std::string data, checkpoint;
  bool from_scratch = false;
};

inline void cmd_train(const config::RunConfig& cfg, const TrainArgs& a, downstream::TrainMode final_mode, const fs::path& out,
                      const LogFn& log) {
  using namespace downstream;
  const SegmentStore store = detail::load_store(a.data);
  const auto split = detail::split_for(store, cfg);
  RunSpec r;
  r.task = cfg.downstream.task;
  r.fraction = cfg.downstream.fraction;
  r.seed = cfg.seed;
  r.hyper = cfg.downstream.hyper.at(r.task);
  TaskSpec task;
  auto [train, val] = run_examples(store, split.train_patient_ids, split.val_patient_ids, r, task);
  io::JsonlAppender metrics(out / "metrics.jsonl");
  auto dump = [&](const char* mode, const TrainResult& tr) {
    for (const auto& e : tr.epochs) {
      json j = to_json(e);
      j["mode"] = mode;
      metrics.append(j);
    }
  };
  TaskModel model;
  json summary = {{"task", to_string(r.task)}, {"fraction", r.fraction}, {"seed", r.seed},
                  {"n_train", train.size()}, {"n_val", val.size()}};
  if (a.from_scratch) {
    const EncoderSpec spec = EncoderSpec::named(cfg.pretrain.encoder);
    model = TaskModel(Encoder<float>(spec, mix_seed(r.seed, 0x5c)), task, mix_seed(r.seed, 0x5d));
    const auto tr = train_head(model, store, train, val, TrainMode::from_scratch, r.hyper.scratch, mix_seed(r.seed, 1), log);
    dump("from_scratch", tr);
    summary["from_scratch"] = {{"best_epoch", tr.best_epoch}, {"best_metric", tr.best_metric}, {"best_val_loss", tr.best_val_loss}};
  } else {
    if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required unless --from-scratch");
    const ckpt::Archive head = ckpt::Archive::load(a.checkpoint);
    const bool is_task_model = head.meta.value("kind", std::string{}) == "task_model";
    if (is_task_model) {
      model = load_task_model(a.checkpoint);
      if (model.task().kind != r.task) throw ConfigError("checkpoint is a " + std::string(to_string(model.task().kind)) + " model");
      if (final_mode == TrainMode::linear_probe) throw ConfigError("probe needs a pretraining checkpoint, not a task model");
    } else {
      model = TaskModel(ckpt::load_encoder(a.checkpoint), task, mix_seed(r.seed, 0x9d));
      const auto tr = train_head(model, store, train, val, TrainMode::linear_probe, r.hyper.probe, mix_seed(r.seed, 2), log);
      dump("linear_probe", tr);
      summary["linear_probe"] = {{"best_epoch", tr.best_epoch}, {"best_metric", tr.best_metric}, {"best_val_loss", tr.best_val_loss}};
    }
    if (final_mode == TrainMode::fine_tune) {
      const auto tr = train_head(model, store, train, val, TrainMode::fine_tune, r.hyper.finetune, mix_seed(r.seed, 3), log);
      dump("fine_tune", tr);
      summary["fine_tune"] = {{"best_epoch", tr.best_epoch}, {"best_metric", tr.best_metric}, {"best_val_loss", tr.best_val_loss}};
    }
  }
  save_task_model(out / "model.ckpt", model, summary);
  io::write_file(out / "summary.json", summary.dump(1) + "\n");
  if (log) log("model written to " + (out / "model.ckpt").string());
}

inline void cmd_grid(const config::RunConfig& cfg, const std::string& data, const std::vector<std::string>& variants,
                     const fs::path& out, const LogFn& log) {
  using namespace downstream;
  const SegmentStore store = detail::load_store(data);
  const auto split = detail::split_for(store, cfg);
  GridSpec g;
  for (const auto& v : variants) {
    const auto eq = v.find('=');
    if (eq == std::string::npos) throw ConfigError("variant '" + v + "' is not name=checkpoint");
    g.variants.emplace_back(v.substr(0, eq), v.substr(eq + 1));
  }
  if (g.variants.empty()) throw ConfigError("grid needs at least one --variant name=checkpoint");
  g.tasks = cfg.downstream.tasks;
  g.fractions = cfg.downstream.fractions;
  g.seeds = cfg.downstream.seeds;
  g.hyper = cfg.downstream.hyper;
  io::JsonlAppender results(out / "results.jsonl");
  const auto rows = run_experiment_grid(store, split.train_patient_ids, split.val_patient_ids, g, log,
                                        [&](const GridRow& r) { results.append(to_json(r)); });
  if (log) log("grid: " + std::to_string(rows.size()) + " rows");
}

inline void cmd_annotate(const config::RunConfig& cfg, const std::string& model_path, const std::string& record,
                         const std::string& sidecar, const fs::path& out, const LogFn& log) {
  auto model = downstream::load_task_model(model_path);
  const auto rec = detail::load_record(record, sidecar.empty() ? std::nullopt : std::optional<fs::path>(sidecar));
  const auto track = annotate::annotate(rec, model, model.task().kind, cfg.annotate.stride, cfg.annotate.smoothing);
  if (track.size() == 0) {
    if (log) log("warning: record shorter than one window; empty track");
  }
  annotate::write_track_csv(out / "track.csv", track);
  json side = annotate::track_sidecar(track, fs::path(model_path).filename().string());
  if (model.task().classification() && track.size() > 0)
    side["episodes"] = annotate::episodes_json(annotate::detect_transitions(track, cfg.annotate.threshold, cfg.annotate.min_run));
  side["threshold"] = cfg.annotate.threshold;
  side["min_run"] = cfg.annotate.min_run;
  io::write_file(out / "track.json", side.dump(1) + "\n");
  if (log) log("annotate: " + std::to_string(track.size()) + " windows");
}

inline void cmd_report(const std::vector<std::string>& results, const std::vector<std::string>& logs, const fs::path& out,
                       const LogFn& log) {
  std::vector<downstream::GridRow> rows;
  for (const auto& r : results)
    for (const auto& j : io::read_jsonl(r)) rows.push_back(downstream::grid_row_from_json(j));
  std::vector<report::LossCurve> curves;
  for (const auto& l : logs) curves.push_back(report::read_loss_curve(l));
  const auto f = report::write_report(out, rows, curves);
  for (const auto& w : f.warnings)
    if (log) log("warning: " + w);
}

inline std::size_t cmd_export(const config::RunConfig& cfg, const std::string& checkpoint, const std::string& data,
                              std::size_t n, const fs::path& out_csv, const LogFn& log) {
  auto enc = ckpt::load_encoder(checkpoint);
  const SegmentStore store = detail::load_store(data);
  const auto split = detail::split_for(store, cfg);
  std::vector<std::size_t> idx;
  for (const auto& p : split.val_patient_ids)
    for (std::size_t i : store.of_patient(p)) idx.push_back(i);
  if (n > idx.size()) {
    if (log) log("warning: requested " + std::to_string(n) + " segments, exporting all " + std::to_string(idx.size()));
    n = idx.size();
  }
  Rng rng(mix_seed(cfg.seed, 0xe4b));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  std::vector<Signal> windows;
  for (std::size_t i : idx) windows.push_back(center_crop(store[i].samples));
  const Mat<float> e = embed_windows<float>(enc, windows);
  std::ostringstream os;
  os.precision(9);
  os << "patient_id,segment_id";
  for (Eigen::Index d = 0; d < e.rows(); ++d) os << ",e" << d;
  os << '\n';
  for (std::size_t k = 0; k < idx.size(); ++k) {
    os << store[idx[k]].patient_id << ',' << store[idx[k]].segment_id;
    for (Eigen::Index d = 0; d < e.rows(); ++d) os << ',' << e(d, static_cast<Eigen::Index>(k));
    os << '\n';
  }
  io::write_file(out_csv, os.str());
  return n;
}

// ---------------------------------------------------------------------------
// Dispatch

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const LockError*>(&e)) return kLocked;
  if (dynamic_cast<const ConfigError*>(&e)) return kConfig;
  if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kData;
  if (dynamic_cast<const nlohmann::json::exception*>(&e)) return kData;
  return kOther;
}

inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Patient contrastive pretraining for ECG telemetry (synthetic cohorts)", "pclr"};
  app.require_subcommand(1);
  app.set_version_flag("--version", PCLR_VERSION);
  LogFn log = [&err](const std::string& m) { err << m << std::endl; };

  Common c;
  std::string in, data, checkpoint, model, record, sidecar;
  std::vector<std::string> variants, results, logs;
  int patients = 0;
  double hours = 0;
  int epochs = 0;
  bool resume = false, from_scratch = false;
  std::string task;
  double fraction = 0;
  std::size_t n = 200;

  auto* synth = app.add_subcommand("synth", "Generate synthetic telemetry records");
  add_common(synth, c);
  synth->add_option("--patients", patients, "Number of patients");
  synth->add_option("--hours", hours, "Hours per record");

  auto* curate = app.add_subcommand("curate", "Select one clean segment per hour and write a manifest");
  add_common(curate, c);
  curate->add_option("--in", in, "Directory of records from synth")->required();

  auto* pre = app.add_subcommand("pretrain", "Patient-contrastive pretraining");
  add_common(pre, c);
  pre->add_option("--data", data, "Curated dataset directory or manifest")->required();
  pre->add_option("--epochs", epochs, "Total epochs");
  pre->add_flag("--resume", resume, "Resume from last.ckpt in --out");

  auto* probe = app.add_subcommand("probe", "Train a linear head on a frozen pretrained encoder");
  auto* ft = app.add_subcommand("finetune", "Probe then fine-tune all parameters (or train from scratch)");
  for (auto* s : {probe, ft}) {
    add_common(s, c);
    s->add_option("--data", data, "Curated dataset directory or manifest")->required();
    s->add_option("--checkpoint", checkpoint, "Pretraining checkpoint (or a probe model for finetune)");
    s->add_option("--task", task, "age | sex | intervals | afib");
    s->add_option("--fraction", fraction, "Label fraction");
  }
  ft->add_flag("--from-scratch", from_scratch, "Train a fresh encoder instead");

  auto* grid = app.add_subcommand("grid", "Scratch / probe / fine-tune grid over tasks and label fractions");
  add_common(grid, c);
  grid->add_option("--data", data, "Curated dataset directory or manifest")->required();
  grid->add_option("--variant", variants, "name=checkpoint (repeatable)")->required();

  auto* ann = app.add_subcommand("annotate", "Sliding-window annotation of a long record");
  add_common(ann, c);
  ann->add_option("--model", model, "Task model checkpoint")->required();
  ann->add_option("--record", record, "Record .ecgt file")->required();
  ann->add_option("--sidecar", sidecar, "Record sidecar (.jsonl)");

  auto* rep = app.add_subcommand("report", "Plot-ready CSV tables");
  add_common(rep, c);
  rep->add_option("--results", results, "Grid results.jsonl (repeatable)");
  rep->add_option("--logs", logs, "Pretraining output directory (repeatable)");

  auto* exp = app.add_subcommand("export-embeddings", "Backbone embeddings of validation segments as CSV");
  add_common(exp, c);
  exp->add_option("--checkpoint", checkpoint, "Encoder or pretraining checkpoint")->required();
  exp->add_option("--data", data, "Curated dataset directory or manifest")->required();
  exp->add_option("--n", n, "Number of segments");

  std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << PCLR_VERSION << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kConfig;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    auto ov = c.overrides;
    if (patients > 0) ov.push_back("synth.patients=" + std::to_string(patients));
    if (hours > 0) ov.push_back("synth.hours=" + std::to_string(hours));
    if (epochs > 0) ov.push_back("pretrain.total_epochs=" + std::to_string(epochs));
    if (!task.empty()) ov.push_back("downstream.task=\"" + task + "\"");
    if (fraction > 0) ov.push_back("downstream.fraction=" + std::to_string(fraction));
    Common resolved = c;
    resolved.overrides = ov;
    const config::RunConfig cfg = resolved.load();

    const fs::path outdir = name == "export-embeddings" ? fs::path(c.out).parent_path() : fs::path(c.out);
    DirLock lock(outdir.empty() ? fs::path(".") : outdir);
    write_run_record(outdir.empty() ? fs::path(".") : outdir, name, args, cfg);

    if (name == "synth") cmd_synth(cfg, c.out, log);
    else if (name == "curate") cmd_curate(cfg, in, c.out, log);
    else if (name == "pretrain") cmd_pretrain(cfg, data, c.out, resume, log);
    else if (name == "probe") cmd_train(cfg, {data, checkpoint, false}, downstream::TrainMode::linear_probe, c.out, log);
    else if (name == "finetune") cmd_train(cfg, {data, checkpoint, from_scratch}, downstream::TrainMode::fine_tune, c.out, log);
    else if (name == "grid") cmd_grid(cfg, data, variants, c.out, log);
    else if (name == "annotate") cmd_annotate(cfg, model, record, sidecar, c.out, log);
    else if (name == "report") cmd_report(results, logs, c.out, log);
    else if (name == "export-embeddings") cmd_export(cfg, checkpoint, data, n, c.out, log);
    return kOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

inline int dispatch(int argc, char** argv) {
  return dispatch(std::vector<std::string>(argv, argv + argc));
}

}  // namespace pclr::cli
