#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "evimix/data.hpp"
#include "evimix/errors.hpp"
#include "evimix/networks.hpp"
#include "evimix/pipeline.hpp"

namespace evimix::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

inline int exit_code_for(const std::string& kind) {
  if (kind == "ConfigError") return kConfig;
  if (kind == "LoadError" || kind == "SplitError") return kData;
  if (kind == "TrainingError" || kind == "NumericError" || kind == "TotalConflictError") return kNumeric;
  return kOther;
}

/// Records every file and directory an invocation creates so a failed run
/// can be rolled back.
class OutputTracker {
 public:
  fs::path dir(const fs::path& p) {
    std::vector<fs::path> missing;
    for (fs::path q = p; !q.empty() && !fs::exists(q); q = q.parent_path()) {
      missing.push_back(q);
      if (q == q.parent_path()) break;
    }
    fs::create_directories(p);
    dirs_.insert(dirs_.end(), missing.rbegin(), missing.rend());
    return p;
  }

  fs::path file(const fs::path& p) {
    if (!p.parent_path().empty()) dir(p.parent_path());
    files_.push_back(p);
    return p;
  }

  void write(const fs::path& p, const std::string& text) {
    std::ofstream os(file(p), std::ios::binary | std::ios::trunc);
    os << text;
    if (!os) throw LoadError("cannot write " + p.string());
  }

  void track(const std::vector<fs::path>& files) { files_.insert(files_.end(), files.begin(), files.end()); }

  /// Removes tracked files, then tracked directories that ended up empty.
  void rollback() noexcept {
    std::error_code ec;
    for (const auto& f : files_) fs::remove(f, ec);
    for (auto d = dirs_.rbegin(); d != dirs_.rend(); ++d)  // innermost first
      if (fs::is_directory(*d, ec) && fs::is_empty(*d, ec)) fs::remove(*d, ec);
    files_.clear();
    dirs_.clear();
  }

 private:
  std::vector<fs::path> files_;
  std::vector<fs::path> dirs_;
};

/// Kebab-case flags mirroring ExperimentConfig; set flags override the
/// config file.
struct ConfigFlags {
  std::string config_path;
  std::string data;
  std::string method;
  double gamma1 = 0, gamma2 = 0, learning_rate = 0, mu = 0, epsilon = 0, step_size = 0, train_fraction = 0;
  std::size_t pretrain_epochs = 0, train_epochs = 0, batch_size = 0, anneal_epochs = 0, steps = 0,
              views_to_attack = 0, runs = 0, histogram_bins = 0;
  std::uint64_t attack_seed = 0, split_seed = 0;
  std::string loss_target;
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> attacked_views;
  std::vector<std::string> ablation;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    auto add = [&](const std::string& name, auto& target, const std::string& help) {
      options[name] = app->add_option("--" + name, target, help);
    };
    add("config", config_path, "JSON config file; flags given on the command line take precedence");
    add("data", data, "dataset manifest path");
    add("method", method, "method label used in reports");
    add("gamma1", gamma1, "weight of the disentanglement loss");
    add("gamma2", gamma2, "weight of the recalibration loss");
    add("learning-rate", learning_rate, "Adam learning rate");
    add("pretrain-epochs", pretrain_epochs, "pretraining epochs");
    add("train-epochs", train_epochs, "training epochs (default 400 under attack, 500 clean)");
    add("batch-size", batch_size, "minibatch size");
    add("anneal-epochs", anneal_epochs, "epochs until the KL weight reaches 1");
    add("mu", mu, "Gumbel softmax temperature");
    add("epsilon", epsilon, "L-infinity attack radius");
    add("steps", steps, "PGD iterations");
    add("step-size", step_size, "PGD step size (default epsilon/4)");
    add("views-to-attack", views_to_attack, "views attacked per instance during training");
    add("loss-target", loss_target, "training attack target: pretrained_extractor or full_model");
    add("attack-seed", attack_seed, "attack seed");
    add("runs", runs, "number of seeded runs");
    options["seeds"] = app->add_option("--seeds", seeds, "run seeds")->delimiter(',');
    add("train-fraction", train_fraction, "fraction of each class used for training");
    add("split-seed", split_seed, "train/test split seed");
    options["attacked-views"] =
        app->add_option("--attacked-views", attacked_views, "attacked view counts evaluated")->delimiter(',');
    add("histogram-bins", histogram_bins, "uncertainty histogram bins");
    options["ablation"] =
        app->add_option("--ablation", ablation, "components to disable, e.g. L_EDL,attention")->delimiter(',');
  }

  bool given(const std::string& name) const {
    auto it = options.find(name);
    return it != options.end() && it->second->count() > 0;
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c;
    if (!config_path.empty()) {
      std::ifstream is(config_path);
      if (!is) throw ConfigError("cannot open config " + config_path);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(is);
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + config_path + ": " + e.what());
      }
      c = ExperimentConfig::from_json(j);
    }
    if (given("data")) c.data = data;
    if (given("method")) c.method = method;
    if (given("gamma1")) c.gamma1 = gamma1;
    if (given("gamma2")) c.gamma2 = gamma2;
    if (given("learning-rate")) c.learning_rate = learning_rate;
    if (given("pretrain-epochs")) c.pretrain_epochs = pretrain_epochs;
    if (given("train-epochs")) c.train_epochs = train_epochs;
    if (given("batch-size")) c.batch_size = batch_size;
    if (given("anneal-epochs")) c.anneal_epochs = anneal_epochs;
    if (given("mu")) c.mu = mu;
    if (given("epsilon")) c.attack.epsilon = epsilon;
    if (given("steps")) c.attack.steps = steps;
    if (given("step-size")) c.attack.step_size = step_size;
    if (given("views-to-attack")) c.attack.views_to_attack = views_to_attack;
    if (given("loss-target")) c.attack.loss_target = loss_target_from_string(loss_target);
    if (given("attack-seed")) c.attack.seed = attack_seed;
    if (given("runs")) {
      c.runs = runs;
      if (!given("seeds") && c.seeds.size() != runs) c.seeds.clear();
    }
    if (given("seeds")) {
      c.seeds = seeds;
      if (!given("runs")) c.runs = seeds.size();
    }
    if (given("train-fraction")) c.train_fraction = train_fraction;
    if (given("split-seed")) c.split_seed = split_seed;
    if (given("attacked-views")) c.attacked_view_counts = attacked_views;
    if (given("histogram-bins")) c.histogram_bins = histogram_bins;
    if (given("ablation")) c.ablation = AblationFlags::disabling(ablation);
    c.validate();
    if (c.data.empty()) throw ConfigError("no dataset given (use --data or a config with \"data\")");
    return c;
  }
};

struct RunPaths {
  fs::path root, checkpoints, reports, curves;
};

inline RunPaths make_run_dirs(OutputTracker& out, const fs::path& out_dir, const std::string& run_name) {
  RunPaths p;
  p.root = out.dir(out_dir / run_name);
  p.checkpoints = out.dir(p.root / "checkpoints");
  p.reports = out.dir(p.root / "reports");
  p.curves = out.dir(p.root / "curves");
  return p;
}

/// Train/test batches normalized with training statistics.
struct PreparedData {
  std::string name;
  MultiViewBatch train;
  MultiViewBatch test;
};

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
  LoadedDataset loaded = load_dataset(cfg.data, false);
  Split s = split(loaded.batch, cfg.train_fraction, cfg.split_seed);
  const Normalization norm = Normalization::fit(s.train);
  PreparedData d{loaded.manifest.name, norm.apply(s.train), norm.apply(s.test)};
  cfg.validate_for(d.train);
  return d;
}

inline std::string seed_file(const std::string& stem, std::uint64_t seed, const std::string& ext) {
  return stem + "_seed" + std::to_string(seed) + ext;
}

inline std::string curve_csv(const LossCurve& curve) {
  RunReport r;
  r.runs.push_back({0, {}, curve});
  return r.curves_csv(0);
}

inline ViewNetworkSet load_stage(const fs::path& path, const std::string& stage, const MultiViewBatch& data) {
  CheckpointInfo info;
  ViewNetworkSet nets = load_checkpoint(path, &info);
  if (info.stage != stage) {
    throw LoadError(path.string() + ": expected a " + stage + " checkpoint, found stage '" + info.stage + "'");
  }
  if (nets.view_dims() != data.view_dims() || nets.num_classes() != data.num_classes) {
    throw LoadError(path.string() + ": network shapes do not match the dataset");
  }
  return nets;
}

struct Context {
  std::ostream& out;
  OutputTracker tracker;
};

inline void write_json(OutputTracker& t, const fs::path& p, const nlohmann::json& j) { t.write(p, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Subcommands.

struct SynthArgs {
  std::size_t views = 3, classes = 4, n = 1000, latent_dim = 0;
  std::vector<std::size_t> dims{20, 20, 20};
  std::vector<double> noise;
  double separation = 1.0;
  std::uint64_t seed = 1;
  std::string name = "synthetic";
};

inline void run_synth(Context& ctx, const SynthArgs& a, const fs::path& out_dir, const std::string& run_name) {
  SyntheticSpec spec;
  spec.num_views = a.views;
  spec.num_classes = a.classes;
  spec.dims = a.dims;
  spec.num_instances = a.n;
  spec.class_separation = a.separation;
  spec.view_noise = a.noise.empty() ? std::vector<double>(a.views, 1.0) : a.noise;
  spec.latent_dim = a.latent_dim;
  spec.seed = a.seed;
  if (spec.dims.size() != spec.num_views) throw ConfigError("--dims must list one size per view");
  if (spec.view_noise.size() != spec.num_views) throw ConfigError("--noise must list one value per view");
  const MultiViewBatch batch = generate_synthetic(spec);
  const fs::path root = ctx.tracker.dir(out_dir / run_name);
  std::vector<fs::path> written;
  ctx.tracker.dir(root / "data");
  const fs::path manifest = write_dataset(root / "data", a.name, batch, &written);
  ctx.tracker.track(written);
  write_json(ctx.tracker, root / "config_resolved.json",
             {{"views", spec.num_views},
              {"classes", spec.num_classes},
              {"dims", spec.dims},
              {"n", spec.num_instances},
              {"separation", spec.class_separation},
              {"noise", spec.view_noise},
              {"latent_dim", spec.latent_dim},
              {"seed", spec.seed},
              {"name", a.name}});
  ctx.out << manifest.string() << "\n";
}

inline void run_pretrain(Context& ctx, const ExperimentConfig& cfg, const RunPaths& p) {
  const PreparedData d = prepare_data(cfg);
  const auto seeds = cfg.effective_seeds();
  std::vector<LossCurve> curves(seeds.size());
  std::vector<ViewNetworkSet> nets(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    nets[i] = ViewNetworkSet(d.train.view_dims(), d.train.num_classes, seeds[i]);
    pretrain(cfg, d.train, nets[i], seeds[i], &curves[i]);
  });
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const fs::path ckpt = ctx.tracker.file(p.checkpoints / seed_file("pretrain", seeds[i], ".ckpt"));
    save_checkpoint(ckpt, nets[i], {"pretrain", seeds[i]});
    ctx.tracker.write(p.curves / seed_file("pretrain", seeds[i], ".csv"), curve_csv(curves[i]));
    ctx.out << ckpt.string() << "\n";
  }
}

inline void run_train(Context& ctx, const ExperimentConfig& cfg, const RunPaths& p, const std::string& pretrained) {
  const PreparedData d = prepare_data(cfg);
  const auto seeds = cfg.effective_seeds();
  std::vector<ViewNetworkSet> nets(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (cfg.ablation.pretrain_with_attacks) {
      if (pretrained.empty()) throw ConfigError("train needs --pretrained unless pretrain-with-attacks is ablated");
      nets[i] = load_stage(fs::path(pretrained) / seed_file("pretrain", seeds[i], ".ckpt"), "pretrain", d.train);
    } else {
      nets[i] = ViewNetworkSet(d.train.view_dims(), d.train.num_classes, seeds[i]);
    }
  }
  std::vector<LossCurve> curves(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    copy_and_freeze(nets[i]);
    train(cfg, nets[i], d.train, seeds[i], &curves[i]);
  });
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const fs::path ckpt = ctx.tracker.file(p.checkpoints / seed_file("model", seeds[i], ".ckpt"));
    save_checkpoint(ckpt, nets[i], {"train", seeds[i]});
    ctx.tracker.write(p.curves / seed_file("train", seeds[i], ".csv"), curve_csv(curves[i]));
    ctx.out << ckpt.string() << "\n";
  }
}

inline void write_report(Context& ctx, const RunPaths& p, const std::string& stem, const RunReport& report,
                         std::size_t bins) {
  write_json(ctx.tracker, p.reports / (stem + ".json"), report.to_json());
  const std::string hist = stem == "report" ? "uncertainty_hist.csv" : stem + "_uncertainty_hist.csv";
  ctx.tracker.write(p.reports / hist, report.histogram_csv(bins));
  ctx.out << (p.reports / (stem + ".json")).string() << "\n";
}

inline void run_eval(Context& ctx, const ExperimentConfig& cfg, const RunPaths& p, const std::string& model_dir) {
  if (model_dir.empty()) throw ConfigError("eval needs --model");
  const PreparedData d = prepare_data(cfg);
  const auto seeds = cfg.effective_seeds();
  std::vector<ViewNetworkSet> nets(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    nets[i] = load_stage(fs::path(model_dir) / seed_file("model", seeds[i], ".ckpt"), "train", d.train);
  }
  RunReport report;
  report.config_hash = cfg.hash();
  report.method = cfg.method;
  report.dataset = d.name;
  report.ablation = cfg.ablation.disabled();
  report.runs.resize(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    report.runs[i].seed = seeds[i];
    report.runs[i].evaluation = evaluate(cfg, nets[i], d.test, seeds[i]);
  });
  write_report(ctx, p, "report", report, cfg.histogram_bins);
}

inline void run_ablate(Context& ctx, const ExperimentConfig& cfg, const RunPaths& p,
                       const std::vector<std::string>& sets) {
  const PreparedData d = prepare_data(cfg);
  auto all = standard_ablations();
  std::vector<std::pair<std::string, AblationFlags>> chosen;
  if (sets.empty()) {
    chosen = all;
  } else {
    for (const auto& name : sets) {
      auto it = std::find_if(all.begin(), all.end(), [&](const auto& s) { return s.first == name; });
      if (it == all.end()) throw ConfigError("unknown ablation set '" + name + "'");
      chosen.push_back(*it);
    }
  }
  std::vector<nlohmann::json> reports;
  for (const auto& [name, flags] : chosen) {
    const RunReport r = ablate(cfg, flags, d.train, d.test, d.name);
    write_report(ctx, p, "ablation_" + name, r, cfg.histogram_bins);
    reports.push_back(r.to_json());
  }
  ctx.tracker.write(p.reports / "ablation.md", markdown_report(reports, 1));
}

inline void run_report(Context& ctx, const std::vector<std::string>& inputs, std::size_t attacked_views,
                       const std::string& output) {
  if (inputs.empty()) throw ConfigError("report needs at least one RunReport JSON");
  std::vector<nlohmann::json> reports;
  for (const auto& path : inputs) {
    std::ifstream is(path);
    if (!is) throw LoadError("cannot open report " + path);
    try {
      reports.push_back(nlohmann::json::parse(is));
    } catch (const nlohmann::json::parse_error& e) {
      throw LoadError("report " + path + ": " + e.what());
    }
    if (!reports.back().contains("aggregate")) throw LoadError("report " + path + ": not a RunReport");
  }
  const std::string md = markdown_report(reports, attacked_views);
  if (output.empty()) {
    ctx.out << md;
  } else {
    ctx.tracker.write(output, md);
  }
}

/// Parses and runs one invocation. Errors are reported on `err` as a single
/// line `error: <Kind>: <message>` and mapped to an exit code; any outputs
/// written by the failed invocation are removed.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Evidential multi-view classification with adversarial disentanglement", "evimix"};
  app.require_subcommand(1);
  std::string out_dir = "out", run_name;

  SynthArgs synth_args;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic multi-view dataset");
  synth->add_option("--views", synth_args.views, "number of views");
  synth->add_option("--classes", synth_args.classes, "number of classes");
  synth->add_option("--dims", synth_args.dims, "per-view dimensions")->delimiter(',');
  synth->add_option("--n", synth_args.n, "number of instances");
  synth->add_option("--separation", synth_args.separation, "class separation");
  synth->add_option("--noise", synth_args.noise, "per-view noise standard deviations")->delimiter(',');
  synth->add_option("--latent-dim", synth_args.latent_dim, "latent dimension (0 picks max(2, classes))");
  synth->add_option("--seed", synth_args.seed, "generator seed");
  synth->add_option("--name", synth_args.name, "dataset name");

  struct Experiment {
    CLI::App* app;
    ConfigFlags flags;
  };
  std::map<std::string, Experiment> experiments;
  std::string pretrained_dir, model_dir;
  std::vector<std::string> ablation_sets;
  for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
           {"pretrain", "pretrain the evidence extractors under attack"},
           {"train", "disentangled training from pretrained extractors"},
           {"eval", "evaluate trained models under random-view attacks"},
           {"ablate", "train and evaluate component ablations"}}) {
    Experiment& e = experiments[name];
    e.app = app.add_subcommand(name, help);
    e.flags.attach(e.app);
  }
  experiments["train"].app->add_option("--pretrained", pretrained_dir, "directory with pretrain_seed<S>.ckpt files");
  experiments["eval"].app->add_option("--model", model_dir, "directory with model_seed<S>.ckpt files");
  experiments["ablate"].app->add_option("--sets", ablation_sets, "ablation sets to run (default: all)")->delimiter(',');

  std::vector<std::string> report_inputs;
  std::size_t report_views = 1;
  std::string report_output;
  CLI::App* report = app.add_subcommand("report", "aggregate RunReports into Markdown tables");
  report->add_option("inputs", report_inputs, "RunReport JSON files")->required();
  report->add_option("--attacked-views", report_views, "attacked view count for the robustness table");
  report->add_option("--output", report_output, "write the table here instead of stdout");

  for (CLI::App* sub : app.get_subcommands({})) {
    sub->add_option("--out", out_dir, "output root directory");
    sub->add_option("--run-name", run_name, "run directory name (default: subcommand)");
  }

  Context ctx{out, {}};
  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kOk;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return kOk;
    } catch (const CLI::ParseError& e) {
      throw ConfigError(e.what());
    }
    CLI::App* sub = app.get_subcommands().front();
    const std::string cmd = sub->get_name();
    if (run_name.empty()) run_name = cmd;
    if (cmd == "synth") {
      run_synth(ctx, synth_args, out_dir, run_name);
    } else if (cmd == "report") {
      run_report(ctx, report_inputs, report_views, report_output);
    } else {
      const ExperimentConfig cfg = experiments.at(cmd).flags.resolve();
      const RunPaths paths = make_run_dirs(ctx.tracker, out_dir, run_name);
      write_json(ctx.tracker, paths.root / "config_resolved.json", cfg.to_json());
      if (cmd == "pretrain") run_pretrain(ctx, cfg, paths);
      if (cmd == "train") run_train(ctx, cfg, paths, pretrained_dir);
      if (cmd == "eval") run_eval(ctx, cfg, paths, model_dir);
      if (cmd == "ablate") run_ablate(ctx, cfg, paths, ablation_sets);
    }
    return kOk;
  } catch (const Error& e) {
    ctx.tracker.rollback();
    err << "error: " << e.kind() << ": " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    ctx.tracker.rollback();
    err << "error: InternalError: " << e.what() << "\n";
    return kOther;
  }
}

}  // namespace evimix::cli
