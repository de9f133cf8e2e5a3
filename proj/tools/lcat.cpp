// lcat: synthetic few-shot adversarial-training experiments.
//   gen-data  build a synthetic FSB dataset
//   train     run a training schedule into a run directory
//   eval      clean/robust accuracy of a checkpoint
//   sweep     robust accuracy vs attack steps (CSV)
//   audit     adversarial-compute comparison of two runs

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lcat/checkpoint.hpp"
#include "lcat/config.hpp"
#include "lcat/dataset.hpp"
#include "lcat/error.hpp"
#include "lcat/eval.hpp"
#include "lcat/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::optional<uint64_t> env_seed() {
  const char* value = std::getenv("LCAT_SEED");
  if (!value || !*value) return std::nullopt;
  try {
    return std::stoull(value);
  } catch (const std::exception&) {
    lcat::fail(lcat::Err::Config, "LCAT_SEED is not a valid unsigned integer");
  }
}

// Exclusive lockfile held for the lifetime of a command inside a run dir.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    if (fs::exists(path_))
      lcat::fail(lcat::Err::State,
                 "run directory is locked by another command: " + path_.string());
    std::ofstream os(path_);
    if (!os) lcat::fail(lcat::Err::Io, "cannot create lockfile " + path_.string());
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) lcat::fail(lcat::Err::Io, "cannot write " + path.string());
  os << text;
  if (!os) lcat::fail(lcat::Err::Io, "write failed for " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) lcat::fail(lcat::Err::Io, "cannot read " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  return text;
}

ordered_json epoch_record_json(const lcat::EpochRecord& r) {
  ordered_json j;
  j["epoch"] = r.epoch;
  j["phase"] = lcat::phase_name(r.phase);
  j["mean_loss"] = r.mean_loss;
  j["adv_batches_cum"] = r.adv_batches_cum;
  j["adv_images_cum"] = r.adv_images_cum;
  j["wall_ms"] = r.wall_ms;
  return j;
}

struct GenDataArgs {
  std::string out;
  lcat::SyntheticConfig cfg;
  bool force = false;
  bool seed_given = false;
};

int cmd_gen_data(GenDataArgs& args) {
  if (!args.seed_given)
    if (auto s = env_seed()) args.cfg.seed = *s;
  if (fs::exists(args.out) && !args.force)
    lcat::fail(lcat::Err::State,
               "output exists, pass --force to overwrite: " + args.out);
  const auto store = lcat::generate_synthetic(args.cfg);
  lcat::save_fsb(store, args.out);
  {
    // Optional sidecar manifest with human-readable class names; the FSB
    // loader never reads it.
    ordered_json manifest;
    manifest["dataset"] = fs::path(args.out).filename().string();
    ordered_json classes = ordered_json::array();
    for (int64_t c = 0; c < store.num_classes(); ++c) {
      char name[32];
      std::snprintf(name, sizeof(name), "class_%02d", static_cast<int>(c));
      classes.push_back({{"id", c},
                         {"name", name},
                         {"split", lcat::split_name(store.class_splits[
                                       static_cast<size_t>(c)])}});
    }
    manifest["classes"] = classes;
    write_text_file(args.out + ".manifest.json", manifest.dump(2) + "\n");
  }
  int train = 0, val = 0, test = 0;
  for (auto s : store.class_splits) {
    if (s == lcat::Split::Train) ++train;
    else if (s == lcat::Split::Val) ++val;
    else ++test;
  }
  std::cout << "wrote " << args.out << ": " << store.count << " images, "
            << store.num_classes() << " classes (" << train << " train / " << val
            << " val / " << test << " test), " << store.channels << "x"
            << store.height << "x" << store.width << ", noise_std "
            << args.cfg.noise_std << ", seed " << args.cfg.seed << "\n";
  return 0;
}

struct TrainArgs {
  std::string config_path;
  std::string preset;
  std::string profile = "desk";
  std::string dataset;
  std::string out;
  std::optional<uint64_t> seed;
  std::optional<int> epochs;
  std::optional<double> attack_eps;
  std::optional<int> attack_steps;
  bool force = false;
};

lcat::RunConfig build_train_config(const TrainArgs& args) {
  lcat::RunConfig cfg = args.preset.empty()
                            ? lcat::RunConfig::defaults(args.profile)
                            : lcat::RunConfig::preset(args.preset, args.profile);
  if (!args.config_path.empty()) {
    json file_json;
    try {
      file_json = json::parse(read_text_file(args.config_path));
    } catch (const json::parse_error& e) {
      lcat::fail(lcat::Err::Config,
                 std::string("config file is not valid JSON: ") + e.what());
    }
    cfg.merge_json(file_json);
  }
  // Flags override config file values; LCAT_SEED applies when --seed absent.
  if (args.seed)
    cfg.seed = *args.seed;
  else if (auto s = env_seed())
    cfg.seed = *s;
  if (!args.dataset.empty()) cfg.dataset = args.dataset;
  if (args.epochs) cfg.schedule.total_epochs = *args.epochs;
  if (args.attack_eps) {
    cfg.attack_train.epsilon = *args.attack_eps;
    cfg.attack_train.step_size =
        std::min(cfg.attack_train.step_size, *args.attack_eps);
  }
  if (args.attack_steps) cfg.attack_train.steps = *args.attack_steps;
  cfg.validate();
  if (cfg.dataset.empty())
    lcat::fail(lcat::Err::Config, "no dataset given (--dataset or config)");
  return cfg;
}

int cmd_train(const TrainArgs& args) {
  lcat::RunConfig cfg = build_train_config(args);
  const fs::path run_dir(args.out);

  if (fs::exists(run_dir)) {
    if (!args.force && fs::exists(run_dir / "config.json"))
      lcat::fail(lcat::Err::State, "run directory already used, pass --force to "
                                   "overwrite: " + run_dir.string());
  } else {
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) lcat::fail(lcat::Err::Io, "cannot create run dir " + run_dir.string());
  }
  RunLock lock(run_dir);

  const auto store = lcat::load_fsb(cfg.dataset);

  // Config snapshot precedes epoch 0.
  const std::string config_text = cfg.to_json().dump(2) + "\n";
  write_text_file(run_dir / "config.json", config_text);

  std::ofstream metrics(run_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!metrics)
    lcat::fail(lcat::Err::Io, "cannot open metrics log in " + run_dir.string());

  const int cycle = cfg.schedule.clean_epochs + cfg.schedule.adv_epochs;
  const std::string config_echo = cfg.to_json().dump();
  lcat::TrainOptions opts = cfg.train_options();
  auto state = lcat::run_training<float>(
      store, opts,
      [&](const lcat::EpochRecord& record, const lcat::TrainState& live) {
        metrics << epoch_record_json(record).dump() << "\n";
        metrics.flush();
        std::cout << "epoch " << record.epoch + 1 << "/"
                  << cfg.schedule.total_epochs << " "
                  << lcat::phase_name(record.phase) << " mean_loss "
                  << record.mean_loss << "\n";
        if (cfg.checkpoint_every_cycle && cycle > 0 &&
            (record.epoch + 1) % cycle == 0) {
          char name[48];
          std::snprintf(name, sizeof(name), "checkpoint_epoch%04d.ckpt",
                        record.epoch + 1);
          lcat::CheckpointMeta meta;
          meta.epoch = record.epoch + 1;
          meta.rng_state_hex = live.data_rng.state_hex();
          meta.config_json = config_echo;
          lcat::save_checkpoint((run_dir / name).string(), live.params, meta);
        }
      });

  lcat::CheckpointMeta meta;
  meta.epoch = cfg.schedule.total_epochs;
  meta.rng_state_hex = state.data_rng.state_hex();
  meta.config_json = config_echo;
  lcat::save_checkpoint((run_dir / "checkpoint.ckpt").string(), state.params, meta);
  std::cout << "run complete: " << run_dir.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string run_dir;
  std::string checkpoint;
  std::string dataset;
  std::string out;
  std::optional<uint64_t> seed;
  std::optional<int> episodes;
  std::optional<double> attack_eps;
  std::optional<int> attack_steps;
  std::optional<int> threads;
  std::optional<int> q;
};

struct LoadedRun {
  lcat::RunConfig cfg;
  lcat::Checkpoint ckpt;
};

LoadedRun load_run(const std::string& run_dir, const std::string& checkpoint,
                   const std::string& dataset_override) {
  std::string ckpt_path = checkpoint;
  if (ckpt_path.empty()) {
    if (run_dir.empty())
      lcat::fail(lcat::Err::Config, "need --run or --checkpoint");
    ckpt_path = (fs::path(run_dir) / "checkpoint.ckpt").string();
  }
  if (!fs::exists(ckpt_path))
    lcat::fail(lcat::Err::Io, "missing checkpoint: " + ckpt_path);
  LoadedRun loaded{lcat::RunConfig{}, lcat::load_checkpoint(ckpt_path)};
  loaded.cfg = lcat::RunConfig::from_json(json::parse(loaded.ckpt.meta.config_json));
  if (!dataset_override.empty()) loaded.cfg.dataset = dataset_override;
  return loaded;
}

int cmd_eval(const EvalArgs& args) {
  LoadedRun loaded = load_run(args.run_dir, args.checkpoint, args.dataset);
  lcat::RunConfig& cfg = loaded.cfg;
  if (args.episodes) cfg.eval.episodes = *args.episodes;
  if (args.seed)
    cfg.eval.seed = *args.seed;
  else if (auto s = env_seed())
    cfg.eval.seed = *s;
  if (args.attack_eps) {
    cfg.eval.attack.epsilon = *args.attack_eps;
    cfg.eval.attack.step_size = std::min(cfg.eval.attack.step_size,
                                         std::max(*args.attack_eps, 1e-12));
  }
  if (args.attack_steps) cfg.eval.attack.steps = *args.attack_steps;
  if (args.threads) cfg.eval.threads = *args.threads;
  if (args.q) cfg.eval.sampler.q = *args.q;

  const auto store = lcat::load_fsb(cfg.dataset);
  const auto report = lcat::evaluate(loaded.ckpt.params, cfg.net, cfg.head, store,
                                     cfg.eval);
  std::cout << "acc_nat " << lcat::format_metric(report.acc_nat, report.ci_nat)
            << "  acc_adv " << lcat::format_metric(report.acc_adv, report.ci_adv)
            << "  [" << report.episodes << " episodes, " << report.adv_eval_steps
            << "-step PGD]\n";

  std::string out_path = args.out;
  if (out_path.empty() && !args.run_dir.empty())
    out_path = (fs::path(args.run_dir) / "report.json").string();
  if (!out_path.empty())
    write_text_file(out_path, lcat::report_to_json_string(report));
  return 0;
}

struct SweepArgs {
  std::string run_dir;
  std::string checkpoint;
  std::string dataset;
  std::string out;
  std::vector<int> steps;
  std::optional<uint64_t> seed;
  std::optional<int> episodes;
  std::optional<int> threads;
};

int cmd_sweep(const SweepArgs& args) {
  if (args.steps.empty())
    lcat::fail(lcat::Err::Config, "sweep: --steps list must be non-empty");
  LoadedRun loaded = load_run(args.run_dir, args.checkpoint, args.dataset);
  lcat::RunConfig& cfg = loaded.cfg;
  if (args.episodes) cfg.eval.episodes = *args.episodes;
  if (args.seed)
    cfg.eval.seed = *args.seed;
  else if (auto s = env_seed())
    cfg.eval.seed = *s;
  if (args.threads) cfg.eval.threads = *args.threads;

  const auto store = lcat::load_fsb(cfg.dataset);
  const auto rows = lcat::pgd_step_sweep(loaded.ckpt.params, cfg.net, cfg.head,
                                         store, args.steps, cfg.eval);
  const std::string csv = lcat::sweep_to_csv(rows);
  std::cout << csv;
  std::string out_path = args.out;
  if (out_path.empty() && !args.run_dir.empty())
    out_path = (fs::path(args.run_dir) / "sweep.csv").string();
  if (!out_path.empty()) write_text_file(out_path, csv);
  return 0;
}

struct AuditArgs {
  std::string run_a;
  std::string run_b;
  std::string out;
};

struct RunAudit {
  uint64_t adv_batches = 0;
  int adv_epochs = 0;
  int total_epochs = 0;
};

RunAudit audit_run(const fs::path& dir) {
  const auto cfg_json = json::parse(read_text_file(dir / "config.json"));
  const auto cfg = lcat::RunConfig::from_json(cfg_json);
  std::ifstream is(dir / "metrics.jsonl", std::ios::binary);
  if (!is) lcat::fail(lcat::Err::Io, "cannot read metrics in " + dir.string());
  RunAudit audit;
  audit.total_epochs = cfg.schedule.total_epochs;
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error&) {
      lcat::fail(lcat::Err::Format, "corrupt metrics line in " + dir.string());
    }
    ++lines;
    if (record.at("phase").get<std::string>() == "ADV") ++audit.adv_epochs;
    audit.adv_batches = record.at("adv_batches_cum").get<uint64_t>();
  }
  if (lines != cfg.schedule.total_epochs)
    lcat::fail(lcat::Err::State, "incomplete metrics log in " + dir.string() +
                                     ": " + std::to_string(lines) + "/" +
                                     std::to_string(cfg.schedule.total_epochs) +
                                     " epochs");
  return audit;
}

int cmd_audit(const AuditArgs& args) {
  const RunAudit a = audit_run(args.run_a);
  const RunAudit b = audit_run(args.run_b);
  double ratio;
  if (b.adv_batches > 0)
    ratio = static_cast<double>(a.adv_batches) / static_cast<double>(b.adv_batches);
  else if (a.adv_batches == 0)
    ratio = 1.0;
  else
    lcat::fail(lcat::Err::State,
               "audit: run B has zero adversarial batches but run A does not");
  ordered_json j;
  j["adv_batches_A"] = a.adv_batches;
  j["adv_batches_B"] = b.adv_batches;
  j["ratio"] = ratio;
  j["adv_epoch_fraction_A"] =
      a.total_epochs ? static_cast<double>(a.adv_epochs) / a.total_epochs : 0.0;
  j["adv_epoch_fraction_B"] =
      b.total_epochs ? static_cast<double>(b.adv_epochs) / b.total_epochs : 0.0;
  const std::string text = j.dump(2) + "\n";
  std::cout << text;
  if (!args.out.empty()) write_text_file(args.out, text);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic few-shot adversarial training lab"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic FSB dataset");
  gen_cmd->add_option("--out", gen.out, "output .fsb path")->required();
  gen_cmd->add_option("--classes", gen.cfg.num_classes, "number of classes");
  gen_cmd->add_option("--images-per-class", gen.cfg.images_per_class,
                      "images per class");
  gen_cmd->add_option("--height", gen.cfg.height, "image height");
  gen_cmd->add_option("--width", gen.cfg.width, "image width");
  gen_cmd->add_option("--channels", gen.cfg.channels, "image channels");
  gen_cmd->add_option("--noise", gen.cfg.noise_std, "pixel noise std");
  gen_cmd->add_option("--test-fraction", gen.cfg.test_fraction,
                      "fraction of classes held out for test");
  gen_cmd->add_option("--val-fraction", gen.cfg.val_fraction,
                      "fraction of classes held out for val");
  auto* gen_seed =
      gen_cmd->add_option("--seed", gen.cfg.seed, "generator seed");
  gen_cmd->add_flag("--force", gen.force, "overwrite existing output");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "run a training schedule");
  train_cmd->add_option("--config", train.config_path, "JSON config file");
  train_cmd->add_option("--preset", train.preset,
                        "method preset: nat|at|aq|scat|lcat|lcat_trades|aq_trades");
  train_cmd->add_option("--profile", train.profile, "scale profile: desk|paper");
  train_cmd->add_option("--dataset", train.dataset, "FSB dataset path");
  train_cmd->add_option("--out", train.out, "run directory")->required();
  train_cmd->add_option("--seed", train.seed, "training seed");
  train_cmd->add_option("--epochs", train.epochs, "total epochs");
  train_cmd->add_option("--attack-eps", train.attack_eps, "training attack epsilon");
  train_cmd->add_option("--attack-steps", train.attack_steps,
                        "training attack steps");
  train_cmd->add_flag("--force", train.force, "reuse an existing run directory");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--run", eval.run_dir, "run directory");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint path");
  eval_cmd->add_option("--dataset", eval.dataset, "dataset override");
  eval_cmd->add_option("--out", eval.out, "report JSON path");
  eval_cmd->add_option("--seed", eval.seed, "evaluation seed");
  eval_cmd->add_option("--episodes", eval.episodes, "test episode count");
  eval_cmd->add_option("--attack-eps", eval.attack_eps, "eval attack epsilon");
  eval_cmd->add_option("--attack-steps", eval.attack_steps, "eval attack steps");
  eval_cmd->add_option("--threads", eval.threads, "evaluation threads");
  eval_cmd->add_option("--q", eval.q, "query images per class");

  SweepArgs sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "robust accuracy vs attack steps");
  sweep_cmd->add_option("--run", sweep.run_dir, "run directory");
  sweep_cmd->add_option("--checkpoint", sweep.checkpoint, "checkpoint path");
  sweep_cmd->add_option("--dataset", sweep.dataset, "dataset override");
  sweep_cmd->add_option("--out", sweep.out, "CSV output path");
  sweep_cmd->add_option("--steps", sweep.steps, "attack step budgets")
      ->delimiter(',');
  sweep_cmd->add_option("--seed", sweep.seed, "evaluation seed");
  sweep_cmd->add_option("--episodes", sweep.episodes, "episodes per budget");
  sweep_cmd->add_option("--threads", sweep.threads, "evaluation threads");

  AuditArgs audit;
  auto* audit_cmd =
      app.add_subcommand("audit", "compare adversarial compute of two runs");
  audit_cmd->add_option("run_a", audit.run_a, "first run directory")->required();
  audit_cmd->add_option("run_b", audit.run_b, "second run directory")->required();
  audit_cmd->add_option("--out", audit.out, "audit JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "E_CONFIG: " << e.what() << "\n";
    return 1;
  }

  try {
    if (gen_cmd->parsed()) {
      gen.seed_given = gen_seed->count() > 0;
      return cmd_gen_data(gen);
    }
    if (train_cmd->parsed()) return cmd_train(train);
    if (eval_cmd->parsed()) return cmd_eval(eval);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep);
    if (audit_cmd->parsed()) return cmd_audit(audit);
  } catch (const lcat::Error& e) {
    std::cerr << e.code_name() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "E_UNKNOWN: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
