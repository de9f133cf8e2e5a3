#include "lcat/config.hpp"

#include <algorithm>

#include "lcat/error.hpp"

namespace lcat {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const char* context,
                std::initializer_list<const char*> allowed) {
  if (!obj.is_object())
    fail(Err::Config, std::string("config: '") + context + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) {
          return key == a;
        }) == allowed.end())
      fail(Err::Config, std::string("config: unknown key '") + key + "' in " +
                            context);
  }
}

template <typename T>
void read(const json& obj, const char* context, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    fail(Err::Config, std::string("config: bad value for '") + key + "' in " +
                          context);
  }
}

template <typename Enum>
void read_enum(const json& obj, const char* context, const char* key,
               std::initializer_list<std::pair<const char*, Enum>> table,
               Enum& out) {
  if (!obj.contains(key)) return;
  std::string text;
  read(obj, context, key, text);
  for (const auto& [name, value] : table)
    if (text == name) {
      out = value;
      return;
    }
  std::string names;
  for (const auto& [name, value] : table) {
    (void)value;
    if (!names.empty()) names += ", ";
    names += name;
  }
  fail(Err::Config, std::string("config: '") + key + "' in " + context +
                        " must be one of: " + names);
}

constexpr std::initializer_list<std::pair<const char*, TrainMode>> kModes = {
    {"nat", TrainMode::NAT},
    {"at", TrainMode::AT},
    {"aq", TrainMode::AQ},
    {"lcat", TrainMode::LCAT}};
constexpr std::initializer_list<std::pair<const char*, TradesMode>> kTrades = {
    {"off", TradesMode::Off},
    {"adv_phase_only", TradesMode::AdvPhaseOnly},
    {"all_epochs", TradesMode::AllEpochs}};
constexpr std::initializer_list<std::pair<const char*, UpdateGranularity>>
    kGranularity = {{"per_block", UpdateGranularity::PerBlock},
                    {"per_term", UpdateGranularity::PerTerm}};
constexpr std::initializer_list<std::pair<const char*, AttackScope>> kScopes = {
    {"query_only", AttackScope::QueryOnly},
    {"support_and_query", AttackScope::SupportAndQuery}};
constexpr std::initializer_list<std::pair<const char*, HeadKind>> kHeads = {
    {"proto", HeadKind::Proto}, {"ridge", HeadKind::Ridge}};
constexpr std::initializer_list<std::pair<const char*, OptKind>> kOpts = {
    {"adam", OptKind::Adam}, {"sgd", OptKind::Sgd}};
constexpr std::initializer_list<std::pair<const char*, AttackObjective>>
    kObjectives = {{"cross_entropy", AttackObjective::CrossEntropy},
                   {"kl_to_clean", AttackObjective::KlToClean}};

const char* mode_json(TrainMode m) {
  switch (m) {
    case TrainMode::NAT: return "nat";
    case TrainMode::AT: return "at";
    case TrainMode::AQ: return "aq";
    case TrainMode::LCAT: return "lcat";
  }
  return "?";
}
const char* trades_json(TradesMode m) {
  switch (m) {
    case TradesMode::Off: return "off";
    case TradesMode::AdvPhaseOnly: return "adv_phase_only";
    case TradesMode::AllEpochs: return "all_epochs";
  }
  return "?";
}
const char* granularity_json(UpdateGranularity g) {
  return g == UpdateGranularity::PerBlock ? "per_block" : "per_term";
}
const char* scope_json(AttackScope s) {
  return s == AttackScope::QueryOnly ? "query_only" : "support_and_query";
}
const char* objective_json(AttackObjective o) {
  return o == AttackObjective::CrossEntropy ? "cross_entropy" : "kl_to_clean";
}

json attack_to_json(const AttackConfig& a) {
  return json{{"epsilon", a.epsilon},       {"step_size", a.step_size},
              {"steps", a.steps},           {"random_start", a.random_start},
              {"clip_lo", a.clip_lo},       {"clip_hi", a.clip_hi},
              {"objective", objective_json(a.objective)}};
}

void attack_merge_json(const json& obj, const char* context, AttackConfig& a) {
  check_keys(obj, context,
             {"epsilon", "step_size", "steps", "random_start", "clip_lo",
              "clip_hi", "objective"});
  read(obj, context, "epsilon", a.epsilon);
  read(obj, context, "step_size", a.step_size);
  read(obj, context, "steps", a.steps);
  read(obj, context, "random_start", a.random_start);
  read(obj, context, "clip_lo", a.clip_lo);
  read(obj, context, "clip_hi", a.clip_hi);
  read_enum(obj, context, "objective", kObjectives, a.objective);
}

}  // namespace

RunConfig RunConfig::defaults(const std::string& profile) {
  RunConfig cfg;
  cfg.profile = profile;
  cfg.sampler = SamplerConfig{5, 1, 15, Split::Train};
  cfg.net = EmbeddingNetConfig{};
  cfg.head = HeadConfig{};
  cfg.schedule = ScheduleConfig{};
  if (profile == "paper") {
    // Full-scale hyperparameters: Adam at 0.1, 100 meta-batches per epoch,
    // epsilon 8/255 with 2/255 steps (7 train / 20 eval).
    cfg.lr = 0.1;
    cfg.schedule.meta_batches_per_epoch = 100;
    cfg.attack_train = AttackConfig{8.0 / 255.0, 2.0 / 255.0, 7,
                                    false,       0.0,         1.0,
                                    AttackObjective::CrossEntropy};
  } else if (profile == "desk") {
    // Desk-scale presets for the synthetic corpus: smaller lr for Adam on
    // tiny nets, fewer batches, epsilon re-scaled to the synthetic contrast.
    cfg.lr = 1e-3;
    cfg.schedule.meta_batches_per_epoch = 20;
    cfg.attack_train = AttackConfig{0.15, 0.0375, 7,  false, 0.0, 1.0,
                                    AttackObjective::CrossEntropy};
  } else {
    fail(Err::Config, "config: unknown profile '" + profile +
                          "', expected 'desk' or 'paper'");
  }
  cfg.attack_eval = cfg.attack_train;
  cfg.attack_eval.steps = 20;
  cfg.eval = EvalConfig{};
  cfg.eval.sampler = SamplerConfig{cfg.sampler.way, cfg.sampler.shot,
                                   cfg.sampler.q, Split::Test};
  cfg.eval.attack = cfg.attack_eval;
  return cfg;
}

std::vector<std::string> RunConfig::preset_names() {
  return {"nat", "at", "aq", "scat", "lcat", "lcat_trades", "aq_trades"};
}

RunConfig RunConfig::preset(const std::string& name, const std::string& profile) {
  RunConfig cfg = defaults(profile);
  auto& s = cfg.schedule;
  if (name == "nat") {
    s.mode = TrainMode::NAT;
  } else if (name == "at") {
    s.mode = TrainMode::AT;
    s.attack_scope = AttackScope::SupportAndQuery;
  } else if (name == "aq") {
    s.mode = TrainMode::AQ;
    s.attack_scope = AttackScope::QueryOnly;
  } else if (name == "scat") {
    s.mode = TrainMode::LCAT;
    s.clean_epochs = 9;
    s.adv_epochs = 1;
    s.attack_scope = AttackScope::QueryOnly;
  } else if (name == "lcat") {
    s.mode = TrainMode::LCAT;
    s.clean_epochs = 5;
    s.adv_epochs = 5;
    s.attack_scope = AttackScope::QueryOnly;
  } else if (name == "lcat_trades") {
    s.mode = TrainMode::LCAT;
    s.clean_epochs = 5;
    s.adv_epochs = 5;
    s.attack_scope = AttackScope::QueryOnly;
    s.trades = TradesMode::AdvPhaseOnly;
    cfg.attack_train.objective = AttackObjective::KlToClean;
    // The KL objective is stationary at the clean input; without a random
    // start the sign-gradient loop never leaves it.
    cfg.attack_train.random_start = true;
  } else if (name == "aq_trades") {
    s.mode = TrainMode::AQ;
    s.attack_scope = AttackScope::QueryOnly;
    s.trades = TradesMode::AdvPhaseOnly;
    cfg.attack_train.objective = AttackObjective::KlToClean;
    cfg.attack_train.random_start = true;
  } else {
    std::string names;
    for (const auto& p : preset_names()) {
      if (!names.empty()) names += ", ";
      names += p;
    }
    fail(Err::Config, "config: unknown preset '" + name + "', valid presets: " +
                          names);
  }
  return cfg;
}

void RunConfig::validate() const {
  if (profile != "desk" && profile != "paper")
    fail(Err::Config, "config: unknown profile '" + profile + "'");
  sampler.validate();
  net.validate();
  head.validate();
  schedule.validate();
  attack_train.validate();
  attack_eval.validate();
  eval.validate();
  if (!(lr > 0.0)) fail(Err::Config, "config: lr must be > 0");
}

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["dataset"] = dataset;
  j["profile"] = profile;
  j["sampler"] = {{"way", sampler.way}, {"shot", sampler.shot}, {"q", sampler.q}};
  j["model"] = {{"blocks", net.blocks},
                {"channels", net.channels},
                {"kernel", net.kernel},
                {"denoise", net.denoise},
                {"head", head.kind == HeadKind::Proto ? "proto" : "ridge"},
                {"ridge_lambda", head.ridge_lambda},
                {"ridge_logit_scale", head.ridge_logit_scale}};
  j["schedule"] = {{"mode", mode_json(schedule.mode)},
                   {"clean_epochs", schedule.clean_epochs},
                   {"adv_epochs", schedule.adv_epochs},
                   {"epochs", schedule.total_epochs},
                   {"meta_batches_per_epoch", schedule.meta_batches_per_epoch},
                   {"batch_size", schedule.batch_size},
                   {"trades", trades_json(schedule.trades)},
                   {"trades_beta", schedule.trades_beta},
                   {"granularity", granularity_json(schedule.granularity)},
                   {"attack_scope", scope_json(schedule.attack_scope)}};
  j["optimizer"] = {{"kind", optimizer == OptKind::Adam ? "adam" : "sgd"},
                    {"lr", lr}};
  j["attack_train"] = attack_to_json(attack_train);
  j["attack_eval"] = attack_to_json(attack_eval);
  j["eval"] = {{"episodes", eval.episodes},
               {"way", eval.sampler.way},
               {"shot", eval.sampler.shot},
               {"q", eval.sampler.q},
               {"seed", eval.seed},
               {"threads", eval.threads},
               {"z", eval.z}};
  j["log_wall_ms"] = log_wall_ms;
  j["checkpoint_every_cycle"] = checkpoint_every_cycle;
  return j;
}

void RunConfig::merge_json(const json& j) {
  check_keys(j, "config",
             {"seed", "dataset", "profile", "sampler", "model", "schedule",
              "optimizer", "attack_train", "attack_eval", "eval", "log_wall_ms",
              "checkpoint_every_cycle"});
  if (j.contains("profile")) {
    std::string p;
    read(j, "config", "profile", p);
    if (p != profile) fail(Err::Config,
                           "config: profile cannot be changed by a partial "
                           "merge; pass it up front");
  }
  read(j, "config", "seed", seed);
  read(j, "config", "dataset", dataset);
  if (j.contains("sampler")) {
    const auto& o = j.at("sampler");
    check_keys(o, "sampler", {"way", "shot", "q"});
    read(o, "sampler", "way", sampler.way);
    read(o, "sampler", "shot", sampler.shot);
    read(o, "sampler", "q", sampler.q);
    // Evaluation mirrors the task shape unless its own section overrides it.
    eval.sampler.way = sampler.way;
    eval.sampler.shot = sampler.shot;
  }
  if (j.contains("model")) {
    const auto& o = j.at("model");
    check_keys(o, "model",
               {"blocks", "channels", "kernel", "denoise", "head",
                "ridge_lambda", "ridge_logit_scale"});
    read(o, "model", "blocks", net.blocks);
    read(o, "model", "channels", net.channels);
    read(o, "model", "kernel", net.kernel);
    read(o, "model", "denoise", net.denoise);
    read_enum(o, "model", "head", kHeads, head.kind);
    read(o, "model", "ridge_lambda", head.ridge_lambda);
    read(o, "model", "ridge_logit_scale", head.ridge_logit_scale);
  }
  if (j.contains("schedule")) {
    const auto& o = j.at("schedule");
    check_keys(o, "schedule",
               {"mode", "clean_epochs", "adv_epochs", "epochs",
                "meta_batches_per_epoch", "batch_size", "trades", "trades_beta",
                "granularity", "attack_scope"});
    read_enum(o, "schedule", "mode", kModes, schedule.mode);
    read(o, "schedule", "clean_epochs", schedule.clean_epochs);
    read(o, "schedule", "adv_epochs", schedule.adv_epochs);
    read(o, "schedule", "epochs", schedule.total_epochs);
    read(o, "schedule", "meta_batches_per_epoch",
         schedule.meta_batches_per_epoch);
    read(o, "schedule", "batch_size", schedule.batch_size);
    read_enum(o, "schedule", "trades", kTrades, schedule.trades);
    read(o, "schedule", "trades_beta", schedule.trades_beta);
    read_enum(o, "schedule", "granularity", kGranularity, schedule.granularity);
    read_enum(o, "schedule", "attack_scope", kScopes, schedule.attack_scope);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    check_keys(o, "optimizer", {"kind", "lr"});
    read_enum(o, "optimizer", "kind", kOpts, optimizer);
    read(o, "optimizer", "lr", lr);
  }
  if (j.contains("attack_train"))
    attack_merge_json(j.at("attack_train"), "attack_train", attack_train);
  if (j.contains("attack_eval"))
    attack_merge_json(j.at("attack_eval"), "attack_eval", attack_eval);
  if (j.contains("eval")) {
    const auto& o = j.at("eval");
    check_keys(o, "eval", {"episodes", "way", "shot", "q", "seed", "threads", "z"});
    read(o, "eval", "episodes", eval.episodes);
    read(o, "eval", "way", eval.sampler.way);
    read(o, "eval", "shot", eval.sampler.shot);
    read(o, "eval", "q", eval.sampler.q);
    read(o, "eval", "seed", eval.seed);
    read(o, "eval", "threads", eval.threads);
    read(o, "eval", "z", eval.z);
  }
  read(j, "config", "log_wall_ms", log_wall_ms);
  read(j, "config", "checkpoint_every_cycle", checkpoint_every_cycle);
  // The eval attack always mirrors attack_eval.
  eval.attack = attack_eval;
  eval.sampler.split = Split::Test;
}

RunConfig RunConfig::from_json(const json& j) {
  std::string profile = "desk";
  if (j.contains("profile")) {
    try {
      profile = j.at("profile").get<std::string>();
    } catch (const json::exception&) {
      fail(Err::Config, "config: bad value for 'profile'");
    }
  }
  RunConfig cfg = defaults(profile);
  cfg.merge_json(j);
  return cfg;
}

TrainOptions RunConfig::train_options() const {
  TrainOptions opts;
  opts.schedule = schedule;
  opts.sampler = sampler;
  opts.sampler.split = Split::Train;
  opts.net = net;
  opts.head = head;
  opts.attack = attack_train;
  opts.optimizer = optimizer;
  opts.lr = lr;
  opts.seed = seed;
  opts.log_wall_ms = log_wall_ms;
  return opts;
}

}  // namespace lcat
