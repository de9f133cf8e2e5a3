#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcat/attack.hpp"
#include "lcat/episode.hpp"
#include "lcat/eval.hpp"
#include "lcat/model.hpp"
#include "lcat/optimizer.hpp"
#include "lcat/schedule.hpp"
#include "lcat/trainer.hpp"

namespace lcat {

// Effective configuration of one experiment. Parsed from strict JSON
// (unknown keys are rejected), optionally starting from a named method
// preset; the merged result is what gets snapshotted into the run directory.
struct RunConfig {
  uint64_t seed = 0;
  std::string dataset;
  std::string profile = "desk";  // desk | paper scale defaults
  SamplerConfig sampler{5, 1, 15, Split::Train};
  EmbeddingNetConfig net;
  HeadConfig head;
  ScheduleConfig schedule;
  OptKind optimizer = OptKind::Adam;
  double lr = 1e-3;
  AttackConfig attack_train;
  AttackConfig attack_eval;
  EvalConfig eval;
  bool log_wall_ms = true;
  bool checkpoint_every_cycle = false;

  void validate() const;
  nlohmann::json to_json() const;

  TrainOptions train_options() const;

  static RunConfig defaults(const std::string& profile);
  // nat | at | aq | scat | lcat | lcat_trades | aq_trades
  static RunConfig preset(const std::string& name, const std::string& profile);
  static std::vector<std::string> preset_names();

  static RunConfig from_json(const nlohmann::json& j);
  // Merge a (partial, strict) JSON object over this config.
  void merge_json(const nlohmann::json& j);
};

}  // namespace lcat
