#pragma once

#include <string>

#include "lcat/attack.hpp"
#include "lcat/error.hpp"

namespace lcat {

enum class TrainMode { NAT, AT, AQ, LCAT };
enum class Phase { Clean, Adv };
enum class TradesMode { Off, AdvPhaseOnly, AllEpochs };
enum class UpdateGranularity { PerBlock, PerTerm };

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::NAT: return "NAT";
    case TrainMode::AT: return "AT";
    case TrainMode::AQ: return "AQ";
    case TrainMode::LCAT: return "LCAT";
  }
  return "?";
}

inline const char* phase_name(Phase p) { return p == Phase::Clean ? "CLEAN" : "ADV"; }

// Cyclic cross-training schedule: c clean epochs then T adversarial epochs
// per cycle. SCAT is the (c=9,T=1) preset of LCAT mode; AT/AQ are
// all-adversarial; NAT never attacks.
struct ScheduleConfig {
  TrainMode mode = TrainMode::LCAT;
  int clean_epochs = 5;  // c
  int adv_epochs = 5;    // T
  int total_epochs = 50;
  int meta_batches_per_epoch = 20;
  int batch_size = 8;  // tasks per meta-batch (n)
  TradesMode trades = TradesMode::Off;
  double trades_beta = 6.0;
  UpdateGranularity granularity = UpdateGranularity::PerTerm;
  AttackScope attack_scope = AttackScope::QueryOnly;

  void validate() const {
    if (clean_epochs < 0 || adv_epochs < 0 || clean_epochs + adv_epochs < 1)
      fail(Err::Config, "schedule: need c >= 0, T >= 0, c+T >= 1");
    if (total_epochs < 0) fail(Err::Config, "schedule: total_epochs must be >= 0");
    if (meta_batches_per_epoch < 1)
      fail(Err::Config, "schedule: meta_batches_per_epoch must be >= 1");
    if (batch_size < 1) fail(Err::Config, "schedule: batch_size must be >= 1");
    if (trades_beta < 0.0) fail(Err::Config, "schedule: trades_beta must be >= 0");
  }
};

inline Phase phase_of_epoch(int epoch, const ScheduleConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.total_epochs)
    fail(Err::Config, "phase_of_epoch: epoch " + std::to_string(epoch) +
                          " outside [0," + std::to_string(cfg.total_epochs) + ")");
  switch (cfg.mode) {
    case TrainMode::NAT: return Phase::Clean;
    case TrainMode::AT:
    case TrainMode::AQ: return Phase::Adv;
    case TrainMode::LCAT: {
      const int cycle = cfg.clean_epochs + cfg.adv_epochs;
      return (epoch % cycle) >= cfg.clean_epochs ? Phase::Adv : Phase::Clean;
    }
  }
  fail(Err::Config, "phase_of_epoch: unknown mode");
}

// Whether TRADES shapes the adversarial-phase loss. Clean phases stay
// attack-free in both variants; AllEpochs differs from AdvPhaseOnly only in
// labeling (the all-epoch reading never generates attacks in clean phases).
inline bool trades_active(const ScheduleConfig& cfg, Phase phase) {
  if (cfg.trades == TradesMode::Off) return false;
  return phase == Phase::Adv;
}

}  // namespace lcat
