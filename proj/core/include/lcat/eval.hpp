#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lcat/attack.hpp"
#include "lcat/dataset.hpp"
#include "lcat/episode.hpp"
#include "lcat/model.hpp"
#include "lcat/params.hpp"

namespace lcat {

struct EvalConfig {
  int episodes = 2000;
  SamplerConfig sampler{5, 1, 15, Split::Test};
  AttackConfig attack{8.0 / 255.0, 2.0 / 255.0, 20, false, 0.0, 1.0,
                      AttackObjective::CrossEntropy};
  uint64_t seed = 0;
  double z = 1.96;  // CI half-width multiplier
  int threads = 1;

  void validate() const {
    if (episodes < 1) fail(Err::Config, "eval: episodes must be >= 1");
    if (threads < 1) fail(Err::Config, "eval: threads must be >= 1");
    if (z < 0.0) fail(Err::Config, "eval: z must be >= 0");
    sampler.validate();
    attack.validate();
  }
};

struct MetricReport {
  double acc_nat = 0.0;
  double ci_nat = 0.0;
  double acc_adv = 0.0;
  double ci_adv = 0.0;
  int episodes = 0;
  int adv_eval_steps = 0;
  std::string config_echo;  // JSON text of the evaluation configuration
};

// Sample mean and z * sample-std / sqrt(n) half-width. Errors on n < 2
// (the sample standard deviation is undefined for a single observation).
std::pair<double, double> confidence_interval(const std::vector<double>& values,
                                              double z = 1.96);

// "MM.MM % (H.HH %)", percent-scaled with two decimals.
std::string format_metric(double mean, double half_width);

// Clean and robust accuracy over test episodes. Per episode: adapt on the
// clean support set, score the queries, attack the queries with the eval
// attack, re-score. Episode i draws from an rng stream derived from
// (seed, i), so results are independent of thread count.
MetricReport evaluate(const ModelParams& params, const EmbeddingNetConfig& net,
                      const HeadConfig& head, const DatasetStore& dataset,
                      const EvalConfig& cfg);

struct SweepRow {
  int steps = 0;
  double acc_adv = 0.0;
  double ci_adv = 0.0;
};

// Robust accuracy at several attack budgets over one frozen episode set
// (paired design: every budget sees identical episodes).
std::vector<SweepRow> pgd_step_sweep(const ModelParams& params,
                                     const EmbeddingNetConfig& net,
                                     const HeadConfig& head,
                                     const DatasetStore& dataset,
                                     const std::vector<int>& steps_list,
                                     const EvalConfig& cfg);

// CSV with header "steps,acc_adv,ci_adv".
std::string sweep_to_csv(const std::vector<SweepRow>& rows);

std::string report_to_json_string(const MetricReport& report);
MetricReport report_from_json_string(const std::string& text);

}  // namespace lcat
