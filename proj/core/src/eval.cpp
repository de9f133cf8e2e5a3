#include "lcat/eval.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "lcat/ops.hpp"

namespace lcat {

namespace {

using nlohmann::json;

// Thread-order-free per-episode stream derivation.
uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t x = seed;
  uint64_t a = Rng::splitmix64(x);
  x = a ^ (index + 0x517CC1B727220A95ULL);
  return Rng::splitmix64(x);
}

struct EpisodeScore {
  double nat = 0.0;
  double adv = 0.0;
};

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  size_t hits = 0;
  for (size_t i = 0; i < labels.size(); ++i)
    if (predictions[i] == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

EpisodeScore score_episode(const ModelParams& params, const EmbeddingNetConfig& net,
                           const HeadConfig& head, const EpisodeSampler& sampler,
                           const AttackConfig& attack, uint64_t seed,
                           int64_t index) {
  Rng sample_rng(mix_seed(seed, static_cast<uint64_t>(2 * index)));
  Rng attack_rng(mix_seed(seed, static_cast<uint64_t>(2 * index + 1)));
  const Episode ep = sampler.sample(sample_rng);

  Tape tape;
  tape.set_recording(false);
  auto adapted = fine_tune(tape, params, net, head, ep);

  EpisodeScore score;
  {
    auto logits = head_logits(tape, adapted, ep.query_images);
    score.nat = accuracy(argmax_rows(logits), ep.query_labels);
  }
  auto adv_images = pgd_attack(adapted, ep.query_images, ep.query_labels, attack,
                               attack_rng, nullptr);
  auto adv_logits = head_logits(tape, adapted, adv_images);
  score.adv = accuracy(argmax_rows(adv_logits), ep.query_labels);
  return score;
}

// Runs fn(i) for i in [0, n) on cfg.threads workers; exceptions propagate.
template <typename Fn>
void parallel_for(int n, int threads, const Fn& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::atomic<int> next{0};
  auto worker = [&]() {
    try {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  const int count = std::min(threads, n);
  pool.reserve(static_cast<size_t>(count));
  for (int t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

json eval_config_json(const EvalConfig& cfg) {
  return json{{"episodes", cfg.episodes},
              {"way", cfg.sampler.way},
              {"shot", cfg.sampler.shot},
              {"q", cfg.sampler.q},
              {"split", split_name(cfg.sampler.split)},
              {"attack",
               {{"epsilon", cfg.attack.epsilon},
                {"step_size", cfg.attack.step_size},
                {"steps", cfg.attack.steps},
                {"random_start", cfg.attack.random_start}}},
              {"seed", cfg.seed},
              {"z", cfg.z}};
}

}  // namespace

std::pair<double, double> confidence_interval(const std::vector<double>& values,
                                              double z) {
  if (values.empty()) fail(Err::Config, "confidence_interval: empty sample");
  if (values.size() == 1)
    fail(Err::Config,
         "confidence_interval: sample std undefined for a single episode");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  const double half = z * sd / std::sqrt(static_cast<double>(values.size()));
  return {mean, half};
}

std::string format_metric(double mean, double half_width) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f %% (%.2f %%)", mean * 100.0,
                half_width * 100.0);
  return buf;
}

MetricReport evaluate(const ModelParams& params, const EmbeddingNetConfig& net,
                      const HeadConfig& head, const DatasetStore& dataset,
                      const EvalConfig& cfg) {
  cfg.validate();
  EpisodeSampler sampler(dataset, cfg.sampler);

  std::vector<double> nat(static_cast<size_t>(cfg.episodes));
  std::vector<double> adv(static_cast<size_t>(cfg.episodes));
  parallel_for(cfg.episodes, cfg.threads, [&](int i) {
    const auto score =
        score_episode(params, net, head, sampler, cfg.attack, cfg.seed, i);
    nat[static_cast<size_t>(i)] = score.nat;
    adv[static_cast<size_t>(i)] = score.adv;
  });

  MetricReport report;
  std::tie(report.acc_nat, report.ci_nat) = confidence_interval(nat, cfg.z);
  std::tie(report.acc_adv, report.ci_adv) = confidence_interval(adv, cfg.z);
  report.episodes = cfg.episodes;
  report.adv_eval_steps = cfg.attack.steps;
  report.config_echo = eval_config_json(cfg).dump();
  return report;
}

std::vector<SweepRow> pgd_step_sweep(const ModelParams& params,
                                     const EmbeddingNetConfig& net,
                                     const HeadConfig& head,
                                     const DatasetStore& dataset,
                                     const std::vector<int>& steps_list,
                                     const EvalConfig& cfg) {
  if (steps_list.empty()) fail(Err::Config, "sweep: steps list must be non-empty");
  cfg.validate();
  EpisodeSampler sampler(dataset, cfg.sampler);

  std::vector<SweepRow> rows;
  rows.reserve(steps_list.size());
  for (int steps : steps_list) {
    if (steps < 0) fail(Err::Config, "sweep: attack steps must be >= 0");
    AttackConfig attack = cfg.attack;
    attack.steps = steps;
    std::vector<double> adv(static_cast<size_t>(cfg.episodes));
    parallel_for(cfg.episodes, cfg.threads, [&](int i) {
      adv[static_cast<size_t>(i)] =
          score_episode(params, net, head, sampler, attack, cfg.seed, i).adv;
    });
    SweepRow row;
    row.steps = steps;
    std::tie(row.acc_adv, row.ci_adv) = confidence_interval(adv, cfg.z);
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::string out = "steps,acc_adv,ci_adv\n";
  char buf[96];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f\n", row.steps, row.acc_adv,
                  row.ci_adv);
    out += buf;
  }
  return out;
}

std::string report_to_json_string(const MetricReport& report) {
  json j{{"config", report.config_echo.empty()
                        ? json::object()
                        : json::parse(report.config_echo)},
         {"acc_nat", report.acc_nat},
         {"ci_nat", report.ci_nat},
         {"acc_adv", report.acc_adv},
         {"ci_adv", report.ci_adv},
         {"episodes", report.episodes},
         {"adv_eval_steps", report.adv_eval_steps}};
  return j.dump(2) + "\n";
}

MetricReport report_from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(Err::Format, std::string("report: invalid JSON: ") + e.what());
  }
  MetricReport report;
  try {
    report.acc_nat = j.at("acc_nat").get<double>();
    report.ci_nat = j.at("ci_nat").get<double>();
    report.acc_adv = j.at("acc_adv").get<double>();
    report.ci_adv = j.at("ci_adv").get<double>();
    report.episodes = j.at("episodes").get<int>();
    report.adv_eval_steps = j.at("adv_eval_steps").get<int>();
    report.config_echo = j.at("config").dump();
  } catch (const json::exception& e) {
    fail(Err::Format, std::string("report: missing field: ") + e.what());
  }
  return report;
}

}  // namespace lcat
