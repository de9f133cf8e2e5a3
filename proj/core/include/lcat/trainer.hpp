#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lcat/attack.hpp"
#include "lcat/dataset.hpp"
#include "lcat/episode.hpp"
#include "lcat/error.hpp"
#include "lcat/model.hpp"
#include "lcat/ops.hpp"
#include "lcat/optimizer.hpp"
#include "lcat/params.hpp"
#include "lcat/rng.hpp"
#include "lcat/schedule.hpp"
#include "lcat/tensor.hpp"

namespace lcat {

struct EpochRecord {
  int epoch = 0;
  Phase phase = Phase::Clean;
  double mean_loss = 0.0;
  uint64_t adv_batches_cum = 0;
  uint64_t adv_images_cum = 0;
  int64_t wall_ms = 0;
};

template <typename S>
struct BasicTrainState {
  int epoch = 0;
  Phase phase = Phase::Clean;
  BasicModelParams<S> params;
  BasicOptimizerState<S> opt;
  AttackStats attack_stats;
  uint64_t adv_batches = 0;
  Rng data_rng;
  Rng attack_rng;
  std::vector<EpochRecord> log;
  // Meta-batches whose task gradients are sitting unapplied in the grad
  // buffers (1 under per_term; grows across a block under per_block).
  uint64_t pending_batches = 0;
};

using TrainState = BasicTrainState<float>;

// Builds the loss of one task on the given tape.
template <typename S>
using TaskLossFn = std::function<BasicTensor<S>(
    BasicTape<S>&, const BasicModelParams<S>&, const BasicEpisode<S>&)>;

// TRADES composite: CE(clean, labels) + beta * KL(clean || adv).
template <typename S>
BasicTensor<S> trades_loss(BasicTape<S>& tape, const BasicTensor<S>& clean_logits,
                           const BasicTensor<S>& adv_logits,
                           const std::vector<int>& labels, double beta) {
  if (beta < 0.0) fail(Err::Config, "trades_loss: beta must be >= 0");
  auto ce = softmax_cross_entropy(tape, clean_logits, labels);
  if (beta == 0.0) return ce;
  auto kl = kl_divergence(tape, clean_logits, adv_logits);
  return add(tape, ce, scale(tape, kl, static_cast<S>(beta)));
}

// The episodic objective used by real training runs: fine-tune the head on
// the support set, score the queries.
template <typename S>
struct EpisodicObjective {
  EmbeddingNetConfig net;
  HeadConfig head;
  AttackConfig attack;  // training attack
  AttackScope scope = AttackScope::QueryOnly;
  bool trades = false;
  double trades_beta = 6.0;

  BasicTensor<S> clean_loss(BasicTape<S>& tape, const BasicModelParams<S>& params,
                            const BasicEpisode<S>& ep) const {
    auto adapted = fine_tune(tape, params, net, head, ep);
    auto logits = head_logits(tape, adapted, ep.query_images);
    return softmax_cross_entropy(tape, logits, ep.query_labels);
  }

  // Adapt on clean support, attack against the adapted model, then score
  // tau'. With support_and_query scope the classifier is re-adapted on the
  // adversarial support before scoring.
  BasicTensor<S> adversarial_loss(BasicTape<S>& tape,
                                  const BasicModelParams<S>& params,
                                  const BasicEpisode<S>& ep, Rng& attack_rng,
                                  AttackStats* stats) const {
    auto adapted = fine_tune(tape, params, net, head, ep);
    auto adv = adversarial_episode(adapted, ep, attack, scope, attack_rng, stats);
    if (trades) {
      auto clean_logits = head_logits(tape, adapted, ep.query_images);
      auto adv_logits = head_logits(tape, adapted, adv.query_images);
      return trades_loss(tape, clean_logits, adv_logits, ep.query_labels,
                         trades_beta);
    }
    if (scope == AttackScope::SupportAndQuery) {
      auto re_adapted = fine_tune(tape, params, net, head, adv);
      auto logits = head_logits(tape, re_adapted, adv.query_images);
      return softmax_cross_entropy(tape, logits, adv.query_labels);
    }
    auto logits = head_logits(tape, adapted, adv.query_images);
    return softmax_cross_entropy(tape, logits, adv.query_labels);
  }
};

namespace detail {

template <typename S>
S accumulate_batch(BasicTrainState<S>& state,
                   const std::vector<BasicEpisode<S>>& batch,
                   const TaskLossFn<S>& loss_fn) {
  if (batch.empty()) fail(Err::Config, "meta step: empty task batch");
  S total = S(0);
  for (size_t i = 0; i < batch.size(); ++i) {
    BasicTape<S> tape;
    auto loss = loss_fn(tape, state.params, batch[i]);
    const S value = loss.item();
    if (!std::isfinite(static_cast<double>(value)))
      fail(Err::Numeric, "meta step: non-finite loss at epoch " +
                             std::to_string(state.epoch) + ", task " +
                             std::to_string(i));
    tape.backward(loss);
    total += value;
  }
  state.pending_batches += 1;
  return total / static_cast<S>(batch.size());
}

}  // namespace detail

// Clean meta-update contribution (Eq. 2 accumulation): per-task query losses
// through fine-tuning, gradients summed into the parameter grad buffers.
// Returns the mean task loss of the batch.
template <typename S>
S clean_meta_step(BasicTrainState<S>& state,
                  const std::vector<BasicEpisode<S>>& batch,
                  const TaskLossFn<S>& loss_fn) {
  if (state.phase != Phase::Clean)
    fail(Err::State, "clean_meta_step: called outside a clean phase");
  return detail::accumulate_batch(state, batch, loss_fn);
}

// Adversarial meta-update contribution (Eq. 3 accumulation) over tau'.
template <typename S>
S adversarial_meta_step(BasicTrainState<S>& state,
                        const std::vector<BasicEpisode<S>>& batch,
                        const EpisodicObjective<S>& objective) {
  if (state.phase != Phase::Adv)
    fail(Err::State, "adversarial_meta_step: called outside an adversarial phase");
  TaskLossFn<S> fn = [&](BasicTape<S>& tape, const BasicModelParams<S>& params,
                         const BasicEpisode<S>& ep) {
    return objective.adversarial_loss(tape, params, ep, state.attack_rng,
                                      &state.attack_stats);
  };
  const S loss = detail::accumulate_batch(state, batch, fn);
  state.adv_batches += 1;
  return loss;
}

// Applies the pending accumulated gradients as one optimizer step.
// sgd uses sum/n (the literal lambda/n of Eqs. 2-3); adam uses the mean of
// per-batch task means so its step scale is independent of block length.
template <typename S>
void apply_update(BasicTrainState<S>& state, int batch_size) {
  if (state.pending_batches == 0) return;
  double scale = 1.0 / static_cast<double>(batch_size);
  if (state.opt.kind == OptKind::Adam)
    scale /= static_cast<double>(state.pending_batches);
  std::vector<std::vector<S>> grads(state.params.size());
  for (size_t i = 0; i < state.params.size(); ++i) {
    auto& g = state.params.tensor(i).grad();
    grads[i].resize(g.size());
    for (size_t j = 0; j < g.size(); ++j)
      grads[i][j] = static_cast<S>(static_cast<double>(g[j]) * scale);
  }
  optimizer_step(state.opt, state.params, grads);
  state.params.zero_grads();
  state.pending_batches = 0;
}

struct TrainOptions {
  ScheduleConfig schedule;
  SamplerConfig sampler;
  EmbeddingNetConfig net;
  HeadConfig head;
  AttackConfig attack;
  OptKind optimizer = OptKind::Adam;
  double lr = 1e-3;
  uint64_t seed = 0;
  bool log_wall_ms = true;
};

// Initializes theta deterministically from the seed and runs the full
// schedule. Single-threaded; identical seeds give bit-identical results.
// on_epoch (when set) observes the record and the live state after each
// epoch, e.g. to stream the metrics log or write cycle checkpoints.
template <typename S = float>
BasicTrainState<S> run_training(
    const DatasetStore& dataset, const TrainOptions& opts,
    const std::function<void(const EpochRecord&, const BasicTrainState<S>&)>&
        on_epoch = nullptr) {
  opts.schedule.validate();
  opts.attack.validate();
  opts.head.validate();

  Rng master(opts.seed);
  Rng init_rng = master.fork(1);

  BasicTrainState<S> state;
  state.data_rng = master.fork(2);
  state.attack_rng = master.fork(3);
  state.params = init_embedding_params<S>(opts.net, dataset.channels, init_rng);
  state.opt.kind = opts.optimizer;
  state.opt.lr = opts.lr;

  // Validate geometry up front.
  opts.net.embedding_dim(dataset.height, dataset.width);

  EpisodicObjective<S> objective{opts.net, opts.head, opts.attack,
                                 opts.schedule.attack_scope,
                                 /*trades=*/false, opts.schedule.trades_beta};
  TaskLossFn<S> clean_fn = [&objective](BasicTape<S>& tape,
                                        const BasicModelParams<S>& params,
                                        const BasicEpisode<S>& ep) {
    return objective.clean_loss(tape, params, ep);
  };

  EpisodeSampler sampler(dataset, opts.sampler);
  const auto& sched = opts.schedule;

  for (int epoch = 0; epoch < sched.total_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    state.epoch = epoch;
    state.phase = phase_of_epoch(epoch, sched);
    objective.trades = trades_active(sched, state.phase);

    double loss_sum = 0.0;
    for (int b = 0; b < sched.meta_batches_per_epoch; ++b) {
      auto float_batch = sampler.sample_batch(sched.batch_size, state.data_rng);
      std::vector<BasicEpisode<S>> batch;
      batch.reserve(float_batch.size());
      for (auto& ep : float_batch) {
        if constexpr (std::is_same_v<S, float>)
          batch.push_back(std::move(ep));
        else
          batch.push_back(episode_cast<S>(ep));
      }
      const S loss = state.phase == Phase::Clean
                         ? clean_meta_step(state, batch, clean_fn)
                         : adversarial_meta_step(state, batch, objective);
      loss_sum += static_cast<double>(loss);
      if (sched.granularity == UpdateGranularity::PerTerm)
        apply_update(state, sched.batch_size);
    }
    if (sched.granularity == UpdateGranularity::PerBlock) {
      const bool boundary = epoch + 1 == sched.total_epochs ||
                            phase_of_epoch(epoch + 1, sched) != state.phase;
      if (boundary) apply_update(state, sched.batch_size);
    }

    EpochRecord record;
    record.epoch = epoch;
    record.phase = state.phase;
    record.mean_loss = loss_sum / static_cast<double>(sched.meta_batches_per_epoch);
    record.adv_batches_cum = state.adv_batches;
    record.adv_images_cum = state.attack_stats.images;
    record.wall_ms =
        opts.log_wall_ms
            ? std::chrono::duration_cast<std::chrono::milliseconds>(
                  std::chrono::steady_clock::now() - start)
                  .count()
            : 0;
    state.log.push_back(record);
    if (on_epoch) on_epoch(record, state);
  }
  return state;
}

}  // namespace lcat
