#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lcat/episode.hpp"
#include "lcat/error.hpp"
#include "lcat/model.hpp"
#include "lcat/ops.hpp"
#include "lcat/rng.hpp"
#include "lcat/tensor.hpp"

namespace lcat {

enum class AttackObjective { CrossEntropy, KlToClean };
enum class AttackScope { QueryOnly, SupportAndQuery };

struct AttackConfig {
  double epsilon = 8.0 / 255.0;    // L-inf radius in pixel units
  double step_size = 2.0 / 255.0;  // per-step magnitude
  int steps = 7;
  bool random_start = false;
  double clip_lo = 0.0;
  double clip_hi = 1.0;
  AttackObjective objective = AttackObjective::CrossEntropy;

  void validate() const {
    if (epsilon < 0.0) fail(Err::Config, "attack: epsilon must be >= 0");
    if (steps < 0) fail(Err::Config, "attack: steps must be >= 0");
    if (steps > 0 && !(step_size > 0.0))
      fail(Err::Config, "attack: step_size must be > 0 when steps > 0");
    if (!(clip_lo < clip_hi)) fail(Err::Config, "attack: clip_lo must be < clip_hi");
  }
};

// Audit counters for the adversarial-compute comparisons. Single-owner
// accumulation; evaluation reduces per-thread copies.
struct AttackStats {
  uint64_t invocations = 0;
  uint64_t images = 0;

  AttackStats& operator+=(const AttackStats& other) {
    invocations += other.invocations;
    images += other.images;
    return *this;
  }
};

// Model seam for the attack loop: maps a [B,C,H,W] image tensor to [B,K]
// logits on the given tape. Must not route gradients into anything the
// caller wants unpolluted (see detach_adapted).
template <typename S>
using LogitsFn =
    std::function<BasicTensor<S>(BasicTape<S>&, const BasicTensor<S>&)>;

// L-inf PGD (sign-gradient ascent, projected into the epsilon ball and the
// pixel box). Returns detached adversarial images; the inputs are untouched.
template <typename S>
BasicTensor<S> pgd_attack(const LogitsFn<S>& logits_fn,
                          const BasicTensor<S>& images,
                          const std::vector<int>& labels,
                          const AttackConfig& cfg, Rng& rng,
                          AttackStats* stats = nullptr) {
  cfg.validate();
  const S lo = static_cast<S>(cfg.clip_lo);
  const S hi = static_cast<S>(cfg.clip_hi);
  for (S v : images.data())
    if (v < lo || v > hi)
      fail(Err::Config, "pgd: input pixels must lie inside the clip box");

  if (stats) {
    stats->invocations += 1;
    stats->images += static_cast<uint64_t>(images.dim(0));
  }

  auto x = images.detached();
  const S eps = static_cast<S>(cfg.epsilon);

  if (cfg.random_start && cfg.epsilon > 0.0) {
    auto& xv = x.data();
    for (size_t i = 0; i < xv.size(); ++i) {
      const S v = xv[i] + static_cast<S>(rng.uniform(-cfg.epsilon, cfg.epsilon));
      xv[i] = std::min(std::max(v, lo), hi);
    }
  }

  if (cfg.steps == 0 || cfg.epsilon == 0.0) return x;

  // kl_to_clean maximizes KL(f(x_clean) || f(x_adv)); the clean reference is
  // computed once, without recording.
  BasicTensor<S> clean_logits;
  if (cfg.objective == AttackObjective::KlToClean) {
    BasicTape<S> tape;
    tape.set_recording(false);
    clean_logits = logits_fn(tape, images.detached()).detached();
  }

  const S step = static_cast<S>(cfg.step_size);
  for (int it = 0; it < cfg.steps; ++it) {
    BasicTape<S> tape;
    auto x_var = x.detached();
    x_var.set_requires_grad(true);
    auto logits = logits_fn(tape, x_var);
    BasicTensor<S> loss =
        cfg.objective == AttackObjective::CrossEntropy
            ? softmax_cross_entropy(tape, logits, labels)
            : kl_divergence(tape, clean_logits, logits);
    tape.backward(loss);
    const auto& g = x_var.grad();
    for (S gv : g)
      if (!std::isfinite(static_cast<double>(gv)))
        fail(Err::Numeric, "pgd: non-finite gradient at step " + std::to_string(it));

    auto& xv = x.data();
    const auto& orig = images.data();
    for (size_t i = 0; i < xv.size(); ++i) {
      const S dir = g[i] > S(0) ? S(1) : (g[i] < S(0) ? S(-1) : S(0));
      S v = xv[i] + step * dir;
      v = std::min(std::max(v, lo), hi);                      // pixel box
      v = std::min(std::max(v, orig[i] - eps), orig[i] + eps);  // eps ball
      xv[i] = v;
    }
  }
  return x;
}

// Attack against a task-adapted model. The adapted state and the base
// parameters are detached internally, so attack gradients never reach theta.
template <typename S>
BasicTensor<S> pgd_attack(const BasicTaskAdaptedModel<S>& adapted,
                          const BasicTensor<S>& images,
                          const std::vector<int>& labels,
                          const AttackConfig& cfg, Rng& rng,
                          AttackStats* stats = nullptr) {
  auto frozen = detach_adapted(adapted);
  LogitsFn<S> fn = [frozen](BasicTape<S>& tape, const BasicTensor<S>& imgs) {
    return head_logits(tape, frozen, imgs);
  };
  return pgd_attack(fn, images, labels, cfg, rng, stats);
}

// Builds tau' from tau: replaces the scoped image sets with PGD outputs
// against the task-adapted model. Labels and counts are unchanged.
template <typename S>
BasicEpisode<S> adversarial_episode(const BasicTaskAdaptedModel<S>& adapted,
                                    const BasicEpisode<S>& episode,
                                    const AttackConfig& cfg, AttackScope scope,
                                    Rng& rng, AttackStats* stats = nullptr) {
  BasicEpisode<S> out;
  out.way = episode.way;
  out.shot = episode.shot;
  out.q = episode.q;
  out.support_labels = episode.support_labels;
  out.query_labels = episode.query_labels;
  out.global_classes = episode.global_classes;

  auto frozen = detach_adapted(adapted);
  LogitsFn<S> fn = [frozen](BasicTape<S>& tape, const BasicTensor<S>& imgs) {
    return head_logits(tape, frozen, imgs);
  };
  out.support_images =
      scope == AttackScope::SupportAndQuery
          ? pgd_attack(fn, episode.support_images, episode.support_labels, cfg,
                       rng, stats)
          : episode.support_images;
  out.query_images =
      pgd_attack(fn, episode.query_images, episode.query_labels, cfg, rng, stats);
  return out;
}

}  // namespace lcat
