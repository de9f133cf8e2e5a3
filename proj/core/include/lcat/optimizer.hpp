#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lcat/error.hpp"
#include "lcat/params.hpp"

namespace lcat {

enum class OptKind { Adam, Sgd };

inline const char* opt_name(OptKind k) { return k == OptKind::Adam ? "adam" : "sgd"; }

template <typename S>
struct BasicOptimizerState {
  OptKind kind = OptKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step_count = 0;
  std::vector<std::vector<S>> m;  // first moments, one buffer per parameter
  std::vector<std::vector<S>> v;  // second moments

  void ensure_buffers(const BasicModelParams<S>& params) {
    if (!m.empty()) return;
    m.resize(params.size());
    v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params.tensor(i).data().size(), S(0));
      v[i].assign(params.tensor(i).data().size(), S(0));
    }
  }
};

using OptimizerState = BasicOptimizerState<float>;

// sgd: p -= lr * g. adam: standard bias-corrected moment update.
// grads must be ordered and shaped like the parameter collection.
template <typename S>
void optimizer_step(BasicOptimizerState<S>& opt, BasicModelParams<S>& params,
                    const std::vector<std::vector<S>>& grads) {
  if (grads.size() != params.size())
    fail(Err::Config, "optimizer_step: gradient count mismatch");
  for (size_t i = 0; i < params.size(); ++i)
    if (grads[i].size() != params.tensor(i).data().size())
      fail(Err::Config, "optimizer_step: gradient shape mismatch for '" +
                            params.name(i) + "'");

  if (opt.kind == OptKind::Sgd) {
    const S lr = static_cast<S>(opt.lr);
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params.tensor(i).data();
      for (size_t j = 0; j < p.size(); ++j) p[j] -= lr * grads[i][j];
    }
    ++opt.step_count;
    return;
  }

  opt.ensure_buffers(params);
  ++opt.step_count;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step_count));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step_count));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params.tensor(i).data();
    auto& mi = opt.m[i];
    auto& vi = opt.v[i];
    for (size_t j = 0; j < p.size(); ++j) {
      const double g = static_cast<double>(grads[i][j]);
      const double mj = opt.beta1 * static_cast<double>(mi[j]) + (1.0 - opt.beta1) * g;
      const double vj = opt.beta2 * static_cast<double>(vi[j]) + (1.0 - opt.beta2) * g * g;
      mi[j] = static_cast<S>(mj);
      vi[j] = static_cast<S>(vj);
      const double update = opt.lr * (mj / bc1) / (std::sqrt(vj / bc2) + opt.eps);
      p[j] = static_cast<S>(static_cast<double>(p[j]) - update);
    }
  }
}

}  // namespace lcat
