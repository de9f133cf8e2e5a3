#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "lcat/episode.hpp"
#include "lcat/error.hpp"
#include "lcat/ops.hpp"
#include "lcat/params.hpp"
#include "lcat/rng.hpp"
#include "lcat/tensor.hpp"

namespace lcat {

enum class HeadKind { Proto, Ridge };

inline const char* head_name(HeadKind h) {
  return h == HeadKind::Proto ? "proto" : "ridge";
}

struct EmbeddingNetConfig {
  int blocks = 3;
  std::vector<int> channels = {8, 16, 16};
  int kernel = 3;
  bool denoise = true;

  void validate() const {
    if (blocks < 1) fail(Err::Config, "model: blocks must be >= 1");
    if (static_cast<int>(channels.size()) != blocks)
      fail(Err::Config, "model: channels list must have one entry per block");
    for (int c : channels)
      if (c < 1) fail(Err::Config, "model: channels must be positive");
    if (kernel < 1 || kernel % 2 == 0)
      fail(Err::Config, "model: kernel size must be odd and positive");
  }

  // Spatial extent after each block's 2x2 mean pool.
  int64_t embedding_dim(int64_t height, int64_t width) const {
    int64_t h = height, w = width;
    for (int b = 0; b < blocks; ++b) {
      if (h < 2 || w < 2)
        fail(Err::Config, "model: input " + std::to_string(height) + "x" +
                              std::to_string(width) + " too small for " +
                              std::to_string(blocks) + " pooled blocks");
      h /= 2;
      w /= 2;
    }
    const int64_t dim = channels.back() * h * w;
    if (dim < 2) fail(Err::Config, "model: embedding_dim must be >= 2");
    return dim;
  }
};

struct HeadConfig {
  HeadKind kind = HeadKind::Proto;
  double ridge_lambda = 1.0;
  double ridge_logit_scale = 1.0;

  void validate() const {
    if (kind == HeadKind::Ridge && !(ridge_lambda > 0.0))
      fail(Err::Config, "model: ridge_lambda must be > 0");
  }
};

// Residual feature smoothing: out = features + projection (*) boxmean3x3(features).
// A zero projection makes the block an exact identity.
template <typename S>
BasicTensor<S> denoise_forward(BasicTape<S>& tape, const BasicTensor<S>& features,
                               const BasicTensor<S>& projection) {
  auto smoothed = box_mean3(tape, features);
  auto projected = conv2d(tape, smoothed, projection, /*stride=*/1, /*padding=*/0);
  return add(tape, features, projected);
}

// He-uniform conv kernels, zero biases, zero denoise projections (identity
// denoise at initialization). Draw order is fixed so that toggling denoise
// does not shift the kernel stream.
template <typename S>
BasicModelParams<S> init_embedding_params(const EmbeddingNetConfig& cfg,
                                          int64_t in_channels, Rng& rng) {
  cfg.validate();
  BasicModelParams<S> params;
  int64_t prev = in_channels;
  for (int b = 0; b < cfg.blocks; ++b) {
    const int64_t out_ch = cfg.channels[static_cast<size_t>(b)];
    const int64_t fan_in = prev * cfg.kernel * cfg.kernel;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    auto kernel = BasicTensor<S>::zeros({out_ch, prev, cfg.kernel, cfg.kernel}, true);
    for (auto& v : kernel.data())
      v = static_cast<S>(rng.uniform(-bound, bound));
    params.add("block" + std::to_string(b) + ".kernel", kernel);
    params.add("block" + std::to_string(b) + ".bias",
               BasicTensor<S>::zeros({out_ch}, true));
    if (cfg.denoise)
      params.add("block" + std::to_string(b) + ".denoise",
                 BasicTensor<S>::zeros({out_ch, out_ch, 1, 1}, true));
    prev = out_ch;
  }
  return params;
}

// conv -> (denoise) -> relu -> 2x2 mean pool per block, then flatten.
template <typename S>
BasicTensor<S> embed_forward(BasicTape<S>& tape, const BasicModelParams<S>& params,
                             const EmbeddingNetConfig& cfg,
                             const BasicTensor<S>& images) {
  if (images.ndim() != 4)
    fail(Err::Shape, "embed_forward: expected [B,C,H,W], got " +
                         shape_str(images.shape()));
  auto x = images;
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    x = conv2d(tape, x, params.at(prefix + "kernel"), /*stride=*/1,
               /*padding=*/cfg.kernel / 2);
    x = bias_add_channels(tape, x, params.at(prefix + "bias"));
    if (cfg.denoise) x = denoise_forward(tape, x, params.at(prefix + "denoise"));
    x = relu(tape, x);
    x = mean_pool2(tape, x);
  }
  return reshape(tape, x, {x.dim(0), x.numel() / x.dim(0)});
}

// Task-adapted classifier: base parameters plus head state fit on one
// episode's support set. The head state is a pure function of (theta,
// support); gradients flow through it back to theta.
template <typename S>
struct BasicTaskAdaptedModel {
  const BasicModelParams<S>* params = nullptr;
  std::shared_ptr<const BasicModelParams<S>> owned_params;  // set on detach
  EmbeddingNetConfig net;
  HeadConfig head;
  BasicTensor<S> head_state;  // proto: prototypes [way,D]; ridge: weights [D,way]
  int way = 0;
};

using TaskAdaptedModel = BasicTaskAdaptedModel<float>;

template <typename S>
BasicTaskAdaptedModel<S> fine_tune(BasicTape<S>& tape,
                                   const BasicModelParams<S>& params,
                                   const EmbeddingNetConfig& net_cfg,
                                   const HeadConfig& head_cfg,
                                   const BasicEpisode<S>& episode) {
  head_cfg.validate();
  BasicTaskAdaptedModel<S> adapted;
  adapted.params = &params;
  adapted.net = net_cfg;
  adapted.head = head_cfg;
  adapted.way = episode.way;

  auto support_emb = embed_forward(tape, params, net_cfg, episode.support_images);
  const int64_t n_support = support_emb.dim(0);
  const int64_t way = episode.way;

  if (head_cfg.kind == HeadKind::Proto) {
    // Class means as a constant averaging matrix: protos = M^T E with
    // M[b,k] = 1/shot when support b belongs to class k.
    auto averager = BasicTensor<S>::zeros({way, n_support});
    for (int64_t b = 0; b < n_support; ++b) {
      const int cls = episode.support_labels[static_cast<size_t>(b)];
      averager.data()[static_cast<size_t>(cls * n_support + b)] =
          S(1) / static_cast<S>(episode.shot);
    }
    adapted.head_state = matmul(tape, averager, support_emb);
  } else {
    // Dual-form ridge: W = X^T (X X^T + lambda I)^-1 Y.
    auto xt = transpose(tape, support_emb);
    auto gram = matmul(tape, support_emb, xt);
    auto reg = BasicTensor<S>::identity(n_support);
    for (auto& v : reg.data()) v *= static_cast<S>(head_cfg.ridge_lambda);
    auto system = add(tape, gram, reg);
    auto one_hot = BasicTensor<S>::zeros({n_support, way});
    for (int64_t b = 0; b < n_support; ++b)
      one_hot.data()[static_cast<size_t>(
          b * way + episode.support_labels[static_cast<size_t>(b)])] = S(1);
    adapted.head_state =
        matmul(tape, xt, matmul(tape, mat_inverse(tape, system), one_hot));
  }
  return adapted;
}

// proto: logit_k = -|embed(x) - c_k|^2; ridge: logits = embed(x) W * scale.
template <typename S>
BasicTensor<S> head_logits(BasicTape<S>& tape,
                           const BasicTaskAdaptedModel<S>& adapted,
                           const BasicTensor<S>& query_images) {
  auto emb = embed_forward(tape, *adapted.params, adapted.net, query_images);
  if (adapted.head.kind == HeadKind::Proto) {
    return scale(tape, pairwise_sqdist(tape, emb, adapted.head_state), S(-1));
  }
  auto logits = matmul(tape, emb, adapted.head_state);
  const S s = static_cast<S>(adapted.head.ridge_logit_scale);
  return s == S(1) ? logits : scale(tape, logits, s);
}

// Constant-parameter copy for attack loops: gradients of attack objectives
// must reach the attacked pixels only, never theta.
template <typename S>
BasicTaskAdaptedModel<S> detach_adapted(const BasicTaskAdaptedModel<S>& adapted) {
  BasicTaskAdaptedModel<S> out;
  auto frozen = std::make_shared<BasicModelParams<S>>();
  for (size_t i = 0; i < adapted.params->size(); ++i)
    frozen->add(adapted.params->name(i), adapted.params->tensor(i).detached());
  out.owned_params = frozen;
  out.params = frozen.get();
  out.net = adapted.net;
  out.head = adapted.head;
  out.head_state = adapted.head_state.detached();
  out.way = adapted.way;
  return out;
}

}  // namespace lcat
