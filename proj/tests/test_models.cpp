#include "lcat/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "lcat/episode.hpp"
#include "lcat/ops.hpp"

using namespace lcat;

namespace {

EmbeddingNetConfig tiny_net(bool denoise = false) {
  EmbeddingNetConfig net;
  net.blocks = 1;
  net.channels = {3};
  net.kernel = 3;
  net.denoise = denoise;
  return net;
}

Episode episode_from(Tensor support, std::vector<int> support_labels,
                     Tensor query, std::vector<int> query_labels, int way,
                     int shot, int q) {
  Episode ep;
  ep.support_images = std::move(support);
  ep.support_labels = std::move(support_labels);
  ep.query_images = std::move(query);
  ep.query_labels = std::move(query_labels);
  ep.way = way;
  ep.shot = shot;
  ep.q = q;
  return ep;
}

Tensor random_images(Shape shape, uint64_t seed) {
  Rng rng(seed);
  auto t = Tensor::zeros(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.next_double());
  return t;
}

// Plain Gaussian-elimination solve, independent of the autodiff path.
std::vector<double> solve_linear(std::vector<double> a, std::vector<double> b,
                                 int n, int rhs) {
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(a[static_cast<size_t>(r * n + col)]) >
          std::abs(a[static_cast<size_t>(pivot * n + col)]))
        pivot = r;
    for (int j = 0; j < n; ++j)
      std::swap(a[static_cast<size_t>(col * n + j)], a[static_cast<size_t>(pivot * n + j)]);
    for (int j = 0; j < rhs; ++j)
      std::swap(b[static_cast<size_t>(col * rhs + j)], b[static_cast<size_t>(pivot * rhs + j)]);
    const double d = a[static_cast<size_t>(col * n + col)];
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      const double factor = a[static_cast<size_t>(r * n + col)] / d;
      for (int j = 0; j < n; ++j)
        a[static_cast<size_t>(r * n + j)] -= factor * a[static_cast<size_t>(col * n + j)];
      for (int j = 0; j < rhs; ++j)
        b[static_cast<size_t>(r * rhs + j)] -= factor * b[static_cast<size_t>(col * rhs + j)];
    }
  }
  std::vector<double> x(static_cast<size_t>(n * rhs));
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < rhs; ++j)
      x[static_cast<size_t>(r * rhs + j)] =
          b[static_cast<size_t>(r * rhs + j)] / a[static_cast<size_t>(r * n + r)];
  return x;
}

}  // namespace

TEST(EmbeddingNet, ZeroInputZeroParamsGiveZeroEmbedding) {
  const auto net = tiny_net();
  ModelParams params;
  params.add("block0.kernel", Tensor::zeros({3, 1, 3, 3}, true));
  params.add("block0.bias", Tensor::zeros({3}, true));
  Tape tape;
  auto emb = embed_forward(tape, params, net, Tensor::zeros({2, 1, 2, 2}));
  for (float v : emb.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(emb.shape(), (Shape{2, 3}));
}

TEST(EmbeddingNet, DenoiseDisabledEqualsZeroProjectionBitExact) {
  // Zero-initialized projections draw nothing from the rng, so both nets
  // share identical kernels under one seed.
  Rng rng_a(7), rng_b(7);
  auto params_on = init_embedding_params<float>(tiny_net(true), 1, rng_a);
  auto params_off = init_embedding_params<float>(tiny_net(false), 1, rng_b);
  EXPECT_EQ(params_on.at("block0.kernel").data(),
            params_off.at("block0.kernel").data());
  const auto images = random_images({4, 1, 4, 4}, 3);
  Tape ta, tb;
  auto on = embed_forward(ta, params_on, tiny_net(true), images);
  auto off = embed_forward(tb, params_off, tiny_net(false), images);
  EXPECT_EQ(on.data(), off.data());
}

TEST(Denoise, ZeroProjectionIsIdentity) {
  const auto features = random_images({2, 3, 4, 4}, 5);
  Tape tape;
  auto out = denoise_forward(tape, features, Tensor::zeros({3, 3, 1, 1}));
  EXPECT_EQ(out.data(), features.data());
}

TEST(Denoise, IdentityProjectionDoublesConstantInterior) {
  auto features = Tensor::full({1, 2, 5, 5}, 0.75f);
  auto proj = Tensor::zeros({2, 2, 1, 1});
  proj.data()[0] = 1.0f;  // channel 0 -> channel 0
  proj.data()[3] = 1.0f;  // channel 1 -> channel 1
  Tape tape;
  auto out = denoise_forward(tape, features, proj);
  // Interior cells (full 9-neighborhood): c -> 2c.
  for (int ch = 0; ch < 2; ++ch)
    for (int i = 1; i < 4; ++i)
      for (int j = 1; j < 4; ++j)
        EXPECT_NEAR(out.data()[static_cast<size_t>((ch * 5 + i) * 5 + j)], 1.5f,
                    1e-6f);
  // Corner keeps 4/9 of the box mass: c + 4c/9.
  EXPECT_NEAR(out.data()[0], 0.75f + 0.75f * 4.0f / 9.0f, 1e-6f);
}

TEST(FineTune, ProtoShot1PrototypesAreSupportEmbeddings) {
  const auto net = tiny_net();
  Rng rng(11);
  auto params = init_embedding_params<float>(net, 1, rng);
  auto ep = episode_from(random_images({2, 1, 2, 2}, 13), {0, 1},
                         random_images({2, 1, 2, 2}, 17), {0, 1}, 2, 1, 1);
  Tape tape;
  auto adapted = fine_tune(tape, params, net, HeadConfig{}, ep);
  auto emb = embed_forward(tape, params, net, ep.support_images);
  EXPECT_EQ(adapted.head_state.shape(), (Shape{2, 3}));
  for (size_t i = 0; i < emb.data().size(); ++i)
    EXPECT_FLOAT_EQ(adapted.head_state.data()[i], emb.data()[i]);
}

TEST(FineTune, ProtoShot2PrototypesAreMeans) {
  const auto net = tiny_net();
  Rng rng(19);
  auto params = init_embedding_params<float>(net, 1, rng);
  auto ep = episode_from(random_images({4, 1, 2, 2}, 23), {0, 0, 1, 1},
                         random_images({2, 1, 2, 2}, 29), {0, 1}, 2, 2, 1);
  Tape tape;
  auto adapted = fine_tune(tape, params, net, HeadConfig{}, ep);
  auto emb = embed_forward(tape, params, net, ep.support_images);
  for (int cls = 0; cls < 2; ++cls)
    for (int d = 0; d < 3; ++d) {
      const float mean = (emb.data()[static_cast<size_t>((2 * cls) * 3 + d)] +
                          emb.data()[static_cast<size_t>((2 * cls + 1) * 3 + d)]) /
                         2.0f;
      EXPECT_NEAR(adapted.head_state.data()[static_cast<size_t>(cls * 3 + d)],
                  mean, 1e-6f);
    }
}

TEST(FineTune, LeavesThetaBitIdentical) {
  const auto net = tiny_net(true);
  Rng rng(31);
  auto params = init_embedding_params<float>(net, 1, rng);
  const auto before = params.snapshot();
  auto ep = episode_from(random_images({4, 1, 2, 2}, 37), {0, 0, 1, 1},
                         random_images({2, 1, 2, 2}, 41), {0, 1}, 2, 2, 1);
  for (HeadKind kind : {HeadKind::Proto, HeadKind::Ridge}) {
    Tape tape;
    HeadConfig head;
    head.kind = kind;
    (void)fine_tune(tape, params, net, head, ep);
    const auto after = params.snapshot();
    ASSERT_EQ(before.size(), after.size());
    for (size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);
  }
}

TEST(FineTune, RidgeLambdaValidation) {
  const auto net = tiny_net();
  Rng rng(43);
  auto params = init_embedding_params<float>(net, 1, rng);
  auto ep = episode_from(random_images({2, 1, 2, 2}, 47), {0, 1},
                         random_images({2, 1, 2, 2}, 53), {0, 1}, 2, 1, 1);
  Tape tape;
  HeadConfig head;
  head.kind = HeadKind::Ridge;
  head.ridge_lambda = 0.0;
  EXPECT_THROW((void)fine_tune(tape, params, net, head, ep), Error);
  head.ridge_lambda = -1.0;
  EXPECT_THROW((void)fine_tune(tape, params, net, head, ep), Error);
}

// Ridge closed form on X = I2, Y = I2, lambda = 1: W = 0.5 * I2.
TEST(Ridge, ClosedFormIdentitySystem) {
  BasicTape<double> tape;
  auto x = BasicTensor<double>::identity(2);
  auto xt = transpose(tape, x);
  auto gram = matmul(tape, x, xt);
  auto reg = BasicTensor<double>::identity(2);
  auto system = add(tape, gram, reg);
  auto w = matmul(tape, xt,
                  matmul(tape, mat_inverse(tape, system),
                         BasicTensor<double>::identity(2)));
  EXPECT_NEAR(w.data()[0], 0.5, 1e-12);
  EXPECT_NEAR(w.data()[1], 0.0, 1e-12);
  EXPECT_NEAR(w.data()[2], 0.0, 1e-12);
  EXPECT_NEAR(w.data()[3], 0.5, 1e-12);
}

// Dual form X^T (XX^T + lI)^-1 Y equals primal (X^TX + lI)^-1 X^T Y on 50
// random systems, against an independent Gaussian-elimination solver.
TEST(Ridge, DualPrimalEquivalence) {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed + 1000);
    const int b = 5, d = 3, k = 2;
    const double lambda = 0.5 + rng.next_double();
    std::vector<double> x(static_cast<size_t>(b * d));
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    std::vector<double> y(static_cast<size_t>(b * k), 0.0);
    for (int i = 0; i < b; ++i)
      y[static_cast<size_t>(i * k + (i % k))] = 1.0;

    // Dual route through the library ops.
    BasicTape<double> tape;
    auto xt2 = BasicTensor<double>::from_data({b, d}, x);
    auto yt = BasicTensor<double>::from_data({b, k}, y);
    auto xtr = transpose(tape, xt2);
    auto gram = matmul(tape, xt2, xtr);
    auto reg = BasicTensor<double>::identity(b);
    for (auto& v : reg.data()) v *= lambda;
    auto w_dual = matmul(
        tape, xtr, matmul(tape, mat_inverse(tape, add(tape, gram, reg)), yt));

    // Primal route via the independent solver: (X^TX + lI) W = X^T Y.
    std::vector<double> xtx(static_cast<size_t>(d * d), 0.0);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        for (int r = 0; r < b; ++r)
          xtx[static_cast<size_t>(i * d + j)] +=
              x[static_cast<size_t>(r * d + i)] * x[static_cast<size_t>(r * d + j)];
        if (i == j) xtx[static_cast<size_t>(i * d + j)] += lambda;
      }
    std::vector<double> xty(static_cast<size_t>(d * k), 0.0);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < k; ++j)
        for (int r = 0; r < b; ++r)
          xty[static_cast<size_t>(i * k + j)] +=
              x[static_cast<size_t>(r * d + i)] * y[static_cast<size_t>(r * k + j)];
    const auto w_primal = solve_linear(xtx, xty, d, k);

    for (size_t i = 0; i < w_primal.size(); ++i)
      EXPECT_NEAR(w_dual.data()[i], w_primal[i], 1e-4);
  }
}

TEST(HeadLogits, ProtoDistanceExamples) {
  // Prototypes [1,0] and [0,1], query embedding [1,0] -> logits [0, -2].
  BasicTaskAdaptedModel<float> adapted;
  adapted.head.kind = HeadKind::Proto;
  adapted.way = 2;
  adapted.head_state = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tape tape;
  auto emb = Tensor::from_data({1, 2}, {1, 0});
  auto logits = scale(tape, pairwise_sqdist(tape, emb, adapted.head_state), -1.0f);
  EXPECT_FLOAT_EQ(logits.data()[0], 0.0f);
  EXPECT_FLOAT_EQ(logits.data()[1], -2.0f);
  EXPECT_EQ(argmax_rows(logits)[0], 0);
}

TEST(HeadLogits, RidgeMatrixProductExample) {
  // W = 0.5*I2, query embedding [1,0] -> logits [0.5, 0].
  Tape tape;
  auto w = Tensor::from_data({2, 2}, {0.5f, 0.0f, 0.0f, 0.5f});
  auto emb = Tensor::from_data({1, 2}, {1, 0});
  auto logits = matmul(tape, emb, w);
  EXPECT_FLOAT_EQ(logits.data()[0], 0.5f);
  EXPECT_FLOAT_EQ(logits.data()[1], 0.0f);
}

// Proto logits are <= 0, equal to 0 only when the embedding hits the
// prototype exactly.
TEST(HeadLogits, ProtoLogitsNonPositive) {
  const auto net = tiny_net();
  Rng rng(61);
  auto params = init_embedding_params<float>(net, 1, rng);
  for (int trial = 0; trial < 20; ++trial) {
    auto ep = episode_from(
        random_images({2, 1, 2, 2}, 100 + static_cast<uint64_t>(trial)), {0, 1},
        random_images({4, 1, 2, 2}, 200 + static_cast<uint64_t>(trial)),
        {0, 0, 1, 1}, 2, 1, 2);
    Tape tape;
    auto adapted = fine_tune(tape, params, net, HeadConfig{}, ep);
    auto logits = head_logits(tape, adapted, ep.query_images);
    for (float v : logits.data()) EXPECT_LE(v, 0.0f);
    // Query equal to a support image reproduces its prototype: logit 0.
    auto self_logits = head_logits(tape, adapted, ep.support_images);
    EXPECT_FLOAT_EQ(self_logits.data()[0], 0.0f);
    EXPECT_LT(self_logits.data()[1], 0.0f);
  }
}

TEST(Params, SnapshotRestoreRoundTrip) {
  Rng rng(67);
  auto params = init_embedding_params<float>(tiny_net(true), 1, rng);
  const auto snap = params.snapshot();
  for (size_t i = 0; i < params.size(); ++i)
    for (auto& v : params.tensor(i).data()) v += 1.0f;
  params.restore(snap);
  const auto roundtrip = params.snapshot();
  ASSERT_EQ(snap.size(), roundtrip.size());
  for (size_t i = 0; i < snap.size(); ++i) EXPECT_EQ(snap[i], roundtrip[i]);
}

TEST(Params, FixedNameSet) {
  ModelParams params;
  params.add("a", Tensor::zeros({2}));
  EXPECT_THROW(params.add("a", Tensor::zeros({2})), Error);
  EXPECT_THROW((void)params.at("missing"), Error);
}

TEST(ModelConfig, GeometryValidation) {
  EmbeddingNetConfig net;
  net.blocks = 3;
  net.channels = {8, 16, 16};
  net.kernel = 3;
  EXPECT_EQ(net.embedding_dim(16, 16), 16 * 2 * 2);
  EXPECT_THROW((void)net.embedding_dim(4, 4), Error);
  net.kernel = 4;
  EXPECT_THROW(net.validate(), Error);
  net.kernel = 3;
  net.channels = {8};
  EXPECT_THROW(net.validate(), Error);
}
