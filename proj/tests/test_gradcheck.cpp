// Finite-difference verification of every registered op's backward rule and
// of the end-to-end episodic loss through head adaptation, in 64-bit mode.

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "lcat/episode.hpp"
#include "lcat/model.hpp"
#include "lcat/ops.hpp"
#include "lcat/trainer.hpp"

using namespace lcat;
using namespace lcat::test;

namespace {
constexpr int kSeeds = 20;
}

TEST(GradCheck, Add) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s);
    expect_gradcheck({random_dtensor({3, 4}, rng), random_dtensor({3, 4}, rng)},
                     [](DTape& t, const std::vector<DTensor>& in) {
                       return sum(t, mul(t, add(t, in[0], in[1]), in[0]));
                     });
  }
}

TEST(GradCheck, SubMulScale) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 100);
    expect_gradcheck({random_dtensor({2, 5}, rng), random_dtensor({2, 5}, rng)},
                     [](DTape& t, const std::vector<DTensor>& in) {
                       auto d = sub(t, in[0], in[1]);
                       return sum(t, scale(t, mul(t, d, d), 0.5));
                     });
  }
}

TEST(GradCheck, Relu) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 200);
    auto x = random_dtensor_away_from({4, 4}, rng, 0.05, {0.0});
    expect_gradcheck({x}, [](DTape& t, const std::vector<DTensor>& in) {
      return sum(t, mul(t, relu(t, in[0]), in[0]));
    });
  }
}

TEST(GradCheck, Clip) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 300);
    auto x = random_dtensor_away_from({4, 4}, rng, 0.05, {-0.5, 0.5});
    expect_gradcheck({x}, [](DTape& t, const std::vector<DTensor>& in) {
      return sum(t, mul(t, clip(t, in[0], -0.5, 0.5), in[0]));
    });
  }
}

TEST(GradCheck, AddScalar) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 350);
    expect_gradcheck({random_dtensor({6}, rng)},
                     [](DTape& t, const std::vector<DTensor>& in) {
                       auto y = add_scalar(t, in[0], 0.7);
                       return sum(t, mul(t, y, y));
                     });
  }
}

TEST(GradCheck, MatmulTranspose) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 400);
    expect_gradcheck({random_dtensor({3, 4}, rng), random_dtensor({4, 2}, rng)},
                     [](DTape& t, const std::vector<DTensor>& in) {
                       auto prod = matmul(t, in[0], in[1]);
                       auto sym = matmul(t, prod, transpose(t, prod));
                       return sum(t, sym);
                     });
  }
}

TEST(GradCheck, Conv2dStride1Padded) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 500);
    expect_gradcheck(
        {random_dtensor({2, 2, 5, 4}, rng), random_dtensor({3, 2, 3, 3}, rng)},
        [](DTape& t, const std::vector<DTensor>& in) {
          auto y = conv2d(t, in[0], in[1], 1, 1);
          return sum(t, mul(t, y, y));
        });
  }
}

TEST(GradCheck, Conv2dStride2NoPad) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 600);
    expect_gradcheck(
        {random_dtensor({1, 2, 6, 6}, rng), random_dtensor({2, 2, 3, 3}, rng)},
        [](DTape& t, const std::vector<DTensor>& in) {
          auto y = conv2d(t, in[0], in[1], 2, 0);
          return sum(t, mul(t, y, y));
        });
  }
}

TEST(GradCheck, BiasAddChannels) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 700);
    expect_gradcheck(
        {random_dtensor({2, 3, 2, 2}, rng), random_dtensor({3}, rng)},
        [](DTape& t, const std::vector<DTensor>& in) {
          auto y = bias_add_channels(t, in[0], in[1]);
          return sum(t, mul(t, y, y));
        });
  }
}

TEST(GradCheck, MeanPool2) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 800);
    expect_gradcheck({random_dtensor({2, 2, 4, 6}, rng)},
                     [](DTape& t, const std::vector<DTensor>& in) {
                       auto y = mean_pool2(t, in[0]);
                       return sum(t, mul(t, y, y));
                     });
  }
}

TEST(GradCheck, BoxMean3) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 900);
    expect_gradcheck({random_dtensor({1, 2, 4, 5}, rng)},
                     [](DTape& t, const std::vector<DTensor>& in) {
                       auto y = box_mean3(t, in[0]);
                       return sum(t, mul(t, y, y));
                     });
  }
}

TEST(GradCheck, Reshape) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 1000);
    expect_gradcheck({random_dtensor({2, 6}, rng)},
                     [](DTape& t, const std::vector<DTensor>& in) {
                       auto y = reshape(t, in[0], {3, 4});
                       return sum(t, mul(t, y, y));
                     });
  }
}

TEST(GradCheck, PairwiseSqdist) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 1100);
    expect_gradcheck({random_dtensor({3, 4}, rng), random_dtensor({2, 4}, rng)},
                     [](DTape& t, const std::vector<DTensor>& in) {
                       return sum(t, pairwise_sqdist(t, in[0], in[1]));
                     });
  }
}

TEST(GradCheck, MatInverse) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 1200);
    auto a = random_dtensor({3, 3}, rng);
    for (int64_t i = 0; i < 3; ++i) a.data()[static_cast<size_t>(i * 3 + i)] += 3.0;
    expect_gradcheck({a}, [](DTape& t, const std::vector<DTensor>& in) {
      auto inv = mat_inverse(t, in[0]);
      return sum(t, mul(t, inv, inv));
    });
  }
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 1300);
    expect_gradcheck({random_dtensor({3, 5}, rng, -2.0, 2.0)},
                     [](DTape& t, const std::vector<DTensor>& in) {
                       return softmax_cross_entropy(t, in[0], {4, 0, 2});
                     });
  }
}

TEST(GradCheck, KlDivergenceBothArguments) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 1400);
    expect_gradcheck(
        {random_dtensor({2, 4}, rng, -2.0, 2.0),
         random_dtensor({2, 4}, rng, -2.0, 2.0)},
        [](DTape& t, const std::vector<DTensor>& in) {
          return kl_divergence(t, in[0], in[1]);
        });
  }
}

TEST(GradCheck, DenoiseBlock) {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 1500);
    expect_gradcheck(
        {random_dtensor({1, 2, 4, 4}, rng), random_dtensor({2, 2, 1, 1}, rng)},
        [](DTape& t, const std::vector<DTensor>& in) {
          auto y = denoise_forward(t, in[0], in[1]);
          return sum(t, mul(t, y, y));
        });
  }
}

namespace {

// Tiny episode in double precision: way=2, 2x2 single-channel images.
BasicEpisode<double> tiny_episode(Rng& rng, int shot, int q) {
  BasicEpisode<double> ep;
  ep.way = 2;
  ep.shot = shot;
  ep.q = q;
  ep.support_images = random_dtensor({2 * shot, 1, 2, 2}, rng, 0.0, 1.0);
  ep.query_images = random_dtensor({2 * q, 1, 2, 2}, rng, 0.0, 1.0);
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < shot; ++i) ep.support_labels.push_back(c);
    for (int i = 0; i < q; ++i) ep.query_labels.push_back(c);
  }
  ep.global_classes = {0, 1};
  return ep;
}

EmbeddingNetConfig tiny_net(bool denoise) {
  EmbeddingNetConfig net;
  net.blocks = 1;
  net.channels = {3};
  net.kernel = 3;
  net.denoise = denoise;
  return net;
}

}  // namespace

// End-to-end gradient of the episodic query loss w.r.t. theta (through the
// adaptation) and w.r.t. the images, on a tiny net (embedding_dim=3, way=2).
TEST(GradCheck, EndToEndEpisodicLoss) {
  for (HeadKind kind : {HeadKind::Proto, HeadKind::Ridge}) {
    for (bool denoise : {false, true}) {
      for (uint64_t s = 0; s < 5; ++s) {
        Rng rng(s + 1600);
        const auto net = tiny_net(denoise);
        auto params = init_embedding_params<double>(net, 1, rng);
        HeadConfig head;
        head.kind = kind;
        auto ep = tiny_episode(rng, 2, 2);

        std::vector<DTensor> inputs;
        std::vector<std::string> names;
        for (size_t i = 0; i < params.size(); ++i) {
          inputs.push_back(params.tensor(i).clone());
          names.push_back(params.name(i));
        }
        inputs.push_back(ep.support_images.clone());
        inputs.push_back(ep.query_images.clone());

        expect_gradcheck(
            inputs,
            [&](DTape& t, const std::vector<DTensor>& in) {
              BasicModelParams<double> p;
              for (size_t i = 0; i < names.size(); ++i) p.add(names[i], in[i]);
              BasicEpisode<double> e = ep;
              e.support_images = in[names.size()];
              e.query_images = in[names.size() + 1];
              auto adapted = fine_tune(t, p, net, head, e);
              auto logits = head_logits(t, adapted, e.query_images);
              return softmax_cross_entropy(t, logits, e.query_labels);
            });
      }
    }
  }
}

// The full adversarial-phase objective is differentiable end to end
// (gradients flow through the clean-support adaptation; tau' images are
// attack outputs and enter as constants).
TEST(GradCheck, TradesCompositeLoss) {
  for (uint64_t s = 0; s < 5; ++s) {
    Rng rng(s + 1700);
    const auto net = tiny_net(false);
    auto params = init_embedding_params<double>(net, 1, rng);
    HeadConfig head;
    auto ep = tiny_episode(rng, 1, 2);
    auto adv_queries = random_dtensor({4, 1, 2, 2}, rng, 0.0, 1.0);

    std::vector<DTensor> inputs;
    std::vector<std::string> names;
    for (size_t i = 0; i < params.size(); ++i) {
      inputs.push_back(params.tensor(i).clone());
      names.push_back(params.name(i));
    }

    expect_gradcheck(
        inputs,
        [&](DTape& t, const std::vector<DTensor>& in) {
          BasicModelParams<double> p;
          for (size_t i = 0; i < names.size(); ++i) p.add(names[i], in[i]);
          auto adapted = fine_tune(t, p, net, head, ep);
          auto clean_logits = head_logits(t, adapted, ep.query_images);
          auto adv_logits = head_logits(t, adapted, adv_queries);
          return trades_loss(t, clean_logits, adv_logits, ep.query_labels, 6.0);
        });
  }
}
