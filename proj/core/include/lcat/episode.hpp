#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lcat/dataset.hpp"
#include "lcat/error.hpp"
#include "lcat/rng.hpp"
#include "lcat/tensor.hpp"

namespace lcat {

// One few-shot task: way classes, shot labeled support images per class and
// q query images per class, with episode-local labels in [0, way).
template <typename S>
struct BasicEpisode {
  BasicTensor<S> support_images;  // [way*shot, C, H, W]
  std::vector<int> support_labels;
  BasicTensor<S> query_images;  // [way*q, C, H, W]
  std::vector<int> query_labels;
  int way = 0;
  int shot = 0;
  int q = 0;
  std::vector<uint32_t> global_classes;  // local label -> dataset class
};

using Episode = BasicEpisode<float>;

struct SamplerConfig {
  int way = 5;
  int shot = 1;
  int q = 15;
  Split split = Split::Train;

  void validate() const {
    if (way < 2) fail(Err::Config, "sampler: way must be >= 2");
    if (shot < 1) fail(Err::Config, "sampler: shot must be >= 1");
    if (q < 1) fail(Err::Config, "sampler: q must be >= 1");
  }
};

// Caches per-class image indices so episode sampling is O(way*(shot+q)).
class EpisodeSampler {
 public:
  EpisodeSampler(const DatasetStore& store, SamplerConfig cfg)
      : store_(&store), cfg_(cfg) {
    cfg_.validate();
    split_classes_ = store.classes_in_split(cfg.split);
    class_index_ = store.class_index();
    if (static_cast<int>(split_classes_.size()) < cfg_.way)
      fail(Err::Config, "sampler: split '" + std::string(split_name(cfg_.split)) +
                            "' has " + std::to_string(split_classes_.size()) +
                            " classes, need way=" + std::to_string(cfg_.way));
    const size_t need = static_cast<size_t>(cfg_.shot + cfg_.q);
    for (uint32_t c : split_classes_)
      if (class_index_[c].size() < need)
        fail(Err::Config, "sampler: class " + std::to_string(c) + " has " +
                              std::to_string(class_index_[c].size()) +
                              " images, need shot+q=" + std::to_string(need));
  }

  const SamplerConfig& config() const { return cfg_; }

  Episode sample(Rng& rng) const {
    const auto& store = *store_;
    const int64_t img_size = store.image_size();
    Episode ep;
    ep.way = cfg_.way;
    ep.shot = cfg_.shot;
    ep.q = cfg_.q;

    // Uniform class choice without replacement (partial Fisher-Yates).
    std::vector<uint32_t> pool = split_classes_;
    for (int i = 0; i < cfg_.way; ++i) {
      const size_t j = static_cast<size_t>(i) +
                       rng.bounded(pool.size() - static_cast<size_t>(i));
      std::swap(pool[static_cast<size_t>(i)], pool[j]);
      ep.global_classes.push_back(pool[static_cast<size_t>(i)]);
    }

    const int64_t n_support = static_cast<int64_t>(cfg_.way) * cfg_.shot;
    const int64_t n_query = static_cast<int64_t>(cfg_.way) * cfg_.q;
    ep.support_images = Tensor::zeros(
        {n_support, store.channels, store.height, store.width});
    ep.query_images =
        Tensor::zeros({n_query, store.channels, store.height, store.width});
    ep.support_labels.reserve(static_cast<size_t>(n_support));
    ep.query_labels.reserve(static_cast<size_t>(n_query));

    for (int local = 0; local < cfg_.way; ++local) {
      const uint32_t cls = ep.global_classes[static_cast<size_t>(local)];
      std::vector<uint32_t> imgs = class_index_[cls];
      const int take = cfg_.shot + cfg_.q;
      for (int i = 0; i < take; ++i) {
        const size_t j = static_cast<size_t>(i) +
                         rng.bounded(imgs.size() - static_cast<size_t>(i));
        std::swap(imgs[static_cast<size_t>(i)], imgs[j]);
      }
      for (int s = 0; s < cfg_.shot; ++s) {
        const int64_t row = static_cast<int64_t>(local) * cfg_.shot + s;
        std::copy_n(store.image(imgs[static_cast<size_t>(s)]), img_size,
                    ep.support_images.data().begin() + row * img_size);
        ep.support_labels.push_back(local);
      }
      for (int k = 0; k < cfg_.q; ++k) {
        const int64_t row = static_cast<int64_t>(local) * cfg_.q + k;
        std::copy_n(store.image(imgs[static_cast<size_t>(cfg_.shot + k)]), img_size,
                    ep.query_images.data().begin() + row * img_size);
        ep.query_labels.push_back(local);
      }
    }
    return ep;
  }

  std::vector<Episode> sample_batch(int n, Rng& rng) const {
    if (n < 0) fail(Err::Config, "sampler: batch size must be >= 0");
    std::vector<Episode> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(sample(rng));
    return out;
  }

 private:
  const DatasetStore* store_;
  SamplerConfig cfg_;
  std::vector<uint32_t> split_classes_;
  std::vector<std::vector<uint32_t>> class_index_;
};

inline Episode sample_episode(const DatasetStore& store, const SamplerConfig& cfg,
                              Rng& rng) {
  return EpisodeSampler(store, cfg).sample(rng);
}

inline std::vector<Episode> sample_batch(const DatasetStore& store,
                                         const SamplerConfig& cfg, int n,
                                         Rng& rng) {
  return EpisodeSampler(store, cfg).sample_batch(n, rng);
}

// Converts an episode's scalar type (float episodes feed the float training
// path; tests run the same episodes in double for gradient checks).
template <typename To, typename From>
BasicEpisode<To> episode_cast(const BasicEpisode<From>& ep) {
  BasicEpisode<To> out;
  auto cast_tensor = [](const BasicTensor<From>& t) {
    std::vector<To> data(t.data().begin(), t.data().end());
    return BasicTensor<To>::from_data(t.shape(), std::move(data));
  };
  out.support_images = cast_tensor(ep.support_images);
  out.query_images = cast_tensor(ep.query_images);
  out.support_labels = ep.support_labels;
  out.query_labels = ep.query_labels;
  out.way = ep.way;
  out.shot = ep.shot;
  out.q = ep.q;
  out.global_classes = ep.global_classes;
  return out;
}

}  // namespace lcat
