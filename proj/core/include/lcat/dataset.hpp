#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lcat/rng.hpp"

namespace lcat {

enum class Split : uint32_t { Train = 0, Val = 1, Test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

// Immutable image dataset: float32 pixels in [0,1], [N,C,H,W] row-major,
// one global class label per image, one split code per class.
struct DatasetStore {
  int64_t count = 0;     // N
  int64_t channels = 0;  // C
  int64_t height = 0;    // H
  int64_t width = 0;     // W
  std::vector<float> pixels;        // N*C*H*W
  std::vector<uint32_t> labels;     // N
  std::vector<Split> class_splits;  // num_classes

  int64_t num_classes() const { return static_cast<int64_t>(class_splits.size()); }
  int64_t image_size() const { return channels * height * width; }

  const float* image(int64_t i) const { return pixels.data() + i * image_size(); }

  std::vector<uint32_t> classes_in_split(Split split) const {
    std::vector<uint32_t> out;
    for (size_t c = 0; c < class_splits.size(); ++c)
      if (class_splits[c] == split) out.push_back(static_cast<uint32_t>(c));
    return out;
  }

  // Image indices per class, in ascending image order.
  std::vector<std::vector<uint32_t>> class_index() const {
    std::vector<std::vector<uint32_t>> idx(class_splits.size());
    for (int64_t i = 0; i < count; ++i)
      idx[labels[static_cast<size_t>(i)]].push_back(static_cast<uint32_t>(i));
    return idx;
  }
};

struct SyntheticConfig {
  int64_t num_classes = 20;
  int64_t images_per_class = 30;
  int64_t height = 16;
  int64_t width = 16;
  int64_t channels = 1;
  double noise_std = 0.1;
  double test_fraction = 0.25;
  double val_fraction = 0.0;
  uint64_t seed = 0;
};

// Builds a synthetic few-shot dataset. Each class gets a deterministic
// low-frequency template (sum of random 2-d cosines rescaled into
// [0.2, 0.8]); images are the template plus Gaussian pixel noise, clipped to
// [0,1]. Trailing classes are assigned to test (and val, when configured).
DatasetStore generate_synthetic(const SyntheticConfig& cfg);

// FSB v1 binary dataset format (little-endian):
//   magic "FSB1" | u32 N,C,H,W,num_classes | N*C*H*W f32 pixels |
//   N u32 labels | num_classes u32 split codes {0=train,1=val,2=test}
void save_fsb(const DatasetStore& store, const std::string& path);
DatasetStore load_fsb(const std::string& path);

}  // namespace lcat
