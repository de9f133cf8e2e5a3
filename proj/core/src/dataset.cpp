#include "lcat/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "lcat/error.hpp"

namespace lcat {

namespace {

constexpr char kMagic[4] = {'F', 'S', 'B', '1'};

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char buf[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(buf), 4);
}

uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char buf[4];
  if (!is.read(reinterpret_cast<char*>(buf), 4))
    fail(Err::Format, std::string("fsb: truncated ") + what);
  return static_cast<uint32_t>(buf[0]) | (static_cast<uint32_t>(buf[1]) << 8) |
         (static_cast<uint32_t>(buf[2]) << 16) |
         (static_cast<uint32_t>(buf[3]) << 24);
}

}  // namespace

DatasetStore generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.num_classes < 10)
    fail(Err::Config, "generate_synthetic: need >= 10 classes for non-trivial "
                      "splits, got " + std::to_string(cfg.num_classes));
  if (cfg.images_per_class < 1 || cfg.height < 2 || cfg.width < 2 ||
      cfg.channels < 1)
    fail(Err::Config, "generate_synthetic: degenerate sizes");
  if (cfg.noise_std < 0.0)
    fail(Err::Config, "generate_synthetic: noise_std must be >= 0");
  if (cfg.test_fraction < 0.0 || cfg.val_fraction < 0.0 ||
      cfg.test_fraction + cfg.val_fraction >= 1.0)
    fail(Err::Config, "generate_synthetic: invalid split fractions");

  DatasetStore store;
  store.count = cfg.num_classes * cfg.images_per_class;
  store.channels = cfg.channels;
  store.height = cfg.height;
  store.width = cfg.width;
  store.pixels.resize(static_cast<size_t>(store.count * store.image_size()));
  store.labels.resize(static_cast<size_t>(store.count));

  Rng rng(cfg.seed);
  const int64_t chw = store.image_size();
  const int64_t hw = cfg.height * cfg.width;
  std::vector<float> tmpl(static_cast<size_t>(chw));

  for (int64_t cls = 0; cls < cfg.num_classes; ++cls) {
    // Class template: three random cosine products per channel,
    // rescaled to [0.2, 0.8].
    for (int64_t ch = 0; ch < cfg.channels; ++ch) {
      float* t = tmpl.data() + ch * hw;
      std::fill(t, t + hw, 0.0f);
      for (int m = 0; m < 3; ++m) {
        const double amp = rng.uniform(0.5, 1.0);
        const double fx = rng.uniform(0.5, 3.0);
        const double fy = rng.uniform(0.5, 3.0);
        const double phx = rng.uniform(0.0, 2.0 * M_PI);
        const double phy = rng.uniform(0.0, 2.0 * M_PI);
        for (int64_t y = 0; y < cfg.height; ++y)
          for (int64_t x = 0; x < cfg.width; ++x)
            t[y * cfg.width + x] += static_cast<float>(
                amp *
                std::cos(2.0 * M_PI * fx * (static_cast<double>(x) + 0.5) /
                             static_cast<double>(cfg.width) +
                         phx) *
                std::cos(2.0 * M_PI * fy * (static_cast<double>(y) + 0.5) /
                             static_cast<double>(cfg.height) +
                         phy));
      }
      float lo = t[0], hi = t[0];
      for (int64_t i = 1; i < hw; ++i) {
        lo = std::min(lo, t[i]);
        hi = std::max(hi, t[i]);
      }
      const float span = hi - lo;
      for (int64_t i = 0; i < hw; ++i)
        t[i] = span > 0.0f ? 0.2f + 0.6f * (t[i] - lo) / span : 0.5f;
    }

    for (int64_t img = 0; img < cfg.images_per_class; ++img) {
      const int64_t n = cls * cfg.images_per_class + img;
      store.labels[static_cast<size_t>(n)] = static_cast<uint32_t>(cls);
      float* dst = store.pixels.data() + n * chw;
      if (cfg.noise_std == 0.0) {
        std::memcpy(dst, tmpl.data(), static_cast<size_t>(chw) * sizeof(float));
      } else {
        for (int64_t i = 0; i < chw; ++i) {
          const float v =
              tmpl[static_cast<size_t>(i)] +
              static_cast<float>(cfg.noise_std * rng.normal());
          dst[i] = std::min(std::max(v, 0.0f), 1.0f);
        }
      }
    }
  }

  const int64_t n_test = std::llround(cfg.test_fraction * static_cast<double>(cfg.num_classes));
  const int64_t n_val = std::llround(cfg.val_fraction * static_cast<double>(cfg.num_classes));
  store.class_splits.assign(static_cast<size_t>(cfg.num_classes), Split::Train);
  for (int64_t c = cfg.num_classes - n_test; c < cfg.num_classes; ++c)
    store.class_splits[static_cast<size_t>(c)] = Split::Test;
  for (int64_t c = cfg.num_classes - n_test - n_val; c < cfg.num_classes - n_test; ++c)
    store.class_splits[static_cast<size_t>(c)] = Split::Val;
  return store;
}

void save_fsb(const DatasetStore& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(Err::Io, "fsb: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  write_u32(os, static_cast<uint32_t>(store.count));
  write_u32(os, static_cast<uint32_t>(store.channels));
  write_u32(os, static_cast<uint32_t>(store.height));
  write_u32(os, static_cast<uint32_t>(store.width));
  write_u32(os, static_cast<uint32_t>(store.num_classes()));
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(store.pixels.data()),
           static_cast<std::streamsize>(store.pixels.size() * 4));
  for (uint32_t label : store.labels) write_u32(os, label);
  for (Split s : store.class_splits) write_u32(os, static_cast<uint32_t>(s));
  if (!os) fail(Err::Io, "fsb: write failed for '" + path + "'");
}

DatasetStore load_fsb(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Err::Io, "fsb: cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    fail(Err::Format, "fsb: bad magic, not an FSB1 file");
  DatasetStore store;
  store.count = read_u32(is, "header");
  store.channels = read_u32(is, "header");
  store.height = read_u32(is, "header");
  store.width = read_u32(is, "header");
  const uint32_t num_classes = read_u32(is, "header");

  const uint64_t pixel_count = static_cast<uint64_t>(store.count) *
                               static_cast<uint64_t>(store.image_size());
  store.pixels.resize(pixel_count);
  if (pixel_count > 0 &&
      !is.read(reinterpret_cast<char*>(store.pixels.data()),
               static_cast<std::streamsize>(pixel_count * 4)))
    fail(Err::Format, "fsb: truncated pixel payload");

  store.labels.resize(static_cast<size_t>(store.count));
  for (int64_t i = 0; i < store.count; ++i) {
    const uint32_t label = read_u32(is, "label payload");
    if (label >= num_classes)
      fail(Err::Format, "fsb: label " + std::to_string(label) +
                            " out of range [0," + std::to_string(num_classes) + ")");
    store.labels[static_cast<size_t>(i)] = label;
  }
  store.class_splits.resize(num_classes);
  for (uint32_t c = 0; c < num_classes; ++c) {
    const uint32_t code = read_u32(is, "split payload");
    if (code > 2)
      fail(Err::Format, "fsb: invalid split code " + std::to_string(code));
    store.class_splits[c] = static_cast<Split>(code);
  }
  // Reject trailing bytes so truncation errors cannot hide.
  is.peek();
  if (!is.eof()) fail(Err::Format, "fsb: trailing bytes after payload");
  return store;
}

}  // namespace lcat
