#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lcat/error.hpp"
#include "lcat/tensor.hpp"

// Differentiable operations. Every op validates shapes, computes the forward
// result into a fresh tensor, and (while the tape is recording and the result
// requires grad) registers one backward node. Accumulation always runs in
// index order so repeated runs are bit-identical.

namespace lcat {

namespace detail {

template <typename S>
void check_same_shape(const char* op, const BasicTensor<S>& a,
                      const BasicTensor<S>& b) {
  if (a.shape() != b.shape())
    fail(Err::Shape, std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <typename S>
BasicTensor<S> result_like(const BasicTensor<S>& a) {
  return BasicTensor<S>::zeros(a.shape());
}

// 3x3 zero-padded box mean with fixed divisor 9, separable: horizontal
// 3-sums into a scratch plane, then vertical 3-sums scaled by 1/9.
template <typename S>
void box_mean3_kernel(const S* in, S* out, int64_t n, int64_t c, int64_t h,
                      int64_t w) {
  const S inv9 = S(1) / S(9);
  std::vector<S> scratch(static_cast<size_t>(h * w));
  S* tmp = scratch.data();
  for (int64_t img = 0; img < n * c; ++img) {
    const S* src = in + img * h * w;
    S* dst = out + img * h * w;
    for (int64_t i = 0; i < h; ++i) {
      const S* row = src + i * w;
      S* trow = tmp + i * w;
      if (w == 1) {
        trow[0] = row[0];
      } else {
        trow[0] = row[0] + row[1];
        for (int64_t j = 1; j < w - 1; ++j)
          trow[j] = row[j - 1] + row[j] + row[j + 1];
        trow[w - 1] = row[w - 2] + row[w - 1];
      }
    }
    for (int64_t i = 0; i < h; ++i) {
      const S* above = i > 0 ? tmp + (i - 1) * w : nullptr;
      const S* here = tmp + i * w;
      const S* below = i + 1 < h ? tmp + (i + 1) * w : nullptr;
      S* drow = dst + i * w;
      if (above && below) {
        for (int64_t j = 0; j < w; ++j)
          drow[j] = (above[j] + here[j] + below[j]) * inv9;
      } else if (above) {
        for (int64_t j = 0; j < w; ++j) drow[j] = (above[j] + here[j]) * inv9;
      } else if (below) {
        for (int64_t j = 0; j < w; ++j) drow[j] = (here[j] + below[j]) * inv9;
      } else {
        for (int64_t j = 0; j < w; ++j) drow[j] = here[j] * inv9;
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
BasicTensor<S> add(BasicTape<S>& tape, const BasicTensor<S>& a,
                   const BasicTensor<S>& b) {
  detail::check_same_shape("add", a, b);
  auto out = detail::result_like(a);
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  bool rg = a.requires_grad() || b.requires_grad();
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([a, b, out](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      if (a.requires_grad()) {
        auto& ga = st.get(a);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
      }
      if (b.requires_grad()) {
        auto& gb = st.get(b);
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i];
      }
    });
  }
  return out;
}

template <typename S>
BasicTensor<S> sub(BasicTape<S>& tape, const BasicTensor<S>& a,
                   const BasicTensor<S>& b) {
  detail::check_same_shape("sub", a, b);
  auto out = detail::result_like(a);
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  bool rg = a.requires_grad() || b.requires_grad();
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([a, b, out](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      if (a.requires_grad()) {
        auto& ga = st.get(a);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
      }
      if (b.requires_grad()) {
        auto& gb = st.get(b);
        for (size_t i = 0; i < gb.size(); ++i) gb[i] -= (*g)[i];
      }
    });
  }
  return out;
}

template <typename S>
BasicTensor<S> mul(BasicTape<S>& tape, const BasicTensor<S>& a,
                   const BasicTensor<S>& b) {
  detail::check_same_shape("mul", a, b);
  auto out = detail::result_like(a);
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  bool rg = a.requires_grad() || b.requires_grad();
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([a, b, out](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      if (a.requires_grad()) {
        auto& ga = st.get(a);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto& gb = st.get(b);
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i] * a.data()[i];
      }
    });
  }
  return out;
}

// Scalar broadcast variants of add/scale (the only broadcast supported).
template <typename S>
BasicTensor<S> add_scalar(BasicTape<S>& tape, const BasicTensor<S>& a, S c) {
  auto out = detail::result_like(a);
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
  out.set_requires_grad(a.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record([a, out](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      auto& ga = st.get(a);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
    });
  }
  return out;
}

template <typename S>
BasicTensor<S> scale(BasicTape<S>& tape, const BasicTensor<S>& a, S c) {
  auto out = detail::result_like(a);
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  out.set_requires_grad(a.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record([a, out, c](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      auto& ga = st.get(a);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i] * c;
    });
  }
  return out;
}

template <typename S>
BasicTensor<S> relu(BasicTape<S>& tape, const BasicTensor<S>& a) {
  auto out = detail::result_like(a);
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > S(0) ? av[i] : S(0);
  out.set_requires_grad(a.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record([a, out](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      auto& ga = st.get(a);
      for (size_t i = 0; i < ga.size(); ++i)
        if (a.data()[i] > S(0)) ga[i] += (*g)[i];
    });
  }
  return out;
}

// Box projection. Gradient passes strictly inside (lo, hi) and is zero at and
// outside the boundary, matching projected-gradient semantics.
template <typename S>
BasicTensor<S> clip(BasicTape<S>& tape, const BasicTensor<S>& a, S lo, S hi) {
  if (!(lo < hi)) fail(Err::Config, "clip: lo must be < hi");
  auto out = detail::result_like(a);
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::min(std::max(av[i], lo), hi);
  out.set_requires_grad(a.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record([a, out, lo, hi](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      auto& ga = st.get(a);
      for (size_t i = 0; i < ga.size(); ++i)
        if (a.data()[i] > lo && a.data()[i] < hi) ga[i] += (*g)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
BasicTensor<S> matmul(BasicTape<S>& tape, const BasicTensor<S>& a,
                      const BasicTensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    fail(Err::Shape, "matmul: incompatible shapes " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = BasicTensor<S>::zeros({m, n});
  const S* ap = a.data().data();
  const S* bp = b.data().data();
  S* op = out.data().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) {
      const S aip = ap[i * k + p];
      const S* brow = bp + p * n;
      S* orow = op + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  bool rg = a.requires_grad() || b.requires_grad();
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([a, b, out, m, k, n](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      const S* gp = g->data();
      if (a.requires_grad()) {
        auto& ga = st.get(a);  // dA = G * B^T
        const S* bp2 = b.data().data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            S acc = S(0);
            const S* grow = gp + i * n;
            const S* brow = bp2 + p * n;
            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[static_cast<size_t>(i * k + p)] += acc;
          }
      }
      if (b.requires_grad()) {
        auto& gb = st.get(b);  // dB = A^T * G
        const S* ap2 = a.data().data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            const S aip = ap2[i * k + p];
            const S* grow = gp + i * n;
            S* gbrow = gb.data() + p * n;
            for (int64_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
          }
      }
    });
  }
  return out;
}

template <typename S>
BasicTensor<S> transpose(BasicTape<S>& tape, const BasicTensor<S>& a) {
  if (a.ndim() != 2)
    fail(Err::Shape, "transpose: expected 2-d tensor, got " + shape_str(a.shape()));
  const int64_t m = a.dim(0), n = a.dim(1);
  auto out = BasicTensor<S>::zeros({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      out.data()[static_cast<size_t>(j * m + i)] = a.data()[static_cast<size_t>(i * n + j)];
  out.set_requires_grad(a.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record([a, out, m, n](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      auto& ga = st.get(a);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
          ga[static_cast<size_t>(i * n + j)] += (*g)[static_cast<size_t>(j * m + i)];
    });
  }
  return out;
}

// Inverse of a small square matrix by Gauss-Jordan with partial pivoting.
// For C = A^-1 the adjoint is dA = -C^T G C^T.
template <typename S>
BasicTensor<S> mat_inverse(BasicTape<S>& tape, const BasicTensor<S>& a) {
  if (a.ndim() != 2 || a.dim(0) != a.dim(1))
    fail(Err::Shape, "mat_inverse: expected square matrix, got " + shape_str(a.shape()));
  const int64_t n = a.dim(0);
  std::vector<S> work = a.data();
  auto out = BasicTensor<S>::identity(n);
  auto& inv = out.data();
  for (int64_t col = 0; col < n; ++col) {
    int64_t pivot = col;
    S best = std::abs(work[static_cast<size_t>(col * n + col)]);
    for (int64_t r = col + 1; r < n; ++r) {
      S v = std::abs(work[static_cast<size_t>(r * n + col)]);
      if (v > best) {
        best = v;
        pivot = r;
      }
    }
    if (!(best > S(0)))
      fail(Err::Numeric, "mat_inverse: singular matrix");
    if (pivot != col)
      for (int64_t j = 0; j < n; ++j) {
        std::swap(work[static_cast<size_t>(col * n + j)], work[static_cast<size_t>(pivot * n + j)]);
        std::swap(inv[static_cast<size_t>(col * n + j)], inv[static_cast<size_t>(pivot * n + j)]);
      }
    const S d = work[static_cast<size_t>(col * n + col)];
    for (int64_t j = 0; j < n; ++j) {
      work[static_cast<size_t>(col * n + j)] /= d;
      inv[static_cast<size_t>(col * n + j)] /= d;
    }
    for (int64_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const S factor = work[static_cast<size_t>(r * n + col)];
      if (factor == S(0)) continue;
      for (int64_t j = 0; j < n; ++j) {
        work[static_cast<size_t>(r * n + j)] -= factor * work[static_cast<size_t>(col * n + j)];
        inv[static_cast<size_t>(r * n + j)] -= factor * inv[static_cast<size_t>(col * n + j)];
      }
    }
  }
  out.set_requires_grad(a.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record([a, out, n](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      auto& ga = st.get(a);
      const auto& c = out.data();
      // tmp = C^T * G
      std::vector<S> tmp(static_cast<size_t>(n * n), S(0));
      for (int64_t i = 0; i < n; ++i)
        for (int64_t p = 0; p < n; ++p) {
          const S cpi = c[static_cast<size_t>(p * n + i)];
          for (int64_t j = 0; j < n; ++j)
            tmp[static_cast<size_t>(i * n + j)] += cpi * (*g)[static_cast<size_t>(p * n + j)];
        }
      // dA -= tmp * C^T
      for (int64_t i = 0; i < n; ++i)
        for (int64_t p = 0; p < n; ++p) {
          const S t = tmp[static_cast<size_t>(i * n + p)];
          for (int64_t j = 0; j < n; ++j)
            ga[static_cast<size_t>(i * n + j)] -= t * c[static_cast<size_t>(j * n + p)];
        }
    });
  }
  return out;
}

// Squared Euclidean distances between all row pairs: out[i,j] = |a_i - b_j|^2.
template <typename S>
BasicTensor<S> pairwise_sqdist(BasicTape<S>& tape, const BasicTensor<S>& a,
                               const BasicTensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    fail(Err::Shape, "pairwise_sqdist: incompatible shapes " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  const int64_t m = a.dim(0), d = a.dim(1), k = b.dim(0);
  auto out = BasicTensor<S>::zeros({m, k});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < k; ++j) {
      S acc = S(0);
      const S* arow = a.data().data() + i * d;
      const S* brow = b.data().data() + j * d;
      for (int64_t t = 0; t < d; ++t) {
        const S diff = arow[t] - brow[t];
        acc += diff * diff;
      }
      out.data()[static_cast<size_t>(i * k + j)] = acc;
    }
  bool rg = a.requires_grad() || b.requires_grad();
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([a, b, out, m, d, k](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < k; ++j) {
          const S gij = S(2) * (*g)[static_cast<size_t>(i * k + j)];
          if (gij == S(0)) continue;
          const S* arow = a.data().data() + i * d;
          const S* brow = b.data().data() + j * d;
          if (a.requires_grad()) {
            auto& ga = st.get(a);
            for (int64_t t = 0; t < d; ++t)
              ga[static_cast<size_t>(i * d + t)] += gij * (arow[t] - brow[t]);
          }
          if (b.requires_grad()) {
            auto& gb = st.get(b);
            for (int64_t t = 0; t < d; ++t)
              gb[static_cast<size_t>(j * d + t)] -= gij * (arow[t] - brow[t]);
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops and reductions
// ---------------------------------------------------------------------------

template <typename S>
BasicTensor<S> reshape(BasicTape<S>& tape, const BasicTensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    fail(Err::Shape, "reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  auto out = BasicTensor<S>::from_data(std::move(shape), a.data());
  out.set_requires_grad(a.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record([a, out](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      auto& ga = st.get(a);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
    });
  }
  return out;
}

template <typename S>
BasicTensor<S> sum(BasicTape<S>& tape, const BasicTensor<S>& a) {
  S acc = S(0);
  for (S v : a.data()) acc += v;
  auto out = BasicTensor<S>::scalar(acc);
  out.set_requires_grad(a.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record([a, out](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      auto& ga = st.get(a);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[0];
    });
  }
  return out;
}

template <typename S>
BasicTensor<S> mean(BasicTape<S>& tape, const BasicTensor<S>& a) {
  return scale(tape, sum(tape, a), S(1) / static_cast<S>(a.numel()));
}

// ---------------------------------------------------------------------------
// Convolution stack
// ---------------------------------------------------------------------------

namespace detail {

// Fixed 8-lane blocked dot product. The accumulation order is set by this
// code, not the target ISA, so results are identical whether or not the
// lane loop is vectorized.
template <typename S>
S lane_dot(const S* a, const S* b, int64_t len) {
  constexpr int kLanes = 8;
  S lanes[kLanes] = {};
  int64_t i = 0;
  for (; i + kLanes <= len; i += kLanes)
    for (int l = 0; l < kLanes; ++l) lanes[l] += a[i + l] * b[i + l];
  S tail = S(0);
  for (; i < len; ++i) tail += a[i] * b[i];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

// Copies [N,C,H,W] image n into zero-padded channel planes of width
// wp = w + 2p. The buffer carries `slack` extra zeros so tap-shifted spans
// may read past the last plane.
template <typename S>
void pack_padded(const S* x, S* xpad, int64_t n_index, int64_t c, int64_t h,
                 int64_t w, int64_t padding, int64_t slack) {
  const int64_t wp = w + 2 * padding;
  const int64_t hp = h + 2 * padding;
  std::fill(xpad, xpad + c * hp * wp + slack, S(0));
  for (int64_t ci = 0; ci < c; ++ci) {
    const S* src = x + (n_index * c + ci) * h * w;
    S* dst = xpad + ci * hp * wp + padding * wp + padding;
    for (int64_t i = 0; i < h; ++i)
      std::copy_n(src + i * w, w, dst + i * wp);
  }
}

}  // namespace detail

template <typename S>
BasicTensor<S> conv2d(BasicTape<S>& tape, const BasicTensor<S>& x,
                      const BasicTensor<S>& kernel, int64_t stride,
                      int64_t padding) {
  if (x.ndim() != 4 || kernel.ndim() != 4)
    fail(Err::Shape, "conv2d: expected 4-d input and kernel, got " +
                         shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
  if (x.dim(1) != kernel.dim(1))
    fail(Err::Shape, "conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(kernel.shape()));
  if (stride < 1 || padding < 0)
    fail(Err::Config, "conv2d: stride must be >= 1 and padding >= 0");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t f = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kh > h + 2 * padding || kw > w + 2 * padding)
    fail(Err::Shape, "conv2d: kernel " + shape_str(kernel.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  const int64_t oh = (h + 2 * padding - kh) / stride + 1;
  const int64_t ow = (w + 2 * padding - kw) / stride + 1;
  auto out = BasicTensor<S>::zeros({n, f, oh, ow});

  const S* xp = x.data().data();
  const S* kp = kernel.data().data();
  S* op = out.data().data();

  if (stride == 1) {
    // Padded-plane formulation: with equal row strides on both sides, every
    // kernel tap is one contiguous multiply-add over the whole plane. The
    // columns beyond ow compute junk that the unpack step drops.
    const int64_t wp = w + 2 * padding;
    const int64_t hp = h + 2 * padding;
    const int64_t span = oh * wp;
    const int64_t slack = wp;
    std::vector<S> xpad(static_cast<size_t>(c * hp * wp + slack));
    std::vector<S> opad(static_cast<size_t>(f * span));
    for (int64_t in_ = 0; in_ < n; ++in_) {
      detail::pack_padded(xp, xpad.data(), in_, c, h, w, padding, slack);
      std::fill(opad.begin(), opad.end(), S(0));
      for (int64_t fi = 0; fi < f; ++fi) {
        S* dst = opad.data() + fi * span;
        for (int64_t ci = 0; ci < c; ++ci) {
          const S* plane = xpad.data() + ci * hp * wp;
          const S* kbase = kp + (fi * c + ci) * kh * kw;
          for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
              const S kval = kbase[ki * kw + kj];
              if (kval == S(0)) continue;
              const S* src = plane + ki * wp + kj;
              for (int64_t idx = 0; idx < span; ++idx)
                dst[idx] += kval * src[idx];
            }
        }
      }
      for (int64_t fi = 0; fi < f; ++fi) {
        const S* src = opad.data() + fi * span;
        S* obase = op + (in_ * f + fi) * oh * ow;
        for (int64_t r = 0; r < oh; ++r)
          std::copy_n(src + r * wp, ow, obase + r * ow);
      }
    }
  } else {
    auto lo_of = [&](int64_t k_off) {
      return (padding > k_off) ? (padding - k_off + stride - 1) / stride
                               : int64_t(0);
    };
    auto hi_of = [&](int64_t k_off, int64_t extent, int64_t out_extent) {
      const int64_t top = extent - 1 - k_off + padding;
      return top < 0 ? int64_t(-1) : std::min(out_extent - 1, top / stride);
    };
    for (int64_t in_ = 0; in_ < n; ++in_)
      for (int64_t fi = 0; fi < f; ++fi) {
        S* obase = op + (in_ * f + fi) * oh * ow;
        for (int64_t ci = 0; ci < c; ++ci) {
          const S* xbase = xp + (in_ * c + ci) * h * w;
          const S* kbase = kp + (fi * c + ci) * kh * kw;
          for (int64_t ki = 0; ki < kh; ++ki) {
            const int64_t r_lo = lo_of(ki), r_hi = hi_of(ki, h, oh);
            for (int64_t kj = 0; kj < kw; ++kj) {
              const S kval = kbase[ki * kw + kj];
              if (kval == S(0)) continue;
              const int64_t c_lo = lo_of(kj), c_hi = hi_of(kj, w, ow);
              for (int64_t r = r_lo; r <= r_hi; ++r) {
                const S* xrow = xbase + (r * stride + ki - padding) * w;
                S* orow = obase + r * ow;
                for (int64_t q = c_lo; q <= c_hi; ++q)
                  orow[q] += kval * xrow[q * stride + kj - padding];
              }
            }
          }
        }
      }
  }

  bool rg = x.requires_grad() || kernel.requires_grad();
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([x, kernel, out, stride, padding, n, c, h, w, f, kh, kw, oh,
                 ow](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      const S* gp = g->data();
      const bool need_dx = x.requires_grad();
      const bool need_dk = kernel.requires_grad();
      std::vector<S>* dxp = need_dx ? &st.get(x) : nullptr;
      std::vector<S>* dkp = need_dk ? &st.get(kernel) : nullptr;
      if (stride == 1) {
        const int64_t wp = w + 2 * padding;
        const int64_t hp = h + 2 * padding;
        const int64_t span = oh * wp;
        const int64_t slack = wp;
        std::vector<S> gpad(static_cast<size_t>(f * span));
        std::vector<S> xpad, dxpad;
        if (need_dk) xpad.resize(static_cast<size_t>(c * hp * wp + slack));
        if (need_dx) dxpad.resize(static_cast<size_t>(c * hp * wp + slack));
        for (int64_t in_ = 0; in_ < n; ++in_) {
          std::fill(gpad.begin(), gpad.end(), S(0));
          for (int64_t fi = 0; fi < f; ++fi) {
            const S* gbase = gp + (in_ * f + fi) * oh * ow;
            S* dst = gpad.data() + fi * span;
            for (int64_t r = 0; r < oh; ++r)
              std::copy_n(gbase + r * ow, ow, dst + r * wp);
          }
          if (need_dk)
            detail::pack_padded(x.data().data(), xpad.data(), in_, c, h, w,
                                padding, slack);
          if (need_dx) std::fill(dxpad.begin(), dxpad.end(), S(0));
          for (int64_t fi = 0; fi < f; ++fi) {
            const S* gplane = gpad.data() + fi * span;
            for (int64_t ci = 0; ci < c; ++ci) {
              const int64_t koff = (fi * c + ci) * kh * kw;
              for (int64_t ki = 0; ki < kh; ++ki)
                for (int64_t kj = 0; kj < kw; ++kj) {
                  const int64_t off = ki * wp + kj;
                  if (need_dx) {
                    const S kval =
                        kernel.data()[static_cast<size_t>(koff + ki * kw + kj)];
                    if (kval != S(0)) {
                      S* dxdst = dxpad.data() + ci * hp * wp + off;
                      for (int64_t idx = 0; idx < span; ++idx)
                        dxdst[idx] += kval * gplane[idx];
                    }
                  }
                  if (need_dk)
                    (*dkp)[static_cast<size_t>(koff + ki * kw + kj)] +=
                        detail::lane_dot(gplane,
                                         xpad.data() + ci * hp * wp + off, span);
                }
            }
          }
          if (need_dx)
            for (int64_t ci = 0; ci < c; ++ci) {
              const S* src = dxpad.data() + ci * hp * wp + padding * wp + padding;
              S* dst = dxp->data() + (in_ * c + ci) * h * w;
              for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) dst[i * w + j] += src[i * wp + j];
            }
        }
      } else {
        auto lo_of = [&](int64_t k_off) {
          return (padding > k_off) ? (padding - k_off + stride - 1) / stride
                                   : int64_t(0);
        };
        auto hi_of = [&](int64_t k_off, int64_t extent, int64_t out_extent) {
          const int64_t top = extent - 1 - k_off + padding;
          return top < 0 ? int64_t(-1) : std::min(out_extent - 1, top / stride);
        };
        for (int64_t in_ = 0; in_ < n; ++in_)
          for (int64_t fi = 0; fi < f; ++fi) {
            const S* gbase = gp + (in_ * f + fi) * oh * ow;
            for (int64_t ci = 0; ci < c; ++ci) {
              const S* xbase = x.data().data() + (in_ * c + ci) * h * w;
              S* dxbase = need_dx ? dxp->data() + (in_ * c + ci) * h * w : nullptr;
              const int64_t koff = (fi * c + ci) * kh * kw;
              for (int64_t ki = 0; ki < kh; ++ki) {
                const int64_t r_lo = lo_of(ki), r_hi = hi_of(ki, h, oh);
                for (int64_t kj = 0; kj < kw; ++kj) {
                  const int64_t c_lo = lo_of(kj), c_hi = hi_of(kj, w, ow);
                  const S kval =
                      kernel.data()[static_cast<size_t>(koff + ki * kw + kj)];
                  S dk_acc = S(0);
                  for (int64_t r = r_lo; r <= r_hi; ++r) {
                    const S* grow = gbase + r * ow;
                    const int64_t xrow_off = (r * stride + ki - padding) * w;
                    const S* xrow = xbase + xrow_off;
                    S* dxrow = need_dx ? dxbase + xrow_off : nullptr;
                    for (int64_t q = c_lo; q <= c_hi; ++q) {
                      const S gval = grow[q];
                      const int64_t xcol = q * stride + kj - padding;
                      if (need_dx) dxrow[xcol] += kval * gval;
                      if (need_dk) dk_acc += gval * xrow[xcol];
                    }
                  }
                  if (need_dk)
                    (*dkp)[static_cast<size_t>(koff + ki * kw + kj)] += dk_acc;
                }
              }
            }
          }
      }
    });
  }
  return out;
}

// Per-channel bias add for [N,C,H,W] feature maps.
template <typename S>
BasicTensor<S> bias_add_channels(BasicTape<S>& tape, const BasicTensor<S>& x,
                                 const BasicTensor<S>& bias) {
  if (x.ndim() != 4 || bias.ndim() != 1 || bias.dim(0) != x.dim(1))
    fail(Err::Shape, "bias_add_channels: shapes " + shape_str(x.shape()) + " vs " +
                         shape_str(bias.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto out = detail::result_like(x);
  for (int64_t in_ = 0; in_ < n; ++in_)
    for (int64_t ci = 0; ci < c; ++ci) {
      const S b = bias.data()[static_cast<size_t>(ci)];
      const S* src = x.data().data() + (in_ * c + ci) * hw;
      S* dst = out.data().data() + (in_ * c + ci) * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + b;
    }
  bool rg = x.requires_grad() || bias.requires_grad();
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([x, bias, out, n, c, hw](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      if (x.requires_grad()) {
        auto& gx = st.get(x);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i];
      }
      if (bias.requires_grad()) {
        auto& gb = st.get(bias);
        for (int64_t in_ = 0; in_ < n; ++in_)
          for (int64_t ci = 0; ci < c; ++ci) {
            const S* grow = g->data() + (in_ * c + ci) * hw;
            S acc = S(0);
            for (int64_t i = 0; i < hw; ++i) acc += grow[i];
            gb[static_cast<size_t>(ci)] += acc;
          }
      }
    });
  }
  return out;
}

// 2x2 mean pooling with stride 2 (trailing odd row/column dropped).
template <typename S>
BasicTensor<S> mean_pool2(BasicTape<S>& tape, const BasicTensor<S>& x) {
  if (x.ndim() != 4 || x.dim(2) < 2 || x.dim(3) < 2)
    fail(Err::Shape, "mean_pool2: need [N,C,H>=2,W>=2], got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t oh = h / 2, ow = w / 2;
  auto out = BasicTensor<S>::zeros({n, c, oh, ow});
  for (int64_t img = 0; img < n * c; ++img) {
    const S* src = x.data().data() + img * h * w;
    S* dst = out.data().data() + img * oh * ow;
    for (int64_t i = 0; i < oh; ++i)
      for (int64_t j = 0; j < ow; ++j)
        dst[i * ow + j] = (src[(2 * i) * w + 2 * j] + src[(2 * i) * w + 2 * j + 1] +
                           src[(2 * i + 1) * w + 2 * j] +
                           src[(2 * i + 1) * w + 2 * j + 1]) *
                          S(0.25);
  }
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record([x, out, n, c, h, w, oh, ow](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      auto& gx = st.get(x);
      for (int64_t img = 0; img < n * c; ++img) {
        const S* grow = g->data() + img * oh * ow;
        S* dst = gx.data() + img * h * w;
        for (int64_t i = 0; i < oh; ++i)
          for (int64_t j = 0; j < ow; ++j) {
            const S v = grow[i * ow + j] * S(0.25);
            dst[(2 * i) * w + 2 * j] += v;
            dst[(2 * i) * w + 2 * j + 1] += v;
            dst[(2 * i + 1) * w + 2 * j] += v;
            dst[(2 * i + 1) * w + 2 * j + 1] += v;
          }
      }
    });
  }
  return out;
}

// 3x3 zero-padded box mean filter (fixed divisor 9). Self-adjoint.
template <typename S>
BasicTensor<S> box_mean3(BasicTape<S>& tape, const BasicTensor<S>& x) {
  if (x.ndim() != 4)
    fail(Err::Shape, "box_mean3: expected [N,C,H,W], got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto out = detail::result_like(x);
  detail::box_mean3_kernel(x.data().data(), out.data().data(), n, c, h, w);
  out.set_requires_grad(x.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record([x, out, n, c, h, w](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      auto& gx = st.get(x);
      std::vector<S> back(g->size());
      detail::box_mean3_kernel(g->data(), back.data(), n, c, h, w);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += back[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean over the batch of -log softmax(logits)[label], max-stabilized.
template <typename S>
BasicTensor<S> softmax_cross_entropy(BasicTape<S>& tape,
                                     const BasicTensor<S>& logits,
                                     const std::vector<int>& labels) {
  if (logits.ndim() != 2)
    fail(Err::Shape, "softmax_cross_entropy: logits must be [B,K], got " +
                         shape_str(logits.shape()));
  const int64_t batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != batch)
    fail(Err::Shape, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch " + std::to_string(batch));
  for (int y : labels)
    if (y < 0 || y >= classes)
      fail(Err::Shape, "softmax_cross_entropy: label " + std::to_string(y) +
                           " out of range [0," + std::to_string(classes) + ")");
  S total = S(0);
  for (int64_t b = 0; b < batch; ++b) {
    const S* row = logits.data().data() + b * classes;
    S mx = row[0];
    for (int64_t k = 1; k < classes; ++k) mx = std::max(mx, row[k]);
    S lse = S(0);
    for (int64_t k = 0; k < classes; ++k) lse += std::exp(row[k] - mx);
    lse = std::log(lse);
    total += lse - (row[labels[static_cast<size_t>(b)]] - mx);
  }
  auto out = BasicTensor<S>::scalar(total / static_cast<S>(batch));
  out.set_requires_grad(logits.requires_grad());
  if (tape.recording() && out.requires_grad()) {
    tape.record([logits, labels, out, batch, classes](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      const S gs = (*g)[0] / static_cast<S>(batch);
      auto& gl = st.get(logits);
      for (int64_t b = 0; b < batch; ++b) {
        const S* row = logits.data().data() + b * classes;
        S mx = row[0];
        for (int64_t k = 1; k < classes; ++k) mx = std::max(mx, row[k]);
        S z = S(0);
        for (int64_t k = 0; k < classes; ++k) z += std::exp(row[k] - mx);
        for (int64_t k = 0; k < classes; ++k) {
          const S p = std::exp(row[k] - mx) / z;
          const S indicator = (k == labels[static_cast<size_t>(b)]) ? S(1) : S(0);
          gl[static_cast<size_t>(b * classes + k)] += gs * (p - indicator);
        }
      }
    });
  }
  return out;
}

// Mean over the batch of KL(softmax(p_logits) || softmax(q_logits)).
// Gradient flows into both arguments.
template <typename S>
BasicTensor<S> kl_divergence(BasicTape<S>& tape, const BasicTensor<S>& p_logits,
                             const BasicTensor<S>& q_logits) {
  detail::check_same_shape("kl_divergence", p_logits, q_logits);
  if (p_logits.ndim() != 2)
    fail(Err::Shape, "kl_divergence: logits must be [B,K], got " +
                         shape_str(p_logits.shape()));
  const int64_t batch = p_logits.dim(0), classes = p_logits.dim(1);
  auto log_softmax_row = [classes](const S* row, S* out_row) {
    S mx = row[0];
    for (int64_t k = 1; k < classes; ++k) mx = std::max(mx, row[k]);
    S z = S(0);
    for (int64_t k = 0; k < classes; ++k) z += std::exp(row[k] - mx);
    const S lse = std::log(z) + mx;
    for (int64_t k = 0; k < classes; ++k) out_row[k] = row[k] - lse;
  };
  S total = S(0);
  std::vector<S> lp(static_cast<size_t>(classes)), lq(static_cast<size_t>(classes));
  for (int64_t b = 0; b < batch; ++b) {
    log_softmax_row(p_logits.data().data() + b * classes, lp.data());
    log_softmax_row(q_logits.data().data() + b * classes, lq.data());
    for (int64_t k = 0; k < classes; ++k)
      total += std::exp(lp[static_cast<size_t>(k)]) *
               (lp[static_cast<size_t>(k)] - lq[static_cast<size_t>(k)]);
  }
  auto out = BasicTensor<S>::scalar(total / static_cast<S>(batch));
  bool rg = p_logits.requires_grad() || q_logits.requires_grad();
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([p_logits, q_logits, out, batch, classes,
                 log_softmax_row](AdjointStore<S>& st) {
      const auto* g = st.peek(out);
      if (!g) return;
      const S gs = (*g)[0] / static_cast<S>(batch);
      std::vector<S> lp(static_cast<size_t>(classes)), lq(static_cast<size_t>(classes));
      for (int64_t b = 0; b < batch; ++b) {
        log_softmax_row(p_logits.data().data() + b * classes, lp.data());
        log_softmax_row(q_logits.data().data() + b * classes, lq.data());
        S row_kl = S(0);
        for (int64_t k = 0; k < classes; ++k)
          row_kl += std::exp(lp[static_cast<size_t>(k)]) *
                    (lp[static_cast<size_t>(k)] - lq[static_cast<size_t>(k)]);
        if (p_logits.requires_grad()) {
          auto& gp = st.get(p_logits);
          for (int64_t k = 0; k < classes; ++k) {
            const S pk = std::exp(lp[static_cast<size_t>(k)]);
            const S diff = lp[static_cast<size_t>(k)] - lq[static_cast<size_t>(k)];
            gp[static_cast<size_t>(b * classes + k)] += gs * pk * (diff - row_kl);
          }
        }
        if (q_logits.requires_grad()) {
          auto& gq = st.get(q_logits);
          for (int64_t k = 0; k < classes; ++k) {
            const S pk = std::exp(lp[static_cast<size_t>(k)]);
            const S qk = std::exp(lq[static_cast<size_t>(k)]);
            gq[static_cast<size_t>(b * classes + k)] += gs * (qk - pk);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Non-differentiable utilities
// ---------------------------------------------------------------------------

// Row-wise argmax with first-max tie breaking.
template <typename S>
std::vector<int> argmax_rows(const BasicTensor<S>& logits) {
  if (logits.ndim() != 2)
    fail(Err::Shape, "argmax_rows: expected [B,K], got " + shape_str(logits.shape()));
  const int64_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<int> out(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) {
    const S* row = logits.data().data() + b * classes;
    int best = 0;
    for (int64_t k = 1; k < classes; ++k)
      if (row[k] > row[best]) best = static_cast<int>(k);
    out[static_cast<size_t>(b)] = best;
  }
  return out;
}

template <typename S>
bool all_finite(const BasicTensor<S>& t) {
  for (S v : t.data())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace lcat
