#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>

#include "aranet/tensor.hpp"
#include "aranet/util.hpp"

// Differentiable primitives. Every op computes its output eagerly; when a
// tape is active and an input wants gradients, the op also records a closure
// that scatters the output adjoint back onto its inputs. Reductions and conv
// inner products accumulate in double regardless of the storage type, with a
// fixed accumulation order, so results are reproducible bit for bit.

namespace aranet {

namespace detail {

template <typename T>
inline void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor argument");
}

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

template <typename T>
inline bool recording(const Tensor<T>& a) {
  return Tape<T>::active() != nullptr && a.requires_grad();
}

template <typename T>
inline bool recording(const Tensor<T>& a, const Tensor<T>& b) {
  return Tape<T>::active() != nullptr && (a.requires_grad() || b.requires_grad());
}

template <typename T>
inline bool recording(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
  return Tape<T>::active() != nullptr && (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_defined(a, "add");
  detail::require_defined(b, "add");
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto pa = a.data(), pb = b.data(), po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + pb[i];
  if (detail::recording(a, b)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, b, out]() {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        a.ensure_grad();
        auto ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        auto gb = b.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_defined(a, "sub");
  detail::require_defined(b, "sub");
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  auto pa = a.data(), pb = b.data(), po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] - pb[i];
  if (detail::recording(a, b)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, b, out]() {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        a.ensure_grad();
        auto ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        auto gb = b.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_defined(a, "mul");
  detail::require_defined(b, "mul");
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto pa = a.data(), pb = b.data(), po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] * pb[i];
  if (detail::recording(a, b)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, b, out]() {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto pa = a.data(), pb = b.data();
      if (a.requires_grad()) {
        a.ensure_grad();
        auto ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * pb[i];
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        auto gb = b.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * pa[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T c) {
  detail::require_defined(a, "scalar_mul");
  Tensor<T> out(a.shape());
  auto pa = a.data(), po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] * c;
  if (detail::recording(a)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, out, c]() {
      if (!out.has_grad()) return;
      auto go = out.grad();
      a.ensure_grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  detail::require_defined(a, "add_scalar");
  Tensor<T> out(a.shape());
  auto pa = a.data(), po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + c;
  if (detail::recording(a)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, out]() {
      if (!out.has_grad()) return;
      auto go = out.grad();
      a.ensure_grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  detail::require_defined(a, "relu");
  Tensor<T> out(a.shape());
  auto pa = a.data(), po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
  if (detail::recording(a)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, out]() {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto pa = a.data();
      a.ensure_grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i)
        if (pa[i] > T(0)) ga[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  detail::require_defined(a, "leaky_relu");
  Tensor<T> out(a.shape());
  auto pa = a.data(), po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] > T(0) ? pa[i] : slope * pa[i];
  if (detail::recording(a)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, out, slope]() {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto pa = a.data();
      a.ensure_grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += pa[i] > T(0) ? go[i] : slope * go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  detail::require_defined(a, "sigmoid");
  Tensor<T> out(a.shape());
  auto pa = a.data(), po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) {
    const double v = 1.0 / (1.0 + std::exp(-static_cast<double>(pa[i])));
    T y = static_cast<T>(v);
    // keep the open interval promise even when the cast saturates
    if (y <= T(0)) y = std::numeric_limits<T>::denorm_min();
    if (y >= T(1)) y = T(1) - std::numeric_limits<T>::epsilon() / T(2);
    po[i] = y;
  }
  if (detail::recording(a)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, out]() {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto po = out.data();
      a.ensure_grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * po[i] * (T(1) - po[i]);
    });
  }
  return out;
}

// Elementwise smooth-L1 kernel: quadratic inside the delta band, linear
// outside. The mean of this over a residual tensor is the robust data loss.
template <typename T>
Tensor<T> huber(const Tensor<T>& a, T delta) {
  detail::require_defined(a, "huber");
  if (!(delta > T(0))) throw std::invalid_argument("huber: delta must be positive");
  Tensor<T> out(a.shape());
  auto pa = a.data(), po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) {
    const T r = pa[i];
    const T ar = std::abs(r);
    po[i] = ar < delta ? T(0.5) * r * r : delta * (ar - T(0.5) * delta);
  }
  if (detail::recording(a)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, out, delta]() {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto pa = a.data();
      a.ensure_grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const T r = pa[i];
        const T d = std::abs(r) < delta ? r : (r > T(0) ? delta : -delta);
        ga[i] += go[i] * d;
      }
    });
  }
  return out;
}

namespace detail {

struct ConvDims {
  std::int64_t n, c, h, w, f, k, ho, wo;
};

template <typename T>
inline ConvDims conv2d_check(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                             std::int64_t stride, std::int64_t padding) {
  require_defined(input, "conv2d");
  require_defined(kernel, "conv2d");
  require_defined(bias, "conv2d");
  if (input.rank() != 4) {
    throw std::invalid_argument("conv2d: input must be rank 4 [N,C,H,W], got " + shape_str(input.shape()));
  }
  if (kernel.rank() != 4) {
    throw std::invalid_argument("conv2d: kernel must be rank 4 [F,C,k,k], got " + shape_str(kernel.shape()));
  }
  if (kernel.dim(2) != kernel.dim(3)) {
    throw std::invalid_argument("conv2d: kernel must be square, got " + shape_str(kernel.shape()));
  }
  if (input.dim(1) != kernel.dim(1)) {
    throw std::invalid_argument("conv2d: channel mismatch on axis 1: input has " +
                                std::to_string(input.dim(1)) + ", kernel expects " +
                                std::to_string(kernel.dim(1)));
  }
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0)) {
    throw std::invalid_argument("conv2d: bias must be rank 1 [F=" + std::to_string(kernel.dim(0)) +
                                "], got " + shape_str(bias.shape()));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  ConvDims d{};
  d.n = input.dim(0);
  d.c = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.f = kernel.dim(0);
  d.k = kernel.dim(2);
  if (d.k > d.h + 2 * padding) {
    throw std::invalid_argument("conv2d: kernel extent " + std::to_string(d.k) +
                                " exceeds padded input on height axis 2 (" +
                                std::to_string(d.h + 2 * padding) + ")");
  }
  if (d.k > d.w + 2 * padding) {
    throw std::invalid_argument("conv2d: kernel extent " + std::to_string(d.k) +
                                " exceeds padded input on width axis 3 (" +
                                std::to_string(d.w + 2 * padding) + ")");
  }
  if ((d.h + 2 * padding - d.k) % stride != 0) {
    throw std::invalid_argument("conv2d: non-integral output extent on height axis 2: (" +
                                std::to_string(d.h) + " + 2*" + std::to_string(padding) + " - " +
                                std::to_string(d.k) + ") % " + std::to_string(stride) + " != 0");
  }
  if ((d.w + 2 * padding - d.k) % stride != 0) {
    throw std::invalid_argument("conv2d: non-integral output extent on width axis 3: (" +
                                std::to_string(d.w) + " + 2*" + std::to_string(padding) + " - " +
                                std::to_string(d.k) + ") % " + std::to_string(stride) + " != 0");
  }
  d.ho = (d.h + 2 * padding - d.k) / stride + 1;
  d.wo = (d.w + 2 * padding - d.k) / stride + 1;
  return d;
}

// Valid output-column range for one kernel column: ix = ox*stride + off must
// land in [0, w).
inline void conv_col_range(std::int64_t off, std::int64_t stride, std::int64_t w, std::int64_t wo,
                           std::int64_t& lo, std::int64_t& hi) {
  lo = off < 0 ? (-off + stride - 1) / stride : 0;
  const std::int64_t max_ix = w - 1 - off;
  hi = max_ix < 0 ? -1 : std::min(wo - 1, max_ix / stride);
}

// Gathers every receptive field of one sample into a row-major patch matrix
// of [ho*wo rows x c*k*k columns], zero-filling where the window hangs over
// the padded border. Column j = (c*k + ky)*k + kx matches the kernel's own
// [F,C,k,k] row layout, so filter application becomes one contiguous dot.
template <typename T>
inline void build_patches(const T* in_n, const ConvDims& d, std::int64_t stride,
                          std::int64_t padding, T* col) {
  const std::int64_t ck2 = d.c * d.k * d.k;
  for (std::int64_t oy = 0; oy < d.ho; ++oy) {
    for (std::int64_t ox = 0; ox < d.wo; ++ox) {
      T* row = col + (oy * d.wo + ox) * ck2;
      const std::int64_t iy0 = oy * stride - padding;
      const std::int64_t ix0 = ox * stride - padding;
      const bool x_interior = ix0 >= 0 && ix0 + d.k <= d.w;
      for (std::int64_t c = 0; c < d.c; ++c) {
        const T* plane = in_n + c * d.h * d.w;
        for (std::int64_t ky = 0; ky < d.k; ++ky) {
          const std::int64_t iy = iy0 + ky;
          T* dst = row + (c * d.k + ky) * d.k;
          if (iy < 0 || iy >= d.h) {
            for (std::int64_t kx = 0; kx < d.k; ++kx) dst[kx] = T(0);
          } else if (x_interior) {
            const T* src = plane + iy * d.w + ix0;
            for (std::int64_t kx = 0; kx < d.k; ++kx) dst[kx] = src[kx];
          } else {
            const T* src = plane + iy * d.w;
            for (std::int64_t kx = 0; kx < d.k; ++kx) {
              const std::int64_t ix = ix0 + kx;
              dst[kx] = (ix < 0 || ix >= d.w) ? T(0) : src[ix];
            }
          }
        }
      }
    }
  }
}

// Below this many output elements per plane, dotting gathered patch rows wins;
// at or above it, streaming row-wise multiply-accumulate over the plane wins.
inline constexpr std::int64_t kConvWidePlane = 2048;

// Dot product over eight independent partial sums. The split breaks the FMA
// latency chain while keeping a reassociation pattern that is fixed in the
// code itself, so repeated runs produce identical bits.
template <typename A, typename B>
inline double dot_f64(const A* a, const B* b, std::int64_t n) {
  double acc[8] = {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int j = 0; j < 8; ++j) {
      acc[j] += static_cast<double>(a[i + j]) * static_cast<double>(b[i + j]);
    }
  }
  for (int j = 0; i < n; ++i, ++j) {
    acc[j] += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// Distributes independent tasks over ARANET_THREADS workers. Every task owns
// a disjoint output slice and runs the same arithmetic in the same order it
// would serially, so the thread count never changes a single bit. The first
// worker exception is rethrown on the calling thread.
inline void run_tasks(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
  const int threads = worker_threads();
  if (threads <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex fail_mutex;
  std::exception_ptr failure;
  parallel_for(n, threads, [&](std::int64_t i) {
    try {
      fn(i);
    } catch (...) {
      std::lock_guard<std::mutex> lock(fail_mutex);
      if (!failure) failure = std::current_exception();
    }
  });
  if (failure) std::rethrow_exception(failure);
}

}  // namespace detail

// 2D cross-correlation over [N,C,H,W] with a square [F,C,k,k] kernel and a
// per-filter bias. Output extents must divide out exactly; there is no
// implicit floor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::int64_t stride, std::int64_t padding) {
  const detail::ConvDims d = detail::conv2d_check(input, kernel, bias, stride, padding);
  Tensor<T> out({d.n, d.f, d.ho, d.wo});
  const T* in = input.data().data();
  const T* kw = kernel.data().data();
  const T* kb = bias.data().data();
  T* op = out.data().data();
  const std::int64_t rows = d.ho * d.wo;
  const std::int64_t ck2 = d.c * d.k * d.k;
  if (d.k == 1) {
    // pointwise kernels: scaled accumulation over whole channel planes beats
    // gathering patch rows of length C
    detail::run_tasks(d.n * d.f, [&](std::int64_t task) {
      const std::int64_t n = task / d.f;
      const std::int64_t f = task % d.f;
      std::vector<double> acc(static_cast<std::size_t>(rows), 0.0);
      for (std::int64_t c = 0; c < d.c; ++c) {
        const double wv = static_cast<double>(kw[f * d.c + c]);
        if (wv == 0.0) continue;
        std::int64_t lo, hi;
        detail::conv_col_range(-padding, stride, d.w, d.wo, lo, hi);
        if (hi < lo) continue;
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * stride - padding;
          if (iy < 0 || iy >= d.h) continue;
          const T* in_row = in + ((n * d.c + c) * d.h + iy) * d.w;
          double* acc_row = acc.data() + oy * d.wo;
          for (std::int64_t ox = lo; ox <= hi; ++ox) {
            acc_row[ox] += wv * static_cast<double>(in_row[ox * stride - padding]);
          }
        }
      }
      const double bv = static_cast<double>(kb[f]);
      T* out_plane = op + (n * d.f + f) * rows;
      for (std::int64_t i = 0; i < rows; ++i) {
        out_plane[i] = static_cast<T>(acc[static_cast<std::size_t>(i)] + bv);
      }
    });
  } else if (rows >= detail::kConvWidePlane) {
    // wide planes: stream one scaled input row into the accumulator row per
    // kernel tap, which keeps the traffic sequential over the big buffers
    detail::run_tasks(d.n * d.f, [&](std::int64_t task) {
      const std::int64_t n = task / d.f;
      const std::int64_t f = task % d.f;
      std::vector<double> acc(static_cast<std::size_t>(rows), 0.0);
      for (std::int64_t c = 0; c < d.c; ++c) {
        for (std::int64_t ky = 0; ky < d.k; ++ky) {
          for (std::int64_t kx = 0; kx < d.k; ++kx) {
            const double wv = static_cast<double>(kw[((f * d.c + c) * d.k + ky) * d.k + kx]);
            if (wv == 0.0) continue;
            const std::int64_t off = kx - padding;
            std::int64_t lo, hi;
            detail::conv_col_range(off, stride, d.w, d.wo, lo, hi);
            if (hi < lo) continue;
            for (std::int64_t oy = 0; oy < d.ho; ++oy) {
              const std::int64_t iy = oy * stride - padding + ky;
              if (iy < 0 || iy >= d.h) continue;
              const T* in_row = in + ((n * d.c + c) * d.h + iy) * d.w + off;
              double* acc_row = acc.data() + oy * d.wo;
              if (stride == 1) {
                for (std::int64_t ox = lo; ox <= hi; ++ox) {
                  acc_row[ox] += wv * static_cast<double>(in_row[ox]);
                }
              } else {
                for (std::int64_t ox = lo; ox <= hi; ++ox) {
                  acc_row[ox] += wv * static_cast<double>(in_row[ox * stride]);
                }
              }
            }
          }
        }
      }
      const double bv = static_cast<double>(kb[f]);
      T* out_plane = op + (n * d.f + f) * rows;
      for (std::int64_t i = 0; i < rows; ++i) {
        out_plane[i] = static_cast<T>(acc[static_cast<std::size_t>(i)] + bv);
      }
    });
  } else {
    // small planes: gather each receptive field once per sample, then every
    // filter reduces to one contiguous dot per output element
    std::vector<T> col(static_cast<std::size_t>(rows * ck2));
    for (std::int64_t n = 0; n < d.n; ++n) {
      detail::build_patches(in + n * d.c * d.h * d.w, d, stride, padding, col.data());
      detail::run_tasks(d.f, [&](std::int64_t f) {
        const T* krow = kw + f * ck2;
        const double bv = static_cast<double>(kb[f]);
        T* out_plane = op + (n * d.f + f) * rows;
        for (std::int64_t r = 0; r < rows; ++r) {
          out_plane[r] = static_cast<T>(detail::dot_f64(col.data() + r * ck2, krow, ck2) + bv);
        }
      });
    }
  }
  if (detail::recording(input, kernel, bias)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([input, kernel, bias, out, stride, padding]() {
      if (!out.has_grad()) return;
      const detail::ConvDims d = detail::conv2d_check(input, kernel, bias, stride, padding);
      const T* go = out.grad().data();
      const T* in = input.data().data();
      const T* kw = kernel.data().data();
      const std::int64_t rows = d.ho * d.wo;
      const std::int64_t ck2 = d.c * d.k * d.k;
      if (input.requires_grad()) {
        input.ensure_grad();
        T* gi = input.grad().data();
        if (d.k == 1) {
          // one task per (sample, input channel); each output element's
          // contributions stay in ascending-filter order
          detail::run_tasks(d.n * d.c, [&](std::int64_t task) {
            const std::int64_t n = task / d.c;
            const std::int64_t c = task % d.c;
            std::vector<double> gacc(static_cast<std::size_t>(d.h * d.w), 0.0);
            for (std::int64_t f = 0; f < d.f; ++f) {
              const double wv = static_cast<double>(kw[f * d.c + c]);
              if (wv == 0.0) continue;
              std::int64_t lo, hi;
              detail::conv_col_range(-padding, stride, d.w, d.wo, lo, hi);
              if (hi < lo) continue;
              for (std::int64_t oy = 0; oy < d.ho; ++oy) {
                const std::int64_t iy = oy * stride - padding;
                if (iy < 0 || iy >= d.h) continue;
                double* gin_row = gacc.data() + iy * d.w;
                const T* go_row = go + ((n * d.f + f) * d.ho + oy) * d.wo;
                for (std::int64_t ox = lo; ox <= hi; ++ox) {
                  gin_row[ox * stride - padding] += wv * static_cast<double>(go_row[ox]);
                }
              }
            }
            T* gi_nc = gi + (n * d.c + c) * d.h * d.w;
            for (std::int64_t i = 0; i < d.h * d.w; ++i) {
              gi_nc[i] += static_cast<T>(gacc[static_cast<std::size_t>(i)]);
            }
          });
        } else {
          // one task per sample: combine the filters into one gradient patch
          // per output element, then scatter it back over the input window
          detail::run_tasks(d.n, [&](std::int64_t n) {
            std::vector<double> gacc(static_cast<std::size_t>(d.c * d.h * d.w), 0.0);
            std::vector<double> grow(static_cast<std::size_t>(ck2));
            const T* go_n = go + n * d.f * rows;
            for (std::int64_t r = 0; r < rows; ++r) {
              std::fill(grow.begin(), grow.end(), 0.0);
              bool any = false;
              for (std::int64_t f = 0; f < d.f; ++f) {
                const double g = static_cast<double>(go_n[f * rows + r]);
                if (g == 0.0) continue;
                any = true;
                const T* krow = kw + f * ck2;
                for (std::int64_t j = 0; j < ck2; ++j) grow[j] += g * static_cast<double>(krow[j]);
              }
              if (!any) continue;
              const std::int64_t iy0 = (r / d.wo) * stride - padding;
              const std::int64_t ix0 = (r % d.wo) * stride - padding;
              const bool x_interior = ix0 >= 0 && ix0 + d.k <= d.w;
              for (std::int64_t c = 0; c < d.c; ++c) {
                for (std::int64_t ky = 0; ky < d.k; ++ky) {
                  const std::int64_t iy = iy0 + ky;
                  if (iy < 0 || iy >= d.h) continue;
                  double* gdst = gacc.data() + (c * d.h + iy) * d.w;
                  const double* gsrc = grow.data() + (c * d.k + ky) * d.k;
                  if (x_interior) {
                    for (std::int64_t kx = 0; kx < d.k; ++kx) gdst[ix0 + kx] += gsrc[kx];
                  } else {
                    for (std::int64_t kx = 0; kx < d.k; ++kx) {
                      const std::int64_t ix = ix0 + kx;
                      if (ix >= 0 && ix < d.w) gdst[ix] += gsrc[kx];
                    }
                  }
                }
              }
            }
            T* gi_n = gi + n * d.c * d.h * d.w;
            for (std::int64_t i = 0; i < d.c * d.h * d.w; ++i) {
              gi_n[i] += static_cast<T>(gacc[static_cast<std::size_t>(i)]);
            }
          });
        }
      }
      if (kernel.requires_grad()) {
        kernel.ensure_grad();
        T* gk = kernel.grad().data();
        if (d.k == 1) {
          detail::run_tasks(d.f, [&](std::int64_t f) {
            for (std::int64_t c = 0; c < d.c; ++c) {
              std::int64_t lo, hi;
              detail::conv_col_range(-padding, stride, d.w, d.wo, lo, hi);
              double s = 0.0;
              if (hi >= lo) {
                for (std::int64_t n = 0; n < d.n; ++n) {
                  for (std::int64_t oy = 0; oy < d.ho; ++oy) {
                    const std::int64_t iy = oy * stride - padding;
                    if (iy < 0 || iy >= d.h) continue;
                    const T* in_row = in + ((n * d.c + c) * d.h + iy) * d.w;
                    const T* go_row = go + ((n * d.f + f) * d.ho + oy) * d.wo;
                    if (stride == 1 && padding == 0) {
                      s += detail::dot_f64(go_row + lo, in_row + lo, hi - lo + 1);
                    } else {
                      for (std::int64_t ox = lo; ox <= hi; ++ox) {
                        s += static_cast<double>(go_row[ox]) * static_cast<double>(in_row[ox * stride - padding]);
                      }
                    }
                  }
                }
              }
              gk[f * d.c + c] += static_cast<T>(s);
            }
          });
        } else {
          // per-filter rows of the kernel gradient are reductions of the same
          // patch matrix the forward pass used, rebuilt here sample by sample
          std::vector<double> acc(static_cast<std::size_t>(d.f * ck2), 0.0);
          std::vector<T> col(static_cast<std::size_t>(rows * ck2));
          for (std::int64_t n = 0; n < d.n; ++n) {
            detail::build_patches(in + n * d.c * d.h * d.w, d, stride, padding, col.data());
            detail::run_tasks(d.f, [&](std::int64_t f) {
              double* arow = acc.data() + f * ck2;
              const T* go_plane = go + (n * d.f + f) * rows;
              for (std::int64_t r = 0; r < rows; ++r) {
                const double g = static_cast<double>(go_plane[r]);
                if (g == 0.0) continue;
                const T* crow = col.data() + r * ck2;
                for (std::int64_t j = 0; j < ck2; ++j) arow[j] += g * static_cast<double>(crow[j]);
              }
            });
          }
          for (std::int64_t i = 0; i < d.f * ck2; ++i) {
            gk[i] += static_cast<T>(acc[static_cast<std::size_t>(i)]);
          }
        }
      }
      if (bias.requires_grad()) {
        bias.ensure_grad();
        T* gb = bias.grad().data();
        for (std::int64_t f = 0; f < d.f; ++f) {
          double s = 0.0;
          for (std::int64_t n = 0; n < d.n; ++n) {
            const T* go_plane = go + (n * d.f + f) * d.ho * d.wo;
            for (std::int64_t i = 0; i < d.ho * d.wo; ++i) s += static_cast<double>(go_plane[i]);
          }
          gb[f] += static_cast<T>(s);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& a) {
  detail::require_defined(a, "upsample_nearest2x");
  if (a.rank() != 4) {
    throw std::invalid_argument("upsample_nearest2x: input must be rank 4, got " + shape_str(a.shape()));
  }
  const std::int64_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  Tensor<T> out({n, c, 2 * h, 2 * w});
  const T* in = a.data().data();
  T* op = out.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* ip = in + p * h * w;
    T* o = op + p * 4 * h * w;
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const T v = ip[y * w + x];
        T* row0 = o + (2 * y) * 2 * w + 2 * x;
        T* row1 = row0 + 2 * w;
        row0[0] = v;
        row0[1] = v;
        row1[0] = v;
        row1[1] = v;
      }
    }
  }
  if (detail::recording(a)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, out]() {
      if (!out.has_grad()) return;
      const std::int64_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
      const T* go = out.grad().data();
      a.ensure_grad();
      T* ga = a.grad().data();
      for (std::int64_t p = 0; p < n * c; ++p) {
        T* g = ga + p * h * w;
        const T* o = go + p * 4 * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t x = 0; x < w; ++x) {
            const T* row0 = o + (2 * y) * 2 * w + 2 * x;
            const T* row1 = row0 + 2 * w;
            g[y * w + x] += row0[0] + row0[1] + row1[0] + row1[1];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> avgpool2x(const Tensor<T>& a) {
  detail::require_defined(a, "avgpool2x");
  if (a.rank() != 4) {
    throw std::invalid_argument("avgpool2x: input must be rank 4, got " + shape_str(a.shape()));
  }
  const std::int64_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  if (h % 2 != 0) {
    throw std::invalid_argument("avgpool2x: height axis 2 must be even, got " + std::to_string(h));
  }
  if (w % 2 != 0) {
    throw std::invalid_argument("avgpool2x: width axis 3 must be even, got " + std::to_string(w));
  }
  Tensor<T> out({n, c, h / 2, w / 2});
  const T* in = a.data().data();
  T* op = out.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* ip = in + p * h * w;
    T* o = op + p * (h / 2) * (w / 2);
    for (std::int64_t y = 0; y < h / 2; ++y) {
      for (std::int64_t x = 0; x < w / 2; ++x) {
        const T* row0 = ip + (2 * y) * w + 2 * x;
        const T* row1 = row0 + w;
        const double s = static_cast<double>(row0[0]) + static_cast<double>(row0[1]) +
                         static_cast<double>(row1[0]) + static_cast<double>(row1[1]);
        o[y * (w / 2) + x] = static_cast<T>(s * 0.25);
      }
    }
  }
  if (detail::recording(a)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, out]() {
      if (!out.has_grad()) return;
      const std::int64_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
      const T* go = out.grad().data();
      a.ensure_grad();
      T* ga = a.grad().data();
      for (std::int64_t p = 0; p < n * c; ++p) {
        T* g = ga + p * h * w;
        const T* o = go + p * (h / 2) * (w / 2);
        for (std::int64_t y = 0; y < h / 2; ++y) {
          for (std::int64_t x = 0; x < w / 2; ++x) {
            const T q = o[y * (w / 2) + x] * T(0.25);
            T* row0 = g + (2 * y) * w + 2 * x;
            T* row1 = row0 + w;
            row0[0] += q;
            row0[1] += q;
            row1[0] += q;
            row1[1] += q;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_defined(a, "concat_channels");
  detail::require_defined(b, "concat_channels");
  if (a.rank() != 4 || b.rank() != 4) {
    throw std::invalid_argument("concat_channels: inputs must be rank 4, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw std::invalid_argument("concat_channels: non-channel extents differ: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  Tensor<T> out({n, ca + cb, h, w});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  const std::int64_t plane = h * w;
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy(pa + i * ca * plane, pa + (i + 1) * ca * plane, po + i * (ca + cb) * plane);
    std::copy(pb + i * cb * plane, pb + (i + 1) * cb * plane, po + (i * (ca + cb) + ca) * plane);
  }
  if (detail::recording(a, b)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, b, out]() {
      if (!out.has_grad()) return;
      const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
      const T* go = out.grad().data();
      if (a.requires_grad()) {
        a.ensure_grad();
        T* ga = a.grad().data();
        for (std::int64_t i = 0; i < n; ++i) {
          const T* src = go + i * (ca + cb) * plane;
          T* dst = ga + i * ca * plane;
          for (std::int64_t j = 0; j < ca * plane; ++j) dst[j] += src[j];
        }
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        T* gb = b.grad().data();
        for (std::int64_t i = 0; i < n; ++i) {
          const T* src = go + (i * (ca + cb) + ca) * plane;
          T* dst = gb + i * cb * plane;
          for (std::int64_t j = 0; j < cb * plane; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  detail::require_defined(a, "sum_all");
  if (a.numel() < 1) throw std::invalid_argument("sum_all: empty tensor");
  auto pa = a.data();
  double s = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) s += static_cast<double>(pa[i]);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(s));
  if (detail::recording(a)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, out]() {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      a.ensure_grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  detail::require_defined(a, "mean_all");
  if (a.numel() < 1) throw std::invalid_argument("mean_all: empty tensor");
  auto pa = a.data();
  double s = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) s += static_cast<double>(pa[i]);
  const double inv = 1.0 / static_cast<double>(a.numel());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(s * inv));
  if (detail::recording(a)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, out, inv]() {
      if (!out.has_grad()) return;
      const T g = static_cast<T>(static_cast<double>(out.grad()[0]) * inv);
      a.ensure_grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

// Mean over every axis except the leading batch axis: [N,...] -> [N].
template <typename T>
Tensor<T> mean_per_sample(const Tensor<T>& a) {
  detail::require_defined(a, "mean_per_sample");
  if (a.rank() < 2) {
    throw std::invalid_argument("mean_per_sample: input must have a batch axis plus data axes, got " +
                                shape_str(a.shape()));
  }
  const std::int64_t n = a.dim(0);
  const std::int64_t rest = a.numel() / n;
  Tensor<T> out({n});
  const T* pa = a.data().data();
  T* po = out.data().data();
  const double inv = 1.0 / static_cast<double>(rest);
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    const T* row = pa + i * rest;
    for (std::int64_t j = 0; j < rest; ++j) s += static_cast<double>(row[j]);
    po[i] = static_cast<T>(s * inv);
  }
  if (detail::recording(a)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([a, out, inv]() {
      if (!out.has_grad()) return;
      const std::int64_t n = a.dim(0);
      const std::int64_t rest = a.numel() / n;
      auto go = out.grad();
      a.ensure_grad();
      T* ga = a.grad().data();
      for (std::int64_t i = 0; i < n; ++i) {
        const T g = static_cast<T>(static_cast<double>(go[i]) * inv);
        T* row = ga + i * rest;
        for (std::int64_t j = 0; j < rest; ++j) row[j] += g;
      }
    });
  }
  return out;
}

// Per-element affine map with learnable scalar weight and bias: y = w*x + b.
template <typename T>
Tensor<T> scalar_affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_defined(x, "scalar_affine");
  detail::require_defined(w, "scalar_affine");
  detail::require_defined(b, "scalar_affine");
  if (w.numel() != 1 || b.numel() != 1) {
    throw std::invalid_argument("scalar_affine: weight and bias must be scalars, got " +
                                shape_str(w.shape()) + " and " + shape_str(b.shape()));
  }
  const T wv = w.data()[0];
  const T bv = b.data()[0];
  Tensor<T> out(x.shape());
  auto px = x.data(), po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = wv * px[i] + bv;
  if (detail::recording(x, w, b)) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([x, w, b, out]() {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto px = x.data();
      if (x.requires_grad()) {
        x.ensure_grad();
        auto gx = x.grad();
        const T wv = w.data()[0];
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += wv * go[i];
      }
      if (w.requires_grad()) {
        w.ensure_grad();
        double s = 0.0;
        for (std::size_t i = 0; i < go.size(); ++i) {
          s += static_cast<double>(go[i]) * static_cast<double>(px[i]);
        }
        w.grad()[0] += static_cast<T>(s);
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        double s = 0.0;
        for (std::size_t i = 0; i < go.size(); ++i) s += static_cast<double>(go[i]);
        b.grad()[0] += static_cast<T>(s);
      }
    });
  }
  return out;
}

}  // namespace aranet
