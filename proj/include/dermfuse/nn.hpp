#pragma once

#include <cstdint>
#include <vector>

#include "dermfuse/tensor.hpp"

namespace dermfuse {
namespace detail {

// C(M x N) += A(M x K) * B(K x N), all row-major.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(M x N) += A^T * B with A stored K x M.
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(M x N) += A * B^T with B stored N x K.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += static_cast<double>(arow[p]) * static_cast<double>(brow[p]);
      c[i * n + j] += static_cast<T>(acc);
    }
  }
}

// Unrolls one sample's patches into a (C*k*k) x (outH*outW) matrix.
template <typename T>
void im2col(const T* x, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t oh, std::int64_t ow, T* cols) {
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t ky = 0; ky < k; ++ky) {
      for (std::int64_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((ch * k + ky) * k + kx) * (oh * ow);
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            for (std::int64_t ox = 0; ox < ow; ++ox) row[oy * ow + ox] = T(0);
            continue;
          }
          const T* src = x + (ch * h + iy) * w;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride + kx - pad;
            row[oy * ow + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-adds a column matrix back onto the input layout.
template <typename T>
void col2im_add(const T* cols, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k,
                std::int64_t stride, std::int64_t pad, std::int64_t oh, std::int64_t ow, T* x) {
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t ky = 0; ky < k; ++ky) {
      for (std::int64_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((ch * k + ky) * k + kx) * (oh * ow);
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = x + (ch * h + iy) * w;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D cross-correlation over NCHW input with an O x C x k x k kernel.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0) {
  if (input.ndim() != 4) throw ShapeError("conv2d: input must be NCHW, got " + shape_str(input.shape()));
  if (weight.ndim() != 4) throw ShapeError("conv2d: weight must be OCkk, got " + shape_str(weight.shape()));
  if (weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d: kernel must be square, got " + shape_str(weight.shape()));
  }
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t o = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c) {
    throw ShapeError("conv2d: input has " + std::to_string(c) + " channels, kernel expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.numel() != o) throw ShapeError("conv2d: bias length != output channels");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (padding < 0) throw ContractError("conv2d: padding must be >= 0");
  const std::int64_t oh = (h + 2 * padding - k) / stride + 1;
  const std::int64_t ow = (w + 2 * padding - k) / stride + 1;
  if (h + 2 * padding < k || w + 2 * padding < k || oh < 1 || ow < 1) {
    throw ShapeError("conv2d: kernel does not fit: input " + shape_str(input.shape()) + ", kernel " +
                     std::to_string(k) + ", stride " + std::to_string(stride) + ", padding " +
                     std::to_string(padding));
  }

  const std::int64_t kk = c * k * k;
  const std::int64_t l = oh * ow;
  Tensor<T> out({n, o, oh, ow});
  {
    std::vector<T> cols(static_cast<std::size_t>(kk * l));
    const auto& xv = input.values();
    const auto& wv = weight.values();
    const auto& bv = bias.values();
    auto& ov = out.values();
    for (std::int64_t s = 0; s < n; ++s) {
      detail::im2col(xv.data() + s * c * h * w, c, h, w, k, stride, padding, oh, ow, cols.data());
      T* osample = ov.data() + s * o * l;
      std::fill(osample, osample + o * l, T(0));
      detail::gemm_nn(wv.data(), cols.data(), osample, o, kk, l);
      for (std::int64_t oc = 0; oc < o; ++oc) {
        const T b = bv[oc];
        T* orow = osample + oc * l;
        for (std::int64_t j = 0; j < l; ++j) orow[j] += b;
      }
    }
    detail::ensure_finite(ov, "conv2d");
  }

  if (detail::trace<T>({&input, &weight, &bias})) {
    out.enable_grad();
    Tape<T>::get().push("conv2d", [input, weight, bias, out, stride, padding, n, c, h, w, o, k, oh, ow]() {
      const std::int64_t kk = c * k * k;
      const std::int64_t l = oh * ow;
      const auto& go = out.grad();
      const auto& xv = input.values();
      const auto& wv = weight.values();
      std::vector<T> cols(static_cast<std::size_t>(kk * l));
      std::vector<T> gcols;
      if (input.has_grad()) gcols.resize(static_cast<std::size_t>(kk * l));
      for (std::int64_t s = 0; s < n; ++s) {
        const T* gsample = go.data() + s * o * l;
        if (bias.has_grad()) {
          auto& gb = bias.grad();
          for (std::int64_t oc = 0; oc < o; ++oc) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < l; ++j) acc += static_cast<double>(gsample[oc * l + j]);
            gb[oc] += static_cast<T>(acc);
          }
        }
        if (weight.has_grad() || input.has_grad()) {
          detail::im2col(xv.data() + s * c * h * w, c, h, w, k, stride, padding, oh, ow, cols.data());
        }
        if (weight.has_grad()) {
          detail::gemm_nt(gsample, cols.data(), weight.grad().data(), o, l, kk);
        }
        if (input.has_grad()) {
          std::fill(gcols.begin(), gcols.end(), T(0));
          detail::gemm_tn(wv.data(), gsample, gcols.data(), kk, o, l);
          detail::col2im_add(gcols.data(), c, h, w, k, stride, padding, oh, ow,
                             input.grad().data() + s * c * h * w);
        }
      }
      if (bias.has_grad()) detail::ensure_finite(bias.grad(), "conv2d backward");
      if (weight.has_grad()) detail::ensure_finite(weight.grad(), "conv2d backward");
      if (input.has_grad()) detail::ensure_finite(input.grad(), "conv2d backward");
    });
  }
  return out;
}

// out = input (N x D) * weight (D x M) + bias (M).
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (input.ndim() != 2 || weight.ndim() != 2) {
    throw ShapeError("linear: expected 2-D input and weight, got " + shape_str(input.shape()) +
                     " and " + shape_str(weight.shape()));
  }
  const std::int64_t n = input.dim(0), d = input.dim(1), m = weight.dim(1);
  if (weight.dim(0) != d) {
    throw ShapeError("linear: inner dimensions disagree, input " + shape_str(input.shape()) +
                     " vs weight " + shape_str(weight.shape()));
  }
  if (bias.numel() != m) throw ShapeError("linear: bias length != output width");

  Tensor<T> out({n, m});
  const auto& xv = input.values();
  const auto& wv = weight.values();
  const auto& bv = bias.values();
  auto& ov = out.values();
  for (std::int64_t r = 0; r < n; ++r) std::copy_n(bv.data(), m, ov.data() + r * m);
  detail::gemm_nn(xv.data(), wv.data(), ov.data(), n, d, m);
  detail::ensure_finite(ov, "linear");

  if (detail::trace<T>({&input, &weight, &bias})) {
    out.enable_grad();
    Tape<T>::get().push("linear", [input, weight, bias, out, n, d, m]() {
      const auto& go = out.grad();
      if (bias.has_grad()) {
        auto& gb = bias.grad();
        for (std::int64_t j = 0; j < m; ++j) {
          double acc = 0.0;
          for (std::int64_t r = 0; r < n; ++r) acc += static_cast<double>(go[r * m + j]);
          gb[j] += static_cast<T>(acc);
        }
        detail::ensure_finite(gb, "linear backward");
      }
      if (weight.has_grad()) {
        detail::gemm_tn(input.values().data(), go.data(), weight.grad().data(), d, n, m);
        detail::ensure_finite(weight.grad(), "linear backward");
      }
      if (input.has_grad()) {
        detail::gemm_nt(go.data(), weight.values().data(), input.grad().data(), n, m, d);
        detail::ensure_finite(input.grad(), "linear backward");
      }
    });
  }
  return out;
}

// Averages over a contiguous, evenly partitioned window grid.
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& input, int out_h, int out_w) {
  if (input.ndim() != 4) throw ShapeError("adaptive_avg_pool: input must be NCHW");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (out_h < 1 || out_w < 1 || out_h > h || out_w > w) {
    throw ShapeError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " does not fit input " + shape_str(input.shape()));
  }
  Tensor<T> out({n, c, out_h, out_w});
  const auto& xv = input.values();
  auto& ov = out.values();
  for (std::int64_t s = 0; s < n; ++s) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* plane = xv.data() + (s * c + ch) * h * w;
      T* oplane = ov.data() + (s * c + ch) * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const std::int64_t y0 = oy * h / out_h, y1 = (oy + 1) * h / out_h;
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const std::int64_t x0 = ox * w / out_w, x1 = (ox + 1) * w / out_w;
          double acc = 0.0;
          for (std::int64_t y = y0; y < y1; ++y)
            for (std::int64_t x = x0; x < x1; ++x) acc += static_cast<double>(plane[y * w + x]);
          oplane[oy * out_w + ox] = static_cast<T>(acc / static_cast<double>((y1 - y0) * (x1 - x0)));
        }
      }
    }
  }
  detail::ensure_finite(ov, "adaptive_avg_pool");
  if (detail::trace<T>({&input})) {
    out.enable_grad();
    Tape<T>::get().push("adaptive_avg_pool", [input, out, n, c, h, w, out_h, out_w]() {
      if (!input.has_grad()) return;
      const auto& go = out.grad();
      auto& gi = input.grad();
      for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          T* gplane = gi.data() + (s * c + ch) * h * w;
          const T* goplane = go.data() + (s * c + ch) * out_h * out_w;
          for (std::int64_t oy = 0; oy < out_h; ++oy) {
            const std::int64_t y0 = oy * h / out_h, y1 = (oy + 1) * h / out_h;
            for (std::int64_t ox = 0; ox < out_w; ++ox) {
              const std::int64_t x0 = ox * w / out_w, x1 = (ox + 1) * w / out_w;
              const T g = goplane[oy * out_w + ox] / static_cast<T>((y1 - y0) * (x1 - x0));
              for (std::int64_t y = y0; y < y1; ++y)
                for (std::int64_t x = x0; x < x1; ++x) gplane[y * w + x] += g;
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  Tensor<T> pooled = adaptive_avg_pool(input, 1, 1);
  return pooled.reshaped({input.dim(0), input.dim(1)});
}

// Each pixel is replicated factor x factor; backward sums over each block.
template <typename T>
Tensor<T> nearest_upsample(const Tensor<T>& input, int factor) {
  if (input.ndim() != 4) throw ShapeError("nearest_upsample: input must be NCHW");
  if (factor < 1) throw ContractError("nearest_upsample: factor must be >= 1");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t f = factor, oh = h * f, ow = w * f;
  Tensor<T> out({n, c, oh, ow});
  const auto& xv = input.values();
  auto& ov = out.values();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* plane = xv.data() + p * h * w;
    T* oplane = ov.data() + p * oh * ow;
    for (std::int64_t y = 0; y < oh; ++y) {
      const T* src = plane + (y / f) * w;
      T* dst = oplane + y * ow;
      for (std::int64_t x = 0; x < ow; ++x) dst[x] = src[x / f];
    }
  }
  if (detail::trace<T>({&input})) {
    out.enable_grad();
    Tape<T>::get().push("nearest_upsample", [input, out, n, c, h, w, f]() {
      if (!input.has_grad()) return;
      const auto& go = out.grad();
      auto& gi = input.grad();
      const std::int64_t oh = h * f, ow = w * f;
      for (std::int64_t p = 0; p < n * c; ++p) {
        T* gplane = gi.data() + p * h * w;
        const T* goplane = go.data() + p * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y) {
          T* dst = gplane + (y / f) * w;
          const T* src = goplane + y * ow;
          for (std::int64_t x = 0; x < ow; ++x) dst[x / f] += src[x];
        }
      }
    });
  }
  return out;
}

}  // namespace dermfuse
