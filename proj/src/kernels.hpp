#pragma once

// NCHW kernels used by the segmentation model. All convolutions are
// stride 1 with "same" zero padding.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "ilss/tensor.hpp"

namespace ilss::kernels {

template <typename T>
void conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                    BasicTensor<T>& output) {
  const std::size_t batch = input.dim(0), in_ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t out_ch = weight.dim(0), k = weight.dim(2);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  output = BasicTensor<T>({batch, out_ch, h, w});
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t oc = 0; oc < out_ch; ++oc) {
      T* out = &output.at(n, oc, 0, 0);
      std::fill(out, out + h * w, bias[oc]);
      for (std::size_t ic = 0; ic < in_ch; ++ic) {
        const T* in = &input.at(n, ic, 0, 0);
        const T* wk = &weight[(oc * in_ch + ic) * k * k];
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T wv = wk[ky * k + kx];
            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
            const std::size_t x0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dx));
            const std::size_t x1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w), static_cast<std::ptrdiff_t>(w) - dx));
            for (std::size_t y = 0; y < h; ++y) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
              T* orow = out + y * w;
              const T* irow = in + static_cast<std::size_t>(sy) * w;
              for (std::size_t x = x0; x < x1; ++x) orow[x] += wv * irow[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x) + dx)];
            }
          }
        }
      }
    }
  }
}

/// Accumulates weight/bias gradients and, if input_grad is non-null, writes
/// the gradient with respect to the input.
template <typename T>
void conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& output_grad,
                     BasicTensor<T>* weight_grad, BasicTensor<T>* bias_grad, BasicTensor<T>* input_grad) {
  const std::size_t batch = input.dim(0), in_ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t out_ch = weight.dim(0), k = weight.dim(2);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  if (input_grad) *input_grad = BasicTensor<T>(input.shape());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t oc = 0; oc < out_ch; ++oc) {
      const T* gout = &output_grad.at(n, oc, 0, 0);
      if (bias_grad) {
        T acc{};
        for (std::size_t i = 0; i < h * w; ++i) acc += gout[i];
        (*bias_grad)[oc] += acc;
      }
      for (std::size_t ic = 0; ic < in_ch; ++ic) {
        const T* in = &input.at(n, ic, 0, 0);
        T* gin = input_grad ? &input_grad->at(n, ic, 0, 0) : nullptr;
        const std::size_t wbase = (oc * in_ch + ic) * k * k;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
            const std::size_t x0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dx));
            const std::size_t x1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w), static_cast<std::ptrdiff_t>(w) - dx));
            const T wv = weight[wbase + ky * k + kx];
            T acc{};
            for (std::size_t y = 0; y < h; ++y) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
              const T* grow = gout + y * w;
              const std::size_t srow = static_cast<std::size_t>(sy) * w;
              if (weight_grad) {
                for (std::size_t x = x0; x < x1; ++x) acc += grow[x] * in[srow + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x) + dx)];
              }
              if (gin) {
                for (std::size_t x = x0; x < x1; ++x) gin[srow + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x) + dx)] += wv * grow[x];
              }
            }
            if (weight_grad) (*weight_grad)[wbase + ky * k + kx] += acc;
          }
        }
      }
    }
  }
}

template <typename T>
void relu_inplace(BasicTensor<T>& t) {
  for (auto& v : t.data()) v = v > T{} ? v : T{};
}

/// grad *= (activation > 0), where activation is the ReLU output.
template <typename T>
void relu_backward_inplace(const BasicTensor<T>& activation, BasicTensor<T>& grad) {
  auto a = activation.data();
  auto g = grad.data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(a[i] > T{})) g[i] = T{};
  }
}

/// 2x2 average pooling, stride 2.
template <typename T>
BasicTensor<T> avgpool2_forward(const BasicTensor<T>& input) {
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2) / 2, w = input.dim(3) / 2;
  BasicTensor<T> out({n, c, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          out.at(b, ch, y, x) = T(0.25) * (input.at(b, ch, 2 * y, 2 * x) + input.at(b, ch, 2 * y, 2 * x + 1) +
                                           input.at(b, ch, 2 * y + 1, 2 * x) + input.at(b, ch, 2 * y + 1, 2 * x + 1));
        }
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> avgpool2_backward(const BasicTensor<T>& output_grad, const Shape& input_shape) {
  BasicTensor<T> gin(input_shape);
  const std::size_t n = output_grad.dim(0), c = output_grad.dim(1), h = output_grad.dim(2), w = output_grad.dim(3);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const T g = T(0.25) * output_grad.at(b, ch, y, x);
          gin.at(b, ch, 2 * y, 2 * x) = g;
          gin.at(b, ch, 2 * y, 2 * x + 1) = g;
          gin.at(b, ch, 2 * y + 1, 2 * x) = g;
          gin.at(b, ch, 2 * y + 1, 2 * x + 1) = g;
        }
      }
    }
  }
  return gin;
}

/// Source taps of bilinear upsampling along one axis (half-pixel centres,
/// edge clamped).
struct BilinearAxis {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;

  BilinearAxis(std::size_t in_size, std::size_t factor) {
    const std::size_t out_size = in_size * factor;
    lo.resize(out_size);
    hi.resize(out_size);
    frac.resize(out_size);
    for (std::size_t o = 0; o < out_size; ++o) {
      double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
      const auto l = static_cast<std::size_t>(src);
      lo[o] = l;
      hi[o] = std::min(l + 1, in_size - 1);
      frac[o] = src - static_cast<double>(l);
    }
  }
};

template <typename T>
BasicTensor<T> upsample_bilinear_forward(const BasicTensor<T>& input, std::size_t factor) {
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const BilinearAxis ay(h, factor), ax(w, factor);
  BasicTensor<T> out({n, c, h * factor, w * factor});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h * factor; ++y) {
        const T fy = static_cast<T>(ay.frac[y]);
        for (std::size_t x = 0; x < w * factor; ++x) {
          const T fx = static_cast<T>(ax.frac[x]);
          const T top = (T(1) - fx) * input.at(b, ch, ay.lo[y], ax.lo[x]) + fx * input.at(b, ch, ay.lo[y], ax.hi[x]);
          const T bottom = (T(1) - fx) * input.at(b, ch, ay.hi[y], ax.lo[x]) + fx * input.at(b, ch, ay.hi[y], ax.hi[x]);
          out.at(b, ch, y, x) = (T(1) - fy) * top + fy * bottom;
        }
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> upsample_bilinear_backward(const BasicTensor<T>& output_grad, std::size_t factor) {
  const std::size_t n = output_grad.dim(0), c = output_grad.dim(1);
  const std::size_t h = output_grad.dim(2) / factor, w = output_grad.dim(3) / factor;
  const BilinearAxis ay(h, factor), ax(w, factor);
  BasicTensor<T> gin({n, c, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h * factor; ++y) {
        const T fy = static_cast<T>(ay.frac[y]);
        for (std::size_t x = 0; x < w * factor; ++x) {
          const T fx = static_cast<T>(ax.frac[x]);
          const T g = output_grad.at(b, ch, y, x);
          gin.at(b, ch, ay.lo[y], ax.lo[x]) += (T(1) - fy) * (T(1) - fx) * g;
          gin.at(b, ch, ay.lo[y], ax.hi[x]) += (T(1) - fy) * fx * g;
          gin.at(b, ch, ay.hi[y], ax.lo[x]) += fy * (T(1) - fx) * g;
          gin.at(b, ch, ay.hi[y], ax.hi[x]) += fy * fx * g;
        }
      }
    }
  }
  return gin;
}

}  // namespace ilss::kernels
