#pragma once

// Forward and backward passes for the fixed layer set used by the two
// detection networks. Every function is a pure function of its arguments
// (dropout additionally consumes the caller's RNG).
//
// Accumulation order is fixed per output element, independent of the
// spatial extent of the input. Convolving a large map and cropping gives
// bit-identical values to convolving the crop, which the dense inference
// path relies on.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <random>
#include <vector>

#include "macnn/tensor.hpp"

namespace macnn {

namespace detail {

template <std::floating_point T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, std::string_view what) {
  if (t.rank() != rank) {
    fail(ErrorKind::shape, std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                               shape_string(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution (valid, stride 1)

namespace detail {

// 32-byte lanes via GCC/Clang vector extensions. Lane arithmetic is plain
// IEEE elementwise math, so results equal the scalar loop's.
template <class T>
struct SimdLane {
  static constexpr std::size_t width = 32 / sizeof(T);
  typedef T type __attribute__((vector_size(32)));
};

template <class T>
inline typename SimdLane<T>::type load_lane(const T* p) {
  typename SimdLane<T>::type v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <class T>
inline void store_lane(T* p, typename SimdLane<T>::type v) {
  std::memcpy(p, &v, sizeof(v));
}

template <class T>
inline typename SimdLane<T>::type broadcast(T x) {
  typename SimdLane<T>::type v;
  for (std::size_t l = 0; l < SimdLane<T>::width; ++l) v[l] = x;
  return v;
}

// One register tile: kBlockO output channels x kLanes SIMD lanes of a row.
// Each output element starts at its bias and accumulates kernel taps in
// (c, u, v) order.
template <std::floating_point T, std::size_t kBlockO, std::size_t kLanes>
inline void conv2d_tile(const T* in, std::size_t channels, std::size_t height, std::size_t width,
                        const T* packed, const T* bias, std::size_t kh, std::size_t kw, std::size_t i,
                        std::size_t j0, T* out, std::size_t plane, std::size_t out_w) {
  using Lane = typename SimdLane<T>::type;
  constexpr std::size_t kWidth = SimdLane<T>::width;
  Lane acc[kBlockO][kLanes];
  for (std::size_t b = 0; b < kBlockO; ++b)
    for (std::size_t l = 0; l < kLanes; ++l) acc[b][l] = broadcast<T>(bias[b]);
  const T* w = packed;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t u = 0; u < kh; ++u) {
      const T* src_row = in + (c * height + i + u) * width + j0;
      for (std::size_t v = 0; v < kw; ++v, w += kBlockO) {
        Lane src[kLanes];
        for (std::size_t l = 0; l < kLanes; ++l) src[l] = load_lane<T>(src_row + v + l * kWidth);
        for (std::size_t b = 0; b < kBlockO; ++b) {
          const Lane weight = broadcast<T>(w[b]);
          for (std::size_t l = 0; l < kLanes; ++l) acc[b][l] += weight * src[l];
        }
      }
    }
  }
  for (std::size_t b = 0; b < kBlockO; ++b)
    for (std::size_t l = 0; l < kLanes; ++l) store_lane<T>(out + b * plane + i * out_w + j0 + l * kWidth, acc[b][l]);
}

// d_k[o,c,u,v] = sum_{i,j} d_out[o,i,j] * in[c,i+u,j+v]. Per (o,c,u,v) the
// sum runs over SIMD lanes of full column vectors (rows in order), then the
// lanes are reduced left to right, then the scalar column tail is added.
template <std::floating_point T>
void conv2d_kernel_grad(const T* in, std::size_t channels, std::size_t height, std::size_t width, const T* d_out,
                        std::size_t out_channels, std::size_t kh, std::size_t kw, T* d_k) {
  using Lane = typename SimdLane<T>::type;
  constexpr std::size_t kWidth = SimdLane<T>::width;
  constexpr std::size_t kBlockO = 2;
  constexpr std::size_t kMaxKw = 6;
  const std::size_t out_h = height - kh + 1, out_w = width - kw + 1;
  const std::size_t plane = out_h * out_w;
  const std::size_t vec_w = out_w - out_w % kWidth;

  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t o0 = 0; o0 < out_channels; o0 += kBlockO) {
      const std::size_t ob = std::min(kBlockO, out_channels - o0);
      for (std::size_t u = 0; u < kh; ++u) {
        for (std::size_t v0 = 0; v0 < kw; v0 += kMaxKw) {
          const std::size_t vb = std::min(kMaxKw, kw - v0);
          Lane acc[kBlockO][kMaxKw];
          T tail[kBlockO][kMaxKw] = {};
          for (std::size_t b = 0; b < kBlockO; ++b)
            for (std::size_t v = 0; v < kMaxKw; ++v) acc[b][v] = broadcast<T>(T{0});
          for (std::size_t i = 0; i < out_h; ++i) {
            const T* in_row = in + (c * height + i + u) * width + v0;
            const T* g_row = d_out + o0 * plane + i * out_w;
            for (std::size_t j = 0; j < vec_w; j += kWidth) {
              Lane g[kBlockO];
              for (std::size_t b = 0; b < ob; ++b) g[b] = load_lane<T>(g_row + b * plane + j);
              for (std::size_t v = 0; v < vb; ++v) {
                const Lane x = load_lane<T>(in_row + j + v);
                for (std::size_t b = 0; b < ob; ++b) acc[b][v] += g[b] * x;
              }
            }
            for (std::size_t j = vec_w; j < out_w; ++j)
              for (std::size_t b = 0; b < ob; ++b)
                for (std::size_t v = 0; v < vb; ++v) tail[b][v] += g_row[b * plane + j] * in_row[j + v];
          }
          for (std::size_t b = 0; b < ob; ++b)
            for (std::size_t v = 0; v < vb; ++v) {
              T sum = 0;
              for (std::size_t l = 0; l < kWidth; ++l) sum += acc[b][v][l];
              d_k[(((o0 + b) * channels + c) * kh + u) * kw + v0 + v] = sum + tail[b][v];
            }
        }
      }
    }
  }
}

// Register-blocked valid convolution on raw planes. Blocking over output
// channels and columns never changes the per-element accumulation order.
template <std::floating_point T>
void conv2d_planes(const T* in, std::size_t channels, std::size_t height, std::size_t width, const T* kernels,
                   const T* bias, std::size_t out_channels, std::size_t kh, std::size_t kw, T* out) {
  constexpr std::size_t kBlockO = 4;
  constexpr std::size_t kWidth = SimdLane<T>::width;
  const std::size_t out_h = height - kh + 1, out_w = width - kw + 1;
  const std::size_t plane = out_h * out_w;
  const std::size_t taps = channels * kh * kw;
  std::vector<T> packed(taps * kBlockO);

  std::size_t o0 = 0;
  for (; o0 + kBlockO <= out_channels; o0 += kBlockO) {
    for (std::size_t t = 0; t < taps; ++t)
      for (std::size_t b = 0; b < kBlockO; ++b) packed[t * kBlockO + b] = kernels[(o0 + b) * taps + t];
    T* out_block = out + o0 * plane;
    for (std::size_t i = 0; i < out_h; ++i) {
      std::size_t j0 = 0;
      for (; j0 + 3 * kWidth <= out_w; j0 += 3 * kWidth)
        conv2d_tile<T, kBlockO, 3>(in, channels, height, width, packed.data(), bias + o0, kh, kw, i, j0, out_block,
                                   plane, out_w);
      for (; j0 + kWidth <= out_w; j0 += kWidth)
        conv2d_tile<T, kBlockO, 1>(in, channels, height, width, packed.data(), bias + o0, kh, kw, i, j0, out_block,
                                   plane, out_w);
      for (; j0 < out_w; ++j0) {
        for (std::size_t b = 0; b < kBlockO; ++b) {
          T acc = bias[o0 + b];
          const T* w = packed.data() + b;
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t u = 0; u < kh; ++u) {
              const T* src = in + (c * height + i + u) * width + j0;
              for (std::size_t v = 0; v < kw; ++v, w += kBlockO) acc += *w * src[v];
            }
          out_block[b * plane + i * out_w + j0] = acc;
        }
      }
    }
  }
  for (; o0 < out_channels; ++o0) {
    const T* k_o = kernels + o0 * taps;
    for (std::size_t i = 0; i < out_h; ++i) {
      T* __restrict row = out + (o0 * out_h + i) * out_w;
      std::fill(row, row + out_w, bias[o0]);
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t u = 0; u < kh; ++u) {
          const T* in_row = in + (c * height + i + u) * width;
          const T* k_row = k_o + (c * kh + u) * kw;
          for (std::size_t v = 0; v < kw; ++v) {
            const T weight = k_row[v];
            const T* __restrict src = in_row + v;
            for (std::size_t j = 0; j < out_w; ++j) row[j] += weight * src[j];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <std::floating_point T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& kernels,
                              const BasicTensor<T>& bias) {
  detail::require_rank(input, 3, "conv2d input");
  detail::require_rank(kernels, 4, "conv2d kernels");
  const std::size_t channels = input.dim(0), height = input.dim(1), width = input.dim(2);
  const std::size_t out_channels = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != channels || kh > height || kw > width) {
    fail(ErrorKind::shape, "conv2d: input " + shape_string(input.shape()) + " incompatible with kernels " +
                               shape_string(kernels.shape()));
  }
  require_shape(bias.shape(), {out_channels}, "conv2d bias");
  BasicTensor<T> output({out_channels, height - kh + 1, width - kw + 1});
  detail::conv2d_planes(input.data().data(), channels, height, width, kernels.data().data(), bias.data().data(),
                        out_channels, kh, kw, output.data().data());
  return output;
}

/// d_params = {d_kernels, d_bias}. With want_input_grad == false, d_input is
/// left empty (used for the first layer, whose input gradient is never needed).
template <std::floating_point T>
BasicLayerGrad<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernels,
                                  const BasicTensor<T>& d_output, bool want_input_grad = true) {
  detail::require_rank(input, 3, "conv2d_backward input");
  detail::require_rank(kernels, 4, "conv2d_backward kernels");
  const std::size_t channels = input.dim(0), height = input.dim(1), width = input.dim(2);
  const std::size_t out_channels = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != channels || kh > height || kw > width) {
    fail(ErrorKind::shape, "conv2d_backward: input " + shape_string(input.shape()) +
                               " incompatible with kernels " + shape_string(kernels.shape()));
  }
  const std::size_t out_h = height - kh + 1, out_w = width - kw + 1;
  require_shape(d_output.shape(), {out_channels, out_h, out_w}, "conv2d_backward d_output");

  BasicLayerGrad<T> grad;
  grad.d_params.emplace_back(kernels.shape());
  grad.d_params.emplace_back(Shape{out_channels});
  T* d_k = grad.d_params[0].data().data();
  T* d_b = grad.d_params[1].data().data();
  const T* in = input.data().data();
  const T* k = kernels.data().data();
  const T* d_out = d_output.data().data();

  for (std::size_t o = 0; o < out_channels; ++o) {
    T sum = 0;
    const T* plane = d_out + o * out_h * out_w;
    for (std::size_t n = 0; n < out_h * out_w; ++n) sum += plane[n];
    d_b[o] = sum;
  }

  detail::conv2d_kernel_grad(in, channels, height, width, d_out, out_channels, kh, kw, d_k);

  if (want_input_grad) {
    // Full correlation of the zero-padded upstream gradient with the
    // flipped, channel-transposed kernels.
    const std::size_t pad_h = out_h + 2 * (kh - 1), pad_w = out_w + 2 * (kw - 1);
    std::vector<T> padded(out_channels * pad_h * pad_w, T{0});
    for (std::size_t o = 0; o < out_channels; ++o)
      for (std::size_t i = 0; i < out_h; ++i)
        std::copy_n(d_out + (o * out_h + i) * out_w, out_w,
                    padded.data() + (o * pad_h + i + kh - 1) * pad_w + kw - 1);
    std::vector<T> flipped(channels * out_channels * kh * kw);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t o = 0; o < out_channels; ++o)
        for (std::size_t u = 0; u < kh; ++u)
          for (std::size_t v = 0; v < kw; ++v)
            flipped[((c * out_channels + o) * kh + u) * kw + v] =
                k[((o * channels + c) * kh + (kh - 1 - u)) * kw + (kw - 1 - v)];
    const std::vector<T> zero_bias(channels, T{0});
    grad.d_input = BasicTensor<T>(input.shape());
    detail::conv2d_planes(padded.data(), out_channels, pad_h, pad_w, flipped.data(), zero_bias.data(), channels,
                          kh, kw, grad.d_input.data().data());
  }
  return grad;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2, floor semantics on odd dimensions

struct PoolIndices {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

template <std::floating_point T>
struct PoolResult {
  BasicTensor<T> output;
  PoolIndices indices;
};

template <std::floating_point T>
PoolResult<T> maxpool2_forward(const BasicTensor<T>& input) {
  detail::require_rank(input, 3, "maxpool2 input");
  const std::size_t channels = input.dim(0), height = input.dim(1), width = input.dim(2);
  if (height < 2 || width < 2) {
    fail(ErrorKind::shape, "maxpool2 needs H, W >= 2, got " + shape_string(input.shape()));
  }
  const std::size_t out_h = height / 2, out_w = width / 2;
  PoolResult<T> result{BasicTensor<T>({channels, out_h, out_w}), {input.shape(), {channels, out_h, out_w}, {}}};
  result.indices.argmax.resize(result.output.size());
  const T* in = input.data().data();
  std::size_t n = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < out_h; ++i) {
      for (std::size_t j = 0; j < out_w; ++j, ++n) {
        const std::size_t top = (c * height + 2 * i) * width + 2 * j;
        const std::size_t candidates[4] = {top, top + 1, top + width, top + width + 1};
        std::size_t best = candidates[0];
        for (std::size_t q = 1; q < 4; ++q) {
          if (in[candidates[q]] > in[best]) best = candidates[q];
        }
        result.output[n] = in[best];
        result.indices.argmax[n] = best;
      }
    }
  }
  return result;
}

template <std::floating_point T>
BasicTensor<T> maxpool2_backward(const PoolIndices& indices, const BasicTensor<T>& d_output) {
  if (d_output.shape() != indices.output_shape || indices.argmax.size() != d_output.size()) {
    fail(ErrorKind::shape, "maxpool2_backward: d_output " + shape_string(d_output.shape()) +
                               " does not match pooling indices for output " +
                               shape_string(indices.output_shape));
  }
  BasicTensor<T> d_input(indices.input_shape);
  for (std::size_t n = 0; n < d_output.size(); ++n) d_input[indices.argmax[n]] += d_output[n];
  return d_input;
}

// ---------------------------------------------------------------------------
// Activations

template <std::floating_point T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& input, T slope) {
  BasicTensor<T> output = input;
  for (T& x : output.data()) x = x >= T{0} ? x : slope * x;
  return output;
}

/// Subgradient at 0 is 1.
template <std::floating_point T>
BasicTensor<T> leaky_relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& d_output, T slope) {
  require_shape(d_output.shape(), input.shape(), "leaky_relu_backward d_output");
  BasicTensor<T> d_input = d_output;
  for (std::size_t n = 0; n < input.size(); ++n) {
    if (input[n] < T{0}) d_input[n] *= slope;
  }
  return d_input;
}

template <std::floating_point T>
struct MaxoutResult {
  BasicTensor<T> output;
  std::vector<std::uint8_t> choice;  // 0 or 1: which element of the pair won
  Shape input_shape;
};

/// output[i] = max(input[2i], input[2i+1]); ties go to the lower index.
template <std::floating_point T>
MaxoutResult<T> maxout_pairs(const BasicTensor<T>& input) {
  if (input.size() % 2 != 0) {
    fail(ErrorKind::shape, "maxout_pairs needs an even number of inputs, got " + shape_string(input.shape()));
  }
  const std::size_t half = input.size() / 2;
  MaxoutResult<T> result{BasicTensor<T>({half}), std::vector<std::uint8_t>(half), input.shape()};
  for (std::size_t i = 0; i < half; ++i) {
    const bool second = input[2 * i + 1] > input[2 * i];
    result.choice[i] = second ? 1 : 0;
    result.output[i] = input[2 * i + (second ? 1 : 0)];
  }
  return result;
}

template <std::floating_point T>
BasicTensor<T> maxout_pairs_backward(const MaxoutResult<T>& forward, const BasicTensor<T>& d_output) {
  if (d_output.size() != forward.choice.size()) {
    fail(ErrorKind::shape, "maxout_pairs_backward: d_output " + shape_string(d_output.shape()) +
                               " does not match forward output length " +
                               std::to_string(forward.choice.size()));
  }
  BasicTensor<T> d_input(forward.input_shape);
  for (std::size_t i = 0; i < forward.choice.size(); ++i) d_input[2 * i + forward.choice[i]] = d_output[i];
  return d_input;
}

// ---------------------------------------------------------------------------
// Fully connected. The input may have any shape; it is read flattened.

template <std::floating_point T>
void fully_connected_raw(const T* x, std::size_t n, const T* weights, const T* bias, std::size_t m, T* out) {
  std::size_t r = 0;
  // Four rows at a time: independent accumulation chains, each summed in index order.
  for (; r + 4 <= m; r += 4) {
    const T* w0 = weights + r * n;
    const T* w1 = w0 + n;
    const T* w2 = w1 + n;
    const T* w3 = w2 + n;
    T s0 = bias[r], s1 = bias[r + 1], s2 = bias[r + 2], s3 = bias[r + 3];
    for (std::size_t k = 0; k < n; ++k) {
      s0 += w0[k] * x[k];
      s1 += w1[k] * x[k];
      s2 += w2[k] * x[k];
      s3 += w3[k] * x[k];
    }
    out[r] = s0;
    out[r + 1] = s1;
    out[r + 2] = s2;
    out[r + 3] = s3;
  }
  for (; r < m; ++r) {
    const T* w = weights + r * n;
    T s = bias[r];
    for (std::size_t k = 0; k < n; ++k) s += w[k] * x[k];
    out[r] = s;
  }
}

template <std::floating_point T>
BasicTensor<T> fully_connected_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                                       const BasicTensor<T>& bias) {
  detail::require_rank(weights, 2, "fully_connected weights");
  const std::size_t m = weights.dim(0), n = weights.dim(1);
  if (input.size() != n) {
    fail(ErrorKind::shape, "fully_connected: input " + shape_string(input.shape()) +
                               " incompatible with weights " + shape_string(weights.shape()));
  }
  require_shape(bias.shape(), {m}, "fully_connected bias");
  BasicTensor<T> output({m});
  fully_connected_raw(input.data().data(), n, weights.data().data(), bias.data().data(), m,
                      output.data().data());
  return output;
}

/// d_params = {d_weights, d_bias}; d_input has the input's shape.
template <std::floating_point T>
BasicLayerGrad<T> fully_connected_backward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                                           const BasicTensor<T>& d_output) {
  detail::require_rank(weights, 2, "fully_connected_backward weights");
  const std::size_t m = weights.dim(0), n = weights.dim(1);
  if (input.size() != n) {
    fail(ErrorKind::shape, "fully_connected_backward: input " + shape_string(input.shape()) +
                               " incompatible with weights " + shape_string(weights.shape()));
  }
  require_shape(d_output.shape(), {m}, "fully_connected_backward d_output");
  BasicLayerGrad<T> grad{BasicTensor<T>(input.shape()), {}};
  grad.d_params.emplace_back(weights.shape());
  grad.d_params.push_back(d_output);
  const T* x = input.data().data();
  const T* w = weights.data().data();
  T* d_w = grad.d_params[0].data().data();
  T* __restrict d_x = grad.d_input.data().data();
  for (std::size_t r = 0; r < m; ++r) {
    const T g = d_output[r];
    T* __restrict d_row = d_w + r * n;
    const T* __restrict w_row = w + r * n;
    for (std::size_t k = 0; k < n; ++k) {
      d_row[k] = g * x[k];
      d_x[k] += g * w_row[k];
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Two-class softmax and binary cross-entropy

template <std::floating_point T>
BasicTensor<T> softmax2(const BasicTensor<T>& logits) {
  require_shape(logits.shape(), {2}, "softmax2 logits");
  const T top = std::max(logits[0], logits[1]);
  const T e0 = std::exp(logits[0] - top);
  const T e1 = std::exp(logits[1] - top);
  const T total = e0 + e1;
  return BasicTensor<T>({2}, {e0 / total, e1 / total});
}

template <std::floating_point T>
BasicTensor<T> softmax2_backward(const BasicTensor<T>& probs, const BasicTensor<T>& d_output) {
  require_shape(probs.shape(), {2}, "softmax2_backward probs");
  require_shape(d_output.shape(), {2}, "softmax2_backward d_output");
  const T dot = probs[0] * d_output[0] + probs[1] * d_output[1];
  return BasicTensor<T>({2}, {probs[0] * (d_output[0] - dot), probs[1] * (d_output[1] - dot)});
}

inline constexpr double kProbabilityClamp = 1e-7;

template <std::floating_point T>
struct LossValue {
  T loss;
  T d_p;
};

/// -t log p - (1-t) log(1-p) on p clamped to [1e-7, 1-1e-7]. The derivative is
/// the analytic derivative evaluated at the clamped p, so saturated wrong
/// predictions still receive a gradient.
template <std::floating_point T>
LossValue<T> bce_loss(T p, int target) {
  if (target != 0 && target != 1) fail(ErrorKind::validation, "bce_loss target must be 0 or 1");
  const T eps = static_cast<T>(kProbabilityClamp);
  const T q = std::clamp(p, eps, T{1} - eps);
  if (target == 1) return {-std::log(q), -T{1} / q};
  return {-std::log(T{1} - q), T{1} / (T{1} - q)};
}

// ---------------------------------------------------------------------------
// Inverted dropout

template <std::floating_point T>
struct DropoutResult {
  BasicTensor<T> output;
  std::vector<T> scale;  // per element: 0 or 1/(1-p); empty when the layer was an identity
};

template <std::floating_point T, class Rng>
DropoutResult<T> dropout(const BasicTensor<T>& input, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) fail(ErrorKind::validation, "dropout probability must be in [0,1)");
  DropoutResult<T> result{input, {}};
  if (!training || p == 0.0) return result;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::bernoulli_distribution drop(p);
  result.scale.resize(input.size());
  for (std::size_t n = 0; n < input.size(); ++n) {
    result.scale[n] = drop(rng) ? T{0} : keep_scale;
    result.output[n] *= result.scale[n];
  }
  return result;
}

template <std::floating_point T>
BasicTensor<T> dropout_backward(const DropoutResult<T>& forward, const BasicTensor<T>& d_output) {
  require_shape(d_output.shape(), forward.output.shape(), "dropout_backward d_output");
  BasicTensor<T> d_input = d_output;
  if (forward.scale.empty()) return d_input;
  for (std::size_t n = 0; n < d_input.size(); ++n) d_input[n] *= forward.scale[n];
  return d_input;
}

}  // namespace macnn
