#pragma once

#include <cstddef>
#include <span>

#include "xattnres/tensor.hpp"

// Differentiable kernels. Feature maps are rank-4 tensors laid out as
// [batch, channels, height, width].
namespace xattnres {

enum class Padding { Same, None };

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> relu(const Tensor<T>& a);
/// Sum of all elements as a shape-[1] tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);

/// 2-D convolution with square kernels of size 1 or 3 and stride 1.
/// `bias` may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Padding padding = Padding::Same);

/// Max pooling onto a target grid. Window i spans
/// [floor(i*H/target), ceil((i+1)*H/target)); the gradient goes to the first
/// maximal element in row-major order.
template <typename T>
Tensor<T> adaptive_max_pool(const Tensor<T>& input, std::size_t target_h, std::size_t target_w);

/// Bilinear resampling with half-pixel centers and edge clamping.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, std::size_t target_h, std::size_t target_w);

/// x / sqrt(mean_c(x^2) + epsilon) * gain, independently at every (b, h, w).
template <typename T>
Tensor<T> rmsnorm_channels(const Tensor<T>& input, const Tensor<T>& gain, T epsilon);

/// Numerically stable softmax along `axis`.
template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& input, std::size_t axis);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts);

/// Channels [start, start + count) of a feature map.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::size_t start, std::size_t count);

/// Per-position inner product with a channel vector: [B,C,H,W] x [C] -> [B,1,H,W].
template <typename T>
Tensor<T> channel_dot(const Tensor<T>& input, const Tensor<T>& vec);

/// Broadcast a single-channel map over every channel: [B,1,H,W] * [B,C,H,W].
template <typename T>
Tensor<T> scale_by_map(const Tensor<T>& map, const Tensor<T>& input);

/// Throws ShapeError unless `t` is rank 4.
template <typename T>
void require_feature_map(const Tensor<T>& t, const char* what);

}  // namespace xattnres
