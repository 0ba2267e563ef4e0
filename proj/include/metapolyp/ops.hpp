#pragma once

#include <cstddef>
#include <vector>

#include "metapolyp/autodiff.hpp"

namespace metapolyp::ops {

enum class Padding { Same, Valid };

// Elementwise and structural ops.
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
/// x[..., C] + bias[C].
Var add_bias(Var x, Var bias);
Var reshape(Var x, Shape shape);
Var sum(Var x);

/// [M x K] . [K x N] -> [M x N].
Var matmul(Var a, Var b);
Var transpose(Var a);
/// Columns [begin, begin + count) of a rank-2 tensor.
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);

Var gelu(Var x);
Var relu(Var x);
Var sigmoid(Var x);
Var softmax(Var x, std::size_t axis);

/// Per-position normalization over the trailing (channel) axis, then gamma * xhat + beta.
Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-6f);

/// Cross-correlation. x: [H x W x Cin], k: [kh x kw x Cin x Cout]. Same padding
/// gives ceil(H / stride) outputs with the extra pad on the bottom/right.
Var conv2d(Var x, Var k, std::size_t stride = 1, Padding padding = Padding::Same);
/// x: [H x W x C], k: [kh x kw x C]; stride 1, same padding.
Var depthwise_conv2d(Var x, Var k);
/// Adjoint of a same-padded stride-2 conv2d. x: [H x W x Cin],
/// k: [kh x kw x Cout x Cin] -> [2H x 2W x Cout].
Var transposed_conv2d(Var x, Var k, std::size_t stride = 2);
/// Bilinear resize by an integer factor (2 or 4), half-pixel centers.
Var upsample(Var x, std::size_t factor);

/// softmax(q . k^T * scale) over the key axis; q: [N x d], k: [M x d] -> [N x M].
/// Fused so only the normalized mask is stored.
Var attention_mask(Var q, Var k, float scale);

/// Cross-correlation kernels shared by conv2d and transposed_conv2d.
namespace detail {
struct ConvGeometry {
    std::size_t in_h, in_w, out_h, out_w, kh, kw, stride, pad_top, pad_left;
};
ConvGeometry conv_geometry(std::size_t in_h, std::size_t in_w, std::size_t kh, std::size_t kw, std::size_t stride,
                           Padding padding);
void conv_forward(const ConvGeometry& g, const float* x, std::size_t cin, const float* k, std::size_t cout, float* y);
void conv_backward_input(const ConvGeometry& g, const float* gy, std::size_t cin, const float* k, std::size_t cout,
                         float* gx);
void conv_backward_kernel(const ConvGeometry& g, const float* x, std::size_t cin, const float* gy, std::size_t cout,
                          float* gk);
}  // namespace detail

}  // namespace metapolyp::ops
