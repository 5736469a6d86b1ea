#pragma once

#include <cstdint>
#include <vector>

#include "cadtrans/tape.hpp"
#include "cadtrans/tensor.hpp"

// Differentiable primitives. Every operation records its adjoint on the
// active tape (when one is installed and any input is tracked). Reductions
// run in a fixed sequential order so results are independent of any parallel
// execution.
namespace cadtrans::ops {

// -- elementwise ------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor exp(const Tensor& a);
// log(max(x, floor)); floor <= 0 disables the guard.
Tensor log(const Tensor& a, double floor = 0.0);
Tensor relu(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);

// x[..., K] + b[K], bias broadcast over leading axes.
Tensor add_bias(const Tensor& x, const Tensor& b);
// x * s and x / s with s a scalar (1-element) tensor.
Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s);
Tensor div_scalar_tensor(const Tensor& x, const Tensor& s);

// -- linear algebra -----------------------------------------------------------
// a[..., k] x b[k, n] -> [..., n]; adjoints dA = g.b^T, dB = a^T.g.
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched: a[B, m, k] x b[B, k, n] -> [B, m, n].
Tensor bmm(const Tensor& a, const Tensor& b);
// Batched with b transposed on its last two axes: a[B, m, k] x b[B, n, k]^T.
Tensor bmm_nt(const Tensor& a, const Tensor& b);

// -- shape ------------------------------------------------------------------
Tensor reshape(const Tensor& a, Shape new_shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor transpose2d(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len);
// x[...] -> [n, ...], n copies along a new leading axis.
Tensor tile_leading(const Tensor& a, std::int64_t n);

// -- indexing -----------------------------------------------------------------
Tensor take_rows(const Tensor& x, const std::vector<std::int64_t>& rows);
Tensor take_flat(const Tensor& x, const std::vector<std::int64_t>& idx);

// -- reductions ---------------------------------------------------------------
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
// Permutation-invariant total: addends are sorted ascending before summation,
// so the value is bit-identical under any reordering of the elements.
Tensor sum_all_sorted(const Tensor& a);
// Median of all elements (lower-median average for even counts); the adjoint
// routes to the selected element(s).
Tensor median_all(const Tensor& a);

// -- normalization / activation over an axis ---------------------------------
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);
// Per-last-axis normalization with affine parameters gamma/beta of size [K].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// -- geometry-specific --------------------------------------------------------
// Euclidean norm of each row of x[R, F] -> [R]; zero rows use an eps guard in
// the adjoint.
Tensor l2norm_rows(const Tensor& x, double eps = 1e-12);
// Squared Euclidean distances between rows: x[n, F], y[m, F] -> [n, m].
Tensor pairwise_sqdist(const Tensor& x, const Tensor& y);

// -- conv / pooling / batchnorm -----------------------------------------------
// x[B, Cin, H, W], w[Cout, Cin, kh, kw], bias[Cout].
// Output spatial size: floor((in + 2*pad - kernel) / stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              int stride, int pad);
std::int64_t conv2d_out_extent(std::int64_t in, std::int64_t kernel, int stride, int pad);

// Global average pool: x[B, C, H, W] -> [B, C].
Tensor global_avg_pool(const Tensor& x);

struct BatchNormResult {
    Tensor y;
    Tensor new_running_mean;  // defined only in training mode
    Tensor new_running_var;
};
// Per-channel batch normalization of x[B, C, H, W]. Training mode normalizes
// with batch statistics (biased variance) and reports updated running
// statistics (unbiased variance, momentum 0.1 by default); eval mode
// normalizes with the provided running statistics.
BatchNormResult batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                             const Tensor& running_mean, const Tensor& running_var,
                             bool training, double momentum = 0.1, double eps = 1e-5);

// -- non-differentiable helpers ------------------------------------------------
std::vector<std::int64_t> argmax_rows(const Tensor& x);  // ties -> smallest index

}  // namespace cadtrans::ops
