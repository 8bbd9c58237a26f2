#pragma once

#include <vector>

#include "magnet/rng.hpp"
#include "magnet/tensor.hpp"

namespace magnet::ops {

// Elementwise arithmetic with trailing-dimension broadcasting; size-1 dims
// expand, anything else is a shape error naming both shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

// Batched matrix product [..,m,k]·[..,k,n] -> [..,m,n]; leading batch dims
// must match or be 1.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor tanh_(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = 0.2);
Tensor elu(const Tensor& x, double alpha = 1.0);

Tensor exp_(const Tensor& x);
Tensor log_(const Tensor& x);
Tensor sqrt_(const Tensor& x);

// Numerically stable softmax along `axis` (max is subtracted before exp).
Tensor softmax(const Tensor& x, int axis);

Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
Tensor max_reduce(const Tensor& x, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor narrow(const Tensor& x, int axis, int64_t start, int64_t len);

// Direct convolution, stride 1, square odd kernel, zero padding `pad`.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int pad);
Tensor maxpool2x2(const Tensor& x);
Tensor global_avgpool(const Tensor& x);  // [N,C,H,W] -> [N,C]

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, bool train,
                   bool update_stats, double momentum, double eps);

// Inverted dropout; identity when rng is null or rate is 0.
Tensor dropout(const Tensor& x, double rate, Rng* rng);

// Mean over the batch of w_y * (-log softmax(logits)_y), normalized by the
// sum of the selected class weights.
Tensor weighted_cross_entropy(const Tensor& logits,
                              const std::vector<int64_t>& labels,
                              const std::vector<double>& class_weights);

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows);
Tensor scatter_rows(const Tensor& rows_values, const std::vector<int64_t>& rows,
                    int64_t total_rows);

// bias[h][i][j] = table[buckets[i*C+j]][h]; table is [num_buckets, heads].
Tensor rel_bias_lookup(const Tensor& table, const std::vector<int>& buckets,
                       int64_t seq_len);

// A[i][j] = (cos(row_i, row_j) + 1) / 2 with the diagonal pinned to 1 and
// zero-norm rows treated as cosine 0.
Tensor cosine_adjacency(const Tensor& rows);

}  // namespace magnet::ops
