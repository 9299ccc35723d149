#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "taskmoe/matrix.hpp"

namespace taskmoe {

// Forward kernels are pure. Backward kernels accumulate (+=) into the
// gradient buffers they are handed; a null pointer skips that gradient.

/// x[S×d_in] · w[d_in×d_out]. Each output row depends only on the matching
/// input row and is accumulated in ascending inner index.
Matrix affine(const Matrix& x, const Matrix& w);

/// dx += dy · wᵀ, dw += xᵀ · dy.
void affine_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix* dx, Matrix* dw);

/// a · bᵀ.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

Matrix relu(const Matrix& x);

/// Upstream gradient masked by x > 0 (the subgradient at exactly 0 is 0).
Matrix relu_backward(const Matrix& x, const Matrix& dy);

/// Max-subtracted softmax. Throws ShapeError on empty input.
std::vector<double> softmax(std::span<const double> logits);

/// Row-wise softmax.
Matrix softmax_rows(const Matrix& logits);

/// Given p = softmax(z) and dL/dp, returns dL/dz.
std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> dprobs);

/// Mean over rows of -log softmax(logits_s)[target_s]. If `dlogits` is set,
/// it receives (softmax - onehot) / S (overwritten, not accumulated).
double cross_entropy(const Matrix& logits, std::span<const std::size_t> targets, Matrix* dlogits = nullptr);

/// Row-wise x / sqrt(mean(x²) + eps), no learnable scale.
Matrix rms_norm(const Matrix& x, double eps = 1e-6);

/// dx += backward of rms_norm given its output y.
void rms_norm_backward(const Matrix& x, const Matrix& y, const Matrix& dy, Matrix& dx, double eps = 1e-6);

} // namespace taskmoe
