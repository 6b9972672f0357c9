#pragma once

// Shared numerical kernels for the routing loop and the networks. Both the
// inference path and the differentiation tape call these, so the two paths
// cannot drift apart. Backward functions accumulate (+=) into caller-zeroed
// gradient buffers.

#include <vector>

#include "slotmix/opcount.hpp"
#include "slotmix/tensor.hpp"

namespace slotmix::kernels {

// L[n][k] = logpi[k] - 0.5 * sum_j (log(2 pi var[k][j]) + (keys[n][j] - q[k][j])^2 / var[k][j])
void gauss_logits(const Tensor& keys, const Tensor& q, const Tensor& var,
                  const std::vector<double>& logpi, Tensor& L, OpCounter* ctr = nullptr);
void gauss_logits_bwd(const Tensor& keys, const Tensor& q, const Tensor& var, const Tensor& dL,
                      Tensor& dkeys, Tensor& dq, Tensor& dvar, std::vector<double>& dlogpi);

// Row softmax. The log-sum-exp denominator is accumulated over sorted
// summands, which makes each row's result invariant under any permutation of
// its entries (the equivariance contract relies on this).
void softmax_rows(const Tensor& L, Tensor& A);
void softmax_rows_bwd(const Tensor& A, const Tensor& dA, Tensor& dL);

// A_hat[n][k] = A[n][k] / colsum[k]; an underflowed (all-zero) column yields
// an all-zero A_hat column rather than NaN.
void colnorm(const Tensor& A, Tensor& A_hat, std::vector<double>& colsum);
void colnorm_bwd(const Tensor& A_hat, const std::vector<double>& colsum, const Tensor& dA_hat,
                 Tensor& dA);

// var[k][j] = sum_n A_hat[n][k] * (values[n][j] - mu[k][j])^2  (no floor here)
void weighted_var(const Tensor& A_hat, const Tensor& values, const Tensor& mu, Tensor& var,
                  OpCounter* ctr = nullptr);
void weighted_var_bwd(const Tensor& A_hat, const Tensor& values, const Tensor& mu,
                      const Tensor& dvar, Tensor& dA_hat, Tensor& dvalues, Tensor& dmu);

void colmean(const Tensor& A, std::vector<double>& pi);

void leaky_relu(const Tensor& x, double slope, Tensor& y);
void leaky_relu_bwd(const Tensor& x, double slope, const Tensor& dy, Tensor& dx);

bool is_identity(const Tensor& m);

}  // namespace slotmix::kernels
