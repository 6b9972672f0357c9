#pragma once

#include <vector>

#include "slotmix/common.hpp"
#include "slotmix/gmm.hpp"
#include "slotmix/opcount.hpp"
#include "slotmix/tensor.hpp"

namespace slotmix::psa {

// Base: keys and values are the inputs themselves (W_k, W_v must be identity).
// Proj / ValueProj: keys = W_k z_n, values = W_v z_n, projected once up front;
// the two differ only in which algorithm annotation they correspond to, the
// numerics are identical for fixed weights.
enum class Variant { Base, Proj, ValueProj };

struct PsaParams {
    Tensor W_q;
    Tensor W_k;
    Tensor W_v;
    Variant variant = Variant::Base;

    int dim() const { return W_q.rows; }
};

// Validates: square d x d, finite, and W_k == W_v == identity for Base.
PsaParams make_params(Variant variant, Tensor W_q, Tensor W_k, Tensor W_v);
// All three matrices identity.
PsaParams identity_params(int d, Variant variant = Variant::Base);

struct PsaState {
    std::vector<double> pi;  // K, sums to 1
    Tensor mu;               // K x d
    Tensor var;              // K x d, entries >= variance floor
    int iteration = 0;

    int slot_count() const { return mu.rows; }
    int dim() const { return mu.cols; }
};

void validate_state(const PsaState& state);

struct AttentionMatrix {
    Tensor A;      // N x K, rows sum to 1
    Tensor A_hat;  // N x K, columns sum to 1 (or are all zero on underflow)
    int iteration = 0;  // iteration of the state that produced this
};

struct SlotSet {
    Tensor slots;              // K x d
    std::vector<bool> active;  // length K
};

// pi uniform, mu rows i.i.d. standard normal, var all ones, iteration 0.
PsaState init_state(int K, int d, Rng& rng);

// A_nk proportional to pi_k N(k_n; W_q mu_k, var_k), row-normalized in log
// space; A_hat is the column normalization of A. An identity W_q is not
// multiplied through, so the Base variant runs as plain mixture EM.
AttentionMatrix e_step(const PsaState& state, const Tensor& keys, const PsaParams& params,
                       kernels::OpCounter* ctr = nullptr);

// mu_k = sum_n A_hat_nk v_n; var_k = sum_n A_hat_nk (v_n - mu_k)^2 using the
// fresh mu, floored; pi_k = mean_n A_nk. Iteration advances by one.
PsaState m_step(const AttentionMatrix& A, const Tensor& values,
                kernels::OpCounter* ctr = nullptr);

struct ForwardResult {
    PsaState state;
    AttentionMatrix attention;
    gmm::GaussianMixture local;
};

// Fresh random initialization, then T e/m alternations.
ForwardResult forward(const Tensor& z, const PsaParams& params, int K, int T, Rng& rng,
                      kernels::OpCounter* ctr = nullptr);
// Same loop from a caller-supplied initial state (fixed-initialization mode).
ForwardResult forward_from(const Tensor& z, const PsaParams& params, PsaState state, int T,
                           kernels::OpCounter* ctr = nullptr);

// active_k = (pi_k > tau); slots carry the mean vectors. tau in [0, 1).
SlotSet ard_prune(const PsaState& state, double tau);

enum class SlotSampleMode { mean, sample };

// mean: slots = mu. sample: one independent draw per slot from its Gaussian.
// All slots marked active (combine with ard_prune for the masked set).
SlotSet sample_slots(const PsaState& state, Rng& rng, SlotSampleMode mode);

// sum_n log sum_k pi_k N(z_n; mu_k, var_k) — the quantity EM ascends when the
// loop reduces to exact mixture EM.
double data_log_likelihood(const PsaState& state, const Tensor& z);

gmm::GaussianMixture to_mixture(const PsaState& state);

}  // namespace slotmix::psa
