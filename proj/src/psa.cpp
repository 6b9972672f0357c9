#include "slotmix/psa.hpp"

#include <cmath>
#include <span>
#include <utility>

#include "kernels.hpp"

namespace slotmix::psa {

namespace {

void check_square_finite(const Tensor& m, int d, const char* name) {
    require(m.rows == d && m.cols == d, std::string(name) + ": expected a square d x d matrix");
    require(all_finite(m), std::string(name) + ": non-finite entries");
}

}  // namespace

PsaParams make_params(Variant variant, Tensor W_q, Tensor W_k, Tensor W_v) {
    const int d = W_q.rows;
    require(d >= 1, "make_params: dimension must be positive");
    check_square_finite(W_q, d, "make_params: W_q");
    check_square_finite(W_k, d, "make_params: W_k");
    check_square_finite(W_v, d, "make_params: W_v");
    if (variant == Variant::Base)
        require(kernels::is_identity(W_k) && kernels::is_identity(W_v),
                "make_params: base variant leaves keys and values unprojected, "
                "W_k and W_v must be identity");
    PsaParams p;
    p.W_q = std::move(W_q);
    p.W_k = std::move(W_k);
    p.W_v = std::move(W_v);
    p.variant = variant;
    return p;
}

PsaParams identity_params(int d, Variant variant) {
    return make_params(variant, identity(d), identity(d), identity(d));
}

void validate_state(const PsaState& state) {
    const int K = state.slot_count(), d = state.dim();
    require(K >= 1 && d >= 1, "PsaState: empty state");
    require(static_cast<int>(state.pi.size()) == K && state.var.same_shape(state.mu),
            "PsaState: inconsistent shapes");
    require(state.iteration >= 0, "PsaState: negative iteration");
    require(all_finite(state.mu), "PsaState: non-finite mu");
    double sum = 0.0;
    for (double p : state.pi) {
        require(std::isfinite(p) && p >= 0.0, "PsaState: pi entries must be non-negative");
        sum += p;
    }
    require(std::abs(sum - 1.0) <= 1e-9, "PsaState: pi must sum to 1");
    for (double v : state.var.data)
        require(std::isfinite(v) && v >= gmm::kVarianceFloor,
                "PsaState: var entries must be at least the variance floor");
}

PsaState init_state(int K, int d, Rng& rng) {
    require(K >= 1 && d >= 1, "init_state: K and d must be positive");
    PsaState s;
    s.pi.assign(static_cast<size_t>(K), 1.0 / K);
    s.mu = Tensor(K, d);
    for (double& x : s.mu.data) x = rng.normal();
    s.var = Tensor(K, d, 1.0);
    s.iteration = 0;
    return s;
}

AttentionMatrix e_step(const PsaState& state, const Tensor& keys, const PsaParams& params,
                       kernels::OpCounter* ctr) {
    validate_state(state);
    const int K = state.slot_count(), d = state.dim();
    require(all_finite(keys), "e_step: keys must be finite");
    require(keys.cols == d && keys.rows >= 1, "e_step: key shape mismatch");
    require(params.dim() == d, "e_step: parameter dimension mismatch");

    const Tensor* q = &state.mu;
    Tensor q_proj;
    if (!kernels::is_identity(params.W_q)) {
        matmul_nt(state.mu, params.W_q, q_proj);  // row k = W_q mu_k
        if (ctr) ctr->macs += static_cast<uint64_t>(K) * d * d;
        q = &q_proj;
    }
    std::vector<double> logpi(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
        // clamp matches the differentiable path bitwise; a dead slot keeps a
        // finite but negligible logit and is revived only by the data
        const double p = state.pi[static_cast<size_t>(k)];
        logpi[static_cast<size_t>(k)] = std::log(std::max(p, 1e-300));
    }
    Tensor L;
    kernels::gauss_logits(keys, *q, state.var, logpi, L, ctr);

    AttentionMatrix out;
    kernels::softmax_rows(L, out.A);
    std::vector<double> colsum;
    kernels::colnorm(out.A, out.A_hat, colsum);
    out.iteration = state.iteration;
    return out;
}

PsaState m_step(const AttentionMatrix& A, const Tensor& values, kernels::OpCounter* ctr) {
    const int N = A.A.rows, K = A.A.cols;
    require(N >= 1 && K >= 1 && A.A_hat.same_shape(A.A), "m_step: attention shape mismatch");
    require(values.rows == N && values.cols >= 1, "m_step: value shape mismatch");
    require(all_finite(A.A) && all_finite(A.A_hat) && all_finite(values),
            "m_step: non-finite inputs");
    for (int n = 0; n < N; ++n) {
        double s = 0.0;
        const double* An = A.A.row(n);
        for (int k = 0; k < K; ++k) s += An[k];
        require(std::abs(s - 1.0) <= 1e-9, "m_step: rows of A must sum to 1");
    }

    PsaState s;
    matmul_tn(A.A_hat, values, s.mu);
    if (ctr) ctr->macs += static_cast<uint64_t>(N) * K * values.cols;
    kernels::weighted_var(A.A_hat, values, s.mu, s.var, ctr);
    for (double& v : s.var.data) v = std::max(v, gmm::kVarianceFloor);
    kernels::colmean(A.A, s.pi);
    s.iteration = A.iteration + 1;
    return s;
}

ForwardResult forward(const Tensor& z, const PsaParams& params, int K, int T, Rng& rng,
                      kernels::OpCounter* ctr) {
    require(all_finite(z), "forward: input must be finite");
    PsaState s0 = init_state(K, z.cols, rng);
    return forward_from(z, params, std::move(s0), T, ctr);
}

ForwardResult forward_from(const Tensor& z, const PsaParams& params, PsaState state, int T,
                           kernels::OpCounter* ctr) {
    require(T >= 1, "forward: iteration count must be positive");
    require(all_finite(z), "forward: input must be finite");
    validate_state(state);
    const int N = z.rows, d = z.cols;
    require(N >= 1 && d == state.dim() && d == params.dim(), "forward: dimension mismatch");

    // Projections are applied once up front; identity transforms are skipped
    // so the base variant touches the raw inputs directly.
    const Tensor* keys = &z;
    const Tensor* values = &z;
    Tensor keys_p, values_p;
    if (params.variant != Variant::Base) {
        if (!kernels::is_identity(params.W_k)) {
            matmul_nt(z, params.W_k, keys_p);
            if (ctr) ctr->macs += static_cast<uint64_t>(N) * d * d;
            keys = &keys_p;
        }
        if (!kernels::is_identity(params.W_v)) {
            matmul_nt(z, params.W_v, values_p);
            if (ctr) ctr->macs += static_cast<uint64_t>(N) * d * d;
            values = &values_p;
        }
    }

    ForwardResult r;
    r.state = std::move(state);
    for (int t = 0; t < T; ++t) {
        r.attention = e_step(r.state, *keys, params, ctr);
        r.state = m_step(r.attention, *values, ctr);
    }
    r.local = to_mixture(r.state);
    return r;
}

SlotSet ard_prune(const PsaState& state, double tau) {
    validate_state(state);
    require(tau >= 0.0 && tau < 1.0, "ard_prune: threshold must lie in [0, 1)");
    SlotSet out;
    out.slots = state.mu;
    out.active.resize(state.pi.size());
    for (size_t k = 0; k < state.pi.size(); ++k) out.active[k] = state.pi[k] > tau;
    return out;
}

SlotSet sample_slots(const PsaState& state, Rng& rng, SlotSampleMode mode) {
    validate_state(state);
    SlotSet out;
    out.slots = state.mu;
    out.active.assign(state.pi.size(), true);
    if (mode == SlotSampleMode::sample) {
        for (int k = 0; k < state.slot_count(); ++k) {
            double* sk = out.slots.row(k);
            const double* vk = state.var.row(k);
            for (int j = 0; j < state.dim(); ++j)
                sk[j] += std::sqrt(vk[j]) * rng.normal();
        }
    }
    return out;
}

double data_log_likelihood(const PsaState& state, const Tensor& z) {
    require(all_finite(z), "data_log_likelihood: input must be finite");
    require(z.cols == state.dim(), "data_log_likelihood: dimension mismatch");
    const gmm::GaussianMixture m = to_mixture(state);
    double total = 0.0;
    for (int n = 0; n < z.rows; ++n)
        total += gmm::mixture_log_density(m, std::span<const double>(z.row(n), z.cols));
    return total;
}

gmm::GaussianMixture to_mixture(const PsaState& state) {
    validate_state(state);
    std::vector<gmm::DiagGaussian> comps;
    comps.reserve(state.pi.size());
    for (int k = 0; k < state.slot_count(); ++k) {
        const double* mk = state.mu.row(k);
        const double* vk = state.var.row(k);
        comps.emplace_back(std::vector<double>(mk, mk + state.dim()),
                           std::vector<double>(vk, vk + state.dim()));
    }
    return gmm::GaussianMixture(state.pi, std::move(comps));
}

}  // namespace slotmix::psa
