#include "slotmix/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace slotmix::gmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

void check_finite(std::span<const double> v, const char* what) {
    for (double x : v)
        require(std::isfinite(x), std::string(what) + ": non-finite entry");
}

}  // namespace

DiagGaussian::DiagGaussian(std::vector<double> mean_in, std::vector<double> var_in)
    : mean(std::move(mean_in)), var(std::move(var_in)) {
    require(!mean.empty(), "DiagGaussian: empty mean");
    require(mean.size() == var.size(), "DiagGaussian: mean/var dimension mismatch");
    check_finite(mean, "DiagGaussian mean");
    for (double v : var) {
        require(std::isfinite(v), "DiagGaussian var: non-finite entry");
        require(v >= 0.0, "DiagGaussian var: negative entry");
    }
    for (double& v : var) v = std::max(v, kVarianceFloor);
}

GaussianMixture::GaussianMixture(std::vector<double> weights_in,
                                 std::vector<DiagGaussian> components_in)
    : weights(std::move(weights_in)), components(std::move(components_in)) {
    require(!components.empty(), "GaussianMixture: no components");
    require(weights.size() == components.size(),
            "GaussianMixture: weight/component count mismatch");
    const int d = components[0].dim();
    for (const auto& c : components)
        require(c.dim() == d, "GaussianMixture: heterogeneous component dimensions");
    double sum = 0.0;
    for (double w : weights) {
        require(std::isfinite(w) && w >= 0.0, "GaussianMixture: invalid weight");
        sum += w;
    }
    require(std::abs(sum - 1.0) <= 1e-9, "GaussianMixture: weights must sum to 1");
}

double log_density(const DiagGaussian& g, std::span<const double> x) {
    require(static_cast<int>(x.size()) == g.dim(), "log_density: dimension mismatch");
    check_finite(x, "log_density x");
    double acc = 0.0;
    for (size_t j = 0; j < x.size(); ++j) {
        const double d = x[j] - g.mean[j];
        acc += -0.5 * (kLog2Pi + std::log(g.var[j])) - d * d / (2.0 * g.var[j]);
    }
    return acc;
}

double mixture_log_density(const GaussianMixture& m, std::span<const double> x) {
    std::vector<double> terms;
    terms.reserve(m.components.size());
    for (size_t k = 0; k < m.components.size(); ++k) {
        if (m.weights[k] == 0.0) {
            terms.push_back(-INFINITY);
            continue;
        }
        terms.push_back(std::log(m.weights[k]) + log_density(m.components[k], x));
    }
    return logsumexp_sorted(terms);
}

GaussianProduct gaussian_product(const DiagGaussian& a, const DiagGaussian& b) {
    require(a.dim() == b.dim(), "gaussian_product: dimension mismatch");
    const int d = a.dim();
    std::vector<double> mean(d), var(d);
    double log_c = 0.0;
    for (int j = 0; j < d; ++j) {
        const double prec = 1.0 / a.var[j] + 1.0 / b.var[j];
        var[j] = 1.0 / prec;
        mean[j] = var[j] * (a.mean[j] / a.var[j] + b.mean[j] / b.var[j]);
        // marginal likelihood of the pair: N(mean_a; mean_b, var_a + var_b)
        const double s = a.var[j] + b.var[j];
        const double diff = a.mean[j] - b.mean[j];
        log_c += -0.5 * (kLog2Pi + std::log(s)) - diff * diff / (2.0 * s);
    }
    return GaussianProduct{DiagGaussian(std::move(mean), std::move(var)), std::exp(log_c)};
}

std::vector<double> dirichlet_posterior_weights(std::span<const double> alpha,
                                                std::span<const double> counts) {
    require(alpha.size() == counts.size() && !alpha.empty(),
            "dirichlet_posterior_weights: size mismatch");
    std::vector<double> out(alpha.size());
    double total = 0.0;
    for (size_t k = 0; k < alpha.size(); ++k) {
        require(std::isfinite(alpha[k]) && alpha[k] > 0.0,
                "dirichlet_posterior_weights: alpha must be positive");
        require(std::isfinite(counts[k]) && counts[k] >= 0.0,
                "dirichlet_posterior_weights: counts must be non-negative");
        out[k] = alpha[k] + counts[k];
        total += out[k];
    }
    for (double& v : out) v /= total;
    return out;
}

GaussianMixture AggregatePosterior::flattened() const {
    require(!locals.empty(), "AggregatePosterior: empty");
    const int M = datapoint_count();
    const int K = local_component_count();
    std::vector<double> weights;
    std::vector<DiagGaussian> comps;
    weights.reserve(static_cast<size_t>(M) * K);
    comps.reserve(static_cast<size_t>(M) * K);
    for (int i = 0; i < M; ++i) {
        for (int k = 0; k < K; ++k) {
            weights.push_back(pi_hat.at(i, k) / M);
            comps.push_back(locals[i].components[k]);
        }
    }
    return GaussianMixture(std::move(weights), std::move(comps));
}

AggregatePosterior aggregate_posterior(const std::vector<GaussianMixture>& locals,
                                       const std::vector<Encoding>& encodings,
                                       AggregateMode mode, double alpha) {
    require(!locals.empty(), "aggregate_posterior: no locals");
    require(encodings.size() == locals.size(),
            "aggregate_posterior: locals/encodings count mismatch");
    const int K = locals[0].component_count();
    const int d = locals[0].dim();
    for (const auto& m : locals) {
        require(m.component_count() == K, "aggregate_posterior: heterogeneous K");
        require(m.dim() == d, "aggregate_posterior: heterogeneous dimension");
    }
    const int M = static_cast<int>(locals.size());

    AggregatePosterior agg;
    agg.pi_hat = Tensor(M, K);

    if (mode == AggregateMode::dirac) {
        agg.locals = locals;
        for (int i = 0; i < M; ++i)
            for (int k = 0; k < K; ++k) agg.pi_hat.at(i, k) = locals[i].weights[k];
        return agg;
    }

    require(alpha > 0.0, "aggregate_posterior: alpha must be positive");
    agg.locals.reserve(locals.size());
    const std::vector<double> alpha_vec(static_cast<size_t>(K), alpha);
    for (int i = 0; i < M; ++i) {
        const auto& enc = encodings[i];
        require(static_cast<int>(enc.mean.size()) == d,
                "aggregate_posterior: encoding dimension mismatch");
        require(enc.var.size() == enc.mean.size(),
                "aggregate_posterior: gaussian mode needs encoding variances");
        const DiagGaussian q(enc.mean, enc.var);
        std::vector<DiagGaussian> comps;
        std::vector<double> counts(static_cast<size_t>(K));
        comps.reserve(static_cast<size_t>(K));
        for (int k = 0; k < K; ++k) {
            GaussianProduct p = gaussian_product(locals[i].components[k], q);
            comps.push_back(std::move(p.dist));
            counts[static_cast<size_t>(k)] = p.pseudo_count;
        }
        std::vector<double> w = dirichlet_posterior_weights(alpha_vec, counts);
        for (int k = 0; k < K; ++k) agg.pi_hat.at(i, k) = w[static_cast<size_t>(k)];
        agg.locals.emplace_back(std::move(w), std::move(comps));
    }
    return agg;
}

std::vector<double> sample_mixture(const GaussianMixture& m, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    size_t pick = m.components.size() - 1;
    for (size_t k = 0; k < m.weights.size(); ++k) {
        acc += m.weights[k];
        if (u < acc) {
            pick = k;
            break;
        }
    }
    const DiagGaussian& g = m.components[pick];
    std::vector<double> x(static_cast<size_t>(g.dim()));
    for (int j = 0; j < g.dim(); ++j)
        x[static_cast<size_t>(j)] = g.mean[j] + std::sqrt(g.var[j]) * rng.normal();
    return x;
}

ConcatSlotMixture::ConcatSlotMixture(GaussianMixture base_in) : base(std::move(base_in)) {}

std::vector<double> concat_mixture_sample(const ConcatSlotMixture& cm, Rng& rng) {
    const int K = cm.slot_count();
    const int d = cm.base.dim();
    std::vector<int> perm(static_cast<size_t>(K));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<double> x(static_cast<size_t>(K) * d);
    for (int b = 0; b < K; ++b) {
        const DiagGaussian& g = cm.base.components[static_cast<size_t>(perm[b])];
        for (int j = 0; j < d; ++j)
            x[static_cast<size_t>(b) * d + j] = g.mean[j] + std::sqrt(g.var[j]) * rng.normal();
    }
    return x;
}

double concat_mixture_log_density(const ConcatSlotMixture& cm, std::span<const double> x) {
    const int K = cm.slot_count();
    const int d = cm.base.dim();
    require(K <= kMaxConcatDensitySlots,
            "concat_mixture_log_density: unsupported slot count (K! enumeration capped at K = 8)");
    require(static_cast<int>(x.size()) == K * d,
            "concat_mixture_log_density: dimension mismatch");

    double log_kfact = 0.0;
    for (int k = 2; k <= K; ++k) log_kfact += std::log(static_cast<double>(k));

    std::vector<int> perm(static_cast<size_t>(K));
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<double> terms;
    std::vector<double> parts(static_cast<size_t>(K));
    do {
        for (int b = 0; b < K; ++b)
            parts[static_cast<size_t>(b)] =
                log_density(cm.base.components[static_cast<size_t>(perm[static_cast<size_t>(b)])],
                            x.subspan(static_cast<size_t>(b) * d, static_cast<size_t>(d)));
        // sorted so the per-permutation term is invariant under block order
        std::sort(parts.begin(), parts.end());
        double t = -log_kfact;
        for (double p : parts) t += p;
        terms.push_back(t);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return logsumexp_sorted(terms);
}

DiagAffine DiagAffine::identity_map(int d) {
    DiagAffine h;
    h.perm.resize(static_cast<size_t>(d));
    std::iota(h.perm.begin(), h.perm.end(), 0);
    h.scale.assign(static_cast<size_t>(d), 1.0);
    h.shift.assign(static_cast<size_t>(d), 0.0);
    return h;
}

std::vector<double> DiagAffine::apply(std::span<const double> x) const {
    require(x.size() == perm.size(), "DiagAffine::apply: dimension mismatch");
    std::vector<double> y(x.size());
    for (size_t j = 0; j < x.size(); ++j) {
        const size_t src = static_cast<size_t>(perm[j]);
        y[j] = scale[src] * x[src] + shift[j];
    }
    return y;
}

DiagAffine DiagAffine::inverse() const {
    const size_t d = perm.size();
    DiagAffine inv;
    inv.perm.resize(d);
    inv.scale.resize(d);
    inv.shift.resize(d);
    for (size_t j = 0; j < d; ++j) {
        const size_t src = static_cast<size_t>(perm[j]);
        inv.perm[src] = static_cast<int>(j);
        require(scale[src] != 0.0, "DiagAffine: singular scale");
        inv.scale[j] = 1.0 / scale[src];
        inv.shift[src] = -shift[j] / scale[src];
    }
    return inv;
}

double DiagAffine::abs_det() const {
    double p = 1.0;
    for (double s : scale) p *= std::abs(s);
    return p;
}

GaussianMixture affine_map_mixture(const GaussianMixture& m, const DiagAffine& h) {
    require(static_cast<size_t>(m.dim()) == h.perm.size(),
            "affine_map_mixture: dimension mismatch");
    std::vector<DiagGaussian> comps;
    comps.reserve(m.components.size());
    for (const auto& g : m.components) {
        std::vector<double> mean = h.apply(g.mean);
        std::vector<double> var(g.var.size());
        for (size_t j = 0; j < var.size(); ++j) {
            const size_t src = static_cast<size_t>(h.perm[j]);
            var[j] = h.scale[src] * h.scale[src] * g.var[src];
        }
        comps.emplace_back(std::move(mean), std::move(var));
    }
    return GaussianMixture(m.weights, std::move(comps));
}

}  // namespace slotmix::gmm
