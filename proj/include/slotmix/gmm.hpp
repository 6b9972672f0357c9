#pragma once

#include <span>
#include <vector>

#include "slotmix/common.hpp"
#include "slotmix/tensor.hpp"

namespace slotmix::gmm {

// Floor applied to every variance entry at construction; keeps densities
// non-singular when a component collapses onto a single point.
inline constexpr double kVarianceFloor = 1e-8;

// Axis-aligned Gaussian. Variances are per-dimension (diagonal covariance).
struct DiagGaussian {
    std::vector<double> mean;
    std::vector<double> var;

    DiagGaussian() = default;
    // Validates finiteness and non-negative variances, then floors variances.
    DiagGaussian(std::vector<double> mean_in, std::vector<double> var_in);

    int dim() const { return static_cast<int>(mean.size()); }
};

struct GaussianMixture {
    std::vector<double> weights;           // non-negative, sums to 1 within 1e-9
    std::vector<DiagGaussian> components;  // all same dimension, non-empty

    GaussianMixture() = default;
    GaussianMixture(std::vector<double> weights_in, std::vector<DiagGaussian> components_in);

    int dim() const { return components.empty() ? 0 : components[0].dim(); }
    int component_count() const { return static_cast<int>(components.size()); }
};

double log_density(const DiagGaussian& g, std::span<const double> x);

// log sum_k w_k exp(log_density(c_k, x)), max-stabilized; summation order
// independent of component order.
double mixture_log_density(const GaussianMixture& m, std::span<const double> x);

// Normalized product of two Gaussian densities plus the pseudo-count
// c = integral of the unnormalized product (itself a Gaussian density value).
struct GaussianProduct {
    DiagGaussian dist;
    double pseudo_count = 0.0;
};
GaussianProduct gaussian_product(const DiagGaussian& a, const DiagGaussian& b);

// Posterior mean weights of a Dirichlet(alpha) prior after observing soft
// counts: (alpha_k + counts_k) / sum_j (alpha_j + counts_j).
std::vector<double> dirichlet_posterior_weights(std::span<const double> alpha,
                                                std::span<const double> counts);

// Per-datapoint posterior carrier. In gaussian mode both fields are set;
// in dirac mode only the mean is carried (and is not used in aggregation).
struct Encoding {
    std::vector<double> mean;
    std::vector<double> var;  // empty => dirac carrier
};

enum class AggregateMode { dirac, gaussian };

// Uniform-over-datapoints mixture of the (optionally reweighted) local
// mixtures. `locals` holds the per-datapoint components after the gaussian-
// mode product; `pi_hat` row i holds the datapoint's component weights.
struct AggregatePosterior {
    std::vector<GaussianMixture> locals;
    Tensor pi_hat;  // M x K

    int datapoint_count() const { return static_cast<int>(locals.size()); }
    int local_component_count() const { return pi_hat.cols; }
    // Single mixture with M*K components weighted pi_hat[i][k] / M.
    GaussianMixture flattened() const;
};

// gaussian mode: component (i,k) becomes the normalized product of the local
// component with the datapoint's encoding; pseudo-counts feed a symmetric
// Dirichlet(alpha) posterior reweighting. dirac mode: components and weights
// pass through unchanged.
AggregatePosterior aggregate_posterior(const std::vector<GaussianMixture>& locals,
                                       const std::vector<Encoding>& encodings,
                                       AggregateMode mode, double alpha = 1.0);

std::vector<double> sample_mixture(const GaussianMixture& m, Rng& rng);

// Distribution over slot concatenations: base mixture of K slot Gaussians in
// dimension d induces a (K*d)-dimensional mixture with one component per slot
// permutation, each weighted 1/K!. Base weights do not enter (every slot
// appears exactly once per permutation).
struct ConcatSlotMixture {
    GaussianMixture base;

    explicit ConcatSlotMixture(GaussianMixture base_in);
    int slot_count() const { return base.component_count(); }
    int concat_dim() const { return slot_count() * base.dim(); }
};

// Density evaluation enumerates K! permutations; guarded beyond this.
inline constexpr int kMaxConcatDensitySlots = 8;

std::vector<double> concat_mixture_sample(const ConcatSlotMixture& cm, Rng& rng);
double concat_mixture_log_density(const ConcatSlotMixture& cm, std::span<const double> x);

// Affine maps that keep diagonal covariances diagonal: x' = P(scale ⊙ x) + shift
// where P permutes coordinates and scale is entrywise nonzero.
struct DiagAffine {
    std::vector<int> perm;      // out coordinate j takes in coordinate perm[j]
    std::vector<double> scale;  // applied in input coordinates
    std::vector<double> shift;  // applied in output coordinates

    static DiagAffine identity_map(int d);
    std::vector<double> apply(std::span<const double> x) const;
    DiagAffine inverse() const;
    double abs_det() const;
};

GaussianMixture affine_map_mixture(const GaussianMixture& m, const DiagAffine& h);

}  // namespace slotmix::gmm
