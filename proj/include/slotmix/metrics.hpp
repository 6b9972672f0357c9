// Identifiability and binding metrics: slot matching, affine alignment,
// correlation scores, cluster agreement, and the compositional contrast of a
// decoder. All functions are pure and deterministic.
#pragma once

#include <functional>
#include <span>
#include <vector>

#include "slotmix/tape.hpp"
#include "slotmix/tensor.hpp"

namespace slotmix::metrics {

// Slot extractions for a batch of datapoints: one K x d matrix per point,
// all entries finite and consistently shaped.
struct SlotBatch {
    std::vector<Tensor> slots;

    int count() const { return static_cast<int>(slots.size()); }
    int slot_count() const { return slots.empty() ? 0 : slots.front().rows; }
    int dim() const { return slots.empty() ? 0 : slots.front().cols; }
};

void validate_batch(const SlotBatch& batch);

// perm[i] = column assigned to row i; cost = total assignment cost.
struct Matching {
    std::vector<int> perm;
    double cost = 0.0;
};

// Minimum-cost assignment on a square cost matrix (shortest augmenting paths
// with potentials, exact for any finite costs).
Matching hungarian(const Tensor& cost);

// Least squares fit of y ~ x A + 1 c^T over rows. Rank-deficient normal
// equations fall back to a small ridge and set `ridged`.
struct AffineFit {
    Tensor A;  // d x d
    Tensor c;  // 1 x d
    bool ridged = false;
};

AffineFit affine_fit(const Tensor& x, const Tensor& y);

Tensor affine_apply(const AffineFit& fit, const Tensor& x);

// Slot-identifiability score in [-1, 1]: match slots by mean position,
// align the matched batch with one global affine map, then average Pearson
// correlation over the K x d aligned coordinate series. Constant series
// contribute 0 and are counted in `flat_series`.
struct SmccResult {
    double value = 0.0;
    Matching matching;
    AffineFit fit;
    int flat_series = 0;
};

SmccResult smcc(const SlotBatch& a, const SlotBatch& b);

// Slot-averaged coefficient of determination of the matched, affinely
// aligned batch b against a.
struct R2Result {
    double value = 0.0;
    Matching matching;
    int flat_slots = 0;
};

R2Result r2(const SlotBatch& a, const SlotBatch& b);

// Adjusted Rand index between two labelings (pair counting with chance
// correction). Degenerate partitions with zero chance-adjusted spread return
// 1 when the partitions coincide and 0 otherwise.
double ari(std::span<const int> labels_a, std::span<const int> labels_b);

// A decoder staged onto a tape: receives the slot matrix node, returns the
// output node. Evaluated repeatedly, so it must be a pure function.
using TapeDecoder = std::function<tape::Tape::Id(tape::Tape&, tape::Tape::Id)>;

struct ContrastOptions {
    bool fd_check = false;   // cross-check against a finite-difference Jacobian
    double fd_step = 1e-5;
    double fd_tol = 1e-4;    // relative disagreement that triggers the retry
};

struct ContrastResult {
    double value = 0.0;
    double fd_value = 0.0;   // populated only when fd_check is set
    bool perturbed = false;  // input nudged off an activation boundary
};

// Compositional contrast: sum over output coordinates of all pairwise
// products of per-slot Jacobian block norms. Zero exactly when every output
// coordinate depends on at most one slot. When the finite-difference check
// disagrees (an activation boundary), the slots are perturbed by 1e-7 and
// both computations retried once.
ContrastResult compositional_contrast(const TapeDecoder& decode, const Tensor& slots,
                                      const ContrastOptions& opts = {});

}  // namespace slotmix::metrics
