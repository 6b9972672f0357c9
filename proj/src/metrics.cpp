#include "slotmix/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <utility>

#include "slotmix/common.hpp"

namespace slotmix::metrics {

namespace {

// A series is treated as constant when its spread is at machine-rounding
// scale relative to its magnitude; exact correlation is undefined there.
bool is_flat(double sum_sq_dev, double mean, int n) {
    const double spread = std::sqrt(sum_sq_dev / n);
    return spread <= 1e-12 * std::max(1e-12, std::abs(mean));
}

double pearson(std::span<const double> x, std::span<const double> y, bool& flat) {
    const int n = static_cast<int>(x.size());
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < n; ++i) {
        mx += x[static_cast<size_t>(i)];
        my += y[static_cast<size_t>(i)];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (int i = 0; i < n; ++i) {
        const double dx = x[static_cast<size_t>(i)] - mx;
        const double dy = y[static_cast<size_t>(i)] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (is_flat(sxx, mx, n) || is_flat(syy, my, n)) {
        flat = true;
        return 0.0;
    }
    flat = false;
    return sxy / (std::sqrt(sxx) * std::sqrt(syy));
}

// Matching operates on per-coordinate standardized copies so the cost is
// scale-free; the affine fit and correlations later use raw values.
std::vector<std::vector<double>> mean_slots_standardized(const SlotBatch& batch) {
    const int m = batch.count(), k = batch.slot_count(), d = batch.dim();
    std::vector<double> mean(static_cast<size_t>(d), 0.0), scale(static_cast<size_t>(d), 0.0);
    for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (const Tensor& s : batch.slots)
            for (int kk = 0; kk < k; ++kk) acc += s.at(kk, j);
        mean[static_cast<size_t>(j)] = acc / (static_cast<double>(m) * k);
        double var = 0.0;
        for (const Tensor& s : batch.slots)
            for (int kk = 0; kk < k; ++kk) {
                const double diff = s.at(kk, j) - mean[static_cast<size_t>(j)];
                var += diff * diff;
            }
        var /= static_cast<double>(m) * k;
        scale[static_cast<size_t>(j)] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    std::vector<std::vector<double>> out(static_cast<size_t>(k),
                                         std::vector<double>(static_cast<size_t>(d), 0.0));
    for (const Tensor& s : batch.slots)
        for (int kk = 0; kk < k; ++kk)
            for (int j = 0; j < d; ++j)
                out[static_cast<size_t>(kk)][static_cast<size_t>(j)] +=
                    (s.at(kk, j) - mean[static_cast<size_t>(j)]) / scale[static_cast<size_t>(j)] /
                    m;
    return out;
}

// Slot matching plus the single global alignment map shared by smcc and r2:
// X holds the matched b-slots, Y the a-slots, stacked datapoint-major.
struct Alignment {
    Matching matching;
    AffineFit fit;
    Tensor aligned;  // (M*K) x d, fit applied to the matched b rows
    Tensor target;   // (M*K) x d, a rows
};

Alignment align_batches(const SlotBatch& a, const SlotBatch& b) {
    validate_batch(a);
    validate_batch(b);
    require(a.count() == b.count() && a.slot_count() == b.slot_count() && a.dim() == b.dim(),
            "slot metrics: batch shapes differ");
    require(a.count() >= 2, "slot metrics: need at least two datapoints");
    const int m = a.count(), k = a.slot_count(), d = a.dim();

    const auto mean_a = mean_slots_standardized(a);
    const auto mean_b = mean_slots_standardized(b);
    Tensor cost(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            double acc = 0.0;
            for (int c = 0; c < d; ++c) {
                const double diff = mean_a[static_cast<size_t>(i)][static_cast<size_t>(c)] -
                                    mean_b[static_cast<size_t>(j)][static_cast<size_t>(c)];
                acc += diff * diff;
            }
            cost.at(i, j) = std::sqrt(acc);
        }

    Alignment out;
    out.matching = hungarian(cost);
    out.target = Tensor(m * k, d);
    Tensor x(m * k, d);
    for (int mi = 0; mi < m; ++mi)
        for (int ki = 0; ki < k; ++ki) {
            const int row = mi * k + ki;
            const int bk = out.matching.perm[static_cast<size_t>(ki)];
            for (int j = 0; j < d; ++j) {
                out.target.at(row, j) = a.slots[static_cast<size_t>(mi)].at(ki, j);
                x.at(row, j) = b.slots[static_cast<size_t>(mi)].at(bk, j);
            }
        }
    out.fit = affine_fit(x, out.target);
    out.aligned = affine_apply(out.fit, x);
    return out;
}

}  // namespace

void validate_batch(const SlotBatch& batch) {
    require(!batch.slots.empty(), "slot batch: empty");
    const int k = batch.slot_count(), d = batch.dim();
    require(k >= 1 && d >= 1, "slot batch: empty slot matrices");
    for (const Tensor& s : batch.slots) {
        require(s.rows == k && s.cols == d, "slot batch: inconsistent shapes");
        require(all_finite(s), "slot batch: non-finite entries");
    }
}

Matching hungarian(const Tensor& cost) {
    const int n = cost.rows;
    require(n >= 1 && cost.cols == n, "hungarian: cost matrix must be square");
    require(all_finite(cost), "hungarian: cost matrix must be finite");

    // shortest augmenting paths with dual potentials, one row at a time
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
    std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n) + 1, HUGE_VAL);
        std::vector<bool> used(static_cast<size_t>(n) + 1, false);
        do {
            used[static_cast<size_t>(j0)] = true;
            const int i0 = p[static_cast<size_t>(j0)];
            int j1 = -1;
            double delta = HUGE_VAL;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                const double cur = cost.at(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] -
                                   v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }

    Matching m;
    m.perm.assign(static_cast<size_t>(n), -1);
    for (int j = 1; j <= n; ++j)
        if (p[static_cast<size_t>(j)] != 0)
            m.perm[static_cast<size_t>(p[static_cast<size_t>(j)]) - 1] = j - 1;
    m.cost = 0.0;
    for (int i = 0; i < n; ++i) m.cost += cost.at(i, m.perm[static_cast<size_t>(i)]);
    return m;
}

AffineFit affine_fit(const Tensor& x, const Tensor& y) {
    require(x.rows == y.rows && x.cols == y.cols, "affine_fit: shape mismatch");
    require(x.rows > x.cols, "affine_fit: need more rows than dimensions");
    require(all_finite(x) && all_finite(y), "affine_fit: non-finite input");
    const int m = x.rows, d = x.cols, da = d + 1;

    // normal equations on the bias-augmented design [x 1]
    Tensor gram(da, da);
    Tensor rhs(da, d);
    for (int r = 0; r < m; ++r) {
        for (int i = 0; i < da; ++i) {
            const double xi = i < d ? x.at(r, i) : 1.0;
            for (int j = i; j < da; ++j) {
                const double xj = j < d ? x.at(r, j) : 1.0;
                gram.at(i, j) += xi * xj;
            }
            for (int j = 0; j < d; ++j) rhs.at(i, j) += xi * y.at(r, j);
        }
    }
    for (int i = 0; i < da; ++i)
        for (int j = 0; j < i; ++j) gram.at(i, j) = gram.at(j, i);

    double scale = 0.0;
    for (double g : gram.data) scale = std::max(scale, std::abs(g));

    auto solve = [da, d](Tensor g, Tensor r, double pivot_floor,
                         Tensor& out) {  // Gaussian elimination, partial pivoting
        for (int col = 0; col < da; ++col) {
            int piv = col;
            for (int row = col + 1; row < da; ++row)
                if (std::abs(g.at(row, col)) > std::abs(g.at(piv, col))) piv = row;
            if (std::abs(g.at(piv, col)) <= pivot_floor) return false;
            if (piv != col) {
                for (int j = 0; j < da; ++j) std::swap(g.at(col, j), g.at(piv, j));
                for (int j = 0; j < d; ++j) std::swap(r.at(col, j), r.at(piv, j));
            }
            for (int row = col + 1; row < da; ++row) {
                const double f = g.at(row, col) / g.at(col, col);
                for (int j = col; j < da; ++j) g.at(row, j) -= f * g.at(col, j);
                for (int j = 0; j < d; ++j) r.at(row, j) -= f * r.at(col, j);
            }
        }
        out = Tensor(da, d);
        for (int row = da - 1; row >= 0; --row)
            for (int j = 0; j < d; ++j) {
                double acc = r.at(row, j);
                for (int col = row + 1; col < da; ++col) acc -= g.at(row, col) * out.at(col, j);
                out.at(row, j) = acc / g.at(row, row);
            }
        return true;
    };

    AffineFit fit;
    Tensor coeff;
    if (!solve(gram, rhs, 1e-12 * std::max(scale, 1.0), coeff)) {
        Tensor ridged = gram;
        for (int i = 0; i < da; ++i) ridged.at(i, i) += 1e-8;
        require_numeric(solve(ridged, rhs, 0.0, coeff), "affine_fit: singular normal equations");
        fit.ridged = true;
    }
    fit.A = Tensor(d, d);
    fit.c = Tensor(1, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) fit.A.at(i, j) = coeff.at(i, j);
    for (int j = 0; j < d; ++j) fit.c.at(0, j) = coeff.at(d, j);
    return fit;
}

Tensor affine_apply(const AffineFit& fit, const Tensor& x) {
    require(x.cols == fit.A.rows, "affine_apply: dimension mismatch");
    Tensor y;
    matmul(x, fit.A, y);
    for (int r = 0; r < y.rows; ++r)
        for (int j = 0; j < y.cols; ++j) y.at(r, j) += fit.c.at(0, j);
    return y;
}

SmccResult smcc(const SlotBatch& a, const SlotBatch& b) {
    Alignment al = align_batches(a, b);
    const int m = a.count(), k = a.slot_count(), d = a.dim();

    SmccResult res;
    res.matching = std::move(al.matching);
    res.fit = std::move(al.fit);
    std::vector<double> xs(static_cast<size_t>(m)), ys(static_cast<size_t>(m));
    double acc = 0.0;
    for (int ki = 0; ki < k; ++ki)
        for (int j = 0; j < d; ++j) {
            for (int mi = 0; mi < m; ++mi) {
                ys[static_cast<size_t>(mi)] = al.target.at(mi * k + ki, j);
                xs[static_cast<size_t>(mi)] = al.aligned.at(mi * k + ki, j);
            }
            bool flat = false;
            acc += pearson(xs, ys, flat);
            if (flat) ++res.flat_series;
        }
    res.value = acc / (static_cast<double>(k) * d);
    return res;
}

R2Result r2(const SlotBatch& a, const SlotBatch& b) {
    Alignment al = align_batches(a, b);
    const int m = a.count(), k = a.slot_count(), d = a.dim();

    R2Result res;
    res.matching = std::move(al.matching);
    double acc = 0.0;
    for (int ki = 0; ki < k; ++ki) {
        double ss_res = 0.0, ss_tot = 0.0;
        for (int j = 0; j < d; ++j) {
            double mean = 0.0;
            for (int mi = 0; mi < m; ++mi) mean += al.target.at(mi * k + ki, j) / m;
            for (int mi = 0; mi < m; ++mi) {
                const int row = mi * k + ki;
                const double r = al.target.at(row, j) - al.aligned.at(row, j);
                const double t = al.target.at(row, j) - mean;
                ss_res += r * r;
                ss_tot += t * t;
            }
        }
        if (is_flat(ss_tot, 1.0, m * d)) {
            ++res.flat_slots;
        } else {
            acc += 1.0 - ss_res / ss_tot;
        }
    }
    res.value = acc / k;
    return res;
}

double ari(std::span<const int> labels_a, std::span<const int> labels_b) {
    require(labels_a.size() == labels_b.size(), "ari: labelings differ in length");
    require(!labels_a.empty(), "ari: empty labelings");
    const int n = static_cast<int>(labels_a.size());

    std::map<int, int> ida, idb;
    for (int l : labels_a) ida.emplace(l, static_cast<int>(ida.size()));
    for (int l : labels_b) idb.emplace(l, static_cast<int>(idb.size()));
    const int ra = static_cast<int>(ida.size()), rb = static_cast<int>(idb.size());
    std::vector<std::vector<long long>> table(static_cast<size_t>(ra),
                                              std::vector<long long>(static_cast<size_t>(rb), 0));
    for (int i = 0; i < n; ++i)
        ++table[static_cast<size_t>(ida[labels_a[static_cast<size_t>(i)]])]
               [static_cast<size_t>(idb[labels_b[static_cast<size_t>(i)]])];

    auto comb2 = [](long long x) { return 0.5 * static_cast<double>(x) * (x - 1); };
    double sum_cells = 0.0, sum_rows = 0.0, sum_cols = 0.0;
    for (int i = 0; i < ra; ++i) {
        long long row = 0;
        for (int j = 0; j < rb; ++j) {
            row += table[static_cast<size_t>(i)][static_cast<size_t>(j)];
            sum_cells += comb2(table[static_cast<size_t>(i)][static_cast<size_t>(j)]);
        }
        sum_rows += comb2(row);
    }
    for (int j = 0; j < rb; ++j) {
        long long col = 0;
        for (int i = 0; i < ra; ++i) col += table[static_cast<size_t>(i)][static_cast<size_t>(j)];
        sum_cols += comb2(col);
    }
    const double total = comb2(n);
    const double expected = total > 0.0 ? sum_rows * sum_cols / total : 0.0;
    const double max_index = 0.5 * (sum_rows + sum_cols);
    const double denom = max_index - expected;
    if (std::abs(denom) < 1e-12) {
        // degenerate chance model (all-singleton or single-cluster partitions):
        // agreement is all or nothing
        bool identical = ra == rb;
        if (identical)
            for (int i = 0; i < ra && identical; ++i) {
                int nonzero = 0;
                for (int j = 0; j < rb; ++j)
                    if (table[static_cast<size_t>(i)][static_cast<size_t>(j)] > 0) ++nonzero;
                identical = nonzero == 1;
            }
        return identical ? 1.0 : 0.0;
    }
    return (sum_cells - expected) / denom;
}

namespace {

Tensor flat_output(const TapeDecoder& decode, const Tensor& slots, int& out_dim) {
    tape::Tape tp;
    const auto s = tp.constant(slots);
    const auto out = decode(tp, s);
    const Tensor& v = tp.value(out);
    out_dim = v.rows * v.cols;
    return v;
}

// Jacobian rows via one reverse sweep per output coordinate.
Tensor tape_jacobian(const TapeDecoder& decode, const Tensor& slots, int out_dim) {
    const int kd = slots.rows * slots.cols;
    Tensor jac(out_dim, kd);
    for (int idx = 0; idx < out_dim; ++idx) {
        tape::Tape tp;
        const auto s = tp.constant(slots);
        const auto out = decode(tp, s);
        const int ocols = tp.value(out).cols;
        tp.backward(tp.entry(out, idx / ocols, idx % ocols));
        const Tensor& g = tp.grad(s);
        for (int e = 0; e < kd; ++e) jac.at(idx, e) = g.data[static_cast<size_t>(e)];
    }
    return jac;
}

Tensor fd_jacobian(const TapeDecoder& decode, const Tensor& slots, int out_dim, double step) {
    const int kd = slots.rows * slots.cols;
    Tensor jac(out_dim, kd);
    for (int e = 0; e < kd; ++e) {
        Tensor sp = slots, sm = slots;
        sp.data[static_cast<size_t>(e)] += step;
        sm.data[static_cast<size_t>(e)] -= step;
        int dim = 0;
        const Tensor fp = flat_output(decode, sp, dim);
        const Tensor fm = flat_output(decode, sm, dim);
        for (int idx = 0; idx < out_dim; ++idx)
            jac.at(idx, e) =
                (fp.data[static_cast<size_t>(idx)] - fm.data[static_cast<size_t>(idx)]) /
                (2.0 * step);
    }
    return jac;
}

double contrast_of(const Tensor& jac, int k, int d) {
    std::vector<double> norms(static_cast<size_t>(k), 0.0);
    double acc = 0.0;
    for (int n = 0; n < jac.rows; ++n) {
        for (int ki = 0; ki < k; ++ki) {
            double block = 0.0;
            for (int j = 0; j < d; ++j) {
                const double g = jac.at(n, ki * d + j);
                block += g * g;
            }
            norms[static_cast<size_t>(ki)] = std::sqrt(block);
        }
        for (int ki = 0; ki < k; ++ki)
            for (int kj = ki + 1; kj < k; ++kj)
                acc += norms[static_cast<size_t>(ki)] * norms[static_cast<size_t>(kj)];
    }
    return acc;
}

}  // namespace

ContrastResult compositional_contrast(const TapeDecoder& decode, const Tensor& slots,
                                      const ContrastOptions& opts) {
    require(slots.rows >= 1 && slots.cols >= 1, "compositional contrast: empty slots");
    require(all_finite(slots), "compositional contrast: non-finite slots");
    const int k = slots.rows, d = slots.cols;

    int out_dim = 0;
    flat_output(decode, slots, out_dim);
    require(out_dim >= 1, "compositional contrast: decoder produced no output");
    require(static_cast<long long>(out_dim) * k * d <= 10000,
            "compositional contrast: Jacobian too large for exact evaluation");

    auto evaluate = [&](const Tensor& s, ContrastResult& res) {
        res.value = contrast_of(tape_jacobian(decode, s, out_dim), k, d);
        if (!opts.fd_check) return true;
        res.fd_value = contrast_of(fd_jacobian(decode, s, out_dim, opts.fd_step), k, d);
        const double scale = std::max({std::abs(res.value), std::abs(res.fd_value), 1e-9});
        return std::abs(res.value - res.fd_value) / scale <= opts.fd_tol;
    };

    ContrastResult res;
    if (evaluate(slots, res)) return res;
    // disagreement means an activation boundary sits inside the probe stencil
    Tensor nudged = slots;
    for (double& v : nudged.data) v += 1e-7;
    res.perturbed = true;
    require_numeric(evaluate(nudged, res),
                    "compositional contrast: derivative unstable after perturbation");
    return res;
}

}  // namespace slotmix::metrics
