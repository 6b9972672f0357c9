#include "slotmix/tape.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "kernels.hpp"
#include "slotmix/common.hpp"

namespace slotmix::tape {

namespace {

// Gradient accumulators; all loops run in a fixed order so backward passes
// are reproducible bit for bit.
void add_matmul(Tensor& dst, const Tensor& a, const Tensor& b) {
    for (int i = 0; i < a.rows; ++i) {
        double* d = dst.row(i);
        const double* ar = a.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double av = ar[k];
            const double* br = b.row(k);
            for (int j = 0; j < b.cols; ++j) d[j] += av * br[j];
        }
    }
}

void add_matmul_nt(Tensor& dst, const Tensor& a, const Tensor& b) {
    for (int i = 0; i < a.rows; ++i) {
        double* d = dst.row(i);
        const double* ar = a.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const double* br = b.row(j);
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
            d[j] += acc;
        }
    }
}

void add_matmul_tn(Tensor& dst, const Tensor& a, const Tensor& b) {
    for (int k = 0; k < a.rows; ++k) {
        const double* ar = a.row(k);
        const double* br = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            double* d = dst.row(i);
            const double av = ar[i];
            for (int j = 0; j < b.cols; ++j) d[j] += av * br[j];
        }
    }
}

}  // namespace

Tape::Id Tape::push(Tensor val, std::function<void(Tape&)> back) {
    require(!consumed_, "Tape: cannot record on a consumed tape");
    Node n;
    n.val = std::move(val);
    n.grad = Tensor(n.val.rows, n.val.cols);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size()) - 1;
}

Tape::Node& Tape::node(Id id) {
    require(id >= 0 && id < size(), "Tape: node id out of range");
    return nodes_[static_cast<size_t>(id)];
}

const Tape::Node& Tape::node(Id id) const {
    require(id >= 0 && id < size(), "Tape: node id out of range");
    return nodes_[static_cast<size_t>(id)];
}

const Tensor& Tape::value(Id id) const { return node(id).val; }
const Tensor& Tape::grad(Id id) const { return node(id).grad; }

Tape::Id Tape::constant(Tensor v) { return push(std::move(v), {}); }

Tape::Id Tape::matmul(Id a, Id b) {
    Tensor out;
    slotmix::matmul(node(a).val, node(b).val, out);
    const Id y = push(std::move(out), {});
    node(y).back = [a, b, y](Tape& t) {
        const Tensor& dy = t.node(y).grad;
        add_matmul_nt(t.node(a).grad, dy, t.node(b).val);
        add_matmul_tn(t.node(b).grad, t.node(a).val, dy);
    };
    return y;
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
    Tensor out;
    slotmix::matmul_nt(node(a).val, node(b).val, out);
    const Id y = push(std::move(out), {});
    node(y).back = [a, b, y](Tape& t) {
        const Tensor& dy = t.node(y).grad;
        add_matmul(t.node(a).grad, dy, t.node(b).val);
        add_matmul_tn(t.node(b).grad, dy, t.node(a).val);
    };
    return y;
}

Tape::Id Tape::matmul_tn(Id a, Id b) {
    Tensor out;
    slotmix::matmul_tn(node(a).val, node(b).val, out);
    const Id y = push(std::move(out), {});
    node(y).back = [a, b, y](Tape& t) {
        const Tensor& dy = t.node(y).grad;
        add_matmul_nt(t.node(a).grad, t.node(b).val, dy);
        add_matmul(t.node(b).grad, t.node(a).val, dy);
    };
    return y;
}

Tape::Id Tape::add_rowvec(Id a, Id v) {
    const Tensor& av = node(a).val;
    const Tensor& vv = node(v).val;
    require(vv.rows == 1 && vv.cols == av.cols, "Tape::add_rowvec: expected a 1 x cols row");
    Tensor out = av;
    for (int i = 0; i < out.rows; ++i) {
        double* r = out.row(i);
        for (int j = 0; j < out.cols; ++j) r[j] += vv.at(0, j);
    }
    const Id y = push(std::move(out), {});
    node(y).back = [a, v, y](Tape& t) {
        const Tensor& dy = t.node(y).grad;
        Tensor& da = t.node(a).grad;
        Tensor& dv = t.node(v).grad;
        for (int i = 0; i < dy.rows; ++i) {
            const double* r = dy.row(i);
            double* dar = da.row(i);
            for (int j = 0; j < dy.cols; ++j) {
                dar[j] += r[j];
                dv.at(0, j) += r[j];
            }
        }
    };
    return y;
}

Tape::Id Tape::leaky_relu(Id a, double slope) {
    require(slope > 0.0 && slope < 1.0, "Tape::leaky_relu: slope must lie in (0, 1)");
    Tensor out;
    kernels::leaky_relu(node(a).val, slope, out);
    const Id y = push(std::move(out), {});
    node(y).back = [a, slope, y](Tape& t) {
        kernels::leaky_relu_bwd(t.node(a).val, slope, t.node(y).grad, t.node(a).grad);
    };
    return y;
}

Tape::Id Tape::log_clamped(Id a) {
    const Tensor& av = node(a).val;
    Tensor out(av.rows, av.cols);
    for (size_t i = 0; i < av.data.size(); ++i) out.data[i] = std::log(std::max(av.data[i], 1e-300));
    const Id y = push(std::move(out), {});
    node(y).back = [a, y](Tape& t) {
        const Tensor& x = t.node(a).val;
        const Tensor& dy = t.node(y).grad;
        Tensor& dx = t.node(a).grad;
        for (size_t i = 0; i < x.data.size(); ++i)
            if (x.data[i] > 1e-300) dx.data[i] += dy.data[i] / x.data[i];
    };
    return y;
}

Tape::Id Tape::gauss_logits(Id keys, Id q, Id var, Id logpi) {
    const Tensor& lp = node(logpi).val;
    require(lp.rows == 1, "Tape::gauss_logits: logpi must be a 1 x K row");
    std::vector<double> lpv(lp.data.begin(), lp.data.end());
    Tensor out;
    kernels::gauss_logits(node(keys).val, node(q).val, node(var).val, lpv, out);
    const Id y = push(std::move(out), {});
    node(y).back = [keys, q, var, logpi, y](Tape& t) {
        std::vector<double> dlp(static_cast<size_t>(t.node(logpi).val.cols), 0.0);
        kernels::gauss_logits_bwd(t.node(keys).val, t.node(q).val, t.node(var).val,
                                  t.node(y).grad, t.node(keys).grad, t.node(q).grad,
                                  t.node(var).grad, dlp);
        Tensor& g = t.node(logpi).grad;
        for (size_t k = 0; k < dlp.size(); ++k) g.data[k] += dlp[k];
    };
    return y;
}

Tape::Id Tape::softmax_rows(Id logits) {
    Tensor out;
    kernels::softmax_rows(node(logits).val, out);
    const Id y = push(std::move(out), {});
    node(y).back = [logits, y](Tape& t) {
        kernels::softmax_rows_bwd(t.node(y).val, t.node(y).grad, t.node(logits).grad);
    };
    return y;
}

Tape::Id Tape::colnorm(Id a) {
    Tensor out;
    std::vector<double> colsum;
    kernels::colnorm(node(a).val, out, colsum);
    const Id y = push(std::move(out), {});
    node(y).back = [a, y, colsum = std::move(colsum)](Tape& t) {
        kernels::colnorm_bwd(t.node(y).val, colsum, t.node(y).grad, t.node(a).grad);
    };
    return y;
}

Tape::Id Tape::weighted_var(Id a_hat, Id values, Id mu) {
    const Tensor& h = node(a_hat).val;
    const Tensor& v = node(values).val;
    const Tensor& m = node(mu).val;
    require(h.rows == v.rows && m.cols == v.cols && m.rows == h.cols,
            "Tape::weighted_var: shape mismatch");
    Tensor out;
    kernels::weighted_var(h, v, m, out);
    const Id y = push(std::move(out), {});
    node(y).back = [a_hat, values, mu, y](Tape& t) {
        kernels::weighted_var_bwd(t.node(a_hat).val, t.node(values).val, t.node(mu).val,
                                  t.node(y).grad, t.node(a_hat).grad, t.node(values).grad,
                                  t.node(mu).grad);
    };
    return y;
}

Tape::Id Tape::clamp_min(Id a, double lo) {
    const Tensor& av = node(a).val;
    Tensor out(av.rows, av.cols);
    for (size_t i = 0; i < av.data.size(); ++i) out.data[i] = std::max(av.data[i], lo);
    const Id y = push(std::move(out), {});
    node(y).back = [a, lo, y](Tape& t) {
        const Tensor& x = t.node(a).val;
        const Tensor& dy = t.node(y).grad;
        Tensor& dx = t.node(a).grad;
        for (size_t i = 0; i < x.data.size(); ++i)
            if (x.data[i] > lo) dx.data[i] += dy.data[i];
    };
    return y;
}

Tape::Id Tape::colmean(Id a) {
    std::vector<double> pi;
    kernels::colmean(node(a).val, pi);
    Tensor out(1, static_cast<int>(pi.size()));
    std::copy(pi.begin(), pi.end(), out.data.begin());
    const Id y = push(std::move(out), {});
    node(y).back = [a, y](Tape& t) {
        const Tensor& dy = t.node(y).grad;
        Tensor& da = t.node(a).grad;
        const double inv_n = 1.0 / da.rows;
        for (int i = 0; i < da.rows; ++i) {
            double* r = da.row(i);
            for (int j = 0; j < da.cols; ++j) r[j] += dy.at(0, j) * inv_n;
        }
    };
    return y;
}

Tape::Id Tape::mse(Id pred, Tensor target) {
    const Tensor& p = node(pred).val;
    require(p.same_shape(target), "Tape::mse: prediction and target shapes differ");
    require(p.rows >= 1, "Tape::mse: empty prediction");
    double acc = 0.0;
    for (size_t i = 0; i < p.data.size(); ++i) {
        const double diff = p.data[i] - target.data[i];
        acc += diff * diff;
    }
    Tensor out(1, 1);
    out.at(0, 0) = acc / p.rows;
    const Id y = push(std::move(out), {});
    node(y).back = [pred, y, target = std::move(target)](Tape& t) {
        const double g = t.node(y).grad.at(0, 0);
        const Tensor& p2 = t.node(pred).val;
        Tensor& dp = t.node(pred).grad;
        const double scale = 2.0 * g / p2.rows;
        for (size_t i = 0; i < p2.data.size(); ++i)
            dp.data[i] += scale * (p2.data[i] - target.data[i]);
    };
    return y;
}

Tape::Id Tape::sum_sq(Id a) {
    const Tensor& av = node(a).val;
    double acc = 0.0;
    for (double x : av.data) acc += x * x;
    Tensor out(1, 1);
    out.at(0, 0) = acc;
    const Id y = push(std::move(out), {});
    node(y).back = [a, y](Tape& t) {
        const double g = t.node(y).grad.at(0, 0);
        const Tensor& x = t.node(a).val;
        Tensor& dx = t.node(a).grad;
        for (size_t i = 0; i < x.data.size(); ++i) dx.data[i] += 2.0 * g * x.data[i];
    };
    return y;
}

Tape::Id Tape::entry(Id a, int r, int c) {
    const Tensor& av = node(a).val;
    require(r >= 0 && r < av.rows && c >= 0 && c < av.cols, "Tape::entry: index out of range");
    Tensor out(1, 1);
    out.at(0, 0) = av.at(r, c);
    const Id y = push(std::move(out), {});
    node(y).back = [a, r, c, y](Tape& t) {
        t.node(a).grad.at(r, c) += t.node(y).grad.at(0, 0);
    };
    return y;
}

void Tape::backward(Id loss) {
    require(!consumed_, "Tape: backward already ran, the tape is consumed");
    require(size() > 0, "Tape: backward on an empty tape");
    Node& l = node(loss);
    require(l.val.rows == 1 && l.val.cols == 1, "Tape: loss must be a 1 x 1 node");
    l.grad.at(0, 0) = 1.0;
    for (Id i = loss; i >= 0; --i)
        if (nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back(*this);
    consumed_ = true;
}

}  // namespace slotmix::tape
