#include "kernels.hpp"

#include <algorithm>
#include <cmath>

#include "slotmix/common.hpp"

namespace slotmix::kernels {

namespace {
constexpr double kLog2Pi = 1.8378770664093453;
}

void gauss_logits(const Tensor& keys, const Tensor& q, const Tensor& var,
                  const std::vector<double>& logpi, Tensor& L, OpCounter* ctr) {
    const int N = keys.rows, d = keys.cols, K = q.rows;
    require(q.cols == d && var.rows == K && var.cols == d, "gauss_logits: shape mismatch");
    require(static_cast<int>(logpi.size()) == K, "gauss_logits: logpi size mismatch");
    L = Tensor(N, K);
    // per-slot constant: logpi_k - 0.5 sum_j log(2 pi var_kj)
    std::vector<double> base(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
        double s = 0.0;
        const double* vk = var.row(k);
        for (int j = 0; j < d; ++j) s += std::log(vk[j]);
        base[static_cast<size_t>(k)] = logpi[static_cast<size_t>(k)] - 0.5 * (d * kLog2Pi + s);
    }
    for (int n = 0; n < N; ++n) {
        const double* kn = keys.row(n);
        double* Ln = L.row(n);
        for (int k = 0; k < K; ++k) {
            const double* qk = q.row(k);
            const double* vk = var.row(k);
            double quad = 0.0;
            for (int j = 0; j < d; ++j) {
                const double diff = kn[j] - qk[j];
                quad += diff * diff / vk[j];
            }
            Ln[k] = base[static_cast<size_t>(k)] - 0.5 * quad;
        }
    }
    if (ctr) ctr->macs += static_cast<uint64_t>(N) * K * d;
}

void gauss_logits_bwd(const Tensor& keys, const Tensor& q, const Tensor& var, const Tensor& dL,
                      Tensor& dkeys, Tensor& dq, Tensor& dvar, std::vector<double>& dlogpi) {
    const int N = keys.rows, d = keys.cols, K = q.rows;
    for (int n = 0; n < N; ++n) {
        const double* kn = keys.row(n);
        const double* dLn = dL.row(n);
        double* dkn = dkeys.row(n);
        for (int k = 0; k < K; ++k) {
            const double g = dLn[k];
            if (g == 0.0) continue;
            const double* qk = q.row(k);
            const double* vk = var.row(k);
            double* dqk = dq.row(k);
            double* dvk = dvar.row(k);
            dlogpi[static_cast<size_t>(k)] += g;
            for (int j = 0; j < d; ++j) {
                const double diff = kn[j] - qk[j];
                const double w = g * diff / vk[j];
                dkn[j] -= w;
                dqk[j] += w;
                dvk[j] += g * (-0.5 / vk[j] + diff * diff / (2.0 * vk[j] * vk[j]));
            }
        }
    }
}

void softmax_rows(const Tensor& L, Tensor& A) {
    const int N = L.rows, K = L.cols;
    A = Tensor(N, K);
    std::vector<double> exps(static_cast<size_t>(K));
    for (int n = 0; n < N; ++n) {
        const double* Ln = L.row(n);
        double* An = A.row(n);
        double m = -HUGE_VAL;
        for (int k = 0; k < K; ++k) m = std::max(m, Ln[k]);
        for (int k = 0; k < K; ++k) {
            An[k] = std::exp(Ln[k] - m);
            exps[static_cast<size_t>(k)] = An[k];
        }
        std::sort(exps.begin(), exps.end());
        double s = 0.0;
        for (double e : exps) s += e;
        for (int k = 0; k < K; ++k) An[k] /= s;
    }
}

void softmax_rows_bwd(const Tensor& A, const Tensor& dA, Tensor& dL) {
    const int N = A.rows, K = A.cols;
    for (int n = 0; n < N; ++n) {
        const double* An = A.row(n);
        const double* dAn = dA.row(n);
        double* dLn = dL.row(n);
        double dot = 0.0;
        for (int k = 0; k < K; ++k) dot += dAn[k] * An[k];
        for (int k = 0; k < K; ++k) dLn[k] += An[k] * (dAn[k] - dot);
    }
}

void colnorm(const Tensor& A, Tensor& A_hat, std::vector<double>& colsum) {
    const int N = A.rows, K = A.cols;
    A_hat = Tensor(N, K);
    colsum.assign(static_cast<size_t>(K), 0.0);
    for (int n = 0; n < N; ++n) {
        const double* An = A.row(n);
        for (int k = 0; k < K; ++k) colsum[static_cast<size_t>(k)] += An[k];
    }
    for (int n = 0; n < N; ++n) {
        const double* An = A.row(n);
        double* Hn = A_hat.row(n);
        for (int k = 0; k < K; ++k) {
            const double s = colsum[static_cast<size_t>(k)];
            Hn[k] = (s > 0.0) ? An[k] / s : 0.0;
        }
    }
}

void colnorm_bwd(const Tensor& A_hat, const std::vector<double>& colsum, const Tensor& dA_hat,
                 Tensor& dA) {
    const int N = A_hat.rows, K = A_hat.cols;
    std::vector<double> coldot(static_cast<size_t>(K), 0.0);
    for (int n = 0; n < N; ++n) {
        const double* Hn = A_hat.row(n);
        const double* dHn = dA_hat.row(n);
        for (int k = 0; k < K; ++k) coldot[static_cast<size_t>(k)] += dHn[k] * Hn[k];
    }
    for (int n = 0; n < N; ++n) {
        const double* dHn = dA_hat.row(n);
        double* dAn = dA.row(n);
        for (int k = 0; k < K; ++k) {
            const double s = colsum[static_cast<size_t>(k)];
            if (s > 0.0) dAn[k] += (dHn[k] - coldot[static_cast<size_t>(k)]) / s;
        }
    }
}

void weighted_var(const Tensor& A_hat, const Tensor& values, const Tensor& mu, Tensor& var,
                  OpCounter* ctr) {
    const int N = values.rows, d = values.cols, K = A_hat.cols;
    var = Tensor(K, d);
    for (int n = 0; n < N; ++n) {
        const double* Hn = A_hat.row(n);
        const double* vn = values.row(n);
        for (int k = 0; k < K; ++k) {
            const double w = Hn[k];
            const double* mk = mu.row(k);
            double* vk = var.row(k);
            for (int j = 0; j < d; ++j) {
                const double diff = vn[j] - mk[j];
                vk[j] += w * diff * diff;
            }
        }
    }
    if (ctr) ctr->macs += static_cast<uint64_t>(N) * K * d;
}

void weighted_var_bwd(const Tensor& A_hat, const Tensor& values, const Tensor& mu,
                      const Tensor& dvar, Tensor& dA_hat, Tensor& dvalues, Tensor& dmu) {
    const int N = values.rows, d = values.cols, K = A_hat.cols;
    for (int n = 0; n < N; ++n) {
        const double* Hn = A_hat.row(n);
        const double* vn = values.row(n);
        double* dHn = dA_hat.row(n);
        double* dvn = dvalues.row(n);
        for (int k = 0; k < K; ++k) {
            const double* mk = mu.row(k);
            const double* dvark = dvar.row(k);
            double* dmk = dmu.row(k);
            double acc = 0.0;
            for (int j = 0; j < d; ++j) {
                const double diff = vn[j] - mk[j];
                acc += dvark[j] * diff * diff;
                const double t = dvark[j] * Hn[k] * 2.0 * diff;
                dvn[j] += t;
                dmk[j] -= t;
            }
            dHn[k] += acc;
        }
    }
}

void colmean(const Tensor& A, std::vector<double>& pi) {
    const int N = A.rows, K = A.cols;
    pi.assign(static_cast<size_t>(K), 0.0);
    for (int n = 0; n < N; ++n) {
        const double* An = A.row(n);
        for (int k = 0; k < K; ++k) pi[static_cast<size_t>(k)] += An[k];
    }
    for (double& p : pi) p /= N;
}

void leaky_relu(const Tensor& x, double slope, Tensor& y) {
    y = Tensor(x.rows, x.cols);
    for (size_t i = 0; i < x.data.size(); ++i)
        y.data[i] = x.data[i] >= 0.0 ? x.data[i] : slope * x.data[i];
}

void leaky_relu_bwd(const Tensor& x, double slope, const Tensor& dy, Tensor& dx) {
    for (size_t i = 0; i < x.data.size(); ++i)
        dx.data[i] += x.data[i] >= 0.0 ? dy.data[i] : slope * dy.data[i];
}

bool is_identity(const Tensor& m) {
    if (m.rows != m.cols) return false;
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j)
            if (m.at(i, j) != (i == j ? 1.0 : 0.0)) return false;
    return true;
}

}  // namespace slotmix::kernels
