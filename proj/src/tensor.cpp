#include "slotmix/tensor.hpp"

#include <cmath>

namespace slotmix {

void matmul(const Tensor& a, const Tensor& b, Tensor& out) {
    require(a.cols == b.rows, "matmul: inner dimensions differ");
    out = Tensor(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* outr = out.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = ar[k];
            const double* br = b.row(k);
            for (int j = 0; j < b.cols; ++j) outr[j] += aik * br[j];
        }
    }
}

void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out) {
    require(a.cols == b.cols, "matmul_nt: inner dimensions differ");
    out = Tensor(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* outr = out.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const double* br = b.row(j);
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += ar[k] * br[k];
            outr[j] = s;
        }
    }
}

void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out) {
    require(a.rows == b.rows, "matmul_tn: inner dimensions differ");
    out = Tensor(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* ar = a.row(k);
        const double* br = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            const double aki = ar[i];
            double* outr = out.row(i);
            for (int j = 0; j < b.cols; ++j) outr[j] += aki * br[j];
        }
    }
}

bool all_finite(const Tensor& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace slotmix
