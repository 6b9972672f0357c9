#pragma once

#include <cstddef>
#include <vector>

#include "slotmix/common.hpp"

namespace slotmix {

// Dense row-major matrix of doubles. Vectors are 1 x c or r x 1 as convenient.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), fill) {
        require(r >= 0 && c >= 0, "Tensor: negative shape");
    }

    static Tensor from_rows(const std::vector<std::vector<double>>& rows_in) {
        Tensor t(static_cast<int>(rows_in.size()),
                 rows_in.empty() ? 0 : static_cast<int>(rows_in[0].size()));
        for (int r = 0; r < t.rows; ++r) {
            require(static_cast<int>(rows_in[r].size()) == t.cols,
                    "Tensor::from_rows: ragged rows");
            for (int c = 0; c < t.cols; ++c) t.at(r, c) = rows_in[r][c];
        }
        return t;
    }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    size_t size() const { return data.size(); }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
};

inline Tensor identity(int n) {
    Tensor t(n, n);
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

// out = a @ b
void matmul(const Tensor& a, const Tensor& b, Tensor& out);
// out = a @ b^T
void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out);
// out = a^T @ b
void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out);

bool all_finite(const Tensor& t);

}  // namespace slotmix
