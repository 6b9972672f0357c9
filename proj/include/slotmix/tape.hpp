#pragma once

#include <functional>
#include <vector>

#include "slotmix/tensor.hpp"

namespace slotmix::tape {

// Reverse-mode differentiation over matrix-valued nodes. One tape records one
// forward pass; backward() replays it once in reverse and is then consumed.
// Forward evaluation calls the same kernels as the inference path, so trained
// and evaluated numbers cannot drift apart.
class Tape {
  public:
    using Id = int;

    // Leaf node. Gradients accumulate for leaves like any other node; leaves
    // that never feed the loss keep an all-zero gradient.
    Id constant(Tensor v);

    Id matmul(Id a, Id b);     // a @ b
    Id matmul_nt(Id a, Id b);  // a @ b^T
    Id matmul_tn(Id a, Id b);  // a^T @ b
    Id add_rowvec(Id a, Id v);  // broadcast a 1 x c row onto every row of a
    Id leaky_relu(Id a, double slope);
    Id log_clamped(Id a);  // log(max(a, 1e-300))
    // logits of slot responsibilities; logpi is a 1 x K row
    Id gauss_logits(Id keys, Id q, Id var, Id logpi);
    Id softmax_rows(Id logits);
    Id colnorm(Id a);
    Id weighted_var(Id a_hat, Id values, Id mu);
    Id clamp_min(Id a, double lo);
    Id colmean(Id a);  // 1 x K row of column means
    Id mse(Id pred, Tensor target);  // mean over rows of squared row error, 1 x 1
    Id sum_sq(Id a);                 // sum of squared entries, 1 x 1
    Id entry(Id a, int r, int c);    // single-entry selector, 1 x 1

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse. The loss
    // must be a 1 x 1 node. A tape can be differentiated only once.
    void backward(Id loss);

    const Tensor& value(Id id) const;
    const Tensor& grad(Id id) const;
    int size() const { return static_cast<int>(nodes_.size()); }
    bool consumed() const { return consumed_; }

  private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Tape&)> back;  // empty for leaves
    };

    Id push(Tensor val, std::function<void(Tape&)> back);
    Node& node(Id id);
    const Node& node(Id id) const;

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

}  // namespace slotmix::tape
