#include "slotmix/nets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <utility>

#include "kernels.hpp"

namespace slotmix::nets {

namespace {

// Rows x cols (rows <= cols) matrix with orthonormal rows, via modified
// Gram-Schmidt on Gaussian draws.
Tensor orthonormal_rows(int rows, int cols, Rng& rng) {
    Tensor m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int attempt = 0;; ++attempt) {
            require(attempt < 64, "init_affine: failed to orthonormalize");
            double* mr = m.row(r);
            for (int c = 0; c < cols; ++c) mr[c] = rng.normal();
            for (int k = 0; k < r; ++k) {
                const double* mk = m.row(k);
                double dot = 0.0;
                for (int c = 0; c < cols; ++c) dot += mr[c] * mk[c];
                for (int c = 0; c < cols; ++c) mr[c] -= dot * mk[c];
            }
            double norm = 0.0;
            for (int c = 0; c < cols; ++c) norm += mr[c] * mr[c];
            norm = std::sqrt(norm);
            if (norm > 1e-8) {
                for (int c = 0; c < cols; ++c) mr[c] /= norm;
                break;
            }
        }
    }
    return m;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
std::vector<double> sym_eigenvalues(Tensor a) {
    const int n = a.rows;
    for (int sweep = 0; sweep < 128; ++sweep) {
        double off = 0.0, scale = 0.0;
        for (int p = 0; p < n; ++p) {
            scale = std::max(scale, std::abs(a.at(p, p)));
            for (int q = p + 1; q < n; ++q) off = std::max(off, std::abs(a.at(p, q)));
        }
        if (off <= 1e-14 * std::max(scale, 1e-300)) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(a.at(p, q)) <= 1e-300) continue;
                const double tau = (a.at(q, q) - a.at(p, p)) / (2.0 * a.at(p, q));
                const double t = (tau >= 0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int i = 0; i < n; ++i) {
                    const double aip = a.at(i, p), aiq = a.at(i, q);
                    a.at(i, p) = c * aip - s * aiq;
                    a.at(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    const double api = a.at(p, i), aqi = a.at(q, i);
                    a.at(p, i) = c * api - s * aqi;
                    a.at(q, i) = s * api + c * aqi;
                }
            }
        }
    }
    std::vector<double> eig(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) eig[static_cast<size_t>(i)] = a.at(i, i);
    return eig;
}

void add_bias_rows(Tensor& x, const Tensor& bias) {
    for (int i = 0; i < x.rows; ++i) {
        double* r = x.row(i);
        for (int j = 0; j < x.cols; ++j) r[j] += bias.at(0, j);
    }
}

}  // namespace

double min_singular_value(const Tensor& w) {
    require(w.rows >= 1 && w.cols >= 1, "min_singular_value: empty matrix");
    const bool tall = w.rows >= w.cols;
    const int m = tall ? w.cols : w.rows;
    Tensor gram(m, m);
    if (tall)
        matmul_tn(w, w, gram);
    else
        matmul_nt(w, w, gram);
    const auto eig = sym_eigenvalues(gram);
    double lo = HUGE_VAL;
    for (double e : eig) lo = std::min(lo, e);
    return std::sqrt(std::max(lo, 0.0));
}

AffineLayer init_affine(int n_out, int n_in, Rng& rng) {
    require(n_out >= 1 && n_in >= 1, "init_affine: dimensions must be positive");
    AffineLayer layer;
    if (n_out >= n_in) {
        const Tensor q = orthonormal_rows(n_in, n_out, rng);
        layer.weight = Tensor(n_out, n_in);
        for (int i = 0; i < n_out; ++i)
            for (int j = 0; j < n_in; ++j) layer.weight.at(i, j) = q.at(j, i);
    } else {
        layer.weight = orthonormal_rows(n_out, n_in, rng);
    }
    layer.bias = Tensor(1, n_out);
    require(min_singular_value(layer.weight) > 1e-6, "init_affine: rank-deficient initialization");
    return layer;
}

Network make_network(const std::vector<int>& widths, double slope, Rng& rng, bool injective) {
    require(widths.size() >= 2, "make_network: need at least an input and an output width");
    for (int w : widths) require(w >= 1, "make_network: widths must be positive");
    require(slope > 0.0 && slope < 1.0, "make_network: slope must lie in (0, 1)");
    if (injective)
        for (size_t i = 1; i < widths.size(); ++i)
            require(widths[i] >= widths[i - 1],
                    "make_network: an injective stack needs non-decreasing widths");
    Network net;
    net.slope = slope;
    for (size_t i = 1; i < widths.size(); ++i)
        net.layers.push_back(init_affine(widths[i], widths[i - 1], rng));
    return net;
}

Tensor net_forward(const Network& net, const Tensor& x) {
    require(!net.layers.empty(), "net_forward: empty network");
    require(x.cols == net.in_dim(), "net_forward: input width mismatch");
    Tensor h = x;
    for (size_t i = 0; i < net.layers.size(); ++i) {
        Tensor z;
        matmul_nt(h, net.layers[i].weight, z);
        add_bias_rows(z, net.layers[i].bias);
        if (i + 1 < net.layers.size()) {
            Tensor a;
            kernels::leaky_relu(z, net.slope, a);
            h = std::move(a);
        } else {
            h = std::move(z);
        }
    }
    return h;
}

TapeNet put_on_tape(tape::Tape& tp, const Network& net) {
    TapeNet ids;
    ids.slope = net.slope;
    for (const auto& layer : net.layers) {
        ids.weights.push_back(tp.constant(layer.weight));
        ids.biases.push_back(tp.constant(layer.bias));
    }
    return ids;
}

tape::Tape::Id forward_on_tape(tape::Tape& tp, const TapeNet& net, tape::Tape::Id x) {
    require(!net.weights.empty(), "forward_on_tape: empty network");
    tape::Tape::Id h = x;
    for (size_t i = 0; i < net.weights.size(); ++i) {
        h = tp.add_rowvec(tp.matmul_nt(h, net.weights[i]), net.biases[i]);
        if (i + 1 < net.weights.size()) h = tp.leaky_relu(h, net.slope);
    }
    return h;
}

PsaOnTape psa_on_tape(tape::Tape& tp, tape::Tape::Id keys, tape::Tape::Id values,
                      tape::Tape::Id wq, const psa::PsaState& init, int T) {
    require(T >= 1, "psa_on_tape: iteration count must be positive");
    psa::validate_state(init);
    const int K = init.slot_count();
    PsaOnTape out;
    tape::Tape::Id mu = tp.constant(init.mu);
    tape::Tape::Id var = tp.constant(init.var);
    Tensor pi0(1, K);
    std::copy(init.pi.begin(), init.pi.end(), pi0.data.begin());
    tape::Tape::Id pi = tp.constant(pi0);
    for (int t = 0; t < T; ++t) {
        const tape::Tape::Id logpi = tp.log_clamped(pi);
        const tape::Tape::Id q = wq >= 0 ? tp.matmul_nt(mu, wq) : mu;
        const tape::Tape::Id logits = tp.gauss_logits(keys, q, var, logpi);
        out.A = tp.softmax_rows(logits);
        out.A_hat = tp.colnorm(out.A);
        mu = tp.matmul_tn(out.A_hat, values);
        var = tp.clamp_min(tp.weighted_var(out.A_hat, values, mu), gmm::kVarianceFloor);
        pi = tp.colmean(out.A);
    }
    out.mu = mu;
    out.var = var;
    out.pi = pi;
    return out;
}

void optimizer_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                    OptimizerState& state, const OptimizerConfig& cfg) {
    require(params.size() == grads.size(), "optimizer_step: parameter/gradient count mismatch");
    require(cfg.lr > 0.0 && std::isfinite(cfg.lr), "optimizer_step: learning rate must be positive");
    require(cfg.beta1 > 0.0 && cfg.beta1 < 1.0 && cfg.beta2 > 0.0 && cfg.beta2 < 1.0,
            "optimizer_step: decay rates must lie in (0, 1)");
    require(cfg.eps > 0.0, "optimizer_step: eps must be positive");
    if (state.m.empty()) {
        for (const Tensor* p : params) {
            state.m.emplace_back(p->rows, p->cols);
            state.v.emplace_back(p->rows, p->cols);
        }
    }
    require(state.m.size() == params.size() && state.v.size() == params.size(),
            "optimizer_step: moment/parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        require(params[i]->same_shape(grads[i]) && params[i]->same_shape(state.m[i]),
                "optimizer_step: shape mismatch");
        require_numeric(all_finite(grads[i]), "optimizer_step: non-finite gradient, step aborted");
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, state.t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, state.t);
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        const Tensor& g = grads[i];
        for (size_t e = 0; e < p.data.size(); ++e) {
            m.data[e] = cfg.beta1 * m.data[e] + (1.0 - cfg.beta1) * g.data[e];
            v.data[e] = cfg.beta2 * v.data[e] + (1.0 - cfg.beta2) * g.data[e] * g.data[e];
            p.data[e] -= cfg.lr * (m.data[e] / bc1) / (std::sqrt(v.data[e] / bc2) + cfg.eps);
        }
    }
}

void validate_config(const TrainConfig& cfg) {
    require(cfg.lr > 0.0 && std::isfinite(cfg.lr), "train config: learning rate must be positive");
    require(cfg.beta1 > 0.0 && cfg.beta1 < 1.0, "train config: beta1 must lie in (0, 1)");
    require(cfg.beta2 > 0.0 && cfg.beta2 < 1.0, "train config: beta2 must lie in (0, 1)");
    require(cfg.epochs >= 0, "train config: epochs must be non-negative");
    require(cfg.batch >= 1, "train config: batch size must be positive");
    require(cfg.T >= 1, "train config: iteration count must be positive");
    require(cfg.K >= 1, "train config: slot count must be positive");
    require(cfg.d >= 1, "train config: latent dimension must be positive");
    require(cfg.slope > 0.0 && cfg.slope < 1.0, "train config: slope must lie in (0, 1)");
    require(cfg.jobs >= 0, "train config: jobs must be non-negative");
    require(cfg.encoder_widths.size() >= 2 && cfg.decoder_widths.size() >= 2,
            "train config: encoder and decoder need at least one layer");
    for (int w : cfg.encoder_widths) require(w >= 1, "train config: widths must be positive");
    for (int w : cfg.decoder_widths) require(w >= 1, "train config: widths must be positive");
    require(cfg.encoder_widths.back() == cfg.d,
            "train config: encoder must end at the latent dimension");
    require(cfg.decoder_widths.front() == cfg.d,
            "train config: decoder must start at the latent dimension");
}

namespace {

Tensor recombine(const Network& decoder, const Tensor& A, const Tensor& mu,
                 Recombiner recombiner) {
    Tensor out;
    if (recombiner == Recombiner::mixed) {
        Tensor blend;
        matmul(A, mu, blend);
        out = net_forward(decoder, blend);
    } else {
        const Tensor decoded = net_forward(decoder, mu);
        matmul(A, decoded, out);
    }
    return out;
}

double scene_mse(const Tensor& recon, const Tensor& scene) {
    double acc = 0.0;
    for (size_t i = 0; i < recon.data.size(); ++i) {
        const double diff = recon.data[i] - scene.data[i];
        acc += diff * diff;
    }
    return acc / recon.rows;
}

AutoencodeResult autoencode_common(const std::vector<Tensor>& batch, const Network& encoder,
                                   const psa::PsaParams& params, const Network& decoder,
                                   Recombiner recombiner, int T,
                                   const std::function<psa::PsaState(int)>& init_for) {
    require(!batch.empty(), "autoencode: empty batch");
    AutoencodeResult res;
    double total = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        const Tensor& scene = batch[i];
        require(scene.rows >= 1, "autoencode: empty point set");
        const Tensor h = net_forward(encoder, scene);
        auto fwd = psa::forward_from(h, params, init_for(static_cast<int>(i)), T);
        Tensor recon = recombine(decoder, fwd.attention.A, fwd.state.mu, recombiner);
        total += scene_mse(recon, scene);
        res.reconstructions.push_back(std::move(recon));
        res.locals.push_back(std::move(fwd.local));
        res.attentions.push_back(std::move(fwd.attention));
        res.states.push_back(std::move(fwd.state));
    }
    res.mean_loss = total / static_cast<double>(batch.size());
    return res;
}

}  // namespace

AutoencodeResult autoencode_forward(const std::vector<Tensor>& batch, const Network& encoder,
                                    const psa::PsaParams& params, const Network& decoder,
                                    Recombiner recombiner, int K, int T, Rng& rng) {
    require(K >= 1, "autoencode: slot count must be positive");
    return autoencode_common(batch, encoder, params, decoder, recombiner, T,
                             [&](int) { return psa::init_state(K, encoder.out_dim(), rng); });
}

AutoencodeResult autoencode_forward_from(const std::vector<Tensor>& batch, const Network& encoder,
                                         const psa::PsaParams& params, const Network& decoder,
                                         Recombiner recombiner, const psa::PsaState& init, int T) {
    return autoencode_common(batch, encoder, params, decoder, recombiner, T,
                             [&](int) { return init; });
}

SceneLossResult scene_loss_and_grads(const Tensor& scene, const Network& encoder,
                                     const psa::PsaParams& params, const Network& decoder,
                                     Recombiner recombiner, const psa::PsaState& init, int T) {
    require(scene.rows >= 1, "autoencode: empty point set");
    using Id = tape::Tape::Id;
    tape::Tape tp;
    const TapeNet enc = put_on_tape(tp, encoder);
    const TapeNet dec = put_on_tape(tp, decoder);

    const bool train_proj = params.variant != psa::Variant::Base;
    Id wq = -1, wk = -1, wv = -1;
    if (train_proj) {
        // projections always recorded so their gradients exist even at identity
        wq = tp.constant(params.W_q);
        wk = tp.constant(params.W_k);
        wv = tp.constant(params.W_v);
    } else if (!kernels::is_identity(params.W_q)) {
        wq = tp.constant(params.W_q);  // applied but frozen
    }

    const Id x = tp.constant(scene);
    const Id h = forward_on_tape(tp, enc, x);
    const Id keys = train_proj ? tp.matmul_nt(h, wk) : h;
    const Id values = train_proj ? tp.matmul_nt(h, wv) : h;
    const PsaOnTape routed = psa_on_tape(tp, keys, values, wq, init, T);

    Id recon;
    if (recombiner == Recombiner::mixed) {
        recon = forward_on_tape(tp, dec, tp.matmul(routed.A, routed.mu));
    } else {
        recon = tp.matmul(routed.A, forward_on_tape(tp, dec, routed.mu));
    }
    const Id loss = tp.mse(recon, scene);
    tp.backward(loss);

    SceneLossResult out;
    out.loss = tp.value(loss).at(0, 0);
    for (size_t i = 0; i < enc.weights.size(); ++i) {
        out.grads.push_back(tp.grad(enc.weights[i]));
        out.grads.push_back(tp.grad(enc.biases[i]));
    }
    for (size_t i = 0; i < dec.weights.size(); ++i) {
        out.grads.push_back(tp.grad(dec.weights[i]));
        out.grads.push_back(tp.grad(dec.biases[i]));
    }
    if (train_proj) {
        out.grads.push_back(tp.grad(wq));
        out.grads.push_back(tp.grad(wk));
        out.grads.push_back(tp.grad(wv));
    }
    return out;
}

Checkpoint init_checkpoint(const TrainConfig& cfg) {
    validate_config(cfg);
    Checkpoint ck;
    ck.config = cfg;
    Rng enc_rng(derive_seed(cfg.seed, 1));
    ck.encoder = make_network(cfg.encoder_widths, cfg.slope, enc_rng);
    Rng dec_rng(derive_seed(cfg.seed, 2));
    ck.decoder = make_network(cfg.decoder_widths, cfg.slope, dec_rng);
    if (cfg.variant == psa::Variant::Base) {
        ck.psa_params = psa::identity_params(cfg.d, psa::Variant::Base);
    } else {
        Rng proj_rng(derive_seed(cfg.seed, 3));
        ck.psa_params = psa::make_params(cfg.variant, init_affine(cfg.d, cfg.d, proj_rng).weight,
                                         init_affine(cfg.d, cfg.d, proj_rng).weight,
                                         init_affine(cfg.d, cfg.d, proj_rng).weight);
    }
    Rng init_rng(derive_seed(cfg.seed, 4));
    ck.slot_init = psa::init_state(cfg.K, cfg.d, init_rng);
    return ck;
}

std::vector<Tensor*> trainable_params(Checkpoint& ck) {
    std::vector<Tensor*> out;
    for (auto& layer : ck.encoder.layers) {
        out.push_back(&layer.weight);
        out.push_back(&layer.bias);
    }
    for (auto& layer : ck.decoder.layers) {
        out.push_back(&layer.weight);
        out.push_back(&layer.bias);
    }
    if (ck.config.variant != psa::Variant::Base) {
        out.push_back(&ck.psa_params.W_q);
        out.push_back(&ck.psa_params.W_k);
        out.push_back(&ck.psa_params.W_v);
    }
    return out;
}

Checkpoint train(const std::vector<Tensor>& scenes, const TrainConfig& cfg) {
    Checkpoint ck = init_checkpoint(cfg);
    require(!scenes.empty(), "train: dataset must be nonempty");
    for (const Tensor& s : scenes)
        require(s.rows >= 1 && s.cols == ck.encoder.in_dim(), "train: scene shape mismatch");

    const int M = static_cast<int>(scenes.size());
    const int jobs = cfg.jobs > 0 ? cfg.jobs : default_jobs();
    const auto params = trainable_params(ck);
    const OptimizerConfig ocfg{cfg.lr, cfg.beta1, cfg.beta2, 1e-8};

    std::vector<int> order(static_cast<size_t>(M));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 5, static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        for (int start = 0; start < M; start += cfg.batch) {
            const int bsz = std::min(cfg.batch, M - start);
            std::vector<SceneLossResult> results(static_cast<size_t>(bsz));
            parallel_for(bsz, jobs, [&](int i) {
                const int sidx = order[static_cast<size_t>(start + i)];
                Rng srng(derive_seed(cfg.seed, 6, static_cast<uint64_t>(epoch),
                                     static_cast<uint64_t>(sidx)));
                const auto init = psa::init_state(cfg.K, cfg.d, srng);
                results[static_cast<size_t>(i)] =
                    scene_loss_and_grads(scenes[static_cast<size_t>(sidx)], ck.encoder,
                                         ck.psa_params, ck.decoder, cfg.recombiner, init, cfg.T);
            });
            // accumulate in batch position order so worker count cannot matter
            std::vector<Tensor> acc = std::move(results[0].grads);
            double batch_loss = results[0].loss;
            for (int i = 1; i < bsz; ++i) {
                batch_loss += results[static_cast<size_t>(i)].loss;
                const auto& g = results[static_cast<size_t>(i)].grads;
                for (size_t j = 0; j < acc.size(); ++j)
                    for (size_t e = 0; e < acc[j].data.size(); ++e)
                        acc[j].data[e] += g[j].data[e];
            }
            const double inv_b = 1.0 / bsz;
            for (auto& g : acc)
                for (double& e : g.data) e *= inv_b;
            require_numeric(std::isfinite(batch_loss),
                            "train: loss diverged (seed " + std::to_string(cfg.seed) +
                                ", epoch " + std::to_string(epoch) + ")");
            optimizer_step(params, acc, ck.opt, ocfg);
            epoch_loss += batch_loss;
        }
        ck.loss_curve.push_back(epoch_loss / M);
        ck.epoch = epoch + 1;
    }
    return ck;
}

}  // namespace slotmix::nets
