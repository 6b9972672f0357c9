#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "slotmix/common.hpp"
#include "slotmix/gmm.hpp"
#include "slotmix/psa.hpp"
#include "slotmix/tape.hpp"
#include "slotmix/tensor.hpp"

namespace slotmix::nets {

struct AffineLayer {
    Tensor weight;  // n_out x n_in
    Tensor bias;    // 1 x n_out
};

// Orthogonal initialization (QR of a Gaussian draw): every singular value is
// 1, so the full-rank invariant holds by construction and is asserted.
AffineLayer init_affine(int n_out, int n_in, Rng& rng);

// Smallest singular value, via Jacobi eigendecomposition of the Gram matrix.
double min_singular_value(const Tensor& w);

struct Network {
    std::vector<AffineLayer> layers;
    double slope = 0.2;  // leaky-rectifier negative slope, in (0, 1)

    int in_dim() const { return layers.empty() ? 0 : layers.front().weight.cols; }
    int out_dim() const { return layers.empty() ? 0 : layers.back().weight.rows; }
};

// widths = {n_0, ..., n_t}. Every layer must have full rank at the smaller of
// its two dimensions (smallest singular value > 1e-6). A stack declared
// injective must additionally have non-decreasing widths, which upgrades the
// rank condition to full column rank end to end.
Network make_network(const std::vector<int>& widths, double slope, Rng& rng,
                     bool injective = false);

// Rows of x evaluated independently; the final layer is unactivated. Uses the
// same kernels as the tape forward, bitwise.
Tensor net_forward(const Network& net, const Tensor& x);

// --- recorded (differentiable) forward passes --------------------------------

struct TapeNet {
    std::vector<tape::Tape::Id> weights;
    std::vector<tape::Tape::Id> biases;
    double slope = 0.2;
};

TapeNet put_on_tape(tape::Tape& tp, const Network& net);
tape::Tape::Id forward_on_tape(tape::Tape& tp, const TapeNet& net, tape::Tape::Id x);

struct PsaOnTape {
    tape::Tape::Id mu = -1;
    tape::Tape::Id var = -1;
    tape::Tape::Id pi = -1;  // 1 x K row
    tape::Tape::Id A = -1;
    tape::Tape::Id A_hat = -1;
};

// T recorded e/m alternations from a fixed initial state. keys/values must
// already be projected; wq = -1 leaves queries at the slot means (identity
// query transform). Gradients flow through every iteration.
PsaOnTape psa_on_tape(tape::Tape& tp, tape::Tape::Id keys, tape::Tape::Id values,
                      tape::Tape::Id wq, const psa::PsaState& init, int T);

// --- optimizer ----------------------------------------------------------------

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimizerState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    int t = 0;
};

// Bias-corrected adaptive first-order update, in place. Moments are sized on
// first use. Non-finite gradients abort the step.
void optimizer_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                    OptimizerState& state, const OptimizerConfig& cfg);

// --- autoencoder --------------------------------------------------------------

enum class Recombiner {
    mixed,     // x_hat_n = decoder(sum_k A_nk mu_k): non-additive
    additive,  // x_hat_n = sum_k A_nk decoder(mu_k): per-slot decodes
};

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int epochs = 300;
    int batch = 32;
    int T = 5;
    int K = 5;
    int d = 2;  // latent dimension (encoder output, decoder input)
    psa::Variant variant = psa::Variant::Base;
    uint64_t seed = 1;
    double slope = 0.2;
    std::vector<int> encoder_widths = {2, 16, 16, 2};
    std::vector<int> decoder_widths = {2, 16, 16, 2};
    Recombiner recombiner = Recombiner::mixed;
    int jobs = 0;  // worker threads per batch; 0 picks the hardware default
};

void validate_config(const TrainConfig& cfg);

struct AutoencodeResult {
    std::vector<Tensor> reconstructions;
    std::vector<gmm::GaussianMixture> locals;
    std::vector<psa::AttentionMatrix> attentions;
    std::vector<psa::PsaState> states;
    double mean_loss = 0.0;
};

// Inference-mode pass: encode, route, decode per point set. Slot state is
// resampled from rng per point set.
AutoencodeResult autoencode_forward(const std::vector<Tensor>& batch, const Network& encoder,
                                    const psa::PsaParams& params, const Network& decoder,
                                    Recombiner recombiner, int K, int T, Rng& rng);

// Same pass from one shared initial slot state: slot identities then line up
// across point sets, which the extraction metrics rely on.
AutoencodeResult autoencode_forward_from(const std::vector<Tensor>& batch, const Network& encoder,
                                         const psa::PsaParams& params, const Network& decoder,
                                         Recombiner recombiner, const psa::PsaState& init, int T);

// Recorded pass for one point set: reconstruction loss plus gradients for
// every trainable tensor, ordered encoder (w, b per layer), decoder (w, b per
// layer), then W_q, W_k, W_v when the variant trains projections.
struct SceneLossResult {
    double loss = 0.0;
    std::vector<Tensor> grads;
};

SceneLossResult scene_loss_and_grads(const Tensor& scene, const Network& encoder,
                                     const psa::PsaParams& params, const Network& decoder,
                                     Recombiner recombiner, const psa::PsaState& init, int T);

// --- training -----------------------------------------------------------------

struct Checkpoint {
    TrainConfig config;
    Network encoder;
    Network decoder;
    psa::PsaParams psa_params;
    psa::PsaState slot_init;  // fixed initialization used at inference time
    OptimizerState opt;
    std::vector<double> loss_curve;  // mean reconstruction loss per epoch
    int epoch = 0;
};

// Deterministic initialization from config.seed alone.
Checkpoint init_checkpoint(const TrainConfig& cfg);

// The trainable tensors of a checkpoint, in the scene_loss_and_grads order.
std::vector<Tensor*> trainable_params(Checkpoint& ck);

// Versioned little-endian binary with a checksum footer. A loaded checkpoint
// is bitwise identical to the saved one, optimizer moments included, so
// training can resume or replay exactly.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Minibatch descent on the mean reconstruction loss. Scene order reshuffles
// per epoch; slot initializations are resampled per (epoch, scene) from seeds
// derived off config.seed, so results do not depend on the worker count.
// Throws numeric_error if the loss stops being finite.
Checkpoint train(const std::vector<Tensor>& scenes, const TrainConfig& cfg);

}  // namespace slotmix::nets
