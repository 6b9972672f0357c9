// Experiment orchestration: declarative run configuration, the command
// implementations behind the CLI, and the text/vector-graphic artifact
// formats. Every command is a pure function of (config, input files); every
// output file ends in a digest of the configuration that produced it.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "slotmix/gmm.hpp"
#include "slotmix/metrics.hpp"
#include "slotmix/nets.hpp"
#include "slotmix/psa.hpp"
#include "slotmix/synthdata.hpp"
#include "slotmix/tensor.hpp"

namespace slotmix::harness {

struct RunConfig {
    nets::TrainConfig train;  // train.seed is overridden per sweep seed

    std::string dataset = "dataset.bin";
    int scenes = 1000;
    uint64_t data_seed = 1;
    synthdata::ModeSampling sampling = synthdata::ModeSampling::gaussian;
    bool export_csv = false;

    std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
    double tau = 0.05;
    gmm::AggregateMode aggregate_mode = gmm::AggregateMode::dirac;
    double alpha = 1.0;  // Dirichlet prior weight, gaussian aggregation only
    psa::SlotSampleMode extraction = psa::SlotSampleMode::mean;
    int grid = 64;  // resolution for density grids and normalization checks
    std::string out_dir = "out";
};

// Flat key = value text; '#' starts a comment. Unknown keys are rejected.
RunConfig parse_config(std::istream& is);
RunConfig load_config(const std::string& path);
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
// Canonical text form: fixed key order, round-trip exact numbers.
std::string serialize_config(const RunConfig& cfg);
// Hex digest of the canonical form; stamped into every output file.
std::string config_digest(const RunConfig& cfg);
void validate_run_config(const RunConfig& cfg);

// --- commands -----------------------------------------------------------------

struct SynthResult {
    std::string dataset_path;
    std::string csv_path;  // empty unless export_csv
    int scenes = 0;
};

SynthResult cmd_synth(const RunConfig& cfg);

struct TrainResult {
    std::vector<std::string> checkpoint_paths;  // one per sweep seed
    std::vector<std::string> curve_paths;
    std::vector<double> final_loss;
};

// Trains one model per seed in cfg.seeds on the dataset file. Seeds run in
// parallel with the per-seed worker budget split accordingly; outputs are
// seed-scoped files, so the result is independent of scheduling.
TrainResult cmd_train(const RunConfig& cfg);

struct AggregateResult {
    gmm::AggregatePosterior posterior;
    gmm::GaussianMixture flattened;
    double normalization = 0.0;  // mass inside the 6-sigma bounding box
    std::string mixture_path;
    std::string summary_path;
};

// Inference pass over the whole dataset from the checkpoint's fixed slot
// initialization; assembles the aggregate posterior and writes the flattened
// mixture plus a normalization summary.
AggregateResult cmd_aggregate(const RunConfig& cfg, const std::string& checkpoint_path);

struct SweepReport {
    std::vector<std::string> checkpoint_paths;
    std::vector<std::string> checkpoint_digests;
    Tensor smcc;        // symmetric: pairwise both-direction means, 1 on diagonal
    Tensor r2;          // same convention
    Tensor residual;    // aggregate-posterior alignment residual / data scale
    std::vector<double> ari;          // attention argmax vs labels, per run
    std::vector<double> mean_active;  // ARD slot counts at cfg.tau, per run
    double mean_pairwise_smcc = 0.0;
    double mean_pairwise_r2 = 0.0;
    std::string report_path;
};

SweepReport cmd_identifiability(const RunConfig& cfg,
                                const std::vector<std::string>& checkpoint_paths);

struct ArdReport {
    std::vector<int> counts;     // active slots per scene
    std::vector<int> histogram;  // index = active count, 0..K
    int modal_count = 0;
    double mean_active = 0.0;
    double mae = 0.0;      // against the dataset's modes per scene
    double savings = 0.0;  // 1 - decoded slots / (K * M)
    std::string report_path;
};

ArdReport cmd_ard_report(const RunConfig& cfg, const std::string& checkpoint_path);

enum class SampleMode { aggregate, concat };

struct SampleResult {
    std::string path;
    int count = 0;
    int dim = 0;
};

// aggregate: draws from a flattened mixture file. concat: runs one scene
// through the checkpoint and draws slot concatenations from its local
// mixture. Draws are seeded off the config, independent of the mode.
SampleResult cmd_sample(const RunConfig& cfg, const std::string& input_path, int count,
                        SampleMode mode, int scene_index = 0);

struct PlotResult {
    std::string path;
    int panels = 0;
};

// One panel per input: mixture files (.json) become density panels (1D curve
// or 2D heatmap with contour lines), dataset files become labeled scatter
// plots. Self-contained deterministic vector graphics.
PlotResult cmd_plot(const RunConfig& cfg, const std::vector<std::string>& inputs,
                    const std::string& out_path);

// --- equivalence-class construction -------------------------------------------

// Rewrites a checkpoint into another member of its affine equivalence class:
// the map h is composed into the encoder's last layer, its inverse into the
// decoder's first layer, and the slot initialization is carried along. For
// projected variants h must have zero shift (projections conjugate only the
// linear part). Reconstructions are unchanged up to rounding.
nets::Checkpoint make_affine_clone(const nets::Checkpoint& ck, const gmm::DiagAffine& h);

// --- mixture files --------------------------------------------------------------

// Raw parsed mixture file; may hold zero components (plots tolerate that,
// conversion to a GaussianMixture does not).
struct MixtureFile {
    int dim = 0;
    std::vector<double> weights;
    std::vector<std::vector<double>> means;
    std::vector<std::vector<double>> vars;
    std::string config_digest;

    int component_count() const { return static_cast<int>(weights.size()); }
    gmm::GaussianMixture to_mixture() const;
};

void write_mixture_json(const gmm::GaussianMixture& m, const std::string& digest,
                        const std::string& path);
MixtureFile read_mixture_json(const std::string& path);

// --- slot extraction (shared by identifiability and the acceptance suite) ------

// Slot representations per scene from the checkpoint's fixed initialization:
// slot means by default, per-slot Gaussian draws in sample mode.
metrics::SlotBatch extract_slots(const nets::Checkpoint& ck,
                                 const std::vector<synthdata::Scene>& scenes,
                                 psa::SlotSampleMode mode, uint64_t seed);

}  // namespace slotmix::harness
