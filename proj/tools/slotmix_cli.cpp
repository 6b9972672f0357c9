// Command-line front end. Talks to the library exclusively through the C API
// so the shared library is the single integration surface.
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "slotmix.h"

namespace {

struct ConfigArgs {
    std::string config_path;
    std::vector<std::string> sets;  // key=value overrides, applied last
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.config_path, "key = value configuration file")
        ->check(CLI::ExistingFile);
    cmd->add_option("--set", args.sets, "override one configuration key (key=value, repeatable)");
}

// File first, then --set overrides in command-line order. Throws the exit
// code on failure.
slotmix_config* build_config(const ConfigArgs& args) {
    slotmix_config* cfg =
        args.config_path.empty() ? slotmix_config_new() : slotmix_config_load(args.config_path.c_str());
    if (cfg == nullptr) {
        std::fprintf(stderr, "error: %s\n", slotmix_last_error());
        throw 2;
    }
    for (const std::string& kv : args.sets) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
            slotmix_config_free(cfg);
            throw 2;
        }
        const std::string key = kv.substr(0, eq);
        const std::string value = kv.substr(eq + 1);
        if (slotmix_config_set(cfg, key.c_str(), value.c_str()) != 0) {
            std::fprintf(stderr, "error: %s\n", slotmix_last_error());
            slotmix_config_free(cfg);
            throw 2;
        }
    }
    return cfg;
}

int finish(slotmix_config* cfg, int rc, const std::string& paths) {
    slotmix_config_free(cfg);
    if (rc != 0) {
        std::fprintf(stderr, "error: %s\n", slotmix_last_error());
        return rc;
    }
    if (!paths.empty()) std::printf("%s\n", paths.c_str());
    return 0;
}

std::vector<const char*> c_strings(const std::vector<std::string>& v) {
    std::vector<const char*> out;
    out.reserve(v.size());
    for (const std::string& s : v) out.push_back(s.c_str());
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"probabilistic slot attention experiment harness"};
    app.require_subcommand(1);
    app.set_version_flag("--version", slotmix_version());

    char paths[1 << 16];

    ConfigArgs synth_args;
    bool synth_csv = false;
    std::string synth_scenes, synth_dataset;
    CLI::App* synth = app.add_subcommand("synth", "generate the synthetic dataset");
    add_config_options(synth, synth_args);
    synth->add_option("--scenes", synth_scenes, "number of scenes");
    synth->add_option("--dataset", synth_dataset, "dataset output path");
    synth->add_flag("--export-csv", synth_csv, "also write a CSV view");

    ConfigArgs train_args;
    std::string train_seeds, train_epochs, train_dataset, train_out;
    CLI::App* train = app.add_subcommand("train", "train one model per sweep seed");
    add_config_options(train, train_args);
    train->add_option("--seeds", train_seeds, "comma list of sweep seeds");
    train->add_option("--epochs", train_epochs, "training epochs");
    train->add_option("--dataset", train_dataset, "dataset path");
    train->add_option("--out-dir", train_out, "output directory");

    ConfigArgs agg_args;
    std::string agg_checkpoint;
    CLI::App* agg = app.add_subcommand("aggregate", "export the aggregate posterior mixture");
    add_config_options(agg, agg_args);
    agg->add_option("checkpoint", agg_checkpoint, "checkpoint file")->required();

    ConfigArgs ident_args;
    std::vector<std::string> ident_checkpoints;
    CLI::App* ident =
        app.add_subcommand("identifiability", "cross-run identifiability sweep report");
    add_config_options(ident, ident_args);
    ident->add_option("checkpoints", ident_checkpoints, "two or more checkpoint files")
        ->required()
        ->expected(-2);

    ConfigArgs ard_args;
    std::string ard_checkpoint, ard_tau;
    CLI::App* ard = app.add_subcommand("ard-report", "active-slot statistics report");
    add_config_options(ard, ard_args);
    ard->add_option("checkpoint", ard_checkpoint, "checkpoint file")->required();
    ard->add_option("--tau", ard_tau, "pruning threshold");

    ConfigArgs sample_args;
    std::string sample_input, sample_mode = "aggregate";
    int sample_count = 1000, sample_scene = 0;
    CLI::App* sample = app.add_subcommand("sample", "draw from a mixture file or checkpoint");
    add_config_options(sample, sample_args);
    sample->add_option("input", sample_input, "mixture file (aggregate) or checkpoint (concat)")
        ->required();
    sample->add_option("--count", sample_count, "number of draws");
    sample->add_option("--mode", sample_mode, "aggregate or concat");
    sample->add_option("--scene", sample_scene, "scene index for concat mode");

    ConfigArgs plot_args;
    std::vector<std::string> plot_inputs;
    std::string plot_out = "out/plot.svg";
    CLI::App* plot = app.add_subcommand("plot", "render mixture and dataset panels");
    add_config_options(plot, plot_args);
    plot->add_option("inputs", plot_inputs, "mixture or dataset files")->required()->expected(-1);
    plot->add_option("--out", plot_out, "output file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (synth->parsed()) {
            ConfigArgs args = synth_args;
            if (!synth_scenes.empty()) args.sets.push_back("scenes=" + synth_scenes);
            if (!synth_dataset.empty()) args.sets.push_back("dataset=" + synth_dataset);
            if (synth_csv) args.sets.push_back("export_csv=true");
            slotmix_config* cfg = build_config(args);
            return finish(cfg, slotmix_synth(cfg, paths, sizeof(paths)), paths);
        }
        if (train->parsed()) {
            ConfigArgs args = train_args;
            if (!train_seeds.empty()) args.sets.push_back("seeds=" + train_seeds);
            if (!train_epochs.empty()) args.sets.push_back("epochs=" + train_epochs);
            if (!train_dataset.empty()) args.sets.push_back("dataset=" + train_dataset);
            if (!train_out.empty()) args.sets.push_back("out_dir=" + train_out);
            slotmix_config* cfg = build_config(args);
            return finish(cfg, slotmix_train(cfg, paths, sizeof(paths)), paths);
        }
        if (agg->parsed()) {
            slotmix_config* cfg = build_config(agg_args);
            return finish(cfg, slotmix_aggregate(cfg, agg_checkpoint.c_str(), paths, sizeof(paths)),
                          paths);
        }
        if (ident->parsed()) {
            slotmix_config* cfg = build_config(ident_args);
            const std::vector<const char*> cps = c_strings(ident_checkpoints);
            return finish(cfg,
                          slotmix_identifiability(cfg, cps.data(), cps.size(), paths, sizeof(paths)),
                          paths);
        }
        if (ard->parsed()) {
            ConfigArgs args = ard_args;
            if (!ard_tau.empty()) args.sets.push_back("tau=" + ard_tau);
            slotmix_config* cfg = build_config(args);
            return finish(cfg, slotmix_ard_report(cfg, ard_checkpoint.c_str(), paths, sizeof(paths)),
                          paths);
        }
        if (sample->parsed()) {
            slotmix_config* cfg = build_config(sample_args);
            return finish(cfg,
                          slotmix_sample(cfg, sample_input.c_str(), sample_count,
                                         sample_mode.c_str(), sample_scene, paths, sizeof(paths)),
                          paths);
        }
        if (plot->parsed()) {
            slotmix_config* cfg = build_config(plot_args);
            const std::vector<const char*> in = c_strings(plot_inputs);
            return finish(cfg,
                          slotmix_plot(cfg, in.data(), in.size(), plot_out.c_str(), paths,
                                       sizeof(paths)),
                          paths);
        }
    } catch (int rc) {
        return rc;
    }
    return 2;
}
