#include "slotmix.h"

#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "slotmix/harness.hpp"

using slotmix::harness::RunConfig;

struct slotmix_config {
    RunConfig cfg;
};

namespace {

thread_local std::string g_error;

int guarded(const std::function<void()>& fn) {
    try {
        fn();
        g_error.clear();
        return 0;
    } catch (const slotmix::contract_error& e) {
        g_error = e.what();
        return 2;
    } catch (const slotmix::numeric_error& e) {
        g_error = e.what();
        return 3;
    } catch (const std::exception& e) {
        g_error = e.what();
        return 3;
    }
}

size_t copy_out(const std::string& s, char* buf, size_t cap) {
    if (buf != nullptr && cap > 0) {
        const size_t n = s.size() < cap - 1 ? s.size() : cap - 1;
        std::memcpy(buf, s.data(), n);
        buf[n] = '\0';
    }
    return s.size();
}

std::string join_lines(const std::vector<std::string>& parts) {
    std::string out;
    for (const std::string& p : parts) {
        if (p.empty()) continue;
        if (!out.empty()) out += "\n";
        out += p;
    }
    return out;
}

int run_command(const slotmix_config* cfg, char* paths, size_t cap,
                const std::function<std::vector<std::string>(const RunConfig&)>& fn) {
    if (cfg == nullptr) {
        g_error = "null config";
        return 2;
    }
    std::vector<std::string> written;
    const int rc = guarded([&] { written = fn(cfg->cfg); });
    if (rc == 0) copy_out(join_lines(written), paths, cap);
    return rc;
}

}  // namespace

extern "C" {

const char* slotmix_version(void) { return "slotmix 1.0.0"; }

const char* slotmix_last_error(void) { return g_error.c_str(); }

slotmix_config* slotmix_config_new(void) {
    slotmix_config* out = nullptr;
    guarded([&] { out = new slotmix_config(); });
    return out;
}

slotmix_config* slotmix_config_load(const char* path) {
    slotmix_config* out = nullptr;
    const int rc = guarded([&] {
        slotmix::require(path != nullptr, "null path");
        RunConfig cfg = slotmix::harness::load_config(path);
        out = new slotmix_config{std::move(cfg)};
    });
    return rc == 0 ? out : nullptr;
}

void slotmix_config_free(slotmix_config* cfg) { delete cfg; }

int slotmix_config_set(slotmix_config* cfg, const char* key, const char* value) {
    return guarded([&] {
        slotmix::require(cfg != nullptr && key != nullptr && value != nullptr,
                         "null config, key, or value");
        slotmix::harness::apply_override(cfg->cfg, key, value);
    });
}

size_t slotmix_config_text(const slotmix_config* cfg, char* buf, size_t cap) {
    if (cfg == nullptr) {
        g_error = "null config";
        return copy_out("", buf, cap);
    }
    return copy_out(slotmix::harness::serialize_config(cfg->cfg), buf, cap);
}

int slotmix_synth(const slotmix_config* cfg, char* paths, size_t cap) {
    return run_command(cfg, paths, cap, [](const RunConfig& rc) {
        const auto res = slotmix::harness::cmd_synth(rc);
        return std::vector<std::string>{res.dataset_path, res.csv_path};
    });
}

int slotmix_train(const slotmix_config* cfg, char* paths, size_t cap) {
    return run_command(cfg, paths, cap, [](const RunConfig& rc) {
        const auto res = slotmix::harness::cmd_train(rc);
        std::vector<std::string> out = res.checkpoint_paths;
        out.insert(out.end(), res.curve_paths.begin(), res.curve_paths.end());
        return out;
    });
}

int slotmix_aggregate(const slotmix_config* cfg, const char* checkpoint, char* paths, size_t cap) {
    return run_command(cfg, paths, cap, [&](const RunConfig& rc) {
        slotmix::require(checkpoint != nullptr, "null checkpoint path");
        const auto res = slotmix::harness::cmd_aggregate(rc, checkpoint);
        return std::vector<std::string>{res.mixture_path, res.summary_path};
    });
}

int slotmix_identifiability(const slotmix_config* cfg, const char* const* checkpoints, size_t count,
                            char* paths, size_t cap) {
    return run_command(cfg, paths, cap, [&](const RunConfig& rc) {
        slotmix::require(checkpoints != nullptr, "null checkpoint list");
        std::vector<std::string> cps;
        for (size_t i = 0; i < count; ++i) {
            slotmix::require(checkpoints[i] != nullptr, "null checkpoint path");
            cps.emplace_back(checkpoints[i]);
        }
        const auto res = slotmix::harness::cmd_identifiability(rc, cps);
        return std::vector<std::string>{res.report_path};
    });
}

int slotmix_ard_report(const slotmix_config* cfg, const char* checkpoint, char* paths, size_t cap) {
    return run_command(cfg, paths, cap, [&](const RunConfig& rc) {
        slotmix::require(checkpoint != nullptr, "null checkpoint path");
        const auto res = slotmix::harness::cmd_ard_report(rc, checkpoint);
        return std::vector<std::string>{res.report_path};
    });
}

int slotmix_sample(const slotmix_config* cfg, const char* input, int count, const char* mode,
                   int scene_index, char* paths, size_t cap) {
    return run_command(cfg, paths, cap, [&](const RunConfig& rc) {
        slotmix::require(input != nullptr && mode != nullptr, "null input or mode");
        slotmix::harness::SampleMode m;
        if (std::strcmp(mode, "aggregate") == 0) m = slotmix::harness::SampleMode::aggregate;
        else if (std::strcmp(mode, "concat") == 0) m = slotmix::harness::SampleMode::concat;
        else throw slotmix::contract_error("sample mode must be 'aggregate' or 'concat'");
        const auto res = slotmix::harness::cmd_sample(rc, input, count, m, scene_index);
        return std::vector<std::string>{res.path};
    });
}

int slotmix_plot(const slotmix_config* cfg, const char* const* inputs, size_t count,
                 const char* out_path, char* paths, size_t cap) {
    return run_command(cfg, paths, cap, [&](const RunConfig& rc) {
        slotmix::require(inputs != nullptr && out_path != nullptr, "null inputs or output path");
        std::vector<std::string> in;
        for (size_t i = 0; i < count; ++i) {
            slotmix::require(inputs[i] != nullptr, "null input path");
            in.emplace_back(inputs[i]);
        }
        const auto res = slotmix::harness::cmd_plot(rc, in, out_path);
        return std::vector<std::string>{res.path};
    });
}

}  // extern "C"
