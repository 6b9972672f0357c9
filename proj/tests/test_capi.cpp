#include <cstring>
#include <filesystem>
#include <string>

#include "doctest.h"

#include "slotmix.h"

namespace {

std::string paths_of(char* buf) { return std::string(buf); }

}  // namespace

TEST_CASE("version string is present") {
    const char* v = slotmix_version();
    REQUIRE(v != nullptr);
    CHECK(std::strlen(v) > 0);
}

TEST_CASE("config handles set, reject, and serialize") {
    slotmix_config* cfg = slotmix_config_new();
    REQUIRE(cfg != nullptr);

    CHECK(slotmix_config_set(cfg, "epochs", "7") == 0);
    CHECK(slotmix_config_set(cfg, "variant", "valueproj") == 0);

    CHECK(slotmix_config_set(cfg, "nonsense", "1") == 2);
    CHECK(std::strlen(slotmix_last_error()) > 0);
    CHECK(slotmix_config_set(cfg, "epochs", "many") == 2);

    // success clears the sticky error
    CHECK(slotmix_config_set(cfg, "batch", "4") == 0);
    CHECK(std::strlen(slotmix_last_error()) == 0);

    char text[8192];
    const int n = slotmix_config_text(cfg, text, sizeof(text));
    CHECK(n > 0);
    CHECK(n == static_cast<int>(std::strlen(text)));
    CHECK(std::string(text).find("epochs = 7") != std::string::npos);
    CHECK(std::string(text).find("variant = valueproj") != std::string::npos);

    // a tiny buffer still reports the full length and stays terminated
    char tiny[8];
    CHECK(slotmix_config_text(cfg, tiny, sizeof(tiny)) == n);
    CHECK(tiny[7] == '\0');

    slotmix_config_free(cfg);
    slotmix_config_free(nullptr);  // free of null is a no-op
}

TEST_CASE("null config and missing files are contract errors") {
    char buf[256];
    CHECK(slotmix_synth(nullptr, buf, sizeof(buf)) == 2);
    CHECK(std::strlen(slotmix_last_error()) > 0);
    CHECK(slotmix_config_load("no_such_file.cfg") == nullptr);
    CHECK(std::strlen(slotmix_last_error()) > 0);

    slotmix_config* cfg = slotmix_config_new();
    REQUIRE(cfg != nullptr);
    CHECK(slotmix_config_set(cfg, "dataset", "t_capi_missing/absent.bin") == 0);
    CHECK(slotmix_train(cfg, buf, sizeof(buf)) == 2);
    CHECK(slotmix_sample(cfg, "absent.json", 3, "banana", 0, buf, sizeof(buf)) == 2);
    slotmix_config_free(cfg);
}

TEST_CASE("the full pipeline runs through the shared library surface") {
    std::filesystem::remove_all("t_capi_run");
    slotmix_config* cfg = slotmix_config_new();
    REQUIRE(cfg != nullptr);
    REQUIRE(slotmix_config_set(cfg, "dataset", "t_capi_run/ds.bin") == 0);
    REQUIRE(slotmix_config_set(cfg, "out_dir", "t_capi_run/out") == 0);
    REQUIRE(slotmix_config_set(cfg, "scenes", "6") == 0);
    REQUIRE(slotmix_config_set(cfg, "epochs", "2") == 0);
    REQUIRE(slotmix_config_set(cfg, "batch", "4") == 0);
    REQUIRE(slotmix_config_set(cfg, "T", "2") == 0);
    REQUIRE(slotmix_config_set(cfg, "seeds", "1,2") == 0);
    REQUIRE(slotmix_config_set(cfg, "export_csv", "true") == 0);

    char paths[1 << 14];
    REQUIRE(slotmix_synth(cfg, paths, sizeof(paths)) == 0);
    CHECK(paths_of(paths).find("t_capi_run/ds.bin") != std::string::npos);
    CHECK(std::filesystem::exists("t_capi_run/ds.bin"));
    CHECK(std::filesystem::exists("t_capi_run/ds.bin.csv"));

    REQUIRE(slotmix_train(cfg, paths, sizeof(paths)) == 0);
    const std::string train_paths = paths_of(paths);
    CHECK(train_paths.find("checkpoint_seed1.bin") != std::string::npos);
    CHECK(train_paths.find("checkpoint_seed2.bin") != std::string::npos);
    const std::string cp = "t_capi_run/out/checkpoint_seed1.bin";
    REQUIRE(std::filesystem::exists(cp));

    REQUIRE(slotmix_aggregate(cfg, cp.c_str(), paths, sizeof(paths)) == 0);
    const std::string agg_paths = paths_of(paths);
    const size_t nl = agg_paths.find('\n');
    REQUIRE(nl != std::string::npos);
    const std::string mixture_path = agg_paths.substr(0, nl);
    CHECK(std::filesystem::exists(mixture_path));

    const char* cps[2] = {"t_capi_run/out/checkpoint_seed1.bin",
                          "t_capi_run/out/checkpoint_seed2.bin"};
    REQUIRE(slotmix_identifiability(cfg, cps, 2, paths, sizeof(paths)) == 0);
    CHECK(std::filesystem::exists(paths_of(paths)));

    REQUIRE(slotmix_ard_report(cfg, cp.c_str(), paths, sizeof(paths)) == 0);
    CHECK(std::filesystem::exists(paths_of(paths)));

    REQUIRE(slotmix_sample(cfg, mixture_path.c_str(), 5, "aggregate", 0, paths, sizeof(paths)) == 0);
    CHECK(std::filesystem::exists(paths_of(paths)));
    REQUIRE(slotmix_sample(cfg, cp.c_str(), 5, "concat", 1, paths, sizeof(paths)) == 0);

    const char* inputs[2] = {mixture_path.c_str(), "t_capi_run/ds.bin"};
    REQUIRE(slotmix_plot(cfg, inputs, 2, "t_capi_run/out/plot.svg", paths, sizeof(paths)) == 0);
    CHECK(std::filesystem::exists("t_capi_run/out/plot.svg"));

    slotmix_config_free(cfg);
}
