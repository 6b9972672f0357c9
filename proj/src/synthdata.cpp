#include "slotmix/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "ioutil.hpp"

namespace slotmix::synthdata {

namespace {

constexpr uint64_t kSpecStream = 21;   // make_scene_spec jitter draws
constexpr uint64_t kSceneStream = 22;  // per-scene generation seeds

const char kMagic[9] = "SLMXDAT1";

}  // namespace

void validate_spec(const SceneSpec& spec) {
    require(spec.means.cols == 2, "scene spec: type centers must be 2D");
    require(spec.modes_per_scene >= 1, "scene spec: need at least one mode per scene");
    require(spec.means.rows >= spec.modes_per_scene,
            "scene spec: fewer types than modes per scene");
    require(spec.points_per_mode >= 1, "scene spec: need at least one point per mode");
    require(std::isfinite(spec.variance) && spec.variance > 0.0,
            "scene spec: variance must be positive");
    require(all_finite(spec.means), "scene spec: non-finite type centers");
    require(spec.sampling == ModeSampling::gaussian || spec.sampling == ModeSampling::uniform_disk,
            "scene spec: unknown sampling mode");

    const double min_sep = 4.0 * std::sqrt(spec.variance);
    for (int i = 0; i < spec.means.rows; ++i)
        for (int j = i + 1; j < spec.means.rows; ++j) {
            const double dx = spec.means.at(i, 0) - spec.means.at(j, 0);
            const double dy = spec.means.at(i, 1) - spec.means.at(j, 1);
            require(std::sqrt(dx * dx + dy * dy) >= min_sep,
                    "scene spec: type centers closer than 4 standard deviations");
        }
}

SceneSpec make_scene_spec(uint64_t seed) {
    Rng rng(derive_seed(seed, kSpecStream));
    SceneSpec spec;
    spec.means = Tensor(5, 2);
    for (int i = 0; i < 5; ++i) {
        // base spacing 2pi/5 with jitter below 0.3 rad; the worst-case
        // adjacent chord is 10 sin((2pi/5 - 0.6)/2) > 3.2, above the 4-std
        // separation bound of 2 for variance 0.25
        const double angle =
            2.0 * M_PI * i / 5.0 + 0.3 * (2.0 * rng.uniform() - 1.0);
        spec.means.at(i, 0) = 5.0 * std::cos(angle);
        spec.means.at(i, 1) = 5.0 * std::sin(angle);
    }
    validate_spec(spec);
    return spec;
}

Scene gen_scene(const SceneSpec& spec, Rng& rng) {
    validate_spec(spec);
    const int types = spec.type_count(), chosen = spec.modes_per_scene;
    const int per = spec.points_per_mode, n = spec.points_per_scene();

    // uniform subset: partial Fisher-Yates over the type ids
    std::vector<int> ids(static_cast<size_t>(types));
    std::iota(ids.begin(), ids.end(), 0);
    for (int i = 0; i < chosen; ++i) {
        const int j = i + static_cast<int>(rng.next_below(static_cast<uint64_t>(types - i)));
        std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
    }
    Scene scene;
    scene.active.assign(ids.begin(), ids.begin() + chosen);
    std::sort(scene.active.begin(), scene.active.end());

    const double std_dev = std::sqrt(spec.variance);
    const double disk_radius = 2.0 * std_dev;  // matches the per-coordinate variance
    Tensor block(n, 2);
    std::vector<int> block_labels(static_cast<size_t>(n));
    int row = 0;
    for (int type : scene.active) {
        const double cx = spec.means.at(type, 0), cy = spec.means.at(type, 1);
        for (int p = 0; p < per; ++p, ++row) {
            double x, y;
            if (spec.sampling == ModeSampling::gaussian) {
                x = cx + std_dev * rng.normal();
                y = cy + std_dev * rng.normal();
            } else {
                const double theta = 2.0 * M_PI * rng.uniform();
                const double rad = disk_radius * std::sqrt(rng.uniform());
                x = cx + rad * std::cos(theta);
                y = cy + rad * std::sin(theta);
            }
            block.at(row, 0) = x;
            block.at(row, 1) = y;
            block_labels[static_cast<size_t>(row)] = type;
        }
    }

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    scene.points = Tensor(n, 2);
    scene.labels.assign(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
        const int src = order[static_cast<size_t>(i)];
        scene.points.at(i, 0) = block.at(src, 0);
        scene.points.at(i, 1) = block.at(src, 1);
        scene.labels[static_cast<size_t>(i)] = block_labels[static_cast<size_t>(src)];
    }
    return scene;
}

std::vector<Scene> gen_dataset(const SceneSpec& spec, int m, uint64_t seed, int jobs) {
    validate_spec(spec);
    require(m >= 1, "gen_dataset: need at least one scene");
    std::vector<Scene> scenes(static_cast<size_t>(m));
    parallel_for(m, jobs > 0 ? jobs : default_jobs(), [&](int i) {
        Rng rng(derive_seed(seed, kSceneStream, static_cast<uint64_t>(i)));
        scenes[static_cast<size_t>(i)] = gen_scene(spec, rng);
    });
    return scenes;
}

namespace {

void put_spec(std::ostream& os, const SceneSpec& spec) {
    io::put_tensor(os, spec.means);
    io::put_f64(os, spec.variance);
    io::put_i64(os, spec.modes_per_scene);
    io::put_i64(os, spec.points_per_mode);
    io::put_u8(os, static_cast<uint8_t>(spec.sampling));
}

SceneSpec take_spec(std::istream& is) {
    SceneSpec spec;
    spec.means = io::take_tensor(is);
    spec.variance = io::take_f64(is);
    spec.modes_per_scene = io::take_dim(is);
    spec.points_per_mode = io::take_dim(is);
    const uint8_t sampling = io::take_u8(is);
    require(sampling <= 1, "dataset file: unknown sampling mode");
    spec.sampling = static_cast<ModeSampling>(sampling);
    return spec;
}

}  // namespace

void save_dataset(const SceneSpec& spec, const std::vector<Scene>& scenes,
                  const std::string& path) {
    validate_spec(spec);
    require(!scenes.empty(), "save_dataset: empty dataset");
    const int n = spec.points_per_scene();

    std::ostringstream payload;
    put_spec(payload, spec);
    io::put_u64(payload, scenes.size());
    io::put_i64(payload, n);
    io::put_i64(payload, 2);
    for (const Scene& s : scenes) {
        require(s.points.rows == n && s.points.cols == 2 &&
                    s.labels.size() == static_cast<size_t>(n) &&
                    s.active.size() == static_cast<size_t>(spec.modes_per_scene),
                "save_dataset: scene shape does not match the spec");
        io::put_u64(payload, s.active.size());
        for (int a : s.active) {
            require(a >= 0 && a < spec.type_count(), "save_dataset: label out of vocabulary");
            io::put_u8(payload, static_cast<uint8_t>(a));
        }
        for (double v : s.points.data) io::put_f64(payload, v);
        for (int l : s.labels) {
            require(l >= 0 && l < spec.type_count(), "save_dataset: label out of vocabulary");
            io::put_u8(payload, static_cast<uint8_t>(l));
        }
    }
    const std::string body = payload.str();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), "save_dataset: cannot open " + path);
    os.write(kMagic, 8);
    os.write(body.data(), static_cast<std::streamsize>(body.size()));
    io::put_u64(os, fnv1a64(body.data(), body.size()));
    os.flush();
    require(os.good(), "save_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "load_dataset: cannot open " + path);
    std::ostringstream raw;
    raw << is.rdbuf();
    const std::string all = io::strip_digest_trailer(raw.str());
    require(all.size() >= 16, "load_dataset: file too short");
    require(all.compare(0, 8, kMagic, 8) == 0, "load_dataset: not a dataset file");

    const std::string body = all.substr(8, all.size() - 16);
    std::istringstream footer(all.substr(all.size() - 8));
    require(io::take_u64(footer) == fnv1a64(body.data(), body.size()),
            "load_dataset: checksum mismatch");

    std::istringstream payload(body);
    Dataset ds;
    ds.spec = take_spec(payload);
    validate_spec(ds.spec);
    const uint64_t m = io::take_u64(payload);
    require(m >= 1 && m <= (1 << 24), "load_dataset: scene count out of range");
    const int n = io::take_dim(payload);
    const int d = io::take_dim(payload);
    require(n == ds.spec.points_per_scene() && d == 2,
            "load_dataset: header disagrees with the spec echo");

    ds.scenes.resize(static_cast<size_t>(m));
    for (Scene& s : ds.scenes) {
        const uint64_t active = io::take_u64(payload);
        require(active == static_cast<uint64_t>(ds.spec.modes_per_scene),
                "load_dataset: active type count mismatch");
        s.active.resize(static_cast<size_t>(active));
        for (int& a : s.active) {
            a = io::take_u8(payload);
            require(a < ds.spec.type_count(), "load_dataset: type id out of vocabulary");
        }
        s.points = Tensor(n, 2);
        for (double& v : s.points.data) v = io::take_f64(payload);
        s.labels.resize(static_cast<size_t>(n));
        for (int& l : s.labels) {
            l = io::take_u8(payload);
            require(l < ds.spec.type_count(), "load_dataset: label out of vocabulary");
        }
    }
    require(payload.peek() == std::istringstream::traits_type::eof(),
            "load_dataset: trailing bytes");
    return ds;
}

void export_csv(const std::vector<Scene>& scenes, std::ostream& os) {
    require(!scenes.empty(), "export_csv: empty dataset");
    os << "scene,x,y,label\n";
    for (size_t si = 0; si < scenes.size(); ++si) {
        const Scene& s = scenes[si];
        require(s.points.cols == 2 && s.labels.size() == static_cast<size_t>(s.points.rows),
                "export_csv: malformed scene");
        for (int i = 0; i < s.points.rows; ++i)
            os << si << ',' << fmt_g17(s.points.at(i, 0)) << ',' << fmt_g17(s.points.at(i, 1))
               << ',' << s.labels[static_cast<size_t>(i)] << '\n';
    }
    require(os.good(), "export_csv: write failed");
}

}  // namespace slotmix::synthdata
