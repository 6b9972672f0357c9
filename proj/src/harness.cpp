#include "slotmix/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "ioutil.hpp"

namespace fs = std::filesystem;

namespace slotmix::harness {

namespace {

// --- config text ----------------------------------------------------------------

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> parts;
    size_t start = 0;
    while (true) {
        size_t comma = s.find(',', start);
        parts.push_back(trim(s.substr(start, comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return parts;
}

int64_t parse_int(const std::string& key, const std::string& s) {
    try {
        size_t pos = 0;
        const int64_t v = std::stoll(s, &pos);
        require(pos == s.size(), "config: trailing characters in integer for " + key);
        return v;
    } catch (const contract_error&) {
        throw;
    } catch (const std::exception&) {
        throw contract_error("config: bad integer '" + s + "' for " + key);
    }
}

uint64_t parse_u64(const std::string& key, const std::string& s) {
    try {
        size_t pos = 0;
        require(s.empty() || s[0] != '-', "config: negative value for " + key);
        const uint64_t v = std::stoull(s, &pos);
        require(pos == s.size(), "config: trailing characters in integer for " + key);
        return v;
    } catch (const contract_error&) {
        throw;
    } catch (const std::exception&) {
        throw contract_error("config: bad integer '" + s + "' for " + key);
    }
}

double parse_double(const std::string& key, const std::string& s) {
    try {
        size_t pos = 0;
        const double v = std::stod(s, &pos);
        require(pos == s.size(), "config: trailing characters in number for " + key);
        return v;
    } catch (const contract_error&) {
        throw;
    } catch (const std::exception&) {
        throw contract_error("config: bad number '" + s + "' for " + key);
    }
}

bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw contract_error("config: bad boolean '" + s + "' for " + key);
}

int parse_bounded(const std::string& key, const std::string& s, int64_t lo, int64_t hi) {
    const int64_t v = parse_int(key, s);
    require(v >= lo && v <= hi, "config: " + key + " out of range");
    return static_cast<int>(v);
}

std::vector<int> parse_int_list(const std::string& key, const std::string& s) {
    std::vector<int> out;
    for (const std::string& p : split_csv(s)) out.push_back(parse_bounded(key, p, 0, 1 << 20));
    return out;
}

std::vector<uint64_t> parse_u64_list(const std::string& key, const std::string& s) {
    std::vector<uint64_t> out;
    for (const std::string& p : split_csv(s)) out.push_back(parse_u64(key, p));
    return out;
}

const char* variant_name(psa::Variant v) {
    switch (v) {
        case psa::Variant::Base: return "base";
        case psa::Variant::Proj: return "proj";
        case psa::Variant::ValueProj: return "valueproj";
    }
    throw contract_error("config: unknown variant value");
}

psa::Variant parse_variant(const std::string& s) {
    if (s == "base") return psa::Variant::Base;
    if (s == "proj") return psa::Variant::Proj;
    if (s == "valueproj") return psa::Variant::ValueProj;
    throw contract_error("config: unknown variant '" + s + "'");
}

const char* recombiner_name(nets::Recombiner r) {
    return r == nets::Recombiner::mixed ? "mixed" : "additive";
}

nets::Recombiner parse_recombiner(const std::string& s) {
    if (s == "mixed") return nets::Recombiner::mixed;
    if (s == "additive") return nets::Recombiner::additive;
    throw contract_error("config: unknown recombiner '" + s + "'");
}

const char* sampling_name(synthdata::ModeSampling m) {
    return m == synthdata::ModeSampling::gaussian ? "gaussian" : "uniform_disk";
}

synthdata::ModeSampling parse_sampling(const std::string& s) {
    if (s == "gaussian") return synthdata::ModeSampling::gaussian;
    if (s == "uniform_disk") return synthdata::ModeSampling::uniform_disk;
    throw contract_error("config: unknown sampling '" + s + "'");
}

const char* aggregate_mode_name(gmm::AggregateMode m) {
    return m == gmm::AggregateMode::dirac ? "dirac" : "gaussian";
}

gmm::AggregateMode parse_aggregate_mode(const std::string& s) {
    if (s == "dirac") return gmm::AggregateMode::dirac;
    if (s == "gaussian") return gmm::AggregateMode::gaussian;
    throw contract_error("config: unknown aggregate_mode '" + s + "'");
}

const char* extraction_name(psa::SlotSampleMode m) {
    return m == psa::SlotSampleMode::mean ? "mean" : "sample";
}

psa::SlotSampleMode parse_extraction(const std::string& s) {
    if (s == "mean") return psa::SlotSampleMode::mean;
    if (s == "sample") return psa::SlotSampleMode::sample;
    throw contract_error("config: unknown extraction '" + s + "'");
}

template <class T>
std::string join_list(const std::vector<T>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

// --- filesystem -----------------------------------------------------------------

void ensure_dir(const std::string& dir) {
    if (dir.empty()) return;
    try {
        fs::create_directories(dir);
    } catch (const fs::filesystem_error& e) {
        throw contract_error("cannot create output directory '" + dir + "': " + e.what());
    }
}

void ensure_parent_dir(const std::string& path) {
    ensure_dir(fs::path(path).parent_path().string());
}

std::string out_file(const RunConfig& cfg, const std::string& name) {
    return (fs::path(cfg.out_dir) / name).string();
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "cannot open " + path);
    std::ostringstream raw;
    raw << is.rdbuf();
    return raw.str();
}

void finish_text_file(std::ofstream& os, const std::string& digest, const std::string& path) {
    os << "# config = " << digest << "\n";
    os.flush();
    require(os.good(), "write failed for " + path);
}

// --- shared inference pass -------------------------------------------------------

std::vector<Tensor> scene_points(const synthdata::Dataset& ds) {
    std::vector<Tensor> out;
    out.reserve(ds.scenes.size());
    for (const synthdata::Scene& s : ds.scenes) out.push_back(s.points);
    return out;
}

int resolve_jobs(int jobs) { return jobs > 0 ? jobs : default_jobs(); }

// Everything one checkpoint produces over a dataset in a single inference
// sweep: the local mixtures and scene encodings feeding the aggregate
// posterior, slot means for the identifiability metrics, attention cluster
// agreement, and active-slot counts at the pruning threshold.
struct InferenceSweep {
    std::vector<gmm::GaussianMixture> locals;
    std::vector<gmm::Encoding> encodings;
    metrics::SlotBatch means;
    std::vector<double> scene_ari;
    std::vector<int> active_counts;
};

InferenceSweep run_inference(const nets::Checkpoint& ck, const synthdata::Dataset& ds,
                             double tau, int jobs) {
    require(ck.encoder.in_dim() == 2, "checkpoint encoder does not accept 2-d points");
    const int m = static_cast<int>(ds.scenes.size());
    InferenceSweep sweep;
    sweep.locals.resize(static_cast<size_t>(m));
    sweep.encodings.resize(static_cast<size_t>(m));
    sweep.means.slots.resize(static_cast<size_t>(m));
    sweep.scene_ari.resize(static_cast<size_t>(m));
    sweep.active_counts.resize(static_cast<size_t>(m));
    parallel_for(m, resolve_jobs(jobs), [&](int i) {
        const synthdata::Scene& scene = ds.scenes[static_cast<size_t>(i)];
        const Tensor z = nets::net_forward(ck.encoder, scene.points);
        const psa::ForwardResult fr =
            psa::forward_from(z, ck.psa_params, ck.slot_init, ck.config.T);
        sweep.locals[static_cast<size_t>(i)] = fr.local;
        sweep.means.slots[static_cast<size_t>(i)] = fr.state.mu;

        // Scene encoding: moment-matched Gaussian of the latent cloud
        // (population variance). The dirac mode ignores the contents.
        gmm::Encoding& enc = sweep.encodings[static_cast<size_t>(i)];
        enc.mean.assign(static_cast<size_t>(z.cols), 0.0);
        enc.var.assign(static_cast<size_t>(z.cols), 0.0);
        for (int r = 0; r < z.rows; ++r)
            for (int c = 0; c < z.cols; ++c) enc.mean[static_cast<size_t>(c)] += z.at(r, c);
        for (double& v : enc.mean) v /= z.rows;
        for (int r = 0; r < z.rows; ++r)
            for (int c = 0; c < z.cols; ++c) {
                const double dlt = z.at(r, c) - enc.mean[static_cast<size_t>(c)];
                enc.var[static_cast<size_t>(c)] += dlt * dlt;
            }
        for (double& v : enc.var) v /= z.rows;

        std::vector<int> pred(static_cast<size_t>(fr.attention.A.rows), 0);
        for (int r = 0; r < fr.attention.A.rows; ++r) {
            int best = 0;
            for (int k = 1; k < fr.attention.A.cols; ++k)
                if (fr.attention.A.at(r, k) > fr.attention.A.at(r, best)) best = k;
            pred[static_cast<size_t>(r)] = best;
        }
        sweep.scene_ari[static_cast<size_t>(i)] = metrics::ari(pred, scene.labels);

        const psa::SlotSet pruned = psa::ard_prune(fr.state, tau);
        int active = 0;
        for (bool b : pruned.active) active += b ? 1 : 0;
        sweep.active_counts[static_cast<size_t>(i)] = active;
    });
    return sweep;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// --- mixture mass ---------------------------------------------------------------

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Mass inside the mixture's own bounding box (every component's mean plus or
// minus `radius` standard deviations): sum of weighted per-coordinate interval
// probabilities, closed form.
double box_mass(const gmm::GaussianMixture& m, double radius, std::vector<double>* lo_out,
                std::vector<double>* hi_out) {
    const int d = m.dim();
    std::vector<double> lo(static_cast<size_t>(d), std::numeric_limits<double>::infinity());
    std::vector<double> hi(static_cast<size_t>(d), -std::numeric_limits<double>::infinity());
    for (const gmm::DiagGaussian& g : m.components)
        for (int j = 0; j < d; ++j) {
            const double s = std::sqrt(g.var[static_cast<size_t>(j)]);
            lo[static_cast<size_t>(j)] =
                std::min(lo[static_cast<size_t>(j)], g.mean[static_cast<size_t>(j)] - radius * s);
            hi[static_cast<size_t>(j)] =
                std::max(hi[static_cast<size_t>(j)], g.mean[static_cast<size_t>(j)] + radius * s);
        }
    double mass = 0.0;
    for (int k = 0; k < m.component_count(); ++k) {
        const gmm::DiagGaussian& g = m.components[static_cast<size_t>(k)];
        double p = 1.0;
        for (int j = 0; j < d; ++j) {
            const double s = std::sqrt(g.var[static_cast<size_t>(j)]);
            p *= normal_cdf((hi[static_cast<size_t>(j)] - g.mean[static_cast<size_t>(j)]) / s) -
                 normal_cdf((lo[static_cast<size_t>(j)] - g.mean[static_cast<size_t>(j)]) / s);
        }
        mass += m.weights[static_cast<size_t>(k)] * p;
    }
    if (lo_out) *lo_out = lo;
    if (hi_out) *hi_out = hi;
    return mass;
}

// --- aggregate alignment ----------------------------------------------------------

// Per-checkpoint view of the aggregate posterior used for cross-run
// alignment: component means per scene, their weights, and the weighted
// spread of the whole component cloud.
struct AggEval {
    std::vector<Tensor> comp_means;  // per scene: K x d
    Tensor pi_hat;                   // M x K
    double scale = 0.0;
};

AggEval agg_eval(const InferenceSweep& sweep, gmm::AggregateMode mode, double alpha) {
    const gmm::AggregatePosterior post =
        gmm::aggregate_posterior(sweep.locals, sweep.encodings, mode, alpha);
    AggEval ev;
    ev.pi_hat = post.pi_hat;
    const int m = post.datapoint_count();
    const int k = post.local_component_count();
    const int d = post.locals.empty() ? 0 : post.locals[0].dim();
    ev.comp_means.resize(static_cast<size_t>(m));
    std::vector<double> centroid(static_cast<size_t>(d), 0.0);
    double wsum = 0.0;
    for (int i = 0; i < m; ++i) {
        Tensor& t = ev.comp_means[static_cast<size_t>(i)];
        t = Tensor(k, d);
        for (int s = 0; s < k; ++s) {
            const gmm::DiagGaussian& g = post.locals[static_cast<size_t>(i)].components[static_cast<size_t>(s)];
            const double w = post.pi_hat.at(i, s);
            wsum += w;
            for (int j = 0; j < d; ++j) {
                t.at(s, j) = g.mean[static_cast<size_t>(j)];
                centroid[static_cast<size_t>(j)] += w * g.mean[static_cast<size_t>(j)];
            }
        }
    }
    require_numeric(wsum > 0.0, "aggregate alignment: zero total component weight");
    for (double& c : centroid) c /= wsum;
    double spread = 0.0;
    for (int i = 0; i < m; ++i)
        for (int s = 0; s < k; ++s) {
            double q = 0.0;
            for (int j = 0; j < d; ++j) {
                const double dlt =
                    ev.comp_means[static_cast<size_t>(i)].at(s, j) - centroid[static_cast<size_t>(j)];
                q += dlt * dlt;
            }
            spread += ev.pi_hat.at(i, s) * q;
        }
    ev.scale = std::sqrt(spread / wsum);
    return ev;
}

struct WeightedFit {
    Tensor A;  // d x d, applied on the right
    Tensor c;  // 1 x d
};

// Weighted least squares y ~ x A + c. Centering against the weighted means
// eliminates the intercept; the d x d normal equations are solved directly.
WeightedFit weighted_affine_fit(const Tensor& x, const Tensor& y, const std::vector<double>& w) {
    require(x.rows == y.rows && x.cols == y.cols && x.rows == static_cast<int>(w.size()),
            "weighted fit: shape mismatch");
    const int n = x.rows, d = x.cols;
    double wsum = 0.0;
    for (double v : w) {
        require(std::isfinite(v) && v >= 0.0, "weighted fit: bad weight");
        wsum += v;
    }
    require(wsum > 0.0, "weighted fit: zero total weight");

    std::vector<double> xbar(static_cast<size_t>(d), 0.0), ybar(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            xbar[static_cast<size_t>(j)] += w[static_cast<size_t>(i)] * x.at(i, j);
            ybar[static_cast<size_t>(j)] += w[static_cast<size_t>(i)] * y.at(i, j);
        }
    for (double& v : xbar) v /= wsum;
    for (double& v : ybar) v /= wsum;

    Tensor gram(d, d), rhs(d, d);
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < d; ++a) {
            const double xa = x.at(i, a) - xbar[static_cast<size_t>(a)];
            for (int b = 0; b < d; ++b) {
                gram.at(a, b) += w[static_cast<size_t>(i)] * xa *
                                 (x.at(i, b) - xbar[static_cast<size_t>(b)]);
                rhs.at(a, b) += w[static_cast<size_t>(i)] * xa *
                                (y.at(i, b) - ybar[static_cast<size_t>(b)]);
            }
        }

    double diag_max = 1.0;
    for (int a = 0; a < d; ++a) diag_max = std::max(diag_max, std::abs(gram.at(a, a)));

    const auto solve = [d](Tensor g, Tensor r, double pivot_floor, Tensor& out) {
        for (int col = 0; col < d; ++col) {
            int piv = col;
            for (int rr = col + 1; rr < d; ++rr)
                if (std::abs(g.at(rr, col)) > std::abs(g.at(piv, col))) piv = rr;
            if (std::abs(g.at(piv, col)) <= pivot_floor) return false;
            if (piv != col)
                for (int j = 0; j < d; ++j) {
                    std::swap(g.at(piv, j), g.at(col, j));
                    std::swap(r.at(piv, j), r.at(col, j));
                }
            for (int rr = col + 1; rr < d; ++rr) {
                const double f = g.at(rr, col) / g.at(col, col);
                for (int j = col; j < d; ++j) g.at(rr, j) -= f * g.at(col, j);
                for (int j = 0; j < d; ++j) r.at(rr, j) -= f * r.at(col, j);
            }
        }
        out = Tensor(d, d);
        for (int j = 0; j < d; ++j)
            for (int rr = d - 1; rr >= 0; --rr) {
                double v = r.at(rr, j);
                for (int cc = rr + 1; cc < d; ++cc) v -= g.at(rr, cc) * out.at(cc, j);
                out.at(rr, j) = v / g.at(rr, rr);
            }
        return all_finite(out);
    };

    WeightedFit fit;
    if (!solve(gram, rhs, 1e-12 * diag_max, fit.A)) {
        Tensor ridged = gram;
        for (int a = 0; a < d; ++a) ridged.at(a, a) += 1e-8 * diag_max;
        require_numeric(solve(ridged, rhs, 0.0, fit.A),
                        "weighted fit: singular normal equations");
    }
    fit.c = Tensor(1, d);
    for (int j = 0; j < d; ++j) {
        double v = ybar[static_cast<size_t>(j)];
        for (int i = 0; i < d; ++i) v -= xbar[static_cast<size_t>(i)] * fit.A.at(i, j);
        fit.c.at(0, j) = v;
    }
    return fit;
}

// Residual of mapping b's aggregate component cloud onto a's, as a fraction
// of a's cloud spread. The initial slot-level fit seeds a per-scene matching;
// one weighted refit on the matched raw means gives the reported map.
double alignment_residual(const AggEval& a, const AggEval& b, const metrics::AffineFit& b_to_a) {
    const int m = static_cast<int>(a.comp_means.size());
    require(m == static_cast<int>(b.comp_means.size()),
            "aggregate alignment: scene count mismatch");
    require(m >= 1, "aggregate alignment: empty");
    const int k = a.comp_means[0].rows;
    const int d = a.comp_means[0].cols;
    require(k == b.comp_means[0].rows && d == b.comp_means[0].cols,
            "aggregate alignment: shape mismatch");

    Tensor xs(m * k, d), ys(m * k, d);
    std::vector<double> ws(static_cast<size_t>(m) * static_cast<size_t>(k), 0.0);
    for (int i = 0; i < m; ++i) {
        const Tensor mapped = metrics::affine_apply(b_to_a, b.comp_means[static_cast<size_t>(i)]);
        Tensor cost(k, k);
        for (int ka = 0; ka < k; ++ka)
            for (int kb = 0; kb < k; ++kb) {
                double q = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double dlt =
                        a.comp_means[static_cast<size_t>(i)].at(ka, j) - mapped.at(kb, j);
                    q += dlt * dlt;
                }
                cost.at(ka, kb) = q;
            }
        const metrics::Matching match = metrics::hungarian(cost);
        for (int ka = 0; ka < k; ++ka) {
            const int kb = match.perm[static_cast<size_t>(ka)];
            const int row = i * k + ka;
            for (int j = 0; j < d; ++j) {
                xs.at(row, j) = b.comp_means[static_cast<size_t>(i)].at(kb, j);
                ys.at(row, j) = a.comp_means[static_cast<size_t>(i)].at(ka, j);
            }
            ws[static_cast<size_t>(row)] =
                0.5 * (a.pi_hat.at(i, ka) + b.pi_hat.at(i, kb));
        }
    }

    const WeightedFit fit = weighted_affine_fit(xs, ys, ws);
    double wsum = 0.0, err = 0.0;
    for (int row = 0; row < xs.rows; ++row) {
        double q = 0.0;
        for (int j = 0; j < d; ++j) {
            double v = fit.c.at(0, j);
            for (int i2 = 0; i2 < d; ++i2) v += xs.at(row, i2) * fit.A.at(i2, j);
            const double dlt = ys.at(row, j) - v;
            q += dlt * dlt;
        }
        err += ws[static_cast<size_t>(row)] * q;
        wsum += ws[static_cast<size_t>(row)];
    }
    require_numeric(wsum > 0.0, "aggregate alignment: zero total weight");
    const double rms = std::sqrt(err / wsum);
    return rms / std::max(a.scale, 1e-300);
}

}  // namespace

// --- config ---------------------------------------------------------------------

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    nets::TrainConfig& t = cfg.train;
    if (key == "lr") t.lr = parse_double(key, value);
    else if (key == "beta1") t.beta1 = parse_double(key, value);
    else if (key == "beta2") t.beta2 = parse_double(key, value);
    else if (key == "epochs") t.epochs = parse_bounded(key, value, 0, 1 << 24);
    else if (key == "batch") t.batch = parse_bounded(key, value, 1, 1 << 24);
    else if (key == "T") t.T = parse_bounded(key, value, 1, 1 << 20);
    else if (key == "K") t.K = parse_bounded(key, value, 1, 1 << 20);
    else if (key == "d") t.d = parse_bounded(key, value, 1, 1 << 20);
    else if (key == "variant") t.variant = parse_variant(value);
    else if (key == "slope") t.slope = parse_double(key, value);
    else if (key == "encoder_widths") t.encoder_widths = parse_int_list(key, value);
    else if (key == "decoder_widths") t.decoder_widths = parse_int_list(key, value);
    else if (key == "recombiner") t.recombiner = parse_recombiner(value);
    else if (key == "jobs") t.jobs = parse_bounded(key, value, 0, 4096);
    else if (key == "seed") t.seed = parse_u64(key, value);
    else if (key == "dataset") cfg.dataset = value;
    else if (key == "scenes") cfg.scenes = parse_bounded(key, value, 1, 1 << 24);
    else if (key == "data_seed") cfg.data_seed = parse_u64(key, value);
    else if (key == "sampling") cfg.sampling = parse_sampling(value);
    else if (key == "export_csv") cfg.export_csv = parse_bool(key, value);
    else if (key == "seeds") cfg.seeds = parse_u64_list(key, value);
    else if (key == "tau") cfg.tau = parse_double(key, value);
    else if (key == "aggregate_mode") cfg.aggregate_mode = parse_aggregate_mode(value);
    else if (key == "alpha") cfg.alpha = parse_double(key, value);
    else if (key == "extraction") cfg.extraction = parse_extraction(value);
    else if (key == "grid") cfg.grid = parse_bounded(key, value, 8, 4096);
    else if (key == "out_dir") cfg.out_dir = value;
    else throw contract_error("config: unknown key '" + key + "'");
}

RunConfig parse_config(std::istream& is) {
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        require(eq != std::string::npos,
                "config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        require(!key.empty(), "config line " + std::to_string(lineno) + ": empty key");
        try {
            apply_override(cfg, key, value);
        } catch (const contract_error& e) {
            throw contract_error("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    require(is.good(), "config: cannot open " + path);
    return parse_config(is);
}

std::string serialize_config(const RunConfig& cfg) {
    const nets::TrainConfig& t = cfg.train;
    std::ostringstream os;
    os << "lr = " << fmt_g17(t.lr) << "\n";
    os << "beta1 = " << fmt_g17(t.beta1) << "\n";
    os << "beta2 = " << fmt_g17(t.beta2) << "\n";
    os << "epochs = " << t.epochs << "\n";
    os << "batch = " << t.batch << "\n";
    os << "T = " << t.T << "\n";
    os << "K = " << t.K << "\n";
    os << "d = " << t.d << "\n";
    os << "variant = " << variant_name(t.variant) << "\n";
    os << "slope = " << fmt_g17(t.slope) << "\n";
    os << "encoder_widths = " << join_list(t.encoder_widths) << "\n";
    os << "decoder_widths = " << join_list(t.decoder_widths) << "\n";
    os << "recombiner = " << recombiner_name(t.recombiner) << "\n";
    os << "jobs = " << t.jobs << "\n";
    os << "seed = " << t.seed << "\n";
    os << "dataset = " << cfg.dataset << "\n";
    os << "scenes = " << cfg.scenes << "\n";
    os << "data_seed = " << cfg.data_seed << "\n";
    os << "sampling = " << sampling_name(cfg.sampling) << "\n";
    os << "export_csv = " << (cfg.export_csv ? "true" : "false") << "\n";
    os << "seeds = " << join_list(cfg.seeds) << "\n";
    os << "tau = " << fmt_g17(cfg.tau) << "\n";
    os << "aggregate_mode = " << aggregate_mode_name(cfg.aggregate_mode) << "\n";
    os << "alpha = " << fmt_g17(cfg.alpha) << "\n";
    os << "extraction = " << extraction_name(cfg.extraction) << "\n";
    os << "grid = " << cfg.grid << "\n";
    os << "out_dir = " << cfg.out_dir << "\n";
    return os.str();
}

std::string config_digest(const RunConfig& cfg) {
    return to_hex(fnv1a64(serialize_config(cfg)));
}

void validate_run_config(const RunConfig& cfg) {
    nets::validate_config(cfg.train);
    require(!cfg.dataset.empty(), "config: dataset path empty");
    require(!cfg.out_dir.empty(), "config: out_dir empty");
    require(cfg.scenes >= 1 && cfg.scenes <= (1 << 24), "config: scenes out of range");
    require(!cfg.seeds.empty(), "config: seeds empty");
    for (size_t i = 0; i < cfg.seeds.size(); ++i)
        for (size_t j = i + 1; j < cfg.seeds.size(); ++j)
            require(cfg.seeds[i] != cfg.seeds[j], "config: seeds must be distinct");
    require(std::isfinite(cfg.tau) && cfg.tau >= 0.0 && cfg.tau < 1.0,
            "config: tau must lie in [0, 1)");
    require(std::isfinite(cfg.alpha) && cfg.alpha > 0.0, "config: alpha must be positive");
    require(cfg.grid >= 8 && cfg.grid <= 4096, "config: grid out of range");
}

// --- synth -----------------------------------------------------------------------

SynthResult cmd_synth(const RunConfig& cfg) {
    validate_run_config(cfg);
    const std::string digest = config_digest(cfg);
    const uint64_t digest_raw = fnv1a64(serialize_config(cfg));

    synthdata::SceneSpec spec = synthdata::make_scene_spec(cfg.data_seed);
    spec.sampling = cfg.sampling;
    const std::vector<synthdata::Scene> scenes =
        synthdata::gen_dataset(spec, cfg.scenes, cfg.data_seed, cfg.train.jobs);

    ensure_parent_dir(cfg.dataset);
    synthdata::save_dataset(spec, scenes, cfg.dataset);
    io::append_digest_trailer(cfg.dataset, digest_raw);

    SynthResult res;
    res.dataset_path = cfg.dataset;
    res.scenes = cfg.scenes;
    if (cfg.export_csv) {
        res.csv_path = cfg.dataset + ".csv";
        std::ofstream os(res.csv_path);
        require(os.good(), "cmd_synth: cannot open " + res.csv_path);
        synthdata::export_csv(scenes, os);
        finish_text_file(os, digest, res.csv_path);
    }
    return res;
}

// --- train -----------------------------------------------------------------------

TrainResult cmd_train(const RunConfig& cfg) {
    validate_run_config(cfg);
    const std::string digest = config_digest(cfg);
    const uint64_t digest_raw = fnv1a64(serialize_config(cfg));

    const synthdata::Dataset ds = synthdata::load_dataset(cfg.dataset);
    const std::vector<Tensor> scenes = scene_points(ds);
    ensure_dir(cfg.out_dir);

    const int n = static_cast<int>(cfg.seeds.size());
    const int total_jobs = resolve_jobs(cfg.train.jobs);
    const int per_seed = std::max(1, total_jobs / n);

    TrainResult res;
    res.checkpoint_paths.resize(static_cast<size_t>(n));
    res.curve_paths.resize(static_cast<size_t>(n));
    res.final_loss.assign(static_cast<size_t>(n), std::numeric_limits<double>::quiet_NaN());

    parallel_for(n, std::min(n, total_jobs), [&](int i) {
        nets::TrainConfig tc = cfg.train;
        tc.seed = cfg.seeds[static_cast<size_t>(i)];
        tc.jobs = per_seed;
        nets::Checkpoint ck;
        try {
            ck = nets::train(scenes, tc);
        } catch (const numeric_error& e) {
            throw numeric_error("seed " + std::to_string(tc.seed) + ": " + e.what());
        }

        const std::string cp = out_file(cfg, "checkpoint_seed" + std::to_string(tc.seed) + ".bin");
        nets::save_checkpoint(ck, cp);
        io::append_digest_trailer(cp, digest_raw);

        const std::string lp = out_file(cfg, "loss_seed" + std::to_string(tc.seed) + ".csv");
        std::ofstream os(lp);
        require(os.good(), "cmd_train: cannot open " + lp);
        os << "epoch,loss\n";
        for (size_t e = 0; e < ck.loss_curve.size(); ++e)
            os << e << "," << fmt_g17(ck.loss_curve[e]) << "\n";
        finish_text_file(os, digest, lp);

        res.checkpoint_paths[static_cast<size_t>(i)] = cp;
        res.curve_paths[static_cast<size_t>(i)] = lp;
        if (!ck.loss_curve.empty()) res.final_loss[static_cast<size_t>(i)] = ck.loss_curve.back();
    });
    return res;
}

// --- slot extraction ---------------------------------------------------------------

metrics::SlotBatch extract_slots(const nets::Checkpoint& ck,
                                 const std::vector<synthdata::Scene>& scenes,
                                 psa::SlotSampleMode mode, uint64_t seed) {
    require(!scenes.empty(), "extract_slots: no scenes");
    require(ck.encoder.in_dim() == scenes.front().points.cols,
            "extract_slots: encoder input dimension mismatch");
    metrics::SlotBatch batch;
    batch.slots.resize(scenes.size());
    parallel_for(static_cast<int>(scenes.size()), resolve_jobs(ck.config.jobs), [&](int i) {
        const Tensor z = nets::net_forward(ck.encoder, scenes[static_cast<size_t>(i)].points);
        const psa::ForwardResult fr =
            psa::forward_from(z, ck.psa_params, ck.slot_init, ck.config.T);
        if (mode == psa::SlotSampleMode::mean) {
            batch.slots[static_cast<size_t>(i)] = fr.state.mu;
        } else {
            Rng rng(derive_seed(seed, 23, static_cast<uint64_t>(i)));
            batch.slots[static_cast<size_t>(i)] = psa::sample_slots(fr.state, rng, mode).slots;
        }
    });
    return batch;
}

// --- aggregate ---------------------------------------------------------------------

AggregateResult cmd_aggregate(const RunConfig& cfg, const std::string& checkpoint_path) {
    validate_run_config(cfg);
    const std::string digest = config_digest(cfg);

    const nets::Checkpoint ck = nets::load_checkpoint(checkpoint_path);
    const synthdata::Dataset ds = synthdata::load_dataset(cfg.dataset);
    require(ck.encoder.in_dim() == 2, "cmd_aggregate: checkpoint does not accept 2-d points");

    const InferenceSweep sweep = run_inference(ck, ds, cfg.tau, cfg.train.jobs);

    AggregateResult res;
    res.posterior =
        gmm::aggregate_posterior(sweep.locals, sweep.encodings, cfg.aggregate_mode, cfg.alpha);
    res.flattened = res.posterior.flattened();
    std::vector<double> lo, hi;
    res.normalization = box_mass(res.flattened, 6.0, &lo, &hi);

    ensure_dir(cfg.out_dir);
    const std::string stem = fs::path(checkpoint_path).stem().string();
    res.mixture_path = out_file(cfg, "aggregate_" + stem + ".json");
    res.summary_path = out_file(cfg, "aggregate_" + stem + "_summary.txt");
    write_mixture_json(res.flattened, digest, res.mixture_path);

    std::ofstream os(res.summary_path);
    require(os.good(), "cmd_aggregate: cannot open " + res.summary_path);
    os << "aggregate posterior summary\n";
    os << "checkpoint = " << checkpoint_path << "\n";
    os << "dataset = " << cfg.dataset << "\n";
    os << "scenes = " << res.posterior.datapoint_count() << "\n";
    os << "slots per scene = " << res.posterior.local_component_count() << "\n";
    os << "mode = " << aggregate_mode_name(cfg.aggregate_mode) << "\n";
    os << "components = " << res.flattened.component_count() << "\n";
    os << "normalization = " << fmt_g17(res.normalization)
       << " (mass inside the 6-sigma bounding box)\n";
    os << "box = [" << fmt_g17(lo[0]) << ", " << fmt_g17(hi[0]) << "] x [" << fmt_g17(lo[1])
       << ", " << fmt_g17(hi[1]) << "]\n";
    finish_text_file(os, digest, res.summary_path);
    return res;
}

// --- identifiability -----------------------------------------------------------------

SweepReport cmd_identifiability(const RunConfig& cfg,
                                const std::vector<std::string>& checkpoint_paths) {
    validate_run_config(cfg);
    const std::string digest = config_digest(cfg);
    const int n = static_cast<int>(checkpoint_paths.size());
    require(n >= 2, "cmd_identifiability: need at least two checkpoints");

    const synthdata::Dataset ds = synthdata::load_dataset(cfg.dataset);

    std::vector<nets::Checkpoint> cks;
    cks.reserve(static_cast<size_t>(n));
    SweepReport rep;
    rep.checkpoint_paths = checkpoint_paths;
    for (const std::string& p : checkpoint_paths) {
        const std::string bytes = read_file_bytes(p);
        rep.checkpoint_digests.push_back(to_hex(fnv1a64(bytes.data(), bytes.size())));
        cks.push_back(nets::load_checkpoint(p));
        require(cks.back().config.K == cks.front().config.K &&
                    cks.back().config.d == cks.front().config.d,
                "cmd_identifiability: checkpoints disagree on K or d");
    }

    std::vector<InferenceSweep> sweeps(static_cast<size_t>(n));
    std::vector<metrics::SlotBatch> batches(static_cast<size_t>(n));
    std::vector<AggEval> evals(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        sweeps[static_cast<size_t>(r)] = run_inference(cks[static_cast<size_t>(r)], ds, cfg.tau,
                                                       cfg.train.jobs);
        if (cfg.extraction == psa::SlotSampleMode::mean) {
            batches[static_cast<size_t>(r)] = sweeps[static_cast<size_t>(r)].means;
        } else {
            batches[static_cast<size_t>(r)] =
                extract_slots(cks[static_cast<size_t>(r)], ds.scenes, cfg.extraction,
                              derive_seed(cfg.train.seed, 23, static_cast<uint64_t>(r)));
        }
        evals[static_cast<size_t>(r)] =
            agg_eval(sweeps[static_cast<size_t>(r)], cfg.aggregate_mode, cfg.alpha);
        rep.ari.push_back(mean_of(sweeps[static_cast<size_t>(r)].scene_ari));
        double active = 0.0;
        for (int c : sweeps[static_cast<size_t>(r)].active_counts) active += c;
        rep.mean_active.push_back(active /
                                  static_cast<double>(sweeps[static_cast<size_t>(r)].active_counts.size()));
    }

    rep.smcc = Tensor(n, n);
    rep.r2 = Tensor(n, n);
    rep.residual = Tensor(n, n);
    for (int r = 0; r < n; ++r) {
        rep.smcc.at(r, r) = 1.0;
        rep.r2.at(r, r) = 1.0;
    }
    double smcc_sum = 0.0, r2_sum = 0.0;
    int pairs = 0;
    for (int r = 0; r < n; ++r)
        for (int s = r + 1; s < n; ++s) {
            const metrics::SmccResult m_rs =
                metrics::smcc(batches[static_cast<size_t>(r)], batches[static_cast<size_t>(s)]);
            const metrics::SmccResult m_sr =
                metrics::smcc(batches[static_cast<size_t>(s)], batches[static_cast<size_t>(r)]);
            const double mval = 0.5 * (m_rs.value + m_sr.value);
            rep.smcc.at(r, s) = rep.smcc.at(s, r) = mval;

            const double r2val =
                0.5 * (metrics::r2(batches[static_cast<size_t>(r)], batches[static_cast<size_t>(s)]).value +
                       metrics::r2(batches[static_cast<size_t>(s)], batches[static_cast<size_t>(r)]).value);
            rep.r2.at(r, s) = rep.r2.at(s, r) = r2val;

            const double res_rs =
                alignment_residual(evals[static_cast<size_t>(r)], evals[static_cast<size_t>(s)], m_rs.fit);
            const double res_sr =
                alignment_residual(evals[static_cast<size_t>(s)], evals[static_cast<size_t>(r)], m_sr.fit);
            rep.residual.at(r, s) = rep.residual.at(s, r) = 0.5 * (res_rs + res_sr);

            smcc_sum += mval;
            r2_sum += r2val;
            ++pairs;
        }
    rep.mean_pairwise_smcc = smcc_sum / pairs;
    rep.mean_pairwise_r2 = r2_sum / pairs;

    ensure_dir(cfg.out_dir);
    rep.report_path = out_file(cfg, "report.txt");
    std::ofstream os(rep.report_path);
    require(os.good(), "cmd_identifiability: cannot open " + rep.report_path);
    char buf[64];
    os << "identifiability sweep report\n\n";
    os << "dataset = " << cfg.dataset << " (" << ds.scenes.size() << " scenes)\n";
    os << "extraction = " << extraction_name(cfg.extraction) << "\n";
    os << "aggregate mode = " << aggregate_mode_name(cfg.aggregate_mode) << "\n\n";
    os << "checkpoints:\n";
    for (int r = 0; r < n; ++r)
        os << "  [" << r << "] " << checkpoint_paths[static_cast<size_t>(r)]
           << "  seed=" << cks[static_cast<size_t>(r)].config.seed
           << "  digest=" << rep.checkpoint_digests[static_cast<size_t>(r)] << "\n";

    const auto matrix = [&](const Tensor& t, const char* fmt) {
        for (int r = 0; r < n; ++r) {
            os << "  [" << r << "]";
            for (int s = 0; s < n; ++s) {
                std::snprintf(buf, sizeof(buf), fmt, t.at(r, s));
                os << " " << buf;
            }
            os << "\n";
        }
    };
    os << "\npairwise smcc (both-direction mean):\n";
    matrix(rep.smcc, "%12.9f");
    os << "\npairwise r2 (both-direction mean):\n";
    matrix(rep.r2, "%12.9f");
    os << "\naggregate alignment residual (fraction of component-cloud spread):\n";
    matrix(rep.residual, "%12.3e");
    os << "\nper-run statistics (tau = " << fmt_g17(cfg.tau) << "):\n";
    for (int r = 0; r < n; ++r) {
        std::snprintf(buf, sizeof(buf), "%.9f", rep.ari[static_cast<size_t>(r)]);
        os << "  [" << r << "] ari = " << buf;
        std::snprintf(buf, sizeof(buf), "%.9f", rep.mean_active[static_cast<size_t>(r)]);
        os << "  mean active slots = " << buf << "\n";
    }
    os << "\nmean pairwise smcc = " << fmt_g17(rep.mean_pairwise_smcc) << "\n";
    os << "mean pairwise r2 = " << fmt_g17(rep.mean_pairwise_r2) << "\n";
    finish_text_file(os, digest, rep.report_path);
    return rep;
}

// --- affine clone --------------------------------------------------------------------

nets::Checkpoint make_affine_clone(const nets::Checkpoint& ck, const gmm::DiagAffine& h) {
    const int d = ck.config.d;
    require(static_cast<int>(h.perm.size()) == d && static_cast<int>(h.scale.size()) == d &&
                static_cast<int>(h.shift.size()) == d,
            "affine clone: map dimension mismatch");
    std::vector<bool> seen(static_cast<size_t>(d), false);
    for (int j = 0; j < d; ++j) {
        require(h.perm[static_cast<size_t>(j)] >= 0 && h.perm[static_cast<size_t>(j)] < d &&
                    !seen[static_cast<size_t>(h.perm[static_cast<size_t>(j)])],
                "affine clone: perm is not a permutation");
        seen[static_cast<size_t>(h.perm[static_cast<size_t>(j)])] = true;
        require(std::isfinite(h.scale[static_cast<size_t>(j)]) &&
                    h.scale[static_cast<size_t>(j)] != 0.0,
                "affine clone: scale must be finite and nonzero");
        require(std::isfinite(h.shift[static_cast<size_t>(j)]),
                "affine clone: shift must be finite");
    }
    require(!ck.encoder.layers.empty() && !ck.decoder.layers.empty(),
            "affine clone: empty networks");
    require(ck.encoder.out_dim() == d && ck.decoder.in_dim() == d,
            "affine clone: networks do not operate in the latent dimension");

    const gmm::DiagAffine inv = h.inverse();
    nets::Checkpoint clone = ck;

    // Compose h into the encoder's last layer: h(x W^T + b) = x (H W)^T + h(b).
    nets::AffineLayer& enc = clone.encoder.layers.back();
    const Tensor enc_w = enc.weight;
    for (int j = 0; j < d; ++j) {
        const int src = h.perm[static_cast<size_t>(j)];
        const double sc = h.scale[static_cast<size_t>(src)];
        for (int i = 0; i < enc_w.cols; ++i) enc.weight.at(j, i) = sc * enc_w.at(src, i);
    }
    std::vector<double> b(enc.bias.data.begin(), enc.bias.data.end());
    const std::vector<double> hb = h.apply(b);
    for (int j = 0; j < d; ++j) enc.bias.at(0, j) = hb[static_cast<size_t>(j)];

    // Compose h^-1 into the decoder's first layer: (h^-1 u) V^T + c equals
    // u (V H^-1)^T + (c + inv.shift V^T).
    nets::AffineLayer& dec = clone.decoder.layers.front();
    const Tensor dec_w = dec.weight;
    for (int r = 0; r < dec_w.rows; ++r) {
        for (int i = 0; i < d; ++i)
            dec.weight.at(r, i) =
                dec_w.at(r, h.perm[static_cast<size_t>(i)]) * inv.scale[static_cast<size_t>(i)];
        double shift_term = 0.0;
        for (int i = 0; i < d; ++i) shift_term += inv.shift[static_cast<size_t>(i)] * dec_w.at(r, i);
        dec.bias.at(0, r) += shift_term;
    }

    // Slot initialization rides along: means through h, variances through the
    // squared scales (shift drops out), floored like every stored variance.
    for (int k = 0; k < clone.slot_init.mu.rows; ++k) {
        std::vector<double> row(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j) row[static_cast<size_t>(j)] = ck.slot_init.mu.at(k, j);
        const std::vector<double> hrow = h.apply(row);
        for (int j = 0; j < d; ++j) {
            clone.slot_init.mu.at(k, j) = hrow[static_cast<size_t>(j)];
            const int src = h.perm[static_cast<size_t>(j)];
            const double sc = h.scale[static_cast<size_t>(src)];
            clone.slot_init.var.at(k, j) =
                std::max(sc * sc * ck.slot_init.var.at(k, src), gmm::kVarianceFloor);
        }
    }

    if (ck.psa_params.variant != psa::Variant::Base) {
        // Projections conjugate only the linear part, so a shift would leave
        // the equivalence class.
        for (double s : h.shift)
            require(s == 0.0, "affine clone: projected variants require a zero-shift map");
        const auto conjugate = [&](const Tensor& w) {
            Tensor out(d, d);
            for (int j = 0; j < d; ++j) {
                const int src = h.perm[static_cast<size_t>(j)];
                const double sj = h.scale[static_cast<size_t>(src)];
                for (int i = 0; i < d; ++i)
                    out.at(j, i) = sj * w.at(src, h.perm[static_cast<size_t>(i)]) /
                                   h.scale[static_cast<size_t>(h.perm[static_cast<size_t>(i)])];
            }
            return out;
        };
        clone.psa_params = psa::make_params(ck.psa_params.variant, conjugate(ck.psa_params.W_q),
                                            conjugate(ck.psa_params.W_k),
                                            conjugate(ck.psa_params.W_v));
    }

    // Optimizer moments live in the original parameterization; a clone is an
    // inference artifact, so they are cleared rather than transformed.
    clone.opt = nets::OptimizerState{};
    return clone;
}

// --- ard report ----------------------------------------------------------------------

ArdReport cmd_ard_report(const RunConfig& cfg, const std::string& checkpoint_path) {
    validate_run_config(cfg);
    const std::string digest = config_digest(cfg);

    const nets::Checkpoint ck = nets::load_checkpoint(checkpoint_path);
    const synthdata::Dataset ds = synthdata::load_dataset(cfg.dataset);
    const InferenceSweep sweep = run_inference(ck, ds, cfg.tau, cfg.train.jobs);
    const int k = ck.config.K;
    const int m = static_cast<int>(ds.scenes.size());

    ArdReport rep;
    rep.counts = sweep.active_counts;
    rep.histogram.assign(static_cast<size_t>(k) + 1, 0);
    double total_active = 0.0, abs_err = 0.0;
    for (int c : rep.counts) {
        ++rep.histogram[static_cast<size_t>(c)];
        total_active += c;
        abs_err += std::abs(c - ds.spec.modes_per_scene);
    }
    rep.modal_count = 0;
    for (int c = 1; c <= k; ++c)
        if (rep.histogram[static_cast<size_t>(c)] > rep.histogram[static_cast<size_t>(rep.modal_count)])
            rep.modal_count = c;
    rep.mean_active = total_active / m;
    rep.mae = abs_err / m;
    rep.savings = 1.0 - rep.mean_active / k;
    // Same quantity counted decode by decode; the two must agree.
    const double counted = 1.0 - total_active / (static_cast<double>(k) * m);
    require_numeric(std::abs(rep.savings - counted) < 1e-12,
                    "cmd_ard_report: savings cross-check failed");

    ensure_dir(cfg.out_dir);
    rep.report_path = out_file(cfg, "ard_report.txt");
    std::ofstream os(rep.report_path);
    require(os.good(), "cmd_ard_report: cannot open " + rep.report_path);
    os << "ard report\n";
    os << "checkpoint = " << checkpoint_path << "\n";
    os << "dataset = " << cfg.dataset << " (" << m << " scenes, " << ds.spec.modes_per_scene
       << " modes per scene)\n";
    os << "tau = " << fmt_g17(cfg.tau) << "\n\n";
    os << "active slots histogram:\n";
    for (int c = 0; c <= k; ++c)
        os << "  " << c << " active: " << rep.histogram[static_cast<size_t>(c)] << " scenes\n";
    os << "\nmodal active count = " << rep.modal_count << "\n";
    os << "mean active = " << fmt_g17(rep.mean_active) << "\n";
    os << "mae vs " << ds.spec.modes_per_scene << " = " << fmt_g17(rep.mae) << "\n";
    os << "decode savings = " << fmt_g17(rep.savings)
       << " (1 - mean active / K, equals counted decodes)\n";
    finish_text_file(os, digest, rep.report_path);
    return rep;
}

// --- sampling ---------------------------------------------------------------------

SampleResult cmd_sample(const RunConfig& cfg, const std::string& input_path, int count,
                        SampleMode mode, int scene_index) {
    validate_run_config(cfg);
    require(count >= 0 && count <= (1 << 24), "cmd_sample: count out of range");
    const std::string digest = config_digest(cfg);

    Rng rng(derive_seed(cfg.train.seed, 31));
    std::vector<std::vector<double>> draws;
    draws.reserve(static_cast<size_t>(count));
    int dim = 0;
    if (mode == SampleMode::aggregate) {
        const MixtureFile mf = read_mixture_json(input_path);
        const gmm::GaussianMixture m = mf.to_mixture();
        dim = m.dim();
        for (int i = 0; i < count; ++i) draws.push_back(gmm::sample_mixture(m, rng));
    } else {
        const nets::Checkpoint ck = nets::load_checkpoint(input_path);
        const synthdata::Dataset ds = synthdata::load_dataset(cfg.dataset);
        require(scene_index >= 0 && scene_index < static_cast<int>(ds.scenes.size()),
                "cmd_sample: scene index out of range");
        require(ck.encoder.in_dim() == 2, "cmd_sample: checkpoint does not accept 2-d points");
        const Tensor z =
            nets::net_forward(ck.encoder, ds.scenes[static_cast<size_t>(scene_index)].points);
        const psa::ForwardResult fr =
            psa::forward_from(z, ck.psa_params, ck.slot_init, ck.config.T);
        const gmm::ConcatSlotMixture cm(psa::to_mixture(fr.state));
        dim = cm.concat_dim();
        for (int i = 0; i < count; ++i) draws.push_back(gmm::concat_mixture_sample(cm, rng));
    }

    ensure_dir(cfg.out_dir);
    SampleResult res;
    res.path = out_file(cfg, "samples.csv");
    res.count = count;
    res.dim = dim;
    std::ofstream os(res.path);
    require(os.good(), "cmd_sample: cannot open " + res.path);
    for (int j = 0; j < dim; ++j) os << (j ? "," : "") << "x" << j;
    os << "\n";
    for (const std::vector<double>& row : draws) {
        for (int j = 0; j < dim; ++j) os << (j ? "," : "") << fmt_g17(row[static_cast<size_t>(j)]);
        os << "\n";
    }
    finish_text_file(os, digest, res.path);
    return res;
}

// --- mixture files -------------------------------------------------------------------

gmm::GaussianMixture MixtureFile::to_mixture() const {
    require(!weights.empty(), "mixture file: no components");
    std::vector<gmm::DiagGaussian> comps;
    comps.reserve(weights.size());
    for (size_t i = 0; i < weights.size(); ++i) comps.emplace_back(means[i], vars[i]);
    return gmm::GaussianMixture(weights, std::move(comps));
}

void write_mixture_json(const gmm::GaussianMixture& m, const std::string& digest,
                        const std::string& path) {
    ensure_parent_dir(path);
    std::ofstream os(path);
    require(os.good(), "write_mixture_json: cannot open " + path);
    const auto vec = [&](const std::vector<double>& v) {
        os << "[";
        for (size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << fmt_g17(v[i]);
        os << "]";
    };
    os << "{\n  \"dim\": " << m.dim() << ",\n  \"weights\": [\n";
    for (int k = 0; k < m.component_count(); ++k)
        os << "    " << fmt_g17(m.weights[static_cast<size_t>(k)])
           << (k + 1 < m.component_count() ? "," : "") << "\n";
    os << "  ],\n  \"means\": [\n";
    for (int k = 0; k < m.component_count(); ++k) {
        os << "    ";
        vec(m.components[static_cast<size_t>(k)].mean);
        os << (k + 1 < m.component_count() ? "," : "") << "\n";
    }
    os << "  ],\n  \"vars\": [\n";
    for (int k = 0; k < m.component_count(); ++k) {
        os << "    ";
        vec(m.components[static_cast<size_t>(k)].var);
        os << (k + 1 < m.component_count() ? "," : "") << "\n";
    }
    os << "  ],\n  \"config_digest\": \"" << digest << "\"\n}\n";
    os.flush();
    require(os.good(), "write_mixture_json: write failed for " + path);
}

MixtureFile read_mixture_json(const std::string& path) {
    std::ifstream is(path);
    require(is.good(), "read_mixture_json: cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw contract_error("mixture file " + path + ": " + e.what());
    }
    MixtureFile mf;
    try {
        mf.dim = j.at("dim").get<int>();
        mf.weights = j.at("weights").get<std::vector<double>>();
        mf.means = j.at("means").get<std::vector<std::vector<double>>>();
        mf.vars = j.at("vars").get<std::vector<std::vector<double>>>();
        if (j.contains("config_digest")) mf.config_digest = j.at("config_digest").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw contract_error("mixture file " + path + ": " + e.what());
    }
    require(mf.dim >= 0 && mf.dim <= (1 << 20), "mixture file: dim out of range");
    require(mf.means.size() == mf.weights.size() && mf.vars.size() == mf.weights.size(),
            "mixture file: weights/means/vars lengths disagree");
    for (size_t k = 0; k < mf.weights.size(); ++k) {
        require(std::isfinite(mf.weights[k]) && mf.weights[k] >= 0.0,
                "mixture file: bad weight");
        require(static_cast<int>(mf.means[k].size()) == mf.dim &&
                    static_cast<int>(mf.vars[k].size()) == mf.dim,
                "mixture file: component dimension disagrees with dim");
        for (double v : mf.means[k]) require(std::isfinite(v), "mixture file: bad mean");
        for (double v : mf.vars[k])
            require(std::isfinite(v) && v >= 0.0, "mixture file: bad variance");
    }
    return mf;
}

// --- plotting ---------------------------------------------------------------------

namespace {

// Panel geometry in pixels.
constexpr double kPlotW = 360.0, kPlotH = 360.0;
constexpr double kMarginL = 56.0, kMarginR = 16.0, kMarginT = 28.0, kMarginB = 40.0;
constexpr double kCellW = kMarginL + kPlotW + kMarginR;
constexpr double kCellH = kMarginT + kPlotH + kMarginB;

std::string escape_xml(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&') out += "&amp;";
        else if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else out += c;
    }
    return out;
}

std::string px(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string heat_color(double t) {
    // white toward deep blue, with a square-root lift for visibility
    t = std::sqrt(std::clamp(t, 0.0, 1.0));
    const long r = std::lround(255.0 + t * (31.0 - 255.0));
    const long g = std::lround(255.0 + t * (78.0 - 255.0));
    const long b = std::lround(255.0 + t * (137.0 - 255.0));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "#%02lx%02lx%02lx", r, g, b);
    return buf;
}

const char* kScatterPalette[5] = {"#4363d8", "#e6194b", "#3cb44b", "#f58231", "#911eb4"};

struct PanelFrame {
    double ox = 0.0;     // panel cell origin
    double x_lo = 0.0, x_hi = 1.0;
    double y_lo = 0.0, y_hi = 1.0;

    double px0() const { return ox + kMarginL; }
    double py0() const { return kMarginT; }
    double to_px(double x) const { return px0() + (x - x_lo) / (x_hi - x_lo) * kPlotW; }
    double to_py(double y) const { return py0() + kPlotH * (1.0 - (y - y_lo) / (y_hi - y_lo)); }
};

void panel_chrome(std::ostringstream& svg, const PanelFrame& f, const std::string& title,
                  int grid_n) {
    svg << "<rect x=\"" << px(f.px0()) << "\" y=\"" << px(f.py0()) << "\" width=\"" << px(kPlotW)
        << "\" height=\"" << px(kPlotH)
        << "\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n";
    svg << "<text x=\"" << px(f.ox + kMarginL + kPlotW / 2) << "\" y=\"" << px(kMarginT - 10)
        << "\" text-anchor=\"middle\" font-size=\"13\">" << escape_xml(title) << "</text>\n";
    char lo[32], hi[32];
    std::snprintf(lo, sizeof(lo), "%.4g", f.x_lo);
    std::snprintf(hi, sizeof(hi), "%.4g", f.x_hi);
    svg << "<text x=\"" << px(f.px0()) << "\" y=\"" << px(kMarginT + kPlotH + 16)
        << "\" font-size=\"11\">" << lo << "</text>\n";
    svg << "<text x=\"" << px(f.px0() + kPlotW) << "\" y=\"" << px(kMarginT + kPlotH + 16)
        << "\" text-anchor=\"end\" font-size=\"11\">" << hi << "</text>\n";
    std::snprintf(lo, sizeof(lo), "%.4g", f.y_lo);
    std::snprintf(hi, sizeof(hi), "%.4g", f.y_hi);
    svg << "<text x=\"" << px(f.px0() - 4) << "\" y=\"" << px(kMarginT + kPlotH)
        << "\" text-anchor=\"end\" font-size=\"11\">" << lo << "</text>\n";
    svg << "<text x=\"" << px(f.px0() - 4) << "\" y=\"" << px(kMarginT + 10)
        << "\" text-anchor=\"end\" font-size=\"11\">" << hi << "</text>\n";
    // machine-readable axis mapping, exact
    svg << "<!-- axis x " << fmt_g17(f.x_lo) << " " << fmt_g17(f.x_hi) << " y " << fmt_g17(f.y_lo)
        << " " << fmt_g17(f.y_hi) << " plot " << fmt_g17(f.px0()) << " " << fmt_g17(f.py0()) << " "
        << fmt_g17(kPlotW) << " " << fmt_g17(kPlotH) << " n " << grid_n << " -->\n";
}

// Bounds covering every component's mean plus or minus three standard
// deviations, degenerate spans widened to unit half-width.
void mixture_bounds(const MixtureFile& mf, int coord, double& lo, double& hi) {
    lo = std::numeric_limits<double>::infinity();
    hi = -lo;
    for (size_t k = 0; k < mf.weights.size(); ++k) {
        const double s = std::sqrt(mf.vars[k][static_cast<size_t>(coord)]);
        lo = std::min(lo, mf.means[k][static_cast<size_t>(coord)] - 3.0 * s);
        hi = std::max(hi, mf.means[k][static_cast<size_t>(coord)] + 3.0 * s);
    }
    if (!(hi - lo > 1e-12)) {
        const double c = mf.weights.empty() ? 0.0 : mf.means[0][static_cast<size_t>(coord)];
        lo = c - 1.0;
        hi = c + 1.0;
    }
}

// Marching squares on a value grid at one level: emits one line segment per
// crossing cell into the path buffer (cases with two crossings emit two).
void contour_segments(const std::vector<double>& val, int g, double level, const PanelFrame& f,
                      const std::vector<double>& xc, const std::vector<double>& yc,
                      std::string& dpath) {
    const auto at = [&](int ix, int iy) { return val[static_cast<size_t>(iy) * g + ix]; };
    const auto lerp = [&](double a, double b, double va, double vb) {
        const double t = (vb - va) == 0.0 ? 0.5 : std::clamp((level - va) / (vb - va), 0.0, 1.0);
        return a + t * (b - a);
    };
    for (int iy = 0; iy + 1 < g; ++iy)
        for (int ix = 0; ix + 1 < g; ++ix) {
            const double v00 = at(ix, iy), v10 = at(ix + 1, iy);
            const double v01 = at(ix, iy + 1), v11 = at(ix + 1, iy + 1);
            int c = 0;
            if (v00 >= level) c |= 1;
            if (v10 >= level) c |= 2;
            if (v11 >= level) c |= 4;
            if (v01 >= level) c |= 8;
            if (c == 0 || c == 15) continue;
            // edge crossings in data coordinates
            const double xb = lerp(xc[static_cast<size_t>(ix)], xc[static_cast<size_t>(ix) + 1], v00, v10);
            const double xt = lerp(xc[static_cast<size_t>(ix)], xc[static_cast<size_t>(ix) + 1], v01, v11);
            const double yl = lerp(yc[static_cast<size_t>(iy)], yc[static_cast<size_t>(iy) + 1], v00, v01);
            const double yr = lerp(yc[static_cast<size_t>(iy)], yc[static_cast<size_t>(iy) + 1], v10, v11);
            const double bot_y = yc[static_cast<size_t>(iy)], top_y = yc[static_cast<size_t>(iy) + 1];
            const double left_x = xc[static_cast<size_t>(ix)], right_x = xc[static_cast<size_t>(ix) + 1];
            const auto seg = [&](double x1, double y1, double x2, double y2) {
                dpath += "M" + px(f.to_px(x1)) + " " + px(f.to_py(y1)) + "L" + px(f.to_px(x2)) +
                         " " + px(f.to_py(y2));
            };
            switch (c) {
                case 1: case 14: seg(left_x, yl, xb, bot_y); break;
                case 2: case 13: seg(xb, bot_y, right_x, yr); break;
                case 3: case 12: seg(left_x, yl, right_x, yr); break;
                case 4: case 11: seg(xt, top_y, right_x, yr); break;
                case 6: case 9: seg(xb, bot_y, xt, top_y); break;
                case 7: case 8: seg(left_x, yl, xt, top_y); break;
                case 5:
                case 10: {
                    const bool center_in = 0.25 * (v00 + v10 + v01 + v11) >= level;
                    if ((c == 5) == center_in) {
                        seg(left_x, yl, xt, top_y);
                        seg(xb, bot_y, right_x, yr);
                    } else {
                        seg(left_x, yl, xb, bot_y);
                        seg(xt, top_y, right_x, yr);
                    }
                    break;
                }
                default: break;
            }
        }
}

void render_mixture_2d(std::ostringstream& svg, const MixtureFile& mf, const std::string& title,
                       double ox, int g) {
    PanelFrame f;
    f.ox = ox;
    mixture_bounds(mf, 0, f.x_lo, f.x_hi);
    mixture_bounds(mf, 1, f.y_lo, f.y_hi);
    const gmm::GaussianMixture m = mf.to_mixture();

    std::vector<double> xc(static_cast<size_t>(g)), yc(static_cast<size_t>(g));
    for (int i = 0; i < g; ++i) {
        xc[static_cast<size_t>(i)] = f.x_lo + (i + 0.5) * (f.x_hi - f.x_lo) / g;
        yc[static_cast<size_t>(i)] = f.y_lo + (i + 0.5) * (f.y_hi - f.y_lo) / g;
    }
    std::vector<double> val(static_cast<size_t>(g) * static_cast<size_t>(g), 0.0);
    double dmax = 0.0;
    for (int iy = 0; iy < g; ++iy)
        for (int ix = 0; ix < g; ++ix) {
            const double pt[2] = {xc[static_cast<size_t>(ix)], yc[static_cast<size_t>(iy)]};
            const double v = std::exp(gmm::mixture_log_density(m, pt));
            val[static_cast<size_t>(iy) * g + ix] = v;
            dmax = std::max(dmax, v);
        }
    require_numeric(std::isfinite(dmax) && dmax > 0.0, "plot: density grid degenerate");

    const double cw = kPlotW / g, ch = kPlotH / g;
    for (int iy = 0; iy < g; ++iy)
        for (int ix = 0; ix < g; ++ix) {
            const double v = val[static_cast<size_t>(iy) * g + ix];
            if (v < 1e-4 * dmax) continue;
            const double cell_px = f.px0() + ix * cw;
            const double cell_py = f.py0() + kPlotH - (iy + 1) * ch;
            svg << "<rect x=\"" << px(cell_px) << "\" y=\"" << px(cell_py) << "\" width=\""
                << px(cw + 0.1) << "\" height=\"" << px(ch + 0.1) << "\" fill=\""
                << heat_color(v / dmax) << "\"/>\n";
        }

    const double levels[3] = {0.25, 0.5, 0.75};
    const char* strokes[3] = {"#888888", "#555555", "#222222"};
    for (int li = 0; li < 3; ++li) {
        std::string dpath;
        contour_segments(val, g, levels[li] * dmax, f, xc, yc, dpath);
        if (!dpath.empty())
            svg << "<path d=\"" << dpath << "\" fill=\"none\" stroke=\"" << strokes[li]
                << "\" stroke-width=\"1\"/>\n";
    }
    panel_chrome(svg, f, title, g);
}

void render_mixture_1d(std::ostringstream& svg, const MixtureFile& mf, const std::string& title,
                       double ox, int g) {
    PanelFrame f;
    f.ox = ox;
    mixture_bounds(mf, 0, f.x_lo, f.x_hi);
    const gmm::GaussianMixture m = mf.to_mixture();
    std::vector<double> xs(static_cast<size_t>(g)), ys(static_cast<size_t>(g));
    double dmax = 0.0;
    for (int i = 0; i < g; ++i) {
        const double x = f.x_lo + i * (f.x_hi - f.x_lo) / (g - 1);
        const double v = std::exp(gmm::mixture_log_density(m, std::span<const double>(&x, 1)));
        xs[static_cast<size_t>(i)] = x;
        ys[static_cast<size_t>(i)] = v;
        dmax = std::max(dmax, v);
    }
    require_numeric(std::isfinite(dmax) && dmax > 0.0, "plot: density curve degenerate");
    f.y_lo = 0.0;
    f.y_hi = dmax;
    // exact pixel coordinates so the curve can be inverted back to densities
    svg << "<polyline fill=\"none\" stroke=\"#1f4e89\" stroke-width=\"1.5\" points=\"";
    for (int i = 0; i < g; ++i)
        svg << (i ? " " : "") << fmt_g17(f.to_px(xs[static_cast<size_t>(i)])) << ","
            << fmt_g17(f.to_py(ys[static_cast<size_t>(i)]));
    svg << "\"/>\n";
    panel_chrome(svg, f, title, g);
}

void render_empty_mixture(std::ostringstream& svg, const std::string& title, double ox) {
    PanelFrame f;
    f.ox = ox;
    f.x_lo = -1.0;
    f.x_hi = 1.0;
    f.y_lo = -1.0;
    f.y_hi = 1.0;
    panel_chrome(svg, f, title, 0);
}

void render_dataset(std::ostringstream& svg, const synthdata::Dataset& ds,
                    const std::string& title, double ox) {
    // Scatter of the first scenes, colored by ground-truth type.
    const int scene_cap = std::min<int>(12, static_cast<int>(ds.scenes.size()));
    PanelFrame f;
    f.ox = ox;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int si = 0; si < scene_cap; ++si)
        for (double v : ds.scenes[static_cast<size_t>(si)].points.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    const double pad = 0.05 * std::max(hi - lo, 1e-12);
    f.x_lo = f.y_lo = lo - pad;
    f.x_hi = f.y_hi = hi + pad;
    for (int si = 0; si < scene_cap; ++si) {
        const synthdata::Scene& s = ds.scenes[static_cast<size_t>(si)];
        for (int r = 0; r < s.points.rows; ++r)
            svg << "<circle cx=\"" << px(f.to_px(s.points.at(r, 0))) << "\" cy=\""
                << px(f.to_py(s.points.at(r, 1))) << "\" r=\"1.6\" fill=\""
                << kScatterPalette[s.labels[static_cast<size_t>(r)] % 5]
                << "\" fill-opacity=\"0.45\"/>\n";
    }
    panel_chrome(svg, f, title, 0);
}

}  // namespace

PlotResult cmd_plot(const RunConfig& cfg, const std::vector<std::string>& inputs,
                    const std::string& out_path) {
    validate_run_config(cfg);
    require(!inputs.empty(), "cmd_plot: no inputs");
    require(!out_path.empty(), "cmd_plot: empty output path");
    const std::string digest = config_digest(cfg);

    std::ostringstream body;
    for (size_t i = 0; i < inputs.size(); ++i) {
        const double ox = static_cast<double>(i) * kCellW;
        const std::string title = fs::path(inputs[i]).filename().string();
        if (fs::path(inputs[i]).extension() == ".json") {
            const MixtureFile mf = read_mixture_json(inputs[i]);
            if (mf.component_count() == 0) render_empty_mixture(body, title, ox);
            else if (mf.dim == 1) render_mixture_1d(body, mf, title, ox, cfg.grid);
            else if (mf.dim == 2) render_mixture_2d(body, mf, title, ox, cfg.grid);
            else throw contract_error("cmd_plot: can only draw 1-d or 2-d mixtures");
        } else {
            render_dataset(body, synthdata::load_dataset(inputs[i]), title, ox);
        }
    }

    const double total_w = kCellW * static_cast<double>(inputs.size());
    ensure_parent_dir(out_path);
    std::ofstream os(out_path);
    require(os.good(), "cmd_plot: cannot open " + out_path);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << px(total_w) << "\" height=\""
       << px(kCellH) << "\" viewBox=\"0 0 " << px(total_w) << " " << px(kCellH)
       << "\" font-family=\"monospace\">\n";
    os << "<rect width=\"" << px(total_w) << "\" height=\"" << px(kCellH)
       << "\" fill=\"#ffffff\"/>\n";
    os << body.str();
    os << "</svg>\n";
    os << "<!-- config = " << digest << " -->\n";
    os.flush();
    require(os.good(), "cmd_plot: write failed for " + out_path);

    PlotResult res;
    res.path = out_path;
    res.panels = static_cast<int>(inputs.size());
    return res;
}

}  // namespace slotmix::harness
