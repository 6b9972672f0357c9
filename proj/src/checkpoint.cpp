#include <fstream>
#include <sstream>

#include "ioutil.hpp"
#include "slotmix/nets.hpp"

namespace slotmix::nets {

namespace {

const char kMagic[9] = "SLMXCKP1";

void put_widths(std::ostream& os, const std::vector<int>& widths) {
    io::put_u64(os, widths.size());
    for (int w : widths) io::put_i64(os, w);
}

std::vector<int> take_widths(std::istream& is) {
    const uint64_t n = io::take_u64(is);
    require(n >= 2 && n <= 64, "checkpoint file: width chain out of range");
    std::vector<int> widths(static_cast<size_t>(n));
    for (int& w : widths) w = io::take_dim(is);
    return widths;
}

void put_network(std::ostream& os, const Network& net) {
    io::put_f64(os, net.slope);
    io::put_u64(os, net.layers.size());
    for (const AffineLayer& l : net.layers) {
        io::put_tensor(os, l.weight);
        io::put_tensor(os, l.bias);
    }
}

Network take_network(std::istream& is) {
    Network net;
    net.slope = io::take_f64(is);
    const uint64_t n = io::take_u64(is);
    require(n >= 1 && n <= 64, "checkpoint file: layer count out of range");
    net.layers.resize(static_cast<size_t>(n));
    for (AffineLayer& l : net.layers) {
        l.weight = io::take_tensor(is);
        l.bias = io::take_tensor(is);
    }
    return net;
}

void put_config(std::ostream& os, const TrainConfig& cfg) {
    io::put_f64(os, cfg.lr);
    io::put_f64(os, cfg.beta1);
    io::put_f64(os, cfg.beta2);
    io::put_i64(os, cfg.epochs);
    io::put_i64(os, cfg.batch);
    io::put_i64(os, cfg.T);
    io::put_i64(os, cfg.K);
    io::put_i64(os, cfg.d);
    io::put_u8(os, static_cast<uint8_t>(cfg.variant));
    io::put_u64(os, cfg.seed);
    io::put_f64(os, cfg.slope);
    put_widths(os, cfg.encoder_widths);
    put_widths(os, cfg.decoder_widths);
    io::put_u8(os, static_cast<uint8_t>(cfg.recombiner));
    io::put_i64(os, cfg.jobs);
}

TrainConfig take_config(std::istream& is) {
    TrainConfig cfg;
    cfg.lr = io::take_f64(is);
    cfg.beta1 = io::take_f64(is);
    cfg.beta2 = io::take_f64(is);
    cfg.epochs = io::take_dim(is);
    cfg.batch = io::take_dim(is);
    cfg.T = io::take_dim(is);
    cfg.K = io::take_dim(is);
    cfg.d = io::take_dim(is);
    const uint8_t variant = io::take_u8(is);
    require(variant <= 2, "checkpoint file: unknown routing variant");
    cfg.variant = static_cast<psa::Variant>(variant);
    cfg.seed = io::take_u64(is);
    cfg.slope = io::take_f64(is);
    cfg.encoder_widths = take_widths(is);
    cfg.decoder_widths = take_widths(is);
    const uint8_t recombiner = io::take_u8(is);
    require(recombiner <= 1, "checkpoint file: unknown recombiner");
    cfg.recombiner = static_cast<Recombiner>(recombiner);
    cfg.jobs = io::take_dim(is);
    return cfg;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ostringstream payload;
    put_config(payload, ck.config);
    put_network(payload, ck.encoder);
    put_network(payload, ck.decoder);
    io::put_u8(payload, static_cast<uint8_t>(ck.psa_params.variant));
    io::put_tensor(payload, ck.psa_params.W_q);
    io::put_tensor(payload, ck.psa_params.W_k);
    io::put_tensor(payload, ck.psa_params.W_v);
    io::put_u64(payload, ck.slot_init.pi.size());
    for (double p : ck.slot_init.pi) io::put_f64(payload, p);
    io::put_tensor(payload, ck.slot_init.mu);
    io::put_tensor(payload, ck.slot_init.var);
    io::put_i64(payload, ck.slot_init.iteration);
    io::put_i64(payload, ck.opt.t);
    io::put_u64(payload, ck.opt.m.size());
    for (const Tensor& t : ck.opt.m) io::put_tensor(payload, t);
    io::put_u64(payload, ck.opt.v.size());
    for (const Tensor& t : ck.opt.v) io::put_tensor(payload, t);
    io::put_i64(payload, ck.epoch);
    io::put_u64(payload, ck.loss_curve.size());
    for (double l : ck.loss_curve) io::put_f64(payload, l);
    const std::string body = payload.str();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), "save_checkpoint: cannot open " + path);
    os.write(kMagic, 8);
    os.write(body.data(), static_cast<std::streamsize>(body.size()));
    io::put_u64(os, fnv1a64(body.data(), body.size()));
    os.flush();
    require(os.good(), "save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "load_checkpoint: cannot open " + path);
    std::ostringstream raw;
    raw << is.rdbuf();
    const std::string all = io::strip_digest_trailer(raw.str());
    require(all.size() >= 16, "load_checkpoint: file too short");
    require(all.compare(0, 8, kMagic, 8) == 0, "load_checkpoint: not a checkpoint file");

    const std::string body = all.substr(8, all.size() - 16);
    std::istringstream footer(all.substr(all.size() - 8));
    require(io::take_u64(footer) == fnv1a64(body.data(), body.size()),
            "load_checkpoint: checksum mismatch");

    std::istringstream payload(body);
    Checkpoint ck;
    ck.config = take_config(payload);
    validate_config(ck.config);
    ck.encoder = take_network(payload);
    ck.decoder = take_network(payload);
    const uint8_t variant = io::take_u8(payload);
    require(variant <= 2, "checkpoint file: unknown routing variant");
    Tensor wq = io::take_tensor(payload);
    Tensor wk = io::take_tensor(payload);
    Tensor wv = io::take_tensor(payload);
    ck.psa_params = psa::make_params(static_cast<psa::Variant>(variant), std::move(wq),
                                     std::move(wk), std::move(wv));
    const uint64_t k = io::take_u64(payload);
    require(k >= 1 && k <= (1 << 20), "checkpoint file: slot count out of range");
    ck.slot_init.pi.resize(static_cast<size_t>(k));
    for (double& p : ck.slot_init.pi) p = io::take_f64(payload);
    ck.slot_init.mu = io::take_tensor(payload);
    ck.slot_init.var = io::take_tensor(payload);
    ck.slot_init.iteration = io::take_dim(payload);
    ck.opt.t = io::take_dim(payload);
    const uint64_t nm = io::take_u64(payload);
    require(nm <= 4096, "checkpoint file: moment count out of range");
    ck.opt.m.resize(static_cast<size_t>(nm));
    for (Tensor& t : ck.opt.m) t = io::take_tensor(payload);
    const uint64_t nv = io::take_u64(payload);
    require(nv == nm, "checkpoint file: moment vectors disagree");
    ck.opt.v.resize(static_cast<size_t>(nv));
    for (Tensor& t : ck.opt.v) t = io::take_tensor(payload);
    ck.epoch = io::take_dim(payload);
    const uint64_t curve = io::take_u64(payload);
    require(curve <= (1 << 24), "checkpoint file: loss curve out of range");
    ck.loss_curve.resize(static_cast<size_t>(curve));
    for (double& l : ck.loss_curve) l = io::take_f64(payload);
    require(payload.peek() == std::istringstream::traits_type::eof(),
            "load_checkpoint: trailing bytes");
    return ck;
}

}  // namespace slotmix::nets
