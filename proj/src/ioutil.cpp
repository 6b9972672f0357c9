#include "ioutil.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "slotmix/common.hpp"

namespace slotmix::io {

namespace {

void put_le(std::ostream& os, uint64_t v, int n) {
    char buf[8];
    for (int i = 0; i < n; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(buf, n);
}

uint64_t take_le(std::istream& is, int n) {
    char buf[8];
    is.read(buf, n);
    require(is.good() && is.gcount() == n, "binary read: truncated input");
    uint64_t v = 0;
    for (int i = 0; i < n; ++i)
        v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
    return v;
}

}  // namespace

void put_u8(std::ostream& os, uint8_t v) { put_le(os, v, 1); }
void put_u64(std::ostream& os, uint64_t v) { put_le(os, v, 8); }
void put_i64(std::ostream& os, int64_t v) { put_le(os, static_cast<uint64_t>(v), 8); }

void put_f64(std::ostream& os, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_le(os, bits, 8);
}

void put_tensor(std::ostream& os, const Tensor& t) {
    put_i64(os, t.rows);
    put_i64(os, t.cols);
    for (double v : t.data) put_f64(os, v);
}

void put_string(std::ostream& os, const std::string& s) {
    put_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint8_t take_u8(std::istream& is) { return static_cast<uint8_t>(take_le(is, 1)); }
uint64_t take_u64(std::istream& is) { return take_le(is, 8); }
int64_t take_i64(std::istream& is) { return static_cast<int64_t>(take_le(is, 8)); }

double take_f64(std::istream& is) {
    const uint64_t bits = take_le(is, 8);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

int take_dim(std::istream& is) {
    const int64_t v = take_i64(is);
    require(v >= 0 && v <= (1 << 30), "binary read: dimension out of range");
    return static_cast<int>(v);
}

Tensor take_tensor(std::istream& is) {
    const int rows = take_dim(is);
    const int cols = take_dim(is);
    require(static_cast<int64_t>(rows) * cols <= (1 << 28),
            "binary read: tensor too large");
    Tensor t(rows, cols);
    for (double& v : t.data) v = take_f64(is);
    return t;
}

std::string take_string(std::istream& is) {
    const uint64_t n = take_u64(is);
    require(n <= (1 << 20), "binary read: string too long");
    std::string s(static_cast<size_t>(n), '\0');
    if (n > 0) {
        is.read(s.data(), static_cast<std::streamsize>(n));
        require(is.good() && static_cast<uint64_t>(is.gcount()) == n,
                "binary read: truncated input");
    }
    return s;
}

namespace {
constexpr char kDigestTag[] = "SLMXDIGF";  // 8 bytes, no terminator stored
}

std::string strip_digest_trailer(std::string bytes) {
    // A false positive would chop 16 real bytes, but the checksum check that
    // follows in every loader catches that; a trailered file without the
    // strip fails the same check, so the formats stay unambiguous.
    if (bytes.size() >= 16 && bytes.compare(bytes.size() - 16, 8, kDigestTag, 8) == 0) {
        bytes.resize(bytes.size() - 16);
    }
    return bytes;
}

void append_digest_trailer(const std::string& path, uint64_t digest) {
    std::ofstream os(path, std::ios::binary | std::ios::app);
    require(os.good(), "digest trailer: cannot open " + path);
    os.write(kDigestTag, 8);
    put_u64(os, digest);
    os.flush();
    require(os.good(), "digest trailer: write failed for " + path);
}

}  // namespace slotmix::io
