#pragma once

#include <cstdint>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace slotmix {

// Thrown when a caller breaks a documented precondition. Maps to exit code 2.
struct contract_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Thrown when a computation degenerates (non-finite loss, singular system
// without a fallback). Maps to exit code 3.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool cond, const std::string& what);
void require_numeric(bool cond, const std::string& what);

// --- deterministic RNG -----------------------------------------------------
// xoshiro256** seeded via splitmix64. Fully specified here so that every
// artifact is bit-reproducible across platforms, independent of the standard
// library's distribution implementations.

uint64_t mix64(uint64_t x);

// Stable derivation of stream seeds from a base seed and context tags.
uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0);

class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    // uniform in [0, 1), 53-bit resolution
    double uniform();
    // standard normal via Box-Muller, second draw cached
    double normal();
    // unbiased integer in [0, n), rejection sampled
    uint64_t next_below(uint64_t n);

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t s_[4];
    double cached_ = 0.0;
    bool has_cached_ = false;
};

// --- hashing / formatting ---------------------------------------------------

uint64_t fnv1a64(const void* data, size_t n);
uint64_t fnv1a64(const std::string& s);
std::string to_hex(uint64_t v);

// shortest %.17g form; round-trip exact
std::string fmt_g17(double v);
// %.16e form; always 17 significant digits (serialization contract)
std::string fmt_e16(double v);

// --- numerics ---------------------------------------------------------------

// Order-independent log-sum-exp: summands are sorted before accumulation so
// the result is invariant under any permutation of `terms`. Mutates the buffer.
double logsumexp_sorted(std::vector<double>& terms);

// --- parallel loop ----------------------------------------------------------
// Runs fn(0..n-1) on up to `jobs` threads. Each index must write only to its
// own output slot; results are then independent of scheduling order.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn);

int default_jobs();

}  // namespace slotmix
