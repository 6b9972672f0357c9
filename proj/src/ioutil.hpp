#pragma once

// Little-endian binary primitives for the artifact file formats. Doubles are
// stored as their IEEE-754 bit patterns, so round-trips are bit-exact by
// construction. Readers throw contract_error on truncated or malformed input.

#include <cstdint>
#include <iosfwd>
#include <string>

#include "slotmix/tensor.hpp"

namespace slotmix::io {

void put_u8(std::ostream& os, uint8_t v);
void put_u64(std::ostream& os, uint64_t v);
void put_i64(std::ostream& os, int64_t v);
void put_f64(std::ostream& os, double v);
void put_tensor(std::ostream& os, const Tensor& t);
void put_string(std::ostream& os, const std::string& s);

uint8_t take_u8(std::istream& is);
uint64_t take_u64(std::istream& is);
int64_t take_i64(std::istream& is);
double take_f64(std::istream& is);
Tensor take_tensor(std::istream& is);
std::string take_string(std::istream& is);

// i64 narrowed to int with a range check, for dimension fields
int take_dim(std::istream& is);

// Binary artifacts written by the experiment harness carry the run's
// configuration digest as a 16-byte trailer (tag + u64) appended after the
// checksum footer. Loaders strip it before parsing, so stamped and unstamped
// files both load; the checksum still covers everything in front of it.
std::string strip_digest_trailer(std::string bytes);
void append_digest_trailer(const std::string& path, uint64_t digest);

}  // namespace slotmix::io
