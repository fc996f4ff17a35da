#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ccdiff/tensor.hpp"

namespace ccdiff {

// All file outputs go through this: write to a temp file next to the target,
// then rename over it.
void atomic_write_file(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path); // IoError if unreadable

std::uint64_t fnv1a64(const void* data, std::size_t n);
inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// round-trip-exact double formatting for CSV outputs
std::string fmt_g17(double v);

// binary P5, 8-bit; values expected in [0,1] and clamped
void write_pgm(const std::string& path, const Tensor& img01);

// append little-endian scalars to a byte buffer
void put_u32(std::string& buf, std::uint32_t v);
void put_f64(std::string& buf, double v);
std::uint32_t get_u32(const std::string& buf, std::size_t& off);
double get_f64(const std::string& buf, std::size_t& off);

// Versioned named-tensor container, shared by denoiser and extractor
// checkpoints. Round-trips bit-exactly.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path);

} // namespace ccdiff
