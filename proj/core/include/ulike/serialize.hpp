#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "ulike/tensor.hpp"

namespace ulike {

/// Binary tensor record:
///   8-byte magic "ULKTNSR1", u32 rank, rank × u32 extents, u8 dtype tag,
///   little-endian payload.
inline constexpr char kTensorMagic[8] = {'U', 'L', 'K', 'T', 'N', 'S', 'R', '1'};
/// Checkpoint: 8-byte magic "ULKCKPT1", u32 entry count, then per entry a
/// u32 name length, the UTF-8 name, and a tensor record.
inline constexpr char kCheckpointMagic[8] = {'U', 'L', 'K', 'C', 'K', 'P', 'T', '1'};

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::Float32; }
template <>
constexpr DType dtype_of<double>() { return DType::Float64; }

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);
/// Reads any stored dtype and converts to T.
template <typename T>
Tensor<T> read_tensor(std::istream& is);

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t);
template <typename T>
Tensor<T> load_tensor(const std::string& path);

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
void write_checkpoint(std::ostream& os, const NamedTensors<T>& entries);
template <typename T>
NamedTensors<T> read_checkpoint(std::istream& is);

/// 64-bit FNV-1a; stable across platforms.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t hash_file(const std::string& path);
std::string hex64(std::uint64_t v);

}  // namespace ulike
