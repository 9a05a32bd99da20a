#include "ulike/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

namespace ulike {

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("truncated u32 field");
  return v;
}

void expect_magic(std::istream& is, const char (&magic)[8], const char* what) {
  std::array<char, 8> buf{};
  if (!is.read(buf.data(), 8) || std::memcmp(buf.data(), magic, 8) != 0) {
    throw FormatError(std::string("bad ") + what + " magic");
  }
}

template <typename S, typename T>
Tensor<T> read_payload(std::istream& is, Extents shape) {
  std::vector<S> raw(static_cast<std::size_t>(element_count(shape)));
  if (!is.read(reinterpret_cast<char*>(raw.data()),
               static_cast<std::streamsize>(raw.size() * sizeof(S)))) {
    throw FormatError("truncated tensor payload");
  }
  return Tensor<T>(std::move(shape), std::vector<T>(raw.begin(), raw.end()));
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic, 8);
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (Index e : t.shape()) write_u32(os, static_cast<std::uint32_t>(e));
  const auto tag = static_cast<std::uint8_t>(dtype_of<T>());
  os.write(reinterpret_cast<const char*>(&tag), 1);
  os.write(reinterpret_cast<const char*>(t.raw()),
           static_cast<std::streamsize>(t.size() * static_cast<Index>(sizeof(T))));
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  expect_magic(is, kTensorMagic, "tensor");
  const std::uint32_t rank = read_u32(is);
  if (rank == 0 || rank > 16) throw FormatError("unsupported tensor rank " + std::to_string(rank));
  Extents shape(rank);
  for (auto& e : shape) {
    e = read_u32(is);
    if (e == 0) throw FormatError("zero extent in tensor record");
  }
  std::uint8_t tag = 0;
  if (!is.read(reinterpret_cast<char*>(&tag), 1)) throw FormatError("truncated dtype tag");
  switch (static_cast<DType>(tag)) {
    case DType::Float32:
      return read_payload<float, T>(is, std::move(shape));
    case DType::Float64:
      return read_payload<double, T>(is, std::move(shape));
  }
  throw FormatError("unknown dtype tag " + std::to_string(tag));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_tensor<T>(is);
}

template <typename T>
void write_checkpoint(std::ostream& os, const NamedTensors<T>& entries) {
  os.write(kCheckpointMagic, 8);
  write_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

template <typename T>
NamedTensors<T> read_checkpoint(std::istream& is) {
  expect_magic(is, kCheckpointMagic, "checkpoint");
  const std::uint32_t n = read_u32(is);
  NamedTensors<T> out;
  out.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t len = read_u32(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated parameter name");
    out.emplace_back(std::move(name), read_tensor<T>(is));
  }
  return out;
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t hash_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  const std::string bytes = ss.str();
  return fnv1a64(bytes.data(), bytes.size());
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

#define ULIKE_INSTANTIATE(T)                                               \
  template void write_tensor(std::ostream&, const Tensor<T>&);             \
  template Tensor<T> read_tensor(std::istream&);                           \
  template void save_tensor(const std::string&, const Tensor<T>&);         \
  template Tensor<T> load_tensor(const std::string&);                      \
  template void write_checkpoint(std::ostream&, const NamedTensors<T>&);   \
  template NamedTensors<T> read_checkpoint(std::istream&);

ULIKE_INSTANTIATE(float)
ULIKE_INSTANTIATE(double)

}  // namespace ulike
