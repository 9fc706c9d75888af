#include "stlt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_map>

#include "stlt/errors.hpp"

namespace stlt {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'L', 'T', 'C', 'K', 'P', 'T'};

template <typename U>
void put_le(std::ostream& os, U value) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(value >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw DataError("checkpoint: truncated file");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(buf[i]) << (8 * i);
  return value;
}

void put_string(std::ostream& os, const std::string& s) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_bytes(std::istream& is, std::uint64_t n) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw DataError("checkpoint: truncated file");
  return s;
}

}  // namespace

const TensorEntry* Container::find_tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const TextEntry* Container::find_text(const std::string& name) const {
  for (const auto& t : texts)
    if (t.name == name) return &t;
  return nullptr;
}

void write_container(std::ostream& os, const Container& c) {
  os.write(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(os, kCheckpointVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(c.texts.size() + c.tensors.size()));
  for (const auto& t : c.texts) {
    put_le<std::uint8_t>(os, 1);
    put_string(os, t.name);
    put_le<std::uint64_t>(os, t.text.size());
    os.write(t.text.data(), static_cast<std::streamsize>(t.text.size()));
  }
  for (const auto& t : c.tensors) {
    put_le<std::uint8_t>(os, 0);
    put_string(os, t.name);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t e : t.shape) put_le<std::uint64_t>(os, e);
    for (double v : t.values) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw Error("checkpoint: write failed");
}

Container read_container(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  const auto version = get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto count = get_le<std::uint32_t>(is);
  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto kind = get_le<std::uint8_t>(is);
    std::string name = get_bytes(is, get_le<std::uint32_t>(is));
    if (kind == 1) {
      std::string text = get_bytes(is, get_le<std::uint64_t>(is));
      c.texts.push_back({std::move(name), std::move(text)});
    } else if (kind == 0) {
      const auto rank = get_le<std::uint32_t>(is);
      if (rank == 0 || rank > 8) throw DataError("checkpoint: bad rank for " + name);
      Shape shape(rank);
      for (auto& e : shape) e = get_le<std::uint64_t>(is);
      const std::size_t n = shape_size(shape);
      if (n == 0 || n > (std::size_t{1} << 32)) throw DataError("checkpoint: bad shape for " + name);
      std::vector<double> values(n);
      for (double& v : values) v = std::bit_cast<double>(get_le<std::uint64_t>(is));
      c.tensors.push_back({std::move(name), std::move(shape), std::move(values)});
    } else {
      throw DataError("checkpoint: unknown entry kind " + std::to_string(kind));
    }
  }
  return c;
}

void save_container(const std::filesystem::path& path, const Container& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("checkpoint: cannot open " + path.string() + " for writing");
  write_container(os, c);
}

Container load_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path.string());
  return read_container(is);
}

std::vector<TensorEntry> snapshot(const NamedTensors& params) {
  std::vector<TensorEntry> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) {
    out.push_back({name, t.shape(), std::vector<double>(t.values().begin(), t.values().end())});
  }
  return out;
}

void restore(const NamedTensors& params, const std::vector<TensorEntry>& entries) {
  std::unordered_map<std::string, const TensorEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (const auto& [name, t] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint: missing parameter " + name);
    if (it->second->shape != t.shape()) {
      throw DataError("checkpoint: shape mismatch for " + name + ": " +
                      shape_string(it->second->shape) + " vs " + shape_string(t.shape()));
    }
    Tensor handle = t;
    auto dst = handle.mutable_values();
    std::copy(it->second->values.begin(), it->second->values.end(), dst.begin());
  }
}

}  // namespace stlt
