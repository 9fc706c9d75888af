#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "stlt/nn.hpp"

namespace stlt {

// Container file of named entries.
//
//   magic "STLTCKPT" | u32 version | u32 entry count
//   entry: u8 kind | u32 name length | UTF-8 name | payload
//     kind 0 (tensor): u32 rank | u64 extents[rank] | f64 values (little endian)
//     kind 1 (text):   u64 byte length | bytes
//
// All integers are little endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct TextEntry {
  std::string name;
  std::string text;
};

struct Container {
  std::vector<TextEntry> texts;
  std::vector<TensorEntry> tensors;

  const TensorEntry* find_tensor(const std::string& name) const;
  const TextEntry* find_text(const std::string& name) const;
};

void write_container(std::ostream& os, const Container& c);
Container read_container(std::istream& is);
void save_container(const std::filesystem::path& path, const Container& c);
Container load_container(const std::filesystem::path& path);

// Snapshot of parameter values in collection order.
std::vector<TensorEntry> snapshot(const NamedTensors& params);
// Copies entries into the parameters by name. Every parameter must be present
// with an identical shape.
void restore(const NamedTensors& params, const std::vector<TensorEntry>& entries);

}  // namespace stlt
