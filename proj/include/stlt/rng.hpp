#pragma once

#include <cstdint>
#include <string_view>

namespace stlt {

// Counter-based generator: the n-th draw of a stream is a pure function of
// (key, n), so a stream can be split into independent child streams without
// touching the parent's sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  // Child stream derived from this stream's key and a label. Does not advance
  // this stream.
  Rng split(std::string_view label) const;
  Rng split(std::uint64_t index) const;

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  double normal();
  bool bernoulli(double p);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  Rng(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

  std::uint64_t key_;
  std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_string(std::string_view s);

}  // namespace stlt
