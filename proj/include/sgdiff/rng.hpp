#pragma once

#include <array>
#include <cstdint>

namespace sgdiff {

/// Philox4x32-10 counter-based generator.
///
/// The stream is a pure function of (key, counter); there is no hidden global
/// state. `fork` derives an independent stream from a tag so that per-example
/// draws can be keyed by (epoch, example index) and replayed exactly.
class CounterRng {
 public:
  CounterRng() = default;
  explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0)
      : key_(key), counter_(counter) {}

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  /// Independent child stream; the parent is not advanced.
  CounterRng fork(std::uint64_t tag) const;
  CounterRng fork(std::uint64_t tag_a, std::uint64_t tag_b) const {
    return fork(tag_a).fork(tag_b);
  }

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

 private:
  void refill();

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sgdiff
