#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace tvq {

// Deterministic random stream. Every component derives its own named
// substream from the single command seed, so reproducibility of one
// component survives config changes in another.
class Rng {
 public:
  explicit Rng(uint64_t seed);
  static Rng substream(uint64_t seed, std::string_view name, uint64_t index = 0);

  uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal(double mean = 0.0, double stddev = 1.0);
  int uniform_int(int n);  // [0, n), n >= 1
  std::vector<int> permutation(int n);

 private:
  uint64_t s_[4];
};

}  // namespace tvq
