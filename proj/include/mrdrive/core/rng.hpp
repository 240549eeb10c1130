#pragma once

#include <cstdint>
#include <string_view>

namespace mrdrive::core {

// Deterministic RNG used everywhere. The standard engines are portable but
// the standard distributions are not, so uniform/normal are implemented by
// hand on top of xoshiro256++ and produce the same stream on every host.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  // uniform in [0, 1)
  double uniform();
  // uniform in [lo, hi)
  double uniform(double lo, double hi);
  // uniform integer in [0, n), n >= 1
  std::uint64_t uniform_int(std::uint64_t n);
  // standard normal via Box-Muller
  double normal();
  double normal(double mean, double stddev);
  // true with probability p
  bool bernoulli(double p);

 private:
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 step, the seed expander used by derive_seed.
std::uint64_t splitmix64(std::uint64_t& state);

// Splittable seed scheme: a master seed expands into independent named
// streams, e.g. derive_seed(master, "spawner", episode_index). Chains
// splitmix64 over the master seed, an FNV-1a hash of the tag, and the index.
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                          std::uint64_t index);

}  // namespace mrdrive::core
