#pragma once

#include "chivi/common.hpp"

#include <cstdint>
#include <random>

namespace chivi {

// A standard-normal draw together with the stream coordinates that produced
// it, so any draw can be regenerated exactly.
struct NoiseDraw {
  Vec eps;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::uint64_t index = 0;
};

// Seeded noise source. Distinct (seed, stream) pairs give independent
// sequences; the optimizer, the monitor, and parallel workers each get their
// own stream id.
class NoiseStream {
 public:
  NoiseStream(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {
    std::seed_seq seq{seed, stream};
    engine_.seed(seq);
  }

  NoiseDraw next(int dim) {
    NoiseDraw d;
    d.eps = Vec(dim);
    for (int i = 0; i < dim; ++i) d.eps[i] = normal_(engine_);
    d.seed = seed_;
    d.stream = stream_;
    d.index = index_++;
    return d;
  }

  double normal() { return normal_(engine_); }

  double uniform() { return uniform_(engine_); }

  // Uniform subsample of size m from [0, n) without replacement.
  std::vector<int> subsample(int n, int m) {
    require(m >= 1 && m <= n, "subsample: need 1 <= m <= n");
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = 0; i < m; ++i) {
      std::uniform_int_distribution<int> pick(i, n - 1);
      std::swap(idx[i], idx[pick(engine_)]);
    }
    idx.resize(m);
    return idx;
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t index_ = 0;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace chivi
