#pragma once

#include "chivi/common.hpp"

#include <cmath>

namespace chivi {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

inline double log_normal_pdf(double x, double mean, double sd) {
  const double u = (x - mean) / sd;
  return -0.5 * u * u - std::log(sd) - 0.5 * kLog2Pi;
}

// log Phi(t) for the standard normal CDF. erfc carries the computation down
// to t ~ -10; below that an asymptotic tail expansion keeps full relative
// accuracy where erfc would lose it and eventually underflow.
inline double log_ndtr(double t) {
  if (t > -10.0) {
    return std::log(0.5 * std::erfc(-t / std::sqrt(2.0)));
  }
  const double t2 = t * t;
  // Phi(t) ~ phi(t)/(-t) * (1 - 1/t^2 + 3/t^4 - 15/t^6 + 105/t^8 - 945/t^10)
  const double t4 = t2 * t2;
  const double series = 1.0 - 1.0 / t2 + 3.0 / t4 - 15.0 / (t4 * t2) +
                        105.0 / (t4 * t4) - 945.0 / (t4 * t4 * t2);
  return -0.5 * t2 - 0.5 * kLog2Pi - std::log(-t) + std::log(series);
}

// d/dt log Phi(t) = phi(t)/Phi(t), stable in the far-negative tail.
inline double ndtr_grad_ratio(double t) {
  if (t > -10.0) {
    const double log_pdf = -0.5 * t * t - 0.5 * kLog2Pi;
    return std::exp(log_pdf - log_ndtr(t));
  }
  const double t2 = t * t;
  const double t4 = t2 * t2;
  const double series = 1.0 - 1.0 / t2 + 3.0 / t4 - 15.0 / (t4 * t2) +
                        105.0 / (t4 * t4) - 945.0 / (t4 * t4 * t2);
  return -t / series;
}

inline double ndtr(double t) { return std::exp(log_ndtr(t)); }

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // (n-1) denominator
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  const auto n = static_cast<double>(xs.size());
  if (xs.empty()) return r;
  r.mean = pairwise_sum(xs) / n;
  if (xs.size() < 2) return r;
  std::vector<double> sq(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double d = xs[i] - r.mean;
    sq[i] = d * d;
  }
  r.std = std::sqrt(pairwise_sum(sq) / (n - 1.0));
  return r;
}

}  // namespace chivi
