#pragma once
// Diffusion noise schedules.  alpha_bar is stored with a leading 1 so index t
// is the cumulative product after t steps; index 0 means "clean".

#include <cmath>
#include <stdexcept>
#include <vector>

namespace patchsmith {

enum class ScheduleKind { Linear, Cosine };

struct ScheduleParams {
  double beta_min = 1e-4;
  double beta_max = 0.02;
};

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // beta[t-1] for t in 1..T
  std::vector<double> alpha;      // alpha_t = 1 - beta_t
  std::vector<double> alpha_bar;  // alpha_bar[t], size T+1, alpha_bar[0] = 1

  void check_t(int t, int lo) const {
    if (t < lo || t > T) throw std::invalid_argument("schedule: t out of range");
  }
  double beta_at(int t) const {
    check_t(t, 1);
    return beta[static_cast<std::size_t>(t - 1)];
  }
  double alpha_at(int t) const {
    check_t(t, 1);
    return alpha[static_cast<std::size_t>(t - 1)];
  }
  double abar(int t) const {
    check_t(t, 0);
    return alpha_bar[static_cast<std::size_t>(t)];
  }
  double sqrt_abar(int t) const { return std::sqrt(abar(t)); }
  double sqrt_one_minus_abar(int t) const { return std::sqrt(1.0 - abar(t)); }
};

inline NoiseSchedule build_schedule(int T, ScheduleKind kind = ScheduleKind::Linear,
                                    ScheduleParams params = {}) {
  if (T < 1) throw std::invalid_argument("build_schedule: T must be >= 1");
  NoiseSchedule ns;
  ns.T = T;
  ns.beta.resize(static_cast<std::size_t>(T));

  if (kind == ScheduleKind::Linear) {
    if (!(params.beta_min > 0.0) || !(params.beta_max < 1.0) ||
        params.beta_min > params.beta_max)
      throw std::invalid_argument("build_schedule: need 0 < beta_min <= beta_max < 1");
    for (int t = 1; t <= T; ++t) {
      double frac = (T == 1) ? 0.0 : static_cast<double>(t - 1) / (T - 1);
      ns.beta[static_cast<std::size_t>(t - 1)] =
          params.beta_min + frac * (params.beta_max - params.beta_min);
    }
  } else {
    // Squared-cosine cumulative curve with the usual small offset; betas are
    // clipped away from 1 to keep every alpha positive.
    const double off = 0.008;
    auto f = [&](double t) {
      double v = std::cos((t / T + off) / (1.0 + off) * 1.5707963267948966);
      return v * v;
    };
    double prev = 1.0;
    for (int t = 1; t <= T; ++t) {
      double cur = f(static_cast<double>(t)) / f(0.0);
      double b = 1.0 - cur / prev;
      b = std::min(std::max(b, 1e-8), 0.999);
      ns.beta[static_cast<std::size_t>(t - 1)] = b;
      prev *= (1.0 - b);
    }
  }

  ns.alpha.resize(static_cast<std::size_t>(T));
  ns.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
  ns.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    ns.alpha[static_cast<std::size_t>(t - 1)] = 1.0 - ns.beta[static_cast<std::size_t>(t - 1)];
    ns.alpha_bar[static_cast<std::size_t>(t)] =
        ns.alpha_bar[static_cast<std::size_t>(t - 1)] * ns.alpha[static_cast<std::size_t>(t - 1)];
  }
  return ns;
}

}  // namespace patchsmith
