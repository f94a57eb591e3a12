#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hdwsr/tensor.hpp"

namespace hdwsr {

// Forward-process constants for T steps, 1-indexed by timestep: beta[t-1] is
// the variance added at step t, alpha_bar[t-1] the cumulative product.
template <class S>
struct NoiseSchedule {
  int steps = 0;
  VecX<S> beta, alpha, alpha_bar;

  // alpha_bar at timestep t with the closure alpha_bar(0) = 1.
  S alpha_bar_at(int t) const {
    if (t < 0 || t > steps)
      throw IndexError("alpha_bar_at: t=" + std::to_string(t) + " outside 0.." +
                       std::to_string(steps));
    return t == 0 ? S(1) : alpha_bar[t - 1];
  }

  void require_step(int t, const char* where) const {
    if (t < 1 || t > steps)
      throw IndexError(std::string(where) + ": t=" + std::to_string(t) + " outside 1.." +
                       std::to_string(steps));
  }
};

// Linear beta schedule.
template <class S>
NoiseSchedule<S> make_schedule(int steps, S beta_start, S beta_end) {
  if (steps < 1) throw ConfigError("make_schedule: steps must be >= 1");
  if (!(beta_start > S(0)) || !(beta_end < S(1)) || !(beta_start <= beta_end))
    throw ConfigError("make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule<S> s;
  s.steps = steps;
  s.beta.resize(steps);
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  for (int t = 0; t < steps; ++t) {
    const S frac = steps == 1 ? S(0) : S(t) / S(steps - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = S(1) - s.beta[t];
    s.alpha_bar[t] = (t == 0 ? s.alpha[t] : s.alpha_bar[t - 1] * s.alpha[t]);
  }
  return s;
}

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
template <class S>
Tensor<S> q_sample(const Tensor<S>& x0, int t, const Tensor<S>& eps,
                   const NoiseSchedule<S>& sched) {
  sched.require_step(t, "q_sample");
  require_same_dims(x0, eps, "q_sample");
  const S ab = sched.alpha_bar[t - 1];
  Tensor<S> out(x0.dims());
  out.array() = std::sqrt(ab) * x0.array() + std::sqrt(S(1) - ab) * eps.array();
  return out;
}

// Ancestral reverse update:
//   x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
//             + sigma_t z,  sigma_t^2 = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t).
// At t = 1 the variance is zero, so z must be zero there.
template <class S>
Tensor<S> reverse_step(const Tensor<S>& x_t, const Tensor<S>& eps_pred, int t,
                       const NoiseSchedule<S>& sched, const Tensor<S>& z) {
  sched.require_step(t, "reverse_step");
  require_same_dims(x_t, eps_pred, "reverse_step");
  require_same_dims(x_t, z, "reverse_step");
  const S beta = sched.beta[t - 1];
  const S alpha = sched.alpha[t - 1];
  const S ab = sched.alpha_bar[t - 1];
  const S ab_prev = sched.alpha_bar_at(t - 1);
  if (t == 1 && z.array().abs().maxCoeff() != S(0))
    throw ContractError("reverse_step: z must be zero at t=1");
  const S sigma = std::sqrt(beta * (S(1) - ab_prev) / (S(1) - ab));
  Tensor<S> out(x_t.dims());
  out.array() = (x_t.array() - (beta / std::sqrt(S(1) - ab)) * eps_pred.array()) /
                    std::sqrt(alpha) +
                sigma * z.array();
  return out;
}

// Residual target the diffusion operates on. No clamping here; residuals are
// signed by construction.
template <class S>
Tensor<S> form_pair(const Tensor<S>& hr, const Tensor<S>& presr) {
  require_same_dims(hr, presr, "form_pair");
  Tensor<S> out(hr.dims());
  out.array() = hr.array() - presr.array();
  return out;
}

// Final image assembly; the only place values are clamped to [0, 1].
template <class S>
Tensor<S> compose_sr(const Tensor<S>& presr, const Tensor<S>& residual) {
  require_same_dims(presr, residual, "compose_sr");
  Tensor<S> out(presr.dims());
  out.array() = (presr.array() + residual.array()).min(S(1)).max(S(0));
  return out;
}

// Mean squared error over all elements.
template <class S>
S loss_ha(const Tensor<S>& eps_true, const Tensor<S>& eps_pred) {
  require_same_dims(eps_true, eps_pred, "loss_ha");
  return (eps_true.array() - eps_pred.array()).square().mean();
}

template <class S>
struct LossTerms {
  S l_he, l_ha, beta_weight, total;
};

// total = beta * l_he + (1 - beta) * l_ha, beta strictly inside (0, 1).
template <class S>
LossTerms<S> loss_total(S l_he, S l_ha, S beta_weight) {
  if (!(beta_weight > S(0)) || !(beta_weight < S(1)))
    throw ConfigError("loss_total: beta_weight must lie strictly in (0,1)");
  return LossTerms<S>{l_he, l_ha, beta_weight,
                      beta_weight * l_he + (S(1) - beta_weight) * l_ha};
}

}  // namespace hdwsr
