#pragma once
#include <cstdint>
#include <functional>

#include "ccdiff/tensor.hpp"

namespace ccdiff {

// Per-timestep diffusion tables, 1-indexed (index 0 unused; alpha_bar[0] := 1
// for the posterior formula).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;            // beta[1..T]
    std::vector<double> alpha;           // 1 - beta
    std::vector<double> alpha_bar;       // running product of alpha
    std::vector<double> posterior_sigma; // sigma_t of the ancestral step

    double sqrt_alpha_bar(int t) const;
    double sqrt_one_minus_alpha_bar(int t) const;
};

// Linear beta interpolation, endpoints inclusive (T=1 uses beta_start).
NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps
Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s);

// x0' = (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t), clamped to [-1,1].
// The unclamped variant exists for exact-inversion checks.
Tensor predict_x0_single_step(const Tensor& x_t, const Tensor& eps_hat, int t,
                              const NoiseSchedule& s);
Tensor predict_x0_unclamped(const Tensor& x_t, const Tensor& eps_hat, int t,
                            const NoiseSchedule& s);

// x_{t-1} = 1/sqrt(alpha_t) (x_t - (1-alpha_t)/sqrt(1-abar_t) eps_hat) + sigma_t z,
// with z forced to zero at t == 1.
Tensor ddpm_step(const Tensor& x_t, const Tensor& eps_hat, int t, const Tensor& z,
                 const NoiseSchedule& s);

using DenoiseFn = std::function<Tensor(const Tensor& x, int t, const Tensor& c_t,
                                       const Tensor& c_v)>;

// Ancestral sampling from seeded x_T ~ N(0,I), running t = T..1 without
// recording anything on a tape. Output is 1xHxW with H,W taken from c_v.
Tensor sample_full(const DenoiseFn& model, const Tensor& c_v, const Tensor& c_t,
                   const NoiseSchedule& s, std::uint64_t seed);

} // namespace ccdiff
