#include "ccdiff/schedule.hpp"

#include <cmath>

namespace ccdiff {

double NoiseSchedule::sqrt_alpha_bar(int t) const {
    return std::sqrt(alpha_bar[static_cast<std::size_t>(t)]);
}

double NoiseSchedule::sqrt_one_minus_alpha_bar(int t) const {
    return std::sqrt(1.0 - alpha_bar[static_cast<std::size_t>(t)]);
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ConfigError("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("make_schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.T = T;
    s.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
    s.alpha = s.beta;
    s.alpha_bar = s.beta;
    s.posterior_sigma = s.beta;
    s.alpha_bar[0] = 1.0;

    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
        const double b = beta_start + (beta_end - beta_start) * frac;
        s.beta[static_cast<std::size_t>(t)] = b;
        s.alpha[static_cast<std::size_t>(t)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<std::size_t>(t)] = prod;
        const double prev_ab = s.alpha_bar[static_cast<std::size_t>(t - 1)];
        s.posterior_sigma[static_cast<std::size_t>(t)] =
            std::sqrt((1.0 - prev_ab) / (1.0 - prod) * b);
    }
    return s;
}

static void check_t(const char* what, int t, const NoiseSchedule& s) {
    if (t < 1 || t > s.T)
        throw Error(std::string(what) + ": t=" + std::to_string(t) + " outside [1," +
                    std::to_string(s.T) + "]");
}

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
    check_t("forward_diffuse", t, s);
    if (!(x0.shape() == eps.shape()))
        throw ShapeError("forward_diffuse: x0 " + shape_str(x0.shape()) + " vs eps " +
                         shape_str(eps.shape()));
    return add(mul(x0, s.sqrt_alpha_bar(t)), mul(eps, s.sqrt_one_minus_alpha_bar(t)));
}

Tensor predict_x0_unclamped(const Tensor& x_t, const Tensor& eps_hat, int t,
                            const NoiseSchedule& s) {
    check_t("predict_x0_single_step", t, s);
    if (!(x_t.shape() == eps_hat.shape()))
        throw ShapeError("predict_x0_single_step: x_t " + shape_str(x_t.shape()) +
                         " vs eps_hat " + shape_str(eps_hat.shape()));
    return div(sub(x_t, mul(eps_hat, s.sqrt_one_minus_alpha_bar(t))), s.sqrt_alpha_bar(t));
}

Tensor predict_x0_single_step(const Tensor& x_t, const Tensor& eps_hat, int t,
                              const NoiseSchedule& s) {
    return clamp(predict_x0_unclamped(x_t, eps_hat, t, s), -1.0, 1.0);
}

Tensor ddpm_step(const Tensor& x_t, const Tensor& eps_hat, int t, const Tensor& z,
                 const NoiseSchedule& s) {
    check_t("ddpm_step", t, s);
    if (!(x_t.shape() == eps_hat.shape()))
        throw ShapeError("ddpm_step: x_t " + shape_str(x_t.shape()) + " vs eps_hat " +
                         shape_str(eps_hat.shape()));
    const double a = s.alpha[static_cast<std::size_t>(t)];
    const double coef = (1.0 - a) / s.sqrt_one_minus_alpha_bar(t);
    Tensor mean_part = div(sub(x_t, mul(eps_hat, coef)), std::sqrt(a));
    // posterior_sigma[1] == 0, so the noise term vanishes at the last step
    // either way; coerce z regardless to honor the contract exactly.
    const Tensor& zz = t == 1 ? Tensor::zeros(z.shape()) : z;
    if (!(zz.shape() == x_t.shape()))
        throw ShapeError("ddpm_step: z " + shape_str(z.shape()) + " vs x_t " +
                         shape_str(x_t.shape()));
    return add(mean_part, mul(zz, s.posterior_sigma[static_cast<std::size_t>(t)]));
}

Tensor sample_full(const DenoiseFn& model, const Tensor& c_v, const Tensor& c_t,
                   const NoiseSchedule& s, std::uint64_t seed) {
    if (c_v.rank() != 3) throw ShapeError("sample_full: c_v must be CxHxW");
    NoGradScope no_grad;
    const Shape xshape{1, c_v.dim(1), c_v.dim(2)};
    RngStream start(rng_key(seed, {rngtag::sample_start}));
    Tensor x = Tensor::randn(xshape, start);
    for (int t = s.T; t >= 1; --t) {
        Tensor eps_hat = model(x, t, c_t, c_v);
        RngStream zs(rng_key(seed, {rngtag::sample_noise, static_cast<std::uint64_t>(t)}));
        Tensor z = Tensor::randn(xshape, zs);
        x = ddpm_step(x, eps_hat, t, z, s);
    }
    return x;
}

} // namespace ccdiff
