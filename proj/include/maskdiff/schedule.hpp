#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "maskdiff/image.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Variance schedule for the forward noising chain plus every closed-form
// derived table. Steps are addressed 1..T externally; alpha_bar(0) == 1 by
// convention so terminal reverse steps need no special casing. Immutable
// after construction.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;                // beta_t, index 0 is t=1
    std::vector<double> alphas;               // 1 - beta_t
    std::vector<double> alpha_bars;           // running product of alphas
    std::vector<double> posterior_variances;  // beta_t * (1-abar_{t-1}) / (1-abar_t)

    double beta(int t) const { return betas[check(t) - 1]; }
    double alpha(int t) const { return alphas[check(t) - 1]; }
    double posterior_variance(int t) const { return posterior_variances[check(t) - 1]; }

    // Defined for t in 0..T; alpha_bar(0) == 1.
    double alpha_bar(int t) const {
        if (t == 0) return 1.0;
        return alpha_bars[check(t) - 1];
    }

private:
    int check(int t) const {
        if (t < 1 || t > T) throw std::out_of_range("NoiseSchedule: step index t=" + std::to_string(t) +
                                                    " outside 1.." + std::to_string(T));
        return t;
    }
};

// Linear beta ramp, endpoints inclusive.
NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end);

namespace detail {
template <typename S>
void check_step(int t, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T)
        throw std::out_of_range("step index t=" + std::to_string(t) + " outside 1.." + std::to_string(sched.T));
}
}  // namespace detail

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps, elementwise. t==0 returns x0.
template <typename S>
ImageT<S> q_sample(const ImageT<S>& x0, int t, const Tensor<S>& eps, const NoiseSchedule& sched) {
    x0.data.check_same_shape(eps, "q_sample");
    if (t == 0) return {x0.data, ImageRole::Clean};
    detail::check_step<S>(t, sched);
    const double abar = sched.alpha_bar(t);
    const S a = static_cast<S>(std::sqrt(abar));
    const S b = static_cast<S>(std::sqrt(1.0 - abar));
    ImageT<S> out(Tensor<S>(x0.data.shape()), ImageRole::Noisy);
    for (int64_t i = 0; i < x0.data.numel(); ++i) out.data[i] = a * x0.data[i] + b * eps[i];
    return out;
}

// Noise only inside the mask; background pixels are copied, never recomputed,
// so they stay bit-identical to x0. Mask is (H,W) with values in {0,1} and
// broadcasts over channels.
template <typename S, typename M>
ImageT<S> masked_q_sample(const ImageT<S>& x0, const Tensor<M>& mask, int t, const Tensor<S>& eps,
                          const NoiseSchedule& sched) {
    x0.data.check_same_shape(eps, "masked_q_sample");
    if (mask.rank() != 2 || mask.dim(0) != x0.height() || mask.dim(1) != x0.width())
        throw std::invalid_argument("masked_q_sample: mask shape does not match image spatial dims");
    for (int64_t i = 0; i < mask.numel(); ++i)
        if (mask[i] != M(0) && mask[i] != M(1))
            throw std::invalid_argument("masked_q_sample: mask values must be 0 or 1");
    detail::check_step<S>(t, sched);

    const double abar = sched.alpha_bar(t);
    const S a = static_cast<S>(std::sqrt(abar));
    const S b = static_cast<S>(std::sqrt(1.0 - abar));
    ImageT<S> out(Tensor<S>(x0.data.shape()), ImageRole::Noisy);
    const int C = x0.channels(), H = x0.height(), W = x0.width();
    for (int c = 0; c < C; ++c) {
        const int64_t base = static_cast<int64_t>(c) * H * W;
        for (int64_t p = 0; p < static_cast<int64_t>(H) * W; ++p) {
            const int64_t i = base + p;
            out.data[i] = mask[p] != M(0) ? a * x0.data[i] + b * eps[i] : x0.data[i];
        }
    }
    return out;
}

// x0_hat = (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)
template <typename S>
ImageT<S> predict_x0(const ImageT<S>& xt, const Tensor<S>& eps_hat, int t, const NoiseSchedule& sched) {
    xt.data.check_same_shape(eps_hat, "predict_x0");
    detail::check_step<S>(t, sched);
    const double abar = sched.alpha_bar(t);
    const S inv_a = static_cast<S>(1.0 / std::sqrt(abar));
    const S b = static_cast<S>(std::sqrt(1.0 - abar));
    ImageT<S> out(Tensor<S>(xt.data.shape()), ImageRole::Clean);
    for (int64_t i = 0; i < xt.data.numel(); ++i) out.data[i] = (xt.data[i] - b * eps_hat[i]) * inv_a;
    return out;
}

// Ancestral reverse step with the posterior variance held fixed. noise is
// ignored at t=1 (the final step is deterministic).
template <typename S>
ImageT<S> ddpm_step(const ImageT<S>& xt, const Tensor<S>& eps_hat, int t, const NoiseSchedule& sched,
                    const Tensor<S>* noise) {
    xt.data.check_same_shape(eps_hat, "ddpm_step");
    detail::check_step<S>(t, sched);
    const double alpha = sched.alpha(t);
    const double abar = sched.alpha_bar(t);
    const S inv_sqrt_alpha = static_cast<S>(1.0 / std::sqrt(alpha));
    const S eps_coef = static_cast<S>((1.0 - alpha) / std::sqrt(1.0 - abar));
    const double sigma = t > 1 ? std::sqrt(sched.posterior_variance(t)) : 0.0;
    if (sigma > 0.0 && noise == nullptr)
        throw std::invalid_argument("ddpm_step: noise required for t > 1");
    if (noise != nullptr) xt.data.check_same_shape(*noise, "ddpm_step noise");

    ImageT<S> out(Tensor<S>(xt.data.shape()), ImageRole::Noisy);
    const S sig = static_cast<S>(sigma);
    for (int64_t i = 0; i < xt.data.numel(); ++i) {
        S mean = inv_sqrt_alpha * (xt.data[i] - eps_coef * eps_hat[i]);
        out.data[i] = sigma > 0.0 ? mean + sig * (*noise)[i] : mean;
    }
    return out;
}

// Deterministic-skip reverse step through the x0 estimate. eta in [0,1]
// interpolates toward the ancestral variance; noise is only consumed when
// the resulting sigma is positive. t_prev may be 0 (returns x0_hat).
template <typename S>
ImageT<S> ddim_step(const ImageT<S>& xt, const Tensor<S>& eps_hat, int t, int t_prev,
                    const NoiseSchedule& sched, double eta, const Tensor<S>* noise = nullptr) {
    xt.data.check_same_shape(eps_hat, "ddim_step");
    detail::check_step<S>(t, sched);
    if (t_prev >= t) throw std::invalid_argument("ddim_step: t_prev must be < t");
    if (t_prev < 0) throw std::invalid_argument("ddim_step: t_prev must be >= 0");
    if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("ddim_step: eta must be in [0,1]");

    const double abar_t = sched.alpha_bar(t);
    const double abar_prev = sched.alpha_bar(t_prev);
    const double sigma =
        eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * std::sqrt(1.0 - abar_t / abar_prev);
    const double dir_coef_sq = 1.0 - abar_prev - sigma * sigma;
    const S a0 = static_cast<S>(std::sqrt(abar_prev));
    const S dir = static_cast<S>(std::sqrt(dir_coef_sq > 0.0 ? dir_coef_sq : 0.0));
    const S inv_sqrt_abar_t = static_cast<S>(1.0 / std::sqrt(abar_t));
    const S b_t = static_cast<S>(std::sqrt(1.0 - abar_t));

    if (sigma > 0.0 && noise == nullptr)
        throw std::invalid_argument("ddim_step: noise required when eta > 0");

    ImageT<S> out(Tensor<S>(xt.data.shape()), t_prev == 0 ? ImageRole::Clean : ImageRole::Noisy);
    const S sig = static_cast<S>(sigma);
    for (int64_t i = 0; i < xt.data.numel(); ++i) {
        const S x0_hat = (xt.data[i] - b_t * eps_hat[i]) * inv_sqrt_abar_t;
        S v = a0 * x0_hat + dir * eps_hat[i];
        if (sigma > 0.0) v += sig * (*noise)[i];
        out.data[i] = v;
    }
    return out;
}

}  // namespace maskdiff
