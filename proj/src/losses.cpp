#include "maskdiff/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace maskdiff {

void LossConfig::validate() const {
    if (lambda < 0.0) throw std::invalid_argument("LossConfig: lambda must be >= 0");
}

template <typename S>
S seg_dm_loss_t(const Tensor<S>& eps, const Tensor<S>& eps_hat) {
    eps.check_same_shape(eps_hat, "seg_dm_loss");
    double acc = 0.0;
    for (int64_t i = 0; i < eps.numel(); ++i) {
        const double d = static_cast<double>(eps_hat[i]) - eps[i];
        acc += d * d;
    }
    return static_cast<S>(acc / static_cast<double>(eps.numel()));
}

double seg_dm_loss(const TensorF& eps, const DenoiserOutput& out) {
    return seg_dm_loss_t<float>(eps, out.eps_hat);
}

template <typename S>
S dice_loss_t(const Tensor<S>& pred_prob, const Tensor<S>& target, S smooth) {
    pred_prob.check_same_shape(target, "dice_loss");
    double inter = 0.0, psum = 0.0, ysum = 0.0;
    for (int64_t i = 0; i < pred_prob.numel(); ++i) {
        const double p = pred_prob[i];
        const double y = target[i];
        if (p < 0.0 || p > 1.0) throw std::invalid_argument("dice_loss: prediction outside [0,1]");
        inter += p * y;
        psum += p;
        ysum += y;
    }
    return static_cast<S>(1.0 - (2.0 * inter + smooth) / (psum + ysum + static_cast<double>(smooth)));
}

double dice_loss(const TensorF& pred_prob, const InstanceMask& target, double smooth) {
    TensorF t2 = target.as<float>();
    // pred may carry a leading singleton channel from the mask head
    TensorF p = pred_prob;
    if (p.rank() == 3 && p.dim(0) == 1) {
        TensorF flat({p.dim(1), p.dim(2)});
        for (int64_t i = 0; i < flat.numel(); ++i) flat[i] = p[i];
        p = flat;
    }
    return dice_loss_t<float>(p, t2, static_cast<float>(smooth));
}

template <typename S>
void seg_dm_loss_grad(const Tensor<S>& eps, const Tensor<S>& eps_hat, Tensor<S>& d_eps_hat) {
    eps.check_same_shape(eps_hat, "seg_dm_loss_grad");
    d_eps_hat = Tensor<S>(eps.shape());
    const double inv_n = 2.0 / static_cast<double>(eps.numel());
    for (int64_t i = 0; i < eps.numel(); ++i)
        d_eps_hat[i] = static_cast<S>(inv_n * (static_cast<double>(eps_hat[i]) - eps[i]));
}

template <typename S>
S dice_loss_from_logits(const Tensor<S>& logits, const Tensor<S>& target, S smooth, Tensor<S>* d_logits) {
    logits.check_same_shape(target, "dice_loss_from_logits");
    const int64_t n = logits.numel();
    Tensor<S> prob(logits.shape());
    double inter = 0.0, psum = 0.0, ysum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
        prob[i] = static_cast<S>(p);
        inter += p * static_cast<double>(target[i]);
        psum += p;
        ysum += target[i];
    }
    const double num = 2.0 * inter + smooth;
    const double den = psum + ysum + static_cast<double>(smooth);
    const double loss = 1.0 - num / den;
    if (d_logits != nullptr) {
        *d_logits = Tensor<S>(logits.shape());
        const double den2 = den * den;
        for (int64_t i = 0; i < n; ++i) {
            const double p = prob[i];
            const double dl_dp = (num - 2.0 * static_cast<double>(target[i]) * den) / den2;
            (*d_logits)[i] = static_cast<S>(dl_dp * p * (1.0 - p));
        }
    }
    return static_cast<S>(loss);
}

LossBreakdown total_loss(const TensorF& eps, const DenoiserOutput& out, const InstanceMask& target_mask,
                         const LossConfig& cfg) {
    cfg.validate();
    LossBreakdown b;
    b.seg = seg_dm_loss(eps, out);
    if (cfg.apply_prediction_loss) {
        b.dice = dice_loss(predict_mask_prob(out), target_mask);
        b.total = b.seg + cfg.lambda * b.dice;
    } else {
        b.dice = 0.0;
        b.total = b.seg;
    }
    return b;
}

template <typename S>
TotalLossGrads<S> total_loss_with_grads(const Tensor<S>& eps, const Tensor<S>& eps_hat,
                                        const Tensor<S>& mask_logits, const Tensor<S>& target,
                                        const LossConfig& cfg, S smooth) {
    cfg.validate();
    TotalLossGrads<S> r;
    r.seg = seg_dm_loss_t<S>(eps, eps_hat);
    seg_dm_loss_grad<S>(eps, eps_hat, r.d_eps_hat);
    if (cfg.apply_prediction_loss) {
        r.dice = dice_loss_from_logits<S>(mask_logits, target, smooth, &r.d_mask_logits);
        for (int64_t i = 0; i < r.d_mask_logits.numel(); ++i)
            r.d_mask_logits[i] = static_cast<S>(cfg.lambda * r.d_mask_logits[i]);
        r.total = static_cast<S>(r.seg + static_cast<S>(cfg.lambda) * r.dice);
    } else {
        r.dice = S(0);
        r.d_mask_logits = Tensor<S>(mask_logits.shape());
        r.total = r.seg;
    }
    return r;
}

#define MASKDIFF_LOSS_INSTANTIATE(S)                                                            \
    template S seg_dm_loss_t<S>(const Tensor<S>&, const Tensor<S>&);                            \
    template S dice_loss_t<S>(const Tensor<S>&, const Tensor<S>&, S);                           \
    template void seg_dm_loss_grad<S>(const Tensor<S>&, const Tensor<S>&, Tensor<S>&);          \
    template S dice_loss_from_logits<S>(const Tensor<S>&, const Tensor<S>&, S, Tensor<S>*);     \
    template TotalLossGrads<S> total_loss_with_grads<S>(const Tensor<S>&, const Tensor<S>&,     \
                                                        const Tensor<S>&, const Tensor<S>&,    \
                                                        const LossConfig&, S);

MASKDIFF_LOSS_INSTANTIATE(float)
MASKDIFF_LOSS_INSTANTIATE(double)

#undef MASKDIFF_LOSS_INSTANTIATE

}  // namespace maskdiff
