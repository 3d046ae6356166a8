#pragma once

#include "maskdiff/denoiser.hpp"
#include "maskdiff/maskops.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

struct LossConfig {
    double lambda = 0.01;               // weight on the mask-prediction loss
    bool apply_prediction_loss = true;  // off for text-to-image items

    void validate() const;
};

struct LossBreakdown {
    double total = 0.0;
    double seg = 0.0;
    double dice = 0.0;
};

// Mean squared error between the drawn noise and the prediction, over all
// elements.
template <typename S>
S seg_dm_loss_t(const Tensor<S>& eps, const Tensor<S>& eps_hat);

double seg_dm_loss(const TensorF& eps, const DenoiserOutput& out);

// Soft DICE on probabilities: 1 - (2*sum(p*y)+smooth)/(sum(p)+sum(y)+smooth).
// target holds 0/1 values; pred must lie in [0,1].
template <typename S>
S dice_loss_t(const Tensor<S>& pred_prob, const Tensor<S>& target, S smooth);

double dice_loss(const TensorF& pred_prob, const InstanceMask& target, double smooth = 1.0);

// Analytic gradients used by the trainer and checked against finite
// differences in the tests.
template <typename S>
void seg_dm_loss_grad(const Tensor<S>& eps, const Tensor<S>& eps_hat, Tensor<S>& d_eps_hat);

// DICE evaluated through the sigmoid; optionally writes d(loss)/d(logits).
template <typename S>
S dice_loss_from_logits(const Tensor<S>& logits, const Tensor<S>& target, S smooth,
                        Tensor<S>* d_logits);

// seg + lambda * dice (dice gated by apply_prediction_loss), plus the
// component breakdown for logging.
LossBreakdown total_loss(const TensorF& eps, const DenoiserOutput& out, const InstanceMask& target_mask,
                         const LossConfig& cfg);

template <typename S>
struct TotalLossGrads {
    S total, seg, dice;
    Tensor<S> d_eps_hat;
    Tensor<S> d_mask_logits;
};

// Differentiable path used by training: takes raw logits instead of
// probabilities so the sigmoid is part of the gradient.
template <typename S>
TotalLossGrads<S> total_loss_with_grads(const Tensor<S>& eps, const Tensor<S>& eps_hat,
                                        const Tensor<S>& mask_logits, const Tensor<S>& target,
                                        const LossConfig& cfg, S smooth);

}  // namespace maskdiff
