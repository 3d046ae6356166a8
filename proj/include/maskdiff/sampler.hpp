#pragma once

#include <string>
#include <vector>

#include "maskdiff/denoiser.hpp"
#include "maskdiff/image.hpp"
#include "maskdiff/maskops.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

enum class SamplerKind { Ancestral, DeterministicSkip };

// Minimal prediction interface so the sampler can run against the trained
// model or a hand-built stub.
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    virtual UNet<float>::Output predict(const UNet<float>::Batch& in) = 0;
    virtual int image_channels() const = 0;
    virtual int resolution() const = 0;
};

class DenoiserPredictor : public NoisePredictor {
public:
    explicit DenoiserPredictor(Denoiser& model) : model_(model) {}
    UNet<float>::Output predict(const UNet<float>::Batch& in) override {
        return model_.net().forward(in, /*training=*/false);
    }
    int image_channels() const override { return model_.config().image_channels; }
    int resolution() const override { return model_.config().resolution; }

private:
    Denoiser& model_;
};

struct SampleRequest {
    Image x0;
    PrecisionMask mask;  // input mask with its precision indicator
    Condition cond;
    int steps = 50;
    double guidance_scale = 2.0;
    SamplerKind kind = SamplerKind::DeterministicSkip;
    int mask_switch_step = 10;  // 0 disables the predicted-mask switch
    double mask_switch_threshold = 0.5;
    uint64_t seed = 0;
    bool trace = false;

    void validate(const NoiseSchedule& sched) const;
};

struct SampleResult {
    Image output;
    InstanceMask final_mask;       // active mask used in the last composition
    std::vector<TensorF> trace;    // per-step soft mask predictions (H,W)
    uint64_t seed = 0;             // rng provenance
    int empty_mask_fallbacks = 0;  // times the predicted mask was empty
};

// x_T = noise inside the mask, x0 outside (background copied bit-exactly).
Image init_latent(const Image& x0, const InstanceMask& m, const NoiseSchedule& sched, Rng& rng);

struct GuidedEps {
    TensorF eps;          // combined prediction
    TensorF mask_logits;  // from the conditional pass
};

// eps_null + w * (eps_cond - eps_null); w==0 and w==1 short-circuit to the
// respective single pass so those cases are exact.
GuidedEps guided_eps(NoisePredictor& model, const Image& x_t, const InstanceMask& m, int t,
                     const Condition& c, int s, double w);

// One reverse step inside the active mask; outside it the latent is replaced
// with the forward-noised background at t_prev (the clean image when
// t_prev == 0).
Image blended_step(const Image& x_t, const TensorF& eps_hat, const InstanceMask& active_mask, int t,
                   int t_prev, const Image& x0, const NoiseSchedule& sched, Rng& rng, SamplerKind kind);

SampleResult sample_inpaint(NoisePredictor& model, const SampleRequest& req, const NoiseSchedule& sched);

// Vectorized variant for evaluation sweeps; all requests must share steps and
// sampler kind. Per-request randomness comes from each request's own seed, and
// conditional/null passes are folded into one forward per step.
std::vector<SampleResult> sample_inpaint_batch(NoisePredictor& model,
                                               const std::vector<SampleRequest>& reqs,
                                               const NoiseSchedule& sched);

// Strictly decreasing timestep ladder T = times[0] > ... > times[steps] = 0.
std::vector<int> sampling_times(int T, int steps);

}  // namespace maskdiff
