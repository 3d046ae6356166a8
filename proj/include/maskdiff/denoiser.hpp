#pragma once

#include <memory>
#include <string>
#include <vector>

#include "maskdiff/image.hpp"
#include "maskdiff/maskops.hpp"
#include "maskdiff/nn.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Conditioning input: a class label, a templated caption phrase, or the
// reserved null condition used for guidance. token_id indexes the shared
// embedding table; prompt_text is informational.
struct Condition {
    enum class Kind { ClassLabel, CaptionTemplate, Null };
    Kind kind = Kind::Null;
    int token_id = 0;
    std::string prompt_text;
};

Condition null_condition();

// Predicted noise plus the instance-mask logit channel.
struct DenoiserOutput {
    TensorF eps_hat;      // (C, H, W)
    TensorF mask_logits;  // (1, H, W)
};

TensorF predict_mask_prob(const DenoiserOutput& out);

struct DenoiserConfig {
    int resolution = 32;
    int image_channels = 3;
    int base_width = 24;
    std::vector<int> channel_mult = {1, 2, 4};
    std::vector<int> attention_resolutions = {8};
    int emb_dim = 128;
    int vocab_size = 40;
    int precision_levels = 5;  // table size S+1
    int groupnorm_groups = 8;

    void validate() const;
    bool operator==(const DenoiserConfig&) const = default;
};

// U-Net noise predictor conditioned on timestep, mask channel, precision
// indicator and a token embedding. The final conv emits image_channels+1
// maps; the extra channel is the instance-mask logit.
template <typename S>
class UNet {
public:
    UNet(DenoiserConfig cfg, Rng& rng);

    struct Batch {
        Tensor<S> x;              // (B, C, H, W)
        Tensor<S> mask;           // (B, H, W), values in {0,1}
        std::vector<int> t;       // 1..T
        std::vector<int> s;       // 0..S
        std::vector<int> token;   // vocabulary ids
    };
    struct Output {
        Tensor<S> eps_hat;      // (B, C, H, W)
        Tensor<S> mask_logits;  // (B, 1, H, W)
    };

    Output forward(const Batch& in, bool training);
    void backward(const Tensor<S>& d_eps_hat, const Tensor<S>& d_mask_logits);

    nn::ParamList<S> params();
    void zero_grad();
    int64_t param_count();
    const DenoiserConfig& config() const { return cfg_; }

private:
    int levels() const { return static_cast<int>(cfg_.channel_mult.size()); }
    int width(int level) const { return cfg_.base_width * cfg_.channel_mult[static_cast<size_t>(level)]; }
    bool attn_at(int level) const;

    DenoiserConfig cfg_;

    nn::Linear<S> t_mlp1_, t_mlp2_;
    nn::SiLU<S> t_act_, cond_act_fn_;
    nn::Embedding<S> s_table_, c_table_;

    nn::Conv2d<S> in_conv_;
    std::vector<nn::ResBlock<S>> down_res_;
    std::vector<std::unique_ptr<nn::AttentionBlock<S>>> down_attn_;
    std::vector<nn::Conv2d<S>> down_conv_;
    nn::ResBlock<S> mid_res1_, mid_res2_;
    std::unique_ptr<nn::AttentionBlock<S>> mid_attn_;
    std::vector<nn::Upsample2x<S>> upsample_;
    std::vector<nn::Conv2d<S>> up_conv_;
    std::vector<nn::ResBlock<S>> up_res_;
    std::vector<std::unique_ptr<nn::AttentionBlock<S>>> up_attn_;
    nn::GroupNorm<S> out_norm_;
    nn::SiLU<S> out_act_;
    nn::Conv2d<S> out_conv_;

    // forward caches for backward
    std::vector<Tensor<S>> skips_;
    Tensor<S> cond_pre_act_;
    std::vector<int> skip_channels_;
    int batch_ = 0;
};

// Spec-facing façade over UNet<float>: owns the model parameters and the
// single-sample entry point; batch paths are exposed for the trainer and
// sampler.
class Denoiser {
public:
    Denoiser(DenoiserConfig cfg, uint64_t init_seed);

    // s must match m_s.s; kept as an explicit argument so a caller cannot
    // silently condition on a stale indicator.
    DenoiserOutput forward(const Image& x_t, const PrecisionMask& m_s, int t, const Condition& c, int s);

    UNet<float>& net() { return *net_; }
    const UNet<float>& net() const { return *net_; }
    const DenoiserConfig& config() const { return net_->config(); }
    int64_t param_count() { return net_->param_count(); }

private:
    std::unique_ptr<UNet<float>> net_;
};

}  // namespace maskdiff
