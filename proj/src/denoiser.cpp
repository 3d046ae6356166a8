#include "maskdiff/denoiser.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace maskdiff {

Condition null_condition() {
    return Condition{Condition::Kind::Null, 0, ""};
}

TensorF predict_mask_prob(const DenoiserOutput& out) {
    TensorF p(out.mask_logits.shape());
    for (int64_t i = 0; i < p.numel(); ++i)
        p[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(out.mask_logits[i]))));
    return p;
}

void DenoiserConfig::validate() const {
    const int L = static_cast<int>(channel_mult.size());
    if (L < 2) throw std::invalid_argument("DenoiserConfig: need at least two resolution levels");
    if (resolution % (1 << (L - 1)) != 0)
        throw std::invalid_argument("DenoiserConfig: resolution must be divisible by 2^(levels-1)");
    if (emb_dim % 2 != 0) throw std::invalid_argument("DenoiserConfig: emb_dim must be even");
    for (int m : channel_mult)
        if ((base_width * m) % groupnorm_groups != 0)
            throw std::invalid_argument("DenoiserConfig: widths must be divisible by groupnorm_groups");
    if (vocab_size < 1 || precision_levels < 1)
        throw std::invalid_argument("DenoiserConfig: vocab_size and precision_levels must be >= 1");
    if (image_channels < 1) throw std::invalid_argument("DenoiserConfig: image_channels must be >= 1");
}

namespace {

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> y = Tensor<S>::uninit({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)});
    std::memcpy(y.data(), a.data(), sizeof(S) * static_cast<size_t>(a.numel()));
    std::memcpy(y.data() + a.numel(), b.data(), sizeof(S) * static_cast<size_t>(b.numel()));
    return y;
}

}  // namespace

template <typename S>
UNet<S>::UNet(DenoiserConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int D = cfg_.emb_dim;
    const int G = cfg_.groupnorm_groups;
    const int L = levels();

    t_mlp1_ = nn::Linear<S>(D, D, rng);
    t_mlp2_ = nn::Linear<S>(D, D, rng);
    s_table_ = nn::Embedding<S>(cfg_.precision_levels, D, rng);
    c_table_ = nn::Embedding<S>(cfg_.vocab_size, D, rng);

    in_conv_ = nn::Conv2d<S>(cfg_.image_channels + 1, width(0), 3, 1, rng);

    for (int lvl = 0; lvl < L - 1; ++lvl) {
        const int c_in = lvl == 0 ? width(0) : width(lvl - 1);
        down_res_.emplace_back(c_in, width(lvl), D, G, rng);
        down_attn_.push_back(attn_at(lvl) ? std::make_unique<nn::AttentionBlock<S>>(width(lvl), G, rng)
                                          : nullptr);
        down_conv_.emplace_back(width(lvl), width(lvl), 3, 2, rng);
    }

    mid_res1_ = nn::ResBlock<S>(width(L - 2), width(L - 1), D, G, rng);
    if (attn_at(L - 1)) mid_attn_ = std::make_unique<nn::AttentionBlock<S>>(width(L - 1), G, rng);
    mid_res2_ = nn::ResBlock<S>(width(L - 1), width(L - 1), D, G, rng);

    for (int j = 0; j < L - 1; ++j) {
        const int lvl = L - 2 - j;
        const int c_prev = j == 0 ? width(L - 1) : width(lvl + 1);
        upsample_.emplace_back();
        up_conv_.emplace_back(c_prev, width(lvl), 3, 1, rng);
        up_res_.emplace_back(2 * width(lvl), width(lvl), D, G, rng);
        up_attn_.push_back(attn_at(lvl) ? std::make_unique<nn::AttentionBlock<S>>(width(lvl), G, rng)
                                        : nullptr);
    }

    out_norm_ = nn::GroupNorm<S>(width(0), G);
    out_conv_ = nn::Conv2d<S>(width(0), cfg_.image_channels + 1, 3, 1, rng, /*zero_init=*/true);
}

template <typename S>
bool UNet<S>::attn_at(int level) const {
    const int res = cfg_.resolution >> level;
    for (int r : cfg_.attention_resolutions)
        if (r == res) return true;
    return false;
}

template <typename S>
typename UNet<S>::Output UNet<S>::forward(const Batch& in, bool training) {
    const int B = in.x.dim(0);
    const int C = cfg_.image_channels;
    const int H = cfg_.resolution, W = cfg_.resolution;
    if (in.x.rank() != 4 || in.x.dim(1) != C || in.x.dim(2) != H || in.x.dim(3) != W)
        throw std::invalid_argument("UNet: bad input shape " + Tensor<S>::shape_str(in.x.shape()));
    if (in.mask.rank() != 3 || in.mask.dim(0) != B || in.mask.dim(1) != H || in.mask.dim(2) != W)
        throw std::invalid_argument("UNet: bad mask shape");
    if (static_cast<int>(in.t.size()) != B || static_cast<int>(in.s.size()) != B ||
        static_cast<int>(in.token.size()) != B)
        throw std::invalid_argument("UNet: per-item vectors must match batch size");
    for (int b = 0; b < B; ++b) {
        if (in.t[static_cast<size_t>(b)] < 1) throw std::out_of_range("UNet: timestep must be >= 1");
        if (in.s[static_cast<size_t>(b)] < 0 || in.s[static_cast<size_t>(b)] >= cfg_.precision_levels)
            throw std::out_of_range("UNet: precision indicator outside 0..S");
    }

    // conditioning vector: timestep MLP + precision and token embeddings
    Tensor<S> sin = nn::sinusoidal_embedding<S>(in.t, cfg_.emb_dim);
    Tensor<S> temb = t_mlp2_.forward(t_act_.forward(t_mlp1_.forward(sin, training), training), training);
    Tensor<S> semb = s_table_.forward(in.s, training);
    Tensor<S> cemb = c_table_.forward(in.token, training);
    cond_pre_act_ = Tensor<S>({cfg_.emb_dim, B});
    for (int64_t i = 0; i < cond_pre_act_.numel(); ++i) cond_pre_act_[i] = temb[i] + semb[i] + cemb[i];
    Tensor<S> cond_act = cond_act_fn_.forward(cond_pre_act_, training);

    // image + mask channel, channel-major
    Tensor<S> xin = Tensor<S>::uninit({C + 1, B, H, W});
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c)
            std::memcpy(xin.data() + (static_cast<int64_t>(c) * B + b) * hw,
                        in.x.data() + (static_cast<int64_t>(b) * C + c) * hw,
                        sizeof(S) * static_cast<size_t>(hw));
        std::memcpy(xin.data() + (static_cast<int64_t>(C) * B + b) * hw,
                    in.mask.data() + static_cast<int64_t>(b) * hw, sizeof(S) * static_cast<size_t>(hw));
    }

    const int L = levels();
    skips_.clear();
    skip_channels_.clear();
    batch_ = B;

    Tensor<S> h = in_conv_.forward(xin, training);
    for (int lvl = 0; lvl < L - 1; ++lvl) {
        h = down_res_[static_cast<size_t>(lvl)].forward(h, cond_act, training);
        if (down_attn_[static_cast<size_t>(lvl)])
            h = down_attn_[static_cast<size_t>(lvl)]->forward(h, training);
        skips_.push_back(h);
        skip_channels_.push_back(h.dim(0));
        h = down_conv_[static_cast<size_t>(lvl)].forward(h, training);
    }

    h = mid_res1_.forward(h, cond_act, training);
    if (mid_attn_) h = mid_attn_->forward(h, training);
    h = mid_res2_.forward(h, cond_act, training);

    for (int j = 0; j < L - 1; ++j) {
        const int lvl = L - 2 - j;
        h = upsample_[static_cast<size_t>(j)].forward(h);
        h = up_conv_[static_cast<size_t>(j)].forward(h, training);
        h = concat_channels(h, skips_[static_cast<size_t>(lvl)]);
        h = up_res_[static_cast<size_t>(j)].forward(h, cond_act, training);
        if (up_attn_[static_cast<size_t>(j)]) h = up_attn_[static_cast<size_t>(j)]->forward(h, training);
    }

    h = out_conv_.forward(out_act_.forward(out_norm_.forward(h, training), training), training);
    if (!training) skips_.clear();

    // split heads back to batch-major
    Output out;
    out.eps_hat = Tensor<S>::uninit({B, C, H, W});
    out.mask_logits = Tensor<S>::uninit({B, 1, H, W});
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c)
            std::memcpy(out.eps_hat.data() + (static_cast<int64_t>(b) * C + c) * hw,
                        h.data() + (static_cast<int64_t>(c) * B + b) * hw, sizeof(S) * static_cast<size_t>(hw));
        std::memcpy(out.mask_logits.data() + static_cast<int64_t>(b) * hw,
                    h.data() + (static_cast<int64_t>(C) * B + b) * hw, sizeof(S) * static_cast<size_t>(hw));
    }
    return out;
}

template <typename S>
void UNet<S>::backward(const Tensor<S>& d_eps_hat, const Tensor<S>& d_mask_logits) {
    const int B = batch_;
    const int C = cfg_.image_channels;
    const int H = cfg_.resolution, W = cfg_.resolution;
    const int64_t hw = static_cast<int64_t>(H) * W;
    const int L = levels();

    Tensor<S> dh = Tensor<S>::uninit({C + 1, B, H, W});
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c)
            std::memcpy(dh.data() + (static_cast<int64_t>(c) * B + b) * hw,
                        d_eps_hat.data() + (static_cast<int64_t>(b) * C + c) * hw,
                        sizeof(S) * static_cast<size_t>(hw));
        std::memcpy(dh.data() + (static_cast<int64_t>(C) * B + b) * hw,
                    d_mask_logits.data() + static_cast<int64_t>(b) * hw, sizeof(S) * static_cast<size_t>(hw));
    }

    Tensor<S> d = out_norm_.backward(out_act_.backward(out_conv_.backward(dh)));
    Tensor<S> dcond_act({cfg_.emb_dim, B});
    std::vector<Tensor<S>> dskips(static_cast<size_t>(L - 1));

    for (int j = L - 2; j >= 0; --j) {
        const int lvl = L - 2 - j;
        if (up_attn_[static_cast<size_t>(j)]) d = up_attn_[static_cast<size_t>(j)]->backward(d);
        d = up_res_[static_cast<size_t>(j)].backward(d, dcond_act);
        // split concat: first block flows up the decoder, second into the skip
        const int c_main = d.dim(0) - skip_channels_[static_cast<size_t>(lvl)];
        Tensor<S> d_main = Tensor<S>::uninit({c_main, B, d.dim(2), d.dim(3)});
        Tensor<S> d_skip = Tensor<S>::uninit({skip_channels_[static_cast<size_t>(lvl)], B, d.dim(2), d.dim(3)});
        std::memcpy(d_main.data(), d.data(), sizeof(S) * static_cast<size_t>(d_main.numel()));
        std::memcpy(d_skip.data(), d.data() + d_main.numel(), sizeof(S) * static_cast<size_t>(d_skip.numel()));
        dskips[static_cast<size_t>(lvl)] = std::move(d_skip);
        d = upsample_[static_cast<size_t>(j)].backward(up_conv_[static_cast<size_t>(j)].backward(d_main));
    }

    d = mid_res2_.backward(d, dcond_act);
    if (mid_attn_) d = mid_attn_->backward(d);
    d = mid_res1_.backward(d, dcond_act);

    for (int lvl = L - 2; lvl >= 0; --lvl) {
        d = down_conv_[static_cast<size_t>(lvl)].backward(d);
        Tensor<S>& ds = dskips[static_cast<size_t>(lvl)];
        for (int64_t i = 0; i < d.numel(); ++i) d[i] += ds[i];
        if (down_attn_[static_cast<size_t>(lvl)]) d = down_attn_[static_cast<size_t>(lvl)]->backward(d);
        d = down_res_[static_cast<size_t>(lvl)].backward(d, dcond_act);
    }
    in_conv_.backward(d);  // input gradient discarded

    Tensor<S> dcond_pre = cond_act_fn_.backward(dcond_act);
    s_table_.backward(dcond_pre);
    c_table_.backward(dcond_pre);
    t_mlp1_.backward(t_act_.backward(t_mlp2_.backward(dcond_pre)));
}

template <typename S>
nn::ParamList<S> UNet<S>::params() {
    nn::ParamList<S> p;
    t_mlp1_.collect("emb.t1", p);
    t_mlp2_.collect("emb.t2", p);
    s_table_.collect("emb.s", p);
    c_table_.collect("emb.c", p);
    in_conv_.collect("in_conv", p);
    for (size_t i = 0; i < down_res_.size(); ++i) {
        const std::string pre = "down" + std::to_string(i);
        down_res_[i].collect(pre + ".res", p);
        if (down_attn_[i]) down_attn_[i]->collect(pre + ".attn", p);
        down_conv_[i].collect(pre + ".down", p);
    }
    mid_res1_.collect("mid.res1", p);
    if (mid_attn_) mid_attn_->collect("mid.attn", p);
    mid_res2_.collect("mid.res2", p);
    for (size_t j = 0; j < up_res_.size(); ++j) {
        const std::string pre = "up" + std::to_string(j);
        up_conv_[j].collect(pre + ".conv", p);
        up_res_[j].collect(pre + ".res", p);
        if (up_attn_[j]) up_attn_[j]->collect(pre + ".attn", p);
    }
    out_norm_.collect("out.norm", p);
    out_conv_.collect("out.conv", p);
    return p;
}

template <typename S>
void UNet<S>::zero_grad() {
    auto p = params();
    nn::zero_grads<S>(p);
}

template <typename S>
int64_t UNet<S>::param_count() {
    auto p = params();
    return nn::param_count<S>(p);
}

template class UNet<float>;
template class UNet<double>;

// ------------------------------------------------------------------ façade

Denoiser::Denoiser(DenoiserConfig cfg, uint64_t init_seed) {
    Rng rng(init_seed);
    net_ = std::make_unique<UNet<float>>(std::move(cfg), rng);
}

DenoiserOutput Denoiser::forward(const Image& x_t, const PrecisionMask& m_s, int t, const Condition& c,
                                 int s) {
    if (s != m_s.s)
        throw std::invalid_argument("Denoiser::forward: s=" + std::to_string(s) +
                                    " disagrees with mask indicator s=" + std::to_string(m_s.s));
    const auto& cfg = net_->config();
    const int C = cfg.image_channels, H = cfg.resolution, W = cfg.resolution;
    if (x_t.channels() != C || x_t.height() != H || x_t.width() != W)
        throw std::invalid_argument("Denoiser::forward: image does not match configured resolution");
    if (!x_t.data.all_finite()) throw std::invalid_argument("Denoiser::forward: non-finite input");

    UNet<float>::Batch batch;
    batch.x = TensorF({1, C, H, W});
    std::memcpy(batch.x.data(), x_t.data.data(), sizeof(float) * static_cast<size_t>(x_t.data.numel()));
    batch.mask = TensorF({1, H, W});
    for (int64_t i = 0; i < batch.mask.numel(); ++i)
        batch.mask[i] = static_cast<float>(m_s.data.data[i]);
    batch.t = {t};
    batch.s = {s};
    batch.token = {c.token_id};

    auto out = net_->forward(batch, /*training=*/false);
    DenoiserOutput res;
    res.eps_hat = TensorF({C, H, W});
    std::memcpy(res.eps_hat.data(), out.eps_hat.data(), sizeof(float) * static_cast<size_t>(res.eps_hat.numel()));
    res.mask_logits = TensorF({1, H, W});
    std::memcpy(res.mask_logits.data(), out.mask_logits.data(),
                sizeof(float) * static_cast<size_t>(res.mask_logits.numel()));
    return res;
}

}  // namespace maskdiff
