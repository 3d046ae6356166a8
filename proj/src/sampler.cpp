#include "maskdiff/sampler.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace maskdiff {

void SampleRequest::validate(const NoiseSchedule& sched) const {
    if (steps < 1) throw std::invalid_argument("SampleRequest: steps must be >= 1");
    if (steps > sched.T) throw std::invalid_argument("SampleRequest: steps exceed schedule length");
    if (guidance_scale < 0.0) throw std::invalid_argument("SampleRequest: guidance_scale must be >= 0");
    if (mask_switch_step < 0 || mask_switch_step > steps)
        throw std::invalid_argument("SampleRequest: mask_switch_step must be in 0..steps");
    if (!(mask_switch_threshold > 0.0 && mask_switch_threshold < 1.0))
        throw std::invalid_argument("SampleRequest: mask_switch_threshold must be in (0,1)");
    if (kind == SamplerKind::Ancestral && steps != sched.T)
        throw std::invalid_argument("SampleRequest: ancestral sampling runs the full schedule (steps == T)");
    if (x0.height() != mask.data.height() || x0.width() != mask.data.width())
        throw std::invalid_argument("SampleRequest: mask shape does not match the image");
}

std::vector<int> sampling_times(int T, int steps) {
    if (steps < 1 || steps > T) throw std::invalid_argument("sampling_times: need 1 <= steps <= T");
    std::vector<int> times(static_cast<size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i)
        times[static_cast<size_t>(i)] =
            static_cast<int>(std::lround(static_cast<double>(steps - i) * T / steps));
    for (int i = 0; i < steps; ++i)
        if (times[static_cast<size_t>(i)] <= times[static_cast<size_t>(i) + 1])
            throw std::logic_error("sampling_times: ladder not strictly decreasing");
    return times;
}

Image init_latent(const Image& x0, const InstanceMask& m, const NoiseSchedule& /*sched*/, Rng& rng) {
    if (x0.height() != m.height() || x0.width() != m.width())
        throw std::invalid_argument("init_latent: mask shape does not match the image");
    const int C = x0.channels(), H = x0.height(), W = x0.width();
    TensorF noise = rng.gaussian_tensor<float>({C, H, W});
    Image out(TensorF(x0.data.shape()), ImageRole::Noisy);
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (int c = 0; c < C; ++c)
        for (int64_t p = 0; p < hw; ++p) {
            const int64_t i = static_cast<int64_t>(c) * hw + p;
            out.data[i] = m.data[p] ? noise[i] : x0.data[i];
        }
    return out;
}

namespace {

UNet<float>::Batch make_single_batch(const Image& x_t, const InstanceMask& m, int t, int token, int s) {
    UNet<float>::Batch in;
    const int C = x_t.channels(), H = x_t.height(), W = x_t.width();
    in.x = TensorF({1, C, H, W});
    std::memcpy(in.x.data(), x_t.data.data(), sizeof(float) * static_cast<size_t>(x_t.data.numel()));
    in.mask = TensorF({1, H, W});
    for (int64_t i = 0; i < in.mask.numel(); ++i) in.mask[i] = static_cast<float>(m.data[i]);
    in.t = {t};
    in.s = {s};
    in.token = {token};
    return in;
}

}  // namespace

GuidedEps guided_eps(NoisePredictor& model, const Image& x_t, const InstanceMask& m, int t,
                     const Condition& c, int s, double w) {
    if (w < 0.0) throw std::invalid_argument("guided_eps: w must be >= 0");
    const int C = x_t.channels(), H = x_t.height(), W = x_t.width();
    const int64_t n = x_t.data.numel();
    const int64_t hw = static_cast<int64_t>(H) * W;

    GuidedEps g;
    g.eps = TensorF({C, H, W});
    g.mask_logits = TensorF({1, H, W});

    auto cond_out = model.predict(make_single_batch(x_t, m, t, c.token_id, s));
    std::memcpy(g.mask_logits.data(), cond_out.mask_logits.data(), sizeof(float) * static_cast<size_t>(hw));

    if (w == 1.0) {
        std::memcpy(g.eps.data(), cond_out.eps_hat.data(), sizeof(float) * static_cast<size_t>(n));
        return g;
    }
    auto null_out = model.predict(make_single_batch(x_t, m, t, null_condition().token_id, s));
    if (w == 0.0) {
        std::memcpy(g.eps.data(), null_out.eps_hat.data(), sizeof(float) * static_cast<size_t>(n));
        return g;
    }
    const float wf = static_cast<float>(w);
    for (int64_t i = 0; i < n; ++i)
        g.eps[i] = null_out.eps_hat[i] + wf * (cond_out.eps_hat[i] - null_out.eps_hat[i]);
    return g;
}

Image blended_step(const Image& x_t, const TensorF& eps_hat, const InstanceMask& active_mask, int t,
                   int t_prev, const Image& x0, const NoiseSchedule& sched, Rng& rng, SamplerKind kind) {
    if (t_prev >= t) throw std::invalid_argument("blended_step: t_prev must be < t");
    const int C = x_t.channels(), H = x_t.height(), W = x_t.width();
    const int64_t hw = static_cast<int64_t>(H) * W;

    // Interior reverse step. Noise draw order is fixed: step noise first,
    // then background noise, so trajectories are reproducible.
    Image stepped(TensorF({C, H, W}), ImageRole::Noisy);
    if (kind == SamplerKind::Ancestral) {
        if (t_prev != t - 1) throw std::invalid_argument("blended_step: ancestral requires t_prev == t-1");
        TensorF noise = rng.gaussian_tensor<float>({C, H, W});
        stepped = ddpm_step(x_t, eps_hat, t, sched, t > 1 ? &noise : nullptr);
    } else {
        stepped = ddim_step<float>(x_t, eps_hat, t, t_prev, sched, 0.0);
    }

    // Background track: the clean image re-noised to t_prev (exact at 0).
    Image background(TensorF({C, H, W}), ImageRole::Noisy);
    if (t_prev == 0) {
        background = Image(x0.data, ImageRole::Clean);
    } else {
        TensorF bg_noise = rng.gaussian_tensor<float>({C, H, W});
        background = q_sample(x0, t_prev, bg_noise, sched);
    }

    Image out(TensorF({C, H, W}), t_prev == 0 ? ImageRole::Clean : ImageRole::Noisy);
    for (int c = 0; c < C; ++c)
        for (int64_t p = 0; p < hw; ++p) {
            const int64_t i = static_cast<int64_t>(c) * hw + p;
            out.data[i] = active_mask.data[p] ? stepped.data[i] : background.data[i];
        }
    return out;
}

namespace {

InstanceMask switch_mask(const TensorF& cond_logits, const InstanceMask& m_s, double threshold,
                         int* fallbacks) {
    TensorF prob({m_s.height(), m_s.width()});
    for (int64_t i = 0; i < prob.numel(); ++i)
        prob[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(cond_logits[i]))));
    InstanceMask predicted = binarize(prob, threshold);
    InstanceMask clipped = mask_intersect(predicted, m_s);
    if (clipped.empty_support()) {
        ++(*fallbacks);
        return m_s;
    }
    return clipped;
}

}  // namespace

std::vector<SampleResult> sample_inpaint_batch(NoisePredictor& model,
                                               const std::vector<SampleRequest>& reqs,
                                               const NoiseSchedule& sched) {
    if (reqs.empty()) return {};
    const int B = static_cast<int>(reqs.size());
    for (const auto& r : reqs) {
        r.validate(sched);
        if (r.steps != reqs[0].steps || r.kind != reqs[0].kind)
            throw std::invalid_argument("sample_inpaint_batch: requests must share steps and sampler kind");
        if (r.x0.channels() != model.image_channels() || r.x0.height() != model.resolution())
            throw std::invalid_argument("sample_inpaint_batch: request does not match the model resolution");
    }
    const int steps = reqs[0].steps;
    const SamplerKind kind = reqs[0].kind;
    const int C = model.image_channels();
    const int H = model.resolution(), W = model.resolution();
    const int64_t hw = static_cast<int64_t>(H) * W;
    const std::vector<int> times = sampling_times(sched.T, steps);

    std::vector<SampleResult> results(static_cast<size_t>(B));
    std::vector<Image> x(static_cast<size_t>(B));
    std::vector<InstanceMask> active(static_cast<size_t>(B));
    std::vector<Rng> rngs;
    std::vector<TensorF> last_logits(static_cast<size_t>(B));

    for (int b = 0; b < B; ++b) {
        const auto& r = reqs[static_cast<size_t>(b)];
        rngs.push_back(Rng(r.seed));
        Rng init_rng = rngs.back().stream(0);
        x[static_cast<size_t>(b)] = init_latent(r.x0, r.mask.data, sched, init_rng);
        active[static_cast<size_t>(b)] = r.mask.data;
        results[static_cast<size_t>(b)].seed = r.seed;
    }

    for (int i = 0; i < steps; ++i) {
        const int t = times[static_cast<size_t>(i)];
        const int t_prev = times[static_cast<size_t>(i) + 1];

        // predicted-mask switch, re-estimated from the latest prediction
        for (int b = 0; b < B; ++b) {
            const auto& r = reqs[static_cast<size_t>(b)];
            if (r.mask_switch_step > 0 && i >= r.mask_switch_step)
                active[static_cast<size_t>(b)] =
                    switch_mask(last_logits[static_cast<size_t>(b)], r.mask.data, r.mask_switch_threshold,
                                &results[static_cast<size_t>(b)].empty_mask_fallbacks);
        }

        // conditional passes in rows 0..B-1, null passes in rows B..2B-1
        const bool need_null = [&] {
            for (const auto& r : reqs)
                if (r.guidance_scale != 1.0) return true;
            return false;
        }();
        const int rows = need_null ? 2 * B : B;
        UNet<float>::Batch in;
        in.x = TensorF({rows, C, H, W});
        in.mask = TensorF({rows, H, W});
        in.t.assign(static_cast<size_t>(rows), t);
        in.s.resize(static_cast<size_t>(rows));
        in.token.resize(static_cast<size_t>(rows));
        for (int b = 0; b < B; ++b) {
            const auto& r = reqs[static_cast<size_t>(b)];
            for (int pass = 0; pass < (need_null ? 2 : 1); ++pass) {
                const int row = pass == 0 ? b : B + b;
                std::memcpy(in.x.data() + static_cast<int64_t>(row) * C * hw,
                            x[static_cast<size_t>(b)].data.data(), sizeof(float) * static_cast<size_t>(C * hw));
                for (int64_t p = 0; p < hw; ++p)
                    in.mask[static_cast<int64_t>(row) * hw + p] =
                        static_cast<float>(active[static_cast<size_t>(b)].data[p]);
                in.s[static_cast<size_t>(row)] = r.mask.s;
                in.token[static_cast<size_t>(row)] = pass == 0 ? r.cond.token_id : null_condition().token_id;
            }
        }

        auto out = model.predict(in);

        for (int b = 0; b < B; ++b) {
            const auto& r = reqs[static_cast<size_t>(b)];
            TensorF eps({C, H, W});
            const float* eps_c = out.eps_hat.data() + static_cast<int64_t>(b) * C * hw;
            if (!need_null || r.guidance_scale == 1.0) {
                std::memcpy(eps.data(), eps_c, sizeof(float) * static_cast<size_t>(C * hw));
            } else {
                const float* eps_n = out.eps_hat.data() + static_cast<int64_t>(B + b) * C * hw;
                const float w = static_cast<float>(r.guidance_scale);
                if (w == 0.0f) {
                    std::memcpy(eps.data(), eps_n, sizeof(float) * static_cast<size_t>(C * hw));
                } else {
                    for (int64_t j = 0; j < static_cast<int64_t>(C) * hw; ++j)
                        eps[j] = eps_n[j] + w * (eps_c[j] - eps_n[j]);
                }
            }

            last_logits[static_cast<size_t>(b)] = TensorF({H, W});
            std::memcpy(last_logits[static_cast<size_t>(b)].data(),
                        out.mask_logits.data() + static_cast<int64_t>(b) * hw,
                        sizeof(float) * static_cast<size_t>(hw));
            if (r.trace) {
                TensorF prob({H, W});
                for (int64_t p = 0; p < hw; ++p)
                    prob[p] = static_cast<float>(
                        1.0 / (1.0 + std::exp(-static_cast<double>(last_logits[static_cast<size_t>(b)][p]))));
                results[static_cast<size_t>(b)].trace.push_back(std::move(prob));
            }

            Rng step_rng = rngs[static_cast<size_t>(b)].stream(static_cast<uint64_t>(i) + 1);
            x[static_cast<size_t>(b)] = blended_step(x[static_cast<size_t>(b)], eps, active[static_cast<size_t>(b)],
                                                     t, t_prev, r.x0, sched, step_rng, kind);
            if (!x[static_cast<size_t>(b)].data.all_finite())
                throw std::runtime_error("sample_inpaint: non-finite latent at step " + std::to_string(i) +
                                         " (t=" + std::to_string(t) + ")");
        }
    }

    for (int b = 0; b < B; ++b) {
        results[static_cast<size_t>(b)].output = Image(x[static_cast<size_t>(b)].data, ImageRole::Clean);
        results[static_cast<size_t>(b)].final_mask = active[static_cast<size_t>(b)];
    }
    return results;
}

SampleResult sample_inpaint(NoisePredictor& model, const SampleRequest& req, const NoiseSchedule& sched) {
    return sample_inpaint_batch(model, {req}, sched)[0];
}

}  // namespace maskdiff
