#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "maskdiff/losses.hpp"
#include "testutil.hpp"

using namespace maskdiff;

TEST_CASE("seg_dm_loss: identities") {
    Rng rng(1);
    TensorF eps = rng.gaussian_tensor<float>({3, 4, 4});
    DenoiserOutput out;
    out.eps_hat = eps;
    out.mask_logits = TensorF({1, 4, 4});
    CHECK(seg_dm_loss(eps, out) == 0.0);

    TensorF zeros({2, 2, 2});
    DenoiserOutput c;
    c.eps_hat = TensorF({2, 2, 2}, 0.5f);
    CHECK(seg_dm_loss(zeros, c) == doctest::Approx(0.25).epsilon(1e-6));

    // eps=[1,-1], eps_hat=[0,0] -> mean of squares = 1
    TensorF e({1, 1, 2});
    e[0] = 1.0f;
    e[1] = -1.0f;
    DenoiserOutput z;
    z.eps_hat = TensorF({1, 1, 2});
    CHECK(seg_dm_loss(e, z) == doctest::Approx(1.0).epsilon(1e-6));

    TensorF wrong({1, 2, 2});
    DenoiserOutput w;
    w.eps_hat = TensorF({1, 2, 3});
    CHECK_THROWS_AS(seg_dm_loss(wrong, w), std::invalid_argument);
}

TEST_CASE("dice_loss: perfect, disjoint, half overlap") {
    InstanceMask target(4, 4);
    for (int x = 0; x < 4; ++x) target.data.at2(0, x) = 1;

    // perfect prediction: bounded by smooth/(2|target|+smooth), exactly 0 as smooth -> 0
    const double smooth = 1.0;
    CHECK(dice_loss(target.as<float>(), target, smooth) <= smooth / (2.0 * 4 + smooth) + 1e-9);
    CHECK(dice_loss(target.as<float>(), target, 0.0) == doctest::Approx(0.0).epsilon(1e-12));

    // disjoint, equal size N=4: 1 - smooth/(2N+smooth)
    InstanceMask pred(4, 4);
    for (int x = 0; x < 4; ++x) pred.data.at2(2, x) = 1;
    CHECK(dice_loss(pred.as<float>(), target, 1.0) == doctest::Approx(1.0 - 1.0 / 9.0).epsilon(1e-6));
    CHECK(dice_loss(pred.as<float>(), target, 0.0) == doctest::Approx(1.0).epsilon(1e-12));

    // |X|=|Y|=4 with overlap 2, smooth=0 -> 1 - 4/8 = 0.5
    InstanceMask half(4, 4);
    half.data.at2(0, 2) = half.data.at2(0, 3) = 1;
    half.data.at2(1, 0) = half.data.at2(1, 1) = 1;
    CHECK(dice_loss(half.as<float>(), target, 0.0) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("dice_loss: argument validation and range") {
    InstanceMask target(2, 2);
    target.data.at2(0, 0) = 1;
    TensorF bad({2, 2});
    bad[0] = 1.5f;
    CHECK_THROWS_AS(dice_loss(bad, target), std::invalid_argument);

    TensorF mismatch({3, 3});
    CHECK_THROWS_AS(dice_loss(mismatch, target), std::invalid_argument);

    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        TensorF p({4, 4});
        for (int64_t i = 0; i < p.numel(); ++i) p[i] = static_cast<float>(rng.uniform());
        const auto t = testutil::random_mask(rng, 4, 4);
        const double v = dice_loss(p, t, 1.0);
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("dice_loss: symmetric for binary arguments") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto a = testutil::random_mask(rng, 6, 6);
        const auto b = testutil::random_mask(rng, 6, 6);
        const double ab = dice_loss_t<double>(cast_tensor<double>(a.data), cast_tensor<double>(b.data), 1.0);
        const double ba = dice_loss_t<double>(cast_tensor<double>(b.data), cast_tensor<double>(a.data), 1.0);
        CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
    }
}

TEST_CASE("total_loss: gating and exact composition") {
    Rng rng(4);
    TensorF eps = rng.gaussian_tensor<float>({3, 4, 4});
    DenoiserOutput out;
    out.eps_hat = rng.gaussian_tensor<float>({3, 4, 4});
    out.mask_logits = rng.gaussian_tensor<float>({1, 4, 4});
    const auto target = testutil::random_mask(rng, 4, 4);

    LossConfig cfg;
    cfg.lambda = 0.0;
    auto b0 = total_loss(eps, out, target, cfg);
    CHECK(b0.total == b0.seg);

    cfg.lambda = 0.01;
    auto b1 = total_loss(eps, out, target, cfg);
    CHECK(b1.total == b1.seg + 0.01 * b1.dice);  // exact composition

    cfg.apply_prediction_loss = false;
    auto b2 = total_loss(eps, out, target, cfg);
    CHECK(b2.total == b2.seg);
    CHECK(b2.dice == 0.0);
}

TEST_CASE("total_loss: seg=0.2 dice=0.5 lambda=0.01 gives 0.205") {
    // engineered inputs: eps_hat offset so the MSE is exactly 0.2 and a
    // half-overlap binary prediction through saturated logits
    TensorF eps({1, 2, 2});
    DenoiserOutput out;
    out.eps_hat = TensorF({1, 2, 2});
    const float d = std::sqrt(0.2f);
    for (int64_t i = 0; i < 4; ++i) out.eps_hat[i] = eps[i] + d;

    // |X|=|Y|=2, overlap 1 -> dice = 1 - 2/4 = 0.5 (smooth ~ 0)
    InstanceMask target(2, 2);
    target.data.at2(0, 0) = 1;
    target.data.at2(0, 1) = 1;
    out.mask_logits = TensorF({1, 2, 2});
    out.mask_logits[0] = 40.0f;   // ~1.0
    out.mask_logits[1] = -40.0f;  // ~0.0
    out.mask_logits[2] = 40.0f;
    out.mask_logits[3] = -40.0f;

    LossBreakdown b;
    b.seg = seg_dm_loss(eps, out);
    b.dice = dice_loss(predict_mask_prob(out), target, 0.0);
    CHECK(b.seg == doctest::Approx(0.2).epsilon(1e-5));
    CHECK(b.dice == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(b.seg + 0.01 * b.dice == doctest::Approx(0.205).epsilon(1e-5));
}

TEST_CASE("loss gradients match central finite differences (double, 8x8)") {
    Rng rng(5);
    TensorD eps = rng.gaussian_tensor<double>({3, 8, 8});
    TensorD eps_hat = rng.gaussian_tensor<double>({3, 8, 8});
    TensorD logits = rng.gaussian_tensor<double>({8, 8});
    TensorD target({8, 8});
    for (int64_t i = 0; i < target.numel(); ++i) target[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;

    LossConfig cfg;
    cfg.lambda = 0.01;
    const double smooth = 1.0;
    auto grads = total_loss_with_grads<double>(eps, eps_hat, logits, target, cfg, smooth);
    CHECK(grads.total == grads.seg + 0.01 * grads.dice);

    const double h = 1e-6;
    const auto loss_at = [&](const TensorD& eh, const TensorD& lg) {
        const double seg = seg_dm_loss_t<double>(eps, eh);
        const double dice = dice_loss_from_logits<double>(lg, target, smooth, nullptr);
        return seg + cfg.lambda * dice;
    };

    Rng pick(6);
    for (int trial = 0; trial < 30; ++trial) {
        const int64_t i = pick.uniform_int(0, static_cast<int>(eps_hat.numel()) - 1);
        TensorD ep = eps_hat, em = eps_hat;
        ep[i] += h;
        em[i] -= h;
        const double fd = (loss_at(ep, logits) - loss_at(em, logits)) / (2 * h);
        const double an = grads.d_eps_hat[i];
        CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}) < 1e-4);
    }
    for (int trial = 0; trial < 30; ++trial) {
        const int64_t i = pick.uniform_int(0, static_cast<int>(logits.numel()) - 1);
        TensorD lp = logits, lm = logits;
        lp[i] += h;
        lm[i] -= h;
        const double fd = (loss_at(eps_hat, lp) - loss_at(eps_hat, lm)) / (2 * h);
        const double an = grads.d_mask_logits[i];
        CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}) < 1e-4);
    }
}

TEST_CASE("predict_mask_prob: sigmoid values") {
    DenoiserOutput out;
    out.eps_hat = TensorF({1, 1, 3});
    out.mask_logits = TensorF({1, 1, 3});
    out.mask_logits[0] = -1.0f;
    out.mask_logits[1] = 0.0f;
    out.mask_logits[2] = 1.0f;
    const auto p = predict_mask_prob(out);
    CHECK(p[0] == doctest::Approx(0.2689).epsilon(1e-3));
    CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(p[2] == doctest::Approx(0.7311).epsilon(1e-3));

    out.mask_logits.fill(20.0f);
    const auto sat = predict_mask_prob(out);
    for (int64_t i = 0; i < sat.numel(); ++i) CHECK(std::abs(sat[i] - 1.0f) < 1e-8);
}
