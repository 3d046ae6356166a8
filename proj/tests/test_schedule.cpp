#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <mpfr.h>

#include <cmath>

#include "maskdiff/schedule.hpp"
#include "testutil.hpp"

using namespace maskdiff;

TEST_CASE("linear schedule: single step") {
    const auto s = make_linear_schedule(1, 0.1, 0.1);
    CHECK(s.T == 1);
    CHECK(s.beta(1) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(s.alpha(1) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(s.alpha_bar(0) == 1.0);
}

TEST_CASE("linear schedule: two-step hand product") {
    const auto s = make_linear_schedule(2, 0.1, 0.2);
    CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(s.alpha_bar(2) == doctest::Approx(0.72).epsilon(1e-12));
}

TEST_CASE("linear schedule: T=1000 against high-precision product") {
    const int T = 1000;
    const auto s = make_linear_schedule(T, 1e-4, 0.02);

    mpfr_t abar, alpha, beta, one;
    mpfr_inits2(256, abar, alpha, beta, one, static_cast<mpfr_ptr>(nullptr));
    mpfr_set_d(abar, 1.0, MPFR_RNDN);
    mpfr_set_d(one, 1.0, MPFR_RNDN);
    for (int i = 0; i < T; ++i) {
        const double b = 1e-4 + (0.02 - 1e-4) * i / (T - 1);
        mpfr_set_d(beta, b, MPFR_RNDN);
        mpfr_sub(alpha, one, beta, MPFR_RNDN);
        mpfr_mul(abar, abar, alpha, MPFR_RNDN);
    }
    const double reference = mpfr_get_d(abar, MPFR_RNDN);
    mpfr_clears(abar, alpha, beta, one, static_cast<mpfr_ptr>(nullptr));

    CHECK(s.alpha_bar(T) > 0.0);
    CHECK(s.alpha_bar(T) < 1e-4);
    CHECK(std::abs(s.alpha_bar(T) - reference) / reference < 1e-10);

    for (int t = 2; t <= T; ++t) {
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));                       // strictly decreasing
        CHECK(s.alpha_bar(t) == s.alpha_bar(t - 1) * s.alpha(t));        // exact product identity
        CHECK(s.beta(t) >= s.beta(t - 1));
    }
}

TEST_CASE("linear schedule: invalid parameters are rejected") {
    CHECK_THROWS_WITH_AS(make_linear_schedule(0, 0.1, 0.2), doctest::Contains("T"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(make_linear_schedule(10, 0.0, 0.2), doctest::Contains("beta_start"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(make_linear_schedule(10, 0.1, 1.0), doctest::Contains("beta_end"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(make_linear_schedule(10, 0.3, 0.2), doctest::Contains("beta_start"),
                         std::invalid_argument);
}

TEST_CASE("q_sample: zero noise scales the image") {
    Rng rng(1);
    const auto s = make_linear_schedule(50, 1e-4, 0.05);
    const auto x0 = testutil::random_image<float>(rng, 3, 8, 8);
    const TensorF eps({3, 8, 8});
    const auto xt = q_sample(x0, 20, eps, s);
    const float a = static_cast<float>(std::sqrt(s.alpha_bar(20)));
    for (int64_t i = 0; i < xt.data.numel(); ++i) CHECK(xt.data[i] == a * x0.data[i]);
    CHECK(xt.role == ImageRole::Noisy);
}

TEST_CASE("q_sample: near-identity limit for tiny betas") {
    Rng rng(2);
    const auto s = make_linear_schedule(10, 1e-12, 1e-12);
    const auto x0 = testutil::random_image<float>(rng, 1, 4, 4);
    const auto eps = rng.gaussian_tensor<float>({1, 4, 4});
    const auto xt = q_sample(x0, 10, eps, s);
    for (int64_t i = 0; i < xt.data.numel(); ++i)
        CHECK(std::abs(xt.data[i] - x0.data[i]) < 1e-4);
}

TEST_CASE("q_sample: Monte Carlo marginals match the closed form within 2%") {
    const auto s = make_linear_schedule(100, 1e-4, 0.03);
    const int t = 60;
    const double abar = s.alpha_bar(t);

    ImageT<double> x0(TensorD({1, 2, 2}), ImageRole::Clean);
    x0.data[0] = 0.9;
    x0.data[1] = -0.8;
    x0.data[2] = 0.6;
    x0.data[3] = -0.5;

    const int n = 100000;
    Rng rng(3);
    double mean[4] = {0, 0, 0, 0}, mom2[4] = {0, 0, 0, 0};
    for (int k = 0; k < n; ++k) {
        const auto eps = rng.gaussian_tensor<double>({1, 2, 2});
        const auto xt = q_sample(x0, t, eps, s);
        for (int i = 0; i < 4; ++i) {
            mean[i] += xt.data[i];
            mom2[i] += xt.data[i] * xt.data[i];
        }
    }
    for (int i = 0; i < 4; ++i) {
        mean[i] /= n;
        const double var = mom2[i] / n - mean[i] * mean[i];
        const double want_mean = std::sqrt(abar) * x0.data[i];
        const double want_var = 1.0 - abar;
        CHECK(std::abs(mean[i] - want_mean) / std::abs(want_mean) < 0.02);
        CHECK(std::abs(var - want_var) / want_var < 0.02);
    }
}

TEST_CASE("masked_q_sample: degenerate masks") {
    Rng rng(4);
    const auto s = make_linear_schedule(50, 1e-4, 0.05);
    const auto x0 = testutil::random_image<float>(rng, 3, 8, 8);
    const auto eps = rng.gaussian_tensor<float>({3, 8, 8});

    TensorU8 zeros({8, 8});
    const auto same = masked_q_sample(x0, zeros, 30, eps, s);
    for (int64_t i = 0; i < same.data.numel(); ++i) CHECK(same.data[i] == x0.data[i]);

    TensorU8 ones({8, 8});
    ones.fill(1);
    const auto noised = masked_q_sample(x0, ones, 30, eps, s);
    const auto full = q_sample(x0, 30, eps, s);
    for (int64_t i = 0; i < full.data.numel(); ++i) CHECK(noised.data[i] == full.data[i]);
}

TEST_CASE("masked_q_sample: background is bit-exact for random masks and steps") {
    Rng rng(5);
    const auto s = make_linear_schedule(100, 1e-4, 0.02);
    for (int trial = 0; trial < 50; ++trial) {
        const auto x0 = testutil::random_image<float>(rng, 3, 8, 8);
        const auto eps = rng.gaussian_tensor<float>({3, 8, 8});
        const auto m = testutil::random_mask(rng, 8, 8);
        const int t = rng.uniform_int(1, 100);
        const auto xt = masked_q_sample(x0, m.data, t, eps, s);
        for (int c = 0; c < 3; ++c)
            for (int64_t p = 0; p < 64; ++p)
                if (!m.data[p]) CHECK(xt.data[c * 64 + p] == x0.data[c * 64 + p]);
    }
}

TEST_CASE("masked_q_sample: non-binary mask rejected") {
    Rng rng(6);
    const auto s = make_linear_schedule(10, 1e-4, 0.02);
    const auto x0 = testutil::random_image<float>(rng, 1, 4, 4);
    const auto eps = rng.gaussian_tensor<float>({1, 4, 4});
    TensorU8 bad({4, 4});
    bad[5] = 2;
    CHECK_THROWS_AS(masked_q_sample(x0, bad, 5, eps, s), std::invalid_argument);
}

TEST_CASE("predict_x0: algebraic round trip") {
    Rng rng(7);
    const auto s = make_linear_schedule(100, 1e-4, 0.02);

    const auto x0f = testutil::random_image<float>(rng, 3, 8, 8);
    const auto epsf = rng.gaussian_tensor<float>({3, 8, 8});
    for (int t : {1, 25, 50, 100}) {
        const auto rec = predict_x0(q_sample(x0f, t, epsf, s), epsf, t, s);
        for (int64_t i = 0; i < rec.data.numel(); ++i)
            CHECK(std::abs(rec.data[i] - x0f.data[i]) < 1e-5);
    }

    const auto x0d = testutil::random_image<double>(rng, 3, 8, 8);
    const auto epsd = rng.gaussian_tensor<double>({3, 8, 8});
    for (int t : {1, 25, 50, 100}) {
        const auto rec = predict_x0(q_sample(x0d, t, epsd, s), epsd, t, s);
        for (int64_t i = 0; i < rec.data.numel(); ++i)
            CHECK(std::abs(rec.data[i] - x0d.data[i]) < 1e-10);
    }
}

TEST_CASE("predict_x0: zero eps and hand algebra") {
    const auto s = make_linear_schedule(1, 0.1, 0.1);  // alpha_bar = 0.9
    ImageT<double> xt(TensorD({1, 1, 1}), ImageRole::Noisy);
    xt.data[0] = 0.7;
    const TensorD zero({1, 1, 1});
    const auto rec = predict_x0(xt, zero, 1, s);
    CHECK(rec.data[0] == doctest::Approx(0.7 / std::sqrt(0.9)).epsilon(1e-12));

    // alpha_bar = 0.9, x_t = 0.9 * e: the matching eps reconstructs e exactly
    ImageT<double> e(TensorD({1, 1, 1}), ImageRole::Clean);
    e.data[0] = 1.0;
    TensorD eps({1, 1, 1});
    eps[0] = (0.9 - std::sqrt(0.9)) / std::sqrt(1.0 - 0.9);
    ImageT<double> xt2(TensorD({1, 1, 1}), ImageRole::Noisy);
    xt2.data[0] = 0.9;
    const auto rec2 = predict_x0(xt2, eps, 1, s);
    CHECK(rec2.data[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ddpm_step: final step is deterministic") {
    Rng rng(8);
    const auto s = make_linear_schedule(10, 1e-4, 0.02);
    const auto xt = testutil::random_image<float>(rng, 1, 4, 4);
    const auto eps_hat = rng.gaussian_tensor<float>({1, 4, 4});
    const auto a = ddpm_step<float>(xt, eps_hat, 1, s, nullptr);
    const auto noise = rng.gaussian_tensor<float>({1, 4, 4});
    const auto b = ddpm_step(xt, eps_hat, 1, s, &noise);
    for (int64_t i = 0; i < a.data.numel(); ++i) CHECK(a.data[i] == b.data[i]);
}

TEST_CASE("ddpm_step: vanishing-beta limit leaves the latent unchanged") {
    Rng rng(9);
    const auto s = make_linear_schedule(2, 1e-12, 1e-12);
    const auto xt = testutil::random_image<double>(rng, 1, 4, 4);
    TensorD eps_hat({1, 4, 4});
    TensorD noise({1, 4, 4});
    for (int64_t i = 0; i < eps_hat.numel(); ++i) {
        eps_hat[i] = rng.uniform() - 0.5;
        noise[i] = rng.uniform() - 0.5;
    }
    const auto out = ddpm_step(xt, eps_hat, 2, s, &noise);
    for (int64_t i = 0; i < out.data.numel(); ++i) CHECK(std::abs(out.data[i] - xt.data[i]) < 1e-6);
}

TEST_CASE("ddpm_step: scalar hand computation at T=2") {
    const auto s = make_linear_schedule(2, 0.1, 0.2);
    ImageT<double> xt(TensorD({1, 1, 1}), ImageRole::Noisy);
    xt.data[0] = 0.5;
    TensorD eps_hat({1, 1, 1});
    eps_hat[0] = 0.3;
    TensorD noise({1, 1, 1});
    noise[0] = 0.7;
    const auto out = ddpm_step(xt, eps_hat, 2, s, &noise);

    const double alpha = 0.8, abar = 0.72, beta = 0.2, abar_prev = 0.9;
    const double mean = (0.5 - beta / std::sqrt(1.0 - abar) * 0.3) / std::sqrt(alpha);
    const double sigma = std::sqrt(beta * (1.0 - abar_prev) / (1.0 - abar));
    CHECK(out.data[0] == doctest::Approx(mean + sigma * 0.7).epsilon(1e-12));
}

TEST_CASE("ddim_step: eta=0 with the true noise tracks the closed form") {
    Rng rng(10);
    const auto s = make_linear_schedule(100, 1e-4, 0.02);
    const auto x0 = testutil::random_image<float>(rng, 3, 8, 8);
    const auto eps = rng.gaussian_tensor<float>({3, 8, 8});
    const auto xt = q_sample(x0, 80, eps, s);
    const auto stepped = ddim_step<float>(xt, eps, 80, 40, s, 0.0);
    const auto want = q_sample(x0, 40, eps, s);
    for (int64_t i = 0; i < want.data.numel(); ++i) CHECK(std::abs(stepped.data[i] - want.data[i]) < 1e-5);
}

TEST_CASE("ddim_step: t_prev=0 returns the x0 estimate") {
    Rng rng(11);
    const auto s = make_linear_schedule(100, 1e-4, 0.02);
    const auto x0 = testutil::random_image<float>(rng, 1, 4, 4);
    const auto eps = rng.gaussian_tensor<float>({1, 4, 4});
    const auto xt = q_sample(x0, 50, eps, s);
    const auto out = ddim_step<float>(xt, eps, 50, 0, s, 0.0);
    for (int64_t i = 0; i < out.data.numel(); ++i) CHECK(std::abs(out.data[i] - x0.data[i]) < 1e-5);
    CHECK(out.role == ImageRole::Clean);
}

TEST_CASE("ddim_step: one skip equals two shorter skips under the true noise") {
    Rng rng(12);
    const auto s = make_linear_schedule(100, 1e-4, 0.02);
    const auto x0 = testutil::random_image<double>(rng, 2, 6, 6);
    const auto eps = rng.gaussian_tensor<double>({2, 6, 6});
    const auto xt = q_sample(x0, 90, eps, s);
    const auto direct = ddim_step<double>(xt, eps, 90, 30, s, 0.0);
    const auto mid = ddim_step<double>(xt, eps, 90, 60, s, 0.0);
    const auto two = ddim_step<double>(mid, eps, 60, 30, s, 0.0);
    for (int64_t i = 0; i < direct.data.numel(); ++i) CHECK(std::abs(direct.data[i] - two.data[i]) < 1e-5);
}

TEST_CASE("ddim_step: invalid step pairs rejected") {
    Rng rng(13);
    const auto s = make_linear_schedule(10, 1e-4, 0.02);
    const auto xt = testutil::random_image<float>(rng, 1, 2, 2);
    const auto eps = rng.gaussian_tensor<float>({1, 2, 2});
    CHECK_THROWS_AS(ddim_step<float>(xt, eps, 5, 5, s, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(ddim_step<float>(xt, eps, 5, 7, s, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(ddim_step<float>(xt, eps, 5, 3, s, 1.5), std::invalid_argument);
}
