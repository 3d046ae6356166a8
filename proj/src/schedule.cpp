#include "maskdiff/schedule.hpp"

#include <stdexcept>
#include <string>

namespace maskdiff {

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_linear_schedule: T must be >= 1 (got " + std::to_string(T) + ")");
    if (!(beta_start > 0.0) || !(beta_start < 1.0))
        throw std::invalid_argument("make_linear_schedule: beta_start must be in (0,1)");
    if (!(beta_end > 0.0) || !(beta_end < 1.0))
        throw std::invalid_argument("make_linear_schedule: beta_end must be in (0,1)");
    if (beta_start > beta_end)
        throw std::invalid_argument("make_linear_schedule: beta_start must be <= beta_end");

    NoiseSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    s.posterior_variances.resize(T);

    for (int i = 0; i < T; ++i)
        s.betas[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1);

    double abar = 1.0;
    for (int i = 0; i < T; ++i) {
        s.alphas[i] = 1.0 - s.betas[i];
        const double abar_prev = abar;
        abar *= s.alphas[i];
        s.alpha_bars[i] = abar;
        s.posterior_variances[i] = s.betas[i] * (1.0 - abar_prev) / (1.0 - abar);
    }
    return s;
}

}  // namespace maskdiff
