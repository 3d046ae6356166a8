#include "maskdiff/maskops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace maskdiff {

InstanceMask::InstanceMask(TensorU8 d) : data(std::move(d)) {
    if (data.rank() != 2) throw std::invalid_argument("InstanceMask: expected rank-2 (H,W) grid");
    for (int64_t i = 0; i < data.numel(); ++i)
        if (data[i] != 0 && data[i] != 1)
            throw std::invalid_argument("InstanceMask: values must be exactly 0 or 1");
}

int64_t InstanceMask::count() const {
    int64_t n = 0;
    for (int64_t i = 0; i < data.numel(); ++i) n += data[i];
    return n;
}

bool InstanceMask::operator==(const InstanceMask& o) const {
    if (!data.same_shape(o.data)) return false;
    for (int64_t i = 0; i < data.numel(); ++i)
        if (data[i] != o.data[i]) return false;
    return true;
}

void LadderConfig::validate() const {
    if (S < 1) throw std::invalid_argument("LadderConfig: S must be >= 1");
    const size_t levels = static_cast<size_t>(S > 1 ? S - 1 : 0);
    if (kernel_sizes.size() != levels || sigmas.size() != levels)
        throw std::invalid_argument("LadderConfig: need exactly S-1 kernel sizes and sigmas");
    for (size_t i = 0; i < levels; ++i) {
        if (kernel_sizes[i] < 1 || kernel_sizes[i] % 2 == 0)
            throw std::invalid_argument("LadderConfig: kernel_sizes must be odd and >= 1");
        if (!(sigmas[i] > 0.0)) throw std::invalid_argument("LadderConfig: sigmas must be positive");
        if (i > 0 && (kernel_sizes[i] <= kernel_sizes[i - 1] || sigmas[i] <= sigmas[i - 1]))
            throw std::invalid_argument("LadderConfig: kernel_sizes and sigmas must be strictly increasing");
    }
    if (!(binarize_threshold > 0.0 && binarize_threshold < 1.0))
        throw std::invalid_argument("LadderConfig: binarize_threshold must be in (0,1)");
}

LadderConfig default_ladder(int resolution) {
    if (resolution < 1) throw std::invalid_argument("default_ladder: resolution must be >= 1");
    LadderConfig cfg;
    cfg.S = 4;
    const double scale = resolution / 32.0;
    const int base_k[3] = {9, 17, 33};
    const double base_sigma[3] = {3.0, 6.0, 12.0};
    for (int i = 0; i < 3; ++i) {
        int k = static_cast<int>(std::lround(base_k[i] * scale));
        if (k < 1) k = 1;
        if (k % 2 == 0) ++k;
        cfg.kernel_sizes.push_back(k);
        cfg.sigmas.push_back(base_sigma[i] * scale);
    }
    // Rounding to odd can collapse neighbours at tiny resolutions.
    for (size_t i = 1; i < cfg.kernel_sizes.size(); ++i)
        if (cfg.kernel_sizes[i] <= cfg.kernel_sizes[i - 1])
            cfg.kernel_sizes[i] = cfg.kernel_sizes[i - 1] + 2;
    cfg.validate();
    return cfg;
}

namespace {

// Fold an out-of-range index back into [0, n) by repeated reflection about
// the edges (edge pixels not duplicated).
int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = std::abs(i) % period;
    return i < n ? i : period - i;
}

std::vector<float> gaussian_kernel_1d(int k, double sigma) {
    std::vector<double> w(static_cast<size_t>(k));
    const int r = k / 2;
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
        const double d = i - r;
        w[static_cast<size_t>(i)] = std::exp(-0.5 * d * d / (sigma * sigma));
        sum += w[static_cast<size_t>(i)];
    }
    std::vector<float> out(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) out[static_cast<size_t>(i)] = static_cast<float>(w[static_cast<size_t>(i)] / sum);
    return out;
}

TensorF blur_grid(const TensorF& in, int k, double sigma) {
    if (k < 1 || k % 2 == 0) throw std::invalid_argument("gaussian_blur: kernel size must be odd and >= 1");
    if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_blur: sigma must be positive");
    if (in.rank() != 2) throw std::invalid_argument("gaussian_blur: expected rank-2 grid");
    const int H = in.dim(0), W = in.dim(1), r = k / 2;
    if (k == 1) return in;
    const auto kern = gaussian_kernel_1d(k, sigma);

    TensorF tmp({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i)
                acc += kern[static_cast<size_t>(i + r)] * in.at2(y, reflect_index(x + i, W));
            tmp.at2(y, x) = static_cast<float>(acc);
        }
    TensorF out({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i)
                acc += kern[static_cast<size_t>(i + r)] * tmp.at2(reflect_index(y + i, H), x);
            out.at2(y, x) = std::clamp(static_cast<float>(acc), 0.0f, 1.0f);
        }
    return out;
}

}  // namespace

TensorF gaussian_blur(const InstanceMask& m, int k, double sigma) {
    return blur_grid(m.as<float>(), k, sigma);
}

TensorF gaussian_blur(const TensorF& soft, int k, double sigma) { return blur_grid(soft, k, sigma); }

InstanceMask binarize(const TensorF& soft, double theta) {
    if (!(theta > 0.0 && theta < 1.0)) throw std::invalid_argument("binarize: theta must be in (0,1)");
    TensorU8 out(soft.shape());
    for (int64_t i = 0; i < soft.numel(); ++i) out[i] = soft[i] > theta ? 1 : 0;
    return InstanceMask(std::move(out));
}

InstanceMask bbox_mask(const InstanceMask& m) {
    const int H = m.height(), W = m.width();
    int y0 = H, y1 = -1, x0 = W, x1 = -1;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (m.data.at2(y, x)) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
    if (y1 < 0) throw std::invalid_argument("bbox_mask: mask has empty support");
    InstanceMask out(H, W);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) out.data.at2(y, x) = 1;
    return out;
}

PrecisionMask precision_mask(const InstanceMask& m, int s, const LadderConfig& cfg) {
    cfg.validate();
    if (s < 0 || s > cfg.S)
        throw std::invalid_argument("precision_mask: s=" + std::to_string(s) + " outside 0.." +
                                    std::to_string(cfg.S));
    if (m.empty_support()) throw std::invalid_argument("precision_mask: mask has empty support");

    PrecisionMask out;
    out.s = s;
    out.source = m;
    if (s == 0) {
        out.data = m;
        return out;
    }
    if (s == cfg.S) {
        out.data = bbox_mask(m);
        return out;
    }
    InstanceMask cur = m;
    for (int level = 1; level <= s; ++level) {
        const auto soft = gaussian_blur(m, cfg.kernel_sizes[static_cast<size_t>(level - 1)],
                                        cfg.sigmas[static_cast<size_t>(level - 1)]);
        cur = mask_union(cur, binarize(soft, cfg.binarize_threshold));
    }
    out.data = cur;
    return out;
}

double iou(const InstanceMask& a, const InstanceMask& b) {
    a.data.check_same_shape(b.data, "iou");
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < a.data.numel(); ++i) {
        inter += a.data[i] & b.data[i];
        uni += a.data[i] | b.data[i];
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

InstanceMask mask_intersect(const InstanceMask& a, const InstanceMask& b) {
    a.data.check_same_shape(b.data, "mask_intersect");
    InstanceMask out(a.height(), a.width());
    for (int64_t i = 0; i < a.data.numel(); ++i) out.data[i] = a.data[i] & b.data[i];
    return out;
}

InstanceMask mask_union(const InstanceMask& a, const InstanceMask& b) {
    a.data.check_same_shape(b.data, "mask_union");
    InstanceMask out(a.height(), a.width());
    for (int64_t i = 0; i < a.data.numel(); ++i) out.data[i] = a.data[i] | b.data[i];
    return out;
}

InstanceMask full_mask(int h, int w) {
    InstanceMask m(h, w);
    m.data.fill(1);
    return m;
}

}  // namespace maskdiff
