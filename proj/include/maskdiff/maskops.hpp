#pragma once

#include <cstdint>
#include <vector>

#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Binary instance mask, (H, W), values exactly 0 or 1.
struct InstanceMask {
    TensorU8 data;

    InstanceMask() = default;
    explicit InstanceMask(TensorU8 d);
    InstanceMask(int h, int w) : data(TensorU8({h, w})) {}

    int height() const { return data.dim(0); }
    int width() const { return data.dim(1); }
    int64_t count() const;
    bool empty_support() const { return count() == 0; }
    bool operator==(const InstanceMask& o) const;

    // Float copy (0/1) used when masks enter the diffusion arithmetic.
    template <typename S>
    Tensor<S> as() const {
        return cast_tensor<S>(data);
    }
};

// Gaussian-blur coarsening ladder: level 0 is the exact mask, level S the
// bounding box, levels in between blur with growing kernels. kernel_sizes
// and sigmas hold the parameters for levels 1..S-1.
struct LadderConfig {
    int S = 4;
    std::vector<int> kernel_sizes;  // odd, strictly increasing
    std::vector<double> sigmas;     // positive, strictly increasing
    double binarize_threshold = 0.05;

    void validate() const;
};

// Defaults tuned for 32x32; kernels and sigmas scale with resolution.
LadderConfig default_ladder(int resolution = 32);

// Coarsened mask plus the precision indicator it was produced at. Keeps the
// exact source mask so training targets stay paired with their coarse input.
struct PrecisionMask {
    InstanceMask data;
    int s = 0;
    InstanceMask source;
};

// Separable normalized Gaussian convolution with reflect padding. Input is a
// binary mask, output a soft grid in [0,1].
TensorF gaussian_blur(const InstanceMask& m, int k, double sigma);

// Soft grid version for callers that chain blurs.
TensorF gaussian_blur(const TensorF& soft, int k, double sigma);

// 1 where soft > theta (strict), else 0.
InstanceMask binarize(const TensorF& soft, double theta);

// Filled tight axis-aligned bounding rectangle of the support.
InstanceMask bbox_mask(const InstanceMask& m);

// Level-s mask of the ladder. s=0 returns the mask unchanged, s=S its
// bounding box. Intermediate levels are the running union
// m_s = m_{s-1} | binarize(blur(m, k_s, sigma_s)), which nests the ladder;
// the union is not clipped to the box, so m_{S-1} may exceed m_S.
PrecisionMask precision_mask(const InstanceMask& m, int s, const LadderConfig& cfg);

// Intersection over union; both-empty is defined as 1.
double iou(const InstanceMask& a, const InstanceMask& b);

InstanceMask mask_intersect(const InstanceMask& a, const InstanceMask& b);
InstanceMask mask_union(const InstanceMask& a, const InstanceMask& b);
InstanceMask full_mask(int h, int w);

}  // namespace maskdiff
