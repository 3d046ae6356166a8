#pragma once

#include <functional>
#include <string>
#include <vector>

#include "maskdiff/image.hpp"
#include "maskdiff/maskops.hpp"
#include "maskdiff/nn.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/shapesdata.hpp"

namespace maskdiff {

// MSE over pixels outside the object mask. A full-frame mask leaves no
// background to measure, which is an error.
double background_mse(const Image& output, const Image& x0, const InstanceMask& object_mask);

TensorF bilinear_resize(const TensorF& chw, int out_h, int out_w);

// Crop to the mask's bounding box, then resize to the evaluation resolution.
TensorF local_crop(const TensorF& image, const InstanceMask& mask, int out_resolution);

// Pixels where the output departs from the source image in any channel.
InstanceMask changed_region(const Image& output, const Image& x0, double threshold = 2.0 / 255.0);

// Frechet distance between two feature sets (rows = samples). Unbiased
// covariances; the matrix square root goes through an eigendecomposition of
// the symmetrized product with tiny negative eigenvalues clamped to zero.
// Near-singular covariances get a 1e-6 diagonal jitter, reported through
// jitter_applied.
double fid(const std::vector<std::vector<float>>& features_a,
           const std::vector<std::vector<float>>& features_b, bool* jitter_applied = nullptr);

using FeatureExtractor = std::function<std::vector<float>(const TensorF& chw)>;

// Desk-scale default: bilinear downsample to a small grid and flatten.
FeatureExtractor pixel_feature_extractor(int grid = 8);

// ------------------------------------------------------------------ probe

struct ProbeConfig {
    int crop_resolution = 16;
    int num_classes = 5;
    int base_width = 16;
    uint64_t seed = 0;
};

// Small convolutional classifier over local crops; the desk-scale
// prompt-consistency check.
class ProbeClassifier {
public:
    explicit ProbeClassifier(ProbeConfig cfg);

    void train(const std::vector<TensorF>& crops, const std::vector<int>& labels, int steps,
               int batch_size, double lr, Rng& rng);
    int predict(const TensorF& crop);
    double accuracy(const std::vector<TensorF>& crops, const std::vector<int>& labels);

    const ProbeConfig& config() const { return cfg_; }
    double heldout_accuracy() const { return heldout_accuracy_; }
    void set_heldout_accuracy(double a) { heldout_accuracy_ = a; }

    void save(const std::string& path) const;
    static ProbeClassifier load(const std::string& path);

private:
    TensorF logits_batch(const TensorF& x, bool training);  // x: (B,3,R,R)

    ProbeConfig cfg_;
    nn::Conv2d<float> conv1_, conv2_;
    nn::SiLU<float> act1_, act2_;
    nn::Linear<float> fc_;
    std::vector<int> gap_shape_;
    double heldout_accuracy_ = 0.0;
};

// Trains on crops from the held-out split and validates on a disjoint tail;
// refuses (throws) when validation accuracy is below min_accuracy.
ProbeClassifier train_probe(const Dataset& heldout, const ProbeConfig& cfg, double min_accuracy = 0.95);

// --------------------------------------------------------------- reporting

struct EvalTuple {
    int id = 0;
    Image x0;
    InstanceMask mask;  // input mask used for the inpainting request
    Image output;
    int prompt_class = 0;  // class index the prompt asked for
    std::string prompt_text;
};

struct EvalRecord {
    int id = 0;
    double iou = 0.0;             // changed region vs input mask
    double background_mse = 0.0;  // outside the input mask
    int probe_class = -1;
    bool probe_correct = false;
};

struct EvalOptions {
    int crop_resolution = 32;
    int feature_grid = 8;
    double change_threshold = 2.0 / 255.0;
};

struct EvalReport {
    std::vector<EvalRecord> records;
    double mean_iou = 0.0;
    double mean_background_mse = 0.0;
    double median_background_mse = 0.0;
    double probe_accuracy = 0.0;
    double fid_global = 0.0;
    double fid_local = 0.0;
    bool fid_jittered = false;
    std::string config_echo;
};

EvalReport evaluate_tuples(const std::vector<EvalTuple>& tuples, ProbeClassifier& probe,
                           const EvalOptions& opt);

// report.jsonl (one record per line, aggregate block last) + summary.txt.
void write_report(const EvalReport& report, const std::string& dir);

}  // namespace maskdiff
