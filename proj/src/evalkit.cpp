#include "maskdiff/evalkit.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "maskdiff/checkpoint.hpp"

namespace maskdiff {

namespace fs = std::filesystem;
using nlohmann::json;

double background_mse(const Image& output, const Image& x0, const InstanceMask& object_mask) {
    output.data.check_same_shape(x0.data, "background_mse");
    if (object_mask.height() != x0.height() || object_mask.width() != x0.width())
        throw std::invalid_argument("background_mse: mask shape mismatch");
    const int C = x0.channels();
    const int64_t hw = static_cast<int64_t>(x0.height()) * x0.width();
    int64_t n = 0;
    double acc = 0.0;
    for (int64_t p = 0; p < hw; ++p) {
        if (object_mask.data[p]) continue;
        for (int c = 0; c < C; ++c) {
            const int64_t i = static_cast<int64_t>(c) * hw + p;
            const double d = static_cast<double>(output.data[i]) - x0.data[i];
            acc += d * d;
        }
        ++n;
    }
    if (n == 0) throw std::invalid_argument("background_mse: mask covers every pixel; no background");
    return acc / static_cast<double>(n * C);
}

TensorF bilinear_resize(const TensorF& chw, int out_h, int out_w) {
    if (chw.rank() != 3) throw std::invalid_argument("bilinear_resize: expected (C,H,W)");
    const int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    TensorF out({C, out_h, out_w});
    const double sy = static_cast<double>(H) / out_h;
    const double sx = static_cast<double>(W) / out_w;
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < out_h; ++y) {
            const double fy = (y + 0.5) * sy - 0.5;
            const int y0 = static_cast<int>(std::floor(fy));
            const double wy = fy - y0;
            const int ya = std::clamp(y0, 0, H - 1), yb = std::clamp(y0 + 1, 0, H - 1);
            for (int x = 0; x < out_w; ++x) {
                const double fx = (x + 0.5) * sx - 0.5;
                const int x0 = static_cast<int>(std::floor(fx));
                const double wx = fx - x0;
                const int xa = std::clamp(x0, 0, W - 1), xb = std::clamp(x0 + 1, 0, W - 1);
                const double v = (1 - wy) * ((1 - wx) * chw.at3(c, ya, xa) + wx * chw.at3(c, ya, xb)) +
                                 wy * ((1 - wx) * chw.at3(c, yb, xa) + wx * chw.at3(c, yb, xb));
                out.at3(c, y, x) = static_cast<float>(v);
            }
        }
    return out;
}

TensorF local_crop(const TensorF& image, const InstanceMask& mask, int out_resolution) {
    if (mask.empty_support()) throw std::invalid_argument("local_crop: mask has empty support");
    const InstanceMask box = bbox_mask(mask);
    int y0 = mask.height(), y1 = -1, x0 = mask.width(), x1 = -1;
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x)
            if (box.data.at2(y, x)) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
    const int C = image.dim(0);
    TensorF crop({C, y1 - y0 + 1, x1 - x0 + 1});
    for (int c = 0; c < C; ++c)
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) crop.at3(c, y - y0, x - x0) = image.at3(c, y, x);
    return bilinear_resize(crop, out_resolution, out_resolution);
}

InstanceMask changed_region(const Image& output, const Image& x0, double threshold) {
    output.data.check_same_shape(x0.data, "changed_region");
    const int C = x0.channels();
    const int64_t hw = static_cast<int64_t>(x0.height()) * x0.width();
    InstanceMask m(x0.height(), x0.width());
    for (int64_t p = 0; p < hw; ++p) {
        double d = 0.0;
        for (int c = 0; c < C; ++c)
            d = std::max(d, std::abs(static_cast<double>(output.data[static_cast<int64_t>(c) * hw + p]) -
                                     x0.data[static_cast<int64_t>(c) * hw + p]));
        m.data[p] = d > threshold ? 1 : 0;
    }
    return m;
}

// ---------------------------------------------------------------------- fid

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues();
    for (int i = 0; i < ev.size(); ++i) ev[i] = ev[i] > 0.0 ? std::sqrt(ev[i]) : 0.0;
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(const std::vector<std::vector<float>>& features_a,
           const std::vector<std::vector<float>>& features_b, bool* jitter_applied) {
    if (features_a.size() < 2 || features_b.size() < 2)
        throw std::invalid_argument("fid: need at least 2 vectors per set");
    const size_t dim = features_a[0].size();
    for (const auto& v : features_a)
        if (v.size() != dim) throw std::invalid_argument("fid: inconsistent feature dimensionality");
    for (const auto& v : features_b)
        if (v.size() != dim) throw std::invalid_argument("fid: inconsistent feature dimensionality");

    const auto stats = [dim](const std::vector<std::vector<float>>& f) {
        const int n = static_cast<int>(f.size());
        Eigen::MatrixXd x(n, static_cast<int>(dim));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < static_cast<int>(dim); ++j) x(i, j) = f[static_cast<size_t>(i)][static_cast<size_t>(j)];
        Eigen::VectorXd mu = x.colwise().mean();
        Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
        Eigen::MatrixXd sigma = centered.transpose() * centered / static_cast<double>(n - 1);
        return std::make_pair(mu, sigma);
    };

    auto [mu_a, sigma_a] = stats(features_a);
    auto [mu_b, sigma_b] = stats(features_b);

    bool jitter = false;
    const auto min_eig = [](const Eigen::MatrixXd& m) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
        return es.eigenvalues().minCoeff();
    };
    if (min_eig(sigma_a) < 1e-10 || min_eig(sigma_b) < 1e-10) {
        jitter = true;
        sigma_a += 1e-6 * Eigen::MatrixXd::Identity(sigma_a.rows(), sigma_a.cols());
        sigma_b += 1e-6 * Eigen::MatrixXd::Identity(sigma_b.rows(), sigma_b.cols());
    }
    if (jitter_applied != nullptr) *jitter_applied = jitter;

    const Eigen::MatrixXd a_sqrt = psd_sqrt(sigma_a);
    const Eigen::MatrixXd inner = psd_sqrt(a_sqrt * sigma_b * a_sqrt);
    const double mean_term = (mu_a - mu_b).squaredNorm();
    const double trace_term = sigma_a.trace() + sigma_b.trace() - 2.0 * inner.trace();
    const double v = mean_term + trace_term;
    return v > 0.0 ? v : 0.0;
}

FeatureExtractor pixel_feature_extractor(int grid) {
    return [grid](const TensorF& chw) {
        const TensorF small = bilinear_resize(chw, grid, grid);
        std::vector<float> out(static_cast<size_t>(small.numel()));
        for (int64_t i = 0; i < small.numel(); ++i) out[static_cast<size_t>(i)] = small[i];
        return out;
    };
}

// -------------------------------------------------------------------- probe

ProbeClassifier::ProbeClassifier(ProbeConfig cfg) : cfg_(cfg) {
    Rng rng(cfg_.seed);
    conv1_ = nn::Conv2d<float>(3, cfg_.base_width, 3, 2, rng);
    conv2_ = nn::Conv2d<float>(cfg_.base_width, 2 * cfg_.base_width, 3, 2, rng);
    const int spatial = cfg_.crop_resolution / 4;
    fc_ = nn::Linear<float>(2 * cfg_.base_width * spatial * spatial, cfg_.num_classes, rng);
}

TensorF ProbeClassifier::logits_batch(const TensorF& x, bool training) {
    const int B = x.dim(0);
    const int R = cfg_.crop_resolution;
    // to channel-major
    TensorF cm({3, B, R, R});
    const int64_t hw = static_cast<int64_t>(R) * R;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < 3; ++c)
            std::memcpy(cm.data() + (static_cast<int64_t>(c) * B + b) * hw,
                        x.data() + (static_cast<int64_t>(b) * 3 + c) * hw, sizeof(float) * static_cast<size_t>(hw));
    TensorF h = act1_.forward(conv1_.forward(cm, training), training);
    h = act2_.forward(conv2_.forward(h, training), training);
    gap_shape_ = h.shape();
    // flatten to (C*H*W, B), keeping the spatial layout for the classifier
    const int C2 = h.dim(0);
    const int64_t hw2 = static_cast<int64_t>(h.dim(2)) * h.dim(3);
    TensorF flat({static_cast<int>(C2 * hw2), B});
    for (int c = 0; c < C2; ++c)
        for (int b = 0; b < B; ++b) {
            const float* p = h.data() + (static_cast<int64_t>(c) * B + b) * hw2;
            for (int64_t i = 0; i < hw2; ++i) flat.at2(static_cast<int>(c * hw2 + i), b) = p[i];
        }
    return fc_.forward(flat, training);  // (K, B)
}

void ProbeClassifier::train(const std::vector<TensorF>& crops, const std::vector<int>& labels, int steps,
                            int batch_size, double lr, Rng& rng) {
    if (crops.size() != labels.size() || crops.empty())
        throw std::invalid_argument("ProbeClassifier::train: crops/labels mismatch");
    nn::AdamOptimizer<float> opt(lr);
    nn::ParamList<float> params;
    conv1_.collect("conv1", params);
    conv2_.collect("conv2", params);
    fc_.collect("fc", params);
    opt.attach(params);

    const int R = cfg_.crop_resolution;
    const int64_t chw = static_cast<int64_t>(3) * R * R;
    for (int step = 0; step < steps; ++step) {
        Rng srng = rng.stream(static_cast<uint64_t>(step));
        TensorF x({batch_size, 3, R, R});
        std::vector<int> y(static_cast<size_t>(batch_size));
        for (int b = 0; b < batch_size; ++b) {
            const int idx = srng.uniform_int(0, static_cast<int>(crops.size()) - 1);
            std::memcpy(x.data() + static_cast<int64_t>(b) * chw, crops[static_cast<size_t>(idx)].data(),
                        sizeof(float) * static_cast<size_t>(chw));
            y[static_cast<size_t>(b)] = labels[static_cast<size_t>(idx)];
        }
        TensorF logits = logits_batch(x, /*training=*/true);
        // softmax cross-entropy gradient
        const int K = cfg_.num_classes;
        TensorF dlogits({K, batch_size});
        for (int b = 0; b < batch_size; ++b) {
            double mx = logits.at2(0, b);
            for (int k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(logits.at2(k, b)));
            double z = 0.0;
            for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(logits.at2(k, b)) - mx);
            for (int k = 0; k < K; ++k) {
                const double p = std::exp(static_cast<double>(logits.at2(k, b)) - mx) / z;
                dlogits.at2(k, b) =
                    static_cast<float>((p - (k == y[static_cast<size_t>(b)] ? 1.0 : 0.0)) / batch_size);
            }
        }
        nn::zero_grads<float>(params);
        // backward: fc -> unflatten -> conv2 -> conv1
        TensorF dflat = fc_.backward(dlogits);
        const int C2 = gap_shape_[0];
        const int64_t hw2 = static_cast<int64_t>(gap_shape_[2]) * gap_shape_[3];
        TensorF dh(gap_shape_);
        for (int c = 0; c < C2; ++c)
            for (int b = 0; b < batch_size; ++b) {
                float* p = dh.data() + (static_cast<int64_t>(c) * batch_size + b) * hw2;
                for (int64_t i = 0; i < hw2; ++i) p[i] = dflat.at2(static_cast<int>(c * hw2 + i), b);
            }
        conv1_.backward(act1_.backward(conv2_.backward(act2_.backward(dh))));
        opt.step(params);
    }
}

int ProbeClassifier::predict(const TensorF& crop) {
    if (crop.rank() != 3 || crop.dim(0) != 3 || crop.dim(1) != cfg_.crop_resolution)
        throw std::invalid_argument("ProbeClassifier::predict: bad crop shape");
    TensorF x({1, 3, cfg_.crop_resolution, cfg_.crop_resolution});
    std::memcpy(x.data(), crop.data(), sizeof(float) * static_cast<size_t>(crop.numel()));
    TensorF logits = logits_batch(x, /*training=*/false);
    int best = 0;
    for (int k = 1; k < cfg_.num_classes; ++k)
        if (logits.at2(k, 0) > logits.at2(best, 0)) best = k;
    return best;
}

double ProbeClassifier::accuracy(const std::vector<TensorF>& crops, const std::vector<int>& labels) {
    int correct = 0;
    for (size_t i = 0; i < crops.size(); ++i)
        if (predict(crops[i]) == labels[i]) ++correct;
    return crops.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(crops.size());
}

void ProbeClassifier::save(const std::string& path) const {
    json meta;
    meta["kind"] = "maskdiff-probe";
    meta["crop_resolution"] = cfg_.crop_resolution;
    meta["num_classes"] = cfg_.num_classes;
    meta["base_width"] = cfg_.base_width;
    meta["seed"] = cfg_.seed;
    meta["heldout_accuracy"] = heldout_accuracy_;
    std::vector<NamedTensor> tensors;
    nn::ParamList<float> params;
    auto& self = const_cast<ProbeClassifier&>(*this);
    self.conv1_.collect("conv1", params);
    self.conv2_.collect("conv2", params);
    self.fc_.collect("fc", params);
    for (const auto& p : params) tensors.push_back({p.name, *p.value});
    write_archive(path, meta, tensors);
}

ProbeClassifier ProbeClassifier::load(const std::string& path) {
    TensorArchive arch = read_archive(path);
    if (!arch.meta.contains("kind") || arch.meta["kind"] != "maskdiff-probe")
        throw std::runtime_error("probe: " + path + " is not a probe archive (field 'kind')");
    ProbeConfig cfg;
    cfg.crop_resolution = arch.meta.at("crop_resolution").get<int>();
    cfg.num_classes = arch.meta.at("num_classes").get<int>();
    cfg.base_width = arch.meta.at("base_width").get<int>();
    cfg.seed = arch.meta.at("seed").get<uint64_t>();
    ProbeClassifier probe(cfg);
    probe.heldout_accuracy_ = arch.meta.at("heldout_accuracy").get<double>();
    nn::ParamList<float> params;
    probe.conv1_.collect("conv1", params);
    probe.conv2_.collect("conv2", params);
    probe.fc_.collect("fc", params);
    for (const auto& p : params) {
        const TensorF& stored = arch.find(p.name);
        if (!stored.same_shape(*p.value))
            throw std::runtime_error("probe: shape mismatch for tensor '" + p.name + "'");
        *p.value = stored;
    }
    return probe;
}

ProbeClassifier train_probe(const Dataset& heldout, const ProbeConfig& cfg, double min_accuracy) {
    if (heldout.samples.size() < 20)
        throw std::invalid_argument("train_probe: held-out dataset too small");
    const Vocabulary vocab = dataset_vocabulary(heldout.spec);
    if (static_cast<int>(vocab.classes().size()) != cfg.num_classes)
        throw std::invalid_argument("train_probe: num_classes does not match the dataset");

    // disjoint train/validation split of the held-out pool
    const size_t n_val = std::max<size_t>(10, heldout.samples.size() / 5);
    const size_t n_train = heldout.samples.size() - n_val;

    std::vector<TensorF> train_crops, val_crops;
    std::vector<int> train_labels, val_labels;
    for (size_t i = 0; i < heldout.samples.size(); ++i) {
        const auto& s = heldout.samples[i];
        auto& crops = i < n_train ? train_crops : val_crops;
        auto& labels = i < n_train ? train_labels : val_labels;
        crops.push_back(local_crop(s.image.data, s.mask, cfg.crop_resolution));
        labels.push_back(vocab.class_index(s.meta.label));
    }

    ProbeClassifier probe(cfg);
    Rng rng(cfg.seed + 1);
    probe.train(train_crops, train_labels, /*steps=*/2000, /*batch_size=*/32, /*lr=*/1e-3, rng);
    const double acc = probe.accuracy(val_crops, val_labels);
    probe.set_heldout_accuracy(acc);
    if (acc < min_accuracy)
        throw std::runtime_error("train_probe: validation accuracy " + std::to_string(acc) +
                                 " below required " + std::to_string(min_accuracy) +
                                 "; probe unreliable, evaluation refused");
    return probe;
}

// ---------------------------------------------------------------- reporting

EvalReport evaluate_tuples(const std::vector<EvalTuple>& tuples, ProbeClassifier& probe,
                           const EvalOptions& opt) {
    if (tuples.empty()) throw std::invalid_argument("evaluate_tuples: no tuples");
    if (probe.heldout_accuracy() < 0.95)
        throw std::runtime_error("evaluate_tuples: probe held-out accuracy " +
                                 std::to_string(probe.heldout_accuracy()) +
                                 " below 0.95; evaluation refused");

    EvalReport rep;
    auto extract = pixel_feature_extractor(opt.feature_grid);
    std::vector<std::vector<float>> feats_real, feats_gen, feats_real_local, feats_gen_local;
    std::vector<double> bg;

    for (const auto& t : tuples) {
        EvalRecord rec;
        rec.id = t.id;
        rec.iou = iou(changed_region(t.output, t.x0, opt.change_threshold), t.mask);
        rec.background_mse = background_mse(t.output, t.x0, t.mask);
        const TensorF crop = local_crop(t.output.data, t.mask, probe.config().crop_resolution);
        rec.probe_class = probe.predict(crop);
        rec.probe_correct = rec.probe_class == t.prompt_class;
        rep.records.push_back(rec);

        feats_real.push_back(extract(t.x0.data));
        feats_gen.push_back(extract(t.output.data));
        feats_real_local.push_back(extract(local_crop(t.x0.data, t.mask, opt.crop_resolution)));
        feats_gen_local.push_back(extract(local_crop(t.output.data, t.mask, opt.crop_resolution)));
        bg.push_back(rec.background_mse);
    }

    double iou_sum = 0.0, bg_sum = 0.0;
    int correct = 0;
    for (const auto& r : rep.records) {
        iou_sum += r.iou;
        bg_sum += r.background_mse;
        correct += r.probe_correct ? 1 : 0;
    }
    const double n = static_cast<double>(rep.records.size());
    rep.mean_iou = iou_sum / n;
    rep.mean_background_mse = bg_sum / n;
    std::sort(bg.begin(), bg.end());
    rep.median_background_mse =
        bg.size() % 2 == 1 ? bg[bg.size() / 2] : 0.5 * (bg[bg.size() / 2 - 1] + bg[bg.size() / 2]);
    rep.probe_accuracy = correct / n;
    if (tuples.size() >= 2) {
        bool j1 = false, j2 = false;
        rep.fid_global = fid(feats_real, feats_gen, &j1);
        rep.fid_local = fid(feats_real_local, feats_gen_local, &j2);
        rep.fid_jittered = j1 || j2;
    }
    return rep;
}

void write_report(const EvalReport& report, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream out(fs::path(dir) / "report.jsonl");
    for (const auto& r : report.records) {
        json rec = {{"id", r.id},
                    {"iou", r.iou},
                    {"background_mse", r.background_mse},
                    {"probe_class", r.probe_class},
                    {"probe_correct", r.probe_correct}};
        out << rec.dump() << "\n";
    }
    json agg = {{"aggregate",
                 {{"mean_iou", report.mean_iou},
                  {"mean_background_mse", report.mean_background_mse},
                  {"median_background_mse", report.median_background_mse},
                  {"probe_accuracy", report.probe_accuracy},
                  {"fid_global", report.fid_global},
                  {"fid_local", report.fid_local},
                  {"fid_jittered", report.fid_jittered},
                  {"count", report.records.size()}}}};
    out << agg.dump() << "\n";
    out.close();

    std::ofstream sum(fs::path(dir) / "summary.txt");
    sum << "samples                " << report.records.size() << "\n";
    sum << "mean IoU               " << report.mean_iou << "\n";
    sum << "mean background MSE    " << report.mean_background_mse << "\n";
    sum << "median background MSE  " << report.median_background_mse << "\n";
    sum << "probe accuracy         " << report.probe_accuracy << "\n";
    sum << "FID (global)           " << report.fid_global << "\n";
    sum << "FID (local crops)      " << report.fid_local << (report.fid_jittered ? "  [jittered]" : "")
        << "\n";
}

}  // namespace maskdiff
