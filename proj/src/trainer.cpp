#include "maskdiff/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "maskdiff/checkpoint.hpp"

namespace maskdiff {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    if (total_steps < 1) throw std::invalid_argument("TrainConfig: total_steps must be >= 1");
    if (p_inpaint < 0.0 || p_text_to_image < 0.0 || std::abs(p_inpaint + p_text_to_image - 1.0) > 1e-9)
        throw std::invalid_argument("TrainConfig: task probabilities must be non-negative and sum to 1");
    if (cond_dropout_prob < 0.0 || cond_dropout_prob > 1.0)
        throw std::invalid_argument("TrainConfig: cond_dropout_prob must be in [0,1]");
    if (caption_prob < 0.0 || caption_prob > 1.0)
        throw std::invalid_argument("TrainConfig: caption_prob must be in [0,1]");
    if (lambda < 0.0) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
    if (checkpoint_every < 1) throw std::invalid_argument("TrainConfig: checkpoint_every must be >= 1");
    if (schedule_steps < 1) throw std::invalid_argument("TrainConfig: schedule_steps must be >= 1");
    model.validate();
    ladder.validate();
    if (ladder.S + 1 != model.precision_levels)
        throw std::invalid_argument("TrainConfig: model precision_levels must equal ladder S+1");
}

KeyValueConfig TrainConfig::to_kv() const {
    KeyValueConfig kv;
    kv.set("data.path", dataset_path);
    kv.set("run.dir", run_dir);
    kv.set_int("train.batch_size", batch_size);
    kv.set_double("train.learning_rate", learning_rate);
    kv.set_int("train.total_steps", total_steps);
    kv.set_double("train.p_inpaint", p_inpaint);
    kv.set_double("train.p_text_to_image", p_text_to_image);
    kv.set_double("train.cond_dropout_prob", cond_dropout_prob);
    kv.set_double("train.caption_prob", caption_prob);
    kv.set_double("train.lambda", lambda);
    kv.set_double("train.dice_smooth", dice_smooth);
    kv.set_int("train.seed", static_cast<int64_t>(seed));
    kv.set_int("train.checkpoint_every", checkpoint_every);
    kv.set_int("schedule.steps", schedule_steps);
    kv.set_double("schedule.beta_start", beta_start);
    kv.set_double("schedule.beta_end", beta_end);
    kv.set_int("model.resolution", model.resolution);
    kv.set_int("model.image_channels", model.image_channels);
    kv.set_int("model.base_width", model.base_width);
    std::vector<std::string> mult, attn, ks, sg;
    for (int m : model.channel_mult) mult.push_back(std::to_string(m));
    for (int r : model.attention_resolutions) attn.push_back(std::to_string(r));
    kv.set_list("model.channel_mult", mult);
    kv.set_list("model.attention_resolutions", attn);
    kv.set_int("model.emb_dim", model.emb_dim);
    kv.set_int("model.vocab_size", model.vocab_size);
    kv.set_int("model.precision_levels", model.precision_levels);
    kv.set_int("model.groups", model.groupnorm_groups);
    for (int k : ladder.kernel_sizes) ks.push_back(std::to_string(k));
    for (double s : ladder.sigmas) {
        std::ostringstream ss;
        ss.precision(17);
        ss << s;
        sg.push_back(ss.str());
    }
    kv.set_int("ladder.levels", ladder.S);
    kv.set_list("ladder.kernel_sizes", ks);
    kv.set_list("ladder.sigmas", sg);
    kv.set_double("ladder.threshold", ladder.binarize_threshold);
    return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv) {
    TrainConfig c;
    c.dataset_path = kv.get_string("data.path");
    c.run_dir = kv.get_string("run.dir", "");
    c.batch_size = static_cast<int>(kv.get_int("train.batch_size", c.batch_size));
    c.learning_rate = kv.get_double("train.learning_rate", c.learning_rate);
    c.total_steps = static_cast<int>(kv.get_int("train.total_steps", c.total_steps));
    c.p_inpaint = kv.get_double("train.p_inpaint", c.p_inpaint);
    c.p_text_to_image = kv.get_double("train.p_text_to_image", c.p_text_to_image);
    c.cond_dropout_prob = kv.get_double("train.cond_dropout_prob", c.cond_dropout_prob);
    c.caption_prob = kv.get_double("train.caption_prob", c.caption_prob);
    c.lambda = kv.get_double("train.lambda", c.lambda);
    c.dice_smooth = kv.get_double("train.dice_smooth", c.dice_smooth);
    c.seed = static_cast<uint64_t>(kv.get_int("train.seed", 0));
    c.checkpoint_every = static_cast<int>(kv.get_int("train.checkpoint_every", c.checkpoint_every));
    c.schedule_steps = static_cast<int>(kv.get_int("schedule.steps", c.schedule_steps));
    c.beta_start = kv.get_double("schedule.beta_start", c.beta_start);
    c.beta_end = kv.get_double("schedule.beta_end", c.beta_end);
    c.model.resolution = static_cast<int>(kv.get_int("model.resolution", c.model.resolution));
    c.model.image_channels = static_cast<int>(kv.get_int("model.image_channels", c.model.image_channels));
    c.model.base_width = static_cast<int>(kv.get_int("model.base_width", c.model.base_width));
    c.model.channel_mult.clear();
    for (const auto& s : kv.get_list("model.channel_mult", {"1", "2", "4"}))
        c.model.channel_mult.push_back(std::stoi(s));
    c.model.attention_resolutions.clear();
    for (const auto& s : kv.get_list("model.attention_resolutions", {"8"}))
        c.model.attention_resolutions.push_back(std::stoi(s));
    c.model.emb_dim = static_cast<int>(kv.get_int("model.emb_dim", c.model.emb_dim));
    c.model.vocab_size = static_cast<int>(kv.get_int("model.vocab_size", c.model.vocab_size));
    c.model.precision_levels = static_cast<int>(kv.get_int("model.precision_levels", c.model.precision_levels));
    c.model.groupnorm_groups = static_cast<int>(kv.get_int("model.groups", c.model.groupnorm_groups));
    if (kv.has("ladder.kernel_sizes")) {
        c.ladder.S = static_cast<int>(kv.get_int("ladder.levels", 4));
        c.ladder.kernel_sizes.clear();
        c.ladder.sigmas.clear();
        for (const auto& s : kv.get_list("ladder.kernel_sizes", {})) c.ladder.kernel_sizes.push_back(std::stoi(s));
        for (const auto& s : kv.get_list("ladder.sigmas", {})) c.ladder.sigmas.push_back(std::stod(s));
        c.ladder.binarize_threshold = kv.get_double("ladder.threshold", 0.05);
    } else {
        c.ladder = default_ladder(c.model.resolution);
    }
    return c;
}

// ---------------------------------------------------------------- batching

TrainingBatch assemble_batch(const Dataset& ds, const Rng& step_rng, const TrainConfig& cfg,
                             const LadderConfig& ladder) {
    if (ds.samples.empty()) throw std::invalid_argument("assemble_batch: dataset is empty");
    const int C = cfg.model.image_channels;
    const int H = cfg.model.resolution, W = cfg.model.resolution;

    TrainingBatch batch;
    batch.items.resize(static_cast<size_t>(cfg.batch_size));
    for (int i = 0; i < cfg.batch_size; ++i) {
        Rng rng = step_rng.stream(static_cast<uint64_t>(i) + 1);
        BatchItem& item = batch.items[static_cast<size_t>(i)];
        item.inpaint = rng.uniform() < cfg.p_inpaint;
        item.sample_index = rng.uniform_int(0, static_cast<int>(ds.samples.size()) - 1);
        const TrainingSample& sample = ds.samples[static_cast<size_t>(item.sample_index)];

        if (item.inpaint) {
            item.s = rng.uniform_int(0, ladder.S);
            item.noise_mask = precision_mask(sample.mask, item.s, ladder).data;
            item.target_mask = sample.mask;
            const bool use_caption = rng.uniform() < cfg.caption_prob;
            item.cond.kind = use_caption ? Condition::Kind::CaptionTemplate : Condition::Kind::ClassLabel;
            item.cond.token_id = use_caption ? sample.caption_token : sample.class_token;
            item.cond.prompt_text = use_caption ? sample.meta.caption : sample.meta.label;
        } else {
            item.s = ladder.S;
            item.noise_mask = full_mask(H, W);
            item.target_mask = InstanceMask(H, W);  // unused; prediction loss is off
            item.cond.kind = Condition::Kind::CaptionTemplate;
            item.cond.token_id = sample.caption_token;
            item.cond.prompt_text = sample.meta.caption;
        }
        if (rng.uniform() < cfg.cond_dropout_prob) item.cond = null_condition();
        item.t = rng.uniform_int(1, cfg.schedule_steps);
        item.eps = rng.gaussian_tensor<float>({C, H, W});
    }
    return batch;
}

// ----------------------------------------------------------------- trainer

Trainer::Trainer(TrainConfig cfg) : Trainer(std::move(cfg), /*defer_model=*/false) {}

Trainer::Trainer(TrainConfig cfg, bool defer_model)
    : cfg_(std::move(cfg)), master_(0) {
    cfg_.validate();
    ladder_ = cfg_.ladder;
    sched_ = make_linear_schedule(cfg_.schedule_steps, cfg_.beta_start, cfg_.beta_end);
    master_ = Rng(cfg_.seed);
    data_ = read_dataset(cfg_.dataset_path);
    if (data_.spec.resolution != cfg_.model.resolution)
        throw std::invalid_argument("Trainer: dataset resolution " + std::to_string(data_.spec.resolution) +
                                    " != model resolution " + std::to_string(cfg_.model.resolution));
    const Vocabulary vocab = dataset_vocabulary(data_.spec);
    if (vocab.size() > cfg_.model.vocab_size)
        throw std::invalid_argument("Trainer: dataset vocabulary (" + std::to_string(vocab.size()) +
                                    ") exceeds model vocab_size");
    if (!defer_model) {
        model_ = std::make_unique<Denoiser>(cfg_.model, cfg_.seed);
        opt_ = nn::AdamOptimizer<float>(cfg_.learning_rate);
        auto params = model_->net().params();
        opt_.attach(params);
    }
}

LossRecord Trainer::apply_batch(const TrainingBatch& batch) {
    const int B = static_cast<int>(batch.items.size());
    const int C = cfg_.model.image_channels;
    const int H = cfg_.model.resolution, W = cfg_.model.resolution;
    const int64_t hw = static_cast<int64_t>(H) * W;

    UNet<float>::Batch in;
    in.x = TensorF({B, C, H, W});
    in.mask = TensorF({B, H, W});
    in.t.resize(static_cast<size_t>(B));
    in.s.resize(static_cast<size_t>(B));
    in.token.resize(static_cast<size_t>(B));
    TensorF eps_all({B, C, H, W});

    for (int b = 0; b < B; ++b) {
        const BatchItem& item = batch.items[static_cast<size_t>(b)];
        const TrainingSample& sample = data_.samples[static_cast<size_t>(item.sample_index)];
        const Image xt = masked_q_sample(sample.image, item.noise_mask.data, item.t, item.eps, sched_);
        std::memcpy(in.x.data() + static_cast<int64_t>(b) * C * hw, xt.data.data(),
                    sizeof(float) * static_cast<size_t>(C * hw));
        std::memcpy(eps_all.data() + static_cast<int64_t>(b) * C * hw, item.eps.data(),
                    sizeof(float) * static_cast<size_t>(C * hw));
        for (int64_t p = 0; p < hw; ++p)
            in.mask[static_cast<int64_t>(b) * hw + p] = static_cast<float>(item.noise_mask.data[p]);
        in.t[static_cast<size_t>(b)] = item.t;
        in.s[static_cast<size_t>(b)] = item.s;
        in.token[static_cast<size_t>(b)] = item.cond.token_id;
    }

    auto out = model_->net().forward(in, /*training=*/true);

    LossRecord rec;
    rec.step = step_;

    // seg: MSE over every element of the batch
    TensorF d_eps;
    rec.seg = seg_dm_loss_t<float>(eps_all, out.eps_hat);
    seg_dm_loss_grad<float>(eps_all, out.eps_hat, d_eps);

    // dice: per inpainting item on the mask-logit channel, averaged
    TensorF d_logits({B, 1, H, W});
    int n_inpaint = 0;
    for (const auto& item : batch.items) n_inpaint += item.inpaint ? 1 : 0;
    double dice_sum = 0.0;
    for (int b = 0; b < B; ++b) {
        const BatchItem& item = batch.items[static_cast<size_t>(b)];
        rec.n_inpaint += item.inpaint ? 1 : 0;
        rec.n_t2i += item.inpaint ? 0 : 1;
        if (!item.inpaint) continue;
        TensorF logits({H, W});
        std::memcpy(logits.data(), out.mask_logits.data() + static_cast<int64_t>(b) * hw,
                    sizeof(float) * static_cast<size_t>(hw));
        TensorF target = item.target_mask.as<float>();
        TensorF dl;
        dice_sum += dice_loss_from_logits<float>(logits, target, static_cast<float>(cfg_.dice_smooth), &dl);
        const float scale = static_cast<float>(cfg_.lambda / n_inpaint);
        for (int64_t p = 0; p < hw; ++p) d_logits[static_cast<int64_t>(b) * hw + p] = scale * dl[p];
    }
    rec.dice = n_inpaint > 0 ? dice_sum / n_inpaint : 0.0;
    rec.total = rec.seg + (n_inpaint > 0 ? cfg_.lambda * rec.dice : 0.0);

    if (!std::isfinite(rec.total)) {
        int tmin = sched_.T, tmax = 1;
        for (const auto& item : batch.items) {
            tmin = std::min(tmin, item.t);
            tmax = std::max(tmax, item.t);
        }
        std::ostringstream ss;
        ss << "training aborted: non-finite loss at step " << step_ << " (seg=" << rec.seg
           << " dice=" << rec.dice << " inpaint=" << rec.n_inpaint << " t2i=" << rec.n_t2i
           << " t_range=[" << tmin << "," << tmax << "])";
        throw TrainingAbort(ss.str());
    }

    model_->net().zero_grad();
    model_->net().backward(d_eps, d_logits);
    auto params = model_->net().params();
    opt_.step(params);
    ++step_;
    return rec;
}

LossRecord Trainer::train_step() {
    const TrainingBatch batch = assemble_batch(data_, master_.stream(static_cast<uint64_t>(step_)), cfg_, ladder_);
    return apply_batch(batch);
}

void Trainer::run() {
    if (cfg_.run_dir.empty()) throw std::invalid_argument("Trainer::run: run_dir not set");
    fs::create_directories(cfg_.run_dir);

    // config echo before any work
    std::ofstream cfg_echo(fs::path(cfg_.run_dir) / "config.txt");
    cfg_echo << cfg_.to_kv().serialize();
    cfg_echo.close();

    std::ofstream metrics(fs::path(cfg_.run_dir) / "metrics.log", std::ios::app);
    if (step_ == 0) metrics << "# step inpaint_items t2i_items seg dice total\n";

    while (step_ < cfg_.total_steps) {
        const LossRecord rec = train_step();
        metrics << rec.step << " " << rec.n_inpaint << " " << rec.n_t2i << " " << rec.seg << " "
                << rec.dice << " " << rec.total << "\n";
        if (rec.step % 200 == 0) metrics.flush();
        if (step_ % cfg_.checkpoint_every == 0 || step_ == cfg_.total_steps) {
            const std::string name = "ckpt_" + std::to_string(step_) + ".bin";
            save_checkpoint((fs::path(cfg_.run_dir) / name).string());
            std::ofstream manifest(fs::path(cfg_.run_dir) / "manifest.txt", std::ios::app);
            manifest << "step=" << step_ << " file=" << name << " config_hash=" << cfg_.config_hash()
                     << "\n";
        }
    }
}

void Trainer::save_checkpoint(const std::string& path) const {
    json meta;
    meta["kind"] = "maskdiff-checkpoint";
    meta["checkpoint_version"] = 1;
    meta["step"] = step_;
    meta["config_hash"] = cfg_.config_hash();
    meta["train_config"] = cfg_.to_kv().serialize();
    meta["classes"] = data_.spec.classes;
    meta["colors"] = data_.spec.colors;
    meta["optimizer"] = {{"kind", "adam"},
                         {"lr", opt_.learning_rate()},
                         {"step", opt_.step_count()}};

    std::vector<NamedTensor> tensors;
    auto params = const_cast<Denoiser&>(*model_).net().params();
    for (const auto& p : params) tensors.push_back({"param." + p.name, *p.value});
    auto& m = const_cast<nn::AdamOptimizer<float>&>(opt_).moment1();
    auto& v = const_cast<nn::AdamOptimizer<float>&>(opt_).moment2();
    for (size_t i = 0; i < params.size(); ++i) {
        tensors.push_back({"adam.m." + params[i].name, m[i]});
        tensors.push_back({"adam.v." + params[i].name, v[i]});
    }
    write_archive(path, meta, tensors);
}

namespace {

TrainConfig config_from_archive(const TensorArchive& arch, const std::string& path) {
    if (!arch.meta.contains("kind") || arch.meta["kind"] != "maskdiff-checkpoint")
        throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint (field 'kind')");
    if (!arch.meta.contains("checkpoint_version") || arch.meta["checkpoint_version"].get<int>() != 1)
        throw std::runtime_error("load_checkpoint: unsupported field 'checkpoint_version' in " + path);
    if (!arch.meta.contains("train_config"))
        throw std::runtime_error("load_checkpoint: missing field 'train_config' in " + path);
    return TrainConfig::from_kv(
        KeyValueConfig::parse_text(arch.meta["train_config"].get<std::string>(), path + "#train_config"));
}

void load_params(const TensorArchive& arch, Denoiser& model) {
    auto params = model.net().params();
    for (const auto& p : params) {
        const TensorF& stored = arch.find("param." + p.name);
        if (!stored.same_shape(*p.value))
            throw std::runtime_error("load_checkpoint: shape mismatch for tensor 'param." + p.name + "'");
        *p.value = stored;
    }
}

}  // namespace

std::unique_ptr<Trainer> Trainer::load_checkpoint(const std::string& path,
                                                  const std::string& dataset_override) {
    TensorArchive arch = read_archive(path);
    TrainConfig cfg = config_from_archive(arch, path);
    if (!dataset_override.empty()) cfg.dataset_path = dataset_override;

    auto trainer = std::unique_ptr<Trainer>(new Trainer(cfg, /*defer_model=*/true));
    trainer->model_ = std::make_unique<Denoiser>(cfg.model, cfg.seed);
    load_params(arch, *trainer->model_);
    auto params = trainer->model_->net().params();
    trainer->opt_ = nn::AdamOptimizer<float>(arch.meta["optimizer"].at("lr").get<double>());
    trainer->opt_.attach(params);
    std::vector<TensorF> m, v;
    for (const auto& p : params) {
        m.push_back(arch.find("adam.m." + p.name));
        v.push_back(arch.find("adam.v." + p.name));
    }
    trainer->opt_.restore(std::move(m), std::move(v), arch.meta["optimizer"].at("step").get<int64_t>());
    trainer->step_ = arch.meta.at("step").get<int>();
    return trainer;
}

LoadedModel load_model(const std::string& checkpoint_path) {
    TensorArchive arch = read_archive(checkpoint_path);
    LoadedModel lm;
    lm.config = config_from_archive(arch, checkpoint_path);
    lm.schedule = make_linear_schedule(lm.config.schedule_steps, lm.config.beta_start, lm.config.beta_end);
    lm.ladder = lm.config.ladder;
    lm.model = std::make_unique<Denoiser>(lm.config.model, lm.config.seed);
    load_params(arch, *lm.model);
    lm.step = arch.meta.at("step").get<int>();
    if (arch.meta.contains("classes") && arch.meta.contains("colors"))
        lm.vocab = Vocabulary(arch.meta["classes"].get<std::vector<std::string>>(),
                              arch.meta["colors"].get<std::vector<std::string>>());
    return lm;
}

}  // namespace maskdiff
