#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "maskdiff/config.hpp"
#include "maskdiff/evalkit.hpp"
#include "maskdiff/imageio.hpp"
#include "maskdiff/sampler.hpp"
#include "maskdiff/shapesdata.hpp"
#include "maskdiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace maskdiff;
using nlohmann::json;

namespace {

void echo_config(const KeyValueConfig& kv, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream out(fs::path(dir) / "config.txt");
    out << kv.serialize();
}

int cmd_gen_data(const std::string& out_dir, int count, uint64_t seed, int resolution, int size_min,
                 int size_max) {
    DatasetSpec spec;
    spec.count = count;
    spec.seed = seed;
    spec.resolution = resolution;
    spec.size_min = size_min;
    spec.size_max = size_max;
    spec.validate();

    KeyValueConfig echo;
    echo.set("data.out", out_dir);
    echo.set_int("data.count", count);
    echo.set_int("data.seed", static_cast<int64_t>(seed));
    echo.set_int("data.resolution", resolution);
    echo.set_int("data.size_min", size_min);
    echo.set_int("data.size_max", size_max);
    echo_config(echo, out_dir);

    write_dataset(spec, out_dir);
    std::cout << "wrote " << count << " samples to " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const KeyValueConfig& overrides, const std::string& resume) {
    if (!resume.empty()) {
        auto trainer = Trainer::load_checkpoint(resume);
        std::cout << "resuming from step " << trainer->step() << "\n";
        trainer->run();
        std::cout << "finished at step " << trainer->step() << " (run dir " << trainer->config().run_dir
                  << ")\n";
        return 0;
    }
    KeyValueConfig kv;
    if (!config_path.empty()) kv = KeyValueConfig::parse_file(config_path);
    kv.merge_overrides(overrides);
    TrainConfig cfg = TrainConfig::from_kv(kv);
    Trainer trainer(cfg);
    trainer.run();
    std::cout << "finished at step " << trainer.step() << " (run dir " << cfg.run_dir << ")\n";
    return 0;
}

int cmd_sample(const std::string& checkpoint, const std::string& image_path, const std::string& mask_path,
               const std::string& prompt, int indicator, int steps, double guidance, int switch_step,
               double switch_threshold, uint64_t seed, const std::string& sampler_name,
               const std::string& out_path, const std::string& mask_out, const std::string& trace_dir,
               const std::string& tuples_dir) {
    LoadedModel lm = load_model(checkpoint);

    SampleRequest req;
    req.x0 = Image(dequantize_image(read_png(image_path)), ImageRole::Clean);
    req.mask.data = mask_from_png(read_png(mask_path));
    req.mask.s = indicator;
    req.mask.source = req.mask.data;
    req.steps = steps;
    req.guidance_scale = guidance;
    req.mask_switch_step = switch_step;
    req.mask_switch_threshold = switch_threshold;
    req.seed = seed;
    req.trace = !trace_dir.empty();
    if (sampler_name == "ancestral") {
        req.kind = SamplerKind::Ancestral;
        req.steps = lm.schedule.T;
    } else if (sampler_name != "skip") {
        throw std::runtime_error("sample: unknown sampler '" + sampler_name + "' (skip|ancestral)");
    }

    if (prompt == "null" || prompt.empty()) {
        req.cond = null_condition();
    } else {
        const int token = lm.vocab.lookup(prompt);
        if (token < 0)
            throw std::runtime_error("sample: prompt '" + prompt + "' is not in the model vocabulary");
        req.cond.kind = token <= static_cast<int>(lm.vocab.classes().size())
                            ? Condition::Kind::ClassLabel
                            : Condition::Kind::CaptionTemplate;
        req.cond.token_id = token;
        req.cond.prompt_text = prompt;
    }

    DenoiserPredictor predictor(*lm.model);
    const SampleResult result = sample_inpaint(predictor, req, lm.schedule);

    write_png(out_path, quantize_image(result.output.data));
    if (!mask_out.empty()) write_png(mask_out, mask_to_png(result.final_mask));
    if (!trace_dir.empty()) {
        fs::create_directories(trace_dir);
        for (size_t i = 0; i < result.trace.size(); ++i) {
            Png8 img;
            img.channels = 1;
            img.height = result.trace[i].dim(0);
            img.width = result.trace[i].dim(1);
            img.pixels.resize(static_cast<size_t>(img.height) * img.width);
            for (int64_t p = 0; p < result.trace[i].numel(); ++p)
                img.pixels[static_cast<size_t>(p)] =
                    static_cast<uint8_t>(std::lround(result.trace[i][p] * 255.0f));
            char name[32];
            std::snprintf(name, sizeof(name), "mask_step_%03zu.png", i);
            write_png((fs::path(trace_dir) / name).string(), img);
        }
    }
    if (!tuples_dir.empty()) {
        fs::create_directories(tuples_dir);
        int id = 0;
        std::ifstream existing(fs::path(tuples_dir) / "tuples.jsonl");
        std::string line;
        while (std::getline(existing, line))
            if (!line.empty()) ++id;
        existing.close();
        char base[32];
        std::snprintf(base, sizeof(base), "%05d", id);
        const std::string x0_name = std::string(base) + "_x0.png";
        const std::string mask_name = std::string(base) + "_mask.png";
        const std::string out_name = std::string(base) + "_output.png";
        write_png((fs::path(tuples_dir) / x0_name).string(), quantize_image(req.x0.data));
        write_png((fs::path(tuples_dir) / mask_name).string(), mask_to_png(req.mask.data));
        write_png((fs::path(tuples_dir) / out_name).string(), quantize_image(result.output.data));
        std::ofstream tuples(fs::path(tuples_dir) / "tuples.jsonl", std::ios::app);
        json rec = {{"id", id},         {"x0", x0_name},           {"mask", mask_name},
                    {"output", out_name}, {"prompt", req.cond.prompt_text}};
        tuples << rec.dump() << "\n";
    }
    std::cout << "wrote " << out_path << " (fallbacks=" << result.empty_mask_fallbacks << ")\n";
    return 0;
}

int cmd_mask_ladder(const std::string& mask_path, const std::string& out_dir) {
    const InstanceMask m = mask_from_png(read_png(mask_path));
    if (m.empty_support()) throw std::runtime_error("mask-ladder: input mask is empty");
    const LadderConfig cfg = default_ladder(m.height());
    fs::create_directories(out_dir);
    for (int s = 0; s <= cfg.S; ++s) {
        const PrecisionMask pm = precision_mask(m, s, cfg);
        write_png((fs::path(out_dir) / ("mask_" + std::to_string(s) + ".png")).string(),
                  mask_to_png(pm.data));
    }
    std::cout << "wrote " << cfg.S + 1 << " ladder levels to " << out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& tuples_dir, const std::string& heldout_dir, const std::string& out_dir,
             const std::string& probe_path, const std::string& save_probe, uint64_t seed) {
    // probe: load it, or train it on the held-out dataset
    std::unique_ptr<ProbeClassifier> probe;
    Dataset heldout;
    if (!heldout_dir.empty()) heldout = read_dataset(heldout_dir);
    if (!probe_path.empty()) {
        probe = std::make_unique<ProbeClassifier>(ProbeClassifier::load(probe_path));
    } else {
        if (heldout.samples.empty())
            throw std::runtime_error("eval: need --heldout (to train the probe) or --probe");
        ProbeConfig pcfg;
        pcfg.num_classes = static_cast<int>(heldout.spec.classes.size());
        pcfg.seed = seed;
        probe = std::make_unique<ProbeClassifier>(train_probe(heldout, pcfg));
    }
    if (!save_probe.empty()) probe->save(save_probe);

    const Vocabulary vocab = heldout.samples.empty() ? Vocabulary::standard()
                                                     : dataset_vocabulary(heldout.spec);

    std::ifstream tuples_in(fs::path(tuples_dir) / "tuples.jsonl");
    if (!tuples_in) throw std::runtime_error("eval: missing " + tuples_dir + "/tuples.jsonl");
    std::vector<EvalTuple> tuples;
    std::string line;
    while (std::getline(tuples_in, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        EvalTuple t;
        t.id = rec.at("id").get<int>();
        t.x0 = Image(dequantize_image(read_png((fs::path(tuples_dir) / rec.at("x0").get<std::string>()).string())),
                     ImageRole::Clean);
        t.mask = mask_from_png(read_png((fs::path(tuples_dir) / rec.at("mask").get<std::string>()).string()));
        t.output = Image(
            dequantize_image(read_png((fs::path(tuples_dir) / rec.at("output").get<std::string>()).string())),
            ImageRole::Clean);
        t.prompt_text = rec.at("prompt").get<std::string>();
        // prompt class index: last word of the prompt names the class
        const auto space = t.prompt_text.rfind(' ');
        const std::string cls = space == std::string::npos ? t.prompt_text : t.prompt_text.substr(space + 1);
        t.prompt_class = vocab.class_index(cls);
        tuples.push_back(std::move(t));
    }
    if (tuples.empty()) throw std::runtime_error("eval: no tuples found in " + tuples_dir);

    EvalOptions opt;
    EvalReport report = evaluate_tuples(tuples, *probe, opt);
    report.config_echo = "tuples=" + tuples_dir + " heldout=" + heldout_dir;
    write_report(report, out_dir);
    std::cout << "evaluated " << tuples.size() << " tuples -> " << out_dir
              << " (probe heldout acc=" << probe->heldout_accuracy() << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"text- and shape-guided object inpainting with masked diffusion"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a procedural shapes dataset");
    std::string gen_out;
    int gen_count = 5000, gen_res = 32, gen_smin = 12, gen_smax = 23;
    uint64_t gen_seed = 0;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--count", gen_count, "number of samples");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--resolution", gen_res, "image resolution");
    gen->add_option("--size-min", gen_smin, "minimum object extent");
    gen->add_option("--size-max", gen_smax, "maximum object extent");

    // train
    auto* train = app.add_subcommand("train", "train the inpainting model");
    std::string train_config, train_resume, train_data, train_out;
    int64_t train_steps = -1, train_batch = -1, train_seed = -1, train_ckpt_every = -1;
    double train_lr = -1.0;
    train->add_option("--config", train_config, "key = value config file");
    train->add_option("--resume", train_resume, "checkpoint to resume from");
    train->add_option("--data", train_data, "dataset directory (overrides config)");
    train->add_option("--out", train_out, "run directory (overrides config)");
    train->add_option("--steps", train_steps, "total training steps");
    train->add_option("--batch-size", train_batch, "batch size");
    train->add_option("--seed", train_seed, "training seed");
    train->add_option("--learning-rate", train_lr, "optimizer learning rate");
    train->add_option("--checkpoint-every", train_ckpt_every, "checkpoint cadence");

    // sample
    auto* sample = app.add_subcommand("sample", "inpaint one image");
    std::string s_ckpt, s_img, s_mask, s_prompt, s_out = "output.png", s_mask_out, s_trace, s_tuples;
    std::string s_kind = "skip";
    int s_indicator = 0, s_steps = 50, s_switch = 10;
    double s_guidance = 2.0, s_threshold = 0.5;
    uint64_t s_seed = 0;
    sample->add_option("--checkpoint", s_ckpt, "model checkpoint")->required();
    sample->add_option("--image", s_img, "source image PNG")->required();
    sample->add_option("--mask", s_mask, "input mask PNG (white = region to inpaint)")->required();
    sample->add_option("--prompt", s_prompt, "prompt text ('null' for unconditional)")->required();
    sample->add_option("--s", s_indicator, "mask precision indicator (0 = exact)");
    sample->add_option("--steps", s_steps, "sampling steps");
    sample->add_option("--guidance", s_guidance, "guidance scale w");
    sample->add_option("--switch-step", s_switch, "predicted-mask switch step (0 disables)");
    sample->add_option("--switch-threshold", s_threshold, "mask binarization threshold");
    sample->add_option("--seed", s_seed, "sampling seed");
    sample->add_option("--sampler", s_kind, "skip | ancestral");
    sample->add_option("--out", s_out, "output image path");
    sample->add_option("--mask-out", s_mask_out, "final active mask path");
    sample->add_option("--trace-dir", s_trace, "write per-step predicted masks here");
    sample->add_option("--tuples-dir", s_tuples, "append (x0, mask, output, prompt) to this eval directory");

    // mask-ladder
    auto* ladder = app.add_subcommand("mask-ladder", "write every precision level of a mask");
    std::string l_mask, l_out;
    ladder->add_option("--mask", l_mask, "input mask PNG")->required();
    ladder->add_option("--out", l_out, "output directory")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a directory of inpainting tuples");
    std::string e_tuples, e_heldout, e_out = "eval_report", e_probe, e_save_probe;
    uint64_t e_seed = 0;
    eval->add_option("--tuples", e_tuples, "tuples directory (tuples.jsonl + images)")->required();
    eval->add_option("--heldout", e_heldout, "held-out dataset for probe training");
    eval->add_option("--out", e_out, "report directory");
    eval->add_option("--probe", e_probe, "pre-trained probe archive");
    eval->add_option("--save-probe", e_save_probe, "save the trained probe here");
    eval->add_option("--seed", e_seed, "probe training seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_out, gen_count, gen_seed, gen_res, gen_smin, gen_smax);
        if (train->parsed()) {
            KeyValueConfig overrides;
            if (!train_data.empty()) overrides.set("data.path", train_data);
            if (!train_out.empty()) overrides.set("run.dir", train_out);
            if (train_steps >= 0) overrides.set_int("train.total_steps", train_steps);
            if (train_batch >= 0) overrides.set_int("train.batch_size", train_batch);
            if (train_seed >= 0) overrides.set_int("train.seed", train_seed);
            if (train_lr >= 0) overrides.set_double("train.learning_rate", train_lr);
            if (train_ckpt_every >= 0) overrides.set_int("train.checkpoint_every", train_ckpt_every);
            return cmd_train(train_config, overrides, train_resume);
        }
        if (sample->parsed())
            return cmd_sample(s_ckpt, s_img, s_mask, s_prompt, s_indicator, s_steps, s_guidance, s_switch,
                              s_threshold, s_seed, s_kind, s_out, s_mask_out, s_trace, s_tuples);
        if (ladder->parsed()) return cmd_mask_ladder(l_mask, l_out);
        if (eval->parsed()) return cmd_eval(e_tuples, e_heldout, e_out, e_probe, e_save_probe, e_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
