#include "maskdiff/shapesdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "maskdiff/imageio.hpp"

namespace maskdiff {

namespace fs = std::filesystem;
using nlohmann::json;

void DatasetSpec::validate() const {
    if (resolution < 8) throw std::invalid_argument("DatasetSpec: resolution must be >= 8");
    if (classes.empty() || colors.empty()) throw std::invalid_argument("DatasetSpec: empty class/color list");
    if (size_min < 4 || size_max < size_min)
        throw std::invalid_argument("DatasetSpec: need 4 <= size_min <= size_max");
    const int ext = (size_max + 1) / 2;
    if (2 * (margin + ext) >= resolution - 1)
        throw std::invalid_argument("DatasetSpec: size_max too large for resolution with the margin");
    if (count < 1) throw std::invalid_argument("DatasetSpec: count must be >= 1");
}

Vocabulary dataset_vocabulary(const DatasetSpec& spec) { return Vocabulary(spec.classes, spec.colors); }

namespace {

struct Rgb {
    float r, g, b;
};

Rgb color_value(const std::string& name) {
    if (name == "red") return {0.9f, -0.9f, -0.9f};
    if (name == "green") return {-0.9f, 0.9f, -0.9f};
    if (name == "blue") return {-0.9f, -0.9f, 0.9f};
    if (name == "yellow") return {0.9f, 0.9f, -0.9f};
    if (name == "magenta") return {0.9f, -0.9f, 0.9f};
    if (name == "cyan") return {-0.9f, 0.9f, 0.9f};
    throw std::invalid_argument("shapesdata: unknown color '" + name + "'");
}

// Muted gradient plus a low-frequency wave; stays within [-0.75, 0.75] so the
// saturated object colors remain separable and background preservation is a
// measurable effect (a flat background would make it vacuous).
TensorF make_background(int res, Rng& rng) {
    float corners[3][4];
    for (auto& ch : corners)
        for (float& v : ch) v = static_cast<float>(rng.uniform() - 0.5);
    const int fx = rng.uniform_int(1, 2), fy = rng.uniform_int(1, 2);
    const double phase = rng.uniform() * 2.0 * 3.14159265358979323846;
    float amp[3];
    for (float& a : amp) a = static_cast<float>(0.06 + 0.06 * rng.uniform());

    TensorF bg({3, res, res});
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            const float u = res > 1 ? static_cast<float>(x) / (res - 1) : 0.f;
            const float v = res > 1 ? static_cast<float>(y) / (res - 1) : 0.f;
            const double wave = std::sin(2.0 * 3.14159265358979323846 * (fx * u + fy * v) + phase);
            for (int c = 0; c < 3; ++c) {
                float g = corners[c][0] * (1 - u) * (1 - v) + corners[c][1] * u * (1 - v) +
                          corners[c][2] * (1 - u) * v + corners[c][3] * u * v;
                g += amp[c] * static_cast<float>(wave);
                bg.at3(c, y, x) = std::clamp(g, -0.75f, 0.75f);
            }
        }
    return bg;
}

bool inside_shape(const std::string& cls, int y, int x, int cy, int cx, double rr) {
    const double dy = y - cy, dx = x - cx;
    if (cls == "circle") return dy * dy + dx * dx <= rr * rr;
    if (cls == "square") return std::abs(dy) <= rr * 0.85 && std::abs(dx) <= rr * 0.85;
    if (cls == "triangle") {
        // upward triangle: apex at cy-rr, base at cy+rr
        if (dy < -rr || dy > rr) return false;
        const double half = rr * (dy + rr) / (2.0 * rr);
        return std::abs(dx) <= half;
    }
    if (cls == "cross") {
        const double w = std::max(1.0, rr / 2.8);
        return (std::abs(dx) <= w && std::abs(dy) <= rr) || (std::abs(dy) <= w && std::abs(dx) <= rr);
    }
    if (cls == "ring") {
        const double d2 = dy * dy + dx * dx;
        const double ri = rr * 0.55;
        return d2 <= rr * rr && d2 >= ri * ri;
    }
    throw std::invalid_argument("shapesdata: unknown class '" + cls + "'");
}

}  // namespace

TrainingSample generate_sample(const DatasetSpec& spec, Rng& rng) {
    spec.validate();
    const int res = spec.resolution;
    const Vocabulary vocab = dataset_vocabulary(spec);

    TrainingSample s;
    s.meta.label = spec.classes[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(spec.classes.size()) - 1))];
    s.meta.color = spec.colors[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(spec.colors.size()) - 1))];
    s.meta.size = rng.uniform_int(spec.size_min, spec.size_max);
    const double rr = (s.meta.size - 1) / 2.0;
    const int ext = static_cast<int>(std::ceil(rr));
    s.meta.cy = rng.uniform_int(spec.margin + ext, res - 1 - spec.margin - ext);
    s.meta.cx = rng.uniform_int(spec.margin + ext, res - 1 - spec.margin - ext);
    s.meta.caption = "a " + s.meta.color + " " + s.meta.label;

    TensorF img = make_background(res, rng);
    const Rgb base = color_value(s.meta.color);
    const float jitter = static_cast<float>((rng.uniform() - 0.5) * 0.1);
    const float col[3] = {std::clamp(base.r + jitter, -1.f, 1.f), std::clamp(base.g + jitter, -1.f, 1.f),
                          std::clamp(base.b + jitter, -1.f, 1.f)};

    s.mask = InstanceMask(res, res);
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x)
            if (inside_shape(s.meta.label, y, x, s.meta.cy, s.meta.cx, rr)) {
                s.mask.data.at2(y, x) = 1;
                for (int c = 0; c < 3; ++c) img.at3(c, y, x) = col[c];
            }
    if (s.mask.empty_support()) throw std::logic_error("shapesdata: rasterized an empty mask");

    s.image = Image(std::move(img), ImageRole::Clean);
    s.class_token = vocab.class_token(s.meta.label);
    s.caption_token = vocab.caption_token(s.meta.color, s.meta.label);
    return s;
}

namespace {

std::string sample_name(int id) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05d", id);
    return buf;
}

}  // namespace

void write_dataset(const DatasetSpec& spec, const std::string& path) {
    spec.validate();
    fs::create_directories(fs::path(path) / "images");
    fs::create_directories(fs::path(path) / "masks");

    std::ofstream manifest(fs::path(path) / "manifest.jsonl");
    if (!manifest) throw std::runtime_error("write_dataset: cannot create manifest under " + path);

    const Rng root(spec.seed);
    for (int id = 0; id < spec.count; ++id) {
        Rng item = root.stream(static_cast<uint64_t>(id));
        TrainingSample s = generate_sample(spec, item);
        const std::string name = sample_name(id);
        write_png((fs::path(path) / "images" / (name + ".png")).string(), quantize_image(s.image.data));
        write_png((fs::path(path) / "masks" / (name + ".png")).string(), mask_to_png(s.mask));
        json rec = {{"id", id},
                    {"label", s.meta.label},
                    {"color", s.meta.color},
                    {"caption", s.meta.caption},
                    {"cy", s.meta.cy},
                    {"cx", s.meta.cx},
                    {"size", s.meta.size},
                    {"class_token", s.class_token},
                    {"caption_token", s.caption_token}};
        manifest << rec.dump() << "\n";
    }
    manifest.close();

    std::ofstream specfile(fs::path(path) / "spec.txt");
    specfile << "resolution = " << spec.resolution << "\n";
    std::string cls, cols;
    for (const auto& c : spec.classes) cls += (cls.empty() ? "" : ",") + c;
    for (const auto& c : spec.colors) cols += (cols.empty() ? "" : ",") + c;
    specfile << "classes = " << cls << "\n";
    specfile << "colors = " << cols << "\n";
    specfile << "size_min = " << spec.size_min << "\n";
    specfile << "size_max = " << spec.size_max << "\n";
    specfile << "margin = " << spec.margin << "\n";
    specfile << "count = " << spec.count << "\n";
    specfile << "seed = " << spec.seed << "\n";
}

namespace {

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

}  // namespace

Dataset read_dataset(const std::string& path) {
    Dataset ds;
    std::ifstream specfile(fs::path(path) / "spec.txt");
    if (!specfile) throw std::runtime_error("read_dataset: missing spec.txt under " + path);
    std::string line;
    while (std::getline(specfile, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        const auto trim = [](std::string& s) {
            while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.erase(s.begin());
            while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
        };
        trim(key);
        trim(val);
        if (key == "resolution") ds.spec.resolution = std::stoi(val);
        else if (key == "classes") ds.spec.classes = split_csv(val);
        else if (key == "colors") ds.spec.colors = split_csv(val);
        else if (key == "size_min") ds.spec.size_min = std::stoi(val);
        else if (key == "size_max") ds.spec.size_max = std::stoi(val);
        else if (key == "margin") ds.spec.margin = std::stoi(val);
        else if (key == "count") ds.spec.count = std::stoi(val);
        else if (key == "seed") ds.spec.seed = std::stoull(val);
    }
    ds.spec.validate();

    std::ifstream manifest(fs::path(path) / "manifest.jsonl");
    if (!manifest) throw std::runtime_error("read_dataset: missing manifest.jsonl under " + path);
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        const int id = rec.at("id").get<int>();
        const std::string name = sample_name(id);
        const std::string img_path = (fs::path(path) / "images" / (name + ".png")).string();
        const std::string mask_path = (fs::path(path) / "masks" / (name + ".png")).string();
        if (!fs::exists(img_path) || !fs::exists(mask_path))
            throw std::runtime_error("read_dataset: missing files for sample id " + std::to_string(id));

        TrainingSample s;
        s.image = Image(dequantize_image(read_png(img_path)), ImageRole::Clean);
        s.mask = mask_from_png(read_png(mask_path));
        if (s.mask.empty_support())
            throw std::runtime_error("read_dataset: empty mask for sample id " + std::to_string(id));
        s.meta.label = rec.at("label").get<std::string>();
        s.meta.color = rec.at("color").get<std::string>();
        s.meta.caption = rec.at("caption").get<std::string>();
        s.meta.cy = rec.at("cy").get<int>();
        s.meta.cx = rec.at("cx").get<int>();
        s.meta.size = rec.at("size").get<int>();
        s.class_token = rec.at("class_token").get<int>();
        s.caption_token = rec.at("caption_token").get<int>();
        ds.samples.push_back(std::move(s));
    }
    if (static_cast<int>(ds.samples.size()) != ds.spec.count)
        throw std::runtime_error("read_dataset: manifest count " + std::to_string(ds.samples.size()) +
                                 " != spec count " + std::to_string(ds.spec.count));
    return ds;
}

}  // namespace maskdiff
