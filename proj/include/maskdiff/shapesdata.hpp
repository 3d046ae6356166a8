#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskdiff/image.hpp"
#include "maskdiff/maskops.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/vocab.hpp"

namespace maskdiff {

// Procedural dataset: one colored geometric object per image on a smooth
// textured background, with the exact rasterized support as instance mask.
struct DatasetSpec {
    int resolution = 32;
    std::vector<std::string> classes = {"circle", "square", "triangle", "cross", "ring"};
    std::vector<std::string> colors = {"red", "green", "blue", "yellow", "magenta", "cyan"};
    int size_min = 12;  // object extent in pixels
    int size_max = 23;
    int margin = 2;
    int count = 5000;
    uint64_t seed = 0;

    void validate() const;
};

struct SampleMeta {
    std::string label;
    std::string color;
    std::string caption;
    int cy = 0, cx = 0, size = 0;
};

struct TrainingSample {
    Image image;        // (3, H, W), clean, in [-1,1]
    InstanceMask mask;  // exact object support
    int class_token = 0;
    int caption_token = 0;
    SampleMeta meta;
};

Vocabulary dataset_vocabulary(const DatasetSpec& spec);

// Deterministic in the rng state; the mask comes from the same predicate
// that rasterizes the object.
TrainingSample generate_sample(const DatasetSpec& spec, Rng& rng);

// Layout: images/NNNNN.png, masks/NNNNN.png, manifest.jsonl, spec.txt.
// Per-sample randomness is keyed on the sample id.
void write_dataset(const DatasetSpec& spec, const std::string& path);

struct Dataset {
    DatasetSpec spec;
    std::vector<TrainingSample> samples;
};

Dataset read_dataset(const std::string& path);

}  // namespace maskdiff
