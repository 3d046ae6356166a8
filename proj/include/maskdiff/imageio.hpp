#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskdiff/maskops.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Interleaved 8-bit pixel buffer; channels is 1 (gray) or 3 (RGB).
struct Png8 {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<uint8_t> pixels;
};

void write_png(const std::string& path, const Png8& img);
Png8 read_png(const std::string& path);

// [-1,1] float (C,H,W) <-> 8 bit. Quantization error is at most 1/255 per
// channel on the round trip.
Png8 quantize_image(const TensorF& chw);
TensorF dequantize_image(const Png8& img);

Png8 mask_to_png(const InstanceMask& m);        // 0 -> 0, 1 -> 255
InstanceMask mask_from_png(const Png8& img);    // nonzero -> 1

}  // namespace maskdiff
