#pragma once

#include <stdexcept>

#include "maskdiff/tensor.hpp"

namespace maskdiff {

enum class ImageRole { Clean, Noisy };

// An image or noisy latent: channels-first float grid. Clean images live in
// [-1, 1]; noisy latents are unbounded but must stay finite.
template <typename S>
struct ImageT {
    Tensor<S> data;  // (C, H, W)
    ImageRole role = ImageRole::Clean;

    ImageT() = default;
    ImageT(Tensor<S> d, ImageRole r) : data(std::move(d)), role(r) {
        if (data.rank() != 3) throw std::invalid_argument("ImageT: expected rank-3 (C,H,W) tensor");
    }

    int channels() const { return data.dim(0); }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }
};

using Image = ImageT<float>;

}  // namespace maskdiff
