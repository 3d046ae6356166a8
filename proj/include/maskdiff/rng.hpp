#pragma once

#include <cstdint>
#include <random>

#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Deterministic random stream. Substreams are derived by hashing the parent
// seed with caller-chosen counters, so per-item randomness is independent of
// the order in which items are drawn (parallel batch assembly stays
// reproducible).
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), gen_(splitmix(seed)) {}

    // Derived stream keyed on up to two counters (e.g. step, item index).
    Rng stream(uint64_t a, uint64_t b = 0) const {
        uint64_t h = seed_;
        h = splitmix(h ^ (0x9e3779b97f4a7c15ULL + a));
        h = splitmix(h ^ (0xbf58476d1ce4e5b9ULL + b));
        return Rng(h);
    }

    uint64_t seed() const { return seed_; }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(gen_); }

    // Inclusive on both ends.
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }

    double gaussian() { return normal_(gen_); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename S>
    void fill_gaussian(Tensor<S>& t) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(normal_(gen_));
    }

    template <typename S>
    Tensor<S> gaussian_tensor(std::vector<int> shape) {
        Tensor<S> t(std::move(shape));
        fill_gaussian(t);
        return t;
    }

    std::mt19937_64& engine() { return gen_; }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    uint64_t seed_;
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace maskdiff
