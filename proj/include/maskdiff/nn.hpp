#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskdiff/rng.hpp"
#include "maskdiff/tensor.hpp"

// Small training-capable layer zoo. Activations use a channel-major layout
// (C, B, H, W) so convolutions lower to one GEMM across the whole batch and
// channel concatenation is a contiguous copy. All reductions run in a fixed
// order; forward/backward are bit-deterministic for a fixed platform.
namespace maskdiff::nn {

template <typename S>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, S alpha, const S* a, int lda, const S* b,
          int ldb, S beta, S* c, int ldc);

template <typename S>
struct ParamRef {
    std::string name;
    Tensor<S>* value;
    Tensor<S>* grad;
};

template <typename S>
using ParamList = std::vector<ParamRef<S>>;

template <typename S>
int64_t param_count(const ParamList<S>& params);

template <typename S>
void zero_grads(const ParamList<S>& params);

// ---------------------------------------------------------------------------

template <typename S>
class Conv2d {
public:
    Conv2d() = default;
    // kernel k in {1,3}, stride in {1,2}, zero padding k/2.
    Conv2d(int c_in, int c_out, int k, int stride, Rng& rng, bool zero_init = false);

    // x: (Cin, B, H, W) -> (Cout, B, Ho, Wo)
    Tensor<S> forward(const Tensor<S>& x, bool training);
    Tensor<S> backward(const Tensor<S>& dy);

    void collect(const std::string& prefix, ParamList<S>& out);
    int out_channels() const { return c_out_; }

private:
    void im2col(const Tensor<S>& x, Tensor<S>& cols) const;
    void col2im(const Tensor<S>& dcols, Tensor<S>& dx) const;

    int c_in_ = 0, c_out_ = 0, k_ = 0, stride_ = 0, pad_ = 0;
    Tensor<S> weight_;  // (Cout, Cin*k*k)
    Tensor<S> bias_;    // (Cout)
    Tensor<S> dweight_, dbias_;
    Tensor<S> cols_;          // cached lowered input (training only)
    std::vector<int> x_shape_, y_shape_;
    bool cached_ = false;
};

template <typename S>
class GroupNorm {
public:
    GroupNorm() = default;
    GroupNorm(int channels, int groups);

    Tensor<S> forward(const Tensor<S>& x, bool training);
    Tensor<S> backward(const Tensor<S>& dy);
    void collect(const std::string& prefix, ParamList<S>& out);

private:
    int channels_ = 0, groups_ = 0;
    Tensor<S> gamma_, beta_, dgamma_, dbeta_;
    Tensor<S> xhat_;     // cached normalized input
    Tensor<S> invstd_;   // (B, groups)
    std::vector<int> x_shape_;
};

template <typename S>
class SiLU {
public:
    Tensor<S> forward(const Tensor<S>& x, bool training);
    Tensor<S> backward(const Tensor<S>& dy) const;

private:
    Tensor<S> x_;
};

template <typename S>
class Linear {
public:
    Linear() = default;
    Linear(int f_in, int f_out, Rng& rng, bool zero_init = false);

    // x: (Fin, B) -> (Fout, B)
    Tensor<S> forward(const Tensor<S>& x, bool training);
    Tensor<S> backward(const Tensor<S>& dy);
    void collect(const std::string& prefix, ParamList<S>& out);

private:
    int f_in_ = 0, f_out_ = 0;
    Tensor<S> weight_, bias_, dweight_, dbias_;
    Tensor<S> x_;
};

template <typename S>
class Embedding {
public:
    Embedding() = default;
    Embedding(int vocab, int dim, Rng& rng);

    // ids: one per batch item -> (D, B)
    Tensor<S> forward(const std::vector<int>& ids, bool training);
    void backward(const Tensor<S>& dy);
    void collect(const std::string& prefix, ParamList<S>& out);
    int vocab() const { return vocab_; }

private:
    int vocab_ = 0, dim_ = 0;
    Tensor<S> table_;  // (V, D)
    Tensor<S> dtable_;
    std::vector<int> ids_;
};

// Nearest-neighbour 2x upsample; backward is a 2x2 sum pool.
template <typename S>
class Upsample2x {
public:
    Tensor<S> forward(const Tensor<S>& x) const;
    Tensor<S> backward(const Tensor<S>& dy) const;
};

// Single-head self-attention over the spatial grid with pre-norm and a
// zero-initialised residual projection.
template <typename S>
class AttentionBlock {
public:
    AttentionBlock() = default;
    AttentionBlock(int channels, int groups, Rng& rng);

    Tensor<S> forward(const Tensor<S>& x, bool training);
    Tensor<S> backward(const Tensor<S>& dy);
    void collect(const std::string& prefix, ParamList<S>& out);

private:
    int channels_ = 0;
    GroupNorm<S> norm_;
    Conv2d<S> qkv_;
    Conv2d<S> proj_;
    Tensor<S> q_, k_, v_;  // (B, C, N) contiguous per-sample copies
    Tensor<S> attn_;       // (B, N, N) row-softmax weights
    std::vector<int> x_shape_;
};

// Residual block with conditioning vector injected as a per-channel bias.
template <typename S>
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(int c_in, int c_out, int emb_dim, int groups, Rng& rng);

    // x: (Cin, B, H, W); cond_act: (D, B) already passed through SiLU.
    Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& cond_act, bool training);
    // Returns dx; accumulates the conditioning gradient into dcond_act.
    Tensor<S> backward(const Tensor<S>& dy, Tensor<S>& dcond_act);
    void collect(const std::string& prefix, ParamList<S>& out);

private:
    int c_in_ = 0, c_out_ = 0;
    GroupNorm<S> gn1_, gn2_;
    SiLU<S> act1_, act2_;
    Conv2d<S> conv1_, conv2_;
    Linear<S> emb_proj_;
    bool has_skip_ = false;
    Conv2d<S> skip_;
    Tensor<S> x_in_;
    std::vector<int> h_shape_;
};

// ---------------------------------------------------------------------------

template <typename S>
class AdamOptimizer {
public:
    AdamOptimizer() = default;
    AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void attach(const ParamList<S>& params);
    void step(const ParamList<S>& params);

    int64_t step_count() const { return step_; }
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

    // Serialization access (checkpointing).
    std::vector<Tensor<S>>& moment1() { return m_; }
    std::vector<Tensor<S>>& moment2() { return v_; }
    void restore(std::vector<Tensor<S>> m, std::vector<Tensor<S>> v, int64_t step);

private:
    double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    int64_t step_ = 0;
    std::vector<Tensor<S>> m_, v_;
};

// Sinusoidal position features for integer steps, (D, B).
template <typename S>
Tensor<S> sinusoidal_embedding(const std::vector<int>& t, int dim);

}  // namespace maskdiff::nn
