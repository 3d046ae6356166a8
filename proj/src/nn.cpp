#include "maskdiff/nn.hpp"

#include <cblas.h>

#include <cmath>
#include <cstring>
#include <stdexcept>

extern "C" void openblas_set_num_threads(int);

namespace maskdiff::nn {

namespace {

// Convolutions parallelize over the batch with one OpenMP thread per sample,
// so BLAS itself must stay single-threaded. Pinning it here also keeps every
// GEMM result independent of the machine's thread count.
void pin_blas_threads() {
    static const bool done = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)done;
}

}  // namespace

template <>
void gemm<float>(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                 int lda, const float* b, int ldb, float beta, float* c, int ldc) {
    pin_blas_threads();
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <>
void gemm<double>(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                  int lda, const double* b, int ldb, double beta, double* c, int ldc) {
    pin_blas_threads();
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <typename S>
int64_t param_count(const ParamList<S>& params) {
    int64_t n = 0;
    for (const auto& p : params) n += p.value->numel();
    return n;
}

template <typename S>
void zero_grads(const ParamList<S>& params) {
    for (const auto& p : params) p.grad->fill(S(0));
}

namespace {

template <typename S>
void init_fan_in(Tensor<S>& w, int fan_in, Rng& rng) {
    const double scale = std::sqrt(1.0 / fan_in);
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<S>(rng.gaussian() * scale);
}

}  // namespace

// ----------------------------------------------------------------- Conv2d

template <typename S>
Conv2d<S>::Conv2d(int c_in, int c_out, int k, int stride, Rng& rng, bool zero_init)
    : c_in_(c_in), c_out_(c_out), k_(k), stride_(stride), pad_(k / 2) {
    if (k != 1 && k != 3) throw std::invalid_argument("Conv2d: kernel must be 1 or 3");
    if (stride != 1 && stride != 2) throw std::invalid_argument("Conv2d: stride must be 1 or 2");
    weight_ = Tensor<S>({c_out, c_in * k * k});
    bias_ = Tensor<S>({c_out});
    dweight_ = Tensor<S>(weight_.shape());
    dbias_ = Tensor<S>(bias_.shape());
    if (!zero_init) init_fan_in(weight_, c_in * k * k, rng);
}

template <typename S>
void Conv2d<S>::im2col(const Tensor<S>& x, Tensor<S>& cols) const {
    // per-sample lowering: cols is (B, rows, Ho*Wo)
    const int B = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = y_shape_[2], Wo = y_shape_[3];
    const int rows = c_in_ * k_ * k_;
    const int64_t n1 = static_cast<int64_t>(Ho) * Wo;

#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        S* cols_b = cols.data() + static_cast<int64_t>(b) * rows * n1;
        for (int r = 0; r < rows; ++r) {
            const int cin = r / (k_ * k_);
            const int ky = (r / k_) % k_;
            const int kx = r % k_;
            const S* src_img = x.data() + (static_cast<int64_t>(cin) * B + b) * H * W;
            S* dst_row = cols_b + static_cast<int64_t>(r) * n1;
            const int dx0 = kx - pad_;
            const int ox_lo = stride_ == 1 ? std::max(0, -dx0) : 0;
            const int ox_hi = stride_ == 1 ? std::min(Wo, W - dx0) : Wo;
            for (int oy = 0; oy < Ho; ++oy) {
                S* dst = dst_row + static_cast<int64_t>(oy) * Wo;
                const int y = oy * stride_ + ky - pad_;
                if (y < 0 || y >= H) {
                    std::memset(dst, 0, sizeof(S) * static_cast<size_t>(Wo));
                    continue;
                }
                const S* src = src_img + static_cast<int64_t>(y) * W;
                if (stride_ == 1) {
                    if (ox_lo > 0) std::memset(dst, 0, sizeof(S) * static_cast<size_t>(ox_lo));
                    if (ox_hi > ox_lo)
                        std::memcpy(dst + ox_lo, src + ox_lo + dx0,
                                    sizeof(S) * static_cast<size_t>(ox_hi - ox_lo));
                    if (ox_hi < Wo) std::memset(dst + ox_hi, 0, sizeof(S) * static_cast<size_t>(Wo - ox_hi));
                } else {
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int xx = ox * stride_ + dx0;
                        dst[ox] = (xx >= 0 && xx < W) ? src[xx] : S(0);
                    }
                }
            }
        }
    }
}

template <typename S>
void Conv2d<S>::col2im(const Tensor<S>& dcols, Tensor<S>& dx) const {
    const int B = x_shape_[1], H = x_shape_[2], W = x_shape_[3];
    const int Ho = y_shape_[2], Wo = y_shape_[3];
    const int rows = c_in_ * k_ * k_;
    const int64_t n1 = static_cast<int64_t>(Ho) * Wo;

#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        const S* dcols_b = dcols.data() + static_cast<int64_t>(b) * rows * n1;
        for (int r = 0; r < rows; ++r) {
            const int cin = r / (k_ * k_);
            const int ky = (r / k_) % k_;
            const int kx = r % k_;
            S* dst_img = dx.data() + (static_cast<int64_t>(cin) * B + b) * H * W;
            const S* src_row = dcols_b + static_cast<int64_t>(r) * n1;
            const int dx0 = kx - pad_;
            const int ox_lo = stride_ == 1 ? std::max(0, -dx0) : 0;
            const int ox_hi = stride_ == 1 ? std::min(Wo, W - dx0) : Wo;
            for (int oy = 0; oy < Ho; ++oy) {
                const int y = oy * stride_ + ky - pad_;
                if (y < 0 || y >= H) continue;
                const S* src = src_row + static_cast<int64_t>(oy) * Wo;
                S* dst = dst_img + static_cast<int64_t>(y) * W;
                if (stride_ == 1) {
                    S* d = dst + dx0;
                    for (int ox = ox_lo; ox < ox_hi; ++ox) d[ox] += src[ox];
                } else {
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int xx = ox * stride_ + dx0;
                        if (xx >= 0 && xx < W) dst[xx] += src[ox];
                    }
                }
            }
        }
    }
}

template <typename S>
Tensor<S> Conv2d<S>::forward(const Tensor<S>& x, bool training) {
    if (x.rank() != 4 || x.dim(0) != c_in_)
        throw std::invalid_argument("Conv2d: bad input shape " + Tensor<S>::shape_str(x.shape()));
    const int B = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = (H + 2 * pad_ - k_) / stride_ + 1;
    const int Wo = (W + 2 * pad_ - k_) / stride_ + 1;
    x_shape_ = x.shape();
    y_shape_ = {c_out_, B, Ho, Wo};
    const int64_t ntotal = static_cast<int64_t>(B) * Ho * Wo;
    const int64_t n1 = static_cast<int64_t>(Ho) * Wo;
    const int rows = c_in_ * k_ * k_;

    Tensor<S> y = Tensor<S>::uninit(y_shape_);
    if (k_ == 1 && stride_ == 1) {
        // pointwise conv: one folded GEMM over the whole batch
        gemm<S>(false, false, c_out_, static_cast<int>(ntotal), rows, S(1), weight_.data(), rows,
                x.data(), static_cast<int>(ntotal), S(0), y.data(), static_cast<int>(ntotal));
        if (training) {
            cols_ = x;
            cached_ = true;
        }
    } else {
        cols_ = Tensor<S>::uninit({B, rows, static_cast<int>(n1)});
        im2col(x, cols_);
        cached_ = training;
        // per-sample GEMMs; output rows are strided by B*n1 in the
        // channel-major layout
#pragma omp parallel for schedule(static)
        for (int b = 0; b < B; ++b) {
            gemm<S>(false, false, c_out_, static_cast<int>(n1), rows, S(1), weight_.data(), rows,
                    cols_.data() + static_cast<int64_t>(b) * rows * n1, static_cast<int>(n1), S(0),
                    y.data() + static_cast<int64_t>(b) * n1, static_cast<int>(ntotal));
        }
        if (!training) cols_ = Tensor<S>();
    }

#pragma omp parallel for schedule(static)
    for (int co = 0; co < c_out_; ++co) {
        S* row = y.data() + static_cast<int64_t>(co) * ntotal;
        const S b = bias_[co];
        for (int64_t i = 0; i < ntotal; ++i) row[i] += b;
    }
    return y;
}

template <typename S>
Tensor<S> Conv2d<S>::backward(const Tensor<S>& dy) {
    if (!cached_) throw std::logic_error("Conv2d::backward without cached forward");
    const int B = x_shape_[1];
    const int Ho = y_shape_[2], Wo = y_shape_[3];
    const int64_t ntotal = static_cast<int64_t>(B) * Ho * Wo;
    const int64_t n1 = static_cast<int64_t>(Ho) * Wo;
    const int rows = c_in_ * k_ * k_;

    // k=3 path accumulates into dx via col2im, so it must start zeroed
    Tensor<S> dx = (k_ == 1 && stride_ == 1) ? Tensor<S>::uninit(x_shape_) : Tensor<S>(x_shape_);
    // per-sample weight-gradient partials, reduced in sample order afterwards
    Tensor<S> dw_part = Tensor<S>::uninit({B, c_out_, rows});
    Tensor<S> db_part = Tensor<S>::uninit({B, c_out_});

    if (k_ == 1 && stride_ == 1) {
        gemm<S>(true, false, c_in_, static_cast<int>(ntotal), c_out_, S(1), weight_.data(), rows,
                dy.data(), static_cast<int>(ntotal), S(0), dx.data(), static_cast<int>(ntotal));
#pragma omp parallel for schedule(static)
        for (int b = 0; b < B; ++b) {
            gemm<S>(false, true, c_out_, rows, static_cast<int>(n1), S(1),
                    dy.data() + static_cast<int64_t>(b) * n1, static_cast<int>(ntotal),
                    cols_.data() + static_cast<int64_t>(b) * n1, static_cast<int>(ntotal), S(0),
                    dw_part.data() + static_cast<int64_t>(b) * c_out_ * rows, rows);
            for (int co = 0; co < c_out_; ++co) {
                const S* row = dy.data() + static_cast<int64_t>(co) * ntotal + static_cast<int64_t>(b) * n1;
                S acc = 0;
                for (int64_t i = 0; i < n1; ++i) acc += row[i];
                db_part.at2(b, co) = acc;
            }
        }
    } else {
        Tensor<S> dcols = Tensor<S>::uninit({B, rows, static_cast<int>(n1)});
#pragma omp parallel for schedule(static)
        for (int b = 0; b < B; ++b) {
            S* dcols_b = dcols.data() + static_cast<int64_t>(b) * rows * n1;
            gemm<S>(true, false, rows, static_cast<int>(n1), c_out_, S(1), weight_.data(), rows,
                    dy.data() + static_cast<int64_t>(b) * n1, static_cast<int>(ntotal), S(0), dcols_b,
                    static_cast<int>(n1));
            gemm<S>(false, true, c_out_, rows, static_cast<int>(n1), S(1),
                    dy.data() + static_cast<int64_t>(b) * n1, static_cast<int>(ntotal),
                    cols_.data() + static_cast<int64_t>(b) * rows * n1, static_cast<int>(n1), S(0),
                    dw_part.data() + static_cast<int64_t>(b) * c_out_ * rows, rows);
            for (int co = 0; co < c_out_; ++co) {
                const S* row = dy.data() + static_cast<int64_t>(co) * ntotal + static_cast<int64_t>(b) * n1;
                S acc = 0;
                for (int64_t i = 0; i < n1; ++i) acc += row[i];
                db_part.at2(b, co) = acc;
            }
        }
        col2im(dcols, dx);
    }

    for (int b = 0; b < B; ++b) {
        const S* dwb = dw_part.data() + static_cast<int64_t>(b) * c_out_ * rows;
        for (int64_t i = 0; i < static_cast<int64_t>(c_out_) * rows; ++i) dweight_[i] += dwb[i];
        for (int co = 0; co < c_out_; ++co) dbias_[co] += db_part.at2(b, co);
    }
    return dx;
}

template <typename S>
void Conv2d<S>::collect(const std::string& prefix, ParamList<S>& out) {
    out.push_back({prefix + ".weight", &weight_, &dweight_});
    out.push_back({prefix + ".bias", &bias_, &dbias_});
}

// -------------------------------------------------------------- GroupNorm

template <typename S>
GroupNorm<S>::GroupNorm(int channels, int groups) : channels_(channels), groups_(groups) {
    if (channels % groups != 0) throw std::invalid_argument("GroupNorm: channels must divide into groups");
    gamma_ = Tensor<S>({channels}, S(1));
    beta_ = Tensor<S>({channels});
    dgamma_ = Tensor<S>({channels});
    dbeta_ = Tensor<S>({channels});
}

template <typename S>
Tensor<S> GroupNorm<S>::forward(const Tensor<S>& x, bool training) {
    (void)training;
    if (x.rank() != 4 || x.dim(0) != channels_)
        throw std::invalid_argument("GroupNorm: bad input shape");
    const int C = x.dim(0), B = x.dim(1);
    const int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
    const int cg = C / groups_;
    const double eps = 1e-5;

    x_shape_ = x.shape();
    xhat_ = Tensor<S>::uninit(x.shape());
    invstd_ = Tensor<S>::uninit({B, groups_});
    Tensor<S> y = Tensor<S>::uninit(x.shape());

#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b)
        for (int g = 0; g < groups_; ++g) {
            double sum = 0.0, sq = 0.0;
            for (int c = g * cg; c < (g + 1) * cg; ++c) {
                const S* p = x.data() + (static_cast<int64_t>(c) * B + b) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    sum += p[i];
                    sq += static_cast<double>(p[i]) * p[i];
                }
            }
            const double n = static_cast<double>(cg) * hw;
            const double mean = sum / n;
            const double var = sq / n - mean * mean;
            const double inv = 1.0 / std::sqrt(var > 0.0 ? var + eps : eps);
            invstd_.at2(b, g) = static_cast<S>(inv);
            for (int c = g * cg; c < (g + 1) * cg; ++c) {
                const S* p = x.data() + (static_cast<int64_t>(c) * B + b) * hw;
                S* ph = xhat_.data() + (static_cast<int64_t>(c) * B + b) * hw;
                S* py = y.data() + (static_cast<int64_t>(c) * B + b) * hw;
                const S gam = gamma_[c], bet = beta_[c];
                for (int64_t i = 0; i < hw; ++i) {
                    const S h = static_cast<S>((p[i] - mean) * inv);
                    ph[i] = h;
                    py[i] = gam * h + bet;
                }
            }
        }
    return y;
}

template <typename S>
Tensor<S> GroupNorm<S>::backward(const Tensor<S>& dy) {
    const int C = x_shape_[0], B = x_shape_[1];
    const int64_t hw = static_cast<int64_t>(x_shape_[2]) * x_shape_[3];
    const int cg = C / groups_;
    Tensor<S> dx = Tensor<S>::uninit(x_shape_);

    // Parameter grads reduce over batch and space in fixed channel order.
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        double dg = 0.0, db = 0.0;
        for (int b = 0; b < B; ++b) {
            const S* pdy = dy.data() + (static_cast<int64_t>(c) * B + b) * hw;
            const S* ph = xhat_.data() + (static_cast<int64_t>(c) * B + b) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                dg += static_cast<double>(pdy[i]) * ph[i];
                db += pdy[i];
            }
        }
        dgamma_[c] += static_cast<S>(dg);
        dbeta_[c] += static_cast<S>(db);
    }

#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b)
        for (int g = 0; g < groups_; ++g) {
            const double n = static_cast<double>(cg) * hw;
            double sum_dxh = 0.0, sum_dxh_h = 0.0;
            for (int c = g * cg; c < (g + 1) * cg; ++c) {
                const S* pdy = dy.data() + (static_cast<int64_t>(c) * B + b) * hw;
                const S* ph = xhat_.data() + (static_cast<int64_t>(c) * B + b) * hw;
                const double gam = gamma_[c];
                for (int64_t i = 0; i < hw; ++i) {
                    const double dxh = gam * pdy[i];
                    sum_dxh += dxh;
                    sum_dxh_h += dxh * ph[i];
                }
            }
            const double inv = invstd_.at2(b, g);
            for (int c = g * cg; c < (g + 1) * cg; ++c) {
                const S* pdy = dy.data() + (static_cast<int64_t>(c) * B + b) * hw;
                const S* ph = xhat_.data() + (static_cast<int64_t>(c) * B + b) * hw;
                S* pdx = dx.data() + (static_cast<int64_t>(c) * B + b) * hw;
                const double gam = gamma_[c];
                for (int64_t i = 0; i < hw; ++i) {
                    const double dxh = gam * pdy[i];
                    pdx[i] = static_cast<S>(inv / n * (n * dxh - sum_dxh - ph[i] * sum_dxh_h));
                }
            }
        }
    return dx;
}

template <typename S>
void GroupNorm<S>::collect(const std::string& prefix, ParamList<S>& out) {
    out.push_back({prefix + ".gamma", &gamma_, &dgamma_});
    out.push_back({prefix + ".beta", &beta_, &dbeta_});
}

// ------------------------------------------------------------------- SiLU

template <typename S>
Tensor<S> SiLU<S>::forward(const Tensor<S>& x, bool training) {
    Tensor<S> y = Tensor<S>::uninit(x.shape());
    const int64_t n = x.numel();
    const S* px = x.data();
    S* py = y.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        const S s = S(1) / (S(1) + std::exp(-px[i]));
        py[i] = px[i] * s;
    }
    if (training) x_ = x;
    return y;
}

template <typename S>
Tensor<S> SiLU<S>::backward(const Tensor<S>& dy) const {
    Tensor<S> dx = Tensor<S>::uninit(dy.shape());
    const int64_t n = dy.numel();
    const S* px = x_.data();
    const S* pdy = dy.data();
    S* pdx = dx.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        const S s = S(1) / (S(1) + std::exp(-px[i]));
        pdx[i] = pdy[i] * s * (S(1) + px[i] * (S(1) - s));
    }
    return dx;
}

// ----------------------------------------------------------------- Linear

template <typename S>
Linear<S>::Linear(int f_in, int f_out, Rng& rng, bool zero_init) : f_in_(f_in), f_out_(f_out) {
    weight_ = Tensor<S>({f_out, f_in});
    bias_ = Tensor<S>({f_out});
    dweight_ = Tensor<S>(weight_.shape());
    dbias_ = Tensor<S>(bias_.shape());
    if (!zero_init) init_fan_in(weight_, f_in, rng);
}

template <typename S>
Tensor<S> Linear<S>::forward(const Tensor<S>& x, bool training) {
    if (x.rank() != 2 || x.dim(0) != f_in_) throw std::invalid_argument("Linear: bad input shape");
    const int B = x.dim(1);
    Tensor<S> y({f_out_, B});
    gemm<S>(false, false, f_out_, B, f_in_, S(1), weight_.data(), f_in_, x.data(), B, S(0), y.data(), B);
    for (int f = 0; f < f_out_; ++f)
        for (int b = 0; b < B; ++b) y.at2(f, b) += bias_[f];
    if (training) x_ = x;
    return y;
}

template <typename S>
Tensor<S> Linear<S>::backward(const Tensor<S>& dy) {
    const int B = dy.dim(1);
    gemm<S>(false, true, f_out_, f_in_, B, S(1), dy.data(), B, x_.data(), B, S(1), dweight_.data(), f_in_);
    for (int f = 0; f < f_out_; ++f) {
        S acc = 0;
        for (int b = 0; b < B; ++b) acc += dy.at2(f, b);
        dbias_[f] += acc;
    }
    Tensor<S> dx({f_in_, B});
    gemm<S>(true, false, f_in_, B, f_out_, S(1), weight_.data(), f_in_, dy.data(), B, S(0), dx.data(), B);
    return dx;
}

template <typename S>
void Linear<S>::collect(const std::string& prefix, ParamList<S>& out) {
    out.push_back({prefix + ".weight", &weight_, &dweight_});
    out.push_back({prefix + ".bias", &bias_, &dbias_});
}

// -------------------------------------------------------------- Embedding

template <typename S>
Embedding<S>::Embedding(int vocab, int dim, Rng& rng) : vocab_(vocab), dim_(dim) {
    table_ = Tensor<S>({vocab, dim});
    dtable_ = Tensor<S>(table_.shape());
    for (int64_t i = 0; i < table_.numel(); ++i) table_[i] = static_cast<S>(rng.gaussian() * 0.02);
}

template <typename S>
Tensor<S> Embedding<S>::forward(const std::vector<int>& ids, bool training) {
    const int B = static_cast<int>(ids.size());
    Tensor<S> y({dim_, B});
    for (int b = 0; b < B; ++b) {
        const int id = ids[static_cast<size_t>(b)];
        if (id < 0 || id >= vocab_)
            throw std::out_of_range("Embedding: id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(vocab_));
        for (int d = 0; d < dim_; ++d) y.at2(d, b) = table_.at2(id, d);
    }
    if (training) ids_ = ids;
    return y;
}

template <typename S>
void Embedding<S>::backward(const Tensor<S>& dy) {
    const int B = static_cast<int>(ids_.size());
    for (int b = 0; b < B; ++b) {
        const int id = ids_[static_cast<size_t>(b)];
        for (int d = 0; d < dim_; ++d) dtable_.at2(id, d) += dy.at2(d, b);
    }
}

template <typename S>
void Embedding<S>::collect(const std::string& prefix, ParamList<S>& out) {
    out.push_back({prefix + ".table", &table_, &dtable_});
}

// ------------------------------------------------------------- Upsample2x

template <typename S>
Tensor<S> Upsample2x<S>::forward(const Tensor<S>& x) const {
    const int C = x.dim(0), B = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<S> y = Tensor<S>::uninit({C, B, 2 * H, 2 * W});
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c)
        for (int b = 0; b < B; ++b) {
            const S* src = x.data() + (static_cast<int64_t>(c) * B + b) * H * W;
            S* dst = y.data() + (static_cast<int64_t>(c) * B + b) * 4 * H * W;
            for (int yy = 0; yy < 2 * H; ++yy) {
                const S* row = src + static_cast<int64_t>(yy / 2) * W;
                S* drow = dst + static_cast<int64_t>(yy) * 2 * W;
                for (int xx = 0; xx < 2 * W; ++xx) drow[xx] = row[xx / 2];
            }
        }
    return y;
}

template <typename S>
Tensor<S> Upsample2x<S>::backward(const Tensor<S>& dy) const {
    const int C = dy.dim(0), B = dy.dim(1), H2 = dy.dim(2), W2 = dy.dim(3);
    const int H = H2 / 2, W = W2 / 2;
    Tensor<S> dx({C, B, H, W});
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c)
        for (int b = 0; b < B; ++b) {
            const S* src = dy.data() + (static_cast<int64_t>(c) * B + b) * H2 * W2;
            S* dst = dx.data() + (static_cast<int64_t>(c) * B + b) * H * W;
            for (int yy = 0; yy < H2; ++yy)
                for (int xx = 0; xx < W2; ++xx)
                    dst[static_cast<int64_t>(yy / 2) * W + xx / 2] += src[static_cast<int64_t>(yy) * W2 + xx];
        }
    return dx;
}

// --------------------------------------------------------- AttentionBlock

template <typename S>
AttentionBlock<S>::AttentionBlock(int channels, int groups, Rng& rng)
    : channels_(channels),
      norm_(channels, groups),
      qkv_(channels, 3 * channels, 1, 1, rng),
      proj_(channels, channels, 1, 1, rng, /*zero_init=*/true) {}

template <typename S>
Tensor<S> AttentionBlock<S>::forward(const Tensor<S>& x, bool training) {
    const int C = channels_, B = x.dim(1);
    const int N = x.dim(2) * x.dim(3);
    x_shape_ = x.shape();

    Tensor<S> h = norm_.forward(x, training);
    Tensor<S> qkv = qkv_.forward(h, training);  // (3C, B, H, W)

    q_ = Tensor<S>::uninit({B, C, N});
    k_ = Tensor<S>::uninit({B, C, N});
    v_ = Tensor<S>::uninit({B, C, N});
    attn_ = Tensor<S>::uninit({B, N, N});
    Tensor<S> ybuf = Tensor<S>::uninit({C, B, x.dim(2), x.dim(3)});
    Tensor<S> yb_s = Tensor<S>::uninit({B, C, N});
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(C)));

#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        S* q = q_.data() + static_cast<int64_t>(b) * C * N;
        S* k = k_.data() + static_cast<int64_t>(b) * C * N;
        S* v = v_.data() + static_cast<int64_t>(b) * C * N;
        for (int c = 0; c < C; ++c) {
            const int64_t n64 = N;
            std::memcpy(q + c * n64, qkv.data() + (static_cast<int64_t>(c) * B + b) * N,
                        sizeof(S) * static_cast<size_t>(N));
            std::memcpy(k + c * n64, qkv.data() + ((static_cast<int64_t>(C + c)) * B + b) * N,
                        sizeof(S) * static_cast<size_t>(N));
            std::memcpy(v + c * n64, qkv.data() + ((static_cast<int64_t>(2 * C + c)) * B + b) * N,
                        sizeof(S) * static_cast<size_t>(N));
        }
        S* a = attn_.data() + static_cast<int64_t>(b) * N * N;
        gemm<S>(true, false, N, N, C, scale, q, N, k, N, S(0), a, N);
        for (int i = 0; i < N; ++i) {
            S* row = a + static_cast<int64_t>(i) * N;
            S mx = row[0];
            for (int j = 1; j < N; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (int j = 0; j < N; ++j) {
                const double e = std::exp(static_cast<double>(row[j] - mx));
                row[j] = static_cast<S>(e);
                sum += e;
            }
            const S inv = static_cast<S>(1.0 / sum);
            for (int j = 0; j < N; ++j) row[j] *= inv;
        }
        // y = V . A^T, written back per channel
        S* yb = yb_s.data() + static_cast<int64_t>(b) * C * N;
        gemm<S>(false, true, C, N, N, S(1), v, N, a, N, S(0), yb, N);
        for (int c = 0; c < C; ++c)
            std::memcpy(ybuf.data() + (static_cast<int64_t>(c) * B + b) * N, yb + static_cast<int64_t>(c) * N,
                        sizeof(S) * static_cast<size_t>(N));
    }

    Tensor<S> out = proj_.forward(ybuf, training);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += x[i];
    if (!training) {
        q_ = k_ = v_ = attn_ = Tensor<S>();
    }
    return out;
}

template <typename S>
Tensor<S> AttentionBlock<S>::backward(const Tensor<S>& dy) {
    const int C = channels_, B = x_shape_[1];
    const int N = x_shape_[2] * x_shape_[3];

    Tensor<S> d_ybuf = proj_.backward(dy);
    Tensor<S> d_qkv = Tensor<S>::uninit({3 * C, B, x_shape_[2], x_shape_[3]});
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(C)));

    // batched scratch outside the parallel loop
    Tensor<S> dyb_s = Tensor<S>::uninit({B, C, N}), dv_s = Tensor<S>::uninit({B, C, N}),
              dq_s = Tensor<S>::uninit({B, C, N}), dk_s = Tensor<S>::uninit({B, C, N});
    Tensor<S> da_s = Tensor<S>::uninit({B, N, N}), ds_s = Tensor<S>::uninit({B, N, N});

#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        S* dyb = dyb_s.data() + static_cast<int64_t>(b) * C * N;
        S* dv = dv_s.data() + static_cast<int64_t>(b) * C * N;
        S* dq = dq_s.data() + static_cast<int64_t>(b) * C * N;
        S* dk = dk_s.data() + static_cast<int64_t>(b) * C * N;
        S* da = da_s.data() + static_cast<int64_t>(b) * N * N;
        S* ds = ds_s.data() + static_cast<int64_t>(b) * N * N;
        for (int c = 0; c < C; ++c)
            std::memcpy(dyb + static_cast<int64_t>(c) * N,
                        d_ybuf.data() + (static_cast<int64_t>(c) * B + b) * N, sizeof(S) * static_cast<size_t>(N));
        const S* q = q_.data() + static_cast<int64_t>(b) * C * N;
        const S* k = k_.data() + static_cast<int64_t>(b) * C * N;
        const S* v = v_.data() + static_cast<int64_t>(b) * C * N;
        const S* a = attn_.data() + static_cast<int64_t>(b) * N * N;

        gemm<S>(false, false, C, N, N, S(1), dyb, N, a, N, S(0), dv, N);
        gemm<S>(true, false, N, N, C, S(1), dyb, N, v, N, S(0), da, N);
        for (int i = 0; i < N; ++i) {
            const S* arow = a + static_cast<int64_t>(i) * N;
            const S* darow = da + static_cast<int64_t>(i) * N;
            S* dsrow = ds + static_cast<int64_t>(i) * N;
            double dot = 0.0;
            for (int j = 0; j < N; ++j) dot += static_cast<double>(darow[j]) * arow[j];
            for (int j = 0; j < N; ++j) dsrow[j] = static_cast<S>(arow[j] * (darow[j] - dot));
        }
        gemm<S>(false, true, C, N, N, scale, k, N, ds, N, S(0), dq, N);
        gemm<S>(false, false, C, N, N, scale, q, N, ds, N, S(0), dk, N);

        for (int c = 0; c < C; ++c) {
            std::memcpy(d_qkv.data() + (static_cast<int64_t>(c) * B + b) * N, dq + static_cast<int64_t>(c) * N,
                        sizeof(S) * static_cast<size_t>(N));
            std::memcpy(d_qkv.data() + ((static_cast<int64_t>(C + c)) * B + b) * N,
                        dk + static_cast<int64_t>(c) * N, sizeof(S) * static_cast<size_t>(N));
            std::memcpy(d_qkv.data() + ((static_cast<int64_t>(2 * C + c)) * B + b) * N,
                        dv + static_cast<int64_t>(c) * N, sizeof(S) * static_cast<size_t>(N));
        }
    }

    Tensor<S> dh = qkv_.backward(d_qkv);
    Tensor<S> dx = norm_.backward(dh);
    for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += dy[i];
    return dx;
}

template <typename S>
void AttentionBlock<S>::collect(const std::string& prefix, ParamList<S>& out) {
    norm_.collect(prefix + ".norm", out);
    qkv_.collect(prefix + ".qkv", out);
    proj_.collect(prefix + ".proj", out);
}

// ----------------------------------------------------------------- ResBlock

template <typename S>
ResBlock<S>::ResBlock(int c_in, int c_out, int emb_dim, int groups, Rng& rng)
    : c_in_(c_in),
      c_out_(c_out),
      gn1_(c_in, groups),
      gn2_(c_out, groups),
      conv1_(c_in, c_out, 3, 1, rng),
      conv2_(c_out, c_out, 3, 1, rng, /*zero_init=*/true),
      emb_proj_(emb_dim, c_out, rng),
      has_skip_(c_in != c_out) {
    if (has_skip_) skip_ = Conv2d<S>(c_in, c_out, 1, 1, rng);
}

template <typename S>
Tensor<S> ResBlock<S>::forward(const Tensor<S>& x, const Tensor<S>& cond_act, bool training) {
    x_in_ = x;
    Tensor<S> h = conv1_.forward(act1_.forward(gn1_.forward(x, training), training), training);
    h_shape_ = h.shape();
    const int B = h.dim(1);
    const int64_t hw = static_cast<int64_t>(h.dim(2)) * h.dim(3);

    Tensor<S> emb = emb_proj_.forward(cond_act, training);  // (Cout, B)
#pragma omp parallel for schedule(static)
    for (int c = 0; c < c_out_; ++c)
        for (int b = 0; b < B; ++b) {
            S* p = h.data() + (static_cast<int64_t>(c) * B + b) * hw;
            const S e = emb.at2(c, b);
            for (int64_t i = 0; i < hw; ++i) p[i] += e;
        }

    Tensor<S> h2 = conv2_.forward(act2_.forward(gn2_.forward(h, training), training), training);
    const int64_t n2 = h2.numel();
    if (has_skip_) {
        Tensor<S> sk = skip_.forward(x, training);
        S* ph = h2.data();
        const S* ps = sk.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n2; ++i) ph[i] += ps[i];
    } else {
        S* ph = h2.data();
        const S* px = x.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n2; ++i) ph[i] += px[i];
    }
    if (!training) x_in_ = Tensor<S>();
    return h2;
}

template <typename S>
Tensor<S> ResBlock<S>::backward(const Tensor<S>& dy, Tensor<S>& dcond_act) {
    Tensor<S> g = gn2_.backward(act2_.backward(conv2_.backward(dy)));

    // Conditioning bias: gradient is the spatial sum per (channel, item).
    const int B = h_shape_[1];
    const int64_t hw = static_cast<int64_t>(h_shape_[2]) * h_shape_[3];
    Tensor<S> demb({c_out_, B});
    for (int c = 0; c < c_out_; ++c)
        for (int b = 0; b < B; ++b) {
            const S* p = g.data() + (static_cast<int64_t>(c) * B + b) * hw;
            S acc = 0;
            for (int64_t i = 0; i < hw; ++i) acc += p[i];
            demb.at2(c, b) = acc;
        }
    Tensor<S> dca = emb_proj_.backward(demb);
    for (int64_t i = 0; i < dca.numel(); ++i) dcond_act[i] += dca[i];

    Tensor<S> dx = gn1_.backward(act1_.backward(conv1_.backward(g)));
    if (has_skip_) {
        Tensor<S> dsk = skip_.backward(dy);
        for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += dsk[i];
    } else {
        for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += dy[i];
    }
    return dx;
}

template <typename S>
void ResBlock<S>::collect(const std::string& prefix, ParamList<S>& out) {
    gn1_.collect(prefix + ".gn1", out);
    conv1_.collect(prefix + ".conv1", out);
    emb_proj_.collect(prefix + ".emb", out);
    gn2_.collect(prefix + ".gn2", out);
    conv2_.collect(prefix + ".conv2", out);
    if (has_skip_) skip_.collect(prefix + ".skip", out);
}

// ------------------------------------------------------------------- Adam

template <typename S>
void AdamOptimizer<S>::attach(const ParamList<S>& params) {
    m_.clear();
    v_.clear();
    for (const auto& p : params) {
        m_.emplace_back(p.value->shape());
        v_.emplace_back(p.value->shape());
    }
    step_ = 0;
}

template <typename S>
void AdamOptimizer<S>::step(const ParamList<S>& params) {
    if (m_.size() != params.size()) throw std::logic_error("AdamOptimizer: attach() before step()");
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<S>& w = *params[pi].value;
        Tensor<S>& g = *params[pi].grad;
        Tensor<S>& m = m_[pi];
        Tensor<S>& v = v_[pi];
        const int64_t n = w.numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) {
            const double gi = g[i];
            const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
            const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            m[i] = static_cast<S>(mi);
            v[i] = static_cast<S>(vi);
            w[i] -= static_cast<S>(lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_));
        }
    }
}

template <typename S>
void AdamOptimizer<S>::restore(std::vector<Tensor<S>> m, std::vector<Tensor<S>> v, int64_t step) {
    m_ = std::move(m);
    v_ = std::move(v);
    step_ = step;
}

// ----------------------------------------------------- sinusoidal features

template <typename S>
Tensor<S> sinusoidal_embedding(const std::vector<int>& t, int dim) {
    if (dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be even");
    const int half = dim / 2;
    const int B = static_cast<int>(t.size());
    Tensor<S> out({dim, B});
    for (int j = 0; j < half; ++j) {
        const double freq = std::exp(-std::log(10000.0) * j / (half - 1));
        for (int b = 0; b < B; ++b) {
            const double arg = t[static_cast<size_t>(b)] * freq;
            out.at2(j, b) = static_cast<S>(std::sin(arg));
            out.at2(half + j, b) = static_cast<S>(std::cos(arg));
        }
    }
    return out;
}

// Explicit instantiations: the library trains in float32 and gradient-check
// oracles run in float64.
#define MASKDIFF_INSTANTIATE(S)                                              \
    template int64_t param_count<S>(const ParamList<S>&);                    \
    template void zero_grads<S>(const ParamList<S>&);                        \
    template class Conv2d<S>;                                                \
    template class GroupNorm<S>;                                             \
    template class SiLU<S>;                                                  \
    template class Linear<S>;                                                \
    template class Embedding<S>;                                             \
    template class Upsample2x<S>;                                            \
    template class AttentionBlock<S>;                                        \
    template class ResBlock<S>;                                              \
    template class AdamOptimizer<S>;                                         \
    template Tensor<S> sinusoidal_embedding<S>(const std::vector<int>&, int);

MASKDIFF_INSTANTIATE(float)
MASKDIFF_INSTANTIATE(double)

#undef MASKDIFF_INSTANTIATE

}  // namespace maskdiff::nn
