#pragma once

// Transformer building blocks with explicit forward caches and hand-written
// backward passes. Templated on the scalar so the same code runs in float
// for training and in double for finite-difference checks. Row reductions
// (softmax, layer norm) accumulate in double regardless of T.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rdlab/rng.hpp"

namespace rdlab {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ParamGroup { vision, projection, lm };

inline const char* group_name(ParamGroup g)
{
    switch (g) {
    case ParamGroup::vision: return "vision";
    case ParamGroup::projection: return "projection";
    case ParamGroup::lm: return "lm";
    }
    return "?";
}

template <class T>
struct Param {
    std::string name;
    ParamGroup group = ParamGroup::lm;
    bool decay = false;
    Mat<T> value;
    Mat<T> grad;

    Param() = default;
    Param(std::string n, ParamGroup g, Eigen::Index rows, Eigen::Index cols, bool decays = false)
        : name(std::move(n)), group(g), decay(decays), value(Mat<T>::Zero(rows, cols)), grad(Mat<T>::Zero(rows, cols))
    {
    }

    void normal_init(Rng& rng, double stddev)
    {
        for (Eigen::Index i = 0; i < value.size(); ++i) {
            value.data()[i] = static_cast<T>(rng.normal() * stddev);
        }
    }

    void fill(T v) { value.setConstant(v); }
    void zero_grad() { grad.setZero(); }
};

template <class T>
struct Linear {
    Param<T> w;  // out x in
    Param<T> b;  // 1 x out

    Linear() = default;
    Linear(const std::string& name, ParamGroup g, int in, int out)
        : w(name + ".w", g, out, in, true), b(name + ".b", g, 1, out)
    {
    }

    void init(Rng& rng, double stddev = 0.02)
    {
        w.normal_init(rng, stddev);
        b.fill(T(0));
    }

    Mat<T> forward(const Mat<T>& x) const
    {
        Mat<T> y = x * w.value.transpose();
        y.rowwise() += b.value.row(0);
        return y;
    }

    // Returns dx; accumulates parameter gradients only when `accumulate`.
    Mat<T> backward(const Mat<T>& x, const Mat<T>& dy, bool accumulate)
    {
        if (accumulate) {
            w.grad.noalias() += dy.transpose() * x;
            b.grad.row(0) += dy.colwise().sum();
        }
        return dy * w.value;
    }

    template <class F>
    void visit(F&& f)
    {
        f(w);
        f(b);
    }
};

template <class T>
struct LayerNormCache {
    Mat<T> xhat;
    std::vector<double> rstd;
};

template <class T>
struct LayerNorm {
    static constexpr double kEps = 1e-5;
    Param<T> gamma;
    Param<T> beta;

    LayerNorm() = default;
    LayerNorm(const std::string& name, ParamGroup g, int dim) : gamma(name + ".g", g, 1, dim), beta(name + ".b", g, 1, dim)
    {
        gamma.fill(T(1));
    }

    Mat<T> forward(const Mat<T>& x, LayerNormCache<T>* cache) const
    {
        const Eigen::Index rows = x.rows(), cols = x.cols();
        Mat<T> y(rows, cols);
        Mat<T> xhat(rows, cols);
        std::vector<double> rstd(static_cast<std::size_t>(rows));
        for (Eigen::Index i = 0; i < rows; ++i) {
            double mean = 0.0;
            for (Eigen::Index j = 0; j < cols; ++j) {
                mean += static_cast<double>(x(i, j));
            }
            mean /= static_cast<double>(cols);
            double var = 0.0;
            for (Eigen::Index j = 0; j < cols; ++j) {
                const double d = static_cast<double>(x(i, j)) - mean;
                var += d * d;
            }
            var /= static_cast<double>(cols);
            const double r = 1.0 / std::sqrt(var + kEps);
            rstd[static_cast<std::size_t>(i)] = r;
            for (Eigen::Index j = 0; j < cols; ++j) {
                const T xh = static_cast<T>((static_cast<double>(x(i, j)) - mean) * r);
                xhat(i, j) = xh;
                y(i, j) = xh * gamma.value(0, j) + beta.value(0, j);
            }
        }
        if (cache) {
            cache->xhat = std::move(xhat);
            cache->rstd = std::move(rstd);
        }
        return y;
    }

    Mat<T> backward(const LayerNormCache<T>& c, const Mat<T>& dy, bool accumulate)
    {
        const Eigen::Index rows = dy.rows(), cols = dy.cols();
        if (accumulate) {
            gamma.grad.row(0) += (dy.array() * c.xhat.array()).matrix().colwise().sum();
            beta.grad.row(0) += dy.colwise().sum();
        }
        Mat<T> dx(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (Eigen::Index j = 0; j < cols; ++j) {
                const double d = static_cast<double>(dy(i, j)) * static_cast<double>(gamma.value(0, j));
                mean_d += d;
                mean_dx += d * static_cast<double>(c.xhat(i, j));
            }
            mean_d /= static_cast<double>(cols);
            mean_dx /= static_cast<double>(cols);
            const double r = c.rstd[static_cast<std::size_t>(i)];
            for (Eigen::Index j = 0; j < cols; ++j) {
                const double d = static_cast<double>(dy(i, j)) * static_cast<double>(gamma.value(0, j));
                dx(i, j) = static_cast<T>(r * (d - mean_d - static_cast<double>(c.xhat(i, j)) * mean_dx));
            }
        }
        return dx;
    }

    template <class F>
    void visit(F&& f)
    {
        f(gamma);
        f(beta);
    }
};

template <class T>
struct AttentionCache {
    Mat<T> x;
    Mat<T> qkv;
    std::vector<Mat<T>> probs;
    Mat<T> ctx;
};

template <class T>
struct MultiHeadAttention {
    Linear<T> qkv;
    Linear<T> out;
    int heads = 1;
    bool causal = true;

    MultiHeadAttention() = default;
    MultiHeadAttention(const std::string& name, ParamGroup g, int dim, int n_heads, bool is_causal)
        : qkv(name + ".qkv", g, dim, 3 * dim), out(name + ".out", g, dim, dim), heads(n_heads), causal(is_causal)
    {
    }

    void init(Rng& rng)
    {
        qkv.init(rng);
        out.init(rng);
    }

    Mat<T> forward(const Mat<T>& x, AttentionCache<T>* cache) const
    {
        const Eigen::Index n = x.rows();
        const Eigen::Index dim = x.cols();
        const Eigen::Index dh = dim / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        Mat<T> proj = qkv.forward(x);
        Mat<T> ctx(n, dim);
        std::vector<Mat<T>> probs(static_cast<std::size_t>(heads));
        std::vector<double> row(static_cast<std::size_t>(n));
        for (int h = 0; h < heads; ++h) {
            const auto q = proj.middleCols(h * dh, dh);
            const auto k = proj.middleCols(dim + h * dh, dh);
            const auto v = proj.middleCols(2 * dim + h * dh, dh);
            Mat<T> scores = q * k.transpose();
            Mat<T>& p = probs[static_cast<std::size_t>(h)];
            p.resize(n, n);
            for (Eigen::Index i = 0; i < n; ++i) {
                const Eigen::Index limit = causal ? i + 1 : n;
                double mx = -INFINITY;
                for (Eigen::Index j = 0; j < limit; ++j) {
                    row[static_cast<std::size_t>(j)] = static_cast<double>(scores(i, j)) * scale;
                    mx = std::max(mx, row[static_cast<std::size_t>(j)]);
                }
                double sum = 0.0;
                for (Eigen::Index j = 0; j < limit; ++j) {
                    row[static_cast<std::size_t>(j)] = std::exp(row[static_cast<std::size_t>(j)] - mx);
                    sum += row[static_cast<std::size_t>(j)];
                }
                for (Eigen::Index j = 0; j < n; ++j) {
                    p(i, j) = j < limit ? static_cast<T>(row[static_cast<std::size_t>(j)] / sum) : T(0);
                }
            }
            ctx.middleCols(h * dh, dh).noalias() = p * v;
        }
        Mat<T> y = out.forward(ctx);
        if (cache) {
            cache->x = x;
            cache->qkv = std::move(proj);
            cache->probs = std::move(probs);
            cache->ctx = std::move(ctx);
        }
        return y;
    }

    Mat<T> backward(const AttentionCache<T>& c, const Mat<T>& dy, bool accumulate)
    {
        const Eigen::Index n = c.x.rows();
        const Eigen::Index dim = c.x.cols();
        const Eigen::Index dh = dim / heads;
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        Mat<T> dctx = out.backward(c.ctx, dy, accumulate);
        Mat<T> dproj(n, 3 * dim);
        for (int h = 0; h < heads; ++h) {
            const auto q = c.qkv.middleCols(h * dh, dh);
            const auto k = c.qkv.middleCols(dim + h * dh, dh);
            const auto v = c.qkv.middleCols(2 * dim + h * dh, dh);
            const Mat<T>& p = c.probs[static_cast<std::size_t>(h)];
            const auto dout = dctx.middleCols(h * dh, dh);
            Mat<T> dp = dout * v.transpose();
            dproj.middleCols(2 * dim + h * dh, dh).noalias() = p.transpose() * dout;
            Mat<T> ds(n, n);
            for (Eigen::Index i = 0; i < n; ++i) {
                double dot = 0.0;
                for (Eigen::Index j = 0; j < n; ++j) {
                    dot += static_cast<double>(dp(i, j)) * static_cast<double>(p(i, j));
                }
                for (Eigen::Index j = 0; j < n; ++j) {
                    ds(i, j) = static_cast<T>(static_cast<double>(p(i, j)) * (static_cast<double>(dp(i, j)) - dot)) * scale;
                }
            }
            dproj.middleCols(h * dh, dh).noalias() = ds * k;
            dproj.middleCols(dim + h * dh, dh).noalias() = ds.transpose() * q;
        }
        return qkv.backward(c.x, dproj, accumulate);
    }

    template <class F>
    void visit(F&& f)
    {
        qkv.visit(f);
        out.visit(f);
    }
};

namespace detail {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

inline double gelu_grad(double x)
{
    const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

} // namespace detail

template <class T>
struct MlpCache {
    Mat<T> x;
    Mat<T> pre;
    Mat<T> act;
};

template <class T>
struct Mlp {
    Linear<T> fc1;
    Linear<T> fc2;

    Mlp() = default;
    Mlp(const std::string& name, ParamGroup g, int dim, int hidden)
        : fc1(name + ".fc1", g, dim, hidden), fc2(name + ".fc2", g, hidden, dim)
    {
    }

    void init(Rng& rng)
    {
        fc1.init(rng);
        fc2.init(rng);
    }

    Mat<T> forward(const Mat<T>& x, MlpCache<T>* cache) const
    {
        Mat<T> pre = fc1.forward(x);
        Mat<T> act = pre.unaryExpr([](T v) { return static_cast<T>(detail::gelu(static_cast<double>(v))); });
        Mat<T> y = fc2.forward(act);
        if (cache) {
            cache->x = x;
            cache->pre = std::move(pre);
            cache->act = std::move(act);
        }
        return y;
    }

    Mat<T> backward(const MlpCache<T>& c, const Mat<T>& dy, bool accumulate)
    {
        Mat<T> dact = fc2.backward(c.act, dy, accumulate);
        Mat<T> dpre = dact.binaryExpr(c.pre, [](T d, T x) { return static_cast<T>(d * detail::gelu_grad(static_cast<double>(x))); });
        return fc1.backward(c.x, dpre, accumulate);
    }

    template <class F>
    void visit(F&& f)
    {
        fc1.visit(f);
        fc2.visit(f);
    }
};

template <class T>
struct BlockCache {
    LayerNormCache<T> ln1;
    AttentionCache<T> attn;
    LayerNormCache<T> ln2;
    MlpCache<T> mlp;
};

/// Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(.)).
template <class T>
struct Block {
    LayerNorm<T> ln1;
    MultiHeadAttention<T> attn;
    LayerNorm<T> ln2;
    Mlp<T> mlp;

    Block() = default;
    Block(const std::string& name, ParamGroup g, int dim, int heads, bool causal, int mlp_ratio = 4)
        : ln1(name + ".ln1", g, dim), attn(name + ".attn", g, dim, heads, causal), ln2(name + ".ln2", g, dim),
          mlp(name + ".mlp", g, dim, mlp_ratio * dim)
    {
    }

    void init(Rng& rng)
    {
        attn.init(rng);
        mlp.init(rng);
    }

    Mat<T> forward(const Mat<T>& x, BlockCache<T>* cache) const
    {
        Mat<T> h = x + attn.forward(ln1.forward(x, cache ? &cache->ln1 : nullptr), cache ? &cache->attn : nullptr);
        return h + mlp.forward(ln2.forward(h, cache ? &cache->ln2 : nullptr), cache ? &cache->mlp : nullptr);
    }

    Mat<T> backward(const BlockCache<T>& c, const Mat<T>& dy, bool accumulate)
    {
        Mat<T> dh = dy + ln2.backward(c.ln2, mlp.backward(c.mlp, dy, accumulate), accumulate);
        return dh + ln1.backward(c.ln1, attn.backward(c.attn, dh, accumulate), accumulate);
    }

    template <class F>
    void visit(F&& f)
    {
        ln1.visit(f);
        attn.visit(f);
        ln2.visit(f);
        mlp.visit(f);
    }
};

} // namespace rdlab
