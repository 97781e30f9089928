#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "ssdt/checkpoint.hpp"
#include "ssdt/corpus.hpp"
#include "ssdt/eigen_io.hpp"
#include "ssdt/error.hpp"
#include "ssdt/rng.hpp"

namespace ssdt::netcore {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.9;   // running = 0.9*running + 0.1*batch
constexpr double kProbFloor = 1e-12;  // cross-entropy clamp

// ---------------------------------------------------------------------------
// Network specification
// ---------------------------------------------------------------------------

struct BlockSpec {
    int channels = 8;
    int stride = 1;
};

/// Miniature residual classifier: optional 3x3 stem, residual blocks of two
/// 3x3 convs with batch norm and ReLU plus a skip connection, global average
/// pool, dense softmax head.
struct NetworkSpec {
    int input_h = 32;
    int input_w = 32;
    int input_channels = 1;
    int stem_channels = 8; // 0 disables the stem
    std::vector<BlockSpec> blocks{{8, 1}, {16, 2}};
    int n_classes = 2;

    int penultimate_width() const {
        if (!blocks.empty())
            return blocks.back().channels;
        return stem_channels > 0 ? stem_channels : input_channels;
    }

    int n_groups() const { return int(blocks.size()) + 2; } // stem, blocks..., head

    std::string group_name(int g) const {
        if (g == 0)
            return "stem";
        if (g <= int(blocks.size()))
            return "block" + std::to_string(g - 1);
        return "head";
    }

    void validate() const {
        if (input_h < 1 || input_w < 1 || input_channels < 1)
            throw ConfigError("network input dimensions must be positive");
        if (stem_channels < 0)
            throw ConfigError("stem_channels must be >= 0");
        if (n_classes < 1)
            throw ConfigError("n_classes must be >= 1");
        int h = input_h, w = input_w;
        for (const auto& b : blocks) {
            if (b.channels < 1)
                throw ConfigError("block channels must be >= 1");
            if (b.stride != 1 && b.stride != 2)
                throw ConfigError("block stride must be 1 or 2");
            h = (h + 2 - 3) / b.stride + 1;
            w = (w + 2 - 3) / b.stride + 1;
            if (h < 1 || w < 1)
                throw ConfigError("network spatial size collapses below 1x1");
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json jb = nlohmann::json::array();
        for (const auto& b : blocks)
            jb.push_back({{"channels", b.channels}, {"stride", b.stride}});
        return {{"input_h", input_h},       {"input_w", input_w},
                {"input_channels", input_channels}, {"stem_channels", stem_channels},
                {"blocks", jb},             {"n_classes", n_classes}};
    }

    static NetworkSpec from_json(const nlohmann::json& j) {
        NetworkSpec s;
        s.input_h = j.at("input_h").get<int>();
        s.input_w = j.at("input_w").get<int>();
        s.input_channels = j.value("input_channels", 1);
        s.stem_channels = j.at("stem_channels").get<int>();
        s.blocks.clear();
        for (const auto& jb : j.at("blocks"))
            s.blocks.push_back({jb.at("channels").get<int>(), jb.at("stride").get<int>()});
        s.n_classes = j.at("n_classes").get<int>();
        s.validate();
        return s;
    }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Conv {
    int in_ch = 0, out_ch = 0, ksize = 3, stride = 1, pad = 1;
    Matrix w; // out_ch x (in_ch * ksize * ksize)
};

struct BatchNorm {
    Vector gamma, beta, running_mean, running_var;
};

struct Dense {
    Matrix w; // classes x features
    Vector b;
};

struct ResBlock {
    Conv conv1;
    BatchNorm bn1;
    Conv conv2;
    BatchNorm bn2;
    bool has_proj = false;
    Conv proj; // 1x1, used when channels or stride change
    BatchNorm bnp;
};

enum class Phase { none, coarse, fine };

inline const char* phase_name(Phase p) {
    switch (p) {
    case Phase::coarse: return "coarse";
    case Phase::fine: return "fine";
    default: return "none";
    }
}

inline Phase phase_from_name(const std::string& name) {
    if (name == "coarse") return Phase::coarse;
    if (name == "fine") return Phase::fine;
    if (name == "none") return Phase::none;
    throw SchemaError("unknown phase tag: " + name);
}

struct ModelParams {
    NetworkSpec spec;
    Phase phase = Phase::none;
    std::uint64_t seed = 0;

    Conv stem;
    BatchNorm stem_bn;
    std::vector<ResBlock> blocks;
    Dense head;

    bool has_stem() const { return spec.stem_channels > 0; }
};

namespace detail {

inline void init_conv(Conv& c, int in_ch, int out_ch, int ksize, int stride, int pad, Rng& rng) {
    c.in_ch = in_ch;
    c.out_ch = out_ch;
    c.ksize = ksize;
    c.stride = stride;
    c.pad = pad;
    const int fan_in = in_ch * ksize * ksize;
    const int fan_out = out_ch * ksize * ksize;
    const double r = std::sqrt(6.0 / double(fan_in + fan_out));
    c.w.resize(out_ch, fan_in);
    for (int i = 0; i < out_ch; ++i)
        for (int j = 0; j < fan_in; ++j)
            c.w(i, j) = rng.uniform(-r, r);
}

inline void init_bn(BatchNorm& bn, int channels) {
    bn.gamma = Vector::Ones(channels);
    bn.beta = Vector::Zero(channels);
    bn.running_mean = Vector::Zero(channels);
    bn.running_var = Vector::Ones(channels);
}

inline void init_head(Dense& d, int features, int classes, Rng& rng) {
    const double r = std::sqrt(6.0 / double(features + classes));
    d.w.resize(classes, features);
    for (int i = 0; i < classes; ++i)
        for (int j = 0; j < features; ++j)
            d.w(i, j) = rng.uniform(-r, r);
    d.b = Vector::Zero(classes);
}

} // namespace detail

/// Seeded initialization; every tensor draws from its own derived stream so
/// layouts stay reproducible if the architecture grows.
inline ModelParams model_init(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    ModelParams p;
    p.spec = spec;
    p.seed = seed;
    std::uint64_t stream = 0x11E7;
    int ch = spec.input_channels;
    if (spec.stem_channels > 0) {
        Rng rng = Rng::derive(seed, stream++);
        detail::init_conv(p.stem, ch, spec.stem_channels, 3, 1, 1, rng);
        detail::init_bn(p.stem_bn, spec.stem_channels);
        ch = spec.stem_channels;
    }
    for (const auto& bs : spec.blocks) {
        ResBlock block;
        Rng rng = Rng::derive(seed, stream++);
        detail::init_conv(block.conv1, ch, bs.channels, 3, bs.stride, 1, rng);
        detail::init_bn(block.bn1, bs.channels);
        detail::init_conv(block.conv2, bs.channels, bs.channels, 3, 1, 1, rng);
        detail::init_bn(block.bn2, bs.channels);
        block.has_proj = (ch != bs.channels) || bs.stride != 1;
        if (block.has_proj) {
            detail::init_conv(block.proj, ch, bs.channels, 1, bs.stride, 0, rng);
            detail::init_bn(block.bnp, bs.channels);
        }
        p.blocks.push_back(std::move(block));
        ch = bs.channels;
    }
    Rng rng = Rng::derive(seed, stream++);
    detail::init_head(p.head, spec.penultimate_width(), spec.n_classes, rng);
    return p;
}

// ---------------------------------------------------------------------------
// Tensor enumeration (updates, freezing, serialization, gradient checks)
// ---------------------------------------------------------------------------

struct TensorRef {
    std::string name;
    int group = 0;        // 0 = stem, 1..B = blocks, B+1 = head
    double* data = nullptr;
    std::size_t size = 0;
    bool trainable = true; // false for batch-norm running statistics
};

namespace detail {

inline void add(std::vector<TensorRef>& out, const std::string& name, int group, Matrix& m,
                bool trainable = true) {
    out.push_back({name, group, m.data(), std::size_t(m.size()), trainable});
}

inline void add(std::vector<TensorRef>& out, const std::string& name, int group, Vector& v,
                bool trainable = true) {
    out.push_back({name, group, v.data(), std::size_t(v.size()), trainable});
}

inline void add_bn(std::vector<TensorRef>& out, const std::string& prefix, int group,
                   BatchNorm& bn) {
    add(out, prefix + ".gamma", group, bn.gamma);
    add(out, prefix + ".beta", group, bn.beta);
    add(out, prefix + ".running_mean", group, bn.running_mean, false);
    add(out, prefix + ".running_var", group, bn.running_var, false);
}

} // namespace detail

/// Enumerates every tensor in a fixed, documented order. Grad/velocity
/// clones built from the same spec enumerate identically, so parallel
/// iteration is safe.
inline std::vector<TensorRef> collect_tensors(ModelParams& p) {
    std::vector<TensorRef> out;
    if (p.has_stem()) {
        detail::add(out, "stem.conv.w", 0, p.stem.w);
        detail::add_bn(out, "stem.bn", 0, p.stem_bn);
    }
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        auto& blk = p.blocks[i];
        const std::string prefix = "block" + std::to_string(i);
        const int group = int(i) + 1;
        detail::add(out, prefix + ".conv1.w", group, blk.conv1.w);
        detail::add_bn(out, prefix + ".bn1", group, blk.bn1);
        detail::add(out, prefix + ".conv2.w", group, blk.conv2.w);
        detail::add_bn(out, prefix + ".bn2", group, blk.bn2);
        if (blk.has_proj) {
            detail::add(out, prefix + ".proj.w", group, blk.proj.w);
            detail::add_bn(out, prefix + ".bnp", group, blk.bnp);
        }
    }
    const int head_group = int(p.blocks.size()) + 1;
    detail::add(out, "head.w", head_group, p.head.w);
    detail::add(out, "head.b", head_group, p.head.b);
    return out;
}

/// Same-shaped parameter set with every tensor zeroed; used as a gradient or
/// velocity container.
inline ModelParams zeros_like(const ModelParams& p) {
    ModelParams z = p;
    for (auto& t : collect_tensors(z))
        std::fill(t.data, t.data + t.size, 0.0);
    return z;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

struct Batch {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<double> v;

    Batch() = default;
    Batch(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_),
          v(std::size_t(n_) * std::size_t(c_) * std::size_t(h_) * std::size_t(w_), 0.0) {}

    double& at(int ni, int ci, int y, int x) {
        return v[((std::size_t(ni) * c + ci) * h + y) * w + x];
    }
    double at(int ni, int ci, int y, int x) const {
        return v[((std::size_t(ni) * c + ci) * h + y) * w + x];
    }
    std::size_t plane() const { return std::size_t(h) * std::size_t(w); }
};

inline Batch batch_from_images(const std::vector<const corpus::ImageTensor*>& images,
                               const NetworkSpec& spec) {
    if (images.empty())
        throw ParamError("empty batch");
    Batch b(int(images.size()), spec.input_channels, spec.input_h, spec.input_w);
    if (spec.input_channels != 1)
        throw ShapeError("image batches expect a single input channel");
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& img = *images[i];
        if (img.height != spec.input_h || img.width != spec.input_w)
            throw ShapeError("image size does not match network input");
        std::copy(img.pixels.begin(), img.pixels.end(), b.v.begin() + i * b.plane());
    }
    return b;
}

// ---------------------------------------------------------------------------
// Layer forward/backward
// ---------------------------------------------------------------------------

namespace detail {

inline int out_extent(int in, int ksize, int stride, int pad) {
    return (in + 2 * pad - ksize) / stride + 1;
}

inline void im2col(const Conv& cv, const Batch& in, int oh, int ow, Matrix& cols) {
    const int K = cv.in_ch * cv.ksize * cv.ksize;
    cols.resize(K, Eigen::Index(in.n) * oh * ow);
    for (int ni = 0; ni < in.n; ++ni) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const Eigen::Index col = (Eigen::Index(ni) * oh + oy) * ow + ox;
                int row = 0;
                for (int ci = 0; ci < cv.in_ch; ++ci) {
                    for (int ky = 0; ky < cv.ksize; ++ky) {
                        const int sy = oy * cv.stride + ky - cv.pad;
                        for (int kx = 0; kx < cv.ksize; ++kx, ++row) {
                            const int sx = ox * cv.stride + kx - cv.pad;
                            cols(row, col) = (sy >= 0 && sy < in.h && sx >= 0 && sx < in.w)
                                                 ? in.at(ni, ci, sy, sx)
                                                 : 0.0;
                        }
                    }
                }
            }
        }
    }
}

inline void col2im(const Conv& cv, const Matrix& dcols, int oh, int ow, Batch& din) {
    std::fill(din.v.begin(), din.v.end(), 0.0);
    for (int ni = 0; ni < din.n; ++ni) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const Eigen::Index col = (Eigen::Index(ni) * oh + oy) * ow + ox;
                int row = 0;
                for (int ci = 0; ci < cv.in_ch; ++ci) {
                    for (int ky = 0; ky < cv.ksize; ++ky) {
                        const int sy = oy * cv.stride + ky - cv.pad;
                        for (int kx = 0; kx < cv.ksize; ++kx, ++row) {
                            const int sx = ox * cv.stride + kx - cv.pad;
                            if (sy >= 0 && sy < din.h && sx >= 0 && sx < din.w)
                                din.at(ni, ci, sy, sx) += dcols(row, col);
                        }
                    }
                }
            }
        }
    }
}

inline Batch conv_forward(const Conv& cv, const Batch& in) {
    const int oh = out_extent(in.h, cv.ksize, cv.stride, cv.pad);
    const int ow = out_extent(in.w, cv.ksize, cv.stride, cv.pad);
    Matrix cols;
    im2col(cv, in, oh, ow, cols);
    const Matrix out_mat = cv.w * cols; // out_ch x (n*oh*ow)
    Batch out(in.n, cv.out_ch, oh, ow);
    for (int ni = 0; ni < in.n; ++ni)
        for (int co = 0; co < cv.out_ch; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox)
                    out.at(ni, co, oy, ox) = out_mat(co, (Eigen::Index(ni) * oh + oy) * ow + ox);
    return out;
}

/// Accumulates the weight gradient into dw and writes the input gradient.
inline void conv_backward(const Conv& cv, const Batch& in, const Batch& dout, Matrix& dw,
                          Batch& din) {
    const int oh = dout.h, ow = dout.w;
    Matrix dout_mat(cv.out_ch, Eigen::Index(in.n) * oh * ow);
    for (int ni = 0; ni < in.n; ++ni)
        for (int co = 0; co < cv.out_ch; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox)
                    dout_mat(co, (Eigen::Index(ni) * oh + oy) * ow + ox) = dout.at(ni, co, oy, ox);
    Matrix cols;
    im2col(cv, in, oh, ow, cols);
    dw += dout_mat * cols.transpose();
    const Matrix dcols = cv.w.transpose() * dout_mat;
    din = Batch(in.n, in.c, in.h, in.w);
    col2im(cv, dcols, oh, ow, din);
}

struct BnCache {
    Vector mean, var, invstd;
    Batch xhat;
};

inline Batch bn_forward_train(const BatchNorm& bn, const Batch& in, BnCache& cache) {
    const int C = in.c;
    const double m = double(in.n) * double(in.plane());
    cache.mean = Vector::Zero(C);
    cache.var = Vector::Zero(C);
    for (int ni = 0; ni < in.n; ++ni)
        for (int ci = 0; ci < C; ++ci)
            for (int y = 0; y < in.h; ++y)
                for (int x = 0; x < in.w; ++x)
                    cache.mean(ci) += in.at(ni, ci, y, x);
    cache.mean /= m;
    for (int ni = 0; ni < in.n; ++ni)
        for (int ci = 0; ci < C; ++ci)
            for (int y = 0; y < in.h; ++y)
                for (int x = 0; x < in.w; ++x) {
                    const double d = in.at(ni, ci, y, x) - cache.mean(ci);
                    cache.var(ci) += d * d;
                }
    cache.var /= m;
    cache.invstd = (cache.var.array() + kBnEps).rsqrt();

    cache.xhat = Batch(in.n, in.c, in.h, in.w);
    Batch out(in.n, in.c, in.h, in.w);
    for (int ni = 0; ni < in.n; ++ni)
        for (int ci = 0; ci < C; ++ci)
            for (int y = 0; y < in.h; ++y)
                for (int x = 0; x < in.w; ++x) {
                    const double xh = (in.at(ni, ci, y, x) - cache.mean(ci)) * cache.invstd(ci);
                    cache.xhat.at(ni, ci, y, x) = xh;
                    out.at(ni, ci, y, x) = bn.gamma(ci) * xh + bn.beta(ci);
                }
    return out;
}

inline Batch bn_forward_eval(const BatchNorm& bn, const Batch& in) {
    Batch out(in.n, in.c, in.h, in.w);
    Vector invstd = (bn.running_var.array() + kBnEps).rsqrt();
    for (int ni = 0; ni < in.n; ++ni)
        for (int ci = 0; ci < in.c; ++ci)
            for (int y = 0; y < in.h; ++y)
                for (int x = 0; x < in.w; ++x)
                    out.at(ni, ci, y, x) =
                        bn.gamma(ci) * (in.at(ni, ci, y, x) - bn.running_mean(ci)) * invstd(ci) +
                        bn.beta(ci);
    return out;
}

inline Batch bn_backward(const BatchNorm& bn, const BnCache& cache, const Batch& dout,
                         Vector& dgamma, Vector& dbeta) {
    const int C = dout.c;
    const double m = double(dout.n) * double(dout.plane());
    Vector sum_dy = Vector::Zero(C), sum_dy_xhat = Vector::Zero(C);
    for (int ni = 0; ni < dout.n; ++ni)
        for (int ci = 0; ci < C; ++ci)
            for (int y = 0; y < dout.h; ++y)
                for (int x = 0; x < dout.w; ++x) {
                    const double dy = dout.at(ni, ci, y, x);
                    sum_dy(ci) += dy;
                    sum_dy_xhat(ci) += dy * cache.xhat.at(ni, ci, y, x);
                }
    dgamma += sum_dy_xhat;
    dbeta += sum_dy;
    Batch din(dout.n, dout.c, dout.h, dout.w);
    for (int ni = 0; ni < dout.n; ++ni)
        for (int ci = 0; ci < C; ++ci) {
            const double scale = bn.gamma(ci) * cache.invstd(ci) / m;
            for (int y = 0; y < dout.h; ++y)
                for (int x = 0; x < dout.w; ++x)
                    din.at(ni, ci, y, x) =
                        scale * (m * dout.at(ni, ci, y, x) - sum_dy(ci) -
                                 cache.xhat.at(ni, ci, y, x) * sum_dy_xhat(ci));
        }
    return din;
}

inline void relu_inplace(Batch& b) {
    for (double& x : b.v)
        x = std::max(0.0, x);
}

inline Batch relu_backward(const Batch& out, const Batch& dout) {
    Batch din = dout;
    for (std::size_t i = 0; i < din.v.size(); ++i)
        if (out.v[i] <= 0.0)
            din.v[i] = 0.0;
    return din;
}

inline Matrix gap_forward(const Batch& in) {
    Matrix feat(in.n, in.c);
    for (int ni = 0; ni < in.n; ++ni)
        for (int ci = 0; ci < in.c; ++ci) {
            double sum = 0.0;
            for (int y = 0; y < in.h; ++y)
                for (int x = 0; x < in.w; ++x)
                    sum += in.at(ni, ci, y, x);
            feat(ni, ci) = sum / double(in.plane());
        }
    return feat;
}

inline Batch gap_backward(const Batch& like, const Matrix& dfeat) {
    Batch din(like.n, like.c, like.h, like.w);
    for (int ni = 0; ni < like.n; ++ni)
        for (int ci = 0; ci < like.c; ++ci) {
            const double g = dfeat(ni, ci) / double(like.plane());
            for (int y = 0; y < like.h; ++y)
                for (int x = 0; x < like.w; ++x)
                    din.at(ni, ci, y, x) = g;
        }
    return din;
}

inline Matrix dense_forward(const Dense& d, const Matrix& feat) {
    return (feat * d.w.transpose()).rowwise() + d.b.transpose();
}

inline Matrix softmax_rows(const Matrix& logits) {
    Matrix probs(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        Eigen::ArrayXd e = (logits.row(i).array() - mx).exp();
        probs.row(i) = (e / e.sum()).matrix();
    }
    return probs;
}

// ---------------------------------------------------------------------------
// Whole-network passes
// ---------------------------------------------------------------------------

struct BlockCache {
    Batch input;
    Batch conv1_out; // pre-bn
    BnCache bn1;
    Batch relu1;     // post-relu output of the first conv-bn pair
    Batch conv2_out; // pre-bn
    BnCache bn2;
    Batch main_out; // bn2 output
    BnCache bnp;
    Batch proj_out; // bnp output (or identity copy)
    Batch out;      // post-relu block output
};

struct ForwardCache {
    Batch input;
    BnCache stem_bn;
    Batch stem_conv_out;
    Batch stem_out; // post-relu
    std::vector<BlockCache> blocks;
    Matrix features; // n x penultimate (after GAP)
    Matrix probs;    // n x classes
};

/// Training-mode forward (batch statistics). Pure: running averages are not
/// touched; the caller applies update_running_stats where appropriate.
inline Matrix forward_train(const ModelParams& p, const Batch& in, ForwardCache& cache) {
    cache.input = in;
    const Batch* cur = &cache.input;
    if (p.has_stem()) {
        cache.stem_conv_out = conv_forward(p.stem, *cur);
        cache.stem_out = bn_forward_train(p.stem_bn, cache.stem_conv_out, cache.stem_bn);
        relu_inplace(cache.stem_out);
        cur = &cache.stem_out;
    }
    cache.blocks.resize(p.blocks.size());
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        const ResBlock& blk = p.blocks[i];
        BlockCache& bc = cache.blocks[i];
        bc.input = *cur;
        bc.conv1_out = conv_forward(blk.conv1, bc.input);
        bc.relu1 = bn_forward_train(blk.bn1, bc.conv1_out, bc.bn1);
        relu_inplace(bc.relu1);
        bc.conv2_out = conv_forward(blk.conv2, bc.relu1);
        bc.main_out = bn_forward_train(blk.bn2, bc.conv2_out, bc.bn2);
        if (blk.has_proj) {
            const Batch proj_conv = conv_forward(blk.proj, bc.input);
            bc.proj_out = bn_forward_train(blk.bnp, proj_conv, bc.bnp);
        } else {
            bc.proj_out = bc.input;
        }
        bc.out = bc.main_out;
        for (std::size_t k = 0; k < bc.out.v.size(); ++k)
            bc.out.v[k] += bc.proj_out.v[k];
        relu_inplace(bc.out);
        cur = &bc.out;
    }
    cache.features = gap_forward(*cur);
    cache.probs = softmax_rows(dense_forward(p.head, cache.features));
    return cache.probs;
}

inline void update_running_stats(ModelParams& p, const ForwardCache& cache,
                                 const std::vector<bool>& frozen_groups) {
    auto update = [](BatchNorm& bn, const BnCache& c) {
        bn.running_mean = kBnMomentum * bn.running_mean + (1.0 - kBnMomentum) * c.mean;
        bn.running_var = kBnMomentum * bn.running_var + (1.0 - kBnMomentum) * c.var;
    };
    if (p.has_stem() && !frozen_groups[0])
        update(p.stem_bn, cache.stem_bn);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        if (frozen_groups[i + 1])
            continue;
        update(p.blocks[i].bn1, cache.blocks[i].bn1);
        update(p.blocks[i].bn2, cache.blocks[i].bn2);
        if (p.blocks[i].has_proj)
            update(p.blocks[i].bnp, cache.blocks[i].bnp);
    }
}

/// Inference-mode features (running statistics).
inline Matrix forward_eval_features(const ModelParams& p, const Batch& in) {
    Batch cur = in;
    if (p.has_stem()) {
        cur = conv_forward(p.stem, cur);
        cur = bn_forward_eval(p.stem_bn, cur);
        relu_inplace(cur);
    }
    for (const ResBlock& blk : p.blocks) {
        Batch main = conv_forward(blk.conv1, cur);
        main = bn_forward_eval(blk.bn1, main);
        relu_inplace(main);
        main = conv_forward(blk.conv2, main);
        main = bn_forward_eval(blk.bn2, main);
        Batch skip = blk.has_proj ? bn_forward_eval(blk.bnp, conv_forward(blk.proj, cur)) : cur;
        for (std::size_t k = 0; k < main.v.size(); ++k)
            main.v[k] += skip.v[k];
        relu_inplace(main);
        cur = std::move(main);
    }
    return gap_forward(cur);
}

inline Matrix forward_eval(const ModelParams& p, const Batch& in) {
    return softmax_rows(dense_forward(p.head, forward_eval_features(p, in)));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean categorical cross entropy; predicted probabilities are clamped at
/// 1e-12 so a zero at the target index stays finite.
inline double cross_entropy(const Matrix& probabilities, const Matrix& one_hot_targets) {
    if (probabilities.rows() != one_hot_targets.rows() ||
        probabilities.cols() != one_hot_targets.cols())
        throw ShapeError("cross_entropy: probability and target shapes differ");
    if (probabilities.rows() == 0)
        throw ParamError("cross_entropy: empty batch");
    double loss = 0.0;
    for (Eigen::Index i = 0; i < probabilities.rows(); ++i) {
        double row_sum = 0.0;
        for (Eigen::Index j = 0; j < probabilities.cols(); ++j) {
            const double y = one_hot_targets(i, j);
            if (y != 0.0 && y != 1.0)
                throw ParamError("cross_entropy: targets must be one-hot");
            row_sum += y;
            if (y == 1.0)
                loss -= std::log(std::max(probabilities(i, j), kProbFloor));
        }
        if (row_sum != 1.0)
            throw ParamError("cross_entropy: each target row must have exactly one 1");
    }
    return loss / double(probabilities.rows());
}

inline double cross_entropy(const Matrix& probabilities, const std::vector<int>& targets) {
    if (std::size_t(probabilities.rows()) != targets.size())
        throw ShapeError("cross_entropy: one target per row required");
    double loss = 0.0;
    for (Eigen::Index i = 0; i < probabilities.rows(); ++i)
        loss -= std::log(std::max(probabilities(i, targets[std::size_t(i)]), kProbFloor));
    return loss / double(probabilities.rows());
}

/// Training-mode loss on a batch; pure (no running-stat updates). This is the
/// function the finite-difference gradient check differentiates.
inline double training_loss(const ModelParams& p, const Batch& in,
                            const std::vector<int>& targets) {
    detail::ForwardCache cache;
    detail::forward_train(p, in, cache);
    return cross_entropy(cache.probs, targets);
}

namespace detail {

/// Backward pass for the mean cross-entropy loss, reusing a forward cache.
/// Gradients come back in a ModelParams-shaped container (running-stat slots
/// stay zero).
inline ModelParams backward_from_cache(const ModelParams& p, const ForwardCache& cache,
                                       const std::vector<int>& targets) {
    ModelParams g = zeros_like(p);

    const Eigen::Index n = cache.probs.rows();
    Matrix dlogits = cache.probs;
    for (Eigen::Index i = 0; i < n; ++i)
        dlogits(i, targets[std::size_t(i)]) -= 1.0;
    dlogits /= double(n);

    g.head.w += dlogits.transpose() * cache.features;
    g.head.b += dlogits.colwise().sum().transpose();
    const Matrix dfeat = dlogits * p.head.w;

    const Batch& gap_in =
        p.blocks.empty() ? (p.has_stem() ? cache.stem_out : cache.input) : cache.blocks.back().out;
    Batch dcur = detail::gap_backward(gap_in, dfeat);

    for (int i = int(p.blocks.size()) - 1; i >= 0; --i) {
        const ResBlock& blk = p.blocks[std::size_t(i)];
        ResBlock& gblk = g.blocks[std::size_t(i)];
        const detail::BlockCache& bc = cache.blocks[std::size_t(i)];

        const Batch dsum = detail::relu_backward(bc.out, dcur);

        // main branch
        Batch dmain = detail::bn_backward(blk.bn2, bc.bn2, dsum, gblk.bn2.gamma, gblk.bn2.beta);
        Batch drelu1;
        detail::conv_backward(blk.conv2, bc.relu1, dmain, gblk.conv2.w, drelu1);
        drelu1 = detail::relu_backward(bc.relu1, drelu1);
        Batch dconv1 =
            detail::bn_backward(blk.bn1, bc.bn1, drelu1, gblk.bn1.gamma, gblk.bn1.beta);
        Batch dinput_main;
        detail::conv_backward(blk.conv1, bc.input, dconv1, gblk.conv1.w, dinput_main);

        // skip branch
        Batch dinput_skip;
        if (blk.has_proj) {
            Batch dproj =
                detail::bn_backward(blk.bnp, bc.bnp, dsum, gblk.bnp.gamma, gblk.bnp.beta);
            detail::conv_backward(blk.proj, bc.input, dproj, gblk.proj.w, dinput_skip);
        } else {
            dinput_skip = dsum;
        }

        dcur = dinput_main;
        for (std::size_t k = 0; k < dcur.v.size(); ++k)
            dcur.v[k] += dinput_skip.v[k];
    }

    if (p.has_stem()) {
        Batch drelu = detail::relu_backward(cache.stem_out, dcur);
        Batch dconv = detail::bn_backward(p.stem_bn, cache.stem_bn, drelu, g.stem_bn.gamma,
                                          g.stem_bn.beta);
        Batch dinput;
        detail::conv_backward(p.stem, cache.input, dconv, g.stem.w, dinput);
    }
    return g;
}

} // namespace detail

/// Analytic gradient of training_loss.
inline ModelParams training_gradient(const ModelParams& p, const Batch& in,
                                     const std::vector<int>& targets) {
    detail::ForwardCache cache;
    detail::forward_train(p, in, cache);
    return detail::backward_from_cache(p, cache, targets);
}

// ---------------------------------------------------------------------------
// Public inference surface
// ---------------------------------------------------------------------------

/// Class-probability rows for a batch of images (inference mode).
inline Matrix forward(const ModelParams& p, const std::vector<const corpus::ImageTensor*>& images) {
    return detail::forward_eval(p, batch_from_images(images, p.spec));
}

inline Matrix forward(const ModelParams& p, const corpus::Corpus& c, std::size_t begin,
                      std::size_t end) {
    std::vector<const corpus::ImageTensor*> ptrs;
    ptrs.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i)
        ptrs.push_back(&c.samples[i].image);
    return forward(p, ptrs);
}

/// Probability rows for a whole corpus, evaluated in fixed-size batches.
inline Matrix forward_all(const ModelParams& p, const corpus::Corpus& c, int batch_size = 64) {
    if (c.size() == 0)
        throw ParamError("forward_all: empty corpus");
    Matrix probs(Eigen::Index(c.size()), p.spec.n_classes);
    for (std::size_t start = 0; start < c.size(); start += std::size_t(batch_size)) {
        const std::size_t stop = std::min(c.size(), start + std::size_t(batch_size));
        probs.middleRows(Eigen::Index(start), Eigen::Index(stop - start)) =
            forward(p, c, start, stop);
    }
    return probs;
}

/// Penultimate-layer (global average pool) features, order-preserving.
inline Matrix extract_features(const ModelParams& p, const corpus::Corpus& c,
                               int batch_size = 64) {
    if (c.size() == 0)
        throw ParamError("extract_features: empty corpus");
    Matrix feats(Eigen::Index(c.size()), p.spec.penultimate_width());
    for (std::size_t start = 0; start < c.size(); start += std::size_t(batch_size)) {
        const std::size_t stop = std::min(c.size(), start + std::size_t(batch_size));
        std::vector<const corpus::ImageTensor*> ptrs;
        ptrs.reserve(stop - start);
        for (std::size_t i = start; i < stop; ++i)
            ptrs.push_back(&c.samples[i].image);
        feats.middleRows(Eigen::Index(start), Eigen::Index(stop - start)) =
            detail::forward_eval_features(p, batch_from_images(ptrs, p.spec));
    }
    return feats;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TuningMode {
    enum class Kind { shallow, fine_from, deep } kind = Kind::deep;
    int from_block = 0;

    static TuningMode shallow() { return {Kind::shallow, 0}; }
    static TuningMode deep() { return {Kind::deep, 0}; }
    static TuningMode fine_from(int block) { return {Kind::fine_from, block}; }

    std::string to_string() const {
        switch (kind) {
        case Kind::shallow: return "shallow";
        case Kind::deep: return "deep";
        case Kind::fine_from: return "fine:" + std::to_string(from_block);
        }
        return "deep";
    }

    static TuningMode parse(const std::string& s) {
        if (s == "shallow")
            return shallow();
        if (s == "deep")
            return deep();
        if (s.rfind("fine:", 0) == 0)
            return fine_from(std::stoi(s.substr(5)));
        throw ConfigError("unknown tuning mode: " + s);
    }
};

struct LrDrop {
    double factor = 1.0;
    int every = 0; // 0 disables the schedule
};

struct TrainConfig {
    double learning_rate = 0.01;
    double head_learning_rate = -1.0; // < 0 means: use learning_rate
    int batch_size = 32;
    int epochs = 20;
    double weight_decay = 1e-4;
    double momentum = 0.9;
    LrDrop lr_drop;
    TuningMode tuning = TuningMode::deep();
    std::uint64_t seed = 0;

    double head_lr() const { return head_learning_rate < 0.0 ? learning_rate : head_learning_rate; }

    void validate() const {
        if (!(learning_rate > 0.0))
            throw ConfigError("learning_rate must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw ConfigError("momentum must lie in [0,1)");
        if (!(lr_drop.factor > 0.0 && lr_drop.factor <= 1.0))
            throw ConfigError("lr_drop factor must lie in (0,1]");
        if (lr_drop.every < 0)
            throw ConfigError("lr_drop every must be >= 0");
        if (epochs < 1)
            throw ConfigError("epochs must be >= 1");
        if (batch_size < 1)
            throw ConfigError("batch_size must be >= 1");
        if (weight_decay < 0.0)
            throw ConfigError("weight_decay must be >= 0");
    }

    double lr_at(int epoch) const {
        const int drops = lr_drop.every > 0 ? (epoch - 1) / lr_drop.every : 0;
        return learning_rate * std::pow(lr_drop.factor, drops);
    }

    double head_lr_at(int epoch) const {
        const int drops = lr_drop.every > 0 ? (epoch - 1) / lr_drop.every : 0;
        return head_lr() * std::pow(lr_drop.factor, drops);
    }
};

/// Which parameter groups receive no updates under a tuning mode.
inline std::vector<bool> frozen_groups(const NetworkSpec& spec, const TuningMode& mode) {
    const int n_groups = spec.n_groups();
    std::vector<bool> frozen(std::size_t(n_groups), false);
    switch (mode.kind) {
    case TuningMode::Kind::deep:
        break;
    case TuningMode::Kind::shallow:
        for (int g = 0; g + 1 < n_groups; ++g)
            frozen[std::size_t(g)] = true;
        break;
    case TuningMode::Kind::fine_from:
        if (mode.from_block < 0 || mode.from_block > int(spec.blocks.size()))
            throw ConfigError("fine-tuning block index out of range");
        frozen[0] = true;
        for (int b = 0; b < mode.from_block; ++b)
            frozen[std::size_t(b) + 1] = true;
        break;
    }
    return frozen;
}

struct TrainTrace {
    std::vector<double> loss;       // per epoch, mean over batches
    std::vector<double> accuracy;   // per epoch, training accuracy
    std::vector<double> lr;         // effective body learning rate per epoch
    std::vector<double> validation; // per epoch, only when a callback is given
};

/// Serializable optimizer snapshot: momentum buffers, shuffle stream and the
/// number of completed epochs. Makes interrupted training resumable with
/// bit-identical results.
struct TrainState {
    ModelParams velocity;
    std::array<std::uint64_t, 4> rng_state{};
    int epoch = 0;
};

struct TrainResult {
    ModelParams params;
    TrainTrace trace;
    TrainState state;
};

/// Per-epoch hook; the returned value (e.g. validation accuracy) is recorded
/// in the trace.
using EpochCallback = std::function<double(const ModelParams&, int)>;

/// Mini-batch SGD with momentum, weight decay and a step learning-rate drop:
/// v <- mu*v - eta*(grad + lambda*w); w <- w + v. Frozen groups (per tuning
/// mode) receive no updates of any kind, including batch-norm running stats.
inline TrainResult train(const ModelParams& start, const corpus::Corpus& data,
                         const TrainConfig& config, const EpochCallback& callback = {},
                         const TrainState* resume = nullptr) {
    config.validate();
    if (!data.labeled())
        throw ParamError("train: corpus must be labeled");
    if (int(data.class_set.size()) != start.spec.n_classes)
        throw ShapeError("train: corpus class count does not match network head width");
    if (data.size() < std::size_t(config.batch_size))
        throw ParamError("train: corpus smaller than batch_size");

    TrainResult result;
    result.params = start;
    ModelParams& p = result.params;
    const std::vector<bool> frozen = frozen_groups(p.spec, config.tuning);

    Rng rng = Rng::derive(config.seed, 0x5DD);
    int first_epoch = 1;
    if (resume) {
        result.state = *resume;
        rng.set_state(resume->rng_state);
        first_epoch = resume->epoch + 1;
    } else {
        result.state.velocity = zeros_like(p);
        result.state.epoch = 0;
    }
    ModelParams& velocity = result.state.velocity;

    std::vector<std::size_t> order(data.size());

    const int head_group = int(p.spec.blocks.size()) + 1;
    for (int epoch = first_epoch; epoch <= config.epochs; ++epoch) {
        // each epoch's permutation depends only on the RNG state, which makes
        // interrupted runs resumable from the serialized state
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        const double lr = config.lr_at(epoch);
        const double head_lr = config.head_lr_at(epoch);
        double loss_sum = 0.0;
        std::size_t correct = 0;

        for (std::size_t begin = 0; begin < order.size(); begin += std::size_t(config.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + std::size_t(config.batch_size));
            std::vector<const corpus::ImageTensor*> ptrs;
            std::vector<int> targets;
            ptrs.reserve(end - begin);
            targets.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                ptrs.push_back(&data.samples[order[i]].image);
                targets.push_back(data.samples[order[i]].label);
            }
            const Batch batch = batch_from_images(ptrs, p.spec);

            detail::ForwardCache cache;
            detail::forward_train(p, batch, cache);
            const double batch_loss = cross_entropy(cache.probs, targets);
            if (!std::isfinite(batch_loss))
                throw TrainingError("training diverged at epoch " + std::to_string(epoch), epoch);
            loss_sum += batch_loss * double(end - begin);
            for (Eigen::Index i = 0; i < cache.probs.rows(); ++i) {
                Eigen::Index arg = 0;
                cache.probs.row(i).maxCoeff(&arg); // Eigen picks the first maximum
                if (int(arg) == targets[std::size_t(i)])
                    ++correct;
            }

            detail::update_running_stats(p, cache, frozen);
            ModelParams grads = detail::backward_from_cache(p, cache, targets);

            auto p_refs = collect_tensors(p);
            auto g_refs = collect_tensors(grads);
            auto v_refs = collect_tensors(velocity);
            for (std::size_t t = 0; t < p_refs.size(); ++t) {
                if (!p_refs[t].trainable || frozen[std::size_t(p_refs[t].group)])
                    continue;
                const double eta = p_refs[t].group == head_group ? head_lr : lr;
                double* w = p_refs[t].data;
                double* g = g_refs[t].data;
                double* v = v_refs[t].data;
                for (std::size_t k = 0; k < p_refs[t].size; ++k) {
                    v[k] = config.momentum * v[k] -
                           eta * (g[k] + config.weight_decay * w[k]);
                    w[k] += v[k];
                }
            }
        }

        result.trace.loss.push_back(loss_sum / double(data.size()));
        result.trace.accuracy.push_back(double(correct) / double(data.size()));
        result.trace.lr.push_back(lr);
        if (callback)
            result.trace.validation.push_back(callback(p, epoch));
        result.state.epoch = epoch;
        result.state.rng_state = rng.state();
    }
    return result;
}

/// Copies the body of a coarse-phase model and re-initializes the head at the
/// requested width. The phase tag is reset to none.
inline ModelParams transplant(const ModelParams& coarse, int new_head_width, std::uint64_t seed) {
    if (coarse.phase != Phase::coarse)
        throw ParamError("transplant: source model must carry the coarse phase tag");
    if (new_head_width < 1)
        throw ParamError("transplant: head width must be >= 1");
    ModelParams out = coarse;
    out.spec.n_classes = new_head_width;
    out.phase = Phase::none;
    out.seed = seed;
    Rng rng = Rng::derive(seed, 0x11EAD);
    detail::init_head(out.head, out.spec.penultimate_width(), new_head_width, rng);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline void save_model(const ModelParams& params, const std::filesystem::path& path,
                       const TrainState* state = nullptr) {
    checkpoint::Blob blob;
    blob.kind = "classifier";
    blob.meta = {{"spec", params.spec.to_json()},
                 {"phase", phase_name(params.phase)},
                 {"seed", params.seed},
                 {"has_state", state != nullptr}};
    ModelParams copy = params; // collect_tensors needs mutable access
    for (const auto& t : collect_tensors(copy))
        blob.tensors.emplace_back(t.name, std::vector<double>(t.data, t.data + t.size));
    if (state) {
        blob.meta["epoch"] = state->epoch;
        blob.meta["rng_state"] = state->rng_state;
        ModelParams vel = state->velocity;
        for (const auto& t : collect_tensors(vel))
            blob.tensors.emplace_back("velocity." + t.name,
                                      std::vector<double>(t.data, t.data + t.size));
    }
    checkpoint::save_blob(blob, path);
}

struct LoadedModel {
    ModelParams params;
    bool has_state = false;
    TrainState state;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
    const auto blob = checkpoint::load_blob(path);
    if (blob.kind != "classifier")
        throw SchemaError("checkpoint is not a classifier: " + path.string());
    LoadedModel out;
    out.params = model_init(NetworkSpec::from_json(blob.meta.at("spec")),
                            blob.meta.value("seed", std::uint64_t(0)));
    out.params.phase = phase_from_name(blob.meta.at("phase").get<std::string>());
    for (const auto& t : collect_tensors(out.params)) {
        const auto& data = blob.tensor(t.name);
        if (data.size() != t.size)
            throw SchemaError("checkpoint tensor '" + t.name + "' has unexpected size");
        std::copy(data.begin(), data.end(), t.data);
    }
    out.has_state = blob.meta.value("has_state", false);
    if (out.has_state) {
        out.state.epoch = blob.meta.at("epoch").get<int>();
        const auto rs = blob.meta.at("rng_state").get<std::vector<std::uint64_t>>();
        if (rs.size() != 4)
            throw SchemaError("checkpoint rng_state must have 4 words");
        std::copy(rs.begin(), rs.end(), out.state.rng_state.begin());
        out.state.velocity = zeros_like(out.params);
        for (const auto& t : collect_tensors(out.state.velocity)) {
            const auto& data = blob.tensor("velocity." + t.name);
            if (data.size() != t.size)
                throw SchemaError("checkpoint velocity tensor '" + t.name +
                                  "' has unexpected size");
            std::copy(data.begin(), data.end(), t.data);
        }
    }
    return out;
}

} // namespace ssdt::netcore
