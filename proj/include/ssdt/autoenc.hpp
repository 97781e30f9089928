#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ssdt/checkpoint.hpp"
#include "ssdt/corpus.hpp"
#include "ssdt/eigen_io.hpp"
#include "ssdt/error.hpp"
#include "ssdt/rng.hpp"

namespace ssdt::autoenc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

constexpr int kMaxInputDim = 64 * 64; // flattened-image path rejects larger inputs
constexpr int kDefaultHidden = 80;
constexpr int kDefaultCode = 50;

enum class Activation { sigmoid, relu };

inline const char* activation_name(Activation a) {
    return a == Activation::sigmoid ? "sigmoid" : "relu";
}

inline Activation activation_from_name(const std::string& name) {
    if (name == "sigmoid")
        return Activation::sigmoid;
    if (name == "relu")
        return Activation::relu;
    throw ConfigError("unknown activation: " + name);
}

/// Fully-connected autoencoder input -> hidden -> code -> hidden -> input.
/// The encoder map (layers 0-1) plays the role of the first weight group,
/// the mirrored decoder (layers 2-3) the second.
struct AutoencoderParams {
    int input_dim = 0;
    int hidden = kDefaultHidden;
    int code = kDefaultCode;
    Activation activation = Activation::sigmoid;
    std::uint64_t seed = 0;

    std::array<Matrix, 4> w; // w[l]: dims[l+1] x dims[l]
    std::array<Vector, 4> b;

    std::array<int, 5> dims() const {
        return {input_dim, hidden, code, hidden, input_dim};
    }
};

struct AeTrainConfig {
    double weight_decay = 1e-4;
    double learning_rate = 0.5;
    int batch_size = 32;
    int epochs = 50;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0))
            throw ConfigError("autoencoder learning_rate must be > 0");
        if (epochs < 1)
            throw ConfigError("autoencoder epochs must be >= 1");
        if (batch_size < 1)
            throw ConfigError("autoencoder batch_size must be >= 1");
        if (weight_decay < 0.0)
            throw ConfigError("autoencoder weight_decay must be >= 0");
    }
};

namespace detail {

inline void apply_activation(Matrix& z, Activation a) {
    if (a == Activation::sigmoid)
        z = 1.0 / (1.0 + (-z.array()).exp());
    else
        z = z.array().max(0.0);
}

/// f' expressed through the activation output.
inline Matrix activation_deriv(const Matrix& out, Activation a) {
    if (a == Activation::sigmoid)
        return out.array() * (1.0 - out.array());
    return (out.array() > 0.0).cast<double>();
}

struct ForwardCache {
    std::array<Matrix, 4> a; // activations per layer, columns are samples
};

/// Columns of `x` are samples.
inline ForwardCache forward_cols(const AutoencoderParams& p, const Matrix& x) {
    ForwardCache cache;
    const Matrix* prev = &x;
    for (int l = 0; l < 4; ++l) {
        cache.a[l] = (p.w[l] * (*prev)).colwise() + p.b[l];
        apply_activation(cache.a[l], p.activation);
        prev = &cache.a[l];
    }
    return cache;
}

} // namespace detail

/// Seeded uniform initialization in [-r, r], r = sqrt(6 / (fan_in + fan_out)).
inline AutoencoderParams ae_init(int input_dim, Activation activation = Activation::sigmoid,
                                 std::uint64_t seed = 0, int hidden = kDefaultHidden,
                                 int code = kDefaultCode) {
    if (input_dim < 1)
        throw ConfigError("autoencoder input_dim must be >= 1");
    if (input_dim > kMaxInputDim)
        throw ConfigError("autoencoder input larger than 64x64 is not supported");
    if (hidden < 1 || code < 1)
        throw ConfigError("autoencoder layer sizes must be >= 1");

    AutoencoderParams p;
    p.input_dim = input_dim;
    p.hidden = hidden;
    p.code = code;
    p.activation = activation;
    p.seed = seed;
    const auto dims = p.dims();
    Rng rng = Rng::derive(seed, 0x0AE0);
    for (int l = 0; l < 4; ++l) {
        const int fan_in = dims[std::size_t(l)];
        const int fan_out = dims[std::size_t(l) + 1];
        const double r = std::sqrt(6.0 / double(fan_in + fan_out));
        p.w[l].resize(fan_out, fan_in);
        for (int i = 0; i < fan_out; ++i)
            for (int j = 0; j < fan_in; ++j)
                p.w[l](i, j) = rng.uniform(-r, r);
        p.b[l] = Vector::Zero(fan_out);
    }
    return p;
}

struct AeForwardResult {
    Vector code;
    Vector reconstruction;
};

inline AeForwardResult ae_forward(const AutoencoderParams& p, const Vector& x) {
    if (x.size() != p.input_dim)
        throw ShapeError("ae_forward: input length does not match input_dim");
    const auto cache = detail::forward_cols(p, x);
    return {cache.a[1].col(0), cache.a[3].col(0)};
}

inline Vector flatten(const corpus::ImageTensor& img) {
    return Eigen::Map<const Vector>(img.pixels.data(), Eigen::Index(img.pixels.size()));
}

/// Stacks a corpus into a row-per-sample matrix of flattened images.
inline Matrix flatten_corpus(const corpus::Corpus& c) {
    if (c.size() == 0)
        throw ParamError("empty corpus");
    const auto& first = c.samples.front().image;
    Matrix data(Eigen::Index(c.size()), Eigen::Index(first.size()));
    for (std::size_t i = 0; i < c.size(); ++i) {
        const auto& img = c.samples[i].image;
        if (img.height != first.height || img.width != first.width)
            throw ShapeError("corpus images must share one size for the autoencoder");
        data.row(Eigen::Index(i)) = flatten(img).transpose();
    }
    return data;
}

/// Mean reconstruction error plus the weight-decay penalty
/// (lambda/2) * sum of squared weight entries; biases are not penalized.
inline double ae_loss(const AutoencoderParams& p, const Matrix& data, double lambda) {
    if (data.rows() == 0)
        throw ParamError("ae_loss: empty data");
    if (data.cols() != p.input_dim)
        throw ShapeError("ae_loss: data width does not match input_dim");
    const Matrix x = data.transpose();
    const auto cache = detail::forward_cols(p, x);
    const double recon = 0.5 * (cache.a[3] - x).colwise().squaredNorm().sum() / double(x.cols());
    double penalty = 0.0;
    for (const auto& w : p.w)
        penalty += w.squaredNorm();
    return recon + 0.5 * lambda * penalty;
}

struct AeGradient {
    std::array<Matrix, 4> w;
    std::array<Vector, 4> b;
};

/// Gradient of ae_loss over the given batch (mean reconstruction term plus
/// the full weight-decay term).
inline AeGradient ae_gradient(const AutoencoderParams& p, const Matrix& data, double lambda) {
    if (data.rows() == 0)
        throw ParamError("ae_gradient: empty data");
    if (data.cols() != p.input_dim)
        throw ShapeError("ae_gradient: data width does not match input_dim");
    const Matrix x = data.transpose();
    const double n = double(x.cols());
    const auto cache = detail::forward_cols(p, x);

    AeGradient g;
    Matrix delta =
        (cache.a[3] - x).cwiseProduct(detail::activation_deriv(cache.a[3], p.activation));
    for (int l = 3; l >= 0; --l) {
        const Matrix& prev = l == 0 ? x : cache.a[std::size_t(l) - 1];
        g.w[l] = delta * prev.transpose() / n + lambda * p.w[l];
        g.b[l] = delta.rowwise().sum() / n;
        if (l > 0)
            delta = (p.w[l].transpose() * delta)
                        .cwiseProduct(detail::activation_deriv(cache.a[std::size_t(l) - 1],
                                                               p.activation));
    }
    return g;
}

struct AeTrainResult {
    AutoencoderParams params;
    std::vector<double> loss_trace; // loss_trace[0] is the pre-training loss
};

/// Mini-batch gradient descent with a fixed learning rate. Deterministic:
/// initialization and the shuffle stream derive from config.seed.
inline AeTrainResult ae_train(const Matrix& data, const AeTrainConfig& config,
                              Activation activation = Activation::sigmoid,
                              int hidden = kDefaultHidden, int code = kDefaultCode) {
    config.validate();
    if (data.rows() < config.batch_size)
        throw ParamError("ae_train: corpus smaller than batch_size");

    AeTrainResult result;
    result.params = ae_init(int(data.cols()), activation, config.seed, hidden, code);
    AutoencoderParams& p = result.params;
    Rng shuffle_rng = Rng::derive(config.seed, 0x0AE1);

    std::vector<Eigen::Index> order(std::size_t(data.rows()));
    std::iota(order.begin(), order.end(), 0);

    result.loss_trace.push_back(ae_loss(p, data, config.weight_decay));
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += std::size_t(config.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + std::size_t(config.batch_size));
            Matrix batch(Eigen::Index(stop - start), data.cols());
            for (std::size_t i = start; i < stop; ++i)
                batch.row(Eigen::Index(i - start)) = data.row(order[i]);
            const AeGradient g = ae_gradient(p, batch, config.weight_decay);
            for (int l = 0; l < 4; ++l) {
                p.w[l] -= config.learning_rate * g.w[l];
                p.b[l] -= config.learning_rate * g.b[l];
            }
        }
        const double loss = ae_loss(p, data, config.weight_decay);
        if (!std::isfinite(loss))
            throw TrainingError("autoencoder training diverged at epoch " +
                                    std::to_string(epoch),
                                epoch);
        result.loss_trace.push_back(loss);
    }
    return result;
}

inline AeTrainResult ae_train(const corpus::Corpus& c, const AeTrainConfig& config,
                              Activation activation = Activation::sigmoid,
                              int hidden = kDefaultHidden, int code = kDefaultCode) {
    return ae_train(flatten_corpus(c), config, activation, hidden, code);
}

/// One code row per data row, order-preserving.
inline Matrix ae_encode(const AutoencoderParams& p, const Matrix& data) {
    if (data.cols() != p.input_dim)
        throw ShapeError("ae_encode: data width does not match input_dim");
    const auto cache = detail::forward_cols(p, data.transpose());
    return cache.a[1].transpose();
}

inline Matrix ae_encode(const AutoencoderParams& p, const corpus::Corpus& c) {
    return ae_encode(p, flatten_corpus(c));
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline void ae_save(const AutoencoderParams& p, const std::filesystem::path& path) {
    checkpoint::Blob blob;
    blob.kind = "autoencoder";
    blob.meta = {{"input_dim", p.input_dim},
                 {"hidden", p.hidden},
                 {"code", p.code},
                 {"activation", activation_name(p.activation)},
                 {"seed", p.seed}};
    for (int l = 0; l < 4; ++l) {
        blob.tensors.emplace_back("w" + std::to_string(l), to_vec(p.w[l]));
        blob.tensors.emplace_back("b" + std::to_string(l), to_vec(p.b[l]));
    }
    checkpoint::save_blob(blob, path);
}

inline AutoencoderParams ae_load(const std::filesystem::path& path) {
    const auto blob = checkpoint::load_blob(path);
    if (blob.kind != "autoencoder")
        throw SchemaError("checkpoint is not an autoencoder: " + path.string());
    AutoencoderParams p;
    p.input_dim = blob.meta.at("input_dim").get<int>();
    p.hidden = blob.meta.at("hidden").get<int>();
    p.code = blob.meta.at("code").get<int>();
    p.activation = activation_from_name(blob.meta.at("activation").get<std::string>());
    p.seed = blob.meta.at("seed").get<std::uint64_t>();
    const auto dims = p.dims();
    for (int l = 0; l < 4; ++l) {
        p.w[l] = matrix_from_vec(blob.tensor("w" + std::to_string(l)), dims[std::size_t(l) + 1],
                                 dims[std::size_t(l)]);
        p.b[l] = vector_from_vec(blob.tensor("b" + std::to_string(l)), dims[std::size_t(l) + 1]);
    }
    return p;
}

} // namespace ssdt::autoenc
