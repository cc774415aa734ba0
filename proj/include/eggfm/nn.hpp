#pragma once

/**
 * @file nn.hpp
 *
 * @brief Feed-forward networks shared by every learned component.
 *
 * A network is `n_layers` activated hidden layers of width `hidden_dim` followed
 * by a linear read-out, so it owns `n_layers + 1` affine maps (`n_layers = 0` is a
 * single affine map). Residual networks
 * (score and energy) add each hidden-to-hidden block to its input. The skip
 * variant (distance embedding) adds the network input to the read-out.
 */

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "eggfm/autodiff.hpp"
#include "eggfm/error.hpp"

namespace eggfm::nn {

using ad::Matrix;
using ad::Var;

enum class Role { score, energy, geodesic, embedding, flow };

inline std::string to_string(Role role) {
    switch (role) {
    case Role::score: return "score";
    case Role::energy: return "energy";
    case Role::geodesic: return "geodesic";
    case Role::embedding: return "embedding";
    case Role::flow: return "flow";
    }
    return "unknown";
}

inline Role role_from_string(const std::string& s) {
    if (s == "score") return Role::score;
    if (s == "energy") return Role::energy;
    if (s == "geodesic") return Role::geodesic;
    if (s == "embedding") return Role::embedding;
    if (s == "flow") return Role::flow;
    fail(ErrorCode::format, "unknown network role '" + s + "'");
}

struct Architecture {
    Role role = Role::score;
    int in_dim = 1;
    int out_dim = 1;
    int hidden_dim = 16;
    int n_layers = 2;
    bool residual = false;
    bool skip = false;
    /// Zero the read-out layer at initialization (network starts as the zero map).
    bool zero_output = false;
};

struct Layer {
    Matrix weight; // out x in
    Matrix bias;   // 1 x out
};

struct ModelParams {
    Architecture arch;
    std::vector<Layer> layers;

    std::size_t num_tensors() const { return layers.size() * 2; }

    Matrix& tensor(std::size_t i) { return i % 2 == 0 ? layers[i / 2].weight : layers[i / 2].bias; }
    const Matrix& tensor(std::size_t i) const { return i % 2 == 0 ? layers[i / 2].weight : layers[i / 2].bias; }

    static std::string tensor_name(std::size_t i) {
        return "layer" + std::to_string(i / 2) + (i % 2 == 0 ? ".weight" : ".bias");
    }

    std::size_t num_scalars() const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < num_tensors(); ++i) n += static_cast<std::size_t>(tensor(i).size());
        return n;
    }

    /// Expected (rows, cols) of tensor i given the architecture.
    std::pair<Eigen::Index, Eigen::Index> expected_shape(std::size_t i) const {
        const std::size_t layer = i / 2;
        const Eigen::Index in = layer == 0 ? arch.in_dim : arch.hidden_dim;
        const Eigen::Index out = layer == static_cast<std::size_t>(arch.n_layers) ? arch.out_dim : arch.hidden_dim;
        return i % 2 == 0 ? std::pair{out, in} : std::pair{Eigen::Index{1}, out};
    }

    void validate() const {
        require(arch.in_dim > 0 && arch.out_dim > 0 && arch.hidden_dim > 0 && arch.n_layers >= 0, ErrorCode::shape,
                "network dimensions must be positive");
        require(!arch.skip || arch.in_dim == arch.out_dim, ErrorCode::shape,
                "skip connection needs in_dim == out_dim");
        require(layers.size() == static_cast<std::size_t>(arch.n_layers) + 1, ErrorCode::shape,
                "expected " + std::to_string(arch.n_layers + 1) + " layers, found " + std::to_string(layers.size()));
        for (std::size_t i = 0; i < num_tensors(); ++i) {
            const auto [r, c] = expected_shape(i);
            const Matrix& t = tensor(i);
            if (t.rows() != r || t.cols() != c) {
                fail(ErrorCode::shape, tensor_name(i) + ": expected " + std::to_string(r) + "x" + std::to_string(c) +
                                           ", found " + std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
            }
            require(t.allFinite(), ErrorCode::divergence, tensor_name(i) + " has non-finite entries");
        }
    }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization of weights and biases.
inline ModelParams init_params(const Architecture& arch, std::uint64_t seed) {
    ModelParams p;
    p.arch = arch;
    std::mt19937_64 rng(seed);
    for (int l = 0; l <= arch.n_layers; ++l) {
        const int in = l == 0 ? arch.in_dim : arch.hidden_dim;
        const int out = l == arch.n_layers ? arch.out_dim : arch.hidden_dim;
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> u(-bound, bound);
        Layer layer{Matrix(out, in), Matrix(1, out)};
        for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = u(rng);
        for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias.data()[i] = u(rng);
        if (l == arch.n_layers && arch.zero_output) {
            layer.weight.setZero();
            layer.bias.setZero();
        }
        p.layers.push_back(std::move(layer));
    }
    p.validate();
    return p;
}

/// A network whose tensors are bound to autodiff leaves for one loss evaluation.
class Net {
public:
    static Net trainable(const ModelParams& params) { return Net(params, true); }
    static Net frozen(const ModelParams& params) { return Net(params, false); }

    const ModelParams& params() const { return *params_; }
    const std::vector<Var>& parameters() const { return vars_; }

    Var operator()(const Var& x) const { return run(x, nullptr).first; }

    /// Output together with its directional derivative along `tangent` (forward mode).
    std::pair<Var, Var> jvp(const Var& x, const Var& tangent) const { return run(x, &tangent); }

private:
    Net(const ModelParams& params, bool trainable) : params_(&params) {
        vars_.reserve(params.num_tensors());
        for (std::size_t i = 0; i < params.num_tensors(); ++i) {
            vars_.push_back(trainable ? ad::variable(params.tensor(i)) : ad::constant(params.tensor(i)));
        }
    }

    std::pair<Var, Var> run(const Var& x, const Var* tangent) const {
        const Architecture& a = params_->arch;
        if (x.cols() != a.in_dim) {
            fail(ErrorCode::shape, "network input has " + std::to_string(x.cols()) + " columns, expected " +
                                       std::to_string(a.in_dim));
        }
        Var h;
        Var h_tan;
        for (int l = 0; l < a.n_layers; ++l) {
            const Var& w = vars_[2 * l];
            const Var& b = vars_[2 * l + 1];
            const Var& in = l == 0 ? x : h;
            Var pre = ad::add_row(ad::matmul(in, w, false, true), b);
            Var act = ad::silu(pre);
            Var act_tan;
            if (tangent) {
                Var pre_tan = ad::matmul(l == 0 ? *tangent : h_tan, w, false, true);
                act_tan = ad::mul(ad::silu_derivative(pre, 1), pre_tan);
            }
            if (a.residual && l > 0) {
                h = ad::add(h, act);
                if (tangent) h_tan = ad::add(h_tan, act_tan);
            } else {
                h = act;
                h_tan = act_tan;
            }
        }
        const Var& w = vars_[2 * a.n_layers];
        const Var& b = vars_[2 * a.n_layers + 1];
        if (a.n_layers == 0) {
            h = x;
            if (tangent) h_tan = *tangent;
        }
        Var out = ad::add_row(ad::matmul(h, w, false, true), b);
        Var out_tan;
        if (tangent) out_tan = ad::matmul(h_tan, w, false, true);
        if (a.skip) {
            out = ad::add(out, x);
            if (tangent) out_tan = ad::add(out_tan, *tangent);
        }
        return {out, out_tan};
    }

    const ModelParams* params_;
    std::vector<Var> vars_;
};

/// Plain evaluation without recording a graph.
inline Matrix forward(const ModelParams& params, const Matrix& x) {
    ad::NoGrad guard;
    return Net::frozen(params)(ad::constant(x)).value();
}

// ---------------------------------------------------------------------------
// Conditioning

enum class EmbeddingInput { noise_scale, time, cluster_id };

/**
 * Sinusoidal features [sin(w_k u), cos(w_k u)] with frequencies w_k spaced
 * geometrically in [min_freq, max_freq]. Noise scales enter as log(sigma).
 */
struct SinusoidalEmbedding {
    int n_freq = 32;
    EmbeddingInput input = EmbeddingInput::time;
    double min_freq = 1.0;
    double max_freq = 30.0;

    static SinusoidalEmbedding for_input(EmbeddingInput kind, int n_freq = 32) {
        SinusoidalEmbedding e;
        e.n_freq = n_freq;
        e.input = kind;
        e.max_freq = kind == EmbeddingInput::time ? 30.0 : 100.0;
        return e;
    }

    int dim() const { return 2 * n_freq; }

    Matrix frequencies() const {
        Matrix f(1, n_freq);
        for (int k = 0; k < n_freq; ++k) {
            const double frac = n_freq == 1 ? 0.0 : static_cast<double>(k) / (n_freq - 1);
            f(0, k) = min_freq * std::pow(max_freq / min_freq, frac);
        }
        return f;
    }

    /// Raw conditioner value -> embedding input (log for noise scales).
    double transform(double u) const { return input == EmbeddingInput::noise_scale ? std::log(u) : u; }

    /// u is a column (B x 1) of already-transformed inputs; differentiable in u.
    Var operator()(const Var& u) const {
        require(u.cols() == 1, ErrorCode::shape, "embedding input must be a column");
        Var phase = ad::matmul(u, ad::constant(frequencies()));
        return ad::concat_cols({ad::sin(phase), ad::cos(phase)});
    }

    /// Embeds raw conditioner values (applies `transform`).
    Var embed(const Eigen::VectorXd& raw) const {
        Matrix u(raw.size(), 1);
        for (Eigen::Index i = 0; i < raw.size(); ++i) u(i, 0) = transform(raw(i));
        return (*this)(ad::constant(std::move(u)));
    }
};

} // namespace eggfm::nn
