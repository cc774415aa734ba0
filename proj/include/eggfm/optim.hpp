#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "eggfm/autodiff.hpp"
#include "eggfm/error.hpp"
#include "eggfm/nn.hpp"

namespace eggfm::nn {

/// Gradient tensors laid out like ModelParams::tensor(i).
struct Gradients {
    std::vector<Matrix> tensors;

    double norm() const {
        double s = 0.0;
        for (const auto& t : tensors) s += t.squaredNorm();
        return std::sqrt(s);
    }

    bool all_finite() const {
        for (const auto& t : tensors) {
            if (!t.allFinite()) return false;
        }
        return true;
    }
};

struct LossAndGrad {
    double loss = 0.0;
    Gradients grads;
};

/**
 * Evaluates `loss_fn(net)` on a trainable binding of `params` and returns the
 * exact reverse-mode gradient. `stage` labels divergence errors.
 */
template <typename LossFn>
LossAndGrad value_and_grad(const ModelParams& params, LossFn&& loss_fn, const std::string& stage = "loss") {
    Net net = Net::trainable(params);
    Var loss = loss_fn(net);
    const double value = loss.item();
    if (!std::isfinite(value)) fail(ErrorCode::divergence, stage + ": non-finite loss");
    std::vector<Var> g = ad::grad(loss, net.parameters());
    LossAndGrad out;
    out.loss = value;
    out.grads.tensors.reserve(g.size());
    for (auto& v : g) out.grads.tensors.push_back(v.value());
    if (!out.grads.all_finite()) fail(ErrorCode::divergence, stage + ": non-finite gradient");
    return out;
}

/// Adam moments, gradient clipping and an exponential moving average of the weights.
struct OptState {
    long step = 0;
    double learning_rate = 1e-4;
    double grad_clip = 10.0;
    double ema_decay = 0.999;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    ModelParams ema;

    static OptState for_params(const ModelParams& params, double learning_rate = 1e-4, double grad_clip = 10.0,
                               double ema_decay = 0.999) {
        OptState s;
        s.learning_rate = learning_rate;
        s.grad_clip = grad_clip;
        s.ema_decay = ema_decay;
        for (std::size_t i = 0; i < params.num_tensors(); ++i) {
            s.m.push_back(Matrix::Zero(params.tensor(i).rows(), params.tensor(i).cols()));
            s.v.push_back(Matrix::Zero(params.tensor(i).rows(), params.tensor(i).cols()));
        }
        s.ema = params;
        return s;
    }
};

/// Rescales `grads` in place so its global norm is at most `threshold`. Returns the norm before clipping.
inline double clip_global_norm(Gradients& grads, double threshold) {
    const double n = grads.norm();
    if (threshold > 0.0 && n > threshold) {
        const double s = threshold / n;
        for (auto& t : grads.tensors) t *= s;
    }
    return n;
}

inline void train_step(ModelParams& params, OptState& opt, Gradients grads) {
    require(grads.tensors.size() == params.num_tensors() && opt.m.size() == params.num_tensors(), ErrorCode::shape,
            "train_step: gradient/optimizer layout does not match the parameters");
    require(grads.all_finite(), ErrorCode::divergence, "train_step: non-finite gradient");
    clip_global_norm(grads, opt.grad_clip);

    ++opt.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
    for (std::size_t i = 0; i < params.num_tensors(); ++i) {
        const Matrix& g = grads.tensors[i];
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g;
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g.cwiseAbs2();
        params.tensor(i).array() -=
            opt.learning_rate * (opt.m[i].array() / bc1) / ((opt.v[i].array() / bc2).sqrt() + opt.eps);
    }
    for (std::size_t i = 0; i < params.num_tensors(); ++i) {
        opt.ema.tensor(i) = opt.ema_decay * opt.ema.tensor(i) + (1.0 - opt.ema_decay) * params.tensor(i);
    }
}

} // namespace eggfm::nn
