#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "eggfm/nn.hpp"
#include "eggfm/optim.hpp"

namespace eggfm::nn {

struct TrainConfig {
    long steps = 2000;
    std::size_t batch_size = 256;
    double learning_rate = 1e-4;
    double grad_clip = 10.0;
    double ema_decay = 0.999;
    /// Read out the EMA weights (debiased toward the initialization) instead of the raw iterate.
    bool use_ema = true;
};

struct TrainResult {
    ModelParams params; // weights used downstream
    ModelParams raw;    // last optimizer iterate
    OptState opt;
    std::vector<double> trace;
};

/**
 * EMA readout with the initialization's residual weight removed:
 * (ema_t - d^t p_0) / (1 - d^t). Equals p_0 before the first step.
 */
inline ModelParams debiased_ema(const OptState& opt, const ModelParams& init) {
    if (opt.step == 0) return init;
    const double carry = std::pow(opt.ema_decay, static_cast<double>(opt.step));
    ModelParams out = opt.ema;
    for (std::size_t i = 0; i < out.num_tensors(); ++i) {
        out.tensor(i) = (opt.ema.tensor(i) - carry * init.tensor(i)) / (1.0 - carry);
    }
    return out;
}

/// Runs `cfg.steps` Adam steps of `loss_fn(net, step)`; loss values are appended to the trace.
template <typename LossFn>
TrainResult fit(const ModelParams& init, const TrainConfig& cfg, LossFn&& loss_fn, const std::string& stage) {
    require(cfg.steps >= 0, ErrorCode::config, stage + ": steps must be >= 0");
    TrainResult r;
    r.raw = init;
    r.opt = OptState::for_params(init, cfg.learning_rate, cfg.grad_clip, cfg.ema_decay);
    r.trace.reserve(static_cast<std::size_t>(cfg.steps));
    for (long step = 0; step < cfg.steps; ++step) {
        auto lg = value_and_grad(
            r.raw, [&](const Net& net) { return loss_fn(net, step); }, stage + " step " + std::to_string(step));
        r.trace.push_back(lg.loss);
        train_step(r.raw, r.opt, std::move(lg.grads));
    }
    r.params = cfg.use_ema ? debiased_ema(r.opt, init) : r.raw;
    return r;
}

} // namespace eggfm::nn
