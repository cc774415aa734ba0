#pragma once

/**
 * @file score_energy.hpp
 *
 * @brief Tempered denoising score matching and energy distillation.
 *
 * The score network predicts noise: for y = x + sigma * eps it regresses eps / beta,
 * and the score is recovered as -eps_hat / sigma. The energy head is
 * E(y, sigma) = <E_net(y, sigma), y> / sigma, trained so that sigma * grad E matches
 * the frozen score's noise prediction.
 */

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "eggfm/autodiff.hpp"
#include "eggfm/data.hpp"
#include "eggfm/error.hpp"
#include "eggfm/nn.hpp"
#include "eggfm/random.hpp"
#include "eggfm/train.hpp"

namespace eggfm::score {

using ad::Matrix;
using ad::Var;
using Vector = Eigen::VectorXd;

struct NoiseSchedule {
    std::vector<double> sigmas; // strictly increasing

    /// m scales log-spaced in [sigma_min, sigma_max]. m = 1 requires sigma_min == sigma_max.
    static NoiseSchedule log_spaced(int m, double sigma_min, double sigma_max) {
        require(m >= 1, ErrorCode::config, "noise schedule needs at least one scale");
        require(sigma_min > 0.0 && sigma_max >= sigma_min, ErrorCode::config,
                "noise schedule needs 0 < sigma_min <= sigma_max");
        require(m > 1 || sigma_min == sigma_max, ErrorCode::config, "a single noise scale needs sigma_min == sigma_max");
        require(m == 1 || sigma_max > sigma_min, ErrorCode::config, "several noise scales need sigma_min < sigma_max");
        NoiseSchedule s;
        for (int i = 0; i < m; ++i) {
            const double frac = m == 1 ? 0.0 : static_cast<double>(i) / (m - 1);
            s.sigmas.push_back(std::exp(std::log(sigma_min) + frac * (std::log(sigma_max) - std::log(sigma_min))));
        }
        s.sigmas.front() = sigma_min;
        s.sigmas.back() = sigma_max;
        return s;
    }

    int size() const { return static_cast<int>(sigmas.size()); }
    double min() const { return sigmas.front(); }
    double max() const { return sigmas.back(); }

    void validate() const {
        require(!sigmas.empty(), ErrorCode::config, "empty noise schedule");
        for (std::size_t i = 0; i < sigmas.size(); ++i) {
            require(sigmas[i] > 0.0 && std::isfinite(sigmas[i]), ErrorCode::config, "noise scales must be positive");
            require(i == 0 || sigmas[i] > sigmas[i - 1], ErrorCode::config, "noise scales must be strictly increasing");
        }
    }
};

/// Conditioning shared by the score and energy networks: point, log-sigma embedding, optional cluster embedding.
struct Conditioning {
    int dim = 2;
    int n_freq = 32;
    bool cluster_conditioned = false;

    nn::SinusoidalEmbedding sigma_embedding() const {
        return nn::SinusoidalEmbedding::for_input(nn::EmbeddingInput::noise_scale, n_freq);
    }
    nn::SinusoidalEmbedding cluster_embedding() const {
        return nn::SinusoidalEmbedding::for_input(nn::EmbeddingInput::cluster_id, n_freq);
    }

    int input_dim() const { return dim + 2 * n_freq * (cluster_conditioned ? 2 : 1); }

    /// y: B x dim, sigma: B x 1, cluster: B ids (required iff cluster-conditioned).
    Var input(const Var& y, const Vector& sigma, const std::vector<int>* cluster) const {
        require(y.cols() == dim, ErrorCode::shape,
                "point has " + std::to_string(y.cols()) + " columns, model expects " + std::to_string(dim));
        require(sigma.size() == y.rows(), ErrorCode::shape, "one noise scale per row is required");
        std::vector<Var> parts{y, sigma_embedding().embed(sigma)};
        if (cluster_conditioned) {
            require(cluster != nullptr && static_cast<Eigen::Index>(cluster->size()) == y.rows(), ErrorCode::shape,
                    "cluster-conditioned model needs one cluster id per row");
            Vector c(y.rows());
            for (Eigen::Index i = 0; i < y.rows(); ++i) c(i) = (*cluster)[static_cast<std::size_t>(i)];
            parts.push_back(cluster_embedding().embed(c));
        }
        return ad::concat_cols(parts);
    }
};

struct NetShape {
    int hidden_dim = 128;
    int n_layers = 4;
};

struct ScoreModel {
    nn::ModelParams params;
    NoiseSchedule schedule;
    Conditioning cond;

    static ScoreModel init(const Conditioning& cond, const NoiseSchedule& schedule, const NetShape& shape,
                           std::uint64_t seed) {
        schedule.validate();
        nn::Architecture a;
        a.role = nn::Role::score;
        a.in_dim = cond.input_dim();
        a.out_dim = cond.dim;
        a.hidden_dim = shape.hidden_dim;
        a.n_layers = shape.n_layers;
        a.residual = true;
        return {nn::init_params(a, seed), schedule, cond};
    }

    /// Noise prediction eps_hat(y, sigma[, j]) through a bound network.
    Var predict_eps(const nn::Net& net, const Var& y, const Vector& sigma, const std::vector<int>* cluster) const {
        return net(cond.input(y, sigma, cluster));
    }

    Matrix predict_eps(const Matrix& y, const Vector& sigma, const std::vector<int>* cluster = nullptr) const {
        ad::NoGrad guard;
        return predict_eps(nn::Net::frozen(params), ad::constant(y), sigma, cluster).value();
    }

    Matrix score(const Matrix& y, double sigma, const std::vector<int>* cluster = nullptr) const;
};

/// -eps_pred / sigma.
inline Matrix score_from_eps(const Matrix& eps_pred, double sigma) {
    require(sigma > 0.0, ErrorCode::invalid_argument, "score_from_eps: sigma must be positive");
    return -eps_pred / sigma;
}

inline Matrix ScoreModel::score(const Matrix& y, double sigma, const std::vector<int>* cluster) const {
    return score_from_eps(predict_eps(y, Vector::Constant(y.rows(), sigma), cluster), sigma);
}

struct EnergyModel {
    nn::ModelParams params;
    NoiseSchedule schedule;
    Conditioning cond;

    static EnergyModel init(const Conditioning& cond, const NoiseSchedule& schedule, const NetShape& shape,
                            std::uint64_t seed) {
        schedule.validate();
        nn::Architecture a;
        a.role = nn::Role::energy;
        a.in_dim = cond.input_dim();
        a.out_dim = cond.dim;
        a.hidden_dim = shape.hidden_dim;
        a.n_layers = shape.n_layers;
        a.residual = true;
        return {nn::init_params(a, seed), schedule, cond};
    }

    /// E(y, sigma) = <E_net(y, sigma), y> / sigma as a B x 1 column.
    Var energy(const nn::Net& net, const Var& y, const Vector& sigma, const std::vector<int>* cluster) const {
        Var inner = ad::row_sum(ad::mul(net(cond.input(y, sigma, cluster)), y));
        return ad::mul_col(inner, ad::constant(sigma.cwiseInverse()));
    }
};

/// Energies at one noise scale (the downstream value uses sigma_min).
inline Vector energy_at(const EnergyModel& model, const Matrix& x, double sigma, const std::vector<int>* cluster = nullptr) {
    ad::NoGrad guard;
    Var e = model.energy(nn::Net::frozen(model.params), ad::constant(x), Vector::Constant(x.rows(), sigma), cluster);
    return e.value().col(0);
}

inline Vector energy_at(const EnergyModel& model, const Matrix& x, double sigma, int cluster) {
    const std::vector<int> ids(static_cast<std::size_t>(x.rows()), cluster);
    return energy_at(model, x, sigma, &ids);
}

/// Input gradient of the energy, one row per point.
inline Matrix energy_gradient(const EnergyModel& model, const Matrix& x, double sigma,
                              const std::vector<int>* cluster = nullptr) {
    Var y = ad::variable(x);
    Var e = model.energy(nn::Net::frozen(model.params), y, Vector::Constant(x.rows(), sigma), cluster);
    return ad::grad(ad::sum(e), {y})[0].value();
}

// ---------------------------------------------------------------------------
// Noised minibatches

/// Every sample paired with every noise scale: row s * B + b holds sample b at scale s.
struct NoisyBatch {
    Eigen::Index batch = 0;
    Matrix eps;   // (m B) x d
    Matrix y;     // (m B) x d
    Vector sigma; // m B
    std::vector<int> cluster;

    const std::vector<int>* cluster_ptr() const { return cluster.empty() ? nullptr : &cluster; }
};

/**
 * Draws one eps ~ N(0, I) per (sample, scale). With `keys`, each sample's noise comes
 * from its own stream derived from (seed, key), so the batch is order-independent.
 */
inline NoisyBatch make_noisy_batch(const Matrix& x, const NoiseSchedule& schedule, std::uint64_t seed,
                                   const std::vector<int>* cluster = nullptr,
                                   const std::vector<std::uint64_t>* keys = nullptr) {
    const Eigen::Index b = x.rows();
    const Eigen::Index d = x.cols();
    const auto m = static_cast<Eigen::Index>(schedule.sigmas.size());
    NoisyBatch nb;
    nb.batch = b;
    nb.eps.resize(m * b, d);
    Rng shared(seed);
    for (Eigen::Index i = 0; i < b; ++i) {
        if (keys) {
            Rng own(derive_seed(seed, (*keys)[static_cast<std::size_t>(i)]));
            for (Eigen::Index s = 0; s < m; ++s) nb.eps.row(s * b + i) = standard_normal(1, d, own);
        } else {
            for (Eigen::Index s = 0; s < m; ++s) nb.eps.row(s * b + i) = standard_normal(1, d, shared);
        }
    }
    nb.y.resize(m * b, d);
    nb.sigma.resize(m * b);
    for (Eigen::Index s = 0; s < m; ++s) {
        const double sg = schedule.sigmas[static_cast<std::size_t>(s)];
        nb.y.middleRows(s * b, b) = x + sg * nb.eps.middleRows(s * b, b);
        nb.sigma.segment(s * b, b).setConstant(sg);
        if (cluster) nb.cluster.insert(nb.cluster.end(), cluster->begin(), cluster->end());
    }
    return nb;
}

// ---------------------------------------------------------------------------
// Losses

/// Sum over noise scales, mean over the batch, of ||eps_hat - eps / beta||^2.
inline Var dsm_loss(const nn::Net& net, const ScoreModel& model, const NoisyBatch& nb, double beta) {
    require(beta > 0.0, ErrorCode::invalid_argument, "dsm_loss: beta must be positive");
    Var pred = model.predict_eps(net, ad::constant(nb.y), nb.sigma, nb.cluster_ptr());
    Var resid = ad::sub(pred, ad::constant(nb.eps / beta));
    return ad::scale(ad::sum(ad::square(resid)), 1.0 / static_cast<double>(nb.batch));
}

inline double dsm_loss(const ScoreModel& model, const Matrix& x, double beta, std::uint64_t seed,
                       const std::vector<int>* cluster = nullptr) {
    ad::NoGrad guard;
    NoisyBatch nb = make_noisy_batch(x, model.schedule, seed, cluster);
    return dsm_loss(nn::Net::frozen(model.params), model, nb, beta).item();
}

/**
 * Sum over noise scales, mean over the batch, of ||sigma grad E(y) - eps_hat(y)||^2, the
 * sigma^2-weighted form of ||grad E + s||^2. The score network's output is detached.
 */
inline Var energy_match_loss(const nn::Net& energy_net, const EnergyModel& energy, const nn::Net& score_net,
                             const ScoreModel& score, const NoisyBatch& nb) {
    Var target;
    {
        Var eps_hat = score.predict_eps(score_net, ad::constant(nb.y), nb.sigma, nb.cluster_ptr());
        target = ad::constant(eps_hat.value());
    }
    Var y = ad::variable(nb.y);
    Var e = energy.energy(energy_net, y, nb.sigma, nb.cluster_ptr());
    Var grad_e = ad::grad(ad::sum(e), {y}, true)[0];
    Var resid = ad::sub(ad::mul_col(grad_e, ad::constant(nb.sigma)), target);
    return ad::scale(ad::sum(ad::square(resid)), 1.0 / static_cast<double>(nb.batch));
}

// ---------------------------------------------------------------------------
// Training

/// Where minibatches come from: points, sampling weights, optional cluster ids.
struct Sampler {
    const data::Dataset* dataset = nullptr;
    Vector weights;
    bool conditioned = false;

    Sampler(const data::Dataset& ds, Vector w, bool cluster_conditioned)
        : dataset(&ds), weights(std::move(w)), conditioned(cluster_conditioned) {
        require(weights.size() == ds.n(), ErrorCode::shape, "sampling weights must match the dataset");
        require(!conditioned || ds.cluster_id.has_value(), ErrorCode::prerequisite,
                "cluster-conditioned training needs cluster assignments");
    }

    std::pair<Matrix, std::vector<int>> draw(std::size_t batch, std::uint64_t seed) const {
        Rng rng(seed);
        const auto idx = DiscreteSampler(weights).sample(batch, rng);
        Matrix x(static_cast<Eigen::Index>(batch), dataset->d());
        std::vector<int> c;
        for (std::size_t i = 0; i < batch; ++i) {
            x.row(static_cast<Eigen::Index>(i)) = dataset->points.row(static_cast<Eigen::Index>(idx[i]));
            if (conditioned) c.push_back((*dataset->cluster_id)[idx[i]]);
        }
        return {std::move(x), std::move(c)};
    }
};

enum Stream : std::uint64_t { batch_stream = 1, noise_stream = 2 };

inline nn::TrainResult train_score(const ScoreModel& model, const Sampler& sampler, double beta,
                                   const nn::TrainConfig& cfg, std::uint64_t seed, const std::string& stage = "score") {
    return nn::fit(
        model.params, cfg,
        [&](const nn::Net& net, long step) {
            const auto s = static_cast<std::uint64_t>(step);
            auto [x, c] = sampler.draw(cfg.batch_size, derive_seed(derive_seed(seed, batch_stream), s));
            NoisyBatch nb = make_noisy_batch(x, model.schedule, derive_seed(derive_seed(seed, noise_stream), s),
                                             sampler.conditioned ? &c : nullptr);
            return dsm_loss(net, model, nb, beta);
        },
        stage);
}

inline nn::TrainResult train_energy(const EnergyModel& energy, const ScoreModel& frozen_score, const Sampler& sampler,
                                    const nn::TrainConfig& cfg, std::uint64_t seed,
                                    const std::string& stage = "energy") {
    require(energy.cond.dim == frozen_score.cond.dim && energy.cond.cluster_conditioned == frozen_score.cond.cluster_conditioned,
            ErrorCode::shape, stage + ": energy and score conditioning differ");
    const nn::Net score_net = nn::Net::frozen(frozen_score.params);
    return nn::fit(
        energy.params, cfg,
        [&](const nn::Net& net, long step) {
            const auto s = static_cast<std::uint64_t>(step);
            auto [x, c] = sampler.draw(cfg.batch_size, derive_seed(derive_seed(seed, batch_stream), s));
            NoisyBatch nb = make_noisy_batch(x, energy.schedule, derive_seed(derive_seed(seed, noise_stream), s),
                                             sampler.conditioned ? &c : nullptr);
            return energy_match_loss(net, energy, score_net, frozen_score, nb);
        },
        stage);
}

} // namespace eggfm::score
