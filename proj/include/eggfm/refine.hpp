#pragma once

/**
 * @file refine.hpp
 *
 * @brief Iterative density refinement: self-normalized importance weights,
 * density annealing across a temperature ladder, and stratified per-cluster training.
 */

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "eggfm/data.hpp"
#include "eggfm/error.hpp"
#include "eggfm/io.hpp"
#include "eggfm/random.hpp"
#include "eggfm/score_energy.hpp"
#include "eggfm/train.hpp"

namespace eggfm::refine {

using score::Matrix;
using score::Var;
using score::Vector;

enum class DistillNorm { l1, l2 };

/// Scale applied to the previous step's prediction in the distillation term.
enum class DistillRatio {
    /// beta_{k-1} / beta_k, the factor by which the tempered target shrinks.
    inverse,
    /// beta_k / beta_{k-1}, literally as in the loss display.
    as_printed,
};

struct RefineConfig {
    int steps = 2; // K
    double beta_w = 0.3;
    double alpha = 1.0;
    double beta_min = 1.0;
    double beta_max = 1.0;
    double q_lo = 0.05;
    double q_hi = 0.98;
    DistillNorm distill_norm = DistillNorm::l1;
    DistillRatio distill_ratio = DistillRatio::inverse;
    /// With J > 1, train an unconditional score and energy on the final weights.
    bool global_pass = true;

    void validate() const {
        require(steps >= 1, ErrorCode::config, "refine: K must be >= 1");
        require(alpha >= 0.0 && alpha <= 1.0, ErrorCode::config, "refine: alpha must be in [0, 1]");
        require(0.0 <= q_lo && q_lo < q_hi && q_hi <= 1.0, ErrorCode::config, "refine: need 0 <= q_lo < q_hi <= 1");
        require(beta_min > 0.0 && beta_max > 0.0, ErrorCode::config, "refine: temperatures must be positive");
        require(std::isfinite(beta_w), ErrorCode::config, "refine: beta_w must be finite");
    }

    /// beta_k for k = 1..K, linear from beta_min to beta_max.
    double beta(int k) const {
        require(k >= 1 && k <= steps, ErrorCode::invalid_argument, "refine: step index out of range");
        if (steps == 1) return beta_min;
        return beta_min + (beta_max - beta_min) * static_cast<double>(k - 1) / (steps - 1);
    }

    double distill_ratio_value(double beta_k, double beta_prev) const {
        return distill_ratio == DistillRatio::inverse ? beta_prev / beta_k : beta_k / beta_prev;
    }
};

/// Linear-interpolated empirical quantile (type 7).
inline double quantile(std::vector<double> v, double q) {
    require(!v.empty(), ErrorCode::invalid_argument, "quantile of an empty sample");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double quantile(const Vector& v, double q) { return quantile(std::vector<double>(v.data(), v.data() + v.size()), q); }

struct SnisWeights {
    Vector w;                 // per point, sums to 1
    Vector r;                 // unnormalized ratios exp(beta_w * (clip E - max clip E in cluster))
    std::vector<int> cluster; // per point
    int num_clusters = 1;
    Vector normalizer;        // R_j
    Vector clip_lo;           // per-cluster energy window
    Vector clip_hi;
    double beta_w = 0.0;

    Eigen::Index n() const { return w.size(); }
    double ess() const { return 1.0 / w.squaredNorm(); }

    /// Importance weight W_j(i) = R_j / (J r_i).
    double importance(std::size_t i) const {
        return normalizer(cluster[i]) / (num_clusters * r(static_cast<Eigen::Index>(i)));
    }

    double cluster_total(int j) const {
        double s = 0.0;
        for (Eigen::Index i = 0; i < n(); ++i) {
            if (cluster[static_cast<std::size_t>(i)] == j) s += w(i);
        }
        return s;
    }
};

inline std::vector<int> cluster_ids_or_zero(const data::Dataset& ds) {
    return ds.cluster_id ? *ds.cluster_id : std::vector<int>(static_cast<std::size_t>(ds.n()), 0);
}

/**
 * Weights from per-point energies: within cluster j, clip E to its [q_lo, q_hi]
 * quantile window, r_i = exp(beta_w clip E_i), and w_i = r_i / (J R_j) so every
 * cluster totals 1/J.
 */
inline SnisWeights snis_from_energies(const Vector& energy, const std::vector<int>& cluster, int num_clusters,
                                      double beta_w, double q_lo, double q_hi) {
    const Eigen::Index n = energy.size();
    require(static_cast<Eigen::Index>(cluster.size()) == n, ErrorCode::shape, "snis: one cluster id per energy");
    require(num_clusters >= 1, ErrorCode::invalid_argument, "snis: J must be >= 1");
    require(energy.allFinite(), ErrorCode::divergence, "snis: non-finite energies");
    SnisWeights s;
    s.cluster = cluster;
    s.num_clusters = num_clusters;
    s.beta_w = beta_w;
    s.r.resize(n);
    s.w.resize(n);
    s.normalizer = Vector::Zero(num_clusters);
    s.clip_lo.resize(num_clusters);
    s.clip_hi.resize(num_clusters);
    std::vector<std::vector<Eigen::Index>> members(static_cast<std::size_t>(num_clusters));
    for (Eigen::Index i = 0; i < n; ++i) {
        const int c = cluster[static_cast<std::size_t>(i)];
        require(c >= 0 && c < num_clusters, ErrorCode::invalid_argument, "snis: cluster id out of range");
        members[static_cast<std::size_t>(c)].push_back(i);
    }
    for (int j = 0; j < num_clusters; ++j) {
        const auto& idx = members[static_cast<std::size_t>(j)];
        require(!idx.empty(), ErrorCode::invalid_argument, "snis: cluster " + std::to_string(j) + " is empty");
        std::vector<double> e;
        for (auto i : idx) e.push_back(energy(i));
        const double lo = quantile(e, q_lo);
        const double hi = quantile(e, q_hi);
        s.clip_lo(j) = lo;
        s.clip_hi(j) = hi;
        // Shift by the window top before exponentiating; the shift cancels in R_j.
        for (auto i : idx) {
            const double clipped = std::clamp(energy(i), lo, hi);
            s.r(i) = std::exp(beta_w * (clipped - hi));
            s.normalizer(j) += s.r(i);
        }
        for (auto i : idx) s.w(i) = s.r(i) / (num_clusters * s.normalizer(j));
    }
    s.w /= s.w.sum();
    return s;
}

/// Uniform within each cluster, each cluster carrying total mass 1/J (beta_w = 0).
inline SnisWeights stratified_uniform(const std::vector<int>& cluster, int num_clusters) {
    return snis_from_energies(Vector::Zero(static_cast<Eigen::Index>(cluster.size())), cluster, num_clusters, 0.0, 0.0, 1.0);
}

/// Energies at sigma_min (cluster-conditioned when the model is) of every point.
inline Vector dataset_energies(const data::Dataset& ds, const score::EnergyModel& energy) {
    const std::vector<int> cl = cluster_ids_or_zero(ds);
    return score::energy_at(energy, ds.points, energy.schedule.min(),
                            energy.cond.cluster_conditioned ? &cl : nullptr);
}

inline SnisWeights snis_weights(const data::Dataset& ds, const score::EnergyModel& energy, const RefineConfig& cfg) {
    return snis_from_energies(dataset_energies(ds, energy), cluster_ids_or_zero(ds), ds.num_clusters(), cfg.beta_w,
                              cfg.q_lo, cfg.q_hi);
}

/**
 * Stratified SNIS estimate of E_{p*}[g] from draws of point indices:
 * per-cluster self-normalized means with W_j(i) = R_j / (J r_i), averaged over clusters.
 */
inline double snis_estimate(const Vector& g, const std::vector<std::size_t>& draws, const SnisWeights& s) {
    require(g.size() == s.n(), ErrorCode::shape, "snis_estimate: one value per point");
    Vector num = Vector::Zero(s.num_clusters);
    Vector den = Vector::Zero(s.num_clusters);
    for (std::size_t i : draws) {
        require(i < static_cast<std::size_t>(s.n()), ErrorCode::invalid_argument, "snis_estimate: index out of range");
        const int c = s.cluster[i];
        const double wt = s.importance(i);
        num(c) += wt * g(static_cast<Eigen::Index>(i));
        den(c) += wt;
    }
    double total = 0.0;
    for (int j = 0; j < s.num_clusters; ++j) {
        require(den(j) > 0.0, ErrorCode::invalid_argument, "snis_estimate: no draws from cluster " + std::to_string(j));
        total += num(j) / den(j);
    }
    return total / s.num_clusters;
}

/// Every point drawn once.
inline double snis_estimate(const Vector& g, const SnisWeights& s) {
    std::vector<std::size_t> all(static_cast<std::size_t>(s.n()));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return snis_estimate(g, all, s);
}

// ---------------------------------------------------------------------------
// Weights file

inline constexpr std::string_view weights_magic = "EGGFMWT1";

struct WeightsFile {
    int step = 1;
    double beta_k = 1.0;
    SnisWeights weights;
};

inline std::string encode_weights(const WeightsFile& f) {
    const auto& s = f.weights;
    auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    io::json header = {{"step", f.step},
                       {"beta_k", f.beta_k},
                       {"beta_w", s.beta_w},
                       {"n", s.n()},
                       {"num_clusters", s.num_clusters},
                       {"clip_lo", vec(s.clip_lo)},
                       {"clip_hi", vec(s.clip_hi)},
                       {"normalizer", vec(s.normalizer)},
                       {"payload", "w, r, cluster (f64 each)"}};
    std::vector<double> payload = vec(s.w);
    payload.insert(payload.end(), s.r.data(), s.r.data() + s.r.size());
    for (int c : s.cluster) payload.push_back(c);
    return io::encode_framed(weights_magic, header, payload);
}

inline WeightsFile decode_weights(std::string_view bytes, const std::string& what = "weights") {
    io::Framed fr = io::decode_framed(bytes, weights_magic, what);
    WeightsFile f;
    try {
        const auto n = fr.header.at("n").get<Eigen::Index>();
        f.step = fr.header.at("step").get<int>();
        f.beta_k = fr.header.at("beta_k").get<double>();
        auto& s = f.weights;
        s.beta_w = fr.header.at("beta_w").get<double>();
        s.num_clusters = fr.header.at("num_clusters").get<int>();
        auto vec = [&](const char* key) {
            auto v = fr.header.at(key).get<std::vector<double>>();
            return Vector(Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
        };
        s.clip_lo = vec("clip_lo");
        s.clip_hi = vec("clip_hi");
        s.normalizer = vec("normalizer");
        require(fr.payload.size() == static_cast<std::size_t>(3 * n), ErrorCode::format, what + ": payload size mismatch");
        s.w = Eigen::Map<Vector>(fr.payload.data(), n);
        s.r = Eigen::Map<Vector>(fr.payload.data() + n, n);
        for (Eigen::Index i = 0; i < n; ++i) s.cluster.push_back(static_cast<int>(fr.payload[static_cast<std::size_t>(2 * n + i)]));
    } catch (const io::json::exception& e) {
        fail(ErrorCode::format, what + ": bad header (" + e.what() + ")");
    }
    return f;
}

// ---------------------------------------------------------------------------
// Density annealing

/**
 * alpha * DSM at beta_k + (1 - alpha) * distillation toward the scaled previous-step
 * prediction, both in noise-prediction units. Distillation is the per-coordinate
 * absolute deviation summed over coordinates (l1) or its square (l2), summed over
 * scales and averaged over the batch.
 */
inline Var anneal_loss(const nn::Net& net, const score::ScoreModel& model, const nn::Net& prev_net,
                       const score::ScoreModel& prev_model, const score::NoisyBatch& nb, double beta_k,
                       double beta_prev, double alpha, const RefineConfig& cfg) {
    require(beta_prev > 0.0, ErrorCode::invalid_argument, "anneal_loss: beta_{k-1} must be positive");
    Var pred = model.predict_eps(net, ad::constant(nb.y), nb.sigma, nb.cluster_ptr());
    const double inv_b = 1.0 / static_cast<double>(nb.batch);
    Var dsm = ad::scale(ad::sum(ad::square(ad::sub(pred, ad::constant(nb.eps / beta_k)))), inv_b);
    if (alpha == 1.0) return dsm;
    Matrix prev = prev_model.predict_eps(prev_net, ad::constant(nb.y), nb.sigma, nb.cluster_ptr()).value();
    Var dev = ad::sub(pred, ad::constant(cfg.distill_ratio_value(beta_k, beta_prev) * prev));
    Var pen = cfg.distill_norm == DistillNorm::l1 ? ad::abs(dev) : ad::square(dev);
    Var distill = ad::scale(ad::sum(pen), inv_b);
    if (alpha == 0.0) return distill;
    return ad::add(ad::scale(dsm, alpha), ad::scale(distill, 1.0 - alpha));
}

// ---------------------------------------------------------------------------
// Pipeline

struct ModelSetup {
    score::Conditioning cond;
    score::NoiseSchedule schedule;
    score::NetShape score_shape;
    score::NetShape energy_shape;
    nn::TrainConfig score_train;
    nn::TrainConfig energy_train;
};

struct StepArtifacts {
    int step = 1; // k; K + 1 labels the global pass
    double beta = 1.0;
    score::ScoreModel score;
    score::EnergyModel energy;
    SnisWeights weights;
    nn::TrainResult score_fit;
    nn::TrainResult energy_fit;
};

struct RefineResult {
    score::ScoreModel score;   // model the metric is built from
    score::EnergyModel energy;
    SnisWeights weights;       // final combined weights
    std::vector<StepArtifacts> steps;
};

/// Models and weights carried between refinement steps.
struct RefineState {
    score::ScoreModel score;
    score::EnergyModel energy;
    SnisWeights weights; // weights the next step trains on
    int completed = 0;   // refinement steps finished
};

inline ModelSetup conditioned_setup(const data::Dataset& ds, ModelSetup setup) {
    setup.cond.dim = static_cast<int>(ds.d());
    setup.cond.cluster_conditioned = ds.num_clusters() > 1;
    return setup;
}

/// Fresh networks and stratified-uniform weights.
inline RefineState init_refine(const data::Dataset& ds, const ModelSetup& setup_in, std::uint64_t seed) {
    const ModelSetup setup = conditioned_setup(ds, setup_in);
    const int J = ds.num_clusters();
    return {score::ScoreModel::init(setup.cond, setup.schedule, setup.score_shape, derive_seed(seed, 101)),
            score::EnergyModel::init(setup.cond, setup.schedule, setup.energy_shape, derive_seed(seed, 102)),
            stratified_uniform(cluster_ids_or_zero(ds), J), 0};
}

/// Score half of step k = completed + 1: plain DSM at k = 1, the annealing loss afterwards.
inline nn::TrainResult refine_score_step(RefineState& st, const data::Dataset& ds, const RefineConfig& cfg,
                                         const ModelSetup& setup, std::uint64_t seed) {
    cfg.validate();
    const int k = st.completed + 1;
    require(k <= cfg.steps, ErrorCode::invalid_argument, "refine: all " + std::to_string(cfg.steps) + " steps are done");
    const std::string stage = "refine step " + std::to_string(k) + " score";
    const double beta_k = cfg.beta(k);
    const score::Sampler sampler(ds, st.weights.w, ds.num_clusters() > 1);
    const std::uint64_t s1 = derive_seed(derive_seed(seed, static_cast<std::uint64_t>(k)), 1);
    nn::TrainResult fit;
    if (k == 1) {
        fit = score::train_score(st.score, sampler, beta_k, setup.score_train, s1, stage);
    } else {
        const double beta_prev = cfg.beta(k - 1);
        const score::ScoreModel prev = st.score;
        const nn::Net prev_net = nn::Net::frozen(prev.params);
        const auto& tc = setup.score_train;
        fit = nn::fit(
            prev.params, tc,
            [&](const nn::Net& net, long step) {
                const auto t = static_cast<std::uint64_t>(step);
                auto [x, c] = sampler.draw(tc.batch_size, derive_seed(derive_seed(s1, score::batch_stream), t));
                auto nb = score::make_noisy_batch(x, prev.schedule, derive_seed(derive_seed(s1, score::noise_stream), t),
                                                  sampler.conditioned ? &c : nullptr);
                return anneal_loss(net, prev, prev_net, prev, nb, beta_k, beta_prev, cfg.alpha, cfg);
            },
            stage);
    }
    st.score.params = fit.params;
    return fit;
}

/// Energy half of step k: distill from the step-k score, then recompute weights from raw data.
inline nn::TrainResult refine_energy_step(RefineState& st, const data::Dataset& ds, const RefineConfig& cfg,
                                          const ModelSetup& setup, std::uint64_t seed) {
    const int k = st.completed + 1;
    const score::Sampler sampler(ds, st.weights.w, ds.num_clusters() > 1);
    const std::uint64_t s2 = derive_seed(derive_seed(seed, static_cast<std::uint64_t>(k)), 2);
    nn::TrainResult fit = score::train_energy(st.energy, st.score, sampler, setup.energy_train, s2,
                                              "refine step " + std::to_string(k) + " energy");
    st.energy.params = fit.params;
    st.weights = snis_weights(ds, st.energy, cfg);
    st.completed = k;
    return fit;
}

/// Unconditional score and energy trained on the combined weights (used when J > 1).
inline StepArtifacts refine_global_pass(const RefineState& st, const data::Dataset& ds, const RefineConfig& cfg,
                                        const ModelSetup& setup_in, std::uint64_t seed) {
    const ModelSetup setup = conditioned_setup(ds, setup_in);
    const std::string stage = "refine global pass";
    score::Conditioning flat = setup.cond;
    flat.cluster_conditioned = false;
    const double beta_k = cfg.beta(cfg.steps);
    const score::Sampler sampler(ds, st.weights.w, false);
    const std::uint64_t gseed = derive_seed(seed, 1000);
    StepArtifacts art;
    art.step = cfg.steps + 1;
    art.beta = beta_k;
    art.score = score::ScoreModel::init(flat, setup.schedule, setup.score_shape, derive_seed(gseed, 1));
    art.score_fit = score::train_score(art.score, sampler, beta_k, setup.score_train, derive_seed(gseed, 2), stage + " score");
    art.score.params = art.score_fit.params;
    art.energy = score::EnergyModel::init(flat, setup.schedule, setup.energy_shape, derive_seed(gseed, 3));
    art.energy_fit = score::train_energy(art.energy, art.score, sampler, setup.energy_train, derive_seed(gseed, 4), stage + " energy");
    art.energy.params = art.energy_fit.params;
    art.weights = st.weights;
    return art;
}

/**
 * For k = 1..K: train the score on the current weights (k >= 2 anneals against step
 * k - 1), distill the energy, and recompute weights from raw data with the step-k
 * energy. With J > 1 the networks are cluster-conditioned; a final unconditional pass
 * on the combined weights provides the energy used downstream.
 */
inline RefineResult refine_pipeline(const data::Dataset& ds, const RefineConfig& cfg, const ModelSetup& setup,
                                    std::uint64_t seed,
                                    const std::function<void(const StepArtifacts&)>& on_step = nullptr) {
    cfg.validate();
    RefineResult out;
    RefineState st = init_refine(ds, setup, seed);
    for (int k = 1; k <= cfg.steps; ++k) {
        StepArtifacts art;
        art.step = k;
        art.beta = cfg.beta(k);
        art.score_fit = refine_score_step(st, ds, cfg, setup, seed);
        art.energy_fit = refine_energy_step(st, ds, cfg, setup, seed);
        art.score = st.score;
        art.energy = st.energy;
        art.weights = st.weights;
        if (on_step) on_step(art);
        out.steps.push_back(std::move(art));
    }
    if (ds.num_clusters() > 1 && cfg.global_pass) {
        StepArtifacts art = refine_global_pass(st, ds, cfg, setup, seed);
        if (on_step) on_step(art);
        out.steps.push_back(std::move(art));
    }
    out.score = out.steps.back().score;
    out.energy = out.steps.back().energy;
    out.weights = st.weights;
    return out;
}

} // namespace eggfm::refine
