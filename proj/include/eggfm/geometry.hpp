#pragma once

/**
 * @file geometry.hpp
 *
 * @brief Energy-induced conformal metric and learned geodesic interpolants.
 *
 * G(x) = gamma + max(lambda * exp(clip(E(x)) - e_lo), floor), where clip restricts E
 * to the [e_lo, e_hi] quantile window of the training energies and floor is a lower
 * quantile of lambda * exp(clip(E) - e_lo) over the same data. Paths are
 * x_t = (1 - t) x0 + t x1 + t (1 - t) psi(x0, x1, t) + sigma_flow * eps.
 */

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "eggfm/autodiff.hpp"
#include "eggfm/error.hpp"
#include "eggfm/io.hpp"
#include "eggfm/nn.hpp"
#include "eggfm/random.hpp"
#include "eggfm/refine.hpp"
#include "eggfm/score_energy.hpp"
#include "eggfm/train.hpp"

namespace eggfm::geometry {

using ad::Matrix;
using ad::Var;
using Vector = Eigen::VectorXd;

/// Which quantity the metric's lower quantile floors.
enum class FloorMode { lambda_exp, energy };

struct MetricParams {
    double gamma = 0.2;
    double lambda = 10.0;
    double q_lo = 0.05;
    double q_hi = 0.98;
    double q_metric = 0.05;
    FloorMode floor_mode = FloorMode::lambda_exp;

    void validate() const {
        require(gamma > 0.0, ErrorCode::config, "metric: gamma must be positive");
        require(lambda >= 0.0, ErrorCode::config, "metric: lambda must be non-negative");
        require(0.0 <= q_lo && q_lo < q_hi && q_hi <= 1.0, ErrorCode::config, "metric: need 0 <= q_lo < q_hi <= 1");
        require(0.0 <= q_metric && q_metric <= 1.0, ErrorCode::config, "metric: q_metric must be in [0, 1]");
    }
};

struct MetricField {
    MetricParams params;
    std::optional<score::EnergyModel> energy; // absent for the constant metric
    double sigma = 0.01;                      // energy noise scale (sigma_min)
    double e_lo = 0.0;
    double e_hi = 0.0;
    double floor = 0.0; // in lambda*exp units, or an energy level for FloorMode::energy

    /// G = gamma + lambda everywhere, without an energy model.
    static MetricField constant(double gamma, double lambda = 0.0) {
        MetricField m;
        m.params.gamma = gamma;
        m.params.lambda = lambda;
        m.params.validate();
        return m;
    }

    bool is_constant() const { return !energy.has_value() || params.lambda == 0.0; }

    /// G(x) as a B x 1 column, differentiable in x.
    Var metric(const Var& x) const {
        if (is_constant()) {
            const double g = params.gamma + (energy ? 0.0 : params.lambda);
            return ad::constant(Matrix::Constant(x.rows(), 1, g));
        }
        const Vector sig = Vector::Constant(x.rows(), sigma);
        Var e = energy->energy(nn::Net::frozen(energy->params), x, sig, nullptr);
        if (params.floor_mode == FloorMode::lambda_exp) {
            Var m = ad::scale(ad::exp(ad::add_scalar(ad::clamp(e, e_lo, e_hi), -e_lo)), params.lambda);
            m = ad::clamp(m, floor, std::numeric_limits<double>::infinity());
            return ad::add_scalar(m, params.gamma);
        }
        Var c = ad::clamp(e, std::max(e_lo, floor), std::max(e_hi, floor));
        return ad::add_scalar(ad::scale(ad::exp(ad::add_scalar(c, -e_lo)), params.lambda), params.gamma);
    }

    Vector at(const Matrix& x) const {
        ad::NoGrad guard;
        return metric(ad::constant(x)).value().col(0);
    }

    Vector energies(const Matrix& x) const {
        require(energy.has_value(), ErrorCode::prerequisite, "metric has no energy model");
        return score::energy_at(*energy, x, sigma);
    }
};

/// Caches the clip window and floor from the training points.
inline MetricField fit_metric(const score::EnergyModel& energy, const Matrix& train_points, const MetricParams& params) {
    params.validate();
    require(!energy.cond.cluster_conditioned, ErrorCode::invalid_argument,
            "metric needs an unconditional energy (use the global pass)");
    MetricField m;
    m.params = params;
    m.energy = energy;
    m.sigma = energy.schedule.min();
    const Vector e = score::energy_at(energy, train_points, m.sigma);
    require(e.allFinite(), ErrorCode::divergence, "metric: non-finite training energies");
    m.e_lo = refine::quantile(e, params.q_lo);
    m.e_hi = refine::quantile(e, params.q_hi);
    if (params.floor_mode == FloorMode::lambda_exp) {
        Vector lam(e.size());
        for (Eigen::Index i = 0; i < e.size(); ++i) lam(i) = params.lambda * std::exp(std::clamp(e(i), m.e_lo, m.e_hi) - m.e_lo);
        m.floor = refine::quantile(lam, params.q_metric);
    } else {
        m.floor = refine::quantile(e, params.q_metric);
    }
    return m;
}

inline std::string to_string(FloorMode f) { return f == FloorMode::lambda_exp ? "lambda_exp" : "energy"; }

inline FloorMode floor_mode_from_string(const std::string& s) {
    if (s == "lambda_exp") return FloorMode::lambda_exp;
    if (s == "energy") return FloorMode::energy;
    fail(ErrorCode::config, "unknown metric floor mode '" + s + "'");
}

/// JSON sidecar stored beside the energy checkpoint.
inline io::json metric_sidecar(const MetricField& m) {
    return {{"gamma", m.params.gamma},   {"lambda", m.params.lambda},   {"q_lo", m.params.q_lo},
            {"q_hi", m.params.q_hi},     {"q_metric", m.params.q_metric}, {"floor_mode", to_string(m.params.floor_mode)},
            {"sigma", m.sigma},          {"e_lo", m.e_lo},              {"e_hi", m.e_hi},
            {"floor", m.floor},          {"has_energy", m.energy.has_value()}};
}

inline MetricField metric_from_sidecar(const io::json& j, std::optional<score::EnergyModel> energy) {
    MetricField m;
    try {
        m.params.gamma = j.at("gamma").get<double>();
        m.params.lambda = j.at("lambda").get<double>();
        m.params.q_lo = j.at("q_lo").get<double>();
        m.params.q_hi = j.at("q_hi").get<double>();
        m.params.q_metric = j.at("q_metric").get<double>();
        m.params.floor_mode = floor_mode_from_string(j.at("floor_mode").get<std::string>());
        m.sigma = j.at("sigma").get<double>();
        m.e_lo = j.at("e_lo").get<double>();
        m.e_hi = j.at("e_hi").get<double>();
        m.floor = j.at("floor").get<double>();
        if (j.at("has_energy").get<bool>()) {
            require(energy.has_value(), ErrorCode::prerequisite, "metric sidecar needs its energy checkpoint");
            m.energy = std::move(energy);
        }
    } catch (const io::json::exception& e) {
        fail(ErrorCode::format, std::string("metric sidecar: ") + e.what());
    }
    return m;
}

// ---------------------------------------------------------------------------
// Geodesic interpolant

struct GeodesicModel {
    nn::ModelParams params;
    int dim = 2;
    int n_freq = 32;

    nn::SinusoidalEmbedding time_embedding() const {
        return nn::SinusoidalEmbedding::for_input(nn::EmbeddingInput::time, n_freq);
    }

    /// psi starts at zero, so the initial path is the straight chord.
    static GeodesicModel init(int dim, int n_freq, int hidden_dim, int n_layers, std::uint64_t seed) {
        nn::Architecture a;
        a.role = nn::Role::geodesic;
        a.in_dim = 2 * dim + 2 * n_freq;
        a.out_dim = dim;
        a.hidden_dim = hidden_dim;
        a.n_layers = n_layers;
        a.zero_output = true;
        return {nn::init_params(a, seed), dim, n_freq};
    }
};

/// Time embedding of a column t and its derivative d/dt.
inline std::pair<Matrix, Matrix> embed_time(const nn::SinusoidalEmbedding& emb, const Vector& t) {
    const Matrix f = emb.frequencies();
    const Matrix phase = t * f;
    Matrix e(t.size(), 2 * f.cols());
    Matrix de(t.size(), 2 * f.cols());
    e << phase.array().sin().matrix(), phase.array().cos().matrix();
    de << (phase.array().cos().rowwise() * f.row(0).array()).matrix(),
        (-(phase.array().sin().rowwise() * f.row(0).array())).matrix();
    return {e, de};
}

struct PathEval {
    Var x_t;
    Var velocity;
    Var psi;
};

/**
 * x_t and its time derivative (x1 - x0) + (1 - 2t) psi + t (1 - t) dpsi/dt, with
 * dpsi/dt from a forward-mode pass through the time embedding. eps is held fixed.
 */
inline PathEval path(const nn::Net& net, const GeodesicModel& model, const Matrix& x0, const Matrix& x1,
                     const Vector& t, const Matrix* eps = nullptr, double sigma_flow = 0.0) {
    const Eigen::Index b = x0.rows();
    require(x1.rows() == b && t.size() == b, ErrorCode::shape, "path: x0, x1 and t must have the same rows");
    require(x0.cols() == model.dim && x1.cols() == model.dim, ErrorCode::shape, "path: point dimension mismatch");
    auto [e, de] = embed_time(model.time_embedding(), t);
    Matrix u(b, 2 * model.dim + e.cols());
    u << x0, x1, e;
    Matrix du = Matrix::Zero(b, u.cols());
    du.rightCols(de.cols()) = de;
    auto [psi, dpsi] = net.jvp(ad::constant(std::move(u)), ad::constant(std::move(du)));

    const Vector a = t.array() * (1.0 - t.array());
    Matrix line = x0 + t.asDiagonal() * (x1 - x0);
    if (eps && sigma_flow != 0.0) line += sigma_flow * *eps;
    Var x_t = ad::add(ad::constant(line), ad::mul_col(psi, ad::constant(a)));
    Var vel = ad::add(ad::constant(x1 - x0),
                      ad::add(ad::mul_col(psi, ad::constant((1.0 - 2.0 * t.array()).matrix())), ad::mul_col(dpsi, ad::constant(a))));
    return {x_t, vel, psi};
}

inline Matrix path_point(const GeodesicModel& model, const Matrix& x0, const Matrix& x1, const Vector& t,
                         const Matrix* eps = nullptr, double sigma_flow = 0.0) {
    ad::NoGrad guard;
    return path(nn::Net::frozen(model.params), model, x0, x1, t, eps, sigma_flow).x_t.value();
}

inline Matrix path_velocity(const GeodesicModel& model, const Matrix& x0, const Matrix& x1, const Vector& t) {
    ad::NoGrad guard;
    return path(nn::Net::frozen(model.params), model, x0, x1, t).velocity.value();
}

/// Mean over rows of G(x_t) ||xdot_t||^2.
inline Var geodesic_loss(const nn::Net& net, const GeodesicModel& model, const MetricField& metric, const Matrix& x0,
                         const Matrix& x1, const Vector& t, const Matrix& eps, double sigma_flow) {
    PathEval p = path(net, model, x0, x1, t, &eps, sigma_flow);
    Var speed2 = ad::row_sum(ad::square(p.velocity));
    return ad::mean(ad::mul(metric.metric(p.x_t), speed2));
}

/// Draws (x0, x1) minibatches; the seed fully determines the draw.
using PairSampler = std::function<std::pair<Matrix, Matrix>(std::size_t, std::uint64_t)>;

/// Independent uniform draws from two point sets (product coupling).
inline PairSampler product_pairs(Matrix p0, Matrix p1) {
    require(p0.rows() > 0 && p1.rows() > 0, ErrorCode::invalid_argument, "product_pairs: empty marginal");
    return [p0 = std::move(p0), p1 = std::move(p1)](std::size_t batch, std::uint64_t seed) {
        Rng rng(seed);
        std::uniform_int_distribution<Eigen::Index> i0(0, p0.rows() - 1);
        std::uniform_int_distribution<Eigen::Index> i1(0, p1.rows() - 1);
        Matrix a(static_cast<Eigen::Index>(batch), p0.cols());
        Matrix b(static_cast<Eigen::Index>(batch), p1.cols());
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
            a.row(r) = p0.row(i0(rng));
            b.row(r) = p1.row(i1(rng));
        }
        return std::pair{a, b};
    };
}

/// One training draw: pairs, uniform times and path noise.
struct PathBatch {
    Matrix x0;
    Matrix x1;
    Vector t;
    Matrix eps;
};

inline PathBatch draw_path_batch(const PairSampler& pairs, std::size_t batch, std::uint64_t seed) {
    PathBatch pb;
    std::tie(pb.x0, pb.x1) = pairs(batch, derive_seed(seed, 1));
    Rng rng(derive_seed(seed, 2));
    pb.t = uniform_column(pb.x0.rows(), rng);
    pb.eps = standard_normal(pb.x0.rows(), pb.x0.cols(), rng);
    return pb;
}

inline nn::TrainResult train_geodesic(const GeodesicModel& model, const MetricField& metric, const PairSampler& pairs,
                                      const nn::TrainConfig& cfg, double sigma_flow, std::uint64_t seed) {
    return nn::fit(
        model.params, cfg,
        [&](const nn::Net& net, long step) {
            PathBatch pb = draw_path_batch(pairs, cfg.batch_size, derive_seed(seed, static_cast<std::uint64_t>(step)));
            return geodesic_loss(net, model, metric, pb.x0, pb.x1, pb.t, pb.eps, sigma_flow);
        },
        "geodesic");
}

/// Integral of G along the noise-free path, int_0^1 G(x_t) ||xdot_t|| dt (midpoint rule).
inline Vector metric_line_integral(const std::function<std::pair<Matrix, Matrix>(const Vector&)>& point_and_velocity,
                                   const MetricField& metric, Eigen::Index rows, int n_t = 200) {
    Vector total = Vector::Zero(rows);
    for (int k = 0; k < n_t; ++k) {
        const Vector t = Vector::Constant(rows, (k + 0.5) / n_t);
        auto [x, v] = point_and_velocity(t);
        total += (metric.at(x).array() * v.rowwise().norm().array()).matrix() / n_t;
    }
    return total;
}

inline Vector geodesic_line_integral(const GeodesicModel& model, const MetricField& metric, const Matrix& x0,
                                     const Matrix& x1, int n_t = 200) {
    return metric_line_integral(
        [&](const Vector& t) { return std::pair{path_point(model, x0, x1, t), path_velocity(model, x0, x1, t)}; }, metric,
        x0.rows(), n_t);
}

inline Vector chord_line_integral(const MetricField& metric, const Matrix& x0, const Matrix& x1, int n_t = 200) {
    return metric_line_integral(
        [&](const Vector& t) { return std::pair<Matrix, Matrix>{x0 + t.asDiagonal() * (x1 - x0), x1 - x0}; }, metric,
        x0.rows(), n_t);
}

} // namespace eggfm::geometry
