#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "eggfm/data.hpp"
#include "eggfm/error.hpp"
#include "eggfm/geometry.hpp"
#include "eggfm/io.hpp"
#include "eggfm/random.hpp"
#include "eggfm/score_energy.hpp"
#include "eggfm/transport.hpp"

namespace eggfm::eval {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Geodesic error

/// Great-circle interpolation between unit vectors, row by row.
inline Matrix sphere_geodesic(const Matrix& x0, const Matrix& x1, const Vector& t) {
    require(x0.rows() == x1.rows() && x0.cols() == x1.cols() && t.size() == x0.rows(), ErrorCode::shape,
            "sphere_geodesic: x0, x1 and t disagree");
    Matrix out(x0.rows(), x0.cols());
    for (Eigen::Index i = 0; i < x0.rows(); ++i) {
        require(std::abs(x0.row(i).norm() - 1.0) < 1e-9 && std::abs(x1.row(i).norm() - 1.0) < 1e-9,
                ErrorCode::invalid_argument, "sphere_geodesic: endpoints must have unit norm (row " + std::to_string(i) + ")");
        const double omega = std::acos(std::clamp(x0.row(i).dot(x1.row(i)), -1.0, 1.0));
        require(omega < M_PI - 1e-9, ErrorCode::invalid_argument,
                "sphere_geodesic: antipodal endpoints have no unique geodesic (row " + std::to_string(i) + ")");
        if (omega < 1e-12) {
            out.row(i) = x0.row(i);
            continue;
        }
        const double s = std::sin(omega);
        out.row(i) = (std::sin((1.0 - t(i)) * omega) / s) * x0.row(i) + (std::sin(t(i) * omega) / s) * x1.row(i);
    }
    return out;
}

/// gamma(x0, x1, t) evaluated row-wise.
using GeodesicFn = std::function<Matrix(const Matrix&, const Matrix&, const Vector&)>;

inline Matrix chord(const Matrix& x0, const Matrix& x1, const Vector& t) { return x0 + t.asDiagonal() * (x1 - x0); }

/// Noise-free learned path.
inline GeodesicFn learned_geodesic(geometry::GeodesicModel model) {
    return [model = std::move(model)](const Matrix& x0, const Matrix& x1, const Vector& t) {
        return geometry::path_point(model, x0, x1, t);
    };
}

struct AveOptions {
    std::size_t n_pairs = 1000;
    int n_t = 16;
    std::uint64_t seed = 0;
    /// Uniform random times per pair; false uses the midpoint grid (k + 1/2) / n_t.
    bool random_t = true;
};

struct AveResult {
    double value = 0.0;    // mean over pairs and times of ||gamma - gamma*||^2
    double pair_std = 0.0; // spread of the per-pair means
    std::size_t n_pairs = 0;
    int n_t = 0;
};

inline AveResult average_geodesic_error(const GeodesicFn& learned, const GeodesicFn& analytic,
                                        const geometry::PairSampler& pairs, const AveOptions& opt = {}) {
    require(opt.n_pairs >= 1 && opt.n_t >= 1, ErrorCode::invalid_argument, "AVE: need at least one pair and one time");
    auto [a, b] = pairs(opt.n_pairs, derive_seed(opt.seed, 1));
    const Eigen::Index np = a.rows();
    const Eigen::Index n = np * opt.n_t;
    Matrix x0 = a.replicate(opt.n_t, 1);
    Matrix x1 = b.replicate(opt.n_t, 1);
    Vector t(n);
    Rng rng(derive_seed(opt.seed, 2));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < opt.n_t; ++k) {
        for (Eigen::Index i = 0; i < np; ++i) t(k * np + i) = opt.random_t ? u(rng) : (k + 0.5) / opt.n_t;
    }
    const Vector sq = (learned(x0, x1, t) - analytic(x0, x1, t)).rowwise().squaredNorm();
    Vector per_pair = Vector::Zero(np);
    for (int k = 0; k < opt.n_t; ++k) per_pair += sq.segment(k * np, np);
    per_pair /= opt.n_t;
    AveResult r;
    r.value = per_pair.mean();
    r.pair_std = np > 1 ? std::sqrt((per_pair.array() - r.value).square().sum() / static_cast<double>(np - 1)) : 0.0;
    r.n_pairs = static_cast<std::size_t>(np);
    r.n_t = opt.n_t;
    return r;
}

// ---------------------------------------------------------------------------
// Wasserstein-1

/// `k` distinct rows of m chosen uniformly (all rows, in order, when k >= rows).
inline Matrix subsample_rows(const Matrix& m, Eigen::Index k, Rng& rng) {
    if (k >= m.rows()) return m;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.rows()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    for (Eigen::Index i = 0; i < k; ++i) {
        std::uniform_int_distribution<Eigen::Index> pick(i, m.rows() - 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    Matrix out(k, m.cols());
    for (Eigen::Index i = 0; i < k; ++i) out.row(i) = m.row(idx[static_cast<std::size_t>(i)]);
    return out;
}

/**
 * Exact W1 between uniform empirical measures with Euclidean ground cost. Both clouds are
 * subsampled to a common size min(n_a, n_b, max_n), then matched by min-cost assignment.
 */
inline double wasserstein1(const Matrix& a, const Matrix& b, std::size_t max_n = 1024, std::uint64_t seed = 0) {
    require(a.rows() > 0 && b.rows() > 0, ErrorCode::invalid_argument, "wasserstein1: empty point cloud");
    require(a.cols() == b.cols(), ErrorCode::shape, "wasserstein1: point dimensions differ");
    require(max_n >= 1, ErrorCode::invalid_argument, "wasserstein1: max_n must be >= 1");
    const Eigen::Index n = std::min({a.rows(), b.rows(), static_cast<Eigen::Index>(max_n)});
    Rng ra(derive_seed(seed, 1));
    Rng rb(derive_seed(seed, 2));
    const Matrix sa = subsample_rows(a, n, ra);
    const Matrix sb = subsample_rows(b, n, rb);
    const Matrix cost = transport::euclidean_cost(sa, sb);
    return transport::assignment_cost(cost, transport::solve_assignment(cost)) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Energy grids

/**
 * A 2d slice of the ambient space: origin + u e_0 + v e_1. With axes the directions are
 * coordinate axes; otherwise dir0 and dir1 must be orthonormal.
 */
struct PlaneSpec {
    Vector origin;
    Vector dir0;
    Vector dir1;
    double u_min = -1.5;
    double u_max = 1.5;
    double v_min = -1.5;
    double v_max = 1.5;

    static PlaneSpec axes(int dim, int axis0, int axis1, double lo, double hi, Vector origin = {}) {
        require(0 <= axis0 && axis0 < dim && 0 <= axis1 && axis1 < dim && axis0 != axis1, ErrorCode::invalid_argument,
                "plane: axes must be two distinct coordinates below dim");
        PlaneSpec p;
        p.origin = origin.size() == 0 ? Vector::Zero(dim) : std::move(origin);
        p.dir0 = Vector::Unit(dim, axis0);
        p.dir1 = Vector::Unit(dim, axis1);
        p.u_min = p.v_min = lo;
        p.u_max = p.v_max = hi;
        p.validate();
        return p;
    }

    int dim() const { return static_cast<int>(origin.size()); }

    void validate() const {
        require(origin.size() >= 2 && dir0.size() == origin.size() && dir1.size() == origin.size(), ErrorCode::shape,
                "plane: origin and directions must share a dimension >= 2");
        require(std::abs(dir0.norm() - 1.0) < 1e-9 && std::abs(dir1.norm() - 1.0) < 1e-9 && std::abs(dir0.dot(dir1)) < 1e-9,
                ErrorCode::invalid_argument, "plane: directions must be orthonormal");
        require(u_min < u_max && v_min < v_max, ErrorCode::invalid_argument, "plane: empty extent");
    }

    io::json to_json() const {
        auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
        return {{"origin", vec(origin)}, {"dir0", vec(dir0)},   {"dir1", vec(dir1)},  {"u_min", u_min},
                {"u_max", u_max},        {"v_min", v_min},      {"v_max", v_max}};
    }

    static PlaneSpec from_json(const io::json& j) {
        auto vec = [](const io::json& a) {
            const auto v = a.get<std::vector<double>>();
            return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
        };
        PlaneSpec p;
        try {
            p.origin = vec(j.at("origin"));
            p.dir0 = vec(j.at("dir0"));
            p.dir1 = vec(j.at("dir1"));
            p.u_min = j.at("u_min").get<double>();
            p.u_max = j.at("u_max").get<double>();
            p.v_min = j.at("v_min").get<double>();
            p.v_max = j.at("v_max").get<double>();
        } catch (const io::json::exception& e) {
            fail(ErrorCode::format, std::string("plane spec: ") + e.what());
        }
        p.validate();
        return p;
    }
};

/// values(i, j) is the field at u_j = u[j], v_i = v[i]; both axes ascend.
struct Grid {
    PlaneSpec plane;
    std::string field;
    Vector u;
    Vector v;
    Matrix values;
};

using ScalarField = std::function<Vector(const Matrix&)>;

inline ScalarField energy_field(score::EnergyModel energy, double sigma) {
    return [energy = std::move(energy), sigma](const Matrix& x) { return score::energy_at(energy, x, sigma); };
}

inline ScalarField metric_field(geometry::MetricField metric) {
    return [metric = std::move(metric)](const Matrix& x) { return metric.at(x); };
}

inline Grid export_energy_grid(const ScalarField& f, const PlaneSpec& plane, int resolution,
                               const std::string& field = "energy") {
    require(resolution >= 2, ErrorCode::invalid_argument, "export_energy_grid: resolution must be >= 2");
    plane.validate();
    Grid g;
    g.plane = plane;
    g.field = field;
    g.u = Vector::LinSpaced(resolution, plane.u_min, plane.u_max);
    g.v = Vector::LinSpaced(resolution, plane.v_min, plane.v_max);
    Matrix pts(static_cast<Eigen::Index>(resolution) * resolution, plane.dim());
    for (int i = 0; i < resolution; ++i) {
        for (int j = 0; j < resolution; ++j) {
            pts.row(i * resolution + j) = (plane.origin + g.u(j) * plane.dir0 + g.v(i) * plane.dir1).transpose();
        }
    }
    const Vector vals = f(pts);
    g.values = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        vals.data(), resolution, resolution);
    return g;
}

/// One "# {json}" header line, then one CSV row per v value (resolution columns each).
inline void write_grid_csv(std::ostream& os, const Grid& g) {
    io::json header = {{"field", g.field}, {"resolution", g.values.rows()}, {"plane", g.plane.to_json()},
                       {"layout", "row i is v[i], column j is u[j], both ascending"}};
    os << "# " << header.dump() << '\n';
    os.precision(17);
    for (Eigen::Index i = 0; i < g.values.rows(); ++i) {
        for (Eigen::Index j = 0; j < g.values.cols(); ++j) os << (j ? "," : "") << g.values(i, j);
        os << '\n';
    }
}

inline Grid read_grid_csv(std::istream& is) {
    std::string line;
    require(static_cast<bool>(std::getline(is, line)) && line.rfind("# ", 0) == 0, ErrorCode::format,
            "grid: missing header line");
    Grid g;
    int res = 0;
    try {
        const io::json h = io::json::parse(line.substr(2));
        g.field = h.at("field").get<std::string>();
        res = h.at("resolution").get<int>();
        g.plane = PlaneSpec::from_json(h.at("plane"));
    } catch (const io::json::exception& e) {
        fail(ErrorCode::format, std::string("grid header: ") + e.what());
    }
    g.u = Vector::LinSpaced(res, g.plane.u_min, g.plane.u_max);
    g.v = Vector::LinSpaced(res, g.plane.v_min, g.plane.v_max);
    g.values.resize(res, res);
    for (int i = 0; i < res; ++i) {
        require(static_cast<bool>(std::getline(is, line)), ErrorCode::format, "grid: expected " + std::to_string(res) + " rows");
        std::stringstream ss(line);
        std::string cell;
        for (int j = 0; j < res; ++j) {
            require(static_cast<bool>(std::getline(ss, cell, ',')), ErrorCode::format,
                    "grid row " + std::to_string(i) + ": expected " + std::to_string(res) + " values");
            try {
                g.values(i, j) = std::stod(cell);
            } catch (const std::exception&) {
                fail(ErrorCode::format, "grid row " + std::to_string(i) + ": bad number '" + cell + "'");
            }
        }
    }
    return g;
}

/// Grayscale heatmap, dark = low; v increases upward.
inline void write_grid_svg(std::ostream& os, const Grid& g, int cell = 6) {
    const Eigen::Index n = g.values.rows();
    const double lo = g.values.minCoeff();
    const double span = std::max(g.values.maxCoeff() - lo, 1e-300);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << n * cell << "\" height=\"" << n * cell << "\">\n";
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            const int level = static_cast<int>(std::lround(255.0 * (g.values(i, j) - lo) / span));
            os << "<rect x=\"" << j * cell << "\" y=\"" << (n - 1 - i) * cell << "\" width=\"" << cell << "\" height=\""
               << cell << "\" fill=\"rgb(" << level << ',' << level << ',' << level << ")\"/>\n";
        }
    }
    os << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Timepoint holdout

struct HoldoutResult {
    int holdout = 0;
    double w1 = 0.0;
    Matrix predicted;
};

/// Transports the earlier flanking marginal to the holdout time and scores it against the held-out cloud.
inline HoldoutResult leave_one_out_eval(const transport::FlowModel& flow, const data::Dataset& ds,
                                        const transport::Schedule& schedule, int n_steps = 100,
                                        std::size_t max_n = 1024, std::uint64_t seed = 0,
                                        transport::Method method = transport::Method::rk4) {
    const auto& iv = schedule.bracket();
    const Matrix start = ds.rows_at_time(iv.label0);
    const Matrix target = ds.rows_at_time(schedule.holdout);
    require(start.rows() > 0 && target.rows() > 0, ErrorCode::invalid_argument,
            "leave_one_out_eval: empty marginal at time " + std::to_string(start.rows() == 0 ? iv.label0 : schedule.holdout));
    HoldoutResult r;
    r.holdout = schedule.holdout;
    Rng rng(derive_seed(seed, 3));
    const Matrix x0 = subsample_rows(start, static_cast<Eigen::Index>(max_n), rng);
    r.predicted = transport::integrate(flow, x0, iv.tau0, schedule.tau_holdout, n_steps, method).end();
    r.w1 = wasserstein1(r.predicted, target, max_n, derive_seed(seed, 4));
    return r;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
    std::string metric;
    double value = 0.0;
    double std = 0.0; // over the entries in `values`
    std::size_t n = 0;
    std::vector<double> values;
    std::vector<std::uint64_t> seeds;
    std::string config_hash;
    io::json extra = io::json::object();

    void validate() const {
        require(std::isfinite(value), ErrorCode::divergence, "report " + metric + ": non-finite value");
        require(std >= 0.0, ErrorCode::divergence, "report " + metric + ": negative dispersion");
    }

    io::json to_json() const {
        validate();
        return {{"metric", metric}, {"value", value}, {"std", std},          {"n", n},
                {"values", values}, {"seeds", seeds}, {"config_hash", config_hash}, {"extra", extra}};
    }

    static EvalReport from_json(const io::json& j) {
        EvalReport r;
        try {
            r.metric = j.at("metric").get<std::string>();
            r.value = j.at("value").get<double>();
            r.std = j.at("std").get<double>();
            r.n = j.at("n").get<std::size_t>();
            r.values = j.at("values").get<std::vector<double>>();
            r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
            r.config_hash = j.at("config_hash").get<std::string>();
            r.extra = j.value("extra", io::json::object());
        } catch (const io::json::exception& e) {
            fail(ErrorCode::format, std::string("eval report: ") + e.what());
        }
        return r;
    }
};

/// Mean and sample standard deviation of per-seed (or per-holdout) values.
inline EvalReport summarize(std::string metric, std::vector<double> values, std::vector<std::uint64_t> seeds,
                            std::string config_hash, std::size_t n) {
    require(!values.empty(), ErrorCode::invalid_argument, "summarize: no values");
    EvalReport r;
    r.metric = std::move(metric);
    const double k = static_cast<double>(values.size());
    r.value = std::accumulate(values.begin(), values.end(), 0.0) / k;
    double ss = 0.0;
    for (double v : values) ss += (v - r.value) * (v - r.value);
    r.std = values.size() > 1 ? std::sqrt(ss / (k - 1.0)) : 0.0;
    r.n = n;
    r.values = std::move(values);
    r.seeds = std::move(seeds);
    r.config_hash = std::move(config_hash);
    r.validate();
    return r;
}

/// Appends one row to a CSV results ledger, writing the header when the file is new.
inline void append_report_csv(const std::filesystem::path& path, const EvalReport& r) {
    r.validate();
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream os(path, std::ios::app);
    require(static_cast<bool>(os), ErrorCode::io, "cannot open results ledger " + path.string());
    if (fresh) os << "metric,value,std,n,seeds,config_hash\n";
    os.precision(17);
    os << r.metric << ',' << r.value << ',' << r.std << ',' << r.n << ',';
    for (std::size_t i = 0; i < r.seeds.size(); ++i) os << (i ? ";" : "") << r.seeds[i];
    os << ',' << r.config_hash << '\n';
    require(static_cast<bool>(os), ErrorCode::io, "failed writing results ledger " + path.string());
}

} // namespace eggfm::eval
