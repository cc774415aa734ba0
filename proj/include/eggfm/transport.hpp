#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "eggfm/autodiff.hpp"
#include "eggfm/error.hpp"
#include "eggfm/geometry.hpp"
#include "eggfm/nn.hpp"
#include "eggfm/random.hpp"
#include "eggfm/train.hpp"

namespace eggfm::transport {

using ad::Matrix;
using ad::Var;
using Vector = Eigen::VectorXd;
using geometry::PairSampler;

// ---------------------------------------------------------------------------
// Distance embedding

struct EmbeddingModel {
    nn::ModelParams params;
    int dim = 2;

    int out_dim() const { return params.arch.out_dim; }

    /// Skip connection when the output keeps the ambient dimension, so f starts near the identity.
    static EmbeddingModel init(int dim, int out_dim, int hidden_dim, int n_layers, std::uint64_t seed) {
        nn::Architecture a;
        a.role = nn::Role::embedding;
        a.in_dim = dim;
        a.out_dim = out_dim;
        a.hidden_dim = hidden_dim;
        a.n_layers = n_layers;
        a.skip = out_dim == dim;
        return {nn::init_params(a, seed), dim};
    }

    Matrix embed(const Matrix& x) const { return nn::forward(params, x); }
};

enum class EmbeddingResidual { squared, absolute };

/// Embedding loss on a fixed set of path samples.
struct SpeedBatch {
    Matrix x_t;
    Matrix velocity;
    Vector metric_speed2; // G(x_t) ||xdot_t||^2
};

inline SpeedBatch speed_batch(const geometry::GeodesicModel& geo, const geometry::MetricField& metric,
                              const Matrix& x0, const Matrix& x1, const Vector& t, const Matrix& eps,
                              double sigma_flow) {
    SpeedBatch s;
    s.x_t = geometry::path_point(geo, x0, x1, t, &eps, sigma_flow);
    s.velocity = geometry::path_velocity(geo, x0, x1, t);
    s.metric_speed2 = (metric.at(s.x_t).array() * s.velocity.rowwise().squaredNorm().array()).matrix();
    return s;
}

/**
 * Mean over samples of (||J_f(x_t) xdot_t||^2 - G(x_t) ||xdot_t||^2)^2, or of its
 * absolute value. The geodesic and metric enter only through `s`.
 */
inline Var embedding_loss(const nn::Net& net, const SpeedBatch& s,
                          EmbeddingResidual form = EmbeddingResidual::squared) {
    require(s.x_t.rows() == s.velocity.rows() && s.x_t.rows() == s.metric_speed2.size(), ErrorCode::shape,
            "embedding_loss: batch rows disagree");
    auto [f, df] = net.jvp(ad::constant(s.x_t), ad::constant(s.velocity));
    Var r = ad::sub(ad::row_sum(ad::square(df)), ad::constant(s.metric_speed2));
    Var loss = ad::mean(form == EmbeddingResidual::squared ? ad::square(r) : ad::abs(r));
    require(std::isfinite(loss.item()), ErrorCode::divergence, "embedding_loss: non-finite value");
    return loss;
}

inline Var embedding_loss(const nn::Net& net, const geometry::GeodesicModel& geo, const geometry::MetricField& metric,
                          const Matrix& x0, const Matrix& x1, const Vector& t, const Matrix& eps, double sigma_flow,
                          EmbeddingResidual form = EmbeddingResidual::squared) {
    return embedding_loss(net, speed_batch(geo, metric, x0, x1, t, eps, sigma_flow), form);
}

inline nn::TrainResult train_embedding(const EmbeddingModel& model, const geometry::GeodesicModel& geo,
                                       const geometry::MetricField& metric, const PairSampler& pairs,
                                       const nn::TrainConfig& cfg, double sigma_flow, std::uint64_t seed,
                                       EmbeddingResidual form = EmbeddingResidual::squared) {
    require(model.dim == geo.dim, ErrorCode::shape, "train_embedding: embedding and geodesic dimensions differ");
    return nn::fit(
        model.params, cfg,
        [&](const nn::Net& net, long step) {
            auto pb = geometry::draw_path_batch(pairs, cfg.batch_size, derive_seed(seed, static_cast<std::uint64_t>(step)));
            return embedding_loss(net, speed_batch(geo, metric, pb.x0, pb.x1, pb.t, pb.eps, sigma_flow), form);
        },
        "embedding");
}

/// Row-wise ||f(x_i) - f(y_i)||.
inline Vector distance(const EmbeddingModel& model, const Matrix& x, const Matrix& y) {
    require(x.rows() == y.rows(), ErrorCode::shape, "distance: x and y must have the same rows");
    return (model.embed(x) - model.embed(y)).rowwise().norm();
}

// ---------------------------------------------------------------------------
// Couplings

/// Pairwise cost matrix between the rows of a and b.
using CostFn = std::function<Matrix(const Matrix&, const Matrix&)>;

inline Matrix euclidean_cost(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.cols(), ErrorCode::shape, "cost: point dimensions differ");
    Matrix c(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < b.rows(); ++j) c(i, j) = (a.row(i) - b.row(j)).norm();
    }
    return c;
}

/// Euclidean cost between embedded points: the learned distance.
inline CostFn embedding_cost(EmbeddingModel model) {
    return [model = std::move(model)](const Matrix& a, const Matrix& b) {
        return euclidean_cost(model.embed(a), model.embed(b));
    };
}

enum class Solver { exact, entropic };

inline std::string to_string(Solver s) { return s == Solver::exact ? "exact" : "entropic"; }

inline Solver solver_from_string(const std::string& s) {
    if (s == "exact") return Solver::exact;
    if (s == "entropic") return Solver::entropic;
    fail(ErrorCode::config, "unknown OT solver '" + s + "' (expected exact or entropic)");
}

struct Coupling {
    std::vector<Eigen::Index> source; // rows of batch 0
    std::vector<Eigen::Index> target; // matching rows of batch 1
    double cost = 0.0;                // sum of matched costs
    Solver solver = Solver::exact;

    std::size_t size() const { return source.size(); }
};

/**
 * Min-cost perfect matching of an n x n cost matrix by shortest augmenting paths
 * with row/column potentials, O(n^3). Returns col[i] for each row i.
 */
inline std::vector<Eigen::Index> solve_assignment(const Matrix& cost) {
    require(cost.rows() == cost.cols(), ErrorCode::invalid_argument,
            "assignment: cost matrix must be square, got " + std::to_string(cost.rows()) + "x" +
                std::to_string(cost.cols()));
    require(cost.allFinite(), ErrorCode::divergence, "assignment: non-finite cost");
    const Eigen::Index n = cost.rows();
    const double inf = std::numeric_limits<double>::infinity();
    // 1-based internals; index 0 is the virtual root of each search tree.
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<Eigen::Index> match(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (Eigen::Index i = 1; i <= n; ++i) {
        match[0] = i;
        Eigen::Index j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const Eigen::Index i0 = match[j0];
            double delta = inf;
            Eigen::Index j1 = 0;
            for (Eigen::Index j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (Eigen::Index j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const Eigen::Index j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<Eigen::Index> col(n);
    for (Eigen::Index j = 1; j <= n; ++j) col[match[j] - 1] = j - 1;
    return col;
}

inline double assignment_cost(const Matrix& cost, const std::vector<Eigen::Index>& col) {
    double total = 0.0;
    for (std::size_t i = 0; i < col.size(); ++i) total += cost(static_cast<Eigen::Index>(i), col[i]);
    return total;
}

/// Log-domain Sinkhorn plan between uniform marginals.
inline Matrix sinkhorn_plan(const Matrix& cost, double epsilon, int max_iter = 1000, double tol = 1e-9) {
    require(epsilon > 0.0, ErrorCode::config, "sinkhorn: epsilon must be positive");
    const Eigen::Index n = cost.rows();
    const Eigen::Index m = cost.cols();
    const double log_a = -std::log(static_cast<double>(n));
    const double log_b = -std::log(static_cast<double>(m));
    Vector f = Vector::Zero(n);
    Vector g = Vector::Zero(m);
    auto lse = [](const Eigen::ArrayXd& z) {
        const double mx = z.maxCoeff();
        return mx + std::log((z - mx).exp().sum());
    };
    for (int it = 0; it < max_iter; ++it) {
        Vector f_prev = f;
        for (Eigen::Index i = 0; i < n; ++i) {
            f(i) = epsilon * log_a - epsilon * lse((g.transpose().array() - cost.row(i).array()) / epsilon);
        }
        for (Eigen::Index j = 0; j < m; ++j) {
            g(j) = epsilon * log_b - epsilon * lse((f.array() - cost.col(j).array()) / epsilon);
        }
        if ((f - f_prev).cwiseAbs().maxCoeff() < tol) break;
    }
    Matrix plan(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < m; ++j) plan(i, j) = std::exp((f(i) + g(j) - cost(i, j)) / epsilon);
    }
    return plan;
}

struct OtOptions {
    Solver solver = Solver::exact;
    double epsilon = 0.05; // entropic only
    std::uint64_t seed = 0; // entropic only: row-wise sampling from the plan
};

/**
 * Couples two minibatches. The exact solver returns the min-cost permutation; the
 * entropic solver samples one partner per source row from the Sinkhorn plan, which
 * need not be a bijection.
 */
inline Coupling ot_couple(const Matrix& batch0, const Matrix& batch1, const CostFn& cost_fn,
                          const OtOptions& opt = {}) {
    require(batch0.rows() > 0 && batch1.rows() > 0, ErrorCode::invalid_argument, "ot_couple: empty batch");
    const Matrix c = cost_fn(batch0, batch1);
    Coupling out;
    out.solver = opt.solver;
    if (opt.solver == Solver::exact) {
        require(batch0.rows() == batch1.rows(), ErrorCode::invalid_argument,
                "ot_couple: exact solver needs equal batch sizes, got " + std::to_string(batch0.rows()) + " and " +
                    std::to_string(batch1.rows()));
        out.target = solve_assignment(c);
        out.source.resize(out.target.size());
        std::iota(out.source.begin(), out.source.end(), Eigen::Index{0});
    } else {
        const Matrix plan = sinkhorn_plan(c, opt.epsilon);
        Rng rng(opt.seed);
        for (Eigen::Index i = 0; i < plan.rows(); ++i) {
            std::vector<double> row(static_cast<std::size_t>(plan.cols()));
            for (Eigen::Index j = 0; j < plan.cols(); ++j) row[static_cast<std::size_t>(j)] = plan(i, j);
            std::discrete_distribution<Eigen::Index> pick(row.begin(), row.end());
            out.source.push_back(i);
            out.target.push_back(pick(rng));
        }
    }
    for (std::size_t k = 0; k < out.size(); ++k) out.cost += c(out.source[k], out.target[k]);
    return out;
}

/// Draws independent minibatches from each marginal and re-pairs them by OT.
inline PairSampler ot_pairs(Matrix p0, Matrix p1, CostFn cost_fn, OtOptions opt = {}) {
    PairSampler product = geometry::product_pairs(std::move(p0), std::move(p1));
    return [product, cost_fn = std::move(cost_fn), opt](std::size_t batch, std::uint64_t seed) {
        auto [a, b] = product(batch, seed);
        OtOptions o = opt;
        o.seed = derive_seed(seed, 7);
        Coupling c = ot_couple(a, b, cost_fn, o);
        Matrix x0(static_cast<Eigen::Index>(c.size()), a.cols());
        Matrix x1(static_cast<Eigen::Index>(c.size()), b.cols());
        for (std::size_t k = 0; k < c.size(); ++k) {
            x0.row(static_cast<Eigen::Index>(k)) = a.row(c.source[k]);
            x1.row(static_cast<Eigen::Index>(k)) = b.row(c.target[k]);
        }
        return std::pair{x0, x1};
    };
}

/// Splits each batch evenly across samplers (the first ones take the remainder).
inline PairSampler concat_pairs(std::vector<PairSampler> parts) {
    require(!parts.empty(), ErrorCode::invalid_argument, "concat_pairs: no samplers");
    return [parts = std::move(parts)](std::size_t batch, std::uint64_t seed) {
        const std::size_t k = parts.size();
        std::vector<Matrix> a;
        std::vector<Matrix> b;
        Eigen::Index rows = 0;
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t share = batch / k + (i < batch % k ? 1 : 0);
            if (share == 0) continue;
            auto [x0, x1] = parts[i](share, derive_seed(seed, i));
            rows += x0.rows();
            a.push_back(std::move(x0));
            b.push_back(std::move(x1));
        }
        Matrix x0(rows, a.front().cols());
        Matrix x1(rows, b.front().cols());
        Eigen::Index r = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            x0.middleRows(r, a[i].rows()) = a[i];
            x1.middleRows(r, b[i].rows()) = b[i];
            r += a[i].rows();
        }
        return std::pair{x0, x1};
    };
}

// ---------------------------------------------------------------------------
// Flow

struct FlowModel {
    nn::ModelParams params;
    int dim = 2;
    int n_freq = 32;

    nn::SinusoidalEmbedding time_embedding() const {
        return nn::SinusoidalEmbedding::for_input(nn::EmbeddingInput::time, n_freq);
    }

    static FlowModel init(int dim, int n_freq, int hidden_dim, int n_layers, std::uint64_t seed) {
        nn::Architecture a;
        a.role = nn::Role::flow;
        a.in_dim = dim + 2 * n_freq;
        a.out_dim = dim;
        a.hidden_dim = hidden_dim;
        a.n_layers = n_layers;
        return {nn::init_params(a, seed), dim, n_freq};
    }

    /// Network input [x, emb(t)].
    Matrix input(const Matrix& x, const Vector& t) const {
        require(x.cols() == dim && x.rows() == t.size(), ErrorCode::shape, "flow: input shape mismatch");
        const Matrix e = geometry::embed_time(time_embedding(), t).first;
        Matrix u(x.rows(), dim + e.cols());
        u << x, e;
        return u;
    }

    Var velocity(const nn::Net& net, const Matrix& x, const Vector& t) const { return net(ad::constant(input(x, t))); }

    Matrix velocity(const Matrix& x, double t) const {
        return nn::forward(params, input(x, Vector::Constant(x.rows(), t)));
    }
};

/**
 * Pairs on one interval of global flow time [tau0, tau1]. The local path time t maps
 * to tau0 + t (tau1 - tau0), so the target velocity is xdot_t / (tau1 - tau0).
 */
struct FlowBatch {
    Matrix x0;
    Matrix x1;
    Vector t;
    Matrix eps;
    Vector tau0;
    Vector tau1;
};

/// Mean over rows of ||v(tau, x_t) - xdot_t / (tau1 - tau0)||^2.
inline Var flow_loss(const nn::Net& net, const FlowModel& flow, const geometry::GeodesicModel& geo, const FlowBatch& fb,
                     double sigma_flow) {
    const Eigen::Index b = fb.x0.rows();
    require(fb.tau0.size() == b && fb.tau1.size() == b, ErrorCode::shape, "flow_loss: interval columns mismatch");
    require(((fb.tau1 - fb.tau0).array() > 0.0).all(), ErrorCode::invalid_argument, "flow_loss: empty time interval");
    const Matrix x_t = geometry::path_point(geo, fb.x0, fb.x1, fb.t, &fb.eps, sigma_flow);
    const Vector span = fb.tau1 - fb.tau0;
    const Matrix target = span.cwiseInverse().asDiagonal() * geometry::path_velocity(geo, fb.x0, fb.x1, fb.t);
    const Vector tau = fb.tau0 + fb.t.cwiseProduct(span);
    Var v = flow.velocity(net, x_t, tau);
    Var loss = ad::mean(ad::row_sum(ad::square(ad::sub(v, ad::constant(target)))));
    require(std::isfinite(loss.item()), ErrorCode::divergence, "flow_loss: non-finite value");
    return loss;
}

/// A pair sampler tied to one interval of global flow time.
struct IntervalPairs {
    PairSampler pairs;
    double tau0 = 0.0;
    double tau1 = 1.0;
};

/// Splits the batch evenly across intervals; each interval couples its own pairs.
inline FlowBatch draw_flow_batch(const std::vector<IntervalPairs>& intervals, std::size_t batch, std::uint64_t seed) {
    require(!intervals.empty(), ErrorCode::invalid_argument, "flow: no intervals");
    FlowBatch fb;
    std::vector<PairSampler> samplers;
    for (const auto& iv : intervals) samplers.push_back(iv.pairs);
    std::tie(fb.x0, fb.x1) = concat_pairs(samplers)(batch, derive_seed(seed, 1));
    const std::size_t k = intervals.size();
    fb.tau0.resize(fb.x0.rows());
    fb.tau1.resize(fb.x0.rows());
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t share = batch / k + (i < batch % k ? 1 : 0);
        fb.tau0.segment(r, static_cast<Eigen::Index>(share)).setConstant(intervals[i].tau0);
        fb.tau1.segment(r, static_cast<Eigen::Index>(share)).setConstant(intervals[i].tau1);
        r += static_cast<Eigen::Index>(share);
    }
    Rng rng(derive_seed(seed, 2));
    fb.t = uniform_column(fb.x0.rows(), rng);
    fb.eps = standard_normal(fb.x0.rows(), fb.x0.cols(), rng);
    return fb;
}

inline nn::TrainResult train_flow(const FlowModel& flow, const geometry::GeodesicModel& geo,
                                  const std::vector<IntervalPairs>& intervals, const nn::TrainConfig& cfg,
                                  double sigma_flow, std::uint64_t seed) {
    require(flow.dim == geo.dim, ErrorCode::shape, "train_flow: flow and geodesic dimensions differ");
    return nn::fit(
        flow.params, cfg,
        [&](const nn::Net& net, long step) {
            FlowBatch fb = draw_flow_batch(intervals, cfg.batch_size, derive_seed(seed, static_cast<std::uint64_t>(step)));
            return flow_loss(net, flow, geo, fb, sigma_flow);
        },
        "flow");
}

// ---------------------------------------------------------------------------
// Integration

using VelocityField = std::function<Matrix(double t, const Matrix& x)>;

enum class Method { euler, rk4 };

inline std::string to_string(Method m) { return m == Method::euler ? "euler" : "rk4"; }

inline Method method_from_string(const std::string& s) {
    if (s == "euler") return Method::euler;
    if (s == "rk4") return Method::rk4;
    fail(ErrorCode::config, "unknown integrator '" + s + "' (expected euler or rk4)");
}

struct Trajectory {
    Vector times;              // n_steps + 1
    std::vector<Matrix> states; // n_steps + 1 snapshots, rows are trajectories

    const Matrix& end() const { return states.back(); }
};

inline Trajectory integrate(const VelocityField& v, const Matrix& x_start, double t0, double t1, int n_steps = 100,
                            Method method = Method::rk4) {
    require(n_steps >= 1, ErrorCode::invalid_argument, "integrate: n_steps must be >= 1");
    Trajectory tr;
    tr.times.resize(n_steps + 1);
    tr.states.reserve(static_cast<std::size_t>(n_steps) + 1);
    const double h = (t1 - t0) / n_steps;
    Matrix x = x_start;
    tr.times(0) = t0;
    tr.states.push_back(x);
    for (int k = 0; k < n_steps; ++k) {
        const double t = t0 + k * h;
        if (method == Method::euler) {
            x += h * v(t, x);
        } else {
            const Matrix k1 = v(t, x);
            const Matrix k2 = v(t + h / 2, x + (h / 2) * k1);
            const Matrix k3 = v(t + h / 2, x + (h / 2) * k2);
            const Matrix k4 = v(t + h, x + h * k3);
            x += (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4);
        }
        require(x.allFinite(), ErrorCode::divergence, "integrate: non-finite state at step " + std::to_string(k + 1));
        tr.times(k + 1) = k + 1 == n_steps ? t1 : t0 + (k + 1) * h;
        tr.states.push_back(x);
    }
    return tr;
}

inline Trajectory integrate(const FlowModel& flow, const Matrix& x_start, double t0, double t1, int n_steps = 100,
                            Method method = Method::rk4) {
    return integrate([&](double t, const Matrix& x) { return flow.velocity(x, t); }, x_start, t0, t1, n_steps, method);
}

/// CSV with columns traj_id, step, t, f0..f{d-1}.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& tr) {
    require(!tr.states.empty(), ErrorCode::invalid_argument, "trajectory is empty");
    const Eigen::Index d = tr.states.front().cols();
    os << "traj_id,step,t";
    for (Eigen::Index j = 0; j < d; ++j) os << ",f" << j;
    os << '\n';
    os.precision(17);
    for (Eigen::Index i = 0; i < tr.states.front().rows(); ++i) {
        for (std::size_t s = 0; s < tr.states.size(); ++s) {
            os << i << ',' << s << ',' << tr.times(static_cast<Eigen::Index>(s));
            for (Eigen::Index j = 0; j < d; ++j) os << ',' << tr.states[s](i, j);
            os << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// Timepoint schedule

struct Interval {
    int label0 = 0;
    int label1 = 1;
    double tau0 = 0.0;
    double tau1 = 1.0;
};

struct Schedule {
    std::vector<Interval> intervals; // consecutive observed timepoints
    int holdout = 0;
    std::size_t eval_interval = 0;   // interval that brackets the holdout
    double eval_fraction = 0.5;      // position of the holdout inside that interval
    double tau_holdout = 0.5;        // global flow time of the holdout

    const Interval& bracket() const { return intervals[eval_interval]; }
};

/// Global time is proportional to label gaps over the full label range.
inline double label_time(int label, int first, int last) {
    return static_cast<double>(label - first) / static_cast<double>(last - first);
}

inline Schedule multi_timepoint_schedule(const std::vector<int>& timepoints, int holdout) {
    const std::set<int> labels(timepoints.begin(), timepoints.end());
    require(labels.size() >= 3, ErrorCode::invalid_argument,
            "schedule: need at least 3 distinct timepoints to hold one out");
    require(labels.count(holdout) == 1, ErrorCode::invalid_argument,
            "schedule: holdout " + std::to_string(holdout) + " is not an observed timepoint");
    const int first = *labels.begin();
    const int last = *labels.rbegin();
    require(holdout != first && holdout != last, ErrorCode::invalid_argument,
            "schedule: holdout " + std::to_string(holdout) + " has no flanking timepoint on both sides");
    std::vector<int> observed;
    for (int l : labels) {
        if (l != holdout) observed.push_back(l);
    }
    Schedule s;
    s.holdout = holdout;
    s.tau_holdout = label_time(holdout, first, last);
    for (std::size_t i = 0; i + 1 < observed.size(); ++i) {
        const int a = observed[i];
        const int b = observed[i + 1];
        s.intervals.push_back({a, b, label_time(a, first, last), label_time(b, first, last)});
        if (a < holdout && holdout < b) {
            s.eval_interval = i;
            s.eval_fraction = static_cast<double>(holdout - a) / static_cast<double>(b - a);
        }
    }
    return s;
}

} // namespace eggfm::transport
