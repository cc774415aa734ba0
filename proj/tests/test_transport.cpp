#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "eggfm/transport.hpp"

#include "assignment_oracle.hpp"
#include "fd_oracle.hpp"

using namespace eggfm;
using geometry::GeodesicModel;
using geometry::MetricField;
using transport::EmbeddingModel;
using transport::FlowModel;
using transport::Matrix;
using transport::Vector;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
    Rng rng(seed);
    return standard_normal(r, c, rng);
}

Vector times(Eigen::Index n, std::uint64_t seed) {
    Rng rng(seed);
    return uniform_column(n, rng);
}

void zero_all(nn::ModelParams& p) {
    for (std::size_t i = 0; i < p.num_tensors(); ++i) p.tensor(i).setZero();
}

/// f(x) = scale * x via the skip connection plus a linear read-out.
EmbeddingModel scaled_identity(int dim, double scale) {
    EmbeddingModel f = EmbeddingModel::init(dim, dim, 16, 0, 1);
    zero_all(f.params);
    f.params.layers[0].weight = (scale - 1.0) * Matrix::Identity(dim, dim);
    return f;
}

GeodesicModel random_geodesic(std::uint64_t seed, int dim = 2) {
    GeodesicModel g = GeodesicModel::init(dim, 4, 16, 2, seed);
    Rng rng(seed + 1);
    g.params.layers.back().weight = standard_normal(dim, 16, rng);
    g.params.layers.back().bias = standard_normal(1, dim, rng);
    return g;
}

score::EnergyModel random_energy(std::uint64_t seed) {
    score::Conditioning c;
    c.dim = 2;
    c.n_freq = 4;
    return score::EnergyModel::init(c, score::NoiseSchedule::log_spaced(3, 0.05, 0.5), {16, 2}, seed);
}

} // namespace

// ---------------------------------------------------------------------------
// Embedding

TEST(EmbeddingLoss, IdentityUnderUnitMetricIsZero) {
    GeodesicModel g = GeodesicModel::init(2, 4, 16, 2, 2);
    Matrix x0 = random_matrix(32, 2, 3);
    Matrix x1 = random_matrix(32, 2, 4);
    Matrix eps = random_matrix(32, 2, 5);
    ad::NoGrad guard;
    auto f = scaled_identity(2, 1.0);
    const double loss = transport::embedding_loss(nn::Net::frozen(f.params), g, MetricField::constant(1.0), x0, x1,
                                                  times(32, 6), eps, 0.1)
                            .item();
    EXPECT_LT(loss, 1e-24);
}

TEST(EmbeddingLoss, DoubledIdentityHasPositiveResidual) {
    GeodesicModel g = GeodesicModel::init(2, 4, 16, 2, 7);
    Matrix x0 = random_matrix(16, 2, 8);
    Matrix x1 = random_matrix(16, 2, 9);
    Matrix eps = Matrix::Zero(16, 2);
    const Vector t = times(16, 10);
    auto f = scaled_identity(2, 2.0);
    ad::NoGrad guard;
    const double sq = transport::embedding_loss(nn::Net::frozen(f.params), g, MetricField::constant(1.0), x0, x1, t, eps, 0.0).item();
    const double expected = (9.0 * (x1 - x0).rowwise().squaredNorm().array().square()).mean();
    EXPECT_GT(sq, 0.0);
    EXPECT_NEAR(sq, expected, 1e-10 * expected);
    const double ab = transport::embedding_loss(nn::Net::frozen(f.params), g, MetricField::constant(1.0), x0, x1, t, eps,
                                                0.0, transport::EmbeddingResidual::absolute)
                          .item();
    EXPECT_NEAR(ab, 3.0 * (x1 - x0).rowwise().squaredNorm().mean(), 1e-12);
}

TEST(EmbeddingLoss, AnalyticIsometryForConstantConformalMetric) {
    // G = 4 everywhere: f(x) = 2x has embedded speed equal to metric speed.
    GeodesicModel g = random_geodesic(11, 1);
    Matrix x0 = random_matrix(64, 1, 12);
    Matrix x1 = random_matrix(64, 1, 13);
    ad::NoGrad guard;
    const double loss = transport::embedding_loss(nn::Net::frozen(scaled_identity(1, 2.0).params), g,
                                                  MetricField::constant(4.0), x0, x1, times(64, 14),
                                                  random_matrix(64, 1, 15), 0.1)
                            .item();
    EXPECT_LT(loss, 1e-6);
}

TEST(EmbeddingLoss, GradientMatchesFiniteDifferences) {
    EmbeddingModel f = EmbeddingModel::init(2, 2, 16, 2, 16);
    GeodesicModel g = random_geodesic(17);
    MetricField m = geometry::fit_metric(random_energy(18), random_matrix(200, 2, 19), {0.2, 10.0, 0.0, 1.0, 0.0});
    Matrix x0 = random_matrix(6, 2, 20);
    Matrix x1 = random_matrix(6, 2, 21);
    const Vector t = times(6, 22);
    Matrix eps = random_matrix(6, 2, 23);
    for (auto form : {transport::EmbeddingResidual::squared, transport::EmbeddingResidual::absolute}) {
        auto loss = [&](const nn::Net& net) { return transport::embedding_loss(net, g, m, x0, x1, t, eps, 0.1, form); };
        auto analytic = nn::value_and_grad(f.params, loss);
        auto fd = oracle::fd_param_gradient(f.params, [&](const nn::ModelParams& p) {
            ad::NoGrad guard;
            return loss(nn::Net::frozen(p)).item();
        });
        EXPECT_LT(oracle::relative_error(analytic.grads.tensors, fd), 1e-4);
    }
}

TEST(TrainEmbedding, OneDimensionalConstantMetricLearnsDoubledDistance) {
    Matrix pts = random_matrix(400, 1, 24);
    GeodesicModel g = GeodesicModel::init(1, 4, 16, 2, 25);
    EmbeddingModel f = EmbeddingModel::init(1, 1, 16, 2, 26);
    nn::TrainConfig cfg;
    cfg.steps = 3000;
    cfg.batch_size = 128;
    cfg.learning_rate = 1e-3;
    cfg.ema_decay = 0.99;
    auto r = transport::train_embedding(f, g, MetricField::constant(4.0), geometry::product_pairs(pts, pts), cfg, 0.1, 27);
    f.params = r.params;
    Matrix x = random_matrix(100, 1, 28);
    Matrix y = random_matrix(100, 1, 29);
    const Vector d = transport::distance(f, x, y);
    for (Eigen::Index i = 0; i < 100; ++i) {
        const double ref = 2.0 * std::abs(x(i, 0) - y(i, 0));
        if (ref < 0.2) continue; // relative error is ill-conditioned for near-coincident points
        EXPECT_NEAR(d(i), ref, 0.1 * ref) << "pair " << i;
    }
}

TEST(Distance, MetricAxioms) {
    EmbeddingModel f = EmbeddingModel::init(3, 3, 16, 2, 30);
    Matrix x = random_matrix(100, 3, 31);
    Matrix y = random_matrix(100, 3, 32);
    Matrix z = random_matrix(100, 3, 33);
    const Vector dxx = transport::distance(f, x, x);
    const Vector dxy = transport::distance(f, x, y);
    const Vector dyx = transport::distance(f, y, x);
    const Vector dyz = transport::distance(f, y, z);
    const Vector dxz = transport::distance(f, x, z);
    EXPECT_EQ(dxx.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(dxy, dyx);
    EXPECT_GE(dxy.minCoeff(), 0.0);
    for (Eigen::Index i = 0; i < 100; ++i) EXPECT_LE(dxz(i), dxy(i) + dyz(i) + 1e-12);
}

// ---------------------------------------------------------------------------
// OT

TEST(OtCouple, IdenticalBatchesGiveIdentity) {
    Matrix a = random_matrix(20, 3, 40);
    auto c = transport::ot_couple(a, a, transport::euclidean_cost);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(c.target[i], c.source[i]);
    EXPECT_EQ(c.cost, 0.0);
}

TEST(OtCouple, TwoByTwoCrossing) {
    Matrix a(2, 1);
    a << 0.0, 1.0;
    Matrix b(2, 1);
    b << 0.9, 0.1;
    auto c = transport::ot_couple(a, b, transport::euclidean_cost);
    EXPECT_EQ(c.target[0], 1);
    EXPECT_EQ(c.target[1], 0);
    EXPECT_NEAR(c.cost, 0.2, 1e-15);
}

TEST(OtCouple, MatchesMunkresOnRandomClouds) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        Matrix a = random_matrix(64, 3, 41 + 2 * s);
        Matrix b = random_matrix(64, 3, 42 + 2 * s);
        auto c = transport::ot_couple(a, b, transport::euclidean_cost);
        std::set<Eigen::Index> seen(c.target.begin(), c.target.end());
        EXPECT_EQ(seen.size(), 64u);
        EXPECT_NEAR(c.cost, oracle::munkres_cost(transport::euclidean_cost(a, b)), 1e-12);
    }
}

TEST(OtCouple, MatchesExhaustiveSearchUpToEight) {
    for (int n = 1; n <= 8; ++n) {
        for (std::uint64_t s = 0; s < 4; ++s) {
            Matrix cost = random_matrix(n, n, 100 + 10 * n + s).cwiseAbs();
            auto col = transport::solve_assignment(cost);
            EXPECT_NEAR(transport::assignment_cost(cost, col), oracle::brute_force_cost(cost), 1e-12) << "n=" << n;
        }
    }
}

TEST(OtCouple, TiedCostsStillOptimal) {
    Matrix cost = Matrix::Ones(6, 6);
    cost(2, 3) = 0.0;
    auto col = transport::solve_assignment(cost);
    EXPECT_EQ(transport::assignment_cost(cost, col), 5.0);
}

TEST(OtCouple, UnequalSizesRejectedByExactSolver) {
    try {
        transport::ot_couple(random_matrix(3, 2, 50), random_matrix(4, 2, 51), transport::euclidean_cost);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::invalid_argument);
    }
}

TEST(OtCouple, EntropicConcentratesOnExactMatchForSmallEpsilon) {
    Matrix a = random_matrix(10, 2, 52);
    Matrix b = a + 0.01 * random_matrix(10, 2, 53);
    transport::OtOptions opt;
    opt.solver = transport::Solver::entropic;
    opt.epsilon = 1e-3;
    opt.seed = 54;
    auto c = transport::ot_couple(a, b, transport::euclidean_cost, opt);
    EXPECT_EQ(c.solver, transport::Solver::entropic);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(c.target[i], c.source[i]);
    Matrix plan = transport::sinkhorn_plan(transport::euclidean_cost(a, b), 0.5);
    EXPECT_NEAR(plan.sum(), 1.0, 1e-9);
    EXPECT_LT((plan.rowwise().sum().array() - 0.1).abs().maxCoeff(), 1e-8);
}

TEST(OtPairs, BatchesAreOptimallyReordered) {
    Matrix p0 = random_matrix(50, 2, 55);
    Matrix p1 = random_matrix(50, 2, 56);
    auto sampler = transport::ot_pairs(p0, p1, transport::euclidean_cost);
    auto [x0, x1] = sampler(16, 57);
    auto again = sampler(16, 57);
    EXPECT_EQ(x0, again.first);
    EXPECT_EQ(x1, again.second);
    const double paired = (x0 - x1).rowwise().norm().sum();
    EXPECT_NEAR(paired, oracle::munkres_cost(transport::euclidean_cost(x0, x1)), 1e-12);
}

TEST(ConcatPairs, SplitsBatchAcrossSamplers) {
    Matrix a = Matrix::Zero(5, 1);
    Matrix b = Matrix::Ones(5, 1);
    auto s = transport::concat_pairs({geometry::product_pairs(a, a), geometry::product_pairs(b, b)});
    auto [x0, x1] = s(7, 1);
    ASSERT_EQ(x0.rows(), 7);
    EXPECT_EQ(x0.topRows(4).sum(), 0.0);
    EXPECT_EQ(x0.bottomRows(3).sum(), 3.0);
}

// ---------------------------------------------------------------------------
// Flow

namespace {

/// Flow whose network output is the constant c.
FlowModel constant_flow(const Matrix& c) {
    FlowModel v = FlowModel::init(static_cast<int>(c.cols()), 4, 16, 2, 60);
    zero_all(v.params);
    v.params.layers.back().bias = c;
    return v;
}

transport::FlowBatch single_interval(Matrix x0, Matrix x1, std::uint64_t seed) {
    transport::FlowBatch fb;
    const Eigen::Index n = x0.rows();
    fb.t = times(n, seed);
    fb.eps = random_matrix(n, x0.cols(), seed + 1);
    fb.tau0 = Vector::Zero(n);
    fb.tau1 = Vector::Ones(n);
    fb.x0 = std::move(x0);
    fb.x1 = std::move(x1);
    return fb;
}

} // namespace

TEST(FlowLoss, ExactVelocityGivesZero) {
    Matrix c(1, 2);
    c << 0.5, -1.5;
    Matrix x0 = random_matrix(32, 2, 61);
    Matrix x1 = x0.rowwise() + c.row(0);
    GeodesicModel g = GeodesicModel::init(2, 4, 16, 2, 62);
    ad::NoGrad guard;
    for (double sigma : {0.0, 0.2}) {
        const double loss = transport::flow_loss(nn::Net::frozen(constant_flow(c).params), constant_flow(c), g,
                                                 single_interval(x0, x1, 63), sigma)
                                .item();
        EXPECT_LT(loss, 1e-28); // x1 - x0 reproduces c up to rounding
    }
}

TEST(FlowLoss, IntervalRescalesTarget) {
    // On [0.25, 0.75] the displacement c is covered in half the time: v = 2c.
    Matrix c(1, 2);
    c << 1.0, 2.0;
    Matrix x0 = random_matrix(8, 2, 64);
    Matrix x1 = x0.rowwise() + c.row(0);
    GeodesicModel g = GeodesicModel::init(2, 4, 16, 2, 65);
    auto fb = single_interval(x0, x1, 66);
    fb.tau0.setConstant(0.25);
    fb.tau1.setConstant(0.75);
    ad::NoGrad guard;
    EXPECT_LT(transport::flow_loss(nn::Net::frozen(constant_flow(2 * c).params), constant_flow(2 * c), g, fb, 0.1).item(), 1e-28);
    EXPECT_GT(transport::flow_loss(nn::Net::frozen(constant_flow(c).params), constant_flow(c), g, fb, 0.1).item(), 0.0);
}

TEST(FlowLoss, GradientMatchesFiniteDifferences) {
    FlowModel v = FlowModel::init(2, 4, 16, 2, 67);
    GeodesicModel g = random_geodesic(68);
    auto fb = single_interval(random_matrix(6, 2, 69), random_matrix(6, 2, 70), 71);
    auto loss = [&](const nn::Net& net) { return transport::flow_loss(net, v, g, fb, 0.1); };
    auto analytic = nn::value_and_grad(v.params, loss);
    auto fd = oracle::fd_param_gradient(v.params, [&](const nn::ModelParams& p) {
        ad::NoGrad guard;
        return loss(nn::Net::frozen(p)).item();
    });
    EXPECT_LT(oracle::relative_error(analytic.grads.tensors, fd), 1e-4);
}

TEST(TrainFlow, SinglePairLearnsConstantVelocity) {
    Matrix x0(1, 2);
    x0 << -1.0, 0.5;
    Matrix x1(1, 2);
    x1 << 1.0, 1.5;
    GeodesicModel g = GeodesicModel::init(2, 4, 16, 2, 72);
    FlowModel v = FlowModel::init(2, 4, 32, 2, 73);
    nn::TrainConfig cfg;
    cfg.steps = 1500;
    cfg.batch_size = 64;
    cfg.learning_rate = 2e-3;
    cfg.ema_decay = 0.99;
    auto r = transport::train_flow(v, g, {{geometry::product_pairs(x0, x1), 0.0, 1.0}}, cfg, 0.0, 74);
    v.params = r.params;
    const Matrix target = x1 - x0;
    for (int k = 0; k <= 10; ++k) {
        Matrix p = x0 + (k / 10.0) * target;
        EXPECT_LT((v.velocity(p, k / 10.0) - target).norm(), 0.05 * target.norm()) << "t=" << k / 10.0;
    }
}

TEST(TrainFlow, TransportsCoupledPairsOnLineDataset) {
    // p1 is p0 shifted by (0, 2); the OT coupling is the shift itself.
    Rng rng(75);
    Matrix p0 = Matrix::Zero(300, 2);
    p0.col(0) = 2.0 * uniform_column(300, rng).array() - 1.0;
    Matrix shift(1, 2);
    shift << 0.0, 2.0;
    Matrix p1 = p0.rowwise() + shift.row(0);
    GeodesicModel g = GeodesicModel::init(2, 4, 16, 2, 76);
    FlowModel v = FlowModel::init(2, 8, 64, 2, 77);
    nn::TrainConfig cfg;
    cfg.steps = 2500;
    cfg.batch_size = 64;
    cfg.learning_rate = 2e-3;
    cfg.ema_decay = 0.99;
    auto pairs = transport::ot_pairs(p0, p1, transport::euclidean_cost);
    v.params = transport::train_flow(v, g, {{pairs, 0.0, 1.0}}, cfg, 0.0, 78).params;

    Matrix test = Matrix::Zero(50, 2);
    test.col(0) = 1.6 * uniform_column(50, rng).array() - 0.8;
    const Matrix end = transport::integrate(v, test, 0.0, 1.0).end();
    const Matrix expect = test.rowwise() + shift.row(0);
    const Vector err = (end - expect).rowwise().norm();
    EXPECT_LT(err.maxCoeff(), 0.1 * shift.norm());
}

// ---------------------------------------------------------------------------
// Integration

TEST(Integrate, ZeroFieldIsConstant) {
    Matrix x = random_matrix(5, 3, 80);
    auto tr = transport::integrate([](double, const Matrix& y) { return Matrix::Zero(y.rows(), y.cols()); }, x, 0.0, 1.0, 7);
    ASSERT_EQ(tr.states.size(), 8u);
    for (const auto& s : tr.states) EXPECT_EQ(s, x);
    EXPECT_EQ(tr.times(0), 0.0);
    EXPECT_EQ(tr.times(7), 1.0);
}

TEST(Integrate, ConstantFieldExact) {
    Matrix x = random_matrix(4, 2, 81);
    Matrix c(1, 2);
    c << 0.3, -2.0;
    for (auto m : {transport::Method::euler, transport::Method::rk4}) {
        auto tr = transport::integrate([&](double, const Matrix& y) -> Matrix { return c.replicate(y.rows(), 1); }, x, 0.0,
                                       1.0, 100, m);
        EXPECT_LT((tr.end() - (x.rowwise() + c.row(0))).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Integrate, LinearFieldMatchesExponential) {
    Matrix x = random_matrix(6, 2, 82);
    auto lin = [](double, const Matrix& y) { return y; };
    auto rk = transport::integrate(lin, x, 0.0, 1.0, 100, transport::Method::rk4);
    EXPECT_LT((rk.end() - std::exp(1.0) * x).cwiseAbs().maxCoeff(), 1e-6);
    // Euler is first order: doubling the steps roughly halves the error.
    const double e1 = (transport::integrate(lin, x, 0.0, 1.0, 100, transport::Method::euler).end() - std::exp(1.0) * x).norm();
    const double e2 = (transport::integrate(lin, x, 0.0, 1.0, 200, transport::Method::euler).end() - std::exp(1.0) * x).norm();
    EXPECT_NEAR(e1 / e2, 2.0, 0.05);
}

TEST(Integrate, BlowUpReportsStep) {
    Matrix x = Matrix::Ones(1, 1);
    try {
        transport::integrate([](double, const Matrix& y) -> Matrix { return y.array().square().matrix(); }, x, 0.0, 3.0,
                             30, transport::Method::euler);
        FAIL() << "expected divergence";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::divergence);
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
}

TEST(Integrate, RejectsZeroSteps) {
    EXPECT_THROW(transport::integrate([](double, const Matrix& y) { return y; }, Matrix::Ones(1, 1), 0.0, 1.0, 0), Error);
}

TEST(TrajectoryCsv, HeaderAndRows) {
    Matrix c(1, 2);
    c << 1.0, 0.0;
    auto tr = transport::integrate([&](double, const Matrix& y) -> Matrix { return c.replicate(y.rows(), 1); },
                                   Matrix::Zero(3, 2), 0.0, 1.0, 4);
    std::ostringstream os;
    transport::write_trajectory_csv(os, tr);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "traj_id,step,t,f0,f1");
    int rows = 0;
    std::string last;
    while (std::getline(is, line)) {
        ++rows;
        last = line;
    }
    EXPECT_EQ(rows, 15);
    EXPECT_EQ(last, "2,4,1,1,0");
}

// ---------------------------------------------------------------------------
// Schedule

TEST(Schedule, UniformLabels) {
    auto s = transport::multi_timepoint_schedule({1, 2, 3, 4, 5}, 3);
    ASSERT_EQ(s.intervals.size(), 3u);
    EXPECT_EQ(s.bracket().label0, 2);
    EXPECT_EQ(s.bracket().label1, 4);
    EXPECT_DOUBLE_EQ(s.eval_fraction, 0.5);
    EXPECT_DOUBLE_EQ(s.bracket().tau0, 0.25);
    EXPECT_DOUBLE_EQ(s.bracket().tau1, 0.75);
    EXPECT_DOUBLE_EQ(s.tau_holdout, 0.5);
}

TEST(Schedule, UnevenDays) {
    auto s = transport::multi_timepoint_schedule({2, 3, 4, 7}, 3);
    ASSERT_EQ(s.intervals.size(), 2u);
    EXPECT_EQ(s.bracket().label0, 2);
    EXPECT_EQ(s.bracket().label1, 4);
    EXPECT_DOUBLE_EQ(s.eval_fraction, 0.5);
    EXPECT_DOUBLE_EQ(s.intervals[1].tau0, 0.4);
    EXPECT_DOUBLE_EQ(s.intervals[1].tau1, 1.0);
    EXPECT_DOUBLE_EQ(s.tau_holdout, 0.2);
}

TEST(Schedule, BoundaryHoldoutRejected) {
    EXPECT_THROW(transport::multi_timepoint_schedule({2, 3, 4, 7}, 2), Error);
    EXPECT_THROW(transport::multi_timepoint_schedule({2, 3, 4, 7}, 7), Error);
    EXPECT_THROW(transport::multi_timepoint_schedule({2, 3, 4, 7}, 5), Error);
    EXPECT_THROW(transport::multi_timepoint_schedule({2, 3}, 3), Error);
}
