#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "eggfm/data.hpp"

using namespace eggfm;
using data::Dataset;
using data::Matrix;
using data::Vector;

namespace {

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "eggfm_test_data";
    std::filesystem::create_directories(dir);
    return dir / name;
}

Matrix gaussian(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    Rng rng(seed);
    return standard_normal(n, d, rng);
}

Matrix sample_cov(const Matrix& z) {
    Matrix c = z.rowwise() - z.colwise().mean();
    return (c.transpose() * c) / static_cast<double>(z.rows() - 1);
}

/// Two blobs along the first axis; the first `n0` rows belong to blob 0.
Dataset two_blobs(Eigen::Index n0, Eigen::Index n1, double separation, std::uint64_t seed, Eigen::Index d = 2) {
    Dataset ds;
    ds.points = gaussian(n0 + n1, d, seed);
    ds.points.bottomRows(n1).col(0).array() += separation;
    return ds;
}

double purity(const std::vector<int>& assign, Eigen::Index n0) {
    int agree = 0;
    for (std::size_t i = 0; i < assign.size(); ++i) {
        const int truth = static_cast<Eigen::Index>(i) < n0 ? 0 : 1;
        agree += assign[i] == truth;
    }
    const double frac = static_cast<double>(agree) / static_cast<double>(assign.size());
    return std::max(frac, 1.0 - frac);
}

} // namespace

TEST(LoadDataset, CsvWithTimepoints) {
    auto path = scratch("three.csv");
    io::write_file(path, "f0,f1,t\n1.5,2,0\n-1,0.25,1\n3,4,1\n");
    Dataset ds = data::load_dataset(path);
    EXPECT_EQ(ds.n(), 3);
    EXPECT_EQ(ds.d(), 2);
    ASSERT_TRUE(ds.timepoint.has_value());
    EXPECT_EQ(*ds.timepoint, (std::vector<int>{0, 1, 1}));
    EXPECT_EQ(ds.points(1, 1), 0.25);
    EXPECT_FALSE(ds.weight.has_value());
}

TEST(LoadDataset, BinaryRoundTripIsIdentical) {
    Dataset ds;
    ds.points = gaussian(17, 3, 4);
    ds.timepoint = std::vector<int>(17, 2);
    Vector w = Vector::LinSpaced(17, 1.0, 3.0);
    ds.weight = w / w.sum();
    auto path = scratch("round.bin");
    data::save_dataset(path, ds);
    Dataset back = data::load_dataset(path);
    EXPECT_EQ(back.points, ds.points);
    EXPECT_EQ(*back.timepoint, *ds.timepoint);
    EXPECT_EQ(*back.weight, *ds.weight);
}

TEST(LoadDataset, CsvRoundTripIsIdentical) {
    Dataset ds;
    ds.points = gaussian(9, 2, 5);
    ds.cluster_id = std::vector<int>{0, 1, 0, 1, 0, 1, 0, 1, 1};
    auto path = scratch("round.csv");
    data::save_dataset(path, ds);
    Dataset back = data::load_dataset(path);
    EXPECT_EQ(back.points, ds.points);
    EXPECT_EQ(*back.cluster_id, *ds.cluster_id);
}

TEST(LoadDataset, NanNamesTheRow) {
    try {
        data::parse_csv("f0,f1\n1,2\n3,nan\n");
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::format);
        EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
    }
}

TEST(LoadDataset, RejectsNonNumericAndRaggedRows) {
    EXPECT_THROW(data::parse_csv("f0,f1\n1,abc\n"), Error);
    EXPECT_THROW(data::parse_csv("f0,f1\n1,2,3\n"), Error);
    EXPECT_THROW(data::parse_csv("f0,f2\n1,2\n"), Error);
}

TEST(LoadDataset, MissingTimepointWhenRequired) {
    auto path = scratch("no_t.csv");
    io::write_file(path, "f0\n1\n2\n");
    EXPECT_THROW(data::load_dataset(path, std::nullopt, true), Error);
}

TEST(LoadDataset, TruncatedBinaryIsAnError) {
    Dataset ds;
    ds.points = gaussian(4, 2, 1);
    std::string bytes = data::encode_binary(ds);
    EXPECT_THROW(data::decode_binary(std::string_view(bytes).substr(0, bytes.size() - 3)), Error);
}

TEST(PcaWhiten, WhiteDataStaysWhite) {
    Matrix x = gaussian(500, 2, 7);
    auto [t, z] = data::pca_whiten(x, 2);
    EXPECT_LT((sample_cov(z) - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT(z.colwise().mean().cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((t.components.transpose() * t.components - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((t.inverse(z) - x).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(PcaWhiten, AnisotropicGaussian) {
    Matrix x = gaussian(10000, 2, 8);
    x.col(0) *= 2.0; // variance 4 and 1
    auto [t, z] = data::pca_whiten(x, 2);
    Matrix cov = sample_cov(z);
    EXPECT_NEAR(cov(0, 0), 1.0, 0.05);
    EXPECT_NEAR(cov(1, 1), 1.0, 0.05);
    EXPECT_LT((cov - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_NEAR(t.scales(0), 2.0, 0.1);
}

TEST(PcaWhiten, LineSegmentInThreeD) {
    Vector u = Vector::LinSpaced(50, -1.0, 2.0);
    Eigen::RowVector3d dir(1.0, 2.0, -2.0);
    Matrix x = u * dir;
    x.rowwise() += Eigen::RowVector3d(0.5, 0.0, 1.0);
    auto [t, z] = data::pca_whiten(x, 1);
    EXPECT_LT((t.inverse(z) - x).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(PcaWhiten, RankDeficientSuggestsSmallerK) {
    Vector u = Vector::LinSpaced(50, -1.0, 2.0);
    Matrix x(50, 3);
    x << u, 2 * u, -u;
    try {
        data::pca_whiten(x, 2);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("k <= 1"), std::string::npos) << e.what();
    }
    EXPECT_THROW(data::pca_whiten(x, 0), Error);
}

TEST(SampleSphere, RowsAreUnitNorm) {
    Dataset ds = data::sample_sphere(10, 2000, 3);
    for (Eigen::Index r = 0; r < ds.n(); ++r) EXPECT_NEAR(ds.points.row(r).norm(), 1.0, 1e-12);
}

TEST(SampleSphere, MeanIsZero) {
    Dataset ds = data::sample_sphere(10, 100000, 11);
    EXPECT_LT(ds.points.colwise().mean().cwiseAbs().maxCoeff(), 0.01);
}

TEST(SampleSphere, DeterministicAndRejectsBadArgs) {
    EXPECT_EQ(data::sample_sphere(3, 20, 5).points, data::sample_sphere(3, 20, 5).points);
    EXPECT_THROW(data::sample_sphere(1, 20, 5), Error);
    EXPECT_THROW(data::sample_sphere(3, 0, 5), Error);
}

TEST(FitClusters, KMeansSeparatesBlobs) {
    Dataset ds = two_blobs(300, 200, 20.0, 12);
    data::ClusterParams p;
    p.num_clusters = 2;
    p.seed = 1;
    auto m = data::fit_clusters(ds, data::ClusterMethod::kmeans, p);
    EXPECT_EQ(m.num_clusters, 2);
    EXPECT_EQ(purity(m.assignment, 300), 1.0);
    auto again = data::fit_clusters(ds, data::ClusterMethod::kmeans, p);
    EXPECT_EQ(again.assignment, m.assignment);
}

TEST(FitClusters, SingleClusterAndTooMany) {
    Dataset ds = two_blobs(5, 5, 20.0, 13);
    data::ClusterParams p;
    auto m = data::fit_clusters(ds, data::ClusterMethod::kmeans, p);
    EXPECT_EQ(m.num_clusters, 1);
    EXPECT_TRUE(std::all_of(m.assignment.begin(), m.assignment.end(), [](int a) { return a == 0; }));
    p.num_clusters = 11;
    EXPECT_THROW(data::fit_clusters(ds, data::ClusterMethod::kmeans, p), Error);
}

TEST(FitClusters, NoEmptyClusterWithDuplicatePoints) {
    Dataset ds;
    ds.points = Matrix::Zero(6, 2);
    ds.points(5, 0) = 1.0;
    data::ClusterParams p;
    p.num_clusters = 4;
    auto m = data::fit_clusters(ds, data::ClusterMethod::kmeans, p);
    for (auto s : m.sizes()) EXPECT_GT(s, 0);
}

TEST(FitClusters, GraphCommunityFindsTwoBlobs) {
    // 5 dimensions, as for PCA-reduced data. Large 2d blobs are split further at this resolution.
    Dataset ds = two_blobs(150, 150, 20.0, 14, 5);
    data::ClusterParams p;
    p.n_neighbors = 10;
    p.resolution = 0.3;
    auto m = data::fit_clusters(ds, data::ClusterMethod::graph_community, p);
    EXPECT_EQ(m.num_clusters, 2);
    EXPECT_EQ(purity(m.assignment, 150), 1.0);
    for (auto s : m.sizes()) EXPECT_GT(s, 0);
}

TEST(FitClusters, ZeroResolutionGivesConnectedComponents) {
    Dataset ds = two_blobs(100, 100, 1.0, 15);
    data::ClusterParams p;
    p.resolution = 0.0;
    auto m = data::fit_clusters(ds, data::ClusterMethod::graph_community, p);
    EXPECT_EQ(m.num_clusters, 1);
}

TEST(WeightedMinibatch, AllMassOnOnePoint) {
    Dataset ds;
    ds.points = Matrix::Zero(3, 1);
    ds.weight = Vector::Unit(3, 0);
    for (auto i : data::weighted_minibatch(ds, 1000, 3)) EXPECT_EQ(i, 0u);
}

TEST(WeightedMinibatch, UniformFrequencies) {
    Dataset ds;
    ds.points = Matrix::Zero(10, 1);
    std::vector<double> count(10, 0.0);
    for (auto i : data::weighted_minibatch(ds, 1000000, 4)) count[i] += 1.0;
    for (double c : count) EXPECT_NEAR(c / 1e6, 0.1, 0.003);
}

TEST(WeightedMinibatch, OneToTwoRatio) {
    Dataset ds;
    ds.points = Matrix::Zero(2, 1);
    ds.weight = Vector(Eigen::Vector2d(1.0 / 3.0, 2.0 / 3.0));
    double c0 = 0.0;
    double c1 = 0.0;
    for (auto i : data::weighted_minibatch(ds, 300000, 5)) (i == 0 ? c0 : c1) += 1.0;
    EXPECT_NEAR(c1 / c0, 2.0, 0.04);
}
