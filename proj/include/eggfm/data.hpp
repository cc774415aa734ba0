#pragma once

/**
 * @file data.hpp
 *
 * @brief Point-cloud datasets: file formats, PCA whitening, synthetic spheres,
 * clustering and weighted minibatch sampling.
 */

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "eggfm/error.hpp"
#include "eggfm/io.hpp"
#include "eggfm/random.hpp"

namespace eggfm::data {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Dataset {
    Matrix points; // n x d
    std::optional<std::vector<int>> timepoint;
    std::optional<std::vector<int>> cluster_id;
    std::optional<Vector> weight;

    Eigen::Index n() const { return points.rows(); }
    Eigen::Index d() const { return points.cols(); }

    /// Sampling weights; uniform 1/n when none are stored.
    Vector weights() const { return weight ? *weight : Vector::Constant(n(), 1.0 / static_cast<double>(n())); }

    int num_clusters() const {
        if (!cluster_id || cluster_id->empty()) return 1;
        return *std::max_element(cluster_id->begin(), cluster_id->end()) + 1;
    }

    void validate() const {
        require(points.allFinite(), ErrorCode::format, "dataset contains non-finite values");
        const auto rows = static_cast<std::size_t>(n());
        if (timepoint) require(timepoint->size() == rows, ErrorCode::shape, "timepoint column length mismatch");
        if (cluster_id) {
            require(cluster_id->size() == rows, ErrorCode::shape, "cluster column length mismatch");
            std::vector<char> seen(static_cast<std::size_t>(num_clusters()), 0);
            for (int c : *cluster_id) {
                require(c >= 0, ErrorCode::format, "cluster ids must be non-negative");
                seen[static_cast<std::size_t>(c)] = 1;
            }
            require(std::all_of(seen.begin(), seen.end(), [](char s) { return s != 0; }), ErrorCode::format,
                    "cluster ids must be contiguous from 0");
        }
        if (weight) {
            require(weight->size() == n(), ErrorCode::shape, "weight column length mismatch");
            require((weight->array() > 0.0).all() && weight->allFinite(), ErrorCode::format,
                    "weights must be positive and finite");
            require(std::abs(weight->sum() - 1.0) < 1e-9, ErrorCode::format, "weights must sum to 1");
        }
    }

    /// Rows whose timepoint equals `t`.
    Matrix rows_at_time(int t) const {
        require(timepoint.has_value(), ErrorCode::format, "dataset has no timepoint column");
        std::vector<Eigen::Index> idx;
        for (std::size_t i = 0; i < timepoint->size(); ++i) {
            if ((*timepoint)[i] == t) idx.push_back(static_cast<Eigen::Index>(i));
        }
        Matrix out(static_cast<Eigen::Index>(idx.size()), d());
        for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = points.row(idx[i]);
        return out;
    }

    std::vector<int> timepoints() const {
        require(timepoint.has_value(), ErrorCode::format, "dataset has no timepoint column");
        std::vector<int> t = *timepoint;
        std::sort(t.begin(), t.end());
        t.erase(std::unique(t.begin(), t.end()), t.end());
        return t;
    }
};

inline Dataset subset(const Dataset& ds, const std::vector<Eigen::Index>& rows) {
    Dataset out;
    out.points.resize(static_cast<Eigen::Index>(rows.size()), ds.d());
    for (std::size_t i = 0; i < rows.size(); ++i) out.points.row(static_cast<Eigen::Index>(i)) = ds.points.row(rows[i]);
    auto pick = [&](const std::vector<int>& v) {
        std::vector<int> r;
        for (auto i : rows) r.push_back(v[static_cast<std::size_t>(i)]);
        return r;
    };
    if (ds.timepoint) out.timepoint = pick(*ds.timepoint);
    if (ds.cluster_id) out.cluster_id = pick(*ds.cluster_id);
    if (ds.weight) {
        Vector w(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) w(static_cast<Eigen::Index>(i)) = (*ds.weight)(rows[i]);
        out.weight = w / w.sum();
    }
    return out;
}

// ---------------------------------------------------------------------------
// File formats

enum class Format { csv, binary };

inline Format format_for_path(const std::filesystem::path& path) {
    return path.extension() == ".csv" ? Format::csv : Format::binary;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

struct Columns {
    std::vector<int> feature; // column index of f0, f1, ...
    int t = -1;
    int w = -1;
    int c = -1;
};

inline Columns resolve_columns(const std::vector<std::string>& header, const std::string& what) {
    Columns cols;
    std::map<int, int> features;
    for (std::size_t i = 0; i < header.size(); ++i) {
        const std::string& h = header[i];
        const int col = static_cast<int>(i);
        if (h == "t") cols.t = col;
        else if (h == "w") cols.w = col;
        else if (h == "c") cols.c = col;
        else if (h.size() > 1 && h[0] == 'f' && std::all_of(h.begin() + 1, h.end(), ::isdigit)) {
            features[std::stoi(h.substr(1))] = col;
        } else {
            fail(ErrorCode::format, what + ": unknown column '" + h + "'");
        }
    }
    for (int k = 0; k < static_cast<int>(features.size()); ++k) {
        auto it = features.find(k);
        if (it == features.end()) fail(ErrorCode::format, what + ": feature columns must be f0..f{d-1}; missing f" + std::to_string(k));
        cols.feature.push_back(it->second);
    }
    require(!cols.feature.empty(), ErrorCode::format, what + ": no feature columns");
    return cols;
}

inline int parse_label(double v, const std::string& what) {
    if (v != std::floor(v)) fail(ErrorCode::format, what + " must be an integer");
    return static_cast<int>(v);
}

inline Dataset assemble(std::vector<std::vector<double>> rows, const Columns& cols) {
    Dataset ds;
    ds.points.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.feature.size()));
    std::vector<int> t;
    std::vector<int> c;
    Vector w(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t k = 0; k < cols.feature.size(); ++k) {
            ds.points(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = rows[r][static_cast<std::size_t>(cols.feature[k])];
        }
        const std::string where = "row " + std::to_string(r + 1);
        if (cols.t >= 0) t.push_back(parse_label(rows[r][static_cast<std::size_t>(cols.t)], where + " timepoint"));
        if (cols.c >= 0) c.push_back(parse_label(rows[r][static_cast<std::size_t>(cols.c)], where + " cluster id"));
        if (cols.w >= 0) {
            const double v = rows[r][static_cast<std::size_t>(cols.w)];
            require(v > 0.0, ErrorCode::format, where + ": weight must be positive");
            w(static_cast<Eigen::Index>(r)) = v;
        }
    }
    if (cols.t >= 0) ds.timepoint = std::move(t);
    if (cols.c >= 0) ds.cluster_id = std::move(c);
    if (cols.w >= 0) ds.weight = w / w.sum();
    return ds;
}

} // namespace detail

/// CSV with header "f0,...,f{d-1}" plus optional "t" (timepoint), "w" (weight), "c" (cluster id).
inline Dataset parse_csv(const std::string& text, const std::string& what = "csv") {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) fail(ErrorCode::format, what + ": empty file");
    const auto header = detail::split_csv_line(line);
    const auto cols = detail::resolve_columns(header, what);
    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) {
            fail(ErrorCode::format, what + ": row " + std::to_string(rows.size() + 1) + " (line " +
                                        std::to_string(line_no) + ") has " + std::to_string(cells.size()) +
                                        " cells, expected " + std::to_string(header.size()));
        }
        std::vector<double> values;
        for (std::size_t k = 0; k < cells.size(); ++k) {
            double v = 0.0;
            std::size_t used = 0;
            try {
                v = std::stod(cells[k], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != cells[k].size()) {
                fail(ErrorCode::format, what + ": row " + std::to_string(rows.size() + 1) + " column '" + header[k] +
                                            "' is not numeric ('" + cells[k] + "')");
            }
            if (!std::isfinite(v)) {
                fail(ErrorCode::format, what + ": row " + std::to_string(rows.size() + 1) + " column '" + header[k] +
                                            "' is not finite");
            }
            values.push_back(v);
        }
        rows.push_back(std::move(values));
    }
    require(!rows.empty(), ErrorCode::format, what + ": no data rows");
    Dataset ds = detail::assemble(std::move(rows), cols);
    ds.validate();
    return ds;
}

inline std::string to_csv(const Dataset& ds) {
    std::ostringstream out;
    out.precision(17);
    for (Eigen::Index k = 0; k < ds.d(); ++k) out << (k ? "," : "") << 'f' << k;
    if (ds.timepoint) out << ",t";
    if (ds.cluster_id) out << ",c";
    if (ds.weight) out << ",w";
    out << '\n';
    for (Eigen::Index r = 0; r < ds.n(); ++r) {
        for (Eigen::Index k = 0; k < ds.d(); ++k) out << (k ? "," : "") << ds.points(r, k);
        if (ds.timepoint) out << ',' << (*ds.timepoint)[static_cast<std::size_t>(r)];
        if (ds.cluster_id) out << ',' << (*ds.cluster_id)[static_cast<std::size_t>(r)];
        if (ds.weight) out << ',' << (*ds.weight)(r);
        out << '\n';
    }
    return out.str();
}

inline constexpr std::string_view dataset_magic = "EGGFMDS1";

/// Binary matrix: JSON header (n, d, column roles, endianness) + little-endian f64 row-major payload.
inline std::string encode_binary(const Dataset& ds) {
    io::json columns = io::json::array();
    for (Eigen::Index k = 0; k < ds.d(); ++k) columns.push_back("f" + std::to_string(k));
    if (ds.timepoint) columns.push_back("t");
    if (ds.cluster_id) columns.push_back("c");
    if (ds.weight) columns.push_back("w");
    io::json header = {{"n", ds.n()},
                       {"d", ds.d()},
                       {"columns", columns},
                       {"endianness", "little"},
                       {"layout", "row-major"}};
    std::vector<double> payload;
    payload.reserve(static_cast<std::size_t>(ds.n()) * columns.size());
    for (Eigen::Index r = 0; r < ds.n(); ++r) {
        for (Eigen::Index k = 0; k < ds.d(); ++k) payload.push_back(ds.points(r, k));
        if (ds.timepoint) payload.push_back((*ds.timepoint)[static_cast<std::size_t>(r)]);
        if (ds.cluster_id) payload.push_back((*ds.cluster_id)[static_cast<std::size_t>(r)]);
        if (ds.weight) payload.push_back((*ds.weight)(r));
    }
    return io::encode_framed(dataset_magic, header, payload);
}

inline Dataset decode_binary(std::string_view bytes, const std::string& what = "dataset") {
    io::Framed f = io::decode_framed(bytes, dataset_magic, what);
    std::vector<std::string> header;
    std::size_t n = 0;
    try {
        require(f.header.value("endianness", std::string("little")) == "little", ErrorCode::format,
                what + ": only little-endian payloads are supported");
        header = f.header.at("columns").get<std::vector<std::string>>();
        n = f.header.at("n").get<std::size_t>();
    } catch (const io::json::exception& e) {
        fail(ErrorCode::format, what + ": bad header (" + e.what() + ")");
    }
    const auto cols = detail::resolve_columns(header, what);
    require(f.payload.size() == n * header.size(), ErrorCode::format,
            what + ": payload holds " + std::to_string(f.payload.size()) + " values, header declares " +
                std::to_string(n * header.size()));
    std::vector<std::vector<double>> rows(n, std::vector<double>(header.size()));
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t k = 0; k < header.size(); ++k) {
            const double v = f.payload[r * header.size() + k];
            if (!std::isfinite(v)) {
                fail(ErrorCode::format, what + ": row " + std::to_string(r + 1) + " column '" + header[k] + "' is not finite");
            }
            rows[r][k] = v;
        }
    }
    Dataset ds = detail::assemble(std::move(rows), cols);
    ds.validate();
    return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path, std::optional<Format> format = std::nullopt,
                            bool require_timepoints = false) {
    const Format fmt = format.value_or(format_for_path(path));
    const std::string bytes = io::read_file(path);
    Dataset ds = fmt == Format::csv ? parse_csv(bytes, path.string()) : decode_binary(bytes, path.string());
    if (require_timepoints && !ds.timepoint) {
        fail(ErrorCode::format, path.string() + ": a timepoint column 't' is required");
    }
    return ds;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds, std::optional<Format> format = std::nullopt) {
    const Format fmt = format.value_or(format_for_path(path));
    io::write_file(path, fmt == Format::csv ? to_csv(ds) : encode_binary(ds));
}

// ---------------------------------------------------------------------------
// PCA whitening

struct PcaTransform {
    Vector mean;       // d
    Matrix components; // d x k, orthonormal columns
    Vector scales;     // k, standard deviation along each component

    Matrix apply(const Matrix& x) const {
        Matrix centered = x.rowwise() - mean.transpose();
        return (centered * components) * scales.cwiseInverse().asDiagonal();
    }

    Matrix inverse(const Matrix& z) const {
        Matrix x = (z * scales.asDiagonal()) * components.transpose();
        return x.rowwise() + mean.transpose();
    }
};

/// Projects onto the top-k principal axes and scales each to unit sample variance.
inline std::pair<PcaTransform, Matrix> pca_whiten(const Matrix& points, int k) {
    const Eigen::Index n = points.rows();
    const Eigen::Index d = points.cols();
    require(k >= 1 && k <= d, ErrorCode::invalid_argument, "pca_whiten: k must be in [1, d]");
    require(n > k, ErrorCode::invalid_argument, "pca_whiten: need more rows than components");
    PcaTransform t;
    t.mean = points.colwise().mean().transpose();
    Matrix centered = points.rowwise() - t.mean.transpose();
    Matrix cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    require(eig.info() == Eigen::Success, ErrorCode::divergence, "pca_whiten: eigendecomposition failed");
    // Eigen sorts ascending; take the last k in reverse.
    t.components.resize(d, k);
    t.scales.resize(k);
    const double top = std::sqrt(std::max(eig.eigenvalues()(d - 1), 0.0));
    for (int j = 0; j < k; ++j) {
        const Eigen::Index src = d - 1 - j;
        const double s = std::sqrt(std::max(eig.eigenvalues()(src), 0.0));
        if (!(s > 1e-10 * std::max(top, 1e-300))) {
            fail(ErrorCode::invalid_argument, "pca_whiten: component " + std::to_string(j + 1) +
                                                  " has ~zero variance (rank-deficient data); use k <= " +
                                                  std::to_string(j));
        }
        Vector v = eig.eigenvectors().col(src);
        // Deterministic sign: largest-magnitude entry positive.
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        t.components.col(j) = v;
        t.scales(j) = s;
    }
    Matrix z = t.apply(points);
    return {std::move(t), std::move(z)};
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Uniform samples on the unit sphere S^{dim-1} in R^dim.
inline Dataset sample_sphere(int dim, Eigen::Index n, std::uint64_t seed) {
    require(dim >= 2, ErrorCode::invalid_argument, "sample_sphere: dim must be >= 2");
    require(n >= 1, ErrorCode::invalid_argument, "sample_sphere: n must be >= 1");
    Rng rng(seed);
    Dataset ds;
    ds.points = standard_normal(n, dim, rng);
    for (Eigen::Index r = 0; r < n; ++r) {
        double norm = ds.points.row(r).norm();
        while (norm < 1e-12) {
            ds.points.row(r) = standard_normal(1, dim, rng);
            norm = ds.points.row(r).norm();
        }
        ds.points.row(r) /= norm;
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Clustering

enum class ClusterMethod { kmeans, graph_community };

struct ClusterParams {
    int num_clusters = 1;      // k-means J
    int n_neighbors = 10;      // kNN graph degree for community detection
    double resolution = 0.3;   // modularity resolution
    int max_iterations = 100;
    std::uint64_t seed = 0;
};

struct ClusterModel {
    ClusterMethod method = ClusterMethod::kmeans;
    int num_clusters = 1;
    Matrix centers; // J x d (cluster means for either method)
    std::vector<int> assignment;
    std::vector<Eigen::Index> sizes() const {
        std::vector<Eigen::Index> s(static_cast<std::size_t>(num_clusters), 0);
        for (int a : assignment) ++s[static_cast<std::size_t>(a)];
        return s;
    }

    /// Nearest-center label for new points.
    std::vector<int> predict(const Matrix& x) const {
        std::vector<int> out(static_cast<std::size_t>(x.rows()));
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            Eigen::Index best = 0;
            (centers.rowwise() - x.row(r)).rowwise().squaredNorm().minCoeff(&best);
            out[static_cast<std::size_t>(r)] = static_cast<int>(best);
        }
        return out;
    }
};

namespace detail {

/// Relabels so ids are contiguous from 0 in order of first appearance.
inline int compact_labels(std::vector<int>& labels) {
    std::map<int, int> remap;
    for (int& l : labels) {
        auto [it, inserted] = remap.emplace(l, static_cast<int>(remap.size()));
        l = it->second;
    }
    return static_cast<int>(remap.size());
}

inline Matrix label_means(const Matrix& x, const std::vector<int>& labels, int k) {
    Matrix c = Matrix::Zero(k, x.cols());
    Vector counts = Vector::Zero(k);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        c.row(labels[static_cast<std::size_t>(r)]) += x.row(r);
        counts(labels[static_cast<std::size_t>(r)]) += 1.0;
    }
    for (int j = 0; j < k; ++j) c.row(j) /= std::max(counts(j), 1.0);
    return c;
}

inline ClusterModel kmeans(const Matrix& x, const ClusterParams& p) {
    const Eigen::Index n = x.rows();
    const int k = p.num_clusters;
    Rng rng(p.seed);
    // k-means++ seeding
    Matrix centers(k, x.cols());
    std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
    centers.row(0) = x.row(first(rng));
    Vector d2 = (x.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int j = 1; j < k; ++j) {
        const Eigen::Index pick = d2.sum() > 0 ? static_cast<Eigen::Index>(DiscreteSampler(d2)(rng)) : first(rng);
        centers.row(j) = x.row(pick);
        d2 = d2.cwiseMin((x.rowwise() - centers.row(j)).rowwise().squaredNorm());
    }
    std::vector<int> assign(static_cast<std::size_t>(n), -1);
    for (int iter = 0; iter < p.max_iterations; ++iter) {
        bool changed = false;
        for (Eigen::Index r = 0; r < n; ++r) {
            Eigen::Index best = 0;
            (centers.rowwise() - x.row(r)).rowwise().squaredNorm().minCoeff(&best);
            if (assign[static_cast<std::size_t>(r)] != best) {
                assign[static_cast<std::size_t>(r)] = static_cast<int>(best);
                changed = true;
            }
        }
        // Refill empty clusters with the point farthest from its center.
        std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
        for (int a : assign) ++counts[static_cast<std::size_t>(a)];
        for (int j = 0; j < k; ++j) {
            if (counts[static_cast<std::size_t>(j)] > 0) continue;
            Eigen::Index far = 0;
            double worst = -1.0;
            for (Eigen::Index r = 0; r < n; ++r) {
                const int a = assign[static_cast<std::size_t>(r)];
                if (counts[static_cast<std::size_t>(a)] <= 1) continue;
                const double dd = (x.row(r) - centers.row(a)).squaredNorm();
                if (dd > worst) {
                    worst = dd;
                    far = r;
                }
            }
            --counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(far)])];
            assign[static_cast<std::size_t>(far)] = j;
            counts[static_cast<std::size_t>(j)] = 1;
            changed = true;
        }
        centers = label_means(x, assign, k);
        if (!changed) break;
    }
    ClusterModel m;
    m.method = ClusterMethod::kmeans;
    m.num_clusters = k;
    m.centers = std::move(centers);
    m.assignment = std::move(assign);
    return m;
}

struct WeightedGraph {
    // adjacency lists with weights; self loops allowed (after aggregation)
    std::vector<std::vector<std::pair<int, double>>> adj;
    std::vector<double> degree;
    double total = 0.0; // sum of degrees = 2m
};

inline WeightedGraph knn_graph(const Matrix& x, int k) {
    const Eigen::Index n = x.rows();
    std::vector<std::map<int, double>> sym(static_cast<std::size_t>(n));
    std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) dist[static_cast<std::size_t>(j)] = {(x.row(i) - x.row(j)).squaredNorm(), static_cast<int>(j)};
        const auto kk = static_cast<std::size_t>(std::min<Eigen::Index>(k + 1, n));
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
        for (std::size_t q = 0; q < kk; ++q) {
            const int j = dist[q].second;
            if (j == i) continue;
            sym[static_cast<std::size_t>(i)][j] = 1.0;
            sym[static_cast<std::size_t>(j)][static_cast<int>(i)] = 1.0;
        }
    }
    WeightedGraph g;
    g.adj.resize(static_cast<std::size_t>(n));
    g.degree.assign(static_cast<std::size_t>(n), 0.0);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (auto [j, w] : sym[static_cast<std::size_t>(i)]) {
            g.adj[static_cast<std::size_t>(i)].emplace_back(j, w);
            g.degree[static_cast<std::size_t>(i)] += w;
        }
        g.total += g.degree[static_cast<std::size_t>(i)];
    }
    return g;
}

/// One local-moving phase of Louvain; returns true if any node moved.
inline bool local_moving(const WeightedGraph& g, std::vector<int>& community, double resolution, Rng& rng) {
    const std::size_t n = g.adj.size();
    std::vector<double> comm_degree(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) comm_degree[static_cast<std::size_t>(community[i])] += g.degree[i];
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    bool any = false;
    bool improved = true;
    std::vector<double> link(n, 0.0);
    std::vector<int> touched;
    while (improved) {
        improved = false;
        for (std::size_t i : order) {
            const int own = community[i];
            touched.clear();
            double self = 0.0;
            for (auto [j, w] : g.adj[i]) {
                if (static_cast<std::size_t>(j) == i) {
                    self += w;
                    continue;
                }
                const int c = community[static_cast<std::size_t>(j)];
                if (link[static_cast<std::size_t>(c)] == 0.0) touched.push_back(c);
                link[static_cast<std::size_t>(c)] += w;
            }
            (void)self;
            const double ki = g.degree[i];
            comm_degree[static_cast<std::size_t>(own)] -= ki;
            // Gain of joining c (relative to isolation): link_c - resolution * ki * deg_c / 2m
            double best_gain = link[static_cast<std::size_t>(own)] -
                               resolution * ki * comm_degree[static_cast<std::size_t>(own)] / g.total;
            int best = own;
            for (int c : touched) {
                const double gain = link[static_cast<std::size_t>(c)] -
                                    resolution * ki * comm_degree[static_cast<std::size_t>(c)] / g.total;
                if (gain > best_gain + 1e-12 || (std::abs(gain - best_gain) <= 1e-12 && c < best && gain > 0)) {
                    best_gain = gain;
                    best = c;
                }
            }
            comm_degree[static_cast<std::size_t>(best)] += ki;
            if (best != own) {
                community[i] = best;
                improved = true;
                any = true;
            }
            for (int c : touched) link[static_cast<std::size_t>(c)] = 0.0;
            link[static_cast<std::size_t>(own)] = 0.0;
        }
    }
    return any;
}

inline WeightedGraph aggregate(const WeightedGraph& g, const std::vector<int>& community, int k) {
    std::vector<std::map<int, double>> w(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < g.adj.size(); ++i) {
        for (auto [j, wt] : g.adj[i]) w[static_cast<std::size_t>(community[i])][community[static_cast<std::size_t>(j)]] += wt;
    }
    WeightedGraph out;
    out.adj.resize(static_cast<std::size_t>(k));
    out.degree.assign(static_cast<std::size_t>(k), 0.0);
    for (int c = 0; c < k; ++c) {
        for (auto [d, wt] : w[static_cast<std::size_t>(c)]) {
            out.adj[static_cast<std::size_t>(c)].emplace_back(d, wt);
            out.degree[static_cast<std::size_t>(c)] += wt;
        }
        out.total += out.degree[static_cast<std::size_t>(c)];
    }
    return out;
}

/// Multi-level Louvain modularity optimization on a kNN graph (brute-force neighbors, O(n^2 d)).
inline ClusterModel graph_community(const Matrix& x, const ClusterParams& p) {
    const std::size_t n = static_cast<std::size_t>(x.rows());
    Rng rng(p.seed);
    WeightedGraph g = knn_graph(x, p.n_neighbors);
    std::vector<int> node_comm(n);
    std::iota(node_comm.begin(), node_comm.end(), 0);
    for (int level = 0; level < 32; ++level) {
        std::vector<int> comm(g.adj.size());
        std::iota(comm.begin(), comm.end(), 0);
        const bool moved = local_moving(g, comm, p.resolution, rng);
        const int k = compact_labels(comm);
        for (auto& c : node_comm) c = comm[static_cast<std::size_t>(c)];
        if (!moved || k == static_cast<int>(g.adj.size())) break;
        g = aggregate(g, comm, k);
    }
    ClusterModel m;
    m.method = ClusterMethod::graph_community;
    m.num_clusters = compact_labels(node_comm);
    m.assignment = std::move(node_comm);
    m.centers = label_means(x, m.assignment, m.num_clusters);
    return m;
}

} // namespace detail

inline ClusterModel fit_clusters(const Dataset& ds, ClusterMethod method, const ClusterParams& params) {
    require(ds.n() >= 1, ErrorCode::invalid_argument, "fit_clusters: empty dataset");
    if (method == ClusterMethod::kmeans) {
        require(params.num_clusters >= 1, ErrorCode::invalid_argument, "fit_clusters: J must be >= 1");
        require(params.num_clusters <= ds.n(), ErrorCode::invalid_argument,
                "fit_clusters: J = " + std::to_string(params.num_clusters) + " exceeds n = " + std::to_string(ds.n()));
        if (params.num_clusters == 1) {
            ClusterModel m;
            m.num_clusters = 1;
            m.assignment.assign(static_cast<std::size_t>(ds.n()), 0);
            m.centers = ds.points.colwise().mean();
            return m;
        }
        return detail::kmeans(ds.points, params);
    }
    require(params.n_neighbors >= 1, ErrorCode::invalid_argument, "fit_clusters: n_neighbors must be >= 1");
    require(params.resolution >= 0.0, ErrorCode::invalid_argument, "fit_clusters: resolution must be >= 0");
    return detail::graph_community(ds.points, params);
}

// ---------------------------------------------------------------------------
// Minibatches

/// Indices drawn i.i.d. proportional to the dataset weights.
inline std::vector<std::size_t> weighted_minibatch(const Dataset& ds, std::size_t batch_size, std::uint64_t seed) {
    Rng rng(seed);
    return DiscreteSampler(ds.weights()).sample(batch_size, rng);
}

} // namespace eggfm::data
