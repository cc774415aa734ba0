#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "eggfm/error.hpp"

namespace eggfm {

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a tag (splitmix64).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline Eigen::MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = n(rng);
    }
    return m;
}

inline Eigen::VectorXd uniform_column(Eigen::Index n, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = u(rng);
    return v;
}

/// Draws indices i.i.d. proportional to non-negative weights (inverse CDF).
class DiscreteSampler {
public:
    explicit DiscreteSampler(const Eigen::VectorXd& weights) {
        require(weights.size() > 0, ErrorCode::invalid_argument, "sampler needs at least one weight");
        cdf_.resize(static_cast<std::size_t>(weights.size()));
        double acc = 0.0;
        for (Eigen::Index i = 0; i < weights.size(); ++i) {
            require(weights(i) >= 0.0 && std::isfinite(weights(i)), ErrorCode::invalid_argument,
                    "sampling weights must be finite and non-negative");
            acc += weights(i);
            cdf_[static_cast<std::size_t>(i)] = acc;
        }
        require(acc > 0.0, ErrorCode::invalid_argument, "sampling weights sum to zero");
    }

    std::size_t operator()(Rng& rng) const {
        std::uniform_real_distribution<double> u(0.0, cdf_.back());
        const double x = u(rng);
        // The first CDF entry strictly above x always has positive weight.
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), x);
        if (it == cdf_.end()) it = std::lower_bound(cdf_.begin(), cdf_.end(), cdf_.back());
        const std::size_t i = static_cast<std::size_t>(it - cdf_.begin());
        return i;
    }

    std::vector<std::size_t> sample(std::size_t count, Rng& rng) const {
        std::vector<std::size_t> out(count);
        for (auto& v : out) v = (*this)(rng);
        return out;
    }

private:
    std::vector<double> cdf_;
};

} // namespace eggfm
