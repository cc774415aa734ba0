#pragma once

/**
 * @file autodiff.hpp
 *
 * @brief Matrix-valued reverse-mode automatic differentiation.
 *
 * Every value is a dense matrix (batch rows by feature columns). Operations record
 * a graph when gradient mode is on and at least one operand requires a gradient.
 * Backward rules are themselves written with recorded operations, so calling
 * `grad()` with `create_graph = true` yields gradients that can be differentiated
 * again. This is what the energy matching loss needs: the input gradient of the
 * energy appears inside a loss that is then differentiated w.r.t. the weights.
 */

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "eggfm/error.hpp"

namespace eggfm::ad {

using Matrix = Eigen::MatrixXd;

struct Node;

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return static_cast<bool>(node_); }
    const Matrix& value() const;
    bool requires_grad() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    /// Value of a 1x1 result.
    double item() const;

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& shared() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

using Backward = std::function<std::vector<Var>(const Var& upstream)>;

struct Node {
    Matrix value;
    bool requires_grad = false;
    std::vector<Var> inputs;
    Backward backward;
    const char* op = "leaf";
};

inline const Matrix& Var::value() const { return node_->value; }
inline bool Var::requires_grad() const { return node_ && node_->requires_grad; }
inline double Var::item() const {
    require(rows() == 1 && cols() == 1, ErrorCode::shape,
            "item() on a " + std::to_string(rows()) + "x" + std::to_string(cols()) + " value");
    return value()(0, 0);
}

// ---------------------------------------------------------------------------
// Gradient mode

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Scoped override of gradient recording.
class GradMode {
public:
    explicit GradMode(bool enabled) : previous_(detail::grad_mode()) { detail::grad_mode() = enabled; }
    ~GradMode() { detail::grad_mode() = previous_; }
    GradMode(const GradMode&) = delete;
    GradMode& operator=(const GradMode&) = delete;

private:
    bool previous_;
};

struct NoGrad : GradMode {
    NoGrad() : GradMode(false) {}
};

// ---------------------------------------------------------------------------
// Leaves

inline Var constant(Matrix value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

/// A leaf that gradients can be taken with respect to.
inline Var variable(Matrix value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

inline Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

namespace detail {

inline Var make_result(Matrix value, std::vector<Var> inputs, Backward backward, const char* op) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    if (grad_enabled()) {
        const bool any = std::any_of(inputs.begin(), inputs.end(),
                                     [](const Var& v) { return v.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            node->inputs = std::move(inputs);
            node->backward = std::move(backward);
        }
    }
    return Var(std::move(node));
}

inline std::string shape_str(const Var& v) {
    return std::to_string(v.rows()) + "x" + std::to_string(v.cols());
}

inline void same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        fail(ErrorCode::shape, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Operations. Each backward rule returns one entry per input.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
Var sum(const Var& a);
Var row_sum(const Var& a);
Var col_sum(const Var& a);
Var broadcast(const Var& a, Eigen::Index rows, Eigen::Index cols);
Var broadcast_cols(const Var& a, Eigen::Index cols);
Var broadcast_rows(const Var& a, Eigen::Index rows);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var pad_cols(const Var& a, Eigen::Index start, Eigen::Index total);
Var silu_derivative(const Var& a, int order);

inline Var add(const Var& a, const Var& b) {
    detail::same_shape(a, b, "add");
    return detail::make_result(a.value() + b.value(), {a, b},
                               [](const Var& g) { return std::vector<Var>{g, g}; }, "add");
}

inline Var sub(const Var& a, const Var& b) {
    detail::same_shape(a, b, "sub");
    return detail::make_result(a.value() - b.value(), {a, b},
                               [](const Var& g) { return std::vector<Var>{g, scale(g, -1.0)}; }, "sub");
}

inline Var mul(const Var& a, const Var& b) {
    detail::same_shape(a, b, "mul");
    return detail::make_result(a.value().cwiseProduct(b.value()), {a, b},
                               [a, b](const Var& g) { return std::vector<Var>{mul(g, b), mul(g, a)}; }, "mul");
}

inline Var scale(const Var& a, double s) {
    return detail::make_result(a.value() * s, {a},
                               [s](const Var& g) { return std::vector<Var>{scale(g, s)}; }, "scale");
}

inline Var add_scalar(const Var& a, double s) {
    return detail::make_result(a.value().array() + s, {a},
                               [](const Var& g) { return std::vector<Var>{g}; }, "add_scalar");
}

inline Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
    const Eigen::Index inner_a = ta ? a.rows() : a.cols();
    const Eigen::Index inner_b = tb ? b.cols() : b.rows();
    if (inner_a != inner_b) {
        fail(ErrorCode::shape, "matmul: inner dimensions differ (" + detail::shape_str(a) +
                                   (ta ? "^T" : "") + " * " + detail::shape_str(b) + (tb ? "^T" : "") + ")");
    }
    Matrix out;
    if (!ta && !tb) out.noalias() = a.value() * b.value();
    else if (!ta && tb) out.noalias() = a.value() * b.value().transpose();
    else if (ta && !tb) out.noalias() = a.value().transpose() * b.value();
    else out.noalias() = a.value().transpose() * b.value().transpose();

    return detail::make_result(std::move(out), {a, b}, [a, b, ta, tb](const Var& g) {
        if (!ta && !tb) return std::vector<Var>{matmul(g, b, false, true), matmul(a, g, true, false)};
        if (!ta && tb) return std::vector<Var>{matmul(g, b, false, false), matmul(g, a, true, false)};
        if (ta && !tb) return std::vector<Var>{matmul(b, g, false, true), matmul(a, g, false, false)};
        return std::vector<Var>{matmul(b, g, true, true), matmul(g, a, true, true)};
    }, "matmul");
}

/// a (r x c) plus a row vector (1 x c) added to every row.
inline Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        fail(ErrorCode::shape, "add_row: " + detail::shape_str(a) + " + " + detail::shape_str(row));
    }
    Matrix out = a.value().rowwise() + row.value().row(0);
    return detail::make_result(std::move(out), {a, row},
                               [](const Var& g) { return std::vector<Var>{g, col_sum(g)}; }, "add_row");
}

/// Scales row i of a (r x c) by col(i) where col is r x 1.
inline Var mul_col(const Var& a, const Var& col) {
    if (col.cols() != 1 || col.rows() != a.rows()) {
        fail(ErrorCode::shape, "mul_col: " + detail::shape_str(a) + " * " + detail::shape_str(col));
    }
    Matrix out = a.value().array().colwise() * col.value().col(0).array();
    return detail::make_result(std::move(out), {a, col}, [a, col](const Var& g) {
        return std::vector<Var>{mul_col(g, col), row_sum(mul(g, a))};
    }, "mul_col");
}

inline Var sum(const Var& a) {
    const Eigen::Index r = a.rows();
    const Eigen::Index c = a.cols();
    return detail::make_result(Matrix::Constant(1, 1, a.value().sum()), {a},
                               [r, c](const Var& g) { return std::vector<Var>{broadcast(g, r, c)}; }, "sum");
}

inline Var mean(const Var& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.rows() * a.cols()));
}

inline Var row_sum(const Var& a) {
    const Eigen::Index c = a.cols();
    Matrix out = a.value().rowwise().sum();
    return detail::make_result(std::move(out), {a},
                               [c](const Var& g) { return std::vector<Var>{broadcast_cols(g, c)}; }, "row_sum");
}

inline Var col_sum(const Var& a) {
    const Eigen::Index r = a.rows();
    Matrix out = a.value().colwise().sum();
    return detail::make_result(std::move(out), {a},
                               [r](const Var& g) { return std::vector<Var>{broadcast_rows(g, r)}; }, "col_sum");
}

inline Var broadcast(const Var& a, Eigen::Index rows, Eigen::Index cols) {
    require(a.rows() == 1 && a.cols() == 1, ErrorCode::shape, "broadcast: expects a 1x1 value");
    return detail::make_result(Matrix::Constant(rows, cols, a.value()(0, 0)), {a},
                               [](const Var& g) { return std::vector<Var>{sum(g)}; }, "broadcast");
}

inline Var broadcast_cols(const Var& a, Eigen::Index cols) {
    require(a.cols() == 1, ErrorCode::shape, "broadcast_cols: expects a column, got " + detail::shape_str(a));
    Matrix out = a.value().replicate(1, cols);
    return detail::make_result(std::move(out), {a},
                               [](const Var& g) { return std::vector<Var>{row_sum(g)}; }, "broadcast_cols");
}

inline Var broadcast_rows(const Var& a, Eigen::Index rows) {
    require(a.rows() == 1, ErrorCode::shape, "broadcast_rows: expects a row, got " + detail::shape_str(a));
    Matrix out = a.value().replicate(rows, 1);
    return detail::make_result(std::move(out), {a},
                               [](const Var& g) { return std::vector<Var>{col_sum(g)}; }, "broadcast_rows");
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    require(start >= 0 && count >= 0 && start + count <= a.cols(), ErrorCode::shape,
            "slice_cols: range out of bounds for " + detail::shape_str(a));
    const Eigen::Index total = a.cols();
    Matrix out = a.value().middleCols(start, count);
    return detail::make_result(std::move(out), {a}, [start, total](const Var& g) {
        return std::vector<Var>{pad_cols(g, start, total)};
    }, "slice_cols");
}

/// Places a into columns [start, start + a.cols()) of a zero matrix with `total` columns.
inline Var pad_cols(const Var& a, Eigen::Index start, Eigen::Index total) {
    require(start >= 0 && start + a.cols() <= total, ErrorCode::shape, "pad_cols: range out of bounds");
    Matrix out = Matrix::Zero(a.rows(), total);
    out.middleCols(start, a.cols()) = a.value();
    const Eigen::Index count = a.cols();
    return detail::make_result(std::move(out), {a}, [start, count](const Var& g) {
        return std::vector<Var>{slice_cols(g, start, count)};
    }, "pad_cols");
}

inline Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), ErrorCode::shape, "concat_cols: no inputs");
    const Eigen::Index r = parts.front().rows();
    Eigen::Index total = 0;
    for (const auto& p : parts) {
        if (p.rows() != r) {
            fail(ErrorCode::shape, "concat_cols: row mismatch " + std::to_string(r) + " vs " +
                                       std::to_string(p.rows()));
        }
        total += p.cols();
    }
    Matrix out(r, total);
    std::vector<Eigen::Index> offsets;
    Eigen::Index offset = 0;
    for (const auto& p : parts) {
        out.middleCols(offset, p.cols()) = p.value();
        offsets.push_back(offset);
        offset += p.cols();
    }
    std::vector<Eigen::Index> widths;
    for (const auto& p : parts) widths.push_back(p.cols());
    return detail::make_result(std::move(out), parts, [offsets, widths](const Var& g) {
        std::vector<Var> grads;
        grads.reserve(offsets.size());
        for (std::size_t i = 0; i < offsets.size(); ++i) grads.push_back(slice_cols(g, offsets[i], widths[i]));
        return grads;
    }, "concat_cols");
}

namespace detail {

// n-th derivative of silu(x) = x * sigmoid(x), n in [0, 3], elementwise.
inline Matrix silu_derivative_value(const Matrix& m, int order) {
    require(0 <= order && order <= 3, ErrorCode::invalid_argument,
            "silu derivative of order " + std::to_string(order) + " is not available");
    const auto x = m.array();
    const Eigen::ArrayXXd s = 1.0 / (1.0 + (-x).exp());
    switch (order) {
    case 0: return (x * s).matrix();
    case 1: return (s * (1.0 + x * (1.0 - s))).matrix();
    case 2: return (s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))).matrix();
    default: return (s * (1.0 - s) * (3.0 * (1.0 - 2.0 * s) + x * (1.0 - 6.0 * s + 6.0 * s * s))).matrix();
    }
}

} // namespace detail

inline Var silu_derivative(const Var& a, int order) {
    return detail::make_result(detail::silu_derivative_value(a.value(), order), {a}, [a, order](const Var& g) {
        return std::vector<Var>{mul(g, silu_derivative(a, order + 1))};
    }, "silu");
}

inline Var silu(const Var& a) { return silu_derivative(a, 0); }

Var cos(const Var& a);

inline Var sin(const Var& a) {
    return detail::make_result(a.value().array().sin().matrix(), {a},
                               [a](const Var& g) { return std::vector<Var>{mul(g, cos(a))}; }, "sin");
}

inline Var cos(const Var& a) {
    return detail::make_result(a.value().array().cos().matrix(), {a},
                               [a](const Var& g) { return std::vector<Var>{scale(mul(g, sin(a)), -1.0)}; }, "cos");
}

inline Var exp(const Var& a) {
    return detail::make_result(a.value().array().exp().matrix(), {a},
                               [a](const Var& g) { return std::vector<Var>{mul(g, exp(a))}; }, "exp");
}

inline Var square(const Var& a) {
    return detail::make_result(a.value().array().square().matrix(), {a},
                               [a](const Var& g) { return std::vector<Var>{scale(mul(g, a), 2.0)}; }, "square");
}

/// |a|, with subgradient 0 at 0.
inline Var abs(const Var& a) {
    Matrix sign = a.value().unaryExpr([](double x) { return static_cast<double>((x > 0) - (x < 0)); });
    return detail::make_result(a.value().cwiseAbs(), {a}, [sign = std::move(sign)](const Var& g) {
        return std::vector<Var>{mul(g, constant(sign))};
    }, "abs");
}

/// Elementwise clamp to [lo, hi]; gradient passes only where the value is strictly inside.
inline Var clamp(const Var& a, double lo, double hi) {
    Matrix mask = a.value().unaryExpr([lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
    Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
    return detail::make_result(std::move(out), {a}, [mask = std::move(mask)](const Var& g) {
        return std::vector<Var>{mul(g, constant(mask))};
    }, "clamp");
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator-(const Var& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Reverse sweep

/**
 * Gradients of `output` with respect to each entry of `wrt`.
 *
 * `seed` defaults to ones shaped like `output` (so a non-scalar output is summed).
 * With `create_graph` the returned values carry their own graph and can be
 * differentiated again. Inputs that `output` does not depend on get zeros.
 */
inline std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt, bool create_graph = false,
                             const Var& seed = Var()) {
    std::unordered_set<const Node*> targets;
    for (const auto& w : wrt) targets.insert(w.node());

    // Post-order over nodes that require grad; inputs precede their consumers.
    std::vector<Node*> order;
    std::unordered_map<const Node*, bool> reaches;
    if (output.requires_grad()) {
        std::vector<std::pair<Node*, std::size_t>> stack{{output.node(), 0}};
        std::unordered_set<const Node*> seen{output.node()};
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->inputs.size()) {
                Node* child = node->inputs[next++].node();
                if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
                continue;
            }
            bool r = targets.count(node) > 0;
            for (const auto& in : node->inputs) {
                if (in.requires_grad() && reaches[in.node()]) r = true;
            }
            reaches[node] = r;
            order.push_back(node);
            stack.pop_back();
        }
    }

    std::vector<Var> result;
    result.reserve(wrt.size());
    GradMode mode(create_graph);

    std::unordered_map<const Node*, Var> grads;
    if (output.requires_grad()) {
        Var g = seed.defined() ? seed : constant(Matrix::Ones(output.rows(), output.cols()));
        detail::same_shape(output, g, "grad seed");
        grads[output.node()] = g;
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!reaches[node] || !node->backward) continue;
        auto found = grads.find(node);
        if (found == grads.end()) continue;
        const Var upstream = found->second;
        // Interior nodes are not needed after their backward has run, unless requested.
        if (!targets.count(node)) grads.erase(found);
        std::vector<Var> input_grads = node->backward(upstream);
        for (std::size_t i = 0; i < node->inputs.size(); ++i) {
            const Var& in = node->inputs[i];
            if (!in.requires_grad() || !reaches[in.node()] || !input_grads[i].defined()) continue;
            auto slot = grads.find(in.node());
            if (slot == grads.end()) grads.emplace(in.node(), input_grads[i]);
            else slot->second = add(slot->second, input_grads[i]);
        }
    }

    for (const auto& w : wrt) {
        auto found = grads.find(w.node());
        if (found != grads.end()) result.push_back(found->second);
        else result.push_back(constant(Matrix::Zero(w.rows(), w.cols())));
    }
    return result;
}

} // namespace eggfm::ad
