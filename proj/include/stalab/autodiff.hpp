#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stalab/core.hpp"

namespace stalab::ad {

using stalab::Matrix;
using stalab::Vector;

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool consumed = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    }
};

inline Var leaf(Matrix v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

inline Var constant(Matrix v) { return leaf(std::move(v), false); }

namespace detail {

inline Var make(Matrix value, std::vector<Var> parents,
                std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) { n->requires_grad = true; break; }
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

inline void accum(const Var& p, const Matrix& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad += g;
}

} // namespace detail

inline Var add(const Var& a, const Var& b) {
    return detail::make(a->value + b->value, {a, b}, [a, b](Node& n) {
        detail::accum(a, n.grad);
        detail::accum(b, n.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    return detail::make(a->value - b->value, {a, b}, [a, b](Node& n) {
        detail::accum(a, n.grad);
        detail::accum(b, -n.grad);
    });
}

inline Var scale(const Var& a, double c) {
    return detail::make(c * a->value, {a}, [a, c](Node& n) {
        detail::accum(a, c * n.grad);
    });
}

inline Var matmul(const Var& a, const Var& b) {
    return detail::make(stalab::matmul(a->value, b->value), {a, b}, [a, b](Node& n) {
        detail::accum(a, n.grad * b->value.transpose());
        detail::accum(b, a->value.transpose() * n.grad);
    });
}

// a * b^T
inline Var matmul_bt(const Var& a, const Var& b) {
    if (a->value.cols() != b->value.cols())
        throw stalab::ShapeError("matmul_bt: column dimensions disagree");
    return detail::make(a->value * b->value.transpose(), {a, b}, [a, b](Node& n) {
        detail::accum(a, n.grad * b->value);
        detail::accum(b, n.grad.transpose() * a->value);
    });
}

// Broadcast row-vector bias (1 x d) over every row.
inline Var bias_add(const Var& a, const Var& bias) {
    Matrix out = a->value;
    out.rowwise() += Eigen::RowVectorXd(bias->value.row(0));
    return detail::make(std::move(out), {a, bias}, [a, bias](Node& n) {
        detail::accum(a, n.grad);
        detail::accum(bias, n.grad.colwise().sum());
    });
}

inline Var row_softmax(const Var& a, double temperature) {
    Matrix y = stalab::row_softmax(a->value, temperature);
    return detail::make(y, {a}, [a, y, temperature](Node& n) {
        Matrix g(y.rows(), y.cols());
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            double dot = n.grad.row(i).dot(y.row(i));
            g.row(i) = temperature * (y.row(i).array() * (n.grad.row(i).array() - dot)).matrix();
        }
        detail::accum(a, g);
    });
}

inline Var instance_center(const Var& a) {
    Matrix out = a->value.rowwise() - Eigen::RowVectorXd(a->value.colwise().mean());
    return detail::make(std::move(out), {a}, [a](Node& n) {
        Matrix g = n.grad.rowwise() - Eigen::RowVectorXd(n.grad.colwise().mean());
        detail::accum(a, g);
    });
}

// Global layer norm with scalar affine parameters (1x1 vars).
inline Var layer_norm(const Var& a, const Var& alpha, const Var& beta, double epsilon) {
    const double mu = a->value.mean();
    Matrix centered = a->value.array() - mu;
    const double s = std::sqrt(centered.array().square().mean());
    Matrix unit = centered / (s + epsilon);
    const double al = alpha->value(0, 0), be = beta->value(0, 0);
    Matrix out = (al * unit.array() + be).matrix();
    const double count = double(a->value.size());
    return detail::make(std::move(out), {a, alpha, beta},
                        [a, alpha, beta, unit, centered, s, epsilon, al, count](Node& n) {
        double gmean = n.grad.mean();
        double gdotc = (n.grad.array() * centered.array()).sum();
        Matrix g = al / (s + epsilon) *
                   (n.grad.array() - gmean -
                    centered.array() * (gdotc / (count * std::max(s, 1e-300) * (s + epsilon))))
                       .matrix();
        detail::accum(a, g);
        Matrix ga1(1, 1);
        ga1(0, 0) = (n.grad.array() * unit.array()).sum();
        detail::accum(alpha, ga1);
        Matrix gb(1, 1);
        gb(0, 0) = n.grad.sum();
        detail::accum(beta, gb);
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw stalab::ShapeError("concat_rows: empty");
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front()->value.cols();
    for (const auto& p : parts) rows += p->value.rows();
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p->value.rows()) = p->value;
        at += p->value.rows();
    }
    return detail::make(std::move(out), parts, [parts](Node& n) {
        Eigen::Index at = 0;
        for (const auto& p : parts) {
            detail::accum(p, n.grad.middleRows(at, p->value.rows()));
            at += p->value.rows();
        }
    });
}

// Builds a matrix whose i-th row is row `rows[i].second` of var `rows[i].first`.
inline Var stack_rows(const std::vector<std::pair<Var, Eigen::Index>>& rows) {
    if (rows.empty()) throw stalab::ShapeError("stack_rows: empty");
    const Eigen::Index cols = rows.front().first->value.cols();
    Matrix out(Eigen::Index(rows.size()), cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.row(Eigen::Index(i)) = rows[i].first->value.row(rows[i].second);
    std::vector<Var> parents;
    parents.reserve(rows.size());
    for (const auto& [v, r] : rows) parents.push_back(v);
    return detail::make(std::move(out), std::move(parents), [rows](Node& n) {
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& [p, r] = rows[i];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            p->grad.row(r) += n.grad.row(Eigen::Index(i));
        }
    });
}

inline Var spatial_downsample(const Var& a, int r, std::pair<int, int> grid) {
    Matrix out = stalab::spatial_downsample(a->value, r, grid);
    return detail::make(std::move(out), {a}, [a, r, grid](Node& n) {
        const auto [h, w] = grid;
        const int wo = w / r;
        Matrix g = Matrix::Zero(a->value.rows(), a->value.cols());
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                g.row(Eigen::Index(i) * w + j) =
                    n.grad.row(Eigen::Index(i / r) * wo + j / r) / (double(r) * r);
        detail::accum(a, g);
    });
}

// mean((a - target)^2) over all elements, as a 1x1 var.
inline Var mse_loss(const Var& a, const Matrix& target) {
    if (a->value.rows() != target.rows() || a->value.cols() != target.cols())
        throw stalab::ShapeError("mse_loss: shape mismatch");
    Matrix diff = a->value - target;
    Matrix out(1, 1);
    out(0, 0) = diff.array().square().mean();
    const double inv = 2.0 / double(diff.size());
    return detail::make(std::move(out), {a}, [a, diff, inv](Node& n) {
        detail::accum(a, n.grad(0, 0) * inv * diff);
    });
}

// Sum of squared entries, as a 1x1 var.
inline Var squared_norm(const Var& a) {
    Matrix out(1, 1);
    out(0, 0) = a->value.squaredNorm();
    return detail::make(std::move(out), {a}, [a](Node& n) {
        detail::accum(a, 2.0 * n.grad(0, 0) * a->value);
    });
}

inline void backward(const Var& loss) {
    if (loss->value.rows() != 1 || loss->value.cols() != 1)
        throw stalab::ShapeError("backward: loss must be scalar");
    if (loss->consumed)
        throw std::logic_error("backward: graph already consumed");
    loss->consumed = true;

    // iterative post-order DFS for a topological order
    std::vector<Var> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Var, std::size_t>> stack{{loss, 0}};
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Var next = node->parents[idx++];
            if (next->requires_grad && seen.insert(next.get()).second)
                stack.push_back({next, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->grad = Matrix::Ones(1, 1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node& n = **it;
        if (n.backprop && n.grad.size() != 0) n.backprop(n);
    }
}

} // namespace stalab::ad
