#pragma once

#include <Eigen/Dense>
#include <optional>
#include <stdexcept>
#include <string>

#include "stalab/rng.hpp"

namespace stalab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct DomainError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// Checked product; Eigen asserts only in debug builds.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a) +
                         " * " + shape_str(b));
    return a * b;
}

// Row-wise softmax of temperature*x with max-subtraction.
inline Matrix row_softmax(const Matrix& x, double temperature) {
    if (!(temperature > 0.0))
        throw DomainError("row_softmax: temperature must be positive");
    if (!x.allFinite())
        throw DomainError("row_softmax: non-finite input");
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        Eigen::RowVectorXd row = temperature * x.row(i);
        row.array() -= row.maxCoeff();
        row = row.array().exp();
        out.row(i) = row / row.sum();
    }
    return out;
}

inline Vector softmax(const Vector& x, double temperature) {
    Matrix m = row_softmax(x.transpose(), temperature);
    return m.row(0).transpose();
}

// Infers a square grid from a token count.
inline std::pair<int, int> infer_grid(Eigen::Index l) {
    auto s = static_cast<Eigen::Index>(std::llround(std::sqrt(double(l))));
    if (s * s != l)
        throw ShapeError("token count " + std::to_string(l) +
                         " is not a square grid; pass (h, w) explicitly");
    return {int(s), int(s)};
}

// Mean pooling over non-overlapping r x r spatial blocks. z is an h*w x d
// token matrix laid out row-major over the grid.
inline Matrix spatial_downsample(const Matrix& z, int r,
                                 std::optional<std::pair<int, int>> grid = {}) {
    if (r < 1) throw ShapeError("spatial_downsample: ratio must be >= 1");
    auto [h, w] = grid ? *grid : infer_grid(z.rows());
    if (Eigen::Index(h) * w != z.rows())
        throw ShapeError("spatial_downsample: grid " + std::to_string(h) + "x" +
                         std::to_string(w) + " does not match " +
                         std::to_string(z.rows()) + " tokens");
    if (h % r != 0 || w % r != 0)
        throw ShapeError("spatial_downsample: grid " + std::to_string(h) + "x" +
                         std::to_string(w) + " not divisible by r=" +
                         std::to_string(r));
    if (r == 1) return z;
    const int ho = h / r, wo = w / r;
    Matrix out = Matrix::Zero(Eigen::Index(ho) * wo, z.cols());
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            out.row(Eigen::Index(i / r) * wo + j / r) += z.row(Eigen::Index(i) * w + j);
    out /= double(r) * r;
    return out;
}

enum class SpectralMode { converged, single_step };

struct SpectralResult {
    double sigma_max;
    Vector state; // right singular vector estimate, persistent in single_step use
};

// Largest singular value via power iteration on W^T W.
inline SpectralResult spectral_norm(const Matrix& w, SpectralMode mode,
                                    std::optional<Vector> state = {}) {
    if (w.norm() == 0.0)
        throw DomainError("spectral_norm: zero matrix");
    Vector v;
    if (state && state->size() == w.cols() && state->norm() > 0)
        v = state->normalized();
    else
        v = Vector::Constant(w.cols(), 1.0 / std::sqrt(double(w.cols())));

    auto step = [&](const Vector& x) {
        Vector y = w.transpose() * (w * x);
        double n = y.norm();
        return n > 0 ? Vector(y / n) : x;
    };

    if (mode == SpectralMode::single_step) {
        v = step(v);
    } else {
        double prev = 0.0;
        for (int it = 0; it < 100; ++it) {
            v = step(v);
            double sigma = (w * v).norm();
            if (it > 0 && std::abs(sigma - prev) <= 1e-6 * std::max(sigma, 1e-300))
                break;
            prev = sigma;
        }
    }
    return {(w * v).norm(), v};
}

inline double frobenius_norm(const Matrix& w) { return w.norm(); }

inline double operator_2_norm(const Matrix& w) {
    if (w.norm() == 0.0) return 0.0;
    return spectral_norm(w, SpectralMode::converged).sigma_max;
}

} // namespace stalab
