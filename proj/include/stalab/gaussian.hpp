#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "stalab/core.hpp"

namespace stalab {

// Mean/covariance pair for a d-dimensional row variable. Covariance is
// symmetrized on construction and checked for positive semi-definiteness.
struct GaussianSpec {
    Vector mean;
    Matrix cov;

    GaussianSpec() = default;
    GaussianSpec(Vector mu, Matrix sigma) : mean(std::move(mu)) {
        if (sigma.rows() != sigma.cols() || sigma.rows() != mean.size())
            throw ShapeError("GaussianSpec: cov must be dxd with d = mean size");
        if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, sigma.norm()))
            throw DomainError("GaussianSpec: covariance is not symmetric");
        cov = 0.5 * (sigma + sigma.transpose());
        Eigen::SelfAdjointEigenSolver<Matrix> es(cov, Eigen::EigenvaluesOnly);
        if (es.eigenvalues().minCoeff() < -1e-8 * std::max(1.0, cov.norm()))
            throw DomainError("GaussianSpec: covariance is not positive semi-definite");
    }

    Eigen::Index dim() const { return mean.size(); }

    static GaussianSpec standard(Eigen::Index d) {
        return GaussianSpec(Vector::Zero(d), Matrix::Identity(d, d));
    }
};

// n i.i.d. rows from N(mean, cov) via the Cholesky factor of cov + 1e-12 I.
// The jitter admits rank-deficient covariances.
inline Matrix sample_gaussian(const GaussianSpec& spec, Eigen::Index rows, RngStream& rng) {
    const Eigen::Index d = spec.dim();
    Matrix jittered = spec.cov + 1e-12 * Matrix::Identity(d, d);
    Eigen::LLT<Matrix> llt(jittered);
    if (llt.info() != Eigen::Success)
        throw DomainError("sample_gaussian: covariance not PSD (Cholesky failed after jitter)");
    Matrix lower = llt.matrixL();
    Matrix out(rows, d);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < d; ++j)
            out(i, j) = rng.normal();
    out = out * lower.transpose();
    out.rowwise() += spec.mean.transpose();
    return out;
}

// Sample mean and unbiased covariance (divisor n-1), accumulated in fixed
// row order.
inline GaussianSpec estimate_stats(const Matrix& samples) {
    const Eigen::Index n = samples.rows();
    if (n < 2)
        throw DomainError("estimate_stats: need at least 2 samples, got " + std::to_string(n));
    const Eigen::Index d = samples.cols();
    Vector mean = Vector::Zero(d);
    for (Eigen::Index i = 0; i < n; ++i) mean += samples.row(i).transpose();
    mean /= double(n);
    Matrix cov = Matrix::Zero(d, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        Vector c = samples.row(i).transpose() - mean;
        cov += c * c.transpose();
    }
    cov /= double(n - 1);
    cov = 0.5 * (cov + cov.transpose());
    GaussianSpec spec;
    spec.mean = std::move(mean);
    spec.cov = std::move(cov);
    return spec;
}

// Streaming accumulator with the same fixed-order semantics; lets Monte Carlo
// loops avoid materializing all rows.
class StatsAccumulator {
public:
    explicit StatsAccumulator(Eigen::Index d)
        : n_(0), sum_(Vector::Zero(d)), outer_(Matrix::Zero(d, d)) {}

    void add(const Vector& x) {
        ++n_;
        sum_ += x;
        outer_ += x * x.transpose();
    }

    Eigen::Index count() const { return n_; }

    GaussianSpec finish() const {
        if (n_ < 2)
            throw DomainError("StatsAccumulator: need at least 2 samples");
        Vector mean = sum_ / double(n_);
        Matrix cov = (outer_ - double(n_) * mean * mean.transpose()) / double(n_ - 1);
        cov = 0.5 * (cov + cov.transpose());
        GaussianSpec spec;
        spec.mean = std::move(mean);
        spec.cov = std::move(cov);
        return spec;
    }

private:
    Eigen::Index n_;
    Vector sum_;
    Matrix outer_;
};

} // namespace stalab
