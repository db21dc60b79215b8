#include "stalab/layers.hpp"

#include <cmath>

namespace stalab {

const char* norm_mode_name(NormMode m) {
    switch (m) {
        case NormMode::layer_norm: return "layer_norm";
        case NormMode::layer_norm_no_affine: return "layer_norm_no_affine";
        case NormMode::instance_norm: return "instance_norm";
        case NormMode::instance_center: return "instance_center";
        case NormMode::none: return "none";
    }
    return "?";
}

NormMode norm_mode_from_name(const std::string& name) {
    if (name == "layer_norm") return NormMode::layer_norm;
    if (name == "layer_norm_no_affine") return NormMode::layer_norm_no_affine;
    if (name == "instance_norm") return NormMode::instance_norm;
    if (name == "instance_center") return NormMode::instance_center;
    if (name == "none") return NormMode::none;
    throw DomainError("unknown norm mode: " + name);
}

Matrix BlockWeights::effective_w_v() const {
    if (!spectral_constrained) return w_v;
    return w_v / spectral_norm(w_v, SpectralMode::converged).sigma_max;
}

Matrix BlockWeights::effective_w_l() const {
    if (!spectral_constrained) return w_l;
    return w_l / spectral_norm(w_l, SpectralMode::converged).sigma_max;
}

BlockWeights BlockWeights::random(Eigen::Index d1, Eigen::Index d2, Eigen::Index d,
                                  RngStream& rng, double stddev) {
    auto draw = [&](Eigen::Index r, Eigen::Index c) {
        Matrix m(r, c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j)
                m(i, j) = stddev * rng.normal();
        return m;
    };
    BlockWeights w;
    w.w_q = draw(d1, d);
    w.w_k = draw(d2, d);
    w.w_v = draw(d2, d);
    w.w_l = draw(d, d1);
    w.b_l = Vector::Zero(d1);
    return w;
}

BlockWeights BlockWeights::identity(Eigen::Index d) {
    BlockWeights w;
    w.w_q = Matrix::Identity(d, d);
    w.w_k = Matrix::Identity(d, d);
    w.w_v = Matrix::Identity(d, d);
    w.w_l = Matrix::Identity(d, d);
    w.b_l = Vector::Zero(d);
    return w;
}

void FrameSet::validate() const {
    if (frames.empty()) throw ShapeError("FrameSet: need at least one frame");
    const Eigen::Index l0 = frames.front().rows(), d0 = frames.front().cols();
    for (const auto& f : frames)
        if (f.rows() != l0 || f.cols() != d0)
            throw ShapeError("FrameSet: frames must share (l, d)");
    if (Eigen::Index(grid_h) * grid_w != l0)
        throw ShapeError("FrameSet: grid " + std::to_string(grid_h) + "x" +
                         std::to_string(grid_w) + " does not match l=" + std::to_string(l0));
}

Matrix layer_norm(const Matrix& z, const NormParams& params, bool per_row) {
    const bool affine = params.mode == NormMode::layer_norm;
    const double alpha = affine ? params.alpha : 1.0;
    const double beta = affine ? params.beta : 0.0;
    if (per_row) {
        Matrix out(z.rows(), z.cols());
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            double mu = z.row(i).mean();
            double var = (z.row(i).array() - mu).square().mean();
            out.row(i) = alpha * (z.row(i).array() - mu) / (std::sqrt(var) + params.epsilon) + beta;
        }
        return out;
    }
    double mu = z.mean();
    double var = (z.array() - mu).square().mean();
    return (alpha * (z.array() - mu) / (std::sqrt(var) + params.epsilon) + beta).matrix();
}

Matrix instance_center(const Matrix& z) {
    Eigen::RowVectorXd mean = z.colwise().mean();
    return z.rowwise() - mean;
}

Matrix instance_norm(const Matrix& z, double epsilon) {
    Eigen::RowVectorXd mean = z.colwise().mean();
    Matrix centered = z.rowwise() - mean;
    Eigen::RowVectorXd std = (centered.array().square().colwise().mean()).sqrt();
    return centered.array().rowwise() / (std.array() + epsilon);
}

Matrix apply_norm(const Matrix& z, const NormParams& params) {
    switch (params.mode) {
        case NormMode::layer_norm:
        case NormMode::layer_norm_no_affine:
            return layer_norm(z, params);
        case NormMode::instance_norm:
            return instance_norm(z, params.epsilon);
        case NormMode::instance_center:
            return instance_center(z);
        case NormMode::none:
            return z;
    }
    throw DomainError("apply_norm: bad mode");
}

Matrix attention(const Matrix& z, const Matrix& c, const BlockWeights& w) {
    Matrix q = matmul(z, w.w_q);
    Matrix k = matmul(c, w.w_k);
    Matrix v = matmul(c, w.effective_w_v());
    const double temperature = 1.0 / std::sqrt(double(w.attn_dim()));
    Matrix m = row_softmax(q * k.transpose(), temperature);
    return m * v;
}

Matrix transformer_block(const Matrix& z, const Matrix& c, const BlockWeights& w) {
    Matrix a = attention(apply_norm(z, w.norm_z), apply_norm(c, w.norm_c), w);
    Matrix lin = matmul(a, w.effective_w_l());
    lin.rowwise() += w.b_l.transpose();
    return z + lin;
}

TemporalBatch ta_module(const TemporalBatch& z, const BlockWeights& w) {
    TemporalBatch out;
    out.reserve(z.size());
    for (const auto& slice : z) out.push_back(transformer_block(slice, slice, w));
    return out;
}

TemporalBatch stam(const TemporalBatch& z, const BlockWeights& w) {
    if (!w.spectral_constrained)
        throw DomainError("stam: weights must be spectrally constrained");
    if (w.norm_z.mode != NormMode::instance_center)
        throw DomainError("stam: norm mode must be instance_center");
    return ta_module(z, w);
}

FrameSet sca(const FrameSet& frames, const BlockWeights& w) {
    frames.validate();
    FrameSet out = frames;
    const Eigen::Index n = frames.n(), l = frames.l();
    for (Eigen::Index i = 0; i < n; ++i) {
        Matrix context(2 * l, frames.d());
        context.topRows(l) = frames.frames[0];
        context.bottomRows(l) = frames.frames[i == 0 ? 0 : i - 1];
        out.frames[i] = attention(frames.frames[i], context, w);
    }
    return out;
}

Matrix ffam_context(const FrameSet& frames, Eigen::Index frame_index, int r) {
    frames.validate();
    const Eigen::Index n = frames.n(), l = frames.l(), d = frames.d();
    if (frame_index < 0 || frame_index >= n)
        throw ShapeError("ffam: frame index out of range");
    const Eigen::Index coarse_l = l / (Eigen::Index(r) * r);
    Matrix context(l + (n - 1) * coarse_l, d);
    context.topRows(l) = frames.frames[frame_index];
    Eigen::Index row = l;
    for (Eigen::Index j = 0; j < n; ++j) {
        if (j == frame_index) continue;
        context.middleRows(row, coarse_l) =
            spatial_downsample(frames.frames[j], r,
                               std::make_pair(frames.grid_h, frames.grid_w));
        row += coarse_l;
    }
    return context;
}

Matrix ffam(const FrameSet& frames, Eigen::Index frame_index, const BlockWeights& w, int r) {
    return attention(frames.frames.at(frame_index), ffam_context(frames, frame_index, r), w);
}

FrameSet full_st_attention(const FrameSet& frames, const BlockWeights& w) {
    frames.validate();
    const Eigen::Index n = frames.n(), l = frames.l(), d = frames.d();
    Matrix all(n * l, d);
    for (Eigen::Index j = 0; j < n; ++j) all.middleRows(j * l, l) = frames.frames[j];
    FrameSet out = frames;
    for (Eigen::Index i = 0; i < n; ++i)
        out.frames[i] = attention(frames.frames[i], all, w);
    return out;
}

} // namespace stalab
