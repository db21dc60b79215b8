#pragma once

#include <vector>

#include "stalab/core.hpp"
#include "stalab/gaussian.hpp"

namespace stalab {

// named weight list, the unit of the binary weight container
using NamedMatrices = std::vector<std::pair<std::string, Matrix>>;

enum class NormMode {
    layer_norm,
    layer_norm_no_affine,
    instance_norm,
    instance_center,
    none,
};

const char* norm_mode_name(NormMode m);
NormMode norm_mode_from_name(const std::string& name);

struct NormParams {
    NormMode mode = NormMode::layer_norm;
    double alpha = 1.0;
    double beta = 0.0;
    double epsilon = 1e-5;

    static NormParams make(NormMode m) {
        NormParams p;
        p.mode = m;
        return p;
    }
};

// Parameter bundle of one Transformer-style block.
//
// Shapes: z is l1 x d1, context c is l2 x d2. Q = z W_q, K = c W_k,
// V = c W_v (all l x d), then Linear maps d back to d1.
struct BlockWeights {
    Matrix w_q; // d1 x d
    Matrix w_k; // d2 x d
    Matrix w_v; // d2 x d
    Matrix w_l; // d x d1
    Vector b_l; // d1
    NormParams norm_z;
    NormParams norm_c;
    bool spectral_constrained = false;
    // persistent power-iteration vectors for single_step training mode
    Vector sn_state_v;
    Vector sn_state_l;

    Eigen::Index attn_dim() const { return w_q.cols(); }

    // W_v / sigma_max(W_v) when constrained, W_v otherwise.
    Matrix effective_w_v() const;
    Matrix effective_w_l() const;

    static BlockWeights random(Eigen::Index d1, Eigen::Index d2, Eigen::Index d,
                               RngStream& rng, double stddev = 0.02);
    static BlockWeights identity(Eigen::Index d);
};

struct FrameSet {
    std::vector<Matrix> frames; // n matrices, each l x d
    int grid_h = 0;
    int grid_w = 0;

    Eigen::Index n() const { return Eigen::Index(frames.size()); }
    Eigen::Index l() const { return frames.empty() ? 0 : frames.front().rows(); }
    Eigen::Index d() const { return frames.empty() ? 0 : frames.front().cols(); }

    void validate() const;
};

// --- normalizations ---------------------------------------------------------

// Layer Norm over all entries of z (global mean/std), out = alpha*(z-mu)/(sigma+eps)+beta.
// per_row = true switches to the per-row variant.
Matrix layer_norm(const Matrix& z, const NormParams& params, bool per_row = false);

// Subtracts the temporal mean row; no rescaling, no affine terms.
Matrix instance_center(const Matrix& z);

// Per-feature-column standardization along the temporal axis (population std).
Matrix instance_norm(const Matrix& z, double epsilon = 1e-5);

// Dispatches on params.mode; identity for NormMode::none.
Matrix apply_norm(const Matrix& z, const NormParams& params);

// --- attention and blocks ---------------------------------------------------

// softmax(z W_q (c W_k)^T / sqrt(d)) * c W_v, with the spectrally normalized
// value projection when the weights are constrained.
Matrix attention(const Matrix& z, const Matrix& c, const BlockWeights& w);

// z + Linear(Attention(norm(z), norm(c))).
Matrix transformer_block(const Matrix& z, const Matrix& c, const BlockWeights& w);

// Temporal batch: one n x d temporal slice per spatial unit.
using TemporalBatch = std::vector<Matrix>;

// Baseline temporal attention: transformer_block applied to each temporal slice.
TemporalBatch ta_module(const TemporalBatch& z, const BlockWeights& w);

// Shift-restricted variant: instance centering plus spectral constraint.
// Requires w.spectral_constrained and norm mode instance_center.
TemporalBatch stam(const TemporalBatch& z, const BlockWeights& w);

// Sparse-causal attention: frame i attends to concat[frame 1, frame i-1]
// (frame 1 duplicated at i=1).
FrameSet sca(const FrameSet& frames, const BlockWeights& w);

// Fine-coarse context for frame i: the frame itself followed by the other
// frames downsampled at ratio r, in ascending index order. frame_index is
// zero-based.
Matrix ffam_context(const FrameSet& frames, Eigen::Index frame_index, int r);

// Fine-coarse frame attention for one frame.
Matrix ffam(const FrameSet& frames, Eigen::Index frame_index, const BlockWeights& w, int r);

// Dense reference: every token attends to all n*l tokens.
FrameSet full_st_attention(const FrameSet& frames, const BlockWeights& w);

} // namespace stalab
