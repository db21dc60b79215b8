#pragma once

#include <map>
#include <string>
#include <vector>

#include "stalab/autodiff.hpp"
#include "stalab/layers.hpp"
#include "stalab/shift.hpp"

namespace stalab {

struct DiffusionSchedule {
    int steps = 0;
    std::vector<double> alphas;     // alpha_t, 1-based conceptually, stored 0-based
    std::vector<double> alpha_bars; // prefix products

    // Linear beta schedule from beta_start to beta_end.
    static DiffusionSchedule linear(int steps, double beta_start = 1e-4, double beta_end = 2e-2);
    void validate() const;
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
Matrix forward_diffuse(const Matrix& x0, int t, const DiffusionSchedule& sched, const Matrix& noise);

enum class Motion { statics, drift, oscillate };
Motion motion_from_name(const std::string& name);
const char* motion_name(Motion m);

struct SyntheticClip {
    std::vector<Matrix> frames; // n frames, each l x d
    int grid_h = 0, grid_w = 0;
    Vector condition; // stand-in text embedding
};

// Base Gaussian frame plus deterministic per-frame motion offsets. Per-channel
// means are drawn with magnitude in [0.1, 1] (random sign), variances in
// [0.01, 0.1].
SyntheticClip build_synthetic_clip(int n, int l, int d, Motion motion, RngStream& rng,
                                   int cond_dim = 8);

enum class TemporalMode { ta, stam };
enum class BlockOrder { temporal_before_cross, cross_before_temporal };

TemporalMode temporal_mode_from_name(const std::string& name);
const char* temporal_mode_name(TemporalMode m);
BlockOrder block_order_from_name(const std::string& name);
const char* block_order_name(BlockOrder o);

struct Param {
    std::string name;
    Matrix value;
    bool trainable = false;
    // AdamW state
    Matrix m, v;
    // persistent power-iteration vector for spectrally constrained weights
    Vector sn_state;
    bool spectral = false;
};

struct DenoiserConfig {
    int n = 4, l = 16, d = 8;
    int depth = 1;
    int r = 2;
    int cond_dim = 8;
    int time_dim = 4;
    TemporalMode temporal_mode = TemporalMode::stam;
    BlockOrder block_order = BlockOrder::temporal_before_cross;
    bool train_bias = true; // whether temporal-block biases are in the tunable set
};

// Per-frame linear projections around a stack of FFAM / temporal / cross
// residual attention blocks. No convolutions; attention carries the theory.
class ToyDenoiser {
public:
    ToyDenoiser(const DenoiserConfig& config, RngStream& rng);

    const DenoiserConfig& config() const { return config_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    Param& param(const std::string& name);
    const Param& param(const std::string& name) const;

    // Predicted noise for each frame. Leaves for trainable params are created
    // per call; the returned vars share one graph with `loss` when composed.
    std::vector<ad::Var> forward(const std::vector<Matrix>& x_t, double t_frac,
                                 const Vector& condition,
                                 std::map<std::string, ad::Var>* leaves_out,
                                 bool training_spectral_step);

    // BlockWeights view of a temporal block (converged spectral mode).
    BlockWeights temporal_block_weights(int depth_index) const;

    NamedMatrices snapshot() const;
    void restore(const NamedMatrices& weights);

    // Pin spectral scale factors at their current converged values; finite
    // differencing needs sigma to stay a constant while weights are perturbed.
    void freeze_spectral_scales();
    void unfreeze_spectral_scales();

private:
    DenoiserConfig config_;
    std::vector<Param> params_;
    std::map<std::string, double> frozen_sigma_;
};

struct AdamWHyper {
    double lr = 3e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 1e-2;
};

// Decoupled weight decay Adam; step_index is 1-based for bias correction.
void adamw_step(Param& param, const Matrix& grad, const AdamWHyper& hyper, long step_index);

struct ShiftSample {
    long step = 0;
    int block_index = 0;
    ShiftMetrics metrics;
};

struct TrainConfig {
    DenoiserConfig model;
    int schedule_steps = 100;
    long steps = 500;
    AdamWHyper hyper;
    long probe_every = 50;
    Motion motion = Motion::drift;
    std::uint64_t seed = 42;
    bool run_grad_check = true;
};

struct TrainReport {
    std::vector<double> loss_curve;
    std::vector<ShiftSample> shift_trajectory;
    double grad_check = 0.0;
    long steps = 0;
    std::uint64_t seed = 0;
};

struct LossResult {
    double loss = 0.0;
    std::map<std::string, Matrix> grads;
};

// One draw of the denoising objective: t ~ U[1, T], eps ~ N(0, I), loss =
// mean((eps - model(x_t, t, cond))^2); gradients for all trainable params.
LossResult diffusion_loss(ToyDenoiser& model, const SyntheticClip& clip,
                          const DiffusionSchedule& sched, RngStream& rng,
                          bool training_spectral_step = true);

// Max relative error of analytic gradients against central finite differences.
double gradient_check(ToyDenoiser& model, const SyntheticClip& clip,
                      const DiffusionSchedule& sched, std::uint64_t seed, double h = 1e-5);

TrainReport train_oneshot(const TrainConfig& config, const SyntheticClip& clip);

} // namespace stalab
