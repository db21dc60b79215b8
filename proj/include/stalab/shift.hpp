#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stalab/gaussian.hpp"
#include "stalab/layers.hpp"

namespace stalab {

// One row of the attention mixing matrix M.
struct MixingRow {
    Vector weights;
    double omega = 0.0; // ||weights||_2^2

    MixingRow() = default;
    explicit MixingRow(Vector w);

    static MixingRow uniform(Eigen::Index l2);
    static MixingRow one_hot(Eigen::Index l2, Eigen::Index hot);
};

struct BoundCheck {
    std::string name;
    double lhs = 0.0;
    double rhs = 0.0;
    bool satisfied = false;
};

inline BoundCheck make_bound_check(std::string name, double lhs, double rhs) {
    return {std::move(name), lhs, rhs, lhs <= rhs * (1.0 + 1e-9)};
}

struct ShiftMetrics {
    double mean_shift = 0.0;     // ||mu' - mu||_2
    double cov_shift_frob = 0.0; // ||S' - S||_F
    double cov_shift_spec = 0.0; // ||S' - S||_2
};

ShiftMetrics shift_metrics(const GaussianSpec& before, const GaussianSpec& after);

struct ShiftReport {
    GaussianSpec predicted;
    GaussianSpec empirical;
    double mean_abs_err = 0.0;      // max |mu_pred - mu_emp| over coordinates
    double cov_frob_rel_err = 0.0;  // ||S_pred - S_emp||_F / max(||S_pred||_F, tiny)
    std::vector<BoundCheck> bound_checks;
    long trials = 0;
    std::uint64_t seed = 0;
    std::string module;
    bool assumption_violating = false; // data-dependent M, or non-linear norm on the value path
    // 3-standard-error envelope per mean coordinate, from the empirical covariance
    Vector mean_tolerance;
};

// --- closed-form moment propagation -----------------------------------------

// rv(V) of the value projection: N(W_v^T mu, W_v^T Sigma W_v).
GaussianSpec predict_value_dist(const GaussianSpec& c_spec, const Matrix& w_v);

// One attention output row under a fixed mixing row: N(mu_V, omega * Sigma_V).
GaussianSpec predict_attention_row_dist(const GaussianSpec& v_spec, const MixingRow& mix);

// Residual block output row: N(mu_z + W_L^T mu_V + b, Sigma_z + omega W_L^T Sigma_V W_L).
GaussianSpec predict_transformer_dist(const GaussianSpec& z_spec, const GaussianSpec& v_spec,
                                      double omega, const Matrix& w_l, const Vector& b_l);

// --- Monte Carlo probe ------------------------------------------------------

enum class ProbeModule { ta, stam, transformer };

const char* probe_module_name(ProbeModule m);

struct ProbeOptions {
    Eigen::Index rows = 16;          // temporal length n (self) / context rows l2 (cross)
    Eigen::Index designated_row = 0; // output row whose distribution is collected
};

// Samples inputs from z_spec, runs the module, and compares the empirical
// distribution of the designated output row against the closed-form
// prediction. A supplied fixed_mix replaces the softmax row (the Q/K path is
// bypassed), which makes the closed-form prediction exact for linear norm
// modes; without it M is data-dependent and the report is diagnostic.
ShiftReport monte_carlo_module_dist(ProbeModule module, const BlockWeights& w,
                                    const GaussianSpec& z_spec,
                                    const std::optional<MixingRow>& fixed_mix,
                                    long trials, RngStream& rng,
                                    const ProbeOptions& opts = {});

// --- bound checks -----------------------------------------------------------

// Covariance-change bound ||S' - S|| <= ||W_L||^2 ||W_v||^2 ||S_zhat||,
// evaluated with the worst case omega = 1 under both norms.
std::vector<BoundCheck> check_variance_bound(const BlockWeights& w, const GaussianSpec& zhat_spec);

// Spectrally constrained block: ||S'||_2 <= 2 ||S||_2. Closed form at omega=1
// plus a Monte Carlo run through the actual module with a fixed one-hot mix.
std::vector<BoundCheck> check_stam_output_bound(const BlockWeights& w, const GaussianSpec& z_spec,
                                                long trials, RngStream& rng);

struct LipschitzRecord {
    double max_ratio = 0.0;
    double bound = 0.0;
    long pairs = 0;
    bool satisfied = false;
};

// max ||softmax_lambda(x) - softmax_lambda(x')|| / ||x - x'|| over random pairs,
// lambda = 1/sqrt(d); vectors of length vec_len with entries in [-10, 10].
LipschitzRecord check_softmax_lipschitz(Eigen::Index d, long pairs, RngStream& rng,
                                        Eigen::Index vec_len = 8);

// |omega(W_q + delta) - omega(W_q)| <= (2/d) ||delta||_2 ||zhat_i||_2 ||K||_2,
// plus the covariance corollary with W_L and Sigma_V from the same weights.
std::vector<BoundCheck> check_wq_tuning_bound(const BlockWeights& w, const Matrix& delta,
                                              const Matrix& zhat, Eigen::Index row);

} // namespace stalab
