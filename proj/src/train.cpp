#include "stalab/train.hpp"

#include <cmath>

namespace stalab {

DiffusionSchedule DiffusionSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw DomainError("DiffusionSchedule: steps must be >= 1");
    DiffusionSchedule s;
    s.steps = steps;
    s.alphas.resize(steps);
    s.alpha_bars.resize(steps);
    double bar = 1.0;
    for (int t = 0; t < steps; ++t) {
        double beta = steps == 1 ? beta_start
                                 : beta_start + (beta_end - beta_start) * double(t) / double(steps - 1);
        s.alphas[t] = 1.0 - beta;
        bar *= s.alphas[t];
        s.alpha_bars[t] = bar;
    }
    s.validate();
    return s;
}

void DiffusionSchedule::validate() const {
    if (int(alphas.size()) != steps || int(alpha_bars.size()) != steps)
        throw DomainError("DiffusionSchedule: inconsistent lengths");
    double bar = 1.0;
    for (int t = 0; t < steps; ++t) {
        if (!(alphas[t] > 0.0 && alphas[t] < 1.0))
            throw DomainError("DiffusionSchedule: alpha_t out of (0, 1)");
        bar *= alphas[t];
        if (std::abs(alpha_bars[t] - bar) > 1e-12)
            throw DomainError("DiffusionSchedule: alpha_bar is not the prefix product");
        if (t > 0 && !(alpha_bars[t] < alpha_bars[t - 1]))
            throw DomainError("DiffusionSchedule: alpha_bar must be strictly decreasing");
    }
}

Matrix forward_diffuse(const Matrix& x0, int t, const DiffusionSchedule& sched, const Matrix& noise) {
    if (t < 1 || t > sched.steps)
        throw DomainError("forward_diffuse: t out of [1, T]");
    if (noise.rows() != x0.rows() || noise.cols() != x0.cols())
        throw ShapeError("forward_diffuse: noise shape mismatch");
    double abar = sched.alpha_bars[t - 1];
    return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * noise;
}

Motion motion_from_name(const std::string& name) {
    if (name == "static") return Motion::statics;
    if (name == "drift") return Motion::drift;
    if (name == "oscillate") return Motion::oscillate;
    throw DomainError("unknown motion: " + name);
}

const char* motion_name(Motion m) {
    switch (m) {
        case Motion::statics: return "static";
        case Motion::drift: return "drift";
        case Motion::oscillate: return "oscillate";
    }
    return "?";
}

SyntheticClip build_synthetic_clip(int n, int l, int d, Motion motion, RngStream& rng,
                                   int cond_dim) {
    auto [h, w] = infer_grid(l);
    SyntheticClip clip;
    clip.grid_h = h;
    clip.grid_w = w;

    // per-dimension regime: |mean| in [0.1, 1], variance in [0.01, 0.1]
    Vector means(d), stds(d);
    for (int j = 0; j < d; ++j) {
        double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        means(j) = sign * rng.uniform(0.1, 1.0);
        stds(j) = std::sqrt(rng.uniform(0.01, 0.1));
    }

    Matrix base(l, d);
    for (int i = 0; i < l; ++i)
        for (int j = 0; j < d; ++j)
            base(i, j) = means(j) + stds(j) * rng.normal();

    Vector offset_dir(d);
    for (int j = 0; j < d; ++j) offset_dir(j) = 0.05 * rng.normal();

    clip.frames.reserve(n);
    for (int f = 0; f < n; ++f) {
        double amount = 0.0;
        switch (motion) {
            case Motion::statics: amount = 0.0; break;
            case Motion::drift: amount = double(f); break;
            case Motion::oscillate: amount = std::sin(2.0 * M_PI * double(f) / double(n)); break;
        }
        Matrix frame = base;
        frame.rowwise() += (amount * offset_dir).transpose();
        clip.frames.push_back(std::move(frame));
    }

    clip.condition = Vector(cond_dim);
    for (int j = 0; j < cond_dim; ++j) clip.condition(j) = rng.normal();
    return clip;
}

TemporalMode temporal_mode_from_name(const std::string& name) {
    if (name == "ta") return TemporalMode::ta;
    if (name == "stam") return TemporalMode::stam;
    throw DomainError("unknown temporal mode: " + name);
}

const char* temporal_mode_name(TemporalMode m) {
    return m == TemporalMode::ta ? "ta" : "stam";
}

BlockOrder block_order_from_name(const std::string& name) {
    if (name == "temporal_before_cross") return BlockOrder::temporal_before_cross;
    if (name == "cross_before_temporal") return BlockOrder::cross_before_temporal;
    throw DomainError("unknown block order: " + name);
}

const char* block_order_name(BlockOrder o) {
    return o == BlockOrder::temporal_before_cross ? "temporal_before_cross"
                                                  : "cross_before_temporal";
}

namespace {

Matrix draw_matrix(Eigen::Index r, Eigen::Index c, double stddev, RngStream& rng) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = stddev * rng.normal();
    return m;
}

Matrix sinusoidal_embedding(double t_frac, int time_dim) {
    Matrix e(1, time_dim);
    for (int k = 0; k < time_dim; ++k) {
        double freq = std::pow(2.0, double(k / 2));
        e(0, k) = (k % 2 == 0) ? std::sin(M_PI * freq * t_frac) : std::cos(M_PI * freq * t_frac);
    }
    return e;
}

} // namespace

ToyDenoiser::ToyDenoiser(const DenoiserConfig& config, RngStream& rng) : config_(config) {
    const int d = config.d;
    const int dc = config.cond_dim + config.time_dim;
    const bool stam_mode = config.temporal_mode == TemporalMode::stam;

    auto push = [&](const std::string& name, Matrix value, bool trainable, bool spectral = false) {
        Param p;
        p.name = name;
        p.value = std::move(value);
        p.trainable = trainable;
        p.spectral = spectral;
        params_.push_back(std::move(p));
    };

    // inherited projections stand in for pretrained weights: frozen
    push("in_proj.w", Matrix::Identity(d, d) + draw_matrix(d, d, 0.02, rng), false);
    for (int i = 0; i < config.depth; ++i) {
        std::string ff = "ffam" + std::to_string(i) + ".";
        push(ff + "w_q", draw_matrix(d, d, 0.2, rng), true); // tuned
        push(ff + "w_k", draw_matrix(d, d, 0.2, rng), false);
        push(ff + "w_v", draw_matrix(d, d, 0.2, rng), false);
        push(ff + "w_l", draw_matrix(d, d, 0.2, rng), false);
        push(ff + "b", Matrix::Zero(1, d), false);
        push(ff + "ln_alpha", Matrix::Ones(1, 1), false);
        push(ff + "ln_beta", Matrix::Zero(1, 1), false);

        // new temporal module: small Gaussian init, bias from zero, all trainable
        std::string tp = "temporal" + std::to_string(i) + ".";
        push(tp + "w_q", draw_matrix(d, d, 0.02, rng), true);
        push(tp + "w_k", draw_matrix(d, d, 0.02, rng), true);
        push(tp + "w_v", draw_matrix(d, d, 0.02, rng), true, stam_mode);
        push(tp + "w_l", draw_matrix(d, d, 0.02, rng), true, stam_mode);
        push(tp + "b", Matrix::Zero(1, d), config.train_bias);
        if (!stam_mode) {
            push(tp + "ln_alpha", Matrix::Ones(1, 1), true);
            push(tp + "ln_beta", Matrix::Zero(1, 1), true);
        }

        std::string cr = "cross" + std::to_string(i) + ".";
        push(cr + "w_q", draw_matrix(d, d, 0.2, rng), true); // tuned
        push(cr + "w_k", draw_matrix(dc, d, 0.2, rng), false);
        push(cr + "w_v", draw_matrix(dc, d, 0.2, rng), false);
        push(cr + "w_l", draw_matrix(d, d, 0.2, rng), false);
        push(cr + "b", Matrix::Zero(1, d), false);
        push(cr + "ln_alpha", Matrix::Ones(1, 1), false);
        push(cr + "ln_beta", Matrix::Zero(1, 1), false);
    }
    push("out_proj.w", Matrix::Identity(d, d) + draw_matrix(d, d, 0.02, rng), false);
}

Param& ToyDenoiser::param(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return p;
    throw std::out_of_range("ToyDenoiser: no parameter named " + name);
}

const Param& ToyDenoiser::param(const std::string& name) const {
    return const_cast<ToyDenoiser*>(this)->param(name);
}

std::vector<ad::Var> ToyDenoiser::forward(const std::vector<Matrix>& x_t, double t_frac,
                                          const Vector& condition,
                                          std::map<std::string, ad::Var>* leaves_out,
                                          bool training_spectral_step) {
    if (int(x_t.size()) != config_.n)
        throw ShapeError("ToyDenoiser: expected " + std::to_string(config_.n) + " frames");
    const double temp = 1.0 / std::sqrt(double(config_.d));
    auto [grid_h, grid_w] = infer_grid(config_.l);
    const std::pair<int, int> grid{grid_h, grid_w};

    std::map<std::string, ad::Var> leaves;
    auto var_of = [&](const std::string& name) -> ad::Var {
        auto it = leaves.find(name);
        if (it != leaves.end()) return it->second;
        Param& p = param(name);
        ad::Var v = ad::leaf(p.value, p.trainable);
        if (p.spectral) {
            double sigma;
            auto fit = frozen_sigma_.find(name);
            if (fit != frozen_sigma_.end()) {
                sigma = fit->second;
            } else if (training_spectral_step) {
                auto res = spectral_norm(p.value, SpectralMode::single_step,
                                         p.sn_state.size() ? std::optional<Vector>(p.sn_state)
                                                           : std::nullopt);
                p.sn_state = res.state;
                sigma = res.sigma_max;
            } else {
                sigma = spectral_norm(p.value, SpectralMode::converged).sigma_max;
            }
            ad::Var scaled = ad::scale(v, 1.0 / sigma); // sigma is a stop-gradient constant
            leaves[name] = v;
            return scaled;
        }
        leaves[name] = v;
        return v;
    };
    // raw (unscaled) leaf, for registering gradients
    auto raw_leaf = [&](const std::string& name) { (void)var_of(name); return leaves[name]; };

    Matrix cond(1, config_.cond_dim + config_.time_dim);
    cond.leftCols(config_.cond_dim) = condition.transpose();
    cond.rightCols(config_.time_dim) = sinusoidal_embedding(t_frac, config_.time_dim);
    ad::Var cond_var = ad::constant(cond);

    auto attention_block = [&](const ad::Var& z, const ad::Var& zn, const ad::Var& cn,
                               const std::string& prefix) {
        ad::Var q = ad::matmul(zn, var_of(prefix + "w_q"));
        ad::Var k = ad::matmul(cn, var_of(prefix + "w_k"));
        ad::Var v = ad::matmul(cn, var_of(prefix + "w_v"));
        ad::Var m = ad::row_softmax(ad::matmul_bt(q, k), temp);
        ad::Var a = ad::matmul(m, v);
        return ad::add(z, ad::bias_add(ad::matmul(a, var_of(prefix + "w_l")),
                                       var_of(prefix + "b")));
    };
    auto ln = [&](const ad::Var& x, const std::string& prefix) {
        return ad::layer_norm(x, var_of(prefix + "ln_alpha"), var_of(prefix + "ln_beta"), 1e-5);
    };

    std::vector<ad::Var> frames;
    frames.reserve(x_t.size());
    for (const auto& f : x_t)
        frames.push_back(ad::matmul(ad::constant(f), var_of("in_proj.w")));

    for (int i = 0; i < config_.depth; ++i) {
        const std::string ff = "ffam" + std::to_string(i) + ".";
        const std::string tp = "temporal" + std::to_string(i) + ".";
        const std::string cr = "cross" + std::to_string(i) + ".";

        // fine-coarse frame attention
        std::vector<ad::Var> next;
        next.reserve(frames.size());
        for (int fi = 0; fi < config_.n; ++fi) {
            std::vector<ad::Var> parts{frames[fi]};
            for (int fj = 0; fj < config_.n; ++fj) {
                if (fj == fi) continue;
                parts.push_back(ad::spatial_downsample(frames[fj], config_.r, grid));
            }
            ad::Var ctx = ad::concat_rows(parts);
            next.push_back(attention_block(frames[fi], ln(frames[fi], ff), ln(ctx, ff), ff));
        }
        frames = std::move(next);

        auto temporal = [&]() {
            std::vector<ad::Var> slices;
            slices.reserve(config_.l);
            for (int u = 0; u < config_.l; ++u) {
                std::vector<std::pair<ad::Var, Eigen::Index>> rows;
                rows.reserve(config_.n);
                for (int fj = 0; fj < config_.n; ++fj) rows.emplace_back(frames[fj], u);
                ad::Var slice = ad::stack_rows(rows);
                ad::Var normed = config_.temporal_mode == TemporalMode::stam
                                     ? ad::instance_center(slice)
                                     : ln(slice, tp);
                slices.push_back(attention_block(slice, normed, normed, tp));
            }
            std::vector<ad::Var> rebuilt;
            rebuilt.reserve(config_.n);
            for (int fj = 0; fj < config_.n; ++fj) {
                std::vector<std::pair<ad::Var, Eigen::Index>> rows;
                rows.reserve(config_.l);
                for (int u = 0; u < config_.l; ++u) rows.emplace_back(slices[u], fj);
                rebuilt.push_back(ad::stack_rows(rows));
            }
            frames = std::move(rebuilt);
        };
        auto cross = [&]() {
            for (int fi = 0; fi < config_.n; ++fi)
                frames[fi] = attention_block(frames[fi], ln(frames[fi], cr), cond_var, cr);
        };

        if (config_.block_order == BlockOrder::temporal_before_cross) {
            temporal();
            cross();
        } else {
            cross();
            temporal();
        }
    }

    for (auto& f : frames) f = ad::matmul(f, var_of("out_proj.w"));

    // leaves registered lazily; make sure raw leaves for every trainable param exist
    for (const auto& p : params_)
        if (p.trainable) raw_leaf(p.name);
    if (leaves_out) *leaves_out = std::move(leaves);
    return frames;
}

BlockWeights ToyDenoiser::temporal_block_weights(int depth_index) const {
    const std::string tp = "temporal" + std::to_string(depth_index) + ".";
    BlockWeights w;
    w.w_q = param(tp + "w_q").value;
    w.w_k = param(tp + "w_k").value;
    w.w_v = param(tp + "w_v").value;
    w.w_l = param(tp + "w_l").value;
    w.b_l = param(tp + "b").value.row(0).transpose();
    if (config_.temporal_mode == TemporalMode::stam) {
        w.spectral_constrained = true;
        w.norm_z = NormParams::make(NormMode::instance_center);
        w.norm_c = w.norm_z;
    } else {
        w.norm_z = NormParams::make(NormMode::layer_norm);
        w.norm_z.alpha = param(tp + "ln_alpha").value(0, 0);
        w.norm_z.beta = param(tp + "ln_beta").value(0, 0);
        w.norm_c = w.norm_z;
    }
    return w;
}

NamedMatrices ToyDenoiser::snapshot() const {
    NamedMatrices out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.emplace_back(p.name, p.value);
    return out;
}

void ToyDenoiser::restore(const NamedMatrices& weights) {
    for (const auto& [name, value] : weights) param(name).value = value;
}

void ToyDenoiser::freeze_spectral_scales() {
    frozen_sigma_.clear();
    for (const auto& p : params_)
        if (p.spectral)
            frozen_sigma_[p.name] = spectral_norm(p.value, SpectralMode::converged).sigma_max;
}

void ToyDenoiser::unfreeze_spectral_scales() { frozen_sigma_.clear(); }

void adamw_step(Param& param, const Matrix& grad, const AdamWHyper& hyper, long step_index) {
    if (param.m.size() == 0) {
        param.m = Matrix::Zero(param.value.rows(), param.value.cols());
        param.v = Matrix::Zero(param.value.rows(), param.value.cols());
    }
    param.m = hyper.beta1 * param.m + (1.0 - hyper.beta1) * grad;
    param.v = hyper.beta2 * param.v + (1.0 - hyper.beta2) * grad.cwiseProduct(grad);
    double bc1 = 1.0 - std::pow(hyper.beta1, double(step_index));
    double bc2 = 1.0 - std::pow(hyper.beta2, double(step_index));
    Matrix mhat = param.m / bc1;
    Matrix vhat = param.v / bc2;
    param.value -= hyper.lr * (mhat.array() / (vhat.array().sqrt() + hyper.epsilon)).matrix();
    param.value -= hyper.lr * hyper.weight_decay * param.value;
}

LossResult diffusion_loss(ToyDenoiser& model, const SyntheticClip& clip,
                          const DiffusionSchedule& sched, RngStream& rng,
                          bool training_spectral_step) {
    const int n = int(clip.frames.size());
    int t = int(rng.uniform_index(std::uint64_t(sched.steps)));
    std::vector<Matrix> noise(n), x_t(n);
    for (int f = 0; f < n; ++f) {
        noise[f] = Matrix::NullaryExpr(clip.frames[f].rows(), clip.frames[f].cols(),
                                       [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
        x_t[f] = forward_diffuse(clip.frames[f], t, sched, noise[f]);
    }

    std::map<std::string, ad::Var> leaves;
    auto out = model.forward(x_t, double(t) / double(sched.steps), clip.condition, &leaves,
                             training_spectral_step);

    ad::Var loss;
    for (int f = 0; f < n; ++f) {
        ad::Var part = ad::scale(ad::mse_loss(out[f], noise[f]), 1.0 / double(n));
        loss = f == 0 ? part : ad::add(loss, part);
    }
    ad::backward(loss);

    LossResult result;
    result.loss = loss->value(0, 0);
    for (const auto& [name, var] : leaves) {
        if (!var->requires_grad) continue;
        var->ensure_grad();
        result.grads[name] = var->grad;
    }
    return result;
}

double gradient_check(ToyDenoiser& model, const SyntheticClip& clip,
                      const DiffusionSchedule& sched, std::uint64_t seed, double h) {
    model.freeze_spectral_scales();
    auto eval = [&]() {
        RngStream rng(seed, 7001);
        return diffusion_loss(model, clip, sched, rng, /*training_spectral_step=*/false);
    };
    LossResult base = eval();

    double max_rel = 0.0;
    for (auto& p : model.params()) {
        if (!p.trainable) continue;
        const Matrix& g = base.grads.at(p.name);
        for (Eigen::Index i = 0; i < p.value.rows(); ++i)
            for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
                double orig = p.value(i, j);
                p.value(i, j) = orig + h;
                double lp = eval().loss;
                p.value(i, j) = orig - h;
                double lm = eval().loss;
                p.value(i, j) = orig;
                double fd = (lp - lm) / (2.0 * h);
                double denom = std::max({std::abs(fd), std::abs(g(i, j)), 1e-3});
                max_rel = std::max(max_rel, std::abs(fd - g(i, j)) / denom);
            }
    }
    model.unfreeze_spectral_scales();
    return max_rel;
}

TrainReport train_oneshot(const TrainConfig& config, const SyntheticClip& clip) {
    RngStream model_rng(config.seed, fnv1a64("model_init"));
    ToyDenoiser model(config.model, model_rng);
    DiffusionSchedule sched = DiffusionSchedule::linear(config.schedule_steps);

    // fixed held probe input: the temporal-slice regime of the clip at hand
    Matrix stacked(Eigen::Index(clip.frames.size()) * clip.frames[0].rows(),
                   clip.frames[0].cols());
    for (std::size_t f = 0; f < clip.frames.size(); ++f)
        stacked.middleRows(Eigen::Index(f) * clip.frames[f].rows(), clip.frames[f].rows()) =
            clip.frames[f];
    GaussianSpec probe_spec = estimate_stats(stacked);
    // guard against a rank-deficient probe covariance (e.g. static clips)
    probe_spec = GaussianSpec(probe_spec.mean,
                              probe_spec.cov + 1e-4 * Matrix::Identity(probe_spec.dim(),
                                                                       probe_spec.dim()));

    TrainReport report;
    report.seed = config.seed;
    report.steps = config.steps;

    auto probe = [&](long step) {
        for (int b = 0; b < config.model.depth; ++b) {
            BlockWeights w = model.temporal_block_weights(b);
            ShiftMetrics metrics;
            if (config.model.temporal_mode == TemporalMode::stam) {
                // closed form under instance centering: mean moves by exactly b_L,
                // covariance by the omega=1 worst case
                Matrix w_v = w.effective_w_v();
                Matrix w_l = w.effective_w_l();
                Matrix after_cov = probe_spec.cov +
                    w_l.transpose() * w_v.transpose() * probe_spec.cov * w_v * w_l;
                GaussianSpec after(probe_spec.mean + w.b_l,
                                   0.5 * (after_cov + after_cov.transpose()));
                metrics = shift_metrics(probe_spec, after);
            } else {
                RngStream probe_rng(config.seed,
                                    fnv1a64("probe") ^ (std::uint64_t(step) * 2654435761ULL + b));
                ProbeOptions opts;
                opts.rows = config.model.n;
                ShiftReport sr = monte_carlo_module_dist(ProbeModule::ta, w, probe_spec,
                                                         std::nullopt, 10000, probe_rng, opts);
                metrics = shift_metrics(probe_spec, sr.empirical);
            }
            report.shift_trajectory.push_back({step, b, metrics});
        }
    };

    if (config.run_grad_check)
        report.grad_check = gradient_check(model, clip, sched, config.seed);

    probe(0);

    RngStream train_rng(config.seed, fnv1a64("train"));
    for (long step = 1; step <= config.steps; ++step) {
        LossResult res = diffusion_loss(model, clip, sched, train_rng);
        if (!std::isfinite(res.loss)) {
            double pnorm = 0.0;
            for (const auto& p : model.params()) pnorm += p.value.squaredNorm();
            throw std::runtime_error("train_oneshot: non-finite loss at step " +
                                     std::to_string(step) +
                                     " (parameter norm " + std::to_string(std::sqrt(pnorm)) + ")");
        }
        report.loss_curve.push_back(res.loss);
        for (auto& p : model.params()) {
            if (!p.trainable) continue;
            adamw_step(p, res.grads.at(p.name), config.hyper, step);
        }
        if (config.probe_every > 0 && step % config.probe_every == 0) probe(step);
    }
    if (config.steps > 0 && (config.probe_every <= 0 || config.steps % config.probe_every != 0))
        probe(config.steps);
    return report;
}

} // namespace stalab
