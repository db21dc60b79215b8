#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stalab/train.hpp"

using namespace stalab;

TEST_CASE("diffusion schedule invariants") {
    DiffusionSchedule s = DiffusionSchedule::linear(100);
    CHECK(s.steps == 100);
    REQUIRE(s.alphas.size() == 100);
    REQUIRE(s.alpha_bars.size() == 100);
    CHECK(s.alphas.front() == doctest::Approx(1.0 - 1e-4));
    CHECK(s.alphas.back() == doctest::Approx(1.0 - 2e-2));
    double prod = 1.0;
    for (std::size_t i = 0; i < s.alphas.size(); ++i) {
        CHECK(s.alphas[i] > 0.0);
        CHECK(s.alphas[i] < 1.0);
        prod *= s.alphas[i];
        CHECK(s.alpha_bars[i] == doctest::Approx(prod).epsilon(1e-12));
        if (i > 0) CHECK(s.alpha_bars[i] < s.alpha_bars[i - 1]);
    }
    CHECK_THROWS_AS(DiffusionSchedule::linear(0), DomainError);
}

TEST_CASE("forward diffusion formula") {
    DiffusionSchedule sched = DiffusionSchedule::linear(10);
    Matrix x0 = Matrix::Constant(2, 2, 4.0);
    Matrix noise = Matrix::Constant(2, 2, 2.0);

    for (int t : {1, 5, 10}) {
        double abar = sched.alpha_bars[t - 1];
        Matrix xt = forward_diffuse(x0, t, sched, noise);
        CHECK(xt(0, 0) ==
              doctest::Approx(std::sqrt(abar) * 4.0 + std::sqrt(1.0 - abar) * 2.0)
                  .epsilon(1e-14));
    }
    // early t keeps the signal nearly intact
    CHECK((forward_diffuse(x0, 1, sched, Matrix::Zero(2, 2)) - x0).norm() <=
          0.01 * x0.norm());

    CHECK_THROWS_AS(forward_diffuse(x0, 0, sched, noise), DomainError);
    CHECK_THROWS_AS(forward_diffuse(x0, 11, sched, noise), DomainError);
    CHECK_THROWS_AS(forward_diffuse(x0, 5, sched, Matrix::Zero(3, 2)), ShapeError);
}

TEST_CASE("synthetic clip construction") {
    RngStream rng(401, 0);
    SyntheticClip clip = build_synthetic_clip(4, 16, 8, Motion::statics, rng);
    REQUIRE(clip.frames.size() == 4);
    CHECK(clip.frames[0].rows() == 16);
    CHECK(clip.frames[0].cols() == 8);
    CHECK(clip.grid_h == 4);
    CHECK(clip.grid_w == 4);
    CHECK(clip.condition.size() == 8);
    // static motion: every frame identical to the first
    for (std::size_t t = 1; t < clip.frames.size(); ++t)
        CHECK((clip.frames[t] - clip.frames[0]).norm() == 0.0);

    RngStream rng2(401, 1);
    SyntheticClip drift = build_synthetic_clip(4, 16, 8, Motion::drift, rng2);
    // drift: equal per-step offsets, so the second difference vanishes
    Matrix d1 = drift.frames[1] - drift.frames[0];
    Matrix d2 = drift.frames[2] - drift.frames[1];
    CHECK((d2 - d1).norm() <= 1e-12);
    CHECK(d1.norm() > 0.0);

    RngStream rng3(401, 2);
    SyntheticClip osc = build_synthetic_clip(4, 16, 8, Motion::oscillate, rng3);
    // sin(2 pi f / 4) at f = 2 is zero: frame 2 equals frame 0
    CHECK((osc.frames[2] - osc.frames[0]).norm() <= 1e-12);

    CHECK(motion_from_name("static") == Motion::statics);
    CHECK(motion_from_name("drift") == Motion::drift);
    CHECK(motion_from_name("oscillate") == Motion::oscillate);
    CHECK_THROWS_AS(motion_from_name("wiggle"), DomainError);
}

TEST_CASE("clip feature statistics live in the declared regime") {
    RngStream rng(403, 0);
    const int l = 256;
    SyntheticClip clip = build_synthetic_clip(1, l, 6, Motion::statics, rng);
    GaussianSpec stats = estimate_stats(clip.frames[0]);
    for (Eigen::Index j = 0; j < stats.mean.size(); ++j) {
        // per-channel mean magnitude in [0.1, 1], variance in [0.01, 0.1],
        // with sampling slack at l = 256
        CHECK(std::abs(stats.mean(j)) > 0.02);
        CHECK(std::abs(stats.mean(j)) < 1.2);
        CHECK(stats.cov(j, j) > 0.005);
        CHECK(stats.cov(j, j) < 0.15);
    }
}

TEST_CASE("adamw single step hand check") {
    Param base;
    base.name = "w";
    base.value = Matrix::Constant(1, 1, 1.0);
    base.trainable = true;

    AdamWHyper h;
    h.lr = 0.1;
    h.weight_decay = 0.0;

    Param p = base;
    adamw_step(p, Matrix::Constant(1, 1, 2.0), h, 1);
    // bias-corrected m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    double expect = 1.0 - 0.1 * 2.0 / (2.0 + h.epsilon);
    CHECK(p.value(0, 0) == doctest::Approx(expect).epsilon(1e-12));

    // zero gradient, zero decay: no movement
    Param pz = base;
    adamw_step(pz, Matrix::Zero(1, 1), h, 1);
    CHECK(pz.value(0, 0) == doctest::Approx(1.0));

    // decay only: multiply by (1 - lr * wd)
    AdamWHyper hd;
    hd.lr = 0.1;
    hd.weight_decay = 0.5;
    Param pd = base;
    adamw_step(pd, Matrix::Zero(1, 1), hd, 1);
    CHECK(pd.value(0, 0) == doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-12));
}

TEST_CASE("denoiser forward shapes and determinism") {
    DenoiserConfig cfg;
    cfg.n = 2;
    cfg.l = 16;
    cfg.d = 4;
    RngStream rng(405, 0);
    ToyDenoiser model(cfg, rng);

    RngStream data(405, 1);
    SyntheticClip clip = build_synthetic_clip(cfg.n, cfg.l, cfg.d, Motion::drift, data);

    auto run = [&]() {
        auto vars = model.forward(clip.frames, 0.5, clip.condition, nullptr, false);
        std::vector<Matrix> vals;
        for (const auto& v : vars) vals.push_back(v->value);
        return vals;
    };
    auto out1 = run();
    auto out2 = run();
    REQUIRE(out1.size() == 2);
    CHECK(out1[0].rows() == 16);
    CHECK(out1[0].cols() == 4);
    CHECK((out1[0] - out2[0]).norm() == 0.0);
    CHECK((out1[1] - out2[1]).norm() == 0.0);

    std::vector<Matrix> wrong(1, clip.frames[0]);
    CHECK_THROWS_AS(model.forward(wrong, 0.5, clip.condition, nullptr, false), ShapeError);
}

TEST_CASE("diffusion loss is finite, positive, and deterministic") {
    DenoiserConfig cfg;
    cfg.n = 2;
    cfg.l = 16;
    cfg.d = 4;
    RngStream wrng(407, 0);
    ToyDenoiser model(cfg, wrng);
    DiffusionSchedule sched = DiffusionSchedule::linear(50);

    RngStream data(407, 1);
    SyntheticClip clip = build_synthetic_clip(cfg.n, cfg.l, cfg.d, Motion::drift, data);

    ToyDenoiser model2 = model; // copy to keep spectral state independent
    RngStream a(42, 0), b(42, 0);
    LossResult ra = diffusion_loss(model, clip, sched, a);
    LossResult rb = diffusion_loss(model2, clip, sched, b);
    CHECK(ra.loss == rb.loss);
    CHECK(ra.loss > 0.0);
    CHECK(std::isfinite(ra.loss));
    REQUIRE(!ra.grads.empty());
    for (const auto& [name, g] : ra.grads) {
        CHECK(std::isfinite(g.norm()));
        CHECK((g - rb.grads.at(name)).norm() == 0.0);
    }
    // trainables get gradients
    CHECK(ra.grads.count("temporal0.w_v") == 1);
    CHECK(ra.grads.count("ffam0.w_q") == 1);
    CHECK(ra.grads.count("cross0.w_q") == 1);
    // frozen inherited weights do not
    CHECK(ra.grads.count("ffam0.w_v") == 0);
    CHECK(ra.grads.count("in_proj.w") == 0);
}

TEST_CASE("gradient check passes for both temporal modes and orders") {
    for (TemporalMode mode : {TemporalMode::ta, TemporalMode::stam}) {
        for (BlockOrder order : {BlockOrder::temporal_before_cross,
                                 BlockOrder::cross_before_temporal}) {
            DenoiserConfig cfg;
            cfg.n = 2;
            cfg.l = 4;
            cfg.d = 3;
            cfg.temporal_mode = mode;
            cfg.block_order = order;
            RngStream rng(409, std::uint64_t(int(mode) * 2 + int(order)));
            ToyDenoiser model(cfg, rng);
            RngStream data(409, 100);
            SyntheticClip clip = build_synthetic_clip(cfg.n, cfg.l, cfg.d, Motion::drift, data);
            DiffusionSchedule sched = DiffusionSchedule::linear(20);
            double worst = gradient_check(model, clip, sched, 409);
            INFO("mode=", temporal_mode_name(mode), " order=", block_order_name(order),
                 " worst=", worst);
            CHECK(worst <= 1e-5);
        }
    }
}

TEST_CASE("train_oneshot smoke run with probes") {
    TrainConfig cfg;
    cfg.model.n = 2;
    cfg.model.l = 16;
    cfg.model.d = 4;
    cfg.steps = 4;
    cfg.probe_every = 2;
    cfg.run_grad_check = false;
    cfg.seed = 411;

    RngStream data(cfg.seed, fnv1a64("clip"));
    SyntheticClip clip = build_synthetic_clip(cfg.model.n, cfg.model.l, cfg.model.d,
                                              cfg.motion, data);

    TrainReport rep = train_oneshot(cfg, clip);
    REQUIRE(rep.loss_curve.size() == 4);
    for (double l : rep.loss_curve) CHECK(std::isfinite(l));
    // probes at steps 0, 2, 4 (one temporal block)
    REQUIRE(rep.shift_trajectory.size() == 3);
    CHECK(rep.shift_trajectory[0].step == 0);
    CHECK(rep.shift_trajectory[1].step == 2);
    CHECK(rep.shift_trajectory[2].step == 4);
    for (const auto& pt : rep.shift_trajectory) {
        CHECK(pt.block_index == 0);
        CHECK(std::isfinite(pt.metrics.mean_shift));
        CHECK(pt.metrics.cov_shift_frob >= 0.0);
        CHECK(pt.metrics.cov_shift_spec <= pt.metrics.cov_shift_frob + 1e-12);
    }

    // determinism: identical config + clip give identical results
    TrainReport rep2 = train_oneshot(cfg, clip);
    CHECK(rep.loss_curve == rep2.loss_curve);
    REQUIRE(rep2.shift_trajectory.size() == rep.shift_trajectory.size());
    for (std::size_t i = 0; i < rep.shift_trajectory.size(); ++i) {
        CHECK(rep.shift_trajectory[i].metrics.mean_shift ==
              rep2.shift_trajectory[i].metrics.mean_shift);
        CHECK(rep.shift_trajectory[i].metrics.cov_shift_frob ==
              rep2.shift_trajectory[i].metrics.cov_shift_frob);
    }
}

TEST_CASE("stam probe mean shift equals the temporal bias norm") {
    // bias frozen at zero: the instance-centered closed form pins the mean
    TrainConfig cfg;
    cfg.model.n = 2;
    cfg.model.l = 16;
    cfg.model.d = 4;
    cfg.model.train_bias = false;
    cfg.steps = 2;
    cfg.probe_every = 1;
    cfg.run_grad_check = false;
    cfg.seed = 413;

    RngStream data(cfg.seed, fnv1a64("clip"));
    SyntheticClip clip = build_synthetic_clip(cfg.model.n, cfg.model.l, cfg.model.d,
                                              cfg.motion, data);
    TrainReport rep = train_oneshot(cfg, clip);
    for (const auto& pt : rep.shift_trajectory)
        CHECK(pt.metrics.mean_shift == 0.0);
}

TEST_CASE("zero-step training still emits the initial probe") {
    TrainConfig cfg;
    cfg.model.n = 2;
    cfg.model.l = 4;
    cfg.model.d = 3;
    cfg.steps = 0;
    cfg.run_grad_check = false;
    cfg.seed = 415;
    RngStream data(cfg.seed, fnv1a64("clip"));
    SyntheticClip clip = build_synthetic_clip(cfg.model.n, cfg.model.l, cfg.model.d,
                                              cfg.motion, data);
    TrainReport rep = train_oneshot(cfg, clip);
    CHECK(rep.loss_curve.empty());
    REQUIRE(rep.shift_trajectory.size() == 1);
    CHECK(rep.shift_trajectory[0].step == 0);
}

TEST_CASE("snapshot and restore round trip") {
    DenoiserConfig cfg;
    cfg.n = 2;
    cfg.l = 4;
    cfg.d = 3;
    RngStream rng(417, 0);
    ToyDenoiser model(cfg, rng);
    NamedMatrices saved = model.snapshot();

    model.param("temporal0.w_v").value.setConstant(9.0);
    CHECK(model.param("temporal0.w_v").value(0, 0) == 9.0);
    model.restore(saved);
    for (const auto& [name, value] : saved)
        CHECK((model.param(name).value - value).norm() == 0.0);
    CHECK_THROWS_AS(model.param("nope"), std::out_of_range);
}

TEST_CASE("spectral freeze makes repeated forwards identical") {
    DenoiserConfig cfg;
    cfg.n = 2;
    cfg.l = 4;
    cfg.d = 3;
    RngStream rng(419, 0);
    ToyDenoiser model(cfg, rng);
    model.freeze_spectral_scales();
    RngStream data(419, 1);
    SyntheticClip clip = build_synthetic_clip(cfg.n, cfg.l, cfg.d, Motion::statics, data);
    auto a = model.forward(clip.frames, 0.25, clip.condition, nullptr, true);
    auto b = model.forward(clip.frames, 0.25, clip.condition, nullptr, true);
    CHECK((a[0]->value - b[0]->value).norm() == 0.0);
    model.unfreeze_spectral_scales();
}

TEST_CASE("temporal_block_weights reflects the configured mode") {
    DenoiserConfig cfg;
    cfg.n = 2;
    cfg.l = 4;
    cfg.d = 3;
    cfg.temporal_mode = TemporalMode::stam;
    RngStream rng(421, 0);
    ToyDenoiser model(cfg, rng);
    BlockWeights w = model.temporal_block_weights(0);
    CHECK(w.spectral_constrained);
    CHECK(w.norm_z.mode == NormMode::instance_center);

    cfg.temporal_mode = TemporalMode::ta;
    RngStream rng2(421, 1);
    ToyDenoiser ta_model(cfg, rng2);
    BlockWeights wt = ta_model.temporal_block_weights(0);
    CHECK(!wt.spectral_constrained);
    CHECK(wt.norm_z.mode == NormMode::layer_norm);
}
