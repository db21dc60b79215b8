#include "stalab/bench.hpp"

#include <algorithm>
#include <chrono>

namespace stalab {

Mechanism mechanism_from_name(const std::string& name) {
    if (name == "sa") return Mechanism::sa;
    if (name == "sca") return Mechanism::sca;
    if (name == "ffam") return Mechanism::ffam;
    if (name == "full") return Mechanism::full;
    throw DomainError("unknown mechanism: " + name);
}

const char* mechanism_name(Mechanism m) {
    switch (m) {
        case Mechanism::sa: return "sa";
        case Mechanism::sca: return "sca";
        case Mechanism::ffam: return "ffam";
        case Mechanism::full: return "full";
    }
    return "?";
}

FlopEstimate flop_estimate(Mechanism mechanism, long n, long l, long d, long r) {
    if (n < 1 || l < 1 || d < 1)
        throw DomainError("flop_estimate: dims must be positive");
    if (mechanism != Mechanism::ffam && r != 0)
        throw DomainError("flop_estimate: r is only valid for ffam");
    FlopEstimate e;
    e.mechanism = mechanism;
    e.n = n; e.l = l; e.d = d; e.r = r;
    switch (mechanism) {
        case Mechanism::sa: e.context_len = l; break;
        case Mechanism::sca: e.context_len = 2 * l; break;
        case Mechanism::ffam: {
            if (r < 1) throw DomainError("flop_estimate: ffam needs r >= 1");
            long coarse = l / (r * r);
            if (coarse * r * r != l)
                throw ShapeError("flop_estimate: l not divisible by r^2");
            e.context_len = l + (n - 1) * coarse;
            break;
        }
        case Mechanism::full: e.context_len = n * l; break;
    }
    constexpr long long kSoftmaxOps = 5; // ops per score element
    long long per_frame = 2LL * l * e.context_len * d       // scores
                        + 1LL * l * e.context_len * kSoftmaxOps
                        + 2LL * l * e.context_len * d;      // values
    e.flops = per_frame * n;
    return e;
}

double leading_ratio_vs_full(const FlopEstimate& e) {
    return double(e.context_len) / (double(e.n) * double(e.l));
}

namespace {

double percentile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    double idx = p * double(v.size() - 1);
    auto lo = std::size_t(idx);
    auto hi = std::min(lo + 1, v.size() - 1);
    double frac = idx - double(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

} // namespace

BenchReport wall_clock_bench(Mechanism mechanism, long n, long l, long d, long r,
                             long reps, RngStream& rng) {
    if (reps < 20) throw DomainError("wall_clock_bench: reps must be >= 20");
    FlopEstimate est = flop_estimate(mechanism, n, l, d, mechanism == Mechanism::ffam ? r : 0);

    auto [h, w] = infer_grid(l);
    FrameSet frames;
    frames.grid_h = h;
    frames.grid_w = w;
    for (long f = 0; f < n; ++f) {
        Matrix m(l, d);
        for (Eigen::Index i = 0; i < l; ++i)
            for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rng.normal();
        frames.frames.push_back(std::move(m));
    }
    RngStream wrng = rng.substream(1);
    BlockWeights weights = BlockWeights::random(d, d, d, wrng, 0.2);
    weights.norm_z = NormParams::make(NormMode::none);
    weights.norm_c = weights.norm_z;

    double checksum = 0.0;
    auto run_once = [&]() {
        double sum = 0.0;
        switch (mechanism) {
            case Mechanism::sa:
                for (long f = 0; f < n; ++f)
                    sum += attention(frames.frames[f], frames.frames[f], weights).sum();
                break;
            case Mechanism::sca:
                for (const auto& f : sca(frames, weights).frames) sum += f.sum();
                break;
            case Mechanism::ffam:
                for (long f = 0; f < n; ++f) sum += ffam(frames, f, weights, int(r)).sum();
                break;
            case Mechanism::full:
                for (const auto& f : full_st_attention(frames, weights).frames) sum += f.sum();
                break;
        }
        return sum;
    };

    for (int i = 0; i < 3; ++i) checksum = run_once(); // warmup

    std::vector<double> times;
    times.reserve(reps);
    for (long i = 0; i < reps; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        checksum = run_once();
        auto t1 = std::chrono::steady_clock::now();
        times.push_back(double(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
    }

    BenchReport rep;
    rep.mechanism = mechanism;
    rep.n = n; rep.l = l; rep.d = d; rep.r = mechanism == Mechanism::ffam ? r : 0;
    rep.reps = reps;
    rep.median_ns = percentile(times, 0.5);
    rep.p10_ns = percentile(times, 0.1);
    rep.p90_ns = percentile(times, 0.9);
    rep.flops = est.flops;
    rep.checksum = checksum;
    return rep;
}

PairedBench ic_vs_inorm_bench(long n, long l, long d, long reps, RngStream& rng) {
    if (reps < 20) throw DomainError("ic_vs_inorm_bench: reps must be >= 20");
    std::vector<Matrix> batch;
    batch.reserve(l);
    for (long u = 0; u < l; ++u) {
        Matrix m(n, d);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rng.normal();
        batch.push_back(std::move(m));
    }

    auto time_op = [&](auto&& op) {
        double checksum = 0.0;
        for (int i = 0; i < 3; ++i) {
            checksum = 0.0;
            for (const auto& m : batch) checksum += op(m).sum();
        }
        std::vector<double> times;
        times.reserve(reps);
        for (long i = 0; i < reps; ++i) {
            auto t0 = std::chrono::steady_clock::now();
            checksum = 0.0;
            for (const auto& m : batch) checksum += op(m).sum();
            auto t1 = std::chrono::steady_clock::now();
            times.push_back(
                double(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
        }
        BenchReport rep;
        rep.n = n; rep.l = l; rep.d = d;
        rep.reps = reps;
        rep.median_ns = percentile(times, 0.5);
        rep.p10_ns = percentile(times, 0.1);
        rep.p90_ns = percentile(times, 0.9);
        rep.checksum = checksum;
        return rep;
    };

    PairedBench out;
    out.ic = time_op([](const Matrix& m) { return instance_center(m); });
    out.inorm = time_op([](const Matrix& m) { return instance_norm(m); });
    out.ratio = out.inorm.median_ns / std::max(out.ic.median_ns, 1.0);
    return out;
}

} // namespace stalab
