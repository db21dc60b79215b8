#pragma once

#include <string>
#include <vector>

#include "stalab/layers.hpp"

namespace stalab {

enum class Mechanism { sa, sca, ffam, full };

Mechanism mechanism_from_name(const std::string& name);
const char* mechanism_name(Mechanism m);

struct FlopEstimate {
    Mechanism mechanism = Mechanism::sa;
    long n = 0, l = 0, d = 0, r = 0;
    long context_len = 0;
    long long flops = 0;
};

// Exact flop count: per frame 2*l*cl*d (scores) + l*cl*c_s (softmax, c_s = 5
// ops/element) + 2*l*cl*d (values), summed over n frames.
FlopEstimate flop_estimate(Mechanism mechanism, long n, long l, long d, long r = 0);

// Leading-term cost relative to full spatial-temporal attention
// (context_len / (n*l)); e.g. 11/32 for FFAM at n=8, r=2 and 2/n for SCA.
double leading_ratio_vs_full(const FlopEstimate& e);

struct BenchReport {
    Mechanism mechanism = Mechanism::sa;
    long n = 0, l = 0, d = 0, r = 0;
    long reps = 0;
    double median_ns = 0.0, p10_ns = 0.0, p90_ns = 0.0;
    long long flops = 0;
    double checksum = 0.0; // sum of outputs; defeats dead-code elimination
};

// Median/percentile wall time of the mechanism's forward pass over random
// inputs with fixed weights; warmup iterations are discarded. Single-threaded.
BenchReport wall_clock_bench(Mechanism mechanism, long n, long l, long d, long r,
                             long reps, RngStream& rng);

struct PairedBench {
    BenchReport ic;
    BenchReport inorm;
    double ratio = 0.0; // median(instance_norm) / median(instance_center)
};

// Throughput of instance centering vs instance norm over identical batched
// inputs (l slices of n x d).
PairedBench ic_vs_inorm_bench(long n, long l, long d, long reps, RngStream& rng);

} // namespace stalab
