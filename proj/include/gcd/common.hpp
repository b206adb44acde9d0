#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gcd {

using Vec = std::vector<double>;

// Dense row-major matrix, double precision throughout.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

    bool operator==(const Mat& o) const = default;
};

enum class Err {
    // data
    MalformedHeader,
    ShapeMismatch,
    NonFiniteValue,
    UnknownVersion,
    IoFailure,
    MissingLabels,
    // config / usage
    InvalidConfig,
    BadK,
    EmptyRange,
    // numerics / contracts
    EmptyClass,
    ZeroVector,
    LabelOutOfRange,
    EmptyBatch,
    NegativeLoss,
    PoolTooSmall,
    InsufficientClusters,
    InconsistentPins,
    NonSquare,
    TapeReused,
};

class Error : public std::runtime_error {
public:
    Error(Err code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    Err code() const { return code_; }

private:
    Err code_;
};

// Process exit codes for the CLI: 2 = config error, 3 = data error.
inline int exit_code_for(Err e) {
    switch (e) {
        case Err::InvalidConfig:
        case Err::BadK:
        case Err::EmptyRange:
            return 2;
        default:
            return 3;
    }
}

inline bool all_finite(const Vec& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline double dot(const Vec& u, const Vec& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

inline double norm2(const Vec& v) { return std::sqrt(dot(v, v)); }

using Rng = std::mt19937_64;

// Derives an independent stream from a master seed; keeps module RNG
// consumption decoupled so adding draws in one place does not shift others.
inline Rng sub_rng(std::uint64_t master_seed, std::uint64_t stream) {
    std::seed_seq seq{master_seed, stream ^ std::uint64_t{0x9e3779b97f4a7c15}};
    return Rng(seq);
}

// Worker thread budget; capped by the GCD_THREADS environment variable.
std::size_t worker_threads();

// Deterministic parallel loop: [begin, end) split into contiguous chunks,
// results independent of the thread count.
void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t)>& body);

}  // namespace gcd
