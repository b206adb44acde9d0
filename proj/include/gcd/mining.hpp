#pragma once

#include "gcd/common.hpp"

namespace gcd {

constexpr int kNoise = -1;

// Batch pool = originals followed by one Gaussian-jittered copy each.
struct AugmentedPool {
    std::vector<Vec> embeddings;
    std::vector<std::size_t> origin;  // index into the original batch
    std::vector<bool> augmented;

    std::size_t size() const { return embeddings.size(); }
};

AugmentedPool augment(const std::vector<Vec>& batch, double sigma, std::uint64_t seed);

struct NeighborAssignment {
    // Per pool element: positive = Manhattan-nearest profile, negatives =
    // the M farthest. Ties broken toward the lower index.
    std::vector<std::size_t> positive;
    std::vector<std::vector<std::size_t>> negatives;
};

NeighborAssignment mine_neighbors(const std::vector<Vec>& profiles, std::size_t m_negatives);

// Classic density-based labeling; -1 marks noise. Deterministic in input order.
std::vector<int> dbscan(const std::vector<Vec>& points, double eps, std::size_t min_pts);

struct Quadruplet {
    std::size_t x;
    std::size_t x_sim;   // same cluster as x
    std::size_t x_diff;  // different (non-noise) cluster
    std::size_t masked_patch;
};

std::vector<Quadruplet> sample_quadruplets(const std::vector<int>& cluster_labels,
                                           std::size_t n_quads, std::size_t n_patches,
                                           std::uint64_t seed);

}  // namespace gcd
