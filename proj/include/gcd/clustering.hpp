#pragma once

#include <map>
#include <set>

#include "gcd/common.hpp"

namespace gcd {

// sample index -> fixed cluster id. Source labels and confident pseudo-labels
// both end up here; ss_kmeans never moves a pinned sample.
struct PinSet {
    std::map<std::size_t, std::size_t> pins;
};

// Targets whose best cosine to a known-class center clears the threshold are
// pinned to that class. At most one pin per sample.
std::map<std::size_t, std::size_t> confident_pseudo_pins(const std::vector<Vec>& embeddings,
                                                         const std::vector<Vec>& known_centers,
                                                         double threshold);

struct ClusteringResult {
    std::vector<int> assignment;
    std::vector<Vec> centers;
    std::size_t k = 0;
    double objective = 0.0;  // sum of squared distances
    std::size_t iterations = 0;
    std::vector<double> objective_trace;
};

// Lloyd iterations with pinned assignments. Known-class centers (when given)
// seed the first clusters; the rest start k-means++ over unpinned points.
ClusteringResult ss_kmeans(const std::vector<Vec>& points, std::size_t K, const PinSet& pins,
                           std::uint64_t seed, const std::vector<Vec>* known_centers = nullptr,
                           std::size_t max_iters = 100);

// Minimal-cost perfect assignment on a finite square matrix; returns the
// column chosen for each row.
std::vector<std::size_t> hungarian(const std::vector<std::vector<double>>& cost);

struct GcdMetrics {
    double all = 0.0;
    double old_acc = 0.0;
    double new_acc = 0.0;
    std::vector<int> matching;  // cluster id -> class id (-1 for unmatched)
    std::size_t n_old = 0;
    std::size_t n_new = 0;
};

// Hungarian-matched clustering accuracy; Old/New share the single matching
// computed on the full set.
GcdMetrics gcd_accuracy(const std::vector<int>& assignment, const std::vector<int>& labels,
                        const std::set<int>& known_classes);

enum class KMethod { Brent, Elbow };

// embeddings = source block first (class ranks given), then target.
// Brent maximizes the knee score of the pinned objective curve (distance
// below the chord across the K range); Elbow sweeps every K and takes the
// curvature peak of the normalized objective.
std::size_t estimate_k(const std::vector<Vec>& embeddings,
                       const std::vector<int>& source_class_ranks, std::size_t n_known,
                       std::size_t k_min, std::size_t k_max, KMethod method,
                       std::uint64_t seed);

}  // namespace gcd
