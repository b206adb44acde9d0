#include "gcd/mining.hpp"

#include <algorithm>
#include <deque>
#include <numeric>

#include "gcd/geometry.hpp"

namespace gcd {

AugmentedPool augment(const std::vector<Vec>& batch, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw Error(Err::InvalidConfig, "jitter sigma must be >= 0");
    AugmentedPool pool;
    pool.embeddings.reserve(2 * batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        pool.embeddings.push_back(batch[i]);
        pool.origin.push_back(i);
        pool.augmented.push_back(false);
    }
    Rng rng = sub_rng(seed, 17);
    std::normal_distribution<double> g;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Vec copy = batch[i];
        for (double& x : copy) x += sigma * g(rng);
        pool.embeddings.push_back(std::move(copy));
        pool.origin.push_back(i);
        pool.augmented.push_back(true);
    }
    return pool;
}

NeighborAssignment mine_neighbors(const std::vector<Vec>& profiles, std::size_t m_negatives) {
    std::size_t n = profiles.size();
    if (m_negatives < 1) throw Error(Err::InvalidConfig, "need at least one negative");
    if (n < m_negatives + 2)
        throw Error(Err::PoolTooSmall, "pool smaller than M + 2");

    NeighborAssignment out;
    out.positive.resize(n);
    out.negatives.resize(n);
    std::vector<std::pair<double, std::size_t>> dist;
    dist.reserve(n - 1);
    for (std::size_t a = 0; a < n; ++a) {
        dist.clear();
        for (std::size_t b = 0; b < n; ++b)
            if (b != a) dist.emplace_back(manhattan(profiles[a], profiles[b]), b);
        // positive: smallest distance, tie -> lower index
        auto best = std::min_element(dist.begin(), dist.end());
        out.positive[a] = best->second;
        // negatives: M largest distances; on ties prefer the lower index
        std::sort(dist.begin(), dist.end(), [](const auto& x, const auto& y) {
            if (x.first != y.first) return x.first > y.first;
            return x.second < y.second;
        });
        std::vector<std::size_t> negs;
        for (std::size_t i = 0; i < dist.size() && negs.size() < m_negatives; ++i)
            if (dist[i].second != out.positive[a]) negs.push_back(dist[i].second);
        out.negatives[a] = std::move(negs);
    }
    return out;
}

std::vector<int> dbscan(const std::vector<Vec>& points, double eps, std::size_t min_pts) {
    if (eps <= 0.0) throw Error(Err::InvalidConfig, "eps must be positive");
    if (min_pts < 1) throw Error(Err::InvalidConfig, "min_pts must be >= 1");
    constexpr int kUnvisited = -2;
    std::size_t n = points.size();
    std::vector<int> label(n, kUnvisited);
    double eps2 = eps * eps;

    // neighbor lists are independent per point, so this parallelizes
    // without affecting the (sequential, order-deterministic) expansion
    std::vector<std::vector<std::size_t>> nbrs(n);
    parallel_for(0, n, [&](std::size_t p) {
        for (std::size_t q = 0; q < n; ++q) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < points[p].size(); ++j) {
                double e = points[p][j] - points[q][j];
                d2 += e * e;
            }
            if (d2 <= eps2) nbrs[p].push_back(q);
        }
    });
    auto region = [&](std::size_t p) -> const std::vector<std::size_t>& { return nbrs[p]; };

    int next_cluster = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (label[i] != kUnvisited) continue;
        const std::vector<std::size_t>& seeds = region(i);
        if (seeds.size() < min_pts) {
            label[i] = kNoise;
            continue;
        }
        int c = next_cluster++;
        label[i] = c;
        std::deque<std::size_t> frontier(seeds.begin(), seeds.end());
        while (!frontier.empty()) {
            std::size_t q = frontier.front();
            frontier.pop_front();
            if (label[q] == kNoise) label[q] = c;  // border point
            if (label[q] != kUnvisited) continue;
            label[q] = c;
            const std::vector<std::size_t>& nb = region(q);
            if (nb.size() >= min_pts)
                frontier.insert(frontier.end(), nb.begin(), nb.end());
        }
    }
    return label;
}

std::vector<Quadruplet> sample_quadruplets(const std::vector<int>& cluster_labels,
                                           std::size_t n_quads, std::size_t n_patches,
                                           std::uint64_t seed) {
    if (n_patches < 1) throw Error(Err::InvalidConfig, "need at least one patch");
    std::vector<std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < cluster_labels.size(); ++i) {
        int c = cluster_labels[i];
        if (c < 0) continue;
        if (static_cast<std::size_t>(c) >= members.size()) members.resize(c + 1);
        members[c].push_back(i);
    }
    std::vector<std::size_t> nonempty, pair_capable;
    for (std::size_t c = 0; c < members.size(); ++c) {
        if (members[c].empty()) continue;
        nonempty.push_back(c);
        if (members[c].size() >= 2) pair_capable.push_back(c);
    }
    if (nonempty.size() < 2 || pair_capable.empty())
        throw Error(Err::InsufficientClusters,
                    "need >= 2 non-noise clusters with one of size >= 2");

    Rng rng = sub_rng(seed, 23);
    auto pick = [&](std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    };

    std::vector<Quadruplet> quads;
    quads.reserve(n_quads);
    for (std::size_t q = 0; q < n_quads; ++q) {
        std::size_t c = pair_capable[pick(pair_capable.size())];
        const auto& own = members[c];
        std::size_t xi = pick(own.size());
        std::size_t si = pick(own.size() - 1);
        if (si >= xi) ++si;
        std::size_t other;
        do {
            other = nonempty[pick(nonempty.size())];
        } while (other == c);
        Quadruplet quad;
        quad.x = own[xi];
        quad.x_sim = own[si];
        quad.x_diff = members[other][pick(members[other].size())];
        quad.masked_patch = pick(n_patches);
        quads.push_back(quad);
    }
    return quads;
}

}  // namespace gcd
