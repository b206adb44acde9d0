#include "gcd/clustering.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numeric>

#include "gcd/geometry.hpp"

namespace gcd {

namespace {

double sqdist(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double e = a[i] - b[i];
        s += e * e;
    }
    return s;
}

// k-means++ seeding over the given candidate indices.
std::vector<Vec> kmeanspp(const std::vector<Vec>& points,
                          const std::vector<std::size_t>& candidates,
                          std::vector<Vec> centers, std::size_t K, Rng& rng) {
    std::vector<double> d2(candidates.size(), std::numeric_limits<double>::max());
    auto refresh = [&](const Vec& c) {
        for (std::size_t i = 0; i < candidates.size(); ++i)
            d2[i] = std::min(d2[i], sqdist(points[candidates[i]], c));
    };
    for (const Vec& c : centers) refresh(c);
    while (centers.size() < K) {
        double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        std::size_t chosen;
        if (total <= 0.0) {
            chosen = std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng);
        } else {
            double r = std::uniform_real_distribution<double>(0.0, total)(rng);
            chosen = 0;
            double acc = 0.0;
            for (std::size_t i = 0; i < candidates.size(); ++i) {
                acc += d2[i];
                if (r <= acc) {
                    chosen = i;
                    break;
                }
            }
        }
        centers.push_back(points[candidates[chosen]]);
        refresh(centers.back());
    }
    return centers;
}

}  // namespace

std::map<std::size_t, std::size_t> confident_pseudo_pins(const std::vector<Vec>& embeddings,
                                                         const std::vector<Vec>& known_centers,
                                                         double threshold) {
    std::map<std::size_t, std::size_t> pins;
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        double best = -2.0;
        std::size_t best_k = 0;
        for (std::size_t k = 0; k < known_centers.size(); ++k) {
            double c = cosine(embeddings[i], known_centers[k]);
            if (c > best) {
                best = c;
                best_k = k;
            }
        }
        if (!known_centers.empty() && best >= threshold) pins[i] = best_k;
    }
    return pins;
}

ClusteringResult ss_kmeans(const std::vector<Vec>& points, std::size_t K, const PinSet& pins,
                           std::uint64_t seed, const std::vector<Vec>* known_centers,
                           std::size_t max_iters) {
    std::size_t n = points.size();
    if (K < 1 || K > n) throw Error(Err::BadK, "K outside [1, n]");
    if (known_centers && known_centers->size() > K)
        throw Error(Err::BadK, "more known centers than clusters");
    for (const auto& [idx, c] : pins.pins) {
        if (idx >= n) throw Error(Err::InconsistentPins, "pin index out of range");
        if (c >= K) throw Error(Err::InconsistentPins, "pin cluster id >= K");
    }

    std::vector<std::size_t> unpinned;
    for (std::size_t i = 0; i < n; ++i)
        if (!pins.pins.count(i)) unpinned.push_back(i);

    Rng rng = sub_rng(seed, 31);
    std::vector<Vec> centers;
    if (known_centers) centers = *known_centers;
    std::vector<std::size_t> all_idx;
    const std::vector<std::size_t>* cands = &unpinned;
    if (unpinned.empty()) {
        all_idx.resize(n);
        std::iota(all_idx.begin(), all_idx.end(), std::size_t{0});
        cands = &all_idx;
    }
    centers = kmeanspp(points, *cands, std::move(centers), K, rng);

    ClusteringResult res;
    res.k = K;
    res.assignment.assign(n, -1);
    std::vector<int> prev(n, -1);

    for (std::size_t it = 0; it < max_iters; ++it) {
        // assignment step; pinned samples never move
        for (std::size_t i = 0; i < n; ++i) {
            auto pin = pins.pins.find(i);
            if (pin != pins.pins.end()) {
                res.assignment[i] = static_cast<int>(pin->second);
                continue;
            }
            double best = std::numeric_limits<double>::max();
            int best_k = 0;
            for (std::size_t k = 0; k < K; ++k) {
                double d = sqdist(points[i], centers[k]);
                if (d < best) {
                    best = d;
                    best_k = static_cast<int>(k);
                }
            }
            res.assignment[i] = best_k;
        }
        for (const auto& [idx, c] : pins.pins)
            assert(res.assignment[idx] == static_cast<int>(c));

        if (it > 0 && res.assignment == prev) break;
        prev = res.assignment;

        // update step
        std::size_t dim = points.empty() ? 0 : points.front().size();
        std::vector<Vec> sum(K, Vec(dim, 0.0));
        std::vector<std::size_t> count(K, 0);
        for (std::size_t i = 0; i < n; ++i) {
            int k = res.assignment[i];
            for (std::size_t j = 0; j < dim; ++j) sum[k][j] += points[i][j];
            ++count[k];
        }
        for (std::size_t k = 0; k < K; ++k)
            if (count[k] > 0) {
                centers[k] = sum[k];
                for (double& x : centers[k]) x /= static_cast<double>(count[k]);
            }
        // empty clusters grab the worst-fit unpinned point
        for (std::size_t k = 0; k < K; ++k) {
            if (count[k] > 0) continue;
            double worst = -1.0;
            std::size_t worst_i = 0;
            for (std::size_t i : unpinned) {
                double d = sqdist(points[i], centers[res.assignment[i]]);
                if (d > worst) {
                    worst = d;
                    worst_i = i;
                }
            }
            if (worst < 0.0) continue;  // everything pinned; leave center as is
            centers[k] = points[worst_i];
            res.assignment[worst_i] = static_cast<int>(k);
            ++count[k];
        }

        double obj = 0.0;
        for (std::size_t i = 0; i < n; ++i) obj += sqdist(points[i], centers[res.assignment[i]]);
        res.objective_trace.push_back(obj);
        res.objective = obj;
        res.iterations = it + 1;
    }
    res.centers = std::move(centers);
    return res;
}

std::vector<std::size_t> hungarian(const std::vector<std::vector<double>>& cost) {
    std::size_t n = cost.size();
    for (const auto& row : cost) {
        if (row.size() != n) throw Error(Err::NonSquare, "cost matrix must be square");
        for (double c : row)
            if (!std::isfinite(c)) throw Error(Err::NonFiniteValue, "non-finite cost entry");
    }
    if (n == 0) return {};

    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), kInf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            std::size_t i0 = p[j0], j1 = 0;
            double delta = kInf;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> row_to_col(n);
    for (std::size_t j = 1; j <= n; ++j)
        if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

GcdMetrics gcd_accuracy(const std::vector<int>& assignment, const std::vector<int>& labels,
                        const std::set<int>& known_classes) {
    if (assignment.size() != labels.size())
        throw Error(Err::ShapeMismatch, "assignment/label size mismatch");
    if (assignment.empty()) throw Error(Err::EmptyBatch, "nothing to score");
    for (int lab : labels)
        if (lab < 0) throw Error(Err::MissingLabels, "unlabeled sample in evaluation");

    std::set<int> class_set(labels.begin(), labels.end());
    std::vector<int> classes(class_set.begin(), class_set.end());
    std::map<int, std::size_t> class_col;
    for (std::size_t j = 0; j < classes.size(); ++j) class_col[classes[j]] = j;

    int max_cluster = *std::max_element(assignment.begin(), assignment.end());
    std::size_t n_clusters = static_cast<std::size_t>(max_cluster) + 1;
    std::size_t side = std::max(n_clusters, classes.size());

    // contingency matrix, zero-padded to square; Hungarian maximizes matches
    std::vector<std::vector<double>> cost(side, std::vector<double>(side, 0.0));
    for (std::size_t i = 0; i < assignment.size(); ++i)
        cost[assignment[i]][class_col[labels[i]]] -= 1.0;
    std::vector<std::size_t> match = hungarian(cost);

    GcdMetrics m;
    m.matching.assign(n_clusters, -1);
    for (std::size_t c = 0; c < n_clusters; ++c)
        if (match[c] < classes.size()) m.matching[c] = classes[match[c]];

    std::size_t hit_all = 0, hit_old = 0, hit_new = 0;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        bool hit = m.matching[assignment[i]] == labels[i];
        bool is_old = known_classes.count(labels[i]) > 0;
        if (is_old)
            ++m.n_old;
        else
            ++m.n_new;
        if (hit) {
            ++hit_all;
            (is_old ? hit_old : hit_new)++;
        }
    }
    m.all = static_cast<double>(hit_all) / static_cast<double>(assignment.size());
    m.old_acc = m.n_old ? static_cast<double>(hit_old) / static_cast<double>(m.n_old) : 0.0;
    m.new_acc = m.n_new ? static_cast<double>(hit_new) / static_cast<double>(m.n_new) : 0.0;
    return m;
}

namespace {

// Score for Brent's search: how far the clustering objective dips below the
// chord joining the two ends of the K range — the knee of the objective
// curve, as a pointwise function so a 1-D search can probe it. Accuracy on a
// held-out labeled half was tried first and is degenerate: once the labeled
// classes separate, it sits at 1.0 for every K ≥ |C_kwn| no matter how the
// unlabeled-only classes are clustered, and any search collapses to the range
// edge. Objectives take the best of three k-means++ restarts so one bad local
// optimum cannot dent the curve.
struct KneeScorer {
    const std::vector<Vec>& embeddings;
    const PinSet& pins;
    const std::vector<Vec>& prototypes;
    std::size_t k_min;
    std::size_t k_max;
    std::uint64_t seed;
    std::map<std::size_t, double> obj_memo;
    std::map<std::size_t, double> memo;

    double objective(std::size_t k) {
        auto it = obj_memo.find(k);
        if (it != obj_memo.end()) return it->second;
        double best = std::numeric_limits<double>::max();
        for (std::uint64_t r = 0; r < 3; ++r) {
            ClusteringResult res = ss_kmeans(embeddings, k, pins, seed + r, &prototypes, 50);
            best = std::min(best, res.objective);
        }
        obj_memo[k] = best;
        return best;
    }

    double operator()(std::size_t k) {
        auto it = memo.find(k);
        if (it != memo.end()) return it->second;
        double lo = objective(k_min), hi = objective(k_max);
        double span = lo - hi;
        double score = 0.0;
        if (span > 1e-12 && k_max > k_min) {
            double drop = (objective(k) - hi) / span;  // 1 at k_min, 0 at k_max
            double along = static_cast<double>(k - k_min) / static_cast<double>(k_max - k_min);
            score = (1.0 - along) - drop;
        }
        memo[k] = score;
        return score;
    }
};

std::size_t round_clamped(double x, std::size_t lo, std::size_t hi) {
    double r = std::round(x);
    if (r < static_cast<double>(lo)) r = static_cast<double>(lo);
    if (r > static_cast<double>(hi)) r = static_cast<double>(hi);
    return static_cast<std::size_t>(r);
}

// Brent's derivative-free minimizer on [-score], evaluated at rounded k.
std::size_t brent_search(KneeScorer& scorer, std::size_t k_min, std::size_t k_max) {
    auto f = [&](double x) { return -scorer(round_clamped(x, k_min, k_max)); };
    const double golden = 0.3819660112501051;
    const double tol = 0.6;  // below integer resolution; rounding memoizes
    double a = static_cast<double>(k_min), b = static_cast<double>(k_max);
    double x = a + golden * (b - a), w = x, v = x;
    double fx = f(x), fw = fx, fv = fx;
    double d = 0.0, e = 0.0;
    for (int iter = 0; iter < 40; ++iter) {
        double xm = 0.5 * (a + b);
        if (std::fabs(x - xm) <= tol * 2.0 - 0.5 * (b - a)) break;
        bool parabolic = false;
        if (std::fabs(e) > tol) {
            double r = (x - w) * (fx - fv);
            double q = (x - v) * (fx - fw);
            double p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if (q > 0.0) p = -p;
            q = std::fabs(q);
            double etmp = e;
            e = d;
            if (std::fabs(p) < std::fabs(0.5 * q * etmp) && p > q * (a - x) && p < q * (b - x)) {
                d = p / q;
                parabolic = true;
            }
        }
        if (!parabolic) {
            e = (x >= xm) ? a - x : b - x;
            d = golden * e;
        }
        double u = (std::fabs(d) >= tol) ? x + d : x + (d > 0 ? tol : -tol);
        double fu = f(u);
        if (fu <= fx) {
            if (u >= x)
                a = x;
            else
                b = x;
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if (u < x)
                a = u;
            else
                b = u;
            if (fu <= fw || w == x) {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if (fu <= fv || v == x || v == w) {
                v = u;
                fv = fu;
            }
        }
    }
    // best integer actually probed
    std::size_t best_k = k_min;
    double best = -1.0;
    for (const auto& [k, s] : scorer.memo)
        if (s > best) {
            best = s;
            best_k = k;
        }
    return best_k;
}

}  // namespace

std::size_t estimate_k(const std::vector<Vec>& embeddings,
                       const std::vector<int>& source_class_ranks, std::size_t n_known,
                       std::size_t k_min, std::size_t k_max, KMethod method,
                       std::uint64_t seed) {
    if (k_min > k_max || k_min < 1) throw Error(Err::EmptyRange, "empty K range");
    if (k_min < n_known) throw Error(Err::EmptyRange, "K range must start at |C_kwn|");
    if (k_min == k_max) return k_min;

    PinSet pins;
    std::vector<int> ranks = source_class_ranks;
    for (std::size_t i = 0; i < ranks.size(); ++i)
        pins.pins[i] = static_cast<std::size_t>(ranks[i]);
    std::vector<Vec> src(embeddings.begin(), embeddings.begin() + ranks.size());
    PrototypeBank bank = compute_prototypes(src, ranks, n_known);

    if (method == KMethod::Brent) {
        KneeScorer scorer{embeddings, pins, bank.prototypes, k_min, k_max, seed, {}, {}};
        // seed the bracket so the memo always covers the endpoints
        scorer(k_min);
        scorer(k_max);
        return brent_search(scorer, k_min, k_max);
    }

    // Elbow: curvature peak of the objective sweep with all source pins.
    std::vector<double> obj;
    std::vector<std::size_t> ks;
    for (std::size_t k = k_min; k <= k_max; ++k) {
        ClusteringResult res = ss_kmeans(embeddings, k, pins, seed, &bank.prototypes, 50);
        ks.push_back(k);
        obj.push_back(res.objective);
    }
    if (ks.size() < 3) return ks.front();
    double lo = *std::min_element(obj.begin(), obj.end());
    double hi = *std::max_element(obj.begin(), obj.end());
    double span = std::max(hi - lo, 1e-12);
    std::size_t best_k = ks[1];
    double best_curv = -std::numeric_limits<double>::max();
    for (std::size_t i = 1; i + 1 < obj.size(); ++i) {
        double j0 = (obj[i - 1] - lo) / span;
        double j1 = (obj[i] - lo) / span;
        double j2 = (obj[i + 1] - lo) / span;
        double curv = j0 - 2.0 * j1 + j2;
        if (curv > best_curv) {
            best_curv = curv;
            best_k = ks[i];
        }
    }
    return best_k;
}

}  // namespace gcd
