#include <doctest.h>

#include <random>

#include "gcd/geometry.hpp"

using namespace gcd;

namespace {

Vec e(std::size_t dim, std::size_t axis) {
    Vec v(dim, 0.0);
    v[axis] = 1.0;
    return v;
}

Vec random_unit(std::size_t n, Rng& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    Vec v(n);
    double norm = 0.0;
    while (norm < 1e-6) {
        for (double& x : v) x = g(rng);
        norm = norm2(v);
    }
    for (double& x : v) x /= norm;
    return v;
}

Vec random_profile(std::size_t n, Rng& rng) {
    std::uniform_real_distribution<double> u(0.01, 1.0);
    Vec p(n);
    double sum = 0.0;
    for (double& x : p) {
        x = u(rng);
        sum += x;
    }
    for (double& x : p) x /= sum;
    return p;
}

}  // namespace

TEST_SUITE("geometry") {

TEST_CASE("prototypes are normalized class means") {
    SUBCASE("single embedding normalizes to itself") {
        PrototypeBank bank = compute_prototypes({{3.0, 4.0}}, {0}, 1);
        CHECK(bank.prototypes[0][0] == doctest::Approx(0.6));
        CHECK(bank.prototypes[0][1] == doctest::Approx(0.8));
    }
    SUBCASE("symmetric pair averages to the shared component") {
        // {e1 + e2, e1 - e2} -> mean e1
        PrototypeBank bank = compute_prototypes({{1.0, 1.0}, {1.0, -1.0}}, {0, 0}, 1);
        CHECK(bank.prototypes[0][0] == doctest::Approx(1.0));
        CHECK(bank.prototypes[0][1] == doctest::Approx(0.0));
    }
    SUBCASE("matches a naive per-class mean") {
        Rng rng(2);
        std::normal_distribution<double> g(0.0, 1.0);
        std::vector<Vec> emb;
        std::vector<int> labels;
        std::size_t n_classes = 3, dim = 5;
        for (int i = 0; i < 60; ++i) {
            Vec v(dim);
            for (double& x : v) x = g(rng);
            emb.push_back(v);
            labels.push_back(i % static_cast<int>(n_classes));
        }
        PrototypeBank bank = compute_prototypes(emb, labels, n_classes);
        for (std::size_t c = 0; c < n_classes; ++c) {
            Vec mean(dim, 0.0);
            std::size_t count = 0;
            for (std::size_t i = 0; i < emb.size(); ++i)
                if (labels[i] == static_cast<int>(c)) {
                    for (std::size_t j = 0; j < dim; ++j) mean[j] += emb[i][j];
                    ++count;
                }
            for (double& x : mean) x /= static_cast<double>(count);
            double n = norm2(mean);
            for (std::size_t j = 0; j < dim; ++j)
                CHECK(bank.prototypes[c][j] == doctest::Approx(mean[j] / n).epsilon(1e-12));
        }
    }
    SUBCASE("empty class is rejected") {
        try {
            compute_prototypes({{1.0, 0.0}}, {0}, 2);
            CHECK(false);
        } catch (const Error& err) {
            CHECK(err.code() == Err::EmptyClass);
        }
    }
    SUBCASE("recomputation is idempotent") {
        std::vector<Vec> emb{{1.0, 2.0}, {0.5, -1.0}, {2.0, 2.0}};
        std::vector<int> labels{0, 1, 0};
        PrototypeBank a = compute_prototypes(emb, labels, 2);
        PrototypeBank b = compute_prototypes(emb, labels, 2);
        CHECK(a.prototypes == b.prototypes);
    }
}

TEST_CASE("cosine endpoints") {
    Vec u{1.0, 2.0, -1.0};
    CHECK(cosine(u, u) == doctest::Approx(1.0));
    CHECK(cosine({1.0, 0.0}, {0.0, 5.0}) == doctest::Approx(0.0));
    Vec neg = u;
    for (double& x : neg) x = -x;
    CHECK(cosine(u, neg) == doctest::Approx(-1.0));
    try {
        cosine({0.0, 0.0, 0.0}, u);
        CHECK(false);
    } catch (const Error& err) {
        CHECK(err.code() == Err::ZeroVector);
    }
}

TEST_CASE("distance profile is a softmax over cosines") {
    PrototypeBank bank;
    bank.prototypes = {e(2, 0), e(2, 1)};

    SUBCASE("on-prototype query gives softmax of [1, 0]") {
        Vec p = distance_profile(e(2, 0), bank);
        double expected = std::exp(1.0) / (std::exp(1.0) + 1.0);
        CHECK(p[0] == doctest::Approx(expected).epsilon(1e-6));
        CHECK(p[1] == doctest::Approx(1.0 - expected).epsilon(1e-6));
        CHECK(p[0] == doctest::Approx(0.7311).epsilon(1e-4));
    }
    SUBCASE("equidistant query is uniform") {
        Vec p = distance_profile({1.0, 1.0}, bank);
        CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("profiles are valid distributions on random input") {
        Rng rng(7);
        PrototypeBank big;
        for (int i = 0; i < 5; ++i) big.prototypes.push_back(random_unit(6, rng));
        for (int trial = 0; trial < 100; ++trial) {
            Vec p = distance_profile(random_unit(6, rng), big);
            double sum = 0.0;
            for (double x : p) {
                CHECK(x >= 0.0);
                CHECK(x <= 1.0);
                sum += x;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
            CHECK(entropy(p) <= std::log(5.0) + 1e-12);
        }
    }
    SUBCASE("shifted-sum ablation also normalizes") {
        Vec p = distance_profile({1.0, 1.0}, bank, ProfileNorm::ShiftedSum);
        CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-12));
    }
}

TEST_CASE("entropy values") {
    CHECK(entropy({1.0, 0.0, 0.0}) == doctest::Approx(0.0));
    CHECK(entropy(Vec(4, 0.25)) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(entropy({0.7311, 0.2689}) == doctest::Approx(0.5822).epsilon(1e-4));
}

TEST_CASE("manhattan distance on profiles") {
    CHECK(manhattan({0.5, 0.5}, {0.5, 0.5}) == doctest::Approx(0.0));
    CHECK(manhattan({1.0, 0.0}, {0.0, 1.0}) == doctest::Approx(2.0));
    try {
        manhattan({1.0}, {0.5, 0.5});
        CHECK(false);
    } catch (const Error& err) {
        CHECK(err.code() == Err::ShapeMismatch);
    }
    SUBCASE("symmetry and triangle inequality") {
        Rng rng(13);
        for (int trial = 0; trial < 100; ++trial) {
            Vec p = random_profile(4, rng), q = random_profile(4, rng), r = random_profile(4, rng);
            CHECK(manhattan(p, q) == doctest::Approx(manhattan(q, p)).epsilon(1e-12));
            CHECK(manhattan(p, r) <= manhattan(p, q) + manhattan(q, r) + 1e-12);
            CHECK(manhattan(p, q) <= 2.0 + 1e-12);
        }
    }
}

}  // TEST_SUITE
