#include "gcd/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace gcd {

PrototypeBank compute_prototypes(const std::vector<Vec>& embeddings,
                                 const std::vector<int>& labels, std::size_t n_classes) {
    if (embeddings.size() != labels.size())
        throw Error(Err::ShapeMismatch, "embeddings/labels size mismatch");
    if (n_classes == 0) throw Error(Err::EmptyClass, "no classes");
    std::size_t dim = embeddings.empty() ? 0 : embeddings.front().size();
    std::vector<Vec> sum(n_classes, Vec(dim, 0.0));
    std::vector<std::size_t> count(n_classes, 0);
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        int k = labels[i];
        if (k < 0 || static_cast<std::size_t>(k) >= n_classes)
            throw Error(Err::LabelOutOfRange, "label rank out of range");
        for (std::size_t j = 0; j < dim; ++j) sum[k][j] += embeddings[i][j];
        ++count[k];
    }
    PrototypeBank bank;
    bank.prototypes.resize(n_classes);
    for (std::size_t k = 0; k < n_classes; ++k) {
        if (count[k] == 0)
            throw Error(Err::EmptyClass, "class rank " + std::to_string(k) + " has no embeddings");
        Vec& p = bank.prototypes[k];
        p = sum[k];
        for (double& x : p) x /= static_cast<double>(count[k]);
        double n = norm2(p);
        if (n < 1e-12) throw Error(Err::ZeroVector, "class mean is the zero vector");
        for (double& x : p) x /= n;
    }
    return bank;
}

double cosine(const Vec& u, const Vec& v) {
    if (u.size() != v.size()) throw Error(Err::ShapeMismatch, "cosine dim mismatch");
    double nu = norm2(u), nv = norm2(v);
    if (nu < 1e-12 || nv < 1e-12) throw Error(Err::ZeroVector, "cosine of zero vector");
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

Vec distance_profile(const Vec& z, const PrototypeBank& bank, ProfileNorm norm) {
    if (bank.size() == 0) throw Error(Err::EmptyClass, "empty prototype bank");
    Vec s(bank.size());
    for (std::size_t k = 0; k < bank.size(); ++k) s[k] = cosine(z, bank.prototypes[k]);
    if (norm == ProfileNorm::Softmax) {
        double mx = *std::max_element(s.begin(), s.end());
        double sum = 0.0;
        for (double& v : s) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (double& v : s) v /= sum;
    } else {
        double sum = 0.0;
        for (double& v : s) {
            v += 1.0;  // cosines live in [-1,1]
            sum += v;
        }
        if (sum < 1e-12)
            std::fill(s.begin(), s.end(), 1.0 / static_cast<double>(s.size()));
        else
            for (double& v : s) v /= sum;
    }
    return s;
}

double entropy(const Vec& p) {
    double h = 0.0;
    for (double x : p)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

double manhattan(const Vec& p, const Vec& q) {
    if (p.size() != q.size()) throw Error(Err::ShapeMismatch, "manhattan dim mismatch");
    double d = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) d += std::fabs(p[i] - q[i]);
    return d;
}

}  // namespace gcd
