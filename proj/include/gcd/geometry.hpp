#pragma once

#include "gcd/common.hpp"

namespace gcd {

// One unit-norm prototype per known class, indexed by class rank 0..K-1.
struct PrototypeBank {
    std::vector<Vec> prototypes;

    std::size_t size() const { return prototypes.size(); }
};

enum class ProfileNorm {
    Softmax,     // softmax over cosine similarities (default)
    ShiftedSum,  // (cos + 1) / sum(cos + 1); ablation path
};

// labels are class ranks in [0, n_classes); every class must be represented.
PrototypeBank compute_prototypes(const std::vector<Vec>& embeddings,
                                 const std::vector<int>& labels, std::size_t n_classes);

double cosine(const Vec& u, const Vec& v);

// Probability vector over known classes from cosine similarities to the bank.
Vec distance_profile(const Vec& z, const PrototypeBank& bank,
                     ProfileNorm norm = ProfileNorm::Softmax);

// Shannon entropy in nats, 0*ln 0 := 0.
double entropy(const Vec& p);

double manhattan(const Vec& p, const Vec& q);

}  // namespace gcd
