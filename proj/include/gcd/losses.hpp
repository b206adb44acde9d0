#pragma once

#include "gcd/geometry.hpp"

namespace gcd {

struct LossGrad {
    double value = 0.0;
    Vec grad;  // w.r.t. the operation's primary input
};

// Softmax cross-entropy against a hard label; grad w.r.t. logits.
LossGrad loss_warmup(const Vec& logits, int label, std::size_t n_classes);

struct AlignResult {
    double value = 0.0;
    std::vector<Vec> grads;  // w.r.t. each discriminator-space embedding
};

// Mean over the batch of CE(uniform, profile), probabilities clamped to
// [1e-7, 1]. The adversarial min-max is realized by the caller via
// grad_reverse on the projector side.
AlignResult loss_align(const std::vector<Vec>& disc_embeddings, const PrototypeBank& bank,
                       ProfileNorm norm = ProfileNorm::Softmax);

// Prototype-softmax contrastive loss for a source sample of class rank k.
LossGrad loss_con_source(const Vec& z, const PrototypeBank& bank, int class_rank);

struct ContrastSet {
    Vec anchor;
    Vec positive;
    std::vector<Vec> negatives;
    double tau = 0.1;
};

struct ContrastGrad {
    double value = 0.0;
    Vec d_anchor;
    Vec d_positive;
    std::vector<Vec> d_negatives;
};

// InfoNCE over cosine similarities at temperature tau.
ContrastGrad loss_con_target(const ContrastSet& set);

// Mean squared error over patch features; grad w.r.t. the decoder output.
LossGrad loss_recon(const Vec& decoded, const Vec& truth);

// Hinge inpainting objective: max(0, r_sim - r_diff) + r_self.
// Fills the subgradient weights for chaining into the three recon paths.
double loss_inpaint(double r_self, double r_sim, double r_diff, double* w_self = nullptr,
                    double* w_sim = nullptr, double* w_diff = nullptr);

constexpr double kProbClamp = 1e-7;

}  // namespace gcd
