#include "gcd/losses.hpp"

#include <algorithm>
#include <cmath>

namespace gcd {

namespace {

// Accumulates coeff * d cos(u,v) / du into du (and symmetrically dv).
void add_cosine_grad(const Vec& u, const Vec& v, double coeff, Vec* du, Vec* dv) {
    double nu = norm2(u), nv = norm2(v);
    double c = dot(u, v) / (nu * nv);
    if (du)
        for (std::size_t i = 0; i < u.size(); ++i)
            (*du)[i] += coeff * (v[i] / (nu * nv) - c * u[i] / (nu * nu));
    if (dv)
        for (std::size_t i = 0; i < v.size(); ++i)
            (*dv)[i] += coeff * (u[i] / (nu * nv) - c * v[i] / (nv * nv));
}

Vec softmax(const Vec& s) {
    Vec p(s.size());
    double mx = *std::max_element(s.begin(), s.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        p[i] = std::exp(s[i] - mx);
        sum += p[i];
    }
    for (double& x : p) x /= sum;
    return p;
}

}  // namespace

LossGrad loss_warmup(const Vec& logits, int label, std::size_t n_classes) {
    if (logits.size() != n_classes) throw Error(Err::ShapeMismatch, "logit count mismatch");
    if (label < 0 || static_cast<std::size_t>(label) >= n_classes)
        throw Error(Err::LabelOutOfRange, "warm-up label outside known classes");
    Vec p = softmax(logits);
    LossGrad out;
    out.value = -std::log(std::max(p[label], kProbClamp));
    out.grad = p;
    out.grad[label] -= 1.0;
    return out;
}

AlignResult loss_align(const std::vector<Vec>& disc_embeddings, const PrototypeBank& bank,
                       ProfileNorm norm) {
    if (disc_embeddings.empty()) throw Error(Err::EmptyBatch, "empty alignment batch");
    if (norm != ProfileNorm::Softmax)
        throw Error(Err::InvalidConfig, "alignment loss requires the softmax profile");
    std::size_t K = bank.size();
    AlignResult out;
    out.grads.resize(disc_embeddings.size());
    double inv_b = 1.0 / static_cast<double>(disc_embeddings.size());
    for (std::size_t i = 0; i < disc_embeddings.size(); ++i) {
        const Vec& h = disc_embeddings[i];
        Vec s(K);
        for (std::size_t k = 0; k < K; ++k) s[k] = cosine(h, bank.prototypes[k]);
        Vec p = softmax(s);

        double ce = 0.0;
        Vec dp(K, 0.0);  // dL_i/dp
        for (std::size_t k = 0; k < K; ++k) {
            double c = std::clamp(p[k], kProbClamp, 1.0);
            ce -= std::log(c) / static_cast<double>(K);
            if (p[k] > kProbClamp) dp[k] = -1.0 / (static_cast<double>(K) * c);
        }
        out.value += inv_b * ce;

        // softmax backward: ds_k = p_k (dp_k - sum_j dp_j p_j)
        double mix = 0.0;
        for (std::size_t k = 0; k < K; ++k) mix += dp[k] * p[k];
        out.grads[i] = Vec(h.size(), 0.0);
        for (std::size_t k = 0; k < K; ++k) {
            double ds = inv_b * p[k] * (dp[k] - mix);
            add_cosine_grad(h, bank.prototypes[k], ds, &out.grads[i], nullptr);
        }
    }
    return out;
}

LossGrad loss_con_source(const Vec& z, const PrototypeBank& bank, int class_rank) {
    std::size_t K = bank.size();
    if (class_rank < 0 || static_cast<std::size_t>(class_rank) >= K)
        throw Error(Err::LabelOutOfRange, "class rank outside prototype bank");
    Vec s(K);
    for (std::size_t k = 0; k < K; ++k) s[k] = cosine(z, bank.prototypes[k]);
    Vec p = softmax(s);
    LossGrad out;
    out.value = -std::log(std::max(p[class_rank], kProbClamp));
    out.grad = Vec(z.size(), 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        double ds = p[k] - (static_cast<int>(k) == class_rank ? 1.0 : 0.0);
        add_cosine_grad(z, bank.prototypes[k], ds, &out.grad, nullptr);
    }
    return out;
}

ContrastGrad loss_con_target(const ContrastSet& set) {
    if (set.negatives.empty()) throw Error(Err::InvalidConfig, "contrast set needs negatives");
    if (set.tau <= 0.0) throw Error(Err::InvalidConfig, "temperature must be positive");
    std::size_t M = set.negatives.size();
    Vec s(M + 1);
    s[0] = cosine(set.anchor, set.positive) / set.tau;
    for (std::size_t m = 0; m < M; ++m)
        s[m + 1] = cosine(set.anchor, set.negatives[m]) / set.tau;
    Vec w = softmax(s);

    ContrastGrad out;
    out.value = -std::log(std::max(w[0], kProbClamp));
    out.d_anchor = Vec(set.anchor.size(), 0.0);
    out.d_positive = Vec(set.positive.size(), 0.0);
    out.d_negatives.assign(M, Vec(set.anchor.size(), 0.0));

    double dpos = (w[0] - 1.0) / set.tau;
    add_cosine_grad(set.anchor, set.positive, dpos, &out.d_anchor, &out.d_positive);
    for (std::size_t m = 0; m < M; ++m) {
        double dneg = w[m + 1] / set.tau;
        add_cosine_grad(set.anchor, set.negatives[m], dneg, &out.d_anchor, &out.d_negatives[m]);
    }
    return out;
}

LossGrad loss_recon(const Vec& decoded, const Vec& truth) {
    if (decoded.size() != truth.size())
        throw Error(Err::ShapeMismatch, "reconstruction shape mismatch");
    LossGrad out;
    out.grad = Vec(decoded.size());
    double inv_d = 1.0 / static_cast<double>(decoded.size());
    for (std::size_t i = 0; i < decoded.size(); ++i) {
        double e = decoded[i] - truth[i];
        out.value += inv_d * e * e;
        out.grad[i] = 2.0 * inv_d * e;
    }
    return out;
}

double loss_inpaint(double r_self, double r_sim, double r_diff, double* w_self, double* w_sim,
                    double* w_diff) {
    if (r_self < 0.0 || r_sim < 0.0 || r_diff < 0.0)
        throw Error(Err::NegativeLoss, "reconstruction losses must be non-negative");
    bool hinge_active = r_sim > r_diff;  // subgradient 0 at the kink
    if (w_self) *w_self = 1.0;
    if (w_sim) *w_sim = hinge_active ? 1.0 : 0.0;
    if (w_diff) *w_diff = hinge_active ? -1.0 : 0.0;
    return std::max(0.0, r_sim - r_diff) + r_self;
}

}  // namespace gcd
