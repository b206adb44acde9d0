#pragma once

#include <functional>

#include "gcd/common.hpp"

namespace gcd {

enum class Act { ReLU, Identity };

struct Layer {
    Mat W;  // out x in
    Vec b;
    Act act = Act::ReLU;
};

// Small dense network. Optionally L2-normalizes its output (used by the
// projector so embeddings live on the unit sphere).
struct Mlp {
    std::vector<Layer> layers;
    bool normalize_output = false;

    // widths = {in, h1, ..., out}; hidden layers ReLU, last layer `last_act`.
    static Mlp make(const std::vector<std::size_t>& widths, Act last_act, bool normalize,
                    Rng& rng);

    std::size_t input_dim() const { return layers.front().W.cols; }
    std::size_t output_dim() const { return layers.back().W.rows; }
    std::size_t n_params() const;

    Vec flatten() const;
    void unflatten(const Vec& flat);
};

// Per-layer gradient mirror of an Mlp's parameters.
struct MlpGrads {
    std::vector<Mat> dW;
    std::vector<Vec> db;

    static MlpGrads zeros_like(const Mlp& net);
    void add(const MlpGrads& other, double scale = 1.0);
    void scale_by(double s);
    Vec flatten() const;
};

struct GradTape {
    std::vector<Vec> inputs;   // input seen by each layer
    std::vector<Vec> preacts;  // pre-activation per layer
    Vec prenorm;               // last activation before L2 normalization
    bool consumed = false;
};

Vec forward(const Mlp& net, const Vec& x, GradTape* tape = nullptr);

// Returns dL/dx; accumulates parameter gradients into *grads if non-null.
Vec backward(const Mlp& net, GradTape& tape, const Vec& dy, MlpGrads* grads);

struct AdamState {
    Vec m, v;
    long step = 0;
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    AdamState() = default;
    explicit AdamState(std::size_t n_params, double learning_rate = 0.01)
        : m(n_params, 0.0), v(n_params, 0.0), lr(learning_rate) {}
};

// Bias-corrected Adam update, in place on the flat parameter vector.
void adam_step(AdamState& state, Vec& params, const Vec& grads);

// Gradient reversal: -lambda * g.
Vec grad_reverse(const Vec& g, double lambda);

// Max over coordinates of |analytic - central FD| / max(1, |analytic|).
// f must fill *grad with the analytic gradient when grad != nullptr.
double grad_check(const std::function<double(const Vec&, Vec* grad)>& f, const Vec& point,
                  double h = 1e-5);

}  // namespace gcd
