#include "gcd/nnkit.hpp"

#include <cmath>

namespace gcd {

Mlp Mlp::make(const std::vector<std::size_t>& widths, Act last_act, bool normalize, Rng& rng) {
    if (widths.size() < 2) throw Error(Err::ShapeMismatch, "Mlp needs at least one layer");
    Mlp net;
    net.normalize_output = normalize;
    std::normal_distribution<double> g;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        Layer layer;
        std::size_t in = widths[l], out = widths[l + 1];
        layer.W = Mat(out, in);
        layer.b = Vec(out, 0.0);
        double scale = std::sqrt(2.0 / static_cast<double>(in));  // He init
        for (double& w : layer.W.a) w = scale * g(rng);
        layer.act = (l + 2 == widths.size()) ? last_act : Act::ReLU;
        net.layers.push_back(std::move(layer));
    }
    return net;
}

std::size_t Mlp::n_params() const {
    std::size_t n = 0;
    for (const Layer& l : layers) n += l.W.a.size() + l.b.size();
    return n;
}

Vec Mlp::flatten() const {
    Vec flat;
    flat.reserve(n_params());
    for (const Layer& l : layers) {
        flat.insert(flat.end(), l.W.a.begin(), l.W.a.end());
        flat.insert(flat.end(), l.b.begin(), l.b.end());
    }
    return flat;
}

void Mlp::unflatten(const Vec& flat) {
    if (flat.size() != n_params()) throw Error(Err::ShapeMismatch, "flat parameter size mismatch");
    std::size_t pos = 0;
    for (Layer& l : layers) {
        std::copy(flat.begin() + pos, flat.begin() + pos + l.W.a.size(), l.W.a.begin());
        pos += l.W.a.size();
        std::copy(flat.begin() + pos, flat.begin() + pos + l.b.size(), l.b.begin());
        pos += l.b.size();
    }
}

MlpGrads MlpGrads::zeros_like(const Mlp& net) {
    MlpGrads g;
    for (const Layer& l : net.layers) {
        g.dW.emplace_back(l.W.rows, l.W.cols);
        g.db.emplace_back(l.b.size(), 0.0);
    }
    return g;
}

void MlpGrads::add(const MlpGrads& other, double scale) {
    for (std::size_t l = 0; l < dW.size(); ++l) {
        for (std::size_t i = 0; i < dW[l].a.size(); ++i) dW[l].a[i] += scale * other.dW[l].a[i];
        for (std::size_t i = 0; i < db[l].size(); ++i) db[l][i] += scale * other.db[l][i];
    }
}

void MlpGrads::scale_by(double s) {
    for (auto& m : dW)
        for (double& x : m.a) x *= s;
    for (auto& v : db)
        for (double& x : v) x *= s;
}

Vec MlpGrads::flatten() const {
    Vec flat;
    for (std::size_t l = 0; l < dW.size(); ++l) {
        flat.insert(flat.end(), dW[l].a.begin(), dW[l].a.end());
        flat.insert(flat.end(), db[l].begin(), db[l].end());
    }
    return flat;
}

Vec forward(const Mlp& net, const Vec& x, GradTape* tape) {
    if (x.size() != net.input_dim())
        throw Error(Err::ShapeMismatch, "forward input dim mismatch");
    if (tape) {
        tape->inputs.clear();
        tape->preacts.clear();
        tape->prenorm.clear();
        tape->consumed = false;
    }
    Vec h = x;
    for (const Layer& l : net.layers) {
        if (tape) tape->inputs.push_back(h);
        Vec z(l.W.rows);
        for (std::size_t i = 0; i < l.W.rows; ++i) {
            double s = l.b[i];
            const double* row = l.W.a.data() + i * l.W.cols;
            for (std::size_t j = 0; j < l.W.cols; ++j) s += row[j] * h[j];
            z[i] = s;
        }
        if (tape) tape->preacts.push_back(z);
        if (l.act == Act::ReLU)
            for (double& v : z) v = v > 0.0 ? v : 0.0;
        h = std::move(z);
    }
    if (net.normalize_output) {
        if (tape) tape->prenorm = h;
        double n = norm2(h);
        if (n < 1e-12) throw Error(Err::ZeroVector, "cannot normalize zero output");
        for (double& v : h) v /= n;
    }
    if (!all_finite(h)) throw Error(Err::NonFiniteValue, "non-finite forward output");
    return h;
}

Vec backward(const Mlp& net, GradTape& tape, const Vec& dy, MlpGrads* grads) {
    if (tape.consumed) throw Error(Err::TapeReused, "tape already consumed");
    tape.consumed = true;
    if (dy.size() != net.output_dim())
        throw Error(Err::ShapeMismatch, "backward upstream dim mismatch");

    Vec d = dy;
    if (net.normalize_output) {
        // y = u/||u||: dL/du = (dL/dy - y (y . dL/dy)) / ||u||
        const Vec& u = tape.prenorm;
        double n = norm2(u);
        double yd = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) yd += (u[i] / n) * d[i];
        for (std::size_t i = 0; i < u.size(); ++i) d[i] = (d[i] - (u[i] / n) * yd) / n;
    }
    for (std::size_t li = net.layers.size(); li-- > 0;) {
        const Layer& l = net.layers[li];
        const Vec& z = tape.preacts[li];
        const Vec& in = tape.inputs[li];
        if (l.act == Act::ReLU)
            for (std::size_t i = 0; i < d.size(); ++i)
                if (z[i] <= 0.0) d[i] = 0.0;
        if (grads) {
            Mat& dW = grads->dW[li];
            Vec& db = grads->db[li];
            for (std::size_t i = 0; i < l.W.rows; ++i) {
                db[i] += d[i];
                double* row = dW.a.data() + i * l.W.cols;
                for (std::size_t j = 0; j < l.W.cols; ++j) row[j] += d[i] * in[j];
            }
        }
        Vec dx(l.W.cols, 0.0);
        for (std::size_t i = 0; i < l.W.rows; ++i) {
            const double* row = l.W.a.data() + i * l.W.cols;
            for (std::size_t j = 0; j < l.W.cols; ++j) dx[j] += row[j] * d[i];
        }
        d = std::move(dx);
    }
    return d;
}

void adam_step(AdamState& state, Vec& params, const Vec& grads) {
    if (params.size() != state.m.size() || grads.size() != state.m.size())
        throw Error(Err::ShapeMismatch, "adam state/param size mismatch");
    ++state.step;
    double bc1 = 1.0 - std::pow(state.beta1, state.step);
    double bc2 = 1.0 - std::pow(state.beta2, state.step);
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        double mhat = state.m[i] / bc1;
        double vhat = state.v[i] / bc2;
        params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

Vec grad_reverse(const Vec& g, double lambda) {
    Vec out(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = -lambda * g[i];
    return out;
}

double grad_check(const std::function<double(const Vec&, Vec* grad)>& f, const Vec& point,
                  double h) {
    Vec analytic(point.size(), 0.0);
    double base = f(point, &analytic);
    if (!std::isfinite(base) || !all_finite(analytic))
        throw Error(Err::NonFiniteValue, "non-finite value in grad_check");
    Vec x = point;
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double keep = x[i];
        x[i] = keep + h;
        double fp = f(x, nullptr);
        x[i] = keep - h;
        double fm = f(x, nullptr);
        x[i] = keep;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw Error(Err::NonFiniteValue, "non-finite value in grad_check");
        double fd = (fp - fm) / (2.0 * h);
        double rel = std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(analytic[i]));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace gcd
