#include "pacbus/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pacbus {

namespace {

double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
double elu_prime(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

void check_input(const ModelSpec& spec, const ParamVector& theta, const std::vector<double>& z) {
    if (z.size() != spec.input_dim()) {
        throw std::invalid_argument("forward: input dimension " + std::to_string(z.size()) +
                                    " does not match spec d=" + std::to_string(spec.input_dim()));
    }
    if (theta.values.size() != spec.param_count()) {
        throw std::invalid_argument("forward: parameter dimension " + std::to_string(theta.values.size()) +
                                    " does not match spec count " + std::to_string(spec.param_count()));
    }
}

void check_admissible(const ModelSpec& spec, const ParamVector& theta) {
    const double rho = spec.projection_radius();
    const double n = l2_norm(theta.values);
    if (n > rho * (1.0 + 1e-9)) {
        throw std::invalid_argument("scaled loss: ||theta|| = " + std::to_string(n) +
                                    " exceeds the admissible ball r/max(1,r_z) = " + std::to_string(rho) +
                                    "; project first");
    }
}

void check_label(const ModelSpec& spec, std::size_t label) {
    if (label >= spec.class_count()) {
        throw std::invalid_argument("label " + std::to_string(label) + " out of range for k=" +
                                    std::to_string(spec.class_count()));
    }
}

// Forward pass keeping pre-activations and activations for backprop.
struct ForwardTrace {
    std::vector<std::vector<double>> activations;  // a_0 = z, ..., a_L = logits
    std::vector<std::vector<double>> pre;          // pre-activation per layer
};

ForwardTrace forward_trace(const ModelSpec& spec, const ParamVector& theta,
                           const std::vector<double>& z) {
    ForwardTrace t;
    const auto layout = spec.layout();
    t.activations.push_back(z);
    std::size_t off = 0;
    for (std::size_t li = 0; li < layout.size(); ++li) {
        const auto& L = layout[li];
        const auto& a = t.activations.back();
        std::vector<double> pre(L.out, 0.0);
        for (std::size_t i = 0; i < L.in; ++i) {
            const double ai = a[i];
            if (ai == 0.0) continue;
            const double* wrow = theta.values.data() + off + i * L.out;
            for (std::size_t o = 0; o < L.out; ++o) pre[o] += ai * wrow[o];
        }
        if (L.has_bias) {
            const double* b = theta.values.data() + off + L.in * L.out;
            for (std::size_t o = 0; o < L.out; ++o) pre[o] += b[o];
        }
        const bool last = (li + 1 == layout.size());
        std::vector<double> act(L.out);
        for (std::size_t o = 0; o < L.out; ++o) act[o] = last ? pre[o] : elu(pre[o]);
        t.pre.push_back(std::move(pre));
        t.activations.push_back(std::move(act));
        off += L.count();
    }
    return t;
}

double ce_from_logits(const std::vector<double>& u, std::size_t label) {
    const double mx = *std::max_element(u.begin(), u.end());
    double s = 0.0;
    for (double x : u) s += std::exp(x - mx);
    return -(u[label] - mx) + std::log(s);
}

}  // namespace

std::vector<LayerShape> ModelSpec::layout() const {
    std::vector<LayerShape> out;
    if (arch == Architecture::LinearSoftmax) {
        out.push_back({widths[0], widths[1], false});
        return out;
    }
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        out.push_back({widths[i], widths[i + 1], true});
    }
    return out;
}

double ModelSpec::projection_radius() const {
    return output_radius / std::max(1.0, input_radius);
}

ModelSpec linear_softmax_spec(std::size_t d, std::size_t k, double r, double rz) {
    ModelSpec s;
    s.arch = Architecture::LinearSoftmax;
    s.widths = {d, k};
    s.output_radius = r;
    s.input_radius = rz;
    validate_spec(s);
    return s;
}

ModelSpec mlp_elu_spec(std::vector<std::size_t> widths, double r, double rz) {
    ModelSpec s;
    s.arch = Architecture::MlpElu;
    s.widths = std::move(widths);
    s.output_radius = r;
    s.input_radius = rz;
    validate_spec(s);
    return s;
}

void validate_spec(const ModelSpec& spec) {
    if (spec.widths.size() < 2) throw std::invalid_argument("ModelSpec: needs at least input and output widths");
    if (spec.arch == Architecture::LinearSoftmax && spec.widths.size() != 2) {
        throw std::invalid_argument("ModelSpec: linear-softmax has exactly one layer");
    }
    for (std::size_t w : spec.widths) {
        if (w == 0) throw std::invalid_argument("ModelSpec: zero layer width");
    }
    if (spec.class_count() < 2) throw std::invalid_argument("ModelSpec: class count k must be >= 2");
    if (!(spec.output_radius > 0.0)) throw std::invalid_argument("ModelSpec: output radius r must be > 0");
    if (!(spec.input_radius > 0.0)) throw std::invalid_argument("ModelSpec: input radius r_z must be > 0");
}

LossScaling loss_scaling(std::size_t k, double r) {
    if (k < 2) throw std::invalid_argument("loss_scaling: k must be >= 2");
    if (!(r > 0.0)) throw std::invalid_argument("loss_scaling: r must be > 0 (r = 0 degenerates to M_f = m_f)");
    LossScaling s;
    // m_f = log((e^r + k - 1)/e^r), M_f = log((e^-r + k - 1)/e^-r), written in
    // overflow-safe form.
    s.min_loss = std::log1p((static_cast<double>(k) - 1.0) * std::exp(-r));
    s.max_loss = r + std::log(std::exp(-r) + (static_cast<double>(k) - 1.0));
    return s;
}

LossConstants loss_constants_linear(std::size_t k, const LossScaling& scaling) {
    if (k < 2) throw std::invalid_argument("loss_constants_linear: k must be >= 2");
    const double kd = static_cast<double>(k);
    LossConstants c;
    c.lipschitz = std::sqrt(kd - 1.0) / kd;
    c.smoothness = (k == 2) ? std::sqrt(2.0 / 27.0) : std::sqrt((kd - 1.0) * (kd - 2.0) / (kd * kd * kd));
    c.lipschitz /= scaling.range();
    c.smoothness /= scaling.range();
    c.scaled = true;
    return c;
}

LossConstants stability_constants_ball(const ModelSpec& spec, const LossScaling& scaling) {
    validate_spec(spec);
    const double rho = spec.projection_radius();
    const double rz = spec.input_radius;
    const double kd = static_cast<double>(spec.class_count());
    // Loss level, as a function of the logits: ||grad|| = ||p - y|| <= sqrt(2),
    // ||Hessian|| = ||diag(p) - p p^T||_2 <= sqrt(k-1)/k (Frobenius bound).
    const double gl = std::sqrt(2.0);
    const double gs = std::sqrt(kd - 1.0) / kd;

    // Box-bound recursion over the admissible ball: every ||W_i||_F <= rho and
    // ||b_i|| <= rho individually. A = sup activation norm, J = sup Jacobian
    // norm w.r.t. theta, H = sup second-derivative norm w.r.t. theta. ELU is
    // 1-Lipschitz and 1-smooth; the output layer is linear.
    const auto layout = spec.layout();
    double A = rz, J = 0.0, H = 0.0;
    for (std::size_t li = 0; li < layout.size(); ++li) {
        const bool bias = layout[li].has_bias;
        const double direct = std::sqrt(A * A + (bias ? 1.0 : 0.0));
        const double Jpre = rho * J + direct;
        const double Hpre = rho * H + 2.0 * J;
        const bool last = (li + 1 == layout.size());
        if (last) {
            J = Jpre;
            H = Hpre;
        } else {
            J = Jpre;
            H = Hpre + Jpre * Jpre;
        }
        A = rho * A + (bias ? rho : 0.0);
    }
    LossConstants c;
    c.lipschitz = gl * J / scaling.range();
    c.smoothness = (gs * J * J + gl * H) / scaling.range();
    c.scaled = true;
    return c;
}

namespace {

// Largest singular value of the (in x out) row-major matrix via power
// iteration on W^T W.
double operator_norm(const double* w, std::size_t in, std::size_t out, std::size_t iterations,
                     double tolerance) {
    std::vector<double> v(out, 1.0 / std::sqrt(static_cast<double>(out)));
    std::vector<double> u(in, 0.0), v2(out, 0.0);
    double sigma = 0.0;
    for (std::size_t it = 0; it < iterations; ++it) {
        for (std::size_t i = 0; i < in; ++i) {
            double s = 0.0;
            const double* row = w + i * out;
            for (std::size_t o = 0; o < out; ++o) s += row[o] * v[o];
            u[i] = s;
        }
        std::fill(v2.begin(), v2.end(), 0.0);
        for (std::size_t i = 0; i < in; ++i) {
            const double ui = u[i];
            const double* row = w + i * out;
            for (std::size_t o = 0; o < out; ++o) v2[o] += ui * row[o];
        }
        const double n = l2_norm(v2);
        if (n == 0.0) return 0.0;
        for (std::size_t o = 0; o < out; ++o) v[o] = v2[o] / n;
        const double next = std::sqrt(n);
        if (std::abs(next - sigma) <= tolerance * std::max(1.0, next)) {
            sigma = next;
            break;
        }
        sigma = next;
    }
    return sigma;
}

}  // namespace

NetworkConstantEstimate estimate_network_constants(const ModelSpec& spec, const PosteriorParams& psi,
                                                   std::size_t sample_count, Rng& rng) {
    if (spec.arch != Architecture::MlpElu) {
        throw std::invalid_argument(
            "estimate_network_constants: linear spec has exact constants; use loss_constants_linear");
    }
    if (sample_count < 1) throw std::invalid_argument("estimate_network_constants: sampleCount must be >= 1");
    if (psi.dim() != spec.param_count()) {
        throw std::invalid_argument("estimate_network_constants: posterior dimension mismatch");
    }
    const double kd = static_cast<double>(spec.class_count());
    const double loss_l = std::sqrt(kd - 1.0) / kd;
    const double loss_s = (spec.class_count() == 2)
                              ? std::sqrt(2.0 / 27.0)
                              : std::sqrt((kd - 1.0) * (kd - 2.0) / (kd * kd * kd));
    const auto layout = spec.layout();
    double max_l = 0.0, max_s = 0.0;
    for (std::size_t s = 0; s < sample_count; ++s) {
        const auto draw = sample_posterior(psi, rng, layout);
        // Per-draw network Lipschitz bound: product of layer operator norms
        // (ELU treated as 1-Lipschitz); smoothness by the composition rule
        // c_S(g o f) <= c_S_g * c_L_f^2 + c_L_g * c_S_f with ELU 1-smooth.
        std::size_t off = 0;
        double net_l = 1.0, net_s = 0.0;
        for (std::size_t li = 0; li < layout.size(); ++li) {
            const auto& L = layout[li];
            const double op = operator_norm(draw.theta.values.data() + off, L.in, L.out, 50, 1e-6);
            const bool last = (li + 1 == layout.size());
            // Layer map phi(x) = ELU(Wx + b): c_L = ||W||_op, c_S <= ||W||_op^2;
            // the final linear layer has zero smoothness of its own.
            const double layer_s = last ? 0.0 : op * op;
            net_s = layer_s * net_l * net_l + op * net_s;
            net_l = op * net_l;
            off += L.count();
        }
        max_l = std::max(max_l, net_l * loss_l);
        max_s = std::max(max_s, loss_s * net_l * net_l + loss_l * net_s);
    }
    NetworkConstantEstimate est;
    est.constants.lipschitz = max_l;
    est.constants.smoothness = max_s;
    est.constants.scaled = false;  // heuristic path works with the raw loss
    if (est.constants.lipschitz < 1e-8) {
        est.constants.lipschitz = 1e-8;
        est.floored = true;
    }
    if (est.constants.smoothness < 1e-8) {
        est.constants.smoothness = 1e-8;
        est.floored = true;
    }
    return est;
}

std::vector<double> forward(const ModelSpec& spec, const ParamVector& theta,
                            const std::vector<double>& z) {
    check_input(spec, theta, z);
    return forward_trace(spec, theta, z).activations.back();
}

double ce_loss(const ModelSpec& spec, const ParamVector& theta, const std::vector<double>& z,
               std::size_t label) {
    check_input(spec, theta, z);
    check_label(spec, label);
    return ce_from_logits(forward_trace(spec, theta, z).activations.back(), label);
}

double scaled_ce_loss_raw(const ModelSpec& spec, const ParamVector& theta,
                          const std::vector<double>& z, std::size_t label) {
    check_admissible(spec, theta);
    const LossScaling s = loss_scaling(spec.class_count(), spec.output_radius);
    return (ce_loss(spec, theta, z, label) - s.min_loss) / s.range();
}

double scaled_ce_loss(const ModelSpec& spec, const ParamVector& theta, const std::vector<double>& z,
                      std::size_t label) {
    return std::clamp(scaled_ce_loss_raw(spec, theta, z, label), 0.0, 1.0);
}

namespace {

ParamVector grad_impl(const ModelSpec& spec, const ParamVector& theta, const std::vector<double>& z,
                      std::size_t label, double loss_scale) {
    const auto layout = spec.layout();
    const ForwardTrace t = forward_trace(spec, theta, z);
    ParamVector g;
    g.layout = theta.layout;
    g.values.assign(theta.values.size(), 0.0);

    // dCE/du = p - y, then standard reverse accumulation.
    std::vector<double> delta = softmax(t.activations.back());
    delta[label] -= 1.0;
    for (double& d : delta) d *= loss_scale;

    std::size_t off_end = theta.values.size();
    for (std::size_t li = layout.size(); li-- > 0;) {
        const auto& L = layout[li];
        const std::size_t off = off_end - L.count();
        const auto& a = t.activations[li];
        double* gw = g.values.data() + off;
        for (std::size_t i = 0; i < L.in; ++i) {
            const double ai = a[i];
            if (ai != 0.0) {
                double* row = gw + i * L.out;
                for (std::size_t o = 0; o < L.out; ++o) row[o] += ai * delta[o];
            }
        }
        if (L.has_bias) {
            double* gb = gw + L.in * L.out;
            for (std::size_t o = 0; o < L.out; ++o) gb[o] += delta[o];
        }
        if (li > 0) {
            std::vector<double> prev(L.in, 0.0);
            const double* w = theta.values.data() + off;
            for (std::size_t i = 0; i < L.in; ++i) {
                const double* row = w + i * L.out;
                double s = 0.0;
                for (std::size_t o = 0; o < L.out; ++o) s += row[o] * delta[o];
                prev[i] = s * elu_prime(t.pre[li - 1][i]);
            }
            delta = std::move(prev);
        }
        off_end = off;
    }
    return g;
}

}  // namespace

ParamVector loss_grad(const ModelSpec& spec, const ParamVector& theta, const std::vector<double>& z,
                      std::size_t label) {
    check_admissible(spec, theta);
    check_input(spec, theta, z);
    check_label(spec, label);
    const LossScaling sc = loss_scaling(spec.class_count(), spec.output_radius);
    return grad_impl(spec, theta, z, label, 1.0 / sc.range());
}

ParamVector ce_grad(const ModelSpec& spec, const ParamVector& theta, const std::vector<double>& z,
                    std::size_t label) {
    check_input(spec, theta, z);
    check_label(spec, label);
    return grad_impl(spec, theta, z, label, 1.0);
}

double mean_loss_grad(const ModelSpec& spec, const ParamVector& theta,
                      const std::vector<std::vector<double>>& zs,
                      const std::vector<std::size_t>& labels, std::vector<double>& grad) {
    if (zs.empty() || zs.size() != labels.size()) {
        throw std::invalid_argument("mean_loss_grad: empty or mismatched batch");
    }
    grad.assign(theta.values.size(), 0.0);
    double loss = 0.0;
    const double inv = 1.0 / static_cast<double>(zs.size());
    for (std::size_t j = 0; j < zs.size(); ++j) {
        loss += scaled_ce_loss_raw(spec, theta, zs[j], labels[j]);
        const ParamVector g = loss_grad(spec, theta, zs[j], labels[j]);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += inv * g.values[i];
    }
    return loss * inv;
}

double mean_ce_grad(const ModelSpec& spec, const ParamVector& theta,
                    const std::vector<std::vector<double>>& zs,
                    const std::vector<std::size_t>& labels, std::vector<double>& grad) {
    if (zs.empty() || zs.size() != labels.size()) {
        throw std::invalid_argument("mean_ce_grad: empty or mismatched batch");
    }
    grad.assign(theta.values.size(), 0.0);
    double loss = 0.0;
    const double inv = 1.0 / static_cast<double>(zs.size());
    for (std::size_t j = 0; j < zs.size(); ++j) {
        loss += ce_loss(spec, theta, zs[j], labels[j]);
        const ParamVector g = ce_grad(spec, theta, zs[j], labels[j]);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += inv * g.values[i];
    }
    return loss * inv;
}

void linear_mean_hessian_vec(const ModelSpec& spec, const ParamVector& theta,
                             const std::vector<std::vector<double>>& zs, const std::vector<double>& v,
                             std::vector<double>& out) {
    if (spec.arch != Architecture::LinearSoftmax) {
        throw std::invalid_argument("linear_mean_hessian_vec: linear-softmax only");
    }
    const std::size_t d = spec.input_dim();
    const std::size_t k = spec.class_count();
    if (v.size() != d * k) throw std::invalid_argument("linear_mean_hessian_vec: vector dimension mismatch");
    const LossScaling sc = loss_scaling(k, spec.output_radius);
    out.assign(d * k, 0.0);
    const double inv = 1.0 / (sc.range() * static_cast<double>(zs.size()));
    std::vector<double> u(k), w(k);
    for (const auto& z : zs) {
        const auto p = softmax(forward(spec, theta, z));
        // u = V^T z with V the (d x k) reshape of v.
        for (std::size_t c = 0; c < k; ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) s += v[i * k + c] * z[i];
            u[c] = s;
        }
        double pu = 0.0;
        for (std::size_t c = 0; c < k; ++c) pu += p[c] * u[c];
        for (std::size_t c = 0; c < k; ++c) w[c] = p[c] * (u[c] - pu);
        for (std::size_t i = 0; i < d; ++i) {
            const double zi = z[i] * inv;
            if (zi == 0.0) continue;
            for (std::size_t c = 0; c < k; ++c) out[i * k + c] += zi * w[c];
        }
    }
}

std::size_t argmax_index(const std::vector<double>& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<double> softmax(std::vector<double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (double& x : logits) {
        x = std::exp(x - mx);
        s += x;
    }
    for (double& x : logits) x /= s;
    return logits;
}

}  // namespace pacbus
