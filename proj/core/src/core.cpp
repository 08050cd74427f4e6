#include "pacbus/core.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace pacbus {

std::size_t layout_count(const std::vector<LayerShape>& layout) {
    std::size_t n = 0;
    for (const auto& l : layout) n += l.count();
    return n;
}

void validate_param_vector(const ParamVector& theta) {
    for (double v : theta.values) {
        if (!std::isfinite(v)) throw std::invalid_argument("ParamVector: non-finite entry");
    }
    if (!theta.layout.empty() && layout_count(theta.layout) != theta.values.size()) {
        throw std::invalid_argument("ParamVector: dimension " + std::to_string(theta.values.size()) +
                                    " does not match layout count " +
                                    std::to_string(layout_count(theta.layout)));
    }
}

PosteriorParams make_posterior(std::vector<double> mean, std::vector<double> log_variance) {
    PosteriorParams psi{std::move(mean), std::move(log_variance)};
    validate_posterior(psi);
    return psi;
}

PosteriorParams make_posterior_scalar_var(std::vector<double> mean, double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("posterior sigma must be > 0");
    PosteriorParams psi;
    psi.log_variance.assign(mean.size(), 2.0 * std::log(sigma));
    psi.mean = std::move(mean);
    validate_posterior(psi);
    return psi;
}

void validate_posterior(const PosteriorParams& psi) {
    if (psi.mean.size() != psi.log_variance.size()) {
        throw std::invalid_argument("PosteriorParams: mean and logVariance dimensions differ");
    }
    for (double v : psi.mean) {
        if (!std::isfinite(v)) throw std::invalid_argument("PosteriorParams: non-finite mean entry");
    }
    for (double v : psi.log_variance) {
        if (!std::isfinite(v)) throw std::invalid_argument("PosteriorParams: non-finite logVariance entry");
    }
}

PosteriorSample sample_posterior(const PosteriorParams& psi, Rng& rng,
                                 const std::vector<LayerShape>& layout) {
    PosteriorSample s;
    const std::size_t d = psi.dim();
    s.eps.resize(d);
    s.theta.values.resize(d);
    s.theta.layout = layout;
    for (std::size_t i = 0; i < d; ++i) {
        s.eps[i] = rng.normal();
        s.theta.values[i] = psi.mean[i] + std::exp(0.5 * psi.log_variance[i]) * s.eps[i];
    }
    return s;
}

double kl_diag_gaussian(const PosteriorParams& q, const PosteriorParams& p) {
    if (q.dim() != p.dim()) throw std::invalid_argument("kl_diag_gaussian: dimension mismatch");
    validate_posterior(q);
    validate_posterior(p);
    double acc = 0.0;
    for (std::size_t i = 0; i < q.dim(); ++i) {
        const double dm = q.mean[i] - p.mean[i];
        const double log_ratio = p.log_variance[i] - q.log_variance[i];
        const double var_ratio = std::exp(q.log_variance[i] - p.log_variance[i]);
        acc += dm * dm * std::exp(-p.log_variance[i]) + log_ratio + var_ratio - 1.0;
    }
    double kl = 0.5 * acc;
    if (kl < 0.0) {
        if (kl < -1e-12) throw std::invalid_argument("kl_diag_gaussian: negative KL beyond round-off");
        kl = 0.0;
    }
    return kl;
}

double l2_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

void project_to_ball_inplace(std::vector<double>& values, double radius) {
    if (!(radius > 0.0)) throw std::invalid_argument("project_to_ball: radius must be > 0");
    const double n = l2_norm(values);
    if (n <= radius) return;
    const double scale = radius / n;
    for (double& x : values) x *= scale;
}

ParamVector project_to_ball(const ParamVector& theta, double radius) {
    ParamVector out = theta;
    project_to_ball_inplace(out.values, radius);
    return out;
}

}  // namespace pacbus
