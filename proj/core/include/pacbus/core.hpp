#pragma once

#include <cstddef>
#include <vector>

#include "pacbus/rng.hpp"

namespace pacbus {

/// Shape descriptor for one layer: weights are (in x out) row-major,
/// followed by the bias (out entries) when has_bias is set.
struct LayerShape {
    std::size_t in = 0;
    std::size_t out = 0;
    bool has_bias = false;

    std::size_t count() const { return in * out + (has_bias ? out : 0); }
};

/// Flat vector of model parameters plus the per-layer layout needed to
/// reconstruct the weight matrices.
struct ParamVector {
    std::vector<double> values;
    std::vector<LayerShape> layout;

    std::size_t dim() const { return values.size(); }
};

std::size_t layout_count(const std::vector<LayerShape>& layout);

/// Throws std::invalid_argument when entries are non-finite or the dimension
/// does not match the layout.
void validate_param_vector(const ParamVector& theta);

/// Diagonal-Gaussian distribution over initializations, parameterized as
/// (mean, elementwise log-variance). The log parameterization makes
/// positivity of the variance structural.
struct PosteriorParams {
    std::vector<double> mean;
    std::vector<double> log_variance;

    std::size_t dim() const { return mean.size(); }
};

PosteriorParams make_posterior(std::vector<double> mean, std::vector<double> log_variance);

/// Constant-variance posterior: mean plus log(sigma^2) broadcast.
PosteriorParams make_posterior_scalar_var(std::vector<double> mean, double sigma);

void validate_posterior(const PosteriorParams& psi);

/// One reparameterized draw: theta = mean + exp(log_variance / 2) * eps.
/// The eps that produced the draw is recorded so a meta-gradient can chain
/// through the sample exactly.
struct PosteriorSample {
    ParamVector theta;
    std::vector<double> eps;
};

PosteriorSample sample_posterior(const PosteriorParams& psi, Rng& rng,
                                 const std::vector<LayerShape>& layout = {});

/// KL(N(mu_q, diag s_q) || N(mu_p, diag s_p)) in closed form. Tiny negative
/// round-off (>= -1e-12) is clamped to zero; anything more negative throws,
/// since it signals a bug rather than rounding.
double kl_diag_gaussian(const PosteriorParams& q, const PosteriorParams& p);

double l2_norm(const std::vector<double>& v);

/// Euclidean projection onto the ball of radius r (r > 0): identity inside,
/// radial rescale outside.
ParamVector project_to_ball(const ParamVector& theta, double radius);
void project_to_ball_inplace(std::vector<double>& values, double radius);

}  // namespace pacbus
