#pragma once

#include <cstddef>
#include <vector>

#include "pacbus/core.hpp"

namespace pacbus {

enum class Architecture { LinearSoftmax, MlpElu };

/// Model family plus the norm budget that keeps the loss bounded:
/// output_radius r bounds ||N_theta(z)||, input_radius r_z bounds ||z||.
/// Linear-softmax is a bias-free weight matrix (d x k); the MLP applies ELU
/// between layers, keeps the output layer linear, and carries biases.
struct ModelSpec {
    Architecture arch = Architecture::LinearSoftmax;
    std::vector<std::size_t> widths;  // first = input dim d, last = class count k
    double output_radius = 1.0;       // r
    double input_radius = 1.0;        // r_z

    std::size_t input_dim() const { return widths.front(); }
    std::size_t class_count() const { return widths.back(); }
    std::vector<LayerShape> layout() const;
    std::size_t param_count() const { return layout_count(layout()); }
    /// Admissible parameter-ball radius r / max(1, r_z).
    double projection_radius() const;
};

ModelSpec linear_softmax_spec(std::size_t d, std::size_t k, double r = 1.0, double rz = 1.0);
ModelSpec mlp_elu_spec(std::vector<std::size_t> widths, double r = 1.0, double rz = 1.0);
void validate_spec(const ModelSpec& spec);

/// Affine range [min_loss, max_loss] taken by the unscaled cross-entropy on
/// the output ball of radius r; the loss is rescaled by these to land in [0,1].
struct LossScaling {
    double min_loss = 0.0;  // m_f
    double max_loss = 1.0;  // M_f

    double range() const { return max_loss - min_loss; }
};

LossScaling loss_scaling(std::size_t k, double r);

/// Lipschitz / smoothness pair attached to a loss. `scaled` records whether
/// the 1/(M_f - m_f) rescale has been applied.
struct LossConstants {
    double lipschitz = 0.0;   // c_L
    double smoothness = 0.0;  // c_S
    bool scaled = false;
};

/// Closed-form constants of the k-class softmax cross-entropy for unit-norm
/// inputs: c_L = sqrt(k-1)/k and c_S = sqrt((k-1)(k-2)/k^3) (sqrt(2/27) when
/// k = 2), divided by the scaling range. c_L bounds how fast the gradient can
/// change and c_S how fast the Hessian can change; see the certification
/// tests for the numerically probed version of both statements. Inputs in
/// the unit ball only tighten both bounds (every increment scales by
/// ||z||^2 <= 1), so the unit-sphere constants stay valid there.
LossConstants loss_constants_linear(std::size_t k, const LossScaling& scaling);

/// Certified constants in the sense of Defs. of Lipschitz continuity and
/// smoothness of the scaled loss itself, valid for every parameter vector in
/// the projection ball and every ||z|| <= r_z. These feed the stability
/// budget: beta formulas need a bound on sup||grad|| and sup||Hessian||.
LossConstants stability_constants_ball(const ModelSpec& spec, const LossScaling& scaling);

/// Sampled upper-bound surrogate for MLP constants: draws parameter vectors
/// from psi, multiplies layer operator norms (power iteration), composes with
/// the loss-level constants and returns the per-draw maxima. Heuristic by
/// construction (a sample maximum, not a sup over the ball); used by the
/// re-weighted training heuristic. Degenerate all-zero draws are floored at
/// 1e-8 and flagged.
struct NetworkConstantEstimate {
    LossConstants constants;
    bool floored = false;
};
NetworkConstantEstimate estimate_network_constants(const ModelSpec& spec, const PosteriorParams& psi,
                                                   std::size_t sample_count, Rng& rng);

std::vector<double> forward(const ModelSpec& spec, const ParamVector& theta,
                            const std::vector<double>& z);

/// Unscaled softmax cross-entropy of one sample.
double ce_loss(const ModelSpec& spec, const ParamVector& theta, const std::vector<double>& z,
               std::size_t label);

/// Linear rescale (ce - m_f)/(M_f - m_f), no clamping. Smooth and (for the
/// linear model) convex; this is what gradients are taken of.
double scaled_ce_loss_raw(const ModelSpec& spec, const ParamVector& theta,
                          const std::vector<double>& z, std::size_t label);

/// Scaled loss clamped to [0,1]. Bounded by construction, which is what the
/// PAC-Bayes machinery consumes; clamping is 1-Lipschitz so every stability
/// bound on the raw rescale carries over.
double scaled_ce_loss(const ModelSpec& spec, const ParamVector& theta, const std::vector<double>& z,
                      std::size_t label);

/// Gradient of scaled_ce_loss_raw with respect to theta (hand-coded reverse
/// accumulation per architecture). Requires theta inside the admissible ball,
/// like the scaled loss itself.
ParamVector loss_grad(const ModelSpec& spec, const ParamVector& theta, const std::vector<double>& z,
                      std::size_t label);

/// Gradient of the unscaled cross-entropy; defined for any theta (the
/// heuristic path works without the projection).
ParamVector ce_grad(const ModelSpec& spec, const ParamVector& theta, const std::vector<double>& z,
                    std::size_t label);

/// Mean raw cross-entropy gradient over a batch; returns the mean raw loss.
double mean_ce_grad(const ModelSpec& spec, const ParamVector& theta,
                    const std::vector<std::vector<double>>& zs,
                    const std::vector<std::size_t>& labels, std::vector<double>& grad);

/// Accumulates the mean raw-scaled-loss gradient over a sample batch into
/// `grad` (resized/zeroed by the callee). Returns the mean raw scaled loss.
double mean_loss_grad(const ModelSpec& spec, const ParamVector& theta,
                      const std::vector<std::vector<double>>& zs,
                      const std::vector<std::size_t>& labels, std::vector<double>& grad);

/// Hessian-vector product of the mean raw scaled loss, linear model only.
/// H = sum_j (diag(p) - p p^T) (x) z_j z_j^T / (m * range).
void linear_mean_hessian_vec(const ModelSpec& spec, const ParamVector& theta,
                             const std::vector<std::vector<double>>& zs, const std::vector<double>& v,
                             std::vector<double>& out);

std::size_t argmax_index(const std::vector<double>& v);

std::vector<double> softmax(std::vector<double> logits);

}  // namespace pacbus
