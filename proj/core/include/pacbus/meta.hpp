#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "pacbus/baselearn.hpp"
#include "pacbus/bounds.hpp"
#include "pacbus/core.hpp"
#include "pacbus/model.hpp"
#include "pacbus/tasks.hpp"

namespace pacbus {

enum class GradientMode { FirstOrder, ExactLinear };

struct TrainConfig {
    double meta_learning_rate = 1e-3;  // gamma
    std::size_t iterations = 100;
    std::size_t batch_size = 0;        // 0 = all tasks (full-batch objective)
    GradientMode gradient_mode = GradientMode::FirstOrder;
    double lambda1 = 1.0;              // PAC-Bayes regularizer scale
    double lambda2 = 1.0;              // stability-term scale
    std::size_t constant_refresh_samples = 8;  // heuristic c_L/c_S refresh draws
    std::size_t posterior_samples = 1;         // variance-reduction draws per step
    bool early_stop = false;           // stop after 50 consecutive |dB| < 1e-6
    double base_alpha = 0.1;           // heuristic single-GD-step size
    std::uint64_t seed = 0;
    std::size_t start_iteration = 0;   // resume point; per-iteration streams
                                       // make continuation exact
};

void validate_train_config(const TrainConfig& config);

/// Value of the training objective with its decomposition:
/// B = empirical + lambda1 * R_bayes + lambda2 * beta-term.
struct MetaObjective {
    double value = 0.0;
    double empirical = 0.0;
    double pac_bayes = 0.0;   // unweighted R_bayes
    double stability = 0.0;   // unweighted beta term
    double lambda1 = 1.0;
    double lambda2 = 1.0;
};

/// Gradient of B with respect to psi.
struct MetaGradient {
    std::vector<double> d_mean;
    std::vector<double> d_log_variance;
};

/// Everything one objective/gradient evaluation needs. `task_count_full`
/// carries the full l: the regularizer is computed with it even when `tasks`
/// is a mini-batch.
struct ObjectiveInputs {
    const ModelSpec* spec = nullptr;
    const StabilityBudget* budget = nullptr;
    std::vector<const TaskDataset*> tasks;
    std::size_t task_count_full = 0;
    double delta = 0.005;
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    std::uint64_t seed = 0;  // roots the per-task SGD sample orders
};

/// Samples one theta (recorded eps), projects it, adapts per task and returns
/// B with components. The empirical term is the mean raw (unclamped) scaled
/// loss over each task's evaluation split S u S_va; certificates clamp, the
/// training objective stays smooth.
MetaObjective meta_objective(const PosteriorParams& psi, const PosteriorParams& psi0,
                             const ObjectiveInputs& inputs, Rng& rng);

/// Objective and gradient in one pass, sharing the theta draw.
/// FirstOrder treats the adapted parameters as a stopped-gradient function of
/// theta except for the direct dependence; ExactLinear (linear-softmax only)
/// chains through every projected-GD step with the analytic Hessian, treating
/// each projection as identity when inactive and as the radial-scaling
/// Jacobian when active.
MetaObjective meta_objective_gradient(const PosteriorParams& psi, const PosteriorParams& psi0,
                                      const ObjectiveInputs& inputs, GradientMode mode, Rng& rng,
                                      MetaGradient& grad);

struct TrainRecord {
    std::size_t iteration = 0;
    double objective = 0.0;
    double empirical = 0.0;
    double pac_bayes = 0.0;
    double stability = 0.0;
    double c_lipschitz = 0.0;  // heuristic estimates; 0 when unused
    double c_smoothness = 0.0;
};

struct TrainResult {
    PosteriorParams psi;
    std::vector<TrainRecord> log;
};

/// PAC-BUS bound minimization over all tasks (lambda1 = lambda2 = 1).
/// Throws std::runtime_error naming the iteration when B turns non-finite.
/// `resume_from` (with config.start_iteration) continues a previous run; the
/// per-iteration draw streams make the continuation bit-exact.
TrainResult pacbus_train(const TrainConfig& config, const std::vector<TaskDataset>& tasks,
                         const PosteriorParams& psi0, const ModelSpec& spec,
                         const StabilityBudget& budget, double delta,
                         const PosteriorParams* resume_from = nullptr);

/// Mini-batch variant: batch_size task indices drawn uniformly with
/// replacement per step; the batch mean uses 1/k (unbiased for the full
/// objective) while R_bayes keeps the full l.
TrainResult pacbus_train_minibatch(const TrainConfig& config, const std::vector<TaskDataset>& tasks,
                                   const PosteriorParams& psi0, const ModelSpec& spec,
                                   const StabilityBudget& budget, double delta,
                                   const PosteriorParams* resume_from = nullptr);

/// Re-weighted heuristic: raw cross-entropy, no projection, one GD step per
/// task, beta from the one-step non-convex formula with network constants
/// re-estimated from posterior draws each iteration (held constant inside
/// each update, so the beta term contributes value but no psi-gradient).
TrainResult pacbus_h_train(const TrainConfig& config, const std::vector<TaskDataset>& tasks,
                           const PosteriorParams& psi0, const ModelSpec& spec, double delta,
                           const PosteriorParams* resume_from = nullptr);

/// First-order MAML-like training of a point initialization (zero-variance
/// path, lambdas = 0); used to fit the prior mean on held-out prior tasks.
std::vector<double> prior_train_mean(const TrainConfig& config,
                                     const std::vector<TaskDataset>& tasks, const ModelSpec& spec,
                                     const StabilityBudget& budget);

}  // namespace pacbus
