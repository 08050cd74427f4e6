#pragma once

#include <cstddef>
#include <vector>

#include "pacbus/model.hpp"
#include "pacbus/rng.hpp"

namespace pacbus {

enum class BaseAlgorithm { ProjectedGd, ProjectedSgd };
enum class StepSchedule { Fixed, COverT };

/// Description of the base learner from which the uniform-stability constant
/// beta is computed: algorithm kind, step count T, step size (fixed alpha or
/// the c of alpha_t = c/t), loss constants, and the train/validation sizes.
struct StabilityBudget {
    BaseAlgorithm algorithm = BaseAlgorithm::ProjectedGd;
    std::size_t steps = 0;          // T
    StepSchedule schedule = StepSchedule::Fixed;
    double step_size = 0.0;         // alpha (Fixed) or c (COverT)
    LossConstants constants;
    std::size_t train_size = 1;     // m
    std::size_t validation_size = 0;  // n
    bool convex = true;             // convex regime gates the alpha <= 2/c_S check
};

/// Throws std::invalid_argument naming the violated constraint. The fixed-step
/// convex regime requires alpha <= 2/c_S (the beta guarantee is void
/// otherwise); the c/t schedule requires SGD.
void validate_budget(const StabilityBudget& budget);

/// Stream that fixes a task's SGD sample order as a function of (run seed,
/// task id); training and certification share it so the adapted algorithm is
/// one deterministic map.
RngStream sgd_order_stream(std::uint64_t seed, std::uint64_t task_id);

struct AdaptResult {
    ParamVector theta;      // adapted parameters, inside the projection ball
    std::size_t steps_taken = 0;
    double final_train_loss = 0.0;  // mean raw scaled loss after the last step
};

/// Runs the budgeted number of projected gradient updates on the task's train
/// split. GD steps on the mean loss; SGD takes one sample per step in a fixed
/// order drawn once from `order_rng` (cycling when T > m), which keeps the
/// algorithm deterministic as the stability definition requires. The caller
/// provides theta already inside the projection ball.
AdaptResult adapt(const ModelSpec& spec, const ParamVector& theta,
                  const std::vector<std::vector<double>>& train_z,
                  const std::vector<std::size_t>& train_y, const StabilityBudget& budget,
                  Rng& order_rng);

/// As `adapt`, with projection disabled (heuristic path) and the raw
/// cross-entropy gradient instead of the scaled one.
AdaptResult adapt_unprojected_raw(const ModelSpec& spec, const ParamVector& theta,
                                  const std::vector<std::vector<double>>& train_z,
                                  const std::vector<std::size_t>& train_y, std::size_t steps,
                                  double alpha);

/// Uniform-stability constant for the convex fixed-step regime:
/// beta = 2 c_L^2 T alpha / m. The same value serves GD and SGD.
double beta_convex(double c_lipschitz, std::size_t steps, double alpha, std::size_t m);

/// Non-convex SGD with alpha_t <= c/t:
/// beta = (1 + 1/(c_S c))/(m-1) * (2 c_L^2 c)^(1/(c_S c + 1)) * T^(c_S c/(c_S c + 1)).
/// The printed theorem divides by the dataset-size symbol minus one; it is
/// interpreted as the adapting set size m, consistent with the convex case.
double beta_nonconvex(double c_lipschitz, double c_smoothness, double c, std::size_t steps,
                      std::size_t m);

/// Validation-data discount: m beta / (m + n).
double beta_effective(double beta, std::size_t m, std::size_t n);

/// Dispatches on the budget (convex fixed-step vs non-convex schedule) and
/// applies the validation discount.
double budget_beta(const StabilityBudget& budget);
double budget_beta_effective(const StabilityBudget& budget);

}  // namespace pacbus
