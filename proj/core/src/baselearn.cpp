#include "pacbus/baselearn.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace pacbus {

void validate_budget(const StabilityBudget& budget) {
    if (!(budget.constants.lipschitz > 0.0) || !(budget.constants.smoothness > 0.0)) {
        throw std::invalid_argument("StabilityBudget: loss constants must be positive");
    }
    if (budget.train_size < 1) throw std::invalid_argument("StabilityBudget: train size m must be >= 1");
    if (!(budget.step_size > 0.0) && budget.steps > 0) {
        if (budget.step_size < 0.0) throw std::invalid_argument("StabilityBudget: step size must be >= 0");
    }
    if (budget.schedule == StepSchedule::Fixed) {
        if (!budget.convex) {
            throw std::invalid_argument(
                "StabilityBudget: fixed-step stability holds for convex losses only; "
                "non-convex models need SGD with the c/t schedule");
        }
        if (budget.step_size > 2.0 / budget.constants.smoothness) {
            throw std::invalid_argument("StabilityBudget: alpha = " + std::to_string(budget.step_size) +
                                        " violates alpha <= 2/c_S = " +
                                        std::to_string(2.0 / budget.constants.smoothness) +
                                        " (convex stability regime)");
        }
    } else {
        if (budget.algorithm != BaseAlgorithm::ProjectedSgd) {
            throw std::invalid_argument(
                "StabilityBudget: the c/t schedule (non-convex regime) requires SGD; "
                "the non-convex bound does not hold for GD");
        }
        if (budget.train_size < 2) {
            throw std::invalid_argument("StabilityBudget: non-convex regime requires m >= 2");
        }
    }
}

RngStream sgd_order_stream(std::uint64_t seed, std::uint64_t task_id) {
    return RngStream{seed, 7070, task_id};
}

namespace {

std::vector<std::size_t> fixed_order(std::size_t m, Rng& rng) {
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = m; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

}  // namespace

AdaptResult adapt(const ModelSpec& spec, const ParamVector& theta,
                  const std::vector<std::vector<double>>& train_z,
                  const std::vector<std::size_t>& train_y, const StabilityBudget& budget,
                  Rng& order_rng) {
    validate_budget(budget);
    if (train_z.empty() || train_z.size() != train_y.size()) {
        throw std::invalid_argument("adapt: empty or mismatched train split");
    }
    const double rho = spec.projection_radius();
    AdaptResult res;
    res.theta = theta;

    // The sample order is fixed up front from the task's substream so the
    // algorithm is a deterministic function of (theta, S, seed).
    const auto order = fixed_order(train_z.size(), order_rng);

    std::vector<double> grad;
    for (std::size_t t = 0; t < budget.steps; ++t) {
        const double alpha = budget.schedule == StepSchedule::Fixed
                                 ? budget.step_size
                                 : budget.step_size / static_cast<double>(t + 1);
        if (budget.algorithm == BaseAlgorithm::ProjectedGd) {
            mean_loss_grad(spec, res.theta, train_z, train_y, grad);
        } else {
            const std::size_t j = order[t % order.size()];
            const ParamVector g = loss_grad(spec, res.theta, train_z[j], train_y[j]);
            grad = g.values;
        }
        for (std::size_t i = 0; i < res.theta.values.size(); ++i) {
            res.theta.values[i] -= alpha * grad[i];
        }
        project_to_ball_inplace(res.theta.values, rho);
        ++res.steps_taken;
    }
    double loss = 0.0;
    for (std::size_t j = 0; j < train_z.size(); ++j) {
        loss += scaled_ce_loss_raw(spec, res.theta, train_z[j], train_y[j]);
    }
    res.final_train_loss = loss / static_cast<double>(train_z.size());
    return res;
}

AdaptResult adapt_unprojected_raw(const ModelSpec& spec, const ParamVector& theta,
                                  const std::vector<std::vector<double>>& train_z,
                                  const std::vector<std::size_t>& train_y, std::size_t steps,
                                  double alpha) {
    if (train_z.empty() || train_z.size() != train_y.size()) {
        throw std::invalid_argument("adapt: empty or mismatched train split");
    }
    AdaptResult res;
    res.theta = theta;
    std::vector<double> grad;
    for (std::size_t t = 0; t < steps; ++t) {
        mean_ce_grad(spec, res.theta, train_z, train_y, grad);
        for (std::size_t i = 0; i < res.theta.values.size(); ++i) {
            res.theta.values[i] -= alpha * grad[i];
        }
        ++res.steps_taken;
    }
    double loss = 0.0;
    for (std::size_t j = 0; j < train_z.size(); ++j) {
        loss += ce_loss(spec, res.theta, train_z[j], train_y[j]);
    }
    res.final_train_loss = loss / static_cast<double>(train_z.size());
    return res;
}

double beta_convex(double c_lipschitz, std::size_t steps, double alpha, std::size_t m) {
    if (!(c_lipschitz > 0.0)) throw std::invalid_argument("beta_convex: c_L must be > 0");
    if (alpha < 0.0) throw std::invalid_argument("beta_convex: alpha must be >= 0");
    if (m < 1) throw std::invalid_argument("beta_convex: m must be >= 1");
    return 2.0 * c_lipschitz * c_lipschitz * static_cast<double>(steps) * alpha /
           static_cast<double>(m);
}

double beta_nonconvex(double c_lipschitz, double c_smoothness, double c, std::size_t steps,
                      std::size_t m) {
    if (!(c_lipschitz > 0.0) || !(c_smoothness > 0.0) || !(c > 0.0)) {
        throw std::invalid_argument("beta_nonconvex: constants and c must be > 0");
    }
    if (m < 2) throw std::invalid_argument("beta_nonconvex: m must be >= 2");
    if (steps == 0) return 0.0;
    const double q = c_smoothness * c;
    const double expo = 1.0 / (q + 1.0);
    return (1.0 + 1.0 / q) / static_cast<double>(m - 1) *
           std::pow(2.0 * c_lipschitz * c_lipschitz * c, expo) *
           std::pow(static_cast<double>(steps), q * expo);
}

double beta_effective(double beta, std::size_t m, std::size_t n) {
    if (m < 1) throw std::invalid_argument("beta_effective: m must be >= 1");
    return static_cast<double>(m) * beta / static_cast<double>(m + n);
}

double budget_beta(const StabilityBudget& budget) {
    validate_budget(budget);
    if (budget.steps == 0) return 0.0;
    if (budget.schedule == StepSchedule::Fixed) {
        return beta_convex(budget.constants.lipschitz, budget.steps, budget.step_size,
                           budget.train_size);
    }
    return beta_nonconvex(budget.constants.lipschitz, budget.constants.smoothness, budget.step_size,
                          budget.steps, budget.train_size);
}

double budget_beta_effective(const StabilityBudget& budget) {
    return beta_effective(budget_beta(budget), budget.train_size, budget.validation_size);
}

}  // namespace pacbus
