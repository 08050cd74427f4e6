#include "pacbus/meta.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "pacbus/parallel.hpp"

namespace pacbus {

namespace {

constexpr std::uint64_t kMetaDrawStream = 8080;

struct EvalSplit {
    std::vector<std::vector<double>> train_z, ev_z;
    std::vector<std::size_t> train_y, ev_y;
};

EvalSplit split_of(const TaskDataset& task) {
    EvalSplit s;
    s.train_z.reserve(task.m());
    s.train_y.reserve(task.m());
    for (const auto& x : task.train) {
        s.train_z.push_back(x.features);
        s.train_y.push_back(x.label);
    }
    s.ev_z = s.train_z;
    s.ev_y = s.train_y;
    for (const auto& x : task.validation) {
        s.ev_z.push_back(x.features);
        s.ev_y.push_back(x.label);
    }
    return s;
}

// Projection Jacobian applied to v at pre-projection point u:
// identity inside the ball, (rho/||u||)(I - uu^T/||u||^2) outside.
void apply_projection_jacobian(const std::vector<double>& u, double rho, std::vector<double>& v) {
    const double n = l2_norm(u);
    if (n <= rho) return;
    double dot = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) dot += u[i] * v[i];
    const double scale = rho / n;
    const double inv_n2 = 1.0 / (n * n);
    for (std::size_t i = 0; i < u.size(); ++i) v[i] = scale * (v[i] - u[i] * dot * inv_n2);
}

// Projected-GD adaptation that records what the exact backward pass needs:
// the input point of every step and the pre-projection iterates.
struct GdTrace {
    std::vector<std::vector<double>> inputs;   // theta_t before step t
    std::vector<std::vector<double>> pre_proj; // theta_t - alpha * grad, before projection
    ParamVector theta;                         // final adapted parameters
};

GdTrace adapt_gd_traced(const ModelSpec& spec, const ParamVector& theta0, const EvalSplit& s,
                        const StabilityBudget& budget) {
    GdTrace tr;
    tr.theta = theta0;
    const double rho = spec.projection_radius();
    std::vector<double> grad;
    for (std::size_t t = 0; t < budget.steps; ++t) {
        tr.inputs.push_back(tr.theta.values);
        mean_loss_grad(spec, tr.theta, s.train_z, s.train_y, grad);
        for (std::size_t i = 0; i < tr.theta.values.size(); ++i) {
            tr.theta.values[i] -= budget.step_size * grad[i];
        }
        tr.pre_proj.push_back(tr.theta.values);
        project_to_ball_inplace(tr.theta.values, rho);
    }
    return tr;
}

double mean_eval_loss(const ModelSpec& spec, const ParamVector& theta, const EvalSplit& s) {
    double acc = 0.0;
    for (std::size_t j = 0; j < s.ev_z.size(); ++j) {
        acc += scaled_ce_loss_raw(spec, theta, s.ev_z[j], s.ev_y[j]);
    }
    return acc / static_cast<double>(s.ev_z.size());
}

void kl_gradient(const PosteriorParams& psi, const PosteriorParams& psi0, std::vector<double>& d_mu,
                 std::vector<double>& d_ls) {
    const std::size_t d = psi.dim();
    d_mu.assign(d, 0.0);
    d_ls.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        d_mu[i] = (psi.mean[i] - psi0.mean[i]) * std::exp(-psi0.log_variance[i]);
        d_ls[i] = 0.5 * (std::exp(psi.log_variance[i] - psi0.log_variance[i]) - 1.0);
    }
}

}  // namespace

void validate_train_config(const TrainConfig& config) {
    if (!(config.meta_learning_rate > 0.0)) {
        throw std::invalid_argument("TrainConfig: meta learning rate gamma must be > 0");
    }
    if (!std::isfinite(config.lambda1) || !std::isfinite(config.lambda2) || config.lambda1 < 0.0 ||
        config.lambda2 < 0.0) {
        throw std::invalid_argument("TrainConfig: lambda weights must be finite and >= 0");
    }
    if (config.posterior_samples < 1) {
        throw std::invalid_argument("TrainConfig: posterior_samples must be >= 1");
    }
}

namespace {

// Shared worker for meta_objective / meta_objective_gradient. When `grad` is
// null only the value is computed.
MetaObjective evaluate_objective(const PosteriorParams& psi, const PosteriorParams& psi0,
                                 const ObjectiveInputs& inputs, GradientMode mode, Rng& rng,
                                 std::size_t posterior_samples, MetaGradient* grad) {
    if (inputs.tasks.empty()) throw std::invalid_argument("meta objective: no tasks");
    if (inputs.task_count_full < 8) {
        throw std::invalid_argument("meta objective: full task count l must be >= 8");
    }
    const ModelSpec& spec = *inputs.spec;
    const StabilityBudget& budget = *inputs.budget;
    if (mode == GradientMode::ExactLinear) {
        if (spec.arch != Architecture::LinearSoftmax) {
            throw std::invalid_argument("meta_gradient: exact-linear mode requires a linear-softmax spec");
        }
        if (budget.algorithm != BaseAlgorithm::ProjectedGd) {
            throw std::invalid_argument("meta_gradient: exact-linear mode chains through GD steps only");
        }
    }
    if (psi.dim() != spec.param_count()) {
        throw std::invalid_argument("meta objective: posterior dimension does not match the model spec");
    }

    const std::size_t dim = psi.dim();
    const std::size_t batch = inputs.tasks.size();
    const double rho = spec.projection_radius();

    MetaObjective obj;
    obj.lambda1 = inputs.lambda1;
    obj.lambda2 = inputs.lambda2;

    std::vector<double> acc_dtheta(grad ? dim : 0, 0.0);
    if (grad) {
        grad->d_mean.assign(dim, 0.0);
        grad->d_log_variance.assign(dim, 0.0);
    }

    for (std::size_t s = 0; s < posterior_samples; ++s) {
        const PosteriorSample draw = sample_posterior(psi, rng, spec.layout());
        ParamVector theta = draw.theta;
        project_to_ball_inplace(theta.values, rho);

        std::vector<double> per_task_loss(batch, 0.0);
        std::vector<std::vector<double>> per_task_dtheta(grad ? batch : 0);

        parallel_for(batch, [&](std::size_t ti) {
            const TaskDataset& task = *inputs.tasks[ti];
            const EvalSplit split = split_of(task);
            ParamVector adapted;
            GdTrace trace;
            if (mode == GradientMode::ExactLinear && grad) {
                trace = adapt_gd_traced(spec, theta, split, budget);
                adapted = trace.theta;
            } else {
                Rng order_rng(sgd_order_stream(inputs.seed, task.task_id));
                adapted = adapt(spec, theta, split.train_z, split.train_y, budget, order_rng).theta;
            }
            per_task_loss[ti] = mean_eval_loss(spec, adapted, split);
            if (!grad) return;

            // d(eval loss)/d(adapted theta)
            std::vector<double> v;
            mean_loss_grad(spec, adapted, split.ev_z, split.ev_y, v);
            if (mode == GradientMode::ExactLinear) {
                // Chain back through every projected-GD step.
                std::vector<double> hv(dim, 0.0);
                for (std::size_t t = budget.steps; t-- > 0;) {
                    apply_projection_jacobian(trace.pre_proj[t], rho, v);
                    ParamVector point;
                    point.values = trace.inputs[t];
                    point.layout = theta.layout;
                    linear_mean_hessian_vec(spec, point, split.train_z, v, hv);
                    for (std::size_t i = 0; i < dim; ++i) v[i] -= budget.step_size * hv[i];
                }
            }
            per_task_dtheta[ti] = std::move(v);
        });

        double emp = 0.0;
        for (double x : per_task_loss) emp += x;
        emp /= static_cast<double>(batch);
        obj.empirical += emp;

        if (grad) {
            std::vector<double> v(dim, 0.0);
            const double inv_b = 1.0 / static_cast<double>(batch);
            for (const auto& tv : per_task_dtheta) {
                for (std::size_t i = 0; i < dim; ++i) v[i] += inv_b * tv[i];
            }
            // Initial projection of the raw sample, then the reparameterization.
            apply_projection_jacobian(draw.theta.values, rho, v);
            for (std::size_t i = 0; i < dim; ++i) {
                acc_dtheta[i] += v[i];
                grad->d_log_variance[i] +=
                    v[i] * 0.5 * std::exp(0.5 * psi.log_variance[i]) * draw.eps[i];
            }
        }
    }

    const double inv_s = 1.0 / static_cast<double>(posterior_samples);
    obj.empirical *= inv_s;
    if (grad) {
        for (std::size_t i = 0; i < dim; ++i) {
            grad->d_mean[i] = acc_dtheta[i] * inv_s;
            grad->d_log_variance[i] *= inv_s;
        }
    }

    const double kl = kl_diag_gaussian(psi, psi0);
    obj.pac_bayes = pac_bayes_regularizer(kl, inputs.task_count_full, inputs.delta);
    obj.stability = budget_beta_effective(budget);
    obj.value = obj.empirical + inputs.lambda1 * obj.pac_bayes + inputs.lambda2 * obj.stability;

    if (grad && inputs.lambda1 > 0.0) {
        std::vector<double> dkl_mu, dkl_ls;
        kl_gradient(psi, psi0, dkl_mu, dkl_ls);
        // dR/dKL = 1/(8 l R); R > 0 always since ln(2 sqrt(l)/delta) > 0.
        const double dr_dkl =
            1.0 / (8.0 * static_cast<double>(inputs.task_count_full) * obj.pac_bayes);
        for (std::size_t i = 0; i < dim; ++i) {
            grad->d_mean[i] += inputs.lambda1 * dr_dkl * dkl_mu[i];
            grad->d_log_variance[i] += inputs.lambda1 * dr_dkl * dkl_ls[i];
        }
    }
    // The stability term does not depend on psi in the bound-minimization
    // path, so it contributes no gradient.
    return obj;
}

ObjectiveInputs make_inputs(const std::vector<TaskDataset>& tasks, const ModelSpec& spec,
                            const StabilityBudget& budget, double delta, double l1, double l2) {
    ObjectiveInputs in;
    in.spec = &spec;
    in.budget = &budget;
    in.tasks.reserve(tasks.size());
    for (const auto& t : tasks) in.tasks.push_back(&t);
    in.task_count_full = tasks.size();
    in.delta = delta;
    in.lambda1 = l1;
    in.lambda2 = l2;
    return in;
}

void check_finite_or_throw(double b, std::size_t iteration) {
    if (!std::isfinite(b)) {
        throw std::runtime_error("meta training diverged (non-finite objective) at iteration " +
                                 std::to_string(iteration));
    }
}

}  // namespace

MetaObjective meta_objective(const PosteriorParams& psi, const PosteriorParams& psi0,
                             const ObjectiveInputs& inputs, Rng& rng) {
    return evaluate_objective(psi, psi0, inputs, GradientMode::FirstOrder, rng, 1, nullptr);
}

MetaObjective meta_objective_gradient(const PosteriorParams& psi, const PosteriorParams& psi0,
                                      const ObjectiveInputs& inputs, GradientMode mode, Rng& rng,
                                      MetaGradient& grad) {
    return evaluate_objective(psi, psi0, inputs, mode, rng, 1, &grad);
}

namespace {

TrainResult run_bound_minimization(const TrainConfig& config, const std::vector<TaskDataset>& tasks,
                                   const PosteriorParams& psi0, const ModelSpec& spec,
                                   const StabilityBudget& budget, double delta, bool minibatch,
                                   const PosteriorParams* resume_from) {
    validate_train_config(config);
    if (config.lambda1 != 1.0 || config.lambda2 != 1.0) {
        throw std::invalid_argument(
            "pacbus_train: bound minimization uses lambda1 = lambda2 = 1; use the heuristic for "
            "re-weighted terms");
    }
    if (tasks.size() < 8) throw std::invalid_argument("pacbus_train: needs l >= 8 tasks");
    if (minibatch && (config.batch_size < 1 || config.batch_size > tasks.size())) {
        throw std::invalid_argument("pacbus_train_minibatch: batch size must lie in [1, l]");
    }
    if (spec.arch != Architecture::LinearSoftmax && config.gradient_mode == GradientMode::ExactLinear) {
        throw std::invalid_argument("pacbus_train: exact-linear gradients need a linear-softmax spec");
    }
    validate_budget(budget);

    TrainResult result;
    result.psi = resume_from ? *resume_from : psi0;
    std::size_t flat_count = 0;
    double last_b = 0.0;

    for (std::size_t it = config.start_iteration; it < config.iterations; ++it) {
        Rng draw_rng(RngStream{config.seed, kMetaDrawStream, it});
        ObjectiveInputs inputs = make_inputs(tasks, spec, budget, delta, 1.0, 1.0);
        if (minibatch) {
            // k indices uniform with replacement; the batch mean (1/k) keeps
            // the estimator unbiased for the full objective.
            Rng pick(RngStream{config.seed, kMetaDrawStream + 1, it});
            inputs.tasks.clear();
            for (std::size_t b = 0; b < config.batch_size; ++b) {
                inputs.tasks.push_back(&tasks[pick.below(tasks.size())]);
            }
        }
        inputs.seed = config.seed;
        MetaGradient grad;
        const MetaObjective obj = evaluate_objective(result.psi, psi0, inputs, config.gradient_mode,
                                                     draw_rng, config.posterior_samples, &grad);
        check_finite_or_throw(obj.value, it);
        result.log.push_back({it, obj.value, obj.empirical, obj.pac_bayes, obj.stability, 0.0, 0.0});
        for (std::size_t i = 0; i < result.psi.dim(); ++i) {
            result.psi.mean[i] -= config.meta_learning_rate * grad.d_mean[i];
            result.psi.log_variance[i] -= config.meta_learning_rate * grad.d_log_variance[i];
        }
        if (config.early_stop) {
            flat_count = (it > 0 && std::abs(obj.value - last_b) < 1e-6) ? flat_count + 1 : 0;
            if (flat_count >= 50) break;
        }
        last_b = obj.value;
    }
    return result;
}

}  // namespace

TrainResult pacbus_train(const TrainConfig& config, const std::vector<TaskDataset>& tasks,
                         const PosteriorParams& psi0, const ModelSpec& spec,
                         const StabilityBudget& budget, double delta,
                         const PosteriorParams* resume_from) {
    return run_bound_minimization(config, tasks, psi0, spec, budget, delta, false, resume_from);
}

TrainResult pacbus_train_minibatch(const TrainConfig& config, const std::vector<TaskDataset>& tasks,
                                   const PosteriorParams& psi0, const ModelSpec& spec,
                                   const StabilityBudget& budget, double delta,
                                   const PosteriorParams* resume_from) {
    return run_bound_minimization(config, tasks, psi0, spec, budget, delta, true, resume_from);
}

TrainResult pacbus_h_train(const TrainConfig& config, const std::vector<TaskDataset>& tasks,
                           const PosteriorParams& psi0, const ModelSpec& spec, double delta,
                           const PosteriorParams* resume_from) {
    validate_train_config(config);
    if (tasks.empty()) throw std::invalid_argument("pacbus_h_train: no tasks");
    if (!(config.base_alpha > 0.0)) throw std::invalid_argument("pacbus_h_train: base alpha must be > 0");
    const std::size_t m = tasks.front().m();
    const std::size_t l = tasks.size();
    const std::size_t batch = config.batch_size ? std::min(config.batch_size, l) : l;

    // c_L/c_S estimates start from the prior and refresh after every update
    // (held constant inside each update step).
    auto estimate = [&](const PosteriorParams& psi, std::size_t it) -> LossConstants {
        if (spec.arch == Architecture::LinearSoftmax) {
            LossScaling unscaled{0.0, 1.0};
            return loss_constants_linear(spec.class_count(), unscaled);
        }
        Rng rng(RngStream{config.seed, kMetaDrawStream + 2, it});
        return estimate_network_constants(spec, psi, config.constant_refresh_samples, rng).constants;
    };

    TrainResult result;
    result.psi = resume_from ? *resume_from : psi0;
    LossConstants consts = estimate(result.psi, config.start_iteration);

    for (std::size_t it = config.start_iteration; it < config.iterations; ++it) {
        const double beta = (m >= 2)
                                ? beta_nonconvex(consts.lipschitz, consts.smoothness,
                                                 config.base_alpha, 1, m)
                                : 0.0;
        Rng draw_rng(RngStream{config.seed, kMetaDrawStream, it});
        const PosteriorSample draw = sample_posterior(result.psi, draw_rng, spec.layout());

        std::vector<std::size_t> picks(batch);
        {
            Rng pick(RngStream{config.seed, kMetaDrawStream + 1, it});
            for (auto& p : picks) p = static_cast<std::size_t>(pick.below(l));
        }
        std::vector<double> losses(batch, 0.0);
        std::vector<std::vector<double>> dthetas(batch);
        parallel_for(batch, [&](std::size_t bi) {
            const TaskDataset& task = tasks[picks[bi]];
            const EvalSplit split = split_of(task);
            const AdaptResult res = adapt_unprojected_raw(spec, draw.theta, split.train_z,
                                                          split.train_y, 1, config.base_alpha);
            double acc = 0.0;
            for (std::size_t j = 0; j < split.ev_z.size(); ++j) {
                acc += ce_loss(spec, res.theta, split.ev_z[j], split.ev_y[j]);
            }
            losses[bi] = acc / static_cast<double>(split.ev_z.size());
            std::vector<double> g;
            mean_ce_grad(spec, res.theta, split.ev_z, split.ev_y, g);
            dthetas[bi] = std::move(g);
        });

        double emp = 0.0;
        for (double x : losses) emp += x;
        emp /= static_cast<double>(batch);
        const double kl = kl_diag_gaussian(result.psi, psi0);
        const double rbayes = pac_bayes_regularizer(kl, std::max<std::size_t>(l, 8), delta);
        const double b = emp + config.lambda1 * rbayes + config.lambda2 * beta;
        check_finite_or_throw(b, it);
        result.log.push_back(
            {it, b, emp, rbayes, beta, consts.lipschitz, consts.smoothness});

        const std::size_t dim = result.psi.dim();
        std::vector<double> v(dim, 0.0);
        const double inv_b = 1.0 / static_cast<double>(batch);
        for (const auto& tv : dthetas) {
            for (std::size_t i = 0; i < dim; ++i) v[i] += inv_b * tv[i];
        }
        std::vector<double> dmu = v, dls(dim, 0.0);
        for (std::size_t i = 0; i < dim; ++i) {
            dls[i] = v[i] * 0.5 * std::exp(0.5 * result.psi.log_variance[i]) * draw.eps[i];
        }
        if (config.lambda1 > 0.0) {
            std::vector<double> dkl_mu, dkl_ls;
            kl_gradient(result.psi, psi0, dkl_mu, dkl_ls);
            const double dr_dkl = 1.0 / (8.0 * static_cast<double>(std::max<std::size_t>(l, 8)) * rbayes);
            for (std::size_t i = 0; i < dim; ++i) {
                dmu[i] += config.lambda1 * dr_dkl * dkl_mu[i];
                dls[i] += config.lambda1 * dr_dkl * dkl_ls[i];
            }
        }
        for (std::size_t i = 0; i < dim; ++i) {
            result.psi.mean[i] -= config.meta_learning_rate * dmu[i];
            result.psi.log_variance[i] -= config.meta_learning_rate * dls[i];
        }
        consts = estimate(result.psi, it + 1);
    }
    return result;
}

std::vector<double> prior_train_mean(const TrainConfig& config,
                                     const std::vector<TaskDataset>& tasks, const ModelSpec& spec,
                                     const StabilityBudget& budget) {
    validate_train_config(config);
    if (tasks.empty()) throw std::invalid_argument("prior_train_mean: no tasks");
    validate_budget(budget);
    const double rho = spec.projection_radius();
    const std::size_t l = tasks.size();
    const std::size_t batch = config.batch_size ? std::min(config.batch_size, l) : l;

    ParamVector mu;
    mu.values.assign(spec.param_count(), 0.0);
    mu.layout = spec.layout();

    for (std::size_t it = 0; it < config.iterations; ++it) {
        std::vector<std::size_t> picks(batch);
        {
            Rng pick(RngStream{config.seed, kMetaDrawStream + 3, it});
            for (auto& p : picks) p = static_cast<std::size_t>(pick.below(l));
        }
        std::vector<std::vector<double>> dthetas(batch);
        parallel_for(batch, [&](std::size_t bi) {
            const TaskDataset& task = tasks[picks[bi]];
            const EvalSplit split = split_of(task);
            Rng order_rng(sgd_order_stream(config.seed, task.task_id));
            const AdaptResult res =
                adapt(spec, mu, split.train_z, split.train_y, budget, order_rng);
            std::vector<double> g;
            mean_loss_grad(spec, res.theta, split.ev_z, split.ev_y, g);
            dthetas[bi] = std::move(g);
        });
        const double inv_b = 1.0 / static_cast<double>(batch);
        for (const auto& tv : dthetas) {
            for (std::size_t i = 0; i < mu.values.size(); ++i) {
                mu.values[i] -= config.meta_learning_rate * inv_b * tv[i];
            }
        }
        project_to_ball_inplace(mu.values, rho);
    }
    return mu.values;
}

}  // namespace pacbus
