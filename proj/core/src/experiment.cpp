#include "pacbus/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pacbus/parallel.hpp"

namespace pacbus {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

std::string fmt_hex_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

}  // namespace

ConfigMap ConfigMap::parse_text(const std::string& text, const std::string& origin) {
    ConfigMap map;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": unterminated section");
            }
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
        }
        map.entries_[section.empty() ? key : section + "." + key] = value;
    }
    return map;
}

ConfigMap ConfigMap::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error(path + ": cannot open config");
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_text(buf.str(), path);
}

bool ConfigMap::has(const std::string& key) const { return entries_.count(key) != 0; }

std::string ConfigMap::get(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) throw std::runtime_error("config: missing required key '" + key + "'");
    return it->second;
}

std::string ConfigMap::get_or(const std::string& key, const std::string& fallback) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second;
}

double ConfigMap::get_double(const std::string& key) const {
    const std::string v = get(key);
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw std::runtime_error("config: key '" + key + "' is not a number: '" + v + "'");
    }
}

double ConfigMap::get_double_or(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}

long long ConfigMap::get_int(const std::string& key) const {
    const std::string v = get(key);
    try {
        std::size_t pos = 0;
        const long long d = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw std::runtime_error("config: key '" + key + "' is not an integer: '" + v + "'");
    }
}

long long ConfigMap::get_int_or(const std::string& key, long long fallback) const {
    return has(key) ? get_int(key) : fallback;
}

bool ConfigMap::get_bool_or(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::runtime_error("config: key '" + key + "' is not a boolean: '" + v + "'");
}

void ConfigMap::set(const std::string& key, const std::string& value) { entries_[key] = value; }

std::string ConfigMap::canonical_text() const {
    std::ostringstream out;
    for (const auto& [k, v] : entries_) out << k << " = " << v << '\n';
    return out.str();
}

std::string ConfigMap::hash() const {
    // FNV-1a 64 over the canonical dump. The output directory identifies
    // where a run lives, not what it computes, so it stays out of the hash;
    // everything else participates.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [k, v] : entries_) {
        if (k == "experiment.out") continue;
        const std::string line = k + " = " + v + "\n";
        for (const char c : line) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string train_mode_name(TrainMode mode) {
    switch (mode) {
        case TrainMode::PacBus: return "pacbus";
        case TrainMode::PacBusMinibatch: return "pacbus-minibatch";
        case TrainMode::PacBusH: return "pacbus-h";
        case TrainMode::MamlLike: return "maml-like";
    }
    return "pacbus";
}

TrainMode train_mode_from_name(const std::string& name) {
    if (name == "pacbus") return TrainMode::PacBus;
    if (name == "pacbus-minibatch") return TrainMode::PacBusMinibatch;
    if (name == "pacbus-h") return TrainMode::PacBusH;
    if (name == "maml-like") return TrainMode::MamlLike;
    throw std::runtime_error("config: unknown mode '" + name +
                             "' (expected pacbus | pacbus-minibatch | pacbus-h | maml-like)");
}

ExperimentConfig resolve_config(const ConfigMap& map) {
    ExperimentConfig cfg;
    cfg.raw = map;
    cfg.name = map.get_or("experiment.name", "run");
    cfg.seed = static_cast<std::uint64_t>(map.get_int_or("experiment.seed", 0));
    cfg.out_dir = map.get_or("experiment.out", "");

    // --- model ---
    const std::string arch = map.get_or("model.arch", "linear-softmax");
    const double r = map.get_double_or("model.r", 1.0);
    const double rz = map.get_double_or("model.rz", 1.0);
    std::vector<std::size_t> widths;
    {
        std::istringstream ws(map.get("model.widths"));
        long long w = 0;
        while (ws >> w) {
            if (w <= 0) throw std::runtime_error("config: model.widths entries must be positive");
            widths.push_back(static_cast<std::size_t>(w));
        }
    }
    if (arch == "linear-softmax") {
        if (widths.size() != 2) throw std::runtime_error("config: linear-softmax needs widths 'd k'");
        cfg.model = linear_softmax_spec(widths[0], widths[1], r, rz);
    } else if (arch == "mlp-elu") {
        cfg.model = mlp_elu_spec(widths, r, rz);
    } else {
        throw std::runtime_error("config: unknown model.arch '" + arch + "'");
    }

    // --- tasks ---
    cfg.generator = map.get_or("tasks.generator", "circle");
    cfg.l_prior = static_cast<std::size_t>(map.get_int_or("tasks.l_prior", 0));
    cfg.l_train = static_cast<std::size_t>(map.get_int_or("tasks.l_train", 0));
    cfg.l_test = static_cast<std::size_t>(map.get_int_or("tasks.l_test", 0));
    cfg.m = static_cast<std::size_t>(map.get_int_or("tasks.m", 10));
    cfg.n = static_cast<std::size_t>(map.get_int_or("tasks.n", 0));
    if (map.get_int_or("tasks.m", 10) <= 0) throw std::runtime_error("config: tasks.m must be >= 1");
    if (map.get_int_or("tasks.n", 0) < 0) throw std::runtime_error("config: tasks.n must be >= 0");
    cfg.cluster_dim = static_cast<std::size_t>(map.get_int_or("tasks.cluster_dim", 16));
    cfg.cluster_classes = static_cast<std::size_t>(map.get_int_or("tasks.cluster_classes", 40));
    cfg.cluster_spread = map.get_double_or("tasks.cluster_spread", 0.1);
    cfg.kway = static_cast<std::size_t>(map.get_int_or("tasks.k", 4));
    cfg.nme_groups = static_cast<std::size_t>(map.get_int_or("tasks.nme_groups", 10));
    cfg.nme_permute_at_test = map.get_bool_or("tasks.nme_permute_at_test", true);
    cfg.store_path = map.get_or("tasks.store", "");
    if (cfg.generator == "circle") {
        if (cfg.model.input_dim() != 2 || cfg.model.class_count() != 2) {
            throw std::runtime_error("config: circle tasks need a d=2, k=2 model");
        }
    }
    if (cfg.generator == "store" && cfg.store_path.empty()) {
        throw std::runtime_error("config: tasks.generator = store requires tasks.store");
    }

    // --- base learner ---
    const std::string alg = map.get_or("base.algorithm", "gd");
    if (alg == "gd") {
        cfg.budget.algorithm = BaseAlgorithm::ProjectedGd;
    } else if (alg == "sgd") {
        cfg.budget.algorithm = BaseAlgorithm::ProjectedSgd;
    } else {
        throw std::runtime_error("config: base.algorithm must be gd or sgd");
    }
    cfg.budget.steps = static_cast<std::size_t>(map.get_int_or("base.steps", 1));
    cfg.budget.step_size = map.get_double_or("base.lr", 0.05);
    if (!(cfg.budget.step_size > 0.0)) throw std::runtime_error("config: base.lr must be > 0");
    const std::string sched = map.get_or("base.schedule", "fixed");
    if (sched == "fixed") {
        cfg.budget.schedule = StepSchedule::Fixed;
    } else if (sched == "c-over-t") {
        cfg.budget.schedule = StepSchedule::COverT;
    } else {
        throw std::runtime_error("config: base.schedule must be fixed or c-over-t");
    }
    // tasks.m / tasks.n are per-task totals for the circle generator,
    // per-class counts for k-way generators, per-group counts for NME pools;
    // the stability budget works with per-task totals.
    std::size_t task_m = cfg.m, task_n = cfg.n;
    if (cfg.generator == "cluster" || cfg.generator == "store") {
        task_m = cfg.m * cfg.kway;
        task_n = cfg.n * cfg.kway;
    } else if (cfg.generator == "nme-cluster") {
        task_m = cfg.m * cfg.nme_groups;
        task_n = cfg.n * cfg.nme_groups;
    }
    cfg.budget.train_size = task_m;
    cfg.budget.validation_size = task_n;
    cfg.budget.convex = (cfg.model.arch == Architecture::LinearSoftmax);
    {
        const LossScaling sc = loss_scaling(cfg.model.class_count(), cfg.model.output_radius);
        cfg.budget.constants = stability_constants_ball(cfg.model, sc);
    }

    // --- meta training ---
    cfg.mode = train_mode_from_name(map.get_or("meta.mode", "pacbus"));
    cfg.train.meta_learning_rate = map.get_double_or("meta.gamma", 1e-3);
    cfg.train.iterations = static_cast<std::size_t>(map.get_int_or("meta.iterations", 100));
    cfg.train.batch_size = static_cast<std::size_t>(map.get_int_or("meta.batch", 0));
    cfg.train.lambda1 = map.get_double_or("meta.lambda1", cfg.guarantee_mode() ? 1.0 : 0.0);
    cfg.train.lambda2 = map.get_double_or("meta.lambda2", cfg.guarantee_mode() ? 1.0 : 0.0);
    cfg.train.constant_refresh_samples =
        static_cast<std::size_t>(map.get_int_or("meta.constant_refresh_samples", 8));
    cfg.train.posterior_samples = static_cast<std::size_t>(map.get_int_or("meta.posterior_samples", 1));
    cfg.train.early_stop = map.get_bool_or("meta.early_stop", false);
    cfg.train.base_alpha = map.get_double_or("meta.base_alpha", cfg.budget.step_size);
    cfg.train.seed = cfg.seed;
    const std::string gm = map.get_or("meta.gradient_mode", "first-order");
    if (gm == "first-order") {
        cfg.train.gradient_mode = GradientMode::FirstOrder;
    } else if (gm == "exact-linear") {
        cfg.train.gradient_mode = GradientMode::ExactLinear;
    } else {
        throw std::runtime_error("config: meta.gradient_mode must be first-order or exact-linear");
    }
    if (cfg.mode == TrainMode::MamlLike) {
        cfg.train.lambda1 = 0.0;
        cfg.train.lambda2 = 0.0;
    }
    cfg.prior_iterations = static_cast<std::size_t>(map.get_int_or("meta.prior_iterations", 100));
    cfg.prior_gamma = map.get_double_or("meta.prior_gamma", cfg.train.meta_learning_rate);
    cfg.prior_batch = static_cast<std::size_t>(map.get_int_or("meta.prior_batch", 0));
    cfg.prior_sigma0 = map.get_double_or("meta.prior_sigma0", 0.01);
    if (!(cfg.prior_gamma > 0.0)) throw std::runtime_error("config: meta.prior_gamma must be > 0");
    if (!(cfg.prior_sigma0 > 0.0)) throw std::runtime_error("config: meta.prior_sigma0 must be > 0");

    // --- certificate ---
    cfg.certify_options.sample_count = static_cast<std::size_t>(map.get_int_or("certify.N", 1000));
    cfg.certify_options.delta = map.get_double_or("certify.delta", 0.005);
    cfg.certify_options.delta_prime = map.get_double_or("certify.delta_prime", 0.005);
    cfg.certify_options.union_bound_per_task = map.get_bool_or("certify.union_bound_per_task", false);
    cfg.eval_samples = static_cast<std::size_t>(map.get_int_or("evaluate.samples", 8));

    // --- cross-module precondition checks, before any compute ---
    // Downstream modules throw std::invalid_argument; config validation
    // reports everything uniformly as a config error.
    auto as_config_error = [](const auto& fn) {
        try {
            fn();
        } catch (const std::invalid_argument& e) {
            throw std::runtime_error(std::string("config: ") + e.what());
        }
    };
    as_config_error([&] { validate_train_config(cfg.train); });
    if (cfg.guarantee_mode()) {
        as_config_error([&] { validate_budget(cfg.budget); });
        if (cfg.l_train < 8) {
            throw std::runtime_error("config: guarantee modes need tasks.l_train >= 8 (meta-level bound precondition)");
        }
        if (cfg.train.lambda1 != 1.0 || cfg.train.lambda2 != 1.0) {
            throw std::runtime_error("config: pacbus modes fix lambda1 = lambda2 = 1");
        }
    }
    const double dsum = cfg.certify_options.delta + cfg.certify_options.delta_prime;
    if (!(cfg.certify_options.delta > 0.0) || !(cfg.certify_options.delta_prime > 0.0) || dsum >= 1.0) {
        throw std::runtime_error("config: need certify.delta, certify.delta_prime in (0,1) with sum < 1");
    }
    if (cfg.certify_options.sample_count < 1) throw std::runtime_error("config: certify.N must be >= 1");
    if (cfg.mode == TrainMode::PacBusMinibatch &&
        (cfg.train.batch_size < 1 || cfg.train.batch_size > cfg.l_train)) {
        throw std::runtime_error("config: meta.batch must lie in [1, tasks.l_train] for pacbus-minibatch");
    }
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    return resolve_config(ConfigMap::parse_file(path));
}

namespace {

void write_psi(std::ostringstream& out, const char* tag, const PosteriorParams& psi) {
    out << tag << "_dim " << psi.dim() << '\n';
    out << tag << "_mean";
    for (double v : psi.mean) out << ' ' << fmt_hex_double(v);
    out << '\n';
    out << tag << "_log_variance";
    for (double v : psi.log_variance) out << ' ' << fmt_hex_double(v);
    out << '\n';
}

std::vector<double> read_doubles(std::istringstream& ls) {
    std::vector<double> out;
    std::string tok;
    while (ls >> tok) out.push_back(std::strtod(tok.c_str(), nullptr));
    return out;
}

}  // namespace

std::string checkpoint_to_text(const Checkpoint& c) {
    std::ostringstream out;
    out << "pacbus-checkpoint v1\n";
    out << "config_hash " << c.config_hash << '\n';
    out << "mode " << c.mode << '\n';
    out << "iterations " << c.iterations << '\n';
    write_psi(out, "prior", c.prior);
    write_psi(out, "posterior", c.posterior);
    return out.str();
}

Checkpoint checkpoint_from_text(const std::string& text) {
    Checkpoint c;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "pacbus-checkpoint v1") {
        throw std::runtime_error("checkpoint: bad magic");
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "config_hash") {
            ls >> c.config_hash;
        } else if (key == "mode") {
            ls >> c.mode;
        } else if (key == "iterations") {
            ls >> c.iterations;
        } else if (key == "prior_dim" || key == "posterior_dim") {
            // sizes are implied by the vectors; kept for readability
        } else if (key == "prior_mean") {
            c.prior.mean = read_doubles(ls);
        } else if (key == "prior_log_variance") {
            c.prior.log_variance = read_doubles(ls);
        } else if (key == "posterior_mean") {
            c.posterior.mean = read_doubles(ls);
        } else if (key == "posterior_log_variance") {
            c.posterior.log_variance = read_doubles(ls);
        } else {
            throw std::runtime_error("checkpoint: unknown key '" + key + "'");
        }
    }
    validate_posterior(c.prior);
    validate_posterior(c.posterior);
    return c;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error(path + ": cannot open for writing");
    f << checkpoint_to_text(c);
    if (!f) throw std::runtime_error(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error(path + ": cannot open");
    std::ostringstream buf;
    buf << f.rdbuf();
    return checkpoint_from_text(buf.str());
}

std::string training_log_to_text(const std::vector<TrainRecord>& log) {
    std::ostringstream out;
    out << "# iteration B empirical pac_bayes stability c_L c_S\n";
    char buf[256];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%zu %.17g %.17g %.17g %.17g %.17g %.17g\n", r.iteration,
                      r.objective, r.empirical, r.pac_bayes, r.stability, r.c_lipschitz,
                      r.c_smoothness);
        out << buf;
    }
    return out.str();
}

EvalSummary evaluate_posterior(const PosteriorParams& psi, const std::vector<TaskDataset>& tasks,
                               const ModelSpec& spec, const StabilityBudget& budget, bool project,
                               double heuristic_alpha, std::size_t samples, std::uint64_t seed) {
    if (tasks.empty()) throw std::invalid_argument("evaluate: no tasks");
    if (samples < 1) throw std::invalid_argument("evaluate: samples must be >= 1");
    const double rho = spec.projection_radius();
    std::vector<double> losses(tasks.size(), 0.0), accs(tasks.size(), 0.0);
    parallel_for(tasks.size(), [&](std::size_t ti) {
        const TaskDataset& task = tasks[ti];
        std::vector<std::vector<double>> zs;
        std::vector<std::size_t> ys;
        for (const auto& s : task.train) {
            zs.push_back(s.features);
            ys.push_back(s.label);
        }
        const auto& probe = task.validation.empty() ? task.train : task.validation;
        Rng draw_rng(RngStream{seed, 6060, task.task_id});
        double loss = 0.0, acc = 0.0;
        for (std::size_t s = 0; s < samples; ++s) {
            PosteriorSample draw = sample_posterior(psi, draw_rng, spec.layout());
            ParamVector adapted;
            if (project) {
                project_to_ball_inplace(draw.theta.values, rho);
                Rng order_rng(sgd_order_stream(seed, task.task_id));
                adapted = adapt(spec, draw.theta, zs, ys, budget, order_rng).theta;
            } else {
                adapted = adapt_unprojected_raw(spec, draw.theta, zs, ys, 1, heuristic_alpha).theta;
            }
            for (const auto& p : probe) {
                if (project) {
                    loss += scaled_ce_loss(spec, adapted, p.features, p.label);
                } else {
                    loss += ce_loss(spec, adapted, p.features, p.label);
                }
                acc += argmax_index(forward(spec, adapted, p.features)) == p.label ? 1.0 : 0.0;
            }
        }
        const double denom = static_cast<double>(samples * probe.size());
        losses[ti] = loss / denom;
        accs[ti] = acc / denom;
    });
    EvalSummary s;
    s.task_count = tasks.size();
    s.samples_per_task = samples;
    auto mean_std = [&](const std::vector<double>& v, double& mean, double& sd) {
        double acc = 0.0;
        for (double x : v) acc += x;
        mean = acc / static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
    };
    mean_std(losses, s.loss_mean, s.loss_std);
    mean_std(accs, s.accuracy_mean, s.accuracy_std);
    return s;
}

std::string eval_summary_to_text(const EvalSummary& s, const std::string& config_hash) {
    std::ostringstream out;
    char buf[64];
    out << "pacbus-eval v1\n";
    out << "config_hash " << config_hash << '\n';
    out << "tasks " << s.task_count << '\n';
    out << "samples_per_task " << s.samples_per_task << '\n';
    std::snprintf(buf, sizeof buf, "%.17g", s.loss_mean);
    out << "loss_mean " << buf << '\n';
    std::snprintf(buf, sizeof buf, "%.17g", s.loss_std);
    out << "loss_std " << buf << '\n';
    std::snprintf(buf, sizeof buf, "%.17g", s.accuracy_mean);
    out << "accuracy_mean " << buf << '\n';
    std::snprintf(buf, sizeof buf, "%.17g", s.accuracy_std);
    out << "accuracy_std " << buf << '\n';
    return out.str();
}

}  // namespace pacbus
