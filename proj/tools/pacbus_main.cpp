// pacbus: batch front end for task generation, meta-training, certification,
// evaluation and bit-exact replay.
//
// Exit codes: 0 success, 2 validation error, 3 numerical divergence, 4 IO error.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "pacbus/experiment.hpp"

namespace fs = std::filesystem;
using namespace pacbus;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitIo = 4;

struct CliError : std::runtime_error {
    int code;
    CliError(int c, const std::string& what) : std::runtime_error(what), code(c) {}
};

/// One run per output directory; the lock is removed when the command ends.
class DirLock {
  public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw CliError(kExitIo, dir.string() + ": cannot create output directory");
        if (fs::exists(path_)) {
            throw CliError(kExitIo, path_.string() + ": run already in progress (stale lock? remove it)");
        }
        std::ofstream f(path_);
        if (!f) throw CliError(kExitIo, path_.string() + ": cannot create lock");
        f << "locked\n";
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

  private:
    fs::path path_;
};

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw CliError(kExitIo, path.string() + ": cannot open for writing");
    f << text;
    if (!f) throw CliError(kExitIo, path.string() + ": write failed");
}

std::string read_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw CliError(kExitIo, path.string() + ": cannot open");
    std::ostringstream buf;
    buf << f.rdbuf();
    return buf.str();
}

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string mode;
};

ExperimentConfig load_with_overrides(const std::string& config_path, const Overrides& ov) {
    ConfigMap map;
    try {
        map = ConfigMap::parse_file(config_path);
    } catch (const std::exception& e) {
        throw CliError(kExitIo, e.what());
    }
    if (ov.seed) map.set("experiment.seed", std::to_string(*ov.seed));
    if (!ov.out.empty()) map.set("experiment.out", ov.out);
    if (!ov.mode.empty()) map.set("meta.mode", ov.mode);
    try {
        ExperimentConfig cfg = resolve_config(map);
        if (cfg.out_dir.empty()) {
            throw std::runtime_error("config: experiment.out is required (or pass --out)");
        }
        return cfg;
    } catch (const std::exception& e) {
        throw CliError(kExitValidation, e.what());
    }
}

TaskPool build_pool(const ExperimentConfig& cfg, PoolRole role, std::size_t count) {
    if (cfg.generator == "circle") {
        return gen_circle_tasks(count, cfg.m, cfg.n, role, cfg.seed);
    }
    if (cfg.generator == "cluster") {
        return gen_cluster_tasks(cfg.cluster_dim, cfg.cluster_classes, cfg.cluster_spread, cfg.kway,
                                 count, cfg.m, cfg.n, role, cfg.seed);
    }
    if (cfg.generator == "nme-cluster") {
        const std::size_t per_group = std::max<std::size_t>(2 * (cfg.m + cfg.n), 16);
        const ClassStore store = gen_cluster_store(cfg.cluster_dim, cfg.cluster_classes,
                                                   cfg.cluster_spread, per_group, cfg.seed);
        return make_nme_pool(store, cfg.nme_groups, cfg.nme_permute_at_test, cfg.m, cfg.n, count,
                             role, cfg.seed);
    }
    if (cfg.generator == "store") {
        const ClassStore store = load_embedded_dataset(cfg.store_path);
        return make_kway_tasks(store, cfg.kway, cfg.m, cfg.n, count, role, cfg.seed);
    }
    throw CliError(kExitValidation, "config: unknown tasks.generator '" + cfg.generator + "'");
}

fs::path pool_base(const ExperimentConfig& cfg, PoolRole role) {
    return fs::path(cfg.out_dir) / "tasks" / pool_role_name(role);
}

TaskPool obtain_pool(const ExperimentConfig& cfg, PoolRole role, std::size_t count) {
    // Written pools (gen-tasks) are preferred; otherwise the pool is rebuilt
    // in memory from (config, seed), which produces the identical pool.
    const fs::path base = pool_base(cfg, role);
    const fs::path store = base.string() + ".store";
    const fs::path manifest = base.string() + ".manifest";
    if (fs::exists(store) && fs::exists(manifest)) {
        return load_pool(store.string(), manifest.string());
    }
    return build_pool(cfg, role, count);
}

std::vector<double> default_prior_mean(const ModelSpec& spec, std::uint64_t seed) {
    std::vector<double> mu(spec.param_count(), 0.0);
    if (spec.arch == Architecture::MlpElu) {
        Rng rng(RngStream{seed, 9090, 0});
        std::size_t off = 0;
        for (const auto& L : spec.layout()) {
            const double scale = std::sqrt(1.0 / static_cast<double>(L.in));
            for (std::size_t i = 0; i < L.in * L.out; ++i) mu[off + i] = scale * rng.normal();
            off += L.count();  // biases stay zero
        }
    }
    return mu;
}

PosteriorParams make_prior(const ExperimentConfig& cfg, const std::vector<TaskDataset>* prior_tasks) {
    std::vector<double> mu;
    if (prior_tasks && !prior_tasks->empty() && cfg.prior_iterations > 0) {
        TrainConfig pc = cfg.train;
        pc.iterations = cfg.prior_iterations;
        pc.start_iteration = 0;
        pc.meta_learning_rate = cfg.prior_gamma;
        pc.batch_size = cfg.prior_batch;
        mu = prior_train_mean(pc, *prior_tasks, cfg.model, cfg.budget);
    } else {
        mu = default_prior_mean(cfg.model, cfg.seed);
        if (cfg.guarantee_mode()) project_to_ball_inplace(mu, cfg.model.projection_radius());
    }
    return make_posterior_scalar_var(std::move(mu), cfg.prior_sigma0);
}

int cmd_gen_tasks(const std::string& config_path, const Overrides& ov) {
    const ExperimentConfig cfg = load_with_overrides(config_path, ov);
    DirLock lock(cfg.out_dir);
    fs::create_directories(fs::path(cfg.out_dir) / "tasks");
    write_file(fs::path(cfg.out_dir) / "config.resolved", cfg.raw.canonical_text());
    struct Row {
        PoolRole role;
        std::size_t count;
    } rows[] = {{PoolRole::Prior, cfg.l_prior},
                {PoolRole::MetaTrain, cfg.l_train},
                {PoolRole::MetaTest, cfg.l_test}};
    for (const auto& row : rows) {
        if (row.count == 0) continue;
        const TaskPool pool = build_pool(cfg, row.role, row.count);
        validate_pool(pool);
        const fs::path base = pool_base(cfg, row.role);
        save_pool(pool, base.string() + ".store", base.string() + ".manifest");
        std::cout << "wrote " << base.string() << ".{store,manifest} (" << pool.tasks.size()
                  << " tasks)\n";
    }
    return kExitOk;
}

int cmd_train(const std::string& config_path, const Overrides& ov, bool resume) {
    const ExperimentConfig cfg = load_with_overrides(config_path, ov);
    DirLock lock(cfg.out_dir);
    write_file(fs::path(cfg.out_dir) / "config.resolved", cfg.raw.canonical_text());

    TaskPool train_pool = obtain_pool(cfg, PoolRole::MetaTrain, cfg.l_train);
    validate_pool(train_pool);
    std::vector<TaskDataset> prior_tasks;
    if (cfg.l_prior > 0) {
        TaskPool p = obtain_pool(cfg, PoolRole::Prior, cfg.l_prior);
        validate_pool(p);
        prior_tasks = std::move(p.tasks);
    }

    const fs::path ckpt_path = fs::path(cfg.out_dir) / "checkpoint.txt";
    PosteriorParams prior;
    std::optional<PosteriorParams> resume_psi;
    std::size_t start_iteration = 0;
    if (resume && fs::exists(ckpt_path)) {
        Checkpoint old = load_checkpoint(ckpt_path.string());
        if (old.config_hash != cfg.raw.hash()) {
            throw CliError(kExitValidation, "resume: checkpoint hash " + old.config_hash +
                                                " does not match config hash " + cfg.raw.hash());
        }
        prior = old.prior;
        resume_psi = old.posterior;
        start_iteration = old.iterations;
    } else {
        prior = make_prior(cfg, prior_tasks.empty() ? nullptr : &prior_tasks);
    }

    TrainConfig tc = cfg.train;
    tc.start_iteration = start_iteration;
    TrainResult result;
    try {
        const PosteriorParams* init = resume_psi ? &*resume_psi : nullptr;
        switch (cfg.mode) {
            case TrainMode::PacBus:
                result = pacbus_train(tc, train_pool.tasks, prior, cfg.model, cfg.budget,
                                      cfg.certify_options.delta, init);
                break;
            case TrainMode::PacBusMinibatch:
                result = pacbus_train_minibatch(tc, train_pool.tasks, prior, cfg.model, cfg.budget,
                                                cfg.certify_options.delta, init);
                break;
            case TrainMode::PacBusH:
            case TrainMode::MamlLike:
                result = pacbus_h_train(tc, train_pool.tasks, prior, cfg.model,
                                        cfg.certify_options.delta, init);
                break;
        }
    } catch (const std::runtime_error& e) {
        throw CliError(kExitDivergence, e.what());
    }

    Checkpoint ckpt;
    ckpt.config_hash = cfg.raw.hash();
    ckpt.mode = train_mode_name(cfg.mode);
    ckpt.prior = prior;
    ckpt.posterior = result.psi;
    ckpt.iterations = cfg.train.iterations;
    save_checkpoint(ckpt, ckpt_path.string());

    // Appending keeps the earlier segment of a resumed run.
    const fs::path log_path = fs::path(cfg.out_dir) / "train.log";
    if (start_iteration == 0 || !fs::exists(log_path)) {
        write_file(log_path, training_log_to_text(result.log));
    } else {
        std::ofstream f(log_path, std::ios::app);
        const std::string text = training_log_to_text(result.log);
        f << text.substr(text.find('\n') + 1);  // drop the header line
    }
    if (!result.log.empty()) {
        std::cout << "trained " << train_mode_name(cfg.mode) << ": B " << result.log.front().objective
                  << " -> " << result.log.back().objective << " over " << result.log.size()
                  << " iterations\n";
    }
    std::cout << "checkpoint " << ckpt_path.string() << '\n';
    return kExitOk;
}

int cmd_certify(const std::string& config_path, const Overrides& ov, const std::string& ckpt_arg) {
    const ExperimentConfig cfg = load_with_overrides(config_path, ov);
    DirLock lock(cfg.out_dir);
    const fs::path ckpt_path =
        ckpt_arg.empty() ? fs::path(cfg.out_dir) / "checkpoint.txt" : fs::path(ckpt_arg);
    Checkpoint ckpt = load_checkpoint(ckpt_path.string());
    if (ckpt.config_hash != cfg.raw.hash()) {
        throw CliError(kExitValidation, "certify: checkpoint hash " + ckpt.config_hash +
                                            " does not match config hash " + cfg.raw.hash());
    }
    TaskPool train_pool = obtain_pool(cfg, PoolRole::MetaTrain, cfg.l_train);
    validate_pool(train_pool);

    CertifyOptions opts = cfg.certify_options;
    if (!cfg.guarantee_mode()) {
        opts.heuristic_reason = "checkpoint trained with mode " + ckpt.mode +
                                " (no bounded-loss projection; the certificate carries no guarantee)";
    }
    BoundReport report;
    try {
        report = certify(ckpt.posterior, ckpt.prior, train_pool.tasks, cfg.model, cfg.budget, opts,
                         RngStream{cfg.seed, 4040, 0});
    } catch (const std::invalid_argument& e) {
        throw CliError(kExitValidation, e.what());
    }
    write_file(fs::path(cfg.out_dir) / "report.txt", report_to_text(report, cfg.raw.hash()));
    write_file(fs::path(cfg.out_dir) / "report_human.txt", report_to_human(report));
    std::cout << report_to_human(report);
    return kExitOk;
}

int cmd_evaluate(const std::string& config_path, const Overrides& ov, const std::string& ckpt_arg) {
    const ExperimentConfig cfg = load_with_overrides(config_path, ov);
    DirLock lock(cfg.out_dir);
    const fs::path ckpt_path =
        ckpt_arg.empty() ? fs::path(cfg.out_dir) / "checkpoint.txt" : fs::path(ckpt_arg);
    Checkpoint ckpt = load_checkpoint(ckpt_path.string());
    if (ckpt.config_hash != cfg.raw.hash()) {
        throw CliError(kExitValidation, "evaluate: checkpoint hash " + ckpt.config_hash +
                                            " does not match config hash " + cfg.raw.hash());
    }
    TaskPool test_pool = obtain_pool(cfg, PoolRole::MetaTest, cfg.l_test);
    validate_pool(test_pool);
    const EvalSummary s =
        evaluate_posterior(ckpt.posterior, test_pool.tasks, cfg.model, cfg.budget,
                           cfg.guarantee_mode(), cfg.train.base_alpha, cfg.eval_samples, cfg.seed);
    write_file(fs::path(cfg.out_dir) / "eval.txt", eval_summary_to_text(s, cfg.raw.hash()));
    char buf[160];
    std::snprintf(buf, sizeof buf, "meta-test loss %.4f +/- %.4f, accuracy %.4f +/- %.4f (%zu tasks)\n",
                  s.loss_mean, s.loss_std, s.accuracy_mean, s.accuracy_std, s.task_count);
    std::cout << buf;
    return kExitOk;
}

int cmd_replay(const std::string& config_path, const Overrides& ov) {
    const ExperimentConfig cfg = load_with_overrides(config_path, ov);
    const fs::path out(cfg.out_dir);
    for (const char* f : {"checkpoint.txt", "report.txt", "train.log"}) {
        if (!fs::exists(out / f)) {
            throw CliError(kExitIo, (out / f).string() + ": missing; run train and certify first");
        }
    }
    const std::string ref_ckpt = read_file(out / "checkpoint.txt");
    const std::string ref_report = read_file(out / "report.txt");
    const std::string ref_log = read_file(out / "train.log");

    Overrides replay_ov = ov;
    replay_ov.out = (out / "replay").string();
    int rc = cmd_train(config_path, replay_ov, false);
    if (rc != kExitOk) return rc;
    rc = cmd_certify(config_path, replay_ov, "");
    if (rc != kExitOk) return rc;

    const bool same = read_file(out / "replay" / "checkpoint.txt") == ref_ckpt &&
                      read_file(out / "replay" / "report.txt") == ref_report &&
                      read_file(out / "replay" / "train.log") == ref_log;
    if (!same) {
        std::cerr << "replay: outputs differ from the recorded run\n";
        return 1;
    }
    std::cout << "replay: bitwise identical (checkpoint, train.log, report)\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PAC-BUS meta-learning with certified generalization bounds"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path;
    Overrides ov;
    bool resume = false;
    std::uint64_t seed_val = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config file")->required();
        sub->add_option("--seed", seed_val, "override experiment.seed")
            ->each([&](const std::string&) { ov.seed = seed_val; });
        sub->add_option("--out", ov.out, "override experiment.out");
        sub->add_option("--mode", ov.mode, "override meta.mode");
    };

    CLI::App* gen = app.add_subcommand("gen-tasks", "generate task pools and write them");
    add_common(gen);
    CLI::App* train = app.add_subcommand("train", "run prior + meta training, write checkpoint");
    add_common(train);
    train->add_flag("--resume", resume, "continue from the existing checkpoint");
    CLI::App* cert = app.add_subcommand("certify", "compute the generalization certificate");
    add_common(cert);
    cert->add_option("--checkpoint", checkpoint_path, "checkpoint file (default <out>/checkpoint.txt)");
    CLI::App* eval = app.add_subcommand("evaluate", "meta-test loss and accuracy");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file (default <out>/checkpoint.txt)");
    CLI::App* replay = app.add_subcommand("replay", "re-run train+certify and compare bitwise");
    add_common(replay);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_tasks(config_path, ov);
        if (train->parsed()) return cmd_train(config_path, ov, resume);
        if (cert->parsed()) return cmd_certify(config_path, ov, checkpoint_path);
        if (eval->parsed()) return cmd_evaluate(config_path, ov, checkpoint_path);
        if (replay->parsed()) return cmd_replay(config_path, ov);
    } catch (const CliError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.code;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::runtime_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitIo;
    }
    return kExitOk;
}
