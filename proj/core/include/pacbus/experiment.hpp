#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pacbus/baselearn.hpp"
#include "pacbus/bounds.hpp"
#include "pacbus/meta.hpp"
#include "pacbus/model.hpp"
#include "pacbus/tasks.hpp"

namespace pacbus {

/// Flat sectioned key-value config text: `[section]` headers, `key = value`
/// lines, `#` comments. Keys are addressed as "section.key".
class ConfigMap {
  public:
    static ConfigMap parse_file(const std::string& path);
    static ConfigMap parse_text(const std::string& text, const std::string& origin);

    bool has(const std::string& key) const;
    std::string get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key) const;
    double get_double_or(const std::string& key, double fallback) const;
    long long get_int(const std::string& key) const;
    long long get_int_or(const std::string& key, long long fallback) const;
    bool get_bool_or(const std::string& key, bool fallback) const;
    void set(const std::string& key, const std::string& value);

    /// Canonical "key = value" dump (sorted); the config hash is FNV-1a over it.
    std::string canonical_text() const;
    std::string hash() const;

    const std::map<std::string, std::string>& entries() const { return entries_; }

  private:
    std::map<std::string, std::string> entries_;
};

enum class TrainMode { PacBus, PacBusMinibatch, PacBusH, MamlLike };

std::string train_mode_name(TrainMode mode);
TrainMode train_mode_from_name(const std::string& name);

/// Everything a run needs, resolved and validated up front: generator and
/// model descriptors, base-learner budget, training config, certificate
/// parameters, output directory and seed. Validation rejects every
/// downstream-module precondition violation before any compute happens.
struct ExperimentConfig {
    ConfigMap raw;
    std::string name = "run";
    std::uint64_t seed = 0;
    std::string out_dir;

    // tasks
    std::string generator = "circle";  // circle | cluster | nme-cluster | store
    std::size_t l_prior = 0, l_train = 0, l_test = 0;
    std::size_t m = 10, n = 0;
    std::size_t cluster_dim = 16, cluster_classes = 40;
    double cluster_spread = 0.1;
    std::size_t kway = 4;
    std::size_t nme_groups = 10;
    bool nme_permute_at_test = true;
    std::string store_path;  // generator = store

    ModelSpec model;
    StabilityBudget budget;
    TrainMode mode = TrainMode::PacBus;
    TrainConfig train;
    CertifyOptions certify_options;
    std::size_t prior_iterations = 0;
    double prior_gamma = 1e-3;        // prior-training learning rate
    std::size_t prior_batch = 0;      // prior-training batch (0 = full)
    double prior_sigma0 = 0.01;
    std::size_t eval_samples = 8;

    bool guarantee_mode() const { return mode == TrainMode::PacBus || mode == TrainMode::PacBusMinibatch; }
};

ExperimentConfig resolve_config(const ConfigMap& map);
ExperimentConfig load_config(const std::string& path);

/// Checkpoint: resolved-config hash, prior and trained posterior, hexfloat
/// payload for bit-exact replay.
struct Checkpoint {
    std::string config_hash;
    std::string mode;
    PosteriorParams prior;
    PosteriorParams posterior;
    std::size_t iterations = 0;
};

std::string checkpoint_to_text(const Checkpoint& c);
Checkpoint checkpoint_from_text(const std::string& text);
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::string training_log_to_text(const std::vector<TrainRecord>& log);

struct EvalSummary {
    double loss_mean = 0.0;
    double loss_std = 0.0;
    double accuracy_mean = 0.0;
    double accuracy_std = 0.0;
    std::size_t task_count = 0;
    std::size_t samples_per_task = 0;
};

/// Post-adaptation clamped loss and accuracy over a test pool, Monte-Carlo
/// over `samples` posterior draws per task (zero-variance posteriors reduce
/// to deterministic evaluation of the mean).
EvalSummary evaluate_posterior(const PosteriorParams& psi, const std::vector<TaskDataset>& tasks,
                               const ModelSpec& spec, const StabilityBudget& budget, bool project,
                               double heuristic_alpha, std::size_t samples, std::uint64_t seed);

std::string eval_summary_to_text(const EvalSummary& s, const std::string& config_hash);

}  // namespace pacbus
