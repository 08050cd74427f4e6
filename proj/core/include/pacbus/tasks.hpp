#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "pacbus/rng.hpp"

namespace pacbus {

struct Sample {
    std::vector<double> features;
    std::size_t label = 0;
};

/// One few-shot task: a train split S of m samples for adaptation and a
/// validation split S_va of n samples. Synthetic generators record their
/// concept parameters in the metadata fields.
struct TaskDataset {
    std::vector<Sample> train;       // S
    std::vector<Sample> validation;  // S_va
    std::size_t task_id = 0;
    std::vector<double> meta_center;  // c_t for circle tasks
    double meta_radius = 0.0;         // r_t for circle tasks

    std::size_t m() const { return train.size(); }
    std::size_t n() const { return validation.size(); }
};

enum class PoolRole { Prior, MetaTrain, MetaTest };

std::string pool_role_name(PoolRole role);
PoolRole pool_role_from_name(const std::string& name);

struct TaskPool {
    PoolRole role = PoolRole::MetaTrain;
    std::vector<TaskDataset> tasks;
    std::string generator;   // descriptor, e.g. "circle"
    std::uint64_t seed = 0;
    std::size_t feature_dim = 0;
    std::size_t label_count = 0;
    double feature_radius = 1.0;  // r_z bound the features satisfy
    std::string note;             // free-form generator metadata
};

/// Role-scoped stream ids; prior/meta-train/meta-test draw from disjoint
/// substreams so the prior stays independent of the meta-training data.
RngStream pool_stream(std::uint64_t seed, PoolRole role);

/// Asserts the declared feature-radius bound and label range on every sample.
void validate_pool(const TaskPool& pool);

/// Two-class tasks on the unit ball: points are uniform in B^2(0,1), labeled
/// positive (class 1) when inside B^2(c_t, r_t). ||c_t|| is uniform in
/// [0.1, 0.4] for meta-train/test and [0.1, 0.5] for prior tasks, direction
/// uniform in the y >= 0 half; r_t is uniform in [0.1, 1 - ||c_t||].
TaskPool gen_circle_tasks(std::size_t count, std::size_t m, std::size_t n, PoolRole role,
                          std::uint64_t seed);

/// Class-indexed store of embedded feature vectors (unit norm).
struct ClassStore {
    std::size_t feature_dim = 0;   // d
    std::size_t task_classes = 0;  // k declared in the header
    struct Class {
        std::string name;
        std::vector<std::vector<double>> samples;
    };
    std::vector<Class> classes;
    bool renormalized = false;  // set when any norm was off by more than 1e-6
};

/// Parses the embedded-dataset text format:
///   header "d k classCount", then per-class blocks
///   "class <name> <sampleCount>" followed by whitespace-separated rows.
/// Vector norms are validated to be within 1e-6 of 1 and renormalized (with
/// the store flagged) otherwise. Malformed lines and non-finite entries
/// throw std::runtime_error naming the line.
ClassStore load_embedded_dataset(const std::string& path);
ClassStore parse_embedded_dataset(const std::string& text, const std::string& origin);

/// Canonical serialization of a store; load(write(load(x))) is byte-identical.
std::string store_to_text(const ClassStore& store);
void write_store(const ClassStore& store, const std::string& path);

/// k-way tasks from a store: per task, k distinct classes with randomized
/// task-local labels, m_per_class train and n_per_class validation samples
/// drawn disjointly per class.
TaskPool make_kway_tasks(const ClassStore& store, std::size_t k, std::size_t m_per_class,
                         std::size_t n_per_class, std::size_t count, PoolRole role,
                         std::uint64_t seed);

/// Synthetic surrogate for embedded-text data: unit-norm cluster centers,
/// samples = renormalized center + spread * gaussian; delegates task assembly
/// to make_kway_tasks.
ClassStore gen_cluster_store(std::size_t d, std::size_t classes, double spread,
                             std::size_t samples_per_class, std::uint64_t seed);
TaskPool gen_cluster_tasks(std::size_t d, std::size_t classes, double spread, std::size_t k,
                           std::size_t count, std::size_t m_per_class, std::size_t n_per_class,
                           PoolRole role, std::uint64_t seed);

/// Non-mutually-exclusive pools: classes are partitioned into group_count
/// fixed groups; meta-train tasks label group g with the fixed assignment g,
/// meta-test tasks permute the group->label assignment per task (when
/// permute_at_test is set). Each task draws m_per_group train and n_per_group
/// validation samples per group.
TaskPool make_nme_pool(const ClassStore& store, std::size_t group_count, bool permute_at_test,
                       std::size_t m_per_group, std::size_t n_per_group, std::size_t count,
                       PoolRole role, std::uint64_t seed);

/// Pool persistence: samples go into a store-format block file, the split
/// structure into a manifest; save/load round-trips bit-exactly.
void save_pool(const TaskPool& pool, const std::string& store_path, const std::string& manifest_path);
TaskPool load_pool(const std::string& store_path, const std::string& manifest_path);

}  // namespace pacbus
