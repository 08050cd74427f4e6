#include "pacbus/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "pacbus/core.hpp"

namespace pacbus {

namespace {

constexpr std::uint64_t kStreamPrior = 101;
constexpr std::uint64_t kStreamMetaTrain = 202;
constexpr std::uint64_t kStreamMetaTest = 303;

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i) {
        std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.below(i))]);
    }
    return idx;
}

[[noreturn]] void parse_fail(const std::string& origin, std::size_t line, const std::string& what) {
    throw std::runtime_error(origin + ":" + std::to_string(line) + ": " + what);
}

ClassStore parse_store_text(const std::string& text, const std::string& origin, bool unit_norm);

}  // namespace

std::string pool_role_name(PoolRole role) {
    switch (role) {
        case PoolRole::Prior: return "prior";
        case PoolRole::MetaTrain: return "meta-train";
        case PoolRole::MetaTest: return "meta-test";
    }
    return "meta-train";
}

PoolRole pool_role_from_name(const std::string& name) {
    if (name == "prior") return PoolRole::Prior;
    if (name == "meta-train") return PoolRole::MetaTrain;
    if (name == "meta-test") return PoolRole::MetaTest;
    throw std::runtime_error("unknown pool role '" + name + "'");
}

RngStream pool_stream(std::uint64_t seed, PoolRole role) {
    RngStream s;
    s.seed = seed;
    switch (role) {
        case PoolRole::Prior: s.stream = kStreamPrior; break;
        case PoolRole::MetaTrain: s.stream = kStreamMetaTrain; break;
        case PoolRole::MetaTest: s.stream = kStreamMetaTest; break;
    }
    return s;
}

void validate_pool(const TaskPool& pool) {
    const double bound = pool.feature_radius * (1.0 + 1e-9) + 1e-12;
    for (const auto& t : pool.tasks) {
        for (const auto* split : {&t.train, &t.validation}) {
            for (const auto& s : *split) {
                if (s.features.size() != pool.feature_dim) {
                    throw std::runtime_error("pool sample dimension mismatch in task " +
                                             std::to_string(t.task_id));
                }
                if (s.label >= pool.label_count) {
                    throw std::runtime_error("pool label out of range in task " + std::to_string(t.task_id));
                }
                double nn = 0.0;
                for (double x : s.features) {
                    if (!std::isfinite(x)) {
                        throw std::runtime_error("non-finite feature in task " + std::to_string(t.task_id));
                    }
                    nn += x * x;
                }
                if (std::sqrt(nn) > bound) {
                    throw std::runtime_error("feature norm exceeds declared radius in task " +
                                             std::to_string(t.task_id));
                }
            }
        }
    }
}

TaskPool gen_circle_tasks(std::size_t count, std::size_t m, std::size_t n, PoolRole role,
                          std::uint64_t seed) {
    if (count < 1) throw std::invalid_argument("gen_circle_tasks: count must be >= 1");
    if (m < 1) throw std::invalid_argument("gen_circle_tasks: m must be >= 1");
    TaskPool pool;
    pool.role = role;
    pool.generator = "circle";
    pool.seed = seed;
    pool.feature_dim = 2;
    pool.label_count = 2;
    pool.feature_radius = 1.0;
    pool.note = role == PoolRole::Prior ? "norm(c_t) in [0.1,0.5]" : "norm(c_t) in [0.1,0.4]";
    const double c_hi = role == PoolRole::Prior ? 0.5 : 0.4;
    const RngStream base = pool_stream(seed, role);
    pool.tasks.reserve(count);
    for (std::size_t t = 0; t < count; ++t) {
        Rng rng(base.child(t));
        TaskDataset task;
        task.task_id = t;
        // Center in the y >= 0 semi-ball: uniform angle in [0, pi], uniform norm.
        const double cn = rng.uniform(0.1, c_hi);
        const double ca = rng.uniform(0.0, 3.14159265358979323846);
        task.meta_center = {cn * std::cos(ca), cn * std::sin(ca)};
        task.meta_radius = rng.uniform(0.1, 1.0 - cn);
        auto draw = [&](std::vector<Sample>& out, std::size_t cnt) {
            out.reserve(cnt);
            for (std::size_t i = 0; i < cnt; ++i) {
                const double r = std::sqrt(rng.uniform01());
                const double a = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
                Sample s;
                s.features = {r * std::cos(a), r * std::sin(a)};
                const double dx = s.features[0] - task.meta_center[0];
                const double dy = s.features[1] - task.meta_center[1];
                s.label = (dx * dx + dy * dy <= task.meta_radius * task.meta_radius) ? 1 : 0;
                out.push_back(std::move(s));
            }
        };
        draw(task.train, m);
        draw(task.validation, n);
        pool.tasks.push_back(std::move(task));
    }
    return pool;
}

namespace {

ClassStore parse_store_text(const std::string& text, const std::string& origin, bool unit_norm) {
    ClassStore store;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;

    auto next_line = [&]() -> bool {
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            // skip blank lines
            if (line.find_first_not_of(" \t") != std::string::npos) return true;
        }
        return false;
    };

    if (!next_line()) parse_fail(origin, lineno, "empty file, expected header 'd k classCount'");
    std::size_t class_count = 0;
    {
        std::istringstream hs(line);
        long long d = 0, k = 0, c = 0;
        if (!(hs >> d >> k >> c) || d <= 0 || k < 0 || c < 0) {
            parse_fail(origin, lineno, "malformed header, expected 'd k classCount'");
        }
        std::string extra;
        if (hs >> extra) parse_fail(origin, lineno, "trailing tokens after header");
        store.feature_dim = static_cast<std::size_t>(d);
        store.task_classes = static_cast<std::size_t>(k);
        class_count = static_cast<std::size_t>(c);
    }
    if (class_count == 0) parse_fail(origin, lineno, "empty class list");

    for (std::size_t ci = 0; ci < class_count; ++ci) {
        if (!next_line()) parse_fail(origin, lineno, "expected 'class <name> <sampleCount>'");
        std::istringstream cs(line);
        std::string tag, name;
        long long cnt = 0;
        if (!(cs >> tag >> name >> cnt) || tag != "class" || cnt < 0) {
            parse_fail(origin, lineno, "malformed class header '" + line + "'");
        }
        ClassStore::Class cls;
        cls.name = name;
        cls.samples.reserve(static_cast<std::size_t>(cnt));
        for (long long si = 0; si < cnt; ++si) {
            if (!next_line()) parse_fail(origin, lineno, "unexpected end of file inside class block");
            // strtod-based parsing so non-finite tokens ("nan", "inf") are
            // seen and rejected rather than failing the stream silently.
            std::istringstream rs(line);
            std::vector<double> row;
            row.reserve(store.feature_dim);
            std::string tok;
            while (rs >> tok) {
                char* end = nullptr;
                const double v = std::strtod(tok.c_str(), &end);
                if (end != tok.c_str() + tok.size()) {
                    parse_fail(origin, lineno, "malformed number '" + tok + "'");
                }
                row.push_back(v);
            }
            if (row.size() != store.feature_dim) {
                parse_fail(origin, lineno, "row has " + std::to_string(row.size()) + " values, expected " +
                                               std::to_string(store.feature_dim));
            }
            for (double x : row) {
                if (!std::isfinite(x)) parse_fail(origin, lineno, "non-finite entry");
            }
            if (unit_norm) {
                double nn = l2_norm(row);
                if (nn == 0.0) parse_fail(origin, lineno, "zero vector cannot be normalized");
                if (std::abs(nn - 1.0) > 1e-6) {
                    store.renormalized = true;
                    for (double& x : row) x /= nn;
                }
            }
            cls.samples.push_back(std::move(row));
        }
        store.classes.push_back(std::move(cls));
    }
    return store;
}

}  // namespace

ClassStore parse_embedded_dataset(const std::string& text, const std::string& origin) {
    return parse_store_text(text, origin, true);
}

ClassStore load_embedded_dataset(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error(path + ": cannot open");
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_embedded_dataset(buf.str(), path);
}

std::string store_to_text(const ClassStore& store) {
    std::ostringstream out;
    out << store.feature_dim << ' ' << store.task_classes << ' ' << store.classes.size() << '\n';
    for (const auto& c : store.classes) {
        out << "class " << c.name << ' ' << c.samples.size() << '\n';
        for (const auto& row : c.samples) {
            for (std::size_t i = 0; i < row.size(); ++i) {
                if (i) out << ' ';
                out << fmt_double(row[i]);
            }
            out << '\n';
        }
    }
    return out.str();
}

void write_store(const ClassStore& store, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error(path + ": cannot open for writing");
    f << store_to_text(store);
    if (!f) throw std::runtime_error(path + ": write failed");
}

TaskPool make_kway_tasks(const ClassStore& store, std::size_t k, std::size_t m_per_class,
                         std::size_t n_per_class, std::size_t count, PoolRole role,
                         std::uint64_t seed) {
    if (k < 2) throw std::invalid_argument("make_kway_tasks: k must be >= 2");
    if (store.classes.size() < k) {
        throw std::invalid_argument("make_kway_tasks: store has " + std::to_string(store.classes.size()) +
                                    " classes, need at least " + std::to_string(k));
    }
    const std::size_t need = m_per_class + n_per_class;
    for (const auto& c : store.classes) {
        if (c.samples.size() < need) {
            throw std::invalid_argument("make_kway_tasks: class '" + c.name + "' has " +
                                        std::to_string(c.samples.size()) + " samples, need " +
                                        std::to_string(need));
        }
    }
    TaskPool pool;
    pool.role = role;
    pool.generator = "kway-store";
    pool.seed = seed;
    pool.feature_dim = store.feature_dim;
    pool.label_count = k;
    pool.feature_radius = 1.0;
    const RngStream base = pool_stream(seed, role);
    pool.tasks.reserve(count);
    for (std::size_t t = 0; t < count; ++t) {
        Rng rng(base.child(t));
        TaskDataset task;
        task.task_id = t;
        // k distinct classes, then a random label assignment over them.
        const auto class_order = shuffled_indices(store.classes.size(), rng);
        for (std::size_t label = 0; label < k; ++label) {
            const auto& cls = store.classes[class_order[label]];
            const auto sample_order = shuffled_indices(cls.samples.size(), rng);
            for (std::size_t i = 0; i < m_per_class; ++i) {
                task.train.push_back({cls.samples[sample_order[i]], label});
            }
            for (std::size_t i = 0; i < n_per_class; ++i) {
                task.validation.push_back({cls.samples[sample_order[m_per_class + i]], label});
            }
        }
        pool.tasks.push_back(std::move(task));
    }
    return pool;
}

ClassStore gen_cluster_store(std::size_t d, std::size_t classes, double spread,
                             std::size_t samples_per_class, std::uint64_t seed) {
    if (classes < 2) throw std::invalid_argument("gen_cluster_store: classes must be >= 2");
    if (!(spread > 0.0)) throw std::invalid_argument("gen_cluster_store: spread must be > 0");
    ClassStore store;
    store.feature_dim = d;
    store.task_classes = classes;
    RngStream base{seed, 404, 0};
    for (std::size_t c = 0; c < classes; ++c) {
        Rng rng(base.child(c));
        std::vector<double> center(d);
        for (double& x : center) x = rng.normal();
        const double cn = l2_norm(center);
        for (double& x : center) x /= cn;
        ClassStore::Class cls;
        cls.name = "c" + std::to_string(c);
        for (std::size_t s = 0; s < samples_per_class; ++s) {
            std::vector<double> v(d);
            for (std::size_t i = 0; i < d; ++i) v[i] = center[i] + spread * rng.normal();
            const double n = l2_norm(v);
            for (double& x : v) x /= n;
            cls.samples.push_back(std::move(v));
        }
        store.classes.push_back(std::move(cls));
    }
    return store;
}

TaskPool gen_cluster_tasks(std::size_t d, std::size_t classes, double spread, std::size_t k,
                           std::size_t count, std::size_t m_per_class, std::size_t n_per_class,
                           PoolRole role, std::uint64_t seed) {
    const std::size_t per_class = std::max<std::size_t>(2 * (m_per_class + n_per_class), 32);
    const ClassStore store = gen_cluster_store(d, classes, spread, per_class, seed);
    TaskPool pool = make_kway_tasks(store, k, m_per_class, n_per_class, count, role, seed);
    pool.generator = "cluster";
    return pool;
}

TaskPool make_nme_pool(const ClassStore& store, std::size_t group_count, bool permute_at_test,
                       std::size_t m_per_group, std::size_t n_per_group, std::size_t count,
                       PoolRole role, std::uint64_t seed) {
    if (group_count < 2) throw std::invalid_argument("make_nme_pool: group count must be >= 2");
    if (store.classes.size() < group_count) {
        throw std::invalid_argument("make_nme_pool: not enough classes to fill " +
                                    std::to_string(group_count) + " groups");
    }
    // Fixed random partition of classes into equal-sized groups, shared by
    // every pool built from (seed, store); this is what makes the meta-train
    // assignment memorizable.
    const std::size_t per_group = store.classes.size() / group_count;
    Rng part_rng(RngStream{seed, 505, 0});
    const auto class_order = shuffled_indices(per_group * group_count, part_rng);

    TaskPool pool;
    pool.role = role;
    pool.generator = "nme";
    pool.seed = seed;
    pool.feature_dim = store.feature_dim;
    pool.label_count = group_count;
    pool.feature_radius = 1.0;
    pool.note = permute_at_test && role == PoolRole::MetaTest ? "labels permuted per task"
                                                              : "fixed group labels";
    const bool permute = permute_at_test && role == PoolRole::MetaTest;
    const RngStream base = pool_stream(seed, role).child(9100 + (permute ? 1 : 0));
    pool.tasks.reserve(count);
    for (std::size_t t = 0; t < count; ++t) {
        Rng rng(base.child(t));
        TaskDataset task;
        task.task_id = t;
        std::vector<std::size_t> assignment(group_count);
        std::iota(assignment.begin(), assignment.end(), 0);
        if (permute) assignment = shuffled_indices(group_count, rng);
        for (std::size_t g = 0; g < group_count; ++g) {
            const std::size_t label = assignment[g];
            auto draw = [&](std::vector<Sample>& out, std::size_t cnt) {
                for (std::size_t i = 0; i < cnt; ++i) {
                    const auto& cls =
                        store.classes[class_order[g * per_group + rng.below(per_group)]];
                    const auto& row = cls.samples[rng.below(cls.samples.size())];
                    out.push_back({row, label});
                }
            };
            draw(task.train, m_per_group);
            draw(task.validation, n_per_group);
        }
        pool.tasks.push_back(std::move(task));
    }
    return pool;
}

void save_pool(const TaskPool& pool, const std::string& store_path, const std::string& manifest_path) {
    // Samples as store blocks named t<id>_<split>; labels ride in the manifest
    // row order (store rows are features only).
    ClassStore blocks;
    blocks.feature_dim = pool.feature_dim;
    blocks.task_classes = pool.label_count;
    std::ostringstream man;
    man << "pacbus-pool v1\n";
    man << "role " << pool_role_name(pool.role) << '\n';
    man << "generator " << pool.generator << '\n';
    man << "seed " << pool.seed << '\n';
    man << "d " << pool.feature_dim << " k " << pool.label_count << " count " << pool.tasks.size()
        << '\n';
    man << "rz " << fmt_double(pool.feature_radius) << '\n';
    if (!pool.note.empty()) man << "note " << pool.note << '\n';
    for (const auto& t : pool.tasks) {
        man << "task " << t.task_id << " m " << t.train.size() << " n " << t.validation.size();
        if (!t.meta_center.empty()) {
            man << " meta";
            for (double c : t.meta_center) man << ' ' << fmt_double(c);
            man << ' ' << fmt_double(t.meta_radius);
        }
        man << '\n';
        man << "labels";
        for (const auto& s : t.train) man << ' ' << s.label;
        for (const auto& s : t.validation) man << ' ' << s.label;
        man << '\n';
        ClassStore::Class tr, va;
        tr.name = "t" + std::to_string(t.task_id) + "_train";
        va.name = "t" + std::to_string(t.task_id) + "_val";
        for (const auto& s : t.train) tr.samples.push_back(s.features);
        for (const auto& s : t.validation) va.samples.push_back(s.features);
        blocks.classes.push_back(std::move(tr));
        blocks.classes.push_back(std::move(va));
    }
    {
        std::ofstream f(store_path);
        if (!f) throw std::runtime_error(store_path + ": cannot open for writing");
        f << store_to_text(blocks);
        if (!f) throw std::runtime_error(store_path + ": write failed");
    }
    {
        std::ofstream f(manifest_path);
        if (!f) throw std::runtime_error(manifest_path + ": cannot open for writing");
        f << man.str();
        if (!f) throw std::runtime_error(manifest_path + ": write failed");
    }
}

TaskPool load_pool(const std::string& store_path, const std::string& manifest_path) {
    std::ifstream mf(manifest_path);
    if (!mf) throw std::runtime_error(manifest_path + ": cannot open");
    // The block store is parsed with the norm validation bypassed: pool
    // features live in a ball, not on the unit sphere.
    std::ifstream sf(store_path);
    if (!sf) throw std::runtime_error(store_path + ": cannot open");
    std::ostringstream sbuf;
    sbuf << sf.rdbuf();

    TaskPool pool;
    std::string line;
    std::size_t lineno = 0;
    std::size_t expected = 0;
    auto fail = [&](const std::string& what) { parse_fail(manifest_path, lineno, what); };

    if (!std::getline(mf, line)) fail("empty manifest");
    ++lineno;
    if (line != "pacbus-pool v1") fail("bad magic '" + line + "'");
    while (std::getline(mf, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "role") {
            std::string r;
            ls >> r;
            pool.role = pool_role_from_name(r);
        } else if (key == "generator") {
            ls >> pool.generator;
        } else if (key == "seed") {
            ls >> pool.seed;
        } else if (key == "d") {
            std::string kk, ck;
            ls >> pool.feature_dim >> kk >> pool.label_count >> ck >> expected;
            if (kk != "k" || ck != "count") fail("malformed dimension line");
        } else if (key == "rz") {
            ls >> pool.feature_radius;
        } else if (key == "note") {
            std::getline(ls, pool.note);
            if (!pool.note.empty() && pool.note.front() == ' ') pool.note.erase(0, 1);
        } else if (key == "task") {
            TaskDataset t;
            std::size_t m = 0, n = 0;
            std::string mk, nk;
            ls >> t.task_id >> mk >> m >> nk >> n;
            if (mk != "m" || nk != "n") fail("malformed task line");
            std::string meta;
            if (ls >> meta) {
                if (meta != "meta") fail("unexpected token '" + meta + "'");
                std::vector<double> nums;
                double v = 0.0;
                while (ls >> v) nums.push_back(v);
                if (nums.size() < 2) fail("meta needs center and radius");
                t.meta_radius = nums.back();
                nums.pop_back();
                t.meta_center = std::move(nums);
            }
            if (!std::getline(mf, line)) fail("missing labels line");
            ++lineno;
            std::istringstream lab(line);
            std::string tag;
            lab >> tag;
            if (tag != "labels") fail("expected labels line");
            t.train.resize(m);
            t.validation.resize(n);
            for (std::size_t i = 0; i < m + n; ++i) {
                long long l = -1;
                if (!(lab >> l) || l < 0) fail("bad label entry");
                (i < m ? t.train[i] : t.validation[i - m]).label = static_cast<std::size_t>(l);
            }
            pool.tasks.push_back(std::move(t));
        } else {
            fail("unknown manifest key '" + key + "'");
        }
    }
    if (pool.tasks.size() != expected) {
        throw std::runtime_error(manifest_path + ": manifest declares " + std::to_string(expected) +
                                 " tasks, found " + std::to_string(pool.tasks.size()));
    }

    // Pull the feature rows out of the block store by name.
    ClassStore blocks = parse_store_text(sbuf.str(), store_path, false);
    if (blocks.classes.size() != 2 * pool.tasks.size()) {
        throw std::runtime_error(store_path + ": expected " + std::to_string(2 * pool.tasks.size()) +
                                 " blocks, found " + std::to_string(blocks.classes.size()));
    }
    for (std::size_t i = 0; i < pool.tasks.size(); ++i) {
        auto& t = pool.tasks[i];
        const auto& tr = blocks.classes[2 * i];
        const auto& va = blocks.classes[2 * i + 1];
        if (tr.samples.size() != t.train.size() || va.samples.size() != t.validation.size()) {
            throw std::runtime_error(store_path + ": block size mismatch for task " +
                                     std::to_string(t.task_id));
        }
        for (std::size_t j = 0; j < tr.samples.size(); ++j) t.train[j].features = tr.samples[j];
        for (std::size_t j = 0; j < va.samples.size(); ++j) t.validation[j].features = va.samples[j];
    }
    validate_pool(pool);
    return pool;
}

}  // namespace pacbus
