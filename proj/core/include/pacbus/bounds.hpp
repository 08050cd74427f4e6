#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "pacbus/baselearn.hpp"
#include "pacbus/core.hpp"
#include "pacbus/model.hpp"
#include "pacbus/tasks.hpp"

namespace pacbus {

/// PAC-Bayes regularizer sqrt((kl + ln(2 sqrt(l)/delta)) / (4 l)); requires
/// l >= 8 (precondition of the tightened bound).
double pac_bayes_regularizer(double kl, std::size_t l, double delta);

/// Binary KL divergence kl(p||q) with the 0 ln 0 = 0 convention.
double binary_kl(double p, double q);

/// sup{ q in [0,1] : kl(p||q) <= c } via bisection on [p, 1], absolute
/// tolerance 1e-9, rounded up so a certificate never understates the bound.
double kl_inverse(double p, double c);

/// empirical + pac_bayes_regularizer(kl, l, delta) + stability term.
double assemble_bound(double empirical, double kl, std::size_t l, double delta,
                      double stability_term);

/// Full certificate decomposition. The sum invariant
/// total = empirical + regularizer + stability holds exactly.
struct BoundReport {
    double empirical_term = 0.0;        // mean certified per-task loss
    double kl_value = 0.0;              // KL(psi || psi0)
    double pac_bayes_term = 0.0;        // R_bayes
    double stability_term = 0.0;        // m beta / (m + n)
    double total_bound = 0.0;
    std::size_t task_count = 0;         // l
    std::size_t sample_count = 0;       // N
    double delta = 0.0;
    double delta_prime = 0.0;
    std::vector<double> per_task_certified;
    bool guarantee_valid = false;
    std::string flags;                  // "guarantee-valid" or "heuristic: <reason>"
    std::string notes;                  // interpretation notes carried into reports
};

struct CertifyOptions {
    std::size_t sample_count = 1;  // N
    double delta = 0.005;
    double delta_prime = 0.005;
    /// Default: one shared theta draw set and a single delta' across all
    /// tasks. The conservative mode splits delta'/l per task instead.
    bool union_bound_per_task = false;
    /// Set when the trained checkpoint came from a mode without the bounded-
    /// loss projection; the report is then stamped heuristic.
    std::string heuristic_reason;
};

/// Sample-convergence certificate: draws N parameter vectors from psi (one
/// shared draw set), projects each, adapts on every task's train split,
/// evaluates the mean clamped scaled loss over S_ev = S union S_va, inverts
/// the per-task binary-KL sample-convergence bound, and assembles the final
/// certificate with the PAC-Bayes regularizer (KL of the non-projected
/// Gaussians, a deliberate loosening) and the stability term.
BoundReport certify(const PosteriorParams& psi, const PosteriorParams& psi0,
                    const std::vector<TaskDataset>& tasks, const ModelSpec& spec,
                    const StabilityBudget& budget, const CertifyOptions& options,
                    const RngStream& stream);

/// Machine-readable structured text (key per line, %.17g floats; round-trips
/// exactly) and the human-readable table.
std::string report_to_text(const BoundReport& report, const std::string& config_hash);
BoundReport report_from_text(const std::string& text);
std::string report_to_human(const BoundReport& report);

}  // namespace pacbus
