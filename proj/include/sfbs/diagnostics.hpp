#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfbs/spaces.hpp"

namespace sfbs {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Scalars recorded for iterate x_n. Step quantities (grad_error, perturbation_norm,
/// relax_surrogate, fejer_allowance) describe the step x_n -> x_{n+1} and are NaN on
/// the final record. Per-reference vectors are indexed like RunTrace::z_refs.
struct TraceRecord {
    Index n = 0;
    double lambda = kNaN;
    double gamma = kNaN;
    double residual = kNaN;
    double grad_error = kNaN;         ///< ||u_n - B x_n||
    double perturbation_norm = kNaN;  ///< ||a_n||
    double objective = kNaN;
    double relax_surrogate = kNaN;    ///< lambda_n (1 - lambda_n) ||t_n - x_n||^2
    std::vector<double> dist;         ///< ||x_n - z||
    std::vector<double> s1;           ///< lambda_n ||B x_n - B z||^2
    std::vector<double> s2;           ///< lambda_n ||x_n - g B x_n - J(x_n - g B x_n) + g B z||^2
    std::vector<double> allowance;    ///< pathwise bound on ||x_{n+1} - z|| - ||x_n - z||
};

struct Snapshot {
    Index n = 0;
    VectorXd x;
};

enum class Termination { max_iters, residual_tol, diverged };
std::string to_string(Termination t);
Termination termination_from_string(const std::string& s);

struct RunTrace {
    std::string label;
    std::uint64_t seed = 0;
    std::string config_digest;
    /// "euclidean", or "V" for primal-dual runs measured in the product-space metric.
    std::string norm = "euclidean";
    std::vector<VectorXd> z_refs;
    std::vector<TraceRecord> records;
    std::vector<Snapshot> snapshots;
    Termination termination = Termination::max_iters;
    /// Certificates, verdicts and anything else that goes to the JSON sidecar.
    nlohmann::json metadata = nlohmann::json::object();

    bool empty() const noexcept { return records.empty(); }
    const TraceRecord& last() const;
    /// Index of a reference point in z_refs (bitwise match).
    std::size_t reference_index(const VectorXd& z) const;
    /// Named scalar column, e.g. "residual", "dist_z0".
    std::vector<double> column(const std::string& name) const;
    std::vector<std::string> column_names() const;
};

struct FejerReport {
    double max_step_increase = 0.0;
    double cumulative_increase = 0.0;
    double budget = 0.0;
    double tolerance = 0.0;
    /// First n whose increase exceeds budget + tolerance on its own; -1 when none.
    Index first_excess = -1;
    bool passed = true;

    nlohmann::json to_json() const;
};

/// Quasi-Fejer audit: distances may increase only within `budget` (summed) plus `tolerance`.
FejerReport fejer_monitor(std::span<const double> distances, double budget, double tolerance = 0.0);
FejerReport fejer_monitor(const RunTrace& trace, const VectorXd& z_ref, double budget, double tolerance = 0.0);

/// The trace's own per-step allowance for z_ref summed over all steps:
/// sum lambda_n (gamma_n ||u_n - B x_n|| + ||a_n|| + drift terms).
double pathwise_budget(const RunTrace& trace, const VectorXd& z_ref);

struct SeriesSummary {
    double total = 0.0;
    double tail = 0.0;
    double tail_fraction = kNaN;
    bool summable = false;
};

struct SummabilityReport {
    bool applicable = false;
    std::string note;
    Index N = 0;
    SeriesSummary s1;
    SeriesSummary s2;

    bool passed() const noexcept { return applicable && s1.summable && s2.summable; }
    nlohmann::json to_json() const;
};

/// Summary of an arbitrary nonnegative series: totals, sum over n > N/2, tail fraction <= 0.1.
SeriesSummary summarize_series(std::span<const double> terms, double threshold = 0.1);

/// Partial sums of lambda_n ||B x_n - B z||^2 and lambda_n ||x_n - g B x_n - J(.) + g B z||^2,
/// left to right; tail = sum over n > N/2.
SummabilityReport summability_report(const RunTrace& trace, const VectorXd& z_ref, double threshold = 0.1);

/// Least-squares slope of log(values) against log(n) over entries with n >= n_min and value > 0.
double loglog_slope(std::span<const double> n, std::span<const double> values, double n_min = 1.0);

/// Writes `path` (CSV, header comment "# sfbs-trace v1") and a JSON sidecar next to it
/// (same stem, extension .json).
void export_trace(const RunTrace& trace, const std::filesystem::path& path);
RunTrace import_trace(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& csv_path);

/// Renders the CSV body exactly as export_trace writes it.
std::string trace_csv(const RunTrace& trace);

}  // namespace sfbs
