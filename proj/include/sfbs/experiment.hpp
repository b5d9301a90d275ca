#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfbs/config.hpp"
#include "sfbs/primal_dual.hpp"

namespace sfbs {

/// Exit statuses of the command line tool.
enum ExitStatus : int {
    kExitOk = 0,
    kExitNotConverged = 1,
    kExitCertificate = 2,
    kExitDivergence = 3,
    kExitConfig = 4,
};

struct FbSetup {
    FbProblem problem;
    GradientOracle oracle;
    PerturbationSource perturb = PerturbationSource::zero();
    std::optional<VaryingResolventFamily> family;
    VectorXd x0;
};

struct PdSetup {
    PdModel model;
    PdOracleBundle oracles;
    VectorXd x0;
    VectorXd v0;
    std::vector<VectorXd> references;
};

/// Everything a configuration describes, built and checked.
struct Experiment {
    std::string name;
    std::string digest;
    std::filesystem::path base_dir;
    nlohmann::json doc;

    std::optional<FbSetup> fb;
    std::optional<PdSetup> pd;
    std::optional<IterationSchedule> schedule;
    /// Cocoercivity constant of the (embedded) forward operator.
    double theta = 0.0;

    StoppingRule stop;
    std::vector<std::uint64_t> seeds;
    unsigned workers = 1;
    bool force = false;
    bool audit = true;
    bool cache_draws = true;
    Index certificate_horizon = 100000;

    std::filesystem::path output_dir;
    bool write_csv = true;
    bool write_json = true;

    bool is_pd() const noexcept { return pd.has_value(); }
    /// Exact oracles, no perturbations, fixed operators.
    bool deterministic() const;
    /// Initial point (joined (x, v) for primal-dual runs).
    VectorXd initial_point() const;
    std::vector<VectorXd> references() const;
};

/// Output directory: $SFBS_OUTPUT_ROOT/<directory> when the variable is set, else relative
/// to the configuration's directory.
std::filesystem::path output_directory(const ConfigDocument& cfg);

/// `with_references = false` skips problem.z_ref (used while producing that fixture).
Experiment build_experiment(const ConfigDocument& cfg, bool with_references = true);

CertificateReport certify_experiment(const Experiment& e);

struct SeedOutcome {
    std::uint64_t seed = 0;
    RunTrace trace;
    bool diverged = false;
    std::string message;
    /// Fejer and summability verdicts per reference, convergence flag.
    nlohmann::json verdicts;
    bool converged = false;
};

/// One seeded run with its verdicts. Divergence is reported in the outcome, not thrown.
SeedOutcome run_seed(const Experiment& e, std::uint64_t seed);

/// All seeds on a pool of e.workers threads; outcomes in seed-list order.
std::vector<SeedOutcome> run_sweep(const Experiment& e);

/// Fejer tolerance for a run started at x0: 1e-12 (1 + ||x0||).
double fejer_tolerance(const VectorXd& x0);

/// Verdicts for a finished trace: Fejer with the trace's own pathwise budget and
/// summability per reference, convergence against stop.residual_tol.
nlohmann::json trace_verdicts(const RunTrace& trace, const VectorXd& x0, const StoppingRule& stop, bool& converged);

struct Section52Params {
    double delta = 0.2;
    double kappa = 0.9;
    Index N = 400;
    std::uint64_t seed = 42;
    Index trials = 2000;
    double n_min = 1.0;
    double batch_c = 1.0;
    unsigned workers = 4;
};

Section52Params section52_params(const Experiment& e);

struct Section52Result {
    Section52Params params;
    std::vector<double> n;  ///< n + 1, the abscissa of the log-log fits
    std::vector<double> lambda;
    std::vector<double> batch;
    std::vector<double> bias_norm;
    std::vector<double> lambda_bias_sq;
    std::vector<double> variance;
    std::vector<double> variance_se;
    std::vector<double> sqrt_lambda_bias;
    double bias_slope = 0.0;
    double variance_slope = 0.0;
    SeriesSummary partial_sums;
    double bias_threshold = 0.0;
    double variance_threshold = 0.0;
    bool passed = false;

    std::string csv() const;
    nlohmann::json to_json() const;
};

/// Primal-dual run with the empirical quadratic oracle, exact dual gradients, m_n =
/// 1 + ceil(c n^(1 + delta)) and lambda_n = (n + 1)^(-kappa). At each n the conditional bias is
/// re-summed from the frozen ledger and the conditional variance is estimated by resampling
/// the fresh draws. Throws ConfigError when kappa is outside ]1 - delta, 1] and [0, 1].
Section52Result reproduce_section52(const Experiment& e, const Section52Params& p);

/// Long exact run from the initial point; returns the final point and writes nothing.
struct ReferenceResult {
    VectorXd z;
    Index iterations = 0;
    double residual = 0.0;
};
ReferenceResult compute_reference(const Experiment& e, Index iterations, double residual_tol);

/// Command line entry: `run`, `certify`, `reproduce-52`, `reference`, `export-schema`.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sfbs
