#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sfbs/diagnostics.hpp"
#include "sfbs/stochastic.hpp"

namespace sfbs {

/// Find x with 0 in A x + B x.
struct FbProblem {
    ResolventOperatord A;
    CocoerciveMapd B;
    /// Known solutions, used only for auditing.
    std::vector<VectorXd> z_ref;
    DemiregularityFlag demiregularity;
    /// Objective for reporting; when empty and A = df with B carrying a value, f + h is used.
    std::function<double(const VectorXd&)> objective;

    Index dim() const noexcept { return B.dim(); }
    /// objective, or f(x) + h(x) when available, else NaN.
    double objective_value(const VectorXd& x) const;
};

struct FbState {
    Index n = 0;
    VectorXd x;
    /// J(x_{n-1} - g u_{n-1}) + a_{n-1}; empty before the first step.
    VectorXd last_y;
};

/// Non-finite value or ||x|| beyond the divergence bound; carries the state and, from run(),
/// the trace recorded so far.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, FbState state)
        : Error(what), state_(std::make_shared<FbState>(std::move(state))) {}

    const FbState& state() const noexcept { return *state_; }
    const RunTrace* partial_trace() const noexcept { return trace_.get(); }
    void attach_trace(RunTrace t) { trace_ = std::make_shared<RunTrace>(std::move(t)); }

private:
    std::shared_ptr<FbState> state_;
    std::shared_ptr<RunTrace> trace_;
};

inline constexpr double kDivergenceBound = 1e12;

/// n -> A_n, with the drift bound ||J_{g A_n} x - J_{g A} x|| <= alpha_n ||x|| + beta_n
/// declared through the schedule's alpha and beta rules.
struct VaryingResolventFamily {
    std::function<ResolventOperatord(Index)> rule;

    ResolventOperatord at(Index n) const;
    /// A_n = A for every n.
    static VaryingResolventFamily constant(ResolventOperatord A);
};

/// Intermediate quantities of one step.
struct StepDetail {
    ScheduleValues sv;
    VectorXd u;
    VectorXd a;
    VectorXd t;  ///< J(x_n - g_n u_n)
};

/// x_{n+1} = x_n + lambda_n (J_{g_n A}(x_n - g_n u_n) + a_n - x_n); with lambda_n = 1 the
/// update is x_{n+1} = J_{g_n A}(x_n - g_n u_n) + a_n without the cancelling x_n terms.
FbState fb_step(const FbState& state, const FbProblem& prob, const GradientOracle& oracle,
                const PerturbationSource& perturb, const IterationSchedule& sched, SampleLedger& ledger,
                StepDetail* detail = nullptr);

/// fb_step with J_{g_n A_n} in place of J_{g_n A}.
FbState fb_step_varying(const FbState& state, const FbProblem& prob, const VaryingResolventFamily& family,
                        const GradientOracle& oracle, const PerturbationSource& perturb,
                        const IterationSchedule& sched, SampleLedger& ledger, StepDetail* detail = nullptr);

/// ||x - J_{gA}(x - g B x)|| with the exact B.
double residual(const FbProblem& prob, const VectorXd& x, double gamma);

/// Samples x ~ N(0, scale^2 I) for n = 0..n_max and tests
///   ||J_{g_n A_n} x - J_{g_n A} x|| <= alpha_n ||x|| + beta_n + 1e-9 (1 + ||x||).
PropertyReport check_drift(const VaryingResolventFamily& family, const ResolventOperatord& A,
                           const IterationSchedule& sched, Index n_max, Index dim, std::size_t samples_per_n,
                           std::uint64_t rng_seed, double scale = 2.0);

struct StoppingRule {
    Index max_iters = 1000;
    /// Stop once residual <= residual_tol; 0 disables.
    double residual_tol = 0.0;
    /// Store x_n every `thinning` iterations (the final state is always stored).
    Index thinning = 1;
};

struct RunOptions {
    const VaryingResolventFamily* family = nullptr;
    /// Record exact-field monitors (residual, ||u_n - B x_n||, s1/s2 sums).
    bool audit = true;
    /// Run even when the admissibility certificate fails.
    bool force = false;
    bool cache_draws = true;
    std::string label;
    std::string config_digest;
    Index certificate_horizon = 100000;
};

/// Certificate for a problem/oracle/perturbation/schedule combination (theta from B).
CertificateReport certify(const FbProblem& prob, const GradientOracle& oracle, const PerturbationSource& perturb,
                          const IterationSchedule& sched, bool varying, Index horizon = 100000);

/// Iterates from x0 until the stopping rule fires. Throws ConditionViolation naming the first
/// failed clause unless options.force; DivergenceError carries the partial trace.
RunTrace run(const FbProblem& prob, const GradientOracle& oracle, const PerturbationSource& perturb,
             const IterationSchedule& sched, const StoppingRule& stop, std::uint64_t seed, const VectorXd& x0,
             const RunOptions& options = {});

/// Same, with a caller-owned ledger (to inspect draws afterwards).
RunTrace run(const FbProblem& prob, const GradientOracle& oracle, const PerturbationSource& perturb,
             const IterationSchedule& sched, const StoppingRule& stop, SampleLedger& ledger, const VectorXd& x0,
             const RunOptions& options = {});

}  // namespace sfbs
