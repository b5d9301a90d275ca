#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Cholesky>

#include "sfbs/fb_engine.hpp"

namespace sfbs {

/// One dual block k of
///   minimize f(x) + sum_k (g_k box j_k)(L_k x) + h(x).
/// The smooth part of the dual is described by the gradient of j_k^* and nu_k, a Lipschitz
/// constant of the gradient of j_k^* o U_k^{1/2}.
struct DualBlock {
    ProxFunctiond g;
    LinearMapd L;
    SpdMetricd U;
    std::function<VectorXd(const VectorXd&)> j_star_grad;
    double nu = 0.0;
    /// rho when j_k = (1 / (2 rho)) ||.||^2; empty when there is no infimal convolution.
    std::optional<double> rho;

    /// j_k = (1/(2 rho)) ||.||^2: grad j_k^* = rho Id and nu_k = rho ||U_k||.
    static DualBlock quadratic_j(ProxFunctiond g, LinearMapd L, SpdMetricd U, double rho);
    /// g_k alone: grad j_k^* = 0 with an explicitly declared nu_k > 0.
    static DualBlock without_j(ProxFunctiond g, LinearMapd L, SpdMetricd U, double nu);

    Index dim() const noexcept { return L.rows(); }
    /// (g box j)(y).
    double value(const VectorXd& y) const;
};

class PdModel {
public:
    PdModel(ProxFunctiond f, CocoerciveMapd h, SpdMetricd W, double mu, std::vector<DualBlock> blocks);

    const ProxFunctiond& f() const noexcept { return f_; }
    const CocoerciveMapd& h() const noexcept { return h_; }
    const SpdMetricd& W() const noexcept { return W_; }
    const SpdMetricd& W_inverse() const noexcept { return W_inv_; }
    double mu() const noexcept { return mu_; }
    const std::vector<DualBlock>& blocks() const noexcept { return blocks_; }
    std::size_t q() const noexcept { return blocks_.size(); }

    Index dim_x() const noexcept { return h_.dim(); }
    Index dim_v() const noexcept;
    /// H (+) G_1 (+) ... (+) G_q.
    SpaceSpec space() const;

    /// f_n; f unless a varying rule is set.
    ProxFunctiond f_at(Index n) const { return f_rule ? f_rule(n) : f_; }
    /// f(x) + sum_k (g_k box j_k)(L_k x) + h(x).
    double objective(const VectorXd& x) const;

    /// Optional n -> f_n with drift declared by the schedule's alpha/beta rules.
    std::function<ProxFunctiond(Index)> f_rule;
    DemiregularityFlag demiregularity;

private:
    ProxFunctiond f_;
    CocoerciveMapd h_;
    SpdMetricd W_;
    SpdMetricd W_inv_;
    double mu_;
    std::vector<DualBlock> blocks_;
};

struct PdState {
    Index n = 0;
    VectorXd x;
    BlockVector<double> v;
    VectorXd last_y;
    BlockVector<double> last_w;

    /// (x, v) as one vector of H (+) G.
    VectorXd joined() const;
};

PdState make_pd_state(const PdModel& model, const VectorXd& x0, const VectorXd& v0);

struct PdOracleBundle {
    GradientOracle u;
    std::vector<GradientOracle> s;
    PerturbationSource b = PerturbationSource::zero();
    std::vector<PerturbationSource> c;

    /// u_n = grad h(x_n), s_{k,n} = grad j_k^*(v_{k,n}), no perturbations.
    static PdOracleBundle exact(const PdModel& model);
    void validate(const PdModel& model) const;
};

/// Exact gradient of j_k^* as a map (its declared cocoercivity is 1 / (nu_k ||U_k^{-1}||)).
CocoerciveMapd dual_gradient_field(const DualBlock& block);

/// theta = (1 - sqrt(sum_k ||U_k^{1/2} L_k W^{1/2}||^2)) min{1/mu, 1/nu_1, ..., 1/nu_q}.
/// Throws ConditionViolation("(g)") when the leading factor is not positive.
double cocoercivity_constant(const PdModel& model, double norm_tol = 1e-10);

/// sqrt(sum_k ||U_k^{1/2} L_k W^{1/2}||^2).
double coupling_norm(const PdModel& model, double norm_tol = 1e-10);

struct PdCheckOptions {
    std::size_t lipschitz_samples = 1000;
    std::uint64_t seed = 7;
    double norm_tol = 1e-10;
    Index horizon = 100000;
};

/// Largest sampled quotient ||grad phi(a) - grad phi(b)|| / ||a - b|| for phi = psi o M^{1/2}.
double sampled_lipschitz(const std::function<VectorXd(const VectorXd&)>& grad, const SpdMetricd& M,
                         std::size_t samples, std::uint64_t seed, double scale = 2.0);

/// Estimate of the Lipschitz constant of grad(psi o M^{1/2}): the larger of the sampled quotient
/// and a power iteration on differences, times the safety factor.
double estimate_lipschitz(const std::function<VectorXd(const VectorXd&)>& grad, const SpdMetricd& M,
                          std::uint64_t seed = 7, double safety = 1.1);

/// Clause-by-clause report:
///   (b) sum lambda_n ||b_n||, sum lambda_n ||c_n|| finite; (c) u bias; (d) s_k bias;
///   (e) tau_n summable, lambda_n zeta_n in l^{1/2}; (f) f_n drift when f varies;
///   (g) max{mu, nu_k} < 2 (1 - sqrt(sum ||U_k^{1/2} L_k W^{1/2}||^2)); sum lambda_n = inf unless
///   inf lambda_n > 0; sampled checks of the declared mu and nu_k.
CertificateReport check_pd_conditions(const PdModel& model, const IterationSchedule& sched,
                                      const PdOracleBundle* oracles = nullptr, const PdCheckOptions& opts = {});

struct PdStepDetail {
    ScheduleValues sv;
    VectorXd u;
    VectorXd s;  ///< all blocks joined
    VectorXd b;
    VectorXd c;  ///< all blocks joined
};

/// One sweep of the primal-dual iteration:
///   y_n = prox^{W^{-1}}_{f_n}(x_n - W(sum_k L_k^* v_{k,n} + u_n)) + b_n
///   x_{n+1} = x_n + lambda_n (y_n - x_n)
///   w_{k,n} = prox^{U_k^{-1}}_{g_k^*}(v_{k,n} + U_k(L_k(2 y_n - x_n) - s_{k,n})) + c_{k,n}
///   v_{k,n+1} = v_{k,n} + lambda_n (w_{k,n} - v_{k,n})
PdState pd_step(const PdState& state, const PdModel& model, const PdOracleBundle& oracles,
                const IterationSchedule& sched, SampleLedger& ledger, PdStepDetail* detail = nullptr);

/// The primal-dual iteration as forward-backward on K = H (+) G in the metric V:
///   A(x, v) = (df(x) + L^* v, -L x + dg^*(v)),  B(x, v) = (grad h(x), grad j^*(v)),
///   V(x, v) = (W^{-1} x - L^* v, -L x + U^{-1} v),
/// iterated with gamma_n = 1, operator V^{-1} A (resolvent in closed form), oracle
/// V^{-1}(u_n, s_n) and perturbation (b_n, c_n). The iteration matches pd_step exactly when
/// b_n = 0; otherwise pd_step feeds b_n into the dual update as well.
struct PdEmbedding {
    SpaceSpec space;
    MatrixXd V;
    Eigen::LLT<MatrixXd> V_factor;
    SpdMetricd V_metric;
    double theta = 0.0;
    /// A: resolvent J_{V^{-1} A} (gamma must be 1); B: V^{-1} B with cocoercivity theta in the V norm.
    FbProblem problem;
    /// Exact B on K (not preconditioned).
    CocoerciveMapd B_plain;
    GradientOracle oracle;
    PerturbationSource perturb;
    /// n -> V^{-1} A_n when f varies with n.
    VaryingResolventFamily family;

    VectorXd apply_V(const VectorXd& z) const { return V * z; }
    VectorXd solve_V(const VectorXd& z) const;
    double V_norm(const VectorXd& z) const;
    VectorXd join(const VectorXd& x, const VectorXd& v) const;
    VectorXd primal(const VectorXd& z) const { return z.head(space.dim(0)); }
    VectorXd dual(const VectorXd& z) const { return z.tail(z.size() - space.dim(0)); }
};

PdEmbedding embed_as_fb(const PdModel& model, const PdOracleBundle& oracles);
PdEmbedding embed_as_fb(const PdModel& model);

/// J_{V^{-1} A_n}(x, v) = (y, prox^{U^{-1}}_{g^*}(v + U L(2y - x))) with
/// y = prox^{W^{-1}}_{f_n}(x - W L^* v), for z = (x, v) joined.
VectorXd embedded_resolvent(const PdModel& model, const VectorXd& z, Index n);

struct PdRunOptions {
    bool audit = true;
    bool force = false;
    bool cache_draws = true;
    std::string label;
    std::string config_digest;
    /// Reference solution pairs joined as (x, v), for V-norm distances.
    std::vector<VectorXd> references;
};

/// Runs pd_step until the stopping rule fires. The trace measures distances, residuals and
/// sums in the V norm of the embedding; residual is ||z - J(z - V^{-1} B z)||_V.
RunTrace pd_run(const PdModel& model, const PdOracleBundle& oracles, const IterationSchedule& sched,
                const StoppingRule& stop, std::uint64_t seed, const VectorXd& x0, const VectorXd& v0,
                const PdRunOptions& options = {});

}  // namespace sfbs
