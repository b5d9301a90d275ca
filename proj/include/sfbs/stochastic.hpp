#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfbs/operators.hpp"

namespace sfbs {

using ProxFunctiond = ProxFunction<double>;
using ResolventOperatord = ResolventOperator<double>;
using CocoerciveMapd = CocoerciveMap<double>;
using SpdMetricd = SpdMetric<double>;
using LinearMapd = LinearMap<double>;

/// Engine for one derived substream; (seed, stream, index) -> independent generator.
std::mt19937_64 substream(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

/// Nonnegative real sequence n -> value.
///
/// Built-in rules share the closed form c * (n + 1)^(-p) * r^n (constant: p = 0, r = 1;
/// power: r = 1; geometric: p = 0), which is closed under products and real powers,
/// so summability of products such as sqrt(lambda_n) * alpha_n is decided exactly.
/// Custom rules are only checked numerically.
class SequenceRule {
public:
    SequenceRule() = default;

    static SequenceRule constant(double c) { return SequenceRule(c, 0.0, 1.0); }
    static SequenceRule zero() { return constant(0.0); }
    static SequenceRule power(double c, double p) { return SequenceRule(c, p, 1.0); }
    static SequenceRule geometric(double c, double r);
    static SequenceRule custom(std::function<double(Index)> fn, std::string name = "custom");

    double operator()(Index n) const;

    bool closed_form() const noexcept { return !fn_; }
    double coefficient() const noexcept { return c_; }
    double exponent() const noexcept { return p_; }
    double ratio() const noexcept { return r_; }
    bool is_zero() const noexcept { return closed_form() && c_ == 0.0; }
    bool is_constant() const noexcept { return closed_form() && (c_ == 0.0 || (p_ == 0.0 && r_ == 1.0)); }
    /// Closed form with p >= 0 and r <= 1.
    bool nonincreasing() const noexcept { return closed_form() && (c_ == 0.0 || (p_ >= 0.0 && r_ <= 1.0)); }

    /// Pointwise product; custom if either factor is custom.
    SequenceRule times(const SequenceRule& other) const;
    /// Pointwise power value^e.
    SequenceRule pow(double e) const;

    /// Exact verdict for closed forms, nullopt for custom rules.
    std::optional<bool> summable() const;
    /// Exact sup / inf over n >= 0 for closed forms (inf may be a limit, +inf when unbounded).
    std::optional<double> sup() const;
    std::optional<double> inf() const;

    std::string describe() const;
    nlohmann::json to_json() const;

private:
    SequenceRule(double c, double p, double r) : c_(c), p_(p), r_(r) {}

    double c_ = 0.0;
    double p_ = 0.0;
    double r_ = 1.0;
    std::function<double(Index)> fn_;
    std::string name_;
};

/// m_n = m0 + ceil(c * n^(1 + delta)), strictly increasing; the batch sizes of the empirical oracle.
class BatchRule {
public:
    BatchRule() = default;
    /// Throws ConfigError unless m0 >= 1, c > 0, delta > 0 and the sequence is strictly
    /// increasing for n <= 10^4.
    BatchRule(Index m0, double c, double delta);

    Index operator()(Index n) const;
    Index m0() const noexcept { return m0_; }
    double c() const noexcept { return c_; }
    double delta() const noexcept { return delta_; }

private:
    Index m0_ = 1;
    double c_ = 1.0;
    double delta_ = 0.2;
};

struct ScheduleValues {
    double lambda = 1.0;
    double gamma = 1.0;
    double tau = 0.0;
    Index m = 0;  ///< m_n; 0 when the schedule has no batch rule
    double alpha = 0.0;
    double beta = 0.0;
};

/// The parameter sequences (lambda_n, gamma_n, tau_n, m_n, alpha_n, beta_n).
class IterationSchedule {
public:
    struct Rules {
        SequenceRule lambda = SequenceRule::constant(1.0);
        SequenceRule gamma = SequenceRule::constant(1.0);
        SequenceRule tau = SequenceRule::zero();
        SequenceRule alpha = SequenceRule::zero();
        SequenceRule beta = SequenceRule::zero();
        std::optional<BatchRule> batch;
    };

    /// Validates lambda_n in ]0,1], gamma_n > 0 and tau_n, alpha_n, beta_n >= 0, exactly for
    /// closed-form rules and up to `horizon` otherwise; throws ConfigError.
    explicit IterationSchedule(Rules rules, Index horizon = 10000);

    ScheduleValues eval(Index n) const;

    const SequenceRule& lambda() const noexcept { return rules_.lambda; }
    const SequenceRule& gamma() const noexcept { return rules_.gamma; }
    const SequenceRule& tau() const noexcept { return rules_.tau; }
    const SequenceRule& alpha() const noexcept { return rules_.alpha; }
    const SequenceRule& beta() const noexcept { return rules_.beta; }
    const std::optional<BatchRule>& batch() const noexcept { return rules_.batch; }

private:
    Rules rules_;
};

inline ScheduleValues schedule_eval(const IterationSchedule& s, Index n) { return s.eval(n); }

/// Throws ConfigError unless kappa in ]1 - delta, 1] and kappa in [0, 1].
void validate_batch_relaxation_pair(double delta, double kappa);

/// Law of (K, z) for the empirical quadratic oracle:
///   K = K_mean + K_std * G,  z = K x_true + z_offset + z_std * e,
/// with G, e standard normal. Then
///   E[K^T K] = K_mean^T K_mean + K_std^2 M Id,  E[K^T z] = E[K^T K] x_true + K_mean^T z_offset,
/// and h(x) = 1/2 E||K x - z||^2 has gradient E[K^T K] x - E[K^T z].
struct LinearModelDistribution {
    MatrixXd K_mean;
    double K_std = 0.0;
    VectorXd x_true;
    VectorXd z_offset;
    double z_std = 0.0;

    Index rows() const noexcept { return K_mean.rows(); }
    Index cols() const noexcept { return K_mean.cols(); }
    void validate() const;
    MatrixXd second_moment() const;
    VectorXd cross_moment() const;
    /// Exact gradient field of h.
    CocoerciveMapd gradient_field() const;
    /// h(x) = 1/2 E||K x - z||^2, constant terms included.
    double objective(const VectorXd& x) const;
    std::string fingerprint() const;
};

/// Seeded record of the i.i.d. draws (K_i, z_i), generated once in index order and reused.
/// Stands in for the information available before each iteration.
class SampleLedger {
public:
    explicit SampleLedger(std::uint64_t seed);
    SampleLedger(std::uint64_t seed, LinearModelDistribution dist, bool cache_draws = true);

    std::uint64_t seed() const noexcept { return seed_; }
    bool has_distribution() const noexcept { return dist_.has_value(); }
    const LinearModelDistribution& distribution() const;
    const std::string& fingerprint() const noexcept { return fingerprint_; }

    /// Draws samples until `count` exist.
    void ensure(Index count);
    Index size() const noexcept { return size_; }
    bool caches_draws() const noexcept { return cache_; }
    const MatrixXd& K(Index i) const;
    const VectorXd& z(Index i) const;

    /// Running sums sum_{i<count} K_i^T K_i and sum_{i<count} K_i^T z_i for a count at
    /// which ensure() has been called (or any count when draws are cached).
    std::pair<MatrixXd, VectorXd> prefix_sums(Index count) const;

    /// Draws one (K, z) pair from `rng` under the ledger's distribution.
    static void draw(const LinearModelDistribution& dist, std::mt19937_64& rng, MatrixXd& K, VectorXd& z);

private:
    std::uint64_t seed_;
    std::optional<LinearModelDistribution> dist_;
    std::string fingerprint_;
    bool cache_ = true;
    std::mt19937_64 rng_;
    Index size_ = 0;
    std::vector<MatrixXd> K_;
    std::vector<VectorXd> z_;
    MatrixXd sum_KtK_;
    VectorXd sum_Ktz_;
    std::map<Index, std::pair<MatrixXd, VectorXd>> checkpoints_;
};

enum class NoiseDist { gaussian, uniform_ball };
NoiseDist noise_dist_from_string(const std::string& s);
std::string to_string(NoiseDist d);

/// Unit-scale noise vector: standard normal scaled by 1/sqrt(dim) (E||xi||^2 = 1), or
/// uniform in the unit ball (||xi|| <= 1).
VectorXd draw_noise(NoiseDist dist, Index dim, std::mt19937_64& rng);

enum class OracleKind { exact, additive_noise, empirical_quadratic, custom };

/// Stochastic estimate u_n of B x_n.
class GradientOracle {
public:
    using CustomRule = std::function<VectorXd(const VectorXd&, Index, SampleLedger&)>;

    static GradientOracle exact(CocoerciveMapd B);
    /// u_n = B x + sigma_n xi_n with xi_n drawn from substream (seed, stream, n).
    static GradientOracle additive_noise(CocoerciveMapd B, NoiseDist dist, SequenceRule scale, std::uint64_t stream);
    /// u_n = (1/m_{n+1}) sum_{i < m_{n+1}} K_i^T (K_i x - z_i) over ledger draws.
    static GradientOracle empirical_quadratic(LinearModelDistribution dist, BatchRule batch);
    static GradientOracle custom(CocoerciveMapd exact_field, CustomRule rule);

    OracleKind kind() const noexcept { return kind_; }
    const CocoerciveMapd& exact_field() const noexcept { return B_; }
    Index dim() const noexcept { return B_.dim(); }
    const LinearModelDistribution& distribution() const;
    const BatchRule& batch() const;
    const SequenceRule& noise_scale() const noexcept { return scale_; }
    NoiseDist noise_dist() const noexcept { return noise_; }
    std::uint64_t stream() const noexcept { return stream_; }

    /// Declared tau_n (0 for every built-in kind).
    SequenceRule declared_tau() const { return SequenceRule::zero(); }
    /// Declared envelopes of ||E[u_n|X_n] - B x_n|| and of the conditional variance zeta_n,
    /// up to constants; nullopt when unknown (custom rules).
    std::optional<SequenceRule> bias_envelope() const;
    std::optional<SequenceRule> zeta_envelope() const;

    VectorXd next_estimate(const VectorXd& x, Index n, SampleLedger& ledger) const;

    /// Exact E[u_n | X_n] - B x_n for the empirical oracle: the fresh draws are replaced by
    /// their expectation and the ledger prefix is re-summed.
    VectorXd conditional_bias(const VectorXd& x, Index n, SampleLedger& ledger) const;

private:
    void require_ledger(const SampleLedger& ledger) const;

    OracleKind kind_ = OracleKind::exact;
    CocoerciveMapd B_;
    NoiseDist noise_ = NoiseDist::gaussian;
    SequenceRule scale_;
    std::uint64_t stream_ = 0;
    std::optional<LinearModelDistribution> dist_;
    std::string fingerprint_;
    std::optional<BatchRule> batch_;
    CustomRule custom_;
};

struct MomentEstimate {
    double bias_norm = 0.0;
    double variance = 0.0;
    double bias_se = 0.0;
    double variance_se = 0.0;
};

/// Monte Carlo estimate of ||E[u_n|X_n] - B x|| and E[||u_n - E[u_n|X_n]||^2 | X_n]:
/// the ledger prefix (indices < m_n) is frozen and only the fresh part of the draw
/// (indices m_n .. m_{n+1}-1, or the additive noise) is resampled in each trial from
/// substream (base_seed, n, trial). Trials are reduced in fixed blocks in block order,
/// so the result does not depend on `workers`.
MomentEstimate estimate_conditional_moments(const GradientOracle& o, const VectorXd& x, Index n, Index trials,
                                            std::uint64_t base_seed, SampleLedger& ledger, unsigned workers = 1);

enum class PerturbationKind { zero, decaying_noise, blocks, scheduled };

/// Resolvent perturbation a_n.
class PerturbationSource {
public:
    static PerturbationSource zero();
    /// a_n = eps_n * xi_n, xi_n from substream (seed, stream, n).
    static PerturbationSource decaying(NoiseDist dist, SequenceRule magnitude, std::uint64_t stream);
    /// Concatenation of per-block sources.
    static PerturbationSource blocks(std::vector<PerturbationSource> parts, std::vector<Index> dims);
    /// Deterministic a_n = rule(n, dim) with a declared bound on ||a_n||.
    static PerturbationSource scheduled(std::function<VectorXd(Index, Index)> rule, SequenceRule bound);

    PerturbationKind kind() const noexcept { return kind_; }
    const SequenceRule& magnitude() const noexcept { return magnitude_; }
    /// Bounds on sqrt(E||a_n||^2) (and on ||a_n|| for uniform_ball), one per nonzero block.
    std::vector<SequenceRule> bounds() const;

    VectorXd next(Index n, Index dim, std::uint64_t seed) const;

private:
    PerturbationKind kind_ = PerturbationKind::zero;
    NoiseDist dist_ = NoiseDist::uniform_ball;
    SequenceRule magnitude_ = SequenceRule::zero();
    std::uint64_t stream_ = 0;
    std::vector<PerturbationSource> parts_;
    std::vector<Index> dims_;
    std::function<VectorXd(Index, Index)> rule_;
};

inline VectorXd next_perturbation(const PerturbationSource& p, Index n, Index dim, std::uint64_t seed) {
    return p.next(n, dim, seed);
}

enum class ClauseStatus { pass, fail, checked_numerically };
std::string to_string(ClauseStatus s);

struct Clause {
    std::string id;
    std::string description;
    ClauseStatus status = ClauseStatus::pass;
    std::optional<Index> witness;
    std::string detail;
};

struct CertificateReport {
    std::string name;
    std::vector<Clause> clauses;

    bool passed() const;
    const Clause* find(const std::string& id) const;
    nlohmann::json to_json() const;
    std::string summary() const;
};

struct CertificateInputs {
    /// Bounds on sqrt(E[||a_n||^2 | X_n]), one per perturbation block; empty means a_n = 0.
    std::vector<SequenceRule> perturbation_bounds;
    std::optional<SequenceRule> bias_envelope = SequenceRule::zero();
    std::optional<SequenceRule> zeta_envelope = SequenceRule::zero();
    bool varying_resolvent = false;
    /// Horizon for numerically bounded clauses.
    Index horizon = 100000;
};

/// Checks the hypotheses of the stochastic forward-backward convergence result clause by clause:
///   (b) sum lambda_n sqrt(E||a_n||^2) < inf
///   (c) sum sqrt(lambda_n) ||E[u_n|X_n] - B x_n|| < inf
///   (d) (lambda_n zeta_n) in l^{1/2}, zeta bounded
///   (e) inf gamma_n > 0, sup tau_n < inf, sup (1 + tau_n) gamma_n < 2 theta
///   (f) inf lambda_n > 0, or [gamma_n constant, sum tau_n < inf, sum lambda_n = inf]
///   (k) drift: sum sqrt(lambda_n) alpha_n < inf, sum lambda_n beta_n < inf (varying resolvents)
CertificateReport admissibility_certificate(const IterationSchedule& s, double theta, const CertificateInputs& in = {});

CertificateInputs certificate_inputs(const GradientOracle& o, const PerturbationSource& p, bool varying = false);

}  // namespace sfbs
