#include "sfbs/stochastic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <sstream>
#include <thread>

namespace sfbs {

namespace {

constexpr std::uint64_t kLedgerStream = 0x4c45444745520001ULL;
constexpr double kInf = std::numeric_limits<double>::infinity();

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename Derived>
std::uint64_t hash_dense(std::uint64_t h, const Eigen::MatrixBase<Derived>& m) {
    const Index dims[2] = {m.rows(), m.cols()};
    h = fnv1a(h, dims, sizeof dims);
    for (Index j = 0; j < m.cols(); ++j) {
        for (Index i = 0; i < m.rows(); ++i) {
            const double v = m(i, j);
            h = fnv1a(h, &v, sizeof v);
        }
    }
    return h;
}

/// Partial-sum test for a rule without closed form: tail = (S_H - S_{H/2}) / S_H.
double numeric_tail_fraction(const SequenceRule& s, Index horizon) {
    double total = 0.0;
    double half = 0.0;
    const Index mid = horizon / 2;
    for (Index n = 0; n <= horizon; ++n) {
        total += s(n);
        if (n == mid) half = total;
    }
    if (total == 0.0) return 0.0;
    return (total - half) / total;
}

struct Verdict {
    ClauseStatus status;
    std::string detail;
};

Verdict summable_verdict(const SequenceRule& s, Index horizon) {
    if (auto exact = s.summable()) {
        return {*exact ? ClauseStatus::pass : ClauseStatus::fail,
                s.describe() + (*exact ? " is summable" : " is not summable")};
    }
    const double tail = numeric_tail_fraction(s, horizon);
    if (!std::isfinite(tail) || tail > 0.1) {
        return {ClauseStatus::fail, s.describe() + ": tail fraction " + fmt(tail) + " > 0.1 up to N=" +
                                        std::to_string(horizon)};
    }
    return {ClauseStatus::checked_numerically,
            s.describe() + ": tail fraction " + fmt(tail) + " checked up to N=" + std::to_string(horizon)};
}

Verdict divergent_verdict(const SequenceRule& s, Index horizon) {
    if (auto exact = s.summable()) {
        return {!*exact ? ClauseStatus::pass : ClauseStatus::fail,
                s.describe() + (!*exact ? " has divergent sum" : " is summable")};
    }
    const double tail = numeric_tail_fraction(s, horizon);
    if (tail > 0.1) {
        return {ClauseStatus::checked_numerically,
                s.describe() + ": tail fraction " + fmt(tail) + " checked up to N=" + std::to_string(horizon)};
    }
    return {ClauseStatus::fail, s.describe() + ": partial sums level off up to N=" + std::to_string(horizon)};
}

ClauseStatus combine(ClauseStatus a, ClauseStatus b) {
    if (a == ClauseStatus::fail || b == ClauseStatus::fail) return ClauseStatus::fail;
    if (a == ClauseStatus::checked_numerically || b == ClauseStatus::checked_numerically) {
        return ClauseStatus::checked_numerically;
    }
    return ClauseStatus::pass;
}

void check_rule_range(const SequenceRule& s, const char* name, double lo, bool lo_open, double hi, Index horizon) {
    auto bad = [&](double v) { return !std::isfinite(v) || (lo_open ? !(v > lo) : !(v >= lo)) || v > hi; };
    if (s.closed_form()) {
        const double c = s.coefficient();
        if (!std::isfinite(c) || (lo_open ? !(c > lo) : !(c >= lo))) {
            throw ConfigError(std::string(name) + " rule " + s.describe() + (lo_open ? " must be positive" : " must be nonnegative"));
        }
        if (!std::isfinite(hi)) return;
        const auto sup = s.sup();
        if (!sup || *sup > hi) {
            throw ConfigError(std::string(name) + " rule " + s.describe() + " exceeds " + fmt(hi));
        }
        return;
    }
    for (Index n = 0; n <= horizon; ++n) {
        if (bad(s(n))) {
            throw ConfigError(std::string(name) + " rule is out of range at n=" + std::to_string(n));
        }
    }
}

}  // namespace

std::mt19937_64 substream(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stream),
                      std::uint32_t(stream >> 32), std::uint32_t(index), std::uint32_t(index >> 32)};
    return std::mt19937_64(seq);
}

// ---------------------------------------------------------------- SequenceRule

SequenceRule SequenceRule::geometric(double c, double r) {
    if (!(r > 0) || !std::isfinite(r)) throw ParameterError("geometric rule: ratio must be positive");
    return SequenceRule(c, 0.0, r);
}

SequenceRule SequenceRule::custom(std::function<double(Index)> fn, std::string name) {
    if (!fn) throw ParameterError("custom rule: empty function");
    SequenceRule s;
    s.fn_ = std::move(fn);
    s.name_ = std::move(name);
    return s;
}

double SequenceRule::operator()(Index n) const {
    if (fn_) return fn_(n);
    if (c_ == 0.0) return 0.0;
    double v = c_;
    if (p_ != 0.0) v *= std::pow(double(n + 1), -p_);
    if (r_ != 1.0) v *= std::pow(r_, double(n));
    return v;
}

SequenceRule SequenceRule::times(const SequenceRule& other) const {
    if (closed_form() && other.closed_form()) {
        if (c_ == 0.0 || other.c_ == 0.0) return zero();
        return SequenceRule(c_ * other.c_, p_ + other.p_, r_ * other.r_);
    }
    SequenceRule a = *this;
    SequenceRule b = other;
    return custom([a, b](Index n) { return a(n) * b(n); }, "(" + describe() + ")*(" + other.describe() + ")");
}

SequenceRule SequenceRule::pow(double e) const {
    if (closed_form()) {
        if (c_ == 0.0) return e > 0 ? zero() : constant(kInf);
        return SequenceRule(std::pow(c_, e), p_ * e, std::pow(r_, e));
    }
    SequenceRule a = *this;
    return custom([a, e](Index n) { return std::pow(a(n), e); }, "(" + describe() + ")^" + fmt(e));
}

std::optional<bool> SequenceRule::summable() const {
    if (!closed_form()) return std::nullopt;
    if (c_ == 0.0) return true;
    if (!std::isfinite(c_)) return false;
    if (r_ < 1.0) return true;
    if (r_ > 1.0) return false;
    return p_ > 1.0;
}

std::optional<double> SequenceRule::sup() const {
    if (!closed_form()) return std::nullopt;
    if (c_ == 0.0) return 0.0;
    if (r_ > 1.0 || (r_ == 1.0 && p_ < 0.0)) return kInf;
    if (p_ >= 0.0) return c_;
    // r < 1, p < 0: unimodal in n, peak near n + 1 = p / log r.
    const double peak = p_ / std::log(r_) - 1.0;
    const Index lo = std::max<Index>(0, Index(std::floor(peak)));
    return std::max((*this)(lo), (*this)(lo + 1));
}

std::optional<double> SequenceRule::inf() const {
    if (!closed_form()) return std::nullopt;
    if (c_ == 0.0) return 0.0;
    if (r_ < 1.0) return 0.0;
    if (r_ == 1.0) return p_ > 0.0 ? 0.0 : c_;
    if (p_ <= 0.0) return c_;
    const double trough = p_ / std::log(r_) - 1.0;
    const Index lo = std::max<Index>(0, Index(std::floor(trough)));
    return std::min({(*this)(0), (*this)(lo), (*this)(lo + 1)});
}

std::string SequenceRule::describe() const {
    if (fn_) return name_;
    if (c_ == 0.0) return "0";
    std::string s = fmt(c_);
    if (p_ != 0.0) s += "*(n+1)^" + fmt(-p_);
    if (r_ != 1.0) s += "*" + fmt(r_) + "^n";
    return s;
}

nlohmann::json SequenceRule::to_json() const {
    if (fn_) return {{"kind", "custom"}, {"name", name_}};
    return {{"kind", "power_geometric"}, {"c", c_}, {"p", p_}, {"r", r_}};
}

// ---------------------------------------------------------------- BatchRule

BatchRule::BatchRule(Index m0, double c, double delta) : m0_(m0), c_(c), delta_(delta) {
    if (m0 < 1) throw ConfigError("batch rule: m0 must be >= 1");
    if (!(c > 0) || !std::isfinite(c)) throw ConfigError("batch rule: c must be positive");
    if (!(delta > 0) || !std::isfinite(delta)) throw ConfigError("batch rule: delta must be positive");
    Index prev = (*this)(0);
    for (Index n = 1; n <= 10000; ++n) {
        const Index cur = (*this)(n);
        if (cur <= prev) {
            throw ConfigError("batch rule is not strictly increasing at n=" + std::to_string(n));
        }
        prev = cur;
    }
}

Index BatchRule::operator()(Index n) const {
    if (n == 0) return m0_;
    return m0_ + Index(std::ceil(c_ * std::pow(double(n), 1.0 + delta_)));
}

// ---------------------------------------------------------------- IterationSchedule

IterationSchedule::IterationSchedule(Rules rules, Index horizon) : rules_(std::move(rules)) {
    check_rule_range(rules_.lambda, "lambda", 0.0, true, 1.0, horizon);
    check_rule_range(rules_.gamma, "gamma", 0.0, true, kInf, horizon);
    check_rule_range(rules_.tau, "tau", 0.0, false, kInf, horizon);
    check_rule_range(rules_.alpha, "alpha", 0.0, false, kInf, horizon);
    check_rule_range(rules_.beta, "beta", 0.0, false, kInf, horizon);
}

ScheduleValues IterationSchedule::eval(Index n) const {
    if (n < 0) throw ParameterError("schedule_eval: n must be >= 0");
    ScheduleValues v;
    v.lambda = rules_.lambda(n);
    v.gamma = rules_.gamma(n);
    v.tau = rules_.tau(n);
    v.m = rules_.batch ? (*rules_.batch)(n) : 0;
    v.alpha = rules_.alpha(n);
    v.beta = rules_.beta(n);
    return v;
}

void validate_batch_relaxation_pair(double delta, double kappa) {
    if (!(delta > 0)) throw ConfigError("delta must be positive");
    if (!(kappa > 1.0 - delta) || !(kappa <= 1.0) || !(kappa >= 0.0)) {
        throw ConfigError("kappa = " + fmt(kappa) + " violates kappa in ]1 - delta, 1] ∩ [0, 1] = ]" +
                          fmt(std::max(0.0, 1.0 - delta)) + ", 1] for delta = " + fmt(delta));
    }
}

// ---------------------------------------------------------------- LinearModelDistribution

void LinearModelDistribution::validate() const {
    if (K_mean.rows() < 1 || K_mean.cols() < 1) throw StructuralError("linear model: K_mean is empty");
    if (x_true.size() != K_mean.cols()) throw StructuralError("linear model: x_true length must equal K columns");
    if (z_offset.size() != K_mean.rows()) throw StructuralError("linear model: z_offset length must equal K rows");
    if (!(K_std >= 0) || !(z_std >= 0)) throw ParameterError("linear model: standard deviations must be >= 0");
    if (!K_mean.allFinite() || !x_true.allFinite() || !z_offset.allFinite()) {
        throw StructuralError("linear model: entries must be finite");
    }
}

MatrixXd LinearModelDistribution::second_moment() const {
    const Index n = cols();
    return K_mean.transpose() * K_mean + (K_std * K_std * double(rows())) * MatrixXd::Identity(n, n);
}

VectorXd LinearModelDistribution::cross_moment() const {
    return second_moment() * x_true + K_mean.transpose() * z_offset;
}

CocoerciveMapd LinearModelDistribution::gradient_field() const {
    return CocoerciveMapd::quadratic_form(second_moment(), cross_moment());
}

double LinearModelDistribution::objective(const VectorXd& x) const {
    const MatrixXd Q = second_moment();
    const VectorXd b = cross_moment();
    const double ez2 = x_true.dot(Q * x_true) + 2.0 * z_offset.dot(K_mean * x_true) + z_offset.squaredNorm() +
                       z_std * z_std * double(rows());
    return 0.5 * x.dot(Q * x) - b.dot(x) + 0.5 * ez2;
}

std::string LinearModelDistribution::fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = hash_dense(h, K_mean);
    h = hash_dense(h, x_true);
    h = hash_dense(h, z_offset);
    h = fnv1a(h, &K_std, sizeof K_std);
    h = fnv1a(h, &z_std, sizeof z_std);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------- SampleLedger

SampleLedger::SampleLedger(std::uint64_t seed) : seed_(seed), rng_(substream(seed, kLedgerStream)) {}

SampleLedger::SampleLedger(std::uint64_t seed, LinearModelDistribution dist, bool cache_draws)
    : seed_(seed), cache_(cache_draws), rng_(substream(seed, kLedgerStream)) {
    dist.validate();
    fingerprint_ = dist.fingerprint();
    sum_KtK_ = MatrixXd::Zero(dist.cols(), dist.cols());
    sum_Ktz_ = VectorXd::Zero(dist.cols());
    checkpoints_.emplace(0, std::make_pair(sum_KtK_, sum_Ktz_));
    dist_ = std::move(dist);
}

const LinearModelDistribution& SampleLedger::distribution() const {
    if (!dist_) throw ReproducibilityError("sample ledger carries no distribution");
    return *dist_;
}

void SampleLedger::draw(const LinearModelDistribution& dist, std::mt19937_64& rng, MatrixXd& K, VectorXd& z) {
    std::normal_distribution<double> normal;
    K.resize(dist.rows(), dist.cols());
    for (Index i = 0; i < dist.rows(); ++i) {
        for (Index j = 0; j < dist.cols(); ++j) K(i, j) = dist.K_mean(i, j) + dist.K_std * normal(rng);
    }
    z = K * dist.x_true + dist.z_offset;
    for (Index i = 0; i < dist.rows(); ++i) z(i) += dist.z_std * normal(rng);
}

void SampleLedger::ensure(Index count) {
    if (count <= size_) return;
    const LinearModelDistribution& dist = distribution();
    MatrixXd K;
    VectorXd z;
    while (size_ < count) {
        draw(dist, rng_, K, z);
        sum_KtK_.noalias() += K.transpose() * K;
        sum_Ktz_.noalias() += K.transpose() * z;
        if (cache_) {
            K_.push_back(K);
            z_.push_back(z);
        }
        ++size_;
    }
    checkpoints_.emplace(size_, std::make_pair(sum_KtK_, sum_Ktz_));
}

const MatrixXd& SampleLedger::K(Index i) const {
    if (!cache_) throw ReproducibilityError("sample ledger does not cache draws");
    if (i < 0 || i >= size_) throw StructuralError("sample ledger: index out of range");
    return K_[std::size_t(i)];
}

const VectorXd& SampleLedger::z(Index i) const {
    if (!cache_) throw ReproducibilityError("sample ledger does not cache draws");
    if (i < 0 || i >= size_) throw StructuralError("sample ledger: index out of range");
    return z_[std::size_t(i)];
}

std::pair<MatrixXd, VectorXd> SampleLedger::prefix_sums(Index count) const {
    if (count < 0 || count > size_) throw StructuralError("sample ledger: prefix beyond drawn samples");
    if (auto it = checkpoints_.find(count); it != checkpoints_.end()) return it->second;
    if (!cache_) throw ReproducibilityError("sample ledger: prefix " + std::to_string(count) + " was not recorded");
    MatrixXd S = MatrixXd::Zero(distribution().cols(), distribution().cols());
    VectorXd s = VectorXd::Zero(distribution().cols());
    for (Index i = 0; i < count; ++i) {
        S.noalias() += K_[std::size_t(i)].transpose() * K_[std::size_t(i)];
        s.noalias() += K_[std::size_t(i)].transpose() * z_[std::size_t(i)];
    }
    return {S, s};
}

// ---------------------------------------------------------------- noise

NoiseDist noise_dist_from_string(const std::string& s) {
    if (s == "gaussian") return NoiseDist::gaussian;
    if (s == "uniform_ball") return NoiseDist::uniform_ball;
    throw ConfigError("unknown noise distribution '" + s + "' (expected gaussian or uniform_ball)");
}

std::string to_string(NoiseDist d) { return d == NoiseDist::gaussian ? "gaussian" : "uniform_ball"; }

VectorXd draw_noise(NoiseDist dist, Index dim, std::mt19937_64& rng) {
    std::normal_distribution<double> normal;
    VectorXd v(dim);
    for (Index i = 0; i < dim; ++i) v(i) = normal(rng);
    if (dist == NoiseDist::gaussian) return v / std::sqrt(double(dim));
    const double nrm = v.norm();
    if (nrm == 0.0) return VectorXd::Zero(dim);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double radius = std::pow(unif(rng), 1.0 / double(dim));
    return v * (radius / nrm);
}

// ---------------------------------------------------------------- GradientOracle

GradientOracle GradientOracle::exact(CocoerciveMapd B) {
    GradientOracle o;
    o.kind_ = OracleKind::exact;
    o.B_ = std::move(B);
    return o;
}

GradientOracle GradientOracle::additive_noise(CocoerciveMapd B, NoiseDist dist, SequenceRule scale,
                                              std::uint64_t stream) {
    GradientOracle o;
    o.kind_ = OracleKind::additive_noise;
    o.B_ = std::move(B);
    o.noise_ = dist;
    o.scale_ = std::move(scale);
    o.stream_ = stream;
    return o;
}

GradientOracle GradientOracle::empirical_quadratic(LinearModelDistribution dist, BatchRule batch) {
    dist.validate();
    GradientOracle o;
    o.kind_ = OracleKind::empirical_quadratic;
    o.B_ = dist.gradient_field();
    o.fingerprint_ = dist.fingerprint();
    o.dist_ = std::move(dist);
    o.batch_ = batch;
    return o;
}

GradientOracle GradientOracle::custom(CocoerciveMapd exact_field, CustomRule rule) {
    if (!rule) throw ParameterError("custom oracle: empty rule");
    GradientOracle o;
    o.kind_ = OracleKind::custom;
    o.B_ = std::move(exact_field);
    o.custom_ = std::move(rule);
    return o;
}

const LinearModelDistribution& GradientOracle::distribution() const {
    if (!dist_) throw ParameterError("oracle has no sample distribution");
    return *dist_;
}

const BatchRule& GradientOracle::batch() const {
    if (!batch_) throw ParameterError("oracle has no batch rule");
    return *batch_;
}

std::optional<SequenceRule> GradientOracle::bias_envelope() const {
    switch (kind_) {
        case OracleKind::exact:
        case OracleKind::additive_noise: return SequenceRule::zero();
        case OracleKind::empirical_quadratic:
            // sqrt(m_n log log m_n) / m_{n+1} ~ n^{-(1+delta)/2}, up to the log log factor.
            return SequenceRule::power(1.0, 0.5 * (1.0 + batch_->delta()));
        case OracleKind::custom: return std::nullopt;
    }
    return std::nullopt;
}

std::optional<SequenceRule> GradientOracle::zeta_envelope() const {
    switch (kind_) {
        case OracleKind::exact: return SequenceRule::zero();
        case OracleKind::additive_noise: return scale_.pow(2.0);
        case OracleKind::empirical_quadratic: return SequenceRule::power(1.0, 2.0 + batch_->delta());
        case OracleKind::custom: return std::nullopt;
    }
    return std::nullopt;
}

void GradientOracle::require_ledger(const SampleLedger& ledger) const {
    if (!ledger.has_distribution() || ledger.fingerprint() != fingerprint_) {
        throw ReproducibilityError("sample ledger was not built for this oracle's distribution");
    }
}

VectorXd GradientOracle::next_estimate(const VectorXd& x, Index n, SampleLedger& ledger) const {
    if (x.size() != dim()) throw StructuralError("next_estimate: dimension mismatch");
    switch (kind_) {
        case OracleKind::exact: return B_.apply(x);
        case OracleKind::additive_noise: {
            auto rng = substream(ledger.seed(), stream_, std::uint64_t(n));
            const double s = scale_(n);
            return B_.apply(x) + s * draw_noise(noise_, dim(), rng);
        }
        case OracleKind::empirical_quadratic: {
            require_ledger(ledger);
            const Index m_cur = (*batch_)(n);
            const Index m_next = (*batch_)(n + 1);
            ledger.ensure(m_cur);
            ledger.ensure(m_next);
            const auto [S, s] = ledger.prefix_sums(m_next);
            return (S * x - s) / double(m_next);
        }
        case OracleKind::custom: return custom_(x, n, ledger);
    }
    return B_.apply(x);
}

VectorXd GradientOracle::conditional_bias(const VectorXd& x, Index n, SampleLedger& ledger) const {
    if (x.size() != dim()) throw StructuralError("conditional_bias: dimension mismatch");
    switch (kind_) {
        case OracleKind::exact:
        case OracleKind::additive_noise: return VectorXd::Zero(dim());
        case OracleKind::empirical_quadratic: {
            require_ledger(ledger);
            const Index m_cur = (*batch_)(n);
            const Index m_next = (*batch_)(n + 1);
            ledger.ensure(m_cur);
            const auto [S, s] = ledger.prefix_sums(m_cur);
            const MatrixXd Q = S - double(m_cur) * dist_->second_moment();
            const VectorXd r = s - double(m_cur) * dist_->cross_moment();
            return (Q * x - r) / double(m_next);
        }
        case OracleKind::custom: break;
    }
    throw ParameterError("conditional_bias: not available for custom oracles");
}

// ---------------------------------------------------------------- moments

MomentEstimate estimate_conditional_moments(const GradientOracle& o, const VectorXd& x, Index n, Index trials,
                                            std::uint64_t base_seed, SampleLedger& ledger, unsigned workers) {
    if (trials < 2) throw ParameterError("estimate_conditional_moments: trials must be >= 2");
    if (x.size() != o.dim()) throw StructuralError("estimate_conditional_moments: dimension mismatch");
    if (o.kind() == OracleKind::exact) return {};
    if (o.kind() == OracleKind::custom) {
        throw ParameterError("estimate_conditional_moments: not available for custom oracles");
    }

    const Index d = o.dim();
    const VectorXd Bx = o.exact_field().apply(x);
    std::function<void(Index, VectorXd&)> trial;
    VectorXd frozen;
    Index m_cur = 0;
    Index m_next = 0;
    if (o.kind() == OracleKind::empirical_quadratic) {
        m_cur = o.batch()(n);
        m_next = o.batch()(n + 1);
        if (!ledger.has_distribution() || ledger.fingerprint() != o.distribution().fingerprint()) {
            throw ReproducibilityError("sample ledger was not built for this oracle's distribution");
        }
        ledger.ensure(m_cur);
        const auto [S, s] = ledger.prefix_sums(m_cur);
        frozen = S * x - s;
        const LinearModelDistribution& dist = o.distribution();
        trial = [&, base_seed](Index t, VectorXd& u) {
            auto rng = substream(base_seed, std::uint64_t(n), std::uint64_t(t));
            MatrixXd K;
            VectorXd z;
            u = frozen;
            for (Index i = m_cur; i < m_next; ++i) {
                SampleLedger::draw(dist, rng, K, z);
                u.noalias() += K.transpose() * (K * x - z);
            }
            u /= double(m_next);
        };
    } else {
        const double s = o.noise_scale()(n);
        trial = [&, s, base_seed](Index t, VectorXd& u) {
            auto rng = substream(base_seed, std::uint64_t(n), std::uint64_t(t));
            u = Bx + s * draw_noise(o.noise_dist(), d, rng);
        };
    }

    MatrixXd U(d, trials);
    constexpr Index kBlock = 1024;
    const Index blocks = (trials + kBlock - 1) / kBlock;
    auto fill = [&](Index b0, Index stride) {
        VectorXd u;
        for (Index b = b0; b < blocks; b += stride) {
            for (Index t = b * kBlock; t < std::min(trials, (b + 1) * kBlock); ++t) {
                trial(t, u);
                U.col(t) = u;
            }
        }
    };
    const unsigned w = std::max(1u, std::min<unsigned>(workers, unsigned(blocks)));
    if (w == 1) {
        fill(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (unsigned k = 0; k < w; ++k) pool.emplace_back(fill, Index(k), Index(w));
        for (auto& th : pool) th.join();
    }

    // Fixed-order reduction: block partial sums, then blocks in index order.
    auto block_sum = [&](auto&& term, auto zero) {
        auto total = zero;
        for (Index b = 0; b < blocks; ++b) {
            auto part = zero;
            for (Index t = b * kBlock; t < std::min(trials, (b + 1) * kBlock); ++t) part += term(t);
            total += part;
        }
        return total;
    };
    const VectorXd mean =
        block_sum([&](Index t) { return VectorXd(U.col(t)); }, VectorXd(VectorXd::Zero(d))) / double(trials);
    const double T = double(trials);
    const double sq = block_sum([&](Index t) { return (U.col(t) - mean).squaredNorm(); }, 0.0);
    const double sq2 = block_sum(
        [&](Index t) {
            const double e = (U.col(t) - mean).squaredNorm();
            return e * e;
        },
        0.0);

    MomentEstimate est;
    est.variance = sq / (T - 1.0);
    est.bias_norm = (mean - Bx).norm();
    est.bias_se = std::sqrt(est.variance / T);
    const double m2 = sq / T;
    est.variance_se = std::sqrt(std::max(0.0, sq2 / T - m2 * m2) / T);
    return est;
}

// ---------------------------------------------------------------- PerturbationSource

PerturbationSource PerturbationSource::zero() { return PerturbationSource{}; }

PerturbationSource PerturbationSource::decaying(NoiseDist dist, SequenceRule magnitude, std::uint64_t stream) {
    if (magnitude.closed_form() && magnitude.coefficient() < 0) {
        throw ParameterError("perturbation magnitude must be nonnegative");
    }
    PerturbationSource p;
    p.kind_ = PerturbationKind::decaying_noise;
    p.dist_ = dist;
    p.magnitude_ = std::move(magnitude);
    p.stream_ = stream;
    return p;
}

PerturbationSource PerturbationSource::blocks(std::vector<PerturbationSource> parts, std::vector<Index> dims) {
    if (parts.size() != dims.size() || parts.empty()) {
        throw StructuralError("perturbation blocks: parts and dims must have equal nonzero length");
    }
    PerturbationSource p;
    p.kind_ = PerturbationKind::blocks;
    p.parts_ = std::move(parts);
    p.dims_ = std::move(dims);
    return p;
}

PerturbationSource PerturbationSource::scheduled(std::function<VectorXd(Index, Index)> rule, SequenceRule bound) {
    if (!rule) throw ParameterError("scheduled perturbation needs a rule");
    PerturbationSource p;
    p.kind_ = PerturbationKind::scheduled;
    p.rule_ = std::move(rule);
    p.magnitude_ = std::move(bound);
    return p;
}

std::vector<SequenceRule> PerturbationSource::bounds() const {
    switch (kind_) {
        case PerturbationKind::zero: return {};
        case PerturbationKind::scheduled: return {magnitude_};
        case PerturbationKind::decaying_noise: return {magnitude_};
        case PerturbationKind::blocks: {
            std::vector<SequenceRule> out;
            for (const auto& part : parts_) {
                auto b = part.bounds();
                out.insert(out.end(), b.begin(), b.end());
            }
            return out;
        }
    }
    return {};
}

VectorXd PerturbationSource::next(Index n, Index dim, std::uint64_t seed) const {
    switch (kind_) {
        case PerturbationKind::zero: return VectorXd::Zero(dim);
        case PerturbationKind::scheduled: {
            VectorXd a = rule_(n, dim);
            if (a.size() != dim) throw StructuralError("scheduled perturbation has the wrong dimension");
            return a;
        }
        case PerturbationKind::decaying_noise: {
            auto rng = substream(seed, stream_, std::uint64_t(n));
            const double eps = magnitude_(n);
            if (!(eps >= 0)) throw ParameterError("perturbation magnitude must be nonnegative");
            return eps * draw_noise(dist_, dim, rng);
        }
        case PerturbationKind::blocks: {
            Index total = 0;
            for (Index d : dims_) total += d;
            if (total != dim) throw StructuralError("perturbation blocks do not match the vector dimension");
            VectorXd out(dim);
            Index off = 0;
            for (std::size_t k = 0; k < parts_.size(); ++k) {
                out.segment(off, dims_[k]) = parts_[k].next(n, dims_[k], seed);
                off += dims_[k];
            }
            return out;
        }
    }
    return VectorXd::Zero(dim);
}

// ---------------------------------------------------------------- certificate

std::string to_string(ClauseStatus s) {
    switch (s) {
        case ClauseStatus::pass: return "pass";
        case ClauseStatus::fail: return "fail";
        case ClauseStatus::checked_numerically: return "checked numerically";
    }
    return "?";
}

bool CertificateReport::passed() const {
    return std::none_of(clauses.begin(), clauses.end(),
                        [](const Clause& c) { return c.status == ClauseStatus::fail; });
}

const Clause* CertificateReport::find(const std::string& id) const {
    for (const auto& c : clauses) {
        if (c.id == id) return &c;
    }
    return nullptr;
}

nlohmann::json CertificateReport::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : clauses) {
        nlohmann::json j = {{"clause", c.id},
                            {"description", c.description},
                            {"status", to_string(c.status)},
                            {"detail", c.detail}};
        j["witness"] = c.witness ? nlohmann::json(*c.witness) : nlohmann::json(nullptr);
        arr.push_back(std::move(j));
    }
    return {{"name", name}, {"passed", passed()}, {"clauses", arr}};
}

std::string CertificateReport::summary() const {
    std::ostringstream os;
    os << (name.empty() ? "certificate" : name) << ": " << (passed() ? "PASS" : "FAIL") << '\n';
    for (const auto& c : clauses) {
        os << "  clause " << c.id << " [" << to_string(c.status) << "] " << c.description;
        if (c.witness) os << " (witness n=" << *c.witness << ")";
        if (!c.detail.empty()) os << ": " << c.detail;
        os << '\n';
    }
    return os.str();
}

CertificateReport admissibility_certificate(const IterationSchedule& s, double theta, const CertificateInputs& in) {
    if (!(theta > 0)) throw ParameterError("admissibility_certificate: theta must be positive");
    const Index H = in.horizon;
    CertificateReport rep;
    rep.name = "stochastic forward-backward admissibility";

    rep.clauses.push_back({"(a)", "information grows with n", ClauseStatus::pass, std::nullopt,
                           "realized by the seeded sample ledger"});

    {
        Clause c{"(b)", "sum lambda_n sqrt(E||a_n||^2) < inf", ClauseStatus::pass, std::nullopt, "a_n = 0"};
        std::string detail;
        for (const auto& eps : in.perturbation_bounds) {
            const Verdict v = summable_verdict(s.lambda().times(eps), H);
            c.status = combine(c.status, v.status);
            detail += (detail.empty() ? "" : "; ") + v.detail;
        }
        if (!detail.empty()) c.detail = detail;
        rep.clauses.push_back(std::move(c));
    }

    {
        Clause c{"(c)", "sum sqrt(lambda_n) ||E[u_n|X_n] - B x_n|| < inf", ClauseStatus::pass, std::nullopt, ""};
        if (!in.bias_envelope) {
            c.status = ClauseStatus::fail;
            c.detail = "no declared bias envelope";
        } else {
            const Verdict v = summable_verdict(s.lambda().pow(0.5).times(*in.bias_envelope), H);
            c.status = v.status;
            c.detail = v.detail;
        }
        rep.clauses.push_back(std::move(c));
    }

    {
        Clause c{"(d)", "zeta_n bounded and (lambda_n zeta_n) in l^(1/2)", ClauseStatus::pass, std::nullopt, ""};
        if (!in.zeta_envelope) {
            c.status = ClauseStatus::fail;
            c.detail = "no declared variance envelope";
        } else {
            const auto sup = in.zeta_envelope->sup();
            if (sup && !std::isfinite(*sup)) {
                c.status = ClauseStatus::fail;
                c.detail = "zeta_n unbounded";
            } else {
                const Verdict v = summable_verdict(s.lambda().times(*in.zeta_envelope).pow(0.5), H);
                c.status = v.status;
                c.detail = v.detail;
            }
        }
        rep.clauses.push_back(std::move(c));
    }

    {
        Clause c{"(e)", "inf gamma_n > 0, sup tau_n < inf, sup (1 + tau_n) gamma_n < 2 theta", ClauseStatus::pass,
                 std::nullopt, ""};
        std::vector<std::string> notes;
        const auto& g = s.gamma();
        const auto& t = s.tau();
        if (auto inf_g = g.inf()) {
            if (!(*inf_g > 0)) {
                c.status = ClauseStatus::fail;
                notes.push_back("inf gamma_n = 0 for " + g.describe());
            }
        } else {
            double lo = kInf;
            for (Index n = 0; n <= H; ++n) lo = std::min(lo, g(n));
            if (!(lo > 0)) {
                c.status = ClauseStatus::fail;
            } else {
                c.status = combine(c.status, ClauseStatus::checked_numerically);
            }
            notes.push_back("min gamma_n = " + fmt(lo) + " up to N=" + std::to_string(H));
        }
        if (auto sup_t = t.sup()) {
            if (!std::isfinite(*sup_t)) {
                c.status = ClauseStatus::fail;
                notes.push_back("tau_n unbounded");
            }
        } else {
            c.status = combine(c.status, ClauseStatus::checked_numerically);
        }
        if (std::isfinite(theta)) {
            const double cap = 2.0 * theta;
            const bool exact = g.closed_form() && t.closed_form() && g.nonincreasing() && t.nonincreasing();
            const Index last = exact ? 0 : H;
            for (Index n = 0; n <= last; ++n) {
                const double v = (1.0 + t(n)) * g(n);
                if (!(v < cap)) {
                    c.status = ClauseStatus::fail;
                    c.witness = n;
                    notes.push_back("(1 + tau_n) gamma_n = " + fmt(v) + " >= 2 theta = " + fmt(cap));
                    break;
                }
            }
            if (!c.witness) {
                const auto sg = g.sup();
                const auto st = t.sup();
                const bool bounded = sg && st && (1.0 + *st) * *sg < cap;
                if (!exact && !bounded) c.status = combine(c.status, ClauseStatus::checked_numerically);
                notes.push_back("sup (1 + tau_n) gamma_n < 2 theta = " + fmt(cap));
            }
        } else {
            notes.push_back("theta = inf");
        }
        for (const auto& note : notes) c.detail += (c.detail.empty() ? "" : "; ") + note;
        rep.clauses.push_back(std::move(c));
    }

    {
        Clause c{"(f)", "inf lambda_n > 0, or [gamma_n constant, sum tau_n < inf, sum lambda_n = inf]",
                 ClauseStatus::pass, std::nullopt, ""};
        // A positive infimum cannot be certified from finitely many terms of a custom rule.
        const auto inf_l = s.lambda().inf();
        if (inf_l && *inf_l > 0) {
            c.detail = "inf lambda_n = " + fmt(*inf_l);
        } else if (!s.gamma().is_constant()) {
            c.status = ClauseStatus::fail;
            c.detail = "lambda_n -> 0 requires constant gamma_n";
        } else {
            const Verdict vt = summable_verdict(s.tau(), H);
            const Verdict vl = divergent_verdict(s.lambda(), H);
            c.status = combine(vt.status, vl.status);
            c.detail = vt.detail + "; " + vl.detail;
        }
        rep.clauses.push_back(std::move(c));
    }

    if (in.varying_resolvent) {
        Clause c{"(k)", "sum sqrt(lambda_n) alpha_n < inf, sum lambda_n beta_n < inf", ClauseStatus::pass,
                 std::nullopt, ""};
        const Verdict va = summable_verdict(s.lambda().pow(0.5).times(s.alpha()), H);
        const Verdict vb = summable_verdict(s.lambda().times(s.beta()), H);
        c.status = combine(va.status, vb.status);
        c.detail = va.detail + "; " + vb.detail;
        rep.clauses.push_back(std::move(c));
    }
    return rep;
}

CertificateInputs certificate_inputs(const GradientOracle& o, const PerturbationSource& p, bool varying) {
    CertificateInputs in;
    in.perturbation_bounds = p.bounds();
    in.bias_envelope = o.bias_envelope();
    in.zeta_envelope = o.zeta_envelope();
    in.varying_resolvent = varying;
    return in;
}

}  // namespace sfbs
