#pragma once

#include <Eigen/Cholesky>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <string>

#include "sfbs/spaces.hpp"

namespace sfbs {

enum class ProxKind { zero, l1, squared_l2, box_indicator, custom };

/// A convex function exposed through its value and proximity operator.
///
/// Catalog kinds:
///   zero                      f = 0
///   l1(w)                     f(y) = w ||y||_1
///   squared_l2(w, c)          f(y) = (w/2) ||y - c||^2
///   box_indicator(lo, hi)     f = indicator of {lo <= y <= hi}; +inf outside
///   custom                    user supplied value and prox rule
///
/// Box bounds and the squared_l2 center given with one entry broadcast to every coordinate.
template <typename Scalar>
class ProxFunction {
public:
    using Vec = Vector<Scalar>;
    using ValueRule = std::function<Scalar(const Vec&)>;
    /// y = prox_{gamma f}(x)
    using ProxRule = std::function<Vec(const Vec&, Scalar)>;
    /// y = prox^U_f(x); optional for custom functions
    using MetricProxRule = std::function<Vec(const Vec&, const SpdMetric<Scalar>&)>;

    static ProxFunction zero() { return ProxFunction(ProxKind::zero); }

    static ProxFunction l1(Scalar weight) {
        if (!(weight >= 0)) throw ParameterError("l1: weight must be nonnegative");
        ProxFunction f(ProxKind::l1);
        f.weight_ = weight;
        return f;
    }

    static ProxFunction squared_l2(Scalar weight, Vec center = Vec::Zero(1)) {
        if (!(weight > 0)) throw ParameterError("squared_l2: weight must be positive");
        ProxFunction f(ProxKind::squared_l2);
        f.weight_ = weight;
        f.center_ = std::move(center);
        return f;
    }

    static ProxFunction box_indicator(Vec lo, Vec hi) {
        if (lo.size() != hi.size() || lo.size() == 0) throw StructuralError("box_indicator: bound sizes differ");
        if ((lo.array() > hi.array()).any()) throw ParameterError("box_indicator: empty box (lo > hi)");
        ProxFunction f(ProxKind::box_indicator);
        f.lo_ = std::move(lo);
        f.hi_ = std::move(hi);
        return f;
    }

    static ProxFunction box_indicator(Scalar lo, Scalar hi) {
        return box_indicator(Vec::Constant(1, lo), Vec::Constant(1, hi));
    }

    static ProxFunction custom(std::string name, ValueRule value, ProxRule prox, MetricProxRule metric_prox = {}) {
        if (!value || !prox) throw ParameterError("custom prox function needs a value and a prox rule");
        ProxFunction f(ProxKind::custom);
        f.name_ = std::move(name);
        f.value_ = std::move(value);
        f.prox_ = std::move(prox);
        f.metric_prox_ = std::move(metric_prox);
        return f;
    }

    ProxKind kind() const noexcept { return kind_; }
    Scalar weight() const noexcept { return weight_; }
    const std::string& name() const noexcept { return name_; }

    Scalar lower(Index i) const { return lo_.size() == 1 ? lo_(0) : lo_(i); }
    Scalar upper(Index i) const { return hi_.size() == 1 ? hi_(0) : hi_(i); }
    Scalar center(Index i) const { return center_.size() == 1 ? center_(0) : center_(i); }

    Vec center_vector(Index n) const {
        check_broadcast(center_, n, "squared_l2 center");
        return center_.size() == 1 ? Vec::Constant(n, center_(0)) : center_;
    }

    /// f(x); +inf outside the domain of an indicator.
    Scalar value(const Vec& x) const {
        switch (kind_) {
            case ProxKind::zero: return Scalar(0);
            case ProxKind::l1: return weight_ * x.template lpNorm<1>();
            case ProxKind::squared_l2: return Scalar(0.5) * weight_ * (x - center_vector(x.size())).squaredNorm();
            case ProxKind::box_indicator: {
                check_bounds(x.size());
                for (Index i = 0; i < x.size(); ++i) {
                    if (x(i) < lower(i) || x(i) > upper(i)) return std::numeric_limits<Scalar>::infinity();
                }
                return Scalar(0);
            }
            case ProxKind::custom: return value_(x);
        }
        return Scalar(0);
    }

    const ProxRule& custom_prox() const noexcept { return prox_; }
    const MetricProxRule& custom_metric_prox() const noexcept { return metric_prox_; }

    void check_bounds(Index n) const { check_broadcast(lo_, n, "box bounds"); }

    static void check_broadcast(const Vec& v, Index n, const char* what) {
        if (v.size() != 1 && v.size() != n) {
            throw StructuralError(std::string(what) + ": length does not match the argument");
        }
    }

private:
    explicit ProxFunction(ProxKind k) : kind_(k) {}

    ProxKind kind_;
    Scalar weight_{0};
    Vec center_;
    Vec lo_;
    Vec hi_;
    std::string name_;
    ValueRule value_;
    ProxRule prox_;
    MetricProxRule metric_prox_;
};

/// prox_{gamma f}(x) = argmin_y f(y) + ||x - y||^2 / (2 gamma).
template <typename Scalar>
Vector<Scalar> prox(const ProxFunction<Scalar>& f, const Vector<Scalar>& x, Scalar gamma) {
    if (!(gamma > 0)) throw ParameterError("prox: gamma must be positive");
    switch (f.kind()) {
        case ProxKind::zero: return x;
        case ProxKind::l1: {
            const Scalar t = gamma * f.weight();
            return x.unaryExpr([t](Scalar v) {
                return v > t ? v - t : (v < -t ? v + t : Scalar(0));
            });
        }
        case ProxKind::squared_l2: {
            const Scalar gw = gamma * f.weight();
            return (x + gw * f.center_vector(x.size())) / (Scalar(1) + gw);
        }
        case ProxKind::box_indicator: {
            Vector<Scalar> y(x.size());
            f.check_bounds(x.size());
            for (Index i = 0; i < x.size(); ++i) y(i) = std::clamp(x(i), f.lower(i), f.upper(i));
            return y;
        }
        case ProxKind::custom: return f.custom_prox()(x, gamma);
    }
    return x;
}

namespace detail {

// argmin_y f(y) + 1/2 ||x - y||_U^2 by accelerated proximal gradient in the
// Euclidean geometry; the smooth part is 1/2 (y - x)^T U (y - x), which is
// lambda_min(U)-strongly convex with lambda_max(U)-Lipschitz gradient.
template <typename Scalar>
Vector<Scalar> metric_prox_iterative(const ProxFunction<Scalar>& f, const Vector<Scalar>& x,
                                     const SpdMetric<Scalar>& U) {
    const Scalar L = U.max_eigenvalue();
    const Scalar mu = U.min_eigenvalue();
    const Scalar step = Scalar(1) / L;
    const Scalar momentum = (std::sqrt(L) - std::sqrt(mu)) / (std::sqrt(L) + std::sqrt(mu));
    Vector<Scalar> y = prox(f, x, step);
    Vector<Scalar> z = y;
    constexpr int kMaxIter = 200000;
    for (int it = 0; it < kMaxIter; ++it) {
        const Vector<Scalar> y_next = prox(f, Vector<Scalar>(z - step * (U.matrix() * (z - x))), step);
        // ||y_next - y*|| <= (L / mu) ||z - y_next|| for the gradient mapping at z.
        const Scalar bound = (L / mu) * (z - y_next).norm();
        const bool stalled = (y_next - y).norm() == Scalar(0);
        z = y_next + momentum * (y_next - y);
        y = y_next;
        if (bound <= Scalar(1e-13) * (Scalar(1) + y.norm()) || stalled) return y;
    }
    throw ConvergenceError("metric_prox: inner solver did not converge", double(y.norm()));
}

}  // namespace detail

/// prox^U_f(x) = argmin_y f(y) + 1/2 ||x - y||_U^2  (= J_{U^{-1} df}(x)).
template <typename Scalar>
Vector<Scalar> metric_prox(const ProxFunction<Scalar>& f, const Vector<Scalar>& x, const SpdMetric<Scalar>& U) {
    U.require(x);
    if (U.is_scalar()) return prox(f, x, Scalar(1) / U.scalar_value());
    switch (f.kind()) {
        case ProxKind::zero: return x;
        case ProxKind::squared_l2: {
            const Matrix<Scalar> system =
                U.matrix() + f.weight() * Matrix<Scalar>::Identity(x.size(), x.size());
            const Vector<Scalar> rhs = U.matrix() * x + f.weight() * f.center_vector(x.size());
            return system.llt().solve(rhs);
        }
        case ProxKind::l1:
            if (U.is_diagonal()) {
                Vector<Scalar> y(x.size());
                for (Index i = 0; i < x.size(); ++i) {
                    const Scalar t = f.weight() / U.matrix()(i, i);
                    const Scalar v = x(i);
                    y(i) = v > t ? v - t : (v < -t ? v + t : Scalar(0));
                }
                return y;
            }
            return detail::metric_prox_iterative(f, x, U);
        case ProxKind::box_indicator:
            if (U.is_diagonal()) return prox(f, x, Scalar(1));
            return detail::metric_prox_iterative(f, x, U);
        case ProxKind::custom:
            if (f.custom_metric_prox()) return f.custom_metric_prox()(x, U);
            return detail::metric_prox_iterative(f, x, U);
    }
    return x;
}

/// prox^{U^{-1}}_{g*}(v) by the variable-metric Moreau decomposition
///   prox^{U^{-1}}_{g*}(v) = v - U prox^U_g(U^{-1} v).
template <typename Scalar>
Vector<Scalar> conjugate_prox(const ProxFunction<Scalar>& g, const Vector<Scalar>& v, const SpdMetric<Scalar>& U) {
    U.require(v);
    if (U.is_scalar()) {
        const Scalar s = U.scalar_value();
        return v - s * prox(g, Vector<Scalar>(v / s), Scalar(1) / s);
    }
    return v - U.apply(metric_prox(g, U.apply_inverse(v), U));
}

/// Moreau envelope of f with parameter rho, as a custom prox function.
/// prox_{gamma env}(x) = x + gamma / (gamma + rho) (prox_{(gamma + rho) f}(x) - x).
template <typename Scalar>
ProxFunction<Scalar> moreau_envelope(const ProxFunction<Scalar>& f, Scalar rho) {
    if (!(rho > 0)) throw ParameterError("moreau_envelope: rho must be positive");
    auto value = [f, rho](const Vector<Scalar>& x) {
        const Vector<Scalar> p = prox(f, x, rho);
        return f.value(p) + (x - p).squaredNorm() / (Scalar(2) * rho);
    };
    auto px = [f, rho](const Vector<Scalar>& x, Scalar gamma) {
        const Vector<Scalar> p = prox(f, x, gamma + rho);
        return Vector<Scalar>(x + (gamma / (gamma + rho)) * (p - x));
    };
    return ProxFunction<Scalar>::custom("moreau_envelope", value, px);
}

/// A maximally monotone operator A exposed through its resolvent J_{gamma A} = (Id + gamma A)^{-1}.
template <typename Scalar>
class ResolventOperator {
public:
    using Vec = Vector<Scalar>;
    using Rule = std::function<Vec(const Vec&, Scalar)>;

    /// A = df; J_{gamma A} = prox_{gamma f}.
    static ResolventOperator subdifferential(ProxFunction<Scalar> f) {
        ResolventOperator A;
        A.function_ = std::make_shared<const ProxFunction<Scalar>>(std::move(f));
        return A;
    }

    static ResolventOperator zero() { return subdifferential(ProxFunction<Scalar>::zero()); }

    /// Custom rule x -> J_{gamma A} x, valid for gamma in ]gamma_min, gamma_max].
    static ResolventOperator custom(Rule rule, Scalar gamma_min = 0,
                                    Scalar gamma_max = std::numeric_limits<Scalar>::infinity()) {
        if (!rule) throw ParameterError("custom resolvent needs a rule");
        ResolventOperator A;
        A.rule_ = std::move(rule);
        A.gamma_min_ = gamma_min;
        A.gamma_max_ = gamma_max;
        return A;
    }

    bool is_subdifferential() const noexcept { return function_ != nullptr; }
    /// The function whose subdifferential this is; null for custom rules.
    const ProxFunction<Scalar>* function() const noexcept { return function_.get(); }

    Vec apply(const Vec& x, Scalar gamma) const {
        if (!(gamma > gamma_min_) || !(gamma <= gamma_max_)) {
            throw ParameterError("resolvent: gamma outside the operator's validity range");
        }
        if (function_) return prox(*function_, x, gamma);
        return rule_(x, gamma);
    }

private:
    std::shared_ptr<const ProxFunction<Scalar>> function_;
    Rule rule_;
    Scalar gamma_min_{0};
    Scalar gamma_max_{std::numeric_limits<Scalar>::infinity()};
};

template <typename Scalar>
Vector<Scalar> resolvent(const ResolventOperator<Scalar>& A, const Vector<Scalar>& x, Scalar gamma) {
    return A.apply(x, gamma);
}

/// Single-valued theta-cocoercive operator B:
///   <x - y, Bx - By> >= theta ||Bx - By||^2.
template <typename Scalar>
class CocoerciveMap {
public:
    using Vec = Vector<Scalar>;
    using Rule = std::function<Vec(const Vec&)>;
    using ValueRule = std::function<Scalar(const Vec&)>;

    static CocoerciveMap custom(Index dim, Rule rule, Scalar theta, ValueRule value = {}) {
        if (!(theta > 0)) throw ParameterError("cocoercive map: theta must be positive");
        CocoerciveMap B;
        B.dim_ = dim;
        B.rule_ = std::move(rule);
        B.theta_ = theta;
        B.value_ = std::move(value);
        return B;
    }

    static CocoerciveMap identity(Index dim, Scalar theta = 1) {
        return custom(dim, [](const Vec& x) { return x; }, theta,
                      [](const Vec& x) { return Scalar(0.5) * x.squaredNorm(); });
    }

    /// B = 0, cocoercive for every theta.
    static CocoerciveMap zero(Index dim) {
        return custom(dim, [dim](const Vec&) { return Vec(Vec::Zero(dim)); },
                      std::numeric_limits<Scalar>::infinity(), [](const Vec&) { return Scalar(0); });
    }

    /// x -> x - b, the gradient of 1/2 ||x - b||^2.
    static CocoerciveMap shift(Vec b) {
        const Index n = b.size();
        return custom(n, [b](const Vec& x) { return Vec(x - b); }, Scalar(1),
                      [b](const Vec& x) { return Scalar(0.5) * (x - b).squaredNorm(); });
    }

    /// Gradient of h(x) = 1/2 ||K x - z||^2, theta = 1 / ||K||^2.
    static CocoerciveMap quadratic(Matrix<Scalar> K, Vec z) {
        if (K.rows() != z.size()) throw StructuralError("quadratic: K rows must match z");
        const Scalar nrm = operator_norm(LinearMap<Scalar>(K));
        const Scalar theta = nrm > 0 ? Scalar(1) / (nrm * nrm) : std::numeric_limits<Scalar>::infinity();
        auto Kp = std::make_shared<const Matrix<Scalar>>(std::move(K));
        auto zp = std::make_shared<const Vec>(std::move(z));
        return custom(
            Kp->cols(), [Kp, zp](const Vec& x) { return Vec(Kp->transpose() * (*Kp * x - *zp)); }, theta,
            [Kp, zp](const Vec& x) { return Scalar(0.5) * (*Kp * x - *zp).squaredNorm(); });
    }

    /// Gradient of h(x) = 1/2 x^T Q x - b^T x for symmetric positive semidefinite Q, theta = 1 / ||Q||.
    static CocoerciveMap quadratic_form(Matrix<Scalar> Q, Vec b) {
        if (Q.rows() != Q.cols() || Q.rows() != b.size()) throw StructuralError("quadratic_form: shape mismatch");
        const Scalar nrm = operator_norm(LinearMap<Scalar>(Q));
        const Scalar theta = nrm > 0 ? Scalar(1) / nrm : std::numeric_limits<Scalar>::infinity();
        auto Qp = std::make_shared<const Matrix<Scalar>>(std::move(Q));
        auto bp = std::make_shared<const Vec>(std::move(b));
        return custom(
            Qp->rows(), [Qp, bp](const Vec& x) { return Vec(*Qp * x - *bp); }, theta,
            [Qp, bp](const Vec& x) { return Scalar(0.5) * x.dot(*Qp * x) - bp->dot(x); });
    }

    Index dim() const noexcept { return dim_; }
    Scalar theta() const noexcept { return theta_; }
    bool has_value() const noexcept { return static_cast<bool>(value_); }
    Scalar value(const Vec& x) const { return value_ ? value_(x) : std::numeric_limits<Scalar>::quiet_NaN(); }

    Vec apply(const Vec& x) const {
        if (x.size() != dim_) throw StructuralError("cocoercive map: dimension mismatch");
        return rule_(x);
    }
    Vec operator()(const Vec& x) const { return apply(x); }

    /// Same rule with a different declared constant (used to test the checker).
    CocoerciveMap with_theta(Scalar theta) const {
        CocoerciveMap B = *this;
        B.theta_ = theta;
        return B;
    }

private:
    Index dim_{0};
    Rule rule_;
    Scalar theta_{0};
    ValueRule value_;
};

/// User declaration feeding the strong- versus weak-convergence claim in run summaries.
struct DemiregularityFlag {
    bool holds_for_A = false;
    bool holds_for_B = false;
    std::string justification;

    bool any() const noexcept { return holds_for_A || holds_for_B; }
};

/// Outcome of a sampled operator-property check; violations are reported, never thrown.
struct PropertyReport {
    std::string property;
    std::size_t samples = 0;
    std::size_t violations = 0;
    /// Smallest (lhs - rhs) over the samples; negative beyond the slack means a violation.
    double worst_margin = std::numeric_limits<double>::infinity();

    bool passed() const noexcept { return violations == 0; }
};

namespace detail {

template <typename Scalar>
Vector<Scalar> sample_normal(std::mt19937_64& rng, Index n, Scalar scale) {
    std::normal_distribution<double> normal;
    Vector<Scalar> v(n);
    for (Index i = 0; i < n; ++i) v(i) = Scalar(scale * normal(rng));
    return v;
}

}  // namespace detail

/// Samples pairs (x, y) ~ N(0, scale^2 I) and tests
///   <x - y, Bx - By> >= theta ||Bx - By||^2 - 1e-9 (1 + ||x - y||^2).
template <typename Scalar>
PropertyReport check_cocoercive(const CocoerciveMap<Scalar>& B, std::size_t samples, std::uint64_t rng_seed,
                                Scalar scale = Scalar(2)) {
    if (samples < 1) throw ParameterError("check_cocoercive: samples must be >= 1");
    std::mt19937_64 rng(rng_seed);
    PropertyReport report{"cocoercivity", samples, 0, std::numeric_limits<double>::infinity()};
    for (std::size_t s = 0; s < samples; ++s) {
        const Vector<Scalar> x = detail::sample_normal<Scalar>(rng, B.dim(), scale);
        const Vector<Scalar> y = detail::sample_normal<Scalar>(rng, B.dim(), scale);
        const Vector<Scalar> d = x - y;
        const Vector<Scalar> dB = B.apply(x) - B.apply(y);
        const Scalar dB2 = dB.squaredNorm();
        const Scalar rhs = dB2 == Scalar(0) ? Scalar(0) : B.theta() * dB2;
        const Scalar margin = d.dot(dB) - rhs;
        report.worst_margin = std::min(report.worst_margin, double(margin));
        if (margin < -Scalar(1e-9) * (Scalar(1) + d.squaredNorm())) ++report.violations;
    }
    return report;
}

/// Samples pairs and tests
///   ||Jx - Jy||^2 + ||(x - Jx) - (y - Jy)||^2 <= ||x - y||^2 + 1e-9 (1 + ||x - y||^2).
template <typename Scalar>
PropertyReport check_firmly_nonexpansive(const std::function<Vector<Scalar>(const Vector<Scalar>&)>& J, Index dim,
                                         std::size_t samples, std::uint64_t rng_seed, Scalar scale = Scalar(2)) {
    if (samples < 1) throw ParameterError("check_firmly_nonexpansive: samples must be >= 1");
    std::mt19937_64 rng(rng_seed);
    PropertyReport report{"firm nonexpansiveness", samples, 0, std::numeric_limits<double>::infinity()};
    for (std::size_t s = 0; s < samples; ++s) {
        const Vector<Scalar> x = detail::sample_normal<Scalar>(rng, dim, scale);
        const Vector<Scalar> y = detail::sample_normal<Scalar>(rng, dim, scale);
        const Vector<Scalar> Jx = J(x);
        const Vector<Scalar> Jy = J(y);
        const Scalar d2 = (x - y).squaredNorm();
        const Scalar lhs = (Jx - Jy).squaredNorm() + ((x - Jx) - (y - Jy)).squaredNorm();
        const Scalar margin = d2 - lhs;
        report.worst_margin = std::min(report.worst_margin, double(margin));
        if (margin < -Scalar(1e-9) * (Scalar(1) + d2)) ++report.violations;
    }
    return report;
}

template <typename Scalar>
PropertyReport check_firmly_nonexpansive(const ResolventOperator<Scalar>& A, Scalar gamma, Index dim,
                                         std::size_t samples, std::uint64_t rng_seed, Scalar scale = Scalar(2)) {
    return check_firmly_nonexpansive<Scalar>([&](const Vector<Scalar>& x) { return A.apply(x, gamma); }, dim,
                                             samples, rng_seed, scale);
}

}  // namespace sfbs
