#include <doctest.h>

#include "sfbs/operators.hpp"
#include "test_support.hpp"

using namespace sfbs;
using sfbs_test::gaussian_matrix;
using sfbs_test::gaussian_vector;
using sfbs_test::random_spd;

using Fn = ProxFunction<double>;

namespace {

std::vector<Fn> catalog(Index dim) {
    return {Fn::zero(), Fn::l1(0.7), Fn::squared_l2(1.3, VectorXd::Constant(1, 0.4)),
            Fn::box_indicator(VectorXd::Constant(dim, -0.5), VectorXd::Constant(dim, 1.0))};
}

}  // namespace

TEST_CASE("prox examples") {
    const VectorXd p = prox(Fn::l1(1.0), VectorXd{{2.0, -0.5}}, 1.0);
    CHECK(p(0) == 1.0);
    CHECK(p(1) == 0.0);
    // grid minimization of |y1| + |y2| + 1/2 ||x - y||^2 on [-3, 3]^2
    const Eigen::Vector2d g = sfbs_test::grid_argmin_2d(
        [](double a, double b) {
            return std::abs(a) + std::abs(b) + 0.5 * ((2.0 - a) * (2.0 - a) + (-0.5 - b) * (-0.5 - b));
        },
        -3.0, 3.0, 1e-3);
    CHECK((g - p).norm() <= 2e-3);

    const VectorXd x{{0.3, -7.0}};
    CHECK(prox(Fn::zero(), x, 4.2) == x);
    CHECK(prox(Fn::box_indicator(0.0, 1.0), VectorXd{{1.7}}, 2.0)(0) == 1.0);
    CHECK_THROWS_AS(prox(Fn::l1(1.0), x, 0.0), ParameterError);
    CHECK_THROWS_AS(prox(Fn::l1(1.0), x, -1.0), ParameterError);
    CHECK_THROWS_AS(Fn::l1(-1.0), ParameterError);
    CHECK_THROWS_AS(Fn::box_indicator(1.0, 0.0), ParameterError);
}

TEST_CASE("custom prox rule failures propagate") {
    Fn bad = Fn::custom(
        "bad", [](const VectorXd&) { return 0.0; },
        [](const VectorXd&, double) -> VectorXd { throw std::domain_error("rule failed"); });
    CHECK_THROWS_AS(prox(bad, VectorXd{{1.0}}, 1.0), std::domain_error);
}

TEST_CASE("metric prox examples") {
    // U = (1/sigma) I, sigma = 2: prox^U_f = prox_{sigma f}
    const SpdMetric<double> U = SpdMetric<double>::scaled_identity(1, 0.5);
    const VectorXd p = metric_prox(Fn::l1(1.0), VectorXd{{3.0}}, U);
    CHECK(p(0) == 1.0);
    const double g = sfbs_test::grid_argmin_1d(
        [](double y) { return std::abs(y) + 0.25 * (3.0 - y) * (3.0 - y); }, -5.0, 5.0, 1e-3);
    CHECK(std::abs(g - 1.0) <= 2e-3);

    std::mt19937_64 rng(8);
    const SpdMetric<double> M(random_spd(rng, 3));
    const VectorXd x = gaussian_vector(rng, 3);
    CHECK(metric_prox(Fn::zero(), x, M) == x);
}

TEST_CASE("conjugate prox examples") {
    std::mt19937_64 rng(4);
    const SpdMetric<double> U(random_spd(rng, 2));
    const VectorXd v{{0.4, -2.0}};
    CHECK(conjugate_prox(Fn::zero(), v, U).norm() <= 1e-12);
    const VectorXd c = conjugate_prox(Fn::l1(1.0), v, SpdMetric<double>::identity(2));
    CHECK(c(0) == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(c(1) == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("resolvent examples") {
    CHECK(resolvent(ResolventOperator<double>::subdifferential(Fn::box_indicator(0.0, 1.0)), VectorXd{{2.0}}, 0.3)(0) ==
          1.0);
    const VectorXd x{{1.5, -2.0}};
    CHECK(resolvent(ResolventOperator<double>::zero(), x, 7.0) == x);
    // A = d(1/2 ||.||^2): y + gamma y = x
    const auto A = ResolventOperator<double>::subdifferential(Fn::squared_l2(1.0));
    CHECK(resolvent(A, VectorXd{{4.0}}, 1.0)(0) == doctest::Approx(2.0).epsilon(1e-15));

    const auto limited = ResolventOperator<double>::custom([](const VectorXd& v, double) { return v; }, 0.0, 1.0);
    CHECK_THROWS_AS(limited.apply(x, 2.0), ParameterError);
    CHECK_THROWS_AS(limited.apply(x, 0.0), ParameterError);
}

TEST_CASE("cocoercivity checker") {
    const auto id = CocoerciveMap<double>::identity(3);
    const PropertyReport r = check_cocoercive(id, 1000, 1);
    CHECK(r.passed());
    CHECK(r.worst_margin == doctest::Approx(0.0).epsilon(1e-12));

    const auto quad = CocoerciveMap<double>::quadratic(MatrixXd{{2.0, 0.0}, {0.0, 1.0}}, VectorXd{{1.0, -1.0}});
    CHECK(quad.theta() == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(check_cocoercive(quad, 1000, 2).passed());

    const PropertyReport bad = check_cocoercive(id.with_theta(2.0), 1000, 3);
    CHECK_FALSE(bad.passed());
    CHECK(bad.worst_margin < 0.0);

    std::mt19937_64 rng(19);
    for (int t = 0; t < 5; ++t) {
        const MatrixXd K = gaussian_matrix(rng, 6, 4);
        const auto B = CocoerciveMap<double>::quadratic(K, gaussian_vector(rng, 6));
        CHECK(check_cocoercive(B, 1000, 100 + t).passed());
    }
}

TEST_CASE("firm nonexpansiveness checker") {
    const auto proj = ResolventOperator<double>::subdifferential(Fn::box_indicator(0.0, 1.0));
    CHECK(check_firmly_nonexpansive(proj, 1.0, 4, 1000, 5).passed());

    using F = std::function<VectorXd(const VectorXd&)>;
    const PropertyReport ident = check_firmly_nonexpansive<double>(F([](const VectorXd& x) { return x; }), 3, 1000, 6);
    CHECK(ident.passed());
    const PropertyReport twice =
        check_firmly_nonexpansive<double>(F([](const VectorXd& x) { return VectorXd(2.0 * x); }), 3, 1000, 7);
    CHECK_FALSE(twice.passed());
    CHECK(twice.violations == 1000);

    for (const Fn& f : catalog(3)) {
        for (double gamma : {0.1, 1.0, 5.0}) {
            CHECK(check_firmly_nonexpansive(ResolventOperator<double>::subdifferential(f), gamma, 3, 1000, 9).passed());
        }
    }
    const auto env = moreau_envelope(Fn::l1(1.0), 0.5);
    CHECK(check_firmly_nonexpansive(ResolventOperator<double>::subdifferential(env), 0.8, 3, 1000, 10).passed());
}

TEST_CASE("prox optimality inequality") {
    std::mt19937_64 rng(31);
    for (const Fn& f : catalog(3)) {
        for (int t = 0; t < 20; ++t) {
            const VectorXd x = gaussian_vector(rng, 3, 2.0);
            const double gamma = 0.2 + std::uniform_real_distribution<double>(0.0, 2.0)(rng);
            const VectorXd p = prox(f, x, gamma);
            const double fp = f.value(p);
            REQUIRE(std::isfinite(fp));
            for (int s = 0; s < 100; ++s) {
                const VectorXd y = gaussian_vector(rng, 3, 2.0);
                const double fy = f.value(y);
                if (!std::isfinite(fy)) continue;
                CHECK(fy >= fp + (x - p).dot(y - p) / gamma - 1e-9 * (1.0 + std::abs(fp)));
            }
        }
    }
}

TEST_CASE("metric prox optimality inequality") {
    std::mt19937_64 rng(37);
    for (const Fn& f : catalog(3)) {
        for (int t = 0; t < 10; ++t) {
            const SpdMetric<double> U(random_spd(rng, 3));
            const VectorXd x = gaussian_vector(rng, 3, 2.0);
            const VectorXd p = metric_prox(f, x, U);
            const double fp = f.value(p);
            REQUIRE(std::isfinite(fp));
            for (int s = 0; s < 100; ++s) {
                const VectorXd y = gaussian_vector(rng, 3, 2.0);
                const double fy = f.value(y);
                if (!std::isfinite(fy)) continue;
                // the inner solver stops at a 1e-13 certified distance, so allow that much
                CHECK(fy >= fp + (U.matrix() * (x - p)).dot(y - p) - 1e-9 * (1.0 + std::abs(fp)));
            }
        }
    }
}

TEST_CASE("Moreau decomposition with U = I") {
    std::mt19937_64 rng(41);
    const SpdMetric<double> I = SpdMetric<double>::identity(3);
    for (const Fn& f : catalog(3)) {
        for (int t = 0; t < 50; ++t) {
            const VectorXd x = gaussian_vector(rng, 3, 2.0);
            CHECK((prox(f, x, 1.0) + conjugate_prox(f, x, I) - x).norm() <= 1e-10);
        }
    }
}

TEST_CASE("variable-metric Moreau decomposition") {
    std::mt19937_64 rng(43);
    for (const Fn& f : catalog(2)) {
        const SpdMetric<double> U(random_spd(rng, 2));
        for (int t = 0; t < 20; ++t) {
            const VectorXd v = gaussian_vector(rng, 2, 2.0);
            // v = prox^{U^{-1}}_{g*}(v) + U prox^U_g(U^{-1} v)
            const VectorXd lhs = conjugate_prox(f, v, U) + U.apply(metric_prox(f, U.apply_inverse(v), U));
            CHECK((lhs - v).norm() <= 1e-10);
        }
    }
}

TEST_CASE("prox with gamma equals metric prox with U = I / gamma") {
    std::mt19937_64 rng(47);
    for (const Fn& f : catalog(4)) {
        for (int t = 0; t < 30; ++t) {
            const double gamma = 0.1 + std::uniform_real_distribution<double>(0.0, 3.0)(rng);
            const VectorXd x = gaussian_vector(rng, 4, 2.0);
            const VectorXd a = prox(f, x, gamma);
            const VectorXd b = metric_prox(f, x, SpdMetric<double>::scaled_identity(4, 1.0 / gamma));
            CHECK((a - b).norm() <= 1e-12 * (1.0 + a.norm()));
            // diagonal but non-scalar metric takes the coordinatewise path
            const VectorXd d = metric_prox(f, x, SpdMetric<double>::diagonal(VectorXd::Constant(4, 1.0 / gamma)));
            CHECK((a - d).norm() <= 1e-12 * (1.0 + a.norm()));
        }
    }
}

TEST_CASE("squared_l2 metric prox matches the dense linear solve") {
    std::mt19937_64 rng(53);
    const VectorXd c{{0.2, -0.1, 0.7}};
    const Fn f = Fn::squared_l2(1.7, c);
    for (int t = 0; t < 50; ++t) {
        const MatrixXd U = random_spd(rng, 3);
        const VectorXd x = gaussian_vector(rng, 3, 2.0);
        const VectorXd ref = sfbs_test::quadratic_argmin(U, x, 1.7, c);
        CHECK((metric_prox(f, x, SpdMetric<double>(U)) - ref).norm() <= 1e-10);
    }
}

TEST_CASE("non-diagonal metric prox of l1 and box against a grid") {
    std::mt19937_64 rng(59);
    const Fn l1 = Fn::l1(0.8);
    const Fn box = Fn::box_indicator(VectorXd{{-0.5, -1.0}}, VectorXd{{1.0, 0.25}});
    for (int t = 0; t < 5; ++t) {
        const MatrixXd U = random_spd(rng, 2);
        const SpdMetric<double> M(U);
        const VectorXd x = gaussian_vector(rng, 2, 1.5);
        for (const Fn* f : {&l1, &box}) {
            const VectorXd p = metric_prox(*f, x, M);
            auto phi = [&](double a, double b) {
                const VectorXd y{{a, b}};
                return f->value(y) + 0.5 * (x - y).dot(U * (x - y));
            };
            const Eigen::Vector2d g = sfbs_test::grid_argmin_2d(phi, -4.0, 4.0, 1e-3);
            CHECK((g - p).norm() <= 2e-3);
        }
    }
}

TEST_CASE("Moreau envelope") {
    const Fn env = moreau_envelope(Fn::l1(1.0), 0.5);
    // Huber function: |x| - rho/2 outside [-rho, rho], x^2 / (2 rho) inside
    CHECK(env.value(VectorXd{{2.0}}) == doctest::Approx(1.75));
    CHECK(env.value(VectorXd{{0.2}}) == doctest::Approx(0.04));
    const double p = prox(env, VectorXd{{3.0}}, 1.0)(0);
    const double g = sfbs_test::grid_argmin_1d(
        [&](double y) { return env.value(VectorXd{{y}}) + 0.5 * (3.0 - y) * (3.0 - y); }, -5.0, 5.0, 1e-3);
    CHECK(std::abs(p - g) <= 2e-3);
    CHECK_THROWS_AS(moreau_envelope(Fn::l1(1.0), 0.0), ParameterError);
}

TEST_CASE("gradient maps") {
    const auto shift = CocoerciveMap<double>::shift(VectorXd{{3.0}});
    CHECK(shift.apply(VectorXd{{1.0}})(0) == -2.0);
    CHECK(shift.value(VectorXd{{1.0}}) == 2.0);
    const auto qf = CocoerciveMap<double>::quadratic_form(MatrixXd{{2.0, 0.0}, {0.0, 0.5}}, VectorXd{{1.0, 1.0}});
    CHECK(qf.theta() == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(check_cocoercive(qf, 1000, 12).passed());
    CHECK(CocoerciveMap<double>::zero(2).apply(VectorXd{{5.0, 1.0}}).norm() == 0.0);
    CHECK_THROWS_AS(CocoerciveMap<double>::quadratic(MatrixXd::Identity(2, 2), VectorXd::Zero(3)), StructuralError);
    CHECK_THROWS_AS(qf.apply(VectorXd::Zero(3)), StructuralError);
    CHECK_THROWS_AS(CocoerciveMap<double>::identity(2, 0.0), ParameterError);
}
