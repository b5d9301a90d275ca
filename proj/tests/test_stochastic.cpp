#include <doctest.h>

#include "sfbs/stochastic.hpp"
#include "test_support.hpp"

using namespace sfbs;
using sfbs_test::gaussian_vector;

namespace {

LinearModelDistribution standard_normal_model(Index rows, Index cols, VectorXd x_true, double z_std) {
    LinearModelDistribution d;
    d.K_mean = MatrixXd::Zero(rows, cols);
    d.K_std = 1.0;
    d.x_true = std::move(x_true);
    d.z_offset = VectorXd::Zero(rows);
    d.z_std = z_std;
    return d;
}

LinearModelDistribution degenerate_model() {
    LinearModelDistribution d;
    d.K_mean = MatrixXd{{2.0, 0.5}, {0.0, 1.0}, {1.0, -1.0}};
    d.K_std = 0.0;
    d.x_true = VectorXd{{0.3, -0.2}};
    d.z_offset = VectorXd{{0.1, 0.0, -0.1}};
    d.z_std = 0.0;
    return d;
}

IterationSchedule schedule(double theta_gamma, double tau, double lambda) {
    IterationSchedule::Rules r;
    r.gamma = SequenceRule::constant(theta_gamma);
    r.tau = SequenceRule::constant(tau);
    r.lambda = SequenceRule::constant(lambda);
    return IterationSchedule(r);
}

}  // namespace

TEST_CASE("sequence rules") {
    const auto p = SequenceRule::power(1.0, 0.9);
    CHECK(p(0) == 1.0);
    CHECK(p(9) == doctest::Approx(std::pow(10.0, -0.9)));
    CHECK(SequenceRule::constant(1.5)(123) == 1.5);
    CHECK(SequenceRule::geometric(2.0, 0.5)(3) == doctest::Approx(0.25));

    CHECK(*SequenceRule::power(1.0, 1.1).summable());
    CHECK_FALSE(*SequenceRule::power(1.0, 1.0).summable());
    CHECK(*SequenceRule::geometric(1.0, 0.99).summable());
    CHECK(*SequenceRule::zero().summable());
    CHECK_FALSE(*SequenceRule::constant(1e-9).summable());
    CHECK_FALSE(SequenceRule::custom([](Index) { return 0.0; }).summable().has_value());

    // sqrt(lambda_n) * n^-1.2 with lambda_n = n^-0.9 is n^-1.65
    const auto prod = SequenceRule::power(1.0, 0.9).pow(0.5).times(SequenceRule::power(3.0, 1.2));
    CHECK(prod.exponent() == doctest::Approx(1.65));
    CHECK(prod.coefficient() == doctest::Approx(3.0));
    CHECK(*prod.summable());

    CHECK(*SequenceRule::power(2.0, 0.5).sup() == 2.0);
    CHECK(*SequenceRule::power(2.0, 0.5).inf() == 0.0);
    CHECK(std::isinf(*SequenceRule::power(1.0, -0.5).sup()));
    CHECK(SequenceRule::power(1.0, 0.5).nonincreasing());
    CHECK_THROWS_AS(SequenceRule::geometric(1.0, 0.0), ParameterError);
}

TEST_CASE("schedule evaluation and validation") {
    IterationSchedule::Rules r;
    r.lambda = SequenceRule::power(1.0, 0.9);
    r.gamma = SequenceRule::constant(1.5);
    r.batch = BatchRule(1, 1.0, 0.2);
    const IterationSchedule s(r);
    const ScheduleValues v0 = schedule_eval(s, 0);
    CHECK(v0.lambda == 1.0);
    CHECK(v0.gamma == 1.5);
    CHECK(v0.m == 1);
    CHECK(schedule_eval(s, 77).gamma == 1.5);
    CHECK(schedule_eval(s, 5).m == 1 + Index(std::ceil(std::pow(5.0, 1.2))));

    IterationSchedule::Rules bad = r;
    bad.lambda = SequenceRule::constant(1.5);
    CHECK_THROWS_AS(IterationSchedule{bad}, ConfigError);
    bad = r;
    bad.gamma = SequenceRule::constant(0.0);
    CHECK_THROWS_AS(IterationSchedule{bad}, ConfigError);
    bad = r;
    bad.tau = SequenceRule::constant(-0.1);
    CHECK_THROWS_AS(IterationSchedule{bad}, ConfigError);
    bad = r;
    bad.lambda = SequenceRule::custom([](Index n) { return n == 50 ? 0.0 : 0.5; });
    CHECK_THROWS_AS(IterationSchedule(bad, 100), ConfigError);
}

TEST_CASE("batch rule") {
    const BatchRule b(1, 1.0, 0.2);
    for (Index n = 1; n < 200; ++n) CHECK(b(n) > b(n - 1));
    CHECK_THROWS_AS(BatchRule(0, 1.0, 0.2), ConfigError);
    CHECK_THROWS_AS(BatchRule(1, 0.0, 0.2), ConfigError);
    CHECK_THROWS_AS(BatchRule(1, 1.0, 0.0), ConfigError);
    // ceil(1e-3 n^1.01) stalls at 1 for small n
    CHECK_THROWS_AS(BatchRule(1, 1e-3, 0.01), ConfigError);
}

TEST_CASE("batch/relaxation pair") {
    CHECK_NOTHROW(validate_batch_relaxation_pair(0.2, 0.9));
    CHECK_NOTHROW(validate_batch_relaxation_pair(0.2, 1.0));
    CHECK_THROWS_AS(validate_batch_relaxation_pair(0.2, 0.5), ConfigError);
    CHECK_THROWS_AS(validate_batch_relaxation_pair(0.2, 0.8), ConfigError);
    CHECK_THROWS_AS(validate_batch_relaxation_pair(0.2, 1.1), ConfigError);
    try {
        validate_batch_relaxation_pair(0.2, 0.5);
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("]1 - delta, 1]") != std::string::npos);
    }
}

TEST_CASE("exact and additive-noise oracles") {
    SampleLedger ledger(5);
    const auto exact = GradientOracle::exact(CocoerciveMapd::identity(2));
    const VectorXd x{{2.0, -1.0}};
    CHECK(exact.next_estimate(x, 3, ledger) == x);

    const auto noisy = GradientOracle::additive_noise(CocoerciveMapd::identity(2), NoiseDist::uniform_ball,
                                                      SequenceRule::power(1.0, 1.0), 9);
    for (Index n = 0; n < 50; ++n) {
        const VectorXd u = noisy.next_estimate(x, n, ledger);
        CHECK((u - x).norm() <= 1.0 / double(n + 1) + 1e-15);
        CHECK(u == noisy.next_estimate(x, n, ledger));
    }
    SampleLedger other(6);
    CHECK(noisy.next_estimate(x, 0, other) != noisy.next_estimate(x, 0, ledger));
    CHECK_THROWS_AS(exact.next_estimate(VectorXd::Zero(3), 0, ledger), StructuralError);
}

TEST_CASE("degenerate empirical oracle is exact") {
    const LinearModelDistribution d = degenerate_model();
    const auto o = GradientOracle::empirical_quadratic(d, BatchRule(1, 1.0, 0.2));
    SampleLedger ledger(3, d);
    const VectorXd x{{1.0, 2.0}};
    const VectorXd z = d.K_mean * d.x_true + d.z_offset;
    const VectorXd ref = d.K_mean.transpose() * (d.K_mean * x - z);
    for (Index n = 0; n < 10; ++n) CHECK((o.next_estimate(x, n, ledger) - ref).norm() <= 1e-12);

    const MomentEstimate m = estimate_conditional_moments(o, x, 4, 100, 1, ledger);
    CHECK(m.bias_norm <= 1e-12);
    CHECK(m.variance <= 1e-20);
}

TEST_CASE("empirical oracle against brute-force re-summation") {
    const auto d = standard_normal_model(3, 2, VectorXd{{1.0, -1.0}}, 0.5);
    const BatchRule batch(1, 1.0, 0.2);
    const auto o = GradientOracle::empirical_quadratic(d, batch);
    SampleLedger ledger(42, d);
    const VectorXd x{{0.4, 0.7}};
    const Index n = 3;
    const VectorXd u = o.next_estimate(x, n, ledger);

    const Index m = batch(n + 1);
    VectorXd sum = VectorXd::Zero(2);
    for (Index i = 0; i < m; ++i) sum += ledger.K(i).transpose() * (ledger.K(i) * x - ledger.z(i));
    CHECK((u - sum / double(m)).norm() <= 1e-12);
}

TEST_CASE("empirical oracle sample accounting") {
    const auto d = standard_normal_model(2, 2, VectorXd::Zero(2), 0.1);
    const BatchRule batch(2, 1.5, 0.3);
    const auto o = GradientOracle::empirical_quadratic(d, batch);
    SampleLedger ledger(1, d);
    VectorXd x = VectorXd::Zero(2);
    for (Index n = 0; n < 30; ++n) {
        (void)o.next_estimate(x, n, ledger);
        CHECK(ledger.size() == batch(n + 1));
    }
    SampleLedger foreign(1, degenerate_model());
    CHECK_THROWS_AS(o.next_estimate(x, 0, foreign), ReproducibilityError);
    SampleLedger bare(1);
    CHECK_THROWS_AS(o.next_estimate(x, 0, bare), ReproducibilityError);
}

TEST_CASE("ledger draws are reproducible") {
    const auto d = standard_normal_model(3, 3, VectorXd::Ones(3), 1.0);
    SampleLedger a(77, d), b(77, d), c(78, d);
    a.ensure(40);
    b.ensure(15);
    b.ensure(40);
    c.ensure(40);
    for (Index i = 0; i < 40; ++i) {
        CHECK(a.K(i) == b.K(i));
        CHECK(a.z(i) == b.z(i));
    }
    CHECK(a.K(0) != c.K(0));

    // without caching the running sums still match
    SampleLedger lean(77, d, false);
    lean.ensure(40);
    CHECK(lean.prefix_sums(40).first == a.prefix_sums(40).first);
    CHECK(lean.prefix_sums(40).second == a.prefix_sums(40).second);
}

TEST_CASE("conditional bias equals the frozen-prefix formula") {
    // i.i.d. standard normal K (M = 4 rows): E[K^T K] = 4 I, E[K^T z] = 4 x_true
    const VectorXd x_true{{0.5, -1.0, 2.0}};
    const auto d = standard_normal_model(4, 3, x_true, 0.3);
    const BatchRule batch(1, 2.0, 0.2);
    const auto o = GradientOracle::empirical_quadratic(d, batch);
    SampleLedger ledger(9, d);
    std::mt19937_64 rng(4);
    for (Index n : {1, 2, 5, 11}) {
        const VectorXd x = gaussian_vector(rng, 3);
        const VectorXd bias = o.conditional_bias(x, n, ledger);

        const Index m_cur = batch(n), m_next = batch(n + 1);
        MatrixXd Q = MatrixXd::Zero(3, 3);
        VectorXd r = VectorXd::Zero(3);
        for (Index i = 0; i < m_cur; ++i) {
            Q += ledger.K(i).transpose() * ledger.K(i) - 4.0 * MatrixXd::Identity(3, 3);
            r += ledger.K(i).transpose() * ledger.z(i) - 4.0 * x_true;
        }
        const VectorXd expect = (Q * x - r) / double(m_next);
        CHECK((bias - expect).norm() <= 1e-11 * (1.0 + expect.norm()));
    }
}

TEST_CASE("conditional moments of the empirical oracle") {
    SampleLedger exact_ledger(1);
    const auto exact = GradientOracle::exact(CocoerciveMapd::identity(2));
    const MomentEstimate e = estimate_conditional_moments(exact, VectorXd{{1.0, 1.0}}, 3, 10, 0, exact_ledger);
    CHECK(e.bias_norm == 0.0);
    CHECK(e.variance == 0.0);

    // 2x2 standard normal K, z = 0, x = e1, m_1 = 10, m_2 = 20
    const auto d = standard_normal_model(2, 2, VectorXd::Zero(2), 0.0);
    const BatchRule batch(1, 9.0, 0.05);
    REQUIRE(batch(1) == 10);
    REQUIRE(batch(2) == 20);
    const auto o = GradientOracle::empirical_quadratic(d, batch);
    const VectorXd x{{1.0, 0.0}};
    SampleLedger ledger(2024, d);
    const MomentEstimate est = estimate_conditional_moments(o, x, 1, 100000, 55, ledger, 2);

    // single-sample variance of K^T K x by an independent 1e6-draw Monte Carlo
    std::mt19937_64 rng(99);
    std::normal_distribution<double> normal;
    const int draws = 1000000;
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    std::vector<Eigen::Vector2d> ys(draws);
    for (int i = 0; i < draws; ++i) {
        Eigen::Matrix2d K;
        K << normal(rng), normal(rng), normal(rng), normal(rng);
        ys[i] = K.transpose() * (K * Eigen::Vector2d(1.0, 0.0));
        mean += ys[i];
    }
    mean /= draws;
    double var = 0.0, var2 = 0.0;
    for (const auto& y : ys) {
        const double q = (y - mean).squaredNorm();
        var += q;
        var2 += q * q;
    }
    var /= (draws - 1);
    const double var_se = std::sqrt((var2 / draws - var * var) / draws);
    const double expect = 10.0 * var / 400.0;
    const double expect_se = 10.0 * var_se / 400.0;
    const double combined = std::sqrt(expect_se * expect_se + est.variance_se * est.variance_se);
    CHECK(std::abs(est.variance - expect) <= 3.0 * combined);
    CHECK(var == doctest::Approx(6.0).epsilon(0.02));

    // the result does not depend on the worker count
    SampleLedger ledger2(2024, d);
    const MomentEstimate serial = estimate_conditional_moments(o, x, 1, 100000, 55, ledger2, 1);
    CHECK(serial.variance == est.variance);
    CHECK(serial.bias_norm == est.bias_norm);
}

TEST_CASE("perturbation sources") {
    CHECK(next_perturbation(PerturbationSource::zero(), 3, 4, 1).norm() == 0.0);
    const auto p = PerturbationSource::decaying(NoiseDist::uniform_ball, SequenceRule::geometric(1.0, 0.5), 3);
    const VectorXd a4 = next_perturbation(p, 4, 5, 10);
    CHECK(a4.norm() <= std::pow(2.0, -4) + 1e-15);
    CHECK(a4 == next_perturbation(p, 4, 5, 10));
    CHECK(a4 != next_perturbation(p, 4, 5, 11));

    const auto blocks = PerturbationSource::blocks({PerturbationSource::zero(), p}, {2, 3});
    const VectorXd ab = blocks.next(4, 5, 10);
    CHECK(ab.head(2).norm() == 0.0);
    CHECK(ab.tail(3).norm() <= std::pow(2.0, -4) + 1e-15);
    CHECK_THROWS_AS(blocks.next(4, 6, 10), StructuralError);
    CHECK(blocks.bounds().size() == 1);

    const auto sched = PerturbationSource::scheduled(
        [](Index n, Index dim) { return VectorXd(VectorXd::Constant(dim, n == 0 ? 0.1 : 0.0)); },
        SequenceRule::geometric(0.1, 0.0 + 1e-3));
    CHECK(sched.next(0, 1, 0)(0) == 0.1);
    CHECK(sched.next(1, 1, 0)(0) == 0.0);
}

TEST_CASE("noise scaling") {
    std::mt19937_64 rng(12);
    double total = 0.0;
    for (int i = 0; i < 20000; ++i) total += draw_noise(NoiseDist::gaussian, 8, rng).squaredNorm();
    CHECK(total / 20000 == doctest::Approx(1.0).epsilon(0.03));
    for (int i = 0; i < 1000; ++i) CHECK(draw_noise(NoiseDist::uniform_ball, 3, rng).norm() <= 1.0);
}

TEST_CASE("admissibility certificate, step-size clause") {
    CHECK(admissibility_certificate(schedule(1.5, 0.0, 1.0), 1.0).passed());

    const CertificateReport at = admissibility_certificate(schedule(2.0, 0.0, 1.0), 1.0);
    CHECK_FALSE(at.passed());
    REQUIRE(at.find("(e)"));
    CHECK(at.find("(e)")->status == ClauseStatus::fail);

    const CertificateReport over = admissibility_certificate(schedule(1.5, 0.5, 1.0), 1.0);
    CHECK(over.find("(e)")->status == ClauseStatus::fail);

    // boundary: exactly 2 theta fails, one ulp below passes
    const double cap = 2.0 * 0.37;
    CHECK(admissibility_certificate(schedule(cap, 0.0, 1.0), 0.37).find("(e)")->status == ClauseStatus::fail);
    CHECK(admissibility_certificate(schedule(std::nextafter(cap, 0.0), 0.0, 1.0), 0.37).find("(e)")->status ==
          ClauseStatus::pass);

    // custom rules are scanned to the horizon; a late excursion is caught with its index
    IterationSchedule::Rules r;
    r.gamma = SequenceRule::custom([](Index n) { return n == 700 ? 2.5 : 1.0; });
    CertificateInputs in;
    in.horizon = 1000;
    const CertificateReport late = admissibility_certificate(IterationSchedule(r, 1000), 1.0, in);
    CHECK(late.find("(e)")->status == ClauseStatus::fail);
    CHECK(*late.find("(e)")->witness == 700);
}

TEST_CASE("admissibility certificate, error clauses") {
    IterationSchedule::Rules r;
    r.lambda = SequenceRule::power(1.0, 0.9);
    r.gamma = SequenceRule::constant(1.0);
    const IterationSchedule s(r);

    CertificateInputs in;
    in.perturbation_bounds = {SequenceRule::power(1.0, 0.2)};
    CHECK(admissibility_certificate(s, 1.0, in).find("(b)")->status == ClauseStatus::pass);
    in.perturbation_bounds = {SequenceRule::power(1.0, 0.05)};
    CHECK(admissibility_certificate(s, 1.0, in).find("(b)")->status == ClauseStatus::fail);

    in = {};
    in.bias_envelope = std::nullopt;
    CHECK(admissibility_certificate(s, 1.0, in).find("(c)")->status == ClauseStatus::fail);
    in.bias_envelope = SequenceRule::power(1.0, 1.2);
    CHECK(admissibility_certificate(s, 1.0, in).find("(c)")->status == ClauseStatus::pass);

    in = {};
    in.zeta_envelope = SequenceRule::power(1.0, 2.2);
    CHECK(admissibility_certificate(s, 1.0, in).find("(d)")->status == ClauseStatus::pass);
    in.zeta_envelope = SequenceRule::power(1.0, 0.5);
    CHECK(admissibility_certificate(s, 1.0, in).find("(d)")->status == ClauseStatus::fail);

    // lambda_n -> 0 needs sum lambda_n = inf
    r.lambda = SequenceRule::power(1.0, 1.5);
    CHECK(admissibility_certificate(IterationSchedule(r), 1.0).find("(f)")->status == ClauseStatus::fail);
    r.lambda = SequenceRule::power(1.0, 1.0);
    r.gamma = SequenceRule::power(1.0, 0.1);
    CHECK(admissibility_certificate(IterationSchedule(r), 1.0).find("(f)")->status == ClauseStatus::fail);
}

TEST_CASE("certificate for the empirical oracle schedule") {
    const auto d = standard_normal_model(2, 2, VectorXd::Zero(2), 0.1);
    IterationSchedule::Rules r;
    r.lambda = SequenceRule::power(1.0, 0.9);
    r.gamma = SequenceRule::constant(0.1);
    const auto o = GradientOracle::empirical_quadratic(d, BatchRule(1, 1.0, 0.2));
    const auto in = certificate_inputs(o, PerturbationSource::zero());
    const auto rep = admissibility_certificate(IterationSchedule(r), 1.0, in);
    CHECK(rep.passed());
    CHECK(rep.to_json().contains("clauses"));
}
