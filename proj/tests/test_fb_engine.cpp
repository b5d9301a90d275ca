#include <doctest.h>

#include "sfbs/fb_engine.hpp"
#include "sfbs/matrix_io.hpp"
#include "test_support.hpp"

using namespace sfbs;
using sfbs_test::source_path;

namespace {

IterationSchedule constant_schedule(double gamma, double lambda) {
    IterationSchedule::Rules r;
    r.gamma = SequenceRule::constant(gamma);
    r.lambda = SequenceRule::constant(lambda);
    return IterationSchedule(r);
}

FbState start(VectorXd x) {
    FbState s;
    s.x = std::move(x);
    return s;
}

struct Lasso {
    MatrixXd K;
    VectorXd z;
    double w = 0.1;
    FbProblem problem() const {
        return FbProblem{ResolventOperatord::subdifferential(ProxFunctiond::l1(w)), CocoerciveMapd::quadratic(K, z),
                         {}, {}, {}};
    }
};

Lasso lasso_fixture() {
    return {read_matrix_text(source_path("configs/fixtures/lasso_K.txt")),
            read_vector_text(source_path("configs/fixtures/lasso_z.txt"))};
}

}  // namespace

TEST_CASE("single steps") {
    SampleLedger ledger(1);
    const auto zero = PerturbationSource::zero();
    FbProblem p{ResolventOperatord::zero(), CocoerciveMapd::identity(1), {}, {}, {}};
    const auto exact = GradientOracle::exact(p.B);

    CHECK(fb_step(start(VectorXd{{5.0}}), p, exact, zero, constant_schedule(1.0, 1.0), ledger).x(0) == 0.0);
    CHECK(fb_step(start(VectorXd{{4.0}}), p, exact, zero, constant_schedule(1.0, 0.5), ledger).x(0) == 2.0);

    FbProblem q{ResolventOperatord::subdifferential(ProxFunctiond::box_indicator(0.0, 1.0)),
                CocoerciveMapd::shift(VectorXd{{3.0}}), {}, {}, {}};
    const FbState s1 = fb_step(start(VectorXd{{0.0}}), q, GradientOracle::exact(q.B), zero,
                               constant_schedule(1.0, 1.0), ledger);
    CHECK(s1.x(0) == 1.0);
    CHECK(s1.n == 1);

    StepDetail d;
    (void)fb_step(start(VectorXd{{4.0}}), p, exact, zero, constant_schedule(1.0, 0.5), ledger, &d);
    CHECK(d.u(0) == 4.0);
    CHECK(d.t(0) == 0.0);
    CHECK(d.a(0) == 0.0);
    CHECK_THROWS_AS(fb_step(start(VectorXd{{1.0, 2.0}}), p, exact, zero, constant_schedule(1.0, 1.0), ledger),
                    StructuralError);
}

TEST_CASE("varying resolvents") {
    SampleLedger ledger(1);
    FbProblem p{ResolventOperatord::subdifferential(ProxFunctiond::box_indicator(0.0, 1.0)), CocoerciveMapd::zero(1),
                {}, {}, {}};
    VaryingResolventFamily fam{[](Index n) {
        return ResolventOperatord::subdifferential(ProxFunctiond::box_indicator(0.0, 1.0 + std::ldexp(1.0, -int(n))));
    }};
    const auto exact = GradientOracle::exact(p.B);
    for (Index n : {0, 1, 4}) {
        FbState s = start(VectorXd{{3.0}});
        s.n = n;
        const FbState t =
            fb_step_varying(s, p, fam, exact, PerturbationSource::zero(), constant_schedule(1.0, 1.0), ledger);
        CHECK(t.x(0) == 1.0 + std::ldexp(1.0, -int(n)));
    }

    IterationSchedule::Rules r;
    r.beta = SequenceRule::geometric(1.0, 0.5);
    const IterationSchedule drift_sched(r);
    CHECK(check_drift(fam, p.A, drift_sched, 20, 1, 20, 3).passed());
    r.beta = SequenceRule::geometric(0.5, 0.5);
    CHECK_FALSE(check_drift(fam, p.A, IterationSchedule(r), 20, 1, 20, 3).passed());
}

TEST_CASE("degenerate family equals the fixed operator run bitwise") {
    const Lasso L = lasso_fixture();
    const FbProblem p = L.problem();
    const auto fam = VaryingResolventFamily::constant(p.A);
    const auto oracle = GradientOracle::exact(p.B);
    const auto sched = constant_schedule(p.B.theta(), 0.7);
    StoppingRule stop{300, 0.0, 1};
    RunOptions fixed, varying;
    varying.family = &fam;
    const RunTrace a = run(p, oracle, PerturbationSource::zero(), sched, stop, 1, VectorXd::Zero(10), fixed);
    const RunTrace b = run(p, oracle, PerturbationSource::zero(), sched, stop, 1, VectorXd::Zero(10), varying);
    REQUIRE(a.snapshots.size() == b.snapshots.size());
    for (std::size_t i = 0; i < a.snapshots.size(); ++i) CHECK(a.snapshots[i].x == b.snapshots[i].x);
}

TEST_CASE("residual") {
    FbProblem p{ResolventOperatord::zero(), CocoerciveMapd::identity(1), {}, {}, {}};
    CHECK(residual(p, VectorXd{{3.0}}, 1.0) == 3.0);
    CHECK_THROWS_AS(residual(p, VectorXd{{3.0}}, 0.0), ParameterError);

    const Lasso L = lasso_fixture();
    const FbProblem q = L.problem();
    const double gamma = q.B.theta();
    const auto path = sfbs_test::plain_lasso_fb(L.K, L.z, L.w, gamma, VectorXd::Zero(10), 100000);
    CHECK(residual(q, path.back(), gamma) <= 1e-10);
}

TEST_CASE("deterministic reduction to plain forward-backward") {
    const Lasso L = lasso_fixture();
    const FbProblem p = L.problem();
    const double gamma = 1.8 * p.B.theta();
    const auto plain = sfbs_test::plain_lasso_fb(L.K, L.z, L.w, gamma, VectorXd::Zero(10), 300);
    const RunTrace t = run(p, GradientOracle::exact(p.B), PerturbationSource::zero(), constant_schedule(gamma, 1.0),
                           StoppingRule{300, 0.0, 1}, 7, VectorXd::Zero(10));
    REQUIRE(t.snapshots.size() == plain.size());
    for (std::size_t i = 0; i < plain.size(); ++i) CHECK(t.snapshots[i].x == plain[i]);
}

TEST_CASE("deterministic lasso converges") {
    const Lasso L = lasso_fixture();
    FbProblem p = L.problem();
    const double gamma = p.B.theta();
    const RunTrace t = run(p, GradientOracle::exact(p.B), PerturbationSource::zero(), constant_schedule(gamma, 1.0),
                           StoppingRule{50000, 1e-8, 100}, 1, VectorXd::Zero(10));
    CHECK(t.termination == Termination::residual_tol);
    CHECK(t.last().residual <= 1e-8);
    CHECK(t.last().n < 50000);

    // compare the objective with a long run of the independent loop
    const auto ref = sfbs_test::plain_lasso_fb(L.K, L.z, L.w, gamma, VectorXd::Zero(10), 200000).back();
    CHECK(t.last().objective - p.objective_value(ref) <= 1e-8);
    CHECK(t.last().objective - p.objective_value(ref) >= -1e-12);
}

TEST_CASE("stochastic lasso with the empirical oracle") {
    const Lasso L = lasso_fixture();
    LinearModelDistribution d;
    d.K_mean = L.K;
    d.K_std = 0.05;
    d.x_true = VectorXd::Zero(10);
    d.z_offset = L.z;
    d.z_std = 0.05;
    const CocoerciveMapd B = d.gradient_field();
    FbProblem p{ResolventOperatord::subdifferential(ProxFunctiond::l1(L.w)), B, {}, {}, {}};
    const auto oracle = GradientOracle::empirical_quadratic(d, BatchRule(1, 1.0, 0.2));
    IterationSchedule::Rules r;
    r.gamma = SequenceRule::constant(1.8 * B.theta());
    r.lambda = SequenceRule::power(1.0, 0.9);
    const IterationSchedule sched(r);
    CHECK(certify(p, oracle, PerturbationSource::zero(), sched, false).passed());

    // h(x) = 1/2 ||R x - R^{-T} c||^2 + const with R^T R = E[K^T K], c = E[K^T z]
    const Eigen::LLT<MatrixXd> llt(d.second_moment());
    const MatrixXd R = llt.matrixU();
    const VectorXd y = llt.matrixL().solve(d.cross_moment());
    const auto xstar = sfbs_test::plain_lasso_fb(R, y, L.w, B.theta(), VectorXd::Zero(10), 100000).back();
    p.z_ref = {xstar};
    RunOptions opts;
    opts.cache_draws = false;
    const RunTrace t = run(p, oracle, PerturbationSource::zero(), sched, StoppingRule{20000, 0.0, 1000}, 42,
                           VectorXd::Zero(10), opts);
    CHECK(t.last().dist[0] <= 1e-3);
}

TEST_CASE("run bookkeeping") {
    const Lasso L = lasso_fixture();
    const FbProblem p = L.problem();
    const auto sched = constant_schedule(p.B.theta(), 1.0);
    const VectorXd x0 = VectorXd::Constant(10, 0.5);
    const RunTrace t0 =
        run(p, GradientOracle::exact(p.B), PerturbationSource::zero(), sched, StoppingRule{0, 0.0, 1}, 3, x0);
    REQUIRE(t0.records.size() == 1);
    REQUIRE(t0.snapshots.size() == 1);
    CHECK(t0.snapshots[0].x == x0);
    CHECK(t0.records[0].n == 0);

    const RunTrace thin =
        run(p, GradientOracle::exact(p.B), PerturbationSource::zero(), sched, StoppingRule{95, 0.0, 10}, 3, x0);
    CHECK(thin.records.size() == 96);
    CHECK(thin.snapshots.size() == 11);
    CHECK(thin.snapshots.back().n == 95);
}

TEST_CASE("seeded runs are bitwise reproducible") {
    const Lasso L = lasso_fixture();
    const FbProblem p = L.problem();
    const auto oracle = GradientOracle::additive_noise(p.B, NoiseDist::gaussian, SequenceRule::power(0.5, 1.5), 4);
    const auto pert = PerturbationSource::decaying(NoiseDist::uniform_ball, SequenceRule::power(0.1, 1.5), 5);
    const auto sched = constant_schedule(p.B.theta(), 0.8);
    const StoppingRule stop{500, 0.0, 1};
    const RunTrace a = run(p, oracle, pert, sched, stop, 11, VectorXd::Zero(10));
    const RunTrace b = run(p, oracle, pert, sched, stop, 11, VectorXd::Zero(10));
    const RunTrace c = run(p, oracle, pert, sched, stop, 12, VectorXd::Zero(10));
    REQUIRE(a.snapshots.size() == b.snapshots.size());
    for (std::size_t i = 0; i < a.snapshots.size(); ++i) CHECK(a.snapshots[i].x == b.snapshots[i].x);
    CHECK(trace_csv(a) == trace_csv(b));
    CHECK(a.snapshots.back().x != c.snapshots.back().x);
}

TEST_CASE("certificate gating") {
    const Lasso L = lasso_fixture();
    const FbProblem p = L.problem();
    const auto sched = constant_schedule(2.0 * p.B.theta(), 1.0);
    try {
        (void)run(p, GradientOracle::exact(p.B), PerturbationSource::zero(), sched, StoppingRule{10, 0.0, 1}, 1,
                  VectorXd::Zero(10));
        FAIL("expected ConditionViolation");
    } catch (const ConditionViolation& e) {
        CHECK(e.clause() == "(e)");
    }
    RunOptions forced;
    forced.force = true;
    CHECK_NOTHROW(run(p, GradientOracle::exact(p.B), PerturbationSource::zero(), sched, StoppingRule{10, 0.0, 1}, 1,
                      VectorXd::Zero(10), forced));
}

TEST_CASE("divergence carries the state and the partial trace") {
    // -x declared 1-cocoercive: every step multiplies x by 1 + gamma
    FbProblem p{ResolventOperatord::zero(),
                CocoerciveMapd::custom(1, [](const VectorXd& x) { return VectorXd(-x); }, 1.0), {}, {}, {}};
    const auto sched = constant_schedule(1.0, 1.0);
    try {
        (void)run(p, GradientOracle::exact(p.B), PerturbationSource::zero(), sched, StoppingRule{1000, 0.0, 1}, 1,
                  VectorXd{{1.0}});
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.state().n == 40);
        CHECK(e.state().x(0) == std::ldexp(1.0, 40));
        REQUIRE(e.partial_trace());
        CHECK(e.partial_trace()->termination == Termination::diverged);
        CHECK(e.partial_trace()->records.size() == 40);
        CHECK(e.partial_trace()->snapshots.back().x(0) == std::ldexp(1.0, 39));
    }

    FbProblem nan_p{ResolventOperatord::zero(),
                    CocoerciveMapd::custom(1, [](const VectorXd& x) { return VectorXd(x * std::nan("")); }, 1.0),
                    {}, {}, {}};
    SampleLedger ledger(1);
    CHECK_THROWS_AS(fb_step(start(VectorXd{{1.0}}), nan_p, GradientOracle::exact(nan_p.B), PerturbationSource::zero(),
                            sched, ledger),
                    DivergenceError);
}
