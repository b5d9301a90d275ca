#include <doctest.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "sfbs/diagnostics.hpp"
#include "sfbs/errors.hpp"
#include "sfbs/matrix_io.hpp"
#include "test_support.hpp"

using namespace sfbs;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("sfbs_test_diag_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

RunTrace synthetic_trace(std::size_t length, double s1_value, double s2_decay) {
    RunTrace t;
    t.label = "synthetic";
    t.seed = 9;
    t.config_digest = "abc";
    t.z_refs = {VectorXd{{1.0, 2.0}}};
    std::mt19937_64 rng(1);
    std::normal_distribution<double> normal;
    for (std::size_t n = 0; n < length; ++n) {
        TraceRecord r;
        r.n = Index(n);
        r.lambda = 0.5;
        r.gamma = 1.25;
        r.residual = std::exp(normal(rng));
        r.grad_error = n + 1 < length ? std::abs(normal(rng)) * 1e-3 : kNaN;
        r.perturbation_norm = n + 1 < length ? 0.0 : kNaN;
        r.objective = normal(rng) / 3.0;
        r.dist = {1.0 / double(n + 1)};
        r.s1 = {s1_value};
        r.s2 = {std::pow(s2_decay, double(n))};
        r.allowance = {n + 1 < length ? 1e-4 : kNaN};
        t.records.push_back(r);
    }
    t.snapshots = {{0, VectorXd{{0.1, 1.0 / 3.0}}}, {Index(length - 1), VectorXd{{-2.0, 1e-300}}}};
    t.metadata["note"] = "kept";
    return t;
}

}  // namespace

TEST_CASE("fejer monitor examples") {
    const std::vector<double> mono{4, 2, 1, 0.5};
    CHECK(fejer_monitor(mono, 0.0).passed);
    CHECK(fejer_monitor(mono, 0.0).cumulative_increase == 0.0);

    const std::vector<double> bump{4, 2, 2.05, 1};
    const FejerReport r = fejer_monitor(bump, 0.04);
    CHECK_FALSE(r.passed);
    CHECK(r.cumulative_increase == doctest::Approx(0.05));
    CHECK(r.first_excess == 1);
    CHECK(fejer_monitor(bump, 0.06).passed);
    CHECK(fejer_monitor(bump, 0.04, 0.02).passed);

    const std::vector<double> broken{1.0, std::nan(""), 0.5};
    CHECK_FALSE(fejer_monitor(broken, 10.0).passed);
    CHECK_THROWS_AS(fejer_monitor(mono, -1.0), ParameterError);
}

TEST_CASE("fejer monitor on a trace and the pathwise budget") {
    const RunTrace t = synthetic_trace(10, 0.0, 0.5);
    CHECK(fejer_monitor(t, t.z_refs[0], 0.0).passed);
    CHECK(pathwise_budget(t, t.z_refs[0]) == doctest::Approx(9e-4));
    CHECK_THROWS(fejer_monitor(t, VectorXd{{1.0, 2.5}}, 0.0));
    CHECK_THROWS(fejer_monitor(t, VectorXd{{1.0}}, 0.0));
}

TEST_CASE("summability report") {
    const RunTrace good = synthetic_trace(200, 0.0, 0.5);
    const SummabilityReport r = summability_report(good, good.z_refs[0]);
    CHECK(r.applicable);
    CHECK(r.passed());
    CHECK(r.N == 199);
    CHECK(r.s2.total == doctest::Approx(2.0));

    // x_n = x_0 outside the solution set: constant positive terms
    const RunTrace flat = synthetic_trace(200, 0.7, 0.5);
    const SummabilityReport f = summability_report(flat, flat.z_refs[0]);
    CHECK_FALSE(f.passed());
    CHECK_FALSE(f.s1.summable);
    CHECK(f.s1.total == doctest::Approx(140.0));
    CHECK(f.s1.tail_fraction == doctest::Approx(0.5));

    const RunTrace one = synthetic_trace(1, 0.7, 0.5);
    const SummabilityReport o = summability_report(one, one.z_refs[0]);
    CHECK_FALSE(o.applicable);
    CHECK(o.s1.total == 0.7);
    CHECK(o.s2.total == 1.0);

    RunTrace unaudited = synthetic_trace(5, 0.0, 0.5);
    unaudited.records[2].s1 = {kNaN};
    CHECK_THROWS_AS(summability_report(unaudited, unaudited.z_refs[0]), ParameterError);
}

TEST_CASE("series summary and slopes") {
    std::vector<double> n, v;
    for (int i = 1; i <= 400; ++i) {
        n.push_back(i);
        v.push_back(3.0 * std::pow(double(i), -2.1));
    }
    CHECK(loglog_slope(n, v) == doctest::Approx(-2.1).epsilon(1e-12));
    CHECK(loglog_slope(n, v, 100.0) == doctest::Approx(-2.1).epsilon(1e-12));
    const SeriesSummary s = summarize_series(v);
    CHECK(s.summable);
    CHECK(s.tail_fraction < 0.01);
    CHECK(summarize_series(std::vector<double>(10, 0.0)).summable);
    CHECK_THROWS_AS(loglog_slope(n, std::vector<double>{1.0}), StructuralError);
}

TEST_CASE("export and import round trip bitwise") {
    const auto dir = scratch_dir("roundtrip");
    const RunTrace t = synthetic_trace(50, 0.1, 0.9);
    export_trace(t, dir / "t.csv");
    CHECK(std::filesystem::exists(dir / "t.json"));
    const RunTrace back = import_trace(dir / "t.csv");

    REQUIRE(back.records.size() == t.records.size());
    for (const auto& name : t.column_names()) {
        const auto a = t.column(name), b = back.column(name);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (std::isnan(a[i])) {
                CHECK(std::isnan(b[i]));
            } else {
                CHECK(same_bits(a[i], b[i]));
            }
        }
    }
    CHECK(back.label == t.label);
    CHECK(back.seed == t.seed);
    CHECK(back.config_digest == t.config_digest);
    CHECK(back.z_refs[0] == t.z_refs[0]);
    REQUIRE(back.snapshots.size() == 2);
    CHECK(back.snapshots[0].x == t.snapshots[0].x);
    CHECK(back.snapshots[1].x == t.snapshots[1].x);
    CHECK(back.metadata["note"] == "kept");
    // a second export of the imported trace is byte-identical
    export_trace(back, dir / "u.csv");
    CHECK(slurp(dir / "t.csv") == slurp(dir / "u.csv"));
}

TEST_CASE("empty trace exports a header-only CSV") {
    const auto dir = scratch_dir("empty");
    RunTrace t;
    export_trace(t, dir / "e.csv");
    const std::string text = slurp(dir / "e.csv");
    CHECK(text.rfind("# sfbs-trace v1\nn,", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 2);
    CHECK(import_trace(dir / "e.csv").records.empty());
}

TEST_CASE("import rejects foreign files") {
    const auto dir = scratch_dir("foreign");
    {
        std::ofstream(dir / "x.csv") << "a,b\n1,2\n";
    }
    CHECK_THROWS_AS(import_trace(dir / "x.csv"), IoError);
    CHECK_THROWS_AS(import_trace(dir / "missing.csv"), IoError);
}

TEST_CASE("matrix text format") {
    std::mt19937_64 rng(3);
    const MatrixXd m = sfbs_test::gaussian_matrix(rng, 3, 4);
    std::stringstream ss;
    write_matrix_text(ss, m);
    const MatrixXd back = read_matrix_text(ss);
    CHECK(back == m);
    std::stringstream commented("# produced elsewhere\n# second line\n2 1\n1.5\n-2\n");
    CHECK(read_matrix_text(commented) == MatrixXd{{1.5}, {-2.0}});
    std::stringstream short_body("2 2\n1 2 3\n");
    CHECK_THROWS_AS(read_matrix_text(short_body), StructuralError);
    CHECK_THROWS_AS(read_matrix_text(std::filesystem::path("/nonexistent/m.txt")), IoError);
    CHECK(format_double(0.1) == "0.10000000000000001");
    CHECK(std::isinf(parse_double("-inf")));
}
