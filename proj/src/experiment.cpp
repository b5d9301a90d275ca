#include "sfbs/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "sfbs/matrix_io.hpp"

namespace sfbs {

using nlohmann::json;

namespace {

constexpr std::uint64_t kOracleStream = 0x4f52414300000001ULL;
constexpr std::uint64_t kPerturbStream = 0x5045525400000001ULL;
constexpr std::uint64_t kDualOracleStream = 0x4f52414300000100ULL;
constexpr std::uint64_t kDualPerturbStream = 0x5045525400000100ULL;
constexpr std::uint64_t kMomentStream = 0x4d4f4d454e540001ULL;

LinearModelDistribution build_data(const json& j, const std::filesystem::path& base) {
    LinearModelDistribution d;
    const json& K = j.at("K");
    if (K.is_string() && K.get<std::string>() == "identity") {
        Index dim = j.value("dim", Index(0));
        if (dim == 0 && j.contains("z")) dim = vector_ref(j["z"], base, "/problem/data/z").size();
        if (dim == 0) throw ConfigError("config /problem/data: K = \"identity\" needs dim or z");
        d.K_mean = MatrixXd::Identity(dim, dim);
    } else {
        d.K_mean = matrix_ref(K, base, "/problem/data/K");
    }
    d.x_true = j.contains("x_true") ? vector_ref(j["x_true"], base, "/problem/data/x_true")
                                    : VectorXd(VectorXd::Zero(d.cols()));
    if (d.x_true.size() != d.cols()) throw ConfigError("config /problem/data/x_true: length must equal cols(K)");
    if (j.contains("z")) {
        const VectorXd z = vector_ref(j["z"], base, "/problem/data/z");
        if (z.size() != d.rows()) throw ConfigError("config /problem/data/z: length must equal rows(K)");
        d.z_offset = z - d.K_mean * d.x_true;
    } else {
        d.z_offset = VectorXd::Zero(d.rows());
    }
    d.K_std = j.value("K_std", 0.0);
    d.z_std = j.value("z_std", 0.0);
    d.validate();
    return d;
}

GradientOracle build_oracle(const json& j, const CocoerciveMapd& B, const LinearModelDistribution* data,
                            std::uint64_t stream, const std::string& field) {
    const std::string kind = j.value("kind", std::string("exact"));
    if (kind == "exact") return GradientOracle::exact(B);
    if (kind == "empirical") {
        if (!data) throw ConfigError("config " + field + ": the empirical oracle is only available for h");
        if (!j.contains("batch")) throw ConfigError("config " + field + ": the empirical oracle needs a batch rule");
        const json& b = j["batch"];
        return GradientOracle::empirical_quadratic(
            *data, BatchRule(b.value("m0", Index(1)), b.value("c", 1.0), b["delta"].get<double>()));
    }
    if (kind == "additive_noise") {
        if (!j.contains("noise")) throw ConfigError("config " + field + ": additive noise needs a noise section");
        const json& nz = j["noise"];
        return GradientOracle::additive_noise(B, noise_dist_from_string(nz.value("dist", std::string("gaussian"))),
                                              rule_from_json(nz["scale"]), j.value("stream", stream));
    }
    throw ConfigError("config " + field + ": unknown oracle kind " + kind);
}

PerturbationSource build_perturbation(const json& j, std::uint64_t stream, const std::string& field) {
    const std::string kind = j.value("kind", std::string("zero"));
    if (kind == "zero") return PerturbationSource::zero();
    if (!j.contains("magnitude")) throw ConfigError("config " + field + ": decaying perturbation needs a magnitude");
    return PerturbationSource::decaying(noise_dist_from_string(j.value("dist", std::string("uniform_ball"))),
                                        rule_from_json(j["magnitude"]), j.value("stream", stream));
}

SpdMetricd build_metric(const json& j, Index dim, const std::filesystem::path& base, const std::string& field) {
    if (j.is_number()) {
        const double s = j.get<double>();
        if (!(s > 0)) throw ConfigError("config " + field + ": metric scalar must be positive");
        return SpdMetricd::scaled_identity(dim, s);
    }
    if (j.is_string() && j.get<std::string>() == "identity") return SpdMetricd::identity(dim);
    const MatrixXd M = matrix_ref(j, base, field);
    if (M.rows() != dim || M.cols() != dim) throw ConfigError("config " + field + ": metric has the wrong size");
    try {
        return SpdMetricd(M);
    } catch (const Error& e) {
        throw ConfigError("config " + field + ": " + e.what());
    }
}

MatrixXd build_L(const json& j, Index dim, const std::filesystem::path& base, const std::string& field) {
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "identity") return MatrixXd::Identity(dim, dim);
        if (s == "difference") {
            if (dim < 2) throw ConfigError("config " + field + ": differences need dim >= 2");
            MatrixXd D = MatrixXd::Zero(dim - 1, dim);
            for (Index i = 0; i + 1 < dim; ++i) {
                D(i, i) = -1.0;
                D(i, i + 1) = 1.0;
            }
            return D;
        }
    }
    const MatrixXd L = matrix_ref(j, base, field);
    if (L.cols() != dim) throw ConfigError("config " + field + ": L must have dim(H) columns");
    return L;
}

std::string seed_file(const Experiment& e, std::uint64_t seed) {
    return e.name + "_seed" + std::to_string(seed) + ".csv";
}

std::string utc_timestamp() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out << s;
    if (!out) throw IoError("write failed: " + p.string());
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

// ---------------------------------------------------------------- building

bool Experiment::deterministic() const {
    if (fb) {
        return fb->oracle.kind() == OracleKind::exact && fb->perturb.kind() == PerturbationKind::zero &&
               !fb->family;
    }
    if (pd) {
        const auto& o = pd->oracles;
        bool det = o.u.kind() == OracleKind::exact && o.b.kind() == PerturbationKind::zero && !pd->model.f_rule;
        for (const auto& s : o.s) det = det && s.kind() == OracleKind::exact;
        for (const auto& c : o.c) det = det && c.kind() == PerturbationKind::zero;
        return det;
    }
    return false;
}

VectorXd Experiment::initial_point() const {
    if (fb) return fb->x0;
    VectorXd z(pd->x0.size() + pd->v0.size());
    z << pd->x0, pd->v0;
    return z;
}

std::vector<VectorXd> Experiment::references() const {
    if (fb) return fb->problem.z_ref;
    if (pd) return pd->references;
    return {};
}

std::filesystem::path output_directory(const ConfigDocument& cfg) {
    std::filesystem::path dir = "out/" + cfg.name;
    if (cfg.doc.contains("output") && cfg.doc["output"].contains("directory")) {
        dir = cfg.doc["output"]["directory"].get<std::string>();
    }
    if (const char* root = std::getenv("SFBS_OUTPUT_ROOT"); root && *root) {
        return std::filesystem::path(root) / dir.relative_path();
    }
    return dir.is_absolute() ? dir : cfg.base_dir / dir;
}

Experiment build_experiment(const ConfigDocument& cfg, bool with_references) {
    const json& d = cfg.doc;
    const auto& base = cfg.base_dir;
    Experiment e;
    e.name = cfg.name;
    e.digest = cfg.digest;
    e.base_dir = base;
    e.doc = d;

    const json& P = d.at("problem");
    const LinearModelDistribution data = build_data(P.at("data"), base);
    const Index dim = data.cols();
    const CocoerciveMapd h = data.gradient_field();
    const ProxFunctiond f = P.contains("f") ? prox_from_json(P["f"], dim) : ProxFunctiond::zero();
    const json oracle_j = d.value("oracle", json{{"kind", "exact"}});
    const json perturb_j = d.value("perturbation", json{{"kind", "zero"}});
    const json sched_j = d.value("schedule", json::object());
    const json& R = d.at("run");

    e.stop.max_iters = R.value("max_iters", Index(1000));
    e.stop.residual_tol = R.value("residual_tol", 0.0);
    e.stop.thinning = R.value("thinning", Index(1));
    for (const auto& s : R.at("seeds")) e.seeds.push_back(s.get<std::uint64_t>());
    e.workers = R.value("workers", 1u);
    e.force = R.value("force", false);
    e.audit = R.value("audit", true);
    e.cache_draws = R.value("cache_draws", true);
    e.certificate_horizon = R.value("certificate_horizon", Index(100000));
    e.output_dir = output_directory(cfg);
    if (d.contains("output") && d["output"].contains("formats")) {
        e.write_csv = e.write_json = false;
        for (const auto& fm : d["output"]["formats"]) {
            if (fm == "csv") e.write_csv = true;
            if (fm == "json") e.write_json = true;
        }
    }

    IterationSchedule::Rules rules;
    rules.lambda = rule_from_json(sched_j.value("lambda", json(1.0)));
    rules.tau = rule_from_json(sched_j.value("tau", json(0.0)));

    DemiregularityFlag demi;
    if (P.value("demiregular", false)) {
        demi.holds_for_B = true;
        demi.justification = "declared in configuration";
    }

    const std::string type = P.at("type").get<std::string>();
    if (type == "fb") {
        if (P.contains("blocks") || P.contains("W") || P.contains("mu")) {
            throw ConfigError("config /problem: blocks, W and mu belong to primal-dual problems");
        }
        if (d.contains("dual_oracle") || d.contains("dual_perturbation")) {
            throw ConfigError("config: dual_oracle and dual_perturbation belong to primal-dual problems");
        }
        e.theta = h.theta();
        FbSetup s;
        s.problem.A = ResolventOperatord::subdifferential(f);
        s.problem.B = h;
        s.problem.demiregularity = demi;
        s.problem.objective = [f, data](const VectorXd& x) { return f.value(x) + data.objective(x); };
        s.oracle = build_oracle(oracle_j, h, &data, kOracleStream, "/oracle");
        s.perturb = build_perturbation(perturb_j, kPerturbStream, "/perturbation");
        rules.gamma = rule_from_json(sched_j.value("gamma", json{{"kind", "constant"}, {"theta_multiple", 1.0}}),
                                     e.theta);
        if (P.contains("varying")) {
            if (f.kind() != ProxKind::l1) {
                throw ConfigError("config /problem/varying: Moreau smoothing is available for f = l1 only");
            }
            const SequenceRule rho = rule_from_json(P["varying"]["rho"]);
            // |prox_{g e_rho f} - prox_{g f}| <= rho w per coordinate
            rules.beta = rho.times(SequenceRule::constant(std::sqrt(double(dim)) * f.weight()));
            s.family = VaryingResolventFamily{[f, rho](Index n) {
                const double r = rho(n);
                if (r == 0.0) return ResolventOperatord::subdifferential(f);
                return ResolventOperatord::subdifferential(moreau_envelope(f, r));
            }};
        }
        s.x0 = R.contains("x0") ? vector_ref(R["x0"], base, "/run/x0") : VectorXd(VectorXd::Zero(dim));
        if (s.x0.size() != dim) throw ConfigError("config /run/x0: length must equal dim(H)");
        if (with_references && P.contains("z_ref")) {
            const VectorXd z = vector_ref(P["z_ref"], base, "/problem/z_ref");
            if (z.size() != dim) throw ConfigError("config /problem/z_ref: length must equal dim(H)");
            s.problem.z_ref.push_back(z);
        }
        if (s.oracle.kind() == OracleKind::empirical_quadratic) rules.batch = s.oracle.batch();
        e.fb = std::move(s);
    } else {
        if (!P.contains("blocks")) throw ConfigError("config /problem: primal-dual problems need blocks");
        if (P.contains("varying")) throw ConfigError("config /problem/varying: only available for fb problems");
        if (sched_j.contains("gamma")) {
            const SequenceRule g = rule_from_json(sched_j["gamma"]);
            if (!(g.is_constant() && g(0) == 1.0)) {
                throw ConfigError("config /schedule/gamma: primal-dual runs use gamma_n = 1");
            }
        }
        const SpdMetricd W = build_metric(P.value("W", json(1.0)), dim, base, "/problem/W");
        std::vector<DualBlock> blocks;
        for (std::size_t k = 0; k < P["blocks"].size(); ++k) {
            const json& b = P["blocks"][k];
            const std::string field = "/problem/blocks/" + std::to_string(k);
            const MatrixXd L = build_L(b["L"], dim, base, field + "/L");
            const SpdMetricd U = build_metric(b.value("U", json(1.0)), L.rows(), base, field + "/U");
            const ProxFunctiond g = prox_from_json(b["g"], L.rows());
            const json jj = b.value("j", json{{"kind", "quadratic"}, {"rho", 1.0}});
            if (jj["kind"] == "quadratic") {
                if (!jj.contains("rho")) throw ConfigError("config " + field + "/j: quadratic j needs rho");
                blocks.push_back(DualBlock::quadratic_j(g, LinearMapd(L), U, jj["rho"].get<double>()));
            } else {
                if (!jj.contains("nu")) {
                    throw ConfigError("config " + field + "/j: without infimal convolution, nu must be given");
                }
                blocks.push_back(DualBlock::without_j(g, LinearMapd(L), U, jj["nu"].get<double>()));
            }
        }
        double mu = 0.0;
        const json mu_j = P.value("mu", json("estimate"));
        if (mu_j.is_string()) {
            if (mu_j.get<std::string>() != "estimate") {
                throw ConfigError("config /problem/mu: must be a number or \"estimate\"");
            }
            mu = estimate_lipschitz([h](const VectorXd& x) { return h.apply(x); }, W);
        } else {
            mu = mu_j.get<double>();
        }
        PdModel model(f, h, W, mu, std::move(blocks));
        model.demiregularity = demi;

        PdOracleBundle ob;
        ob.u = build_oracle(oracle_j, h, &data, kOracleStream, "/oracle");
        ob.b = build_perturbation(perturb_j, kPerturbStream, "/perturbation");
        const json dual_o = d.value("dual_oracle", json{{"kind", "exact"}});
        const json dual_p = d.value("dual_perturbation", json{{"kind", "zero"}});
        if (dual_o.value("kind", std::string()) == "empirical") {
            throw ConfigError("config /dual_oracle: the empirical oracle is only available for h");
        }
        for (std::size_t k = 0; k < model.q(); ++k) {
            json o = dual_o;
            if (!o.contains("stream")) o["stream"] = kDualOracleStream + k;
            ob.s.push_back(build_oracle(o, dual_gradient_field(model.blocks()[k]), nullptr, kDualOracleStream + k,
                                        "/dual_oracle"));
            json p = dual_p;
            if (!p.contains("stream")) p["stream"] = kDualPerturbStream + k;
            ob.c.push_back(build_perturbation(p, kDualPerturbStream + k, "/dual_perturbation"));
        }
        try {
            e.theta = cocoercivity_constant(model);
        } catch (const ConditionViolation&) {
            e.theta = kNaN;
        }
        rules.gamma = SequenceRule::constant(1.0);
        if (ob.u.kind() == OracleKind::empirical_quadratic) rules.batch = ob.u.batch();

        VectorXd x0 = R.contains("x0") ? vector_ref(R["x0"], base, "/run/x0") : VectorXd(VectorXd::Zero(dim));
        VectorXd v0 = R.contains("v0") ? vector_ref(R["v0"], base, "/run/v0")
                                       : VectorXd(VectorXd::Zero(model.dim_v()));
        if (x0.size() != dim) throw ConfigError("config /run/x0: length must equal dim(H)");
        if (v0.size() != model.dim_v()) throw ConfigError("config /run/v0: length must equal dim(G)");
        std::vector<VectorXd> refs;
        if (with_references && P.contains("z_ref")) {
            const VectorXd z = vector_ref(P["z_ref"], base, "/problem/z_ref");
            if (z.size() != dim + model.dim_v()) {
                throw ConfigError("config /problem/z_ref: expected the joined pair (x, v)");
            }
            refs.push_back(z);
        }
        e.pd.emplace(PdSetup{std::move(model), std::move(ob), std::move(x0), std::move(v0), std::move(refs)});
    }
    e.schedule.emplace(std::move(rules), std::min<Index>(e.certificate_horizon, std::max<Index>(e.stop.max_iters, 1000)));
    return e;
}

CertificateReport certify_experiment(const Experiment& e) {
    if (e.fb) {
        CertificateReport rep = certify(e.fb->problem, e.fb->oracle, e.fb->perturb, *e.schedule,
                                        e.fb->family.has_value(), e.certificate_horizon);
        if (e.fb->family) {
            const PropertyReport drift = check_drift(*e.fb->family, e.fb->problem.A, *e.schedule, 200,
                                                     e.fb->problem.dim(), 5, 11);
            Clause c{"drift", "sampled ||J_{g A_n} x - J_{g A} x|| <= alpha_n ||x|| + beta_n",
                     drift.violations == 0 ? ClauseStatus::pass : ClauseStatus::fail, std::nullopt,
                     std::to_string(drift.violations) + " violations in " + std::to_string(drift.samples) +
                         " samples"};
            rep.clauses.push_back(std::move(c));
        }
        return rep;
    }
    PdCheckOptions opts;
    opts.horizon = e.certificate_horizon;
    return check_pd_conditions(e.pd->model, *e.schedule, &e.pd->oracles, opts);
}

// ---------------------------------------------------------------- running

double fejer_tolerance(const VectorXd& x0) { return 1e-12 * (1.0 + x0.norm()); }

json trace_verdicts(const RunTrace& trace, const VectorXd& x0, const StoppingRule& stop, bool& converged) {
    json v;
    json refs = json::array();
    const bool audited = !trace.empty() && std::isfinite(trace.records.front().s1.empty()
                                                              ? kNaN
                                                              : trace.records.front().s1.front());
    for (const auto& z : trace.z_refs) {
        json r;
        const double budget = audited ? pathwise_budget(trace, z) : 0.0;
        const FejerReport fr = fejer_monitor(trace, z, budget, fejer_tolerance(x0));
        r["fejer"] = fr.to_json();
        if (audited) {
            r["summability"] = summability_report(trace, z).to_json();
        } else {
            r["summability"] = {{"applicable", false}, {"note", "run.audit is off; exact-field sums were not recorded"}};
        }
        r["final_dist"] = finite_or_null(trace.empty() ? kNaN : trace.last().dist[trace.reference_index(z)]);
        refs.push_back(r);
    }
    v["references"] = refs;
    const double res = trace.empty() ? kNaN : trace.last().residual;
    v["final_residual"] = finite_or_null(res);
    converged = trace.termination != Termination::diverged &&
                (stop.residual_tol <= 0 || (std::isfinite(res) && res <= stop.residual_tol));
    v["converged"] = converged;
    return v;
}

SeedOutcome run_seed(const Experiment& e, std::uint64_t seed) {
    SeedOutcome o;
    o.seed = seed;
    try {
        if (e.fb) {
            RunOptions opts;
            opts.family = e.fb->family ? &*e.fb->family : nullptr;
            opts.audit = e.audit;
            opts.force = true;  // gating happens once, before the sweep
            opts.cache_draws = e.cache_draws;
            opts.label = e.name;
            opts.config_digest = e.digest;
            opts.certificate_horizon = e.certificate_horizon;
            o.trace = run(e.fb->problem, e.fb->oracle, e.fb->perturb, *e.schedule, e.stop, seed, e.fb->x0, opts);
        } else {
            PdRunOptions opts;
            opts.audit = e.audit;
            opts.force = true;
            opts.cache_draws = e.cache_draws;
            opts.label = e.name;
            opts.config_digest = e.digest;
            opts.references = e.pd->references;
            o.trace = pd_run(e.pd->model, e.pd->oracles, *e.schedule, e.stop, seed, e.pd->x0, e.pd->v0, opts);
        }
        o.trace.metadata["forced"] = e.force;
    } catch (const DivergenceError& err) {
        o.diverged = true;
        o.message = "seed " + std::to_string(seed) + ": " + err.what();
        if (err.partial_trace()) o.trace = *err.partial_trace();
        o.trace.termination = Termination::diverged;
    }
    o.verdicts = trace_verdicts(o.trace, e.initial_point(), e.stop, o.converged);
    if (o.diverged) o.verdicts["divergence"] = o.message;
    return o;
}

std::vector<SeedOutcome> run_sweep(const Experiment& e) {
    std::vector<SeedOutcome> out(e.seeds.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= e.seeds.size()) return;
            try {
                out[i] = run_seed(e, e.seeds[i]);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                return;
            }
        }
    };
    const unsigned n = std::max(1u, std::min<unsigned>(e.workers, unsigned(e.seeds.size())));
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    return out;
}

// ---------------------------------------------------------------- reference

ReferenceResult compute_reference(const Experiment& e, Index iterations, double residual_tol) {
    ReferenceResult r;
    if (e.fb) {
        IterationSchedule::Rules rules;
        rules.gamma = e.schedule->gamma().is_constant() ? e.schedule->gamma()
                                                        : SequenceRule::constant(e.theta);
        const IterationSchedule sched(rules);
        const GradientOracle exact = GradientOracle::exact(e.fb->problem.B);
        const PerturbationSource none = PerturbationSource::zero();
        SampleLedger ledger(0);
        FbState s{0, e.fb->x0, {}};
        const double g = rules.gamma(0);
        while (s.n < iterations) {
            s = fb_step(s, e.fb->problem, exact, none, sched, ledger);
            if (residual_tol > 0 && s.n % 100 == 0 && residual(e.fb->problem, s.x, g) <= residual_tol) break;
        }
        r.z = s.x;
        r.iterations = s.n;
        r.residual = residual(e.fb->problem, s.x, g);
        return r;
    }
    const PdModel& model = e.pd->model;
    const PdOracleBundle exact = PdOracleBundle::exact(model);
    const IterationSchedule sched(IterationSchedule::Rules{});
    const PdEmbedding emb = embed_as_fb(model);
    auto res = [&](const VectorXd& z) {
        const VectorXd w = z - emb.solve_V(emb.B_plain.apply(z));
        return emb.V_norm(z - embedded_resolvent(model, w, 0));
    };
    SampleLedger ledger(0);
    PdState s = make_pd_state(model, e.pd->x0, e.pd->v0);
    while (s.n < iterations) {
        s = pd_step(s, model, exact, sched, ledger);
        if (residual_tol > 0 && s.n % 100 == 0 && res(s.joined()) <= residual_tol) break;
    }
    r.z = s.joined();
    r.iterations = s.n;
    r.residual = res(r.z);
    return r;
}

// ---------------------------------------------------------------- empirical oracle decay study

Section52Params section52_params(const Experiment& e) {
    Section52Params p;
    if (!e.doc.contains("reproduce")) throw ConfigError("config: reproduce-52 needs a reproduce section");
    const json& r = e.doc["reproduce"];
    p.delta = r["delta"].get<double>();
    p.kappa = r["kappa"].get<double>();
    p.N = r.value("N", p.N);
    p.seed = r.value("seed", p.seed);
    p.trials = r.value("trials", p.trials);
    p.n_min = r.value("n_min", p.n_min);
    p.batch_c = r.value("batch_c", p.batch_c);
    p.workers = r.value("workers", p.workers);
    return p;
}

Section52Result reproduce_section52(const Experiment& e, const Section52Params& p) {
    validate_batch_relaxation_pair(p.delta, p.kappa);
    if (!e.pd) throw ConfigError("reproduce-52 needs a primal-dual problem");
    const PdModel& model = e.pd->model;
    if (model.f().kind() != ProxKind::box_indicator) {
        throw ConfigError("reproduce-52 needs f = box so that (y_n) stays bounded");
    }
    const GradientOracle& u0 = e.pd->oracles.u;
    if (u0.kind() != OracleKind::empirical_quadratic) {
        throw ConfigError("reproduce-52 needs oracle.kind = empirical");
    }
    const BatchRule batch(1, p.batch_c, p.delta);
    PdOracleBundle ob = PdOracleBundle::exact(model);
    ob.u = GradientOracle::empirical_quadratic(u0.distribution(), batch);
    IterationSchedule::Rules rules;
    rules.lambda = SequenceRule::power(1.0, p.kappa);
    rules.batch = batch;
    const IterationSchedule sched(rules);
    PdCheckOptions opts;
    opts.horizon = e.certificate_horizon;
    const CertificateReport cert = check_pd_conditions(model, sched, &ob, opts);
    if (!cert.passed() && !e.force) {
        for (const auto& c : cert.clauses) {
            if (c.status == ClauseStatus::fail) throw ConditionViolation(c.id, cert.summary());
        }
    }

    Section52Result res;
    res.params = p;
    SampleLedger ledger(p.seed, u0.distribution(), true);
    PdState st = make_pd_state(model, e.pd->x0, e.pd->v0);
    for (Index n = 0; n < p.N; ++n) {
        const double lam = sched.eval(n).lambda;
        const VectorXd bias = ob.u.conditional_bias(st.x, n, ledger);
        const MomentEstimate me = estimate_conditional_moments(ob.u, st.x, n, p.trials, p.seed ^ kMomentStream,
                                                               ledger, p.workers);
        res.n.push_back(double(n + 1));
        res.lambda.push_back(lam);
        res.batch.push_back(double(batch(n)));
        res.bias_norm.push_back(bias.norm());
        res.lambda_bias_sq.push_back(lam * bias.squaredNorm());
        res.variance.push_back(me.variance);
        res.variance_se.push_back(me.variance_se);
        res.sqrt_lambda_bias.push_back(std::sqrt(lam) * bias.norm());
        st = pd_step(st, model, ob, sched, ledger);
    }
    res.bias_slope = loglog_slope(res.n, res.lambda_bias_sq, p.n_min);
    res.variance_slope = loglog_slope(res.n, res.variance, p.n_min);
    res.partial_sums = summarize_series(res.sqrt_lambda_bias);
    res.bias_threshold = -(1.0 + p.delta + p.kappa) + 0.3;
    res.variance_threshold = -(2.0 + p.delta) + 0.3;
    res.passed = res.bias_slope <= res.bias_threshold && res.variance_slope <= res.variance_threshold &&
                 res.partial_sums.summable;
    return res;
}

std::string Section52Result::csv() const {
    std::ostringstream ss;
    ss << "# sfbs-section52 v1\n";
    ss << "n,lambda,m,bias_norm,lambda_bias_sq,variance,variance_se,sqrt_lambda_bias,partial_sum\n";
    double partial = 0.0;
    for (std::size_t i = 0; i < n.size(); ++i) {
        partial += sqrt_lambda_bias[i];
        ss << Index(n[i]) - 1 << ',' << format_double(lambda[i]) << ',' << Index(batch[i]) << ','
           << format_double(bias_norm[i]) << ',' << format_double(lambda_bias_sq[i]) << ','
           << format_double(variance[i]) << ',' << format_double(variance_se[i]) << ','
           << format_double(sqrt_lambda_bias[i]) << ',' << format_double(partial) << '\n';
    }
    return ss.str();
}

json Section52Result::to_json() const {
    return {{"delta", params.delta},
            {"kappa", params.kappa},
            {"N", params.N},
            {"seed", params.seed},
            {"trials", params.trials},
            {"n_min", params.n_min},
            {"batch", "m_n = 1 + ceil(" + format_double(params.batch_c) + " n^" + format_double(1 + params.delta) + ")"},
            {"lambda_bias_sq_slope", bias_slope},
            {"lambda_bias_sq_threshold", bias_threshold},
            {"variance_slope", variance_slope},
            {"variance_threshold", variance_threshold},
            {"partial_sums",
             {{"total", partial_sums.total},
              {"tail", partial_sums.tail},
              {"tail_fraction", finite_or_null(partial_sums.tail_fraction)},
              {"summable", partial_sums.summable}}},
            {"passed", passed}};
}

// ---------------------------------------------------------------- command line

namespace {

struct Loaded {
    ConfigDocument cfg;
    Experiment e;
};

Loaded load(const std::string& path, bool with_references = true) {
    ConfigDocument cfg = load_config(path);
    try {
        Experiment e = build_experiment(cfg, with_references);
        return {std::move(cfg), std::move(e)};
    } catch (const ConfigError&) {
        throw;
    } catch (const ConditionViolation&) {
        throw;
    } catch (const Error& err) {
        throw ConfigError(std::string("config ") + path + ": " + err.what());
    }
}

int cmd_run(const std::string& path, std::ostream& out) {
    const Loaded L = load(path);
    const Experiment& e = L.e;
    std::filesystem::create_directories(e.output_dir);
    const CertificateReport cert = certify_experiment(e);
    json summary;
    summary["format"] = "sfbs-summary v1";
    summary["config"] = e.name;
    summary["config_digest"] = e.digest;
    summary["problem"] = e.is_pd() ? "pd" : "fb";
    summary["theta"] = finite_or_null(e.theta);
    summary["certificate"] = cert.to_json();
    summary["forced"] = e.force;
    summary["metadata"] = {{"timestamp", utc_timestamp()}};
    const auto summary_path = e.output_dir / (e.name + "_summary.json");

    if (!cert.passed() && !e.force) {
        out << cert.summary();
        summary["runs"] = json::array();
        summary["exit_status"] = int(kExitCertificate);
        write_text(summary_path, summary.dump(2) + "\n");
        return kExitCertificate;
    }

    const std::vector<SeedOutcome> outcomes = run_sweep(e);
    json runs = json::array();
    std::size_t n_fejer = 0, n_summ = 0, n_conv = 0, n_div = 0, n_summ_app = 0;
    for (const auto& o : outcomes) {
        json r;
        r["seed"] = o.seed;
        const std::string file = seed_file(e, o.seed);
        if (e.write_csv) {
            export_trace(o.trace, e.output_dir / file);
            r["trace"] = file;
            if (e.write_json) {
                r["sidecar"] = sidecar_path(file).string();
            } else {
                std::filesystem::remove(sidecar_path(e.output_dir / file));
            }
        }
        r["termination"] = to_string(o.trace.termination);
        r["iterations"] = o.trace.empty() ? Index(0) : o.trace.last().n;
        r["diverged"] = o.diverged;
        r["verdicts"] = o.verdicts;
        if (e.is_pd() && !o.trace.snapshots.empty()) {
            r["strong_convergence_claimed"] = e.pd->model.demiregularity.any();
        } else if (e.fb) {
            r["strong_convergence_claimed"] = e.fb->problem.demiregularity.any();
        }
        bool fejer_ok = true, summ_ok = true, summ_app = false;
        for (const auto& ref : o.verdicts["references"]) {
            fejer_ok = fejer_ok && ref["fejer"]["passed"].get<bool>();
            const json& s = ref["summability"];
            if (s.value("applicable", false)) {
                summ_app = true;
                summ_ok = summ_ok && s["passed"].get<bool>();
            }
        }
        n_fejer += fejer_ok;
        n_summ_app += summ_app;
        n_summ += summ_app && summ_ok;
        n_conv += o.converged;
        n_div += o.diverged;
        runs.push_back(r);

        out << "seed " << o.seed << ": " << to_string(o.trace.termination) << " after "
            << r["iterations"].get<Index>() << " iterations, residual "
            << (o.verdicts["final_residual"].is_null() ? std::string("n/a")
                                                       : format_double(o.verdicts["final_residual"].get<double>()))
            << (o.diverged ? " (" + o.message + ")" : std::string()) << '\n';
    }
    const double total = double(outcomes.size());
    summary["runs"] = runs;
    summary["pass_rates"] = {{"fejer", double(n_fejer) / total},
                             {"summability", n_summ_app ? double(n_summ) / double(n_summ_app) : 0.0},
                             {"converged", double(n_conv) / total},
                             {"diverged", double(n_div) / total}};
    int status = kExitOk;
    if (n_div > 0) {
        status = kExitDivergence;
    } else if (!cert.passed()) {
        status = kExitCertificate;
    } else if (n_conv < outcomes.size()) {
        status = kExitNotConverged;
    }
    summary["exit_status"] = status;
    write_text(summary_path, summary.dump(2) + "\n");
    out << "summary: " << summary_path.string() << '\n';
    return status;
}

int cmd_certify(const std::string& path, std::ostream& out) {
    const Loaded L = load(path);
    const CertificateReport cert = certify_experiment(L.e);
    out << cert.summary();
    return cert.passed() ? kExitOk : kExitCertificate;
}

int cmd_reproduce(const std::string& path, std::ostream& out) {
    const Loaded L = load(path);
    const Section52Params p = section52_params(L.e);
    const Section52Result r = reproduce_section52(L.e, p);
    std::filesystem::create_directories(L.e.output_dir);
    const auto csv = L.e.output_dir / (L.e.name + "_series.csv");
    write_text(csv, r.csv());
    json j = r.to_json();
    j["format"] = "sfbs-section52 v1";
    j["config"] = L.e.name;
    j["config_digest"] = L.e.digest;
    j["series"] = csv.filename().string();
    j["metadata"] = {{"timestamp", utc_timestamp()}};
    const auto js = L.e.output_dir / (L.e.name + "_section52.json");
    write_text(js, j.dump(2) + "\n");
    out << "lambda_n bias^2 slope " << format_double(r.bias_slope) << " (threshold " << format_double(r.bias_threshold)
        << ")\nvariance slope " << format_double(r.variance_slope) << " (threshold "
        << format_double(r.variance_threshold) << ")\nsum sqrt(lambda_n) bias tail fraction "
        << format_double(r.partial_sums.tail_fraction) << " (threshold 0.1)\n"
        << (r.passed ? "all within thresholds" : "outside thresholds") << "\nwrote " << js.string() << '\n';
    return r.passed ? kExitOk : kExitNotConverged;
}

int cmd_reference(const std::string& path, std::ostream& out) {
    const Loaded L = load(path, false);
    const json ref = L.e.doc.value("reference", json::object());
    const Index iters = ref.value("iterations", Index(1000000));
    const double tol = ref.value("residual_tol", 0.0);
    const ReferenceResult r = compute_reference(L.e, iters, tol);
    std::filesystem::path dest;
    const json& P = L.e.doc["problem"];
    if (P.contains("z_ref") && P["z_ref"].is_string()) {
        dest = P["z_ref"].get<std::string>();
        if (dest.is_relative()) dest = L.e.base_dir / dest;
    } else {
        std::filesystem::create_directories(L.e.output_dir);
        dest = L.e.output_dir / (L.e.name + "_zref.txt");
    }
    std::ostringstream ss;
    ss << "# reference: " << r.iterations << " exact iterations from the configured initial point\n"
       << "# final residual " << format_double(r.residual) << '\n';
    write_matrix_text(ss, MatrixXd(r.z));
    write_text(dest, ss.str());
    out << "wrote " << dest.string() << " (" << r.iterations << " iterations, residual "
        << format_double(r.residual) << ")\n";
    return kExitOk;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Stochastic forward-backward splitting experiments"};
    app.require_subcommand(1);
    std::string path;
    auto* run_cmd = app.add_subcommand("run", "run every seed of a configuration and write traces");
    run_cmd->add_option("config", path, "configuration file")->required();
    auto* cert_cmd = app.add_subcommand("certify", "check the convergence conditions only");
    cert_cmd->add_option("config", path, "configuration file")->required();
    auto* rep_cmd = app.add_subcommand("reproduce-52", "bias and variance decay of the empirical oracle");
    rep_cmd->add_option("config", path, "configuration file")->required();
    auto* ref_cmd = app.add_subcommand("reference", "long exact run that produces a z_ref fixture");
    ref_cmd->add_option("config", path, "configuration file")->required();
    auto* schema_cmd = app.add_subcommand("export-schema", "print the configuration JSON Schema");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }
    try {
        if (*schema_cmd) {
            out << config_schema().dump(2) << '\n';
            return kExitOk;
        }
        if (*run_cmd) return cmd_run(path, out);
        if (*cert_cmd) return cmd_certify(path, out);
        if (*rep_cmd) return cmd_reproduce(path, out);
        if (*ref_cmd) return cmd_reference(path, out);
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const ConditionViolation& e) {
        err << "condition " << e.clause() << " violated:\n" << e.what() << '\n';
        return kExitCertificate;
    } catch (const DivergenceError& e) {
        err << "diverged: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitNotConverged;
    }
    return kExitConfig;
}

}  // namespace sfbs
