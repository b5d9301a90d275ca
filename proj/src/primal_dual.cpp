#include "sfbs/primal_dual.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace sfbs {

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

void append_summable(Clause& c, const SequenceRule& s, Index horizon, const std::string& what) {
    if (auto exact = s.summable()) {
        if (!*exact) c.status = ClauseStatus::fail;
        c.detail += (c.detail.empty() ? "" : "; ") + what + ": " + s.describe() +
                    (*exact ? " summable" : " not summable");
        return;
    }
    double total = 0.0, half = 0.0;
    for (Index n = 0; n <= horizon; ++n) {
        total += s(n);
        if (n == horizon / 2) half = total;
    }
    const double tail = total > 0 ? (total - half) / total : 0.0;
    if (!(tail <= 0.1)) {
        c.status = ClauseStatus::fail;
    } else if (c.status == ClauseStatus::pass) {
        c.status = ClauseStatus::checked_numerically;
    }
    c.detail += (c.detail.empty() ? "" : "; ") + what + ": tail fraction " + fmt(tail) + " up to N=" +
                std::to_string(horizon);
}

}  // namespace

// ---------------------------------------------------------------- model

DualBlock DualBlock::quadratic_j(ProxFunctiond g, LinearMapd L, SpdMetricd U, double rho) {
    if (!(rho > 0)) throw ParameterError("quadratic_j: rho must be positive");
    const double nu = rho * U.max_eigenvalue();
    return DualBlock{std::move(g), std::move(L), std::move(U),
                     [rho](const VectorXd& v) { return VectorXd(rho * v); }, nu, rho};
}

DualBlock DualBlock::without_j(ProxFunctiond g, LinearMapd L, SpdMetricd U, double nu) {
    if (!(nu > 0)) throw ParameterError("without_j: nu must be an explicit positive constant");
    return DualBlock{std::move(g), std::move(L), std::move(U),
                     [](const VectorXd& v) { return VectorXd(VectorXd::Zero(v.size())); }, nu, std::nullopt};
}

double DualBlock::value(const VectorXd& y) const {
    if (!rho) return g.value(y);
    const VectorXd p = prox(g, y, *rho);
    return g.value(p) + (y - p).squaredNorm() / (2.0 * *rho);
}

PdModel::PdModel(ProxFunctiond f, CocoerciveMapd h, SpdMetricd W, double mu, std::vector<DualBlock> blocks)
    : f_(std::move(f)), h_(std::move(h)), W_(std::move(W)), mu_(mu), blocks_(std::move(blocks)) {
    if (W_.dim() != h_.dim()) throw StructuralError("PdModel: W and h dimensions differ");
    if (!(mu_ > 0)) throw ParameterError("PdModel: mu must be positive");
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
        const auto& b = blocks_[k];
        if (b.L.cols() != h_.dim()) throw StructuralError("PdModel: L_k domain must be H");
        if (b.U.dim() != b.L.rows()) throw StructuralError("PdModel: U_k must act on the range of L_k");
        if (!(b.nu > 0)) throw ParameterError("PdModel: nu_k must be positive");
        if (!b.j_star_grad) throw ParameterError("PdModel: missing gradient of j_k^*");
    }
    W_inv_ = W_.inverse();
}

Index PdModel::dim_v() const noexcept {
    Index d = 0;
    for (const auto& b : blocks_) d += b.dim();
    return d;
}

SpaceSpec PdModel::space() const {
    std::vector<Index> dims{dim_x()};
    for (const auto& b : blocks_) dims.push_back(b.dim());
    return SpaceSpec(dims);
}

double PdModel::objective(const VectorXd& x) const {
    double v = f_.value(x) + h_.value(x);
    for (const auto& b : blocks_) v += b.value(b.L.apply(x));
    return v;
}

VectorXd PdState::joined() const {
    VectorXd z(x.size() + v.data().size());
    z << x, v.data();
    return z;
}

PdState make_pd_state(const PdModel& model, const VectorXd& x0, const VectorXd& v0) {
    if (x0.size() != model.dim_x()) throw StructuralError("make_pd_state: x0 dimension mismatch");
    if (v0.size() != model.dim_v()) throw StructuralError("make_pd_state: v0 dimension mismatch");
    std::vector<Index> dims;
    for (const auto& b : model.blocks()) dims.push_back(b.dim());
    PdState s;
    s.x = x0;
    s.v = BlockVector<double>(SpaceSpec(dims), v0);
    return s;
}

PdOracleBundle PdOracleBundle::exact(const PdModel& model) {
    PdOracleBundle o;
    o.u = GradientOracle::exact(model.h());
    for (const auto& b : model.blocks()) {
        o.s.push_back(GradientOracle::exact(dual_gradient_field(b)));
        o.c.push_back(PerturbationSource::zero());
    }
    return o;
}

void PdOracleBundle::validate(const PdModel& model) const {
    if (u.dim() != model.dim_x()) throw StructuralError("oracle bundle: u has the wrong dimension");
    if (s.size() != model.q() || c.size() != model.q()) {
        throw StructuralError("oracle bundle: one s and one c per dual block are required");
    }
    for (std::size_t k = 0; k < s.size(); ++k) {
        if (s[k].dim() != model.blocks()[k].dim()) throw StructuralError("oracle bundle: s_k has the wrong dimension");
    }
}

CocoerciveMapd dual_gradient_field(const DualBlock& block) {
    const double th = block.rho ? 1.0 / *block.rho : block.U.min_eigenvalue() / block.nu;
    return CocoerciveMapd::custom(block.dim(), block.j_star_grad, th);
}

// ---------------------------------------------------------------- conditions

double coupling_norm(const PdModel& model, double norm_tol) {
    PowerIterationOptions opts;
    opts.tol = norm_tol;
    double s = 0.0;
    for (const auto& b : model.blocks()) {
        const MatrixXd M = b.U.sqrt_matrix() * b.L.matrix() * model.W().sqrt_matrix();
        const double nrm = operator_norm(M, opts);
        s += nrm * nrm;
    }
    return std::sqrt(s);
}

double cocoercivity_constant(const PdModel& model, double norm_tol) {
    const double factor = 1.0 - coupling_norm(model, norm_tol);
    if (!(factor > 4.0 * norm_tol)) {
        throw ConditionViolation("(g)", "1 - sqrt(sum ||U_k^{1/2} L_k W^{1/2}||^2) = " + fmt(factor) +
                                            " is not positive; the primal-dual coupling is too strong");
    }
    double inv = 1.0 / model.mu();
    for (const auto& b : model.blocks()) inv = std::min(inv, 1.0 / b.nu);
    return factor * inv;
}

double sampled_lipschitz(const std::function<VectorXd(const VectorXd&)>& grad, const SpdMetricd& M,
                         std::size_t samples, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    const Matrix<double>& S = M.sqrt_matrix();
    for (std::size_t i = 0; i < samples; ++i) {
        const VectorXd a = detail::sample_normal<double>(rng, M.dim(), scale);
        const VectorXd b = detail::sample_normal<double>(rng, M.dim(), scale);
        const VectorXd ga = S * grad(VectorXd(S * a));
        const VectorXd gb = S * grad(VectorXd(S * b));
        const double d = (a - b).norm();
        if (d > 0) worst = std::max(worst, (ga - gb).norm() / d);
    }
    return worst;
}

double estimate_lipschitz(const std::function<VectorXd(const VectorXd&)>& grad, const SpdMetricd& M,
                          std::uint64_t seed, double safety) {
    double best = sampled_lipschitz(grad, M, 1000, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    const Matrix<double>& S = M.sqrt_matrix();
    const VectorXd a = detail::sample_normal<double>(rng, M.dim(), 1.0);
    const VectorXd ga = S * grad(VectorXd(S * a));
    VectorXd d = detail::sample_normal<double>(rng, M.dim(), 1.0).normalized();
    for (int it = 0; it < 200; ++it) {
        const VectorXd diff = S * grad(VectorXd(S * VectorXd(a + d))) - ga;
        const double q = diff.norm();
        best = std::max(best, q);
        if (!(q > 0)) break;
        d = diff / q;
    }
    return safety * best;
}

CertificateReport check_pd_conditions(const PdModel& model, const IterationSchedule& sched,
                                      const PdOracleBundle* oracles, const PdCheckOptions& opts) {
    if (oracles) oracles->validate(model);
    const Index H = opts.horizon;
    const SequenceRule& lam = sched.lambda();
    CertificateReport rep;
    rep.name = "primal-dual conditions";
    rep.clauses.push_back({"(a)", "information grows with n", ClauseStatus::pass, std::nullopt,
                           "realized by the seeded sample ledger"});

    {
        Clause c{"(b)", "sum lambda_n sqrt(E||b_n||^2) < inf and sum lambda_n sqrt(E||c_n||^2) < inf",
                 ClauseStatus::pass, std::nullopt, ""};
        if (oracles) {
            for (const auto& e : oracles->b.bounds()) append_summable(c, lam.times(e), H, "b");
            for (const auto& ck : oracles->c) {
                for (const auto& e : ck.bounds()) append_summable(c, lam.times(e), H, "c");
            }
        }
        if (c.detail.empty()) c.detail = "no perturbations";
        rep.clauses.push_back(std::move(c));
    }

    auto bias_clause = [&](const std::string& id, const std::string& desc, const GradientOracle* o) {
        Clause c{id, desc, ClauseStatus::pass, std::nullopt, ""};
        if (!o) {
            c.detail = "exact gradient";
        } else if (auto env = o->bias_envelope()) {
            append_summable(c, lam.pow(0.5).times(*env), H, "sqrt(lambda_n) bias_n");
        } else {
            c.status = ClauseStatus::fail;
            c.detail = "no declared bias envelope";
        }
        return c;
    };
    rep.clauses.push_back(bias_clause("(c)", "sum sqrt(lambda_n) ||E[u_n|X_n] - grad h(x_n)|| < inf",
                                      oracles ? &oracles->u : nullptr));
    {
        Clause c{"(d)", "sum sqrt(lambda_n) ||E[s_kn|X_n] - grad j_k^*(v_kn)|| < inf", ClauseStatus::pass,
                 std::nullopt, ""};
        if (oracles) {
            for (std::size_t k = 0; k < oracles->s.size(); ++k) {
                Clause ck = bias_clause("(d)", "", &oracles->s[k]);
                if (ck.status == ClauseStatus::fail) c.status = ClauseStatus::fail;
                if (ck.status == ClauseStatus::checked_numerically && c.status == ClauseStatus::pass) {
                    c.status = ClauseStatus::checked_numerically;
                }
                c.detail += (c.detail.empty() ? "" : "; ") + ("k=" + std::to_string(k + 1) + ": ") + ck.detail;
            }
        }
        if (c.detail.empty()) c.detail = "exact gradients";
        rep.clauses.push_back(std::move(c));
    }

    {
        Clause c{"(e)", "sum tau_n < inf and (lambda_n zeta_n) in l^(1/2)", ClauseStatus::pass, std::nullopt, ""};
        append_summable(c, sched.tau(), H, "tau");
        std::vector<const GradientOracle*> all;
        if (oracles) {
            all.push_back(&oracles->u);
            for (const auto& s : oracles->s) all.push_back(&s);
        }
        for (const GradientOracle* o : all) {
            const auto z = o->zeta_envelope();
            if (!z) {
                c.status = ClauseStatus::fail;
                c.detail += "; no declared variance envelope";
                continue;
            }
            const auto sup = z->sup();
            if (sup && !std::isfinite(*sup)) {
                c.status = ClauseStatus::fail;
                c.detail += "; zeta_n unbounded";
                continue;
            }
            append_summable(c, lam.times(*z).pow(0.5), H, "sqrt(lambda_n zeta_n)");
        }
        rep.clauses.push_back(std::move(c));
    }

    if (model.f_rule) {
        Clause c{"(f)", "sum sqrt(lambda_n) alpha_n < inf and sum lambda_n beta_n < inf", ClauseStatus::pass,
                 std::nullopt, ""};
        append_summable(c, lam.pow(0.5).times(sched.alpha()), H, "sqrt(lambda_n) alpha_n");
        append_summable(c, lam.times(sched.beta()), H, "lambda_n beta_n");
        rep.clauses.push_back(std::move(c));
    }

    {
        Clause c{"(g)", "max{mu, nu_1, ..., nu_q} < 2 (1 - sqrt(sum ||U_k^{1/2} L_k W^{1/2}||^2))",
                 ClauseStatus::pass, std::nullopt, ""};
        double mx = model.mu();
        for (const auto& b : model.blocks()) mx = std::max(mx, b.nu);
        const double rhs = 2.0 * (1.0 - coupling_norm(model, opts.norm_tol));
        if (!(mx < rhs)) c.status = ClauseStatus::fail;
        c.detail = "max = " + fmt(mx) + (mx < rhs ? " < " : " >= ") + fmt(rhs);
        rep.clauses.push_back(std::move(c));
    }

    {
        Clause c{"relaxation", "inf lambda_n > 0 or sum lambda_n = inf", ClauseStatus::pass, std::nullopt, ""};
        const auto inf_l = lam.inf();
        if (inf_l && *inf_l > 0) {
            c.detail = "inf lambda_n = " + fmt(*inf_l);
        } else if (auto exact = lam.summable()) {
            if (*exact) c.status = ClauseStatus::fail;
            c.detail = lam.describe() + (*exact ? " is summable" : " has divergent sum");
        } else {
            double total = 0.0, half = 0.0;
            for (Index n = 0; n <= H; ++n) {
                total += lam(n);
                if (n == H / 2) half = total;
            }
            const double tail = total > 0 ? (total - half) / total : 0.0;
            c.status = tail > 0.1 ? ClauseStatus::checked_numerically : ClauseStatus::fail;
            c.detail = "tail fraction " + fmt(tail) + " up to N=" + std::to_string(H);
        }
        rep.clauses.push_back(std::move(c));
    }

    {
        const auto grad_h = [&](const VectorXd& x) { return model.h().apply(x); };
        const double q = sampled_lipschitz(grad_h, model.W(), opts.lipschitz_samples, opts.seed);
        Clause c{"mu", "sampled Lipschitz quotient of grad(h o W^{1/2}) <= mu", ClauseStatus::pass, std::nullopt,
                 "max quotient " + fmt(q) + ", declared " + fmt(model.mu())};
        if (q > model.mu() * (1.0 + 1e-6)) c.status = ClauseStatus::fail;
        rep.clauses.push_back(std::move(c));
    }
    for (std::size_t k = 0; k < model.q(); ++k) {
        const auto& b = model.blocks()[k];
        const double q = sampled_lipschitz(b.j_star_grad, b.U, opts.lipschitz_samples, opts.seed + 1 + k);
        Clause c{"nu_" + std::to_string(k + 1), "sampled Lipschitz quotient of grad(j_k^* o U_k^{1/2}) <= nu_k",
                 ClauseStatus::pass, std::nullopt, "max quotient " + fmt(q) + ", declared " + fmt(b.nu)};
        if (q > b.nu * (1.0 + 1e-6)) c.status = ClauseStatus::fail;
        if (!b.rho) c.detail += "; no infimal convolution, nu_k is an explicit bound";
        rep.clauses.push_back(std::move(c));
    }
    return rep;
}

// ---------------------------------------------------------------- step

PdState pd_step(const PdState& state, const PdModel& model, const PdOracleBundle& oracles,
                const IterationSchedule& sched, SampleLedger& ledger, PdStepDetail* detail) {
    const Index n = state.n;
    const ScheduleValues sv = sched.eval(n);
    const double lam = sv.lambda;
    const VectorXd& x = state.x;
    const std::size_t q = model.q();

    VectorXd Ltv = VectorXd::Zero(model.dim_x());
    for (std::size_t k = 0; k < q; ++k) Ltv += model.blocks()[k].L.apply_adjoint(state.v.block(k));

    const VectorXd u = oracles.u.next_estimate(x, n, ledger);
    const VectorXd b = oracles.b.next(n, model.dim_x(), ledger.seed());
    const VectorXd p = x - model.W().apply(VectorXd(Ltv + u));

    PdState next;
    next.n = n + 1;
    next.last_y = metric_prox(model.f_at(n), p, model.W_inverse());
    if (oracles.b.kind() != PerturbationKind::zero) next.last_y += b;
    const VectorXd& y = next.last_y;
    next.x = lam == 1.0 ? y : VectorXd(x + lam * (y - x));

    const VectorXd r = 2.0 * y - x;
    next.v = state.v;
    next.last_w = state.v;
    VectorXd s_all(model.dim_v());
    VectorXd c_all(model.dim_v());
    Index off = 0;
    for (std::size_t k = 0; k < q; ++k) {
        const DualBlock& blk = model.blocks()[k];
        const VectorXd vk = state.v.block(k);
        const VectorXd s = oracles.s[k].next_estimate(vk, n, ledger);
        const VectorXd c = oracles.c[k].next(n, blk.dim(), ledger.seed());
        VectorXd w = conjugate_prox(blk.g, VectorXd(vk + blk.U.apply(VectorXd(blk.L.apply(r) - s))), blk.U);
        if (oracles.c[k].kind() != PerturbationKind::zero) w += c;
        next.last_w.block(k) = w;
        next.v.block(k) = lam == 1.0 ? w : VectorXd(vk + lam * (w - vk));
        s_all.segment(off, blk.dim()) = s;
        c_all.segment(off, blk.dim()) = c;
        off += blk.dim();
    }

    if (detail) {
        detail->sv = sv;
        detail->u = u;
        detail->s = std::move(s_all);
        detail->b = b;
        detail->c = std::move(c_all);
    }
    const VectorXd z = next.joined();
    if (!z.allFinite()) {
        throw DivergenceError("non-finite primal-dual iterate at n=" + std::to_string(next.n), FbState{next.n, z, {}});
    }
    if (z.norm() > kDivergenceBound) {
        throw DivergenceError("primal-dual iterate norm exceeds 1e12 at n=" + std::to_string(next.n),
                              FbState{next.n, z, {}});
    }
    return next;
}

// ---------------------------------------------------------------- embedding

VectorXd embedded_resolvent(const PdModel& model, const VectorXd& z, Index n) {
    const Index dx = model.dim_x();
    if (z.size() != dx + model.dim_v()) throw StructuralError("embedded_resolvent: dimension mismatch");
    const VectorXd x = z.head(dx);
    VectorXd Ltv = VectorXd::Zero(dx);
    Index off = dx;
    for (const auto& b : model.blocks()) {
        Ltv += b.L.apply_adjoint(VectorXd(z.segment(off, b.dim())));
        off += b.dim();
    }
    VectorXd out(z.size());
    const VectorXd y = metric_prox(model.f_at(n), VectorXd(x - model.W().apply(Ltv)), model.W_inverse());
    out.head(dx) = y;
    const VectorXd r = 2.0 * y - x;
    off = dx;
    for (const auto& b : model.blocks()) {
        const VectorXd vk = z.segment(off, b.dim());
        out.segment(off, b.dim()) = conjugate_prox(b.g, VectorXd(vk + b.U.apply(b.L.apply(r))), b.U);
        off += b.dim();
    }
    return out;
}

VectorXd PdEmbedding::solve_V(const VectorXd& z) const { return V_factor.solve(z); }

double PdEmbedding::V_norm(const VectorXd& z) const { return std::sqrt(std::max(0.0, z.dot(V * z))); }

VectorXd PdEmbedding::join(const VectorXd& x, const VectorXd& v) const {
    VectorXd z(x.size() + v.size());
    z << x, v;
    return z;
}

PdEmbedding embed_as_fb(const PdModel& model) { return embed_as_fb(model, PdOracleBundle::exact(model)); }

PdEmbedding embed_as_fb(const PdModel& model, const PdOracleBundle& oracles) {
    oracles.validate(model);
    const auto m = std::make_shared<const PdModel>(model);
    const Index dx = model.dim_x();
    const Index D = dx + model.dim_v();

    PdEmbedding e;
    e.space = model.space();
    e.V = MatrixXd::Zero(D, D);
    e.V.topLeftCorner(dx, dx) = model.W_inverse().matrix();
    Index off = dx;
    for (const auto& b : model.blocks()) {
        e.V.block(off, 0, b.dim(), dx) = -b.L.matrix();
        e.V.block(0, off, dx, b.dim()) = -b.L.adjoint_matrix();
        e.V.block(off, off, b.dim(), b.dim()) = b.U.inverse_matrix();
        off += b.dim();
    }
    e.V = 0.5 * (e.V + e.V.transpose());
    e.V_factor.compute(e.V);
    if (e.V_factor.info() != Eigen::Success) {
        throw ParameterError("embed_as_fb: V is not positive definite (condition (g) fails)");
    }
    e.V_metric = SpdMetricd(e.V);
    e.theta = cocoercivity_constant(model);

    std::vector<CocoerciveMapd> dual_fields;
    for (const auto& b : model.blocks()) dual_fields.push_back(dual_gradient_field(b));
    double theta_plain = model.h().theta();
    for (const auto& f : dual_fields) theta_plain = std::min(theta_plain, f.theta());
    auto joint = [m, dual_fields, dx](const VectorXd& z) {
        VectorXd out(z.size());
        out.head(dx) = m->h().apply(VectorXd(z.head(dx)));
        Index o = dx;
        for (std::size_t k = 0; k < dual_fields.size(); ++k) {
            const Index d = dual_fields[k].dim();
            out.segment(o, d) = dual_fields[k].apply(VectorXd(z.segment(o, d)));
            o += d;
        }
        return out;
    };
    e.B_plain = CocoerciveMapd::custom(D, joint, theta_plain);

    const auto factor = std::make_shared<const Eigen::LLT<MatrixXd>>(e.V_factor);
    e.problem.B = CocoerciveMapd::custom(
        D, [joint, factor](const VectorXd& z) { return VectorXd(factor->solve(joint(z))); }, e.theta);
    auto resolvent_at = [m](Index n) {
        return ResolventOperatord::custom([m, n](const VectorXd& z, double gamma) {
            if (gamma != 1.0) throw ParameterError("embedded resolvent is defined for gamma = 1 only");
            return embedded_resolvent(*m, z, n);
        });
    };
    e.problem.A = resolvent_at(0);
    e.family.rule = resolvent_at;
    e.problem.demiregularity = model.demiregularity;
    e.problem.objective = [m, dx](const VectorXd& z) { return m->objective(VectorXd(z.head(dx))); };

    const PdOracleBundle bundle = oracles;
    e.oracle = GradientOracle::custom(
        e.problem.B, [bundle, factor, dx, m](const VectorXd& z, Index n, SampleLedger& ledger) {
            VectorXd us(z.size());
            us.head(dx) = bundle.u.next_estimate(VectorXd(z.head(dx)), n, ledger);
            Index o = dx;
            for (std::size_t k = 0; k < bundle.s.size(); ++k) {
                const Index d = m->blocks()[k].dim();
                us.segment(o, d) = bundle.s[k].next_estimate(VectorXd(z.segment(o, d)), n, ledger);
                o += d;
            }
            return VectorXd(factor->solve(us));
        });

    std::vector<PerturbationSource> parts{oracles.b};
    std::vector<Index> dims{dx};
    for (std::size_t k = 0; k < model.q(); ++k) {
        parts.push_back(oracles.c[k]);
        dims.push_back(model.blocks()[k].dim());
    }
    const bool all_zero = std::all_of(parts.begin(), parts.end(),
                                      [](const PerturbationSource& p) { return p.kind() == PerturbationKind::zero; });
    e.perturb = all_zero ? PerturbationSource::zero() : PerturbationSource::blocks(parts, dims);
    return e;
}

// ---------------------------------------------------------------- run

RunTrace pd_run(const PdModel& model, const PdOracleBundle& oracles, const IterationSchedule& sched,
                const StoppingRule& stop, std::uint64_t seed, const VectorXd& x0, const VectorXd& v0,
                const PdRunOptions& options) {
    if (stop.max_iters < 0) throw ParameterError("pd_run: max_iters must be >= 0");
    if (stop.thinning < 1) throw ParameterError("pd_run: thinning must be >= 1");
    oracles.validate(model);
    const CertificateReport cert = check_pd_conditions(model, sched, &oracles);
    if (!cert.passed() && !options.force) {
        for (const auto& c : cert.clauses) {
            if (c.status == ClauseStatus::fail) throw ConditionViolation(c.id, cert.summary());
        }
    }

    std::optional<PdEmbedding> emb;
    try {
        emb = embed_as_fb(model, oracles);
    } catch (const Error&) {
        if (!options.force) throw;
    }
    const bool audit = options.audit && emb.has_value();

    std::optional<SampleLedger> ledger_store;
    if (oracles.u.kind() == OracleKind::empirical_quadratic) {
        ledger_store.emplace(seed, oracles.u.distribution(), options.cache_draws);
    } else {
        ledger_store.emplace(seed);
    }
    SampleLedger& ledger = *ledger_store;

    RunTrace trace;
    trace.label = options.label;
    trace.seed = seed;
    trace.config_digest = options.config_digest;
    trace.norm = emb ? "V" : "euclidean";
    trace.z_refs = options.references;
    trace.metadata["certificate"] = cert.to_json();
    trace.metadata["forced"] = !cert.passed() && options.force;
    trace.metadata["demiregular"] = model.demiregularity.any();
    if (emb) trace.metadata["theta"] = emb->theta;

    const std::size_t K = options.references.size();
    const Index D = model.dim_x() + model.dim_v();
    for (const auto& z : options.references) {
        if (z.size() != D) throw StructuralError("pd_run: reference pair dimension mismatch");
    }
    auto norm_of = [&](const VectorXd& d) { return emb ? emb->V_norm(d) : d.norm(); };

    std::vector<VectorXd> Pz;
    if (audit) {
        for (const auto& z : options.references) Pz.push_back(emb->solve_V(emb->B_plain.apply(z)));
    }

    PdState state = make_pd_state(model, x0, v0);
    PdStepDetail det;
    try {
        for (;;) {
            const Index n = state.n;
            const ScheduleValues sv = sched.eval(n);
            const VectorXd z = state.joined();
            TraceRecord rec;
            rec.n = n;
            rec.lambda = sv.lambda;
            rec.gamma = 1.0;
            rec.objective = model.objective(state.x);
            rec.dist.resize(K);
            rec.s1.assign(K, kNaN);
            rec.s2.assign(K, kNaN);
            rec.allowance.assign(K, kNaN);
            for (std::size_t k = 0; k < K; ++k) rec.dist[k] = norm_of(z - options.references[k]);

            VectorXd Bz;
            if (audit) {
                Bz = emb->B_plain.apply(z);
                const VectorXd Pzn = emb->solve_V(Bz);
                const VectorXd w = z - Pzn;
                const VectorXd Jw = embedded_resolvent(model, w, n);
                rec.residual = emb->V_norm(z - Jw);
                for (std::size_t k = 0; k < K; ++k) {
                    const double a = emb->V_norm(Pzn - Pz[k]);
                    const double b = emb->V_norm(w - Jw + Pz[k]);
                    rec.s1[k] = sv.lambda * a * a;
                    rec.s2[k] = sv.lambda * b * b;
                }
            }

            const bool at_tol = stop.residual_tol > 0 && audit && rec.residual <= stop.residual_tol;
            if (n >= stop.max_iters || at_tol) {
                trace.records.push_back(std::move(rec));
                trace.snapshots.push_back({n, z});
                trace.termination = at_tol ? Termination::residual_tol : Termination::max_iters;
                break;
            }

            PdState next;
            try {
                next = pd_step(state, model, oracles, sched, ledger, &det);
            } catch (const DivergenceError&) {
                trace.records.push_back(std::move(rec));
                trace.snapshots.push_back({n, z});
                throw;
            }
            VectorXd pert(D);
            pert << det.b, det.c;
            rec.perturbation_norm = pert.norm();
            if (audit) {
                VectorXd us(D);
                us << det.u, det.s;
                const VectorXd err = us - Bz;
                rec.grad_error = err.norm();
                const VectorXd t = embedded_resolvent(model, VectorXd(z - emb->solve_V(us)), n);
                VectorXd pre(D);
                pre << next.last_y, next.last_w.data();
                const double a_eff = emb->V_norm(pre - t);
                rec.relax_surrogate = sv.lambda * (1.0 - sv.lambda) * std::pow(emb->V_norm(t - z), 2);
                const double allow = sv.lambda * (emb->V_norm(emb->solve_V(err)) + a_eff);
                for (std::size_t k = 0; k < K; ++k) rec.allowance[k] = allow;
            }
            trace.records.push_back(std::move(rec));
            if (n % stop.thinning == 0) trace.snapshots.push_back({n, z});
            state = std::move(next);
        }
    } catch (DivergenceError& e) {
        trace.termination = Termination::diverged;
        e.attach_trace(std::move(trace));
        throw;
    }
    return trace;
}

}  // namespace sfbs
