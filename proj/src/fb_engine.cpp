#include "sfbs/fb_engine.hpp"

#include <cmath>
#include <limits>

namespace sfbs {

double FbProblem::objective_value(const VectorXd& x) const {
    if (objective) return objective(x);
    const ProxFunctiond* f = A.function();
    if (f && B.has_value()) return f->value(x) + B.value(x);
    return std::numeric_limits<double>::quiet_NaN();
}

ResolventOperatord VaryingResolventFamily::at(Index n) const {
    if (!rule) throw ParameterError("varying resolvent family has no rule");
    return rule(n);
}

VaryingResolventFamily VaryingResolventFamily::constant(ResolventOperatord A) {
    return {[A = std::move(A)](Index) { return A; }};
}

namespace {

FbState step_with(const FbState& state, const ResolventOperatord& A, const FbProblem& prob,
                  const GradientOracle& oracle, const PerturbationSource& perturb, const IterationSchedule& sched,
                  SampleLedger& ledger, StepDetail* detail) {
    if (state.x.size() != prob.dim() || oracle.dim() != prob.dim()) {
        throw StructuralError("fb_step: state, problem and oracle dimensions differ");
    }
    const Index n = state.n;
    const ScheduleValues sv = sched.eval(n);
    const VectorXd& x = state.x;

    VectorXd u = oracle.next_estimate(x, n, ledger);
    VectorXd t = A.apply(VectorXd(x - sv.gamma * u), sv.gamma);
    VectorXd a;
    FbState next;
    next.n = n + 1;
    if (perturb.kind() == PerturbationKind::zero) {
        next.last_y = t;
    } else {
        a = perturb.next(n, prob.dim(), ledger.seed());
        next.last_y = t + a;
    }
    if (sv.lambda == 1.0) {
        next.x = next.last_y;
    } else {
        next.x = x + sv.lambda * (next.last_y - x);
    }

    if (detail) {
        detail->sv = sv;
        detail->u = std::move(u);
        detail->a = a.size() ? std::move(a) : VectorXd(VectorXd::Zero(prob.dim()));
        detail->t = std::move(t);
    }
    if (!next.x.allFinite()) {
        throw DivergenceError("non-finite iterate at n=" + std::to_string(next.n), std::move(next));
    }
    if (next.x.norm() > kDivergenceBound) {
        throw DivergenceError("iterate norm exceeds 1e12 at n=" + std::to_string(next.n), std::move(next));
    }
    return next;
}

}  // namespace

FbState fb_step(const FbState& state, const FbProblem& prob, const GradientOracle& oracle,
                const PerturbationSource& perturb, const IterationSchedule& sched, SampleLedger& ledger,
                StepDetail* detail) {
    return step_with(state, prob.A, prob, oracle, perturb, sched, ledger, detail);
}

FbState fb_step_varying(const FbState& state, const FbProblem& prob, const VaryingResolventFamily& family,
                        const GradientOracle& oracle, const PerturbationSource& perturb,
                        const IterationSchedule& sched, SampleLedger& ledger, StepDetail* detail) {
    return step_with(state, family.at(state.n), prob, oracle, perturb, sched, ledger, detail);
}

double residual(const FbProblem& prob, const VectorXd& x, double gamma) {
    if (!(gamma > 0)) throw ParameterError("residual: gamma must be positive");
    const VectorXd w = x - gamma * prob.B.apply(x);
    return (x - prob.A.apply(w, gamma)).norm();
}

PropertyReport check_drift(const VaryingResolventFamily& family, const ResolventOperatord& A,
                           const IterationSchedule& sched, Index n_max, Index dim, std::size_t samples_per_n,
                           std::uint64_t rng_seed, double scale) {
    if (samples_per_n < 1) throw ParameterError("check_drift: samples must be >= 1");
    std::mt19937_64 rng(rng_seed);
    PropertyReport rep{"resolvent drift", 0, 0, std::numeric_limits<double>::infinity()};
    for (Index n = 0; n <= n_max; ++n) {
        const ScheduleValues sv = sched.eval(n);
        const ResolventOperatord An = family.at(n);
        for (std::size_t s = 0; s < samples_per_n; ++s) {
            const VectorXd x = detail::sample_normal<double>(rng, dim, scale);
            const double gap = (An.apply(x, sv.gamma) - A.apply(x, sv.gamma)).norm();
            const double margin = sv.alpha * x.norm() + sv.beta - gap;
            rep.worst_margin = std::min(rep.worst_margin, margin);
            ++rep.samples;
            if (margin < -1e-9 * (1.0 + x.norm())) ++rep.violations;
        }
    }
    return rep;
}

CertificateReport certify(const FbProblem& prob, const GradientOracle& oracle, const PerturbationSource& perturb,
                          const IterationSchedule& sched, bool varying, Index horizon) {
    CertificateInputs in = certificate_inputs(oracle, perturb, varying);
    in.horizon = horizon;
    return admissibility_certificate(sched, prob.B.theta(), in);
}

RunTrace run(const FbProblem& prob, const GradientOracle& oracle, const PerturbationSource& perturb,
             const IterationSchedule& sched, const StoppingRule& stop, std::uint64_t seed, const VectorXd& x0,
             const RunOptions& options) {
    if (oracle.kind() == OracleKind::empirical_quadratic) {
        SampleLedger ledger(seed, oracle.distribution(), options.cache_draws);
        return run(prob, oracle, perturb, sched, stop, ledger, x0, options);
    }
    SampleLedger ledger(seed);
    return run(prob, oracle, perturb, sched, stop, ledger, x0, options);
}

RunTrace run(const FbProblem& prob, const GradientOracle& oracle, const PerturbationSource& perturb,
             const IterationSchedule& sched, const StoppingRule& stop, SampleLedger& ledger, const VectorXd& x0,
             const RunOptions& options) {
    if (stop.max_iters < 0) throw ParameterError("run: max_iters must be >= 0");
    if (stop.thinning < 1) throw ParameterError("run: thinning must be >= 1");
    if (x0.size() != prob.dim()) throw StructuralError("run: x0 dimension mismatch");
    for (const auto& z : prob.z_ref) {
        if (z.size() != prob.dim()) throw StructuralError("run: z_ref dimension mismatch");
    }

    const bool varying = options.family != nullptr;
    const CertificateReport cert = certify(prob, oracle, perturb, sched, varying, options.certificate_horizon);
    if (!cert.passed() && !options.force) {
        for (const auto& c : cert.clauses) {
            if (c.status == ClauseStatus::fail) throw ConditionViolation(c.id, cert.summary());
        }
    }

    RunTrace trace;
    trace.label = options.label;
    trace.seed = ledger.seed();
    trace.config_digest = options.config_digest;
    trace.z_refs = prob.z_ref;
    trace.metadata["certificate"] = cert.to_json();
    trace.metadata["forced"] = !cert.passed() && options.force;
    trace.metadata["demiregular"] = prob.demiregularity.any();

    const std::size_t K = prob.z_ref.size();
    std::vector<VectorXd> Bz;
    if (options.audit) {
        for (const auto& z : prob.z_ref) Bz.push_back(prob.B.apply(z));
    }

    FbState state{0, x0, VectorXd()};
    StepDetail det;
    try {
        for (;;) {
            const Index n = state.n;
            const ScheduleValues sv = sched.eval(n);
            const VectorXd& x = state.x;
            TraceRecord rec;
            rec.n = n;
            rec.lambda = sv.lambda;
            rec.gamma = sv.gamma;
            rec.objective = prob.objective_value(x);
            rec.dist.resize(K);
            rec.s1.assign(K, kNaN);
            rec.s2.assign(K, kNaN);
            rec.allowance.assign(K, kNaN);
            for (std::size_t k = 0; k < K; ++k) rec.dist[k] = (x - prob.z_ref[k]).norm();

            VectorXd Bx;
            if (options.audit || stop.residual_tol > 0) {
                Bx = prob.B.apply(x);
                const VectorXd w = x - sv.gamma * Bx;
                const VectorXd Jw = prob.A.apply(w, sv.gamma);
                rec.residual = (x - Jw).norm();
                if (options.audit) {
                    for (std::size_t k = 0; k < K; ++k) {
                        rec.s1[k] = sv.lambda * (Bx - Bz[k]).squaredNorm();
                        rec.s2[k] = sv.lambda * (w - Jw + sv.gamma * Bz[k]).squaredNorm();
                    }
                }
            }

            const bool at_tol = stop.residual_tol > 0 && rec.residual <= stop.residual_tol;
            if (n >= stop.max_iters || at_tol) {
                trace.records.push_back(std::move(rec));
                trace.snapshots.push_back({n, x});
                trace.termination = at_tol ? Termination::residual_tol : Termination::max_iters;
                break;
            }

            FbState next;
            try {
                next = varying ? fb_step_varying(state, prob, *options.family, oracle, perturb, sched, ledger, &det)
                               : fb_step(state, prob, oracle, perturb, sched, ledger, &det);
            } catch (const DivergenceError&) {
                // keep the last finite iterate in the partial trace
                trace.records.push_back(std::move(rec));
                trace.snapshots.push_back({n, x});
                throw;
            }

            rec.perturbation_norm = det.a.norm();
            rec.relax_surrogate = sv.lambda * (1.0 - sv.lambda) * (det.t - x).squaredNorm();
            if (options.audit) {
                rec.grad_error = (det.u - Bx).norm();
                for (std::size_t k = 0; k < K; ++k) {
                    double allow = sv.lambda * (sv.gamma * rec.grad_error + rec.perturbation_norm);
                    if (varying) {
                        allow += sv.lambda * (sv.alpha * (prob.z_ref[k] - sv.gamma * Bz[k]).norm() + sv.beta);
                    }
                    rec.allowance[k] = allow;
                }
            }
            trace.records.push_back(std::move(rec));
            if (n % stop.thinning == 0) trace.snapshots.push_back({n, x});
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
