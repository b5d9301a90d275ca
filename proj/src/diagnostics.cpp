#include "sfbs/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "sfbs/matrix_io.hpp"

namespace sfbs {

namespace {

constexpr const char* kHeader = "# sfbs-trace v1";

const char* const kScalarColumns[] = {"n",         "lambda",         "gamma",    "residual",
                                      "grad_error", "perturbation_norm", "objective", "relax_surrogate"};

double scalar_field(const TraceRecord& r, std::size_t i) {
    switch (i) {
        case 0: return double(r.n);
        case 1: return r.lambda;
        case 2: return r.gamma;
        case 3: return r.residual;
        case 4: return r.grad_error;
        case 5: return r.perturbation_norm;
        case 6: return r.objective;
        case 7: return r.relax_surrogate;
    }
    return kNaN;
}

void set_scalar_field(TraceRecord& r, std::size_t i, double v) {
    switch (i) {
        case 1: r.lambda = v; break;
        case 2: r.gamma = v; break;
        case 3: r.residual = v; break;
        case 4: r.grad_error = v; break;
        case 5: r.perturbation_norm = v; break;
        case 6: r.objective = v; break;
        case 7: r.relax_surrogate = v; break;
        default: break;
    }
}

const char* const kRefColumns[] = {"dist", "s1", "s2", "allow"};

std::vector<double>& ref_field(TraceRecord& r, std::size_t i) {
    switch (i) {
        case 0: return r.dist;
        case 1: return r.s1;
        case 2: return r.s2;
        default: return r.allowance;
    }
}

const std::vector<double>& ref_field(const TraceRecord& r, std::size_t i) {
    return ref_field(const_cast<TraceRecord&>(r), i);
}

double ref_value(const std::vector<double>& v, std::size_t k) { return k < v.size() ? v[k] : kNaN; }

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

}  // namespace

std::string to_string(Termination t) {
    switch (t) {
        case Termination::max_iters: return "max_iters";
        case Termination::residual_tol: return "residual_tol";
        case Termination::diverged: return "diverged";
    }
    return "?";
}

Termination termination_from_string(const std::string& s) {
    if (s == "max_iters") return Termination::max_iters;
    if (s == "residual_tol") return Termination::residual_tol;
    if (s == "diverged") return Termination::diverged;
    throw StructuralError("unknown termination '" + s + "'");
}

const TraceRecord& RunTrace::last() const {
    if (records.empty()) throw StructuralError("trace has no records");
    return records.back();
}

std::size_t RunTrace::reference_index(const VectorXd& z) const {
    bool shape_ok = false;
    for (std::size_t k = 0; k < z_refs.size(); ++k) {
        if (z_refs[k].size() != z.size()) continue;
        shape_ok = true;
        if (z_refs[k] == z) return k;
    }
    if (!shape_ok) throw StructuralError("z_ref does not match the trace's reference shapes");
    throw ParameterError("trace has no distance series for this z_ref");
}

std::vector<std::string> RunTrace::column_names() const {
    std::vector<std::string> names(std::begin(kScalarColumns), std::end(kScalarColumns));
    for (const char* base : kRefColumns) {
        for (std::size_t k = 0; k < z_refs.size(); ++k) names.push_back(std::string(base) + "_z" + std::to_string(k));
    }
    return names;
}

std::vector<double> RunTrace::column(const std::string& name) const {
    const auto names = column_names();
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ParameterError("trace has no column '" + name + "'");
    const std::size_t c = std::size_t(it - names.begin());
    std::vector<double> out;
    out.reserve(records.size());
    const std::size_t ns = std::size(kScalarColumns);
    for (const auto& r : records) {
        if (c < ns) {
            out.push_back(scalar_field(r, c));
        } else {
            const std::size_t q = (c - ns) / z_refs.size();
            const std::size_t k = (c - ns) % z_refs.size();
            out.push_back(ref_value(ref_field(r, q), k));
        }
    }
    return out;
}

// ---------------------------------------------------------------- Fejer

nlohmann::json FejerReport::to_json() const {
    return {{"max_step_increase", max_step_increase},
            {"cumulative_increase", cumulative_increase},
            {"budget", budget},
            {"tolerance", tolerance},
            {"first_excess", first_excess},
            {"passed", passed}};
}

FejerReport fejer_monitor(std::span<const double> d, double budget, double tolerance) {
    if (!(budget >= 0) || !(tolerance >= 0)) throw ParameterError("fejer_monitor: budget and tolerance must be >= 0");
    FejerReport rep;
    rep.budget = budget;
    rep.tolerance = tolerance;
    bool finite = true;
    for (std::size_t i = 0; i + 1 < d.size(); ++i) {
        const double inc = d[i + 1] - d[i];
        if (!std::isfinite(inc)) {
            finite = false;
            if (rep.first_excess < 0) rep.first_excess = Index(i);
            continue;
        }
        rep.max_step_increase = std::max(rep.max_step_increase, inc);
        if (inc > 0) rep.cumulative_increase += inc;
        if (inc > budget + tolerance && rep.first_excess < 0) rep.first_excess = Index(i);
    }
    rep.passed = finite && rep.cumulative_increase <= budget + tolerance;
    return rep;
}

FejerReport fejer_monitor(const RunTrace& trace, const VectorXd& z_ref, double budget, double tolerance) {
    const std::size_t k = trace.reference_index(z_ref);
    const auto d = trace.column("dist_z" + std::to_string(k));
    return fejer_monitor(std::span<const double>(d), budget, tolerance);
}

double pathwise_budget(const RunTrace& trace, const VectorXd& z_ref) {
    const std::size_t k = trace.reference_index(z_ref);
    double total = 0.0;
    for (const auto& r : trace.records) {
        const double a = ref_value(r.allowance, k);
        if (std::isfinite(a)) total += a;
    }
    return total;
}

// ---------------------------------------------------------------- summability

nlohmann::json SummabilityReport::to_json() const {
    auto series = [](const SeriesSummary& s) {
        return nlohmann::json{{"total", s.total},
                              {"tail", s.tail},
                              {"tail_fraction", std::isfinite(s.tail_fraction) ? nlohmann::json(s.tail_fraction)
                                                                                : nlohmann::json(nullptr)},
                              {"summable", s.summable}};
    };
    return {{"applicable", applicable}, {"note", note}, {"N", N}, {"s1", series(s1)}, {"s2", series(s2)},
            {"passed", passed()}};
}

SeriesSummary summarize_series(std::span<const double> terms, double threshold) {
    SeriesSummary s;
    const std::size_t N = terms.empty() ? 0 : terms.size() - 1;
    for (std::size_t n = 0; n < terms.size(); ++n) {
        s.total += terms[n];
        if (2 * n > N) s.tail += terms[n];
    }
    s.tail_fraction = s.total > 0 ? s.tail / s.total : (s.total == 0 ? 0.0 : kNaN);
    s.summable = std::isfinite(s.tail_fraction) && s.tail_fraction <= threshold;
    return s;
}

SummabilityReport summability_report(const RunTrace& trace, const VectorXd& z_ref, double threshold) {
    const std::size_t k = trace.reference_index(z_ref);
    SummabilityReport rep;
    if (trace.records.size() < 2) {
        rep.note = "run of length 1: tail undefined";
        if (!trace.records.empty()) {
            rep.s1.total = ref_value(trace.records[0].s1, k);
            rep.s2.total = ref_value(trace.records[0].s2, k);
        }
        return rep;
    }
    std::vector<double> a;
    std::vector<double> b;
    for (const auto& r : trace.records) {
        const double x = ref_value(r.s1, k);
        const double y = ref_value(r.s2, k);
        if (!std::isfinite(x) || !std::isfinite(y)) {
            throw ParameterError("trace lacks exact-field audit columns (s1/s2); enable run.audit");
        }
        a.push_back(x);
        b.push_back(y);
    }
    rep.applicable = true;
    rep.N = trace.records.back().n;
    rep.s1 = summarize_series(a, threshold);
    rep.s2 = summarize_series(b, threshold);
    if (!rep.s1.summable || !rep.s2.summable) rep.note = "tail fraction above " + format_double(threshold);
    return rep;
}

double loglog_slope(std::span<const double> n, std::span<const double> values, double n_min) {
    if (n.size() != values.size()) throw StructuralError("loglog_slope: length mismatch");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    std::size_t m = 0;
    for (std::size_t i = 0; i < n.size(); ++i) {
        if (n[i] < n_min || !(values[i] > 0) || !std::isfinite(values[i])) continue;
        const double x = std::log(n[i]);
        const double y = std::log(values[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++m;
    }
    if (m < 2) return kNaN;
    const double M = double(m);
    const double den = M * sxx - sx * sx;
    return den > 0 ? (M * sxy - sx * sy) / den : kNaN;
}

// ---------------------------------------------------------------- export / import

std::filesystem::path sidecar_path(const std::filesystem::path& csv_path) {
    std::filesystem::path p = csv_path;
    p.replace_extension(".json");
    return p;
}

std::string trace_csv(const RunTrace& trace) {
    std::ostringstream os;
    os << kHeader << '\n';
    const auto names = trace.column_names();
    for (std::size_t i = 0; i < names.size(); ++i) os << (i ? "," : "") << names[i];
    os << '\n';
    const std::size_t K = trace.z_refs.size();
    for (const auto& r : trace.records) {
        os << r.n;
        for (std::size_t i = 1; i < std::size(kScalarColumns); ++i) os << ',' << format_double(scalar_field(r, i));
        for (std::size_t q = 0; q < std::size(kRefColumns); ++q) {
            for (std::size_t k = 0; k < K; ++k) os << ',' << format_double(ref_value(ref_field(r, q), k));
        }
        os << '\n';
    }
    return os.str();
}

void export_trace(const RunTrace& trace, const std::filesystem::path& path) {
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write trace: " + path.string());
        out << trace_csv(trace);
        if (!out) throw IoError("write failed: " + path.string());
    }
    nlohmann::json side;
    side["format"] = "sfbs-trace v1";
    side["label"] = trace.label;
    side["seed"] = trace.seed;
    side["config_digest"] = trace.config_digest;
    side["norm"] = trace.norm;
    side["columns"] = trace.column_names();
    side["records"] = trace.records.size();
    side["termination"] = to_string(trace.termination);
    nlohmann::json refs = nlohmann::json::array();
    for (const auto& z : trace.z_refs) refs.push_back(vector_to_json(z));
    side["z_refs"] = refs;
    nlohmann::json snaps = nlohmann::json::array();
    for (const auto& s : trace.snapshots) snaps.push_back({{"n", s.n}, {"x", vector_to_json(s.x)}});
    side["snapshots"] = snaps;
    side["metadata"] = trace.metadata;
    const auto sp = sidecar_path(path);
    std::ofstream out(sp, std::ios::binary);
    if (!out) throw IoError("cannot write trace sidecar: " + sp.string());
    out << side.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + sp.string());
}

RunTrace import_trace(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open trace: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kHeader) throw IoError("not an sfbs-trace v1 file: " + path.string());
    if (!std::getline(in, line)) throw IoError("trace has no column header: " + path.string());
    const auto names = split(line, ',');
    const std::size_t ns = std::size(kScalarColumns);
    if (names.size() < ns || (names.size() - ns) % std::size(kRefColumns) != 0) {
        throw IoError("unexpected trace columns in " + path.string());
    }
    const std::size_t K = (names.size() - ns) / std::size(kRefColumns);
    for (std::size_t i = 0; i < ns; ++i) {
        if (names[i] != kScalarColumns[i]) throw IoError("unexpected column '" + names[i] + "'");
    }

    RunTrace trace;
    trace.z_refs.assign(K, VectorXd());
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != names.size()) throw IoError("ragged trace row in " + path.string());
        TraceRecord r;
        r.n = Index(std::stoll(cells[0]));
        for (std::size_t i = 1; i < ns; ++i) set_scalar_field(r, i, parse_double(cells[i]));
        for (std::size_t q = 0; q < std::size(kRefColumns); ++q) {
            auto& v = ref_field(r, q);
            v.resize(K);
            for (std::size_t k = 0; k < K; ++k) v[k] = parse_double(cells[ns + q * K + k]);
        }
        trace.records.push_back(std::move(r));
    }

    const auto sp = sidecar_path(path);
    if (std::filesystem::exists(sp)) {
        std::ifstream sin(sp);
        nlohmann::json side;
        try {
            side = nlohmann::json::parse(sin);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("malformed trace sidecar " + sp.string() + ": " + e.what());
        }
        trace.label = side.value("label", "");
        trace.seed = side.value("seed", std::uint64_t{0});
        trace.config_digest = side.value("config_digest", "");
        trace.norm = side.value("norm", "euclidean");
        if (side.contains("termination")) trace.termination = termination_from_string(side["termination"]);
        if (side.contains("z_refs") && side["z_refs"].size() == K) {
            for (std::size_t k = 0; k < K; ++k) trace.z_refs[k] = vector_from_json(side["z_refs"][k]);
        }
        if (side.contains("snapshots")) {
            for (const auto& s : side["snapshots"]) trace.snapshots.push_back({Index(s["n"]), vector_from_json(s["x"])});
        }
        if (side.contains("metadata")) trace.metadata = side["metadata"];
    }
    return trace;
}

}  // namespace sfbs
