#include "sfbs/matrix_io.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace sfbs {

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& s) {
    if (s == "nan") return std::nan("");
    if (s == "inf") return HUGE_VAL;
    if (s == "-inf") return -HUGE_VAL;
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0' || errno == ERANGE) {
        throw StructuralError("cannot parse number: '" + s + "'");
    }
    return v;
}

MatrixXd read_matrix_text(std::istream& in) {
    long rows = -1;
    long cols = -1;
    std::string header;
    while (std::getline(in, header)) {
        const auto first = header.find_first_not_of(" \t\r");
        if (first != std::string::npos && header[first] != '#') break;
    }
    std::istringstream hs(header);
    if (!(hs >> rows >> cols) || rows < 0 || cols < 0) {
        throw StructuralError("matrix text: header must be 'rows cols'");
    }
    std::string extra;
    if (hs >> extra) throw StructuralError("matrix text: header has trailing tokens");
    MatrixXd m(rows, cols);
    std::string tok;
    for (long i = 0; i < rows; ++i) {
        for (long j = 0; j < cols; ++j) {
            if (!(in >> tok)) throw StructuralError("matrix text: fewer entries than rows*cols");
            m(i, j) = parse_double(tok);
        }
    }
    if (in >> tok) throw StructuralError("matrix text: more entries than rows*cols");
    return m;
}

MatrixXd read_matrix_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open matrix file: " + path.string());
    return read_matrix_text(in);
}

void write_matrix_text(std::ostream& out, const MatrixXd& m) {
    out << m.rows() << ' ' << m.cols() << '\n';
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            if (j) out << ' ';
            out << format_double(m(i, j));
        }
        out << '\n';
    }
}

void write_matrix_text(const std::filesystem::path& path, const MatrixXd& m) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write matrix file: " + path.string());
    write_matrix_text(out, m);
}

VectorXd read_vector_text(const std::filesystem::path& path) {
    MatrixXd m = read_matrix_text(path);
    if (m.cols() != 1 && m.rows() != 1) throw StructuralError("vector file must be n x 1 or 1 x n: " + path.string());
    return m.cols() == 1 ? VectorXd(m.col(0)) : VectorXd(m.row(0).transpose());
}

VectorXd vector_from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw StructuralError("vector JSON must be an array of numbers");
    VectorXd v(static_cast<Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw StructuralError("vector JSON entries must be numbers");
        v(static_cast<Index>(i)) = j[i].get<double>();
    }
    return v;
}

MatrixXd matrix_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.empty()) throw StructuralError("matrix JSON must be a nonempty array of rows");
    const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
    MatrixXd m(static_cast<Index>(j.size()), static_cast<Index>(cols));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_array() || j[i].size() != cols) throw StructuralError("matrix JSON rows must have equal length");
        for (std::size_t c = 0; c < cols; ++c) {
            if (!j[i][c].is_number()) throw StructuralError("matrix JSON entries must be numbers");
            m(static_cast<Index>(i), static_cast<Index>(c)) = j[i][c].get<double>();
        }
    }
    return m;
}

nlohmann::json matrix_to_json(const MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Index c = 0; c < m.cols(); ++c) row.push_back(m(i, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

nlohmann::json vector_to_json(const VectorXd& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
    return arr;
}

}  // namespace sfbs
