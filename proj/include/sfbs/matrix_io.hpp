#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include <json.hpp>
#include "sfbs/spaces.hpp"

namespace sfbs {

// Plain-text matrix format: a header line "rows cols" followed by the entries
// in row-major order, whitespace separated. Entries are written with 17
// significant digits so that reading back reproduces every double bitwise.
// Lines starting with '#' before the header are comments.

MatrixXd read_matrix_text(std::istream& in);
MatrixXd read_matrix_text(const std::filesystem::path& path);
void write_matrix_text(std::ostream& out, const MatrixXd& m);
void write_matrix_text(const std::filesystem::path& path, const MatrixXd& m);

/// Vectors are stored as n x 1 matrices.
VectorXd read_vector_text(const std::filesystem::path& path);

/// JSON: a matrix is an array of row arrays; a vector is a flat array of numbers.
MatrixXd matrix_from_json(const nlohmann::json& j);
VectorXd vector_from_json(const nlohmann::json& j);
nlohmann::json matrix_to_json(const MatrixXd& m);
nlohmann::json vector_to_json(const VectorXd& v);

/// "%.17g" rendering; "nan", "inf", "-inf" for non-finite values.
std::string format_double(double v);
double parse_double(const std::string& s);

}  // namespace sfbs
