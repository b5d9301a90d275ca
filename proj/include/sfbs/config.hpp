#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "sfbs/stochastic.hpp"

namespace sfbs {

/// A configuration file after parsing and schema validation.
struct ConfigDocument {
    nlohmann::json doc;
    std::string text;
    /// Directory that relative paths inside the file are resolved against.
    std::filesystem::path base_dir;
    /// File stem, used as the default run label.
    std::string name;
    /// SHA-256 of the file bytes, hex.
    std::string digest;
};

/// JSON Schema (draft 2020-12 subset) every configuration is validated against.
const nlohmann::json& config_schema();

/// Checks `doc` against config_schema(): types, required keys, enums, bounds, and no unknown
/// keys. Throws ConfigError naming the field as a JSON pointer, with the line number in
/// `text` when it can be located.
void validate_config(const nlohmann::json& doc, std::string_view text = {});

ConfigDocument parse_config(std::string text, const std::filesystem::path& base_dir, std::string name = "config");
ConfigDocument load_config(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);

/// Rule object {"kind": "constant" | "power" | "geometric", "c", "p", "r"} or a bare number.
/// "theta_multiple": m replaces c by m * theta (theta must then be finite).
SequenceRule rule_from_json(const nlohmann::json& j, double theta = std::numeric_limits<double>::quiet_NaN());

/// Prox object {"kind": "zero" | "l1" | "squared_l2" | "box", "weight", "lower", "upper"}.
ProxFunctiond prox_from_json(const nlohmann::json& j, Index dim);

/// A matrix given as a path to a text matrix file, or inline as rows of numbers
/// (at most 16 entries).
MatrixXd matrix_ref(const nlohmann::json& j, const std::filesystem::path& base_dir, const std::string& field);
/// A vector given as a path (n x 1 text matrix) or an inline array of at most 16 numbers.
VectorXd vector_ref(const nlohmann::json& j, const std::filesystem::path& base_dir, const std::string& field);

inline constexpr std::size_t kMaxInlineEntries = 16;

}  // namespace sfbs
