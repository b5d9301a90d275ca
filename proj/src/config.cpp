#include "sfbs/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "sfbs/errors.hpp"
#include "sfbs/matrix_io.hpp"

namespace sfbs {

using nlohmann::json;

namespace {

constexpr const char* kSchemaText = R"json({
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "sfbs experiment configuration",
  "type": "object",
  "additionalProperties": false,
  "required": ["problem", "run"],
  "properties": {
    "description": {"type": "string"},
    "problem": {"$ref": "#/$defs/problem"},
    "oracle": {"$ref": "#/$defs/oracle"},
    "dual_oracle": {"$ref": "#/$defs/oracle"},
    "perturbation": {"$ref": "#/$defs/perturbation"},
    "dual_perturbation": {"$ref": "#/$defs/perturbation"},
    "schedule": {"$ref": "#/$defs/schedule"},
    "run": {"$ref": "#/$defs/run"},
    "output": {"$ref": "#/$defs/output"},
    "reproduce": {"$ref": "#/$defs/reproduce"},
    "reference": {"$ref": "#/$defs/reference"}
  },
  "$defs": {
    "matrix": {
      "description": "path to a text matrix file, \"identity\", or inline rows (at most 16 entries)",
      "type": ["string", "array"]
    },
    "rule": {
      "description": "bare number (constant) or c * (n + 1)^(-p) * r^n",
      "type": ["number", "object"],
      "additionalProperties": false,
      "required": ["kind"],
      "properties": {
        "kind": {"enum": ["constant", "power", "geometric"]},
        "c": {"type": "number"},
        "p": {"type": "number"},
        "r": {"type": "number", "exclusiveMinimum": 0},
        "theta_multiple": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "prox": {
      "type": "object",
      "additionalProperties": false,
      "required": ["kind"],
      "properties": {
        "kind": {"enum": ["zero", "l1", "squared_l2", "box"]},
        "weight": {"type": "number", "minimum": 0},
        "lower": {"type": "number"},
        "upper": {"type": "number"}
      }
    },
    "linear_model": {
      "description": "(K_i, z_i) with K_i = K + K_std G_i, z_i = K_i x_true + (z - K x_true) + z_std e_i",
      "type": "object",
      "additionalProperties": false,
      "required": ["K"],
      "properties": {
        "K": {"$ref": "#/$defs/matrix"},
        "z": {"$ref": "#/$defs/matrix"},
        "x_true": {"$ref": "#/$defs/matrix"},
        "dim": {"type": "integer", "minimum": 1},
        "K_std": {"type": "number", "minimum": 0},
        "z_std": {"type": "number", "minimum": 0}
      }
    },
    "block": {
      "type": "object",
      "additionalProperties": false,
      "required": ["g", "L"],
      "properties": {
        "g": {"$ref": "#/$defs/prox"},
        "L": {"description": "\"identity\", \"difference\", a path, or inline rows", "$ref": "#/$defs/matrix"},
        "U": {"type": ["number", "string", "array"]},
        "j": {
          "type": "object",
          "additionalProperties": false,
          "required": ["kind"],
          "properties": {
            "kind": {"enum": ["quadratic", "none"]},
            "rho": {"type": "number", "exclusiveMinimum": 0},
            "nu": {"type": "number", "exclusiveMinimum": 0}
          }
        }
      }
    },
    "problem": {
      "type": "object",
      "additionalProperties": false,
      "required": ["type", "data"],
      "properties": {
        "type": {"enum": ["fb", "pd"]},
        "data": {"$ref": "#/$defs/linear_model"},
        "f": {"$ref": "#/$defs/prox"},
        "varying": {
          "type": "object",
          "additionalProperties": false,
          "required": ["kind", "rho"],
          "properties": {
            "kind": {"enum": ["moreau"]},
            "rho": {"$ref": "#/$defs/rule"}
          }
        },
        "W": {"type": ["number", "string", "array"]},
        "mu": {"description": "number or \"estimate\"", "type": ["number", "string"]},
        "blocks": {"type": "array", "minItems": 1, "items": {"$ref": "#/$defs/block"}},
        "z_ref": {"$ref": "#/$defs/matrix"},
        "demiregular": {"type": "boolean"}
      }
    },
    "noise": {
      "type": "object",
      "additionalProperties": false,
      "required": ["scale"],
      "properties": {
        "dist": {"enum": ["gaussian", "uniform_ball"]},
        "scale": {"$ref": "#/$defs/rule"}
      }
    },
    "oracle": {
      "type": "object",
      "additionalProperties": false,
      "required": ["kind"],
      "properties": {
        "kind": {"enum": ["exact", "empirical", "additive_noise"]},
        "batch": {
          "type": "object",
          "additionalProperties": false,
          "required": ["delta"],
          "properties": {
            "m0": {"type": "integer", "minimum": 1},
            "c": {"type": "number", "exclusiveMinimum": 0},
            "delta": {"type": "number", "exclusiveMinimum": 0}
          }
        },
        "noise": {"$ref": "#/$defs/noise"},
        "stream": {"type": "integer", "minimum": 0}
      }
    },
    "perturbation": {
      "type": "object",
      "additionalProperties": false,
      "required": ["kind"],
      "properties": {
        "kind": {"enum": ["zero", "decaying"]},
        "dist": {"enum": ["gaussian", "uniform_ball"]},
        "magnitude": {"$ref": "#/$defs/rule"},
        "stream": {"type": "integer", "minimum": 0}
      }
    },
    "schedule": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "lambda": {"$ref": "#/$defs/rule"},
        "gamma": {"$ref": "#/$defs/rule"},
        "tau": {"$ref": "#/$defs/rule"}
      }
    },
    "run": {
      "type": "object",
      "additionalProperties": false,
      "required": ["seeds"],
      "properties": {
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "max_iters": {"type": "integer", "minimum": 0},
        "residual_tol": {"type": "number", "minimum": 0},
        "thinning": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 1},
        "force": {"type": "boolean"},
        "audit": {"type": "boolean"},
        "cache_draws": {"type": "boolean"},
        "certificate_horizon": {"type": "integer", "minimum": 1},
        "x0": {"$ref": "#/$defs/matrix"},
        "v0": {"$ref": "#/$defs/matrix"}
      }
    },
    "output": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "directory": {"type": "string"},
        "formats": {"type": "array", "items": {"enum": ["csv", "json"]}}
      }
    },
    "reproduce": {
      "type": "object",
      "additionalProperties": false,
      "required": ["delta", "kappa"],
      "properties": {
        "delta": {"type": "number", "exclusiveMinimum": 0},
        "kappa": {"type": "number"},
        "N": {"type": "integer", "minimum": 2},
        "seed": {"type": "integer", "minimum": 0},
        "trials": {"type": "integer", "minimum": 2},
        "n_min": {"type": "number", "minimum": 1},
        "batch_c": {"type": "number", "exclusiveMinimum": 0},
        "workers": {"type": "integer", "minimum": 1}
      }
    },
    "reference": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "iterations": {"type": "integer", "minimum": 1},
        "residual_tol": {"type": "number", "minimum": 0}
      }
    }
  }
})json";

std::string type_name(const json& j) {
    if (j.is_number_integer() || j.is_number_unsigned()) return "integer";
    if (j.is_number()) return "number";
    if (j.is_string()) return "string";
    if (j.is_boolean()) return "boolean";
    if (j.is_array()) return "array";
    if (j.is_object()) return "object";
    return "null";
}

bool has_type(const json& j, const std::string& t) {
    if (t == "number") return j.is_number();
    if (t == "integer") return j.is_number_integer() || j.is_number_unsigned();
    if (t == "string") return j.is_string();
    if (t == "boolean") return j.is_boolean();
    if (t == "array") return j.is_array();
    if (t == "object") return j.is_object();
    if (t == "null") return j.is_null();
    return false;
}

// Line of the last key of `pointer` in `text`, found by scanning for the quoted keys in order.
int locate_line(std::string_view text, const std::string& pointer) {
    if (text.empty()) return 0;
    std::size_t pos = 0;
    std::size_t start = 1;
    bool found = false;
    while (start <= pointer.size()) {
        std::size_t end = pointer.find('/', start);
        if (end == std::string::npos) end = pointer.size();
        const std::string key = pointer.substr(start, end - start);
        start = end + 1;
        if (key.empty() || std::all_of(key.begin(), key.end(), ::isdigit)) continue;
        const std::size_t at = text.find("\"" + key + "\"", pos);
        if (at == std::string_view::npos) break;
        pos = at;
        found = true;
    }
    if (!found) return 0;
    return 1 + int(std::count(text.begin(), text.begin() + std::ptrdiff_t(pos), '\n'));
}

struct Validator {
    const json& root;
    std::string_view text;

    [[noreturn]] void fail(const std::string& where, const std::string& msg) const {
        const int line = locate_line(text, where);
        std::string loc = where.empty() ? "/" : where;
        if (line > 0) loc += " (line " + std::to_string(line) + ")";
        throw ConfigError("config " + loc + ": " + msg);
    }

    const json& resolve(const json& schema) const {
        if (!schema.contains("$ref")) return schema;
        const std::string ref = schema["$ref"].get<std::string>();
        return root.at(json::json_pointer(ref.substr(1)));
    }

    void check(const json& value, const json& schema_in, const std::string& where) const {
        const json& schema = resolve(schema_in);
        if (schema.contains("type")) {
            const json& t = schema["type"];
            bool ok = false;
            std::string want;
            if (t.is_string()) {
                ok = has_type(value, t);
                want = t;
            } else {
                for (const auto& e : t) {
                    ok = ok || has_type(value, e);
                    want += (want.empty() ? "" : " or ") + e.get<std::string>();
                }
            }
            if (!ok) fail(where, "expected " + want + ", got " + type_name(value));
        }
        if (schema.contains("enum")) {
            bool ok = false;
            for (const auto& e : schema["enum"]) ok = ok || e == value;
            if (!ok) fail(where, "value " + value.dump() + " is not one of " + schema["enum"].dump());
        }
        if (value.is_number()) {
            const double v = value.get<double>();
            if (schema.contains("minimum") && v < schema["minimum"].get<double>()) {
                fail(where, "must be >= " + schema["minimum"].dump());
            }
            if (schema.contains("exclusiveMinimum") && v <= schema["exclusiveMinimum"].get<double>()) {
                fail(where, "must be > " + schema["exclusiveMinimum"].dump());
            }
        }
        if (value.is_object()) {
            const json props = schema.value("properties", json::object());
            if (schema.contains("required")) {
                for (const auto& k : schema["required"]) {
                    if (!value.contains(k.get<std::string>())) {
                        fail(where, "missing required key \"" + k.get<std::string>() + "\"");
                    }
                }
            }
            for (const auto& [k, v] : value.items()) {
                const std::string sub = where + "/" + k;
                if (props.contains(k)) {
                    check(v, props[k], sub);
                } else if (schema.value("additionalProperties", true) == false) {
                    fail(sub, "unknown key \"" + k + "\"");
                }
            }
        }
        if (value.is_array()) {
            if (schema.contains("minItems") && value.size() < schema["minItems"].get<std::size_t>()) {
                fail(where, "needs at least " + schema["minItems"].dump() + " items");
            }
            if (schema.contains("items")) {
                for (std::size_t i = 0; i < value.size(); ++i) {
                    check(value[i], schema["items"], where + "/" + std::to_string(i));
                }
            }
        }
    }
};

std::size_t count_entries(const json& j) {
    if (j.is_number()) return 1;
    std::size_t n = 0;
    if (j.is_array()) {
        for (const auto& e : j) n += count_entries(e);
    }
    return n;
}

std::filesystem::path resolve_path(const std::string& p, const std::filesystem::path& base) {
    std::filesystem::path path(p);
    if (path.is_relative()) path = base / path;
    if (!std::filesystem::exists(path)) throw ConfigError("referenced file not found: " + path.string());
    return path;
}

void check_inline(const json& j, const std::string& field) {
    const std::size_t n = count_entries(j);
    if (n > kMaxInlineEntries) {
        throw ConfigError("config " + field + ": inline matrix has " + std::to_string(n) +
                          " entries; matrices above 16 entries must be referenced by file path");
    }
}

double rule_number(const json& j, const char* key, double fallback) {
    return j.contains(key) ? j[key].get<double>() : fallback;
}

}  // namespace

const json& config_schema() {
    static const json schema = json::parse(kSchemaText);
    return schema;
}

void validate_config(const json& doc, std::string_view text) {
    const json& schema = config_schema();
    Validator{schema, text}.check(doc, schema, "");
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

ConfigDocument parse_config(std::string text, const std::filesystem::path& base_dir, std::string name) {
    ConfigDocument c;
    try {
        c.doc = json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t byte = std::min<std::size_t>(e.byte, text.size());
        const int line = 1 + int(std::count(text.begin(), text.begin() + std::ptrdiff_t(byte), '\n'));
        throw ConfigError("config is not valid JSON (line " + std::to_string(line) + "): " + e.what());
    }
    validate_config(c.doc, text);
    c.digest = sha256_hex(text);
    c.text = std::move(text);
    c.base_dir = base_dir;
    c.name = std::move(name);
    return c;
}

ConfigDocument load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    const auto abs = std::filesystem::absolute(path);
    return parse_config(ss.str(), abs.parent_path(), path.stem().string());
}

SequenceRule rule_from_json(const json& j, double theta) {
    if (j.is_number()) return SequenceRule::constant(j.get<double>());
    const std::string kind = j.at("kind").get<std::string>();
    double c = rule_number(j, "c", 1.0);
    if (j.contains("theta_multiple")) {
        if (j.contains("c")) throw ConfigError("rule: give either c or theta_multiple, not both");
        if (!std::isfinite(theta)) throw ConfigError("rule: theta_multiple is only allowed where theta is known");
        c = j["theta_multiple"].get<double>() * theta;
    }
    if (kind == "constant") return SequenceRule::constant(c);
    if (kind == "power") return SequenceRule::power(c, rule_number(j, "p", 1.0));
    if (kind == "geometric") return SequenceRule::geometric(c, rule_number(j, "r", 0.5));
    throw ConfigError("unknown rule kind: " + kind);
}

ProxFunctiond prox_from_json(const json& j, Index dim) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "zero") return ProxFunctiond::zero();
    if (kind == "l1") return ProxFunctiond::l1(j.value("weight", 1.0));
    if (kind == "squared_l2") return ProxFunctiond::squared_l2(j.value("weight", 1.0), VectorXd::Zero(dim));
    if (kind == "box") {
        if (!j.contains("lower") || !j.contains("upper")) throw ConfigError("box prox needs lower and upper");
        return ProxFunctiond::box_indicator(VectorXd::Constant(dim, j["lower"].get<double>()),
                                            VectorXd::Constant(dim, j["upper"].get<double>()));
    }
    throw ConfigError("unknown prox kind: " + kind);
}

MatrixXd matrix_ref(const json& j, const std::filesystem::path& base_dir, const std::string& field) {
    if (j.is_string()) return read_matrix_text(resolve_path(j.get<std::string>(), base_dir));
    check_inline(j, field);
    try {
        return matrix_from_json(j);
    } catch (const Error& e) {
        throw ConfigError("config " + field + ": " + e.what());
    }
}

VectorXd vector_ref(const json& j, const std::filesystem::path& base_dir, const std::string& field) {
    if (j.is_string()) {
        const MatrixXd m = read_matrix_text(resolve_path(j.get<std::string>(), base_dir));
        if (m.cols() != 1) throw ConfigError("config " + field + ": expected an n x 1 matrix file");
        return m.col(0);
    }
    check_inline(j, field);
    try {
        return vector_from_json(j);
    } catch (const Error& e) {
        throw ConfigError("config " + field + ": " + e.what());
    }
}

}  // namespace sfbs
