#pragma once

// Experiment configuration: flat "section.key = value" text with a fixed
// schema. Values are stored in canonical string form, so serialize() then
// parse reproduces the same config exactly.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "parallel.hpp"
#include "sequence.hpp"

namespace srnn {

enum class KeyType { integer, real, boolean, choice, int_list, real_list, matrix };

struct KeySpec {
  const char* key;
  KeyType type;
  const char* def;  // nullptr: required
  std::vector<std::string> choices = {};
};

inline const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> s = {
      {"model.kind", KeyType::choice, "rnn", {"rnn", "brnn", "scalar", "linear"}},
      {"model.d_x", KeyType::integer, nullptr},
      {"model.d_h", KeyType::integer, nullptr},
      {"model.d_y", KeyType::integer, nullptr},
      {"model.l", KeyType::integer, "2"},
      {"model.activation", KeyType::choice, "monomial", {"monomial", "polynomial"}},
      {"model.coeffs", KeyType::real_list, ""},
      {"model.recipe", KeyType::choice, "random", {"random", "explicit"}},
      {"model.a1_norm", KeyType::real, "0.5"},
      {"model.u_norm", KeyType::real, "0.3"},
      {"model.b1_norm", KeyType::real, "0.5"},
      {"model.v_norm", KeyType::real, "0.3"},
      {"model.a2_scale", KeyType::real, "1"},
      {"model.unit_rows", KeyType::boolean, "false"},
      {"model.A1", KeyType::matrix, ""},
      {"model.U", KeyType::matrix, ""},
      {"model.A2", KeyType::matrix, ""},
      {"model.B1", KeyType::matrix, ""},
      {"model.V", KeyType::matrix, ""},
      {"model.constraint", KeyType::choice, "enforce", {"enforce", "warn", "off"}},
      {"model.noise", KeyType::real, "0"},
      {"input.w_recipe", KeyType::choice, "zero", {"zero", "diag", "random", "explicit"}},
      {"input.w_norm", KeyType::real, "0.5"},
      {"input.W", KeyType::matrix, ""},
      {"input.sigma", KeyType::real, "1"},
      {"input.init", KeyType::choice, "stationary", {"stationary", "zero"}},
      {"estimation.n", KeyType::integer, "100000"},
      {"estimation.n_grid", KeyType::int_list, "10000,100000,1000000"},
      {"estimation.seeds", KeyType::int_list, "1,2,3,4,5"},
      {"estimation.burn_in", KeyType::integer, "10"},
      {"estimation.recover_u", KeyType::boolean, "true"},
      {"estimation.u_method", KeyType::choice, "lsq", {"lsq", "pinv"}},
      {"estimation.control_variates", KeyType::boolean, "true"},
      {"estimation.lags", KeyType::integer, "2"},
      {"estimation.score_orders", KeyType::int_list, "1,2"},
      {"decomposition.rank", KeyType::integer, "0"},
      {"decomposition.restarts", KeyType::integer, "0"},
      {"decomposition.iters", KeyType::integer, "200"},
      {"decomposition.tol", KeyType::real, "1e-10"},
      {"decomposition.pinv_tol", KeyType::real, "1e-10"},
      {"decomposition.seed", KeyType::integer, "7"},
      {"output.dir", KeyType::choice, "out", {}},
      {"output.format", KeyType::choice, "spt1", {"spt1", "csv"}},
  };
  return s;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // shortest form that round-trips
  for (int p = 1; p <= 17; ++p) {
    char t[32];
    std::snprintf(t, sizeof t, "%.*g", p, v);
    if (std::strtod(t, nullptr) == v) return t;
  }
  return buf;
}

inline double parse_real(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  require(pos == s.size() && !s.empty() && std::isfinite(v), "cli",
          key + ": expected a number, got '" + s + "'", ErrorKind::config);
  return v;
}

inline long long parse_int(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) {
    // allow exact integers written in scientific form, e.g. 1e6
    const double d = parse_real(key, s);
    require(d == std::floor(d) && std::abs(d) < 9e15, "cli",
            key + ": expected an integer, got '" + s + "'", ErrorKind::config);
    v = static_cast<long long>(d);
  }
  return v;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::string cell;
  std::istringstream in(s);
  while (std::getline(in, cell, sep)) out.push_back(trim(cell));
  return out;
}

// Canonical string of a value, or a config error naming the key.
inline std::string canonical(const KeySpec& k, const std::string& raw) {
  const std::string key = k.key;
  const std::string v = trim(raw);
  switch (k.type) {
    case KeyType::integer: return std::to_string(parse_int(key, v));
    case KeyType::real: return format_real(parse_real(key, v));
    case KeyType::boolean:
      if (v == "true" || v == "1" || v == "yes") return "true";
      if (v == "false" || v == "0" || v == "no") return "false";
      fail("cli", key + ": expected true or false, got '" + v + "'", ErrorKind::config);
    case KeyType::choice:
      if (!k.choices.empty() && std::find(k.choices.begin(), k.choices.end(), v) == k.choices.end()) {
        std::string opts;
        for (const auto& c : k.choices) opts += (opts.empty() ? "" : ", ") + c;
        fail("cli", key + ": '" + v + "' is not one of " + opts, ErrorKind::config);
      }
      return v;
    case KeyType::int_list: {
      std::string out;
      for (const auto& c : split(v, ',')) out += (out.empty() ? "" : ",") + std::to_string(parse_int(key, c));
      return out;
    }
    case KeyType::real_list: {
      std::string out;
      for (const auto& c : split(v, ',')) out += (out.empty() ? "" : ",") + format_real(parse_real(key, c));
      return out;
    }
    case KeyType::matrix: {
      std::string out;
      std::size_t width = 0;
      for (const auto& row : split(v, ';')) {
        const auto cells = split(row, ',');
        require(!cells.empty() && (width == 0 || cells.size() == width), "cli",
                key + ": matrix rows must be non-empty and of equal length", ErrorKind::config);
        width = cells.size();
        std::string r;
        for (const auto& c : cells) r += (r.empty() ? "" : ",") + format_real(parse_real(key, c));
        out += (out.empty() ? "" : ";") + r;
      }
      return out;
    }
  }
  return v;
}

}  // namespace detail

struct ExperimentConfig {
  std::map<std::string, std::string> values;  // every schema key, canonical form

  const std::string& str(const std::string& key) const {
    auto it = values.find(key);
    require(it != values.end(), "cli", "missing required key " + key, ErrorKind::config);
    return it->second;
  }
  long long integer(const std::string& key) const { return detail::parse_int(key, str(key)); }
  double real(const std::string& key) const { return detail::parse_real(key, str(key)); }
  bool boolean(const std::string& key) const { return str(key) == "true"; }
  std::vector<long long> int_list(const std::string& key) const {
    std::vector<long long> out;
    for (const auto& c : detail::split(str(key), ',')) out.push_back(detail::parse_int(key, c));
    return out;
  }
  std::vector<double> real_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& c : detail::split(str(key), ',')) out.push_back(detail::parse_real(key, c));
    return out;
  }
  std::optional<Matrix> matrix(const std::string& key) const {
    const auto rows = detail::split(str(key), ';');
    if (rows.empty()) return std::nullopt;
    const auto w = detail::split(rows[0], ',').size();
    Matrix M(rows.size(), w);
    for (Index i = 0; i < rows.size(); ++i) {
      const auto cells = detail::split(rows[i], ',');
      for (Index j = 0; j < w; ++j) M(i, j) = detail::parse_real(key, cells[j]);
    }
    return M;
  }

  Index d_x() const { return integer("model.d_x"); }
  Index d_h() const { return integer("model.d_h"); }
  Index d_y() const { return integer("model.d_y"); }
  int l() const { return static_cast<int>(integer("model.l")); }
  const std::string& kind() const { return str("model.kind"); }

  std::string serialize() const {
    std::string out;
    for (const auto& k : config_schema()) out += std::string(k.key) + " = " + values.at(k.key) + "\n";
    return out;
  }

  bool operator==(const ExperimentConfig& o) const { return values == o.values; }
};

namespace detail {

inline const KeySpec& lookup_key(const std::string& key) {
  const auto& schema = config_schema();
  for (const auto& k : schema)
    if (key == k.key) return k;
  std::string best;
  std::size_t bd = 4;
  for (const auto& k : schema) {
    const auto d = edit_distance(key, k.key);
    if (d < bd) {
      bd = d;
      best = k.key;
    }
  }
  fail("cli",
       "unknown key '" + key + "'" + (best.empty() ? "" : " (did you mean '" + best + "'?)"),
       ErrorKind::config);
}

inline void set_value(std::map<std::string, std::string>& vals, const std::string& assignment,
                      const std::string& where, bool allow_repeat) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos, "cli", where + ": expected key = value", ErrorKind::config);
  const std::string key = trim(assignment.substr(0, eq));
  const KeySpec& ks = lookup_key(key);
  require(allow_repeat || !vals.count(key), "cli", where + ": duplicate key " + key,
          ErrorKind::config);
  vals[key] = canonical(ks, assignment.substr(eq + 1));
}

inline void check_constraint(const ExperimentConfig& c, double a_norm, double u_norm,
                             const std::string& keys) {
  if (c.l() < 2 || c.str("model.constraint") == "off") return;
  if (a_norm + u_norm <= 1.0 + 1e-12) return;
  const std::string msg = keys + ": contraction assumption ‖A1‖ + ‖U‖ ≤ 1 violated (" +
                          format_real(a_norm + u_norm) + ")";
  if (c.str("model.constraint") == "enforce") fail("cli", msg, ErrorKind::config);
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  for (const char* k : {"model.d_x", "model.d_h", "model.d_y"})
    require(c.integer(k) > 0, "cli", std::string(k) + ": dimension must be positive",
            ErrorKind::config);
  const std::string kind = c.kind();
  const int l = c.l();
  require(l >= 1, "cli", "model.l: activation order must be at least 1", ErrorKind::config);
  if (kind == "scalar")
    require(l >= 3 && c.d_y() == 1, "cli", "model.kind: scalar output needs l ≥ 3 and d_y = 1",
            ErrorKind::config);
  if (kind == "linear")
    require(l == 1, "cli", "model.kind: linear model needs l = 1", ErrorKind::config);
  if (c.str("model.activation") == "polynomial")
    require(c.real_list("model.coeffs").size() == static_cast<std::size_t>(l) + 1, "cli",
            "model.coeffs: polynomial activation needs l + 1 coefficients", ErrorKind::config);
  for (const char* k : {"model.a1_norm", "model.u_norm", "model.b1_norm", "model.v_norm",
                        "model.a2_scale", "model.noise", "input.w_norm"})
    require(c.real(k) >= 0, "cli", std::string(k) + ": must be non-negative", ErrorKind::config);
  require(c.real("input.w_norm") < 1.0, "cli", "input.w_norm: spectral norm of W must be below 1",
          ErrorKind::config);
  require(c.real("input.sigma") > 0, "cli", "input.sigma: must be positive", ErrorKind::config);
  require(c.integer("estimation.n") >= 3, "cli", "estimation.n: need at least 3 positions",
          ErrorKind::config);
  for (auto n : c.int_list("estimation.n_grid"))
    require(n >= 3, "cli", "estimation.n_grid: entries must be at least 3", ErrorKind::config);
  for (auto s : c.int_list("estimation.seeds"))
    require(s >= 0, "cli", "estimation.seeds: seeds must be non-negative", ErrorKind::config);
  for (const char* k : {"estimation.burn_in", "estimation.lags", "decomposition.rank",
                        "decomposition.restarts", "decomposition.seed"})
    require(c.integer(k) >= 0, "cli", std::string(k) + ": must be non-negative", ErrorKind::config);
  require(c.integer("decomposition.iters") > 0, "cli", "decomposition.iters: must be positive",
          ErrorKind::config);
  for (auto m : c.int_list("estimation.score_orders"))
    require(m >= 1 && m <= 4, "cli", "estimation.score_orders: orders must lie in 1..4",
            ErrorKind::config);

  const Index dx = c.d_x(), dh = c.d_h(), dy = c.d_y();
  const Index a2_rows = kind == "brnn" ? 2 * dh : dh;
  if (c.str("model.recipe") == "explicit") {
    auto need = [&](const char* key, Index r, Index cols) {
      const auto M = c.matrix(key);
      require(M.has_value(), "cli", std::string(key) + ": explicit recipe needs this matrix",
              ErrorKind::config);
      require(static_cast<Index>(M->rows()) == r && static_cast<Index>(M->cols()) == cols, "cli",
              std::string(key) + ": expected " + std::to_string(r) + " x " + std::to_string(cols),
              ErrorKind::config);
      return *M;
    };
    const Matrix A1 = need("model.A1", dh, dx), U = need("model.U", dh, dh);
    need("model.A2", a2_rows, dy);
    detail::check_constraint(c, spectral_norm(A1), spectral_norm(U), "model.A1, model.U");
    if (kind == "brnn") {
      const Matrix B1 = need("model.B1", dh, dx), V = need("model.V", dh, dh);
      detail::check_constraint(c, spectral_norm(B1), spectral_norm(V), "model.B1, model.V");
    }
  } else if (!c.boolean("model.unit_rows")) {
    detail::check_constraint(c, c.real("model.a1_norm"), c.real("model.u_norm"),
                             "model.a1_norm + model.u_norm");
    if (kind == "brnn")
      detail::check_constraint(c, c.real("model.b1_norm"), c.real("model.v_norm"),
                               "model.b1_norm + model.v_norm");
  }
  if (c.str("input.w_recipe") == "explicit") {
    const auto W = c.matrix("input.W");
    require(W && static_cast<Index>(W->rows()) == dx && static_cast<Index>(W->cols()) == dx, "cli",
            "input.W: explicit recipe needs a d_x x d_x matrix", ErrorKind::config);
    require(spectral_norm(*W) < 1.0, "cli", "input.W: spectral norm of W must be below 1",
            ErrorKind::config);
  }
}

// Parses config text, applies "key=value" overrides with the same rules, fills
// defaults and validates.
inline ExperimentConfig parse_config_text(const std::string& text,
                                          const std::vector<std::string>& overrides = {}) {
  std::map<std::string, std::string> vals;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    if (detail::trim(line).empty()) continue;
    detail::set_value(vals, line, "line " + std::to_string(lineno), false);
  }
  for (const auto& o : overrides) detail::set_value(vals, o, "--set " + o, true);
  ExperimentConfig c;
  for (const auto& k : config_schema()) {
    auto it = vals.find(k.key);
    if (it != vals.end()) c.values[k.key] = it->second;
    else if (k.def) c.values[k.key] = detail::canonical(k, k.def);
    else fail("cli", std::string("missing required key ") + k.key, ErrorKind::config);
  }
  validate(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string& path,
                                     const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cli", "cannot open config " + path, ErrorKind::io);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), overrides);
}

// ---------------------------------------------------------------------------
// Builders. The model draws from derive_seed(seed, 1), data from
// derive_seed(seed, 2).

inline MarkovChainSpec build_spec(const ExperimentConfig& c, std::uint64_t seed) {
  const Index d = c.d_x();
  MarkovChainSpec s;
  const std::string r = c.str("input.w_recipe");
  const double w = c.real("input.w_norm");
  if (r == "zero") s.W = Matrix::Zero(d, d);
  else if (r == "diag") s.W = w * Matrix::Identity(d, d);
  else if (r == "explicit") s.W = *c.matrix("input.W");
  else {
    Rng rng(derive_seed(seed, 3));
    s.W = w > 0 ? with_spectral_norm(random_gaussian_matrix(d, d, rng), w) : Matrix::Zero(d, d);
  }
  s.sigma = c.real("input.sigma");
  if (c.str("input.init") == "zero") {
    s.stationary_init = false;
    s.init_mean = Vector::Zero(d);
    s.init_cov = Matrix::Zero(d, d);
  }
  s.validate();
  return s;
}

namespace detail {

inline Matrix random_block(Index r, Index cols, double norm, bool unit_rows, Rng& rng) {
  Matrix M = random_gaussian_matrix(r, cols, rng);
  if (unit_rows) {
    for (Index i = 0; i < r; ++i) M.row(i).normalize();
    return M;
  }
  return norm > 0 ? with_spectral_norm(M, norm) : Matrix::Zero(r, cols);
}

inline Activation activation_of(const ExperimentConfig& c) {
  Activation a;
  a.l = c.l();
  if (c.str("model.activation") == "polynomial") a.coeffs = c.real_list("model.coeffs");
  return a;
}

}  // namespace detail

inline RnnParams build_rnn(const ExperimentConfig& c, std::uint64_t seed) {
  require(c.kind() != "brnn", "cli", "model.kind: brnn config used for a one-directional model",
          ErrorKind::config);
  RnnParams p;
  p.act = detail::activation_of(c);
  if (c.str("model.recipe") == "explicit") {
    p.A1 = *c.matrix("model.A1");
    p.U = *c.matrix("model.U");
    p.A2 = *c.matrix("model.A2");
  } else {
    Rng rng(derive_seed(seed, 1));
    const bool unit = c.boolean("model.unit_rows");
    p.A1 = detail::random_block(c.d_h(), c.d_x(), c.real("model.a1_norm"), unit, rng);
    p.U = detail::random_block(c.d_h(), c.d_h(), c.real("model.u_norm"), false, rng);
    p.A2 = c.real("model.a2_scale") * random_gaussian_matrix(c.d_h(), c.d_y(), rng);
    if (unit)
      detail::check_constraint(c, spectral_norm(p.A1), spectral_norm(p.U),
                               "model.unit_rows, model.u_norm");
  }
  p.validate_shapes();
  return p;
}

inline BrnnParams build_brnn(const ExperimentConfig& c, std::uint64_t seed) {
  require(c.kind() == "brnn", "cli", "model.kind: expected brnn", ErrorKind::config);
  BrnnParams p;
  p.act = detail::activation_of(c);
  if (c.str("model.recipe") == "explicit") {
    p.A1 = *c.matrix("model.A1");
    p.U = *c.matrix("model.U");
    p.B1 = *c.matrix("model.B1");
    p.V = *c.matrix("model.V");
    p.A2 = *c.matrix("model.A2");
  } else {
    Rng rng(derive_seed(seed, 1));
    const bool unit = c.boolean("model.unit_rows");
    p.A1 = detail::random_block(c.d_h(), c.d_x(), c.real("model.a1_norm"), unit, rng);
    p.U = detail::random_block(c.d_h(), c.d_h(), c.real("model.u_norm"), false, rng);
    p.B1 = detail::random_block(c.d_h(), c.d_x(), c.real("model.b1_norm"), unit, rng);
    p.V = detail::random_block(c.d_h(), c.d_h(), c.real("model.v_norm"), false, rng);
    p.A2 = c.real("model.a2_scale") * random_gaussian_matrix(2 * c.d_h(), c.d_y(), rng);
  }
  p.validate_shapes();
  return p;
}

}  // namespace srnn
