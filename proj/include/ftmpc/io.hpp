#pragma once

#include <charconv>
#include <fstream>
#include <set>

#include "json.hpp"

#include "ftmpc/simharness.hpp"

namespace ftmpc {

using nlohmann::json;

// ---------------------------------------------------------------------------
// JSON (de)serialization: strict configs, design artifacts, CSV output.
// Matrices travel as row-major nested arrays with explicit "rows"/"cols";
// floats use shortest round-trip decimals.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  if (v == kInf) return "inf";
  if (v == -kInf) return "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline json mat_to_json(const Mat& m) {
  json rows = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(rows)}};
}

inline Mat mat_from_json(const json& j, const std::string& path) {
  if (!j.is_object() || !j.contains("rows") || !j.contains("cols") || !j.contains("data"))
    throw ConfigError(path + ": expected a matrix object {rows, cols, data}");
  for (const auto& [key, _] : j.items())
    if (key != "rows" && key != "cols" && key != "data")
      throw ConfigError(path + "." + key + ": unknown key");
  const int r = j.at("rows").get<int>();
  const int c = j.at("cols").get<int>();
  const auto& data = j.at("data");
  if (!data.is_array() || static_cast<int>(data.size()) != r)
    throw ConfigError(path + ".data: expected " + std::to_string(r) + " rows");
  Mat m(r, c);
  for (int i = 0; i < r; ++i) {
    const auto& row = data[i];
    if (!row.is_array() || static_cast<int>(row.size()) != c)
      throw ConfigError(path + ".data[" + std::to_string(i) + "]: expected " +
                        std::to_string(c) + " entries");
    for (int k = 0; k < c; ++k) m(i, k) = row[k].get<double>();
  }
  return m;
}

// bound entries may be numbers or the strings "inf"/"-inf"
inline double bound_from_json(const json& j, const std::string& path) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf" || s == "+inf") return kInf;
    if (s == "-inf") return -kInf;
  }
  throw ConfigError(path + ": expected a number or \"inf\"/\"-inf\"");
}

inline json bound_to_json(double v) {
  if (v == kInf) return json("inf");
  if (v == -kInf) return json("-inf");
  return json(v);
}

inline Vec bounds_from_json(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array");
  Vec v;
  for (std::size_t i = 0; i < j.size(); ++i)
    v.push_back(bound_from_json(j[i], path + "[" + std::to_string(i) + "]"));
  return v;
}

inline json bounds_to_json(const Vec& v) {
  json a = json::array();
  for (double x : v) a.push_back(bound_to_json(x));
  return a;
}

namespace detail {

inline void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                                const std::string& path) {
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key))
      throw ConfigError(path + "." + key + ": unknown key");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Problem configuration
// ---------------------------------------------------------------------------

enum class PlantKind { SingleLinear, MultiLinear, Nonlinear };

struct ProblemConfig {
  PlantKind kind = PlantKind::SingleLinear;
  std::string plant_name;  // builtin name, empty for custom matrices
  Mat A, B;                // plant (for nonlinear: Jacobians at the origin)
  Vec x_lo, x_hi, u_lo, u_hi;
  int N = 8;
  Mat Q, R;
  std::optional<Mat> K;
  GridSpec scan;
  double disturbance_bound = 1.0;
  int mc_runs = 10;
  int steps = 40;
  std::uint64_t seed = 1;
  std::string out_dir = "out";

  BoxConstraintSet box() const { return BoxConstraintSet(x_lo, x_hi, u_lo, u_hi); }
  LinearSystem system() const { return LinearSystem(A, B); }
};

/// The three named problems pin the studied plants so batch runs need no
/// hand-typed matrices.
inline ProblemConfig builtin_config(const std::string& name) {
  ProblemConfig c;
  c.plant_name = name;
  if (name == "si_linear") {
    c.kind = PlantKind::SingleLinear;
    c.A = Mat::from_rows({{1.1, 2.0}, {0.0, 0.95}});
    c.B = Mat::from_rows({{0.0}, {0.079}});
    c.x_lo = {-kInf, -kInf};
    c.x_hi = {kInf, kInf};
    c.u_lo = {-5.0};
    c.u_hi = {5.0};
    c.N = 8;
    c.Q = Mat::identity(2);
    c.R = Mat::from_rows({{0.1}});
    c.K = Mat::from_rows({{4.3, 24.7}});
    c.scan = GridSpec{{-3.0, -3.0}, {3.0, 3.0}, {61, 61}};
    c.steps = 40;
  } else if (name == "mi_linear") {
    c.kind = PlantKind::MultiLinear;
    c.A = Mat::from_rows({{1.1, 2.0, -0.4}, {0.0, 0.95, -0.8}, {0.0, 0.1, 1.0}});
    c.B = Mat::from_rows({{0.0, 0.0}, {0.079, 0.0}, {-0.1, 0.1}});
    c.x_lo = Vec(3, -kInf);
    c.x_hi = Vec(3, kInf);
    c.u_lo = {-5.0, -5.0};
    c.u_hi = {5.0, 5.0};
    c.N = 8;
    c.Q = Mat::identity(3);
    c.R = Mat::from_rows({{0.1, 0.0}, {0.0, 0.1}});
    c.scan = GridSpec{{-2.0, -2.0, -2.0}, {2.0, 2.0, 2.0}, {9, 9, 9}};
    c.steps = 40;
  } else if (name == "nonlinear") {
    c.kind = PlantKind::Nonlinear;
    c.A = Mat::from_rows({{-1.1, 2.0}, {0.0, 0.0}});   // Jacobians at the origin
    c.B = Mat::from_rows({{0.0}, {0.79}});
    const double x2_max = 3.14159265358979323846 / 2.0 - 1e-9;
    c.x_lo = {-kInf, -x2_max};
    c.x_hi = {kInf, x2_max};
    c.u_lo = {-2.0};
    c.u_hi = {2.0};
    c.N = 8;
    c.Q = Mat::identity(2);
    c.R = Mat::from_rows({{0.1}});
    c.scan = GridSpec{{-1.2, -1.5}, {1.2, 1.5}, {13, 13}};
    c.steps = 30;
  } else {
    throw ConfigError("unknown builtin plant \"" + name + "\"");
  }
  return c;
}

/// The §-style saturating sine plant used by the "nonlinear" builtin.
inline NonlinearModel builtin_nonlinear_model() {
  NonlinearModel m;
  m.n = 2;
  m.m = 1;
  m.step = [](const Vec& x, const Vec& u) {
    return Vec{-1.1 * x[0] + 2.0 * std::sin(x[1]), 0.2 * x[0] * x[1] + 0.79 * u[0]};
  };
  m.jacobians = [](const Vec& x, const Vec&) {
    Mat a = Mat::from_rows({{-1.1, 2.0 * std::cos(x[1])}, {0.2 * x[1], 0.2 * x[0]}});
    Mat b = Mat::from_rows({{0.0}, {0.79}});
    return std::make_pair(a, b);
  };
  return m;
}

/// Strict config parser: every unknown key fails loudly with its path.
inline ProblemConfig parse_config(const json& j) {
  detail::reject_unknown_keys(j, {"plant", "constraints", "horizon", "Q", "R", "K", "scan",
                                  "disturbance", "steps", "seed", "out_dir"}, "config");
  if (!j.contains("plant")) throw ConfigError("config.plant: missing");

  ProblemConfig c;
  const auto& plant = j.at("plant");
  if (plant.is_string()) {
    c = builtin_config(plant.get<std::string>());
  } else if (plant.is_object()) {
    detail::reject_unknown_keys(plant, {"A", "B"}, "config.plant");
    c.A = mat_from_json(plant.at("A"), "config.plant.A");
    c.B = mat_from_json(plant.at("B"), "config.plant.B");
    c.kind = c.B.cols() == 1 ? PlantKind::SingleLinear : PlantKind::MultiLinear;
    const int n = c.A.rows(), m = c.B.cols();
    c.x_lo = Vec(n, -kInf);
    c.x_hi = Vec(n, kInf);
    c.u_lo = Vec(m, -kInf);
    c.u_hi = Vec(m, kInf);
    c.Q = Mat::identity(n);
    c.R = 0.1 * Mat::identity(m);
    c.scan = GridSpec{Vec(n, -3.0), Vec(n, 3.0), std::vector<int>(n, n == 2 ? 61 : 9)};
  } else {
    throw ConfigError("config.plant: expected a builtin name or {A, B}");
  }

  if (j.contains("constraints")) {
    const auto& cs = j.at("constraints");
    detail::reject_unknown_keys(cs, {"x_lo", "x_hi", "u_lo", "u_hi"}, "config.constraints");
    if (cs.contains("x_lo")) c.x_lo = bounds_from_json(cs.at("x_lo"), "config.constraints.x_lo");
    if (cs.contains("x_hi")) c.x_hi = bounds_from_json(cs.at("x_hi"), "config.constraints.x_hi");
    if (cs.contains("u_lo")) c.u_lo = bounds_from_json(cs.at("u_lo"), "config.constraints.u_lo");
    if (cs.contains("u_hi")) c.u_hi = bounds_from_json(cs.at("u_hi"), "config.constraints.u_hi");
  }
  if (j.contains("horizon")) c.N = j.at("horizon").get<int>();
  if (j.contains("Q")) c.Q = mat_from_json(j.at("Q"), "config.Q");
  if (j.contains("R")) c.R = mat_from_json(j.at("R"), "config.R");
  if (j.contains("K")) c.K = mat_from_json(j.at("K"), "config.K");
  if (j.contains("scan")) {
    const auto& s = j.at("scan");
    detail::reject_unknown_keys(s, {"lo", "hi", "resolution"}, "config.scan");
    c.scan.lo = s.at("lo").get<Vec>();
    c.scan.hi = s.at("hi").get<Vec>();
    c.scan.resolution = s.at("resolution").get<std::vector<int>>();
    if (c.scan.lo.size() != c.scan.hi.size() || c.scan.lo.size() != c.scan.resolution.size())
      throw ConfigError("config.scan: lo/hi/resolution length mismatch");
  }
  if (j.contains("disturbance")) {
    const auto& d = j.at("disturbance");
    detail::reject_unknown_keys(d, {"bound", "runs"}, "config.disturbance");
    if (d.contains("bound")) c.disturbance_bound = d.at("bound").get<double>();
    if (d.contains("runs")) c.mc_runs = d.at("runs").get<int>();
  }
  if (j.contains("steps")) c.steps = j.at("steps").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();

  // dimensional consistency
  const int n = c.A.rows(), m = c.B.cols();
  if (static_cast<int>(c.x_lo.size()) != n || static_cast<int>(c.x_hi.size()) != n)
    throw ConfigError("config.constraints: state bound length != state dimension");
  if (static_cast<int>(c.u_lo.size()) != m || static_cast<int>(c.u_hi.size()) != m)
    throw ConfigError("config.constraints: input bound length != input dimension");
  if (c.Q.rows() != n || c.Q.cols() != n) throw ConfigError("config.Q: expected n x n");
  if (c.R.rows() != m || c.R.cols() != m) throw ConfigError("config.R: expected m x m");
  if (c.K && (c.K->rows() != m || c.K->cols() != n)) throw ConfigError("config.K: expected m x n");
  return c;
}

inline ProblemConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Design artifacts
// ---------------------------------------------------------------------------

inline json validation_to_json(const DesignValidation& v) {
  return json{{"lyapunov_residual", v.lyapunov_residual},
              {"nilpotency_residual", v.nilpotency_residual},
              {"invariance_samples", v.invariance_samples},
              {"invariance_failures", v.invariance_failures},
              {"max_input_violation", v.max_input_violation},
              {"max_state_violation", v.max_state_violation},
              {"max_decrease_violation", v.max_decrease_violation}};
}

inline json design_to_json(const ControllerDesign& d, const Mat& plant_a, const Mat& plant_b,
                           const char* type, const DesignValidation* validation) {
  json j{{"type", type},
         {"plant", json{{"A", mat_to_json(plant_a)}, {"B", mat_to_json(plant_b)}}},
         {"N", d.N},
         {"Q", mat_to_json(d.Q)},
         {"R", mat_to_json(d.R)},
         {"K", mat_to_json(d.K)},
         {"P", mat_to_json(d.P)},
         {"eps", d.eps}};
  if (!d.K_db.empty()) j["K_db"] = mat_to_json(d.K_db);
  if (validation) j["validation"] = validation_to_json(*validation);
  return j;
}

inline json design_to_json(const MultiDesign& md, const Mat& plant_a, const Mat& plant_b,
                           const std::vector<DesignValidation>* block_validation) {
  json blocks = json::array();
  for (int jx = 0; jx < md.dec.q; ++jx) {
    json b{{"Q", mat_to_json(md.Qj[jx])},
           {"R", mat_to_json(md.Rj[jx])},
           {"K", mat_to_json(md.Kj[jx])},
           {"P", mat_to_json(md.Pj[jx])},
           {"eps", md.epsj[jx]}};
    if (block_validation) b["validation"] = validation_to_json((*block_validation)[jx]);
    blocks.push_back(std::move(b));
  }
  return json{{"type", "multi"},
              {"plant", json{{"A", mat_to_json(plant_a)}, {"B", mat_to_json(plant_b)}}},
              {"N", md.N},
              {"decoupled",
               json{{"M", mat_to_json(md.dec.M)},
                    {"Minv", mat_to_json(md.dec.Minv)},
                    {"F", mat_to_json(md.dec.F)},
                    {"G", mat_to_json(md.dec.G)},
                    {"q", md.dec.q},
                    {"block_dims", md.dec.block_dims},
                    {"block_offsets", md.dec.block_offsets},
                    {"active_inputs", md.dec.active_inputs}}},
              {"blocks", std::move(blocks)}};
}

struct LoadedDesign {
  std::string type;  // "single" | "multi" | "nonlinear"
  Mat plant_a, plant_b;
  ControllerDesign single;  // single / nonlinear
  MultiDesign multi;        // multi
};

inline LoadedDesign design_from_json(const json& j) {
  LoadedDesign d;
  d.type = j.at("type").get<std::string>();
  d.plant_a = mat_from_json(j.at("plant").at("A"), "design.plant.A");
  d.plant_b = mat_from_json(j.at("plant").at("B"), "design.plant.B");
  if (d.type == "single" || d.type == "nonlinear") {
    d.single.N = j.at("N").get<int>();
    d.single.Q = mat_from_json(j.at("Q"), "design.Q");
    d.single.R = mat_from_json(j.at("R"), "design.R");
    d.single.K = mat_from_json(j.at("K"), "design.K");
    d.single.P = mat_from_json(j.at("P"), "design.P");
    d.single.eps = j.at("eps").get<double>();
    if (j.contains("K_db")) d.single.K_db = mat_from_json(j.at("K_db"), "design.K_db");
  } else if (d.type == "multi") {
    d.multi.N = j.at("N").get<int>();
    const auto& dec = j.at("decoupled");
    d.multi.dec.M = mat_from_json(dec.at("M"), "design.decoupled.M");
    d.multi.dec.Minv = mat_from_json(dec.at("Minv"), "design.decoupled.Minv");
    d.multi.dec.F = mat_from_json(dec.at("F"), "design.decoupled.F");
    d.multi.dec.G = mat_from_json(dec.at("G"), "design.decoupled.G");
    d.multi.dec.q = dec.at("q").get<int>();
    d.multi.dec.block_dims = dec.at("block_dims").get<std::vector<int>>();
    d.multi.dec.block_offsets = dec.at("block_offsets").get<std::vector<int>>();
    d.multi.dec.active_inputs = dec.at("active_inputs").get<std::vector<int>>();
    for (const auto& b : j.at("blocks")) {
      d.multi.Qj.push_back(mat_from_json(b.at("Q"), "design.blocks.Q"));
      d.multi.Rj.push_back(mat_from_json(b.at("R"), "design.blocks.R"));
      d.multi.Kj.push_back(mat_from_json(b.at("K"), "design.blocks.K"));
      d.multi.Pj.push_back(mat_from_json(b.at("P"), "design.blocks.P"));
      d.multi.epsj.push_back(b.at("eps").get<double>());
    }
  } else {
    throw ConfigError("design.type: unknown type \"" + d.type + "\"");
  }
  return d;
}

inline LoadedDesign load_design(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open design file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("design parse error in " + path + ": " + e.what());
  }
  return design_from_json(j);
}

inline bool mats_equal(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      if (a(i, j) != b(i, j)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

inline std::string trajectory_csv(const Trajectory& traj, int n, int m) {
  std::string out;
  out += "k";
  for (int i = 1; i <= n; ++i) out += ",x_" + std::to_string(i);
  for (int i = 1; i <= m; ++i) out += ",u_" + std::to_string(i);
  out += ",objective,status,iterations\n";
  const int steps = static_cast<int>(traj.inputs.size());
  for (int k = 0; k < static_cast<int>(traj.states.size()); ++k) {
    out += std::to_string(k);
    for (int i = 0; i < n; ++i) out += "," + format_double(traj.states[k][i]);
    if (k < steps) {
      for (int i = 0; i < m; ++i) out += "," + format_double(traj.inputs[k][i]);
      out += "," + format_double(traj.costs[k]);
      out += ",";
      out += to_string(traj.statuses[k]);
      out += "," + std::to_string(traj.iterations[k]);
    } else {
      for (int i = 0; i < m; ++i) out += ",";
      out += ",,,";
    }
    out += "\n";
  }
  out += "# T=";
  out += traj.settle_step ? std::to_string(*traj.settle_step) : std::string("none");
  out += "\n# max_violation=" + format_double(traj.max_violation) + "\n";
  if (traj.truncated_infeasible) out += "# truncated=infeasible\n";
  return out;
}

inline std::string feasibility_csv(const FeasibilityMap& map) {
  std::string out;
  out += "# proposed_feasible=" + std::to_string(map.proposed_total());
  out += " baseline_feasible=" + std::to_string(map.baseline_total());
  out += " baseline_only=" + std::to_string(map.count_baseline_only);
  out += " infeasible=" + std::to_string(map.count_infeasible) + "\n";
  const int dims = static_cast<int>(map.grid.resolution.size());
  for (int d = 1; d <= dims; ++d) out += (d == 1 ? "x_1" : ",x_" + std::to_string(d));
  out += ",label\n";
  for (int i = 0; i < map.grid.cell_count(); ++i) {
    const Vec x = map.grid.point(i);
    for (int d = 0; d < dims; ++d) out += (d == 0 ? "" : ",") + format_double(x[d]);
    out += ",";
    out += to_string(map.labels[i]);
    out += "\n";
  }
  return out;
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << content;
}

}  // namespace ftmpc
