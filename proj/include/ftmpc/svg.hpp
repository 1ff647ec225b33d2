#pragma once

#include <sstream>

#include "ftmpc/io.hpp"

namespace ftmpc {

// ---------------------------------------------------------------------------
// Static SVG plots: state/input series with constraint bands, and the
// feasibility map with overlaid region boundaries (solid proposed, dashed
// baseline).
// ---------------------------------------------------------------------------

namespace detail {

struct Axis {
  double lo = 0.0, hi = 1.0;
  double px0 = 0.0, px1 = 1.0;

  double map(double v) const {
    const double t = (v - lo) / (hi - lo + (hi == lo ? 1.0 : 0.0));
    return px0 + t * (px1 - px0);
  }
};

inline const char* series_color(int i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                 "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  return colors[i % 8];
}

inline void polyline(std::ostringstream& svg, const std::vector<std::pair<double, double>>& pts,
                     const char* color, double width, bool dashed = false) {
  svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << width << "\"";
  if (dashed) svg << " stroke-dasharray=\"6,4\"";
  svg << " points=\"";
  for (const auto& [x, y] : pts) svg << x << "," << y << " ";
  svg << "\"/>\n";
}

inline void panel(std::ostringstream& svg, const std::vector<std::vector<double>>& series,
                  const std::vector<std::pair<double, const char*>>& hlines,
                  double y_top, double height, const std::string& title) {
  const double left = 60.0, right = 740.0;
  double lo = 0.0, hi = 0.0;
  for (const auto& s : series)
    for (double v : s) { lo = std::min(lo, v); hi = std::max(hi, v); }
  for (const auto& [v, _] : hlines) {
    if (std::isfinite(v)) { lo = std::min(lo, v); hi = std::max(hi, v); }
  }
  const double pad = 0.08 * std::max(hi - lo, 1e-12);
  lo -= pad; hi += pad;
  const std::size_t len = series.empty() ? 2 : series.front().size();
  Axis ax{0.0, static_cast<double>(len - 1), left, right};
  Axis ay{lo, hi, y_top + height, y_top};  // flipped

  svg << "<rect x=\"" << left << "\" y=\"" << y_top << "\" width=\"" << (right - left)
      << "\" height=\"" << height << "\" fill=\"white\" stroke=\"#333\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"" << (y_top - 6) << "\" font-size=\"13\">" << title
      << "</text>\n";
  if (lo < 0.0 && hi > 0.0)
    polyline(svg, {{left, ay.map(0.0)}, {right, ay.map(0.0)}}, "#bbbbbb", 0.8);
  for (const auto& [v, color] : hlines) {
    if (!std::isfinite(v)) continue;
    polyline(svg, {{left, ay.map(v)}, {right, ay.map(v)}}, color, 1.0, true);
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t k = 0; k < series[s].size(); ++k)
      pts.emplace_back(ax.map(static_cast<double>(k)), ay.map(series[s][k]));
    polyline(svg, pts, series_color(static_cast<int>(s)), 1.6);
  }
  // y-axis extremes
  svg << "<text x=\"4\" y=\"" << (y_top + 12) << "\" font-size=\"11\">" << format_double(hi)
      << "</text>\n";
  svg << "<text x=\"4\" y=\"" << (y_top + height) << "\" font-size=\"11\">" << format_double(lo)
      << "</text>\n";
}

}  // namespace detail

/// Line plots of states and inputs over time with dashed constraint bands.
inline std::string svg_trajectory(const Trajectory& traj, int n, int m,
                                  const BoxConstraintSet* box) {
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"780\" height=\"520\" "
         "font-family=\"sans-serif\">\n";
  std::vector<std::vector<double>> xs(n), us(m);
  for (const Vec& x : traj.states)
    for (int i = 0; i < n; ++i) xs[i].push_back(x[i]);
  for (const Vec& u : traj.inputs)
    for (int i = 0; i < m; ++i) us[i].push_back(u[i]);
  std::vector<std::pair<double, const char*>> xlines, ulines;
  if (box) {
    for (int i = 0; i < n; ++i) {
      xlines.emplace_back(box->x_lo()[i], "#888888");
      xlines.emplace_back(box->x_hi()[i], "#888888");
    }
    for (int i = 0; i < m; ++i) {
      ulines.emplace_back(box->u_lo()[i], "#888888");
      ulines.emplace_back(box->u_hi()[i], "#888888");
    }
  }
  detail::panel(svg, xs, xlines, 30.0, 200.0, "states x(k)");
  detail::panel(svg, us, ulines, 280.0, 200.0, "inputs u(k)");
  svg << "<text x=\"60\" y=\"505\" font-size=\"12\">settle "
      << (traj.settle_step ? "T=" + std::to_string(*traj.settle_step) : std::string("none"))
      << "</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

/// Region boundaries of the two feasible sets on a 2-D grid: an edge is drawn
/// wherever membership changes between adjacent cells (or at the window
/// border). Proposed is solid, baseline dashed.
inline std::string svg_feasibility(const FeasibilityMap& map) {
  if (map.grid.resolution.size() != 2)
    throw DimensionError("svg_feasibility: 2-D grids only");
  const int r0 = map.grid.resolution[0];
  const int r1 = map.grid.resolution[1];
  const double W = 640.0, H = 640.0, left = 70.0, top = 30.0;
  detail::Axis ax{map.grid.lo[0], map.grid.hi[0], left, left + W};
  detail::Axis ay{map.grid.lo[1], map.grid.hi[1], top + H, top};

  auto member = [&](int i, int j, bool proposed) {
    if (i < 0 || j < 0 || i >= r0 || j >= r1) return false;
    const CellLabel l = map.labels[i * r1 + j];
    if (proposed)
      return l == CellLabel::FeasibleBoth || l == CellLabel::FeasibleProposedOnly;
    return l == CellLabel::FeasibleBoth || l == CellLabel::FeasibleBaselineOnly;
  };
  const double hx = r0 > 1 ? 0.5 * (map.grid.hi[0] - map.grid.lo[0]) / (r0 - 1) : 0.5;
  const double hy = r1 > 1 ? 0.5 * (map.grid.hi[1] - map.grid.lo[1]) / (r1 - 1) : 0.5;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"780\" height=\"720\" "
         "font-family=\"sans-serif\">\n";
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << W << "\" height=\"" << H
      << "\" fill=\"white\" stroke=\"#333\"/>\n";

  auto emit_edges = [&](bool proposed, const char* color, bool dashed) {
    for (int i = 0; i < r0; ++i) {
      for (int j = 0; j < r1; ++j) {
        if (!member(i, j, proposed)) continue;
        const Vec c = map.grid.point(i * r1 + j);
        const double x0 = ax.map(c[0] - hx), x1 = ax.map(c[0] + hx);
        const double y0 = ay.map(c[1] - hy), y1 = ay.map(c[1] + hy);
        if (!member(i - 1, j, proposed)) detail::polyline(svg, {{x0, y0}, {x0, y1}}, color, 1.4, dashed);
        if (!member(i + 1, j, proposed)) detail::polyline(svg, {{x1, y0}, {x1, y1}}, color, 1.4, dashed);
        if (!member(i, j - 1, proposed)) detail::polyline(svg, {{x0, y0}, {x1, y0}}, color, 1.4, dashed);
        if (!member(i, j + 1, proposed)) detail::polyline(svg, {{x0, y1}, {x1, y1}}, color, 1.4, dashed);
      }
    }
  };
  emit_edges(true, "#1f77b4", false);
  emit_edges(false, "#d62728", true);

  svg << "<text x=\"" << left << "\" y=\"" << (top + H + 30)
      << "\" font-size=\"12\" fill=\"#1f77b4\">proposed (solid): " << map.proposed_total()
      << " cells</text>\n";
  svg << "<text x=\"" << left << "\" y=\"" << (top + H + 48)
      << "\" font-size=\"12\" fill=\"#d62728\">baseline (dashed): " << map.baseline_total()
      << " cells</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace ftmpc
