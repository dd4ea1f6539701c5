#pragma once

// Rate-distortion scatter as a static SVG (x = rate, y = distortion, each
// point labelled with its beta) plus the plain-text table it was drawn from.
// Both are pure functions of the points, so re-emission is byte-identical.

#include <algorithm>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cdhvae/analysis/sweep.hpp"

namespace cdhvae::analysis {

struct PlotFiles {
  std::filesystem::path plot;
  std::filesystem::path table;
};

inline std::string rd_plot_svg(std::span<const objective::RDPoint> points) {
  if (points.empty()) throw InputError("rd plot: no points");
  constexpr double W = 640, H = 480, left = 80, right = 30, top = 30, bottom = 60;
  double x0 = points[0].rate, x1 = x0, y0 = points[0].distortion, y1 = y0;
  for (const auto& p : points) {
    x0 = std::min(x0, p.rate);
    x1 = std::max(x1, p.rate);
    y0 = std::min(y0, p.distortion);
    y1 = std::max(y1, p.distortion);
  }
  // 10% margin; a degenerate range gets a unit span.
  auto widen = [](double& lo, double& hi) {
    const double span = hi > lo ? hi - lo : 1.0;
    lo -= 0.1 * span;
    hi += 0.1 * span;
  };
  widen(x0, x1);
  widen(y0, y1);
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (W - left - right); };
  auto py = [&](double y) { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); };
  auto f = [](double v) { return format_fixed(v, 2); };

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" font-family=\"sans-serif\" "
       "font-size=\"12\">\n";
  s += "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
  s += "<line x1=\"" + f(left) + "\" y1=\"" + f(H - bottom) + "\" x2=\"" + f(W - right) + "\" y2=\"" + f(H - bottom) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + f(left) + "\" y1=\"" + f(top) + "\" x2=\"" + f(left) + "\" y2=\"" + f(H - bottom) +
       "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    s += "<text x=\"" + f(px(xv)) + "\" y=\"" + f(H - bottom + 18) + "\" text-anchor=\"middle\">" +
         format_fixed(xv, 1) + "</text>\n";
    s += "<text x=\"" + f(left - 6) + "\" y=\"" + f(py(yv) + 4) + "\" text-anchor=\"end\">" + format_fixed(yv, 1) +
         "</text>\n";
  }
  s += "<text x=\"" + f((left + W - right) / 2) + "\" y=\"" + f(H - 15) +
       "\" text-anchor=\"middle\">rate: KL (nats per segment)</text>\n";
  s += "<text transform=\"translate(18," + f((top + H - bottom) / 2) +
       ") rotate(-90)\" text-anchor=\"middle\">distortion: reconstruction NLL (nats per segment)</text>\n";
  for (const auto& p : points) {
    s += "<circle class=\"point\" cx=\"" + f(px(p.rate)) + "\" cy=\"" + f(py(p.distortion)) +
         "\" r=\"5\" fill=\"steelblue\" data-beta=\"" + format_fixed(p.beta, 6) + "\" data-rate=\"" +
         format_fixed(p.rate, 6) + "\" data-distortion=\"" + format_fixed(p.distortion, 6) + "\"/>\n";
    s += "<text x=\"" + f(px(p.rate) + 8) + "\" y=\"" + f(py(p.distortion) - 8) + "\">&#946;=" + format_double(p.beta) +
         "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

/// Writes the SVG at `path` and the table next to it with a .tsv extension.
inline PlotFiles emit_rd_plot(std::span<const objective::RDPoint> points, const std::filesystem::path& path) {
  if (points.empty()) throw InputError("rd plot: sweep is empty");
  PlotFiles out{path, path};
  out.table.replace_extension(".tsv");
  if (out.table == out.plot) out.table += ".tsv";
  io::write_text(out.plot, rd_plot_svg(points));
  io::write_text(out.table, objective::rd_table(points));
  return out;
}

inline PlotFiles emit_rd_plot(const SweepResult& sweep, const std::filesystem::path& path) {
  const auto pts = sweep.points();
  return emit_rd_plot(std::span<const objective::RDPoint>(pts), path);
}

}  // namespace cdhvae::analysis
