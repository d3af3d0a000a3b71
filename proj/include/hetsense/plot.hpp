#pragma once

#include <string>
#include <vector>

namespace hetsense {

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct LinePlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  std::vector<PlotSeries> series;
};

/// Standalone SVG document with axes, one polyline per series and a legend.
std::string render_svg(const LinePlot& plot);

/// Plots the per-label seed means of final |Q|_F and recovery error against
/// the grid value of a summary CSV. Uses a log axis when the grid spans more
/// than a factor of 20.
void plot_summary_csv(const std::string& summary_csv, const std::string& svg_path, const std::string& x_label);

}  // namespace hetsense
