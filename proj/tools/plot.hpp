#pragma once

#include <string>
#include <vector>

namespace tfn::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  int width = 640;
  int height = 400;
  bool log_y = false;
  // Fixed axis ranges; lo == hi means derive from the data.
  double x_lo = 0, x_hi = 0;
  double y_lo = 0, y_hi = 0;
};

// Self-contained SVG line chart with axes, ticks and a legend. Output depends
// only on the inputs.
std::string line_chart(const std::vector<Series>& series, const ChartOptions& options);

}  // namespace tfn::plot
