#pragma once

#include <string>
#include <vector>

namespace eopd::plot {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

// Minimal standalone SVG documents. Output depends only on the inputs.
std::string line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<Series>& series);

// One group of bars per category; each series contributes one bar per
// category (series.y[i] is the height for categories[i]).
std::string bar_chart(const std::string& title, const std::vector<std::string>& categories,
                      const std::vector<Series>& series);

}  // namespace eopd::plot
