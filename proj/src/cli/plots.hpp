#pragma once
// Deterministic SVG figures with a CSV sidecar holding the plotted data, and
// PPM image grids for samples.

#include <string>
#include <vector>

#include "sdiff/core/tensor.hpp"

namespace sdiff::plots {

struct Series {
    std::string name;
    std::vector<double> x, y;
};

struct Figure {
    std::string title, xlabel, ylabel;
    bool log_y = false;
    std::string metadata;  // provenance JSON, stored verbatim in <metadata>
};

/// Overlaid curves. Sidecar: x column then one column per series (blank where a series has no point).
void line_plot(const std::string& svg_path, const Figure& fig, const std::vector<Series>& series);

/// Grouped bars: one group per category (e.g. layer), one bar per series (e.g. checkpoint).
/// Sidecar: category column then one column per series.
void bar_plot(const std::string& svg_path, const Figure& fig, const std::vector<std::string>& categories,
              const std::vector<Series>& series);

/// Matrix heatmap on [lo, hi] with row/column labels. Sidecar: the matrix with a header row.
void heatmap(const std::string& svg_path, const Figure& fig, const std::vector<std::vector<double>>& m,
             const std::vector<std::string>& row_labels, const std::vector<std::string>& col_labels, double lo = 0,
             double hi = 1);

/// Sidecar path for a figure: same stem, ".csv".
std::string sidecar_path(const std::string& svg_path);

/// Images [N, 3, H, W] in [-1, 1] tiled into a binary PPM, `cols` per row.
void image_grid_ppm(const std::string& path, const Tensor<float>& images, int cols);

/// Shortest round-trippable decimal for table cells.
std::string fmt(double v);

}  // namespace sdiff::plots
