#pragma once

#include "safecast/model/forecaster.hpp"

#include <filesystem>
#include <vector>

namespace safecast {

/// Mixture density of one forecast on a regular grid, one layer per
/// future step. Cell (i, j) is centered at (x0 + j * step, y0 + i * step).
struct HeatmapGrid {
  double x0 = 0.0;
  double y0 = 0.0;
  double step = 0.0;
  Index nx = 0;
  Index ny = 0;
  std::vector<Matrix> density;  // per future step, ny x nx, 1/m^2

  /// Midpoint-rule integral of one layer.
  double mass(std::size_t k) const { return density.at(k).sum() * step * step; }
};

/// Grid spanning `sigmas` deviations around every mode mean of nonzero
/// weight. Throws std::invalid_argument for a non-positive step or when
/// the grid would exceed max_cells per layer.
HeatmapGrid gmm_heatmap(const ForecastDistribution &dist, double step, double sigmas = 4.0,
                        Index max_cells = 1'000'000);

/// Columns: step,x,y,density. Positions are meters relative to the
/// forecast origin.
void write_heatmap_csv(const std::filesystem::path &path, const HeatmapGrid &grid);

}  // namespace safecast
