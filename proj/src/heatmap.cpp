#include "safecast/train/heatmap.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace safecast {

HeatmapGrid gmm_heatmap(const ForecastDistribution &dist, double step, double sigmas,
                        Index max_cells) {
  if (!(step > 0.0)) throw std::invalid_argument("heatmap grid step must be positive");
  double lo_x = std::numeric_limits<double>::infinity(), hi_x = -lo_x;
  double lo_y = lo_x, hi_y = hi_x;
  for (int m = 0; m < kModes; ++m) {
    if (dist.mode_probability(m) <= 0.0) continue;
    const Matrix &p = dist.modes[m];
    lo_x = std::min(lo_x, (p.col(0) - sigmas * p.col(2)).minCoeff());
    hi_x = std::max(hi_x, (p.col(0) + sigmas * p.col(2)).maxCoeff());
    lo_y = std::min(lo_y, (p.col(1) - sigmas * p.col(3)).minCoeff());
    hi_y = std::max(hi_y, (p.col(1) + sigmas * p.col(3)).maxCoeff());
  }
  if (!std::isfinite(lo_x) || !std::isfinite(hi_x) || !std::isfinite(lo_y) ||
      !std::isfinite(hi_y)) {
    throw std::invalid_argument("heatmap needs a finite forecast with some mode weight");
  }
  HeatmapGrid g;
  g.step = step;
  g.x0 = std::floor(lo_x / step) * step;
  g.y0 = std::floor(lo_y / step) * step;
  g.nx = static_cast<Index>(std::ceil((hi_x - g.x0) / step)) + 1;
  g.ny = static_cast<Index>(std::ceil((hi_y - g.y0) / step)) + 1;
  if (static_cast<double>(g.nx) * static_cast<double>(g.ny) > static_cast<double>(max_cells)) {
    throw std::invalid_argument("heatmap grid of " + std::to_string(g.nx) + " x " +
                                std::to_string(g.ny) + " cells is too large; raise the grid step");
  }

  const Index tf = dist.modes[0].rows();
  for (Index k = 0; k < tf; ++k) {
    Matrix d = Matrix::Zero(g.ny, g.nx);
    for (int m = 0; m < kModes; ++m) {
      const double w = dist.mode_probability(m);
      if (w <= 0.0) continue;
      const auto row = dist.modes[m].row(k);
      const double sx = row(2), sy = row(3), r = row(4);
      const double omr = 1.0 - r * r;
      const double norm = w / (2.0 * std::numbers::pi * sx * sy * std::sqrt(omr));
      for (Index i = 0; i < g.ny; ++i) {
        const double dy = (g.y0 + i * step - row(1)) / sy;
        for (Index j = 0; j < g.nx; ++j) {
          const double dx = (g.x0 + j * step - row(0)) / sx;
          d(i, j) += norm * std::exp(-(dx * dx + dy * dy - 2.0 * r * dx * dy) / (2.0 * omr));
        }
      }
    }
    g.density.push_back(std::move(d));
  }
  return g;
}

void write_heatmap_csv(const std::filesystem::path &path, const HeatmapGrid &grid) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(10);
  out << "step,x,y,density\n";
  for (std::size_t k = 0; k < grid.density.size(); ++k) {
    const Matrix &d = grid.density[k];
    for (Index i = 0; i < grid.ny; ++i) {
      for (Index j = 0; j < grid.nx; ++j) {
        out << k << ',' << grid.x0 + j * grid.step << ',' << grid.y0 + i * grid.step << ','
            << d(i, j) << '\n';
      }
    }
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace safecast
