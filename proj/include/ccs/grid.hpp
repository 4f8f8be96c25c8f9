#pragma once

#include <stdexcept>

namespace ccs {

// Structured corner-free Cartesian grid. Cell (i,j,k) with i fastest; k=0 is
// the top (monitored) layer, sealed from below by the caprock plane.
struct GridGeometry {
  int nx = 32, ny = 24, nz = 4;
  double dx = 50.0, dy = 50.0, dz = 10.0;  // m

  int num_cells() const { return nx * ny * nz; }
  double cell_volume() const { return dx * dy * dz; }
  int idx(int i, int j, int k) const { return i + nx * (j + ny * k); }
  bool inside(int i, int j, int k) const {
    return i >= 0 && i < nx && j >= 0 && j < ny && k >= 0 && k < nz;
  }
  void validate() const {
    if (nx < 1 || ny < 1 || nz < 1) throw std::invalid_argument("grid: counts must be >= 1");
    if (dx <= 0 || dy <= 0 || dz <= 0) throw std::invalid_argument("grid: dimensions must be > 0");
  }
};

}  // namespace ccs
