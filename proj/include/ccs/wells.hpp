#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "ccs/grid.hpp"

namespace ccs {

enum class WellType { injector, producer };

struct WellSpec {
  std::string name;
  WellType type = WellType::producer;
  int i = 0, j = 0;     // areal column
  int k0 = 1, k1 = 3;   // perforated layer range, inclusive
  double q_min = 0.0;   // surface m3/day
  double q_max = 150.0;
  double wellbore_radius = 0.1;  // m

  void validate(const GridGeometry& g) const {
    if (!(q_min < q_max)) throw std::invalid_argument("well " + name + ": q_min < q_max required");
    if (!g.inside(i, j, k0) || !g.inside(i, j, k1) || k0 > k1)
      throw std::invalid_argument("well " + name + ": cells outside grid");
  }
};

// The fixed 11-well pattern: 3 injectors along the mid row, 8 producers on the
// flanks. Positions are stored as fractions of the reference 32x24 layout so
// smaller test grids keep the same arrangement. Wells never perforate the top
// (monitored) layer.
std::vector<WellSpec> default_wells(const GridGeometry& grid, double injector_qmax = 300.0,
                                    double producer_qmax = 150.0);

}  // namespace ccs
