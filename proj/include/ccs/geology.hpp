#pragma once

#include <cstdint>
#include <vector>

#include "ccs/grid.hpp"

namespace ccs {

struct GeologyConfig {
  double log_perm_mean = 5.0106352940962555;  // ln(150 mD)
  double log_perm_sigma = 0.8;
  int smoothing_radius_xy = 2;  // box-filter half-width, lateral
  int smoothing_radius_z = 1;   // box-filter half-width, vertical
  double porosity_mean = 0.2;
  double porosity_spread = 0.03;
  double porosity_min = 0.05;
  double porosity_max = 0.35;
};

struct GeologyRealization {
  int realization_id = 0;
  bool is_target = false;
  uint64_t seed = 0;
  std::vector<double> permeability;  // mD per cell
  std::vector<double> porosity;      // fraction per cell
};

// One correlated log-normal field from a seed; bitwise reproducible.
GeologyRealization generate_realization(const GridGeometry& grid, uint64_t seed, int id,
                                        bool is_target, const GeologyConfig& cfg = {});

// n_train training realizations (seeds derived from `seed`) plus one held-out
// target generated from `target_seed`. Throws if target_seed collides with a
// derived training seed.
std::vector<GeologyRealization> generate_ensemble(const GridGeometry& grid, uint64_t seed,
                                                  int n_train, uint64_t target_seed,
                                                  const GeologyConfig& cfg = {});

}  // namespace ccs
