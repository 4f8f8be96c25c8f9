#pragma once

#include <stdexcept>
#include <vector>

#include "ccs/grid.hpp"

namespace ccs {

// Canonical face indexing shared by scenario construction and the simulator.
// x-face f connects (i,j,k)-(i+1,j,k); y-face connects (i,j,k)-(i,j+1,k);
// z-face connects (i,j,k)-(i,j,k+1).
inline int num_xfaces(const GridGeometry& g) { return (g.nx - 1) * g.ny * g.nz; }
inline int num_yfaces(const GridGeometry& g) { return g.nx * (g.ny - 1) * g.nz; }
inline int num_zfaces(const GridGeometry& g) { return g.nx * g.ny * (g.nz - 1); }
inline int xface_index(const GridGeometry& g, int i, int j, int k) {
  return i + (g.nx - 1) * (j + g.ny * k);
}
inline int yface_index(const GridGeometry& g, int i, int j, int k) {
  return i + g.nx * (j + (g.ny - 1) * k);
}
inline int zface_index(const GridGeometry& g, int i, int j, int k) {
  return i + g.nx * (j + g.ny * k);
}

// Field modifications per abnormal scenario. All multipliers lie in [0,1];
// the scenario-2 leakage pathway is expressed as openings in the base-model
// caprock plane (a bypass of the base seal factor), never as a multiplier > 1.
struct ScenarioPhysics {
  int scenario_id = 0;
  // Per-face multipliers keyed by face index as built by the simulator:
  // x-faces between (i,j,k)-(i+1,j,k), y-faces, z-faces. Empty vectors mean
  // "all ones".
  std::vector<double> mult_x, mult_y, mult_z;
  // Areal columns (i,j) where the caprock plane between k=0 and k=1 is open.
  std::vector<std::pair<int, int>> open_seal_columns;
  // Monitored cells (top layer) for the leakage indicator; empty unless id=2.
  std::vector<int> leakage_region;
  double leakage_threshold = 0.05;

  bool has_leakage() const { return scenario_id == 2; }
};

struct ScenarioLayoutConfig {
  // Fractions of the 32x24 reference layout (7/32, 12/24, 10/32, 21/32).
  double pathway_fx = 7.0 / 32.0;
  double pathway_fy = 12.0 / 24.0;
  double region_halfwidth_frac = 4.0 / 32.0;
  double compartment_fx1 = 10.0 / 32.0;
  double compartment_fx2 = 21.0 / 32.0;
  double compartment_multiplier = 0.01;
  double leakage_threshold = 0.05;
};

// Scenario 0/1: identity physics. Scenario 2: open the caprock at one column
// and define the monitored top-layer box around it. Scenario 3: restrict the
// x-faces on two compartment boundaries.
ScenarioPhysics apply_scenario_physics(const GridGeometry& grid, int scenario_id,
                                       const ScenarioLayoutConfig& cfg = {});

}  // namespace ccs
