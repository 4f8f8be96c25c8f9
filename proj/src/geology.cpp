#include "ccs/geology.hpp"

#include <cmath>
#include <stdexcept>

#include "ccs/rng.hpp"

namespace ccs {

namespace {

// Separable box filter over the periodic-free grid (edge-truncated averages).
std::vector<double> box_smooth(const GridGeometry& g, const std::vector<double>& in, int rx,
                               int ry, int rz) {
  auto pass = [&](const std::vector<double>& src, int radius, int axis) {
    if (radius <= 0) return src;
    std::vector<double> out(src.size());
    for (int k = 0; k < g.nz; ++k) {
      for (int j = 0; j < g.ny; ++j) {
        for (int i = 0; i < g.nx; ++i) {
          double acc = 0.0;
          int cnt = 0;
          for (int o = -radius; o <= radius; ++o) {
            int ii = i, jj = j, kk = k;
            if (axis == 0) ii += o;
            if (axis == 1) jj += o;
            if (axis == 2) kk += o;
            if (!g.inside(ii, jj, kk)) continue;
            acc += src[g.idx(ii, jj, kk)];
            ++cnt;
          }
          out[g.idx(i, j, k)] = acc / cnt;
        }
      }
    }
    return out;
  };
  auto tmp = pass(in, rx, 0);
  tmp = pass(tmp, ry, 1);
  tmp = pass(tmp, rz, 2);
  return tmp;
}

}  // namespace

GeologyRealization generate_realization(const GridGeometry& grid, uint64_t seed, int id,
                                        bool is_target, const GeologyConfig& cfg) {
  grid.validate();
  const int n = grid.num_cells();
  Rng rng(seed);
  std::vector<double> noise(n);
  for (auto& v : noise) v = rng.normal();
  auto field = box_smooth(grid, noise, cfg.smoothing_radius_xy, cfg.smoothing_radius_xy,
                          cfg.smoothing_radius_z);

  // Empirical standardization so every realization has the configured
  // log-mean and sigma exactly over its own cells.
  double mean = 0.0;
  for (double v : field) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : field) var += (v - mean) * (v - mean);
  var /= n;
  const double istd = 1.0 / std::sqrt(std::max(var, 1e-30));
  GeologyRealization r;
  r.realization_id = id;
  r.is_target = is_target;
  r.seed = seed;
  r.permeability.resize(n);
  r.porosity.resize(n);
  for (int c = 0; c < n; ++c) {
    const double z = (field[c] - mean) * istd;
    r.permeability[c] = std::exp(cfg.log_perm_mean + cfg.log_perm_sigma * z);
    r.porosity[c] = std::clamp(cfg.porosity_mean + cfg.porosity_spread * z, cfg.porosity_min,
                               cfg.porosity_max);
  }
  return r;
}

std::vector<GeologyRealization> generate_ensemble(const GridGeometry& grid, uint64_t seed,
                                                  int n_train, uint64_t target_seed,
                                                  const GeologyConfig& cfg) {
  if (n_train < 1) throw std::invalid_argument("generate_ensemble: n_train must be >= 1");
  std::vector<GeologyRealization> out;
  out.reserve(n_train + 1);
  for (int i = 0; i < n_train; ++i) {
    const uint64_t s = Rng::derive_seed(seed, "geology/train/" + std::to_string(i));
    if (s == target_seed)
      throw std::invalid_argument("generate_ensemble: target seed collides with a training seed");
    out.push_back(generate_realization(grid, s, i, false, cfg));
  }
  out.push_back(generate_realization(grid, target_seed, n_train, true, cfg));
  return out;
}

}  // namespace ccs
