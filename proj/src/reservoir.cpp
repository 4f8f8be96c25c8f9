#include "ccs/reservoir.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>

namespace ccs {

std::vector<WellSpec> default_wells(const GridGeometry& grid, double injector_qmax,
                                    double producer_qmax) {
  struct Def {
    const char* name;
    WellType type;
    double fx, fy;  // fractions of the 32x24 reference layout
  };
  static const Def defs[] = {
      {"P1", WellType::producer, 2.0 / 32, 2.0 / 24},
      {"P2", WellType::producer, 2.0 / 32, 21.0 / 24},
      {"P3", WellType::producer, 15.0 / 32, 2.0 / 24},
      {"P4", WellType::producer, 15.0 / 32, 21.0 / 24},
      {"P5", WellType::producer, 29.0 / 32, 2.0 / 24},
      {"P6", WellType::producer, 29.0 / 32, 21.0 / 24},
      {"P7", WellType::producer, 2.0 / 32, 12.0 / 24},
      {"P8", WellType::producer, 29.0 / 32, 12.0 / 24},
      {"I1", WellType::injector, 5.0 / 32, 12.0 / 24},
      {"I2", WellType::injector, 16.0 / 32, 12.0 / 24},
      {"I3", WellType::injector, 27.0 / 32, 12.0 / 24},
  };
  std::vector<WellSpec> out;
  for (const auto& d : defs) {
    WellSpec w;
    w.name = d.name;
    w.type = d.type;
    w.i = std::min(static_cast<int>(d.fx * grid.nx), grid.nx - 1);
    w.j = std::min(static_cast<int>(d.fy * grid.ny), grid.ny - 1);
    w.k0 = grid.nz > 1 ? 1 : 0;  // top layer is monitored, not perforated
    w.k1 = grid.nz - 1;
    w.q_min = 0.0;
    w.q_max = d.type == WellType::injector ? injector_qmax : producer_qmax;
    w.validate(grid);
    out.push_back(std::move(w));
  }
  return out;
}

ScenarioPhysics apply_scenario_physics(const GridGeometry& grid, int scenario_id,
                                       const ScenarioLayoutConfig& cfg) {
  if (scenario_id < 0 || scenario_id > 3)
    throw std::invalid_argument("apply_scenario_physics: unknown scenario id " +
                                std::to_string(scenario_id));
  ScenarioPhysics ph;
  ph.scenario_id = scenario_id;
  ph.leakage_threshold = cfg.leakage_threshold;
  if (scenario_id == 2) {
    if (grid.nz < 2)
      throw std::invalid_argument("apply_scenario_physics: scenario 2 requires nz >= 2");
    const int pi = std::min(static_cast<int>(cfg.pathway_fx * grid.nx), grid.nx - 1);
    const int pj = std::min(static_cast<int>(cfg.pathway_fy * grid.ny), grid.ny - 1);
    ph.open_seal_columns.emplace_back(pi, pj);
    const int hw = std::max(1, static_cast<int>(cfg.region_halfwidth_frac * grid.nx));
    for (int j = pj - hw; j <= pj + hw; ++j)
      for (int i = pi - hw; i <= pi + hw; ++i)
        if (grid.inside(i, j, 0)) ph.leakage_region.push_back(grid.idx(i, j, 0));
  } else if (scenario_id == 3 && grid.nx > 1) {
    ph.mult_x.assign(num_xfaces(grid), 1.0);
    const int b1 = std::min(static_cast<int>(cfg.compartment_fx1 * grid.nx), grid.nx - 2);
    const int b2 = std::min(static_cast<int>(cfg.compartment_fx2 * grid.nx), grid.nx - 2);
    for (int k = 0; k < grid.nz; ++k)
      for (int j = 0; j < grid.ny; ++j) {
        ph.mult_x[xface_index(grid, b1, j, k)] = cfg.compartment_multiplier;
        ph.mult_x[xface_index(grid, b2, j, k)] = cfg.compartment_multiplier;
      }
  }
  return ph;
}

ReservoirSim::ReservoirSim(const GridGeometry& grid, const GeologyRealization& geo,
                           const FluidProps& fluid, std::vector<WellSpec> wells,
                           const ScenarioPhysics& physics, const SimOptions& opt)
    : grid_(grid), geo_(geo), fluid_(fluid), wells_(std::move(wells)), physics_(physics),
      opt_(opt) {
  grid_.validate();
  fluid_.validate();
  if (static_cast<int>(geo_.permeability.size()) != grid_.num_cells() ||
      static_cast<int>(geo_.porosity.size()) != grid_.num_cells())
    throw std::invalid_argument("reservoir: geology does not match grid");
  for (const auto& w : wells_) w.validate(grid_);
  pore_volume_.resize(grid_.num_cells());
  for (int c = 0; c < grid_.num_cells(); ++c)
    pore_volume_[c] = geo_.porosity[c] * grid_.cell_volume();
  build_faces();
  build_perforations();
  reset();
}

void ReservoirSim::build_faces() {
  const int nx = grid_.nx, ny = grid_.ny, nz = grid_.nz, n = grid_.num_cells();
  tx_ = Eigen::VectorXd::Zero(n);
  ty_ = Eigen::VectorXd::Zero(n);
  tz_ = Eigen::VectorXd::Zero(n);
  auto perm_m2 = [&](int c) { return geo_.permeability[c] * kMilliDarcyToM2; };
  auto harmonic = [](double a, double b) { return 2.0 * a * b / (a + b); };

  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i + 1 < nx; ++i) {
        const int c = grid_.idx(i, j, k);
        double t = harmonic(perm_m2(c), perm_m2(c + 1)) * (grid_.dy * grid_.dz) / grid_.dx;
        if (!physics_.mult_x.empty()) t *= physics_.mult_x[xface_index(grid_, i, j, k)];
        tx_[c] = t;
      }
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j + 1 < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        const int c = grid_.idx(i, j, k);
        double t = harmonic(perm_m2(c), perm_m2(c + nx)) * (grid_.dx * grid_.dz) / grid_.dy;
        if (!physics_.mult_y.empty()) t *= physics_.mult_y[yface_index(grid_, i, j, k)];
        ty_[c] = t;
      }
  for (int k = 0; k + 1 < nz; ++k)
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        // The caprock plane sits between the monitored top layer (k=0) and
        // the storage zone; it is impermeable unless a scenario opens it.
        if (k == 0) {
          const bool open = std::find(physics_.open_seal_columns.begin(),
                                      physics_.open_seal_columns.end(),
                                      std::make_pair(i, j)) != physics_.open_seal_columns.end();
          if (!open) continue;
        }
        const int c = grid_.idx(i, j, k);
        double t = harmonic(perm_m2(c), perm_m2(c + nx * ny)) * (grid_.dx * grid_.dy) / grid_.dz;
        if (!physics_.mult_z.empty()) t *= physics_.mult_z[zface_index(grid_, i, j, k)];
        tz_[c] = t;
      }
}

void ReservoirSim::build_perforations() {
  perfs_.assign(wells_.size(), {});
  const double r_o = 0.14 * std::sqrt(grid_.dx * grid_.dx + grid_.dy * grid_.dy);
  for (size_t w = 0; w < wells_.size(); ++w) {
    const auto& spec = wells_[w];
    const double lnrr = std::log(r_o / spec.wellbore_radius);
    if (lnrr <= 0) throw std::invalid_argument("well " + spec.name + ": wellbore radius too large");
    for (int k = spec.k0; k <= spec.k1; ++k) {
      const int c = grid_.idx(spec.i, spec.j, k);
      const double wi =
          2.0 * M_PI * geo_.permeability[c] * kMilliDarcyToM2 * grid_.dz / lnrr;  // m3
      perfs_[w].push_back({c, wi});
    }
  }
}

void ReservoirSim::reset() {
  const int n = grid_.num_cells();
  state_.pressure = Eigen::VectorXd::Constant(n, opt_.p_init);
  state_.gas_saturation = Eigen::VectorXd::Zero(n);
  state_.gas_volume = Eigen::VectorXd::Zero(n);
  state_.cum_injected_gas = 0.0;
  state_.cum_produced_gas = 0.0;
  state_.cum_produced_brine = 0.0;
  state_.sim_time_days = 0.0;
}

int ReservoirSim::solve_pressure(const Eigen::VectorXd& accum, const Eigen::VectorXd& rhs,
                                 Eigen::VectorXd& p) const {
  const int n = static_cast<int>(accum.size());
  const int sx = 1, sy = grid_.nx, sz = grid_.nx * grid_.ny;

  Eigen::VectorXd diagA = accum;
  for (int c = 0; c + sx < n; ++c) {
    diagA[c] += wx_[c];
    diagA[c + sx] += wx_[c];
  }
  for (int c = 0; c + sy < n; ++c) {
    diagA[c] += wy_[c];
    diagA[c + sy] += wy_[c];
  }
  for (int c = 0; c + sz < n; ++c) {
    diagA[c] += wz_[c];
    diagA[c + sz] += wz_[c];
  }

  auto apply_A = [&](const Eigen::VectorXd& x, Eigen::VectorXd& y) {
    y = accum.cwiseProduct(x);
    for (int c = 0; c + sx < n; ++c) {
      const double d = wx_[c] * (x[c] - x[c + sx]);
      y[c] += d;
      y[c + sx] -= d;
    }
    for (int c = 0; c + sy < n; ++c) {
      const double d = wy_[c] * (x[c] - x[c + sy]);
      y[c] += d;
      y[c + sy] -= d;
    }
    for (int c = 0; c + sz < n; ++c) {
      const double d = wz_[c] * (x[c] - x[c + sz]);
      y[c] += d;
      y[c + sz] -= d;
    }
  };

  // Incomplete Cholesky IC(0) in LDL^T form. The 7-point stencil has no
  // connections between a cell's lower neighbors, so the no-fill recurrence
  // is exact on the pattern, and the M-matrix property keeps d positive.
  ic_d_.resize(n);
  Eigen::VectorXd gx = Eigen::VectorXd::Zero(n), gy = Eigen::VectorXd::Zero(n),
                  gz = Eigen::VectorXd::Zero(n);
  for (int c = 0; c < n; ++c) {
    double d = diagA[c];
    if (c >= sx) d -= wx_[c - sx] * gx[c - sx];
    if (c >= sy) d -= wy_[c - sy] * gy[c - sy];
    if (c >= sz) d -= wz_[c - sz] * gz[c - sz];
    if (d <= 0) d = diagA[c];  // safeguard; unreachable for an M-matrix
    ic_d_[c] = d;
    gx[c] = wx_[c] / d;
    gy[c] = wy_[c] / d;
    gz[c] = wz_[c] / d;
  }
  ic_y_.resize(n);
  auto apply_M = [&](const Eigen::VectorXd& r, Eigen::VectorXd& z) {
    for (int c = 0; c < n; ++c) {
      double v = r[c];
      if (c >= sx) v += gx[c - sx] * ic_y_[c - sx];
      if (c >= sy) v += gy[c - sy] * ic_y_[c - sy];
      if (c >= sz) v += gz[c - sz] * ic_y_[c - sz];
      ic_y_[c] = v;
    }
    z.resize(n);
    for (int c = n - 1; c >= 0; --c) {
      double v = ic_y_[c] / ic_d_[c];
      if (c + sx < n) v += gx[c] * z[c + sx];
      if (c + sy < n) v += gy[c] * z[c + sy];
      if (c + sz < n) v += gz[c] * z[c + sz];
      z[c] = v;
    }
  };

  cg_r_.resize(n);
  cg_q_.resize(n);
  apply_A(p, cg_q_);
  cg_r_ = rhs - cg_q_;
  const double target = opt_.cg_rel_tol * rhs.norm();
  if (cg_r_.norm() <= target) return 0;
  apply_M(cg_r_, cg_z_);
  cg_d_ = cg_z_;
  double rz = cg_r_.dot(cg_z_);
  for (int it = 1; it <= opt_.cg_max_iter; ++it) {
    apply_A(cg_d_, cg_q_);
    const double dq = cg_d_.dot(cg_q_);
    if (dq <= 0) return -1;  // loss of positive-definiteness: bail out
    const double alpha = rz / dq;
    p += alpha * cg_d_;
    cg_r_ -= alpha * cg_q_;
    ++cg_iters_total_;
    if (cg_r_.norm() <= target) return it;
    apply_M(cg_r_, cg_z_);
    const double rz_new = cg_r_.dot(cg_z_);
    cg_d_ = cg_z_ + (rz_new / rz) * cg_d_;
    rz = rz_new;
  }
  return -1;
}

double ReservoirSim::peaceman_bhp(int well, double rate_m3day) const {
  const auto& spec = wells_[well];
  // Weighted connection pressure as a shift from a reference cell so a
  // uniform pressure field maps to itself exactly.
  const double p_ref = state_.pressure[perfs_[well][0].cell];
  double sum_wl = 0.0, shift = 0.0, wi_total = 0.0;
  for (const auto& pf : perfs_[well]) {
    const double lam = fluid_.total_mobility(state_.gas_saturation[pf.cell]);
    const double wl = pf.wi * lam;
    sum_wl += wl;
    shift += wl * (state_.pressure[pf.cell] - p_ref);
    wi_total += pf.wi;
  }
  const double floor_wl = wi_total * opt_.mobility_floor;
  if (sum_wl < floor_wl) {
    std::cerr << "[reservoir] mobility floor engaged for well " << spec.name << "\n";
    sum_wl = floor_wl;
  }
  const double p_conn = p_ref + shift / sum_wl;
  const double skin = rate_m3day / kSecondsPerDay / sum_wl;
  return spec.type == WellType::injector ? p_conn + skin : p_conn - skin;
}

double ReservoirSim::mass_balance_report() const {
  const double in_place = state_.gas_volume.sum();
  const double expected = state_.cum_injected_gas - state_.cum_produced_gas;
  return std::abs(in_place - expected) / std::max(state_.cum_injected_gas, 1e-12);
}

double ReservoirSim::leakage_indicator() const {
  double s = 0.0;
  for (int c : physics_.leakage_region) s = std::max(s, state_.gas_saturation[c]);
  return s;
}

bool ReservoirSim::simulate_interval(const Eigen::VectorXd& rates_m3day, double dt_days,
                                     int n_samples, WellSampleSeries* out) {
  ++calls_;
  const int nw = static_cast<int>(wells_.size());
  const int n = grid_.num_cells();
  const int sx = 1, sy = grid_.nx, sz = grid_.nx * grid_.ny;
  if (rates_m3day.size() != nw)
    throw std::invalid_argument("simulate_interval: rate vector size mismatch");
  for (int w = 0; w < nw; ++w)
    if (rates_m3day[w] < wells_[w].q_min - 1e-9 || rates_m3day[w] > wells_[w].q_max + 1e-9)
      throw std::invalid_argument("simulate_interval: rate outside bounds for " + wells_[w].name);
  const int S = opt_.substeps_per_interval;
  if (n_samples < 1 || S < n_samples)
    throw std::invalid_argument("simulate_interval: need 1 <= n_samples <= substeps");

  const ReservoirState backup = state_;
  const double dt_total = dt_days * kSecondsPerDay;
  const double dt_sub = dt_total / S;

  WellSampleSeries series;
  series.gas_rate = Eigen::MatrixXd::Zero(n_samples, nw);
  series.water_rate = Eigen::MatrixXd::Zero(n_samples, nw);
  series.bhp = Eigen::MatrixXd::Zero(n_samples, nw);

  Eigen::VectorXd lam_g(n), lam_w(n);
  auto recompute_mobilities = [&]() {
    for (int c = 0; c < n; ++c) {
      const double sg = state_.gas_saturation[c];
      lam_g[c] = fluid_.gas_mobility(sg);
      lam_w[c] = fluid_.brine_mobility(sg);
    }
  };

  Eigen::VectorXd accum = pore_volume_ * (fluid_.total_compressibility / dt_sub);
  Eigen::VectorXd rhs(n), p_new(n);
  wx_ = Eigen::VectorXd::Zero(n);
  wy_ = Eigen::VectorXd::Zero(n);
  wz_ = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd fx(n), fy(n), fz(n);                 // frozen face fluxes, m3/s
  Eigen::VectorXd applied_volume = Eigen::VectorXd::Zero(nw);  // m3 over the interval
  Eigen::VectorXd q_applied(nw);                               // m3/s this substep
  std::vector<std::vector<double>> alloc(nw);                  // per-perforation fractions
  Eigen::VectorXd substep_gas(nw), substep_water(nw);          // m3 within the substep

  int sample_cursor = 0;
  for (int m = 1; m <= S; ++m) {
    recompute_mobilities();

    // Deck-limited actual rates and per-perforation allocation (frozen for
    // the substep, consistent between the pressure solve and transport).
    for (int w = 0; w < nw; ++w) {
      const double p_ref = state_.pressure[perfs_[w][0].cell];
      double sum_wl = 0.0, shift = 0.0;
      alloc[w].resize(perfs_[w].size());
      for (size_t pi = 0; pi < perfs_[w].size(); ++pi) {
        const auto& pf = perfs_[w][pi];
        const double lam = std::max(lam_g[pf.cell] + lam_w[pf.cell], opt_.mobility_floor);
        const double wl = pf.wi * lam;
        alloc[w][pi] = wl;
        sum_wl += wl;
        shift += wl * (state_.pressure[pf.cell] - p_ref);
      }
      for (auto& a : alloc[w]) a /= sum_wl;
      const double p_conn = p_ref + shift / sum_wl;
      const double q_req = rates_m3day[w] / kSecondsPerDay;
      double q_cap;
      if (wells_[w].type == WellType::injector)
        q_cap = std::max(0.0, (opt_.injector_bhp_max - p_conn) * sum_wl);
      else
        q_cap = std::max(0.0, (p_conn - opt_.producer_bhp_min) * sum_wl);
      q_applied[w] = std::min(q_req, q_cap);
    }

    // Implicit pressure: (accum + L(T*lambda_t)) p' = accum p + q_wells,
    // with the face mobility upwinded by the current pressure field.
    rhs = accum.cwiseProduct(state_.pressure);
    for (int w = 0; w < nw; ++w) {
      const double sgn = wells_[w].type == WellType::injector ? 1.0 : -1.0;
      for (size_t pi = 0; pi < perfs_[w].size(); ++pi)
        rhs[perfs_[w][pi].cell] += sgn * q_applied[w] * alloc[w][pi];
    }
    const auto& p0 = state_.pressure;
    for (int c = 0; c + sx < n; ++c)
      wx_[c] = tx_[c] * (p0[c] >= p0[c + sx] ? lam_g[c] + lam_w[c]
                                             : lam_g[c + sx] + lam_w[c + sx]);
    for (int c = 0; c + sy < n; ++c)
      wy_[c] = ty_[c] * (p0[c] >= p0[c + sy] ? lam_g[c] + lam_w[c]
                                             : lam_g[c + sy] + lam_w[c + sy]);
    for (int c = 0; c + sz < n; ++c)
      wz_[c] = tz_[c] * (p0[c] >= p0[c + sz] ? lam_g[c] + lam_w[c]
                                             : lam_g[c + sz] + lam_w[c + sz]);
    p_new = state_.pressure;  // warm start
    if (solve_pressure(accum, rhs, p_new) < 0) {
      state_ = backup;
      return false;
    }
    if (!p_new.allFinite()) throw std::runtime_error("simulate_interval: NaN in pressure field");

    // Frozen total face fluxes for this substep (m3/s) and the CFL bound.
    double min_cfl_dt = dt_sub;
    {
      Eigen::VectorXd outflow = Eigen::VectorXd::Zero(n);
      for (int c = 0; c + sx < n; ++c) {
        fx[c] = wx_[c] * (p_new[c] - p_new[c + sx]);
        outflow[fx[c] > 0 ? c : c + sx] += std::abs(fx[c]);
      }
      for (int c = 0; c + sy < n; ++c) {
        fy[c] = wy_[c] * (p_new[c] - p_new[c + sy]);
        outflow[fy[c] > 0 ? c : c + sy] += std::abs(fy[c]);
      }
      for (int c = 0; c + sz < n; ++c) {
        fz[c] = wz_[c] * (p_new[c] - p_new[c + sz]);
        outflow[fz[c] > 0 ? c : c + sz] += std::abs(fz[c]);
      }
      for (int w = 0; w < nw; ++w)
        if (wells_[w].type == WellType::producer)
          for (size_t pi = 0; pi < perfs_[w].size(); ++pi)
            outflow[perfs_[w][pi].cell] += q_applied[w] * alloc[w][pi];
      for (int c = 0; c < n; ++c)
        if (outflow[c] > 0)
          min_cfl_dt = std::min(min_cfl_dt, opt_.cfl_number * pore_volume_[c] / outflow[c]);
    }
    const int n_inner =
        std::min(100000, std::max(1, static_cast<int>(std::ceil(dt_sub / min_cfl_dt))));
    const double dt_i = dt_sub / n_inner;

    // Explicit upwind transport of the gas ledger along the frozen total
    // velocity; phase split recomputed every inner step. Face updates use one
    // shared flux value per face so the global sum telescopes exactly.
    substep_gas.setZero();
    substep_water.setZero();
    for (int inner = 0; inner < n_inner; ++inner) {
      recompute_mobilities();
      auto move_band = [&](const Eigen::VectorXd& f, int stride) {
        for (int c = 0; c + stride < n; ++c) {
          const double ft = f[c];
          if (ft == 0.0) continue;
          const int up = ft > 0 ? c : c + stride;
          const double lt = lam_g[up] + lam_w[up];
          if (lt <= 0.0) continue;
          const double moved = ft * (lam_g[up] / lt) * dt_i;
          state_.gas_volume[c] -= moved;
          state_.gas_volume[c + stride] += moved;
        }
      };
      move_band(fx, sx);
      move_band(fy, sy);
      move_band(fz, sz);
      for (int w = 0; w < nw; ++w) {
        if (q_applied[w] == 0.0) continue;
        if (wells_[w].type == WellType::injector) {
          for (size_t pi = 0; pi < perfs_[w].size(); ++pi) {
            const double v = q_applied[w] * alloc[w][pi] * dt_i;
            state_.gas_volume[perfs_[w][pi].cell] += v;
            state_.cum_injected_gas += v;
            substep_gas[w] += v;
          }
        } else {
          for (size_t pi = 0; pi < perfs_[w].size(); ++pi) {
            const int c = perfs_[w][pi].cell;
            const double lt = lam_g[c] + lam_w[c];
            const double fg = lt > 0 ? lam_g[c] / lt : 0.0;
            const double v = q_applied[w] * alloc[w][pi] * dt_i;
            state_.gas_volume[c] -= v * fg;
            state_.cum_produced_gas += v * fg;
            state_.cum_produced_brine += v * (1.0 - fg);
            substep_gas[w] += v * fg;
            substep_water[w] += v * (1.0 - fg);
          }
        }
      }
      for (int c = 0; c < n; ++c)
        state_.gas_saturation[c] = std::clamp(state_.gas_volume[c] / pore_volume_[c], 0.0, 1.0);
    }
    state_.pressure = p_new;
    applied_volume += q_applied * dt_sub;

    // Interval totals by well type.
    for (int w = 0; w < nw; ++w) {
      if (wells_[w].type == WellType::injector)
        series.interval_injected_gas += substep_gas[w];
      else
        series.interval_produced_gas += substep_gas[w];
      series.interval_produced_brine += substep_water[w];
    }

    if (sample_cursor < n_samples &&
        m == static_cast<int>((static_cast<int64_t>(sample_cursor + 1) * S) / n_samples)) {
      for (int w = 0; w < nw; ++w) {
        series.gas_rate(sample_cursor, w) = substep_gas[w] / dt_sub * kSecondsPerDay;
        series.water_rate(sample_cursor, w) = substep_water[w] / dt_sub * kSecondsPerDay;
        series.bhp(sample_cursor, w) = peaceman_bhp(w, q_applied[w] * kSecondsPerDay);
      }
      ++sample_cursor;
    }
  }
  if (!state_.gas_volume.allFinite() || !state_.pressure.allFinite())
    throw std::runtime_error("simulate_interval: NaN in state");
  state_.sim_time_days += dt_days;

  RateAuditRecord rec;
  rec.requested = rates_m3day;
  rec.applied_mean = applied_volume / dt_total * kSecondsPerDay;
  audit_.push_back(std::move(rec));
  if (out) *out = std::move(series);
  return true;
}

}  // namespace ccs
