#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ccs {

constexpr double kMilliDarcyToM2 = 9.869233e-16;
constexpr double kSecondsPerDay = 86400.0;

// Two-phase closure: Corey relative permeabilities, constant viscosities,
// single lumped total compressibility driving the pressure equation.
struct FluidProps {
  double gas_viscosity = 5.0e-5;          // Pa*s
  double brine_viscosity = 5.0e-4;        // Pa*s
  double total_compressibility = 1.0e-8;  // 1/Pa
  double corey_gas = 2.0;
  double corey_brine = 2.0;
  double residual_gas = 0.05;
  double residual_brine = 0.2;

  void validate() const {
    if (gas_viscosity <= 0 || brine_viscosity <= 0)
      throw std::invalid_argument("fluid: viscosities must be > 0");
    if (total_compressibility <= 0)
      throw std::invalid_argument("fluid: compressibility must be > 0");
    if (corey_gas < 1 || corey_brine < 1)
      throw std::invalid_argument("fluid: Corey exponents must be >= 1");
    if (residual_gas < 0 || residual_gas >= 0.5 || residual_brine < 0 || residual_brine >= 0.5)
      throw std::invalid_argument("fluid: residual saturations must lie in [0, 0.5)");
  }

  static double corey(double se, double e) { return e == 2.0 ? se * se : std::pow(se, e); }

  double krg(double sg) const {
    const double denom = 1.0 - residual_gas - residual_brine;
    const double se = std::clamp((sg - residual_gas) / denom, 0.0, 1.0);
    return corey(se, corey_gas);
  }
  double krw(double sg) const {
    const double sw = 1.0 - sg;
    const double denom = 1.0 - residual_gas - residual_brine;
    const double se = std::clamp((sw - residual_brine) / denom, 0.0, 1.0);
    return corey(se, corey_brine);
  }
  double gas_mobility(double sg) const { return krg(sg) / gas_viscosity; }
  double brine_mobility(double sg) const { return krw(sg) / brine_viscosity; }
  double total_mobility(double sg) const { return gas_mobility(sg) + brine_mobility(sg); }
};

}  // namespace ccs
