#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ccs/reservoir.hpp"

namespace ccs {

// Normalized control vector in [-1,1]^11. Index layout matches the well
// order: 0..7 producers P1..P8, 8..10 injectors I1..I3 (index 10 = I3).
using ActionVector = Eigen::VectorXd;

// Nine intra-interval samples x 30 channels. Channel order (fixed):
//   0..2   injector gas rates / injector q_max            (I1..I3)
//   3..10  producer gas breakthrough rates / producer q_max (P1..P8)
//   11..18 producer water rates / producer q_max            (P1..P8)
//   19..29 bottom-hole pressures, (bhp - p0) / bhp_scale    (I1..I3, P1..P8)
struct WellObservation {
  Eigen::MatrixXd samples;  // 9 x 30
};

// Two field channels over the grid: row 0 normalized pressure
// (p - p0) / p_scale, row 1 gas saturation in [0,1]. Cells in grid order.
struct SpatialObservation {
  Eigen::MatrixXd channels;  // 2 x num_cells
};

// Rolling window of the last L well observations, oldest first; zeros at
// reset and for steps that have not happened yet.
struct HistoryBuffer {
  int length = 20;
  std::vector<Eigen::MatrixXd> blocks;  // length entries, each 9 x 30

  void reset(int rows, int cols);
  void update(const Eigen::MatrixXd& y);  // drop oldest, append y at the end
};

struct RewardBreakdown {
  double retained_value = 0.0;    // discounted c_co2 * (injected - produced gas)
  double brine_penalty = 0.0;     // discounted c_brine * produced brine
  double storage_bonus = 0.0;     // window bonus on the net storage rate
  double leakage_penalty = 0.0;   // scenario-2 threshold excess only
  double total = 0.0;             // retained - brine + bonus - leakage
};

struct EnvConfig {
  int horizon = 20;               // control updates per episode
  double interval_days = 730.0;   // simulated time per control update
  int n_samples = 9;              // intra-interval observation samples
  // reward coefficients
  double c_co2 = 1.0;
  double c_brine = 0.25;
  double storage_bonus = 0.2;
  double q_window_lo = 200.0;     // m3/day net storage window
  double q_window_hi = 850.0;
  double rho = 1.0;               // per-step discount inside the reward
  double c_leak = 5.0;
  double leak_threshold = 0.05;   // s*
  double failure_reward = 0.0;    // terminal step reward on solver failure
  // normalization constants
  double volume_ref = 657000.0;   // m3; one interval of full injection
  double p0 = 20.0e6;             // Pa
  double p_scale = 1.0e7;         // Pa
  double bhp_scale = 1.0e7;       // Pa
  int history_length = 20;
  int scenario_id = 0;

  void validate() const;
};

struct ObservationBundle {
  SpatialObservation spatial;
  WellObservation wells;
  HistoryBuffer history;
};

// Which observation streams each side consumes, per information regime.
enum class Regime { privileged, well_only, history, masked_critic, teacher_student };

Regime regime_from_string(const std::string& name);  // throws on unknown
std::string regime_name(Regime r);

struct ObservationView {
  bool actor_spatial = false, actor_wells = false, actor_history = false;
  bool critic_spatial = false, critic_wells = false, critic_history = false;
};

ObservationView observation_view(Regime regime);

// rate = q_min + (a+1)/2 * (q_max - q_min), componentwise; a clipped.
Eigen::VectorXd map_action(const ActionVector& a, const std::vector<WellSpec>& wells);
ActionVector inverse_map_action(const Eigen::VectorXd& rates,
                                const std::vector<WellSpec>& wells);

// Reward from one interval's volumes (already divided by volume_ref) and the
// end-of-interval leakage indicator. q_net is the interval-average net
// storage rate in m3/day.
RewardBreakdown compute_reward(double injected_n, double produced_gas_n,
                               double produced_brine_n, double leak_saturation,
                               const EnvConfig& cfg, int t);

// Line-delimited episode trace: one JSON record per step.
class EpisodeTraceWriter {
 public:
  explicit EpisodeTraceWriter(const std::string& path);
  void begin_episode(int episode_id, int scenario_id, uint64_t seed);
  void record_step(int t, const ActionVector& applied_action, const Eigen::VectorXd& rates,
                   const RewardBreakdown& reward, bool done, bool failed);
  void flush();

 private:
  std::ofstream out_;
  int episode_id_ = -1;
};

struct StepResult {
  ObservationBundle obs;
  double reward = 0.0;
  bool done = false;
  bool failed = false;  // solver failure ended the episode
  RewardBreakdown breakdown;
};

// POMDP wrapper around the reservoir proxy: maps normalized actions to deck
// rates (masking injector I3 under scenario 1), advances one control
// interval, assembles all observation streams, and scores the interval.
class Env {
 public:
  Env(const GridGeometry& grid, const GeologyRealization& geo, const FluidProps& fluid,
      std::vector<WellSpec> wells, const ScenarioPhysics& physics, const SimOptions& sim_opt,
      const EnvConfig& cfg);

  ObservationBundle reset();
  StepResult step(const ActionVector& a);  // throws if episode already done

  int t() const { return t_; }
  bool done() const { return done_; }
  const EnvConfig& config() const { return cfg_; }
  const ReservoirSim& sim() const { return sim_; }
  ReservoirSim& sim() { return sim_; }

  void attach_trace(EpisodeTraceWriter* writer) { trace_ = writer; }

 private:
  ObservationBundle assemble() const;

  ReservoirSim sim_;
  EnvConfig cfg_;
  HistoryBuffer history_;
  int t_ = 0;
  bool done_ = true;  // require reset() before stepping
  EpisodeTraceWriter* trace_ = nullptr;
};

}  // namespace ccs
