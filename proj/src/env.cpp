#include "ccs/env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace ccs {

void HistoryBuffer::reset(int rows, int cols) {
  if (length < 1) throw std::invalid_argument("history length must be >= 1");
  blocks.assign(static_cast<size_t>(length), Eigen::MatrixXd::Zero(rows, cols));
}

void HistoryBuffer::update(const Eigen::MatrixXd& y) {
  if (blocks.empty()) throw std::logic_error("history buffer not reset");
  blocks.erase(blocks.begin());
  blocks.push_back(y);
}

void EnvConfig::validate() const {
  if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
  if (!(interval_days > 0.0)) throw std::invalid_argument("interval_days must be positive");
  if (n_samples != 9)  // fixed by the 9 x 30 well-observation format
    throw std::invalid_argument("n_samples must be 9");
  if (!(q_window_lo < q_window_hi))
    throw std::invalid_argument("storage window requires q_lo < q_hi");
  if (!(rho > 0.0) || rho > 1.0) throw std::invalid_argument("rho must lie in (0,1]");
  if (!(volume_ref > 0.0)) throw std::invalid_argument("volume_ref must be positive");
  if (!(p_scale > 0.0) || !(bhp_scale > 0.0))
    throw std::invalid_argument("pressure scales must be positive");
  if (history_length < 1) throw std::invalid_argument("history_length must be >= 1");
  if (c_co2 < 0.0 || c_brine < 0.0 || storage_bonus < 0.0 || c_leak < 0.0 || leak_threshold < 0.0)
    throw std::invalid_argument("reward coefficients must be non-negative");
}

Regime regime_from_string(const std::string& name) {
  if (name == "privileged") return Regime::privileged;
  if (name == "well_only") return Regime::well_only;
  if (name == "history") return Regime::history;
  if (name == "masked_critic") return Regime::masked_critic;
  if (name == "teacher_student") return Regime::teacher_student;
  throw std::invalid_argument("unknown regime: " + name);
}

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::privileged: return "privileged";
    case Regime::well_only: return "well_only";
    case Regime::history: return "history";
    case Regime::masked_critic: return "masked_critic";
    case Regime::teacher_student: return "teacher_student";
  }
  throw std::invalid_argument("unknown regime enum value");
}

ObservationView observation_view(Regime regime) {
  ObservationView v;
  switch (regime) {
    case Regime::privileged:
      v.actor_spatial = v.actor_wells = true;
      v.critic_spatial = v.critic_wells = true;
      return v;
    case Regime::well_only:
      v.actor_wells = true;
      v.critic_wells = true;
      return v;
    case Regime::history:
      v.actor_wells = v.actor_history = true;
      v.critic_wells = v.critic_history = true;
      return v;
    case Regime::masked_critic:
      v.actor_wells = true;
      v.critic_spatial = v.critic_wells = true;
      return v;
    case Regime::teacher_student:
      v.actor_wells = v.actor_history = true;
      v.critic_spatial = v.critic_wells = v.critic_history = true;
      return v;
  }
  throw std::invalid_argument("unknown regime enum value");
}

Eigen::VectorXd map_action(const ActionVector& a, const std::vector<WellSpec>& wells) {
  if (a.size() != static_cast<Eigen::Index>(wells.size()))
    throw std::invalid_argument("action size must match well count");
  Eigen::VectorXd rates(a.size());
  for (Eigen::Index w = 0; w < a.size(); ++w) {
    const double c = std::clamp(a[w], -1.0, 1.0);
    const auto& spec = wells[static_cast<size_t>(w)];
    rates[w] = spec.q_min + 0.5 * (c + 1.0) * (spec.q_max - spec.q_min);
  }
  return rates;
}

ActionVector inverse_map_action(const Eigen::VectorXd& rates, const std::vector<WellSpec>& wells) {
  if (rates.size() != static_cast<Eigen::Index>(wells.size()))
    throw std::invalid_argument("rate size must match well count");
  ActionVector a(rates.size());
  for (Eigen::Index w = 0; w < rates.size(); ++w) {
    const auto& spec = wells[static_cast<size_t>(w)];
    a[w] = 2.0 * (rates[w] - spec.q_min) / (spec.q_max - spec.q_min) - 1.0;
  }
  return a;
}

RewardBreakdown compute_reward(double injected_n, double produced_gas_n, double produced_brine_n,
                               double leak_saturation, const EnvConfig& cfg, int t) {
  RewardBreakdown r;
  const double disc = std::pow(cfg.rho, t);
  const double retained_n = injected_n - produced_gas_n;
  r.retained_value = disc * cfg.c_co2 * retained_n;
  r.brine_penalty = disc * cfg.c_brine * produced_brine_n;
  const double q_net = retained_n * cfg.volume_ref / cfg.interval_days;  // m3/day
  if (q_net >= cfg.q_window_lo && q_net <= cfg.q_window_hi) r.storage_bonus = cfg.storage_bonus;
  if (cfg.scenario_id == 2)
    r.leakage_penalty = cfg.c_leak * std::max(0.0, leak_saturation - cfg.leak_threshold);
  r.total = r.retained_value - r.brine_penalty + r.storage_bonus - r.leakage_penalty;
  return r;
}

EpisodeTraceWriter::EpisodeTraceWriter(const std::string& path)
    : out_(path, std::ios::out | std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot open trace file: " + path);
}

void EpisodeTraceWriter::begin_episode(int episode_id, int scenario_id, uint64_t seed) {
  episode_id_ = episode_id;
  nlohmann::json rec{{"v", 1},
                     {"kind", "episode"},
                     {"episode", episode_id},
                     {"scenario", scenario_id},
                     {"seed", seed}};
  out_ << rec.dump() << '\n';
}

void EpisodeTraceWriter::record_step(int t, const ActionVector& applied_action,
                                     const Eigen::VectorXd& rates, const RewardBreakdown& reward,
                                     bool done, bool failed) {
  nlohmann::json rec{{"v", 1},
                     {"kind", "step"},
                     {"episode", episode_id_},
                     {"t", t},
                     {"action", std::vector<double>(applied_action.begin(), applied_action.end())},
                     {"rates", std::vector<double>(rates.begin(), rates.end())},
                     {"retained_value", reward.retained_value},
                     {"brine_penalty", reward.brine_penalty},
                     {"storage_bonus", reward.storage_bonus},
                     {"leakage_penalty", reward.leakage_penalty},
                     {"reward", reward.total},
                     {"done", done},
                     {"failed", failed}};
  out_ << rec.dump() << '\n';
}

void EpisodeTraceWriter::flush() { out_.flush(); }

Env::Env(const GridGeometry& grid, const GeologyRealization& geo, const FluidProps& fluid,
         std::vector<WellSpec> wells, const ScenarioPhysics& physics, const SimOptions& sim_opt,
         const EnvConfig& cfg)
    : sim_(grid, geo, fluid, std::move(wells), physics, sim_opt), cfg_(cfg) {
  cfg_.scenario_id = physics.scenario_id;  // single source of truth
  if (physics.has_leakage()) cfg_.leak_threshold = physics.leakage_threshold;
  cfg_.validate();
  if (cfg_.n_samples > sim_opt.substeps_per_interval)
    throw std::invalid_argument("n_samples exceeds substeps_per_interval");
  history_.length = cfg_.history_length;
}

ObservationBundle Env::reset() {
  sim_.reset();
  t_ = 0;
  done_ = false;
  history_.reset(cfg_.n_samples, 30);
  return assemble();
}

StepResult Env::step(const ActionVector& a) {
  if (done_) throw std::logic_error("step() called on a finished episode; call reset()");
  ActionVector applied = a;
  if (applied.size() != static_cast<Eigen::Index>(sim_.wells().size()))
    throw std::invalid_argument("action size must match well count");
  for (Eigen::Index w = 0; w < applied.size(); ++w) applied[w] = std::clamp(applied[w], -1.0, 1.0);
  // Scenario 1: injector I3 is offline; its command is forced to the floor.
  if (cfg_.scenario_id == 1) applied[applied.size() - 1] = -1.0;
  const Eigen::VectorXd rates = map_action(applied, sim_.wells());

  StepResult res;
  WellSampleSeries series;
  const bool ok = sim_.simulate_interval(rates, cfg_.interval_days, cfg_.n_samples, &series);
  if (!ok) {
    done_ = true;
    res.done = true;
    res.failed = true;
    res.breakdown.retained_value = cfg_.failure_reward;  // keep the decomposition identity
    res.breakdown.total = cfg_.failure_reward;
    res.reward = cfg_.failure_reward;
    res.obs = assemble();
    if (trace_) trace_->record_step(t_, applied, rates, res.breakdown, res.done, res.failed);
    return res;
  }

  const double inv_ref = 1.0 / cfg_.volume_ref;
  res.breakdown =
      compute_reward(series.interval_injected_gas * inv_ref, series.interval_produced_gas * inv_ref,
                     series.interval_produced_brine * inv_ref, sim_.leakage_indicator(), cfg_, t_);
  res.reward = res.breakdown.total;

  Eigen::MatrixXd wells_obs = Eigen::MatrixXd::Zero(cfg_.n_samples, 30);
  const auto& wells = sim_.wells();
  for (int s = 0; s < cfg_.n_samples; ++s) {
    for (int inj = 0; inj < 3; ++inj) {
      const int w = 8 + inj;
      wells_obs(s, inj) = series.gas_rate(s, w) / wells[w].q_max;
      wells_obs(s, 19 + inj) = (series.bhp(s, w) - cfg_.p0) / cfg_.bhp_scale;
    }
    for (int p = 0; p < 8; ++p) {
      wells_obs(s, 3 + p) = series.gas_rate(s, p) / wells[p].q_max;
      wells_obs(s, 11 + p) = series.water_rate(s, p) / wells[p].q_max;
      wells_obs(s, 22 + p) = (series.bhp(s, p) - cfg_.p0) / cfg_.bhp_scale;
    }
  }
  history_.update(wells_obs);

  const int t_before = t_;
  ++t_;
  done_ = (t_ >= cfg_.horizon);
  res.done = done_;
  res.obs = assemble();
  res.obs.wells.samples = std::move(wells_obs);
  if (trace_) trace_->record_step(t_before, applied, rates, res.breakdown, res.done, res.failed);
  return res;
}

// Spatial channels and history from the current state; well samples zeroed
// (step() overwrites them when an interval has produced samples).
ObservationBundle Env::assemble() const {
  ObservationBundle b;
  const int n = sim_.grid().num_cells();
  b.spatial.channels.resize(2, n);
  b.spatial.channels.row(0) =
      ((sim_.state().pressure.array() - cfg_.p0) / cfg_.p_scale).matrix().transpose();
  b.spatial.channels.row(1) = sim_.state().gas_saturation.transpose();
  b.wells.samples = Eigen::MatrixXd::Zero(cfg_.n_samples, 30);
  b.history = history_;
  return b;
}

}  // namespace ccs
