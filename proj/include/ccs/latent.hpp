#pragma once
// Latent-space actor-critic trained on imagined rollouts from a learned world
// model (Dyna-style): lambda-return value learning, backprop-through-model
// policy improvement, and an epoch loop that consumes an exact budget of real
// simulator steps and imagined model steps. Also hosts the frozen-encoder
// deployment path and the retention metric used to compare controllers.

#include <cstdint>
#include <functional>
#include <memory>
#include <tuple>
#include <vector>

#include <Eigen/Core>

#include <ccs/ad.hpp>
#include <ccs/env.hpp>
#include <ccs/nets.hpp>
#include <ccs/rng.hpp>
#include <ccs/wm.hpp>

namespace ccs::latent {

using ad::Matrix;
using ad::ParamList;
using ad::Var;

// ---------------------------------------------------------------------------
// Configuration

struct ImaginationConfig {
  int horizon = 10;       // imagined steps per rollout
  double lambda = 0.95;   // lambda-return mixing
  int start_batch = 100;  // imagined start states per rollout
  double gamma = 0.99;    // discount inside imagination

  void validate() const;  // throws std::invalid_argument
};

// Per-epoch interaction budget. The dyna loop treats these as exact targets:
// any deviation between a configured budget and the counted interactions is a
// hard failure, not a warning.
struct DynaBudget {
  int epochs = 20;
  int real_steps = 200;       // simulator control steps collected per epoch
  int imagined_steps = 4000;  // model steps consumed by policy updates per epoch
  int test_episodes = 1;      // deterministic evaluation episodes per epoch

  void validate() const;  // throws std::invalid_argument
};

// ---------------------------------------------------------------------------
// Latent-observation control surface
//
// The training loop interacts with the world only through this interface, so
// its call counter doubles as the guard proving that no real simulator call
// happens inside imagination or policy updates.

class LatentEnv {
 public:
  virtual ~LatentEnv() = default;

  virtual int latent_dim() const = 0;
  virtual int action_dim() const = 0;

  virtual Eigen::VectorXd reset() = 0;  // initial latent observation
  // Applies one control action; returns (next latent, reward, done) and
  // counts exactly one simulator call.
  virtual std::tuple<Eigen::VectorXd, double, bool> step(const Eigen::VectorXd& action) = 0;

  virtual std::int64_t sim_calls() const = 0;  // cumulative step() count
  virtual std::uint64_t encoder_hash() const = 0;
};

// A checkpointed observation->latent map with a content hash over its
// parameters. Runs refuse to mix latents produced by different encoders.
struct FrozenEncoder {
  std::function<Eigen::VectorXd(const ccs::ObservationBundle&)> encode;
  int latent_dim = 0;
  std::uint64_t hash = 0;
};

// Wraps the deployable-controller feature path (history encoder over the
// rolling buffer plus current well samples) as a frozen encoder. The encoder
// object must outlive the returned wrapper.
FrozenEncoder frozen_history_encoder(std::shared_ptr<const nets::HistoryEncoder> enc);

// Reservoir environment seen through a frozen encoder.
class EncodedEnv : public LatentEnv {
 public:
  EncodedEnv(ccs::Env& sim, FrozenEncoder encoder);

  int latent_dim() const override { return encoder_.latent_dim; }
  int action_dim() const override { return action_dim_; }
  Eigen::VectorXd reset() override;
  std::tuple<Eigen::VectorXd, double, bool> step(const Eigen::VectorXd& action) override;
  std::int64_t sim_calls() const override { return calls_; }
  std::uint64_t encoder_hash() const override { return encoder_.hash; }

  ccs::Env& sim_env() { return env_; }

 private:
  ccs::Env& env_;
  FrozenEncoder encoder_;
  int action_dim_ = 0;
  std::int64_t calls_ = 0;
};

// One-dimensional linear-Gaussian environment (z' = a z + b u + noise, reward
// peaked at a target state) used to sanity-check the imagination loop against
// a constant-action oracle computable by grid search. reset() reseeds the
// noise stream, so episodes are reproducible and returns are comparable
// across policies.
class SyntheticLatentEnv : public LatentEnv {
 public:
  struct Options {
    double a_coef = 0.8;
    double b_coef = 0.5;
    double noise = 0.02;
    double target = 1.0;
    double action_cost = 0.1;
    double reward_offset = 2.0;  // keeps per-step rewards positive near target
    double z0 = 0.0;
    int horizon = 20;
    std::uint64_t seed = 7;
  };

  SyntheticLatentEnv();  // default options
  explicit SyntheticLatentEnv(Options opt);

  int latent_dim() const override { return 1; }
  int action_dim() const override { return 1; }
  Eigen::VectorXd reset() override;
  std::tuple<Eigen::VectorXd, double, bool> step(const Eigen::VectorXd& action) override;
  std::int64_t sim_calls() const override { return calls_; }
  std::uint64_t encoder_hash() const override { return hash_; }

  const Options& options() const { return opt_; }
  // reward(z, u) evaluated on the state before the transition
  double reward(double z, double u) const;

 private:
  Options opt_;
  Rng rng_;
  double z_ = 0.0;
  int t_ = 0;
  bool done_ = true;
  std::int64_t calls_ = 0;
  std::uint64_t hash_ = 0;
};

// ---------------------------------------------------------------------------
// Lambda returns

// Standard TD(lambda) targets bootstrapped with the final value:
//   G_t = r_t + gamma * ((1 - lambda) * V_{t+1} + lambda * G_{t+1}),
// with G_H = V_H. `values` has one more entry than `rewards`. lambda = 0
// reduces to one-step targets, lambda = 1 to the discounted sum plus terminal
// bootstrap.
std::vector<Eigen::VectorXd> lambda_returns(const std::vector<Eigen::VectorXd>& rewards,
                                            const std::vector<Eigen::VectorXd>& values,
                                            double gamma, double lambda);

// Graph-level variant used by the actor objective; shapes are B x 1 per step.
std::vector<Var> lambda_returns_graph(const std::vector<Var>& rewards,
                                      const std::vector<Var>& values, double gamma,
                                      double lambda);

// ---------------------------------------------------------------------------
// Imagination

// Optional transform applied to every imagined action before it enters the
// model (e.g. pinning a failed injector to its lower bound).
using ActionTransform = std::function<Var(const Var&)>;
// Value-level counterpart applied to real actions before the simulator.
using ValueActionTransform = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

struct ImaginedTrajectory {
  int batch = 0;
  int horizon = 0;
  std::vector<Var> z;         // horizon + 1 states, each B x d (z[0] is constant)
  std::vector<Var> a;         // horizon applied actions, each B x adim
  std::vector<Var> log_prob;  // horizon entries, each B x 1
  std::vector<Var> r;         // horizon predicted rewards, each B x 1
};

// Rolls the policy through the world model for `horizon` steps starting from
// the rows of z0. Adds batch * horizon to *imagined_counter when provided.
// Never touches a real environment.
ImaginedTrajectory imagine_rollout(const Matrix& z0, const nets::PolicyHead& actor,
                                   wm::LatentModel& model, int horizon, Rng& rng,
                                   std::int64_t* imagined_counter = nullptr,
                                   const ActionTransform& action_filter = {});

// Uniformly samples `batch` start states (with replacement) from all latent
// rows stored in the dataset.
Matrix sample_start_states(const wm::LatentDataset& data, int batch, Rng& rng);

// ---------------------------------------------------------------------------
// Latent actor-critic

struct LatentControlOptions {
  ImaginationConfig imagination;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double entropy_coef = 1e-3;

  void validate() const;  // throws std::invalid_argument
};

struct LatentUpdateReport {
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double entropy = 0.0;      // mean policy entropy estimate (-mean log prob)
  double mean_return = 0.0;  // mean lambda-return at the rollout roots
};

// Tanh-Gaussian policy head and value head operating directly on the latent
// state. The actor ascends lambda-returns of imagined rollouts (gradients flow
// through the model; model and critic weights are frozen during that pass) and
// the critic regresses detached lambda-return targets.
class LatentController {
 public:
  LatentController(int latent_dim, int action_dim, LatentControlOptions opt, std::uint64_t seed);

  // One imagination update from start states z0 (B x d). Appends every applied
  // imagined action (one row per state-step) to *action_log when provided.
  LatentUpdateReport update(const Matrix& z0, wm::LatentModel& model,
                            const ActionTransform& action_filter = {},
                            std::vector<Eigen::VectorXd>* action_log = nullptr);

  Eigen::VectorXd act(const Eigen::VectorXd& z, bool deterministic = true);

  nets::PolicyHead& actor() { return actor_; }
  const nets::PolicyHead& actor() const { return actor_; }
  nets::VNet& critic() { return critic_; }
  const nets::VNet& critic() const { return critic_; }
  ParamList& actor_params() { return actor_params_; }
  ParamList& critic_params() { return critic_params_; }

  int latent_dim() const { return latent_dim_; }
  int action_dim() const { return action_dim_; }
  const LatentControlOptions& options() const { return opt_; }
  std::int64_t imagined_steps() const { return imagined_steps_; }
  Rng& rng() { return rng_; }

 private:
  int latent_dim_ = 0;
  int action_dim_ = 0;
  LatentControlOptions opt_;
  nets::PolicyHead actor_;
  nets::VNet critic_;
  ParamList actor_params_;
  ParamList critic_params_;
  ad::Adam actor_opt_;
  ad::Adam critic_opt_;
  Rng rng_;
  std::int64_t imagined_steps_ = 0;
};

// ---------------------------------------------------------------------------
// Real-environment interaction

struct CollectReport {
  int steps = 0;
  int episodes = 0;  // episodes appended (the last one may be truncated)
};

// Runs the stochastic policy for exactly n_steps simulator steps, appending
// the resulting latent episodes to `out`. Episodes cut short by the budget are
// stored truncated; the abandoned environment episode is discarded. Applied
// (post-filter) actions are what gets recorded. The dataset's encoder hash is
// adopted on first use and must match the environment afterwards.
CollectReport collect_latent_steps(LatentEnv& env, LatentController& ctrl, int n_steps,
                                   wm::LatentDataset& out,
                                   const ValueActionTransform& action_filter = {});

struct DeployResult {
  double total_return = 0.0;
  int steps = 0;
  std::vector<Eigen::VectorXd> actions;  // applied actions, one per step
  std::vector<double> rewards;
};

// One deterministic evaluation episode. Refuses to run if the environment's
// encoder hash differs from the hash the controller was trained against.
DeployResult deploy_eval(LatentEnv& env, LatentController& ctrl,
                         std::uint64_t expected_encoder_hash,
                         const ValueActionTransform& action_filter = {});

// ---------------------------------------------------------------------------
// Dyna epoch loop

struct DynaConfig {
  DynaBudget budget;
  int wm_updates_per_epoch = 20;  // gradient steps on the world model per epoch
  int wm_batch = 32;
  int wm_window = 10;  // sequence window for recurrent backbones
  double wm_lr = 1e-3;
  // 0 adopts the collection environment's hash at construction.
  std::uint64_t expected_encoder_hash = 0;
  std::uint64_t seed = 1;
  bool record_imagined_actions = false;  // keep an audit log of imagined actions
  ValueActionTransform action_filter;    // applied to every real action
  ActionTransform action_filter_graph;   // applied to every imagined action

  void validate() const;  // throws std::invalid_argument
};

struct DynaEpochRow {
  int epoch = 0;
  std::int64_t real_steps = 0;      // consumed this epoch (exact)
  std::int64_t imagined_steps = 0;  // consumed this epoch (exact)
  double eval_return = 0.0;         // mean over the epoch's test episodes
  double wm_loss = 0.0;             // mean world-model training loss this epoch
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double entropy = 0.0;
  std::int64_t cumulative_real = 0;
  std::int64_t cumulative_imagined = 0;
};

// Owns the latent replay buffer and the world-model optimizers; the caller
// owns the environments, ensemble, and controller. Each epoch: collect exactly
// budget.real_steps with the stochastic policy, update the world model on the
// mixed buffer, consume exactly budget.imagined_steps in policy updates
// (rollouts sample one ensemble member each), then run the deterministic
// evaluation episodes. Every budget mismatch and any simulator call observed
// during the imagination phase is a hard failure.
class DynaTrainer {
 public:
  DynaTrainer(LatentEnv& train_env, LatentEnv& eval_env, wm::WmEnsemble ensemble,
              LatentController& ctrl, DynaConfig cfg);

  // Evaluation-only row (no interaction budget consumed); used for the
  // epoch-0 entry that scores the warm-start controller before any update.
  DynaEpochRow eval_row(int epoch);
  DynaEpochRow run_epoch(int epoch);
  // eval_row(0) followed by run_epoch(1..budget.epochs); verifies the
  // cumulative counters match the configured budget exactly.
  std::vector<DynaEpochRow> run();

  // Mixes an offline dataset (same encoder hash) into the replay buffer.
  void seed_buffer(const wm::LatentDataset& offline);

  const wm::LatentDataset& buffer() const { return buffer_; }
  std::int64_t real_steps() const { return real_steps_; }
  std::int64_t imagined_steps() const { return imagined_steps_; }
  std::int64_t eval_episodes() const { return eval_episodes_; }
  std::uint64_t expected_encoder_hash() const { return expected_hash_; }
  const std::vector<Eigen::VectorXd>& imagined_action_log() const { return imagined_actions_; }
  wm::WmEnsemble& ensemble() { return ensemble_; }

 private:
  LatentEnv& train_env_;
  LatentEnv& eval_env_;
  wm::WmEnsemble ensemble_;
  LatentController& ctrl_;
  DynaConfig cfg_;
  wm::LatentDataset buffer_;
  // One optimizer per distinct parameter list in the ensemble (corrected
  // models share their adapter, which is then trained once per round).
  std::vector<std::pair<wm::LatentModel*, ad::Adam>> wm_opts_;
  Rng rng_;
  std::uint64_t expected_hash_ = 0;
  std::int64_t real_steps_ = 0;
  std::int64_t imagined_steps_ = 0;
  std::int64_t eval_episodes_ = 0;
  std::vector<Eigen::VectorXd> imagined_actions_;

  double run_eval_phase();
};

// ---------------------------------------------------------------------------
// Retention

// Percentage of a reference return retained by a final return, rounded to one
// decimal: 100 * final / reference. Throws std::invalid_argument when the
// reference is zero.
double retention_metric(double final_return, double reference_return);

}  // namespace ccs::latent
