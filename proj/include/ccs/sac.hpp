#pragma once

#include <functional>
#include <vector>

#include "ccs/nets.hpp"
#include "ccs/rng.hpp"

namespace ccs::sac {

using ad::Matrix;
using ad::ParamList;
using ad::Var;

struct SACHyperparams {
  double gamma = 0.99;
  double polyak = 0.005;  // target <- (1-rate)*target + rate*online
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double alpha_lr = 3e-4;
  double init_alpha = 0.2;
  int batch_size = 256;
  double target_entropy = -11.0;  // -dim(action)
  double updates_per_env_step = 1.0;

  void validate() const;  // gamma in (0,1], polyak in (0,1), rates/batch positive
};

// One finished (or failure-truncated) episode. wells/spatial hold T+1 entries
// (index 0 is the reset observation); actions/rewards hold T rows. The final
// stored step is terminal: episodes only end by reaching the horizon or by a
// simulator failure, and both bootstrap as done.
struct EpisodeRecord {
  std::vector<Matrix> wells;    // each 9 x 30
  std::vector<Matrix> spatial;  // each cells x 2; empty vector if not stored
  Matrix actions;               // T x action_dim
  Eigen::VectorXd rewards;      // T

  int length() const { return static_cast<int>(rewards.size()); }
  void validate() const;
};

// Episode-ring replay with uniform sampling over stored transitions.
class ReplayBuffer {
 public:
  ReplayBuffer(int capacity_episodes, uint64_t seed);

  void push(EpisodeRecord ep);
  void reset();  // drops everything; subsequent samples see only new data

  int64_t size() const { return transitions_; }  // stored transitions
  int episodes() const { return static_cast<int>(episodes_.size()); }

  struct Ref {
    const EpisodeRecord* episode;
    int t;
  };
  // batch_size uniform draws (with replacement) over all stored transitions.
  std::vector<Ref> sample(int batch_size);

 private:
  int capacity_;
  Rng rng_;
  std::vector<EpisodeRecord> episodes_;  // ring
  size_t next_slot_ = 0;
  int64_t transitions_ = 0;
  std::vector<int64_t> prefix_;  // cumulative transition counts per slot
  void rebuild_prefix();
};

// Dense batch views assembled from sampled transitions. History windows are
// rebuilt on the fly from the stored per-step well observations (the reset
// observation is all zeros, so left-padding with zeros matches the
// environment's history semantics exactly).
struct Batch {
  int size = 0;
  Matrix wells, next_wells;      // (B*9) x 30
  Matrix spatial, next_spatial;  // (B*cells) x 2; empty when not requested
  Matrix history, next_history;  // (B*L*9) x 30; empty when history_len == 0
  Matrix actions;                // B x action_dim
  Eigen::VectorXd rewards, done;
};

Batch assemble_batch(const std::vector<ReplayBuffer::Ref>& refs, int history_len,
                     bool want_spatial);

// --- SAC math on explicit inputs (composable; used by every variant) ---

// y_i = r_i + (1-done_i) * gamma * (min(q1_next, q2_next) - alpha * logp_next)
Eigen::VectorXd critic_td_target(const Eigen::VectorXd& rewards, const Eigen::VectorXd& done,
                                 const Eigen::VectorXd& q1_next, const Eigen::VectorXd& q2_next,
                                 const Eigen::VectorXd& logp_next, double alpha, double gamma);

// mean squared TD error, summed over the two critics
Var critic_loss(const Var& q1, const Var& q2, const Eigen::VectorXd& target);

// mean over the batch of alpha*logp - min(q1_pi, q2_pi)
Var actor_loss(const Var& q1_pi, const Var& q2_pi, const Var& logp, double alpha);

// mean of -log_alpha * (logp + target_entropy); logp enters detached
Var alpha_loss(const Var& log_alpha, const Eigen::VectorXd& logp_detached,
               double target_entropy);

// --- full agent for the symmetric-regime variants ---

// Regime wiring: feature builders close over the regime's encoder objects;
// the parameter lists tell the agent which encoder weights each loss trains.
// Actor and critic encoders must be distinct objects: the actor step freezes
// every critic parameter, so a shared encoder would silently stop receiving
// actor gradients. Target features must be built from an independently-owned
// encoder copy of the same architecture, listed in target_encoder_params in
// the same order as critic_encoder_params (the agent copies the values at
// construction and polyak-tracks them after every update).
struct RegimeWiring {
  std::function<Var(const Batch&, bool next)> actor_features;
  std::function<Var(const Batch&, bool next)> critic_features;
  std::function<Var(const Batch&, bool next)> target_features;
  int actor_dim = 0;
  int critic_dim = 0;
  ParamList actor_encoder_params;
  ParamList critic_encoder_params;
  ParamList target_encoder_params;
  int history_len = 0;        // 0: no history stream assembled
  bool want_spatial = false;  // spatial stream assembled for critics
  // Optional data-level hook (e.g. spatial masking) applied after assembly.
  std::function<void(Batch&)> batch_transform;
};

struct UpdateReport {
  bool skipped = false;  // empty buffer
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double alpha_loss = 0.0;
  double alpha = 0.0;
  double mean_entropy = 0.0;  // -mean logp of the fresh actor sample
};

class SacAgent {
 public:
  SacAgent(RegimeWiring wiring, int action_dim, const SACHyperparams& hp, uint64_t seed);

  UpdateReport update(ReplayBuffer& buffer);  // sample + one gradient step
  UpdateReport update_batch(Batch batch);     // deterministic path for tests

  // Deployment-time action from a size-1 batch view of the current bundle.
  Eigen::VectorXd act(const Batch& obs, bool deterministic);

  double alpha() const;
  const SACHyperparams& hyperparams() const { return hp_; }
  const RegimeWiring& wiring() const { return wiring_; }
  nets::PolicyHead& policy() { return actor_head_; }
  ParamList& actor_params() { return actor_all_; }    // head + actor encoder
  ParamList& critic_params() { return critic_all_; }  // twins + critic encoder
  ParamList& target_params() { return target_all_; }

 private:
  RegimeWiring wiring_;
  SACHyperparams hp_;
  nets::PolicyHead actor_head_;
  nets::QNet q1_, q2_, qt1_, qt2_;
  Var log_alpha_;
  ParamList actor_all_, critic_all_, target_all_, alpha_param_;
  ad::Adam actor_opt_, critic_opt_, alpha_opt_;
  Rng rng_;
  bool warned_empty_ = false;

  Matrix draw_eps(int batch, int dim);
};

}  // namespace ccs::sac
