#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ccs/env.hpp"
#include "ccs/sac.hpp"

namespace ccs::variants {

using ad::Matrix;
using ad::ParamList;
using ad::Var;
using sac::Batch;
using sac::ReplayBuffer;
using sac::SACHyperparams;

// ---------------------------------------------------------------------------
// Regime wiring descriptions

// Which observation streams feed each side of the actor-critic pair, and how
// wide the shared embedding is. The deployable regimes never expose the
// spatial tensor to the actor.
struct RegimeConfig {
  Regime regime = Regime::well_only;
  int well_dim = 64;  // per-block embedding width (128 for teacher-student)
  int history_len = 0;
  nets::HistoryEncoder::Mode fusion = nets::HistoryEncoder::Mode::concat;
  bool actor_spatial = false;
  bool actor_history = false;
  bool critic_spatial = false;
  bool critic_history = false;
  bool masked_curriculum = false;  // critic spatial passes through the mask operator
  int actor_feature_dim = 0;
  int critic_feature_dim = 0;

  void validate() const;  // deployable regimes: actor input excludes spatial
};

RegimeConfig regime_config(Regime regime, int history_len = 20);

// ---------------------------------------------------------------------------
// Masking curriculum

// Masking ratio schedule: equal-length stages over the training run, one per
// ratio, with a replay-buffer reset at every stage boundary. Evaluation
// always runs at p_test.
struct CurriculumSchedule {
  std::vector<double> ratios{0.0, 0.25, 0.5, 0.75, 1.0};
  int total_epochs = 30;
  double p_test = 1.0;

  void validate() const;  // non-decreasing ratios in [0,1], positive epochs
  int stage(int epoch) const;
  double ratio_at(int epoch) const;
  bool boundary(int epoch) const;  // true iff this epoch enters a new stage
};

double curriculum_stage(int epoch, const CurriculumSchedule& sched = {});

// Zero exactly floor(p * nnz) of the nonzero entries of x, chosen uniformly
// without replacement; zero entries are never touched.
Matrix mask_spatial(const Matrix& x, double p, Rng& rng);

// ---------------------------------------------------------------------------
// Distillation pieces

// Linear ramp of the distillation weight: 0 up to ramp_start, rising to
// w_final at ramp_end, constant afterwards.
double distill_weight(double epoch, double ramp_start = 22.0, double ramp_end = 30.0,
                      double w_final = 0.1);

// InfoNCE over in-batch pairs: student features are projected and normalized
// through the trainable head, teacher latents through the frozen head with
// gradients stopped (they enter as values). Returns a 1x1 graph node.
Var infonce_loss(const Var& student_feature, const Matrix& teacher_latent,
                 const nets::DistillationHeads& heads, double tau);

// Mean squared error of the value-alignment head against a detached target.
Var value_alignment_loss(const Var& value_pred, const Eigen::VectorXd& target_detached);

// The five teacher-student losses and the combined actor objective, built
// from already-evaluated network outputs. The learner routes every update
// through this function so its arithmetic can be pinned against scalar
// oracles directly.
struct TSLossBundle {
  Var teacher_loss;  // both teacher twins regressed to the privileged target
  Var student_loss;  // student twins regressed to the same target
  Var actor_loss;    // alpha*logp - min student Q at the fresh action
  Var nce;
  Var value;
  Var total_actor;  // actor_loss + w_dist*(nce + beta*value)
};

TSLossBundle combine_ts_losses(const Var& q1_teach, const Var& q2_teach,
                               const Eigen::VectorXd& y_teach, const Var& q1_stud,
                               const Var& q2_stud, const Var& q1_stud_pi, const Var& q2_stud_pi,
                               const Var& logp, const Var& nce, const Var& value_align,
                               double alpha, double w_dist, double beta);

// ---------------------------------------------------------------------------
// Symmetric-regime controller (privileged, well-only, history, masked-critic)

class MfController {
 public:
  MfController(const RegimeConfig& cfg, const GridGeometry& grid, int action_dim,
               const SACHyperparams& hp, uint64_t seed);

  sac::UpdateReport update(ReplayBuffer& buffer) { return agent_->update(buffer); }
  Eigen::VectorXd act(const ObservationBundle& obs, bool deterministic);

  // Size-1 batch view of a bundle, carrying only the streams this regime's
  // wiring consumes (the runtime deployability probe: deployable regimes
  // never read obs.spatial).
  Batch obs_batch(const ObservationBundle& obs) const;

  void set_mask_ratio(double p);
  double mask_ratio() const { return *mask_p_; }

  sac::SacAgent& agent() { return *agent_; }
  const RegimeConfig& config() const { return cfg_; }
  ParamList& deployable_params() { return agent_->actor_params(); }

 private:
  RegimeConfig cfg_;
  std::shared_ptr<nets::WellEncoder> a_well_, c_well_, t_well_;
  std::shared_ptr<nets::SpatialEncoder> a_spatial_, c_spatial_, t_spatial_;
  std::shared_ptr<nets::HistoryEncoder> a_hist_, c_hist_, t_hist_;
  std::shared_ptr<double> mask_p_;
  std::shared_ptr<Rng> mask_rng_;
  std::unique_ptr<sac::SacAgent> agent_;
};

// ---------------------------------------------------------------------------
// Teacher-student learner

struct TSOptions {
  double tau = 0.1;   // contrastive temperature
  double beta = 1.0;  // value-alignment weight
  double ramp_start = 22.0;
  double ramp_end = 30.0;
  double w_final = 0.1;
  int embed_dim = 128;  // public feature width

  void validate() const;
};

struct TSUpdateReport {
  bool skipped = false;
  double teacher_critic_loss = 0.0;
  double student_critic_loss = 0.0;
  double actor_loss = 0.0;        // SAC term only
  double nce_loss = 0.0;          // computed every update
  double value_loss = 0.0;        // computed every update
  double w_dist = 0.0;            // weight applied this update
  double total_actor_loss = 0.0;  // actor + w_dist*(nce + beta*value)
  double alpha_loss = 0.0;
  double alpha = 0.0;
  double mean_entropy = 0.0;
};

// Asymmetric update: privileged teacher critics define the TD target, public
// student critics regress to it, the actor ascends the student critics, and
// an annealed distillation loss aligns the public feature with the teacher
// spatial latent. Deployment uses only the public encoder and policy head.
class TeacherStudentLearner {
 public:
  TeacherStudentLearner(const GridGeometry& grid, int action_dim, int history_len,
                        const SACHyperparams& hp, const TSOptions& opt, uint64_t seed);

  TSUpdateReport update(ReplayBuffer& buffer, double epoch);
  TSUpdateReport update_batch(Batch batch, double epoch);

  Eigen::VectorXd act(const ObservationBundle& obs, bool deterministic);
  Batch obs_batch(const ObservationBundle& obs) const;  // public streams only

  double alpha() const;
  const TSOptions& options() const { return opt_; }
  nets::HistoryEncoder& public_encoder() { return pub_enc_; }
  nets::PolicyHead& policy() { return head_; }
  ParamList& deployable_params() { return deployable_; }  // public encoder + head
  ParamList& teacher_spatial_params(int i);               // i in {0,1}
  ParamList& teacher_params() { return teacher_all_; }
  ParamList& teacher_target_params() { return teacher_targets_; }
  ParamList& student_params() { return student_all_; }
  ParamList& student_target_params() { return student_targets_; }
  ParamList& actor_params() { return actor_all_; }

 private:
  struct TeacherCritic {
    std::unique_ptr<nets::SpatialEncoder> spatial;
    std::unique_ptr<nets::HistoryEncoder> hist;
    std::unique_ptr<nets::QNet> q;
    ParamList params;
  };
  struct StudentCritic {
    std::unique_ptr<nets::HistoryEncoder> hist;
    std::unique_ptr<nets::QNet> q;
    ParamList params;
  };

  TSOptions opt_;
  SACHyperparams hp_;
  int history_len_;
  nets::HistoryEncoder pub_enc_;  // shared by actor and distillation pathway
  nets::PolicyHead head_;
  TeacherCritic t1_, t2_, tt1_, tt2_;
  StudentCritic s1_, s2_, st1_, st2_;
  nets::DistillationHeads dist_;
  Var log_alpha_;
  ParamList alpha_param_, teacher_all_, teacher_targets_, student_all_, student_targets_,
      actor_all_, deployable_;
  ad::Adam teacher_opt_, student_opt_, actor_opt_, alpha_opt_;
  Rng rng_;
  bool warned_empty_ = false;

  TeacherCritic make_teacher(const GridGeometry& grid, int action_dim, uint64_t seed,
                             const std::string& name);
  StudentCritic make_student(int action_dim, uint64_t seed, const std::string& name);
  Var teacher_value(const TeacherCritic& c, const Batch& b, bool next, const Var& action) const;
  Var student_value(const StudentCritic& c, const Batch& b, bool next, const Var& action) const;
  Var public_feature(const Batch& b, bool next) const;
  Matrix draw_eps(int batch, int dim);
};

// ---------------------------------------------------------------------------
// Evaluation and the per-variant training loop

struct EvalTrace {
  double mean_return = 0.0;
  std::vector<double> returns;  // per episode
  Matrix actions;               // last episode, T x action_dim
  Eigen::VectorXd rewards;      // last episode, T
};

// Deterministic rollout(s) on the given environment; the return of an
// episode is the plain sum of its step rewards.
EvalTrace evaluate_policy(Env& env,
                          const std::function<Eigen::VectorXd(const ObservationBundle&)>& actor,
                          int episodes = 1);

struct MfTrainConfig {
  int epochs = 30;
  int steps_per_epoch = 300;  // environment steps collected per epoch
  int eval_episodes = 1;
  int replay_capacity = 256;  // episodes
  SACHyperparams hp;
  CurriculumSchedule curriculum;  // masked-critic regime only
  TSOptions ts;                   // teacher-student regime only
  std::string checkpoint_dir;     // empty: no checkpoints written
  uint64_t seed = 1;

  void validate() const;
};

struct MfEpochRow {
  int epoch = 0;
  double p = -1.0;       // masking ratio (-1: not applicable)
  double w_dist = -1.0;  // distillation weight (-1: not applicable)
  double eval_return = 0.0;
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double alpha = 0.0;
  double entropy = 0.0;
  int env_steps = 0;
  int updates = 0;
  int episodes = 0;
};

// Full training run for one regime: per episode a training realization is
// drawn uniformly, transitions are replayed off-policy with fractional
// update accounting, and each epoch ends with a deterministic evaluation on
// the held-out target environment.
std::vector<MfEpochRow> train_model_free(
    Regime regime, const std::vector<Env*>& train_envs, Env& eval_env, const GridGeometry& grid,
    const MfTrainConfig& cfg, const std::function<void(const MfEpochRow&)>& on_epoch = {});

}  // namespace ccs::variants
