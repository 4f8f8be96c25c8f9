#include <ccs/latent.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace ccs::latent {

namespace {

Matrix randn(int rows, int cols, Rng& rng) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ImaginationConfig::validate() const {
  if (horizon < 1) throw std::invalid_argument("imagination horizon must be >= 1");
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument("lambda must lie in [0, 1]");
  if (start_batch < 1) throw std::invalid_argument("start batch must be >= 1");
  if (!(gamma > 0.0 && gamma <= 1.0))
    throw std::invalid_argument("gamma must lie in (0, 1]");
}

void DynaBudget::validate() const {
  if (epochs < 1) throw std::invalid_argument("budget needs at least one epoch");
  if (real_steps < 0) throw std::invalid_argument("real-step budget must be >= 0");
  if (imagined_steps < 0) throw std::invalid_argument("imagined-step budget must be >= 0");
  if (test_episodes < 0) throw std::invalid_argument("test-episode budget must be >= 0");
}

void LatentControlOptions::validate() const {
  imagination.validate();
  if (actor_lr <= 0.0 || critic_lr <= 0.0)
    throw std::invalid_argument("learning rates must be positive");
  if (entropy_coef < 0.0) throw std::invalid_argument("entropy coefficient must be >= 0");
}

void DynaConfig::validate() const {
  budget.validate();
  if (wm_updates_per_epoch < 0)
    throw std::invalid_argument("world-model updates per epoch must be >= 0");
  if (wm_batch < 1) throw std::invalid_argument("world-model batch must be >= 1");
  if (wm_window < 1) throw std::invalid_argument("world-model window must be >= 1");
  if (wm_lr <= 0.0) throw std::invalid_argument("world-model learning rate must be positive");
}

// ---------------------------------------------------------------------------
// Frozen encoders and environments

FrozenEncoder frozen_history_encoder(std::shared_ptr<const nets::HistoryEncoder> enc) {
  if (!enc) throw std::invalid_argument("frozen_history_encoder: null encoder");
  FrozenEncoder out;
  out.latent_dim = enc->feature_dim();
  out.hash = ad::params_hash(enc->params());
  out.encode = [enc](const ccs::ObservationBundle& obs) {
    const int len = enc->history_len();
    if (static_cast<int>(obs.history.blocks.size()) != len)
      throw std::invalid_argument("observation history length does not match the encoder");
    const auto rows = obs.wells.samples.rows();
    const auto cols = obs.wells.samples.cols();
    Matrix hist(len * rows, cols);
    for (int l = 0; l < len; ++l) hist.middleRows(l * rows, rows) = obs.history.blocks[l];
    const Var feature = enc->feature(ad::constant(hist), ad::constant(obs.wells.samples));
    return Eigen::VectorXd(feature.value().row(0).transpose());
  };
  return out;
}

EncodedEnv::EncodedEnv(ccs::Env& sim, FrozenEncoder encoder)
    : env_(sim), encoder_(std::move(encoder)) {
  if (!encoder_.encode) throw std::invalid_argument("EncodedEnv: encoder has no encode function");
  if (encoder_.latent_dim < 1) throw std::invalid_argument("EncodedEnv: bad latent dimension");
  action_dim_ = static_cast<int>(env_.sim().wells().size());
}

Eigen::VectorXd EncodedEnv::reset() { return encoder_.encode(env_.reset()); }

std::tuple<Eigen::VectorXd, double, bool> EncodedEnv::step(const Eigen::VectorXd& action) {
  if (action.size() != action_dim_)
    throw std::invalid_argument("EncodedEnv: action has wrong dimension");
  const ccs::StepResult sr = env_.step(action);
  ++calls_;
  return {encoder_.encode(sr.obs), sr.reward, sr.done};
}

SyntheticLatentEnv::SyntheticLatentEnv() : SyntheticLatentEnv(Options{}) {}

SyntheticLatentEnv::SyntheticLatentEnv(Options opt)
    : opt_(opt), rng_(opt.seed), hash_(Rng::derive_seed(opt.seed, "synthetic-latent-env")) {
  if (opt_.horizon < 1) throw std::invalid_argument("synthetic env horizon must be >= 1");
  if (opt_.noise < 0.0) throw std::invalid_argument("synthetic env noise must be >= 0");
}

double SyntheticLatentEnv::reward(double z, double u) const {
  const double dz = z - opt_.target;
  return opt_.reward_offset - dz * dz - opt_.action_cost * u * u;
}

Eigen::VectorXd SyntheticLatentEnv::reset() {
  rng_.reseed(opt_.seed);  // reproducible noise stream per episode
  z_ = opt_.z0;
  t_ = 0;
  done_ = false;
  return Eigen::VectorXd::Constant(1, z_);
}

std::tuple<Eigen::VectorXd, double, bool> SyntheticLatentEnv::step(
    const Eigen::VectorXd& action) {
  if (done_) fail("synthetic env: episode is over; call reset()");
  if (action.size() != 1) throw std::invalid_argument("synthetic env expects a scalar action");
  const double u = action(0);
  const double r = reward(z_, u);
  z_ = opt_.a_coef * z_ + opt_.b_coef * u + opt_.noise * rng_.normal();
  ++t_;
  ++calls_;
  done_ = t_ >= opt_.horizon;
  return {Eigen::VectorXd::Constant(1, z_), r, done_};
}

// ---------------------------------------------------------------------------
// Lambda returns

namespace {

void check_lambda_args(size_t n_rewards, size_t n_values, double gamma, double lambda) {
  if (n_values != n_rewards + 1)
    throw std::invalid_argument("lambda returns need exactly one more value than rewards");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
}

}  // namespace

std::vector<Eigen::VectorXd> lambda_returns(const std::vector<Eigen::VectorXd>& rewards,
                                            const std::vector<Eigen::VectorXd>& values,
                                            double gamma, double lambda) {
  check_lambda_args(rewards.size(), values.size(), gamma, lambda);
  const int horizon = static_cast<int>(rewards.size());
  const auto batch = values.back().size();
  for (int t = 0; t < horizon; ++t)
    if (rewards[t].size() != batch || values[t].size() != batch)
      throw std::invalid_argument("lambda returns: inconsistent batch sizes");
  std::vector<Eigen::VectorXd> out(static_cast<size_t>(horizon));
  Eigen::VectorXd next = values.back();
  for (int t = horizon - 1; t >= 0; --t) {
    next = rewards[t] + gamma * ((1.0 - lambda) * values[t + 1] + lambda * next);
    out[static_cast<size_t>(t)] = next;
  }
  return out;
}

std::vector<Var> lambda_returns_graph(const std::vector<Var>& rewards,
                                      const std::vector<Var>& values, double gamma,
                                      double lambda) {
  check_lambda_args(rewards.size(), values.size(), gamma, lambda);
  const int horizon = static_cast<int>(rewards.size());
  const auto batch = values.back().rows();
  for (int t = 0; t < horizon; ++t)
    if (rewards[t].rows() != batch || rewards[t].cols() != 1 ||
        values[t].rows() != batch || values[t].cols() != 1)
      throw std::invalid_argument("lambda returns: inconsistent shapes");
  std::vector<Var> out(static_cast<size_t>(horizon));
  Var next = values.back();
  for (int t = horizon - 1; t >= 0; --t) {
    const Var blend =
        ad::add(ad::scale(values[static_cast<size_t>(t) + 1], 1.0 - lambda), ad::scale(next, lambda));
    next = ad::add(rewards[static_cast<size_t>(t)], ad::scale(blend, gamma));
    out[static_cast<size_t>(t)] = next;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Imagination

ImaginedTrajectory imagine_rollout(const Matrix& z0, const nets::PolicyHead& actor,
                                   wm::LatentModel& model, int horizon, Rng& rng,
                                   std::int64_t* imagined_counter,
                                   const ActionTransform& action_filter) {
  if (horizon < 1) throw std::invalid_argument("imagine_rollout: horizon must be >= 1");
  if (z0.rows() < 1) throw std::invalid_argument("imagine_rollout: empty start batch");
  if (z0.cols() != model.latent_dim())
    throw std::invalid_argument("imagine_rollout: start states do not match the model");
  if (actor.action_dim() != model.action_dim())
    throw std::invalid_argument("imagine_rollout: actor and model disagree on action dim");

  const int batch = static_cast<int>(z0.rows());
  ImaginedTrajectory traj;
  traj.batch = batch;
  traj.horizon = horizon;
  traj.z.reserve(static_cast<size_t>(horizon) + 1);

  Var context = model.context0(batch);
  Var z = ad::constant(z0);
  traj.z.push_back(z);
  for (int t = 0; t < horizon; ++t) {
    const Matrix eps = randn(batch, actor.action_dim(), rng);
    const nets::PolicyHead::Sample smp = actor.sample(z, eps);
    Var a = action_filter ? action_filter(smp.action) : smp.action;
    if (a.rows() != batch || a.cols() != actor.action_dim())
      fail("imagine_rollout: action filter changed the action shape");
    const wm::VarStep st = model.step(context, z, a, &rng);
    traj.a.push_back(a);
    traj.log_prob.push_back(smp.log_prob);
    traj.r.push_back(st.reward);
    context = st.context;
    z = st.z_next;
    traj.z.push_back(z);
  }
  if (imagined_counter) *imagined_counter += static_cast<std::int64_t>(batch) * horizon;
  return traj;
}

Matrix sample_start_states(const wm::LatentDataset& data, int batch, Rng& rng) {
  if (batch < 1) throw std::invalid_argument("sample_start_states: batch must be >= 1");
  std::int64_t total = 0;
  for (const auto& ep : data.episodes) total += ep.z.rows();
  if (total == 0) fail("sample_start_states: latent buffer is empty");
  Matrix out(batch, data.latent_dim);
  for (int b = 0; b < batch; ++b) {
    std::int64_t idx = static_cast<std::int64_t>(rng.uniform_index(static_cast<size_t>(total)));
    for (const auto& ep : data.episodes) {
      if (idx < ep.z.rows()) {
        out.row(b) = ep.z.row(idx);
        break;
      }
      idx -= ep.z.rows();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Latent actor-critic

LatentController::LatentController(int latent_dim, int action_dim, LatentControlOptions opt,
                                   std::uint64_t seed)
    : latent_dim_(latent_dim),
      action_dim_(action_dim),
      opt_(std::move(opt)),
      actor_(latent_dim, action_dim, Rng::derive_seed(seed, "latent_actor")),
      critic_(latent_dim, Rng::derive_seed(seed, "latent_critic")),
      actor_opt_(opt_.actor_lr),
      critic_opt_(opt_.critic_lr),
      rng_(Rng::derive_seed(seed, "latent_ctrl")) {
  if (latent_dim_ < 1 || action_dim_ < 1)
    throw std::invalid_argument("latent controller needs positive dimensions");
  opt_.validate();
  actor_params_ = actor_.params();
  critic_params_ = critic_.params();
}

Eigen::VectorXd LatentController::act(const Eigen::VectorXd& z, bool deterministic) {
  if (z.size() != latent_dim_)
    throw std::invalid_argument("latent controller: observation has wrong dimension");
  const Var feature = ad::constant(Matrix(z.transpose()));
  if (deterministic) {
    return Eigen::VectorXd(actor_.deterministic(feature).value().row(0).transpose());
  }
  const Matrix eps = randn(1, action_dim_, rng_);
  return Eigen::VectorXd(actor_.sample(feature, eps).action.value().row(0).transpose());
}

LatentUpdateReport LatentController::update(const Matrix& z0, wm::LatentModel& model,
                                            const ActionTransform& action_filter,
                                            std::vector<Eigen::VectorXd>* action_log) {
  if (z0.cols() != latent_dim_)
    throw std::invalid_argument("latent update: start states have wrong dimension");
  if (model.latent_dim() != latent_dim_ || model.action_dim() != action_dim_)
    throw std::invalid_argument("latent update: model does not match the controller");

  const ImaginationConfig& im = opt_.imagination;
  const int horizon = im.horizon;
  const double inv_h = 1.0 / horizon;
  LatentUpdateReport rep;

  ImaginedTrajectory traj;
  std::vector<Var> values;
  {
    // Actor pass: gradients flow through the model dynamics and the value
    // estimates into the policy only; model and critic weights stay fixed.
    ad::FreezeGuard freeze_critic(critic_params_);
    ad::FreezeGuard freeze_model(model.params());
    traj = imagine_rollout(z0, actor_, model, horizon, rng_, &imagined_steps_, action_filter);
    values.reserve(static_cast<size_t>(horizon) + 1);
    for (const Var& z : traj.z) values.push_back(critic_(z));
    const std::vector<Var> targets =
        lambda_returns_graph(traj.r, values, im.gamma, im.lambda);

    Var mean_target = ad::mean(targets[0]);
    Var mean_logp = ad::mean(traj.log_prob[0]);
    for (int t = 1; t < horizon; ++t) {
      mean_target = ad::add(mean_target, ad::mean(targets[static_cast<size_t>(t)]));
      mean_logp = ad::add(mean_logp, ad::mean(traj.log_prob[static_cast<size_t>(t)]));
    }
    mean_target = ad::scale(mean_target, inv_h);
    mean_logp = ad::scale(mean_logp, inv_h);

    const Var actor_loss =
        ad::add(ad::neg(mean_target), ad::scale(mean_logp, opt_.entropy_coef));
    ad::backward(actor_loss);
    actor_opt_.step(actor_params_);

    rep.actor_loss = actor_loss.scalar();
    rep.entropy = -mean_logp.scalar();
  }

  if (action_log) {
    for (const Var& a : traj.a)
      for (Eigen::Index row = 0; row < a.value().rows(); ++row)
        action_log->push_back(Eigen::VectorXd(a.value().row(row).transpose()));
  }

  // Critic pass: regression on detached lambda-return targets.
  std::vector<Eigen::VectorXd> rewards_v(static_cast<size_t>(horizon));
  std::vector<Eigen::VectorXd> values_v(static_cast<size_t>(horizon) + 1);
  for (int t = 0; t < horizon; ++t) rewards_v[static_cast<size_t>(t)] = traj.r[static_cast<size_t>(t)].value().col(0);
  for (int t = 0; t <= horizon; ++t) values_v[static_cast<size_t>(t)] = values[static_cast<size_t>(t)].value().col(0);
  const std::vector<Eigen::VectorXd> targets_v =
      lambda_returns(rewards_v, values_v, im.gamma, im.lambda);
  rep.mean_return = targets_v[0].mean();

  Var critic_loss;
  for (int t = 0; t < horizon; ++t) {
    const Var pred = critic_(ad::constant(traj.z[static_cast<size_t>(t)].value()));
    const Var target = ad::constant(Matrix(targets_v[static_cast<size_t>(t)]));
    const Var term = ad::mean(ad::square(ad::sub(pred, target)));
    critic_loss = (t == 0) ? term : ad::add(critic_loss, term);
  }
  critic_loss = ad::scale(critic_loss, inv_h);
  ad::backward(critic_loss);
  critic_opt_.step(critic_params_);
  rep.critic_loss = critic_loss.scalar();
  return rep;
}

// ---------------------------------------------------------------------------
// Real-environment interaction

CollectReport collect_latent_steps(LatentEnv& env, LatentController& ctrl, int n_steps,
                                   wm::LatentDataset& out,
                                   const ValueActionTransform& action_filter) {
  if (n_steps < 0) throw std::invalid_argument("collect_latent_steps: negative step count");
  if (env.latent_dim() != ctrl.latent_dim() || env.action_dim() != ctrl.action_dim())
    throw std::invalid_argument("collect_latent_steps: controller does not match the env");
  if (out.episodes.empty() && out.encoder_hash == 0) {
    out.latent_dim = env.latent_dim();
    out.action_dim = env.action_dim();
    out.encoder_hash = env.encoder_hash();
  }
  if (out.encoder_hash != env.encoder_hash())
    fail("collect_latent_steps: dataset was produced by a different encoder");
  if (out.latent_dim != env.latent_dim() || out.action_dim != env.action_dim())
    fail("collect_latent_steps: dataset dimensions do not match the env");

  CollectReport rep;
  int remaining = n_steps;
  while (remaining > 0) {
    std::vector<Eigen::VectorXd> zs{env.reset()};
    std::vector<Eigen::VectorXd> as;
    std::vector<double> rs;
    bool done = false;
    while (remaining > 0 && !done) {
      const Eigen::VectorXd a = ctrl.act(zs.back(), /*deterministic=*/false);
      const Eigen::VectorXd applied = action_filter ? action_filter(a) : a;
      if (applied.size() != env.action_dim())
        fail("collect_latent_steps: action filter changed the action dimension");
      auto [z_next, r, d] = env.step(applied);
      zs.push_back(std::move(z_next));
      as.push_back(applied);
      rs.push_back(r);
      done = d;
      --remaining;
      ++rep.steps;
    }
    wm::LatentEpisode ep;
    const int T = static_cast<int>(as.size());
    ep.z.resize(T + 1, env.latent_dim());
    ep.a.resize(T, env.action_dim());
    ep.r.resize(T);
    for (int t = 0; t <= T; ++t) ep.z.row(t) = zs[static_cast<size_t>(t)];
    for (int t = 0; t < T; ++t) {
      ep.a.row(t) = as[static_cast<size_t>(t)];
      ep.r(t) = rs[static_cast<size_t>(t)];
    }
    out.push(std::move(ep));
    ++rep.episodes;
  }
  return rep;
}

DeployResult deploy_eval(LatentEnv& env, LatentController& ctrl,
                         std::uint64_t expected_encoder_hash,
                         const ValueActionTransform& action_filter) {
  if (env.encoder_hash() != expected_encoder_hash) {
    std::ostringstream msg;
    msg << "deploy_eval: encoder hash mismatch (expected " << std::hex << expected_encoder_hash
        << ", environment encodes with " << env.encoder_hash() << "); refusing to deploy";
    fail(msg.str());
  }
  if (env.latent_dim() != ctrl.latent_dim() || env.action_dim() != ctrl.action_dim())
    throw std::invalid_argument("deploy_eval: controller does not match the env");

  DeployResult res;
  Eigen::VectorXd z = env.reset();
  constexpr int kMaxSteps = 100000;  // terminates even on a broken env
  for (int t = 0; t < kMaxSteps; ++t) {
    const Eigen::VectorXd a = ctrl.act(z, /*deterministic=*/true);
    const Eigen::VectorXd applied = action_filter ? action_filter(a) : a;
    if (applied.size() != env.action_dim())
      fail("deploy_eval: action filter changed the action dimension");
    auto [z_next, r, done] = env.step(applied);
    res.total_return += r;
    res.actions.push_back(applied);
    res.rewards.push_back(r);
    ++res.steps;
    z = std::move(z_next);
    if (done) return res;
  }
  fail("deploy_eval: episode did not terminate");
}

// ---------------------------------------------------------------------------
// Dyna epoch loop

DynaTrainer::DynaTrainer(LatentEnv& train_env, LatentEnv& eval_env, wm::WmEnsemble ensemble,
                         LatentController& ctrl, DynaConfig cfg)
    : train_env_(train_env),
      eval_env_(eval_env),
      ensemble_(std::move(ensemble)),
      ctrl_(ctrl),
      cfg_(std::move(cfg)),
      rng_(Rng::derive_seed(cfg_.seed, "dyna")) {
  cfg_.validate();
  if (ensemble_.size() < 1) throw std::invalid_argument("dyna: empty world-model ensemble");
  for (int i = 0; i < ensemble_.size(); ++i) {
    const wm::LatentModel& m = ensemble_.member(i);
    if (m.latent_dim() != ctrl_.latent_dim() || m.action_dim() != ctrl_.action_dim())
      throw std::invalid_argument("dyna: ensemble member does not match the controller");
  }
  if (train_env_.latent_dim() != ctrl_.latent_dim() ||
      train_env_.action_dim() != ctrl_.action_dim() ||
      eval_env_.latent_dim() != ctrl_.latent_dim() ||
      eval_env_.action_dim() != ctrl_.action_dim())
    throw std::invalid_argument("dyna: environments do not match the controller");

  expected_hash_ = cfg_.expected_encoder_hash ? cfg_.expected_encoder_hash
                                              : train_env_.encoder_hash();
  if (train_env_.encoder_hash() != expected_hash_)
    fail("dyna: collection environment uses an unexpected encoder");

  const ImaginationConfig& im = ctrl_.options().imagination;
  const std::int64_t per_rollout =
      static_cast<std::int64_t>(im.start_batch) * im.horizon;
  if (cfg_.budget.imagined_steps > 0 && cfg_.budget.imagined_steps % per_rollout != 0) {
    std::ostringstream msg;
    msg << "dyna: imagined budget " << cfg_.budget.imagined_steps
        << " is not a whole number of rollouts (batch " << im.start_batch << " x horizon "
        << im.horizon << ")";
    throw std::invalid_argument(msg.str());
  }

  buffer_.latent_dim = ctrl_.latent_dim();
  buffer_.action_dim = ctrl_.action_dim();
  buffer_.encoder_hash = expected_hash_;

  std::set<const ParamList*> seen;
  for (int i = 0; i < ensemble_.size(); ++i) {
    wm::LatentModel& m = ensemble_.member(i);
    if (seen.insert(&m.params()).second) wm_opts_.emplace_back(&m, ad::Adam(cfg_.wm_lr));
  }
}

void DynaTrainer::seed_buffer(const wm::LatentDataset& offline) {
  if (offline.encoder_hash != expected_hash_)
    fail("dyna: offline dataset was produced by a different encoder");
  if (offline.latent_dim != buffer_.latent_dim || offline.action_dim != buffer_.action_dim)
    fail("dyna: offline dataset dimensions do not match");
  for (const auto& ep : offline.episodes) buffer_.push(ep);
}

double DynaTrainer::run_eval_phase() {
  const int n = cfg_.budget.test_episodes;
  if (n == 0) return 0.0;
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    total += deploy_eval(eval_env_, ctrl_, expected_hash_, cfg_.action_filter).total_return;
  eval_episodes_ += n;
  return total / n;
}

DynaEpochRow DynaTrainer::eval_row(int epoch) {
  DynaEpochRow row;
  row.epoch = epoch;
  row.eval_return = run_eval_phase();
  row.cumulative_real = real_steps_;
  row.cumulative_imagined = imagined_steps_;
  return row;
}

DynaEpochRow DynaTrainer::run_epoch(int epoch) {
  DynaEpochRow row;
  row.epoch = epoch;

  // Real collection, counted against the budget exactly.
  const std::int64_t sim_before = train_env_.sim_calls();
  const CollectReport col =
      collect_latent_steps(train_env_, ctrl_, cfg_.budget.real_steps, buffer_, cfg_.action_filter);
  const std::int64_t used = train_env_.sim_calls() - sim_before;
  if (used != cfg_.budget.real_steps || col.steps != cfg_.budget.real_steps) {
    std::ostringstream msg;
    msg << "dyna: real-step budget violated (configured " << cfg_.budget.real_steps
        << ", simulator saw " << used << ")";
    fail(msg.str());
  }
  real_steps_ += used;
  row.real_steps = used;

  // World-model updates on the mixed buffer.
  if (cfg_.wm_updates_per_epoch > 0 && buffer_.transitions() > 0) {
    double loss_sum = 0.0;
    int loss_count = 0;
    for (auto& [model, opt] : wm_opts_) {
      for (int u = 0; u < cfg_.wm_updates_per_epoch; ++u) {
        const wm::WmLoss loss =
            model->sample_loss(buffer_, cfg_.wm_batch, cfg_.wm_window, rng_);
        ad::backward(loss.total);
        opt.step(model->params());
        loss_sum += loss.total.scalar();
        ++loss_count;
      }
    }
    row.wm_loss = loss_count > 0 ? loss_sum / loss_count : 0.0;
  }

  // Imagination: policy updates consuming the imagined budget exactly, with a
  // guard proving the real simulator is never touched.
  const std::int64_t guard_before = train_env_.sim_calls() + eval_env_.sim_calls();
  const std::int64_t imagined_before = ctrl_.imagined_steps();
  if (cfg_.budget.imagined_steps > 0) {
    const ImaginationConfig& im = ctrl_.options().imagination;
    const std::int64_t per_rollout =
        static_cast<std::int64_t>(im.start_batch) * im.horizon;
    const std::int64_t n_updates = cfg_.budget.imagined_steps / per_rollout;
    double actor_sum = 0.0, critic_sum = 0.0, entropy_sum = 0.0;
    for (std::int64_t u = 0; u < n_updates; ++u) {
      const int member = ensemble_.pick(rng_);
      const Matrix z0 = sample_start_states(buffer_, im.start_batch, rng_);
      const LatentUpdateReport rep =
          ctrl_.update(z0, ensemble_.member(member), cfg_.action_filter_graph,
                       cfg_.record_imagined_actions ? &imagined_actions_ : nullptr);
      actor_sum += rep.actor_loss;
      critic_sum += rep.critic_loss;
      entropy_sum += rep.entropy;
    }
    row.actor_loss = actor_sum / static_cast<double>(n_updates);
    row.critic_loss = critic_sum / static_cast<double>(n_updates);
    row.entropy = entropy_sum / static_cast<double>(n_updates);
  }
  const std::int64_t imagined_used = ctrl_.imagined_steps() - imagined_before;
  if (imagined_used != cfg_.budget.imagined_steps) {
    std::ostringstream msg;
    msg << "dyna: imagined-step budget violated (configured " << cfg_.budget.imagined_steps
        << ", consumed " << imagined_used << ")";
    fail(msg.str());
  }
  if (train_env_.sim_calls() + eval_env_.sim_calls() != guard_before)
    fail("dyna: real simulator was called during the imagination phase");
  imagined_steps_ += imagined_used;
  row.imagined_steps = imagined_used;

  // Deterministic evaluation on the target environment.
  row.eval_return = run_eval_phase();
  row.cumulative_real = real_steps_;
  row.cumulative_imagined = imagined_steps_;
  return row;
}

std::vector<DynaEpochRow> DynaTrainer::run() {
  std::vector<DynaEpochRow> rows;
  rows.reserve(static_cast<size_t>(cfg_.budget.epochs) + 1);
  rows.push_back(eval_row(0));
  for (int e = 1; e <= cfg_.budget.epochs; ++e) rows.push_back(run_epoch(e));
  const std::int64_t want_real =
      static_cast<std::int64_t>(cfg_.budget.epochs) * cfg_.budget.real_steps;
  const std::int64_t want_imagined =
      static_cast<std::int64_t>(cfg_.budget.epochs) * cfg_.budget.imagined_steps;
  if (real_steps_ != want_real || imagined_steps_ != want_imagined)
    fail("dyna: budget accounting mismatch at end of run");
  return rows;
}

// ---------------------------------------------------------------------------
// Retention

double retention_metric(double final_return, double reference_return) {
  if (reference_return == 0.0)
    throw std::invalid_argument("retention metric: reference return is zero");
  return std::round(1000.0 * final_return / reference_return) / 10.0;
}

}  // namespace ccs::latent
