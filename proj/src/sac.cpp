#include "ccs/sac.hpp"

#include <algorithm>
#include <iostream>
#include <stdexcept>

namespace ccs::sac {

void SACHyperparams::validate() const {
  if (!(gamma > 0.0) || gamma > 1.0) throw std::invalid_argument("gamma must lie in (0,1]");
  if (!(polyak > 0.0) || !(polyak < 1.0)) throw std::invalid_argument("polyak must lie in (0,1)");
  if (actor_lr <= 0 || critic_lr <= 0 || alpha_lr <= 0)
    throw std::invalid_argument("learning rates must be positive");
  if (init_alpha <= 0) throw std::invalid_argument("init_alpha must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (updates_per_env_step <= 0) throw std::invalid_argument("updates_per_env_step must be > 0");
}

void EpisodeRecord::validate() const {
  const int T = length();
  if (T < 1) throw std::invalid_argument("episode must contain at least one step");
  if (actions.rows() != T) throw std::invalid_argument("episode: actions/rewards length mismatch");
  if (wells.size() != static_cast<size_t>(T) + 1)
    throw std::invalid_argument("episode: wells must hold T+1 observations");
  if (!spatial.empty() && spatial.size() != static_cast<size_t>(T) + 1)
    throw std::invalid_argument("episode: spatial must hold T+1 observations when stored");
}

// ---------------------------------------------------------------------------
// ReplayBuffer

ReplayBuffer::ReplayBuffer(int capacity_episodes, uint64_t seed)
    : capacity_(capacity_episodes), rng_(seed) {
  if (capacity_episodes < 1) throw std::invalid_argument("replay capacity must be >= 1");
}

void ReplayBuffer::push(EpisodeRecord ep) {
  ep.validate();
  if (episodes_.size() < static_cast<size_t>(capacity_)) {
    episodes_.push_back(std::move(ep));
  } else {
    episodes_[next_slot_] = std::move(ep);
    next_slot_ = (next_slot_ + 1) % episodes_.size();
  }
  rebuild_prefix();
}

void ReplayBuffer::reset() {
  episodes_.clear();
  next_slot_ = 0;
  transitions_ = 0;
  prefix_.clear();
}

void ReplayBuffer::rebuild_prefix() {
  prefix_.resize(episodes_.size());
  int64_t acc = 0;
  for (size_t i = 0; i < episodes_.size(); ++i) {
    acc += episodes_[i].length();
    prefix_[i] = acc;
  }
  transitions_ = acc;
}

std::vector<ReplayBuffer::Ref> ReplayBuffer::sample(int batch_size) {
  if (transitions_ == 0) throw std::logic_error("sample() on an empty replay buffer");
  std::vector<Ref> out;
  out.reserve(static_cast<size_t>(batch_size));
  for (int b = 0; b < batch_size; ++b) {
    const int64_t flat = static_cast<int64_t>(rng_.uniform_index(
        static_cast<uint64_t>(transitions_)));
    const auto it = std::upper_bound(prefix_.begin(), prefix_.end(), flat);
    const size_t e = static_cast<size_t>(it - prefix_.begin());
    const int64_t base = e == 0 ? 0 : prefix_[e - 1];
    out.push_back({&episodes_[e], static_cast<int>(flat - base)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch assembly

Batch assemble_batch(const std::vector<ReplayBuffer::Ref>& refs, int history_len,
                     bool want_spatial) {
  if (refs.empty()) throw std::invalid_argument("assemble_batch: empty sample");
  const int B = static_cast<int>(refs.size());
  const auto& first = *refs.front().episode;
  const Eigen::Index srows = first.wells.front().rows();   // 9
  const Eigen::Index scols = first.wells.front().cols();   // 30
  const Eigen::Index adim = first.actions.cols();

  Batch batch;
  batch.size = B;
  batch.wells.resize(B * srows, scols);
  batch.next_wells.resize(B * srows, scols);
  batch.actions.resize(B, adim);
  batch.rewards.resize(B);
  batch.done.resize(B);
  if (want_spatial) {
    if (first.spatial.empty())
      throw std::invalid_argument("assemble_batch: spatial requested but not stored");
    const Eigen::Index cells = first.spatial.front().rows();
    batch.spatial.resize(B * cells, 2);
    batch.next_spatial.resize(B * cells, 2);
  }
  if (history_len > 0) {
    batch.history = Matrix::Zero(static_cast<Eigen::Index>(B) * history_len * srows, scols);
    batch.next_history = Matrix::Zero(batch.history.rows(), scols);
  }

  for (int b = 0; b < B; ++b) {
    const EpisodeRecord& ep = *refs[static_cast<size_t>(b)].episode;
    const int t = refs[static_cast<size_t>(b)].t;
    const int T = ep.length();
    batch.wells.middleRows(b * srows, srows) = ep.wells[static_cast<size_t>(t)];
    batch.next_wells.middleRows(b * srows, srows) = ep.wells[static_cast<size_t>(t) + 1];
    batch.actions.row(b) = ep.actions.row(t);
    batch.rewards[b] = ep.rewards[t];
    batch.done[b] = (t + 1 == T) ? 1.0 : 0.0;
    if (want_spatial) {
      if (ep.spatial.empty())
        throw std::invalid_argument("assemble_batch: spatial requested but not stored");
      const Eigen::Index cells = ep.spatial.front().rows();
      batch.spatial.middleRows(b * cells, cells) = ep.spatial[static_cast<size_t>(t)];
      batch.next_spatial.middleRows(b * cells, cells) = ep.spatial[static_cast<size_t>(t) + 1];
    }
    if (history_len > 0) {
      // window slot l holds step index t-(L-1)+l; indices < 1 stay zero
      for (int l = 0; l < history_len; ++l) {
        const int src = t - (history_len - 1) + l;
        const Eigen::Index row0 =
            (static_cast<Eigen::Index>(b) * history_len + l) * srows;
        if (src >= 1) batch.history.middleRows(row0, srows) = ep.wells[static_cast<size_t>(src)];
        if (src + 1 >= 1)
          batch.next_history.middleRows(row0, srows) = ep.wells[static_cast<size_t>(src) + 1];
      }
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// SAC math

Eigen::VectorXd critic_td_target(const Eigen::VectorXd& rewards, const Eigen::VectorXd& done,
                                 const Eigen::VectorXd& q1_next, const Eigen::VectorXd& q2_next,
                                 const Eigen::VectorXd& logp_next, double alpha, double gamma) {
  const Eigen::Index B = rewards.size();
  if (done.size() != B || q1_next.size() != B || q2_next.size() != B || logp_next.size() != B)
    throw std::invalid_argument("critic_td_target: size mismatch");
  Eigen::VectorXd y(B);
  for (Eigen::Index i = 0; i < B; ++i) {
    const double soft_v = std::min(q1_next[i], q2_next[i]) - alpha * logp_next[i];
    y[i] = rewards[i] + (1.0 - done[i]) * gamma * soft_v;
  }
  return y;
}

Var critic_loss(const Var& q1, const Var& q2, const Eigen::VectorXd& target) {
  Var y = ad::constant(target);
  return ad::add(ad::mean(ad::square(ad::sub(q1, y))), ad::mean(ad::square(ad::sub(q2, y))));
}

Var actor_loss(const Var& q1_pi, const Var& q2_pi, const Var& logp, double alpha) {
  return ad::mean(ad::sub(ad::scale(logp, alpha), ad::min_elt(q1_pi, q2_pi)));
}

Var alpha_loss(const Var& log_alpha, const Eigen::VectorXd& logp_detached,
               double target_entropy) {
  const double mean_term = logp_detached.mean() + target_entropy;
  return ad::scale(log_alpha, -mean_term);
}

// ---------------------------------------------------------------------------
// SacAgent

namespace {
Matrix vector_as_column(const Eigen::VectorXd& v) {
  Matrix m(v.size(), 1);
  m.col(0) = v;
  return m;
}
}  // namespace

SacAgent::SacAgent(RegimeWiring wiring, int action_dim, const SACHyperparams& hp, uint64_t seed)
    : wiring_(std::move(wiring)),
      hp_(hp),
      actor_head_(wiring_.actor_dim, action_dim, Rng::derive_seed(seed, "actor_head")),
      q1_(wiring_.critic_dim, action_dim, Rng::derive_seed(seed, "q1")),
      q2_(wiring_.critic_dim, action_dim, Rng::derive_seed(seed, "q2")),
      qt1_(wiring_.critic_dim, action_dim, Rng::derive_seed(seed, "q1")),
      qt2_(wiring_.critic_dim, action_dim, Rng::derive_seed(seed, "q2")),
      actor_opt_(hp.actor_lr),
      critic_opt_(hp.critic_lr),
      alpha_opt_(hp.alpha_lr),
      rng_(Rng::derive_seed(seed, "sac_eps")) {
  hp_.validate();
  if (!wiring_.actor_features || !wiring_.critic_features || !wiring_.target_features)
    throw std::invalid_argument("sac agent: all three feature builders are required");

  log_alpha_ = ad::param(Matrix::Constant(1, 1, std::log(hp_.init_alpha)));
  alpha_param_.push_back({"sac/log_alpha", log_alpha_});

  actor_all_ = actor_head_.params();
  for (const auto& p : wiring_.actor_encoder_params) actor_all_.push_back(p);
  critic_all_ = q1_.params();
  for (const auto& p : q2_.params()) critic_all_.push_back(p);
  for (const auto& p : wiring_.critic_encoder_params) critic_all_.push_back(p);
  target_all_ = qt1_.params();
  for (const auto& p : qt2_.params()) target_all_.push_back(p);
  for (const auto& p : wiring_.target_encoder_params) target_all_.push_back(p);

  // targets start as exact copies of the online critics (and their encoders)
  ad::copy_params(critic_all_, target_all_);
  for (auto& p : target_all_) p.var.set_requires_grad(false);
}

double SacAgent::alpha() const { return std::exp(log_alpha_.value()(0, 0)); }

Matrix SacAgent::draw_eps(int batch, int dim) {
  Matrix eps(batch, dim);
  for (int i = 0; i < batch; ++i)
    for (int j = 0; j < dim; ++j) eps(i, j) = rng_.normal();
  return eps;
}

UpdateReport SacAgent::update(ReplayBuffer& buffer) {
  if (buffer.size() == 0) {
    if (!warned_empty_) {
      std::cerr << "[sac] update skipped: replay buffer is empty\n";
      warned_empty_ = true;
    }
    UpdateReport rep;
    rep.skipped = true;
    return rep;
  }
  auto refs = buffer.sample(hp_.batch_size);
  Batch batch = assemble_batch(refs, wiring_.history_len, wiring_.want_spatial);
  return update_batch(std::move(batch));
}

UpdateReport SacAgent::update_batch(Batch batch) {
  if (wiring_.batch_transform) wiring_.batch_transform(batch);
  const int B = batch.size;
  const int adim = actor_head_.action_dim();
  UpdateReport rep;
  const double alpha_now = alpha();

  // --- TD target from target critics and a fresh next action (no grad) ---
  Eigen::VectorXd y;
  {
    Var next_actor_feat = wiring_.actor_features(batch, /*next=*/true);
    auto next_sample = actor_head_.sample(next_actor_feat, draw_eps(B, adim));
    Var next_target_feat = wiring_.target_features(batch, /*next=*/true);
    Var q1n = qt1_(next_target_feat, next_sample.action);
    Var q2n = qt2_(next_target_feat, next_sample.action);
    y = critic_td_target(batch.rewards, batch.done, q1n.value().col(0), q2n.value().col(0),
                         next_sample.log_prob.value().col(0), alpha_now, hp_.gamma);
  }

  // --- critic regression on both twins ---
  {
    Var cf = wiring_.critic_features(batch, /*next=*/false);
    Var act = ad::constant(batch.actions);
    Var loss = critic_loss(q1_(cf, act), q2_(cf, act), y);
    rep.critic_loss = loss.scalar();
    ad::backward(loss);
    critic_opt_.step(critic_all_);
  }

  // --- actor ascent through frozen critics ---
  {
    ad::FreezeGuard freeze(critic_all_);
    Var af = wiring_.actor_features(batch, /*next=*/false);
    auto smp = actor_head_.sample(af, draw_eps(B, adim));
    Var cf = wiring_.critic_features(batch, /*next=*/false);
    Var loss = actor_loss(q1_(cf, smp.action), q2_(cf, smp.action), smp.log_prob, alpha_now);
    rep.actor_loss = loss.scalar();
    rep.mean_entropy = -smp.log_prob.value().mean();
    ad::backward(loss);
    actor_opt_.step(actor_all_);

    // --- temperature toward the entropy target (logp detached) ---
    Var aloss = alpha_loss(log_alpha_, smp.log_prob.value().col(0), hp_.target_entropy);
    rep.alpha_loss = aloss.scalar();
    ad::backward(aloss);
    alpha_opt_.step(alpha_param_);
  }

  ad::polyak_params(critic_all_, target_all_, hp_.polyak);
  rep.alpha = alpha();
  return rep;
}

Eigen::VectorXd SacAgent::act(const Batch& obs, bool deterministic) {
  Batch view = obs;
  if (wiring_.batch_transform) wiring_.batch_transform(view);
  Var feat = wiring_.actor_features(view, /*next=*/false);
  if (deterministic) return actor_head_.deterministic(feat).value().row(0).transpose();
  auto smp = actor_head_.sample(feat, draw_eps(1, actor_head_.action_dim()));
  return smp.action.value().row(0).transpose();
}

}  // namespace ccs::sac
