#include "ccs/variants.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <stdexcept>

namespace ccs::variants {

namespace {

void append_params(ParamList& dst, const ParamList& src) {
  for (const auto& p : src) dst.push_back(p);
}

// Stack the history buffer's chronological blocks into the (L*9) x 30 layout
// used by batches.
Matrix stack_history(const HistoryBuffer& h) {
  if (h.blocks.empty()) return Matrix();
  const Eigen::Index r = h.blocks.front().rows();
  const Eigen::Index c = h.blocks.front().cols();
  Matrix out(static_cast<Eigen::Index>(h.blocks.size()) * r, c);
  for (size_t i = 0; i < h.blocks.size(); ++i)
    out.middleRows(static_cast<Eigen::Index>(i) * r, r) = h.blocks[i];
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Regime wiring descriptions

void RegimeConfig::validate() const {
  if (well_dim != 64 && well_dim != 128)
    throw std::invalid_argument("regime: embedding width must be 64 or 128");
  if ((actor_history || critic_history) && history_len < 1)
    throw std::invalid_argument("regime: history stream requires history_len >= 1");
  if (regime != Regime::privileged && actor_spatial)
    throw std::invalid_argument(
        "regime: deployable actor input must exclude the spatial tensor");
  if (masked_curriculum && !critic_spatial)
    throw std::invalid_argument("regime: masking applies to the critic spatial stream");
}

RegimeConfig regime_config(Regime regime, int history_len) {
  RegimeConfig c;
  c.regime = regime;
  switch (regime) {
    case Regime::privileged:
      c.actor_spatial = c.critic_spatial = true;
      c.actor_feature_dim = c.critic_feature_dim = 64 + 64;
      break;
    case Regime::well_only:
      c.actor_feature_dim = c.critic_feature_dim = 64;
      break;
    case Regime::history:
      c.actor_history = c.critic_history = true;
      c.history_len = history_len;
      c.fusion = nets::HistoryEncoder::Mode::concat;
      c.actor_feature_dim = c.critic_feature_dim = 2 * 64;
      break;
    case Regime::masked_critic:
      c.critic_spatial = true;
      c.masked_curriculum = true;
      c.actor_feature_dim = 64;
      c.critic_feature_dim = 64 + 64;
      break;
    case Regime::teacher_student:
      c.well_dim = 128;
      c.actor_history = c.critic_history = true;
      c.critic_spatial = true;  // teacher critics only
      c.history_len = history_len;
      c.fusion = nets::HistoryEncoder::Mode::add;
      c.actor_feature_dim = 128;
      c.critic_feature_dim = 64 + 128;
      break;
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Masking curriculum

void CurriculumSchedule::validate() const {
  if (ratios.empty()) throw std::invalid_argument("curriculum: at least one masking ratio");
  if (total_epochs < 1) throw std::invalid_argument("curriculum: total_epochs must be >= 1");
  for (size_t i = 0; i < ratios.size(); ++i) {
    if (ratios[i] < 0.0 || ratios[i] > 1.0)
      throw std::invalid_argument("curriculum: ratios must lie in [0,1]");
    if (i > 0 && ratios[i] < ratios[i - 1])
      throw std::invalid_argument("curriculum: ratios must be non-decreasing");
  }
  if (p_test < 0.0 || p_test > 1.0)
    throw std::invalid_argument("curriculum: p_test must lie in [0,1]");
}

int CurriculumSchedule::stage(int epoch) const {
  validate();
  if (epoch < 0 || epoch >= total_epochs) throw std::out_of_range("curriculum: epoch out of range");
  const int n = static_cast<int>(ratios.size());
  const int block = std::max(1, total_epochs / n);
  return std::min(epoch / block, n - 1);
}

double CurriculumSchedule::ratio_at(int epoch) const {
  return ratios[static_cast<size_t>(stage(epoch))];
}

bool CurriculumSchedule::boundary(int epoch) const {
  if (epoch <= 0) return false;
  return stage(epoch) != stage(epoch - 1);
}

double curriculum_stage(int epoch, const CurriculumSchedule& sched) {
  return sched.ratio_at(epoch);
}

Matrix mask_spatial(const Matrix& x, double p, Rng& rng) {
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("mask_spatial: p must lie in [0,1]");
  std::vector<std::pair<Eigen::Index, Eigen::Index>> nonzero;
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      if (x(i, j) != 0.0) nonzero.emplace_back(i, j);
  const int k = static_cast<int>(std::floor(p * static_cast<double>(nonzero.size())));
  Matrix out = x;
  if (k == 0) return out;
  for (const int idx : rng.sample_without_replacement(static_cast<int>(nonzero.size()), k)) {
    const auto& [i, j] = nonzero[static_cast<size_t>(idx)];
    out(i, j) = 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distillation pieces

double distill_weight(double epoch, double ramp_start, double ramp_end, double w_final) {
  if (ramp_end <= ramp_start) throw std::invalid_argument("distill_weight: empty ramp window");
  if (epoch <= ramp_start) return 0.0;
  if (epoch >= ramp_end) return w_final;
  return w_final * (epoch - ramp_start) / (ramp_end - ramp_start);
}

Var infonce_loss(const Var& student_feature, const Matrix& teacher_latent,
                 const nets::DistillationHeads& heads, double tau) {
  const Eigen::Index B = teacher_latent.rows();
  if (B < 1) throw std::invalid_argument("infonce_loss: batch must be non-empty");
  if (student_feature.rows() != B) throw std::invalid_argument("infonce_loss: batch mismatch");
  if (tau <= 0.0) throw std::invalid_argument("infonce_loss: temperature must be positive");

  Var s = heads.student_projection(student_feature);  // B x proj, unit rows
  // teacher side detached: frozen projection evaluated on plain values
  const Matrix t = heads.teacher_projection(ad::constant(teacher_latent)).value();
  Var logits = ad::scale(ad::matmul(s, ad::constant(t.transpose())), 1.0 / tau);  // B x B
  Var log_sm = ad::row_log_softmax(logits);
  const Matrix eye = Matrix::Identity(B, B);
  return ad::scale(ad::sum(ad::cmul(log_sm, ad::constant(eye))), -1.0 / static_cast<double>(B));
}

Var value_alignment_loss(const Var& value_pred, const Eigen::VectorXd& target_detached) {
  if (value_pred.rows() != target_detached.size() || value_pred.cols() != 1)
    throw std::invalid_argument("value_alignment_loss: shape mismatch");
  Matrix t(target_detached.size(), 1);
  t.col(0) = target_detached;
  return ad::mean(ad::square(ad::sub(value_pred, ad::constant(t))));
}

TSLossBundle combine_ts_losses(const Var& q1_teach, const Var& q2_teach,
                               const Eigen::VectorXd& y_teach, const Var& q1_stud,
                               const Var& q2_stud, const Var& q1_stud_pi, const Var& q2_stud_pi,
                               const Var& logp, const Var& nce, const Var& value_align,
                               double alpha, double w_dist, double beta) {
  TSLossBundle out;
  out.teacher_loss = sac::critic_loss(q1_teach, q2_teach, y_teach);
  out.student_loss = sac::critic_loss(q1_stud, q2_stud, y_teach);
  out.actor_loss = sac::actor_loss(q1_stud_pi, q2_stud_pi, logp, alpha);
  out.nce = nce;
  out.value = value_align;
  out.total_actor =
      ad::add(out.actor_loss, ad::scale(ad::add(nce, ad::scale(value_align, beta)), w_dist));
  return out;
}

// ---------------------------------------------------------------------------
// Symmetric-regime controller

MfController::MfController(const RegimeConfig& cfg, const GridGeometry& grid, int action_dim,
                           const SACHyperparams& hp, uint64_t seed)
    : cfg_(cfg),
      mask_p_(std::make_shared<double>(0.0)),
      mask_rng_(std::make_shared<Rng>(Rng::derive_seed(seed, "mask"))) {
  cfg_.validate();
  if (cfg_.regime == Regime::teacher_student)
    throw std::invalid_argument("teacher-student uses its own learner");

  sac::RegimeWiring w;
  w.actor_dim = cfg_.actor_feature_dim;
  w.critic_dim = cfg_.critic_feature_dim;
  w.history_len = (cfg_.actor_history || cfg_.critic_history) ? cfg_.history_len : 0;
  w.want_spatial = cfg_.actor_spatial || cfg_.critic_spatial;

  const int d = cfg_.well_dim;
  auto well_feature = [](std::shared_ptr<nets::WellEncoder> enc) {
    return [enc](const Batch& b, bool next) {
      return enc->encode_batch(ad::constant(next ? b.next_wells : b.wells), b.size);
    };
  };
  auto hist_feature = [](std::shared_ptr<nets::HistoryEncoder> enc) {
    return [enc](const Batch& b, bool next) {
      return enc->feature_batch(ad::constant(next ? b.next_history : b.history),
                                ad::constant(next ? b.next_wells : b.wells), b.size);
    };
  };
  auto fused_feature = [](std::shared_ptr<nets::SpatialEncoder> sp,
                          std::shared_ptr<nets::WellEncoder> we) {
    return [sp, we](const Batch& b, bool next) {
      Var s = sp->encode_batch(ad::constant(next ? b.next_spatial : b.spatial), b.size);
      Var y = we->encode_batch(ad::constant(next ? b.next_wells : b.wells), b.size);
      return ad::concat_cols({s, y});
    };
  };

  // actor branch
  if (cfg_.actor_history) {
    a_hist_ = std::make_shared<nets::HistoryEncoder>(d, cfg_.history_len, cfg_.fusion,
                                                     Rng::derive_seed(seed, "actor/hist"));
    w.actor_features = hist_feature(a_hist_);
    w.actor_encoder_params = a_hist_->params();
  } else if (cfg_.actor_spatial) {
    a_spatial_ =
        std::make_shared<nets::SpatialEncoder>(grid, Rng::derive_seed(seed, "actor/spatial"));
    a_well_ = std::make_shared<nets::WellEncoder>(d, Rng::derive_seed(seed, "actor/well"));
    w.actor_features = fused_feature(a_spatial_, a_well_);
    append_params(w.actor_encoder_params, a_spatial_->params());
    append_params(w.actor_encoder_params, a_well_->params());
  } else {
    a_well_ = std::make_shared<nets::WellEncoder>(d, Rng::derive_seed(seed, "actor/well"));
    w.actor_features = well_feature(a_well_);
    w.actor_encoder_params = a_well_->params();
  }

  // critic and target branches (same architecture, independent instances)
  auto build_critic = [&](const char* tag, std::shared_ptr<nets::WellEncoder>& well,
                          std::shared_ptr<nets::SpatialEncoder>& spatial,
                          std::shared_ptr<nets::HistoryEncoder>& hist, ParamList& reg,
                          std::function<Var(const Batch&, bool)>& features) {
    if (cfg_.critic_history) {
      hist = std::make_shared<nets::HistoryEncoder>(
          d, cfg_.history_len, cfg_.fusion, Rng::derive_seed(seed, std::string(tag) + "/hist"));
      features = hist_feature(hist);
      reg = hist->params();
    } else if (cfg_.critic_spatial) {
      spatial = std::make_shared<nets::SpatialEncoder>(
          grid, Rng::derive_seed(seed, std::string(tag) + "/spatial"));
      well = std::make_shared<nets::WellEncoder>(d,
                                                 Rng::derive_seed(seed, std::string(tag) + "/well"));
      features = fused_feature(spatial, well);
      append_params(reg, spatial->params());
      append_params(reg, well->params());
    } else {
      well = std::make_shared<nets::WellEncoder>(d,
                                                 Rng::derive_seed(seed, std::string(tag) + "/well"));
      features = well_feature(well);
      reg = well->params();
    }
  };
  build_critic("critic", c_well_, c_spatial_, c_hist_, w.critic_encoder_params, w.critic_features);
  build_critic("target", t_well_, t_spatial_, t_hist_, w.target_encoder_params, w.target_features);

  if (cfg_.masked_curriculum) {
    w.batch_transform = [p = mask_p_, rng = mask_rng_](Batch& b) {
      if (b.spatial.size() == 0 || *p <= 0.0) return;
      const Eigen::Index cells = b.spatial.rows() / b.size;
      for (int i = 0; i < b.size; ++i) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(i) * cells;
        b.spatial.middleRows(r0, cells) = mask_spatial(b.spatial.middleRows(r0, cells), *p, *rng);
        if (b.next_spatial.size())
          b.next_spatial.middleRows(r0, cells) =
              mask_spatial(b.next_spatial.middleRows(r0, cells), *p, *rng);
      }
    };
  }

  agent_ = std::make_unique<sac::SacAgent>(std::move(w), action_dim, hp,
                                           Rng::derive_seed(seed, "agent"));
}

void MfController::set_mask_ratio(double p) {
  if (!cfg_.masked_curriculum) throw std::logic_error("mask ratio applies to the masked regime");
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("mask ratio must lie in [0,1]");
  *mask_p_ = p;
}

Batch MfController::obs_batch(const ObservationBundle& obs) const {
  Batch b;
  b.size = 1;
  b.wells = obs.wells.samples;
  if (cfg_.actor_history) b.history = stack_history(obs.history);
  if (cfg_.actor_spatial) {
    if (obs.spatial.channels.size() == 0)
      throw std::invalid_argument("privileged actor requires the spatial stream");
    b.spatial = obs.spatial.channels.transpose();
  }
  return b;
}

Eigen::VectorXd MfController::act(const ObservationBundle& obs, bool deterministic) {
  return agent_->act(obs_batch(obs), deterministic);
}

// ---------------------------------------------------------------------------
// Teacher-student learner

void TSOptions::validate() const {
  if (tau <= 0.0) throw std::invalid_argument("teacher-student: tau must be positive");
  if (beta < 0.0) throw std::invalid_argument("teacher-student: beta must be non-negative");
  if (ramp_end <= ramp_start)
    throw std::invalid_argument("teacher-student: distillation ramp window is empty");
  if (w_final < 0.0) throw std::invalid_argument("teacher-student: w_final must be non-negative");
  if (embed_dim != 64 && embed_dim != 128)
    throw std::invalid_argument("teacher-student: embed_dim must be 64 or 128");
}

TeacherStudentLearner::TeacherStudentLearner(const GridGeometry& grid, int action_dim,
                                             int history_len, const SACHyperparams& hp,
                                             const TSOptions& opt, uint64_t seed)
    : opt_(opt),
      hp_(hp),
      history_len_(history_len),
      pub_enc_(opt.embed_dim, history_len, nets::HistoryEncoder::Mode::add,
               Rng::derive_seed(seed, "pub_enc")),
      head_(opt.embed_dim, action_dim, Rng::derive_seed(seed, "head")),
      dist_(opt.embed_dim, /*teacher_dim=*/64, Rng::derive_seed(seed, "dist")),
      teacher_opt_(hp.critic_lr),
      student_opt_(hp.critic_lr),
      actor_opt_(hp.actor_lr),
      alpha_opt_(hp.alpha_lr),
      rng_(Rng::derive_seed(seed, "ts_eps")) {
  opt_.validate();
  hp_.validate();
  if (history_len < 1) throw std::invalid_argument("teacher-student: history_len must be >= 1");

  t1_ = make_teacher(grid, action_dim, Rng::derive_seed(seed, "t1"), "t1");
  t2_ = make_teacher(grid, action_dim, Rng::derive_seed(seed, "t2"), "t2");
  tt1_ = make_teacher(grid, action_dim, Rng::derive_seed(seed, "tt1"), "tt1");
  tt2_ = make_teacher(grid, action_dim, Rng::derive_seed(seed, "tt2"), "tt2");
  s1_ = make_student(action_dim, Rng::derive_seed(seed, "s1"), "s1");
  s2_ = make_student(action_dim, Rng::derive_seed(seed, "s2"), "s2");
  st1_ = make_student(action_dim, Rng::derive_seed(seed, "st1"), "st1");
  st2_ = make_student(action_dim, Rng::derive_seed(seed, "st2"), "st2");

  append_params(teacher_all_, t1_.params);
  append_params(teacher_all_, t2_.params);
  append_params(teacher_targets_, tt1_.params);
  append_params(teacher_targets_, tt2_.params);
  append_params(student_all_, s1_.params);
  append_params(student_all_, s2_.params);
  append_params(student_targets_, st1_.params);
  append_params(student_targets_, st2_.params);
  ad::copy_params(teacher_all_, teacher_targets_);
  ad::copy_params(student_all_, student_targets_);
  for (auto& p : teacher_targets_) p.var.set_requires_grad(false);
  for (auto& p : student_targets_) p.var.set_requires_grad(false);

  append_params(actor_all_, pub_enc_.params());
  append_params(actor_all_, head_.params());
  append_params(actor_all_, dist_.trainable_params());
  append_params(deployable_, pub_enc_.params());
  append_params(deployable_, head_.params());

  log_alpha_ = ad::param(Matrix::Constant(1, 1, std::log(hp_.init_alpha)));
  alpha_param_.push_back({"ts/log_alpha", log_alpha_});
}

TeacherStudentLearner::TeacherCritic TeacherStudentLearner::make_teacher(
    const GridGeometry& grid, int action_dim, uint64_t seed, const std::string& name) {
  TeacherCritic c;
  c.spatial = std::make_unique<nets::SpatialEncoder>(grid, Rng::derive_seed(seed, name + "/sp"));
  c.hist = std::make_unique<nets::HistoryEncoder>(opt_.embed_dim, history_len_,
                                                  nets::HistoryEncoder::Mode::add,
                                                  Rng::derive_seed(seed, name + "/hist"));
  c.q = std::make_unique<nets::QNet>(64 + opt_.embed_dim, action_dim,
                                     Rng::derive_seed(seed, name + "/q"));
  append_params(c.params, c.spatial->params());
  append_params(c.params, c.hist->params());
  append_params(c.params, c.q->params());
  return c;
}

TeacherStudentLearner::StudentCritic TeacherStudentLearner::make_student(int action_dim,
                                                                         uint64_t seed,
                                                                         const std::string& name) {
  StudentCritic c;
  c.hist = std::make_unique<nets::HistoryEncoder>(opt_.embed_dim, history_len_,
                                                  nets::HistoryEncoder::Mode::add,
                                                  Rng::derive_seed(seed, name + "/hist"));
  c.q = std::make_unique<nets::QNet>(opt_.embed_dim, action_dim,
                                     Rng::derive_seed(seed, name + "/q"));
  append_params(c.params, c.hist->params());
  append_params(c.params, c.q->params());
  return c;
}

ParamList& TeacherStudentLearner::teacher_spatial_params(int i) {
  if (i == 0) return t1_.spatial->params();
  if (i == 1) return t2_.spatial->params();
  throw std::out_of_range("teacher index");
}

double TeacherStudentLearner::alpha() const { return std::exp(log_alpha_.value()(0, 0)); }

Matrix TeacherStudentLearner::draw_eps(int batch, int dim) {
  Matrix eps(batch, dim);
  for (int i = 0; i < batch; ++i)
    for (int j = 0; j < dim; ++j) eps(i, j) = rng_.normal();
  return eps;
}

Var TeacherStudentLearner::teacher_value(const TeacherCritic& c, const Batch& b, bool next,
                                         const Var& action) const {
  Var sp = c.spatial->encode_batch(ad::constant(next ? b.next_spatial : b.spatial), b.size);
  Var h = c.hist->feature_batch(ad::constant(next ? b.next_history : b.history),
                                ad::constant(next ? b.next_wells : b.wells), b.size);
  return (*c.q)(ad::concat_cols({sp, h}), action);
}

Var TeacherStudentLearner::student_value(const StudentCritic& c, const Batch& b, bool next,
                                         const Var& action) const {
  Var h = c.hist->feature_batch(ad::constant(next ? b.next_history : b.history),
                                ad::constant(next ? b.next_wells : b.wells), b.size);
  return (*c.q)(h, action);
}

Var TeacherStudentLearner::public_feature(const Batch& b, bool next) const {
  return pub_enc_.feature_batch(ad::constant(next ? b.next_history : b.history),
                                ad::constant(next ? b.next_wells : b.wells), b.size);
}

Batch TeacherStudentLearner::obs_batch(const ObservationBundle& obs) const {
  Batch b;
  b.size = 1;
  b.wells = obs.wells.samples;
  b.history = stack_history(obs.history);
  return b;
}

Eigen::VectorXd TeacherStudentLearner::act(const ObservationBundle& obs, bool deterministic) {
  Batch b = obs_batch(obs);
  Var phi = public_feature(b, false);
  if (deterministic) return head_.deterministic(phi).value().row(0).transpose();
  auto smp = head_.sample(phi, draw_eps(1, head_.action_dim()));
  return smp.action.value().row(0).transpose();
}

TSUpdateReport TeacherStudentLearner::update(ReplayBuffer& buffer, double epoch) {
  if (buffer.size() == 0) {
    if (!warned_empty_) {
      std::cerr << "[teacher-student] update skipped: replay buffer is empty\n";
      warned_empty_ = true;
    }
    TSUpdateReport rep;
    rep.skipped = true;
    return rep;
  }
  auto refs = buffer.sample(hp_.batch_size);
  return update_batch(sac::assemble_batch(refs, history_len_, /*want_spatial=*/true), epoch);
}

TSUpdateReport TeacherStudentLearner::update_batch(Batch batch, double epoch) {
  const int B = batch.size;
  const int adim = head_.action_dim();
  TSUpdateReport rep;
  const double alpha_now = alpha();
  rep.w_dist = distill_weight(epoch, opt_.ramp_start, opt_.ramp_end, opt_.w_final);

  // privileged TD target from the target teacher critics and the public actor
  Eigen::VectorXd y;
  {
    Var next_phi = public_feature(batch, true);
    auto next_smp = head_.sample(next_phi, draw_eps(B, adim));
    Var q1n = teacher_value(tt1_, batch, true, next_smp.action);
    Var q2n = teacher_value(tt2_, batch, true, next_smp.action);
    y = sac::critic_td_target(batch.rewards, batch.done, q1n.value().col(0), q2n.value().col(0),
                              next_smp.log_prob.value().col(0), alpha_now, hp_.gamma);
  }

  Var act_c = ad::constant(batch.actions);

  // (1) teacher critics on the privileged observation
  Var q1t = teacher_value(t1_, batch, false, act_c);
  Var q2t = teacher_value(t2_, batch, false, act_c);
  {
    Var loss = sac::critic_loss(q1t, q2t, y);
    ad::backward(loss);
    teacher_opt_.step(teacher_all_);
  }

  // (2) student critics regress to the same privileged target from public inputs
  Var q1s = student_value(s1_, batch, false, act_c);
  Var q2s = student_value(s2_, batch, false, act_c);
  {
    Var loss = sac::critic_loss(q1s, q2s, y);
    ad::backward(loss);
    student_opt_.step(student_all_);
  }

  // (3) actor through the freshly-regressed (and frozen) student critics,
  // plus the distillation terms; all reported values come from one bundle
  {
    ad::FreezeGuard freeze(student_all_);
    Var phi = public_feature(batch, false);
    auto smp = head_.sample(phi, draw_eps(B, adim));
    Var q1p = student_value(s1_, batch, false, smp.action);
    Var q2p = student_value(s2_, batch, false, smp.action);

    // teacher latent from the first critic's spatial branch, detached
    const Matrix z_teach = t1_.spatial->encode_batch(ad::constant(batch.spatial), B).value();
    Var nce = infonce_loss(phi, z_teach, dist_, opt_.tau);
    const Eigen::VectorXd v_target =
        q1p.value().col(0).cwiseMin(q2p.value().col(0));  // detached student-side estimate
    Var val = value_alignment_loss(dist_.value_head(phi), v_target);

    TSLossBundle bundle = combine_ts_losses(q1t, q2t, y, q1s, q2s, q1p, q2p, smp.log_prob, nce,
                                            val, alpha_now, rep.w_dist, opt_.beta);
    rep.teacher_critic_loss = bundle.teacher_loss.scalar();
    rep.student_critic_loss = bundle.student_loss.scalar();
    rep.actor_loss = bundle.actor_loss.scalar();
    rep.nce_loss = bundle.nce.scalar();
    rep.value_loss = bundle.value.scalar();
    rep.total_actor_loss = bundle.total_actor.scalar();
    rep.mean_entropy = -smp.log_prob.value().mean();
    ad::backward(bundle.total_actor);
    actor_opt_.step(actor_all_);

    Var aloss = sac::alpha_loss(log_alpha_, smp.log_prob.value().col(0), hp_.target_entropy);
    rep.alpha_loss = aloss.scalar();
    ad::backward(aloss);
    alpha_opt_.step(alpha_param_);
  }

  ad::polyak_params(teacher_all_, teacher_targets_, hp_.polyak);
  ad::polyak_params(student_all_, student_targets_, hp_.polyak);
  rep.alpha = alpha();
  return rep;
}

// ---------------------------------------------------------------------------
// Evaluation and training loop

EvalTrace evaluate_policy(Env& env,
                          const std::function<Eigen::VectorXd(const ObservationBundle&)>& actor,
                          int episodes) {
  if (episodes < 1) throw std::invalid_argument("evaluate_policy: episodes must be >= 1");
  EvalTrace trace;
  for (int e = 0; e < episodes; ++e) {
    ObservationBundle obs = env.reset();
    double total = 0.0;
    std::vector<Eigen::VectorXd> actions;
    std::vector<double> rewards;
    while (!env.done()) {
      Eigen::VectorXd a = actor(obs);
      StepResult res = env.step(a);
      total += res.reward;
      actions.push_back(std::move(a));
      rewards.push_back(res.reward);
      obs = std::move(res.obs);
    }
    trace.returns.push_back(total);
    if (e == episodes - 1) {
      trace.actions = Matrix(static_cast<Eigen::Index>(actions.size()),
                             actions.empty() ? 0 : actions.front().size());
      trace.rewards = Eigen::VectorXd(static_cast<Eigen::Index>(rewards.size()));
      for (size_t i = 0; i < actions.size(); ++i) {
        trace.actions.row(static_cast<Eigen::Index>(i)) = actions[i].transpose();
        trace.rewards[static_cast<Eigen::Index>(i)] = rewards[i];
      }
    }
  }
  for (const double r : trace.returns) trace.mean_return += r;
  trace.mean_return /= static_cast<double>(trace.returns.size());
  return trace;
}

void MfTrainConfig::validate() const {
  if (epochs < 1 || steps_per_epoch < 1)
    throw std::invalid_argument("training: epochs and steps_per_epoch must be >= 1");
  if (eval_episodes < 1) throw std::invalid_argument("training: eval_episodes must be >= 1");
  if (replay_capacity < 1) throw std::invalid_argument("training: replay_capacity must be >= 1");
  hp.validate();
  curriculum.validate();
  ts.validate();
}

std::vector<MfEpochRow> train_model_free(
    Regime regime, const std::vector<Env*>& train_envs, Env& eval_env, const GridGeometry& grid,
    const MfTrainConfig& cfg, const std::function<void(const MfEpochRow&)>& on_epoch) {
  cfg.validate();
  if (train_envs.empty())
    throw std::invalid_argument("training requires at least one training environment");
  const int adim = static_cast<int>(eval_env.sim().wells().size());
  const int history_len = eval_env.config().history_length;
  const RegimeConfig rc = regime_config(regime, history_len);
  const bool is_ts = regime == Regime::teacher_student;
  const bool store_spatial = rc.critic_spatial || rc.actor_spatial;
  const bool masked = regime == Regime::masked_critic;

  std::unique_ptr<MfController> ctrl;
  std::unique_ptr<TeacherStudentLearner> ts;
  if (is_ts)
    ts = std::make_unique<TeacherStudentLearner>(grid, adim, history_len, cfg.hp, cfg.ts,
                                                 Rng::derive_seed(cfg.seed, "learner"));
  else
    ctrl = std::make_unique<MfController>(rc, grid, adim, cfg.hp,
                                          Rng::derive_seed(cfg.seed, "learner"));
  auto act = [&](const ObservationBundle& o, bool det) {
    return is_ts ? ts->act(o, det) : ctrl->act(o, det);
  };

  ReplayBuffer buffer(cfg.replay_capacity, Rng::derive_seed(cfg.seed, "replay"));
  Rng pick(Rng::derive_seed(cfg.seed, "realizations"));
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  std::vector<MfEpochRow> rows;
  double update_accumulator = 0.0;
  bool pre_ft_saved = false;

  for (int e = 0; e < cfg.epochs; ++e) {
    MfEpochRow row;
    row.epoch = e;
    if (masked) {
      if (cfg.curriculum.boundary(e)) buffer.reset();
      row.p = cfg.curriculum.ratio_at(e);
      ctrl->set_mask_ratio(row.p);
    }
    const double paper_epoch = static_cast<double>(e) + 1.0;
    if (is_ts)
      row.w_dist = distill_weight(paper_epoch, cfg.ts.ramp_start, cfg.ts.ramp_end, cfg.ts.w_final);

    double critic_sum = 0.0, actor_sum = 0.0, entropy_sum = 0.0;
    while (row.env_steps < cfg.steps_per_epoch) {
      Env& env = *train_envs[pick.uniform_index(train_envs.size())];
      ObservationBundle obs = env.reset();
      sac::EpisodeRecord rec;
      rec.wells.push_back(obs.wells.samples);
      if (store_spatial) rec.spatial.push_back(obs.spatial.channels.transpose());
      std::vector<Eigen::VectorXd> actions;
      std::vector<double> rewards;
      while (!env.done()) {
        Eigen::VectorXd a = act(obs, /*det=*/false);
        StepResult res = env.step(a);
        actions.push_back(std::move(a));
        rewards.push_back(res.reward);
        rec.wells.push_back(res.obs.wells.samples);
        if (store_spatial) rec.spatial.push_back(res.obs.spatial.channels.transpose());
        obs = std::move(res.obs);
        ++row.env_steps;
        update_accumulator += cfg.hp.updates_per_env_step;
        while (update_accumulator >= 1.0) {
          update_accumulator -= 1.0;
          if (is_ts) {
            TSUpdateReport r = ts->update(buffer, paper_epoch);
            if (r.skipped) continue;
            critic_sum += r.student_critic_loss;
            actor_sum += r.total_actor_loss;
            entropy_sum += r.mean_entropy;
            ++row.updates;
          } else {
            sac::UpdateReport r = ctrl->update(buffer);
            if (r.skipped) continue;
            critic_sum += r.critic_loss;
            actor_sum += r.actor_loss;
            entropy_sum += r.mean_entropy;
            ++row.updates;
          }
        }
      }
      rec.actions = Matrix(static_cast<Eigen::Index>(actions.size()), adim);
      rec.rewards = Eigen::VectorXd(static_cast<Eigen::Index>(rewards.size()));
      for (size_t i = 0; i < actions.size(); ++i) {
        rec.actions.row(static_cast<Eigen::Index>(i)) = actions[i].transpose();
        rec.rewards[static_cast<Eigen::Index>(i)] = rewards[i];
      }
      buffer.push(std::move(rec));
      ++row.episodes;
    }
    if (row.updates > 0) {
      row.critic_loss = critic_sum / row.updates;
      row.actor_loss = actor_sum / row.updates;
      row.entropy = entropy_sum / row.updates;
    }
    row.alpha = is_ts ? ts->alpha() : ctrl->agent().alpha();

    EvalTrace trace =
        evaluate_policy(eval_env, [&](const ObservationBundle& o) { return act(o, true); },
                        cfg.eval_episodes);
    row.eval_return = trace.mean_return;
    rows.push_back(row);
    if (on_epoch) on_epoch(row);

    // the pre-finetuning encoder is the last checkpoint untouched by the
    // distillation ramp
    if (is_ts && !cfg.checkpoint_dir.empty() && !pre_ft_saved) {
      const double w_next =
          distill_weight(paper_epoch + 1.0, cfg.ts.ramp_start, cfg.ts.ramp_end, cfg.ts.w_final);
      if (row.w_dist == 0.0 && (w_next > 0.0 || e == cfg.epochs - 1)) {
        nets::save_checkpoint(cfg.checkpoint_dir + "/ts_encoder_pre_ft.ckpt",
                              ts->public_encoder().params());
        pre_ft_saved = true;
      }
    }
  }

  if (!cfg.checkpoint_dir.empty()) {
    if (is_ts) {
      nets::save_checkpoint(cfg.checkpoint_dir + "/ts_encoder_post_ft.ckpt",
                            ts->public_encoder().params());
      nets::save_checkpoint(cfg.checkpoint_dir + "/ts_policy.ckpt", ts->policy().params());
      if (!pre_ft_saved)
        nets::save_checkpoint(cfg.checkpoint_dir + "/ts_encoder_pre_ft.ckpt",
                              ts->public_encoder().params());
    } else {
      nets::save_checkpoint(cfg.checkpoint_dir + "/" + regime_name(regime) + "_actor.ckpt",
                            ctrl->deployable_params());
    }
  }
  return rows;
}

}  // namespace ccs::variants
