#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ccs/nets.hpp"

namespace ccs::wm {

using ad::Matrix;
using ad::ParamList;
using ad::Var;

// ---------------------------------------------------------------------------
// Latent transition data

// One episode of latent transitions produced by the frozen public encoder:
// z holds T+1 rows (index 0 is the reset state), actions/rewards hold T rows.
struct LatentEpisode {
  Matrix z;            // (T+1) x d
  Matrix a;            // T x action_dim
  Eigen::VectorXd r;   // T

  int length() const { return static_cast<int>(r.size()); }
  void validate() const;
};

// Episode-structured dataset with a provenance stamp of the encoder that
// produced it. Persisted as a flat binary array with a schema header
// (dims, action dim, episode count, encoder hash).
struct LatentDataset {
  int latent_dim = 0;
  int action_dim = 0;
  uint64_t encoder_hash = 0;
  std::vector<LatentEpisode> episodes;

  int64_t transitions() const;
  void push(LatentEpisode ep);  // validates dims against the dataset schema
  void save(const std::string& path) const;
  static LatentDataset load(const std::string& path);  // throws on mismatch

  // Episode-level random split: (train, holdout).
  std::pair<LatentDataset, LatentDataset> split(double holdout_fraction, Rng& rng) const;
};

// Uniform one-step transitions (Koopman training, adapters, linear fits).
struct TransitionBatch {
  int size = 0;
  Matrix z, a, z_next;  // size x {d, adim, d}
  Eigen::VectorXd r;
};

// Fixed-length windows for recurrent training: z has window+1 entries of
// B x d (targets are z[t+1]), actions/rewards have window entries.
struct SequenceBatch {
  int batch = 0;
  int window = 0;
  std::vector<Matrix> z;
  std::vector<Matrix> a;
  std::vector<Eigen::VectorXd> r;
};

TransitionBatch sample_transitions(const LatentDataset& data, int batch, Rng& rng);
TransitionBatch all_transitions(const LatentDataset& data);
// Windows lie fully inside one episode; episodes shorter than the window are
// skipped. Throws if no episode is long enough.
SequenceBatch sample_sequences(const LatentDataset& data, int batch, int window, Rng& rng);

// ---------------------------------------------------------------------------
// Shared probabilistic pieces

// Diagonal-Gaussian negative log-likelihood, summed over dimensions:
// one row per sample, 0.5 * sum_j [log(2*pi) + 2*log(sigma_j) + err_j^2/sigma_j^2].
Var gaussian_nll_rows(const Var& mu, const Var& sigma, const Var& target);

// Analytic KL between diagonal Gaussians, summed over dimensions, per row.
Var kl_diag_rows(const Var& mu_q, const Var& sigma_q, const Var& mu_p, const Var& sigma_p);

// Balanced KL: balance * KL(sg(q) || p) + (1-balance) * KL(q || sg(p)),
// averaged over rows. The two halves share one value; the balance decides
// how the gradient splits between posterior and prior.
Var balanced_kl(const Var& mu_q, const Var& sigma_q, const Var& mu_p, const Var& sigma_p,
                double balance);

// Minimal gated recurrent cell (update/reset gates, candidate state).
class GruCell {
 public:
  GruCell() = default;
  GruCell(int input_dim, int hidden_dim, Rng& rng, ParamList& reg, const std::string& name);
  Var operator()(const Var& x, const Var& h) const;  // B x hidden
  int hidden_dim() const { return hidden_; }

 private:
  int hidden_ = 0;
  nets::Linear wr_, ur_, wu_, uu_, wc_, uc_;
};

// Ridge-regularized least-squares map Z -> F (returns d x m); used to fit
// the frozen geometric decoder once on (latent, coarse field) pairs.
Matrix fit_linear_decoder(const Matrix& Z, const Matrix& F, double ridge = 1e-6);

// ---------------------------------------------------------------------------
// Backbone interface

// Loss components: total carries the graph; the populated scalar fields
// depend on the backbone kind.
struct WmLoss {
  Var total;
  double nll = 0.0;
  double reward_mse = 0.0;
  double geo = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double latent_mse = 0.0;
  double residual_penalty = 0.0;
};

// One imagined step at graph level. context carries recurrent state between
// steps (a 0x0 constant for one-step models).
struct VarStep {
  Var z_next;   // B x d (sample when rng given, predictive mean otherwise)
  Var reward;   // B x 1
  Var context;  // next recurrent context
};

class LatentModel {
 public:
  virtual ~LatentModel() = default;

  virtual std::string kind() const = 0;
  virtual int latent_dim() const = 0;
  virtual int action_dim() const = 0;

  // Initial rollout context (zeros; 0x0 for context-free models).
  virtual Var context0(int batch) const;

  // One step of the latent dynamics. rng == nullptr -> deterministic mean.
  virtual VarStep step(const Var& context, const Var& z, const Var& a, Rng* rng) const = 0;

  // Training loss on a minibatch the backbone samples in its own shape.
  virtual WmLoss sample_loss(const LatentDataset& data, int batch, int window,
                             Rng& rng) const = 0;

  // Deterministic full-pass loss over a dataset (held-out monitoring).
  virtual double dataset_loss(const LatentDataset& data, int window, Rng& rng) const = 0;

  // Hook run once before gradient training (closed-form warm starts).
  virtual void warm_start(const LatentDataset& data) {}

  virtual ParamList& params() = 0;
  uint64_t params_hash();

  // Value-level one-step prediction from a stationary (fresh) context.
  std::pair<Eigen::VectorXd, double> predict(const Eigen::VectorXd& z, const Eigen::VectorXd& a,
                                             Rng* rng) const;
};

// ---------------------------------------------------------------------------
// Backbones

struct GruOptions {
  int hidden = 128;
  double sigma_floor = 1e-3;
};

// Probabilistic recurrent model: h' = GRU([z,a],h), z' ~ N(mu(h'), sigma(h')^2)
// with a deterministic reward estimate r(h').
class GruWM : public LatentModel {
 public:
  GruWM(int latent_dim, int action_dim, const GruOptions& opt, uint64_t seed);

  struct StepDist {
    Var mu, sigma;  // B x d
    Var reward;     // B x 1
    Var h;          // B x hidden
  };
  StepDist forward(const Var& h, const Var& z, const Var& a) const;

  // Sequence loss: mean-per-sample Gaussian NLL of the next latent plus the
  // reward MSE, averaged over batch and window.
  WmLoss loss(const SequenceBatch& batch) const;

  std::string kind() const override { return "gru"; }
  int latent_dim() const override { return d_; }
  int action_dim() const override { return adim_; }
  Var context0(int batch) const override;
  VarStep step(const Var& context, const Var& z, const Var& a, Rng* rng) const override;
  WmLoss sample_loss(const LatentDataset& data, int batch, int window, Rng& rng) const override;
  double dataset_loss(const LatentDataset& data, int window, Rng& rng) const override;
  ParamList& params() override { return params_; }

  const GruOptions& options() const { return opt_; }

 private:
  int d_, adim_;
  GruOptions opt_;
  GruCell cell_;
  nets::Linear mu_, sigma_raw_, reward_;
  ParamList params_;
};

// Geometrically weighted variant: the same recurrent core plus a penalty on
// the decoded effect of the mean prediction error, ||(mu - z') * D||^2,
// through a frozen linear decoder D.
class GeoGruWM : public LatentModel {
 public:
  // decoder: d x m, trained once and frozen (enters the graph as a constant).
  GeoGruWM(int latent_dim, int action_dim, const GruOptions& opt, Matrix decoder,
           double lambda_g, uint64_t seed);

  WmLoss loss(const SequenceBatch& batch) const;

  std::string kind() const override { return "geo_gru"; }
  int latent_dim() const override { return gru_.latent_dim(); }
  int action_dim() const override { return gru_.action_dim(); }
  Var context0(int batch) const override { return gru_.context0(batch); }
  VarStep step(const Var& context, const Var& z, const Var& a, Rng* rng) const override {
    return gru_.step(context, z, a, rng);
  }
  WmLoss sample_loss(const LatentDataset& data, int batch, int window, Rng& rng) const override;
  double dataset_loss(const LatentDataset& data, int window, Rng& rng) const override;
  ParamList& params() override { return gru_.params(); }

  GruWM& core() { return gru_; }
  const Matrix& decoder() const { return decoder_; }
  double lambda_g() const { return lambda_g_; }

 private:
  GruWM gru_;
  Matrix decoder_;
  double lambda_g_;
};

struct RssmOptions {
  int hidden = 128;
  int stoch = 32;
  double sigma_floor = 1e-3;
  double beta_kl = 1.0;
  double kl_balance = 0.8;  // gradient share toward training the prior
};

// Recurrent state-space model: deterministic state h' = GRU([z,a],h), prior
// p(s|h'), posterior q(s|h',z'), diagonal-Gaussian reconstruction of z' from
// (h',s), reward from (h',s); trained with reconstruction NLL + balanced KL.
class RssmWM : public LatentModel {
 public:
  RssmWM(int latent_dim, int action_dim, const RssmOptions& opt, uint64_t seed);

  struct Dists {
    Var h;                     // B x hidden
    Var mu_p, sigma_p;         // prior over the stochastic state
    Var mu_q, sigma_q;         // posterior (empty Vars when z_next not given)
  };
  Dists forward(const Var& h, const Var& z, const Var& a, const Var* z_next) const;
  Var decode_mu(const Var& h, const Var& s) const;     // B x d
  Var decode_sigma(const Var& h, const Var& s) const;  // B x d
  Var reward_head(const Var& h, const Var& s) const;   // B x 1

  WmLoss loss(const SequenceBatch& batch, Rng& rng) const;

  std::string kind() const override { return "rssm"; }
  int latent_dim() const override { return d_; }
  int action_dim() const override { return adim_; }
  Var context0(int batch) const override;
  VarStep step(const Var& context, const Var& z, const Var& a, Rng* rng) const override;
  WmLoss sample_loss(const LatentDataset& data, int batch, int window, Rng& rng) const override;
  double dataset_loss(const LatentDataset& data, int window, Rng& rng) const override;
  ParamList& params() override { return params_; }

  const RssmOptions& options() const { return opt_; }

 private:
  int d_, adim_;
  RssmOptions opt_;
  GruCell cell_;
  nets::Linear prior_mu_, prior_sigma_, post_mu_, post_sigma_;
  nets::Linear dec_mu_, dec_sigma_, reward_;
  ParamList params_;

  Var floor_sigma(const Var& raw) const;
};

struct KoopmanOptions {
  double lambda_r = 1e-2;  // residual magnitude penalty
  int residual_hidden = 128;
};

// Controlled-linear model z' = A z + B a + eps(z,a) with a deterministic
// reward head; the residual network's output layer starts at zero so the
// model begins exactly at its linear part.
class KoopmanWM : public LatentModel {
 public:
  KoopmanWM(int latent_dim, int action_dim, const KoopmanOptions& opt, uint64_t seed);

  // Closed-form ridge least squares for A and B on one-step data.
  void fit_linear(const TransitionBatch& data, double ridge = 1e-8);

  // One-step loss: mean squared next-latent error (summed over dimensions)
  // + reward MSE + lambda_r * mean ||eps||^2.
  WmLoss loss(const TransitionBatch& batch) const;

  Var residual(const Var& z, const Var& a) const;  // B x d

  std::string kind() const override { return "koopman"; }
  int latent_dim() const override { return d_; }
  int action_dim() const override { return adim_; }
  VarStep step(const Var& context, const Var& z, const Var& a, Rng* rng) const override;
  WmLoss sample_loss(const LatentDataset& data, int batch, int window, Rng& rng) const override;
  double dataset_loss(const LatentDataset& data, int window, Rng& rng) const override;
  void warm_start(const LatentDataset& data) override;
  ParamList& params() override { return params_; }

  Matrix A() const { return At_.value().transpose(); }
  Matrix B() const { return Bt_.value().transpose(); }
  const KoopmanOptions& options() const { return opt_; }

 private:
  int d_, adim_;
  KoopmanOptions opt_;
  // Row-form linear maps (z' = z * At + a * Bt), i.e. A^T and B^T.
  Var At_, Bt_;
  nets::Linear e1_, e2_, eo_;  // residual (zero-init output)
  nets::Linear r1_, r2_, ro_;  // reward head
  ParamList params_;
};

// ---------------------------------------------------------------------------
// Residual adapters for abnormal regimes

// Additive corrections (delta_z, delta_r) on top of a frozen nominal model;
// both output layers start at zero, so an unfitted adapter is the identity
// correction.
class ResidualAdapter {
 public:
  ResidualAdapter(int latent_dim, int action_dim, uint64_t seed, int hidden = 128);

  Var delta_z(const Var& z, const Var& a) const;  // B x d
  Var delta_r(const Var& z, const Var& a) const;  // B x 1

  int latent_dim() const { return d_; }
  int action_dim() const { return adim_; }
  ParamList& params() { return params_; }

 private:
  int d_, adim_;
  nets::Linear z1_, z2_, zo_, r1_, r2_, ro_;
  ParamList params_;
};

struct AdapterFitOptions {
  int min_transitions = 64;  // refuse smaller datasets
  int epochs = 40;
  int batch = 32;
  double lr = 1e-3;
  double holdout_fraction = 0.25;
  uint64_t seed = 1;
};

struct AdapterFitReport {
  int used_transitions = 0;
  // held-out mean squared one-step errors, before and after correction
  double nominal_latent_err = 0.0, corrected_latent_err = 0.0;
  double nominal_reward_err = 0.0, corrected_reward_err = 0.0;
  uint64_t nominal_hash_before = 0, nominal_hash_after = 0;
};

// Fits the adapter to the residuals of the frozen nominal model's mean
// one-step predictions on abnormal tuples. The nominal model's parameters
// never enter the training graph.
AdapterFitReport fit_residual_adapter(ResidualAdapter& adapter, LatentModel& nominal,
                                      const LatentDataset& abnormal,
                                      const AdapterFitOptions& opt);

// Frozen nominal model plus additive adapter, exposed as a LatentModel so
// imagination code is agnostic to correction. Freezes the nominal
// parameters permanently at construction.
class CorrectedModel : public LatentModel {
 public:
  CorrectedModel(std::shared_ptr<LatentModel> nominal, std::shared_ptr<ResidualAdapter> adapter);

  std::string kind() const override;
  int latent_dim() const override { return nominal_->latent_dim(); }
  int action_dim() const override { return nominal_->action_dim(); }
  Var context0(int batch) const override { return nominal_->context0(batch); }
  VarStep step(const Var& context, const Var& z, const Var& a, Rng* rng) const override;
  // One-step corrected regression loss (latent + reward MSE).
  WmLoss sample_loss(const LatentDataset& data, int batch, int window, Rng& rng) const override;
  double dataset_loss(const LatentDataset& data, int window, Rng& rng) const override;
  ParamList& params() override { return adapter_->params(); }  // trainable surface

  LatentModel& nominal() { return *nominal_; }
  ResidualAdapter& adapter() { return *adapter_; }

 private:
  std::shared_ptr<LatentModel> nominal_;
  std::shared_ptr<ResidualAdapter> adapter_;
};

// ---------------------------------------------------------------------------
// Ensembles and factory

struct WmConfig {
  std::string kind = "gru";  // gru | geo_gru | rssm | koopman
  int latent_dim = 128;
  int action_dim = 11;
  GruOptions gru;
  RssmOptions rssm;
  KoopmanOptions koopman;
  double lambda_g = 1.0;
  Matrix geo_decoder;  // d x m; empty -> identity

  void validate() const;
};

std::shared_ptr<LatentModel> make_model(const WmConfig& cfg, uint64_t seed);

// Fixed-size ensemble of one backbone kind; imagined next states come from
// one uniformly chosen member.
class WmEnsemble {
 public:
  explicit WmEnsemble(std::vector<std::shared_ptr<LatentModel>> members);

  int size() const { return static_cast<int>(members_.size()); }
  LatentModel& member(int i) { return *members_.at(static_cast<size_t>(i)); }
  std::shared_ptr<LatentModel> member_ptr(int i) { return members_.at(static_cast<size_t>(i)); }

  int pick(Rng& rng) const;  // uniform member index

  // Spec-shaped single step: choose a member uniformly, then one stochastic
  // step from a stationary context.
  std::pair<Eigen::VectorXd, double> imagine_step(const Eigen::VectorXd& z,
                                                  const Eigen::VectorXd& a, Rng& rng);

 private:
  std::vector<std::shared_ptr<LatentModel>> members_;
};

WmEnsemble make_ensemble(const WmConfig& cfg, int size, uint64_t seed);

// ---------------------------------------------------------------------------
// Offline pretraining

struct WmTrainConfig {
  int epochs = 20;
  int batches_per_epoch = 50;
  int batch = 32;
  int window = 10;
  double lr = 1e-3;
  double holdout_fraction = 0.2;
  uint64_t seed = 1;

  void validate() const;
};

struct WmEpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double holdout_loss = 0.0;
};

// Splits off a held-out set, runs the backbone's warm start, then Adam on
// the backbone's own minibatch shape; holdout loss is a deterministic full
// pass per epoch.
std::vector<WmEpochRow> pretrain(LatentModel& model, const LatentDataset& data,
                                 const WmTrainConfig& cfg);

}  // namespace ccs::wm
