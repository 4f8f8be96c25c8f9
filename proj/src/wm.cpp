#include "ccs/wm.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ccs::wm {

namespace {

constexpr uint64_t kDatasetMagic = 0x4c41544e54445331ull;  // "LATNTDS1"
constexpr uint64_t kDatasetVersion = 1;

const double kLog2Pi = std::log(2.0 * M_PI);

Matrix randn(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

// Non-overlapping (episode, start) windows covering every episode that is at
// least one window long; the deterministic enumeration behind dataset_loss.
std::vector<std::pair<int, int>> enumerate_windows(const LatentDataset& data, int window) {
  std::vector<std::pair<int, int>> out;
  for (size_t e = 0; e < data.episodes.size(); ++e) {
    const int T = data.episodes[e].length();
    for (int s = 0; s + window <= T; s += window) out.emplace_back(static_cast<int>(e), s);
  }
  return out;
}

SequenceBatch gather_windows(const LatentDataset& data, const std::vector<std::pair<int, int>>& wins,
                             size_t lo, size_t hi, int window) {
  SequenceBatch b;
  b.batch = static_cast<int>(hi - lo);
  b.window = window;
  b.z.assign(static_cast<size_t>(window) + 1, Matrix(b.batch, data.latent_dim));
  b.a.assign(static_cast<size_t>(window), Matrix(b.batch, data.action_dim));
  b.r.assign(static_cast<size_t>(window), Eigen::VectorXd(b.batch));
  for (size_t i = lo; i < hi; ++i) {
    const auto& [e, s] = wins[i];
    const LatentEpisode& ep = data.episodes[static_cast<size_t>(e)];
    const int row = static_cast<int>(i - lo);
    for (int k = 0; k <= window; ++k) b.z[static_cast<size_t>(k)].row(row) = ep.z.row(s + k);
    for (int k = 0; k < window; ++k) {
      b.a[static_cast<size_t>(k)].row(row) = ep.a.row(s + k);
      b.r[static_cast<size_t>(k)](row) = ep.r(s + k);
    }
  }
  return b;
}

template <typename LossTotal>
double window_dataset_loss(const LatentDataset& data, int window, LossTotal&& loss_total) {
  if (window < 1) throw std::invalid_argument("dataset loss: window must be positive");
  const auto wins = enumerate_windows(data, window);
  if (wins.empty())
    throw std::invalid_argument("dataset loss: no episode is at least one window long");
  constexpr size_t kChunk = 64;
  double acc = 0.0;
  for (size_t lo = 0; lo < wins.size(); lo += kChunk) {
    const size_t hi = std::min(lo + kChunk, wins.size());
    acc += loss_total(gather_windows(data, wins, lo, hi, window)) * static_cast<double>(hi - lo);
  }
  return acc / static_cast<double>(wins.size());
}

TransitionBatch slice_transitions(const TransitionBatch& src, int lo, int n) {
  TransitionBatch out;
  out.size = n;
  out.z = src.z.middleRows(lo, n);
  out.a = src.a.middleRows(lo, n);
  out.z_next = src.z_next.middleRows(lo, n);
  out.r = src.r.segment(lo, n);
  return out;
}

TransitionBatch gather_transitions(const TransitionBatch& src, const std::vector<int>& rows) {
  TransitionBatch out;
  out.size = static_cast<int>(rows.size());
  out.z.resize(out.size, src.z.cols());
  out.a.resize(out.size, src.a.cols());
  out.z_next.resize(out.size, src.z_next.cols());
  out.r.resize(out.size);
  for (int i = 0; i < out.size; ++i) {
    out.z.row(i) = src.z.row(rows[static_cast<size_t>(i)]);
    out.a.row(i) = src.a.row(rows[static_cast<size_t>(i)]);
    out.z_next.row(i) = src.z_next.row(rows[static_cast<size_t>(i)]);
    out.r(i) = src.r(rows[static_cast<size_t>(i)]);
  }
  return out;
}

template <typename LossTotal>
double transition_dataset_loss(const LatentDataset& data, LossTotal&& loss_total) {
  const TransitionBatch all = all_transitions(data);
  if (all.size == 0) throw std::invalid_argument("dataset loss: empty dataset");
  constexpr int kChunk = 256;
  double acc = 0.0;
  for (int lo = 0; lo < all.size; lo += kChunk) {
    const int n = std::min(kChunk, all.size - lo);
    acc += loss_total(slice_transitions(all, lo, n)) * n;
  }
  return acc / all.size;
}

void put_bytes(std::ofstream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void get_bytes(std::ifstream& in, void* p, size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("latent dataset: truncated file");
}

}  // namespace

// ---------------------------------------------------------------------------
// Latent transition data

void LatentEpisode::validate() const {
  const int T = length();
  if (T < 1) throw std::invalid_argument("latent episode: needs at least one transition");
  if (z.rows() != T + 1)
    throw std::invalid_argument("latent episode: latent states must have T+1 rows");
  if (a.rows() != T) throw std::invalid_argument("latent episode: actions must have T rows");
  if (z.cols() < 1 || a.cols() < 1)
    throw std::invalid_argument("latent episode: empty latent or action dimension");
  if (!z.allFinite() || !a.allFinite() || !r.allFinite())
    throw std::invalid_argument("latent episode: non-finite values");
}

int64_t LatentDataset::transitions() const {
  int64_t n = 0;
  for (const auto& ep : episodes) n += ep.length();
  return n;
}

void LatentDataset::push(LatentEpisode ep) {
  ep.validate();
  if (episodes.empty() && latent_dim == 0 && action_dim == 0) {
    latent_dim = static_cast<int>(ep.z.cols());
    action_dim = static_cast<int>(ep.a.cols());
  }
  if (ep.z.cols() != latent_dim || ep.a.cols() != action_dim)
    throw std::invalid_argument("latent dataset: episode shape does not match the schema");
  episodes.push_back(std::move(ep));
}

void LatentDataset::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("latent dataset: cannot open for writing: " + path);
  const uint64_t magic = kDatasetMagic, version = kDatasetVersion;
  const int32_t d = latent_dim, adim = action_dim;
  const uint64_t count = episodes.size();
  put_bytes(out, &magic, sizeof magic);
  put_bytes(out, &version, sizeof version);
  put_bytes(out, &d, sizeof d);
  put_bytes(out, &adim, sizeof adim);
  put_bytes(out, &encoder_hash, sizeof encoder_hash);
  put_bytes(out, &count, sizeof count);
  for (const auto& ep : episodes) {
    const int32_t T = ep.length();
    put_bytes(out, &T, sizeof T);
    put_bytes(out, ep.z.data(), sizeof(double) * static_cast<size_t>(ep.z.size()));
    put_bytes(out, ep.a.data(), sizeof(double) * static_cast<size_t>(ep.a.size()));
    put_bytes(out, ep.r.data(), sizeof(double) * static_cast<size_t>(ep.r.size()));
  }
  out.flush();
  if (!out) throw std::runtime_error("latent dataset: write failed: " + path);
}

LatentDataset LatentDataset::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("latent dataset: cannot open: " + path);
  uint64_t magic = 0, version = 0, count = 0;
  int32_t d = 0, adim = 0;
  get_bytes(in, &magic, sizeof magic);
  get_bytes(in, &version, sizeof version);
  if (magic != kDatasetMagic || version != kDatasetVersion)
    throw std::runtime_error("latent dataset: unrecognized file format: " + path);
  get_bytes(in, &d, sizeof d);
  get_bytes(in, &adim, sizeof adim);
  LatentDataset data;
  data.latent_dim = d;
  data.action_dim = adim;
  get_bytes(in, &data.encoder_hash, sizeof data.encoder_hash);
  get_bytes(in, &count, sizeof count);
  if (d < 1 || adim < 1) throw std::runtime_error("latent dataset: corrupt schema header: " + path);
  data.episodes.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    int32_t T = 0;
    get_bytes(in, &T, sizeof T);
    if (T < 1) throw std::runtime_error("latent dataset: corrupt episode header: " + path);
    LatentEpisode ep;
    ep.z.resize(T + 1, d);
    ep.a.resize(T, adim);
    ep.r.resize(T);
    get_bytes(in, ep.z.data(), sizeof(double) * static_cast<size_t>(ep.z.size()));
    get_bytes(in, ep.a.data(), sizeof(double) * static_cast<size_t>(ep.a.size()));
    get_bytes(in, ep.r.data(), sizeof(double) * static_cast<size_t>(ep.r.size()));
    ep.validate();
    data.episodes.push_back(std::move(ep));
  }
  return data;
}

std::pair<LatentDataset, LatentDataset> LatentDataset::split(double holdout_fraction,
                                                             Rng& rng) const {
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
    throw std::invalid_argument("dataset split: holdout fraction must be in [0, 1)");
  const int n = static_cast<int>(episodes.size());
  LatentDataset train, hold;
  train.latent_dim = hold.latent_dim = latent_dim;
  train.action_dim = hold.action_dim = action_dim;
  train.encoder_hash = hold.encoder_hash = encoder_hash;
  if (n == 0) return {train, hold};
  const std::vector<int> order = rng.sample_without_replacement(n, n);
  int n_hold = static_cast<int>(std::floor(holdout_fraction * n));
  if (holdout_fraction > 0.0 && n_hold == 0 && n > 1) n_hold = 1;
  for (int i = 0; i < n; ++i) {
    auto& dst = i < n_hold ? hold : train;
    dst.episodes.push_back(episodes[static_cast<size_t>(order[static_cast<size_t>(i)])]);
  }
  return {train, hold};
}

TransitionBatch sample_transitions(const LatentDataset& data, int batch, Rng& rng) {
  if (batch < 1) throw std::invalid_argument("sample transitions: batch must be positive");
  const int64_t total = data.transitions();
  if (total == 0) throw std::invalid_argument("sample transitions: empty dataset");
  std::vector<int64_t> prefix(data.episodes.size() + 1, 0);
  for (size_t e = 0; e < data.episodes.size(); ++e)
    prefix[e + 1] = prefix[e] + data.episodes[e].length();
  TransitionBatch out;
  out.size = batch;
  out.z.resize(batch, data.latent_dim);
  out.a.resize(batch, data.action_dim);
  out.z_next.resize(batch, data.latent_dim);
  out.r.resize(batch);
  for (int b = 0; b < batch; ++b) {
    const int64_t flat = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(total)));
    const auto it = std::upper_bound(prefix.begin(), prefix.end(), flat);
    const size_t e = static_cast<size_t>(it - prefix.begin()) - 1;
    const int t = static_cast<int>(flat - prefix[e]);
    const LatentEpisode& ep = data.episodes[e];
    out.z.row(b) = ep.z.row(t);
    out.a.row(b) = ep.a.row(t);
    out.z_next.row(b) = ep.z.row(t + 1);
    out.r(b) = ep.r(t);
  }
  return out;
}

TransitionBatch all_transitions(const LatentDataset& data) {
  const int64_t total = data.transitions();
  TransitionBatch out;
  out.size = static_cast<int>(total);
  out.z.resize(total, data.latent_dim);
  out.a.resize(total, data.action_dim);
  out.z_next.resize(total, data.latent_dim);
  out.r.resize(total);
  int64_t row = 0;
  for (const auto& ep : data.episodes) {
    for (int t = 0; t < ep.length(); ++t, ++row) {
      out.z.row(row) = ep.z.row(t);
      out.a.row(row) = ep.a.row(t);
      out.z_next.row(row) = ep.z.row(t + 1);
      out.r(row) = ep.r(t);
    }
  }
  return out;
}

SequenceBatch sample_sequences(const LatentDataset& data, int batch, int window, Rng& rng) {
  if (batch < 1 || window < 1)
    throw std::invalid_argument("sample sequences: batch and window must be positive");
  std::vector<int> eligible;
  for (size_t e = 0; e < data.episodes.size(); ++e)
    if (data.episodes[e].length() >= window) eligible.push_back(static_cast<int>(e));
  if (eligible.empty())
    throw std::invalid_argument("sample sequences: no episode is at least one window long");
  SequenceBatch b;
  b.batch = batch;
  b.window = window;
  b.z.assign(static_cast<size_t>(window) + 1, Matrix(batch, data.latent_dim));
  b.a.assign(static_cast<size_t>(window), Matrix(batch, data.action_dim));
  b.r.assign(static_cast<size_t>(window), Eigen::VectorXd(batch));
  for (int i = 0; i < batch; ++i) {
    const int e = eligible[rng.uniform_index(eligible.size())];
    const LatentEpisode& ep = data.episodes[static_cast<size_t>(e)];
    const int start =
        static_cast<int>(rng.uniform_index(static_cast<uint64_t>(ep.length() - window + 1)));
    for (int k = 0; k <= window; ++k) b.z[static_cast<size_t>(k)].row(i) = ep.z.row(start + k);
    for (int k = 0; k < window; ++k) {
      b.a[static_cast<size_t>(k)].row(i) = ep.a.row(start + k);
      b.r[static_cast<size_t>(k)](i) = ep.r(start + k);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Shared probabilistic pieces

Var gaussian_nll_rows(const Var& mu, const Var& sigma, const Var& target) {
  const Var err = ad::sub(target, mu);
  const Var log_sigma = ad::log_(sigma);
  const Var inv_var = ad::exp_(ad::scale(log_sigma, -2.0));
  const Var terms = ad::add(ad::add_scalar(ad::scale(log_sigma, 2.0), kLog2Pi),
                            ad::cmul(ad::square(err), inv_var));
  return ad::scale(ad::rowsum(terms), 0.5);
}

Var kl_diag_rows(const Var& mu_q, const Var& sigma_q, const Var& mu_p, const Var& sigma_p) {
  const Var log_sq = ad::log_(sigma_q);
  const Var log_sp = ad::log_(sigma_p);
  const Var half_inv_sp2 = ad::scale(ad::exp_(ad::scale(log_sp, -2.0)), 0.5);
  const Var num = ad::add(ad::square(sigma_q), ad::square(ad::sub(mu_q, mu_p)));
  const Var per_dim =
      ad::add_scalar(ad::add(ad::sub(log_sp, log_sq), ad::cmul(num, half_inv_sp2)), -0.5);
  return ad::rowsum(per_dim);
}

Var balanced_kl(const Var& mu_q, const Var& sigma_q, const Var& mu_p, const Var& sigma_p,
                double balance) {
  if (balance < 0.0 || balance > 1.0)
    throw std::invalid_argument("balanced kl: balance must be in [0, 1]");
  const Var toward_prior = kl_diag_rows(ad::stop_grad(mu_q), ad::stop_grad(sigma_q), mu_p, sigma_p);
  const Var toward_post = kl_diag_rows(mu_q, sigma_q, ad::stop_grad(mu_p), ad::stop_grad(sigma_p));
  return ad::add(ad::scale(ad::mean(toward_prior), balance),
                 ad::scale(ad::mean(toward_post), 1.0 - balance));
}

GruCell::GruCell(int input_dim, int hidden_dim, Rng& rng, ParamList& reg, const std::string& name)
    : hidden_(hidden_dim) {
  if (input_dim < 1 || hidden_dim < 1)
    throw std::invalid_argument("gru cell: dimensions must be positive");
  wr_.init(input_dim, hidden_dim, rng, reg, name + "/wr");
  ur_.init(hidden_dim, hidden_dim, rng, reg, name + "/ur");
  wu_.init(input_dim, hidden_dim, rng, reg, name + "/wu");
  uu_.init(hidden_dim, hidden_dim, rng, reg, name + "/uu");
  wc_.init(input_dim, hidden_dim, rng, reg, name + "/wc");
  uc_.init(hidden_dim, hidden_dim, rng, reg, name + "/uc");
}

Var GruCell::operator()(const Var& x, const Var& h) const {
  const Var r = ad::sigmoid(ad::add(wr_(x), ur_(h)));
  const Var u = ad::sigmoid(ad::add(wu_(x), uu_(h)));
  const Var c = ad::tanh_(ad::add(wc_(x), uc_(ad::cmul(r, h))));
  return ad::add(ad::cmul(ad::add_scalar(ad::neg(u), 1.0), h), ad::cmul(u, c));
}

Matrix fit_linear_decoder(const Matrix& Z, const Matrix& F, double ridge) {
  if (Z.rows() == 0 || Z.rows() != F.rows())
    throw std::invalid_argument("linear decoder fit: latent and field row counts must match");
  const Matrix gram =
      Z.transpose() * Z + ridge * Matrix::Identity(Z.cols(), Z.cols());
  return gram.ldlt().solve(Z.transpose() * F);
}

// ---------------------------------------------------------------------------
// Backbone interface

Var LatentModel::context0(int batch) const {
  (void)batch;
  return ad::constant(Matrix::Zero(0, 0));
}

uint64_t LatentModel::params_hash() { return ad::params_hash(params()); }

std::pair<Eigen::VectorXd, double> LatentModel::predict(const Eigen::VectorXd& z,
                                                        const Eigen::VectorXd& a, Rng* rng) const {
  if (z.size() != latent_dim() || a.size() != action_dim())
    throw std::invalid_argument("latent model: prediction input dimensions mismatch");
  const VarStep s = step(context0(1), ad::constant(z.transpose()), ad::constant(a.transpose()), rng);
  return {s.z_next.value().row(0).transpose(), s.reward.value()(0, 0)};
}

// ---------------------------------------------------------------------------
// GruWM

GruWM::GruWM(int latent_dim, int action_dim, const GruOptions& opt, uint64_t seed)
    : d_(latent_dim), adim_(action_dim), opt_(opt) {
  if (d_ < 1 || adim_ < 1) throw std::invalid_argument("gru wm: dimensions must be positive");
  if (opt_.hidden < 1) throw std::invalid_argument("gru wm: hidden size must be positive");
  if (opt_.sigma_floor <= 0.0) throw std::invalid_argument("gru wm: sigma floor must be positive");
  Rng rng(Rng::derive_seed(seed, "gru_wm"));
  cell_ = GruCell(d_ + adim_, opt_.hidden, rng, params_, "gru/cell");
  mu_.init(opt_.hidden, d_, rng, params_, "gru/mu");
  sigma_raw_.init(opt_.hidden, d_, rng, params_, "gru/sigma");
  reward_.init(opt_.hidden, 1, rng, params_, "gru/reward");
}

GruWM::StepDist GruWM::forward(const Var& h, const Var& z, const Var& a) const {
  StepDist out;
  out.h = cell_(ad::concat_cols({z, a}), h);
  out.mu = mu_(out.h);
  out.sigma = ad::add_scalar(ad::softplus(sigma_raw_(out.h)), opt_.sigma_floor);
  out.reward = reward_(out.h);
  return out;
}

WmLoss GruWM::loss(const SequenceBatch& batch) const {
  if (batch.window < 1 || batch.batch < 1)
    throw std::invalid_argument("gru wm loss: empty batch");
  Var h = context0(batch.batch);
  Var nll_acc = ad::constant_scalar(0.0);
  Var rmse_acc = ad::constant_scalar(0.0);
  for (int t = 0; t < batch.window; ++t) {
    const StepDist dist = forward(h, ad::constant(batch.z[static_cast<size_t>(t)]),
                                  ad::constant(batch.a[static_cast<size_t>(t)]));
    nll_acc = ad::add(nll_acc, ad::mean(gaussian_nll_rows(
                                   dist.mu, dist.sigma,
                                   ad::constant(batch.z[static_cast<size_t>(t) + 1]))));
    const Var r_err = ad::sub(dist.reward, ad::constant(Matrix(batch.r[static_cast<size_t>(t)])));
    rmse_acc = ad::add(rmse_acc, ad::mean(ad::square(r_err)));
    h = dist.h;
  }
  const Var nll = ad::scale(nll_acc, 1.0 / batch.window);
  const Var rmse = ad::scale(rmse_acc, 1.0 / batch.window);
  WmLoss out;
  out.total = ad::add(nll, rmse);
  out.nll = nll.scalar();
  out.reward_mse = rmse.scalar();
  return out;
}

Var GruWM::context0(int batch) const { return ad::constant(Matrix::Zero(batch, opt_.hidden)); }

VarStep GruWM::step(const Var& context, const Var& z, const Var& a, Rng* rng) const {
  const StepDist dist = forward(context, z, a);
  Var z_next = dist.mu;
  if (rng) z_next = ad::add(dist.mu, ad::cmul(dist.sigma, ad::constant(randn(z.rows(), d_, *rng))));
  return {z_next, dist.reward, dist.h};
}

WmLoss GruWM::sample_loss(const LatentDataset& data, int batch, int window, Rng& rng) const {
  return loss(sample_sequences(data, batch, window, rng));
}

double GruWM::dataset_loss(const LatentDataset& data, int window, Rng& rng) const {
  (void)rng;  // the GRU loss is deterministic
  return window_dataset_loss(data, window,
                             [&](const SequenceBatch& b) { return loss(b).total.scalar(); });
}

// ---------------------------------------------------------------------------
// GeoGruWM

GeoGruWM::GeoGruWM(int latent_dim, int action_dim, const GruOptions& opt, Matrix decoder,
                   double lambda_g, uint64_t seed)
    : gru_(latent_dim, action_dim, opt, seed),
      decoder_(decoder.size() == 0 ? Matrix(Matrix::Identity(latent_dim, latent_dim))
                                   : std::move(decoder)),
      lambda_g_(lambda_g) {
  if (decoder_.rows() != latent_dim)
    throw std::invalid_argument("geo gru wm: decoder rows must match the latent dimension");
  if (lambda_g_ < 0.0) throw std::invalid_argument("geo gru wm: lambda_g must be non-negative");
}

WmLoss GeoGruWM::loss(const SequenceBatch& batch) const {
  if (batch.window < 1 || batch.batch < 1)
    throw std::invalid_argument("geo gru wm loss: empty batch");
  const Var dec = ad::constant(decoder_);
  Var h = gru_.context0(batch.batch);
  Var nll_acc = ad::constant_scalar(0.0);
  Var rmse_acc = ad::constant_scalar(0.0);
  Var geo_acc = ad::constant_scalar(0.0);
  for (int t = 0; t < batch.window; ++t) {
    const Var z_next = ad::constant(batch.z[static_cast<size_t>(t) + 1]);
    const GruWM::StepDist dist = gru_.forward(h, ad::constant(batch.z[static_cast<size_t>(t)]),
                                              ad::constant(batch.a[static_cast<size_t>(t)]));
    nll_acc = ad::add(nll_acc, ad::mean(gaussian_nll_rows(dist.mu, dist.sigma, z_next)));
    const Var r_err = ad::sub(dist.reward, ad::constant(Matrix(batch.r[static_cast<size_t>(t)])));
    rmse_acc = ad::add(rmse_acc, ad::mean(ad::square(r_err)));
    // Penalize the mean prediction error by its effect after decoding.
    const Var decoded_err = ad::matmul(ad::sub(dist.mu, z_next), dec);
    geo_acc = ad::add(geo_acc, ad::mean(ad::rowsum(ad::square(decoded_err))));
    h = dist.h;
  }
  const Var nll = ad::scale(nll_acc, 1.0 / batch.window);
  const Var rmse = ad::scale(rmse_acc, 1.0 / batch.window);
  const Var geo = ad::scale(geo_acc, 1.0 / batch.window);
  WmLoss out;
  out.total = ad::add(ad::add(nll, rmse), ad::scale(geo, lambda_g_));
  out.nll = nll.scalar();
  out.reward_mse = rmse.scalar();
  out.geo = geo.scalar();  // unweighted component; total applies lambda_g
  return out;
}

WmLoss GeoGruWM::sample_loss(const LatentDataset& data, int batch, int window, Rng& rng) const {
  return loss(sample_sequences(data, batch, window, rng));
}

double GeoGruWM::dataset_loss(const LatentDataset& data, int window, Rng& rng) const {
  (void)rng;
  return window_dataset_loss(data, window,
                             [&](const SequenceBatch& b) { return loss(b).total.scalar(); });
}

// ---------------------------------------------------------------------------
// RssmWM

RssmWM::RssmWM(int latent_dim, int action_dim, const RssmOptions& opt, uint64_t seed)
    : d_(latent_dim), adim_(action_dim), opt_(opt) {
  if (d_ < 1 || adim_ < 1) throw std::invalid_argument("rssm wm: dimensions must be positive");
  if (opt_.hidden < 1 || opt_.stoch < 1)
    throw std::invalid_argument("rssm wm: state sizes must be positive");
  if (opt_.sigma_floor <= 0.0) throw std::invalid_argument("rssm wm: sigma floor must be positive");
  if (opt_.beta_kl < 0.0) throw std::invalid_argument("rssm wm: beta_kl must be non-negative");
  if (opt_.kl_balance < 0.0 || opt_.kl_balance > 1.0)
    throw std::invalid_argument("rssm wm: kl balance must be in [0, 1]");
  Rng rng(Rng::derive_seed(seed, "rssm_wm"));
  cell_ = GruCell(d_ + adim_, opt_.hidden, rng, params_, "rssm/cell");
  prior_mu_.init(opt_.hidden, opt_.stoch, rng, params_, "rssm/prior_mu");
  prior_sigma_.init(opt_.hidden, opt_.stoch, rng, params_, "rssm/prior_sigma");
  post_mu_.init(opt_.hidden + d_, opt_.stoch, rng, params_, "rssm/post_mu");
  post_sigma_.init(opt_.hidden + d_, opt_.stoch, rng, params_, "rssm/post_sigma");
  dec_mu_.init(opt_.hidden + opt_.stoch, d_, rng, params_, "rssm/dec_mu");
  dec_sigma_.init(opt_.hidden + opt_.stoch, d_, rng, params_, "rssm/dec_sigma");
  reward_.init(opt_.hidden + opt_.stoch, 1, rng, params_, "rssm/reward");
}

Var RssmWM::floor_sigma(const Var& raw) const {
  return ad::add_scalar(ad::softplus(raw), opt_.sigma_floor);
}

RssmWM::Dists RssmWM::forward(const Var& h, const Var& z, const Var& a, const Var* z_next) const {
  Dists out;
  out.h = cell_(ad::concat_cols({z, a}), h);
  out.mu_p = prior_mu_(out.h);
  out.sigma_p = floor_sigma(prior_sigma_(out.h));
  if (z_next) {
    const Var hc = ad::concat_cols({out.h, *z_next});
    out.mu_q = post_mu_(hc);
    out.sigma_q = floor_sigma(post_sigma_(hc));
  }
  return out;
}

Var RssmWM::decode_mu(const Var& h, const Var& s) const { return dec_mu_(ad::concat_cols({h, s})); }

Var RssmWM::decode_sigma(const Var& h, const Var& s) const {
  return floor_sigma(dec_sigma_(ad::concat_cols({h, s})));
}

Var RssmWM::reward_head(const Var& h, const Var& s) const {
  return reward_(ad::concat_cols({h, s}));
}

WmLoss RssmWM::loss(const SequenceBatch& batch, Rng& rng) const {
  if (batch.window < 1 || batch.batch < 1)
    throw std::invalid_argument("rssm wm loss: empty batch");
  Var h = context0(batch.batch);
  Var recon_acc = ad::constant_scalar(0.0);
  Var kl_acc = ad::constant_scalar(0.0);
  Var rmse_acc = ad::constant_scalar(0.0);
  for (int t = 0; t < batch.window; ++t) {
    const Var z_next = ad::constant(batch.z[static_cast<size_t>(t) + 1]);
    const Dists dist =
        forward(h, ad::constant(batch.z[static_cast<size_t>(t)]),
                ad::constant(batch.a[static_cast<size_t>(t)]), &z_next);
    const Var s = ad::add(
        dist.mu_q, ad::cmul(dist.sigma_q, ad::constant(randn(batch.batch, opt_.stoch, rng))));
    recon_acc = ad::add(recon_acc, ad::mean(gaussian_nll_rows(decode_mu(dist.h, s),
                                                              decode_sigma(dist.h, s), z_next)));
    kl_acc = ad::add(
        kl_acc, balanced_kl(dist.mu_q, dist.sigma_q, dist.mu_p, dist.sigma_p, opt_.kl_balance));
    const Var r_err =
        ad::sub(reward_head(dist.h, s), ad::constant(Matrix(batch.r[static_cast<size_t>(t)])));
    rmse_acc = ad::add(rmse_acc, ad::mean(ad::square(r_err)));
    h = dist.h;
  }
  const Var recon = ad::scale(recon_acc, 1.0 / batch.window);
  const Var kl = ad::scale(kl_acc, 1.0 / batch.window);
  const Var rmse = ad::scale(rmse_acc, 1.0 / batch.window);
  WmLoss out;
  out.total = ad::add(ad::add(recon, ad::scale(kl, opt_.beta_kl)), rmse);
  out.recon = recon.scalar();
  out.kl = kl.scalar();  // unweighted component; total applies beta_kl
  out.reward_mse = rmse.scalar();
  return out;
}

Var RssmWM::context0(int batch) const { return ad::constant(Matrix::Zero(batch, opt_.hidden)); }

VarStep RssmWM::step(const Var& context, const Var& z, const Var& a, Rng* rng) const {
  const Dists dist = forward(context, z, a, nullptr);
  const Eigen::Index B = z.rows();
  Var s = dist.mu_p;
  if (rng) s = ad::add(dist.mu_p, ad::cmul(dist.sigma_p, ad::constant(randn(B, opt_.stoch, *rng))));
  Var z_next = decode_mu(dist.h, s);
  if (rng)
    z_next = ad::add(z_next,
                     ad::cmul(decode_sigma(dist.h, s), ad::constant(randn(B, d_, *rng))));
  return {z_next, reward_head(dist.h, s), dist.h};
}

WmLoss RssmWM::sample_loss(const LatentDataset& data, int batch, int window, Rng& rng) const {
  return loss(sample_sequences(data, batch, window, rng), rng);
}

double RssmWM::dataset_loss(const LatentDataset& data, int window, Rng& rng) const {
  // Deterministic given the caller's rng state (posterior sampling draws from it).
  return window_dataset_loss(data, window,
                             [&](const SequenceBatch& b) { return loss(b, rng).total.scalar(); });
}

// ---------------------------------------------------------------------------
// KoopmanWM

KoopmanWM::KoopmanWM(int latent_dim, int action_dim, const KoopmanOptions& opt, uint64_t seed)
    : d_(latent_dim), adim_(action_dim), opt_(opt) {
  if (d_ < 1 || adim_ < 1) throw std::invalid_argument("koopman wm: dimensions must be positive");
  if (opt_.lambda_r < 0.0)
    throw std::invalid_argument("koopman wm: residual penalty must be non-negative");
  if (opt_.residual_hidden < 1)
    throw std::invalid_argument("koopman wm: residual hidden size must be positive");
  Rng rng(Rng::derive_seed(seed, "koopman_wm"));
  At_ = ad::param(Matrix::Identity(d_, d_));
  Bt_ = ad::param(Matrix::Zero(adim_, d_));
  params_.push_back({"koopman/At", At_});
  params_.push_back({"koopman/Bt", Bt_});
  e1_.init(d_ + adim_, opt_.residual_hidden, rng, params_, "koopman/res1");
  e2_.init(opt_.residual_hidden, opt_.residual_hidden, rng, params_, "koopman/res2");
  eo_.init(opt_.residual_hidden, d_, rng, params_, "koopman/res_out");
  // Zero output layer: the model starts exactly at its linear part.
  eo_.W.value().setZero();
  eo_.b.value().setZero();
  r1_.init(d_ + adim_, opt_.residual_hidden, rng, params_, "koopman/reward1");
  r2_.init(opt_.residual_hidden, opt_.residual_hidden, rng, params_, "koopman/reward2");
  ro_.init(opt_.residual_hidden, 1, rng, params_, "koopman/reward_out");
}

void KoopmanWM::fit_linear(const TransitionBatch& data, double ridge) {
  if (data.size < 1) throw std::invalid_argument("koopman fit: empty batch");
  if (data.z.cols() != d_ || data.a.cols() != adim_)
    throw std::invalid_argument("koopman fit: batch dimensions mismatch");
  Matrix X(data.size, d_ + adim_);
  X << data.z, data.a;
  const Matrix gram =
      X.transpose() * X + ridge * Matrix::Identity(d_ + adim_, d_ + adim_);
  const Matrix G = gram.ldlt().solve(X.transpose() * data.z_next);
  At_.value() = G.topRows(d_);
  Bt_.value() = G.bottomRows(adim_);
}

Var KoopmanWM::residual(const Var& z, const Var& a) const {
  return eo_(ad::relu(e2_(ad::relu(e1_(ad::concat_cols({z, a}))))));
}

WmLoss KoopmanWM::loss(const TransitionBatch& batch) const {
  if (batch.size < 1) throw std::invalid_argument("koopman wm loss: empty batch");
  const Var z = ad::constant(batch.z);
  const Var a = ad::constant(batch.a);
  const Var eps = residual(z, a);
  const Var pred = ad::add(ad::add(ad::matmul(z, At_), ad::matmul(a, Bt_)), eps);
  const Var lat =
      ad::mean(ad::rowsum(ad::square(ad::sub(pred, ad::constant(batch.z_next)))));
  const Var rhat = ro_(ad::relu(r2_(ad::relu(r1_(ad::concat_cols({z, a}))))));
  const Var rmse = ad::mean(ad::square(ad::sub(rhat, ad::constant(Matrix(batch.r)))));
  const Var pen = ad::mean(ad::rowsum(ad::square(eps)));
  WmLoss out;
  out.total = ad::add(ad::add(lat, rmse), ad::scale(pen, opt_.lambda_r));
  out.latent_mse = lat.scalar();
  out.reward_mse = rmse.scalar();
  out.residual_penalty = pen.scalar();  // unweighted component; total applies lambda_r
  return out;
}

VarStep KoopmanWM::step(const Var& context, const Var& z, const Var& a, Rng* rng) const {
  (void)rng;  // the model is deterministic: its prediction is its mean
  const Var pred = ad::add(ad::add(ad::matmul(z, At_), ad::matmul(a, Bt_)), residual(z, a));
  const Var rhat = ro_(ad::relu(r2_(ad::relu(r1_(ad::concat_cols({z, a}))))));
  return {pred, rhat, context};
}

WmLoss KoopmanWM::sample_loss(const LatentDataset& data, int batch, int window, Rng& rng) const {
  (void)window;  // one-step model
  return loss(sample_transitions(data, batch, rng));
}

double KoopmanWM::dataset_loss(const LatentDataset& data, int window, Rng& rng) const {
  (void)window;
  (void)rng;
  return transition_dataset_loss(data,
                                 [&](const TransitionBatch& b) { return loss(b).total.scalar(); });
}

void KoopmanWM::warm_start(const LatentDataset& data) { fit_linear(all_transitions(data)); }

// ---------------------------------------------------------------------------
// Residual adapters

ResidualAdapter::ResidualAdapter(int latent_dim, int action_dim, uint64_t seed, int hidden)
    : d_(latent_dim), adim_(action_dim) {
  if (d_ < 1 || adim_ < 1 || hidden < 1)
    throw std::invalid_argument("residual adapter: dimensions must be positive");
  Rng rng(Rng::derive_seed(seed, "residual_adapter"));
  z1_.init(d_ + adim_, hidden, rng, params_, "adapter/z1");
  z2_.init(hidden, hidden, rng, params_, "adapter/z2");
  zo_.init(hidden, d_, rng, params_, "adapter/z_out");
  r1_.init(d_ + adim_, hidden, rng, params_, "adapter/r1");
  r2_.init(hidden, hidden, rng, params_, "adapter/r2");
  ro_.init(hidden, 1, rng, params_, "adapter/r_out");
  // Zero output layers: an unfitted adapter is the identity correction.
  zo_.W.value().setZero();
  zo_.b.value().setZero();
  ro_.W.value().setZero();
  ro_.b.value().setZero();
}

Var ResidualAdapter::delta_z(const Var& z, const Var& a) const {
  return zo_(ad::relu(z2_(ad::relu(z1_(ad::concat_cols({z, a}))))));
}

Var ResidualAdapter::delta_r(const Var& z, const Var& a) const {
  return ro_(ad::relu(r2_(ad::relu(r1_(ad::concat_cols({z, a}))))));
}

namespace {

// Frozen nominal mean one-step predictions, value level, in bounded chunks.
std::pair<Matrix, Matrix> nominal_mean_predictions(LatentModel& nominal,
                                                   const TransitionBatch& batch) {
  Matrix zn(batch.size, batch.z.cols());
  Matrix rn(batch.size, 1);
  constexpr int kChunk = 256;
  for (int lo = 0; lo < batch.size; lo += kChunk) {
    const int n = std::min(kChunk, batch.size - lo);
    const VarStep s =
        nominal.step(nominal.context0(n), ad::constant(batch.z.middleRows(lo, n)),
                     ad::constant(batch.a.middleRows(lo, n)), nullptr);
    zn.middleRows(lo, n) = s.z_next.value();
    rn.middleRows(lo, n) = s.reward.value();
  }
  return {zn, rn};
}

std::pair<double, double> mean_one_step_errors(const TransitionBatch& batch, const Matrix& zhat,
                                               const Matrix& rhat) {
  const double lat = (zhat - batch.z_next).rowwise().squaredNorm().mean();
  const double rew = (rhat.col(0) - batch.r).array().square().mean();
  return {lat, rew};
}

}  // namespace

AdapterFitReport fit_residual_adapter(ResidualAdapter& adapter, LatentModel& nominal,
                                      const LatentDataset& abnormal,
                                      const AdapterFitOptions& opt) {
  if (opt.min_transitions < 2 || opt.epochs < 1 || opt.batch < 1 || opt.lr <= 0.0 ||
      opt.holdout_fraction <= 0.0 || opt.holdout_fraction >= 1.0)
    throw std::invalid_argument("adapter fit: invalid options");
  if (adapter.latent_dim() != nominal.latent_dim() ||
      adapter.action_dim() != nominal.action_dim() || abnormal.latent_dim != nominal.latent_dim() ||
      abnormal.action_dim != nominal.action_dim())
    throw std::invalid_argument("adapter fit: adapter, model, and dataset dimensions mismatch");
  const int64_t n_total = abnormal.transitions();
  if (n_total < opt.min_transitions)
    throw std::runtime_error("adapter fit: refusing to fit on " + std::to_string(n_total) +
                             " transitions; at least " + std::to_string(opt.min_transitions) +
                             " required");

  AdapterFitReport report;
  report.used_transitions = static_cast<int>(n_total);
  report.nominal_hash_before = nominal.params_hash();

  const TransitionBatch all = all_transitions(abnormal);
  Rng rng(Rng::derive_seed(opt.seed, "adapter_fit"));
  const std::vector<int> order = rng.sample_without_replacement(all.size, all.size);
  const int n_hold = std::clamp(static_cast<int>(std::floor(opt.holdout_fraction * all.size)), 1,
                                all.size - 1);
  const TransitionBatch hold =
      gather_transitions(all, {order.begin(), order.begin() + n_hold});
  const TransitionBatch train =
      gather_transitions(all, {order.begin() + n_hold, order.end()});

  const auto [zn_train, rn_train] = nominal_mean_predictions(nominal, train);
  const auto [zn_hold, rn_hold] = nominal_mean_predictions(nominal, hold);
  std::tie(report.nominal_latent_err, report.nominal_reward_err) =
      mean_one_step_errors(hold, zn_hold, rn_hold);

  ad::Adam optim(opt.lr);
  const int steps_per_epoch = (train.size + opt.batch - 1) / opt.batch;
  for (int e = 0; e < opt.epochs; ++e) {
    for (int s = 0; s < steps_per_epoch; ++s) {
      std::vector<int> rows(static_cast<size_t>(std::min(opt.batch, train.size)));
      for (auto& r : rows) r = static_cast<int>(rng.uniform_index(train.size));
      const TransitionBatch mb = gather_transitions(train, rows);
      Matrix zn_mb(mb.size, train.z.cols()), rn_mb(mb.size, 1);
      for (int i = 0; i < mb.size; ++i) {
        zn_mb.row(i) = zn_train.row(rows[static_cast<size_t>(i)]);
        rn_mb.row(i) = rn_train.row(rows[static_cast<size_t>(i)]);
      }
      // The nominal predictions enter the graph only as constants.
      const Var z = ad::constant(mb.z);
      const Var a = ad::constant(mb.a);
      const Var corrected_z = ad::add(ad::constant(zn_mb), adapter.delta_z(z, a));
      const Var corrected_r = ad::add(ad::constant(rn_mb), adapter.delta_r(z, a));
      const Var lat =
          ad::mean(ad::rowsum(ad::square(ad::sub(corrected_z, ad::constant(mb.z_next)))));
      const Var rew = ad::mean(ad::square(ad::sub(corrected_r, ad::constant(Matrix(mb.r)))));
      const Var total = ad::add(lat, rew);
      ad::backward(total);
      optim.step(adapter.params());
    }
  }

  const Matrix zc_hold =
      zn_hold + adapter.delta_z(ad::constant(hold.z), ad::constant(hold.a)).value();
  const Matrix rc_hold =
      rn_hold + adapter.delta_r(ad::constant(hold.z), ad::constant(hold.a)).value();
  std::tie(report.corrected_latent_err, report.corrected_reward_err) =
      mean_one_step_errors(hold, zc_hold, rc_hold);
  report.nominal_hash_after = nominal.params_hash();
  return report;
}

CorrectedModel::CorrectedModel(std::shared_ptr<LatentModel> nominal,
                               std::shared_ptr<ResidualAdapter> adapter)
    : nominal_(std::move(nominal)), adapter_(std::move(adapter)) {
  if (!nominal_ || !adapter_)
    throw std::invalid_argument("corrected model: null nominal model or adapter");
  if (adapter_->latent_dim() != nominal_->latent_dim() ||
      adapter_->action_dim() != nominal_->action_dim())
    throw std::invalid_argument("corrected model: adapter dimensions mismatch");
  for (auto& p : nominal_->params()) p.var.set_requires_grad(false);  // permanent freeze
}

std::string CorrectedModel::kind() const { return nominal_->kind() + "+adapter"; }

VarStep CorrectedModel::step(const Var& context, const Var& z, const Var& a, Rng* rng) const {
  VarStep s = nominal_->step(context, z, a, rng);
  s.z_next = ad::add(s.z_next, adapter_->delta_z(z, a));
  s.reward = ad::add(s.reward, adapter_->delta_r(z, a));
  return s;
}

WmLoss CorrectedModel::sample_loss(const LatentDataset& data, int batch, int window,
                                   Rng& rng) const {
  (void)window;  // one-step corrected regression
  const TransitionBatch b = sample_transitions(data, batch, rng);
  const VarStep s =
      step(context0(b.size), ad::constant(b.z), ad::constant(b.a), nullptr);
  const Var lat = ad::mean(ad::rowsum(ad::square(ad::sub(s.z_next, ad::constant(b.z_next)))));
  const Var rew = ad::mean(ad::square(ad::sub(s.reward, ad::constant(Matrix(b.r)))));
  WmLoss out;
  out.total = ad::add(lat, rew);
  out.latent_mse = lat.scalar();
  out.reward_mse = rew.scalar();
  return out;
}

double CorrectedModel::dataset_loss(const LatentDataset& data, int window, Rng& rng) const {
  (void)window;
  (void)rng;
  return transition_dataset_loss(data, [&](const TransitionBatch& b) {
    const VarStep s = step(context0(b.size), ad::constant(b.z), ad::constant(b.a), nullptr);
    const double lat = (s.z_next.value() - b.z_next).rowwise().squaredNorm().mean();
    const double rew = (s.reward.value().col(0) - b.r).array().square().mean();
    return lat + rew;
  });
}

// ---------------------------------------------------------------------------
// Ensembles and factory

void WmConfig::validate() const {
  if (kind != "gru" && kind != "geo_gru" && kind != "rssm" && kind != "koopman")
    throw std::invalid_argument("world model config: unknown kind: " + kind);
  if (latent_dim < 1 || action_dim < 1)
    throw std::invalid_argument("world model config: dimensions must be positive");
  if (gru.hidden < 1 || gru.sigma_floor <= 0.0)
    throw std::invalid_argument("world model config: invalid recurrent options");
  if (rssm.hidden < 1 || rssm.stoch < 1 || rssm.sigma_floor <= 0.0 || rssm.beta_kl < 0.0 ||
      rssm.kl_balance < 0.0 || rssm.kl_balance > 1.0)
    throw std::invalid_argument("world model config: invalid state-space options");
  if (koopman.lambda_r < 0.0 || koopman.residual_hidden < 1)
    throw std::invalid_argument("world model config: invalid linear-model options");
  if (lambda_g < 0.0)
    throw std::invalid_argument("world model config: lambda_g must be non-negative");
  if (geo_decoder.size() != 0 && geo_decoder.rows() != latent_dim)
    throw std::invalid_argument("world model config: decoder rows must match the latent dimension");
}

std::shared_ptr<LatentModel> make_model(const WmConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (cfg.kind == "gru")
    return std::make_shared<GruWM>(cfg.latent_dim, cfg.action_dim, cfg.gru, seed);
  if (cfg.kind == "geo_gru")
    return std::make_shared<GeoGruWM>(cfg.latent_dim, cfg.action_dim, cfg.gru, cfg.geo_decoder,
                                      cfg.lambda_g, seed);
  if (cfg.kind == "rssm")
    return std::make_shared<RssmWM>(cfg.latent_dim, cfg.action_dim, cfg.rssm, seed);
  return std::make_shared<KoopmanWM>(cfg.latent_dim, cfg.action_dim, cfg.koopman, seed);
}

WmEnsemble::WmEnsemble(std::vector<std::shared_ptr<LatentModel>> members)
    : members_(std::move(members)) {
  if (members_.empty()) throw std::invalid_argument("ensemble: needs at least one member");
  for (const auto& m : members_) {
    if (!m) throw std::invalid_argument("ensemble: null member");
    if (m->latent_dim() != members_.front()->latent_dim() ||
        m->action_dim() != members_.front()->action_dim())
      throw std::invalid_argument("ensemble: member dimensions mismatch");
  }
}

int WmEnsemble::pick(Rng& rng) const {
  return static_cast<int>(rng.uniform_index(members_.size()));
}

std::pair<Eigen::VectorXd, double> WmEnsemble::imagine_step(const Eigen::VectorXd& z,
                                                            const Eigen::VectorXd& a, Rng& rng) {
  const int m = pick(rng);
  return members_[static_cast<size_t>(m)]->predict(z, a, &rng);
}

WmEnsemble make_ensemble(const WmConfig& cfg, int size, uint64_t seed) {
  if (size < 1) throw std::invalid_argument("ensemble: size must be positive");
  std::vector<std::shared_ptr<LatentModel>> members;
  members.reserve(static_cast<size_t>(size));
  for (int i = 0; i < size; ++i)
    members.push_back(make_model(cfg, Rng::derive_seed(seed, "member" + std::to_string(i))));
  return WmEnsemble(std::move(members));
}

// ---------------------------------------------------------------------------
// Offline pretraining

void WmTrainConfig::validate() const {
  if (epochs < 1 || batches_per_epoch < 1 || batch < 1 || window < 1)
    throw std::invalid_argument("world model training config: counts must be positive");
  if (lr <= 0.0) throw std::invalid_argument("world model training config: lr must be positive");
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
    throw std::invalid_argument("world model training config: holdout fraction must be in [0, 1)");
}

std::vector<WmEpochRow> pretrain(LatentModel& model, const LatentDataset& data,
                                 const WmTrainConfig& cfg) {
  cfg.validate();
  if (data.episodes.empty() || data.transitions() == 0)
    throw std::invalid_argument("pretrain: empty latent dataset");
  if (data.latent_dim != model.latent_dim() || data.action_dim != model.action_dim())
    throw std::invalid_argument("pretrain: dataset dimensions do not match the model");
  Rng split_rng(Rng::derive_seed(cfg.seed, "wm_split"));
  const auto [train, hold] = data.split(cfg.holdout_fraction, split_rng);
  if (train.transitions() == 0)
    throw std::invalid_argument("pretrain: no training episodes after the holdout split");
  const LatentDataset& eval_set = hold.transitions() > 0 ? hold : train;

  model.warm_start(train);
  ad::Adam optim(cfg.lr);
  Rng rng(Rng::derive_seed(cfg.seed, "wm_train"));
  std::vector<WmEpochRow> rows;
  rows.reserve(static_cast<size_t>(cfg.epochs));
  for (int e = 0; e < cfg.epochs; ++e) {
    double acc = 0.0;
    for (int b = 0; b < cfg.batches_per_epoch; ++b) {
      const WmLoss l = model.sample_loss(train, cfg.batch, cfg.window, rng);
      ad::backward(l.total);
      optim.step(model.params());
      acc += l.total.scalar();
    }
    Rng eval_rng(Rng::derive_seed(cfg.seed, "wm_holdout"));
    rows.push_back({e, acc / cfg.batches_per_epoch,
                    model.dataset_loss(eval_set, cfg.window, eval_rng)});
  }
  return rows;
}

}  // namespace ccs::wm
