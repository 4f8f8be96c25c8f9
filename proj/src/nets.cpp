#include "ccs/nets.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "ccs/hash.hpp"

namespace ccs::nets {

namespace {

using ad::add;
using ad::add_rowvec;
using ad::add_scalar;
using ad::clamp_;
using ad::cmul;
using ad::concat_cols;
using ad::constant;
using ad::exp_;
using ad::gather_rows;
using ad::matmul;
using ad::mean_rows_grouped;
using ad::mul_rowvec;
using ad::neg;
using ad::relu;
using ad::rowsum;
using ad::scale;
using ad::sigmoid;
using ad::softplus;
using ad::sub;
using ad::tanh_;
using ad::tile_rows;

Var named_param(Matrix v, ParamList& reg, const std::string& name) {
  Var p = ad::param(std::move(v));
  reg.push_back({name, p});
  return p;
}

std::shared_ptr<const std::vector<Eigen::Index>> make_taps(std::vector<Eigen::Index> idx) {
  return std::make_shared<const std::vector<Eigen::Index>>(std::move(idx));
}

}  // namespace

Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-bound, bound);
  return m;
}

void Linear::init(int in, int out, Rng& rng, ParamList& reg, const std::string& name) {
  W = named_param(uniform_init(in, out, in, rng), reg, name + "/W");
  b = named_param(uniform_init(1, out, in, rng), reg, name + "/b");
}

Var Linear::operator()(const Var& x) const { return add_rowvec(matmul(x, W), b); }

void LayerNorm::init(int dim, ParamList& reg, const std::string& name) {
  gamma = named_param(Matrix::Ones(1, dim), reg, name + "/gamma");
  beta = named_param(Matrix::Zero(1, dim), reg, name + "/beta");
}

Var LayerNorm::operator()(const Var& x) const {
  return add_rowvec(mul_rowvec(ad::layer_norm_rows(x), gamma), beta);
}

// ---------------------------------------------------------------------------
// WellEncoder

WellEncoder::WellEncoder(int d, uint64_t seed) : d_(d) {
  if (d != 64 && d != 128) throw std::invalid_argument("well encoder dim must be 64 or 128");
  Rng rng(seed);
  conv_.init(3 * 30, d, rng, params_, "well_enc/conv");
}

Var WellEncoder::encode_batch(const Var& ys, int batch) const {
  constexpr int kSamples = 9;
  constexpr int kChannels = 30;
  if (ys.cols() != kChannels || ys.rows() != static_cast<Eigen::Index>(batch) * kSamples)
    throw std::invalid_argument("well encoder: input must be (batch*9) x 30");

  auto it = taps_.find(batch);
  if (it == taps_.end()) {
    std::vector<Eigen::Index> left, center, right;
    left.reserve(static_cast<size_t>(batch) * kSamples);
    center.reserve(left.capacity());
    right.reserve(left.capacity());
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index base = static_cast<Eigen::Index>(b) * kSamples;
      for (int s = 0; s < kSamples; ++s) {
        left.push_back(s > 0 ? base + s - 1 : -1);
        center.push_back(base + s);
        right.push_back(s + 1 < kSamples ? base + s + 1 : -1);
      }
    }
    it = taps_
             .emplace(batch, std::array<std::shared_ptr<const std::vector<Eigen::Index>>, 3>{
                                 make_taps(std::move(left)), make_taps(std::move(center)),
                                 make_taps(std::move(right))})
             .first;
  }
  const auto& taps = it->second;
  Var im2col = concat_cols(
      {gather_rows(ys, taps[0]), gather_rows(ys, taps[1]), gather_rows(ys, taps[2])});
  return mean_rows_grouped(relu(conv_(im2col)), kSamples);
}

// ---------------------------------------------------------------------------
// SpatialEncoder

SpatialEncoder::SpatialEncoder(const GridGeometry& grid, uint64_t seed) {
  grid.validate();
  Rng rng(seed);
  const std::array<int, 5> channels = {2, 8, 16, 32, 64};
  int nx = grid.nx, ny = grid.ny, nz = grid.nz;
  for (int l = 0; l < 4; ++l) {
    Level lvl;
    lvl.in_nx = nx;
    lvl.in_ny = ny;
    lvl.in_nz = nz;
    lvl.out_nx = (nx + 1) / 2;  // kernel 3, pad 1, lateral stride 2
    lvl.out_ny = (ny + 1) / 2;
    lvl.out_nz = nz;  // full depth kept: stride 1 vertically
    lvl.conv.init(27 * channels[static_cast<size_t>(l)], channels[static_cast<size_t>(l) + 1], rng,
                  params_, "spatial_enc/conv" + std::to_string(l));

    const auto in_idx = [&lvl](int i, int j, int k) {
      return static_cast<Eigen::Index>(i) + lvl.in_nx * (static_cast<Eigen::Index>(j) +
                                                         static_cast<Eigen::Index>(lvl.in_ny) * k);
    };
    const int n_out = lvl.out_nx * lvl.out_ny * lvl.out_nz;
    for (int dz = -1; dz <= 1; ++dz) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          std::vector<Eigen::Index> idx(static_cast<size_t>(n_out));
          size_t c = 0;
          for (int ko = 0; ko < lvl.out_nz; ++ko) {
            for (int jo = 0; jo < lvl.out_ny; ++jo) {
              for (int io = 0; io < lvl.out_nx; ++io) {
                const int i = 2 * io + dx, j = 2 * jo + dy, k = ko + dz;
                const bool inside = i >= 0 && i < lvl.in_nx && j >= 0 && j < lvl.in_ny && k >= 0 &&
                                    k < lvl.in_nz;
                idx[c++] = inside ? in_idx(i, j, k) : -1;
              }
            }
          }
          lvl.taps.push_back(make_taps(std::move(idx)));
        }
      }
    }
    nx = lvl.out_nx;
    ny = lvl.out_ny;
    nz = lvl.out_nz;
    levels_.push_back(std::move(lvl));
  }
}

const std::vector<std::shared_ptr<const std::vector<Eigen::Index>>>& SpatialEncoder::taps_for(
    const Level& lvl, int batch) const {
  if (batch == 1) return lvl.taps;
  const int level_index = static_cast<int>(&lvl - levels_.data());
  const auto key = std::make_pair(level_index, batch);
  auto it = batch_taps_.find(key);
  if (it == batch_taps_.end()) {
    const Eigen::Index n_in =
        static_cast<Eigen::Index>(lvl.in_nx) * lvl.in_ny * lvl.in_nz;
    std::vector<std::shared_ptr<const std::vector<Eigen::Index>>> taps;
    taps.reserve(lvl.taps.size());
    for (const auto& base : lvl.taps) {
      std::vector<Eigen::Index> idx;
      idx.reserve(base->size() * static_cast<size_t>(batch));
      for (int b = 0; b < batch; ++b) {
        const Eigen::Index off = static_cast<Eigen::Index>(b) * n_in;
        for (const Eigen::Index v : *base) idx.push_back(v < 0 ? -1 : v + off);
      }
      taps.push_back(make_taps(std::move(idx)));
    }
    it = batch_taps_.emplace(key, std::move(taps)).first;
  }
  return it->second;
}

Var SpatialEncoder::encode_batch(const Var& fields, int batch) const {
  const Eigen::Index n0 =
      static_cast<Eigen::Index>(levels_[0].in_nx) * levels_[0].in_ny * levels_[0].in_nz;
  if (fields.cols() != 2 || fields.rows() != n0 * batch)
    throw std::invalid_argument("spatial encoder: input must be (batch*cells) x 2");

  Var x = fields;
  for (const Level& lvl : levels_) {
    const auto& taps = taps_for(lvl, batch);
    std::vector<Var> cols;
    cols.reserve(taps.size());
    for (const auto& t : taps) cols.push_back(gather_rows(x, t));
    x = relu(lvl.conv(concat_cols(cols)));
  }
  const Level& last = levels_.back();
  const Eigen::Index pooled =
      static_cast<Eigen::Index>(last.out_nx) * last.out_ny * last.out_nz;
  return mean_rows_grouped(x, pooled);
}

// ---------------------------------------------------------------------------
// GruGate

GruGate::GruGate(int d, uint64_t seed, double gate_bias_init, ParamList& reg,
                 const std::string& name) {
  Rng rng(seed);
  auto w = [&](const std::string& suffix) {
    return named_param(uniform_init(d, d, d, rng), reg, name + "/" + suffix);
  };
  wr_ = w("Wr");
  ur_ = w("Ur");
  wu_ = w("Wu");
  uu_ = w("Uu");
  wh_ = w("Wh");
  uh_ = w("Uh");
  bg_ = named_param(Matrix::Constant(1, d, gate_bias_init), reg, name + "/bg");
}

Var GruGate::operator()(const Var& x, const Var& y) const {
  Var r = sigmoid(add(matmul(y, wr_), matmul(x, ur_)));
  Var u = sigmoid(add_rowvec(add(matmul(y, wu_), matmul(x, uu_)), neg(bg_)));
  Var h = tanh_(add(matmul(y, wh_), matmul(cmul(r, x), uh_)));
  return add(sub(x, cmul(u, x)), cmul(u, h));
}

// ---------------------------------------------------------------------------
// GatedBlock

GatedBlock::GatedBlock(int d, int heads, int ffn_hidden, uint64_t seed, double gate_bias_init)
    : d_(d), heads_(heads) {
  if (d % heads != 0) throw std::invalid_argument("gated block: d % heads != 0");
  Rng rng(seed);
  ln1_.init(d, params_, "block/ln1");
  wq_.init(d, d, rng, params_, "block/q");
  wk_.init(d, d, rng, params_, "block/k");
  wv_.init(d, d, rng, params_, "block/v");
  wo_.init(d, d, rng, params_, "block/o");
  gate1_ = std::make_unique<GruGate>(d, rng.next_u64(), gate_bias_init, params_, "block/gate1");
  ln2_.init(d, params_, "block/ln2");
  ffn1_.init(d, ffn_hidden, rng, params_, "block/ffn1");
  ffn2_.init(ffn_hidden, d, rng, params_, "block/ffn2");
  gate2_ = std::make_unique<GruGate>(d, rng.next_u64(), gate_bias_init, params_, "block/gate2");
}

Var GatedBlock::operator()(const Var& E, int batch, int len) const {
  if (E.cols() != d_ || E.rows() != static_cast<Eigen::Index>(batch) * len)
    throw std::invalid_argument("gated block: input must be (batch*len) x d");
  Var x1 = ln1_(E);
  Var att = wo_(ad::multihead_attention(wq_(x1), wk_(x1), wv_(x1), batch, len, heads_));
  Var e1 = (*gate1_)(E, att);
  Var f = ffn2_(relu(ffn1_(ln2_(e1))));
  return (*gate2_)(e1, f);
}

// ---------------------------------------------------------------------------
// HistoryEncoder

HistoryEncoder::HistoryEncoder(int d, int history_len, Mode mode, uint64_t seed)
    : d_(d), len_(history_len), mode_(mode), enc_(d, Rng::derive_seed(seed, "well_enc")),
      block_(d, 4, 256, Rng::derive_seed(seed, "block")) {
  if (history_len < 1) throw std::invalid_argument("history length must be >= 1");
  Rng rng(Rng::derive_seed(seed, "pos"));
  pos_ = named_param(uniform_init(history_len, d, d, rng), params_, "history/pos");
  for (const auto& p : enc_.params()) params_.push_back(p);
  for (const auto& p : block_.params()) params_.push_back(p);
}

Var HistoryEncoder::feature_batch(const Var& H, const Var& y, int batch) const {
  Var emb = enc_.encode_batch(H, batch * len_);              // (B*L) x d
  Var E = add(emb, tile_rows(pos_, batch));                  // learned positions
  Var mixed = block_(E, batch, len_);                        // (B*L) x d

  auto it = last_rows_.find(batch);
  if (it == last_rows_.end()) {
    std::vector<Eigen::Index> idx(static_cast<size_t>(batch));
    for (int b = 0; b < batch; ++b)
      idx[static_cast<size_t>(b)] = static_cast<Eigen::Index>(b) * len_ + (len_ - 1);
    it = last_rows_.emplace(batch, make_taps(std::move(idx))).first;
  }
  Var h_last = gather_rows(mixed, it->second);               // B x d
  Var e_now = enc_.encode_batch(y, batch);                   // B x d
  if (mode_ == Mode::concat) return concat_cols({e_now, h_last});
  return add(e_now, h_last);
}

HistoryEncoder::Mode history_mode_from_string(const std::string& name) {
  if (name == "concat") return HistoryEncoder::Mode::concat;
  if (name == "add") return HistoryEncoder::Mode::add;
  throw std::invalid_argument("unknown history combination mode: " + name);
}

// ---------------------------------------------------------------------------
// PolicyHead

PolicyHead::PolicyHead(int feature_dim, int action_dim, uint64_t seed, double log_std_min,
                       double log_std_max)
    : action_dim_(action_dim), log_std_min_(log_std_min), log_std_max_(log_std_max) {
  Rng rng(seed);
  fc1_.init(feature_dim, 256, rng, params_, "policy/fc1");
  fc2_.init(256, 256, rng, params_, "policy/fc2");
  mean_.init(256, action_dim, rng, params_, "policy/mean");
  log_std_.init(256, action_dim, rng, params_, "policy/log_std");
}

PolicyHead::Sample PolicyHead::sample(const Var& feature, const Matrix& eps) const {
  if (eps.rows() != feature.rows() || eps.cols() != action_dim_)
    throw std::invalid_argument("policy sample: eps must be batch x action_dim");
  Var x = relu(fc2_(relu(fc1_(feature))));
  Var mu = mean_(x);
  Var log_sigma = clamp_(log_std_(x), log_std_min_, log_std_max_);
  Var eps_c = constant(eps);
  Var z = add(mu, cmul(exp_(log_sigma), eps_c));

  Sample s;
  s.action = tanh_(z);
  // log pi(a) = sum_j [ log N(z_j; mu_j, sigma_j) - log(1 - tanh(z_j)^2) ]
  // with the squash term in the stable form 2*(log 2 - z - softplus(-2z)).
  Matrix gauss_const = (-0.5 * eps.array().square() - 0.5 * std::log(2.0 * M_PI)).matrix();
  Var squash = scale(add_scalar(sub(neg(z), softplus(scale(z, -2.0))), std::log(2.0)), 2.0);
  s.log_prob = rowsum(sub(sub(constant(gauss_const), log_sigma), squash));
  return s;
}

Var PolicyHead::deterministic(const Var& feature) const {
  Var x = relu(fc2_(relu(fc1_(feature))));
  return tanh_(mean_(x));
}

// ---------------------------------------------------------------------------
// QNet / VNet

QNet::QNet(int feature_dim, int action_dim, uint64_t seed) {
  Rng rng(seed);
  fc1_.init(feature_dim + action_dim, 256, rng, params_, "q/fc1");
  fc2_.init(256, 256, rng, params_, "q/fc2");
  out_.init(256, 1, rng, params_, "q/out");
}

Var QNet::operator()(const Var& feature, const Var& action) const {
  Var x = concat_cols({feature, action});
  return out_(relu(fc2_(relu(fc1_(x)))));
}

VNet::VNet(int feature_dim, uint64_t seed) {
  Rng rng(seed);
  fc1_.init(feature_dim, 256, rng, params_, "v/fc1");
  fc2_.init(256, 256, rng, params_, "v/fc2");
  out_.init(256, 1, rng, params_, "v/out");
}

Var VNet::operator()(const Var& feature) const {
  return out_(relu(fc2_(relu(fc1_(feature)))));
}

// ---------------------------------------------------------------------------
// DistillationHeads

DistillationHeads::DistillationHeads(int student_dim, int teacher_dim, uint64_t seed,
                                     int embed_dim, int proj_dim) {
  Rng rng(seed);
  g1_.init(student_dim, embed_dim, rng, trainable_, "dist/g1");
  g2_.init(embed_dim, embed_dim, rng, trainable_, "dist/g2");
  ps_.init(embed_dim, proj_dim, rng, trainable_, "dist/ps");
  v_.init(embed_dim, 1, rng, trainable_, "dist/v");
  pt_.init(teacher_dim, proj_dim, rng, frozen_, "dist/pt");
  for (auto& p : frozen_) p.var.set_requires_grad(false);
}

Var DistillationHeads::student_projection(const Var& student_feature) const {
  Var e = g2_(relu(g1_(student_feature)));
  return ad::l2_normalize_rows(ps_(e));
}

Var DistillationHeads::teacher_projection(const Var& teacher_feature) const {
  return ad::l2_normalize_rows(pt_(teacher_feature));
}

Var DistillationHeads::value_head(const Var& student_feature) const {
  return v_(g2_(relu(g1_(student_feature))));
}

uint64_t DistillationHeads::teacher_hash() const { return ad::params_hash(frozen_); }

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr uint64_t kCheckpointMagic = 0x31544b4343534343ull;  // "CCSCCKT1" bytes
constexpr uint32_t kCheckpointVersion = 1;

uint64_t layout_hash(const ParamList& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : params) {
    h = fnv1a(p.name, h);
    const int64_t r = p.var.rows(), c = p.var.cols();
    h = fnv1a(&r, sizeof(r), h);
    h = fnv1a(&c, sizeof(c), h);
  }
  return h;
}

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
}
}  // namespace

void save_checkpoint(const std::string& path, const ParamList& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path);
  write_pod(out, kCheckpointMagic);
  write_pod(out, kCheckpointVersion);
  write_pod(out, layout_hash(params));
  write_pod(out, static_cast<uint64_t>(params.size()));
  for (const auto& p : params) {
    write_pod(out, static_cast<uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_pod(out, static_cast<int64_t>(p.var.rows()));
    write_pod(out, static_cast<int64_t>(p.var.cols()));
    out.write(reinterpret_cast<const char*>(p.var.value().data()),
              static_cast<std::streamsize>(sizeof(double) * p.var.value().size()));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, ParamList& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  uint64_t magic = 0, hash = 0, count = 0;
  uint32_t version = 0;
  read_pod(in, magic);
  read_pod(in, version);
  read_pod(in, hash);
  read_pod(in, count);
  if (magic != kCheckpointMagic) throw std::runtime_error("checkpoint: bad magic");
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
  if (hash != layout_hash(params))
    throw std::runtime_error("checkpoint: parameter layout does not match");
  if (count != params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
  for (auto& p : params) {
    uint32_t name_len = 0;
    read_pod(in, name_len);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    int64_t rows = 0, cols = 0;
    read_pod(in, rows);
    read_pod(in, cols);
    if (!in || name != p.name || rows != p.var.rows() || cols != p.var.cols())
      throw std::runtime_error("checkpoint: entry mismatch at " + p.name);
    in.read(reinterpret_cast<char*>(p.var.value().data()),
            static_cast<std::streamsize>(sizeof(double) * p.var.value().size()));
    if (!in) throw std::runtime_error("checkpoint: truncated values at " + p.name);
  }
}

}  // namespace ccs::nets
