#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ccs/ad.hpp"
#include "ccs/grid.hpp"
#include "ccs/rng.hpp"

namespace ccs::nets {

using ad::Matrix;
using ad::ParamList;
using ad::Var;

// U(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization for all layers.
Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in, Rng& rng);

// Dense layer on row-major features: x (B x in) -> x W + b (B x out).
struct Linear {
  Var W, b;
  void init(int in, int out, Rng& rng, ParamList& reg, const std::string& name);
  Var operator()(const Var& x) const;
};

// Per-row standardization with learnable scale and shift.
struct LayerNorm {
  Var gamma, beta;
  void init(int dim, ParamList& reg, const std::string& name);
  Var operator()(const Var& x) const;
};

// 1-D convolution (kernel 3, zero padding) over the 9 intra-interval samples,
// ReLU, then average pooling over samples. Output: one d-vector per
// observation. d is 64 for single-stream variants, 128 for teacher-student.
class WellEncoder {
 public:
  WellEncoder(int d, uint64_t seed);

  Var encode(const Var& y) const { return encode_batch(y, 1); }  // 9x30 -> 1xd
  Var encode_batch(const Var& ys, int batch) const;              // (B*9)x30 -> Bxd

  int dim() const { return d_; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }

 private:
  int d_;
  Linear conv_;
  ParamList params_;
  // kernel-tap row gathers per batch size (offset -1 rows read as zeros)
  mutable std::map<int, std::array<std::shared_ptr<const std::vector<Eigen::Index>>, 3>> taps_;
};

// Four 3-D convolutions (kernel 3^3, lateral stride 2, full-depth stride 1,
// channels 2 -> 8 -> 16 -> 32 -> 64) followed by global average pooling, so
// the 64-dim output is independent of the lateral grid size.
class SpatialEncoder {
 public:
  SpatialEncoder(const GridGeometry& grid, uint64_t seed);

  // Input rows are cells in grid order, columns the 2 field channels.
  Var encode(const Var& field) const { return encode_batch(field, 1); }  // (n x 2) -> 1x64
  Var encode_batch(const Var& fields, int batch) const;                  // (B*n x 2) -> Bx64

  int dim() const { return 64; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }

 private:
  struct Level {
    int in_nx, in_ny, in_nz;
    int out_nx, out_ny, out_nz;
    Linear conv;
    // 27 neighbor gathers for batch 1; larger batches derived and cached
    std::vector<std::shared_ptr<const std::vector<Eigen::Index>>> taps;
  };
  const std::vector<std::shared_ptr<const std::vector<Eigen::Index>>>& taps_for(
      const Level& lvl, int batch) const;

  std::vector<Level> levels_;
  ParamList params_;
  mutable std::map<std::pair<int, int>,
                   std::vector<std::shared_ptr<const std::vector<Eigen::Index>>>>
      batch_taps_;  // keyed by (level, batch)
};

// GRU-style gate for residual pathways: treating x as the previous state and
// y as the candidate input,
//   r = sigmoid(W_r y + U_r x), u = sigmoid(W_u y + U_u x - b_g),
//   h~ = tanh(W_h y + U_h (r*x)), out = (1-u)*x + u*h~.
// b_g starts at 2 so the block opens near the identity.
class GruGate {
 public:
  GruGate(int d, uint64_t seed, double gate_bias_init, ParamList& reg, const std::string& name);
  Var operator()(const Var& x, const Var& y) const;

 private:
  Var wr_, ur_, wu_, uu_, wh_, uh_, bg_;
};

// Pre-LN transformer block with GRU-gated residuals on both sublayers:
//   E~ = Gate(E, MHA(LN(E))), out = Gate(E~, FFN(LN(E~))).
class GatedBlock {
 public:
  GatedBlock(int d, int heads, int ffn_hidden, uint64_t seed, double gate_bias_init = 2.0);

  Var operator()(const Var& E, int batch, int len) const;  // (B*L x d) -> (B*L x d)

  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }

 private:
  int d_, heads_;
  LayerNorm ln1_, ln2_;
  Linear wq_, wk_, wv_, wo_, ffn1_, ffn2_;
  std::unique_ptr<GruGate> gate1_, gate2_;
  ParamList params_;
};

// History feature: the shared well encoder embeds each stored block, a
// learned position embedding is added, one gated block mixes the sequence,
// and the last position is combined with the current-observation embedding.
class HistoryEncoder {
 public:
  enum class Mode { concat, add };  // concat -> (2d,), add -> (d,)

  HistoryEncoder(int d, int history_len, Mode mode, uint64_t seed);

  // H: (B*L*9) x 30 stacked chronological blocks; y: (B*9) x 30 current obs.
  Var feature_batch(const Var& H, const Var& y, int batch) const;  // B x feature_dim
  Var feature(const Var& H, const Var& y) const { return feature_batch(H, y, 1); }

  int feature_dim() const { return mode_ == Mode::concat ? 2 * d_ : d_; }
  int history_len() const { return len_; }
  const WellEncoder& well_encoder() const { return enc_; }
  WellEncoder& well_encoder() { return enc_; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }

 private:
  int d_, len_;
  Mode mode_;
  WellEncoder enc_;
  GatedBlock block_;
  Var pos_;  // L x d learned additive position embedding
  ParamList params_;
  mutable std::map<int, std::shared_ptr<const std::vector<Eigen::Index>>> last_rows_;
};

HistoryEncoder::Mode history_mode_from_string(const std::string& name);

// Two 256-wide layers producing mean and clamped log-std per action; actions
// are tanh-squashed with the change-of-variables term in the log-density.
class PolicyHead {
 public:
  PolicyHead(int feature_dim, int action_dim, uint64_t seed, double log_std_min = -20.0,
             double log_std_max = 2.0);

  struct Sample {
    Var action;    // B x action_dim, in (-1,1)
    Var log_prob;  // B x 1
  };

  // eps: externally drawn standard normals (B x action_dim), kept constant in
  // the graph so the reparameterized gradient flows through mean and std.
  Sample sample(const Var& feature, const Matrix& eps) const;
  Var deterministic(const Var& feature) const;  // tanh(mean)

  int action_dim() const { return action_dim_; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }

 private:
  int action_dim_;
  double log_std_min_, log_std_max_;
  Linear fc1_, fc2_, mean_, log_std_;
  ParamList params_;
};

// State-action value head: concat(feature, action) -> 256 -> 256 -> 1.
class QNet {
 public:
  QNet(int feature_dim, int action_dim, uint64_t seed);

  Var operator()(const Var& feature, const Var& action) const;  // B x 1

  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }

 private:
  Linear fc1_, fc2_, out_;
  ParamList params_;
};

// State value head used by the latent-space actor-critic: feature -> 256 ->
// 256 -> 1.
class VNet {
 public:
  VNet(int feature_dim, uint64_t seed);

  Var operator()(const Var& feature) const;  // B x 1

  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }

 private:
  Linear fc1_, fc2_, out_;
  ParamList params_;
};

// Distillation heads: g_dist maps the student feature to the shared
// embedding space, p_s projects it (trainable), p_t projects the teacher
// feature (frozen at initialization), and a scalar head aligns values.
// Projections are L2-normalized rows, ready for cosine similarity.
class DistillationHeads {
 public:
  DistillationHeads(int student_dim, int teacher_dim, uint64_t seed, int embed_dim = 128,
                    int proj_dim = 64);

  Var student_projection(const Var& student_feature) const;  // B x proj, unit rows
  Var teacher_projection(const Var& teacher_feature) const;  // B x proj, unit rows
  Var value_head(const Var& student_feature) const;          // B x 1

  ParamList& trainable_params() { return trainable_; }       // excludes p_t
  const ParamList& teacher_params() const { return frozen_; }
  uint64_t teacher_hash() const;

 private:
  Linear g1_, g2_, ps_, pt_, v_;
  ParamList trainable_, frozen_;
};

// Checkpoints: binary parameter dump with an embedded manifest (format
// version, parameter names and shapes, layout hash). Loading verifies the
// manifest and restores values bitwise.
void save_checkpoint(const std::string& path, const ParamList& params);
void load_checkpoint(const std::string& path, ParamList& params);  // throws on mismatch

}  // namespace ccs::nets
