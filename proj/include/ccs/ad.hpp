#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ccs::ad {

using Matrix = Eigen::MatrixXd;

// One node of the eagerly-built computation graph. Creation order doubles as
// a topological order, so backward() just replays ids descending.
struct Node {
  Matrix val;
  Matrix grad;
  bool requires_grad = false;
  bool grad_live = false;  // grad allocated and zeroed for the current backward
  int64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents
};

// Value-semantics handle on a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  bool valid() const { return static_cast<bool>(n_); }
  const Matrix& value() const { return n_->val; }
  Matrix& value() { return n_->val; }
  const Matrix& grad() const { return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }
  Eigen::Index rows() const { return n_->val.rows(); }
  Eigen::Index cols() const { return n_->val.cols(); }
  double scalar() const { return n_->val(0, 0); }
  std::shared_ptr<Node> node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

Var constant(Matrix v);
Var constant_scalar(double v);
Var param(Matrix v);  // leaf with requires_grad = true

// Accumulates d into p's grad buffer (allocating/zeroing it on first touch).
void accumulate(const std::shared_ptr<Node>& p, const Matrix& d);

// Reverse pass from a 1x1 loss node. Zeroes grads of the reachable subgraph
// first, so param grads are valid until the next backward touching them.
void backward(const Var& loss);

// --- arithmetic ---
Var add(const Var& a, const Var& b);           // same shape
Var sub(const Var& a, const Var& b);
Var cmul(const Var& a, const Var& b);          // elementwise
Var matmul(const Var& a, const Var& b);
Var add_rowvec(const Var& a, const Var& b);    // b: 1 x C, broadcast over rows
Var mul_rowvec(const Var& a, const Var& b);    // b: 1 x C, broadcast over rows
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);

// --- nonlinearities ---
Var relu(const Var& a);
Var tanh_(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var exp_(const Var& a);
Var log_(const Var& a);
Var square(const Var& a);
Var clamp_(const Var& a, double lo, double hi);  // gradient passes inside the range

// --- reductions / structure ---
Var sum(const Var& a);        // 1x1
Var mean(const Var& a);       // 1x1
Var rowsum(const Var& a);     // R x 1
Var row_softmax(const Var& a);
Var row_log_softmax(const Var& a);
Var layer_norm_rows(const Var& a, double eps = 1e-5);  // per-row standardization
Var l2_normalize_rows(const Var& a, double eps = 1e-8);
Var concat_cols(const std::vector<Var>& xs);
Var slice_cols(const Var& a, Eigen::Index c0, Eigen::Index n);
Var mean_rows_grouped(const Var& a, Eigen::Index group);  // (G*g)xC -> GxC average pooling
// Row gather with zero-padding: idx entries of -1 produce zero rows.
Var gather_rows(const Var& a, std::shared_ptr<const std::vector<Eigen::Index>> idx);
Var tile_rows(const Var& a, Eigen::Index times);
Var min_elt(const Var& a, const Var& b);
Var stop_grad(const Var& a);

// Fused multi-head self-attention over B stored sequences of length L.
// q,k,v: (B*L) x d with d = heads * head_dim; returns (B*L) x d.
Var multihead_attention(const Var& q, const Var& k, const Var& v, int batch, int len, int heads);

// --- parameter plumbing ---
struct NamedParam {
  std::string name;
  Var var;
};
using ParamList = std::vector<NamedParam>;

int64_t param_count(const ParamList& params);
uint64_t params_hash(const ParamList& params);
void copy_params(const ParamList& src, ParamList& dst);                  // values only
void polyak_params(const ParamList& online, ParamList& target, double rate);

// Scoped requires_grad=false over a param list (used by actor updates so
// gradient does not spill into critic weights).
class FreezeGuard {
 public:
  explicit FreezeGuard(ParamList& params) : params_(params) {
    for (auto& p : params_) {
      prev_.push_back(p.var.requires_grad());
      p.var.set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    for (size_t i = 0; i < params_.size(); ++i) params_[i].var.set_requires_grad(prev_[i]);
  }

 private:
  ParamList& params_;
  std::vector<bool> prev_;
};

class Adam {
 public:
  explicit Adam(double lr = 3e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamList& params);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  struct State {
    Matrix m, v;
    int64_t t = 0;
  };
  double lr_, beta1_, beta2_, eps_;
  std::vector<std::pair<Node*, State>> states_;
  State& state_for(Node* n, const Matrix& shape_like);
};

}  // namespace ccs::ad
