#include "ccs/ad.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "ccs/hash.hpp"

namespace ccs::ad {

namespace {

int64_t next_id() {
  static int64_t counter = 0;
  return ++counter;
}

std::shared_ptr<Node> make_node(Matrix val, std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->id = next_id();
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) n->parents = std::move(parents);
  return n;
}

bool needs(const std::shared_ptr<Node>& p) { return p->requires_grad; }

}  // namespace

Var constant(Matrix v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->id = next_id();
  return Var(n);
}

Var constant_scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Var param(Matrix v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->id = next_id();
  n->requires_grad = true;
  return Var(n);
}

void accumulate(const std::shared_ptr<Node>& p, const Matrix& d) {
  if (!p->grad_live) {
    p->grad.setZero(p->val.rows(), p->val.cols());
    p->grad_live = true;
  }
  p->grad += d;
}

void backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw std::invalid_argument("backward: loss must be 1x1");
  // Collect the reachable grad-requiring subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.push_back(p.get());
      }
    }
  }
  for (Node* n : order) {
    n->grad.setZero(n->val.rows(), n->val.cols());
    n->grad_live = true;
  }
  // Creation order is a topological order; replay descending.
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });
  loss.node()->grad(0, 0) = 1.0;
  for (Node* n : order) {
    if (n->backprop) n->backprop(*n);
  }
}

Var add(const Var& a, const Var& b) {
  auto n = make_node(a.value() + b.value(), {a.node(), b.node()});
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](Node& self) {
      if (needs(pa)) accumulate(pa, self.grad);
      if (needs(pb)) accumulate(pb, self.grad);
    };
  }
  return Var(n);
}

Var sub(const Var& a, const Var& b) {
  auto n = make_node(a.value() - b.value(), {a.node(), b.node()});
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](Node& self) {
      if (needs(pa)) accumulate(pa, self.grad);
      if (needs(pb)) accumulate(pb, -self.grad);
    };
  }
  return Var(n);
}

Var cmul(const Var& a, const Var& b) {
  auto n = make_node(a.value().cwiseProduct(b.value()), {a.node(), b.node()});
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](Node& self) {
      if (needs(pa)) accumulate(pa, self.grad.cwiseProduct(pb->val));
      if (needs(pb)) accumulate(pb, self.grad.cwiseProduct(pa->val));
    };
  }
  return Var(n);
}

Var matmul(const Var& a, const Var& b) {
  auto n = make_node(a.value() * b.value(), {a.node(), b.node()});
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](Node& self) {
      if (needs(pa)) accumulate(pa, self.grad * pb->val.transpose());
      if (needs(pb)) accumulate(pb, pa->val.transpose() * self.grad);
    };
  }
  return Var(n);
}

Var add_rowvec(const Var& a, const Var& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw std::invalid_argument("add_rowvec: shape");
  Matrix out = a.value();
  out.rowwise() += b.value().row(0);
  auto n = make_node(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](Node& self) {
      if (needs(pa)) accumulate(pa, self.grad);
      if (needs(pb)) accumulate(pb, self.grad.colwise().sum());
    };
  }
  return Var(n);
}

Var mul_rowvec(const Var& a, const Var& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw std::invalid_argument("mul_rowvec: shape");
  Matrix out = (a.value().array().rowwise() * b.value().row(0).array()).matrix();
  auto n = make_node(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](Node& self) {
      if (needs(pa))
        accumulate(pa, (self.grad.array().rowwise() * pb->val.row(0).array()).matrix());
      if (needs(pb))
        accumulate(pb, (self.grad.array() * pa->val.array()).colwise().sum().matrix());
    };
  }
  return Var(n);
}

Var scale(const Var& a, double s) {
  auto n = make_node(a.value() * s, {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa, s](Node& self) { accumulate(pa, self.grad * s); };
  }
  return Var(n);
}

Var add_scalar(const Var& a, double s) {
  auto n = make_node((a.value().array() + s).matrix(), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa](Node& self) { accumulate(pa, self.grad); };
  }
  return Var(n);
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var relu(const Var& a) {
  auto n = make_node(a.value().cwiseMax(0.0), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa](Node& self) {
      accumulate(pa, ((pa->val.array() > 0.0).cast<double>() * self.grad.array()).matrix());
    };
  }
  return Var(n);
}

Var tanh_(const Var& a) {
  auto n = make_node(a.value().array().tanh().matrix(), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    Matrix y = n->val;
    n->backprop = [pa, y](Node& self) {
      accumulate(pa, ((1.0 - y.array().square()) * self.grad.array()).matrix());
    };
  }
  return Var(n);
}

Var sigmoid(const Var& a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  auto n = make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    Matrix y = n->val;
    n->backprop = [pa, y](Node& self) {
      accumulate(pa, (y.array() * (1.0 - y.array()) * self.grad.array()).matrix());
    };
  }
  return Var(n);
}

Var softplus(const Var& a) {
  // log(1+e^x) in the overflow-safe form max(x,0) + log1p(e^{-|x|}).
  Matrix out =
      (a.value().array().max(0.0) + ((-a.value().array().abs()).exp() + 1.0).log()).matrix();
  auto n = make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa](Node& self) {
      accumulate(pa, (self.grad.array() / (1.0 + (-pa->val.array()).exp())).matrix());
    };
  }
  return Var(n);
}

Var exp_(const Var& a) {
  auto n = make_node(a.value().array().exp().matrix(), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    Matrix y = n->val;
    n->backprop = [pa, y](Node& self) { accumulate(pa, y.cwiseProduct(self.grad)); };
  }
  return Var(n);
}

Var log_(const Var& a) {
  auto n = make_node(a.value().array().log().matrix(), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa](Node& self) { accumulate(pa, self.grad.cwiseQuotient(pa->val)); };
  }
  return Var(n);
}

Var square(const Var& a) {
  auto n = make_node(a.value().array().square().matrix(), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa](Node& self) { accumulate(pa, 2.0 * pa->val.cwiseProduct(self.grad)); };
  }
  return Var(n);
}

Var clamp_(const Var& a, double lo, double hi) {
  auto n = make_node(a.value().array().min(hi).max(lo).matrix(), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa, lo, hi](Node& self) {
      Matrix mask = ((pa->val.array() > lo) && (pa->val.array() < hi)).cast<double>().matrix();
      accumulate(pa, mask.cwiseProduct(self.grad));
    };
  }
  return Var(n);
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  auto n = make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa](Node& self) {
      accumulate(pa, Matrix::Constant(pa->val.rows(), pa->val.cols(), self.grad(0, 0)));
    };
  }
  return Var(n);
}

Var mean(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a.value().size());
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() * inv;
  auto n = make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa, inv](Node& self) {
      accumulate(pa, Matrix::Constant(pa->val.rows(), pa->val.cols(), self.grad(0, 0) * inv));
    };
  }
  return Var(n);
}

Var rowsum(const Var& a) {
  Matrix out = a.value().rowwise().sum();
  auto n = make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa](Node& self) {
      accumulate(pa, self.grad * Matrix::Ones(1, pa->val.cols()));
    };
  }
  return Var(n);
}

Var row_softmax(const Var& a) {
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  auto n = make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    Matrix y = n->val;
    n->backprop = [pa, y](Node& self) {
      Matrix d(y.rows(), y.cols());
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const double dot = self.grad.row(r).dot(y.row(r));
        d.row(r) = y.row(r).cwiseProduct(self.grad.row(r)) - dot * y.row(r);
      }
      accumulate(pa, d);
    };
  }
  return Var(n);
}

Var row_log_softmax(const Var& a) {
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    const double lse = m + std::log((out.row(r).array() - m).exp().sum());
    out.row(r).array() -= lse;
  }
  auto n = make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    Matrix y = n->val;  // log-probabilities
    n->backprop = [pa, y](Node& self) {
      Matrix d(y.rows(), y.cols());
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const double gsum = self.grad.row(r).sum();
        d.row(r) = self.grad.row(r) - gsum * y.row(r).array().exp().matrix();
      }
      accumulate(pa, d);
    };
  }
  return Var(n);
}

Var layer_norm_rows(const Var& a, double eps) {
  const Eigen::Index C = a.cols();
  Matrix mu = a.value().rowwise().mean();
  Matrix centered = a.value().colwise() - mu.col(0);
  Matrix var = centered.array().square().rowwise().mean().matrix();
  Matrix istd = (var.array() + eps).rsqrt().matrix();
  Matrix out = (centered.array().colwise() * istd.col(0).array()).matrix();
  auto n = make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    Matrix xhat = n->val;
    n->backprop = [pa, xhat, istd, C](Node& self) {
      // dX = istd/C * (C*dY - sum(dY) - xhat * sum(dY*xhat)), per row.
      Matrix d(xhat.rows(), xhat.cols());
      const double invC = 1.0 / static_cast<double>(C);
      for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
        const double s1 = self.grad.row(r).sum();
        const double s2 = self.grad.row(r).dot(xhat.row(r));
        d.row(r) = (istd(r, 0) * invC *
                    (static_cast<double>(C) * self.grad.row(r).array() - s1 -
                     xhat.row(r).array() * s2))
                       .matrix();
      }
      accumulate(pa, d);
    };
  }
  return Var(n);
}

Var l2_normalize_rows(const Var& a, double eps) {
  Matrix norms = (a.value().rowwise().squaredNorm().array() + eps).sqrt().matrix();
  Matrix out = (a.value().array().colwise() / norms.col(0).array()).matrix();
  auto n = make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    Matrix y = n->val;
    n->backprop = [pa, y, norms](Node& self) {
      Matrix d(y.rows(), y.cols());
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const double dot = self.grad.row(r).dot(y.row(r));
        d.row(r) = (self.grad.row(r) - dot * y.row(r)) / norms(r, 0);
      }
      accumulate(pa, d);
    };
  }
  return Var(n);
}

Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty");
  Eigen::Index rows = xs[0].rows(), cols = 0;
  for (const auto& x : xs) cols += x.cols();
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& x : xs) {
    out.middleCols(c, x.cols()) = x.value();
    c += x.cols();
    parents.push_back(x.node());
  }
  auto n = make_node(std::move(out), parents);
  if (n->requires_grad) {
    std::vector<std::shared_ptr<Node>> all;
    all.reserve(xs.size());
    for (const auto& x : xs) all.push_back(x.node());
    n->backprop = [all](Node& self) {
      Eigen::Index c = 0;
      for (const auto& p : all) {
        if (needs(p)) accumulate(p, self.grad.middleCols(c, p->val.cols()));
        c += p->val.cols();
      }
    };
  }
  return Var(n);
}

Var slice_cols(const Var& a, Eigen::Index c0, Eigen::Index ncols) {
  auto n = make_node(a.value().middleCols(c0, ncols), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa, c0, ncols](Node& self) {
      Matrix d = Matrix::Zero(pa->val.rows(), pa->val.cols());
      d.middleCols(c0, ncols) = self.grad;
      accumulate(pa, d);
    };
  }
  return Var(n);
}

Var mean_rows_grouped(const Var& a, Eigen::Index group) {
  if (a.rows() % group != 0) throw std::invalid_argument("mean_rows_grouped: rows % group != 0");
  const Eigen::Index G = a.rows() / group;
  Matrix out = Matrix::Zero(G, a.cols());
  for (Eigen::Index g = 0; g < G; ++g)
    out.row(g) = a.value().middleRows(g * group, group).colwise().mean();
  auto n = make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa, group, G](Node& self) {
      Matrix d(pa->val.rows(), pa->val.cols());
      const double inv = 1.0 / static_cast<double>(group);
      for (Eigen::Index g = 0; g < G; ++g)
        d.middleRows(g * group, group) = (self.grad.row(g) * inv).replicate(group, 1);
      accumulate(pa, d);
    };
  }
  return Var(n);
}

Var gather_rows(const Var& a, std::shared_ptr<const std::vector<Eigen::Index>> idx) {
  Matrix out(static_cast<Eigen::Index>(idx->size()), a.cols());
  for (size_t r = 0; r < idx->size(); ++r) {
    const Eigen::Index src = (*idx)[r];
    if (src < 0)
      out.row(static_cast<Eigen::Index>(r)).setZero();
    else
      out.row(static_cast<Eigen::Index>(r)) = a.value().row(src);
  }
  auto n = make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa, idx](Node& self) {
      Matrix d = Matrix::Zero(pa->val.rows(), pa->val.cols());
      for (size_t r = 0; r < idx->size(); ++r) {
        const Eigen::Index src = (*idx)[r];
        if (src >= 0) d.row(src) += self.grad.row(static_cast<Eigen::Index>(r));
      }
      accumulate(pa, d);
    };
  }
  return Var(n);
}

Var tile_rows(const Var& a, Eigen::Index times) {
  auto n = make_node(a.value().replicate(times, 1), {a.node()});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa, times](Node& self) {
      const Eigen::Index R = pa->val.rows();
      Matrix d = Matrix::Zero(R, pa->val.cols());
      for (Eigen::Index t = 0; t < times; ++t) d += self.grad.middleRows(t * R, R);
      accumulate(pa, d);
    };
  }
  return Var(n);
}

Var min_elt(const Var& a, const Var& b) {
  auto n = make_node(a.value().cwiseMin(b.value()), {a.node(), b.node()});
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](Node& self) {
      Matrix amask = (pa->val.array() <= pb->val.array()).cast<double>().matrix();
      if (needs(pa)) accumulate(pa, amask.cwiseProduct(self.grad));
      if (needs(pb)) accumulate(pb, ((1.0 - amask.array()) * self.grad.array()).matrix());
    };
  }
  return Var(n);
}

Var stop_grad(const Var& a) { return constant(a.value()); }

Var multihead_attention(const Var& q, const Var& k, const Var& v, int batch, int len, int heads) {
  const Eigen::Index d = q.cols();
  if (d % heads != 0) throw std::invalid_argument("mha: d % heads != 0");
  const Eigen::Index hd = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix out(q.rows(), d);
  auto probs = std::make_shared<std::vector<Matrix>>();  // softmax rows saved per (b,h)
  probs->reserve(static_cast<size_t>(batch) * static_cast<size_t>(heads));
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto Qb = q.value().block(b * len, h * hd, len, hd);
      const auto Kb = k.value().block(b * len, h * hd, len, hd);
      const auto Vb = v.value().block(b * len, h * hd, len, hd);
      Matrix S = (Qb * Kb.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < S.rows(); ++r) {
        const double m = S.row(r).maxCoeff();
        S.row(r) = (S.row(r).array() - m).exp().matrix();
        S.row(r) /= S.row(r).sum();
      }
      out.block(b * len, h * hd, len, hd).noalias() = S * Vb;
      probs->push_back(std::move(S));
    }
  }
  auto n = make_node(std::move(out), {q.node(), k.node(), v.node()});
  if (n->requires_grad) {
    auto pq = q.node(), pk = k.node(), pv = v.node();
    n->backprop = [pq, pk, pv, probs, batch, len, heads, hd, inv_sqrt](Node& self) {
      Matrix dQ = Matrix::Zero(pq->val.rows(), pq->val.cols());
      Matrix dK = Matrix::Zero(pk->val.rows(), pk->val.cols());
      Matrix dV = Matrix::Zero(pv->val.rows(), pv->val.cols());
      size_t pi = 0;
      for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
          const Matrix& P = (*probs)[pi++];
          const auto Qb = pq->val.block(b * len, h * hd, len, hd);
          const auto Kb = pk->val.block(b * len, h * hd, len, hd);
          const auto Vb = pv->val.block(b * len, h * hd, len, hd);
          const auto dO = self.grad.block(b * len, h * hd, len, hd);
          Matrix dP = dO * Vb.transpose();
          dV.block(b * len, h * hd, len, hd).noalias() += P.transpose() * dO;
          Matrix dS(len, len);
          for (Eigen::Index r = 0; r < len; ++r) {
            const double dot = dP.row(r).dot(P.row(r));
            dS.row(r) = P.row(r).cwiseProduct(dP.row(r)) - dot * P.row(r);
          }
          dS *= inv_sqrt;
          dQ.block(b * len, h * hd, len, hd).noalias() += dS * Kb;
          dK.block(b * len, h * hd, len, hd).noalias() += dS.transpose() * Qb;
        }
      }
      if (needs(pq)) accumulate(pq, dQ);
      if (needs(pk)) accumulate(pk, dK);
      if (needs(pv)) accumulate(pv, dV);
    };
  }
  return Var(n);
}

int64_t param_count(const ParamList& params) {
  int64_t n = 0;
  for (const auto& p : params) n += static_cast<int64_t>(p.var.value().size());
  return n;
}

uint64_t params_hash(const ParamList& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : params) {
    h = fnv1a(p.name, h);
    h = fnv1a(p.var.value(), h);
  }
  return h;
}

void copy_params(const ParamList& src, ParamList& dst) {
  if (src.size() != dst.size()) throw std::invalid_argument("copy_params: size mismatch");
  for (size_t i = 0; i < src.size(); ++i) {
    if (src[i].var.value().rows() != dst[i].var.value().rows() ||
        src[i].var.value().cols() != dst[i].var.value().cols())
      throw std::invalid_argument("copy_params: shape mismatch at " + src[i].name);
    dst[i].var.value() = src[i].var.value();
  }
}

void polyak_params(const ParamList& online, ParamList& target, double rate) {
  if (online.size() != target.size()) throw std::invalid_argument("polyak: size mismatch");
  for (size_t i = 0; i < online.size(); ++i) {
    if (online[i].var.value().size() != target[i].var.value().size())
      throw std::invalid_argument("polyak: shape mismatch at " + online[i].name);
    target[i].var.value() = (1.0 - rate) * target[i].var.value() + rate * online[i].var.value();
  }
}

Adam::State& Adam::state_for(Node* n, const Matrix& like) {
  for (auto& [node, st] : states_)
    if (node == n) return st;
  states_.emplace_back(n, State{});
  auto& st = states_.back().second;
  st.m = Matrix::Zero(like.rows(), like.cols());
  st.v = Matrix::Zero(like.rows(), like.cols());
  return st;
}

void Adam::step(ParamList& params) {
  for (auto& p : params) {
    Node* n = p.var.node().get();
    if (!n->grad_live) continue;  // untouched by the last backward
    auto& st = state_for(n, n->val);
    st.t += 1;
    st.m = beta1_ * st.m + (1.0 - beta1_) * n->grad;
    st.v = beta2_ * st.v + (1.0 - beta2_) * n->grad.cwiseProduct(n->grad);
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(st.t));
    n->val.array() -= lr_ * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + eps_);
    n->grad_live = false;
  }
}

}  // namespace ccs::ad
