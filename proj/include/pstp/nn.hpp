#pragma once

// Trainable building blocks on top of the tensor ops: parameter registry,
// linear layer, projection-free scaled-dot attention, multi-head attention
// with learned projections, Adam, and a central-difference gradient checker.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "pstp/ops.hpp"
#include "pstp/tensor.hpp"

namespace pstp {

// All trainable tensors of a model, in registration order. Single-writer:
// the registry (and the tape it feeds) belong to one training thread.
template <typename Real>
class ParamRegistry {
 public:
  Tensor<Real> add(const std::string& name, Tensor<Real> t) {
    if (index_.count(name)) throw ConfigError("parameter registered twice: " + name);
    t.set_requires_grad(true);
    index_[name] = params_.size();
    names_.push_back(name);
    params_.push_back(t);
    return t;
  }

  std::size_t count() const { return params_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  Tensor<Real>& param(std::size_t i) { return params_[i]; }
  const Tensor<Real>& param(std::size_t i) const { return params_[i]; }

  Tensor<Real>& by_name(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return params_[it->second];
  }

  // Pointers to every registered tensor, in registration order.
  std::vector<Tensor<Real>*> params() {
    std::vector<Tensor<Real>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::int64_t total_scalars() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  // Scalar counts keyed by the name prefix before the first '.', i.e. the
  // owning module.
  std::map<std::string, std::int64_t> scalars_by_module() const {
    std::map<std::string, std::int64_t> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const std::string module = names_[i].substr(0, names_[i].find('.'));
      out[module] += params_[i].size();
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor<Real>> params_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Fully connected layer: x [n x d_in] -> x W + b with W [d_in x d_out].
// W ~ U(-s, s), s = sqrt(6 / (d_in + d_out)); b starts at zero.
template <typename Real>
class LinearLayer {
 public:
  LinearLayer() = default;

  LinearLayer(ParamRegistry<Real>& reg, const std::string& name, std::int64_t d_in,
              std::int64_t d_out, std::mt19937_64& rng) {
    if (d_in <= 0 || d_out <= 0)
      throw ConfigError("linear layer " + name + ": dims must be positive");
    const double s = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
    std::uniform_real_distribution<double> dist(-s, s);
    std::vector<Real> w(static_cast<std::size_t>(d_in * d_out));
    for (auto& x : w) x = static_cast<Real>(dist(rng));
    w_ = reg.add(name + ".weight", Tensor<Real>::from_data(Shape{d_in, d_out}, std::move(w)));
    b_ = reg.add(name + ".bias", Tensor<Real>::zeros(Shape{1, d_out}));
  }

  Tensor<Real> forward(const Tensor<Real>& x) const { return add_rowvec(matmul(x, w_), b_); }

  Tensor<Real>& weight() { return w_; }
  Tensor<Real>& bias() { return b_; }
  const Tensor<Real>& weight() const { return w_; }
  const Tensor<Real>& bias() const { return b_; }

 private:
  Tensor<Real> w_, b_;
};

template <typename Real>
struct Attention {
  Tensor<Real> out;      // [n_q x d_v]
  Tensor<Real> weights;  // [n_q x n_k]; rows sum to 1
};

// Projection-free attention: softmax(q k^T / sqrt(d)) v, where d is the
// feature width of the queries/keys. No learned parameters.
template <typename Real>
Attention<Real> scaled_dot_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                                     const Tensor<Real>& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw ShapeError("scaled_dot_attention: rank-2 tensors required");
  if (q.dim(1) != k.dim(1))
    throw ShapeError("scaled_dot_attention: query " + shape_str(q.shape()) + " vs key " +
                     shape_str(k.shape()));
  if (k.dim(0) != v.dim(0))
    throw ShapeError("scaled_dot_attention: key " + shape_str(k.shape()) + " vs value " +
                     shape_str(v.shape()));
  const Real inv = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(q.dim(1))));
  Tensor<Real> logits = scale(matmul(q, transpose(k)), inv);
  Tensor<Real> w = softmax_lastdim(logits);
  return {matmul(w, v), w};
}

// Standard multi-head attention with one learned D x D projection for each of
// query, key, value and output. No residual connection here; callers add
// their own. avg_weights is the plain (untracked) mean of the per-head
// attention weights.
template <typename Real>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;

  MultiHeadAttention(ParamRegistry<Real>& reg, const std::string& name, std::int64_t d,
                     std::int64_t heads, std::mt19937_64& rng)
      : d_(d), heads_(heads) {
    if (heads <= 0) throw ConfigError("attention " + name + ": heads must be positive");
    if (d % heads != 0)
      throw ConfigError("attention " + name + ": feature dim " + std::to_string(d) +
                        " is not divisible by " + std::to_string(heads) + " heads");
    wq_ = LinearLayer<Real>(reg, name + ".wq", d, d, rng);
    wk_ = LinearLayer<Real>(reg, name + ".wk", d, d, rng);
    wv_ = LinearLayer<Real>(reg, name + ".wv", d, d, rng);
    wo_ = LinearLayer<Real>(reg, name + ".wo", d, d, rng);
  }

  Attention<Real> forward(const Tensor<Real>& q, const Tensor<Real>& k,
                          const Tensor<Real>& v) const {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != d_ || k.dim(1) != d_ ||
        v.dim(1) != d_ || k.dim(0) != v.dim(0))
      throw ShapeError("multi_head_attention: bad shapes q=" + shape_str(q.shape()) +
                       " k=" + shape_str(k.shape()) + " v=" + shape_str(v.shape()));
    const std::int64_t dh = d_ / heads_;
    const std::int64_t nq = q.dim(0), nk = k.dim(0);
    Tensor<Real> Q = wq_.forward(q), K = wk_.forward(k), V = wv_.forward(v);
    std::vector<Tensor<Real>> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads_));
    Tensor<Real> avg = Tensor<Real>::zeros(Shape{nq, nk});
    for (std::int64_t h = 0; h < heads_; ++h) {
      Tensor<Real> qh = slice_lastdim(Q, h * dh, dh);
      Tensor<Real> kh = slice_lastdim(K, h * dh, dh);
      Tensor<Real> vh = slice_lastdim(V, h * dh, dh);
      Attention<Real> att = scaled_dot_attention(qh, kh, vh);
      head_outs.push_back(att.out);
      for (std::int64_t i = 0; i < avg.size(); ++i) avg.data()[i] += att.weights.data()[i];
    }
    const Real inv = Real(1) / static_cast<Real>(heads_);
    for (std::int64_t i = 0; i < avg.size(); ++i) avg.data()[i] *= inv;
    return {wo_.forward(concat_lastdim(head_outs)), avg};
  }

  std::int64_t dim() const { return d_; }
  std::int64_t heads() const { return heads_; }
  LinearLayer<Real>& wq() { return wq_; }
  LinearLayer<Real>& wk() { return wk_; }
  LinearLayer<Real>& wv() { return wv_; }
  LinearLayer<Real>& wo() { return wo_; }

 private:
  std::int64_t d_ = 0, heads_ = 0;
  LinearLayer<Real> wq_, wk_, wv_, wo_;
};

// Adam with bias correction. Moment buffers live in the model's precision;
// the per-element update is computed in double.
template <typename Real>
class Adam {
 public:
  explicit Adam(ParamRegistry<Real>& reg, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : reg_(&reg), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(reg.count());
    v_.resize(reg.count());
    for (std::size_t i = 0; i < reg.count(); ++i) {
      m_[i].assign(static_cast<std::size_t>(reg.param(i).size()), Real(0));
      v_[i].assign(static_cast<std::size_t>(reg.param(i).size()), Real(0));
    }
  }

  void step(double lr) {
    if (lr < 0) throw ConfigError("adam: negative learning rate");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < reg_->count(); ++i) {
      Tensor<Real>& p = reg_->param(i);
      const auto& g = p.grad();
      for (std::size_t j = 0; j < g.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        const double m = beta1_ * static_cast<double>(m_[i][j]) + (1.0 - beta1_) * gj;
        const double v = beta2_ * static_cast<double>(v_[i][j]) + (1.0 - beta2_) * gj * gj;
        m_[i][j] = static_cast<Real>(m);
        v_[i][j] = static_cast<Real>(v);
        const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + eps_);
        p.value()[j] = static_cast<Real>(static_cast<double>(p.value()[j]) - update);
      }
    }
  }

  std::int64_t t() const { return t_; }
  void set_t(std::int64_t t) { t_ = t; }
  std::vector<Real>& m(std::size_t i) { return m_[i]; }
  std::vector<Real>& v(std::size_t i) { return v_[i]; }

 private:
  ParamRegistry<Real>* reg_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<Real>> m_, v_;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central-difference check of d(f)/d(x) against the tape gradient. f must
// re-read x on every call and return a scalar. Relative error per element:
// |g_a - g_n| / max(1e-8, |g_a| + |g_n|).
template <typename Real>
GradCheckReport grad_check(const std::function<Tensor<Real>()>& f, Tensor<Real>& x,
                           double h = 1e-3) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tape<Real> tape;
  {
    TapeScope<Real> scope(tape);
    Tensor<Real> loss = f();
    if (loss.size() != 1) throw ShapeError("grad_check: f must return a scalar");
    tape.backward(loss);
  }
  std::vector<Real> analytic = x.grad();
  GradCheckReport rep;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const Real orig = x.value()[static_cast<std::size_t>(i)];
    x.value()[static_cast<std::size_t>(i)] = orig + static_cast<Real>(h);
    const double lp = static_cast<double>(f().value()[0]);
    x.value()[static_cast<std::size_t>(i)] = orig - static_cast<Real>(h);
    const double lm = static_cast<double>(f().value()[0]);
    x.value()[static_cast<std::size_t>(i)] = orig;
    const double gn = (lp - lm) / (2.0 * h);
    const double ga = static_cast<double>(analytic[static_cast<std::size_t>(i)]);
    const double rel = std::abs(ga - gn) / std::max(1e-8, std::abs(ga) + std::abs(gn));
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
      rep.analytic = ga;
      rep.numeric = gn;
    }
  }
  return rep;
}

// Same check across several tensors (parameters and inputs of a model).
template <typename Real>
GradCheckReport grad_check_many(const std::function<Tensor<Real>()>& f,
                                std::vector<Tensor<Real>*> xs, double h = 1e-3) {
  GradCheckReport worst;
  std::int64_t base = 0;
  for (Tensor<Real>* x : xs) {
    GradCheckReport r = grad_check<Real>(f, *x, h);
    if (r.max_rel_err > worst.max_rel_err) {
      worst = r;
      worst.worst_index += base;
    }
    base += x->size();
  }
  return worst;
}

}  // namespace pstp
