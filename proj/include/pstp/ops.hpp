#pragma once

// Differentiable primitive ops on Tensor<Real>. Free functions: each op
// computes its forward result, and when a Tape is active and some input
// tracks gradients it records a pullback closure on the tape. Matrix
// products go through Eigen; everything else is plain loops over the
// row-major buffers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pstp/tensor.hpp"

namespace pstp {

template <typename Real>
using MatMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Real>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename Real>
inline bool recording(const Tensor<Real>& a) {
  return Tape<Real>::active() != nullptr && a.requires_grad();
}
template <typename Real>
inline bool recording(const Tensor<Real>& a, const Tensor<Real>& b) {
  return Tape<Real>::active() != nullptr && (a.requires_grad() || b.requires_grad());
}

template <typename Real>
inline bool all_finite(const Tensor<Real>& t) {
  for (Real v : t.value())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// Leading dimensions collapsed to rows, last dimension as columns.
inline std::int64_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }
inline std::int64_t lead_rows(const Shape& s) {
  return numel(s) / (last_dim(s) == 0 ? 1 : last_dim(s));
}

template <typename Real>
inline void require_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
}

// ---------------------------------------------------------------- elementwise

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape("add", a, b);
  Tensor<Real> out = Tensor<Real>::zeros(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (recording(a, b)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([a, b, out]() mutable {
      const auto& g = out.grad();
      if (a.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) b.grad()[i] += g[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape("mul", a, b);
  Tensor<Real> out = Tensor<Real>::zeros(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (recording(a, b)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([a, b, out]() mutable {
      const auto& g = out.grad();
      if (a.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i] * b.data()[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) b.grad()[i] += g[i] * a.data()[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  Tensor<Real> out = Tensor<Real>::zeros(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (recording(a)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([a, out, c]() mutable {
      const auto& g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i] * c;
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> tanh(const Tensor<Real>& a) {
  Tensor<Real> out = Tensor<Real>::zeros(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = std::tanh(a.data()[i]);
  if (recording(a)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([a, out]() mutable {
      const auto& g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Real y = out.data()[i];
        a.grad()[i] += g[i] * (Real(1) - y * y);
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  Tensor<Real> out = Tensor<Real>::zeros(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > Real(0) ? a.data()[i] : Real(0);
  if (recording(a)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([a, out]() mutable {
      const auto& g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a.data()[i] > Real(0)) a.grad()[i] += g[i];
    });
  }
  return out;
}

// x: [... x D] plus a row vector [1 x D] broadcast over all leading rows.
template <typename Real>
Tensor<Real> add_rowvec(const Tensor<Real>& x, const Tensor<Real>& b) {
  const std::int64_t d = last_dim(x.shape());
  if (b.size() != d)
    throw ShapeError("add_rowvec: row vector " + shape_str(b.shape()) +
                     " does not match last dim of " + shape_str(x.shape()));
  Tensor<Real> out = Tensor<Real>::zeros(x.shape());
  const std::int64_t rows = lead_rows(x.shape());
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < d; ++c)
      out.data()[r * d + c] = x.data()[r * d + c] + b.data()[c];
  if (recording(x, b)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([x, b, out, rows, d]() mutable {
      const auto& g = out.grad();
      if (x.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) x.grad()[i] += g[i];
      if (b.requires_grad())
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t c = 0; c < d; ++c) b.grad()[c] += g[static_cast<std::size_t>(r * d + c)];
    });
  }
  return out;
}

// [1 x D] -> [n x D]; the pullback sums row gradients back into the source.
template <typename Real>
Tensor<Real> repeat_rows(const Tensor<Real>& row, std::int64_t n) {
  if (row.rank() != 2 || row.dim(0) != 1)
    throw ShapeError("repeat_rows: expected [1xD], got " + shape_str(row.shape()));
  const std::int64_t d = row.dim(1);
  Tensor<Real> out = Tensor<Real>::zeros(Shape{n, d});
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < d; ++c) out.data()[r * d + c] = row.data()[c];
  if (recording(row)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([row, out, n, d]() mutable {
      const auto& g = out.grad();
      for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t c = 0; c < d; ++c) row.grad()[c] += g[static_cast<std::size_t>(r * d + c)];
    });
  }
  return out;
}

// ------------------------------------------------------------- linear algebra

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<Real> out = Tensor<Real>::zeros(Shape{m, n});
  {
    ConstMatMap<Real> A(a.data(), m, k), B(b.data(), k, n);
    MatMap<Real> O(out.data(), m, n);
    O.noalias() = A * B;
  }
  if (recording(a, b)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([a, b, out, m, k, n]() mutable {
      ConstMatMap<Real> G(out.grad().data(), m, n);
      if (a.requires_grad()) {
        ConstMatMap<Real> B(b.data(), k, n);
        MatMap<Real> GA(a.grad().data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (b.requires_grad()) {
        ConstMatMap<Real> A(a.data(), m, k);
        MatMap<Real> GB(b.grad().data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  if (a.rank() != 2)
    throw ShapeError("transpose: expected rank-2 tensor, got " + shape_str(a.shape()));
  const std::int64_t m = a.dim(0), n = a.dim(1);
  Tensor<Real> out = Tensor<Real>::zeros(Shape{n, m});
  {
    ConstMatMap<Real> A(a.data(), m, n);
    MatMap<Real> O(out.data(), n, m);
    O = A.transpose();
  }
  if (recording(a)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([a, out, m, n]() mutable {
      ConstMatMap<Real> G(out.grad().data(), n, m);
      MatMap<Real> GA(a.grad().data(), m, n);
      GA += G.transpose();
    });
  }
  return out;
}

// -------------------------------------------------------- softmax and pooling

// Softmax over the last dimension, computed with max subtraction so that
// large logits do not overflow.
template <typename Real>
Tensor<Real> softmax_lastdim(const Tensor<Real>& x) {
  const std::int64_t d = last_dim(x.shape());
  if (d <= 0) throw ShapeError("softmax_lastdim: empty last dim in " + shape_str(x.shape()));
  const std::int64_t rows = lead_rows(x.shape());
  Tensor<Real> out = Tensor<Real>::zeros(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * d;
    Real* yr = out.data() + r * d;
    Real m = xr[0];
    for (std::int64_t c = 1; c < d; ++c) m = std::max(m, xr[c]);
    Real sum = Real(0);
    for (std::int64_t c = 0; c < d; ++c) {
      yr[c] = std::exp(xr[c] - m);
      sum += yr[c];
    }
    for (std::int64_t c = 0; c < d; ++c) yr[c] /= sum;
  }
  if (recording(x)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([x, out, rows, d]() mutable {
      for (std::int64_t r = 0; r < rows; ++r) {
        const Real* yr = out.data() + r * d;
        const Real* gy = out.grad().data() + r * d;
        Real* gx = x.grad().data() + r * d;
        Real dot = Real(0);
        for (std::int64_t c = 0; c < d; ++c) dot += gy[c] * yr[c];
        for (std::int64_t c = 0; c < d; ++c) gx[c] += yr[c] * (gy[c] - dot);
      }
    });
  }
  return out;
}

// Mean over one axis; the axis is kept with extent 1.
template <typename Real>
Tensor<Real> mean_axis(const Tensor<Real>& x, std::int64_t axis) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("mean_axis: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  const std::int64_t n = x.dim(axis);
  if (n == 0) throw ShapeError("mean_axis: empty axis in " + shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape oshape = x.shape();
  oshape[static_cast<std::size_t>(axis)] = 1;
  Tensor<Real> out = Tensor<Real>::zeros(oshape);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t i = 0; i < inner; ++i)
        out.data()[o * inner + i] += x.data()[(o * n + j) * inner + i];
  const Real inv = Real(1) / static_cast<Real>(n);
  for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] *= inv;
  if (recording(x)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([x, out, outer, n, inner, inv]() mutable {
      const auto& g = out.grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t j = 0; j < n; ++j)
          for (std::int64_t i = 0; i < inner; ++i)
            x.grad()[static_cast<std::size_t>((o * n + j) * inner + i)] +=
                g[static_cast<std::size_t>(o * inner + i)] * inv;
    });
  }
  return out;
}

// ----------------------------------------------------- reshaping and indexing

// Copies into a tensor of the new shape (same element count, same order).
template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<Real> out = Tensor<Real>::from_data(std::move(shape), x.value());
  if (recording(x)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([x, out]() mutable {
      const auto& g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) x.grad()[i] += g[i];
    });
  }
  return out;
}

// Selects blocks along axis 0; out.shape = {idx.size(), x.shape[1:]}. The
// pullback scatter-adds block gradients back, so repeated indices accumulate.
template <typename Real>
Tensor<Real> gather_axis0(const Tensor<Real>& x, const std::vector<std::int64_t>& idx) {
  if (x.rank() < 1) throw ShapeError("gather_axis0: rank-0 input");
  const std::int64_t n0 = x.dim(0);
  std::int64_t block = 1;
  for (std::int64_t i = 1; i < x.rank(); ++i) block *= x.dim(i);
  for (auto i : idx)
    if (i < 0 || i >= n0)
      throw ShapeError("gather_axis0: index " + std::to_string(i) + " out of range for " +
                       shape_str(x.shape()));
  Shape oshape = x.shape();
  oshape[0] = static_cast<std::int64_t>(idx.size());
  Tensor<Real> out = Tensor<Real>::zeros(oshape);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(x.data() + idx[r] * block, block, out.data() + static_cast<std::int64_t>(r) * block);
  if (recording(x)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([x, out, idx, block]() mutable {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const Real* g = out.grad().data() + static_cast<std::int64_t>(r) * block;
        Real* gx = x.grad().data() + idx[r] * block;
        for (std::int64_t i = 0; i < block; ++i) gx[i] += g[i];
      }
    });
  }
  return out;
}

// Concatenation along axis 0. All parts must agree on trailing dims.
template <typename Real>
Tensor<Real> concat_axis0(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw ShapeError("concat_axis0: no tensors given");
  Shape tail = parts[0].shape();
  std::int64_t total0 = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<std::int64_t>(tail.size()))
      throw ShapeError("concat_axis0: rank mismatch between " + shape_str(tail) + " and " +
                       shape_str(p.shape()));
    for (std::size_t i = 1; i < tail.size(); ++i)
      if (p.shape()[i] != tail[i])
        throw ShapeError("concat_axis0: trailing dims differ between " + shape_str(tail) +
                         " and " + shape_str(p.shape()));
    total0 += p.dim(0);
  }
  Shape oshape = tail;
  oshape[0] = total0;
  Tensor<Real> out = Tensor<Real>::zeros(oshape);
  std::int64_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.data(), p.size(), out.data() + off);
    off += p.size();
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (Tape<Real>::active() && any) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([parts, out]() mutable {
      std::int64_t off = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          const Real* g = out.grad().data() + off;
          for (std::int64_t i = 0; i < p.size(); ++i) p.grad()[static_cast<std::size_t>(i)] += g[i];
        }
        off += p.size();
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> concat_axis0(std::initializer_list<Tensor<Real>> parts) {
  return concat_axis0(std::vector<Tensor<Real>>(parts));
}

// Concatenation along the last axis; all parts agree on leading dims.
template <typename Real>
Tensor<Real> concat_lastdim(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim: no tensors given");
  const std::int64_t rows = lead_rows(parts[0].shape());
  std::int64_t dtot = 0;
  for (const auto& p : parts) {
    if (lead_rows(p.shape()) != rows)
      throw ShapeError("concat_lastdim: leading dims differ between " +
                       shape_str(parts[0].shape()) + " and " + shape_str(p.shape()));
    dtot += last_dim(p.shape());
  }
  Shape oshape = parts[0].shape();
  oshape.back() = dtot;
  Tensor<Real> out = Tensor<Real>::zeros(oshape);
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t d = last_dim(p.shape());
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy_n(p.data() + r * d, d, out.data() + r * dtot + off);
    off += d;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (Tape<Real>::active() && any) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([parts, out, rows, dtot]() mutable {
      std::int64_t off = 0;
      for (auto& p : parts) {
        const std::int64_t d = last_dim(p.shape());
        if (p.requires_grad())
          for (std::int64_t r = 0; r < rows; ++r) {
            const Real* g = out.grad().data() + r * dtot + off;
            Real* gp = p.grad().data() + r * d;
            for (std::int64_t c = 0; c < d; ++c) gp[c] += g[c];
          }
        off += d;
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> concat_lastdim(std::initializer_list<Tensor<Real>> parts) {
  return concat_lastdim(std::vector<Tensor<Real>>(parts));
}

// Columns [start, start+len) of the last axis.
template <typename Real>
Tensor<Real> slice_lastdim(const Tensor<Real>& x, std::int64_t start, std::int64_t len) {
  const std::int64_t d = last_dim(x.shape());
  if (start < 0 || len <= 0 || start + len > d)
    throw ShapeError("slice_lastdim: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of range for " + shape_str(x.shape()));
  const std::int64_t rows = lead_rows(x.shape());
  Shape oshape = x.shape();
  oshape.back() = len;
  Tensor<Real> out = Tensor<Real>::zeros(oshape);
  for (std::int64_t r = 0; r < rows; ++r)
    std::copy_n(x.data() + r * d + start, len, out.data() + r * len);
  if (recording(x)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([x, out, rows, d, start, len]() mutable {
      for (std::int64_t r = 0; r < rows; ++r) {
        const Real* g = out.grad().data() + r * len;
        Real* gx = x.grad().data() + r * d + start;
        for (std::int64_t c = 0; c < len; ++c) gx[c] += g[c];
      }
    });
  }
  return out;
}

// ------------------------------------------------------------------- the loss

// Negative log-likelihood of `label` under softmax(logits); logits are a
// single row ([1xC] or [C]). Stable log-sum-exp; the pullback is the
// classic softmax-minus-one-hot.
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, std::int64_t label) {
  const std::int64_t c = last_dim(logits.shape());
  if (lead_rows(logits.shape()) != 1)
    throw ShapeError("cross_entropy: expected a single logits row, got " +
                     shape_str(logits.shape()));
  if (label < 0 || label >= c)
    throw ShapeError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(c) + " classes");
  const Real* l = logits.data();
  Real m = l[0];
  for (std::int64_t i = 1; i < c; ++i) m = std::max(m, l[i]);
  Real sum = Real(0);
  for (std::int64_t i = 0; i < c; ++i) sum += std::exp(l[i] - m);
  Tensor<Real> out = Tensor<Real>::scalar(std::log(sum) + m - l[label]);
  if (recording(logits)) {
    out.set_requires_grad(true);
    Tape<Real>::active()->record([logits, out, label, c, m, sum]() mutable {
      const Real g = out.grad()[0];
      for (std::int64_t i = 0; i < c; ++i) {
        const Real p = std::exp(logits.data()[i] - m) / sum;
        logits.grad()[static_cast<std::size_t>(i)] +=
            g * (p - (i == label ? Real(1) : Real(0)));
      }
    });
  }
  return out;
}

}  // namespace pstp
