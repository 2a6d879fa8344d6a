#include "widenet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

#include "widenet/rng.hpp"

namespace widenet {

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ')';
  return out.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

// ---- Tensor -------------------------------------------------------------

namespace {

using Data = std::shared_ptr<detail::TensorData>;

Data make_data(Shape shape, std::vector<double> values, bool requires_grad) {
  auto d = std::make_shared<detail::TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  d->requires_grad = requires_grad;
  if (requires_grad) d->grad.assign(d->values.size(), 0.0);
  return d;
}

}  // namespace

detail::TensorData& Tensor::ref() const {
  if (!d_) throw Error("tensor: use of a default-constructed handle");
  return *d_;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(shape_size(shape), 0.0);
  return Tensor(make_data(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(shape_size(shape), value);
  return Tensor(make_data(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_data(Shape{}, std::vector<double>{value}, requires_grad));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  if (shape_size(shape) != values.size())
    throw ShapeError("from_values: shape " + shape_str(shape) + " wants " +
                     std::to_string(shape_size(shape)) + " elements, got " +
                     std::to_string(values.size()));
  return Tensor(make_data(std::move(shape), std::move(values), requires_grad));
}

const Shape& Tensor::shape() const { return ref().shape; }

std::size_t Tensor::size() const { return ref().values.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size())
    throw ShapeError("dim: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  return s[axis];
}

double Tensor::value() const {
  if (size() != 1)
    throw ShapeError("value: tensor " + shape_str(shape()) +
                     " is not a single element");
  return ref().values[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2)
    throw ShapeError("at: expected rank 2, got " + shape_str(shape()));
  if (r >= rows() || c >= cols())
    throw ShapeError("at: index (" + std::to_string(r) + "," +
                     std::to_string(c) + ") out of range for " +
                     shape_str(shape()));
  return ref().values[r * cols() + c];
}

std::span<const double> Tensor::data() const { return ref().values; }

std::span<double> Tensor::mutable_data() { return ref().values; }

bool Tensor::requires_grad() const { return ref().requires_grad; }

std::span<const double> Tensor::grad() const {
  if (!ref().requires_grad)
    throw TapeError("grad: tensor does not require gradients");
  return ref().grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!ref().requires_grad)
    throw TapeError("grad: tensor does not require gradients");
  return ref().grad;
}

void Tensor::zero_grad() {
  if (ref().requires_grad) std::fill(ref().grad.begin(), ref().grad.end(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : ref().values)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---- Tape ---------------------------------------------------------------

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(std::function<void()> fn) {
  // A consumed graph belongs to the previous step; starting a new forward
  // pass implicitly discards it.
  if (consumed_) {
    nodes_.clear();
    consumed_ = false;
  }
  nodes_.push_back(std::move(fn));
}

void Tape::backward_from(const Tensor& loss) {
  if (!loss.defined()) throw TapeError("backward: undefined loss tensor");
  if (loss.size() != 1)
    throw TapeError("backward: loss must be a single element, got shape " +
                    shape_str(loss.shape()));
  if (consumed_)
    throw TapeError(
        "backward: graph already consumed; run a new forward pass before "
        "calling backward again");
  consumed_ = true;
  if (!loss.requires_grad()) return;  // constant loss, nothing reaches it
  loss.ptr()->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

void backward(const Tensor& loss) { Tape::current().backward_from(loss); }

// ---- Op helpers ---------------------------------------------------------

namespace {

bool grad_wanted(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current().recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw ShapeError(std::string(op) + ": expected rank 2, got " +
                     shape_str(t.shape()));
}

// C += A * B, row-major. a: m x k, b: k x n, c: m x n.
void mm_nn(const double* a, const double* b, double* c, std::size_t m_,
           std::size_t k_, std::size_t n_) {
  for (std::size_t m = 0; m < m_; ++m) {
    const double* arow = a + m * k_;
    double* crow = c + m * n_;
    for (std::size_t k = 0; k < k_; ++k) {
      const double av = arow[k];
      const double* brow = b + k * n_;
      for (std::size_t n = 0; n < n_; ++n) crow[n] += av * brow[n];
    }
  }
}

// C += A * B^T. a: m x k, b: n x k, c: m x n.
void mm_nt(const double* a, const double* b, double* c, std::size_t m_,
           std::size_t k_, std::size_t n_) {
  for (std::size_t m = 0; m < m_; ++m) {
    const double* arow = a + m * k_;
    double* crow = c + m * n_;
    for (std::size_t n = 0; n < n_; ++n) {
      const double* brow = b + n * k_;
      double acc = 0.0;
      for (std::size_t k = 0; k < k_; ++k) acc += arow[k] * brow[k];
      crow[n] += acc;
    }
  }
}

// C += A^T * B. a: l x m, b: l x n, c: m x n.
void mm_tn(const double* a, const double* b, double* c, std::size_t l_,
           std::size_t m_, std::size_t n_) {
  for (std::size_t l = 0; l < l_; ++l) {
    const double* arow = a + l * m_;
    const double* brow = b + l * n_;
    for (std::size_t m = 0; m < m_; ++m) {
      const double av = arow[m];
      double* crow = c + m * n_;
      for (std::size_t n = 0; n < n_; ++n) crow[n] += av * brow[n];
    }
  }
}

}  // namespace

// ---- Arithmetic ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);

  const bool track = grad_wanted({&a, &b});
  Tensor y = Tensor::from_values({m, n}, std::move(out), track);
  if (track) {
    Data ad = a.ptr(), bd = b.ptr(), yd = y.ptr();
    Tape::current().record([ad, bd, yd, m, k, n] {
      const double* dy = yd->grad.data();
      if (ad->requires_grad)
        mm_nt(dy, bd->values.data(), ad->grad.data(), m, n, k);
      if (bd->requires_grad)
        mm_tn(ad->values.data(), dy, bd->grad.data(), m, k, n);
    });
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  enum class Mode { Elementwise, Scalar, RowBias };
  Mode mode;
  if (a.shape() == b.shape()) {
    mode = Mode::Elementwise;
  } else if (b.size() == 1) {
    mode = Mode::Scalar;
  } else if (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.cols()) {
    mode = Mode::RowBias;
  } else {
    throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }

  std::vector<double> out(a.data().begin(), a.data().end());
  switch (mode) {
    case Mode::Elementwise:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
      break;
    case Mode::Scalar: {
      const double s = b.data()[0];
      for (double& v : out) v += s;
      break;
    }
    case Mode::RowBias: {
      const std::size_t c = a.cols();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i % c];
      break;
    }
  }

  const bool track = grad_wanted({&a, &b});
  Tensor y = Tensor::from_values(a.shape(), std::move(out), track);
  if (track) {
    Data ad = a.ptr(), bd = b.ptr(), yd = y.ptr();
    Tape::current().record([ad, bd, yd, mode] {
      const auto& dy = yd->grad;
      if (ad->requires_grad)
        for (std::size_t i = 0; i < dy.size(); ++i) ad->grad[i] += dy[i];
      if (bd->requires_grad) {
        switch (mode) {
          case Mode::Elementwise:
            for (std::size_t i = 0; i < dy.size(); ++i) bd->grad[i] += dy[i];
            break;
          case Mode::Scalar: {
            double acc = 0.0;
            for (double v : dy) acc += v;
            bd->grad[0] += acc;
            break;
          }
          case Mode::RowBias: {
            const std::size_t c = bd->values.size();
            for (std::size_t i = 0; i < dy.size(); ++i)
              bd->grad[i % c] += dy[i];
            break;
          }
        }
      }
    });
  }
  return y;
}

Tensor add(const Tensor& a, double b) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += b;
  const bool track = grad_wanted({&a});
  Tensor y = Tensor::from_values(a.shape(), std::move(out), track);
  if (track) {
    Data ad = a.ptr(), yd = y.ptr();
    Tape::current().record([ad, yd] {
      for (std::size_t i = 0; i < yd->grad.size(); ++i)
        ad->grad[i] += yd->grad[i];
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] - b.data()[i];
  const bool track = grad_wanted({&a, &b});
  Tensor y = Tensor::from_values(a.shape(), std::move(out), track);
  if (track) {
    Data ad = a.ptr(), bd = b.ptr(), yd = y.ptr();
    Tape::current().record([ad, bd, yd] {
      const auto& dy = yd->grad;
      if (ad->requires_grad)
        for (std::size_t i = 0; i < dy.size(); ++i) ad->grad[i] += dy[i];
      if (bd->requires_grad)
        for (std::size_t i = 0; i < dy.size(); ++i) bd->grad[i] -= dy[i];
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const bool elementwise = a.shape() == b.shape();
  const bool b_scalar = !elementwise && b.size() == 1;
  const bool a_scalar = !elementwise && !b_scalar && a.size() == 1;
  if (!elementwise && !b_scalar && !a_scalar)
    throw ShapeError("mul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  if (a_scalar) return mul(b, a);

  std::vector<double> out(a.size());
  if (elementwise) {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = a.data()[i] * b.data()[i];
  } else {
    const double s = b.data()[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  }

  const bool track = grad_wanted({&a, &b});
  Tensor y = Tensor::from_values(a.shape(), std::move(out), track);
  if (track) {
    Data ad = a.ptr(), bd = b.ptr(), yd = y.ptr();
    Tape::current().record([ad, bd, yd, elementwise] {
      const auto& dy = yd->grad;
      if (elementwise) {
        if (ad->requires_grad)
          for (std::size_t i = 0; i < dy.size(); ++i)
            ad->grad[i] += dy[i] * bd->values[i];
        if (bd->requires_grad)
          for (std::size_t i = 0; i < dy.size(); ++i)
            bd->grad[i] += dy[i] * ad->values[i];
      } else {
        const double s = bd->values[0];
        if (ad->requires_grad)
          for (std::size_t i = 0; i < dy.size(); ++i) ad->grad[i] += dy[i] * s;
        if (bd->requires_grad) {
          double acc = 0.0;
          for (std::size_t i = 0; i < dy.size(); ++i)
            acc += dy[i] * ad->values[i];
          bd->grad[0] += acc;
        }
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, double b) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b;
  const bool track = grad_wanted({&a});
  Tensor y = Tensor::from_values(a.shape(), std::move(out), track);
  if (track) {
    Data ad = a.ptr(), yd = y.ptr();
    Tape::current().record([ad, yd, b] {
      for (std::size_t i = 0; i < yd->grad.size(); ++i)
        ad->grad[i] += yd->grad[i] * b;
    });
  }
  return y;
}

// ---- Nonlinearities -----------------------------------------------------

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  const bool track = grad_wanted({&x});
  Tensor y = Tensor::from_values(x.shape(), std::move(out), track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd] {
      for (std::size_t i = 0; i < yd->grad.size(); ++i)
        if (xd->values[i] > 0.0) xd->grad[i] += yd->grad[i];
    });
  }
  return y;
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  const bool track = grad_wanted({&x});
  Tensor y = Tensor::from_values(x.shape(), std::move(out), track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd] {
      constexpr double kInvSqrt2Pi = 0.39894228040143267794;
      for (std::size_t i = 0; i < yd->grad.size(); ++i) {
        const double v = xd->values[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        xd->grad[i] += yd->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return y;
}

// ---- Shape ops ----------------------------------------------------------

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.data()[i * c + j];
  const bool track = grad_wanted({&x});
  Tensor y = Tensor::from_values({c, r}, std::move(out), track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd, r, c] {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          xd->grad[i * c + j] += yd->grad[j * r + i];
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  const bool track = grad_wanted({&x});
  Tensor y = Tensor::from_values(std::move(shape), std::move(out), track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd] {
      for (std::size_t i = 0; i < yd->grad.size(); ++i)
        xd->grad[i] += yd->grad[i];
    });
  }
  return y;
}

// ---- Reductions ---------------------------------------------------------

Tensor reduce_sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const bool track = grad_wanted({&x});
  Tensor y = Tensor::scalar(acc, track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd] {
      const double g = yd->grad[0];
      for (double& v : xd->grad) v += g;
    });
  }
  return y;
}

Tensor reduce_mean(const Tensor& x) {
  if (x.size() == 0) throw NumericError("reduce_mean: empty tensor");
  const double n = static_cast<double>(x.size());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const bool track = grad_wanted({&x});
  Tensor y = Tensor::scalar(acc / n, track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd, n] {
      const double g = yd->grad[0] / n;
      for (double& v : xd->grad) v += g;
    });
  }
  return y;
}

namespace {

Tensor reduce_axis(const Tensor& x, std::size_t axis, bool mean,
                   const char* op) {
  const AxisSplit s = split_axis(x.shape(), axis, op);
  if (s.n == 0) throw NumericError(std::string(op) + ": axis has zero extent");
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.shape()[i]);
  const double scale = mean ? 1.0 / static_cast<double>(s.n) : 1.0;

  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += x.data()[(o * s.n + k) * s.inner + i];
  if (mean)
    for (double& v : out) v *= scale;

  const bool track = grad_wanted({&x});
  Tensor y = Tensor::from_values(std::move(out_shape), std::move(out), track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd, s, scale] {
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.n; ++k)
          for (std::size_t i = 0; i < s.inner; ++i)
            xd->grad[(o * s.n + k) * s.inner + i] +=
                yd->grad[o * s.inner + i] * scale;
    });
  }
  return y;
}

}  // namespace

Tensor reduce_sum(const Tensor& x, std::size_t axis) {
  return reduce_axis(x, axis, false, "reduce_sum");
}

Tensor reduce_mean(const Tensor& x, std::size_t axis) {
  return reduce_axis(x, axis, true, "reduce_mean");
}

// ---- Gather / scatter / slicing ----------------------------------------

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  require_rank2(x, "gather_rows");
  const std::size_t c = x.cols();
  for (std::size_t idx : indices)
    if (idx >= x.rows())
      throw ShapeError("gather_rows: row " + std::to_string(idx) +
                       " out of range for " + shape_str(x.shape()));
  std::vector<double> out(indices.size() * c);
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(x.data().data() + indices[r] * c, c, out.data() + r * c);

  const bool track = grad_wanted({&x});
  Tensor y = Tensor::from_values({indices.size(), c}, std::move(out), track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    Tape::current().record([xd, yd, idx = std::move(idx), c] {
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < c; ++j)
          xd->grad[idx[r] * c + j] += yd->grad[r * c + j];
    });
  }
  return y;
}

Tensor scatter_add_rows(const Tensor& rows, std::span<const std::size_t> indices,
                        std::size_t out_rows) {
  require_rank2(rows, "scatter_add_rows");
  if (indices.size() != rows.rows())
    throw ShapeError("scatter_add_rows: " + std::to_string(indices.size()) +
                     " indices for " + shape_str(rows.shape()));
  const std::size_t c = rows.cols();
  for (std::size_t idx : indices)
    if (idx >= out_rows)
      throw ShapeError("scatter_add_rows: target row " + std::to_string(idx) +
                       " out of range for " + std::to_string(out_rows) +
                       " rows");
  std::vector<double> out(out_rows * c, 0.0);
  for (std::size_t r = 0; r < indices.size(); ++r)
    for (std::size_t j = 0; j < c; ++j)
      out[indices[r] * c + j] += rows.data()[r * c + j];

  const bool track = grad_wanted({&rows});
  Tensor y = Tensor::from_values({out_rows, c}, std::move(out), track);
  if (track) {
    Data rd = rows.ptr(), yd = y.ptr();
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    Tape::current().record([rd, yd, idx = std::move(idx), c] {
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < c; ++j)
          rd->grad[r * c + j] += yd->grad[idx[r] * c + j];
    });
  }
  return y;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_rows");
  if (begin > end || end > x.rows())
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " +
                     shape_str(x.shape()));
  const std::size_t c = x.cols(), n = end - begin;
  std::vector<double> out(x.data().begin() + begin * c,
                          x.data().begin() + end * c);
  const bool track = grad_wanted({&x});
  Tensor y = Tensor::from_values({n, c}, std::move(out), track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd, begin, c] {
      for (std::size_t i = 0; i < yd->grad.size(); ++i)
        xd->grad[begin * c + i] += yd->grad[i];
    });
  }
  return y;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_cols");
  if (begin > end || end > x.cols())
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " +
                     shape_str(x.shape()));
  const std::size_t r = x.rows(), c = x.cols(), n = end - begin;
  std::vector<double> out(r * n);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(x.data().data() + i * c + begin, n, out.data() + i * n);
  const bool track = grad_wanted({&x});
  Tensor y = Tensor::from_values({r, n}, std::move(out), track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd, begin, r, c, n] {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j)
          xd->grad[i * c + begin + j] += yd->grad[i * n + j];
    });
  }
  return y;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no tensors given");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != c)
      throw ShapeError("concat_rows: column mismatch, " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * c);
  for (const Tensor& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());

  bool track = false;
  if (Tape::current().recording())
    for (const Tensor& p : parts)
      if (p.requires_grad()) track = true;
  Tensor y = Tensor::from_values({total, c}, std::move(out), track);
  if (track) {
    std::vector<Data> pd;
    pd.reserve(parts.size());
    for (const Tensor& p : parts) pd.push_back(p.ptr());
    Data yd = y.ptr();
    Tape::current().record([pd = std::move(pd), yd] {
      std::size_t offset = 0;
      for (const Data& d : pd) {
        if (d->requires_grad)
          for (std::size_t i = 0; i < d->values.size(); ++i)
            d->grad[i] += yd->grad[offset + i];
        offset += d->values.size();
      }
    });
  }
  return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no tensors given");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != r)
      throw ShapeError("concat_cols: row mismatch, " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.data().data() + i * pc, pc,
                  out.data() + i * total + offset);
    offset += pc;
  }

  bool track = false;
  if (Tape::current().recording())
    for (const Tensor& p : parts)
      if (p.requires_grad()) track = true;
  Tensor y = Tensor::from_values({r, total}, std::move(out), track);
  if (track) {
    std::vector<Data> pd;
    pd.reserve(parts.size());
    for (const Tensor& p : parts) pd.push_back(p.ptr());
    Data yd = y.ptr();
    Tape::current().record([pd = std::move(pd), yd, r, total] {
      std::size_t off = 0;
      for (const Data& d : pd) {
        const std::size_t pc = d->values.size() / r;
        if (d->requires_grad)
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j)
              d->grad[i * pc + j] += yd->grad[i * total + off + j];
        off += pc;
      }
    });
  }
  return y;
}

Tensor tile_rows(const Tensor& x, std::size_t repeats) {
  require_rank2(x, "tile_rows");
  if (repeats == 0) throw ShapeError("tile_rows: zero repeats");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out;
  out.reserve(repeats * r * c);
  for (std::size_t t = 0; t < repeats; ++t)
    out.insert(out.end(), x.data().begin(), x.data().end());
  const bool track = grad_wanted({&x});
  Tensor y = Tensor::from_values({repeats * r, c}, std::move(out), track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd, repeats] {
      const std::size_t n = xd->values.size();
      for (std::size_t t = 0; t < repeats; ++t)
        for (std::size_t i = 0; i < n; ++i)
          xd->grad[i] += yd->grad[t * n + i];
    });
  }
  return y;
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require_rank2(x, "scale_rows");
  const std::size_t r = x.rows(), c = x.cols();
  const bool col_vector = s.rank() == 2 && s.cols() == 1 && s.rows() == r;
  if (!col_vector && !(s.rank() == 1 && s.dim(0) == r))
    throw ShapeError("scale_rows: scale " + shape_str(s.shape()) +
                     " does not match " + std::to_string(r) + " rows of " +
                     shape_str(x.shape()));
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double f = s.data()[i];
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.data()[i * c + j] * f;
  }
  const bool track = grad_wanted({&x, &s});
  Tensor y = Tensor::from_values({r, c}, std::move(out), track);
  if (track) {
    Data xd = x.ptr(), sd = s.ptr(), yd = y.ptr();
    Tape::current().record([xd, sd, yd, r, c] {
      if (xd->requires_grad)
        for (std::size_t i = 0; i < r; ++i) {
          const double f = sd->values[i];
          for (std::size_t j = 0; j < c; ++j)
            xd->grad[i * c + j] += yd->grad[i * c + j] * f;
        }
      if (sd->requires_grad)
        for (std::size_t i = 0; i < r; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j)
            acc += yd->grad[i * c + j] * xd->values[i * c + j];
          sd->grad[i] += acc;
        }
    });
  }
  return y;
}

// ---- Softmax family -----------------------------------------------------

Tensor stable_softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis, "stable_softmax");
  if (s.n == 0) throw NumericError("stable_softmax: axis has zero extent");
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.n; ++k)
        mx = std::max(mx, x.data()[(o * s.n + k) * s.inner + i]);
      double denom = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const std::size_t at = (o * s.n + k) * s.inner + i;
        out[at] = std::exp(x.data()[at] - mx);
        denom += out[at];
      }
      for (std::size_t k = 0; k < s.n; ++k)
        out[(o * s.n + k) * s.inner + i] /= denom;
    }

  const bool track = grad_wanted({&x});
  Tensor y = Tensor::from_values(x.shape(), std::move(out), track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd, s] {
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          double dot = 0.0;
          for (std::size_t k = 0; k < s.n; ++k) {
            const std::size_t at = (o * s.n + k) * s.inner + i;
            dot += yd->values[at] * yd->grad[at];
          }
          for (std::size_t k = 0; k < s.n; ++k) {
            const std::size_t at = (o * s.n + k) * s.inner + i;
            xd->grad[at] += yd->values[at] * (yd->grad[at] - dot);
          }
        }
    });
  }
  return y;
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis, "log_softmax");
  if (s.n == 0) throw NumericError("log_softmax: axis has zero extent");
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.n; ++k)
        mx = std::max(mx, x.data()[(o * s.n + k) * s.inner + i]);
      double denom = 0.0;
      for (std::size_t k = 0; k < s.n; ++k)
        denom += std::exp(x.data()[(o * s.n + k) * s.inner + i] - mx);
      const double lse = mx + std::log(denom);
      for (std::size_t k = 0; k < s.n; ++k) {
        const std::size_t at = (o * s.n + k) * s.inner + i;
        out[at] = x.data()[at] - lse;
      }
    }

  const bool track = grad_wanted({&x});
  Tensor y = Tensor::from_values(x.shape(), std::move(out), track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd, s] {
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          double total = 0.0;
          for (std::size_t k = 0; k < s.n; ++k)
            total += yd->grad[(o * s.n + k) * s.inner + i];
          for (std::size_t k = 0; k < s.n; ++k) {
            const std::size_t at = (o * s.n + k) * s.inner + i;
            xd->grad[at] += yd->grad[at] - std::exp(yd->values[at]) * total;
          }
        }
    });
  }
  return y;
}

// ---- Layer norm ---------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  require_rank2(x, "layer_norm");
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.rank() != 1 || gamma.dim(0) != c)
    throw ShapeError("layer_norm: gamma " + shape_str(gamma.shape()) +
                     " does not match feature width " + std::to_string(c));
  if (beta.rank() != 1 || beta.dim(0) != c)
    throw ShapeError("layer_norm: beta " + shape_str(beta.shape()) +
                     " does not match feature width " + std::to_string(c));
  if (eps < 0.0) throw NumericError("layer_norm: negative epsilon");
  if (c == 0) throw ShapeError("layer_norm: zero feature width");

  std::vector<double> out(r * c);
  // Saved for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(r * c);
  auto inv_std = std::make_shared<std::vector<double>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data().data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double s = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = s;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mean) * s;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = h * gamma.data()[j] + beta.data()[j];
    }
  }

  const bool track = grad_wanted({&x, &gamma, &beta});
  Tensor y = Tensor::from_values({r, c}, std::move(out), track);
  if (track) {
    Data xd = x.ptr(), gd = gamma.ptr(), bd = beta.ptr(), yd = y.ptr();
    Tape::current().record([xd, gd, bd, yd, xhat, inv_std, r, c] {
      std::vector<double> t(c);
      for (std::size_t i = 0; i < r; ++i) {
        const double* dy = yd->grad.data() + i * c;
        const double* h = xhat->data() + i * c;
        if (bd->requires_grad)
          for (std::size_t j = 0; j < c; ++j) bd->grad[j] += dy[j];
        if (gd->requires_grad)
          for (std::size_t j = 0; j < c; ++j) gd->grad[j] += dy[j] * h[j];
        if (xd->requires_grad) {
          double mt = 0.0, mth = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            t[j] = dy[j] * gd->values[j];
            mt += t[j];
            mth += t[j] * h[j];
          }
          mt /= static_cast<double>(c);
          mth /= static_cast<double>(c);
          const double s = (*inv_std)[i];
          for (std::size_t j = 0; j < c; ++j)
            xd->grad[i * c + j] += s * (t[j] - mt - h[j] * mth);
        }
      }
    });
  }
  return y;
}

// ---- Stochastic ops -----------------------------------------------------

Tensor dropout(const Tensor& x, double rate, RngStream& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0)
    throw NumericError("dropout: rate " + std::to_string(rate) +
                       " outside [0, 1)");
  if (!training || rate == 0.0) return x;  // identity, no draws consumed

  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = rng.uniform() > rate ? keep_scale : 0.0;
    (*mask)[i] = m;
    out[i] = x.data()[i] * m;
  }
  const bool track = grad_wanted({&x});
  Tensor y = Tensor::from_values(x.shape(), std::move(out), track);
  if (track) {
    Data xd = x.ptr(), yd = y.ptr();
    Tape::current().record([xd, yd, mask] {
      for (std::size_t i = 0; i < yd->grad.size(); ++i)
        xd->grad[i] += yd->grad[i] * (*mask)[i];
    });
  }
  return y;
}

Tensor sample_gaussian(RngStream& rng, Shape shape, double mean,
                       double stddev) {
  if (stddev < 0.0)
    throw NumericError("sample_gaussian: negative stddev " +
                       std::to_string(stddev));
  std::vector<double> out(shape_size(shape));
  for (double& v : out) v = rng.gaussian(mean, stddev);
  return Tensor::from_values(std::move(shape), std::move(out), false);
}

// ---- Finite differences -------------------------------------------------

Tensor finite_difference_gradient(const std::function<Tensor(const Tensor&)>& f,
                                  Tensor x, double step) {
  if (step <= 0.0)
    throw NumericError("finite_difference_gradient: step must be positive");
  NoGradGuard guard;
  auto eval = [&](void) -> double {
    Tensor out = f(x);
    if (out.size() != 1)
      throw ShapeError(
          "finite_difference_gradient: f must return a single element, got " +
          shape_str(out.shape()));
    return out.data()[0];
  };
  Tensor g = Tensor::zeros(x.shape());
  std::span<double> xv = x.mutable_data();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double saved = xv[i];
    xv[i] = saved + step;
    const double fp = eval();
    xv[i] = saved - step;
    const double fm = eval();
    xv[i] = saved;
    g.mutable_data()[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

}  // namespace widenet
