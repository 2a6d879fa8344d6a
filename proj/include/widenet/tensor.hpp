#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "widenet/error.hpp"

namespace widenet {

class RngStream;

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated iff requires_grad, same length as values
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major float64 tensor. A Tensor is a cheap handle; copies share
// the underlying buffer. Operations return fresh tensors and, while grad
// recording is enabled and any input requires a gradient, push a backward
// closure onto the active tape. Scalars have rank 0 and one element.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t dim(std::size_t axis) const;
  // Rank-2 helpers.
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  // Scalar read; errors unless size() == 1.
  double value() const;
  double at(std::size_t r, std::size_t c) const;

  std::span<const double> data() const;
  // Direct writes are for leaves only (initialization, optimizer updates);
  // mutating an intermediate invalidates closures already on the tape.
  std::span<double> mutable_data();

  bool requires_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  bool all_finite() const;

  // Identity of the underlying storage; equal iff two handles share a buffer.
  const void* id() const { return d_.get(); }

  std::shared_ptr<detail::TensorData> ptr() const { return d_; }
  static Tensor wrap(std::shared_ptr<detail::TensorData> d) { return Tensor(std::move(d)); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
  detail::TensorData& ref() const;

  std::shared_ptr<detail::TensorData> d_;
};

// Reverse-mode tape. Rebuilt implicitly on each forward pass: recording a new
// node after a backward() call discards the consumed graph first. One tape
// per thread; it is never shared.
class Tape {
 public:
  static Tape& current();

  bool recording() const { return no_grad_depth_ == 0; }
  void record(std::function<void()> fn);
  // Seeds d(loss)/d(loss) = 1 and replays recorded nodes in reverse.
  // loss must be a single-element tensor. Calling twice without recording a
  // new graph in between is an error; a constant loss is a silent no-op walk.
  void backward_from(const Tensor& loss);
  void reset();
  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend class NoGradGuard;
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  int no_grad_depth_ = 0;
};

// Disables grad recording for its scope (nestable).
class NoGradGuard {
 public:
  NoGradGuard() { ++Tape::current().no_grad_depth_; }
  ~NoGradGuard() { --Tape::current().no_grad_depth_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

void backward(const Tensor& loss);

// ---- Operation family -------------------------------------------------
// Shape contracts are documented per operation; violations throw ShapeError
// naming the operation and the offending shapes.

// (M x K) * (K x N) -> (M x N)
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise; b may alternatively be a scalar tensor, or a rank-1 tensor of
// length a.cols() added to every row of a rank-2 a (bias broadcast). These
// are the only supported broadcasts.
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, const Tensor& b);  // same shape only
// Elementwise; b may be a scalar tensor.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, double b);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form

Tensor transpose(const Tensor& x);  // rank 2
Tensor reshape(const Tensor& x, Shape shape);

Tensor reduce_sum(const Tensor& x);   // all elements -> scalar
Tensor reduce_mean(const Tensor& x);  // all elements -> scalar
// Reduce one axis away; result shape is x.shape() without `axis`.
Tensor reduce_sum(const Tensor& x, std::size_t axis);
Tensor reduce_mean(const Tensor& x, std::size_t axis);

// Row gather/scatter on rank-2 tensors. Indices out of range throw.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);
// out[indices[r], :] += rows[r, :] into a zero tensor of out_rows rows.
// Duplicate indices accumulate.
Tensor scatter_add_rows(const Tensor& rows, std::span<const std::size_t> indices,
                        std::size_t out_rows);

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// (R x C) -> (repeats*R x C), the input stacked `repeats` times.
Tensor tile_rows(const Tensor& x, std::size_t repeats);
// Scales row r of x by s[r]; s is rank 1 of length x.rows() or (rows x 1).
Tensor scale_rows(const Tensor& x, const Tensor& s);

// Max-subtracted softmax along `axis`; rows of the result are probability
// vectors (non-negative, summing to 1 within 1e-12) and large logits do not
// overflow. An empty or out-of-range axis is an error.
Tensor stable_softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

// Per-row normalization of a rank-2 x with population variance over the
// feature axis: (x - mean) / sqrt(var + eps) * gamma + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);

// Inverted dropout. Identity when !training or rate == 0 (no draws consumed);
// otherwise one uniform draw per element. rate must lie in [0, 1).
Tensor dropout(const Tensor& x, double rate, RngStream& rng, bool training);

// Deterministic given (seed, counter); advances the stream by two ticks per
// element. stddev must be >= 0.
Tensor sample_gaussian(RngStream& rng, Shape shape, double mean, double stddev);

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate. f must
// return a single-element tensor; evaluation runs with grad recording off and
// x is restored afterwards.
Tensor finite_difference_gradient(const std::function<Tensor(const Tensor&)>& f,
                                  Tensor x, double step);

}  // namespace widenet
