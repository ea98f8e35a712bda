#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mimdet {

using Shape = std::vector<long>;

std::string shape_str(const Shape& s);

namespace alloc_stats {
// Allocator high-water mark, in bytes of live tensor payload.
std::size_t current();
std::size_t peak();
void reset_peak();
}  // namespace alloc_stats

/// Dense n-dimensional value. Copies are shallow (the buffer is shared);
/// no operation mutates a tensor it did not allocate itself.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return full({1}, value); }
  static Tensor from(Shape shape, const std::vector<double>& values);

  long numel() const;
  int rank() const { return static_cast<int>(shape_.size()); }
  long dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  const Shape& shape() const { return shape_; }
  bool defined() const { return static_cast<bool>(buf_); }

  double* data() { return buf_->data(); }
  const double* data() const { return buf_->data(); }
  double& operator[](long i) { return (*buf_)[static_cast<std::size_t>(i)]; }
  double operator[](long i) const { return (*buf_)[static_cast<std::size_t>(i)]; }

  /// New shape over the same buffer; element count must match.
  Tensor reshaped(Shape shape) const;
  Tensor clone() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> buf_;
};

/// Append-only record of one forward pass. Nodes are replayed in exact
/// reverse execution order by backward(). One tape per pass, one thread.
class Tape {
 public:
  int leaf(const Shape& shape);
  int node(const Shape& shape, std::function<void(Tape&)> back);
  Tensor& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  std::size_t size() const { return nodes_.size(); }
  void backward(int loss_id);

 private:
  struct Node {
    Tensor grad;
    std::function<void(Tape&)> back;
  };
  std::vector<Node> nodes_;
};

/// A tensor plus its (optional) position on a tape. id < 0 means constant.
struct Value {
  Tensor v;
  int id = -1;
  bool tracked() const { return id >= 0; }
};

inline Value constant(Tensor t) { return Value{std::move(t), -1}; }
Value make_leaf(Tape* tape, Tensor t);

// dst += src, elementwise.
void axpy(Tensor& dst, const Tensor& src, double scale = 1.0);

// ---- differentiable operations -------------------------------------------
// Every op takes the tape first; pass nullptr for an untracked forward.

Value add(Tape* t, const Value& a, const Value& b);
Value scale(Tape* t, const Value& x, double s);
Value conv2d(Tape* t, const Value& input, const Value& weight,
             const std::optional<Value>& bias, long stride, long padding);
Value layer_norm_channels(Tape* t, const Value& x, const Value& gamma,
                          const Value& beta, double eps);
Value softmax_rows(Tape* t, const Value& x);
Value gelu(Tape* t, const Value& x);
Value avg_pool2d(Tape* t, const Value& x, long k, long stride);
Value gather_rows(Tape* t, const Value& x, const std::vector<long>& indices);
Value scatter_rows(Tape* t, const Value& base, const std::vector<long>& indices,
                   const Value& values);
Value linear(Tape* t, const Value& x, const Value& weight,
             const std::optional<Value>& bias);
Value bmm(Tape* t, const Value& a, const Value& b);
Value transpose_last(Tape* t, const Value& x);
Value split_heads(Tape* t, const Value& x, long heads);
Value merge_heads(Tape* t, const Value& x, long heads);
Value broadcast_row(Tape* t, const Value& row, long batch, long n);
Value add_rows_broadcast(Tape* t, const Value& x, const Value& rows);
Value seq_to_map(Tape* t, const Value& x, long h, long w);
Value upsample_nearest2x(Tape* t, const Value& x);
Value reshape(Tape* t, const Value& x, Shape shape);
Value sum_all(Tape* t, const Value& x);
Value mse(Tape* t, const Value& a, const Value& b);

/// Reverse pass from a scalar loss; after the call every leaf's grad holds
/// dLoss/dLeaf (zeros for leaves the loss does not depend on).
void backward(Tape& tape, const Value& loss);

}  // namespace mimdet
