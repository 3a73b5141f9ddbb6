#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace peopl {

// Dense row-major f64 tensor.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({}, {value}); }
  // rows x cols matrix from nested rows.
  static Tensor matrix(const std::vector<std::vector<double>>& rows);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& values() const { return data_; }
  std::vector<double>& values() { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }
  double item() const;

  // Same data, new shape with the same element count.
  Tensor reshaped(std::vector<std::size_t> shape) const;
  // Row slice [begin, end) of a matrix.
  Tensor rows(std::size_t begin, std::size_t end) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);
std::size_t shape_size(const std::vector<std::size_t>& shape);

// Stacks equal-width matrices vertically.
Tensor concat_rows(const std::vector<Tensor>& parts);

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }
};

// Reverse-mode tape. Every op appends a node holding its value and a closure
// that pushes the node's gradient into its parents. Single-threaded.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  // Zero tensor of the right shape when no gradient reached the node.
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(output)/d(output) = 1 and runs the closures in reverse order.
  // Throws InvalidArgument for a non-scalar output or one that does not
  // depend on any gradient-tracked leaf.
  void backward(Var output);

  // Used by op implementations.
  Var record(Tensor value, const std::vector<Var>& parents, Backward backward);
  // Adds g into the gradient of node id (allocating it on first use).
  void accumulate(std::size_t id, const Tensor& g);
  Tensor& grad_buffer(std::size_t id);
  const Tensor& incoming(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Matrix ops. Matrices are rank-2; "row" broadcasts take a rank-1 vector of
// the column count.
Var matmul(Var a, Var b);     // [m,k] x [k,n]
Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var add_row(Var a, Var row);
// a[m,h] * c[m,1]: scales each row by its entry of the column.
Var mul_col(Var a, Var col);
Var mul_row(Var a, Var row);
// a[m,h] + tile(b[r,h]) where m is a multiple of r: row i gets b[i mod r].
Var add_tiled(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var relu(Var a);  // subgradient 0 at 0
Var tanh(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var exp(Var a);
Var square(Var a);
Var reciprocal(Var a);
Var sum(Var a);   // scalar
Var mean(Var a);  // scalar
// [g*r, h] -> [g, h]: mean over each consecutive block of r rows. Each column
// is summed in sorted order, so the result is bit-identical under any
// permutation of rows within a block.
Var segment_mean(Var a, std::size_t r);
Var mean_pool(Var a);  // [m,h] -> [1,h]
// Columns [begin, end) of a matrix.
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var concat_cols(const std::vector<Var>& parts);
// out[i] = a[index[i]] on the flattened data, with the given output shape.
Var gather(Var a, std::vector<std::size_t> index, std::vector<std::size_t> shape);
Var reshape(Var a, std::vector<std::size_t> shape);
// D[i,j] = |a_i - b_j|^2, summed directly (no Gram expansion) so that equal
// rows give exactly 0.
Var pairwise_sq_dist(Var a, Var b);
// Per-column standardization over the rows of the batch with biased variance
// and eps inside the square root. Requires at least 2 rows.
inline constexpr double kBatchNormEps = 1e-5;
Var batch_normalize(Var a, double eps = kBatchNormEps);
// mean(softplus(z) - y z): binary cross-entropy on logits, y in [0,1].
Var bce_with_logits(Var logits, const Tensor& targets);

// Non-overlapping stride-p convolution. input [C,H,W] or [B,C,H,W], kernels
// [K,C,p,p]; output [K,H/p,W/p] or [B,K,H/p,W/p]. No bias.
Var conv_nonoverlap(Var input, Var kernels);

// Index map turning a [B,C,H,W] batch into patch rows [B*N, C*p*p], patches in
// row-major grid order and each row in (c, dy, dx) order.
std::vector<std::size_t> patch_index(std::size_t batch, std::size_t channels,
                                     std::size_t height, std::size_t width,
                                     std::size_t p);
Tensor patchify(const Tensor& images, std::size_t p);

// Seeded initialization. The generator is the library's portable Rng, so
// tensors are bit-identical across platforms.
struct InitScheme {
  enum class Kind { kGaussian, kUniform, kConstant };
  Kind kind = Kind::kGaussian;
  double a = 0.0;  // mean | low | value
  double b = 1.0;  // stddev | high

  static InitScheme gaussian(double mean, double stddev) {
    return {Kind::kGaussian, mean, stddev};
  }
  static InitScheme uniform(double low, double high) {
    return {Kind::kUniform, low, high};
  }
  static InitScheme constant(double value) {
    return {Kind::kConstant, value, 0.0};
  }
  std::string describe() const;
};

Tensor seeded_init(const std::vector<std::size_t>& shape,
                   const InitScheme& scheme, std::uint64_t seed);

// Named parameters plus the record needed to rebuild them bit-for-bit.
class ParamStore {
 public:
  struct Record {
    std::vector<std::size_t> shape;
    InitScheme scheme;
    std::uint64_t seed = 0;
  };

  // Draws and stores a parameter; names must be unique.
  const Tensor& init(const std::string& name, std::vector<std::size_t> shape,
                     const InitScheme& scheme, std::uint64_t seed);
  // Stores an explicit tensor (no seed record).
  void set(const std::string& name, Tensor value);

  bool contains(const std::string& name) const { return params_.count(name); }
  const Tensor& get(const std::string& name) const;
  Tensor& get_mutable(const std::string& name);
  std::vector<std::string> names() const;
  const std::map<std::string, Record>& records() const { return records_; }
  std::size_t parameter_count() const;

  // Redraws every recorded parameter from its seed.
  static ParamStore rebuild(const std::map<std::string, Record>& records);

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.params_ == b.params_;
  }

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, Record> records_;
};

// Leaves for every parameter of a store, keyed by name.
std::map<std::string, Var> bind(Tape& tape, const ParamStore& store,
                                bool requires_grad);

class Adam {
 public:
  // weight_decay adds weight_decay * p to each gradient (coupled L2).
  explicit Adam(double lr, double weight_decay = 0.0, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2),
        eps_(eps) {}

  // One update of every parameter that has a gradient in grads.
  void step(ParamStore& store, const std::map<std::string, Tensor>& grads);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_, weight_decay_, beta1_, beta2_, eps_;
  std::map<std::string, Tensor> m_, v_;
  std::int64_t t_ = 0;
};

// Gradients of every bound parameter after tape.backward().
std::map<std::string, Tensor> collect_grads(
    const Tape& tape, const std::map<std::string, Var>& bound);

// Raw tensor files: "PTNSR01\0", u32 rank, u32 dims, little-endian f64 data.
void write_tensor(std::ostream& out, const Tensor& tensor);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& tensor);
Tensor load_tensor(const std::string& path);

}  // namespace peopl
