#include "peopl/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "peopl/error.hpp"
#include "peopl/random.hpp"

namespace peopl {
namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument(message);
}

void require_matrix(const Tensor& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected a matrix, got shape " +
                             shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
}

Tape& tape_of(Var a, Var b) {
  require(a.tape != nullptr && a.tape == b.tape,
          "operands are recorded on different tapes");
  return *a.tape;
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename F, typename D>
Var unary(Var a, F f, D dfdx) {
  Tape& tape = *a.tape;
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const std::size_t pa = a.id;
  return tape.record(std::move(out), {a}, [pa, dfdx](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    const Tensor& x = t.value(pa);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buffer(pa);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
  });
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  require(data_.size() == shape_size(shape_),
          "tensor data length " + std::to_string(data_.size()) +
              " does not match shape " + shape_string(shape_));
}

Tensor Tensor::matrix(const std::vector<std::vector<double>>& rows) {
  const std::size_t cols = rows.empty() ? 0 : rows[0].size();
  std::vector<double> data;
  for (const auto& row : rows) {
    require(row.size() == cols, "ragged matrix rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

double Tensor::item() const {
  require(data_.size() == 1, "item() on a tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::rows(std::size_t begin, std::size_t end) const {
  require_matrix(*this, "rows");
  require(begin <= end && end <= shape_[0], "row slice out of range");
  const std::size_t cols = shape_[1];
  return Tensor({end - begin, cols},
                std::vector<double>(data_.begin() + begin * cols,
                                    data_.begin() + end * cols));
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows of nothing");
  const std::size_t cols = parts[0].dim(1);
  std::size_t rows = 0;
  std::vector<double> data;
  for (const Tensor& p : parts) {
    require_matrix(p, "concat_rows");
    require(p.dim(1) == cols, "concat_rows: column mismatch");
    rows += p.dim(0);
    data.insert(data.end(), p.values().begin(), p.values().end());
  }
  return Tensor({rows, cols}, std::move(data));
}

const Tensor& Var::value() const { return tape->value(id); }
const Tensor& Var::grad() const { return tape->grad(id); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, const std::vector<Var>& parents,
                 Backward backward) {
#ifndef NDEBUG
  for (double v : value.values()) {
    if (!std::isfinite(v)) throw Divergence("non-finite value in forward pass");
  }
#endif
  Node node;
  node.value = std::move(value);
  for (const Var& p : parents) {
    require(p.tape == this, "operand recorded on a different tape");
    node.requires_grad = node.requires_grad || nodes_[p.id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::grad(std::size_t id) const { return nodes_[id].grad; }

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape(), 0.0);
    node.has_grad = true;
  }
  return node.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor& buffer = grad_buffer(id);
  for (std::size_t i = 0; i < g.size(); ++i) buffer[i] += g[i];
}

void Tape::backward(Var output) {
  require(output.tape == this, "output recorded on a different tape");
  require(output.value().size() == 1,
          "backward needs a scalar output, got shape " +
              shape_string(output.value().shape()));
  require(nodes_[output.id].requires_grad,
          "output does not depend on any gradient-tracked leaf");
  for (Node& node : nodes_) {
    node.has_grad = false;
    node.grad = Tensor();
  }
  grad_buffer(output.id)[0] = 1.0;
  for (std::size_t id = output.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.has_grad && node.backward) node.backward(*this, id);
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].requires_grad) grad_buffer(id);
  }
}

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_matrix(x, "matmul");
  require_matrix(y, "matmul");
  require(x.dim(1) == y.dim(0), "matmul: inner dimensions " +
                                    shape_string(x.shape()) + " x " +
                                    shape_string(y.shape()));
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double xv = x[i * k + l];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += xv * y[l * n + j];
    }
  }
  const std::size_t pa = a.id, pb = b.id;
  return tape.record(std::move(out), {a, b},
                     [pa, pb, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    if (t.requires_grad(pa)) {
      const Tensor& y = t.value(pb);
      Tensor& ga = t.grad_buffer(pa);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
          double s = 0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * y[l * n + j];
          ga[i * k + l] += s;
        }
      }
    }
    if (t.requires_grad(pb)) {
      const Tensor& x = t.value(pa);
      Tensor& gb = t.grad_buffer(pb);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
          const double xv = x[i * k + l];
          for (std::size_t j = 0; j < n; ++j) gb[l * n + j] += xv * g[i * n + j];
        }
      }
    }
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_matrix(x, "matmul_nt");
  require_matrix(y, "matmul_nt");
  require(x.dim(1) == y.dim(1), "matmul_nt: inner dimensions " +
                                    shape_string(x.shape()) + " x " +
                                    shape_string(y.shape()) + "^T");
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(0);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t l = 0; l < k; ++l) s += x[i * k + l] * y[j * k + l];
      out[i * n + j] = s;
    }
  }
  const std::size_t pa = a.id, pb = b.id;
  return tape.record(std::move(out), {a, b},
                     [pa, pb, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    if (t.requires_grad(pa)) {
      const Tensor& y = t.value(pb);
      Tensor& ga = t.grad_buffer(pa);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          for (std::size_t l = 0; l < k; ++l) ga[i * k + l] += gv * y[j * k + l];
        }
      }
    }
    if (t.requires_grad(pb)) {
      const Tensor& x = t.value(pa);
      Tensor& gb = t.grad_buffer(pb);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          for (std::size_t l = 0; l < k; ++l) gb[j * k + l] += gv * x[i * k + l];
        }
      }
    }
  });
}

namespace {

template <typename F, typename DA, typename DB>
Var binary(Var a, Var b, const char* op, F f, DA dfda, DB dfdb) {
  Tape& tape = tape_of(a, b);
  require_same_shape(a.value(), b.value(), op);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
  const std::size_t pa = a.id, pb = b.id;
  return tape.record(std::move(out), {a, b},
                     [pa, pb, dfda, dfdb](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    const Tensor& x = t.value(pa);
    const Tensor& y = t.value(pb);
    if (t.requires_grad(pa)) {
      Tensor& ga = t.grad_buffer(pa);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfda(x[i], y[i]);
    }
    if (t.requires_grad(pb)) {
      Tensor& gb = t.grad_buffer(pb);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * dfdb(x[i], y[i]);
    }
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var add_row(Var a, Var row) {
  Tape& tape = tape_of(a, row);
  const Tensor& x = a.value();
  const Tensor& r = row.value();
  require_matrix(x, "add_row");
  require(r.size() == x.dim(1), "add_row: row length " + std::to_string(r.size()) +
                                    " vs " + std::to_string(x.dim(1)) + " columns");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out = x;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += r[j];
  }
  const std::size_t pa = a.id, pr = row.id;
  return tape.record(std::move(out), {a, row}, [pa, pr, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    t.accumulate(pa, g);
    if (t.requires_grad(pr)) {
      Tensor& gr = t.grad_buffer(pr);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
      }
    }
  });
}

Var mul_row(Var a, Var row) {
  Tape& tape = tape_of(a, row);
  const Tensor& x = a.value();
  const Tensor& r = row.value();
  require_matrix(x, "mul_row");
  require(r.size() == x.dim(1), "mul_row: row length mismatch");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out = x;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= r[j];
  }
  const std::size_t pa = a.id, pr = row.id;
  return tape.record(std::move(out), {a, row}, [pa, pr, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    const Tensor& x = t.value(pa);
    const Tensor& r = t.value(pr);
    if (t.requires_grad(pa)) {
      Tensor& ga = t.grad_buffer(pa);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * r[j];
      }
    }
    if (t.requires_grad(pr)) {
      Tensor& gr = t.grad_buffer(pr);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j] * x[i * n + j];
      }
    }
  });
}

Var mul_col(Var a, Var col) {
  Tape& tape = tape_of(a, col);
  const Tensor& x = a.value();
  const Tensor& c = col.value();
  require_matrix(x, "mul_col");
  require(c.size() == x.dim(0), "mul_col: column length mismatch");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out = x;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= c[i];
  }
  const std::size_t pa = a.id, pc = col.id;
  return tape.record(std::move(out), {a, col}, [pa, pc, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    const Tensor& x = t.value(pa);
    const Tensor& c = t.value(pc);
    if (t.requires_grad(pa)) {
      Tensor& ga = t.grad_buffer(pa);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * c[i];
      }
    }
    if (t.requires_grad(pc)) {
      Tensor& gc = t.grad_buffer(pc);
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * x[i * n + j];
        gc[i] += s;
      }
    }
  });
}

Var add_tiled(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_matrix(x, "add_tiled");
  require_matrix(y, "add_tiled");
  require(y.dim(1) == x.dim(1) && y.dim(0) > 0 && x.dim(0) % y.dim(0) == 0,
          "add_tiled: cannot tile " + shape_string(y.shape()) + " over " +
              shape_string(x.shape()));
  const std::size_t m = x.dim(0), r = y.dim(0), n = x.dim(1);
  Tensor out = x;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += y[(i % r) * n + j];
  }
  const std::size_t pa = a.id, pb = b.id;
  return tape.record(std::move(out), {a, b}, [pa, pb, m, r, n](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    t.accumulate(pa, g);
    if (t.requires_grad(pb)) {
      Tensor& gb = t.grad_buffer(pb);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gb[(i % r) * n + j] += g[i * n + j];
      }
    }
  });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; },
               [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; },
               [](double, double) { return 1.0; });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(Var a) {
  return unary(a, stable_softplus,
               [](double x, double) { return stable_sigmoid(x); });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Var reciprocal(Var a) {
  return unary(a, [](double x) { return 1.0 / x; },
               [](double, double y) { return -y * y; });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0;
  for (double v : x.values()) s += v;
  const std::size_t pa = a.id;
  return a.tape->record(Tensor::scalar(s), {a}, [pa](Tape& t, std::size_t self) {
    const double g = t.incoming(self)[0];
    Tensor& ga = t.grad_buffer(pa);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  require(n > 0, "mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var segment_mean(Var a, std::size_t r) {
  const Tensor& x = a.value();
  require_matrix(x, "segment_mean");
  require(r > 0 && x.dim(0) % r == 0,
          "segment_mean: " + std::to_string(x.dim(0)) +
              " rows are not a multiple of " + std::to_string(r));
  const std::size_t groups = x.dim(0) / r, n = x.dim(1);
  Tensor out({groups, n});
  std::vector<double> column(r);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < r; ++i) column[i] = x[(g * r + i) * n + j];
      std::sort(column.begin(), column.end());
      double s = 0;
      for (double v : column) s += v;
      out[g * n + j] = s / static_cast<double>(r);
    }
  }
  const std::size_t pa = a.id;
  return a.tape->record(std::move(out), {a}, [pa, groups, r, n](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    Tensor& ga = t.grad_buffer(pa);
    const double inv = 1.0 / static_cast<double>(r);
    for (std::size_t q = 0; q < groups; ++q) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < n; ++j) ga[(q * r + i) * n + j] += g[q * n + j] * inv;
      }
    }
  });
}

Var mean_pool(Var a) {
  require_matrix(a.value(), "mean_pool");
  return segment_mean(a, a.value().dim(0));
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  require_matrix(x, "slice_cols");
  require(begin <= end && end <= x.dim(1), "slice_cols: range out of bounds");
  const std::size_t m = x.dim(0), n = x.dim(1), w = end - begin;
  std::vector<std::size_t> index;
  index.reserve(m * w);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = begin; j < end; ++j) index.push_back(i * n + j);
  }
  return gather(a, std::move(index), {m, w});
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols of nothing");
  Tape& tape = *parts[0].tape;
  const std::size_t m = parts[0].value().dim(0);
  std::size_t width = 0;
  for (const Var& p : parts) {
    require_matrix(p.value(), "concat_cols");
    require(p.tape == &tape && p.value().dim(0) == m, "concat_cols: row mismatch");
    width += p.value().dim(1);
  }
  Tensor out({m, width});
  std::vector<std::size_t> ids, widths;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    const std::size_t n = x.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[i * width + offset + j] = x[i * n + j];
    }
    offset += n;
    ids.push_back(p.id);
    widths.push_back(n);
  }
  return tape.record(std::move(out), parts,
                     [ids, widths, m, width](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t n = widths[p];
      if (t.requires_grad(ids[p])) {
        Tensor& gp = t.grad_buffer(ids[p]);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gp[i * n + j] += g[i * width + offset + j];
        }
      }
      offset += n;
    }
  });
}

Var gather(Var a, std::vector<std::size_t> index, std::vector<std::size_t> shape) {
  const Tensor& x = a.value();
  require(index.size() == shape_size(shape), "gather: index count vs shape");
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < x.size(), "gather: index out of range");
    out[i] = x[index[i]];
  }
  const std::size_t pa = a.id;
  return a.tape->record(std::move(out), {a},
                        [pa, index = std::move(index)](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    Tensor& ga = t.grad_buffer(pa);
    for (std::size_t i = 0; i < index.size(); ++i) ga[index[i]] += g[i];
  });
}

Var reshape(Var a, std::vector<std::size_t> shape) {
  require(shape_size(shape) == a.value().size(),
          "reshape: " + shape_string(a.value().shape()) + " -> " + shape_string(shape));
  const std::size_t pa = a.id;
  return a.tape->record(a.value().reshaped(std::move(shape)), {a},
                        [pa](Tape& t, std::size_t self) {
    t.accumulate(pa, t.incoming(self));
  });
}

Var pairwise_sq_dist(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_matrix(x, "pairwise_sq_dist");
  require_matrix(y, "pairwise_sq_dist");
  require(x.dim(1) == y.dim(1), "pairwise_sq_dist: feature dimension mismatch");
  const std::size_t m = x.dim(0), n = y.dim(0), d = x.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t l = 0; l < d; ++l) {
        const double diff = x[i * d + l] - y[j * d + l];
        s += diff * diff;
      }
      out[i * n + j] = s;
    }
  }
  const std::size_t pa = a.id, pb = b.id;
  return tape.record(std::move(out), {a, b},
                     [pa, pb, m, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    const Tensor& x = t.value(pa);
    const Tensor& y = t.value(pb);
    const bool need_a = t.requires_grad(pa), need_b = t.requires_grad(pb);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double gv = 2.0 * g[i * n + j];
        if (gv == 0.0) continue;
        for (std::size_t l = 0; l < d; ++l) {
          const double diff = gv * (x[i * d + l] - y[j * d + l]);
          if (need_a) t.grad_buffer(pa)[i * d + l] += diff;
          if (need_b) t.grad_buffer(pb)[j * d + l] -= diff;
        }
      }
    }
  });
}

Var batch_normalize(Var a, double eps) {
  const Tensor& x = a.value();
  require_matrix(x, "batch_normalize");
  require(x.dim(0) >= 2, "batch_normalize needs a batch of at least 2 rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> inv_std(n);
  Tensor out({m, n});
  for (std::size_t j = 0; j < n; ++j) {
    double mu = 0;
    for (std::size_t i = 0; i < m; ++i) mu += x[i * n + j];
    mu /= static_cast<double>(m);
    double var = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const double c = x[i * n + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(m);
    inv_std[j] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < m; ++i) out[i * n + j] = (x[i * n + j] - mu) * inv_std[j];
  }
  const std::size_t pa = a.id;
  return a.tape->record(std::move(out), {a},
                        [pa, m, n, inv_std](Tape& t, std::size_t self) {
    const Tensor& g = t.incoming(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buffer(pa);
    const double md = static_cast<double>(m);
    for (std::size_t j = 0; j < n; ++j) {
      double sum_g = 0, sum_gy = 0;
      for (std::size_t i = 0; i < m; ++i) {
        sum_g += g[i * n + j];
        sum_gy += g[i * n + j] * y[i * n + j];
      }
      for (std::size_t i = 0; i < m; ++i) {
        ga[i * n + j] += inv_std[j] / md *
                         (md * g[i * n + j] - sum_g - y[i * n + j] * sum_gy);
      }
    }
  });
}

Var bce_with_logits(Var logits, const Tensor& targets) {
  const Tensor& z = logits.value();
  require(z.size() == targets.size() && z.size() > 0,
          "bce_with_logits: logits and targets differ in size");
  double loss = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    loss += stable_softplus(z[i]) - targets[i] * z[i];
  }
  const double n = static_cast<double>(z.size());
  const std::size_t pa = logits.id;
  return logits.tape->record(Tensor::scalar(loss / n), {logits},
                             [pa, targets, n](Tape& t, std::size_t self) {
    const double g = t.incoming(self)[0];
    const Tensor& z = t.value(pa);
    Tensor& ga = t.grad_buffer(pa);
    for (std::size_t i = 0; i < z.size(); ++i) {
      ga[i] += g * (stable_sigmoid(z[i]) - targets[i]) / n;
    }
  });
}

std::vector<std::size_t> patch_index(std::size_t batch, std::size_t channels,
                                     std::size_t height, std::size_t width,
                                     std::size_t p) {
  require(p > 0 && height % p == 0 && width % p == 0,
          "patch size " + std::to_string(p) + " does not divide " +
              std::to_string(height) + "x" + std::to_string(width));
  const std::size_t gh = height / p, gw = width / p;
  std::vector<std::size_t> index;
  index.reserve(batch * channels * height * width);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t gi = 0; gi < gh; ++gi) {
      for (std::size_t gj = 0; gj < gw; ++gj) {
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t dy = 0; dy < p; ++dy) {
            for (std::size_t dx = 0; dx < p; ++dx) {
              index.push_back(((b * channels + c) * height + gi * p + dy) * width +
                              gj * p + dx);
            }
          }
        }
      }
    }
  }
  return index;
}

Tensor patchify(const Tensor& images, std::size_t p) {
  require(images.rank() == 4, "patchify expects [B,C,H,W], got " +
                                  shape_string(images.shape()));
  const std::size_t b = images.dim(0), c = images.dim(1), h = images.dim(2),
                    w = images.dim(3);
  const auto index = patch_index(b, c, h, w, p);
  Tensor out({b * (h / p) * (w / p), c * p * p});
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = images[index[i]];
  return out;
}

Var conv_nonoverlap(Var input, Var kernels) {
  const Tensor& x = input.value();
  const Tensor& k = kernels.value();
  require(x.rank() == 3 || x.rank() == 4,
          "conv_nonoverlap expects [C,H,W] or [B,C,H,W], got " + shape_string(x.shape()));
  require(k.rank() == 4 && k.dim(2) == k.dim(3),
          "conv_nonoverlap kernels must be [K,C,p,p], got " + shape_string(k.shape()));
  const bool batched = x.rank() == 4;
  const std::size_t b = batched ? x.dim(0) : 1;
  const std::size_t c = x.dim(batched ? 1 : 0);
  const std::size_t h = x.dim(batched ? 2 : 1);
  const std::size_t w = x.dim(batched ? 3 : 2);
  const std::size_t kc = k.dim(0), p = k.dim(2);
  require(k.dim(1) == c, "conv_nonoverlap: channel mismatch");
  const std::size_t gh = (h % p == 0) ? h / p : 0;
  const std::size_t gw = (w % p == 0) ? w / p : 0;
  Var patches = gather(input, patch_index(b, c, h, w, p), {b * gh * gw, c * p * p});
  Var flat = matmul_nt(patches, reshape(kernels, {kc, c * p * p}));  // [B*N, K]
  const std::size_t n = gh * gw;
  std::vector<std::size_t> index;
  index.reserve(b * kc * n);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t ki = 0; ki < kc; ++ki) {
      for (std::size_t q = 0; q < n; ++q) index.push_back((bi * n + q) * kc + ki);
    }
  }
  std::vector<std::size_t> shape = batched
                                       ? std::vector<std::size_t>{b, kc, gh, gw}
                                       : std::vector<std::size_t>{kc, gh, gw};
  return gather(flat, std::move(index), std::move(shape));
}

std::string InitScheme::describe() const {
  std::ostringstream out;
  out.precision(17);
  switch (kind) {
    case Kind::kGaussian:
      out << "gaussian(" << a << "," << b << ")";
      break;
    case Kind::kUniform:
      out << "uniform(" << a << "," << b << ")";
      break;
    case Kind::kConstant:
      out << "constant(" << a << ")";
      break;
  }
  return out.str();
}

Tensor seeded_init(const std::vector<std::size_t>& shape,
                   const InitScheme& scheme, std::uint64_t seed) {
  Tensor out(shape);
  Rng rng(seed);
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (scheme.kind) {
      case InitScheme::Kind::kGaussian:
        out[i] = scheme.b == 0.0 ? scheme.a : rng.normal(scheme.a, scheme.b);
        break;
      case InitScheme::Kind::kUniform:
        out[i] = rng.uniform(scheme.a, scheme.b);
        break;
      case InitScheme::Kind::kConstant:
        out[i] = scheme.a;
        break;
    }
  }
  return out;
}

const Tensor& ParamStore::init(const std::string& name,
                               std::vector<std::size_t> shape,
                               const InitScheme& scheme, std::uint64_t seed) {
  require(!params_.count(name), "duplicate parameter name " + name);
  records_[name] = Record{shape, scheme, seed};
  return params_[name] = seeded_init(shape, scheme, seed);
}

void ParamStore::set(const std::string& name, Tensor value) {
  records_.erase(name);
  params_[name] = std::move(value);
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  require(it != params_.end(), "unknown parameter " + name);
  return it->second;
}

Tensor& ParamStore::get_mutable(const std::string& name) {
  auto it = params_.find(name);
  require(it != params_.end(), "unknown parameter " + name);
  records_.erase(name);
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

ParamStore ParamStore::rebuild(const std::map<std::string, Record>& records) {
  ParamStore store;
  for (const auto& [name, r] : records) store.init(name, r.shape, r.scheme, r.seed);
  return store;
}

std::map<std::string, Var> bind(Tape& tape, const ParamStore& store,
                                bool requires_grad) {
  std::map<std::string, Var> out;
  for (const std::string& name : store.names()) {
    out[name] = tape.leaf(store.get(name), requires_grad);
  }
  return out;
}

std::map<std::string, Tensor> collect_grads(
    const Tape& tape, const std::map<std::string, Var>& bound) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, var] : bound) {
    if (tape.requires_grad(var.id)) out[name] = tape.grad(var.id);
  }
  return out;
}

void Adam::step(ParamStore& store, const std::map<std::string, Tensor>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Tensor& p = store.get_mutable(name);
    require(p.size() == g.size(), "Adam: gradient shape mismatch for " + name);
    Tensor& m = m_.try_emplace(name, Tensor(p.shape())).first->second;
    Tensor& v = v_.try_emplace(name, Tensor(p.shape())).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] + weight_decay_ * p[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

namespace {

constexpr char kMagic[8] = {'P', 'T', 'N', 'S', 'R', '0', '1', '\0'};

void put_u32(std::ostream& out, std::uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  if (!in) throw InvalidArgument("truncated tensor header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& tensor) {
  out.write(kMagic, 8);
  put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : tensor.values()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    out.write(bytes, 8);
  }
}

Tensor read_tensor(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw InvalidArgument("not a raw tensor file (bad magic)");
  }
  const std::uint32_t rank = get_u32(in);
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = get_u32(in);
  Tensor out(shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    if (!in) throw InvalidArgument("truncated tensor payload");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

void save_tensor(const std::string& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open " + path + " for writing");
  write_tensor(out, tensor);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open " + path);
  return read_tensor(in);
}

}  // namespace peopl
