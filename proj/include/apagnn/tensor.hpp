#pragma once

// Dense 2-D tensors with a reverse-mode differentiation record.
//
// A BasicTape owns every node created through it. Nodes are appended in
// evaluation order, so parents always precede children and a single reverse
// sweep from a scalar root accumulates all gradients. A BasicVar is a cheap
// handle (tape pointer + node index) and is only valid while its tape lives.
//
// Broadcasting is limited to one pattern: the right-hand operand of
// add/sub/mul may be a 1 x n row that is repeated over the m rows of the
// left-hand operand. Its gradient is the column sum of the upstream gradient.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "apagnn/errors.hpp"

namespace apagnn {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = MatrixX<double>;

// Binary channel mask; true keeps the row.
using KeepMask = Eigen::Array<bool, Eigen::Dynamic, 1>;

enum class OpKind {
  Parameter,
  Constant,
  MatMul,
  Add,
  Sub,
  Mul,
  Relu,
  SoftmaxRow,
  Sum,
  Mean,
  RowMask,
  Transpose,
  Reshape,
  ConcatCols,
  Select,
  Broadcast,
  Reciprocal,
  Log,
  Scale,
  Min,
  Max,
};

// Axis that a reduction collapses. Rows: m x n -> 1 x n. Cols: m x n -> m x 1.
enum class Axis { Rows, Cols, All };

template <typename Scalar>
class BasicTape;

template <typename Scalar>
class BasicVar {
 public:
  using Mat = MatrixX<Scalar>;

  BasicVar() = default;
  BasicVar(BasicTape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Mat& value() const { return tape_->value(id_); }
  Mat grad() const { return tape_->grad(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Scalar item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item() on non-scalar tensor");
    return value()(0, 0);
  }

  BasicTape<Scalar>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  BasicTape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class BasicTape {
 public:
  using Mat = MatrixX<Scalar>;
  using Var = BasicVar<Scalar>;
  using Backward = std::function<void(BasicTape&, std::size_t)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var parameter(Mat value, std::string name = {}) {
    Var v = push(OpKind::Parameter, std::move(value), {}, true, nullptr);
    nodes_[v.id()].name = std::move(name);
    return v;
  }

  Var constant(Mat value) { return push(OpKind::Constant, std::move(value), {}, false, nullptr); }

  // Appends an operation node. requires_grad is inherited from the parents;
  // the backward closure is dropped when no parent needs a gradient.
  Var record(OpKind kind, Mat value, std::vector<std::size_t> parents, Backward backward) {
    bool needs = false;
    for (std::size_t p : parents) {
      if (p >= nodes_.size()) throw ContractError("parent index out of range");
      needs = needs || nodes_[p].requires_grad;
    }
    return push(kind, std::move(value), std::move(parents), needs,
                needs ? std::move(backward) : Backward{});
  }

  const Mat& value(std::size_t id) const { return nodes_.at(id).value; }

  Mat grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.has_grad) return n.grad;
    return Mat::Zero(n.value.rows(), n.value.cols());
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  const std::string& name(std::size_t id) const { return nodes_.at(id).name; }
  std::size_t size() const { return nodes_.size(); }

  // Adds a gradient contribution to node `id`. Ignored for nodes that do not
  // require gradients.
  void accumulate(std::size_t id, const Mat& contribution) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.has_grad) {
      n.grad += contribution;
    } else {
      n.grad = contribution;
      n.has_grad = true;
    }
  }

  const Mat& upstream(std::size_t id) const { return nodes_[id].grad; }

  void backward(const Var& root) {
    if (root.tape() != this) throw ContractError("backward root belongs to another tape");
    const Node& r = nodes_.at(root.id());
    if (r.value.rows() != 1 || r.value.cols() != 1)
      throw ContractError("backward root must be a 1x1 tensor");
    if (!r.requires_grad) throw ContractError("backward on a detached tensor");
    if (backward_done_) throw ContractError("backward already ran; call zero_grad() first");
    backward_done_ = true;
    accumulate(root.id(), Mat::Ones(1, 1));
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
    backward_done_ = false;
  }

  // (name, dL/dparam) for every parameter node, in creation order.
  std::vector<std::pair<std::string, Mat>> gradient_table() const {
    std::vector<std::pair<std::string, Mat>> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].kind == OpKind::Parameter) out.emplace_back(nodes_[i].name, grad(i));
    return out;
  }

  // Smallest distance to a non-differentiable point seen by relu/min/max and
  // by callers through note_kink(). Used to reject finite-difference checks
  // that straddle a kink.
  void note_kink(Scalar distance) { kink_margin_ = std::min(kink_margin_, distance); }
  Scalar kink_margin() const { return kink_margin_; }

 private:
  struct Node {
    OpKind kind;
    Mat value;
    Mat grad;
    std::vector<std::size_t> parents;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
    std::string name;
  };

  Var push(OpKind kind, Mat value, std::vector<std::size_t> parents, bool needs, Backward backward) {
    if (!value.allFinite()) throw NumericError("operation produced a non-finite value");
    nodes_.push_back(Node{kind, std::move(value), Mat{}, std::move(parents), needs, false,
                          std::move(backward), {}});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  Scalar kink_margin_ = std::numeric_limits<Scalar>::infinity();
};

using Tape = BasicTape<double>;
using Var = BasicVar<double>;

namespace detail {

template <typename Scalar>
BasicTape<Scalar>& same_tape(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  if (!a.valid() || a.tape() != b.tape()) throw ContractError("operands live on different tapes");
  return *a.tape();
}

enum class Binary { Add, Sub, Mul };

template <typename Scalar>
BasicVar<Scalar> binary(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b, Binary op) {
  using Mat = MatrixX<Scalar>;
  BasicTape<Scalar>& t = same_tape(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  const bool same = av.rows() == bv.rows() && av.cols() == bv.cols();
  const bool row_bcast = !same && bv.rows() == 1 && bv.cols() == av.cols();
  if (!same && !row_bcast)
    throw ShapeError("elementwise operands have incompatible shapes");

  Mat b_full = row_bcast ? Mat(bv.replicate(av.rows(), 1)) : bv;
  Mat out;
  OpKind kind;
  switch (op) {
    case Binary::Add: out = av + b_full; kind = OpKind::Add; break;
    case Binary::Sub: out = av - b_full; kind = OpKind::Sub; break;
    default: out = av.cwiseProduct(b_full); kind = OpKind::Mul; break;
  }
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return t.record(kind, std::move(out), {ia, ib},
                  [ia, ib, op, row_bcast](BasicTape<Scalar>& tape, std::size_t self) {
                    const Mat& g = tape.upstream(self);
                    auto reduce_b = [&](const Mat& m) -> Mat {
                      return row_bcast ? Mat(m.colwise().sum()) : m;
                    };
                    switch (op) {
                      case Binary::Add:
                        tape.accumulate(ia, g);
                        tape.accumulate(ib, reduce_b(g));
                        break;
                      case Binary::Sub:
                        tape.accumulate(ia, g);
                        tape.accumulate(ib, reduce_b(-g));
                        break;
                      case Binary::Mul: {
                        const Mat& av = tape.value(ia);
                        const Mat& bv = tape.value(ib);
                        Mat bf = row_bcast ? Mat(bv.replicate(av.rows(), 1)) : bv;
                        tape.accumulate(ia, g.cwiseProduct(bf));
                        tape.accumulate(ib, reduce_b(g.cwiseProduct(av)));
                        break;
                      }
                    }
                  });
}

template <typename Scalar>
BasicVar<Scalar> extremum(const BasicVar<Scalar>& a, bool take_max) {
  using Mat = MatrixX<Scalar>;
  BasicTape<Scalar>& t = *a.tape();
  const Mat& av = a.value();
  if (av.size() == 0) throw ShapeError("min/max of an empty tensor");
  Eigen::Index r = 0;
  Eigen::Index c = 0;
  const Scalar best = take_max ? av.maxCoeff(&r, &c) : av.minCoeff(&r, &c);
  // Gap to the runner-up distinct value. Exact ties are structural (e.g. all
  // pruned channels at zero) and carry identical derivatives, so skip them.
  Scalar gap = std::numeric_limits<Scalar>::infinity();
  for (Eigen::Index i = 0; i < av.size(); ++i) {
    const Scalar x = av.data()[i];
    if (x != best) gap = std::min(gap, std::abs(x - best));
  }
  t.note_kink(gap);
  const std::size_t ia = a.id();
  return t.record(take_max ? OpKind::Max : OpKind::Min, Mat::Constant(1, 1, best), {ia},
                  [ia, r, c](BasicTape<Scalar>& tape, std::size_t self) {
                    const Mat& av = tape.value(ia);
                    Mat g = Mat::Zero(av.rows(), av.cols());
                    g(r, c) = tape.upstream(self)(0, 0);
                    tape.accumulate(ia, g);
                  });
}

}  // namespace detail

template <typename Scalar>
BasicVar<Scalar> matmul(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  using Mat = MatrixX<Scalar>;
  BasicTape<Scalar>& t = detail::same_tape(a, b);
  if (a.cols() != b.rows()) throw ShapeError("matmul inner dimensions disagree");
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return t.record(OpKind::MatMul, a.value() * b.value(), {ia, ib},
                  [ia, ib](BasicTape<Scalar>& tape, std::size_t self) {
                    const Mat& g = tape.upstream(self);
                    if (tape.requires_grad(ia)) tape.accumulate(ia, g * tape.value(ib).transpose());
                    if (tape.requires_grad(ib)) tape.accumulate(ib, tape.value(ia).transpose() * g);
                  });
}

template <typename Scalar>
BasicVar<Scalar> add(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  return detail::binary(a, b, detail::Binary::Add);
}

template <typename Scalar>
BasicVar<Scalar> sub(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  return detail::binary(a, b, detail::Binary::Sub);
}

// Hadamard product.
template <typename Scalar>
BasicVar<Scalar> mul(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  return detail::binary(a, b, detail::Binary::Mul);
}

template <typename Scalar>
BasicVar<Scalar> operator+(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  return add(a, b);
}

template <typename Scalar>
BasicVar<Scalar> operator-(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  return sub(a, b);
}

// Subgradient at exactly zero is zero.
template <typename Scalar>
BasicVar<Scalar> relu(const BasicVar<Scalar>& a) {
  using Mat = MatrixX<Scalar>;
  BasicTape<Scalar>& t = *a.tape();
  const Mat& av = a.value();
  Scalar margin = std::numeric_limits<Scalar>::infinity();
  for (Eigen::Index i = 0; i < av.size(); ++i) {
    const Scalar x = av.data()[i];
    if (x != Scalar(0)) margin = std::min(margin, std::abs(x));
  }
  t.note_kink(margin);
  const std::size_t ia = a.id();
  return t.record(OpKind::Relu, av.cwiseMax(Scalar(0)), {ia},
                  [ia](BasicTape<Scalar>& tape, std::size_t self) {
                    const Mat& x = tape.value(ia);
                    Mat g = (x.array() > Scalar(0)).select(tape.upstream(self), Scalar(0));
                    tape.accumulate(ia, g);
                  });
}

// Row-wise softmax, stabilised by subtracting each row's maximum.
template <typename Scalar>
BasicVar<Scalar> softmax_row(const BasicVar<Scalar>& a) {
  using Mat = MatrixX<Scalar>;
  BasicTape<Scalar>& t = *a.tape();
  Mat s = a.value();
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    s.row(r).array() -= s.row(r).maxCoeff();
    s.row(r) = s.row(r).array().exp();
    s.row(r) /= s.row(r).sum();
  }
  const std::size_t ia = a.id();
  return t.record(OpKind::SoftmaxRow, std::move(s), {ia},
                  [ia](BasicTape<Scalar>& tape, std::size_t self) {
                    const Mat& s = tape.value(self);
                    const Mat& g = tape.upstream(self);
                    Mat gx(s.rows(), s.cols());
                    for (Eigen::Index r = 0; r < s.rows(); ++r) {
                      const Scalar dot = g.row(r).dot(s.row(r));
                      gx.row(r) = s.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
                    }
                    tape.accumulate(ia, gx);
                  });
}

template <typename Scalar>
BasicVar<Scalar> sum(const BasicVar<Scalar>& a, Axis axis = Axis::All) {
  using Mat = MatrixX<Scalar>;
  BasicTape<Scalar>& t = *a.tape();
  const Mat& av = a.value();
  Mat out;
  switch (axis) {
    case Axis::Rows: out = av.colwise().sum(); break;
    case Axis::Cols: out = av.rowwise().sum(); break;
    case Axis::All: out = Mat::Constant(1, 1, av.sum()); break;
  }
  const std::size_t ia = a.id();
  return t.record(OpKind::Sum, std::move(out), {ia},
                  [ia, axis](BasicTape<Scalar>& tape, std::size_t self) {
                    const Mat& g = tape.upstream(self);
                    const auto m = tape.value(ia).rows();
                    const auto n = tape.value(ia).cols();
                    switch (axis) {
                      case Axis::Rows: tape.accumulate(ia, g.replicate(m, 1)); break;
                      case Axis::Cols: tape.accumulate(ia, g.replicate(1, n)); break;
                      case Axis::All: tape.accumulate(ia, Mat::Constant(m, n, g(0, 0))); break;
                    }
                  });
}

template <typename Scalar>
BasicVar<Scalar> mean(const BasicVar<Scalar>& a, Axis axis = Axis::All) {
  using Mat = MatrixX<Scalar>;
  BasicTape<Scalar>& t = *a.tape();
  const Mat& av = a.value();
  if (av.size() == 0) throw ShapeError("mean of an empty tensor");
  Mat out;
  Scalar count = 1;
  switch (axis) {
    case Axis::Rows: out = av.colwise().mean(); count = Scalar(av.rows()); break;
    case Axis::Cols: out = av.rowwise().mean(); count = Scalar(av.cols()); break;
    case Axis::All: out = Mat::Constant(1, 1, av.mean()); count = Scalar(av.size()); break;
  }
  const std::size_t ia = a.id();
  return t.record(OpKind::Mean, std::move(out), {ia},
                  [ia, axis, count](BasicTape<Scalar>& tape, std::size_t self) {
                    const Mat g = tape.upstream(self) / count;
                    const auto m = tape.value(ia).rows();
                    const auto n = tape.value(ia).cols();
                    switch (axis) {
                      case Axis::Rows: tape.accumulate(ia, g.replicate(m, 1)); break;
                      case Axis::Cols: tape.accumulate(ia, g.replicate(1, n)); break;
                      case Axis::All: tape.accumulate(ia, Mat::Constant(m, n, g(0, 0))); break;
                    }
                  });
}

// Zeroes rows whose mask entry is false. Gradients flow only through kept rows.
template <typename Scalar>
BasicVar<Scalar> row_mask(const BasicVar<Scalar>& a, const KeepMask& mask) {
  using Mat = MatrixX<Scalar>;
  BasicTape<Scalar>& t = *a.tape();
  if (mask.size() != a.rows()) throw ShapeError("row mask length differs from row count");
  Mat out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    if (!mask(r)) out.row(r).setZero();
  const std::size_t ia = a.id();
  return t.record(OpKind::RowMask, std::move(out), {ia},
                  [ia, mask](BasicTape<Scalar>& tape, std::size_t self) {
                    Mat g = tape.upstream(self);
                    for (Eigen::Index r = 0; r < g.rows(); ++r)
                      if (!mask(r)) g.row(r).setZero();
                    tape.accumulate(ia, g);
                  });
}

template <typename Scalar>
BasicVar<Scalar> transpose(const BasicVar<Scalar>& a) {
  const std::size_t ia = a.id();
  return a.tape()->record(OpKind::Transpose, a.value().transpose(), {ia},
                          [ia](BasicTape<Scalar>& tape, std::size_t self) {
                            tape.accumulate(ia, tape.upstream(self).transpose());
                          });
}

// Row-major reinterpretation; flatten(H) is reshape(H, 1, rows*cols).
template <typename Scalar>
BasicVar<Scalar> reshape(const BasicVar<Scalar>& a, Eigen::Index rows, Eigen::Index cols) {
  using Mat = MatrixX<Scalar>;
  if (rows * cols != a.value().size()) throw ShapeError("reshape changes element count");
  Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  const std::size_t ia = a.id();
  return a.tape()->record(OpKind::Reshape, std::move(out), {ia},
                          [ia](BasicTape<Scalar>& tape, std::size_t self) {
                            const Mat& x = tape.value(ia);
                            tape.accumulate(ia, Eigen::Map<const Mat>(tape.upstream(self).data(),
                                                                      x.rows(), x.cols()));
                          });
}

template <typename Scalar>
BasicVar<Scalar> concat_cols(std::span<const BasicVar<Scalar>> parts) {
  using Mat = MatrixX<Scalar>;
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  BasicTape<Scalar>& t = *parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw ContractError("operands live on different tapes");
    if (p.rows() != rows) throw ShapeError("concat_cols operands differ in row count");
    cols += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  Mat out(rows, cols);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return t.record(OpKind::ConcatCols, std::move(out), ids,
                  [ids, widths](BasicTape<Scalar>& tape, std::size_t self) {
                    const Mat& g = tape.upstream(self);
                    Eigen::Index off = 0;
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      tape.accumulate(ids[i], g.middleCols(off, widths[i]));
                      off += widths[i];
                    }
                  });
}

template <typename Scalar>
BasicVar<Scalar> concat_cols(std::initializer_list<BasicVar<Scalar>> parts) {
  std::vector<BasicVar<Scalar>> v(parts);
  return concat_cols(std::span<const BasicVar<Scalar>>(v));
}

// Single entry as a 1x1 tensor.
template <typename Scalar>
BasicVar<Scalar> select(const BasicVar<Scalar>& a, Eigen::Index row, Eigen::Index col) {
  using Mat = MatrixX<Scalar>;
  if (row < 0 || col < 0 || row >= a.rows() || col >= a.cols())
    throw ShapeError("select index out of range");
  const std::size_t ia = a.id();
  return a.tape()->record(OpKind::Select, Mat::Constant(1, 1, a.value()(row, col)), {ia},
                          [ia, row, col](BasicTape<Scalar>& tape, std::size_t self) {
                            const Mat& x = tape.value(ia);
                            Mat g = Mat::Zero(x.rows(), x.cols());
                            g(row, col) = tape.upstream(self)(0, 0);
                            tape.accumulate(ia, g);
                          });
}

// Expands a 1x1 tensor to rows x cols.
template <typename Scalar>
BasicVar<Scalar> broadcast(const BasicVar<Scalar>& s, Eigen::Index rows, Eigen::Index cols) {
  using Mat = MatrixX<Scalar>;
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("broadcast source must be 1x1");
  const std::size_t is = s.id();
  return s.tape()->record(OpKind::Broadcast, Mat::Constant(rows, cols, s.value()(0, 0)), {is},
                          [is](BasicTape<Scalar>& tape, std::size_t self) {
                            tape.accumulate(is, Mat::Constant(1, 1, tape.upstream(self).sum()));
                          });
}

template <typename Scalar>
BasicVar<Scalar> reciprocal(const BasicVar<Scalar>& a) {
  using Mat = MatrixX<Scalar>;
  const std::size_t ia = a.id();
  return a.tape()->record(OpKind::Reciprocal, a.value().cwiseInverse(), {ia},
                          [ia](BasicTape<Scalar>& tape, std::size_t self) {
                            const Mat& y = tape.value(self);
                            tape.accumulate(ia, -tape.upstream(self).cwiseProduct(y.cwiseProduct(y)));
                          });
}

// log(max(x, floor)); no gradient where the floor is active.
template <typename Scalar>
BasicVar<Scalar> log_clamped(const BasicVar<Scalar>& a, Scalar floor = Scalar(1e-12)) {
  using Mat = MatrixX<Scalar>;
  const std::size_t ia = a.id();
  return a.tape()->record(OpKind::Log, a.value().cwiseMax(floor).array().log().matrix(), {ia},
                          [ia, floor](BasicTape<Scalar>& tape, std::size_t self) {
                            const Mat& x = tape.value(ia);
                            Mat g = (x.array() > floor)
                                        .select(tape.upstream(self).array() / x.array(), Scalar(0));
                            tape.accumulate(ia, g);
                          });
}

template <typename Scalar>
BasicVar<Scalar> scale(const BasicVar<Scalar>& a, Scalar factor) {
  const std::size_t ia = a.id();
  return a.tape()->record(OpKind::Scale, a.value() * factor, {ia},
                          [ia, factor](BasicTape<Scalar>& tape, std::size_t self) {
                            tape.accumulate(ia, tape.upstream(self) * factor);
                          });
}

template <typename Scalar>
BasicVar<Scalar> operator*(Scalar factor, const BasicVar<Scalar>& a) {
  return scale(a, factor);
}

// Global minimum/maximum as 1x1; gradient routes to the first extremal entry.
template <typename Scalar>
BasicVar<Scalar> min_all(const BasicVar<Scalar>& a) {
  return detail::extremum(a, false);
}

template <typename Scalar>
BasicVar<Scalar> max_all(const BasicVar<Scalar>& a) {
  return detail::extremum(a, true);
}

}  // namespace apagnn
