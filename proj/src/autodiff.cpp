#include "sldm/autodiff.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace sldm::ad {

const Eigen::MatrixXd& Var::value() const { return tape->value(*this); }

Var Tape::push(Eigen::MatrixXd value, std::vector<int> inputs, std::function<void(Tape&, int)> backward) {
  Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.backward = std::move(backward);
  for (int in : n.inputs) n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(in)].requires_grad;
  if (!n.requires_grad) n.backward = nullptr;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Eigen::MatrixXd value) { return push(std::move(value), {}, nullptr); }

Var Tape::variable(Eigen::MatrixXd value) {
  Var v = push(std::move(value), {}, nullptr);
  nodes_.back().requires_grad = true;
  return v;
}

Var Tape::parameter(Parameter& p) {
  Var v = push(p.value, {}, nullptr);
  nodes_.back().param = &p;
  nodes_.back().requires_grad = true;
  return v;
}

Eigen::MatrixXd& Tape::grad_ref(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) {
    // Writes to gradients nobody asked for land in a scratch buffer.
    static thread_local Eigen::MatrixXd sink;
    sink.setZero(n.value.rows(), n.value.cols());
    return sink;
  }
  if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Eigen::MatrixXd::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Eigen::MatrixXd Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) return Eigen::MatrixXd::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw std::invalid_argument("backward: variable belongs to another tape");
  const Eigen::MatrixXd& rv = value(root);
  if (rv.rows() != 1 || rv.cols() != 1) throw std::invalid_argument("backward: root must be a 1 x 1 scalar");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  grad_ref(root.id).setConstant(1.0);
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param) n.param->grad += n.grad;
  }
}

namespace {

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw std::invalid_argument("autodiff: variables on different tapes");
}

void require_same_shape(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(
        fmt::format("{}: shape mismatch ({}x{} vs {}x{})", op, a.rows(), a.cols(), b.rows(), b.cols()));
}

// Unary elementwise op whose derivative is a function of (input, output).
template <typename F, typename D>
Var unary(Var a, F f, D df) {
  Tape& t = *a.tape;
  return t.push(f(a.value()), {a.id}, [df](Tape& t, int id) {
    const int in = t.inputs_of(id)[0];
    t.grad_ref(in).array() += t.grad_ref(id).array() * df(t.value_of(in), t.value_of(id)).array();
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows())
    throw std::invalid_argument(fmt::format("matmul: inner dimensions differ ({} vs {})", a.cols(), b.rows()));
  return a.tape->push(a.value() * b.value(), {a.id, b.id}, [](Tape& t, int id) {
    const int ia = t.inputs_of(id)[0], ib = t.inputs_of(id)[1];
    const Eigen::MatrixXd& g = t.grad_ref(id);
    if (t.requires_grad(ia)) t.grad_ref(ia).noalias() += g * t.value_of(ib).transpose();
    if (t.requires_grad(ib)) t.grad_ref(ib).noalias() += t.value_of(ia).transpose() * g;
  });
}

Var affine(Var x, Var w, Var b) {
  require_same_tape(x, w);
  require_same_tape(x, b);
  if (x.cols() != w.rows()) throw std::invalid_argument("affine: inner dimensions differ");
  if (b.rows() != 1 || b.cols() != w.cols()) throw std::invalid_argument("affine: bias must be 1 x cols(w)");
  Eigen::MatrixXd out(x.rows(), w.cols());
  out.noalias() = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return x.tape->push(std::move(out), {x.id, w.id, b.id}, [](Tape& t, int id) {
    const int ix = t.inputs_of(id)[0], iw = t.inputs_of(id)[1], ib = t.inputs_of(id)[2];
    const Eigen::MatrixXd& g = t.grad_ref(id);
    if (t.requires_grad(ix)) t.grad_ref(ix).noalias() += g * t.value_of(iw).transpose();
    if (t.requires_grad(iw)) t.grad_ref(iw).noalias() += t.value_of(ix).transpose() * g;
    if (t.requires_grad(ib)) t.grad_ref(ib) += g.colwise().sum();
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  return a.tape->push(a.value() + b.value(), {a.id, b.id}, [](Tape& t, int id) {
    t.grad_ref(t.inputs_of(id)[0]) += t.grad_ref(id);
    t.grad_ref(t.inputs_of(id)[1]) += t.grad_ref(id);
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  return a.tape->push(a.value() - b.value(), {a.id, b.id}, [](Tape& t, int id) {
    t.grad_ref(t.inputs_of(id)[0]) += t.grad_ref(id);
    t.grad_ref(t.inputs_of(id)[1]) -= t.grad_ref(id);
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  return a.tape->push(a.value().cwiseProduct(b.value()), {a.id, b.id}, [](Tape& t, int id) {
    const int ia = t.inputs_of(id)[0], ib = t.inputs_of(id)[1];
    const Eigen::MatrixXd& g = t.grad_ref(id);
    t.grad_ref(ia) += g.cwiseProduct(t.value_of(ib));
    t.grad_ref(ib) += g.cwiseProduct(t.value_of(ia));
  });
}

Var add_row(Var a, Var row) {
  require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: row must be 1 x cols(a)");
  Eigen::MatrixXd out = a.value();
  out.rowwise() += row.value().row(0);
  return a.tape->push(std::move(out), {a.id, row.id}, [](Tape& t, int id) {
    const Eigen::MatrixXd& g = t.grad_ref(id);
    t.grad_ref(t.inputs_of(id)[0]) += g;
    t.grad_ref(t.inputs_of(id)[1]) += g.colwise().sum();
  });
}

Var mul_colwise(Var a, Var col) {
  require_same_tape(a, col);
  if (col.cols() != 1 || col.rows() != a.rows()) throw std::invalid_argument("mul_colwise: col must be rows(a) x 1");
  Eigen::MatrixXd out = a.value().array().colwise() * col.value().col(0).array();
  return a.tape->push(std::move(out), {a.id, col.id}, [](Tape& t, int id) {
    const int ia = t.inputs_of(id)[0], ic = t.inputs_of(id)[1];
    const Eigen::MatrixXd& g = t.grad_ref(id);
    t.grad_ref(ia).array() += g.array().colwise() * t.value_of(ic).col(0).array();
    t.grad_ref(ic).col(0) += g.cwiseProduct(t.value_of(ia)).rowwise().sum();
  });
}

Var scale(Var a, double c) {
  return a.tape->push(c * a.value(), {a.id}, [c](Tape& t, int id) { t.grad_ref(t.inputs_of(id)[0]) += c * t.grad_ref(id); });
}

Var add_scalar(Var a, double c) {
  return a.tape->push(a.value().array() + c, {a.id},
                      [](Tape& t, int id) { t.grad_ref(t.inputs_of(id)[0]) += t.grad_ref(id); });
}

Eigen::MatrixXd silu(const Eigen::MatrixXd& x) {
  return x.array() / (1.0 + (-x.array()).exp());
}

Var silu(Var a) {
  Eigen::ArrayXXd sig = 1.0 / (1.0 + (-a.value().array()).exp());
  Eigen::MatrixXd out = a.value().array() * sig;
  return a.tape->push(std::move(out), {a.id}, [sig = std::move(sig)](Tape& t, int id) {
    const int in = t.inputs_of(id)[0];
    t.grad_ref(in).array() += t.grad_ref(id).array() * (sig + t.value_of(id).array() * (1.0 - sig));
  });
}

Var sqrt(Var a) {
  if ((a.value().array() < 0.0).any()) throw std::domain_error("sqrt: negative input");
  return unary(
      a, [](const Eigen::MatrixXd& x) { return Eigen::MatrixXd(x.array().sqrt()); },
      [](const Eigen::MatrixXd&, const Eigen::MatrixXd& y) { return Eigen::MatrixXd(0.5 / y.array()); });
}

Var reciprocal(Var a) {
  return unary(
      a, [](const Eigen::MatrixXd& x) { return Eigen::MatrixXd(x.array().inverse()); },
      [](const Eigen::MatrixXd&, const Eigen::MatrixXd& y) { return Eigen::MatrixXd(-y.array().square()); });
}

Var abs(Var a) {
  return unary(
      a, [](const Eigen::MatrixXd& x) { return Eigen::MatrixXd(x.array().abs()); },
      [](const Eigen::MatrixXd& x, const Eigen::MatrixXd&) {
        return Eigen::MatrixXd((x.array() > 0.0).cast<double>() - (x.array() < 0.0).cast<double>());
      });
}

Var tanh(Var a) {
  return unary(
      a, [](const Eigen::MatrixXd& x) { return Eigen::MatrixXd(x.array().tanh()); },
      [](const Eigen::MatrixXd&, const Eigen::MatrixXd& y) { return Eigen::MatrixXd(1.0 - y.array().square()); });
}

Var row_sq_norm(Var a) {
  return a.tape->push(a.value().rowwise().squaredNorm(), {a.id}, [](Tape& t, int id) {
    const int in = t.inputs_of(id)[0];
    t.grad_ref(in).array() += (t.value_of(in).array().colwise() * (2.0 * t.grad_ref(id).col(0).array()));
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& tape = *parts.front().tape;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  for (Var p : parts) {
    require_same_tape(parts.front(), p);
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row counts differ");
    cols += p.cols();
    ids.push_back(p.id);
  }
  Eigen::MatrixXd out(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return tape.push(std::move(out), std::move(ids), [](Tape& t, int id) {
    Eigen::Index c = 0;
    for (int in : t.inputs_of(id)) {
      const Eigen::Index w = t.value_of(in).cols();
      t.grad_ref(in) += t.grad_ref(id).middleCols(c, w);
      c += w;
    }
  });
}

Var gather_rows(Var a, std::vector<int> index) {
  const Eigen::MatrixXd& av = a.value();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(index.size()), av.cols());
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] < 0 || index[k] >= av.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(k)) = av.row(index[k]);
  }
  return a.tape->push(std::move(out), {a.id}, [index = std::move(index)](Tape& t, int id) {
    Eigen::MatrixXd& ga = t.grad_ref(t.inputs_of(id)[0]);
    const Eigen::MatrixXd& g = t.grad_ref(id);
    for (std::size_t k = 0; k < index.size(); ++k) ga.row(index[k]) += g.row(static_cast<Eigen::Index>(k));
  });
}

Var scatter_add_rows(Var a, std::vector<int> index, Eigen::Index rows) {
  const Eigen::MatrixXd& av = a.value();
  if (static_cast<Eigen::Index>(index.size()) != av.rows())
    throw std::invalid_argument("scatter_add_rows: one index per input row required");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(rows, av.cols());
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] < 0 || index[k] >= rows) throw std::out_of_range("scatter_add_rows: index out of range");
    out.row(index[k]) += av.row(static_cast<Eigen::Index>(k));
  }
  return a.tape->push(std::move(out), {a.id}, [index = std::move(index)](Tape& t, int id) {
    Eigen::MatrixXd& ga = t.grad_ref(t.inputs_of(id)[0]);
    const Eigen::MatrixXd& g = t.grad_ref(id);
    for (std::size_t k = 0; k < index.size(); ++k) ga.row(static_cast<Eigen::Index>(k)) += g.row(index[k]);
  });
}

namespace {

Eigen::MatrixXd centered_blocks(const Eigen::MatrixXd& x, Eigen::Index block) {
  Eigen::MatrixXd out = x;
  for (Eigen::Index b = 0; b < x.rows(); b += block) {
    const Eigen::RowVectorXd m = x.middleRows(b, block).colwise().mean();
    out.middleRows(b, block).rowwise() -= m;
  }
  return out;
}

}  // namespace

Var center_blocks(Var a, Eigen::Index block) {
  if (block < 1 || a.rows() % block != 0)
    throw std::invalid_argument("center_blocks: row count must be a multiple of the block size");
  return a.tape->push(centered_blocks(a.value(), block), {a.id}, [block](Tape& t, int id) {
    t.grad_ref(t.inputs_of(id)[0]) += centered_blocks(t.grad_ref(id), block);
  });
}

Var log_softmax_rows(Var a) {
  const Eigen::MatrixXd& x = a.value();
  const Eigen::VectorXd hi = x.rowwise().maxCoeff();
  Eigen::MatrixXd shifted = x.colwise() - hi;
  const Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log();
  shifted.colwise() -= lse;
  return a.tape->push(std::move(shifted), {a.id}, [](Tape& t, int id) {
    const Eigen::MatrixXd& g = t.grad_ref(id);
    const Eigen::ArrayXXd p = t.value_of(id).array().exp();
    t.grad_ref(t.inputs_of(id)[0]).array() += g.array() - p.colwise() * g.rowwise().sum().array();
  });
}

Var sum(Var a) {
  return a.tape->push(Eigen::MatrixXd::Constant(1, 1, a.value().sum()), {a.id}, [](Tape& t, int id) {
    t.grad_ref(t.inputs_of(id)[0]).array() += t.grad_ref(id)(0, 0);
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / n);
}

Linear::Linear(Eigen::Index in, Eigen::Index out)
    : weight(Eigen::MatrixXd::Zero(in, out)), bias(Eigen::MatrixXd::Zero(1, out)) {}

Var Linear::operator()(Tape& tape, Var x) { return affine(x, tape.parameter(weight), tape.parameter(bias)); }

Eigen::MatrixXd Linear::apply(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd y = x * weight.value;
  y.rowwise() += bias.value.row(0);
  return y;
}

}  // namespace sldm::ad
