#pragma once

#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace sldm::ad {

/// Trainable matrix with an accumulated gradient.
struct Parameter {
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;

  Parameter() = default;
  explicit Parameter(Eigen::MatrixXd v) : value(std::move(v)), grad(Eigen::MatrixXd::Zero(value.rows(), value.cols())) {}
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a matrix-valued node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Eigen::MatrixXd& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Records matrix operations for a single reverse sweep. Not thread-safe;
/// use one tape per thread.
class Tape {
 public:
  Var constant(Eigen::MatrixXd value);
  /// Leaf whose gradient is tracked and readable through grad().
  Var variable(Eigen::MatrixXd value);
  /// Leaf whose gradient is added to `p.grad` by backward().
  Var parameter(Parameter& p);

  /// Seeds d(root)/d(root) = 1 (root must be 1 x 1) and propagates.
  void backward(Var root);

  const Eigen::MatrixXd& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  /// Gradient of the last backward() root with respect to `v` (zero if unused).
  Eigen::MatrixXd grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Used by the op implementations.
  Var push(Eigen::MatrixXd value, std::vector<int> inputs, std::function<void(Tape&, int)> backward);
  Eigen::MatrixXd& grad_ref(int id);
  const Eigen::MatrixXd& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const std::vector<int>& inputs_of(int id) const { return nodes_[static_cast<std::size_t>(id)].inputs; }
  /// False for constants and for nodes computed only from constants.
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

 private:
  struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;  // empty until touched
    std::vector<int> inputs;
    std::function<void(Tape&, int)> backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
/// a (n x k) plus a 1 x k row broadcast over rows.
Var add_row(Var a, Var row);
/// Each row i of a (n x k) scaled by col(i) (n x 1).
Var mul_colwise(Var a, Var col);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var silu(Var a);
Var sqrt(Var a);
Var reciprocal(Var a);
Var abs(Var a);
Var tanh(Var a);
/// Row-wise squared norm, n x 1.
Var row_sq_norm(Var a);
Var concat_cols(const std::vector<Var>& parts);
/// out.row(k) = a.row(index[k]).
Var gather_rows(Var a, std::vector<int> index);
/// out.row(index[k]) += a.row(k), out has `rows` rows.
Var scatter_add_rows(Var a, std::vector<int> index, Eigen::Index rows);
/// Subtracts the mean of each consecutive block of `block` rows.
Var center_blocks(Var a, Eigen::Index block);
/// Row-wise log-softmax.
Var log_softmax_rows(Var a);
Var sum(Var a);   // 1 x 1
Var mean(Var a);  // 1 x 1

/// x W + b with b broadcast over rows, as one node.
Var affine(Var x, Var w, Var b);

/// Linear layer y = x W + b with W (in x out) and b (1 x out).
struct Linear {
  Parameter weight;
  Parameter bias;

  Linear() = default;
  Linear(Eigen::Index in, Eigen::Index out);
  Var operator()(Tape& tape, Var x);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
  Eigen::Index in() const { return weight.value.rows(); }
  Eigen::Index out() const { return weight.value.cols(); }
};

/// Elementwise x * sigmoid(x) on plain matrices.
Eigen::MatrixXd silu(const Eigen::MatrixXd& x);

}  // namespace sldm::ad
