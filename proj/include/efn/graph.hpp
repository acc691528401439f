#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "efn/tensor.hpp"

namespace efn::ad {

using NodeId = std::int32_t;

/// Supported primitives. Structural ops (slice/reshape/concat/assemble) and
/// broadcast variants exist so batched programs stay at tensor granularity.
enum class Op : std::uint8_t {
  kLeaf,
  kConst,
  kSlice,
  kReshape,
  kTranspose,
  kConcatCols,
  kAdd,
  kSub,
  kMul,
  kAffine,      // c0 * x + c1 elementwise
  kReciprocal,
  kAbs,
  kTanh,
  kExp,
  kLog,
  kSoftplus,
  kSqrt,
  kLgamma,
  kAddScalar,   // tensor + rank-0 node
  kMulScalar,   // tensor * rank-0 node
  kAddRow,      // MxD + D-vector, broadcast over rows
  kColAdd,      // MxD + M-vector, broadcast over columns
  kColMul,      // MxD * M-vector, scales row i by v[i]
  kMatMul,
  kMatVec,
  kOuter,       // u (M) x v (D) -> MxD
  kDot,
  kSum,
  kRowSum,
  kLse0,        // row-wise log(1 + sum_j exp(x_ij)), computed shifted
  kTriLogAbsDet,
  kTrilAssemble,  // strict-lower vector + diagonal vector -> DxD
};

const char* op_name(Op op);

struct Node {
  Op op;
  NodeId a = -1;
  NodeId b = -1;
  double c0 = 0.0;
  double c1 = 0.0;
  std::size_t i0 = 0;  // slice offset / const table index
  std::size_t i1 = 0;  // slice length
  std::vector<std::size_t> shape;
};

/// A forward pass hit a non-finite value; carries the offending node.
class NumericError : public std::runtime_error {
 public:
  NumericError(NodeId n, Op op, std::size_t elem)
      : std::runtime_error("non-finite value at node " + std::to_string(n) +
                           " (" + std::string(op_name(op)) + "), element " +
                           std::to_string(elem)),
        node(n),
        op_kind(op) {}
  NodeId node;
  Op op_kind;
};

/// abs() was evaluated at (numerically) zero: the gradient is undefined.
class NondifferentiableError : public std::domain_error {
 public:
  explicit NondifferentiableError(NodeId n)
      : std::domain_error("abs evaluated at a nondifferentiable point (node " +
                          std::to_string(n) + ")"),
        node(n) {}
  NodeId node;
};

/// An operation graph with one flat leaf vector and updatable constant
/// slots. Node structure is shared between copies; constants are per-copy,
/// so each worker can bind its own batch without rebuilding.
class Program {
 public:
  std::size_t node_count() const { return nodes_->size(); }
  const Node& node(NodeId i) const { return (*nodes_)[static_cast<std::size_t>(i)]; }
  std::size_t leaf_size() const { return leaf_size_; }
  NodeId leaf_node() const { return leaf_id_; }
  NodeId root() const { return root_; }

  const Tensor& const_value(NodeId id) const;
  void set_const(NodeId id, Tensor t);
  const Tensor& consts_at(std::size_t i) const { return consts_[i]; }

 private:
  friend class GraphBuilder;
  std::shared_ptr<const std::vector<Node>> nodes_;
  std::vector<Tensor> consts_;
  std::size_t leaf_size_ = 0;
  NodeId leaf_id_ = -1;
  NodeId root_ = -1;
};

/// Execution record of one forward pass: per-node saved values in program
/// order. Together with the Program (op ids + input ids) this is the tape
/// the backward pass consumes; reusing one Tape across passes avoids
/// reallocation.
struct Tape {
  std::vector<Tensor> values;
  NodeId abs_kink_node = -1;

  double value() const { return values.back().value(); }
  const Tensor& at(NodeId id) const {
    return values[static_cast<std::size_t>(id)];
  }
};

/// Scratch buffers for backward passes.
struct BackwardWorkspace {
  std::vector<Tensor> grads;
  std::vector<char> live;
};

/// Evaluate the program at the given leaf values, recording every
/// intermediate on the tape. Throws NumericError on the first non-finite
/// intermediate.
void forward(const Program& p, std::span<const double> leaf, Tape& tape);

/// Gradient of the (scalar) root with respect to every leaf coordinate.
/// Rejects non-scalar roots. Each node is visited exactly once, in reverse
/// program order.
void backward(const Program& p, const Tape& tape, std::vector<double>& grad,
              BackwardWorkspace* ws = nullptr);

/// Central finite differences against the reverse-mode gradient. Returns
/// the max over coordinates of |g_ad - g_fd| / (|g_fd| + 1e-8). Throws
/// NondifferentiableError if the forward pass at the center point takes
/// abs through zero.
double finite_diff_check(const Program& p, std::span<const double> x,
                         double step);

class GraphBuilder {
 public:
  NodeId leaf(std::size_t n);
  NodeId constant(Tensor t);

  NodeId slice(NodeId a, std::size_t offset, std::size_t len);
  NodeId reshape(NodeId a, std::vector<std::size_t> shape);
  NodeId transpose(NodeId a);
  NodeId concat_cols(NodeId a, NodeId b);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId affine(NodeId a, double scale, double shift);
  NodeId neg(NodeId a) { return affine(a, -1.0, 0.0); }

  NodeId reciprocal(NodeId a);
  NodeId abs(NodeId a);
  NodeId tanh(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId softplus(NodeId a);
  NodeId sqrt(NodeId a);
  NodeId lgamma(NodeId a);

  NodeId add_scalar(NodeId a, NodeId s);
  NodeId mul_scalar(NodeId a, NodeId s);
  NodeId add_row(NodeId m, NodeId v);
  NodeId col_add(NodeId m, NodeId v);
  NodeId col_mul(NodeId m, NodeId v);

  NodeId matmul(NodeId a, NodeId b);
  NodeId matvec(NodeId m, NodeId v);
  NodeId outer(NodeId u, NodeId v);
  NodeId dot(NodeId a, NodeId b);

  NodeId sum(NodeId a);
  NodeId row_sum(NodeId a);
  NodeId lse0(NodeId a);

  NodeId tri_log_abs_det(NodeId a);
  NodeId tril_assemble(NodeId strict_lower, NodeId diag, std::size_t d);

  const std::vector<std::size_t>& shape_of(NodeId id) const {
    return nodes_[static_cast<std::size_t>(id)].shape;
  }

  Program finish(NodeId root);

 private:
  NodeId push(Node n);
  const Node& node(NodeId id) const {
    return nodes_[static_cast<std::size_t>(id)];
  }
  void require(bool cond, const std::string& what) const {
    if (!cond) throw std::invalid_argument("GraphBuilder: " + what);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> consts_;
  NodeId leaf_id_ = -1;
  std::size_t leaf_size_ = 0;
};

}  // namespace efn::ad
