#include "efn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "efn/special.hpp"

namespace efn::ad {

namespace {

constexpr double kAbsKinkTol = 1e-12;

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConst: return "const";
    case Op::kSlice: return "slice";
    case Op::kReshape: return "reshape";
    case Op::kTranspose: return "transpose";
    case Op::kConcatCols: return "concat_cols";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kAffine: return "affine";
    case Op::kReciprocal: return "reciprocal";
    case Op::kAbs: return "abs";
    case Op::kTanh: return "tanh";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSoftplus: return "softplus";
    case Op::kSqrt: return "sqrt";
    case Op::kLgamma: return "lgamma";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMulScalar: return "mul_scalar";
    case Op::kAddRow: return "add_row";
    case Op::kColAdd: return "col_add";
    case Op::kColMul: return "col_mul";
    case Op::kMatMul: return "matmul";
    case Op::kMatVec: return "matvec";
    case Op::kOuter: return "outer";
    case Op::kDot: return "dot";
    case Op::kSum: return "sum";
    case Op::kRowSum: return "row_sum";
    case Op::kLse0: return "lse0";
    case Op::kTriLogAbsDet: return "tri_log_abs_det";
    case Op::kTrilAssemble: return "tril_assemble";
  }
  return "unknown";
}

const Tensor& Program::const_value(NodeId id) const {
  const Node& n = node(id);
  if (n.op != Op::kConst)
    throw std::invalid_argument("Program::const_value: node is not a const");
  return consts_[n.i0];
}

void Program::set_const(NodeId id, Tensor t) {
  const Node& n = node(id);
  if (n.op != Op::kConst)
    throw std::invalid_argument("Program::set_const: node is not a const");
  if (t.shape() != n.shape)
    throw std::invalid_argument("Program::set_const: shape mismatch");
  consts_[n.i0] = std::move(t);
}

NodeId GraphBuilder::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId GraphBuilder::leaf(std::size_t n) {
  require(leaf_id_ < 0, "a program has exactly one leaf vector");
  Node node{Op::kLeaf};
  node.shape = {n};
  leaf_size_ = n;
  leaf_id_ = push(std::move(node));
  return leaf_id_;
}

NodeId GraphBuilder::constant(Tensor t) {
  Node node{Op::kConst};
  node.shape = t.shape();
  node.i0 = consts_.size();
  consts_.push_back(std::move(t));
  return push(std::move(node));
}

NodeId GraphBuilder::slice(NodeId a, std::size_t offset, std::size_t len) {
  const auto& sa = node(a).shape;
  require(sa.size() == 1, "slice: input must be rank 1");
  require(offset + len <= sa[0], "slice: out of range");
  Node n{Op::kSlice, a};
  n.i0 = offset;
  n.i1 = len;
  n.shape = {len};
  return push(std::move(n));
}

NodeId GraphBuilder::reshape(NodeId a, std::vector<std::size_t> shape) {
  require(Tensor::element_count(shape) ==
              Tensor::element_count(node(a).shape),
          "reshape: element count mismatch");
  Node n{Op::kReshape, a};
  n.shape = std::move(shape);
  return push(std::move(n));
}

NodeId GraphBuilder::transpose(NodeId a) {
  const auto& sa = node(a).shape;
  require(sa.size() == 2, "transpose: rank-2 input required");
  Node n{Op::kTranspose, a};
  n.shape = {sa[1], sa[0]};
  return push(std::move(n));
}

NodeId GraphBuilder::concat_cols(NodeId a, NodeId b) {
  const auto& sa = node(a).shape;
  const auto& sb = node(b).shape;
  require(sa.size() == 2 && sb.size() == 2 && sa[0] == sb[0],
          "concat_cols: row counts must match");
  Node n{Op::kConcatCols, a, b};
  n.shape = {sa[0], sa[1] + sb[1]};
  return push(std::move(n));
}

NodeId GraphBuilder::add(NodeId a, NodeId b) {
  require(node(a).shape == node(b).shape, "add: shape mismatch");
  Node n{Op::kAdd, a, b};
  n.shape = node(a).shape;
  return push(std::move(n));
}

NodeId GraphBuilder::sub(NodeId a, NodeId b) {
  require(node(a).shape == node(b).shape, "sub: shape mismatch");
  Node n{Op::kSub, a, b};
  n.shape = node(a).shape;
  return push(std::move(n));
}

NodeId GraphBuilder::mul(NodeId a, NodeId b) {
  require(node(a).shape == node(b).shape, "mul: shape mismatch");
  Node n{Op::kMul, a, b};
  n.shape = node(a).shape;
  return push(std::move(n));
}

NodeId GraphBuilder::affine(NodeId a, double scale, double shift) {
  Node n{Op::kAffine, a};
  n.c0 = scale;
  n.c1 = shift;
  n.shape = node(a).shape;
  return push(std::move(n));
}

#define EFN_UNARY(FN, OPK)                    \
  NodeId GraphBuilder::FN(NodeId a) {         \
    Node n{Op::OPK, a};                       \
    n.shape = node(a).shape;                  \
    return push(std::move(n));                \
  }

EFN_UNARY(reciprocal, kReciprocal)
EFN_UNARY(abs, kAbs)
EFN_UNARY(tanh, kTanh)
EFN_UNARY(exp, kExp)
EFN_UNARY(log, kLog)
EFN_UNARY(softplus, kSoftplus)
EFN_UNARY(sqrt, kSqrt)
EFN_UNARY(lgamma, kLgamma)
#undef EFN_UNARY

NodeId GraphBuilder::add_scalar(NodeId a, NodeId s) {
  require(Tensor::element_count(node(s).shape) == 1,
          "add_scalar: second input must be scalar");
  Node n{Op::kAddScalar, a, s};
  n.shape = node(a).shape;
  return push(std::move(n));
}

NodeId GraphBuilder::mul_scalar(NodeId a, NodeId s) {
  require(Tensor::element_count(node(s).shape) == 1,
          "mul_scalar: second input must be scalar");
  Node n{Op::kMulScalar, a, s};
  n.shape = node(a).shape;
  return push(std::move(n));
}

NodeId GraphBuilder::add_row(NodeId m, NodeId v) {
  const auto& sm = node(m).shape;
  const auto& sv = node(v).shape;
  require(sm.size() == 2 && sv.size() == 1 && sm[1] == sv[0],
          "add_row: MxD plus D required");
  Node n{Op::kAddRow, m, v};
  n.shape = sm;
  return push(std::move(n));
}

NodeId GraphBuilder::col_add(NodeId m, NodeId v) {
  const auto& sm = node(m).shape;
  const auto& sv = node(v).shape;
  require(sm.size() == 2 && sv.size() == 1 && sm[0] == sv[0],
          "col_add: MxD plus M required");
  Node n{Op::kColAdd, m, v};
  n.shape = sm;
  return push(std::move(n));
}

NodeId GraphBuilder::col_mul(NodeId m, NodeId v) {
  const auto& sm = node(m).shape;
  const auto& sv = node(v).shape;
  require(sm.size() == 2 && sv.size() == 1 && sm[0] == sv[0],
          "col_mul: MxD times M required");
  Node n{Op::kColMul, m, v};
  n.shape = sm;
  return push(std::move(n));
}

NodeId GraphBuilder::matmul(NodeId a, NodeId b) {
  const auto& sa = node(a).shape;
  const auto& sb = node(b).shape;
  require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
          "matmul: inner dimensions must match");
  Node n{Op::kMatMul, a, b};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

NodeId GraphBuilder::matvec(NodeId m, NodeId v) {
  const auto& sm = node(m).shape;
  const auto& sv = node(v).shape;
  require(sm.size() == 2 && sv.size() == 1 && sm[1] == sv[0],
          "matvec: MxK times K required");
  Node n{Op::kMatVec, m, v};
  n.shape = {sm[0]};
  return push(std::move(n));
}

NodeId GraphBuilder::outer(NodeId u, NodeId v) {
  const auto& su = node(u).shape;
  const auto& sv = node(v).shape;
  require(su.size() == 1 && sv.size() == 1, "outer: two vectors required");
  Node n{Op::kOuter, u, v};
  n.shape = {su[0], sv[0]};
  return push(std::move(n));
}

NodeId GraphBuilder::dot(NodeId a, NodeId b) {
  const auto& sa = node(a).shape;
  const auto& sb = node(b).shape;
  require(sa.size() == 1 && sb.size() == 1 && sa[0] == sb[0],
          "dot: equal-length vectors required");
  Node n{Op::kDot, a, b};
  n.shape = {};
  return push(std::move(n));
}

NodeId GraphBuilder::sum(NodeId a) {
  Node n{Op::kSum, a};
  n.shape = {};
  return push(std::move(n));
}

NodeId GraphBuilder::row_sum(NodeId a) {
  const auto& sa = node(a).shape;
  require(sa.size() == 2, "row_sum: rank-2 input required");
  Node n{Op::kRowSum, a};
  n.shape = {sa[0]};
  return push(std::move(n));
}

NodeId GraphBuilder::lse0(NodeId a) {
  const auto& sa = node(a).shape;
  require(sa.size() == 2, "lse0: rank-2 input required");
  Node n{Op::kLse0, a};
  n.shape = {sa[0]};
  return push(std::move(n));
}

NodeId GraphBuilder::tri_log_abs_det(NodeId a) {
  const auto& sa = node(a).shape;
  require(sa.size() == 2 && sa[0] == sa[1],
          "tri_log_abs_det: square matrix required");
  Node n{Op::kTriLogAbsDet, a};
  n.shape = {};
  return push(std::move(n));
}

NodeId GraphBuilder::tril_assemble(NodeId strict_lower, NodeId diag,
                                   std::size_t d) {
  const auto& ss = node(strict_lower).shape;
  const auto& sd = node(diag).shape;
  require(ss.size() == 1 && ss[0] == d * (d - 1) / 2,
          "tril_assemble: strict-lower length must be d(d-1)/2");
  require(sd.size() == 1 && sd[0] == d, "tril_assemble: diag length must be d");
  Node n{Op::kTrilAssemble, strict_lower, diag};
  n.shape = {d, d};
  return push(std::move(n));
}

Program GraphBuilder::finish(NodeId root) {
  require(root >= 0 && static_cast<std::size_t>(root) < nodes_.size(),
          "finish: bad root id");
  Program p;
  p.nodes_ = std::make_shared<const std::vector<Node>>(std::move(nodes_));
  p.consts_ = std::move(consts_);
  p.leaf_size_ = leaf_size_;
  p.leaf_id_ = leaf_id_;
  p.root_ = root;
  nodes_.clear();
  consts_.clear();
  leaf_id_ = -1;
  leaf_size_ = 0;
  return p;
}

void forward(const Program& p, std::span<const double> leaf, Tape& tape) {
  const std::size_t n = p.node_count();
  tape.values.resize(n);
  tape.abs_kink_node = -1;
  for (std::size_t idx = 0; idx < n; ++idx) {
    const Node& nd = p.node(static_cast<NodeId>(idx));
    Tensor& out = tape.values[idx];
    out.reshape_to(nd.shape);
    double* o = out.data();
    const std::size_t cnt = out.size();
    const Tensor* ta = nd.a >= 0 ? &tape.values[static_cast<std::size_t>(nd.a)]
                                 : nullptr;
    const Tensor* tb = nd.b >= 0 ? &tape.values[static_cast<std::size_t>(nd.b)]
                                 : nullptr;
    switch (nd.op) {
      case Op::kLeaf: {
        if (leaf.size() != p.leaf_size())
          throw std::invalid_argument("forward: leaf size mismatch");
        std::memcpy(o, leaf.data(), cnt * sizeof(double));
        break;
      }
      case Op::kConst: {
        const Tensor& c = p.consts_at(nd.i0);
        std::memcpy(o, c.data(), cnt * sizeof(double));
        break;
      }
      case Op::kSlice: {
        std::memcpy(o, ta->data() + nd.i0, cnt * sizeof(double));
        break;
      }
      case Op::kReshape: {
        std::memcpy(o, ta->data(), cnt * sizeof(double));
        break;
      }
      case Op::kTranspose: {
        const std::size_t r = ta->rows(), c = ta->cols();
        const double* a = ta->data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) o[j * r + i] = a[i * c + j];
        break;
      }
      case Op::kConcatCols: {
        const std::size_t rows = ta->rows(), ca = ta->cols(), cb = tb->cols();
        const double* a = ta->data();
        const double* b = tb->data();
        for (std::size_t i = 0; i < rows; ++i) {
          std::memcpy(o + i * (ca + cb), a + i * ca, ca * sizeof(double));
          std::memcpy(o + i * (ca + cb) + ca, b + i * cb, cb * sizeof(double));
        }
        break;
      }
      case Op::kAdd: {
        const double* a = ta->data();
        const double* b = tb->data();
        for (std::size_t i = 0; i < cnt; ++i) o[i] = a[i] + b[i];
        break;
      }
      case Op::kSub: {
        const double* a = ta->data();
        const double* b = tb->data();
        for (std::size_t i = 0; i < cnt; ++i) o[i] = a[i] - b[i];
        break;
      }
      case Op::kMul: {
        const double* a = ta->data();
        const double* b = tb->data();
        for (std::size_t i = 0; i < cnt; ++i) o[i] = a[i] * b[i];
        break;
      }
      case Op::kAffine: {
        const double* a = ta->data();
        for (std::size_t i = 0; i < cnt; ++i) o[i] = nd.c0 * a[i] + nd.c1;
        break;
      }
      case Op::kReciprocal: {
        const double* a = ta->data();
        for (std::size_t i = 0; i < cnt; ++i) o[i] = 1.0 / a[i];
        break;
      }
      case Op::kAbs: {
        const double* a = ta->data();
        for (std::size_t i = 0; i < cnt; ++i) {
          if (std::abs(a[i]) <= kAbsKinkTol && tape.abs_kink_node < 0)
            tape.abs_kink_node = static_cast<NodeId>(idx);
          o[i] = std::abs(a[i]);
        }
        break;
      }
      case Op::kTanh: {
        const double* a = ta->data();
        for (std::size_t i = 0; i < cnt; ++i) o[i] = std::tanh(a[i]);
        break;
      }
      case Op::kExp: {
        const double* a = ta->data();
        for (std::size_t i = 0; i < cnt; ++i) o[i] = std::exp(a[i]);
        break;
      }
      case Op::kLog: {
        const double* a = ta->data();
        for (std::size_t i = 0; i < cnt; ++i) o[i] = std::log(a[i]);
        break;
      }
      case Op::kSoftplus: {
        const double* a = ta->data();
        for (std::size_t i = 0; i < cnt; ++i) o[i] = stable_softplus(a[i]);
        break;
      }
      case Op::kSqrt: {
        const double* a = ta->data();
        for (std::size_t i = 0; i < cnt; ++i) o[i] = std::sqrt(a[i]);
        break;
      }
      case Op::kLgamma: {
        const double* a = ta->data();
        for (std::size_t i = 0; i < cnt; ++i)
          o[i] = a[i] > 0.0 ? lgamma_pos(a[i])
                            : std::numeric_limits<double>::quiet_NaN();
        break;
      }
      case Op::kAddScalar: {
        const double* a = ta->data();
        const double s = tb->data()[0];
        for (std::size_t i = 0; i < cnt; ++i) o[i] = a[i] + s;
        break;
      }
      case Op::kMulScalar: {
        const double* a = ta->data();
        const double s = tb->data()[0];
        for (std::size_t i = 0; i < cnt; ++i) o[i] = a[i] * s;
        break;
      }
      case Op::kAddRow: {
        const std::size_t rows = ta->rows(), cols = ta->cols();
        const double* a = ta->data();
        const double* v = tb->data();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j)
            o[i * cols + j] = a[i * cols + j] + v[j];
        break;
      }
      case Op::kColAdd: {
        const std::size_t rows = ta->rows(), cols = ta->cols();
        const double* a = ta->data();
        const double* v = tb->data();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j)
            o[i * cols + j] = a[i * cols + j] + v[i];
        break;
      }
      case Op::kColMul: {
        const std::size_t rows = ta->rows(), cols = ta->cols();
        const double* a = ta->data();
        const double* v = tb->data();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j)
            o[i * cols + j] = a[i * cols + j] * v[i];
        break;
      }
      case Op::kMatMul: {
        const std::size_t m = ta->rows(), k = ta->cols(), nn = tb->cols();
        const double* a = ta->data();
        const double* b = tb->data();
        std::memset(o, 0, cnt * sizeof(double));
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = a[i * k + kk];
            const double* brow = b + kk * nn;
            double* orow = o + i * nn;
            for (std::size_t j = 0; j < nn; ++j) orow[j] += aik * brow[j];
          }
        break;
      }
      case Op::kMatVec: {
        const std::size_t m = ta->rows(), k = ta->cols();
        const double* a = ta->data();
        const double* v = tb->data();
        for (std::size_t i = 0; i < m; ++i) {
          double s = 0.0;
          const double* arow = a + i * k;
          for (std::size_t j = 0; j < k; ++j) s += arow[j] * v[j];
          o[i] = s;
        }
        break;
      }
      case Op::kOuter: {
        const std::size_t m = ta->size(), d = tb->size();
        const double* u = ta->data();
        const double* v = tb->data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) o[i * d + j] = u[i] * v[j];
        break;
      }
      case Op::kDot: {
        const double* a = ta->data();
        const double* b = tb->data();
        double s = 0.0;
        for (std::size_t i = 0; i < ta->size(); ++i) s += a[i] * b[i];
        o[0] = s;
        break;
      }
      case Op::kSum: {
        const double* a = ta->data();
        double s = 0.0;
        for (std::size_t i = 0; i < ta->size(); ++i) s += a[i];
        o[0] = s;
        break;
      }
      case Op::kRowSum: {
        const std::size_t rows = ta->rows(), cols = ta->cols();
        const double* a = ta->data();
        for (std::size_t i = 0; i < rows; ++i) {
          double s = 0.0;
          const double* arow = a + i * cols;
          for (std::size_t j = 0; j < cols; ++j) s += arow[j];
          o[i] = s;
        }
        break;
      }
      case Op::kLse0: {
        const std::size_t rows = ta->rows(), cols = ta->cols();
        const double* a = ta->data();
        for (std::size_t i = 0; i < rows; ++i) {
          const double* arow = a + i * cols;
          double hi = 0.0;
          for (std::size_t j = 0; j < cols; ++j) hi = std::max(hi, arow[j]);
          double s = std::exp(-hi);
          for (std::size_t j = 0; j < cols; ++j) s += std::exp(arow[j] - hi);
          o[i] = hi + std::log(s);
        }
        break;
      }
      case Op::kTriLogAbsDet: {
        const std::size_t d = ta->rows();
        const double* a = ta->data();
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += std::log(std::abs(a[i * d + i]));
        o[0] = s;
        break;
      }
      case Op::kTrilAssemble: {
        const std::size_t d = tb->size();
        const double* strict = ta->data();
        const double* diag = tb->data();
        std::memset(o, 0, cnt * sizeof(double));
        std::size_t idx2 = 0;
        for (std::size_t i = 0; i < d; ++i) {
          for (std::size_t j = 0; j < i; ++j) o[i * d + j] = strict[idx2++];
          o[i * d + i] = diag[i];
        }
        break;
      }
      default:
        throw std::invalid_argument("forward: unsupported primitive");
    }
    const std::size_t bad = out.first_non_finite();
    if (bad < out.size())
      throw NumericError(static_cast<NodeId>(idx), nd.op, bad);
  }
}

void backward(const Program& p, const Tape& tape, std::vector<double>& grad,
              BackwardWorkspace* ws) {
  const NodeId root = p.root();
  const Tensor& rootv = tape.values[static_cast<std::size_t>(root)];
  if (rootv.size() != 1)
    throw std::invalid_argument("backward: root output must be scalar");

  BackwardWorkspace local;
  BackwardWorkspace& w = ws ? *ws : local;
  const std::size_t n = p.node_count();
  w.grads.resize(n);
  w.live.assign(n, 0);

  auto touch = [&](NodeId id) -> Tensor& {
    Tensor& g = w.grads[static_cast<std::size_t>(id)];
    if (!w.live[static_cast<std::size_t>(id)]) {
      g.reshape_to(p.node(id).shape);
      g.fill(0.0);
      w.live[static_cast<std::size_t>(id)] = 1;
    }
    return g;
  };

  touch(root)[0] = 1.0;

  for (std::size_t ridx = static_cast<std::size_t>(root) + 1; ridx-- > 0;) {
    if (!w.live[ridx]) continue;
    const Node& nd = p.node(static_cast<NodeId>(ridx));
    const Tensor& g = w.grads[ridx];
    const double* gp = g.data();
    const std::size_t cnt = g.size();
    const Tensor* va = nd.a >= 0 ? &tape.values[static_cast<std::size_t>(nd.a)]
                                 : nullptr;
    const Tensor* vb = nd.b >= 0 ? &tape.values[static_cast<std::size_t>(nd.b)]
                                 : nullptr;
    switch (nd.op) {
      case Op::kLeaf:
      case Op::kConst:
        break;
      case Op::kSlice: {
        double* ga = touch(nd.a).data();
        for (std::size_t i = 0; i < cnt; ++i) ga[nd.i0 + i] += gp[i];
        break;
      }
      case Op::kReshape: {
        double* ga = touch(nd.a).data();
        for (std::size_t i = 0; i < cnt; ++i) ga[i] += gp[i];
        break;
      }
      case Op::kTranspose: {
        const std::size_t r = va->rows(), c = va->cols();
        double* ga = touch(nd.a).data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += gp[j * r + i];
        break;
      }
      case Op::kConcatCols: {
        const std::size_t rows = va->rows(), ca = va->cols(), cb = vb->cols();
        double* ga = touch(nd.a).data();
        double* gb = touch(nd.b).data();
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < ca; ++j)
            ga[i * ca + j] += gp[i * (ca + cb) + j];
          for (std::size_t j = 0; j < cb; ++j)
            gb[i * cb + j] += gp[i * (ca + cb) + ca + j];
        }
        break;
      }
      case Op::kAdd: {
        double* ga = touch(nd.a).data();
        double* gb = touch(nd.b).data();
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += gp[i];
          gb[i] += gp[i];
        }
        break;
      }
      case Op::kSub: {
        double* ga = touch(nd.a).data();
        double* gb = touch(nd.b).data();
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += gp[i];
          gb[i] -= gp[i];
        }
        break;
      }
      case Op::kMul: {
        double* ga = touch(nd.a).data();
        double* gb = touch(nd.b).data();
        const double* a = va->data();
        const double* b = vb->data();
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += gp[i] * b[i];
          gb[i] += gp[i] * a[i];
        }
        break;
      }
      case Op::kAffine: {
        double* ga = touch(nd.a).data();
        for (std::size_t i = 0; i < cnt; ++i) ga[i] += nd.c0 * gp[i];
        break;
      }
      case Op::kReciprocal: {
        double* ga = touch(nd.a).data();
        const double* y = tape.values[ridx].data();
        for (std::size_t i = 0; i < cnt; ++i) ga[i] -= gp[i] * y[i] * y[i];
        break;
      }
      case Op::kAbs: {
        double* ga = touch(nd.a).data();
        const double* a = va->data();
        for (std::size_t i = 0; i < cnt; ++i)
          ga[i] += a[i] >= 0.0 ? gp[i] : -gp[i];
        break;
      }
      case Op::kTanh: {
        double* ga = touch(nd.a).data();
        const double* y = tape.values[ridx].data();
        for (std::size_t i = 0; i < cnt; ++i)
          ga[i] += gp[i] * (1.0 - y[i] * y[i]);
        break;
      }
      case Op::kExp: {
        double* ga = touch(nd.a).data();
        const double* y = tape.values[ridx].data();
        for (std::size_t i = 0; i < cnt; ++i) ga[i] += gp[i] * y[i];
        break;
      }
      case Op::kLog: {
        double* ga = touch(nd.a).data();
        const double* a = va->data();
        for (std::size_t i = 0; i < cnt; ++i) ga[i] += gp[i] / a[i];
        break;
      }
      case Op::kSoftplus: {
        double* ga = touch(nd.a).data();
        const double* a = va->data();
        for (std::size_t i = 0; i < cnt; ++i) ga[i] += gp[i] * sigmoid(a[i]);
        break;
      }
      case Op::kSqrt: {
        double* ga = touch(nd.a).data();
        const double* y = tape.values[ridx].data();
        for (std::size_t i = 0; i < cnt; ++i) ga[i] += gp[i] * 0.5 / y[i];
        break;
      }
      case Op::kLgamma: {
        double* ga = touch(nd.a).data();
        const double* a = va->data();
        for (std::size_t i = 0; i < cnt; ++i) ga[i] += gp[i] * digamma(a[i]);
        break;
      }
      case Op::kAddScalar: {
        double* ga = touch(nd.a).data();
        double* gs = touch(nd.b).data();
        double acc = 0.0;
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += gp[i];
          acc += gp[i];
        }
        gs[0] += acc;
        break;
      }
      case Op::kMulScalar: {
        double* ga = touch(nd.a).data();
        double* gs = touch(nd.b).data();
        const double* a = va->data();
        const double s = vb->data()[0];
        double acc = 0.0;
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += gp[i] * s;
          acc += gp[i] * a[i];
        }
        gs[0] += acc;
        break;
      }
      case Op::kAddRow: {
        const std::size_t rows = va->rows(), cols = va->cols();
        double* ga = touch(nd.a).data();
        double* gv = touch(nd.b).data();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) {
            ga[i * cols + j] += gp[i * cols + j];
            gv[j] += gp[i * cols + j];
          }
        break;
      }
      case Op::kColAdd: {
        const std::size_t rows = va->rows(), cols = va->cols();
        double* ga = touch(nd.a).data();
        double* gv = touch(nd.b).data();
        for (std::size_t i = 0; i < rows; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            ga[i * cols + j] += gp[i * cols + j];
            acc += gp[i * cols + j];
          }
          gv[i] += acc;
        }
        break;
      }
      case Op::kColMul: {
        const std::size_t rows = va->rows(), cols = va->cols();
        double* ga = touch(nd.a).data();
        double* gv = touch(nd.b).data();
        const double* a = va->data();
        const double* v = vb->data();
        for (std::size_t i = 0; i < rows; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            ga[i * cols + j] += gp[i * cols + j] * v[i];
            acc += gp[i * cols + j] * a[i * cols + j];
          }
          gv[i] += acc;
        }
        break;
      }
      case Op::kMatMul: {
        const std::size_t m = va->rows(), k = va->cols(), nn = vb->cols();
        double* ga = touch(nd.a).data();
        double* gb = touch(nd.b).data();
        const double* a = va->data();
        const double* b = vb->data();
        // dA = g B^T ; dB = A^T g
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            double s = 0.0;
            const double* grow = gp + i * nn;
            const double* brow = b + kk * nn;
            for (std::size_t j = 0; j < nn; ++j) s += grow[j] * brow[j];
            ga[i * k + kk] += s;
          }
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = a[i * k + kk];
            const double* grow = gp + i * nn;
            double* gbrow = gb + kk * nn;
            for (std::size_t j = 0; j < nn; ++j) gbrow[j] += aik * grow[j];
          }
        break;
      }
      case Op::kMatVec: {
        const std::size_t m = va->rows(), k = va->cols();
        double* gm = touch(nd.a).data();
        double* gv = touch(nd.b).data();
        const double* a = va->data();
        const double* v = vb->data();
        for (std::size_t i = 0; i < m; ++i) {
          const double gi = gp[i];
          const double* arow = a + i * k;
          double* gmrow = gm + i * k;
          for (std::size_t j = 0; j < k; ++j) {
            gmrow[j] += gi * v[j];
            gv[j] += gi * arow[j];
          }
        }
        break;
      }
      case Op::kOuter: {
        const std::size_t m = va->size(), d = vb->size();
        double* gu = touch(nd.a).data();
        double* gv = touch(nd.b).data();
        const double* u = va->data();
        const double* v = vb->data();
        for (std::size_t i = 0; i < m; ++i) {
          double acc = 0.0;
          const double* grow = gp + i * d;
          for (std::size_t j = 0; j < d; ++j) {
            acc += grow[j] * v[j];
            gv[j] += grow[j] * u[i];
          }
          gu[i] += acc;
        }
        break;
      }
      case Op::kDot: {
        double* ga = touch(nd.a).data();
        double* gb = touch(nd.b).data();
        const double* a = va->data();
        const double* b = vb->data();
        const double g0 = gp[0];
        for (std::size_t i = 0; i < va->size(); ++i) {
          ga[i] += g0 * b[i];
          gb[i] += g0 * a[i];
        }
        break;
      }
      case Op::kSum: {
        double* ga = touch(nd.a).data();
        const double g0 = gp[0];
        for (std::size_t i = 0; i < va->size(); ++i) ga[i] += g0;
        break;
      }
      case Op::kRowSum: {
        const std::size_t rows = va->rows(), cols = va->cols();
        double* ga = touch(nd.a).data();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += gp[i];
        break;
      }
      case Op::kLse0: {
        const std::size_t rows = va->rows(), cols = va->cols();
        double* ga = touch(nd.a).data();
        const double* a = va->data();
        const double* u = tape.values[ridx].data();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j)
            ga[i * cols + j] += gp[i] * std::exp(a[i * cols + j] - u[i]);
        break;
      }
      case Op::kTriLogAbsDet: {
        const std::size_t d = va->rows();
        double* ga = touch(nd.a).data();
        const double* a = va->data();
        const double g0 = gp[0];
        for (std::size_t i = 0; i < d; ++i)
          ga[i * d + i] += g0 / a[i * d + i];
        break;
      }
      case Op::kTrilAssemble: {
        const std::size_t d = vb->size();
        double* gs = touch(nd.a).data();
        double* gd = touch(nd.b).data();
        std::size_t idx2 = 0;
        for (std::size_t i = 0; i < d; ++i) {
          for (std::size_t j = 0; j < i; ++j) gs[idx2++] += gp[i * d + j];
          gd[i] += gp[i * d + i];
        }
        break;
      }
      default:
        throw std::invalid_argument("backward: unsupported primitive");
    }
  }

  grad.assign(p.leaf_size(), 0.0);
  const NodeId leaf = p.leaf_node();
  if (leaf >= 0 && w.live[static_cast<std::size_t>(leaf)]) {
    const Tensor& gl = w.grads[static_cast<std::size_t>(leaf)];
    std::copy(gl.data(), gl.data() + gl.size(), grad.begin());
  }
}

double finite_diff_check(const Program& p, std::span<const double> x,
                         double step) {
  if (!(step > 0.0))
    throw std::invalid_argument("finite_diff_check: step must be positive");
  Tape tape;
  forward(p, x, tape);
  if (tape.abs_kink_node >= 0)
    throw NondifferentiableError(tape.abs_kink_node);
  std::vector<double> g_ad;
  backward(p, tape, g_ad);

  std::vector<double> xp(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < xp.size(); ++i) {
    const double saved = xp[i];
    xp[i] = saved + step;
    forward(p, xp, tape);
    const double up = tape.value();
    xp[i] = saved - step;
    forward(p, xp, tape);
    const double dn = tape.value();
    xp[i] = saved;
    const double g_fd = (up - dn) / (2.0 * step);
    const double err = std::abs(g_ad[i] - g_fd) / (std::abs(g_fd) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace efn::ad
