#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gpstruct/errors.hpp"

namespace gpstruct {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Base kernels
// ---------------------------------------------------------------------------

enum class BaseKind { Lin, SE, Per, RQ };

inline constexpr int kBaseKindCount = 4;

inline constexpr std::array<BaseKind, kBaseKindCount> kAllBaseKinds{
    BaseKind::Lin, BaseKind::SE, BaseKind::Per, BaseKind::RQ};

/// Number of hyperparameters a leaf of this kind owns (global noise excluded).
inline constexpr int arity(BaseKind k) {
  switch (k) {
    case BaseKind::Lin:
    case BaseKind::SE:
      return 2;
    case BaseKind::Per:
    case BaseKind::RQ:
      return 3;
  }
  return 0;
}

inline const char* base_name(BaseKind k) {
  switch (k) {
    case BaseKind::Lin:
      return "Lin";
    case BaseKind::SE:
      return "SE";
    case BaseKind::Per:
      return "Per";
    case BaseKind::RQ:
      return "RQ";
  }
  return "?";
}

/// Semantic role of a single hyperparameter entry.
enum class ParamRole { Lengthscale, Period, Amplitude, LinOffset, RqShape, Noise };

inline const char* role_name(ParamRole r) {
  switch (r) {
    case ParamRole::Lengthscale:
      return "lengthscale";
    case ParamRole::Period:
      return "period";
    case ParamRole::Amplitude:
      return "amplitude";
    case ParamRole::LinOffset:
      return "offset";
    case ParamRole::RqShape:
      return "alpha";
    case ParamRole::Noise:
      return "noise";
  }
  return "?";
}

/// Hyperparameter roles of a leaf, in vector-layout order.
///   SE : lengthscale, amplitude
///   Lin: offset, amplitude
///   Per: lengthscale, period, amplitude
///   RQ : lengthscale, alpha, amplitude
inline std::span<const ParamRole> leaf_roles(BaseKind k) {
  static constexpr std::array<ParamRole, 2> se{ParamRole::Lengthscale,
                                               ParamRole::Amplitude};
  static constexpr std::array<ParamRole, 2> lin{ParamRole::LinOffset,
                                                ParamRole::Amplitude};
  static constexpr std::array<ParamRole, 3> per{
      ParamRole::Lengthscale, ParamRole::Period, ParamRole::Amplitude};
  static constexpr std::array<ParamRole, 3> rq{
      ParamRole::Lengthscale, ParamRole::RqShape, ParamRole::Amplitude};
  switch (k) {
    case BaseKind::SE:
      return se;
    case BaseKind::Lin:
      return lin;
    case BaseKind::Per:
      return per;
    case BaseKind::RQ:
      return rq;
  }
  return se;
}

/// Unconstrained -> constrained mapping. Everything positive lives on a log
/// scale; the Lin offset is already unconstrained.
inline double to_constrained(ParamRole r, double u) {
  return r == ParamRole::LinOffset ? u : std::exp(u);
}

inline double to_unconstrained(ParamRole r, double c) {
  return r == ParamRole::LinOffset ? c : std::log(c);
}

// ---------------------------------------------------------------------------
// Kernel expressions
// ---------------------------------------------------------------------------

/// Binary expression tree over base kernels, closed under + and x.
/// Values are immutable; copies share structure, and tree surgery
/// (replace/delete a leaf) copies only the path from the root. Commuted
/// variants are distinct trees: Sum(a,b) != Sum(b,a), and no algebraic
/// simplification is ever applied.
class KernelExpr {
 public:
  enum class Tag { Leaf, Sum, Product };

  KernelExpr() : KernelExpr(leaf(BaseKind::SE)) {}

  static KernelExpr leaf(BaseKind kind) {
    return KernelExpr(std::make_shared<const Node>(Node{Tag::Leaf, kind, nullptr, nullptr, 1}));
  }
  static KernelExpr sum(KernelExpr l, KernelExpr r) {
    return KernelExpr(make_node(Tag::Sum, std::move(l.node_), std::move(r.node_)));
  }
  static KernelExpr product(KernelExpr l, KernelExpr r) {
    return KernelExpr(make_node(Tag::Product, std::move(l.node_), std::move(r.node_)));
  }

  Tag tag() const { return node_->tag; }
  bool is_leaf() const { return node_->tag == Tag::Leaf; }
  BaseKind kind() const { return node_->kind; }
  KernelExpr left() const { return KernelExpr(node_->left); }
  KernelExpr right() const { return KernelExpr(node_->right); }
  int leaf_count() const { return node_->leaf_count; }

  friend bool operator==(const KernelExpr& a, const KernelExpr& b) {
    return equal(a.node_.get(), b.node_.get());
  }
  friend bool operator!=(const KernelExpr& a, const KernelExpr& b) { return !(a == b); }

  /// New tree with leaf `index` (depth-first, left to right) replaced by
  /// `subtree`.
  KernelExpr replace_leaf(int index, const KernelExpr& subtree) const {
    if (index < 0 || index >= leaf_count())
      throw std::invalid_argument("replace_leaf: leaf index out of range");
    return KernelExpr(replace_rec(node_, index, subtree.node_));
  }

  /// New tree with leaf `index` removed: its parent is replaced by the
  /// sibling subtree. Requires at least two leaves.
  KernelExpr delete_leaf(int index) const {
    if (leaf_count() < 2) throw std::invalid_argument("delete_leaf: tree has a single leaf");
    if (index < 0 || index >= leaf_count())
      throw std::invalid_argument("delete_leaf: leaf index out of range");
    return KernelExpr(delete_rec(node_, index));
  }

 private:
  struct Node {
    Tag tag;
    BaseKind kind;  // meaningful for leaves only
    std::shared_ptr<const Node> left, right;
    int leaf_count;
  };
  using NodePtr = std::shared_ptr<const Node>;

  explicit KernelExpr(NodePtr n) : node_(std::move(n)) {}

  static NodePtr make_node(Tag t, NodePtr l, NodePtr r) {
    const int n = l->leaf_count + r->leaf_count;
    return std::make_shared<const Node>(Node{t, BaseKind::SE, std::move(l), std::move(r), n});
  }

  static bool equal(const Node* a, const Node* b) {
    if (a == b) return true;
    if (a->tag != b->tag || a->leaf_count != b->leaf_count) return false;
    if (a->tag == Tag::Leaf) return a->kind == b->kind;
    return equal(a->left.get(), b->left.get()) && equal(a->right.get(), b->right.get());
  }

  // `target` is relative to the subtree rooted at `n`.
  static NodePtr replace_rec(const NodePtr& n, int target, const NodePtr& sub) {
    if (n->tag == Tag::Leaf) return sub;
    const int left_leaves = n->left->leaf_count;
    if (target < left_leaves)
      return make_node(n->tag, replace_rec(n->left, target, sub), n->right);
    return make_node(n->tag, n->left, replace_rec(n->right, target - left_leaves, sub));
  }

  static NodePtr delete_rec(const NodePtr& n, int target) {
    const int left_leaves = n->left->leaf_count;
    if (target < left_leaves) {
      if (n->left->tag == Tag::Leaf) return n->right;
      return make_node(n->tag, delete_rec(n->left, target), n->right);
    }
    if (n->right->tag == Tag::Leaf) return n->left;
    return make_node(n->tag, n->left, delete_rec(n->right, target - left_leaves));
  }

  NodePtr node_;
};

/// Total unconstrained-parameter count: sum of leaf arities plus the trailing
/// global log noise entry.
inline int param_count(const KernelExpr& e) {
  if (e.is_leaf()) return arity(e.kind()) + 1;
  int n = 1;
  std::vector<KernelExpr> stack{e};
  while (!stack.empty()) {
    KernelExpr cur = stack.back();
    stack.pop_back();
    if (cur.is_leaf()) {
      n += arity(cur.kind());
    } else {
      stack.push_back(cur.left());
      stack.push_back(cur.right());
    }
  }
  return n;
}

/// Position of one leaf in the flat parameter layout, plus the structural
/// context needed by tree-mutation moves.
struct LeafInfo {
  BaseKind kind = BaseKind::SE;
  int param_offset = 0;    // start of this leaf's block
  std::string path;        // 'l'/'r' steps from the root; empty for a root leaf
  bool has_parent = false;
  KernelExpr::Tag parent_tag = KernelExpr::Tag::Sum;
  bool is_right_child = false;
  bool sibling_is_leaf = false;
};

namespace detail {
inline void leaf_info_rec(const KernelExpr& e, std::string& path, int& offset,
                          std::vector<LeafInfo>& out) {
  if (e.is_leaf()) {
    LeafInfo info;
    info.kind = e.kind();
    info.param_offset = offset;
    info.path = path;
    out.push_back(std::move(info));
    offset += arity(e.kind());
    return;
  }
  const std::size_t left_first = out.size();
  path.push_back('l');
  leaf_info_rec(e.left(), path, offset, out);
  path.back() = 'r';
  const std::size_t right_first = out.size();
  leaf_info_rec(e.right(), path, offset, out);
  path.pop_back();
  // Fill parent context for the children adjacent to this node.
  if (e.left().is_leaf()) {
    LeafInfo& li = out[left_first];
    li.has_parent = true;
    li.parent_tag = e.tag();
    li.is_right_child = false;
    li.sibling_is_leaf = e.right().is_leaf();
  }
  if (e.right().is_leaf()) {
    LeafInfo& ri = out[right_first];
    ri.has_parent = true;
    ri.parent_tag = e.tag();
    ri.is_right_child = true;
    ri.sibling_is_leaf = e.left().is_leaf();
  }
}
}  // namespace detail

/// Leaves in depth-first, left-to-right order (the parameter layout order).
inline std::vector<LeafInfo> leaf_info(const KernelExpr& e) {
  std::vector<LeafInfo> out;
  out.reserve(static_cast<std::size_t>(e.leaf_count()));
  std::string path;
  int offset = 0;
  detail::leaf_info_rec(e, path, offset, out);
  return out;
}

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

/// Flat unconstrained parameter vector. Layout: leaf blocks in depth-first,
/// left-to-right order (roles per leaf_roles), then one global log noise
/// stddev entry at the end.
struct HyperParams {
  Vector values;
};

inline void check_layout(const KernelExpr& e, const HyperParams& p) {
  if (p.values.size() != param_count(e))
    throw std::invalid_argument("hyperparameter vector does not match kernel structure: have " +
                                std::to_string(p.values.size()) + " entries, expected " +
                                std::to_string(param_count(e)));
  if (!p.values.allFinite())
    throw std::invalid_argument("hyperparameter vector has non-finite entries");
}

inline double noise_stddev(const HyperParams& p) {
  return std::exp(p.values[p.values.size() - 1]);
}

// ---------------------------------------------------------------------------
// Base kernel evaluation
// ---------------------------------------------------------------------------

namespace detail {

/// k_b(x, x') for constrained params `cp` in leaf_roles order.
inline double leaf_value(BaseKind kind, const double* cp, double x, double xp) {
  const double tau = x - xp;
  switch (kind) {
    case BaseKind::SE: {
      const double l = cp[0], s = cp[1];
      return s * s * std::exp(-tau * tau / (2.0 * l * l));
    }
    case BaseKind::Lin: {
      const double c = cp[0], s = cp[1];
      return s * s * (x - c) * (xp - c);
    }
    case BaseKind::Per: {
      const double l = cp[0], p = cp[1], s = cp[2];
      const double sn = std::sin(std::numbers::pi * tau / p);
      return s * s * std::exp(-2.0 * sn * sn / (l * l));
    }
    case BaseKind::RQ: {
      const double l = cp[0], a = cp[1], s = cp[2];
      return s * s * std::pow(1.0 + tau * tau / (2.0 * a * l * l), -a);
    }
  }
  return 0.0;
}

/// k and dk/d(unconstrained param) together, sharing subexpressions. `d` must
/// hold arity(kind) entries. The chain rule through exp is already applied
/// (d/d log v = v * d/dv) for every log-scale parameter.
inline void leaf_value_and_grads(BaseKind kind, const double* cp, double x, double xp,
                                 double& k, double* d) {
  const double tau = x - xp;
  switch (kind) {
    case BaseKind::SE: {
      const double l = cp[0], s = cp[1];
      const double r2 = tau * tau / (l * l);
      k = s * s * std::exp(-0.5 * r2);
      d[0] = k * r2;       // d/d log l
      d[1] = 2.0 * k;      // d/d log s
      return;
    }
    case BaseKind::Lin: {
      const double c = cp[0], s = cp[1];
      k = s * s * (x - c) * (xp - c);
      d[0] = -s * s * ((x - c) + (xp - c));  // d/dc
      d[1] = 2.0 * k;                        // d/d log s
      return;
    }
    case BaseKind::Per: {
      const double l = cp[0], p = cp[1], s = cp[2];
      const double ang = std::numbers::pi * tau / p;
      const double sn = std::sin(ang), cs = std::cos(ang);
      const double il2 = 1.0 / (l * l);
      k = s * s * std::exp(-2.0 * sn * sn * il2);
      d[0] = k * 4.0 * sn * sn * il2;        // d/d log l
      d[1] = k * 4.0 * sn * cs * ang * il2;  // d/d log p
      d[2] = 2.0 * k;                        // d/d log s
      return;
    }
    case BaseKind::RQ: {
      const double l = cp[0], a = cp[1], s = cp[2];
      const double q = tau * tau / (2.0 * a * l * l);
      const double base = 1.0 + q;
      k = s * s * std::pow(base, -a);
      d[0] = k * 2.0 * a * q / base;                  // d/d log l
      d[1] = k * a * (q / base - std::log(base));     // d/d log alpha
      d[2] = 2.0 * k;                                 // d/d log s
      return;
    }
  }
}

/// Constrained leaf parameters (leaf_roles order) from the unconstrained block
/// starting at `u`.
inline std::array<double, 3> constrain_leaf(BaseKind kind, const double* u) {
  std::array<double, 3> cp{0.0, 0.0, 0.0};
  const auto roles = leaf_roles(kind);
  for (std::size_t i = 0; i < roles.size(); ++i) cp[i] = to_constrained(roles[i], u[i]);
  return cp;
}

}  // namespace detail

/// One base kernel evaluated at a pair of scalar inputs. `constrained_params`
/// uses leaf_roles order, e.g. SE takes (lengthscale, amplitude).
inline double eval_base(BaseKind kind, std::span<const double> constrained_params,
                        double x, double x_prime) {
  if (constrained_params.size() != static_cast<std::size_t>(arity(kind)))
    throw std::invalid_argument("eval_base: wrong number of parameters for " +
                                std::string(base_name(kind)));
  if (!std::isfinite(x) || !std::isfinite(x_prime))
    throw std::invalid_argument("eval_base: non-finite input");
  const auto roles = leaf_roles(kind);
  for (std::size_t i = 0; i < roles.size(); ++i) {
    const double v = constrained_params[i];
    if (!std::isfinite(v)) throw std::invalid_argument("eval_base: non-finite parameter");
    if (roles[i] != ParamRole::LinOffset && v <= 0.0)
      throw std::invalid_argument(std::string("eval_base: ") + role_name(roles[i]) +
                                  " must be positive");
  }
  return detail::leaf_value(kind, constrained_params.data(), x, x_prime);
}

/// Composite kernel value: Sum adds, Product multiplies, leaves defer to
/// eval_base. The global noise term is not part of the kernel value.
inline double eval_kernel(const KernelExpr& expr, const HyperParams& params,
                          double x, double x_prime) {
  check_layout(expr, params);
  if (!std::isfinite(x) || !std::isfinite(x_prime))
    throw std::invalid_argument("eval_kernel: non-finite input");
  struct Walker {
    const double* u;
    double x, xp;
    double walk(const KernelExpr& e, int& offset) const {
      if (e.is_leaf()) {
        const auto cp = detail::constrain_leaf(e.kind(), u + offset);
        offset += arity(e.kind());
        return detail::leaf_value(e.kind(), cp.data(), x, xp);
      }
      KernelExpr l = e.left(), r = e.right();
      const double lv = walk(l, offset);
      const double rv = walk(r, offset);
      return e.tag() == KernelExpr::Tag::Sum ? lv + rv : lv * rv;
    }
  };
  int offset = 0;
  return Walker{params.values.data(), x, x_prime}.walk(expr, offset);
}

namespace detail {

/// Symmetric leaf Gram: upper triangle computed, lower mirrored, so the
/// result is exactly symmetric entry for entry.
inline Matrix leaf_gram(BaseKind kind, const double* cp, const Vector& xs) {
  const Eigen::Index n = xs.size();
  Matrix K(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i <= j; ++i) {
      const double v = leaf_value(kind, cp, xs[i], xs[j]);
      K(i, j) = v;
      K(j, i) = v;
    }
  }
  return K;
}

inline Matrix gram_rec(const KernelExpr& e, const double* u, int& offset, const Vector& xs) {
  if (e.is_leaf()) {
    const auto cp = constrain_leaf(e.kind(), u + offset);
    offset += arity(e.kind());
    return leaf_gram(e.kind(), cp.data(), xs);
  }
  Matrix l = gram_rec(e.left(), u, offset, xs);
  Matrix r = gram_rec(e.right(), u, offset, xs);
  return e.tag() == KernelExpr::Tag::Sum ? Matrix(l + r) : Matrix(l.cwiseProduct(r));
}

}  // namespace detail

/// Gram matrix of the composite kernel (noise-free) over inputs `xs`.
inline Matrix gram_matrix(const KernelExpr& expr, const HyperParams& params, const Vector& xs) {
  check_layout(expr, params);
  if (xs.size() == 0) throw std::invalid_argument("gram_matrix: empty input vector");
  if (!xs.allFinite()) throw std::invalid_argument("gram_matrix: non-finite inputs");
  int offset = 0;
  return detail::gram_rec(expr, params.values.data(), offset, xs);
}

/// Cross-covariance matrix k(rows, cols); rows and cols may differ.
inline Matrix cross_gram(const KernelExpr& expr, const HyperParams& params,
                         const Vector& rows, const Vector& cols) {
  check_layout(expr, params);
  if (!rows.allFinite() || !cols.allFinite())
    throw std::invalid_argument("cross_gram: non-finite inputs");
  struct Walker {
    const double* u;
    const Vector& rows;
    const Vector& cols;
    Matrix walk(const KernelExpr& e, int& offset) const {
      if (e.is_leaf()) {
        const auto cp = detail::constrain_leaf(e.kind(), u + offset);
        offset += arity(e.kind());
        Matrix K(rows.size(), cols.size());
        for (Eigen::Index j = 0; j < cols.size(); ++j)
          for (Eigen::Index i = 0; i < rows.size(); ++i)
            K(i, j) = detail::leaf_value(e.kind(), cp.data(), rows[i], cols[j]);
        return K;
      }
      Matrix l = walk(e.left(), offset);
      Matrix r = walk(e.right(), offset);
      return e.tag() == KernelExpr::Tag::Sum ? Matrix(l + r) : Matrix(l.cwiseProduct(r));
    }
  };
  int offset = 0;
  return Walker{params.values.data(), rows, cols}.walk(expr, offset);
}

/// k(x, x) for a single point.
inline double kernel_diag(const KernelExpr& expr, const HyperParams& params, double x) {
  return eval_kernel(expr, params, x, x);
}

namespace detail {

struct GradGramResult {
  Matrix value;
  std::vector<Matrix> grads;  // one per unconstrained entry of the subtree
};

inline GradGramResult grad_gram_rec(const KernelExpr& e, const double* u, int& offset,
                                    const Vector& xs) {
  const Eigen::Index n = xs.size();
  if (e.is_leaf()) {
    const BaseKind kind = e.kind();
    const int a = arity(kind);
    const auto cp = constrain_leaf(kind, u + offset);
    offset += a;
    GradGramResult res;
    res.value.resize(n, n);
    res.grads.assign(static_cast<std::size_t>(a), Matrix(n, n));
    double k, d[3];
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i <= j; ++i) {
        leaf_value_and_grads(kind, cp.data(), xs[i], xs[j], k, d);
        res.value(i, j) = k;
        res.value(j, i) = k;
        for (int t = 0; t < a; ++t) {
          res.grads[t](i, j) = d[t];
          res.grads[t](j, i) = d[t];
        }
      }
    }
    return res;
  }
  GradGramResult l = grad_gram_rec(e.left(), u, offset, xs);
  GradGramResult r = grad_gram_rec(e.right(), u, offset, xs);
  GradGramResult res;
  if (e.tag() == KernelExpr::Tag::Sum) {
    res.value = l.value + r.value;
    res.grads = std::move(l.grads);
    for (auto& g : r.grads) res.grads.push_back(std::move(g));
  } else {
    res.value = l.value.cwiseProduct(r.value);
    res.grads.reserve(l.grads.size() + r.grads.size());
    for (auto& g : l.grads) res.grads.push_back(g.cwiseProduct(r.value));
    for (auto& g : r.grads) res.grads.push_back(g.cwiseProduct(l.value));
  }
  return res;
}

}  // namespace detail

/// dK/d(eta_j) for every unconstrained entry, in layout order. The final
/// entry corresponds to the global noise parameter, whose derivative of the
/// noise-free Gram matrix is identically zero (the noise term enters the
/// marginal likelihood elsewhere).
inline std::vector<Matrix> grad_gram(const KernelExpr& expr, const HyperParams& params,
                                     const Vector& xs) {
  check_layout(expr, params);
  if (xs.size() == 0) throw std::invalid_argument("grad_gram: empty input vector");
  if (!xs.allFinite()) throw std::invalid_argument("grad_gram: non-finite inputs");
  int offset = 0;
  auto res = detail::grad_gram_rec(expr, params.values.data(), offset, xs);
  res.grads.push_back(Matrix::Zero(xs.size(), xs.size()));
  return std::move(res.grads);
}

// ---------------------------------------------------------------------------
// Text round-tripping
// ---------------------------------------------------------------------------

namespace detail {

// Precedence/associativity of the rendered grammar: x binds tighter than +,
// both left-associative. A child is parenthesized when printing it bare would
// parse back differently.
inline bool needs_parens(const KernelExpr& child, KernelExpr::Tag parent, bool is_right) {
  if (child.is_leaf()) return false;
  if (parent == KernelExpr::Tag::Product)
    return child.tag() == KernelExpr::Tag::Sum || is_right;
  return is_right && child.tag() == KernelExpr::Tag::Sum;
}

inline void render_rec(const KernelExpr& e, std::string& out) {
  if (e.is_leaf()) {
    out += base_name(e.kind());
    return;
  }
  const char* op = e.tag() == KernelExpr::Tag::Sum ? " + " : " \xc3\x97 ";
  const KernelExpr l = e.left(), r = e.right();
  if (needs_parens(l, e.tag(), false)) {
    out += '(';
    render_rec(l, out);
    out += ')';
  } else {
    render_rec(l, out);
  }
  out += op;
  if (needs_parens(r, e.tag(), true)) {
    out += '(';
    render_rec(r, out);
    out += ')';
  } else {
    render_rec(r, out);
  }
}

}  // namespace detail

/// Infix rendering, e.g. "(Lin + Per) \xc3\x97 SE". Deterministic, and
/// parse(render(e)) == e for every tree.
inline std::string render(const KernelExpr& expr) {
  std::string out;
  detail::render_rec(expr, out);
  return out;
}

namespace detail {

class ExprParser {
 public:
  explicit ExprParser(std::string_view text) : text_(text) {}

  KernelExpr parse() {
    KernelExpr e = parse_sum();
    skip_ws();
    if (pos_ != text_.size()) throw ExprParseError("unexpected trailing input", pos_);
    return e;
  }

 private:
  KernelExpr parse_sum() {
    KernelExpr e = parse_product();
    while (true) {
      skip_ws();
      if (pos_ < text_.size() && text_[pos_] == '+') {
        ++pos_;
        e = KernelExpr::sum(e, parse_product());
      } else {
        return e;
      }
    }
  }

  KernelExpr parse_product() {
    KernelExpr e = parse_factor();
    while (true) {
      skip_ws();
      if (pos_ < text_.size() && text_[pos_] == '*') {
        ++pos_;
        e = KernelExpr::product(e, parse_factor());
      } else if (pos_ + 1 < text_.size() && static_cast<unsigned char>(text_[pos_]) == 0xc3 &&
                 static_cast<unsigned char>(text_[pos_ + 1]) == 0x97) {
        pos_ += 2;  // UTF-8 multiplication sign
        e = KernelExpr::product(e, parse_factor());
      } else {
        return e;
      }
    }
  }

  KernelExpr parse_factor() {
    skip_ws();
    if (pos_ >= text_.size()) throw ExprParseError("syntax error: unexpected end of input", pos_);
    if (text_[pos_] == '(') {
      ++pos_;
      KernelExpr e = parse_sum();
      skip_ws();
      if (pos_ >= text_.size() || text_[pos_] != ')')
        throw ExprParseError("syntax error: expected ')'", pos_);
      ++pos_;
      return e;
    }
    const std::size_t start = pos_;
    while (pos_ < text_.size() && is_ident_char(text_[pos_])) ++pos_;
    if (pos_ == start) throw ExprParseError("syntax error: expected kernel name or '('", pos_);
    std::string name(text_.substr(start, pos_ - start));
    for (char& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (name == "lin") return KernelExpr::leaf(BaseKind::Lin);
    if (name == "se") return KernelExpr::leaf(BaseKind::SE);
    if (name == "per") return KernelExpr::leaf(BaseKind::Per);
    if (name == "rq") return KernelExpr::leaf(BaseKind::RQ);
    throw ExprParseError("unknown kernel name '" + name + "'", start);
  }

  static bool is_ident_char(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
  }

  void skip_ws() {
    while (pos_ < text_.size() &&
           (text_[pos_] == ' ' || text_[pos_] == '\t' || text_[pos_] == '\n' ||
            text_[pos_] == '\r'))
      ++pos_;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Inverse of render. Leaf names are case-insensitive; '*' is accepted for
/// the multiplication sign.
inline KernelExpr parse(std::string_view text) {
  return detail::ExprParser(text).parse();
}

/// True when any leaf has the given kind.
inline bool contains_kind(const KernelExpr& e, BaseKind kind) {
  if (e.is_leaf()) return e.kind() == kind;
  return contains_kind(e.left(), kind) || contains_kind(e.right(), kind);
}

}  // namespace gpstruct
