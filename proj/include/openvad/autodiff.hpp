#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation in creation order, which is already a
// topological order, so backward() is a single reverse sweep. Gradients are
// accumulated in that fixed order, which makes results bit-reproducible for a
// fixed sequence of operations.

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "openvad/core.hpp"

namespace openvad::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  int rows() const { return static_cast<int>(value().rows()); }
  int cols() const { return static_cast<int>(value().cols()); }
  double scalar() const;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  /// Leaf whose gradient is kept on the tape (read it with grad()).
  Var variable(Mat value);
  /// Leaf whose gradient is added into *sink on backward(). A null sink makes
  /// it a constant.
  Var param(const Mat& value, Mat* sink);

  /// Seeds d(root)/d(root) = 1 and propagates. root must be 1x1.
  void backward(Var root);

  const Mat& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  /// Gradient of the last backward() root with respect to v (zeros if v does
  /// not influence the root).
  Mat grad(Var v) const;
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Used by operation implementations.
  using Backward = std::function<void(const Mat& upstream)>;
  Var push(Mat value, bool needs_grad, Backward fn);
  void accumulate(Var v, const Mat& g);
  template <typename Expr>
  void accumulate_expr(Var v, const Expr& g) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Backward backward;
    Mat* sink = nullptr;
  };
  std::deque<Node> nodes_;
};

// Linear algebra
Var matmul(Var a, Var b);      // a * b
Var matmul_nt(Var a, Var b);   // a * b^T
Var transpose(Var a);

// Elementwise
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_row(Var a, Var row);           // broadcast a 1 x n row over every row of a
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var mul_scalar(Var a, Var s);          // s is 1 x 1
Var sigmoid(Var a);
Var gelu(Var a);
Var log_clamped(Var a, double lo = 1e-8, double hi = 1.0 - 1e-8);

// Row-wise
Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5);
Var softmax_rows(Var a);
Var logsumexp_rows(Var a);             // n x 1
Var row_normalize(Var a, double eps = 1e-12);
/// Rotary position encoding applied independently inside each head; row r is
/// position offset + r.
Var rope(Var a, int num_heads, int position_offset = 0);

// Structural
Var rows(Var a, int start, int count);
Var cols(Var a, int start, int count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var a, std::vector<int> index);
Var diag(Var a);                       // n x 1 with a(i, i)
Var element(Var a, int r, int c);      // 1 x 1

// Reductions
Var sum(Var a);                        // 1 x 1
Var mean(Var a);                       // 1 x 1
/// For each column, the mean of its k largest entries (ties broken by lower
/// row index). Output is 1 x cols.
Var topk_mean_cols(Var a, int k);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

/// Indices of the k largest entries of a column (descending value, then
/// ascending index).
std::vector<int> topk_indices(const Eigen::Ref<const Eigen::VectorXd>& values, int k);

}  // namespace openvad::ad
