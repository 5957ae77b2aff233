#include "openvad/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace openvad::ad {

const Mat& Var::value() const { return tape->value(*this); }

double Var::scalar() const {
  const Mat& v = value();
  if (v.size() != 1) throw ValidationError("scalar() on a non-scalar variable");
  return v(0, 0);
}

Var Tape::push(Mat value, bool needs_grad, Backward fn) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Mat value) { return push(std::move(value), false, nullptr); }

Var Tape::variable(Mat value) { return push(std::move(value), true, nullptr); }

Var Tape::param(const Mat& value, Mat* sink) {
  Var v = push(value, sink != nullptr, nullptr);
  nodes_.back().sink = sink;
  return v;
}

void Tape::accumulate(Var v, const Mat& g) { accumulate_expr(v, g); }

Mat Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ValidationError("backward: variable belongs to another tape");
  if (value(root).size() != 1) throw ValidationError("backward: root must be a scalar");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[static_cast<std::size_t>(root.id)].needs_grad) return;
  nodes_[static_cast<std::size_t>(root.id)].grad = Mat::Ones(1, 1);
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward(n.grad);
    if (n.sink != nullptr) *n.sink += n.grad;
  }
}

namespace {

Tape& tape_of(Var a) { return *a.tape; }

bool any_needs(std::initializer_list<Var> vars) {
  for (const Var& v : vars) {
    if (v.tape->needs_grad(v)) return true;
  }
  return false;
}

void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ValidationError("operands live on different tapes");
}

void check_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + ")");
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  if (a.cols() != b.rows()) throw ValidationError("matmul: inner dimension mismatch");
  Tape& t = tape_of(a);
  Mat out = a.value() * b.value();
  return t.push(std::move(out), any_needs({a, b}), [&t, a, b](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate_expr(a, g * b.value().transpose());
    if (t.needs_grad(b)) t.accumulate_expr(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  check_same_tape(a, b);
  if (a.cols() != b.cols()) throw ValidationError("matmul_nt: inner dimension mismatch");
  Tape& t = tape_of(a);
  Mat out = a.value() * b.value().transpose();
  return t.push(std::move(out), any_needs({a, b}), [&t, a, b](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate_expr(a, g * b.value());
    if (t.needs_grad(b)) t.accumulate_expr(b, g.transpose() * a.value());
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  Mat out = a.value().transpose();
  return t.push(std::move(out), any_needs({a}), [&t, a](const Mat& g) { t.accumulate_expr(a, g.transpose()); });
}

Var add(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a, b, "add");
  Tape& t = tape_of(a);
  Mat out = a.value() + b.value();
  return t.push(std::move(out), any_needs({a, b}), [&t, a, b](const Mat& g) {
    t.accumulate_expr(a, g);
    t.accumulate_expr(b, g);
  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a, b, "sub");
  Tape& t = tape_of(a);
  Mat out = a.value() - b.value();
  return t.push(std::move(out), any_needs({a, b}), [&t, a, b](const Mat& g) {
    t.accumulate_expr(a, g);
    t.accumulate_expr(b, -g);
  });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a, b, "mul");
  Tape& t = tape_of(a);
  Mat out = a.value().cwiseProduct(b.value());
  return t.push(std::move(out), any_needs({a, b}), [&t, a, b](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate_expr(a, g.cwiseProduct(b.value()));
    if (t.needs_grad(b)) t.accumulate_expr(b, g.cwiseProduct(a.value()));
  });
}

Var add_row(Var a, Var row) {
  check_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ValidationError("add_row: row shape mismatch");
  Tape& t = tape_of(a);
  Mat out = a.value().rowwise() + row.value().row(0);
  return t.push(std::move(out), any_needs({a, row}), [&t, a, row](const Mat& g) {
    t.accumulate_expr(a, g);
    if (t.needs_grad(row)) t.accumulate_expr(row, g.colwise().sum());
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  Mat out = a.value() * s;
  return t.push(std::move(out), any_needs({a}), [&t, a, s](const Mat& g) { t.accumulate_expr(a, g * s); });
}

Var add_scalar(Var a, double s) {
  Tape& t = tape_of(a);
  Mat out = a.value().array() + s;
  return t.push(std::move(out), any_needs({a}), [&t, a](const Mat& g) { t.accumulate_expr(a, g); });
}

Var mul_scalar(Var a, Var s) {
  check_same_tape(a, s);
  if (s.value().size() != 1) throw ValidationError("mul_scalar: scale must be 1x1");
  Tape& t = tape_of(a);
  Mat out = a.value() * s.value()(0, 0);
  return t.push(std::move(out), any_needs({a, s}), [&t, a, s](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate_expr(a, g * s.value()(0, 0));
    if (t.needs_grad(s)) {
      Mat gs(1, 1);
      gs(0, 0) = g.cwiseProduct(a.value()).sum();
      t.accumulate(s, gs);
    }
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  Mat y = a.value().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  Mat y_copy = y;
  return t.push(std::move(y), any_needs({a}), [&t, a, y = std::move(y_copy)](const Mat& g) {
    t.accumulate_expr(a, g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  Mat out = a.value().unaryExpr([inv_sqrt2](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
  return t.push(std::move(out), any_needs({a}), [&t, a, inv_sqrt2](const Mat& g) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Mat d = a.value().unaryExpr([&](double x) {
      return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
    });
    t.accumulate_expr(a, g.cwiseProduct(d));
  });
}

Var log_clamped(Var a, double lo, double hi) {
  Tape& t = tape_of(a);
  Mat out = a.value().unaryExpr([lo, hi](double x) { return std::log(std::clamp(x, lo, hi)); });
  return t.push(std::move(out), any_needs({a}), [&t, a, lo, hi](const Mat& g) {
    Mat d = a.value().unaryExpr([lo, hi](double x) { return (x > lo && x < hi) ? 1.0 / x : 0.0; });
    t.accumulate_expr(a, g.cwiseProduct(d));
  });
}

Var layer_norm(Var a, Var gamma, Var beta, double eps) {
  check_same_tape(a, gamma);
  check_same_tape(a, beta);
  const int n = a.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw ValidationError("layer_norm: gamma/beta shape mismatch");
  }
  Tape& t = tape_of(a);
  const Mat& x = a.value();
  Mat xhat(x.rows(), n);
  Vec inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return t.push(std::move(out), any_needs({a, gamma, beta}),
                [&t, a, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Mat& g) {
                  if (t.needs_grad(gamma)) t.accumulate_expr(gamma, g.cwiseProduct(xhat).colwise().sum());
                  if (t.needs_grad(beta)) t.accumulate_expr(beta, g.colwise().sum());
                  if (t.needs_grad(a)) {
                    Mat dxhat = g.array().rowwise() * gamma.value().row(0).array();
                    Mat dx(dxhat.rows(), dxhat.cols());
                    for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                      const double m1 = dxhat.row(r).mean();
                      const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                      dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                    }
                    t.accumulate(a, dx);
                  }
                });
}

namespace {

Mat softmax_rows_value(const Mat& x) {
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

}  // namespace

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  Mat y = softmax_rows_value(a.value());
  Mat y_copy = y;
  return t.push(std::move(y), any_needs({a}), [&t, a, y = std::move(y_copy)](const Mat& g) {
    Vec dots = g.cwiseProduct(y).rowwise().sum();
    Mat d = y.array() * (g.array().colwise() - dots.array());
    t.accumulate(a, d);
  });
}

Var logsumexp_rows(Var a) {
  Tape& t = tape_of(a);
  const Mat& x = a.value();
  Mat out(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out(r, 0) = m + std::log((x.row(r).array() - m).exp().sum());
  }
  return t.push(std::move(out), any_needs({a}), [&t, a](const Mat& g) {
    Mat p = softmax_rows_value(a.value());
    t.accumulate_expr(a, (p.array().colwise() * g.col(0).array()).matrix());
  });
}

Var row_normalize(Var a, double eps) {
  Tape& t = tape_of(a);
  const Mat& x = a.value();
  Vec norms(x.rows());
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    norms(r) = std::max(x.row(r).norm(), eps);
    y.row(r) = x.row(r) / norms(r);
  }
  Mat y_copy = y;
  return t.push(std::move(y), any_needs({a}), [&t, a, y = std::move(y_copy), norms = std::move(norms)](const Mat& g) {
    Mat d(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double gy = g.row(r).dot(y.row(r));
      d.row(r) = (g.row(r) - gy * y.row(r)) / norms(r);
    }
    t.accumulate(a, d);
  });
}

namespace {

// Rotates each (2i, 2i+1) pair of every head by position * base^(-2i/d).
// sign = +1 applies the rotation, -1 its inverse (the transpose).
Mat apply_rope(const Mat& x, int num_heads, int offset, double sign) {
  const Eigen::Index width = x.cols();
  const Eigen::Index d = width / num_heads;
  Mat out(x.rows(), width);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double pos = static_cast<double>(offset + r);
    for (Eigen::Index h = 0; h < num_heads; ++h) {
      for (Eigen::Index i = 0; i < d / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
        const double ang = pos * freq;
        const double c = std::cos(ang);
        const double s = sign * std::sin(ang);
        const Eigen::Index j0 = h * d + 2 * i;
        const double x0 = x(r, j0);
        const double x1 = x(r, j0 + 1);
        out(r, j0) = x0 * c - x1 * s;
        out(r, j0 + 1) = x0 * s + x1 * c;
      }
    }
  }
  return out;
}

}  // namespace

Var rope(Var a, int num_heads, int position_offset) {
  if (num_heads < 1 || a.cols() % num_heads != 0 || (a.cols() / num_heads) % 2 != 0) {
    throw ValidationError("rope: width must split into heads of even size");
  }
  Tape& t = tape_of(a);
  Mat out = apply_rope(a.value(), num_heads, position_offset, 1.0);
  return t.push(std::move(out), any_needs({a}), [&t, a, num_heads, position_offset](const Mat& g) {
    t.accumulate(a, apply_rope(g, num_heads, position_offset, -1.0));
  });
}

Var rows(Var a, int start, int count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ValidationError("rows: range out of bounds");
  Tape& t = tape_of(a);
  Mat out = a.value().middleRows(start, count);
  return t.push(std::move(out), any_needs({a}), [&t, a, start, count](const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    d.middleRows(start, count) = g;
    t.accumulate(a, d);
  });
}

Var cols(Var a, int start, int count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ValidationError("cols: range out of bounds");
  Tape& t = tape_of(a);
  if (start == 0 && count == a.cols()) return a;
  Mat out = a.value().middleCols(start, count);
  return t.push(std::move(out), any_needs({a}), [&t, a, start, count](const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    d.middleCols(start, count) = g;
    t.accumulate(a, d);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ValidationError("concat_rows: no inputs");
  if (parts.size() == 1) return parts[0];
  Tape& t = tape_of(parts[0]);
  const int c = parts[0].cols();
  int total = 0;
  bool needs = false;
  for (const Var& p : parts) {
    if (p.cols() != c) throw ValidationError("concat_rows: column mismatch");
    check_same_tape(parts[0], p);
    total += p.rows();
    needs = needs || t.needs_grad(p);
  }
  Mat out(total, c);
  int at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(out), needs, [&t, ps = std::move(ps)](const Mat& g) {
    int off = 0;
    for (const Var& p : ps) {
      if (t.needs_grad(p)) t.accumulate(p, g.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ValidationError("concat_cols: no inputs");
  if (parts.size() == 1) return parts[0];
  Tape& t = tape_of(parts[0]);
  const int r = parts[0].rows();
  int total = 0;
  bool needs = false;
  for (const Var& p : parts) {
    if (p.rows() != r) throw ValidationError("concat_cols: row mismatch");
    check_same_tape(parts[0], p);
    total += p.cols();
    needs = needs || t.needs_grad(p);
  }
  Mat out(r, total);
  int at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(out), needs, [&t, ps = std::move(ps)](const Mat& g) {
    int off = 0;
    for (const Var& p : ps) {
      if (t.needs_grad(p)) t.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

Var gather_rows(Var a, std::vector<int> index) {
  Tape& t = tape_of(a);
  const Mat& x = a.value();
  Mat out(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) throw ValidationError("gather_rows: index out of bounds");
    out.row(static_cast<Eigen::Index>(i)) = x.row(index[i]);
  }
  return t.push(std::move(out), any_needs({a}), [&t, a, index = std::move(index)](const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < index.size(); ++i) d.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(a, d);
  });
}

Var diag(Var a) {
  const int n = std::min(a.rows(), a.cols());
  Tape& t = tape_of(a);
  Mat out(n, 1);
  for (int i = 0; i < n; ++i) out(i, 0) = a.value()(i, i);
  return t.push(std::move(out), any_needs({a}), [&t, a, n](const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    for (int i = 0; i < n; ++i) d(i, i) = g(i, 0);
    t.accumulate(a, d);
  });
}

Var element(Var a, int r, int c) {
  if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) throw ValidationError("element: index out of bounds");
  Tape& t = tape_of(a);
  Mat out(1, 1);
  out(0, 0) = a.value()(r, c);
  return t.push(std::move(out), any_needs({a}), [&t, a, r, c](const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    d(r, c) = g(0, 0);
    t.accumulate(a, d);
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), any_needs({a}), [&t, a](const Mat& g) {
    t.accumulate(a, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(Var a) {
  if (a.value().size() == 0) throw ValidationError("mean of an empty matrix");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

std::vector<int> topk_indices(const Eigen::Ref<const Eigen::VectorXd>& values, int k) {
  const int n = static_cast<int>(values.size());
  k = std::clamp(k, 0, n);
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int i, int j) {
    if (values(i) != values(j)) return values(i) > values(j);
    return i < j;
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

Var topk_mean_cols(Var a, int k) {
  if (k < 1 || k > a.rows()) throw ValidationError("topk_mean_cols: k out of range");
  Tape& t = tape_of(a);
  const Mat& x = a.value();
  std::vector<std::vector<int>> picks(static_cast<std::size_t>(x.cols()));
  Mat out(1, x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    Eigen::VectorXd col = x.col(c);
    picks[static_cast<std::size_t>(c)] = topk_indices(col, k);
    double s = 0.0;
    for (int i : picks[static_cast<std::size_t>(c)]) s += x(i, c);
    out(0, c) = s / k;
  }
  return t.push(std::move(out), any_needs({a}), [&t, a, k, picks = std::move(picks)](const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    for (std::size_t c = 0; c < picks.size(); ++c) {
      for (int i : picks[c]) d(i, static_cast<Eigen::Index>(c)) += g(0, static_cast<Eigen::Index>(c)) / k;
    }
    t.accumulate(a, d);
  });
}

}  // namespace openvad::ad
