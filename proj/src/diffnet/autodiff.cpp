#include "geodiff/autodiff.hpp"

#include <cmath>
#include <limits>
#include <unordered_set>

#include "geodiff/error.hpp"

namespace geodiff::ad {

namespace {

using NodePtr = std::shared_ptr<Node>;

void accumulate(Node& n, const Mat& g) {
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

template <typename Fn>
Var make(Mat value, std::initializer_list<Var> inputs, Fn&& backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const Var& in : inputs) {
    if (in.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Var& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::forward<Fn>(backward_fn);
  }
  return Var(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

double Var::item() const {
  if (node_->value.size() != 1) throw ValidationError("item() on a non-scalar");
  return node_->value(0, 0);
}

Var constant(Mat value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var parameter(Mat value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var detach(const Var& v) { return constant(v.value()); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make(a.value() + b.value(), {a, b}, [](Node& n) {
    accumulate(*n.inputs[0], n.grad);
    accumulate(*n.inputs[1], n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make(a.value() - b.value(), {a, b}, [](Node& n) {
    accumulate(*n.inputs[0], n.grad);
    accumulate(*n.inputs[1], -n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    accumulate(*n.inputs[0], n.grad.cwiseProduct(n.inputs[1]->value));
    accumulate(*n.inputs[1], n.grad.cwiseProduct(n.inputs[0]->value));
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a}, [s](Node& n) { accumulate(*n.inputs[0], n.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  return make((a.value().array() + s).matrix(), {a}, [](Node& n) { accumulate(*n.inputs[0], n.grad); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ValidationError("add_row: shape mismatch");
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return make(std::move(out), {a, row}, [](Node& n) {
    accumulate(*n.inputs[0], n.grad);
    accumulate(*n.inputs[1], n.grad.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ValidationError("mul_row: shape mismatch");
  Mat out = a.value();
  out.array().rowwise() *= row.value().row(0).array();
  return make(std::move(out), {a, row}, [](Node& n) {
    Mat ga = n.grad;
    ga.array().rowwise() *= n.inputs[1]->value.row(0).array();
    accumulate(*n.inputs[0], ga);
    accumulate(*n.inputs[1], n.grad.cwiseProduct(n.inputs[0]->value).colwise().sum());
  });
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ValidationError("mul_col: shape mismatch");
  Mat out = a.value();
  out.array().colwise() *= col.value().col(0).array();
  return make(std::move(out), {a, col}, [](Node& n) {
    Mat ga = n.grad;
    ga.array().colwise() *= n.inputs[1]->value.col(0).array();
    accumulate(*n.inputs[0], ga);
    accumulate(*n.inputs[1], n.grad.cwiseProduct(n.inputs[0]->value).rowwise().sum());
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ValidationError("matmul: inner dimensions differ");
  return make(a.value() * b.value(), {a, b}, [](Node& n) {
    if (n.inputs[0]->requires_grad) accumulate(*n.inputs[0], n.grad * n.inputs[1]->value.transpose());
    if (n.inputs[1]->requires_grad) accumulate(*n.inputs[1], n.inputs[0]->value.transpose() * n.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ValidationError("matmul_nt: inner dimensions differ");
  return make(a.value() * b.value().transpose(), {a, b}, [](Node& n) {
    if (n.inputs[0]->requires_grad) accumulate(*n.inputs[0], n.grad * n.inputs[1]->value);
    if (n.inputs[1]->requires_grad) accumulate(*n.inputs[1], n.grad.transpose() * n.inputs[0]->value);
  });
}

Var softmax_rows(const Var& a) {
  Mat out(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double m = a.value().row(r).maxCoeff();
    out.row(r) = (a.value().row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return make(std::move(out), {a}, [](Node& n) {
    // dL/dx = y .* (g - <g, y>) per row
    const Mat& y = n.value;
    Mat g = n.grad.cwiseProduct(y);
    const Eigen::VectorXd dots = g.rowwise().sum();
    g -= (y.array().colwise() * dots.array()).matrix();
    accumulate(*n.inputs[0], g);
  });
}

Var silu(const Var& a) {
  const Mat sig = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return make(a.value().cwiseProduct(sig), {a}, [sig](Node& n) {
    const auto& x = n.inputs[0]->value.array();
    const Mat d = (sig.array() * (1.0 + x * (1.0 - sig.array()))).matrix();
    accumulate(*n.inputs[0], n.grad.cwiseProduct(d));
  });
}

Var normalize_rows(const Var& a, double eps) {
  const Eigen::Index c = a.cols();
  Mat out(a.rows(), c);
  Eigen::VectorXd inv_std(a.rows());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double mu = a.value().row(r).mean();
    const auto centered = (a.value().row(r).array() - mu);
    const double var = centered.square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    out.row(r) = (centered * inv_std(r)).matrix();
  }
  return make(out, {a}, [inv_std, c](Node& n) {
    // dx = inv_std * (g - mean(g) - y * mean(g .* y))
    const Mat& y = n.value;
    Mat dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double mg = n.grad.row(r).mean();
      const double mgy = n.grad.row(r).dot(y.row(r)) / double(c);
      dx.row(r) = inv_std(r) * (n.grad.row(r).array() - mg - y.row(r).array() * mgy).matrix();
    }
    accumulate(*n.inputs[0], dx);
  });
}

Var abs(const Var& a) {
  return make(a.value().cwiseAbs(), {a}, [](Node& n) {
    const Mat sign = n.inputs[0]->value.unaryExpr([](double v) { return double((v > 0) - (v < 0)); });
    accumulate(*n.inputs[0], n.grad.cwiseProduct(sign));
  });
}

Var exp(const Var& a) {
  return make(a.value().array().exp().matrix(), {a},
              [](Node& n) { accumulate(*n.inputs[0], n.grad.cwiseProduct(n.value)); });
}

Var log(const Var& a) {
  return make(a.value().array().log().matrix(), {a},
              [](Node& n) { accumulate(*n.inputs[0], n.grad.cwiseQuotient(n.inputs[0]->value)); });
}

Var clamp_min(const Var& a, double lo) {
  return make(a.value().cwiseMax(lo), {a}, [lo](Node& n) {
    const Mat pass = n.inputs[0]->value.unaryExpr([lo](double v) { return v > lo ? 1.0 : 0.0; });
    accumulate(*n.inputs[0], n.grad.cwiseProduct(pass));
  });
}

Var sum(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return make(std::move(out), {a}, [](Node& n) {
    const auto& in = n.inputs[0]->value;
    accumulate(*n.inputs[0], Mat::Constant(in.rows(), in.cols(), n.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw ValidationError("mean of an empty tensor");
  return scale(sum(a), 1.0 / double(a.value().size()));
}

Var concat_cols(const Var& a, const Var& b) {
  if (a.rows() != b.rows()) throw ValidationError("concat_cols: row counts differ");
  Mat out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Eigen::Index ca = a.cols();
  return make(std::move(out), {a, b}, [ca](Node& n) {
    accumulate(*n.inputs[0], n.grad.leftCols(ca));
    accumulate(*n.inputs[1], n.grad.rightCols(n.grad.cols() - ca));
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ValidationError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Mat out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  auto node = std::make_shared<Node>();
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    offsets.push_back(off);
    off += p.rows();
    if (p.requires_grad()) node->requires_grad = true;
  }
  node->value = std::move(out);
  if (node->requires_grad) {
    for (const Var& p : parts) node->inputs.push_back(p.node());
    node->backward = [offsets](Node& n) {
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        accumulate(*n.inputs[i], n.grad.middleRows(offsets[i], n.inputs[i]->value.rows()));
      }
    };
  }
  return Var(std::move(node));
}

Var gather_rows(const Var& a, std::span<const int> index) {
  Mat out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw ValidationError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  std::vector<int> idx(index.begin(), index.end());
  return make(std::move(out), {a}, [idx = std::move(idx)](Node& n) {
    Mat g = Mat::Zero(n.inputs[0]->value.rows(), n.inputs[0]->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    accumulate(*n.inputs[0], g);
  });
}

Var im2col3x3(const Var& a, int h, int w) {
  if (a.rows() != Eigen::Index(h) * w) throw ValidationError("im2col3x3: row count is not h*w");
  const Eigen::Index c = a.cols();
  Mat out = Mat::Zero(a.rows(), 9 * c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Eigen::Index r = Eigen::Index(y) * w + x;
      for (int k = 0; k < 9; ++k) {
        const int yy = y + k / 3 - 1;
        const int xx = x + k % 3 - 1;
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        out.block(r, k * c, 1, c) = a.value().row(Eigen::Index(yy) * w + xx);
      }
    }
  }
  return make(std::move(out), {a}, [h, w, c](Node& n) {
    Mat g = Mat::Zero(Eigen::Index(h) * w, c);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Eigen::Index r = Eigen::Index(y) * w + x;
        for (int k = 0; k < 9; ++k) {
          const int yy = y + k / 3 - 1;
          const int xx = x + k % 3 - 1;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          g.row(Eigen::Index(yy) * w + xx) += n.grad.block(r, k * c, 1, c);
        }
      }
    }
    accumulate(*n.inputs[0], g);
  });
}

Var avgpool2(const Var& a, int h, int w) {
  if (a.rows() != Eigen::Index(h) * w || h % 2 || w % 2) throw ValidationError("avgpool2: bad grid");
  const int oh = h / 2;
  const int ow = w / 2;
  Mat out = Mat::Zero(Eigen::Index(oh) * ow, a.cols());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out.row(Eigen::Index(y / 2) * ow + x / 2) += 0.25 * a.value().row(Eigen::Index(y) * w + x);
  }
  return make(std::move(out), {a}, [h, w, ow](Node& n) {
    Mat g(Eigen::Index(h) * w, n.grad.cols());
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) g.row(Eigen::Index(y) * w + x) = 0.25 * n.grad.row(Eigen::Index(y / 2) * ow + x / 2);
    }
    accumulate(*n.inputs[0], g);
  });
}

Var upsample2(const Var& a, int h, int w) {
  if (a.rows() != Eigen::Index(h) * w) throw ValidationError("upsample2: bad grid");
  const int ow = 2 * w;
  Mat out(Eigen::Index(4) * h * w, a.cols());
  for (int y = 0; y < 2 * h; ++y) {
    for (int x = 0; x < ow; ++x) out.row(Eigen::Index(y) * ow + x) = a.value().row(Eigen::Index(y / 2) * w + x / 2);
  }
  return make(std::move(out), {a}, [h, w, ow](Node& n) {
    Mat g = Mat::Zero(Eigen::Index(h) * w, n.grad.cols());
    for (int y = 0; y < 2 * h; ++y) {
      for (int x = 0; x < ow; ++x) g.row(Eigen::Index(y / 2) * w + x / 2) += n.grad.row(Eigen::Index(y) * ow + x);
    }
    accumulate(*n.inputs[0], g);
  });
}

RowMax row_max(const Var& a, std::span<const unsigned char> allowed) {
  if (allowed.size() != static_cast<std::size_t>(a.cols())) throw ValidationError("row_max: mask length differs");
  Mat out = Mat::Zero(a.rows(), 1);
  std::vector<int> idx(static_cast<std::size_t>(a.rows()), -1);
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      if (!allowed[static_cast<std::size_t>(c)]) continue;
      if (a.value()(r, c) > best) {
        best = a.value()(r, c);
        idx[static_cast<std::size_t>(r)] = static_cast<int>(c);
      }
    }
    if (idx[static_cast<std::size_t>(r)] >= 0) out(r, 0) = best;
  }
  Var v = make(std::move(out), {a}, [idx](Node& n) {
    Mat g = Mat::Zero(n.inputs[0]->value.rows(), n.inputs[0]->value.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] >= 0) g(static_cast<Eigen::Index>(r), idx[r]) = n.grad(static_cast<Eigen::Index>(r), 0);
    }
    accumulate(*n.inputs[0], g);
  });
  return {v, std::move(idx)};
}

void backward(const Var& loss) {
  if (!loss.defined() || loss.value().size() != 1) throw ValidationError("backward needs a scalar loss");
  if (!loss.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (!n->inputs.empty()) n->grad.resize(0, 0);
  }
  Mat seed(1, 1);
  seed(0, 0) = 1.0;
  accumulate(*loss.node(), seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

Gradients gradient(const Var& loss, std::span<const Var> params) {
  if (!loss.defined() || loss.value().size() != 1) throw ValidationError("gradient needs a scalar loss");
  for (const Var& p : params) p.node()->grad.resize(0, 0);
  backward(loss);
  Gradients out;
  for (const Var& p : params) {
    const bool reached = p.grad().size() != 0;
    out.on_path.push_back(reached);
    out.grads.push_back(reached ? p.grad() : Mat::Zero(p.rows(), p.cols()));
  }
  return out;
}

}  // namespace geodiff::ad
