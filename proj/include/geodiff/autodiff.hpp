#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace geodiff::ad {

/// Row-major dense matrix. Token grids are stored as (h*w) x channels, which
/// is exactly a channel-last H x W x C raster.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
  Mat value;
  Mat grad;  // empty until backward reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
};

/// Handle to a node of the reverse-mode tape. Nodes that do not depend on any
/// grad-requiring leaf keep no inputs, so inference builds no graph.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Mat& value() const { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Mat value);
/// Leaf whose gradient is tracked.
Var parameter(Mat value);
/// Same value, detached from the tape.
Var detach(const Var& v);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// a (n x c) + row (1 x c), broadcast over rows.
Var add_row(const Var& a, const Var& row);
/// a (n x c) .* row (1 x c), broadcast over rows.
Var mul_row(const Var& a, const Var& row);
/// a (n x c) .* col (n x 1), broadcast over columns.
Var mul_col(const Var& a, const Var& col);
Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var softmax_rows(const Var& a);
Var silu(const Var& a);
/// Per-row standardization (no affine part).
Var normalize_rows(const Var& a, double eps = 1e-5);
Var abs(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var clamp_min(const Var& a, double lo);
Var sum(const Var& a);
Var mean(const Var& a);
Var concat_cols(const Var& a, const Var& b);
Var concat_rows(const std::vector<Var>& parts);
/// out[i] = a[index[i]]
Var gather_rows(const Var& a, std::span<const int> index);
/// 3x3 patches with zero padding: (h*w) x (9*c), patch order (dy, dx, c).
Var im2col3x3(const Var& a, int h, int w);
Var avgpool2(const Var& a, int h, int w);
Var upsample2(const Var& a, int h, int w);

struct RowMax {
  Var value;               // n x 1
  std::vector<int> index;  // argmax column per row, -1 if no column allowed
};

/// Row-wise max over the columns whose `allowed` flag is set. Rows with no
/// allowed column produce 0 and index -1.
RowMax row_max(const Var& a, std::span<const unsigned char> allowed);

/// Reverse pass from a scalar; gradients accumulate into every reachable node.
void backward(const Var& loss);

struct Gradients {
  std::vector<Mat> grads;
  /// false where the parameter does not influence the loss (gradient is zero).
  std::vector<bool> on_path;
};

/// Exact reverse-mode gradients of a 1x1 loss with respect to `params`
/// (which must be parameter() leaves). Clears previous gradients first.
Gradients gradient(const Var& loss, std::span<const Var> params);

}  // namespace geodiff::ad
