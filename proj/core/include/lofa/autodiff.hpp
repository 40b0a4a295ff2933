#pragma once

// Reverse-mode automatic differentiation over row-major float matrices.
//
// A Tape records every operation of one forward pass. Parameters live outside
// the tape (Param) and receive accumulated gradients when backward() reaches
// their leaves. Tapes are single-use: build, backward, discard.

#include <lofa/tensor.hpp>

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace lofa::ad {

struct Param {
  std::string name;
  Mat value;
  Mat grad;

  Param() = default;
  Param(std::string n, Mat v) : name(std::move(n)), value(std::move(v)) { zero_grad(); }

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  // Leaf bound to a parameter; the same Param maps to one node per tape.
  Var param(Param& p);
  // Leaf without gradient tracking.
  Var constant(Mat value);
  // Leaf that tracks gradient but has no backing Param (inspect with grad()).
  Var input(Mat value);

  Var record(Mat value, bool requires_grad, Backward backward);

  const Mat& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  // Gradient buffer of a node, zero-allocated on first access.
  Mat& grad(int id);

  // Seeds d(loss)/d(loss) = 1 for a 1x1 loss and propagates to every leaf.
  void backward(Var loss);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
    Param* param = nullptr;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<Param*, int> param_nodes_;
};

inline const Mat& Var::value() const { return tape_->value(id_); }

// Number of Tape::backward calls made by this process.
size_t backward_calls();

// Linear algebra.
Var matmul(Var a, Var b);     // a * b
Var matmul_nt(Var a, Var b);  // a * b^T, the linear-layer convention with W stored out x in
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
Var add_row(Var a, Var row);  // broadcast a 1 x c row over every row of a

// Structure.
Var gather_rows(Var table, std::span<const int> index);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count);
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
// Mean over consecutive row groups of size group; lens (optional) limits each group to its first lens[g] rows.
Var group_mean(Var a, Eigen::Index group, std::span<const int> lens = {});

// Nonlinearities.
Var silu(Var a);
Var sigmoid(Var a);
Var layer_norm(Var x, Var gain, Var bias, float eps = 1e-5f);

// Multi-head scaled dot-product attention over independent groups.
// q holds G*tq rows, k and v hold G*tk rows, all with width d = heads * head_dim.
// key_lens (optional, size G) masks keys beyond key_lens[g] in group g.
Var attention(Var q, Var k, Var v, int heads, Eigen::Index tq, Eigen::Index tk,
              std::span<const int> key_lens = {});

// Reductions and losses (all return 1 x 1).
Var sum(Var a);
Var mean(Var a);
Var mse(Var pred, Var target);
Var l1(Var pred, Var target);
// Mean binary cross-entropy of probabilities p against binary targets.
// one_sided drops the (1 - target) term, giving the literal -R log R_hat form.
Var bce(Var p, const Mat& target, float clamp = 1e-7f, bool one_sided = false);

}  // namespace lofa::ad
