#pragma once

// Minimal tape-free reverse-mode autodiff over dense Eigen matrices.
//
// A Var is a handle to a graph node. Nodes record their inputs and a backward
// closure only when gradient recording is enabled and at least one input
// requires a gradient, so inference under NoGradGuard allocates no graph.
// Parameter leaves point back at a Param; backward() adds the leaf gradient
// into Param::grad. Parameters bound with track=false become constants, which
// is how stop-gradient on whole parameter sets is expressed.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace marval::ad {

using Real = double;
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

struct Param {
    Mat value;
    Mat grad;  // same shape as value once touched; empty means zero

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    bool grad_is_zero() const { return grad.size() == 0 || grad.isZero(0.0); }
};

struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
    Param* param = nullptr;

    template <class Expr>
    void accumulate(const Expr& g) {
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad += g;
        }
    }
};

class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Mat& value() const { return node_->value; }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    bool requires_grad() const { return node_->requires_grad; }
    Real item() const;
    bool defined() const { return static_cast<bool>(node_); }

    Node& node() const { return *node_; }
    const std::shared_ptr<Node>& ptr() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

/// Whether new nodes record backward closures on this thread.
bool grad_enabled();

class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

Var constant(Mat value);
Var constant_like(Real fill, Index rows, Index cols);
/// Leaf bound to a parameter. With track=false the leaf is a constant.
Var parameter(Param& p, bool track);
/// Leaf that requires a gradient but is not tied to a Param (input gradients).
Var variable(Mat value);
Var detach(const Var& a);

/// Runs reverse accumulation from a 1x1 output.
void backward(const Var& out);
void backward(const Var& out, const Mat& seed);

// Elementwise / shape-preserving
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, Real c);
Var add_scalar(const Var& a, Real c);
Var silu(const Var& a);
Var tanh(const Var& a);
Var clamp(const Var& a, Real lo, Real hi);  // gradient passes only inside [lo, hi]
Var sqrt(const Var& a);
Var square(const Var& a);
Var reciprocal(const Var& a);

// Broadcasting
Var add_row(const Var& a, const Var& row);  // row is 1 x cols
Var mul_row(const Var& a, const Var& row);
Var mul_col(const Var& a, const Var& col);  // col is rows x 1
Var scale_rows(const Var& a, const Vec& s);  // constant per-row factor

// Linear algebra
Var matmul(const Var& a, const Var& b);

// Reductions
Var sum(const Var& a);
Var mean(const Var& a);
Var row_sum(const Var& a);  // rows x 1

// Structure
Var slice_cols(const Var& a, Index start, Index count);
Var concat_cols(std::span<const Var> parts);
/// Row-major reshape: element order is read and written row by row.
Var reshape(const Var& a, Index rows, Index cols);
/// out[i] = a[idx[i]]; gradient scatter-adds, so repeated indices are fine.
Var gather_rows(const Var& a, std::span<const int> idx);
/// Copy of base with rows idx replaced by the rows of values.
Var put_rows(const Var& base, std::span<const int> idx, const Var& values);
/// Rows with mask[i] set are replaced by the broadcast row.
Var select_rows(const Var& a, const Var& row, std::span<const unsigned char> mask);

// Network pieces
Var layer_norm(const Var& x, Real eps = 1e-6);
Var log_softmax_rows(const Var& a);
/// Multi-head softmax attention within contiguous row blocks of size `block`.
Var block_attention(const Var& q, const Var& k, const Var& v, Index block, Index heads);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(Real c, const Var& a) { return scale(a, c); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace marval::ad
