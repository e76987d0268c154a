#pragma once

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace agfn::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a tensor recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

/// Linear record of tensor operations for reverse-mode differentiation.
///
/// Every op evaluates eagerly and, when the tape is recording and some input
/// requires a gradient, stores a closure that pushes the upstream gradient
/// back to its inputs. Values are checked for finiteness as they are
/// produced; the first op producing a NaN/Inf raises NumericalError naming
/// the op.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value);
    Var variable(Matrix value);

    const Matrix& value(Var v) const { return nodes_[v.id].value; }
    /// Gradient of the last backward() target w.r.t. v (zeros if unreached).
    Matrix grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a 1x1 tensor.
    void backward(Var loss);

    using Backward = std::function<void(Tape&, const Matrix& upstream)>;
    /// Records an op result. `inputs` decide whether the node requires grad.
    Var push(Matrix value, const char* op, std::initializer_list<Var> inputs, Backward fn);
    /// Adds `g` into the gradient slot of `v` (no-op for constants).
    void accumulate(Var v, const Matrix& g);

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        bool has_grad = false;
        const char* op = "leaf";
        Backward backward;
    };
    std::vector<Node> nodes_;
    bool recording_;
};

// Elementwise / linear algebra primitives.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// a (r x c) plus a 1 x c row broadcast over rows.
Var add_row(Var a, Var row);
Var leaky_relu(Var a, double slope);
Var log(Var a);
Var exp(Var a);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);

/// Row-wise softmax / log-softmax.
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// y .* m + eps (1 - m) with a constant 0/1 mask matrix.
Var apply_mask(Var y, const Matrix& mask, double eps);

/// Picks entries (row, col) into a k x 1 column.
Var gather(Var a, std::span<const std::pair<int, int>> entries);
/// Sums consecutive blocks of `group` rows: (g*k x c) -> (k x c).
Var segment_sum_rows(Var a, int group);
/// Row i of the result is the sum of rows neighbors[i] of `a`.
Var neighbor_sum(Var a, std::span<const std::vector<int>> neighbors);

}  // namespace agfn::ad
