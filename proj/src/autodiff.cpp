#include "agfn/autodiff.hpp"

#include <cmath>
#include <string>

#include "agfn/error.hpp"

namespace agfn::ad {

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::constant(Matrix value) {
    if (!value.allFinite()) throw NumericalError("non-finite value in 'constant'");
    nodes_.push_back(Node{std::move(value), {}, false, false, "constant", {}});
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::variable(Matrix value) {
    if (!value.allFinite()) throw NumericalError("non-finite value in 'variable'");
    nodes_.push_back(Node{std::move(value), {}, recording_, false, "variable", {}});
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Matrix Tape::grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

Var Tape::push(Matrix value, const char* op, std::initializer_list<Var> inputs, Backward fn) {
    if (!value.allFinite()) throw NumericalError(std::string("non-finite value produced by '") + op + "'");
    bool needs = false;
    if (recording_) {
        for (Var in : inputs) needs |= nodes_[in.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, false, op, needs ? std::move(fn) : Backward{}});
    return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.has_grad) {
        n.grad += g;
    } else {
        n.grad = g;
        n.has_grad = true;
    }
}

void Tape::backward(Var loss) {
    if (!recording_) throw PreconditionError("backward() on a tape that does not record");
    if (nodes_[loss.id].value.size() != 1) throw PreconditionError("backward() needs a scalar (1x1) target");
    for (auto& n : nodes_) {
        n.has_grad = false;
        n.grad.resize(0, 0);
    }
    accumulate(loss, Matrix::Constant(1, 1, 1.0));
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.has_grad || !n.backward) continue;
        n.backward(*this, n.grad);
    }
}

namespace {

void same_shape(Var a, Var b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw StructuralError(std::string("shape mismatch in '") + op + "'");
    }
}

}  // namespace

Var matmul(Var a, Var b) {
    if (a.cols() != b.rows()) throw StructuralError("shape mismatch in 'matmul'");
    Tape& t = *a.tape;
    return t.push(a.value() * b.value(), "matmul", {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
        if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
    });
}

Var add(Var a, Var b) {
    same_shape(a, b, "add");
    return a.tape->push(a.value() + b.value(), "add", {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    return a.tape->push(a.value() - b.value(), "sub", {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, -g);
    });
}

Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    return a.tape->push(a.value().cwiseProduct(b.value()), "mul", {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
        if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
    });
}

Var scale(Var a, double s) {
    return a.tape->push(a.value() * s, "scale", {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

Var add_row(Var a, Var row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw StructuralError("shape mismatch in 'add_row'");
    Matrix out = a.value().rowwise() + row.value().row(0);
    return a.tape->push(std::move(out), "add_row", {a, row}, [a, row](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
    });
}

Var leaky_relu(Var a, double slope) {
    Matrix out = a.value().unaryExpr([slope](double x) { return x > 0.0 ? x : slope * x; });
    return a.tape->push(std::move(out), "leaky_relu", {a}, [a, slope](Tape& t, const Matrix& g) {
        t.accumulate(a, g.cwiseProduct(a.value().unaryExpr([slope](double x) { return x > 0.0 ? 1.0 : slope; })));
    });
}

Var log(Var a) {
    return a.tape->push(a.value().array().log().matrix(), "log", {a}, [a](Tape& t, const Matrix& g) {
        t.accumulate(a, g.cwiseQuotient(a.value()));
    });
}

Var exp(Var a) {
    Matrix out = a.value().array().exp().matrix();
    return a.tape->push(std::move(out), "exp", {a}, [a](Tape& t, const Matrix& g) {
        t.accumulate(a, g.cwiseProduct(a.value().array().exp().matrix()));
    });
}

Var square(Var a) {
    return a.tape->push(a.value().cwiseAbs2(), "square", {a}, [a](Tape& t, const Matrix& g) {
        t.accumulate(a, 2.0 * g.cwiseProduct(a.value()));
    });
}

Var sum(Var a) {
    return a.tape->push(Matrix::Constant(1, 1, a.value().sum()), "sum", {a}, [a](Tape& t, const Matrix& g) {
        t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

Var mean(Var a) {
    const double k = static_cast<double>(a.value().size());
    if (k == 0) throw PreconditionError("mean of an empty tensor");
    return a.tape->push(Matrix::Constant(1, 1, a.value().sum() / k), "mean", {a}, [a, k](Tape& t, const Matrix& g) {
        t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0) / k));
    });
}

namespace {

Matrix log_softmax_value(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mx = x.row(r).maxCoeff();
        const double lse = mx + std::log((x.row(r).array() - mx).exp().sum());
        out.row(r) = x.row(r).array() - lse;
    }
    return out;
}

}  // namespace

Var softmax_rows(Var a) {
    Matrix p = log_softmax_value(a.value()).array().exp().matrix();
    Matrix saved = p;
    return a.tape->push(std::move(p), "softmax", {a}, [a, p = std::move(saved)](Tape& t, const Matrix& g) {
        const Eigen::VectorXd dot = g.cwiseProduct(p).rowwise().sum();
        t.accumulate(a, p.cwiseProduct(g - dot.replicate(1, g.cols())));
    });
}

Var log_softmax_rows(Var a) {
    Matrix lp = log_softmax_value(a.value());
    return a.tape->push(lp, "log_softmax", {a}, [a, lp](Tape& t, const Matrix& g) {
        const Matrix p = lp.array().exp().matrix();
        const Eigen::VectorXd gs = g.rowwise().sum();
        t.accumulate(a, g - p.cwiseProduct(gs.replicate(1, g.cols())));
    });
}

Var apply_mask(Var y, const Matrix& mask, double eps) {
    if (mask.rows() != y.rows() || mask.cols() != y.cols()) throw StructuralError("shape mismatch in 'apply_mask'");
    Matrix out = y.value().cwiseProduct(mask) + (eps * (1.0 - mask.array())).matrix();
    return y.tape->push(std::move(out), "apply_mask", {y}, [y, mask](Tape& t, const Matrix& g) {
        t.accumulate(y, g.cwiseProduct(mask));
    });
}

Var gather(Var a, std::span<const std::pair<int, int>> entries) {
    Matrix out(static_cast<Eigen::Index>(entries.size()), 1);
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const auto [r, c] = entries[k];
        if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) throw StructuralError("gather index out of range");
        out(static_cast<Eigen::Index>(k), 0) = a.value()(r, c);
    }
    std::vector<std::pair<int, int>> idx(entries.begin(), entries.end());
    return a.tape->push(std::move(out), "gather", {a}, [a, idx = std::move(idx)](Tape& t, const Matrix& g) {
        Matrix ga = Matrix::Zero(a.rows(), a.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) ga(idx[k].first, idx[k].second) += g(static_cast<Eigen::Index>(k), 0);
        t.accumulate(a, ga);
    });
}

Var segment_sum_rows(Var a, int group) {
    if (group <= 0 || a.rows() % group != 0) throw StructuralError("segment_sum_rows: rows not divisible by group");
    const Eigen::Index k = a.rows() / group;
    Matrix out = Matrix::Zero(k, a.cols());
    for (Eigen::Index r = 0; r < a.rows(); ++r) out.row(r / group) += a.value().row(r);
    return a.tape->push(std::move(out), "segment_sum", {a}, [a, group](Tape& t, const Matrix& g) {
        Matrix ga(a.rows(), a.cols());
        for (Eigen::Index r = 0; r < a.rows(); ++r) ga.row(r) = g.row(r / group);
        t.accumulate(a, ga);
    });
}

Var neighbor_sum(Var a, std::span<const std::vector<int>> neighbors) {
    if (static_cast<Eigen::Index>(neighbors.size()) != a.rows()) {
        throw StructuralError("neighbor_sum: one neighbor list per row required");
    }
    Matrix out = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < neighbors.size(); ++i)
        for (int j : neighbors[i]) out.row(static_cast<Eigen::Index>(i)) += a.value().row(j);
    std::vector<std::vector<int>> nb(neighbors.begin(), neighbors.end());
    return a.tape->push(std::move(out), "neighbor_sum", {a}, [a, nb = std::move(nb)](Tape& t, const Matrix& g) {
        Matrix ga = Matrix::Zero(a.rows(), a.cols());
        for (std::size_t i = 0; i < nb.size(); ++i)
            for (int j : nb[i]) ga.row(j) += g.row(static_cast<Eigen::Index>(i));
        t.accumulate(a, ga);
    });
}

}  // namespace agfn::ad
