#include "klab/autodiff.hpp"

#include "klab/wht.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace klab {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

MapC cmap(const DenseArray& a, std::size_t r, std::size_t c) { return MapC(a.data(), r, c); }
MapM mmap(DenseArray& a, std::size_t r, std::size_t c) { return MapM(a.data(), r, c); }

void require(bool cond, const char* msg) {
    if (!cond) throw DimensionError(msg);
}

// Decomposes a shape around `axis` into (outer, n, inner) so that element
// (o, i, k) lives at offset (o * n + i) * inner + k.
struct AxisSplit {
    std::size_t outer = 1, n = 1, inner = 1;
};
AxisSplit split_axis(const std::vector<std::size_t>& shape, std::size_t axis) {
    if (axis >= shape.size()) throw DimensionError("axis out of range");
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.n = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

std::vector<std::size_t> drop_axis(const std::vector<std::size_t>& shape, std::size_t axis) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < shape.size(); ++i)
        if (i != axis) out.push_back(shape[i]);
    return out;
}

void check_same_tape(const Var& a, const Var& b) {
    if (a.tape != b.tape) throw ContractError("operands live on different tapes");
}

// Creates the output node first, then attaches an adjoint that knows the
// output id. The adjoint runs only when the output actually received a
// gradient during the sweep.
Var make_op(Tape* t, DenseArray value, std::function<void(Tape&, int)> bp) {
    Var v = t->emplace(std::move(value), true, nullptr);
    const int id = v.id;
    t->node(id).backprop = [bp = std::move(bp), id](Tape& tp) { bp(tp, id); };
    return v;
}

// Adds src (same shape) into the gradient of node `id` unless that node is a
// constant.
void accum(Tape& t, int id, const DenseArray& src) {
    if (!t.node(id).differentiable) return;
    DenseArray& g = t.grad_buf(id);
    double* gp = g.data();
    const double* sp = src.data();
    const std::size_t n = g.size();
    for (std::size_t i = 0; i < n; ++i) gp[i] += sp[i];
}

}  // namespace

const DenseArray& Var::value() const { return tape->node(id).value; }

const DenseArray& Var::grad() const {
    Tape::Node& n = tape->node(id);
    if (!n.grad_alloc) {
        n.grad = DenseArray(n.value.shape());
        n.grad_alloc = true;
    }
    return n.grad;
}

Var Tape::emplace(DenseArray value, bool differentiable, std::function<void(Tape&)> backprop) {
    nodes_.push_back(
        Node{std::move(value), DenseArray{}, false, differentiable, std::move(backprop)});
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf(DenseArray value) { return emplace(std::move(value), true, nullptr); }
Var Tape::constant(DenseArray value) { return emplace(std::move(value), false, nullptr); }

DenseArray& Tape::grad_buf(int id) {
    Node& n = nodes_[id];
    if (!n.grad_alloc) {
        n.grad = DenseArray(n.value.shape());
        n.grad_alloc = true;
    }
    return n.grad;
}

void Tape::backward(const Var& loss) {
    if (loss.tape != this) throw ContractError("backward: loss lives on another tape");
    if (swept_) throw ContractError("backward: tape already swept; run a fresh forward pass");
    if (!nodes_[loss.id].value.is_scalar()) throw ContractError("backward: loss must be scalar");
    swept_ = true;
    grad_buf(loss.id)[0] = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.grad_alloc || !n.backprop) continue;
        n.backprop(*this);
    }
}

void Tape::reset() {
    nodes_.clear();
    swept_ = false;
}

// ---- matrix products -------------------------------------------------------

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    check_same_tape(a, b);
    const DenseArray& A = a.value();
    const DenseArray& B = b.value();
    require(A.rank() == 2 && B.rank() == 2, "matmul: operands must be rank 2");
    const std::size_t ar = A.rows(), ac = A.cols(), br = B.rows(), bc = B.cols();
    const std::size_t m = trans_a ? ac : ar;
    const std::size_t k = trans_a ? ar : ac;
    const std::size_t n = trans_b ? br : bc;
    require(k == (trans_b ? bc : br), "matmul: inner extents disagree");

    DenseArray out({m, n});
    {
        auto Am = cmap(A, ar, ac);
        auto Bm = cmap(B, br, bc);
        auto Om = mmap(out, m, n);
        if (!trans_a && !trans_b) Om.noalias() = Am * Bm;
        else if (trans_a && !trans_b) Om.noalias() = Am.transpose() * Bm;
        else if (!trans_a && trans_b) Om.noalias() = Am * Bm.transpose();
        else Om.noalias() = Am.transpose() * Bm.transpose();
    }

    Tape* t = a.tape;
    const int ida = a.id, idb = b.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        const DenseArray& G = tp.node(self).grad;
        const DenseArray& Av = tp.node(ida).value;
        const DenseArray& Bv = tp.node(idb).value;
        auto Gm = cmap(G, m, n);
        auto Am = cmap(Av, ar, ac);
        auto Bm = cmap(Bv, br, bc);
        if (tp.node(ida).differentiable) {
            DenseArray ga({ar, ac});
            auto Ga = mmap(ga, ar, ac);
            if (!trans_a && !trans_b) Ga.noalias() = Gm * Bm.transpose();
            else if (!trans_a && trans_b) Ga.noalias() = Gm * Bm;
            else if (trans_a && !trans_b) Ga.noalias() = Bm * Gm.transpose();
            else Ga.noalias() = Bm.transpose() * Gm.transpose();
            accum(tp, ida, ga);
        }
        if (tp.node(idb).differentiable) {
            DenseArray gb({br, bc});
            auto Gb = mmap(gb, br, bc);
            if (!trans_a && !trans_b) Gb.noalias() = Am.transpose() * Gm;
            else if (!trans_a && trans_b) Gb.noalias() = Gm.transpose() * Am;
            else if (trans_a && !trans_b) Gb.noalias() = Am * Gm;
            else Gb.noalias() = Gm.transpose() * Am.transpose();
            accum(tp, idb, gb);
        }
    });
}

Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    check_same_tape(a, b);
    const DenseArray& A = a.value();
    const DenseArray& B = b.value();
    require(A.rank() == 3 && B.rank() == 3, "bmm: operands must be rank 3");
    require(A.extent(0) == B.extent(0), "bmm: batch extents disagree");
    const std::size_t nb = A.extent(0);
    const std::size_t ar = A.extent(1), ac = A.extent(2);
    const std::size_t br = B.extent(1), bc = B.extent(2);
    const std::size_t m = trans_a ? ac : ar;
    const std::size_t k = trans_a ? ar : ac;
    const std::size_t n = trans_b ? br : bc;
    require(k == (trans_b ? bc : br), "bmm: inner extents disagree");

    DenseArray out({nb, m, n});
    for (std::size_t i = 0; i < nb; ++i) {
        MapC Am(A.data() + i * ar * ac, ar, ac);
        MapC Bm(B.data() + i * br * bc, br, bc);
        MapM Om(out.data() + i * m * n, m, n);
        if (!trans_a && !trans_b) Om.noalias() = Am * Bm;
        else if (trans_a && !trans_b) Om.noalias() = Am.transpose() * Bm;
        else if (!trans_a && trans_b) Om.noalias() = Am * Bm.transpose();
        else Om.noalias() = Am.transpose() * Bm.transpose();
    }

    Tape* t = a.tape;
    const int ida = a.id, idb = b.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        const DenseArray& G = tp.node(self).grad;
        const DenseArray& Av = tp.node(ida).value;
        const DenseArray& Bv = tp.node(idb).value;
        const bool da = tp.node(ida).differentiable;
        const bool db = tp.node(idb).differentiable;
        DenseArray* ga = da ? &tp.grad_buf(ida) : nullptr;
        DenseArray* gb = db ? &tp.grad_buf(idb) : nullptr;
        for (std::size_t i = 0; i < nb; ++i) {
            MapC Gm(G.data() + i * m * n, m, n);
            MapC Am(Av.data() + i * ar * ac, ar, ac);
            MapC Bm(Bv.data() + i * br * bc, br, bc);
            if (da) {
                MapM Ga(ga->data() + i * ar * ac, ar, ac);
                if (!trans_a && !trans_b) Ga.noalias() += Gm * Bm.transpose();
                else if (!trans_a && trans_b) Ga.noalias() += Gm * Bm;
                else if (trans_a && !trans_b) Ga.noalias() += Bm * Gm.transpose();
                else Ga.noalias() += Bm.transpose() * Gm.transpose();
            }
            if (db) {
                MapM Gb(gb->data() + i * br * bc, br, bc);
                if (!trans_a && !trans_b) Gb.noalias() += Am.transpose() * Gm;
                else if (!trans_a && trans_b) Gb.noalias() += Gm.transpose() * Am;
                else if (trans_a && !trans_b) Gb.noalias() += Am * Gm;
                else Gb.noalias() += Gm.transpose() * Am.transpose();
            }
        }
    });
}

// ---- elementwise -----------------------------------------------------------

namespace {

enum class Pairing { Equal, AScalar, BScalar };

Pairing pairing_of(const DenseArray& a, const DenseArray& b, const char* opname) {
    if (a.same_shape(b)) return Pairing::Equal;
    if (a.is_scalar()) return Pairing::AScalar;
    if (b.is_scalar()) return Pairing::BScalar;
    throw DimensionError(std::string(opname) +
                         ": shapes not broadcast-compatible (scalar-with-array only): " +
                         a.shape_str() + " vs " + b.shape_str());
}

}  // namespace

Var add(const Var& a, const Var& b) {
    check_same_tape(a, b);
    const DenseArray& A = a.value();
    const DenseArray& B = b.value();
    const Pairing p = pairing_of(A, B, "add");
    DenseArray out(p == Pairing::AScalar ? B.shape() : A.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double av = p == Pairing::AScalar ? A[0] : A[i];
        const double bv = p == Pairing::BScalar ? B[0] : B[i];
        out[i] = av + bv;
    }
    Tape* t = a.tape;
    const int ida = a.id, idb = b.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        const DenseArray& G = tp.node(self).grad;
        if (tp.node(ida).differentiable) {
            DenseArray& ga = tp.grad_buf(ida);
            if (p == Pairing::AScalar) {
                double s = 0;
                for (std::size_t i = 0; i < G.size(); ++i) s += G[i];
                ga[0] += s;
            } else {
                for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i];
            }
        }
        if (tp.node(idb).differentiable) {
            DenseArray& gb = tp.grad_buf(idb);
            if (p == Pairing::BScalar) {
                double s = 0;
                for (std::size_t i = 0; i < G.size(); ++i) s += G[i];
                gb[0] += s;
            } else {
                for (std::size_t i = 0; i < G.size(); ++i) gb[i] += G[i];
            }
        }
    });
}

Var sub(const Var& a, const Var& b) { return add(a, neg(b)); }

Var mul(const Var& a, const Var& b) {
    check_same_tape(a, b);
    const DenseArray& A = a.value();
    const DenseArray& B = b.value();
    const Pairing p = pairing_of(A, B, "mul");
    DenseArray out(p == Pairing::AScalar ? B.shape() : A.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double av = p == Pairing::AScalar ? A[0] : A[i];
        const double bv = p == Pairing::BScalar ? B[0] : B[i];
        out[i] = av * bv;
    }
    Tape* t = a.tape;
    const int ida = a.id, idb = b.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        const DenseArray& G = tp.node(self).grad;
        const DenseArray& Av = tp.node(ida).value;
        const DenseArray& Bv = tp.node(idb).value;
        if (tp.node(ida).differentiable) {
            DenseArray& ga = tp.grad_buf(ida);
            if (p == Pairing::AScalar) {
                double s = 0;
                for (std::size_t i = 0; i < G.size(); ++i) s += G[i] * Bv[i];
                ga[0] += s;
            } else {
                for (std::size_t i = 0; i < G.size(); ++i)
                    ga[i] += G[i] * (p == Pairing::BScalar ? Bv[0] : Bv[i]);
            }
        }
        if (tp.node(idb).differentiable) {
            DenseArray& gb = tp.grad_buf(idb);
            if (p == Pairing::BScalar) {
                double s = 0;
                for (std::size_t i = 0; i < G.size(); ++i) s += G[i] * Av[i];
                gb[0] += s;
            } else {
                for (std::size_t i = 0; i < G.size(); ++i)
                    gb[i] += G[i] * (p == Pairing::AScalar ? Av[0] : Av[i]);
            }
        }
    });
}

namespace {

// Shared scaffold for value-wise unary ops: fwd computes the output value,
// dfn returns dy/dx from (x, y).
template <typename F, typename D>
Var unary_op(const Var& a, F fwd, D dfn) {
    const DenseArray& A = a.value();
    DenseArray out(A.shape());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = fwd(A[i]);
    Tape* t = a.tape;
    const int ida = a.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        if (!tp.node(ida).differentiable) return;
        const DenseArray& G = tp.node(self).grad;
        const DenseArray& Y = tp.node(self).value;
        const DenseArray& X = tp.node(ida).value;
        DenseArray& ga = tp.grad_buf(ida);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * dfn(X[i], Y[i]);
    });
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Var neg(const Var& a) {
    return unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(const Var& a, double c) {
    return unary_op(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_const(const Var& a, double c) {
    return unary_op(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var exp(const Var& a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var cos(const Var& a) {
    return unary_op(a, [](double x) { return std::cos(x); },
                    [](double x, double) { return -std::sin(x); });
}

Var sin(const Var& a) {
    return unary_op(a, [](double x) { return std::sin(x); },
                    [](double x, double) { return std::cos(x); });
}

Var tanh(const Var& a) {
    return unary_op(a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Var leaky_relu(const Var& a, double slope) {
    return unary_op(a, [slope](double x) { return x >= 0 ? x : slope * x; },
                    [slope](double x, double) { return x >= 0 ? 1.0 : slope; });
}

Var gelu(const Var& a) {
    return unary_op(a,
                    [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                    [](double x, double) {
                        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                        return cdf + x * pdf;
                    });
}

Var clamp(const Var& a, double lo, double hi) {
    return unary_op(a,
                    [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
                    [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

Var trig_features(const Var& a) {
    const DenseArray& A = a.value();
    require(A.rank() == 2, "trig_features: input must be rank 2");
    const std::size_t r = A.rows(), c = A.cols();
    DenseArray out({r, 2 * c});
    for (std::size_t i = 0; i < r; ++i) {
        const double* x = A.data() + i * c;
        double* yc = out.data() + i * 2 * c;
        double* ys = yc + c;
        for (std::size_t j = 0; j < c; ++j) {
            yc[j] = std::cos(x[j]);
            ys[j] = std::sin(x[j]);
        }
    }
    Tape* t = a.tape;
    const int ida = a.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        if (!tp.node(ida).differentiable) return;
        const DenseArray& G = tp.node(self).grad;
        const DenseArray& Y = tp.node(self).value;
        DenseArray& ga = tp.grad_buf(ida);
        for (std::size_t i = 0; i < r; ++i) {
            const double* gc = G.data() + i * 2 * c;
            const double* gs = gc + c;
            const double* yc = Y.data() + i * 2 * c;
            const double* ys = yc + c;
            double* g = ga.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) g[j] += -gc[j] * ys[j] + gs[j] * yc[j];
        }
    });
}

// ---- broadcast helpers ------------------------------------------------------

Var add_rowvec(const Var& mat, const Var& vec) {
    check_same_tape(mat, vec);
    const DenseArray& M = mat.value();
    const DenseArray& V = vec.value();
    require(M.rank() == 2 && V.rank() == 1, "add_rowvec: want (matrix, vector)");
    require(M.cols() == V.extent(0), "add_rowvec: column extent mismatch");
    const std::size_t r = M.rows(), c = M.cols();
    DenseArray out({r, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = M[i * c + j] + V[j];
    Tape* t = mat.tape;
    const int idm = mat.id, idv = vec.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        const DenseArray& G = tp.node(self).grad;
        if (tp.node(idm).differentiable) accum(tp, idm, G);
        if (tp.node(idv).differentiable) {
            DenseArray& gv = tp.grad_buf(idv);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gv[j] += G[i * c + j];
        }
    });
}

Var sub_colvec(const Var& mat, const Var& vec) {
    check_same_tape(mat, vec);
    const DenseArray& M = mat.value();
    const DenseArray& V = vec.value();
    require(M.rank() == 2 && V.rank() == 1, "sub_colvec: want (matrix, vector)");
    require(M.rows() == V.extent(0), "sub_colvec: row extent mismatch");
    const std::size_t r = M.rows(), c = M.cols();
    DenseArray out({r, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = M[i * c + j] - V[i];
    Tape* t = mat.tape;
    const int idm = mat.id, idv = vec.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        const DenseArray& G = tp.node(self).grad;
        if (tp.node(idm).differentiable) accum(tp, idm, G);
        if (tp.node(idv).differentiable) {
            DenseArray& gv = tp.grad_buf(idv);
            for (std::size_t i = 0; i < r; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < c; ++j) s += G[i * c + j];
                gv[i] -= s;
            }
        }
    });
}

Var div_rows(const Var& mat, const Var& denom) {
    check_same_tape(mat, denom);
    const DenseArray& M = mat.value();
    const DenseArray& D = denom.value();
    require(M.rank() == 2 && D.rank() == 1, "div_rows: want (matrix, vector)");
    require(M.rows() == D.extent(0), "div_rows: row extent mismatch");
    const std::size_t r = M.rows(), c = M.cols();
    for (std::size_t i = 0; i < r; ++i)
        if (D[i] == 0.0) throw DataError("div_rows: zero denominator at row " + std::to_string(i));
    DenseArray out({r, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = M[i * c + j] / D[i];
    Tape* t = mat.tape;
    const int idm = mat.id, idd = denom.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        const DenseArray& G = tp.node(self).grad;
        const DenseArray& Dv = tp.node(idd).value;
        const DenseArray& Y = tp.node(self).value;
        if (tp.node(idm).differentiable) {
            DenseArray& gm = tp.grad_buf(idm);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += G[i * c + j] / Dv[i];
        }
        if (tp.node(idd).differentiable) {
            DenseArray& gd = tp.grad_buf(idd);
            for (std::size_t i = 0; i < r; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < c; ++j) s += G[i * c + j] * Y[i * c + j];
                gd[i] -= s / Dv[i];
            }
        }
    });
}

// ---- reductions -------------------------------------------------------------

Var reduce_sum(const Var& a, std::size_t axis) {
    const DenseArray& A = a.value();
    const AxisSplit s = split_axis(A.shape(), axis);
    DenseArray out(drop_axis(A.shape(), axis));
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.n; ++i)
            for (std::size_t k = 0; k < s.inner; ++k)
                out[o * s.inner + k] += A[(o * s.n + i) * s.inner + k];
    Tape* t = a.tape;
    const int ida = a.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        if (!tp.node(ida).differentiable) return;
        const DenseArray& G = tp.node(self).grad;
        DenseArray& ga = tp.grad_buf(ida);
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.n; ++i)
                for (std::size_t k = 0; k < s.inner; ++k)
                    ga[(o * s.n + i) * s.inner + k] += G[o * s.inner + k];
    });
}

Var reduce_mean(const Var& a, std::size_t axis) {
    const double inv = 1.0 / static_cast<double>(a.value().extent(axis));
    return scale(reduce_sum(a, axis), inv);
}

Var reduce_max(const Var& a, std::size_t axis) {
    const DenseArray& A = a.value();
    const AxisSplit s = split_axis(A.shape(), axis);
    DenseArray out(drop_axis(A.shape(), axis));
    auto argmax = std::make_shared<std::vector<std::size_t>>(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.inner; ++k) {
            std::size_t best = 0;
            double bv = A[(o * s.n) * s.inner + k];
            for (std::size_t i = 1; i < s.n; ++i) {
                const double v = A[(o * s.n + i) * s.inner + k];
                if (v > bv) {
                    bv = v;
                    best = i;
                }
            }
            out[o * s.inner + k] = bv;
            (*argmax)[o * s.inner + k] = best;
        }
    Tape* t = a.tape;
    const int ida = a.id;
    return make_op(t, std::move(out), [=, am = std::move(argmax)](Tape& tp, int self) {
        if (!tp.node(ida).differentiable) return;
        const DenseArray& G = tp.node(self).grad;
        DenseArray& ga = tp.grad_buf(ida);
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t k = 0; k < s.inner; ++k) {
                const std::size_t i = (*am)[o * s.inner + k];
                ga[(o * s.n + i) * s.inner + k] += G[o * s.inner + k];
            }
    });
}

Var sum_all(const Var& a) {
    const DenseArray& A = a.value();
    double s = 0;
    for (std::size_t i = 0; i < A.size(); ++i) s += A[i];
    Tape* t = a.tape;
    const int ida = a.id;
    return make_op(t, DenseArray::scalar(s), [=](Tape& tp, int self) {
        if (!tp.node(ida).differentiable) return;
        const double g = tp.node(self).grad[0];
        DenseArray& ga = tp.grad_buf(ida);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Var softmax(const Var& a, std::size_t axis) {
    const DenseArray& A = a.value();
    const AxisSplit s = split_axis(A.shape(), axis);
    DenseArray out(A.shape());
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.inner; ++k) {
            double mx = -1e300;
            for (std::size_t i = 0; i < s.n; ++i)
                mx = std::max(mx, A[(o * s.n + i) * s.inner + k]);
            double z = 0;
            for (std::size_t i = 0; i < s.n; ++i) {
                const double e = std::exp(A[(o * s.n + i) * s.inner + k] - mx);
                out[(o * s.n + i) * s.inner + k] = e;
                z += e;
            }
            for (std::size_t i = 0; i < s.n; ++i) out[(o * s.n + i) * s.inner + k] /= z;
        }
    Tape* t = a.tape;
    const int ida = a.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        if (!tp.node(ida).differentiable) return;
        const DenseArray& G = tp.node(self).grad;
        const DenseArray& Y = tp.node(self).value;
        DenseArray& ga = tp.grad_buf(ida);
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t k = 0; k < s.inner; ++k) {
                double dot = 0;
                for (std::size_t i = 0; i < s.n; ++i) {
                    const std::size_t idx = (o * s.n + i) * s.inner + k;
                    dot += G[idx] * Y[idx];
                }
                for (std::size_t i = 0; i < s.n; ++i) {
                    const std::size_t idx = (o * s.n + i) * s.inner + k;
                    ga[idx] += Y[idx] * (G[idx] - dot);
                }
            }
    });
}

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const DenseArray& X = logits.value();
    require(X.rank() == 2, "softmax_cross_entropy: logits must be rank 2");
    const std::size_t n = X.rows(), k = X.cols();
    require(labels.size() == n, "softmax_cross_entropy: one label per row required");
    auto probs = std::make_shared<DenseArray>(std::vector<std::size_t>{n, k});
    double loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = X.data() + i * k;
        double mx = x[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
        double z = 0;
        for (std::size_t j = 0; j < k; ++j) {
            const double e = std::exp(x[j] - mx);
            (*probs)[i * k + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] /= z;
        const int lab = labels[i];
        if (lab < 0 || static_cast<std::size_t>(lab) >= k)
            throw ContractError("softmax_cross_entropy: label out of range");
        loss += std::log(z) - (x[lab] - mx);
    }
    loss /= static_cast<double>(n);

    Tape* t = logits.tape;
    const int idx = logits.id;
    auto labs = std::make_shared<std::vector<int>>(labels);
    return make_op(t, DenseArray::scalar(loss), [=](Tape& tp, int self) {
        if (!tp.node(idx).differentiable) return;
        const double g = tp.node(self).grad[0] / static_cast<double>(n);
        DenseArray& ga = tp.grad_buf(idx);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < k; ++j) ga[i * k + j] += g * (*probs)[i * k + j];
            ga[i * k + (*labs)[i]] -= g;
        }
    });
}

// ---- normalization ----------------------------------------------------------

Var layernorm(const Var& x, const Var& gain, const Var& bias, double eps) {
    check_same_tape(x, gain);
    check_same_tape(x, bias);
    const DenseArray& X = x.value();
    require(X.rank() == 2, "layernorm: input must be rank 2");
    const std::size_t r = X.rows(), c = X.cols();
    require(gain.value().size() == c && bias.value().size() == c,
            "layernorm: gain/bias must have one entry per column");
    const DenseArray& Gn = gain.value();
    const DenseArray& Bs = bias.value();
    DenseArray out({r, c});
    auto xhat = std::make_shared<DenseArray>(std::vector<std::size_t>{r, c});
    auto istd = std::make_shared<std::vector<double>>(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = X.data() + i * c;
        double mean = 0;
        for (std::size_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<double>(c);
        double var = 0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        (*istd)[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double xh = (row[j] - mean) * is;
            (*xhat)[i * c + j] = xh;
            out[i * c + j] = Gn[j] * xh + Bs[j];
        }
    }
    Tape* t = x.tape;
    const int idx = x.id, idg = gain.id, idb = bias.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        const DenseArray& G = tp.node(self).grad;
        const DenseArray& Gv = tp.node(idg).value;
        if (tp.node(idg).differentiable) {
            DenseArray& gg = tp.grad_buf(idg);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gg[j] += G[i * c + j] * (*xhat)[i * c + j];
        }
        if (tp.node(idb).differentiable) {
            DenseArray& gb = tp.grad_buf(idb);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += G[i * c + j];
        }
        if (tp.node(idx).differentiable) {
            DenseArray& gx = tp.grad_buf(idx);
            for (std::size_t i = 0; i < r; ++i) {
                double sum_gy = 0, sum_gyxh = 0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double gy = G[i * c + j] * Gv[j];
                    sum_gy += gy;
                    sum_gyxh += gy * (*xhat)[i * c + j];
                }
                const double invc = 1.0 / static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j) {
                    const double gy = G[i * c + j] * Gv[j];
                    gx[i * c + j] += (*istd)[i] * (gy - invc * sum_gy -
                                                   (*xhat)[i * c + j] * invc * sum_gyxh);
                }
            }
        }
    });
}

Var batchnorm_cols(const Var& x, const Var& gain, const Var& bias, double eps) {
    check_same_tape(x, gain);
    check_same_tape(x, bias);
    const DenseArray& X = x.value();
    require(X.rank() == 2, "batchnorm_cols: input must be rank 2");
    const std::size_t r = X.rows(), c = X.cols();
    if (r < 2) throw ContractError("batchnorm_cols: batch statistics need at least 2 rows");
    require(gain.value().size() == c && bias.value().size() == c,
            "batchnorm_cols: gain/bias must have one entry per column");
    const DenseArray& Gn = gain.value();
    const DenseArray& Bs = bias.value();
    DenseArray out({r, c});
    auto xhat = std::make_shared<DenseArray>(std::vector<std::size_t>{r, c});
    auto istd = std::make_shared<std::vector<double>>(c);
    for (std::size_t j = 0; j < c; ++j) {
        double mean = 0;
        for (std::size_t i = 0; i < r; ++i) mean += X[i * c + j];
        mean /= static_cast<double>(r);
        double var = 0;
        for (std::size_t i = 0; i < r; ++i) {
            const double d = X[i * c + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(r);
        const double is = 1.0 / std::sqrt(var + eps);
        (*istd)[j] = is;
        for (std::size_t i = 0; i < r; ++i) {
            const double xh = (X[i * c + j] - mean) * is;
            (*xhat)[i * c + j] = xh;
            out[i * c + j] = Gn[j] * xh + Bs[j];
        }
    }
    Tape* t = x.tape;
    const int idx = x.id, idg = gain.id, idb = bias.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        const DenseArray& G = tp.node(self).grad;
        const DenseArray& Gv = tp.node(idg).value;
        if (tp.node(idg).differentiable) {
            DenseArray& gg = tp.grad_buf(idg);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gg[j] += G[i * c + j] * (*xhat)[i * c + j];
        }
        if (tp.node(idb).differentiable) {
            DenseArray& gb = tp.grad_buf(idb);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += G[i * c + j];
        }
        if (tp.node(idx).differentiable) {
            DenseArray& gx = tp.grad_buf(idx);
            const double invr = 1.0 / static_cast<double>(r);
            for (std::size_t j = 0; j < c; ++j) {
                double sum_gy = 0, sum_gyxh = 0;
                for (std::size_t i = 0; i < r; ++i) {
                    const double gy = G[i * c + j] * Gv[j];
                    sum_gy += gy;
                    sum_gyxh += gy * (*xhat)[i * c + j];
                }
                for (std::size_t i = 0; i < r; ++i) {
                    const double gy = G[i * c + j] * Gv[j];
                    gx[i * c + j] += (*istd)[j] * (gy - invr * sum_gy -
                                                   (*xhat)[i * c + j] * invr * sum_gyxh);
                }
            }
        }
    });
}

// ---- structure --------------------------------------------------------------

Var gather_rows(const Var& table, std::vector<std::size_t> ids) {
    const DenseArray& T = table.value();
    require(T.rank() == 2, "gather_rows: table must be rank 2");
    const std::size_t c = T.cols();
    DenseArray out({ids.size(), c});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= T.rows()) throw DimensionError("gather_rows: row index out of range");
        std::copy_n(T.data() + ids[i] * c, c, out.data() + i * c);
    }
    Tape* t = table.tape;
    const int idt = table.id;
    auto idsp = std::make_shared<std::vector<std::size_t>>(std::move(ids));
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        if (!tp.node(idt).differentiable) return;
        const DenseArray& G = tp.node(self).grad;
        DenseArray& gt = tp.grad_buf(idt);
        for (std::size_t i = 0; i < idsp->size(); ++i) {
            const std::size_t row = (*idsp)[i];
            for (std::size_t j = 0; j < c; ++j) gt[row * c + j] += G[i * c + j];
        }
    });
}

Var slice_cols(const Var& x, std::size_t c0, std::size_t c1) {
    const DenseArray& X = x.value();
    require(X.rank() == 2, "slice_cols: input must be rank 2");
    require(c0 < c1 && c1 <= X.cols(), "slice_cols: bad column range");
    const std::size_t r = X.rows(), c = X.cols(), w = c1 - c0;
    DenseArray out({r, w});
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(X.data() + i * c + c0, w, out.data() + i * w);
    Tape* t = x.tape;
    const int idx = x.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        if (!tp.node(idx).differentiable) return;
        const DenseArray& G = tp.node(self).grad;
        DenseArray& gx = tp.grad_buf(idx);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) gx[i * c + c0 + j] += G[i * w + j];
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    Tape* t = parts[0].tape;
    const std::size_t r = parts[0].value().rows();
    std::size_t total = 0;
    for (const Var& p : parts) {
        check_same_tape(parts[0], p);
        require(p.value().rank() == 2 && p.value().rows() == r, "concat_cols: row mismatch");
        total += p.value().cols();
    }
    DenseArray out({r, total});
    std::size_t off = 0;
    for (const Var& p : parts) {
        const DenseArray& P = p.value();
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(P.data() + i * P.cols(), P.cols(), out.data() + i * total + off);
        off += P.cols();
    }
    auto ids = std::make_shared<std::vector<int>>();
    auto widths = std::make_shared<std::vector<std::size_t>>();
    for (const Var& p : parts) {
        ids->push_back(p.id);
        widths->push_back(p.value().cols());
    }
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        const DenseArray& G = tp.node(self).grad;
        std::size_t off2 = 0;
        for (std::size_t pi = 0; pi < ids->size(); ++pi) {
            const std::size_t w = (*widths)[pi];
            if (tp.node((*ids)[pi]).differentiable) {
                DenseArray& g = tp.grad_buf((*ids)[pi]);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < w; ++j) g[i * w + j] += G[i * total + off2 + j];
            }
            off2 += w;
        }
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    Tape* t = parts[0].tape;
    const std::size_t c = parts[0].value().cols();
    std::size_t total = 0;
    for (const Var& p : parts) {
        check_same_tape(parts[0], p);
        require(p.value().rank() == 2 && p.value().cols() == c, "concat_rows: column mismatch");
        total += p.value().rows();
    }
    DenseArray out({total, c});
    std::size_t off = 0;
    for (const Var& p : parts) {
        const DenseArray& P = p.value();
        std::copy_n(P.data(), P.size(), out.data() + off * c);
        off += P.rows();
    }
    auto ids = std::make_shared<std::vector<int>>();
    auto heights = std::make_shared<std::vector<std::size_t>>();
    for (const Var& p : parts) {
        ids->push_back(p.id);
        heights->push_back(p.value().rows());
    }
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        const DenseArray& G = tp.node(self).grad;
        std::size_t off2 = 0;
        for (std::size_t pi = 0; pi < ids->size(); ++pi) {
            const std::size_t h = (*heights)[pi];
            if (tp.node((*ids)[pi]).differentiable) {
                DenseArray& g = tp.grad_buf((*ids)[pi]);
                for (std::size_t i = 0; i < h * c; ++i) g[i] += G[off2 * c + i];
            }
            off2 += h;
        }
    });
}

Var reshape(const Var& x, std::vector<std::size_t> new_shape) {
    const DenseArray& X = x.value();
    std::size_t n = 1;
    for (std::size_t e : new_shape) n *= e;
    require(n == X.size(), "reshape: element count mismatch");
    DenseArray out(std::move(new_shape));
    std::copy_n(X.data(), X.size(), out.data());
    Tape* t = x.tape;
    const int idx = x.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        if (!tp.node(idx).differentiable) return;
        const DenseArray& G = tp.node(self).grad;
        DenseArray& gx = tp.grad_buf(idx);
        for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i];
    });
}

Var pad_cols(const Var& x, std::size_t new_cols) {
    const DenseArray& X = x.value();
    require(X.rank() == 2, "pad_cols: input must be rank 2");
    const std::size_t r = X.rows(), c = X.cols();
    require(new_cols >= c, "pad_cols: target narrower than input");
    if (new_cols == c) return x;
    DenseArray out({r, new_cols});
    for (std::size_t i = 0; i < r; ++i) std::copy_n(X.data() + i * c, c, out.data() + i * new_cols);
    Tape* t = x.tape;
    const int idx = x.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        if (!tp.node(idx).differentiable) return;
        const DenseArray& G = tp.node(self).grad;
        DenseArray& gx = tp.grad_buf(idx);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += G[i * new_cols + j];
    });
}

Var hadamard_cols(const Var& x) {
    const DenseArray& X = x.value();
    require(X.rank() == 2, "hadamard_cols: input must be rank 2");
    const std::size_t c = X.cols();
    require(c > 0 && (c & (c - 1)) == 0, "hadamard_cols: column count must be a power of two");
    DenseArray out = X;
    fwht_rows(out);
    Tape* t = x.tape;
    const int idx = x.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        if (!tp.node(idx).differentiable) return;
        DenseArray g = tp.node(self).grad;  // H is symmetric: adjoint is H again
        fwht_rows(g);
        accum(tp, idx, g);
    });
}

Var permute_cols(const Var& x, std::vector<std::size_t> perm) {
    const DenseArray& X = x.value();
    require(X.rank() == 2, "permute_cols: input must be rank 2");
    const std::size_t r = X.rows(), c = X.cols();
    require(perm.size() == c, "permute_cols: permutation size mismatch");
    DenseArray out({r, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = X[i * c + perm[j]];
    Tape* t = x.tape;
    const int idx = x.id;
    auto pp = std::make_shared<std::vector<std::size_t>>(std::move(perm));
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        if (!tp.node(idx).differentiable) return;
        const DenseArray& G = tp.node(self).grad;
        DenseArray& gx = tp.grad_buf(idx);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gx[i * c + (*pp)[j]] += G[i * c + j];
    });
}

Var diag_scale_cols(const Var& x, const Var& d) {
    check_same_tape(x, d);
    const DenseArray& X = x.value();
    const DenseArray& D = d.value();
    require(X.rank() == 2 && D.rank() == 1, "diag_scale_cols: want (matrix, vector)");
    require(X.cols() == D.extent(0), "diag_scale_cols: extent mismatch");
    const std::size_t r = X.rows(), c = X.cols();
    DenseArray out({r, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = X[i * c + j] * D[j];
    Tape* t = x.tape;
    const int idx = x.id, idd = d.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        const DenseArray& G = tp.node(self).grad;
        const DenseArray& Dv = tp.node(idd).value;
        const DenseArray& Xv = tp.node(idx).value;
        if (tp.node(idx).differentiable) {
            DenseArray& gx = tp.grad_buf(idx);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += G[i * c + j] * Dv[j];
        }
        if (tp.node(idd).differentiable) {
            DenseArray& gd = tp.grad_buf(idd);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gd[j] += G[i * c + j] * Xv[i * c + j];
        }
    });
}

Var stabilize_signed(const Var& x, double eps, double near, std::uint64_t* near_count) {
    const DenseArray& X = x.value();
    DenseArray out(X.shape());
    std::uint64_t hits = 0;
    for (std::size_t i = 0; i < X.size(); ++i) {
        const double v = X[i];
        if (std::abs(v) < near) ++hits;
        out[i] = v + (v >= 0 ? eps : -eps);
    }
    if (near_count) *near_count += hits;
    Tape* t = x.tape;
    const int idx = x.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        if (!tp.node(idx).differentiable) return;
        accum(tp, idx, tp.node(self).grad);
    });
}

Var dropout(const Var& x, double rate, Rng& rng) {
    if (rate == 0.0) return x;
    if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
    const DenseArray& X = x.value();
    const double keep = 1.0 - rate;
    auto mask = std::make_shared<DenseArray>(X.shape());
    DenseArray out(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) {
        const double m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
        (*mask)[i] = m;
        out[i] = X[i] * m;
    }
    Tape* t = x.tape;
    const int idx = x.id;
    return make_op(t, std::move(out), [=](Tape& tp, int self) {
        if (!tp.node(idx).differentiable) return;
        const DenseArray& G = tp.node(self).grad;
        DenseArray& gx = tp.grad_buf(idx);
        for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i] * (*mask)[i];
    });
}

}  // namespace klab
