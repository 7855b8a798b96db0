#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "klab/array.hpp"
#include "klab/rng.hpp"

namespace klab {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid until the tape is reset.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const DenseArray& value() const;
    const DenseArray& grad() const;
};

// Record of one executed operation plus the adjoint that undoes it.
// A reverse sweep visits records exactly once, in reverse execution order.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Differentiable leaf (parameter or input).
    Var leaf(DenseArray value);
    // Non-differentiable input; no gradient is ever allocated for it.
    Var constant(DenseArray value);

    // Reverse sweep from a scalar loss. Each leaf reachable from the loss
    // receives its gradient; fan-out accumulates by addition. Running a
    // second sweep without a fresh forward pass is a contract error.
    void backward(const Var& loss);

    // Drops all records; handles into this tape become invalid.
    void reset();

    std::size_t num_nodes() const { return nodes_.size(); }

    // --- internals shared with the op implementations ---
    struct Node {
        DenseArray value;
        DenseArray grad;            // empty until first accumulation
        bool grad_alloc = false;
        bool differentiable = true;
        std::function<void(Tape&)> backprop;  // null for leaves/constants
    };

    Node& node(int id) { return nodes_[id]; }
    const Node& node(int id) const { return nodes_[id]; }
    Var emplace(DenseArray value, bool differentiable, std::function<void(Tape&)> backprop);
    // Gradient buffer of a node, zero-initialized on first use.
    DenseArray& grad_buf(int id);
    bool has_grad(int id) const { return nodes_[id].grad_alloc; }

private:
    std::vector<Node> nodes_;
    bool swept_ = false;
};

// ---- operations -----------------------------------------------------------
// Shapes follow the conventions of the call site: 2-D arrays are (rows, cols)
// row-major; 3-D arrays are (batch, rows, cols) with ops acting on the
// trailing two axes.

// Matrix product with optional transposes, 2-D only.
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
// Batched matrix product, 3-D only, matching leading extents.
Var bmm(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);

// Elementwise. add/mul accept equal shapes or scalar-with-array; everything
// else is a dimension error (broadcasting is intentionally minimal).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_const(const Var& a, double c);
Var exp(const Var& a);
Var cos(const Var& a);
Var sin(const Var& a);
Var tanh(const Var& a);
Var leaky_relu(const Var& a, double slope = 0.01);
Var gelu(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// Fused [cos(x); sin(x)] along columns: output is (R, 2C) for input (R, C).
// One sincos pass forward; the adjoint reads the stored outputs.
Var trig_features(const Var& a);

// Broadcast helpers over 2-D arrays.
Var add_rowvec(const Var& mat, const Var& vec);   // y[r,c] = m[r,c] + v[c]
Var sub_colvec(const Var& mat, const Var& vec);   // y[r,c] = m[r,c] - v[r]
Var div_rows(const Var& mat, const Var& denom);   // y[r,c] = m[r,c] / d[r]

// Reductions along one axis; output drops that axis.
Var reduce_sum(const Var& a, std::size_t axis);
Var reduce_mean(const Var& a, std::size_t axis);
Var reduce_max(const Var& a, std::size_t axis);
Var sum_all(const Var& a);

Var softmax(const Var& a, std::size_t axis);

// Mean cross-entropy of row-wise logits against integer labels.
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels);

// Row-wise layer normalization with learnable gain/bias (length = cols).
Var layernorm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
// Column-wise batch normalization over the rows (the sampling batch), with
// learnable per-feature gain/bias. Requires at least 2 rows.
Var batchnorm_cols(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// Row gather: out[i,:] = table[ids[i],:]; adjoint scatter-adds.
Var gather_rows(const Var& table, std::vector<std::size_t> ids);

Var slice_cols(const Var& x, std::size_t c0, std::size_t c1);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var reshape(const Var& x, std::vector<std::size_t> new_shape);
Var pad_cols(const Var& x, std::size_t new_cols);

// Structured column transforms used by the FastFood projector.
Var hadamard_cols(const Var& x);                        // in-row FWHT, cols = power of two
Var permute_cols(const Var& x, std::vector<std::size_t> perm);  // y[r,j] = x[r,perm[j]]
Var diag_scale_cols(const Var& x, const Var& d);        // y[r,j] = x[r,j] * d[j]

// Signed denominator stabilizer: y = x + eps * sign(x) with sign(0) = +1.
// Treated as unit-slope for the adjoint. Events with |x| < near are tallied
// in *near_count when provided.
Var stabilize_signed(const Var& x, double eps, double near, std::uint64_t* near_count);

// Inverted dropout; identity when rate == 0.
Var dropout(const Var& x, double rate, Rng& rng);

}  // namespace klab
