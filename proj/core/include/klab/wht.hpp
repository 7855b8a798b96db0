#pragma once

#include <cstddef>

#include "klab/array.hpp"

namespace klab {

// In-place fast Walsh-Hadamard transform (unnormalized, entries of H are
// +-1), O(n log n). `n` must be a power of two.
void fwht(double* x, std::size_t n);

// Applies the transform to every row of a rank-2 array.
void fwht_rows(DenseArray& m);

}  // namespace klab
