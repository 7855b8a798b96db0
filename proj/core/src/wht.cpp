#include "klab/wht.hpp"

namespace klab {

void fwht(double* x, std::size_t n) {
    if (n == 0 || (n & (n - 1)) != 0)
        throw DimensionError("fwht: length must be a power of two");
    for (std::size_t h = 1; h < n; h <<= 1) {
        for (std::size_t i = 0; i < n; i += h << 1) {
            for (std::size_t j = i; j < i + h; ++j) {
                const double a = x[j];
                const double b = x[j + h];
                x[j] = a + b;
                x[j + h] = a - b;
            }
        }
    }
}

void fwht_rows(DenseArray& m) {
    if (m.rank() != 2) throw DimensionError("fwht_rows: input must be rank 2");
    const std::size_t r = m.rows(), c = m.cols();
    for (std::size_t i = 0; i < r; ++i) fwht(m.data() + i * c, c);
}

}  // namespace klab
