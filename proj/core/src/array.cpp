#include "klab/array.hpp"

#include <cmath>
#include <sstream>

namespace klab {

namespace {
thread_local bool g_alloc_enabled = false;
thread_local std::size_t g_alloc_live = 0;
thread_local std::size_t g_alloc_peak = 0;
}  // namespace

void AllocCounter::enable() {
    g_alloc_enabled = true;
    g_alloc_live = 0;
    g_alloc_peak = 0;
}
void AllocCounter::disable() { g_alloc_enabled = false; }
bool AllocCounter::enabled() { return g_alloc_enabled; }
std::size_t AllocCounter::peak_bytes() { return g_alloc_peak; }
std::size_t AllocCounter::live_bytes() { return g_alloc_live; }
void AllocCounter::on_alloc(std::size_t bytes) {
    if (!g_alloc_enabled) return;
    g_alloc_live += bytes;
    if (g_alloc_live > g_alloc_peak) g_alloc_peak = g_alloc_live;
}
void AllocCounter::on_free(std::size_t bytes) {
    if (!g_alloc_enabled) return;
    g_alloc_live -= bytes < g_alloc_live ? bytes : g_alloc_live;
}

void DenseArray::track_() {
    if (AllocCounter::enabled() && !data_.empty()) {
        tracked_ = data_.size() * sizeof(double);
        AllocCounter::on_alloc(tracked_);
    } else {
        tracked_ = 0;
    }
}

void DenseArray::untrack_() {
    if (tracked_ != 0) {
        AllocCounter::on_free(tracked_);
        tracked_ = 0;
    }
}

DenseArray DenseArray::full(std::vector<std::size_t> shape, double v) {
    DenseArray out(std::move(shape));
    for (auto& x : out.data_) x = v;
    return out;
}

DenseArray DenseArray::randn(std::vector<std::size_t> shape, Rng& rng, double stddev) {
    DenseArray out(std::move(shape));
    for (auto& x : out.data_) x = stddev * rng.normal();
    return out;
}

bool DenseArray::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

void DenseArray::require_finite(const std::string& context) const {
    if (!all_finite()) throw DataError(context + ": non-finite values present");
}

std::string DenseArray::shape_str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << ',';
        os << shape_[i];
    }
    os << ')';
    return os.str();
}

}  // namespace klab
