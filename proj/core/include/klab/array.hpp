#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "klab/rng.hpp"

namespace klab {

// Error taxonomy, kept deliberately small: shape problems, violated call
// contracts, and data-level failures (corrupt files, non-finite numbers).
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tracks bytes of scratch the current thread allocates through DenseArray.
// Enabled around a region of interest; `peak` is the high-water mark of
// live tracked bytes. Used by the benchmark harness to show that linear
// attention keeps auxiliary storage independent of sequence length.
class AllocCounter {
public:
    static void enable();
    static void disable();
    static bool enabled();
    static std::size_t peak_bytes();
    static std::size_t live_bytes();
    static void on_alloc(std::size_t bytes);
    static void on_free(std::size_t bytes);
};

// Dense row-major array of doubles. Rank is dynamic but in practice 0-3.
class DenseArray {
public:
    DenseArray() = default;

    explicit DenseArray(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
        data_.assign(count_(shape_), 0.0);
        track_();
    }

    DenseArray(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count_(shape_))
            throw DimensionError("DenseArray: data length does not match shape");
        track_();
    }

    DenseArray(const DenseArray& other) : shape_(other.shape_), data_(other.data_) { track_(); }
    DenseArray(DenseArray&& other) noexcept
        : shape_(std::move(other.shape_)), data_(std::move(other.data_)),
          tracked_(other.tracked_) {
        other.tracked_ = 0;
    }
    DenseArray& operator=(const DenseArray& other) {
        if (this != &other) {
            untrack_();
            shape_ = other.shape_;
            data_ = other.data_;
            track_();
        }
        return *this;
    }
    DenseArray& operator=(DenseArray&& other) noexcept {
        if (this != &other) {
            untrack_();
            shape_ = std::move(other.shape_);
            data_ = std::move(other.data_);
            tracked_ = other.tracked_;
            other.tracked_ = 0;
        }
        return *this;
    }
    ~DenseArray() { untrack_(); }

    static DenseArray zeros(std::vector<std::size_t> shape) { return DenseArray(std::move(shape)); }
    static DenseArray full(std::vector<std::size_t> shape, double v);
    static DenseArray scalar(double v) { return DenseArray({}, {v}); }
    static DenseArray randn(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

    // Matrix helpers; valid when rank() == 2 (or 1 where noted).
    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.at(1); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at2(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at2(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    bool same_shape(const DenseArray& other) const { return shape_ == other.shape_; }
    bool is_scalar() const { return data_.size() == 1; }

    double scalar_value() const {
        if (!is_scalar()) throw ContractError("DenseArray: scalar_value on non-scalar");
        return data_[0];
    }

    bool all_finite() const;
    void require_finite(const std::string& context) const;

    std::string shape_str() const;

private:
    static std::size_t count_(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) n *= e;
        return n;
    }
    void track_();
    void untrack_();

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
    std::size_t tracked_ = 0;
};

}  // namespace klab
