#pragma once

// Thin RAII layer over FFTW for square 2D complex transforms. A plan is built
// once (planning is not thread-safe in FFTW, so it is serialized) and then
// executed concurrently on caller-owned aligned buffers.

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <memory>
#include <mutex>
#include <new>
#include <stdexcept>

namespace mlsgd::fft {

namespace detail {
inline std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}
struct FftwFree {
    void operator()(void* p) const { fftw_free(p); }
};
}  // namespace detail

/// Aligned complex buffer of P*P entries.
class Buffer {
public:
    explicit Buffer(std::size_t count)
        : count_(count), data_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * count))) {
        if (!data_) throw std::bad_alloc();
    }
    [[nodiscard]] std::size_t size() const { return count_; }
    [[nodiscard]] fftw_complex* raw() { return data_.get(); }
    [[nodiscard]] std::complex<double>* data() { return reinterpret_cast<std::complex<double>*>(data_.get()); }
    [[nodiscard]] std::complex<double>& operator[](std::size_t k) { return data()[k]; }

private:
    std::size_t count_;
    std::unique_ptr<fftw_complex, detail::FftwFree> data_;
};

class Plan2d {
public:
    /// sign = FFTW_FORWARD (-1) or FFTW_BACKWARD (+1); transforms are unnormalized.
    Plan2d(std::size_t side, int sign) : side_(side) {
        Buffer scratch(side * side);
        std::lock_guard lock(detail::planner_mutex());
        plan_ = fftw_plan_dft_2d(static_cast<int>(side), static_cast<int>(side), scratch.raw(), scratch.raw(),
                                 sign, FFTW_ESTIMATE);
        if (!plan_) throw std::runtime_error("fft: FFTW failed to build a plan");
    }
    ~Plan2d() {
        std::lock_guard lock(detail::planner_mutex());
        fftw_destroy_plan(plan_);
    }
    Plan2d(const Plan2d&) = delete;
    Plan2d& operator=(const Plan2d&) = delete;

    [[nodiscard]] std::size_t side() const { return side_; }

    /// In-place transform; safe to call from several threads on distinct buffers.
    void execute(Buffer& buffer) const {
        if (buffer.size() != side_ * side_) throw std::invalid_argument("fft: buffer size mismatch");
        fftw_execute_dft(plan_, buffer.raw(), buffer.raw());
    }

private:
    std::size_t side_;
    fftw_plan plan_{};
};

}  // namespace mlsgd::fft
