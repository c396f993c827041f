#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace r2mf {

/// Extents of a rank-4 (n, c, h, w) tensor. Storage is row-major in that order.
struct Dims {
    std::size_t n = 1;
    std::size_t c = 1;
    std::size_t h = 1;
    std::size_t w = 1;

    constexpr std::size_t size() const noexcept { return n * c * h * w; }
    constexpr std::size_t plane() const noexcept { return h * w; }

    friend constexpr bool operator==(const Dims&, const Dims&) = default;
};

std::string to_string(const Dims& d);

enum class Mode { train, eval };

/// Dense (n, c, h, w) array with an optional gradient slot of the same length.
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Dims dims, T fill = T(0));
    Tensor(Dims dims, std::vector<T> values);

    const Dims& dims() const noexcept { return dims_; }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T* ptr() noexcept { return data_.data(); }
    const T* ptr() const noexcept { return data_.data(); }

    std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return ((n * dims_.c + c) * dims_.h + h) * dims_.w + w;
    }
    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) { return data_[offset(n, c, h, w)]; }
    T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const { return data_[offset(n, c, h, w)]; }

    /// Value of a single-element tensor.
    T item() const;

    bool has_grad() const noexcept { return !grad_.empty(); }
    /// Gradient slot, allocated as zeros on first access.
    std::span<T> grad();
    /// Gradient slot; throws if it was never allocated.
    std::span<const T> grad() const;
    void zero_grad();
    void clear_grad();

    bool requires_grad() const noexcept { return requires_grad_; }
    void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

    bool all_finite() const;
    /// Throws std::domain_error when any value or gradient entry is NaN or infinite.
    void validate() const;

   private:
    Dims dims_{};
    std::vector<T> data_;
    std::vector<T> grad_;
    bool requires_grad_ = false;
};

template <typename T>
using Var = std::shared_ptr<Tensor<T>>;

template <typename T>
Var<T> make_var(Dims dims, T fill = T(0)) {
    return std::make_shared<Tensor<T>>(dims, fill);
}

template <typename T>
Var<T> make_var(Dims dims, std::vector<T> values) {
    return std::make_shared<Tensor<T>>(dims, std::move(values));
}

/// A leaf that receives gradients during backward.
template <typename T>
Var<T> make_leaf(Dims dims, T fill = T(0)) {
    auto v = make_var<T>(dims, fill);
    v->set_requires_grad(true);
    return v;
}

template <typename T>
Var<T> make_leaf(Dims dims, std::vector<T> values) {
    auto v = make_var<T>(dims, std::move(values));
    v->set_requires_grad(true);
    return v;
}

/// Records primitive applications so the gradient can be replayed in reverse order.
///
/// Each entry owns its output and a closure holding the inputs and whatever the
/// forward pass saved. The closure reads the output gradient and accumulates
/// into the gradients of inputs that require one.
template <typename T>
class Tape {
   public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const noexcept { return recording_; }
    std::size_t size() const noexcept { return entries_.size(); }

    void record(Var<T> output, std::function<void()> backward);

    /// Seeds d(loss)/d(loss) = 1 and replays the tape. Intermediate gradients are
    /// reset first; leaf gradients accumulate across calls.
    void backward(const Var<T>& loss);

    /// Same as above for a non-scalar output with an explicit seed gradient.
    void backward(const Var<T>& output, std::span<const T> seed);

    void clear() noexcept { entries_.clear(); }

   private:
    struct Entry {
        Var<T> output;
        std::function<void()> backward;
    };
    std::vector<Entry> entries_;
    bool recording_;
};

}  // namespace r2mf
