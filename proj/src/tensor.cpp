#include "r2mf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace r2mf {

std::string to_string(const Dims& d) {
    return "(" + std::to_string(d.n) + "," + std::to_string(d.c) + "," + std::to_string(d.h) + "," +
           std::to_string(d.w) + ")";
}

template <typename T>
Tensor<T>::Tensor(Dims dims, T fill) : dims_(dims), data_(dims.size(), fill) {}

template <typename T>
Tensor<T>::Tensor(Dims dims, std::vector<T> values) : dims_(dims), data_(std::move(values)) {
    if (data_.size() != dims_.size()) {
        throw std::invalid_argument("tensor: " + std::to_string(data_.size()) + " values for dims " +
                                    to_string(dims_));
    }
}

template <typename T>
T Tensor<T>::item() const {
    if (data_.size() != 1) throw std::logic_error("tensor: item() on non-scalar " + to_string(dims_));
    return data_[0];
}

template <typename T>
std::span<T> Tensor<T>::grad() {
    if (grad_.empty()) grad_.assign(data_.size(), T(0));
    return grad_;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
    if (grad_.empty()) throw std::logic_error("tensor: gradient not allocated");
    return grad_;
}

template <typename T>
void Tensor<T>::zero_grad() {
    std::fill(grad_.begin(), grad_.end(), T(0));
}

template <typename T>
void Tensor<T>::clear_grad() {
    grad_.clear();
    grad_.shrink_to_fit();
}

template <typename T>
bool Tensor<T>::all_finite() const {
    auto finite = [](T v) { return std::isfinite(v); };
    return std::all_of(data_.begin(), data_.end(), finite) && std::all_of(grad_.begin(), grad_.end(), finite);
}

template <typename T>
void Tensor<T>::validate() const {
    if (data_.size() != dims_.size()) throw std::logic_error("tensor: storage does not match dims");
    if (!grad_.empty() && grad_.size() != data_.size()) throw std::logic_error("tensor: gradient length mismatch");
    if (!all_finite()) throw std::domain_error("tensor: non-finite entry in " + to_string(dims_));
}

template <typename T>
void Tape<T>::record(Var<T> output, std::function<void()> backward) {
    if (!recording_) return;
    entries_.push_back(Entry{std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
    if (!loss || loss->size() != 1) throw std::invalid_argument("backward: loss must be a scalar tensor");
    const T one(1);
    backward(loss, std::span<const T>(&one, 1));
}

template <typename T>
void Tape<T>::backward(const Var<T>& output, std::span<const T> seed) {
    if (entries_.empty()) throw std::logic_error("backward: tape is empty");
    if (!output || seed.size() != output->size()) throw std::invalid_argument("backward: seed size mismatch");
    for (auto& e : entries_) e.output->zero_grad();
    auto g = output->grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->output->has_grad()) it->backward();
    }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace r2mf
