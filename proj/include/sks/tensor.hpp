#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sks {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite scans are opt-in; the verification harness switches them on.
inline bool& numeric_checks_enabled() {
    static bool enabled = false;
    return enabled;
}

struct NumericChecksGuard {
    bool prev;
    explicit NumericChecksGuard(bool on) : prev(numeric_checks_enabled()) {
        numeric_checks_enabled() = on;
    }
    ~NumericChecksGuard() { numeric_checks_enabled() = prev; }
};

namespace detail {

template <typename T>
struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first needed
    bool requires_grad = false;
    bool tracked = false;        // produced under a tape from tracked inputs
    std::uint64_t tape_id = 0;   // tape that produced it, 0 for leaves

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

}  // namespace detail

/// Dense row-major tensor. Handles share storage; ops produce fresh storage,
/// so a tensor is immutable once created except for parameter updates between
/// optimizer steps.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.s_ = std::make_shared<detail::Storage<T>>();
        t.s_->data.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
        t.s_->shape = std::move(shape);
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.s_->data) v = value;
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> values) {
        if (numel_of(shape) != static_cast<std::int64_t>(values.size()))
            throw ShapeError("tensor: " + std::to_string(values.size()) +
                             " values do not fill shape " + shape_str(shape));
        Tensor t;
        t.s_ = std::make_shared<detail::Storage<T>>();
        t.s_->shape = std::move(shape);
        t.s_->data = std::move(values);
        return t;
    }

    static Tensor scalar(T value) { return from({1}, {value}); }

    bool defined() const { return s_ != nullptr; }
    const Shape& shape() const { return s_->shape; }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    std::int64_t dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(s_->data.size()); }

    std::vector<T>& data() { return s_->data; }
    const std::vector<T>& data() const { return s_->data; }

    /// Gradient buffer, allocated (zero) on first access.
    std::vector<T>& grad() {
        s_->ensure_grad();
        return s_->grad;
    }
    const std::vector<T>& grad_view() const { return s_->grad; }

    bool requires_grad() const { return s_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        s_->requires_grad = on;
        return *this;
    }

    bool tracked() const { return s_->tracked; }

    void zero_grad() {
        if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1)
            throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return s_->data[0];
    }

    std::shared_ptr<detail::Storage<T>> storage() const { return s_; }
    detail::Storage<T>* st() const { return s_.get(); }

private:
    std::shared_ptr<detail::Storage<T>> s_;
};

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    if (!numeric_checks_enabled()) return;
    for (const T& v : t.data()) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
}

/// Element-by-element precision conversion; the result is a fresh untracked
/// constant.
template <typename To, typename From>
Tensor<To> cast_tensor(const Tensor<From>& x) {
    Tensor<To> out = Tensor<To>::zeros(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i)
        out.data()[static_cast<std::size_t>(i)] = static_cast<To>(x.data()[i]);
    return out;
}

}  // namespace sks
