#pragma once

#include <map>
#include <string>
#include <vector>

#include "sks/rng.hpp"
#include "sks/tensor.hpp"

namespace sks {

/// Named, ordered collection of trainable tensors. Iteration order is always
/// lexicographic by name, which fixes the canonical serialization order.
template <typename T>
class ParameterStore {
public:
    /// Registers a fresh zero tensor with requires_grad set. Names are unique.
    Tensor<T> create(const std::string& name, Shape shape) {
        if (params_.count(name))
            throw ConfigError("duplicate parameter name: " + name);
        Tensor<T> t = Tensor<T>::zeros(std::move(shape));
        t.set_requires_grad(true);
        params_.emplace(name, t);
        return t;
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter name: " + name);
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter name: " + name);
        return it->second;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& [k, v] : params_) out.push_back(k);
        return out;
    }

    std::size_t size() const { return params_.size(); }

    std::int64_t total_scalars() const {
        std::int64_t n = 0;
        for (const auto& [k, v] : params_) n += v.numel();
        return n;
    }

    void zero_grad_all() {
        for (auto& [k, v] : params_) v.zero_grad();
    }

    /// Marks every parameter whose name starts with prefix as non-trainable.
    void freeze_prefix(const std::string& prefix) {
        for (auto& [k, v] : params_)
            if (k.rfind(prefix, 0) == 0) v.set_requires_grad(false);
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, Tensor<T>> params_;
};

namespace init {

template <typename T>
void zeros(Tensor<T>& t) {
    std::fill(t.data().begin(), t.data().end(), T(0));
}

template <typename T>
void ones(Tensor<T>& t) {
    std::fill(t.data().begin(), t.data().end(), T(1));
}

template <typename T>
void trunc_normal(Tensor<T>& t, Rng& rng, double sigma) {
    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(sigma));
}

/// For a [2C, C] fusion weight applied as out = in * W: the top C x C block
/// starts at the identity (plus small noise everywhere) so an untrained layer
/// passes its first input through nearly unchanged.
template <typename T>
void fusion_identity(Tensor<T>& t, Rng& rng, double noise_sigma) {
    if (t.rank() != 2 || t.dim(0) != 2 * t.dim(1))
        throw ShapeError("fusion_identity: expected [2C, C], got " + shape_str(t.shape()));
    const std::int64_t c = t.dim(1);
    for (std::int64_t i = 0; i < 2 * c; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
            T v = noise_sigma > 0 ? static_cast<T>(rng.truncated_normal(noise_sigma)) : T(0);
            if (i == j) v += T(1);
            t.data()[i * c + j] = v;
        }
}

}  // namespace init

}  // namespace sks
