#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "sks/tensor.hpp"

namespace sks {

/// Reverse-mode tape. Construction installs the tape as the active one for
/// the current thread; ops executed while it is active append adjoint
/// closures in execution order. backward() replays them once, in reverse.
///
/// Tensors produced under one tape must not be fed to ops under a different
/// tape; that is detected and rejected. Parameters (leaves) may be reused
/// across tapes, their gradients accumulate until zeroed.
template <typename T>
class Tape {
public:
    Tape() : id_(++last_id_), prev_(current_) { current_ = this; }
    ~Tape() { current_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_; }
    std::uint64_t id() const { return id_; }
    std::size_t size() const { return nodes_.size(); }

    void record(std::function<void()> adjoint) { nodes_.push_back(std::move(adjoint)); }

    /// Seeds d(loss)/d(loss) = 1 and runs every adjoint once in reverse
    /// order, accumulating into .grad of all reachable tracked tensors.
    void backward(const Tensor<T>& loss) {
        if (!loss.defined() || loss.numel() != 1)
            throw ShapeError("backward: loss must be a scalar, got " +
                             (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
        if (!loss.tracked() || loss.st()->tape_id != id_)
            throw std::logic_error("backward: loss was not produced under this tape");
        loss.st()->ensure_grad();
        loss.st()->grad[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
    std::uint64_t id_;
    Tape* prev_;
    inline static thread_local Tape* current_ = nullptr;
    inline static std::uint64_t last_id_ = 0;
};

namespace detail {

/// True if gradients should flow into this tensor under the given tape.
template <typename T>
bool wants_grad(const Tensor<T>& t, const Tape<T>* tape) {
    if (t.requires_grad()) return true;
    return t.tracked() && tape && t.st()->tape_id == tape->id();
}

template <typename T>
void check_same_tape(const Tensor<T>& t, const Tape<T>* tape) {
    if (t.tracked() && (!tape || t.st()->tape_id != tape->id()))
        throw std::logic_error("op input was produced under a different tape");
}

/// Returns the active tape if any input participates in gradient tracking.
template <typename T>
Tape<T>* tape_for(std::initializer_list<const Tensor<T>*> inputs) {
    Tape<T>* tape = Tape<T>::current();
    for (const Tensor<T>* t : inputs) check_same_tape(*t, tape);
    if (!tape) return nullptr;
    for (const Tensor<T>* t : inputs)
        if (wants_grad(*t, tape)) return tape;
    return nullptr;
}

template <typename T>
void mark_output(const Tensor<T>& out, const Tape<T>* tape) {
    out.st()->tracked = true;
    out.st()->tape_id = tape->id();
}

}  // namespace detail

}  // namespace sks
