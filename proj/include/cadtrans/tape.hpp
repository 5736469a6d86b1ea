#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "cadtrans/tensor.hpp"

namespace cadtrans {

// Computes cotangents of a node's inputs from the cotangent of its output.
// `need[j]` is false when input j is untracked; the function may leave
// `grads_in[j]` undefined in that case.
using BackwardFn = std::function<void(const Tensor& grad_out,
                                      const std::vector<bool>& need,
                                      std::vector<Tensor>& grads_in)>;

// Ordered record of executed primitive operations. Replaying the recorded
// adjoints in reverse execution order accumulates gradients into every
// tracked tensor whose requires_grad flag is set. Single-writer: one tape is
// active per thread, installed with TapeScope.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers a leaf tensor (parameter or checked input). Idempotent for a
    // tensor already on this tape generation.
    int watch(const Tensor& t);

    // Records one executed primitive. `inputs[j] < 0` marks an untracked input.
    int record(const char* op_name, std::vector<int> inputs, const Tensor& out,
               BackwardFn fn);

    // Reverse sweep from a scalar loss. Populates the grad slot of every
    // reachable tensor with requires_grad = true.
    void backward(const Tensor& loss);

    std::size_t size() const { return nodes_.size(); }
    std::uint64_t generation() const { return generation_; }

    // Drops all nodes and their saved activations; grad slots already written
    // to tensors survive.
    void clear();

    // Node index of `t` on this tape, or -1. Auto-watches tensors that
    // require grad but are not yet registered.
    int node_of(const Tensor& t);

private:
    struct Node {
        const char* name;
        std::vector<int> inputs;
        BackwardFn fn;  // null for leaves
        std::shared_ptr<detail::AutogradMeta> out_meta;
    };
    std::vector<Node> nodes_;
    std::uint64_t generation_ = 0;
};

// RAII installation of the thread-local active tape. Operations executed with
// no active tape run untracked (pure evaluation).
class TapeScope {
public:
    explicit TapeScope(Tape& t);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape();

}  // namespace cadtrans
