#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cadtrans/tensor.hpp"

namespace cadtrans {

struct Param {
    std::string name;
    Tensor value;
    bool frozen = false;
    Tensor momentum;  // optimizer state, created on first update
};

// Named parameter collection covering the backbone + feature head (F), the
// classifier (C), and the assistant domain module (G), plus non-trainable
// buffers (batch-norm running statistics). Iteration order is creation order,
// which fixes the update order and keeps runs reproducible.
class ModelState {
public:
    void add_param(const std::string& name, Tensor value);
    void add_buffer(const std::string& name, Tensor value);

    bool has_param(const std::string& name) const;
    bool has_buffer(const std::string& name) const;

    const Tensor& param(const std::string& name) const;
    Param& param_entry(const std::string& name);
    const Tensor& buffer(const std::string& name) const;
    void set_buffer(const std::string& name, Tensor value);

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }

    // Marks every parameter whose name starts with `prefix` frozen; frozen
    // parameters stop requiring gradients and are skipped by the optimizer.
    void freeze_prefix(const std::string& prefix);

    std::int64_t param_count(const std::string& prefix = "") const;

    DType dtype() const;

private:
    std::vector<Param> params_;
    std::vector<std::pair<std::string, Tensor>> buffers_;
    std::unordered_map<std::string, std::size_t> param_index_;
    std::unordered_map<std::string, std::size_t> buffer_index_;
};

// One SGD step: buf <- momentum * buf + (grad + weight_decay * p);
// p <- p - lr * buf. Frozen or gradient-free parameters are untouched.
void sgd_step(ModelState& model, double lr, double momentum, double weight_decay);

}  // namespace cadtrans
