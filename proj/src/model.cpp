#include "cadtrans/model.hpp"

namespace cadtrans {

void ModelState::add_param(const std::string& name, Tensor value) {
    if (param_index_.count(name)) throw ConfigError("duplicate parameter " + name);
    value.set_requires_grad(true);
    param_index_[name] = params_.size();
    params_.push_back(Param{name, std::move(value), false, {}});
}

void ModelState::add_buffer(const std::string& name, Tensor value) {
    if (buffer_index_.count(name)) throw ConfigError("duplicate buffer " + name);
    buffer_index_[name] = buffers_.size();
    buffers_.emplace_back(name, std::move(value));
}

bool ModelState::has_param(const std::string& name) const {
    return param_index_.count(name) > 0;
}

bool ModelState::has_buffer(const std::string& name) const {
    return buffer_index_.count(name) > 0;
}

const Tensor& ModelState::param(const std::string& name) const {
    auto it = param_index_.find(name);
    if (it == param_index_.end()) throw ConfigError("unknown parameter " + name);
    return params_[it->second].value;
}

Param& ModelState::param_entry(const std::string& name) {
    auto it = param_index_.find(name);
    if (it == param_index_.end()) throw ConfigError("unknown parameter " + name);
    return params_[it->second];
}

const Tensor& ModelState::buffer(const std::string& name) const {
    auto it = buffer_index_.find(name);
    if (it == buffer_index_.end()) throw ConfigError("unknown buffer " + name);
    return buffers_[it->second].second;
}

void ModelState::set_buffer(const std::string& name, Tensor value) {
    auto it = buffer_index_.find(name);
    if (it == buffer_index_.end()) throw ConfigError("unknown buffer " + name);
    buffers_[it->second].second = std::move(value);
}

void ModelState::freeze_prefix(const std::string& prefix) {
    for (auto& p : params_) {
        if (p.name.rfind(prefix, 0) == 0) {
            p.frozen = true;
            p.value.set_requires_grad(false);
        }
    }
}

std::int64_t ModelState::param_count(const std::string& prefix) const {
    std::int64_t n = 0;
    for (const auto& p : params_)
        if (p.name.rfind(prefix, 0) == 0) n += p.value.numel();
    return n;
}

DType ModelState::dtype() const {
    if (params_.empty()) throw ConfigError("empty model state");
    return params_.front().value.dtype();
}

void sgd_step(ModelState& model, double lr, double momentum, double weight_decay) {
    for (auto& p : model.params()) {
        if (p.frozen) continue;
        Tensor g = p.value.grad();
        if (!g.defined()) continue;
        if (!p.momentum.defined())
            p.momentum = Tensor::zeros(p.value.shape(), p.value.dtype());
        const auto n = p.value.numel();
        if (p.value.dtype() == DType::F32) {
            float* pv = p.value.mutable_data<float>();
            float* pm = p.momentum.mutable_data<float>();
            const float* pg = g.data<float>();
            const auto m = static_cast<float>(momentum);
            const auto wd = static_cast<float>(weight_decay);
            const auto rate = static_cast<float>(lr);
            for (std::int64_t i = 0; i < n; ++i) {
                pm[i] = m * pm[i] + pg[i] + wd * pv[i];
                pv[i] -= rate * pm[i];
            }
        } else {
            double* pv = p.value.mutable_data<double>();
            double* pm = p.momentum.mutable_data<double>();
            const double* pg = g.data<double>();
            for (std::int64_t i = 0; i < n; ++i) {
                pm[i] = momentum * pm[i] + pg[i] + weight_decay * pv[i];
                pv[i] -= lr * pm[i];
            }
        }
        p.value.clear_grad();
    }
}

}  // namespace cadtrans
