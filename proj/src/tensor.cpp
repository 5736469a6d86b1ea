#include "cadtrans/tensor.hpp"

#include <sstream>

namespace cadtrans {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) {
        if (e < 0) throw ShapeError("negative extent in shape " + shape_str(s));
        n *= e;
    }
    return n;
}

Tensor Tensor::zeros(Shape shape, DType dt) {
    Tensor t;
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    t.storage_ = std::make_shared<detail::Storage>();
    t.meta_ = std::make_shared<detail::AutogradMeta>();
    if (dt == DType::F32)
        t.storage_->data = std::vector<float>(n, 0.0f);
    else
        t.storage_->data = std::vector<double>(n, 0.0);
    t.shape_ = std::move(shape);
    return t;
}

Tensor Tensor::full(Shape shape, double value, DType dt) {
    Tensor t = zeros(std::move(shape), dt);
    const auto n = t.numel();
    if (dt == DType::F32) {
        auto* p = t.mutable_data<float>();
        for (std::int64_t i = 0; i < n; ++i) p[i] = static_cast<float>(value);
    } else {
        auto* p = t.mutable_data<double>();
        for (std::int64_t i = 0; i < n; ++i) p[i] = value;
    }
    return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full(Shape{}, value, dt); }

Tensor Tensor::from_f32(Shape shape, std::vector<float> values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("from_f32: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
    Tensor t;
    t.storage_ = std::make_shared<detail::Storage>();
    t.meta_ = std::make_shared<detail::AutogradMeta>();
    t.storage_->data = std::move(values);
    t.shape_ = std::move(shape);
    return t;
}

Tensor Tensor::from_f64(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("from_f64: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
    Tensor t;
    t.storage_ = std::make_shared<detail::Storage>();
    t.meta_ = std::make_shared<detail::AutogradMeta>();
    t.storage_->data = std::move(values);
    t.shape_ = std::move(shape);
    return t;
}

std::int64_t Tensor::numel() const { return shape_numel(shape_); }

DType Tensor::dtype() const {
    if (!storage_) throw Error("dtype() on empty tensor");
    return std::holds_alternative<std::vector<float>>(storage_->data) ? DType::F32
                                                                      : DType::F64;
}

double Tensor::at(std::int64_t flat) const {
    if (dtype() == DType::F32) return static_cast<double>(data<float>()[flat]);
    return data<double>()[flat];
}

void Tensor::set(std::int64_t flat, double v) {
    if (dtype() == DType::F32)
        mutable_data<float>()[flat] = static_cast<float>(v);
    else
        mutable_data<double>()[flat] = v;
}

Tensor Tensor::astype(DType dt) const {
    if (defined() && dtype() == dt) return clone();
    Tensor out = zeros(shape_, dt);
    const auto n = numel();
    for (std::int64_t i = 0; i < n; ++i) out.set(i, at(i));
    return out;
}

Tensor Tensor::clone() const {
    Tensor out;
    out.shape_ = shape_;
    out.storage_ = std::make_shared<detail::Storage>(*storage_);
    return out;
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> v(static_cast<std::size_t>(numel()));
    for (std::int64_t i = 0; i < numel(); ++i) v[static_cast<std::size_t>(i)] = at(i);
    return v;
}

Tensor Tensor::reshaped_view(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " +
                         shape_str(new_shape));
    Tensor out;
    out.storage_ = storage_;
    out.shape_ = std::move(new_shape);
    return out;
}

detail::AutogradMeta& Tensor::ensure_meta() const {
    if (!meta_) meta_ = std::make_shared<detail::AutogradMeta>();
    return *meta_;
}

Tensor& Tensor::set_requires_grad(bool v) {
    ensure_meta().requires_grad = v;
    return *this;
}

bool Tensor::requires_grad() const { return meta_ && meta_->requires_grad; }

Tensor Tensor::grad() const { return meta_ ? meta_->grad : Tensor{}; }

bool Tensor::has_grad() const { return meta_ && meta_->grad.defined(); }

void Tensor::clear_grad() const {
    if (meta_) meta_->grad = Tensor{};
}

Tensor Tensor::detach() const {
    Tensor out;
    out.storage_ = storage_;
    out.shape_ = shape_;
    return out;
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw ShapeError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) +
                         " vs " + dtype_name(b.dtype()));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace cadtrans
