#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "cadtrans/errors.hpp"

namespace cadtrans {

enum class DType { F32 = 1, F64 = 2 };

inline const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

class Tape;

namespace detail {

struct Storage {
    std::variant<std::vector<float>, std::vector<double>> data;
};

struct AutogradMeta;

}  // namespace detail

// Dense n-dimensional array, row-major, 32- or 64-bit real elements.
// Values are immutable once produced by an operation; mutable access is for
// initialization, parameter updates, and tests. Carries an optional gradient
// slot populated by a backward pass.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, DType dt);
    static Tensor full(Shape shape, double value, DType dt);
    static Tensor scalar(double value, DType dt);
    static Tensor from_f32(Shape shape, std::vector<float> values);
    static Tensor from_f64(Shape shape, std::vector<double> values);

    bool defined() const { return storage_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::int64_t numel() const;
    DType dtype() const;

    // Slow generic element access; kernels use the typed pointers below.
    double at(std::int64_t flat) const;
    void set(std::int64_t flat, double v);

    template <typename T>
    const T* data() const {
        return std::get<std::vector<T>>(storage_->data).data();
    }
    template <typename T>
    T* mutable_data() {
        return std::get<std::vector<T>>(storage_->data).data();
    }

    Tensor astype(DType dt) const;
    Tensor clone() const;
    std::vector<double> to_vector() const;

    // Same storage, new shape (element count must match).
    Tensor reshaped_view(Shape new_shape) const;

    // -- autograd surface ---------------------------------------------------
    Tensor& set_requires_grad(bool v);
    bool requires_grad() const;
    Tensor grad() const;      // empty Tensor when no gradient has been produced
    bool has_grad() const;
    void clear_grad() const;
    Tensor detach() const;    // same storage, no autograd state

    // Internal autograd bookkeeping, shared with Tape and the op layer.
    std::shared_ptr<detail::AutogradMeta> autograd_meta() const { return meta_; }
    void adopt_meta(std::shared_ptr<detail::AutogradMeta> m) const { meta_ = std::move(m); }
    detail::AutogradMeta& ensure_meta() const;

private:
    std::shared_ptr<detail::Storage> storage_;
    Shape shape_;
    mutable std::shared_ptr<detail::AutogradMeta> meta_;
};

namespace detail {

struct AutogradMeta {
    bool requires_grad = false;
    Tape* tape = nullptr;       // tape this tensor is registered on
    std::uint64_t tape_gen = 0; // generation of that tape at registration
    int node = -1;              // node index on the tape
    Tensor grad;                // written by Tape::backward
};

}  // namespace detail

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op);
void check_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace cadtrans
