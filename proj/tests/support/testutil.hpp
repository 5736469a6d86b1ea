#pragma once

#include <functional>
#include <vector>

#include "cadtrans/gradcheck.hpp"
#include "cadtrans/rng.hpp"
#include "cadtrans/tensor.hpp"

namespace testutil {

inline cadtrans::Tensor random_tensor(cadtrans::Shape shape, cadtrans::Rng& rng,
                                      cadtrans::DType dt = cadtrans::DType::F64,
                                      double scale = 1.0) {
    auto t = cadtrans::Tensor::zeros(std::move(shape), dt);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.gaussian() * scale);
    return t;
}

// Finite-difference check of a scalar forward against all given leaves.
inline double fd_max_rel_err(const std::function<cadtrans::Tensor()>& forward,
                             const std::vector<cadtrans::Tensor>& leaves,
                             int samples = 40, std::uint64_t seed = 7) {
    cadtrans::Rng rng(seed);
    return cadtrans::check_gradients(forward, leaves, samples, rng).max_rel_err;
}

}  // namespace testutil
