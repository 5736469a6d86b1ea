#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cadtrans/rng.hpp"
#include "cadtrans/tensor.hpp"

namespace cadtrans {

struct GradCheckReport {
    double max_rel_err = 0.0;
    int checked = 0;
};

// Compares reverse-mode gradients of a scalar-valued forward pass against
// central finite differences. `forward` must rebuild the computation from the
// current values of `leaves` on every call; leaves are perturbed in place.
// Only forward evaluations are used on the finite-difference side, so the
// check is independent of the adjoint path it validates.
GradCheckReport check_gradients(const std::function<Tensor()>& forward,
                                const std::vector<Tensor>& leaves, int num_samples,
                                Rng& rng, double step = 1e-5);

}  // namespace cadtrans
