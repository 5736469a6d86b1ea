#include "cadtrans/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cadtrans/tape.hpp"

namespace cadtrans {

GradCheckReport check_gradients(const std::function<Tensor()>& forward,
                                const std::vector<Tensor>& leaves, int num_samples,
                                Rng& rng, double step) {
    std::vector<Tensor> grads(leaves.size());
    {
        Tape tape;
        TapeScope scope(tape);
        for (const auto& leaf : leaves) tape.watch(leaf);
        Tensor loss = forward();
        tape.backward(loss);
        for (std::size_t i = 0; i < leaves.size(); ++i) grads[i] = leaves[i].grad();
    }

    GradCheckReport report;
    for (int s = 0; s < num_samples; ++s) {
        const auto li = static_cast<std::size_t>(rng.below(leaves.size()));
        Tensor leaf = leaves[li];
        const auto idx = static_cast<std::int64_t>(
            rng.below(static_cast<std::uint64_t>(leaf.numel())));
        const double analytic = grads[li].defined() ? grads[li].at(idx) : 0.0;

        const double original = leaf.at(idx);
        leaf.set(idx, original + step);
        const double up = forward().at(0);
        leaf.set(idx, original - step);
        const double down = forward().at(0);
        leaf.set(idx, original);

        const double numeric = (up - down) / (2.0 * step);
        const double scale = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
        report.max_rel_err =
            std::max(report.max_rel_err, std::fabs(analytic - numeric) / scale);
        ++report.checked;
    }
    return report;
}

}  // namespace cadtrans
