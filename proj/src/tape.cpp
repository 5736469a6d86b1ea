#include "cadtrans/tape.hpp"

namespace cadtrans {

namespace {
thread_local Tape* g_active_tape = nullptr;

// Out-of-place accumulation: the incoming cotangent may share storage with a
// live tensor (e.g. reshape adjoints), so it is never mutated.
Tensor accumulate(Tensor acc, const Tensor& g) {
    if (!acc.defined()) return g;
    Tensor out = Tensor::zeros(acc.shape(), acc.dtype());
    const auto n = out.numel();
    if (out.dtype() == DType::F32) {
        const float* a = acc.data<float>();
        const float* b = g.data<float>();
        float* o = out.mutable_data<float>();
        for (std::int64_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
    } else {
        const double* a = acc.data<double>();
        const double* b = g.data<double>();
        double* o = out.mutable_data<double>();
        for (std::int64_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
    }
    return out;
}
}  // namespace

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& t) : previous_(g_active_tape) { g_active_tape = &t; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

int Tape::watch(const Tensor& t) {
    auto& meta = t.ensure_meta();
    meta.requires_grad = true;  // watching a leaf requests its gradient
    if (meta.tape == this && meta.tape_gen == generation_ && meta.node >= 0 &&
        meta.node < static_cast<int>(nodes_.size()))
        return meta.node;
    meta.tape = this;
    meta.tape_gen = generation_;
    meta.node = static_cast<int>(nodes_.size());
    meta.grad = Tensor{};
    nodes_.push_back(Node{"leaf", {}, nullptr, t.autograd_meta()});
    return meta.node;
}

int Tape::node_of(const Tensor& t) {
    auto meta = t.autograd_meta();
    if (meta && meta->tape == this && meta->tape_gen == generation_ && meta->node >= 0 &&
        meta->node < static_cast<int>(nodes_.size()))
        return meta->node;
    if (meta && meta->requires_grad) return watch(t);
    return -1;
}

int Tape::record(const char* op_name, std::vector<int> inputs, const Tensor& out,
                 BackwardFn fn) {
    auto& meta = out.ensure_meta();
    meta.requires_grad = true;
    meta.tape = this;
    meta.tape_gen = generation_;
    meta.node = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{op_name, std::move(inputs), std::move(fn), out.autograd_meta()});
    return meta.node;
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " +
                         shape_str(loss.shape()));
    auto meta = loss.autograd_meta();
    if (!meta || meta->tape != this || meta->tape_gen != generation_ || meta->node < 0)
        throw Error("backward: loss is not tracked on this tape");

    std::vector<Tensor> cot(nodes_.size());
    cot[static_cast<std::size_t>(meta->node)] =
        Tensor::full(loss.shape(), 1.0, loss.dtype());

    std::vector<bool> need;
    std::vector<Tensor> grads_in;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Tensor& g = cot[i];
        if (!g.defined()) continue;
        Node& node = nodes_[i];
        if (node.fn) {
            const std::size_t k = node.inputs.size();
            need.assign(k, false);
            for (std::size_t j = 0; j < k; ++j) need[j] = node.inputs[j] >= 0;
            grads_in.assign(k, Tensor{});
            node.fn(g, need, grads_in);
            for (std::size_t j = 0; j < k; ++j) {
                if (node.inputs[j] < 0 || !grads_in[j].defined()) continue;
                auto dst = static_cast<std::size_t>(node.inputs[j]);
                cot[dst] = accumulate(std::move(cot[dst]), grads_in[j]);
            }
        }
        if (node.out_meta && node.out_meta->requires_grad)
            node.out_meta->grad = std::move(g);
    }
}

void Tape::clear() {
    nodes_.clear();
    ++generation_;
}

}  // namespace cadtrans
