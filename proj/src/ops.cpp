#include "cadtrans/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace cadtrans::ops {

namespace {

template <typename F>
void dispatch(DType dt, F&& f) {
    if (dt == DType::F32)
        f(float{});
    else
        f(double{});
}

// Recording helper: resolves input node ids on the active tape (if any) and
// registers the adjoint only when at least one input is tracked.
struct Rec {
    Tape* tp;
    std::vector<int> nodes;
    bool any = false;

    explicit Rec(std::initializer_list<const Tensor*> ins) : tp(active_tape()) {
        if (!tp) return;
        nodes.reserve(ins.size());
        for (const Tensor* t : ins) {
            const int n = tp->node_of(*t);
            nodes.push_back(n);
            any = any || n >= 0;
        }
    }
    explicit Rec(const std::vector<const Tensor*>& ins) : tp(active_tape()) {
        if (!tp) return;
        nodes.reserve(ins.size());
        for (const Tensor* t : ins) {
            const int n = tp->node_of(*t);
            nodes.push_back(n);
            any = any || n >= 0;
        }
    }
    bool active() const { return tp != nullptr && any; }
    void done(const char* name, const Tensor& out, BackwardFn fn) {
        tp->record(name, std::move(nodes), out, std::move(fn));
    }
};

// outer x axis x inner decomposition around one axis.
struct AxisSplit {
    std::int64_t outer = 1, axis = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis, const char* op) {
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(s));
    AxisSplit r;
    for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
    r.axis = s[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
        r.inner *= s[i];
    return r;
}

template <typename T, typename FwdOne>
Tensor unary_map(const Tensor& a, FwdOne f) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    const T* pa = a.data<T>();
    T* po = out.mutable_data<T>();
    const auto n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
    return out;
}

template <typename T, typename Fwd>
Tensor binary_map(const Tensor& a, const Tensor& b, Fwd f) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    const T* pa = a.data<T>();
    const T* pb = b.data<T>();
    T* po = out.mutable_data<T>();
    const auto n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
}

// o[m, n] += a[m, k] * b[k, n]
template <typename T>
void mm_acc(const T* a, const T* b, T* o, std::int64_t m, std::int64_t k,
            std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* orow = o + i * n;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = b + kk * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// o[m, n] += a[m, k] * b[n, k]^T
template <typename T>
void mm_nt_acc(const T* a, const T* b, T* o, std::int64_t m, std::int64_t k,
               std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* orow = o + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (std::int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            orow[j] += acc;
        }
    }
}

// o[k, n] += a[m, k]^T * b[m, n]
template <typename T>
void mm_tn_acc(const T* a, const T* b, T* o, std::int64_t m, std::int64_t k,
               std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            T* orow = o + kk * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "add");
    check_same_shape(a, b, "add");
    Tensor out;
    dispatch(a.dtype(), [&]<typename T>(T) {
        out = binary_map<T>(a, b, [](T x, T y) { return x + y; });
    });
    Rec r{&a, &b};
    if (r.active())
        r.done("add", out,
               [](const Tensor& g, const std::vector<bool>& need, std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = g;
                   if (need[1]) gi[1] = g;
               });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "sub");
    check_same_shape(a, b, "sub");
    Tensor out;
    dispatch(a.dtype(), [&]<typename T>(T) {
        out = binary_map<T>(a, b, [](T x, T y) { return x - y; });
    });
    Rec r{&a, &b};
    if (r.active())
        r.done("sub", out,
               [](const Tensor& g, const std::vector<bool>& need, std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = g;
                   if (need[1]) gi[1] = mul_scalar(g, -1.0);
               });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "mul");
    check_same_shape(a, b, "mul");
    Tensor out;
    dispatch(a.dtype(), [&]<typename T>(T) {
        out = binary_map<T>(a, b, [](T x, T y) { return x * y; });
    });
    Rec r{&a, &b};
    if (r.active())
        r.done("mul", out,
               [a = a.detach(), b = b.detach()](const Tensor& g, const std::vector<bool>& need,
                                                std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = mul(g, b);
                   if (need[1]) gi[1] = mul(g, a);
               });
    return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "div");
    check_same_shape(a, b, "div");
    Tensor out;
    dispatch(a.dtype(), [&]<typename T>(T) {
        out = binary_map<T>(a, b, [](T x, T y) { return x / y; });
    });
    Rec r{&a, &b};
    if (r.active())
        r.done("div", out,
               [a = a.detach(), b = b.detach()](const Tensor& g, const std::vector<bool>& need,
                                                std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = div(g, b);
                   if (need[1]) gi[1] = mul_scalar(div(mul(g, div(a, b)), b), -1.0);
               });
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor out;
    dispatch(a.dtype(), [&]<typename T>(T) {
        out = unary_map<T>(a, [s](T x) { return x + static_cast<T>(s); });
    });
    Rec r{&a};
    if (r.active())
        r.done("add_scalar", out,
               [](const Tensor& g, const std::vector<bool>& need, std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = g;
               });
    return out;
}

Tensor mul_scalar(const Tensor& a, double s) {
    Tensor out;
    dispatch(a.dtype(), [&]<typename T>(T) {
        out = unary_map<T>(a, [s](T x) { return x * static_cast<T>(s); });
    });
    Rec r{&a};
    if (r.active())
        r.done("mul_scalar", out,
               [s](const Tensor& g, const std::vector<bool>& need, std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = mul_scalar(g, s);
               });
    return out;
}

Tensor exp(const Tensor& a) {
    Tensor out;
    dispatch(a.dtype(), [&]<typename T>(T) {
        out = unary_map<T>(a, [](T x) { return std::exp(x); });
    });
    Rec r{&a};
    if (r.active())
        r.done("exp", out,
               [y = out.detach()](const Tensor& g, const std::vector<bool>& need,
                                  std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = mul(g, y);
               });
    return out;
}

Tensor log(const Tensor& a, double floor) {
    Tensor out;
    dispatch(a.dtype(), [&]<typename T>(T) {
        const T f = static_cast<T>(floor);
        out = unary_map<T>(a, [f](T x) { return std::log(x > f ? x : f); });
    });
    Rec r{&a};
    if (r.active())
        r.done("log", out,
               [a = a.detach(), floor](const Tensor& g, const std::vector<bool>& need,
                                       std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(a.shape(), a.dtype());
                   dispatch(a.dtype(), [&]<typename T>(T) {
                       const T* pa = a.data<T>();
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       const T f = static_cast<T>(floor);
                       const auto n = a.numel();
                       for (std::int64_t i = 0; i < n; ++i)
                           po[i] = pa[i] > f ? pg[i] / pa[i] : T(0);
                   });
                   gi[0] = gx;
               });
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out;
    dispatch(a.dtype(), [&]<typename T>(T) {
        out = unary_map<T>(a, [](T x) { return x > T(0) ? x : T(0); });
    });
    Rec r{&a};
    if (r.active())
        r.done("relu", out,
               [a = a.detach()](const Tensor& g, const std::vector<bool>& need,
                                std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(a.shape(), a.dtype());
                   dispatch(a.dtype(), [&]<typename T>(T) {
                       const T* pa = a.data<T>();
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       const auto n = a.numel();
                       for (std::int64_t i = 0; i < n; ++i)
                           po[i] = pa[i] > T(0) ? pg[i] : T(0);
                   });
                   gi[0] = gx;
               });
    return out;
}

Tensor sqrt(const Tensor& a) {
    Tensor out;
    dispatch(a.dtype(), [&]<typename T>(T) {
        out = unary_map<T>(a, [](T x) { return std::sqrt(x); });
    });
    Rec r{&a};
    if (r.active())
        r.done("sqrt", out,
               [y = out.detach()](const Tensor& g, const std::vector<bool>& need,
                                  std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(y.shape(), y.dtype());
                   dispatch(y.dtype(), [&]<typename T>(T) {
                       const T* py = y.data<T>();
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       const auto n = y.numel();
                       for (std::int64_t i = 0; i < n; ++i) {
                           const T d = py[i] > T(0) ? py[i] : T(1e-300);
                           po[i] = pg[i] / (T(2) * d);
                       }
                   });
                   gi[0] = gx;
               });
    return out;
}

Tensor clamp_min(const Tensor& a, double lo) {
    Tensor out;
    dispatch(a.dtype(), [&]<typename T>(T) {
        const T l = static_cast<T>(lo);
        out = unary_map<T>(a, [l](T x) { return x > l ? x : l; });
    });
    Rec r{&a};
    if (r.active())
        r.done("clamp_min", out,
               [a = a.detach(), lo](const Tensor& g, const std::vector<bool>& need,
                                    std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(a.shape(), a.dtype());
                   dispatch(a.dtype(), [&]<typename T>(T) {
                       const T* pa = a.data<T>();
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       const T l = static_cast<T>(lo);
                       const auto n = a.numel();
                       for (std::int64_t i = 0; i < n; ++i)
                           po[i] = pa[i] > l ? pg[i] : T(0);
                   });
                   gi[0] = gx;
               });
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
    check_same_dtype(x, b, "add_bias");
    if (b.rank() != 1 || x.rank() < 1 || x.dim(x.rank() - 1) != b.dim(0))
        throw ShapeError("add_bias: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::int64_t k = b.dim(0);
    const std::int64_t rows = x.numel() / k;
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>(T) {
        const T* px = x.data<T>();
        const T* pb = b.data<T>();
        T* po = out.mutable_data<T>();
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < k; ++j) po[r * k + j] = px[r * k + j] + pb[j];
    });
    Rec r{&x, &b};
    if (r.active())
        r.done("add_bias", out,
               [k, rows](const Tensor& g, const std::vector<bool>& need,
                         std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = g;
                   if (need[1]) {
                       Tensor gb = Tensor::zeros({k}, g.dtype());
                       dispatch(g.dtype(), [&]<typename T>(T) {
                           const T* pg = g.data<T>();
                           T* po = gb.mutable_data<T>();
                           for (std::int64_t r2 = 0; r2 < rows; ++r2)
                               for (std::int64_t j = 0; j < k; ++j) po[j] += pg[r2 * k + j];
                       });
                       gi[1] = gb;
                   }
               });
    return out;
}

Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s) {
    check_same_dtype(x, s, "mul_scalar_tensor");
    if (s.numel() != 1)
        throw ShapeError("mul_scalar_tensor: scale must be scalar, got " +
                         shape_str(s.shape()));
    const double sv = s.at(0);
    Tensor out;
    dispatch(x.dtype(), [&]<typename T>(T) {
        const T c = static_cast<T>(sv);
        out = unary_map<T>(x, [c](T v) { return v * c; });
    });
    Rec r{&x, &s};
    if (r.active())
        r.done("mul_scalar_tensor", out,
               [x = x.detach(), sv](const Tensor& g, const std::vector<bool>& need,
                                    std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = mul_scalar(g, sv);
                   if (need[1]) {
                       Tensor gs = Tensor::zeros({}, g.dtype());
                       dispatch(g.dtype(), [&]<typename T>(T) {
                           const T* pg = g.data<T>();
                           const T* px = x.data<T>();
                           T acc(0);
                           const auto n = x.numel();
                           for (std::int64_t i = 0; i < n; ++i) acc += pg[i] * px[i];
                           gs.mutable_data<T>()[0] = acc;
                       });
                       gi[1] = gs;
                   }
               });
    return out;
}

Tensor div_scalar_tensor(const Tensor& x, const Tensor& s) {
    check_same_dtype(x, s, "div_scalar_tensor");
    if (s.numel() != 1)
        throw ShapeError("div_scalar_tensor: divisor must be scalar, got " +
                         shape_str(s.shape()));
    const double sv = s.at(0);
    Tensor out;
    dispatch(x.dtype(), [&]<typename T>(T) {
        const T c = static_cast<T>(sv);
        out = unary_map<T>(x, [c](T v) { return v / c; });
    });
    Rec r{&x, &s};
    if (r.active())
        r.done("div_scalar_tensor", out,
               [x = x.detach(), sv](const Tensor& g, const std::vector<bool>& need,
                                    std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = mul_scalar(g, 1.0 / sv);
                   if (need[1]) {
                       Tensor gs = Tensor::zeros({}, g.dtype());
                       dispatch(g.dtype(), [&]<typename T>(T) {
                           const T* pg = g.data<T>();
                           const T* px = x.data<T>();
                           T acc(0);
                           const auto n = x.numel();
                           for (std::int64_t i = 0; i < n; ++i) acc += pg[i] * px[i];
                           const T c = static_cast<T>(sv);
                           gs.mutable_data<T>()[0] = -acc / (c * c);
                       });
                       gi[1] = gs;
                   }
               });
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "matmul");
    if (a.rank() < 2 || b.rank() != 2)
        throw ShapeError("matmul: need a[..., k] and b[k, n], got " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t k = a.dim(a.rank() - 1);
    if (k != b.dim(0))
        throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    const std::int64_t n = b.dim(1);
    const std::int64_t m = a.numel() / k;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    Tensor out = Tensor::zeros(out_shape, a.dtype());
    dispatch(a.dtype(), [&]<typename T>(T) {
        mm_acc<T>(a.data<T>(), b.data<T>(), out.mutable_data<T>(), m, k, n);
    });
    Rec r{&a, &b};
    if (r.active())
        r.done("matmul", out,
               [a = a.detach(), b = b.detach(), m, k, n](const Tensor& g,
                                                         const std::vector<bool>& need,
                                                         std::vector<Tensor>& gi) {
                   if (need[0]) {
                       Tensor ga = Tensor::zeros(a.shape(), a.dtype());
                       dispatch(a.dtype(), [&]<typename T>(T) {
                           mm_nt_acc<T>(g.data<T>(), b.data<T>(), ga.mutable_data<T>(), m,
                                        n, k);
                       });
                       gi[0] = ga;
                   }
                   if (need[1]) {
                       Tensor gb = Tensor::zeros(b.shape(), b.dtype());
                       dispatch(a.dtype(), [&]<typename T>(T) {
                           mm_tn_acc<T>(a.data<T>(), g.data<T>(), gb.mutable_data<T>(), m,
                                        k, n);
                       });
                       gi[1] = gb;
                   }
               });
    return out;
}

namespace {

Tensor bmm_impl(const Tensor& a, const Tensor& b, bool transpose_b, const char* name) {
    check_same_dtype(a, b, name);
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw ShapeError(std::string(name) + ": need 3-D operands with equal batch, got " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::int64_t bk = transpose_b ? b.dim(2) : b.dim(1);
    const std::int64_t n = transpose_b ? b.dim(1) : b.dim(2);
    if (bk != k)
        throw ShapeError(std::string(name) + ": inner extents disagree, " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out = Tensor::zeros({nb, m, n}, a.dtype());
    dispatch(a.dtype(), [&]<typename T>(T) {
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* po = out.mutable_data<T>();
        for (std::int64_t i = 0; i < nb; ++i) {
            if (transpose_b)
                mm_nt_acc<T>(pa + i * m * k, pb + i * n * k, po + i * m * n, m, k, n);
            else
                mm_acc<T>(pa + i * m * k, pb + i * k * n, po + i * m * n, m, k, n);
        }
    });
    return out;
}

}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b) {
    Tensor out = bmm_impl(a, b, false, "bmm");
    Rec r{&a, &b};
    if (r.active()) {
        const std::int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
        r.done("bmm", out,
               [a = a.detach(), b = b.detach(), nb, m, k, n](const Tensor& g,
                                                             const std::vector<bool>& need,
                                                             std::vector<Tensor>& gi) {
                   dispatch(a.dtype(), [&]<typename T>(T) {
                       const T* pa = a.data<T>();
                       const T* pb = b.data<T>();
                       const T* pg = g.data<T>();
                       if (need[0]) {
                           Tensor ga = Tensor::zeros(a.shape(), a.dtype());
                           T* po = ga.mutable_data<T>();
                           for (std::int64_t i = 0; i < nb; ++i)
                               mm_nt_acc<T>(pg + i * m * n, pb + i * k * n, po + i * m * k,
                                            m, n, k);
                           gi[0] = ga;
                       }
                       if (need[1]) {
                           Tensor gb = Tensor::zeros(b.shape(), b.dtype());
                           T* po = gb.mutable_data<T>();
                           for (std::int64_t i = 0; i < nb; ++i)
                               mm_tn_acc<T>(pa + i * m * k, pg + i * m * n, po + i * k * n,
                                            m, k, n);
                           gi[1] = gb;
                       }
                   });
               });
    }
    return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    Tensor out = bmm_impl(a, b, true, "bmm_nt");
    Rec r{&a, &b};
    if (r.active()) {
        const std::int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
        r.done("bmm_nt", out,
               [a = a.detach(), b = b.detach(), nb, m, k, n](const Tensor& g,
                                                             const std::vector<bool>& need,
                                                             std::vector<Tensor>& gi) {
                   dispatch(a.dtype(), [&]<typename T>(T) {
                       const T* pa = a.data<T>();
                       const T* pb = b.data<T>();
                       const T* pg = g.data<T>();
                       if (need[0]) {
                           // dA[m, k] = g[m, n] * b[n, k]
                           Tensor ga = Tensor::zeros(a.shape(), a.dtype());
                           T* po = ga.mutable_data<T>();
                           for (std::int64_t i = 0; i < nb; ++i)
                               mm_acc<T>(pg + i * m * n, pb + i * n * k, po + i * m * k, m,
                                         n, k);
                           gi[0] = ga;
                       }
                       if (need[1]) {
                           // dB[n, k] = g[m, n]^T * a[m, k]
                           Tensor gb = Tensor::zeros(b.shape(), b.dtype());
                           T* po = gb.mutable_data<T>();
                           for (std::int64_t i = 0; i < nb; ++i)
                               mm_tn_acc<T>(pg + i * m * n, pa + i * m * k, po + i * n * k,
                                            m, n, k);
                           gi[1] = gb;
                       }
                   });
               });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape new_shape) {
    Tensor out = a.detach().reshaped_view(std::move(new_shape));
    Rec r{&a};
    if (r.active())
        r.done("reshape", out,
               [in_shape = a.shape()](const Tensor& g, const std::vector<bool>& need,
                                      std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = g.reshaped_view(in_shape);
               });
    return out;
}

namespace {

std::vector<std::int64_t> strides_of(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

Tensor permute_values(const Tensor& a, const std::vector<int>& perm) {
    const auto& s = a.shape();
    Shape out_shape(s.size());
    for (std::size_t i = 0; i < perm.size(); ++i)
        out_shape[i] = s[static_cast<std::size_t>(perm[i])];
    Tensor out = Tensor::zeros(out_shape, a.dtype());
    const auto in_strides = strides_of(s);
    const auto n = a.numel();
    const int rank = a.rank();
    dispatch(a.dtype(), [&]<typename T>(T) {
        const T* pa = a.data<T>();
        T* po = out.mutable_data<T>();
        std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
        for (std::int64_t flat = 0; flat < n; ++flat) {
            std::int64_t src = 0;
            for (int d = 0; d < rank; ++d)
                src += idx[static_cast<std::size_t>(d)] *
                       in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])];
            po[flat] = pa[src];
            for (int d = rank - 1; d >= 0; --d) {
                if (++idx[static_cast<std::size_t>(d)] <
                    out_shape[static_cast<std::size_t>(d)])
                    break;
                idx[static_cast<std::size_t>(d)] = 0;
            }
        }
    });
    return out;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
    if (static_cast<int>(perm.size()) != a.rank())
        throw ShapeError("permute: rank mismatch for shape " + shape_str(a.shape()));
    std::vector<bool> seen(perm.size(), false);
    for (int p : perm) {
        if (p < 0 || p >= a.rank() || seen[static_cast<std::size_t>(p)])
            throw ShapeError("permute: invalid permutation for shape " +
                             shape_str(a.shape()));
        seen[static_cast<std::size_t>(p)] = true;
    }
    Tensor out = permute_values(a, perm);
    Rec r{&a};
    if (r.active()) {
        std::vector<int> inv(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i)
            inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
        r.done("permute", out,
               [inv](const Tensor& g, const std::vector<bool>& need,
                     std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = permute_values(g, inv);
               });
    }
    return out;
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2)
        throw ShapeError("transpose2d: need rank-2, got " + shape_str(a.shape()));
    return permute(a, {1, 0});
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no parts");
    const auto& first = parts.front();
    Shape out_shape = first.shape();
    auto sp = split_axis(first.shape(), axis, "concat");
    std::int64_t total_axis = 0;
    for (const auto& p : parts) {
        check_same_dtype(first, p, "concat");
        if (p.rank() != first.rank())
            throw ShapeError("concat: rank mismatch " + shape_str(first.shape()) +
                             " vs " + shape_str(p.shape()));
        for (int d = 0; d < p.rank(); ++d)
            if (d != axis && p.dim(d) != first.dim(d))
                throw ShapeError("concat: shape mismatch " + shape_str(first.shape()) +
                                 " vs " + shape_str(p.shape()));
        total_axis += p.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total_axis;
    Tensor out = Tensor::zeros(out_shape, first.dtype());
    dispatch(first.dtype(), [&]<typename T>(T) {
        T* po = out.mutable_data<T>();
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            std::int64_t dst = o * total_axis * sp.inner;
            for (const auto& p : parts) {
                const std::int64_t chunk = p.dim(axis) * sp.inner;
                const T* ps = p.data<T>() + o * chunk;
                std::memcpy(po + dst, ps, static_cast<std::size_t>(chunk) * sizeof(T));
                dst += chunk;
            }
        }
    });
    std::vector<const Tensor*> ins;
    ins.reserve(parts.size());
    for (const auto& p : parts) ins.push_back(&p);
    Rec r{ins};
    if (r.active()) {
        std::vector<std::int64_t> axis_sizes;
        axis_sizes.reserve(parts.size());
        for (const auto& p : parts) axis_sizes.push_back(p.dim(axis));
        r.done("concat", out,
               [axis, axis_sizes](const Tensor& g, const std::vector<bool>& need,
                                  std::vector<Tensor>& gi) {
                   std::int64_t start = 0;
                   for (std::size_t j = 0; j < axis_sizes.size(); ++j) {
                       if (need[j]) gi[j] = slice(g, axis, start, axis_sizes[j]);
                       start += axis_sizes[j];
                   }
               });
    }
    return out;
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
    auto sp = split_axis(a.shape(), axis, "slice");
    if (start < 0 || len < 0 || start + len > sp.axis)
        throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of bounds for shape " +
                         shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    Tensor out = Tensor::zeros(out_shape, a.dtype());
    dispatch(a.dtype(), [&]<typename T>(T) {
        const T* pa = a.data<T>();
        T* po = out.mutable_data<T>();
        for (std::int64_t o = 0; o < sp.outer; ++o)
            std::memcpy(po + o * len * sp.inner,
                        pa + (o * sp.axis + start) * sp.inner,
                        static_cast<std::size_t>(len * sp.inner) * sizeof(T));
    });
    Rec r{&a};
    if (r.active())
        r.done("slice", out,
               [in_shape = a.shape(), axis, start, len, sp](const Tensor& g,
                                                            const std::vector<bool>& need,
                                                            std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(in_shape, g.dtype());
                   dispatch(g.dtype(), [&]<typename T>(T) {
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       for (std::int64_t o = 0; o < sp.outer; ++o)
                           std::memcpy(po + (o * sp.axis + start) * sp.inner,
                                       pg + o * len * sp.inner,
                                       static_cast<std::size_t>(len * sp.inner) * sizeof(T));
                   });
                   gi[0] = gx;
               });
    return out;
}

Tensor tile_leading(const Tensor& a, std::int64_t n) {
    if (n < 1) throw ShapeError("tile_leading: n must be >= 1");
    Shape out_shape;
    out_shape.push_back(n);
    for (auto e : a.shape()) out_shape.push_back(e);
    Tensor out = Tensor::zeros(out_shape, a.dtype());
    const auto chunk = a.numel();
    dispatch(a.dtype(), [&]<typename T>(T) {
        const T* pa = a.data<T>();
        T* po = out.mutable_data<T>();
        for (std::int64_t i = 0; i < n; ++i)
            std::memcpy(po + i * chunk, pa, static_cast<std::size_t>(chunk) * sizeof(T));
    });
    Rec r{&a};
    if (r.active())
        r.done("tile_leading", out,
               [n, chunk, in_shape = a.shape()](const Tensor& g,
                                                const std::vector<bool>& need,
                                                std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(in_shape, g.dtype());
                   dispatch(g.dtype(), [&]<typename T>(T) {
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       for (std::int64_t i = 0; i < n; ++i)
                           for (std::int64_t j = 0; j < chunk; ++j) po[j] += pg[i * chunk + j];
                   });
                   gi[0] = gx;
               });
    return out;
}

// ---------------------------------------------------------------------------
// indexing
// ---------------------------------------------------------------------------

Tensor take_rows(const Tensor& x, const std::vector<std::int64_t>& rows) {
    if (x.rank() < 1) throw ShapeError("take_rows: need rank >= 1");
    const std::int64_t nrows = x.dim(0);
    const std::int64_t inner = x.numel() / std::max<std::int64_t>(nrows, 1);
    for (auto ri : rows)
        if (ri < 0 || ri >= nrows)
            throw InputError("take_rows: row " + std::to_string(ri) +
                             " out of range for shape " + shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[0] = static_cast<std::int64_t>(rows.size());
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    dispatch(x.dtype(), [&]<typename T>(T) {
        const T* px = x.data<T>();
        T* po = out.mutable_data<T>();
        for (std::size_t i = 0; i < rows.size(); ++i)
            std::memcpy(po + static_cast<std::int64_t>(i) * inner, px + rows[i] * inner,
                        static_cast<std::size_t>(inner) * sizeof(T));
    });
    Rec r{&x};
    if (r.active())
        r.done("take_rows", out,
               [rows, inner, in_shape = x.shape()](const Tensor& g,
                                                   const std::vector<bool>& need,
                                                   std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(in_shape, g.dtype());
                   dispatch(g.dtype(), [&]<typename T>(T) {
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                           const T* src = pg + static_cast<std::int64_t>(i) * inner;
                           T* dst = po + rows[i] * inner;
                           for (std::int64_t j = 0; j < inner; ++j) dst[j] += src[j];
                       }
                   });
                   gi[0] = gx;
               });
    return out;
}

Tensor take_flat(const Tensor& x, const std::vector<std::int64_t>& idx) {
    const auto n = x.numel();
    for (auto i : idx)
        if (i < 0 || i >= n)
            throw InputError("take_flat: index " + std::to_string(i) +
                             " out of range for " + std::to_string(n) + " elements");
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(idx.size())}, x.dtype());
    dispatch(x.dtype(), [&]<typename T>(T) {
        const T* px = x.data<T>();
        T* po = out.mutable_data<T>();
        for (std::size_t i = 0; i < idx.size(); ++i) po[i] = px[idx[i]];
    });
    Rec r{&x};
    if (r.active())
        r.done("take_flat", out,
               [idx, in_shape = x.shape()](const Tensor& g, const std::vector<bool>& need,
                                           std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(in_shape, g.dtype());
                   dispatch(g.dtype(), [&]<typename T>(T) {
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       for (std::size_t i = 0; i < idx.size(); ++i) po[idx[i]] += pg[i];
                   });
                   gi[0] = gx;
               });
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum_axis(const Tensor& a, int axis) {
    auto sp = split_axis(a.shape(), axis, "sum_axis");
    Shape out_shape;
    for (int d = 0; d < a.rank(); ++d)
        if (d != axis) out_shape.push_back(a.dim(d));
    Tensor out = Tensor::zeros(out_shape, a.dtype());
    dispatch(a.dtype(), [&]<typename T>(T) {
        const T* pa = a.data<T>();
        T* po = out.mutable_data<T>();
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t ax = 0; ax < sp.axis; ++ax)
                for (std::int64_t i = 0; i < sp.inner; ++i)
                    po[o * sp.inner + i] += pa[(o * sp.axis + ax) * sp.inner + i];
    });
    Rec r{&a};
    if (r.active())
        r.done("sum_axis", out,
               [sp, in_shape = a.shape()](const Tensor& g, const std::vector<bool>& need,
                                          std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(in_shape, g.dtype());
                   dispatch(g.dtype(), [&]<typename T>(T) {
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       for (std::int64_t o = 0; o < sp.outer; ++o)
                           for (std::int64_t ax = 0; ax < sp.axis; ++ax)
                               for (std::int64_t i = 0; i < sp.inner; ++i)
                                   po[(o * sp.axis + ax) * sp.inner + i] =
                                       pg[o * sp.inner + i];
                   });
                   gi[0] = gx;
               });
    return out;
}

Tensor mean_axis(const Tensor& a, int axis) {
    auto sp = split_axis(a.shape(), axis, "mean_axis");
    return mul_scalar(sum_axis(a, axis), 1.0 / static_cast<double>(sp.axis));
}

Tensor sum_all(const Tensor& a) {
    Tensor out = Tensor::zeros({}, a.dtype());
    dispatch(a.dtype(), [&]<typename T>(T) {
        const T* pa = a.data<T>();
        T acc(0);
        const auto n = a.numel();
        for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
        out.mutable_data<T>()[0] = acc;
    });
    Rec r{&a};
    if (r.active())
        r.done("sum_all", out,
               [in_shape = a.shape()](const Tensor& g, const std::vector<bool>& need,
                                      std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = Tensor::full(in_shape, g.at(0), g.dtype());
               });
    return out;
}

Tensor mean_all(const Tensor& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_all_sorted(const Tensor& a) {
    Tensor out = Tensor::zeros({}, a.dtype());
    dispatch(a.dtype(), [&]<typename T>(T) {
        const T* pa = a.data<T>();
        std::vector<T> vals(pa, pa + a.numel());
        std::sort(vals.begin(), vals.end());
        T acc(0);
        for (T v : vals) acc += v;
        out.mutable_data<T>()[0] = acc;
    });
    Rec r{&a};
    if (r.active())
        r.done("sum_all_sorted", out,
               [in_shape = a.shape()](const Tensor& g, const std::vector<bool>& need,
                                      std::vector<Tensor>& gi) {
                   if (need[0]) gi[0] = Tensor::full(in_shape, g.at(0), g.dtype());
               });
    return out;
}

Tensor median_all(const Tensor& a) {
    const auto n = a.numel();
    if (n == 0) throw InputError("median_all: empty input");
    std::vector<std::int64_t> sel;
    Tensor out = Tensor::zeros({}, a.dtype());
    dispatch(a.dtype(), [&]<typename T>(T) {
        const T* pa = a.data<T>();
        std::vector<std::pair<T, std::int64_t>> v(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = {pa[i], i};
        std::sort(v.begin(), v.end());
        if (n % 2 == 1) {
            const auto& mid = v[static_cast<std::size_t>(n / 2)];
            out.mutable_data<T>()[0] = mid.first;
            sel.push_back(mid.second);
        } else {
            const auto& lo = v[static_cast<std::size_t>(n / 2 - 1)];
            const auto& hi = v[static_cast<std::size_t>(n / 2)];
            out.mutable_data<T>()[0] = (lo.first + hi.first) * T(0.5);
            sel.push_back(lo.second);
            sel.push_back(hi.second);
        }
    });
    Rec r{&a};
    if (r.active())
        r.done("median_all", out,
               [sel, in_shape = a.shape()](const Tensor& g, const std::vector<bool>& need,
                                           std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(in_shape, g.dtype());
                   const double share = g.at(0) / static_cast<double>(sel.size());
                   for (auto i : sel) gx.set(i, gx.at(i) + share);
                   gi[0] = gx;
               });
    return out;
}

// ---------------------------------------------------------------------------
// softmax family / layer norm
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    auto sp = split_axis(a.shape(), axis, "softmax");
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&]<typename T>(T) {
        const T* pa = a.data<T>();
        T* po = out.mutable_data<T>();
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t i = 0; i < sp.inner; ++i) {
                const std::int64_t base = o * sp.axis * sp.inner + i;
                T mx = pa[base];
                for (std::int64_t ax = 1; ax < sp.axis; ++ax)
                    mx = std::max(mx, pa[base + ax * sp.inner]);
                T denom(0);
                for (std::int64_t ax = 0; ax < sp.axis; ++ax) {
                    const T e = std::exp(pa[base + ax * sp.inner] - mx);
                    po[base + ax * sp.inner] = e;
                    denom += e;
                }
                for (std::int64_t ax = 0; ax < sp.axis; ++ax)
                    po[base + ax * sp.inner] /= denom;
            }
    });
    Rec r{&a};
    if (r.active())
        r.done("softmax", out,
               [y = out.detach(), sp](const Tensor& g, const std::vector<bool>& need,
                                      std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(y.shape(), y.dtype());
                   dispatch(y.dtype(), [&]<typename T>(T) {
                       const T* py = y.data<T>();
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       for (std::int64_t o = 0; o < sp.outer; ++o)
                           for (std::int64_t i = 0; i < sp.inner; ++i) {
                               const std::int64_t base = o * sp.axis * sp.inner + i;
                               T dot(0);
                               for (std::int64_t ax = 0; ax < sp.axis; ++ax)
                                   dot += pg[base + ax * sp.inner] * py[base + ax * sp.inner];
                               for (std::int64_t ax = 0; ax < sp.axis; ++ax)
                                   po[base + ax * sp.inner] =
                                       py[base + ax * sp.inner] *
                                       (pg[base + ax * sp.inner] - dot);
                           }
                   });
                   gi[0] = gx;
               });
    return out;
}

Tensor log_softmax(const Tensor& a, int axis) {
    auto sp = split_axis(a.shape(), axis, "log_softmax");
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&]<typename T>(T) {
        const T* pa = a.data<T>();
        T* po = out.mutable_data<T>();
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t i = 0; i < sp.inner; ++i) {
                const std::int64_t base = o * sp.axis * sp.inner + i;
                T mx = pa[base];
                for (std::int64_t ax = 1; ax < sp.axis; ++ax)
                    mx = std::max(mx, pa[base + ax * sp.inner]);
                T denom(0);
                for (std::int64_t ax = 0; ax < sp.axis; ++ax)
                    denom += std::exp(pa[base + ax * sp.inner] - mx);
                const T lse = mx + std::log(denom);
                for (std::int64_t ax = 0; ax < sp.axis; ++ax)
                    po[base + ax * sp.inner] = pa[base + ax * sp.inner] - lse;
            }
    });
    Rec r{&a};
    if (r.active())
        r.done("log_softmax", out,
               [ls = out.detach(), sp](const Tensor& g, const std::vector<bool>& need,
                                       std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(ls.shape(), ls.dtype());
                   dispatch(ls.dtype(), [&]<typename T>(T) {
                       const T* pl = ls.data<T>();
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       for (std::int64_t o = 0; o < sp.outer; ++o)
                           for (std::int64_t i = 0; i < sp.inner; ++i) {
                               const std::int64_t base = o * sp.axis * sp.inner + i;
                               T gsum(0);
                               for (std::int64_t ax = 0; ax < sp.axis; ++ax)
                                   gsum += pg[base + ax * sp.inner];
                               for (std::int64_t ax = 0; ax < sp.axis; ++ax)
                                   po[base + ax * sp.inner] =
                                       pg[base + ax * sp.inner] -
                                       std::exp(pl[base + ax * sp.inner]) * gsum;
                           }
                   });
                   gi[0] = gx;
               });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    check_same_dtype(x, gamma, "layer_norm");
    check_same_dtype(x, beta, "layer_norm");
    const int last = x.rank() - 1;
    if (last < 0 || gamma.rank() != 1 || beta.rank() != 1 ||
        gamma.dim(0) != x.dim(last) || beta.dim(0) != x.dim(last))
        throw ShapeError("layer_norm: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(gamma.shape()) + " / " + shape_str(beta.shape()));
    const std::int64_t k = x.dim(last);
    const std::int64_t rows = x.numel() / k;
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    Tensor xhat = Tensor::zeros(x.shape(), x.dtype());
    Tensor istd = Tensor::zeros({rows}, x.dtype());
    dispatch(x.dtype(), [&]<typename T>(T) {
        const T* px = x.data<T>();
        const T* pgm = gamma.data<T>();
        const T* pbt = beta.data<T>();
        T* po = out.mutable_data<T>();
        T* ph = xhat.mutable_data<T>();
        T* pi = istd.mutable_data<T>();
        for (std::int64_t r2 = 0; r2 < rows; ++r2) {
            const T* row = px + r2 * k;
            T mean(0);
            for (std::int64_t j = 0; j < k; ++j) mean += row[j];
            mean /= static_cast<T>(k);
            T var(0);
            for (std::int64_t j = 0; j < k; ++j) {
                const T d = row[j] - mean;
                var += d * d;
            }
            var /= static_cast<T>(k);
            const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
            pi[r2] = is;
            for (std::int64_t j = 0; j < k; ++j) {
                const T h = (row[j] - mean) * is;
                ph[r2 * k + j] = h;
                po[r2 * k + j] = pgm[j] * h + pbt[j];
            }
        }
    });
    Rec r{&x, &gamma, &beta};
    if (r.active())
        r.done("layer_norm", out,
               [xhat = xhat.detach(), istd = istd.detach(), gamma = gamma.detach(), k,
                rows](const Tensor& g, const std::vector<bool>& need,
                      std::vector<Tensor>& gi) {
                   dispatch(g.dtype(), [&]<typename T>(T) {
                       const T* pg = g.data<T>();
                       const T* ph = xhat.data<T>();
                       const T* pi = istd.data<T>();
                       const T* pgm = gamma.data<T>();
                       if (need[0]) {
                           Tensor gx = Tensor::zeros(g.shape(), g.dtype());
                           T* po = gx.mutable_data<T>();
                           for (std::int64_t r2 = 0; r2 < rows; ++r2) {
                               T m1(0), m2(0);
                               for (std::int64_t j = 0; j < k; ++j) {
                                   const T dh = pg[r2 * k + j] * pgm[j];
                                   m1 += dh;
                                   m2 += dh * ph[r2 * k + j];
                               }
                               m1 /= static_cast<T>(k);
                               m2 /= static_cast<T>(k);
                               for (std::int64_t j = 0; j < k; ++j) {
                                   const T dh = pg[r2 * k + j] * pgm[j];
                                   po[r2 * k + j] =
                                       pi[r2] * (dh - m1 - ph[r2 * k + j] * m2);
                               }
                           }
                           gi[0] = gx;
                       }
                       if (need[1]) {
                           Tensor gg = Tensor::zeros({k}, g.dtype());
                           T* po = gg.mutable_data<T>();
                           for (std::int64_t r2 = 0; r2 < rows; ++r2)
                               for (std::int64_t j = 0; j < k; ++j)
                                   po[j] += pg[r2 * k + j] * ph[r2 * k + j];
                           gi[1] = gg;
                       }
                       if (need[2]) {
                           Tensor gb = Tensor::zeros({k}, g.dtype());
                           T* po = gb.mutable_data<T>();
                           for (std::int64_t r2 = 0; r2 < rows; ++r2)
                               for (std::int64_t j = 0; j < k; ++j) po[j] += pg[r2 * k + j];
                           gi[2] = gb;
                       }
                   });
               });
    return out;
}

// ---------------------------------------------------------------------------
// geometry
// ---------------------------------------------------------------------------

Tensor l2norm_rows(const Tensor& x, double eps) {
    if (x.rank() != 2) throw ShapeError("l2norm_rows: need [R, F], got " + shape_str(x.shape()));
    const std::int64_t rows = x.dim(0), k = x.dim(1);
    Tensor out = Tensor::zeros({rows}, x.dtype());
    dispatch(x.dtype(), [&]<typename T>(T) {
        const T* px = x.data<T>();
        T* po = out.mutable_data<T>();
        for (std::int64_t r2 = 0; r2 < rows; ++r2) {
            T acc(0);
            for (std::int64_t j = 0; j < k; ++j) acc += px[r2 * k + j] * px[r2 * k + j];
            po[r2] = std::sqrt(acc);
        }
    });
    Rec r{&x};
    if (r.active())
        r.done("l2norm_rows", out,
               [x = x.detach(), y = out.detach(), eps, rows, k](
                   const Tensor& g, const std::vector<bool>& need, std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(x.shape(), x.dtype());
                   dispatch(x.dtype(), [&]<typename T>(T) {
                       const T* px = x.data<T>();
                       const T* py = y.data<T>();
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       for (std::int64_t r2 = 0; r2 < rows; ++r2) {
                           const T denom = std::max(py[r2], static_cast<T>(eps));
                           const T s = pg[r2] / denom;
                           for (std::int64_t j = 0; j < k; ++j)
                               po[r2 * k + j] = s * px[r2 * k + j];
                       }
                   });
                   gi[0] = gx;
               });
    return out;
}

Tensor pairwise_sqdist(const Tensor& x, const Tensor& y) {
    check_same_dtype(x, y, "pairwise_sqdist");
    if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1))
        throw ShapeError("pairwise_sqdist: need [n, F] and [m, F], got " +
                         shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    const std::int64_t n = x.dim(0), m = y.dim(0), k = x.dim(1);
    Tensor out = Tensor::zeros({n, m}, x.dtype());
    dispatch(x.dtype(), [&]<typename T>(T) {
        const T* px = x.data<T>();
        const T* py = y.data<T>();
        T* po = out.mutable_data<T>();
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < m; ++j) {
                T acc(0);
                for (std::int64_t f = 0; f < k; ++f) {
                    const T d = px[i * k + f] - py[j * k + f];
                    acc += d * d;
                }
                po[i * m + j] = acc;
            }
    });
    Rec r{&x, &y};
    if (r.active())
        r.done("pairwise_sqdist", out,
               [x = x.detach(), y = y.detach(), n, m, k](const Tensor& g,
                                                         const std::vector<bool>& need,
                                                         std::vector<Tensor>& gi) {
                   dispatch(x.dtype(), [&]<typename T>(T) {
                       const T* px = x.data<T>();
                       const T* py = y.data<T>();
                       const T* pg = g.data<T>();
                       if (need[0]) {
                           Tensor gx = Tensor::zeros(x.shape(), x.dtype());
                           T* po = gx.mutable_data<T>();
                           for (std::int64_t i = 0; i < n; ++i)
                               for (std::int64_t j = 0; j < m; ++j) {
                                   const T gv = T(2) * pg[i * m + j];
                                   for (std::int64_t f = 0; f < k; ++f)
                                       po[i * k + f] +=
                                           gv * (px[i * k + f] - py[j * k + f]);
                               }
                           gi[0] = gx;
                       }
                       if (need[1]) {
                           Tensor gy = Tensor::zeros(y.shape(), y.dtype());
                           T* po = gy.mutable_data<T>();
                           for (std::int64_t i = 0; i < n; ++i)
                               for (std::int64_t j = 0; j < m; ++j) {
                                   const T gv = T(2) * pg[i * m + j];
                                   for (std::int64_t f = 0; f < k; ++f)
                                       po[j * k + f] -=
                                           gv * (px[i * k + f] - py[j * k + f]);
                               }
                           gi[1] = gy;
                       }
                   });
               });
    return out;
}

// ---------------------------------------------------------------------------
// conv / pooling / batch norm
// ---------------------------------------------------------------------------

std::int64_t conv2d_out_extent(std::int64_t in, std::int64_t kernel, int stride, int pad) {
    const std::int64_t span = in + 2 * pad - kernel;
    if (span < 0 || stride < 1)
        throw ConfigError("conv2d: kernel " + std::to_string(kernel) + " stride " +
                          std::to_string(stride) + " pad " + std::to_string(pad) +
                          " does not fit input extent " + std::to_string(in));
    return span / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    check_same_dtype(x, w, "conv2d");
    check_same_dtype(x, bias, "conv2d");
    if (x.rank() != 4 || w.rank() != 4 || bias.rank() != 1)
        throw ShapeError("conv2d: need x[B,Ci,H,W], w[Co,Ci,kh,kw], bias[Co], got " +
                         shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                         shape_str(bias.shape()));
    const std::int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != Ci || bias.dim(0) != Co)
        throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(w.shape()));
    const std::int64_t Ho = conv2d_out_extent(H, kh, stride, pad);
    const std::int64_t Wo = conv2d_out_extent(W, kw, stride, pad);
    Tensor out = Tensor::zeros({B, Co, Ho, Wo}, x.dtype());
    dispatch(x.dtype(), [&]<typename T>(T) {
        const T* px = x.data<T>();
        const T* pw = w.data<T>();
        const T* pb = bias.data<T>();
        T* po = out.mutable_data<T>();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t co = 0; co < Co; ++co)
                for (std::int64_t ho = 0; ho < Ho; ++ho)
                    for (std::int64_t wo = 0; wo < Wo; ++wo) {
                        T acc = pb[co];
                        for (std::int64_t ci = 0; ci < Ci; ++ci)
                            for (std::int64_t u = 0; u < kh; ++u) {
                                const std::int64_t ih = ho * stride - pad + u;
                                if (ih < 0 || ih >= H) continue;
                                for (std::int64_t v = 0; v < kw; ++v) {
                                    const std::int64_t iw = wo * stride - pad + v;
                                    if (iw < 0 || iw >= W) continue;
                                    acc += px[((b * Ci + ci) * H + ih) * W + iw] *
                                           pw[((co * Ci + ci) * kh + u) * kw + v];
                                }
                            }
                        po[((b * Co + co) * Ho + ho) * Wo + wo] = acc;
                    }
    });
    Rec r{&x, &w, &bias};
    if (r.active())
        r.done("conv2d", out,
               [x = x.detach(), w = w.detach(), stride, pad, B, Ci, H, W, Co, kh, kw, Ho,
                Wo](const Tensor& g, const std::vector<bool>& need,
                    std::vector<Tensor>& gi) {
                   dispatch(x.dtype(), [&]<typename T>(T) {
                       const T* px = x.data<T>();
                       const T* pw = w.data<T>();
                       const T* pg = g.data<T>();
                       Tensor gx, gw, gb;
                       T* pgx = nullptr;
                       T* pgw = nullptr;
                       if (need[0]) {
                           gx = Tensor::zeros(x.shape(), x.dtype());
                           pgx = gx.mutable_data<T>();
                       }
                       if (need[1]) {
                           gw = Tensor::zeros(w.shape(), w.dtype());
                           pgw = gw.mutable_data<T>();
                       }
                       if (need[0] || need[1]) {
                           for (std::int64_t b = 0; b < B; ++b)
                               for (std::int64_t co = 0; co < Co; ++co)
                                   for (std::int64_t ho = 0; ho < Ho; ++ho)
                                       for (std::int64_t wo = 0; wo < Wo; ++wo) {
                                           const T gv =
                                               pg[((b * Co + co) * Ho + ho) * Wo + wo];
                                           for (std::int64_t ci = 0; ci < Ci; ++ci)
                                               for (std::int64_t u = 0; u < kh; ++u) {
                                                   const std::int64_t ih =
                                                       ho * stride - pad + u;
                                                   if (ih < 0 || ih >= H) continue;
                                                   for (std::int64_t v = 0; v < kw; ++v) {
                                                       const std::int64_t iw =
                                                           wo * stride - pad + v;
                                                       if (iw < 0 || iw >= W) continue;
                                                       const std::int64_t xi =
                                                           ((b * Ci + ci) * H + ih) * W + iw;
                                                       const std::int64_t wi =
                                                           ((co * Ci + ci) * kh + u) * kw + v;
                                                       if (pgx) pgx[xi] += gv * pw[wi];
                                                       if (pgw) pgw[wi] += gv * px[xi];
                                                   }
                                               }
                                       }
                       }
                       if (need[2]) {
                           gb = Tensor::zeros({Co}, x.dtype());
                           T* pgb = gb.mutable_data<T>();
                           for (std::int64_t b = 0; b < B; ++b)
                               for (std::int64_t co = 0; co < Co; ++co)
                                   for (std::int64_t s = 0; s < Ho * Wo; ++s)
                                       pgb[co] += pg[(b * Co + co) * Ho * Wo + s];
                           gi[2] = gb;
                       }
                       if (need[0]) gi[0] = gx;
                       if (need[1]) gi[1] = gw;
                   });
               });
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4)
        throw ShapeError("global_avg_pool: need [B,C,H,W], got " + shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros({B, C}, x.dtype());
    dispatch(x.dtype(), [&]<typename T>(T) {
        const T* px = x.data<T>();
        T* po = out.mutable_data<T>();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
                T acc(0);
                for (std::int64_t s = 0; s < HW; ++s) acc += px[(b * C + c) * HW + s];
                po[b * C + c] = acc / static_cast<T>(HW);
            }
    });
    Rec r{&x};
    if (r.active())
        r.done("global_avg_pool", out,
               [in_shape = x.shape(), B, C, HW](const Tensor& g,
                                                const std::vector<bool>& need,
                                                std::vector<Tensor>& gi) {
                   if (!need[0]) return;
                   Tensor gx = Tensor::zeros(in_shape, g.dtype());
                   dispatch(g.dtype(), [&]<typename T>(T) {
                       const T* pg = g.data<T>();
                       T* po = gx.mutable_data<T>();
                       for (std::int64_t b = 0; b < B; ++b)
                           for (std::int64_t c = 0; c < C; ++c) {
                               const T v = pg[b * C + c] / static_cast<T>(HW);
                               for (std::int64_t s = 0; s < HW; ++s)
                                   po[(b * C + c) * HW + s] = v;
                           }
                   });
                   gi[0] = gx;
               });
    return out;
}

BatchNormResult batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                             const Tensor& running_mean, const Tensor& running_var,
                             bool training, double momentum, double eps) {
    check_same_dtype(x, gamma, "batch_norm2d");
    if (x.rank() != 4)
        throw ShapeError("batch_norm2d: need [B,C,H,W], got " + shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gamma.dim(0) != C || beta.dim(0) != C || running_mean.dim(0) != C ||
        running_var.dim(0) != C)
        throw ShapeError("batch_norm2d: channel mismatch " + shape_str(x.shape()) +
                         " vs " + shape_str(gamma.shape()));
    const std::int64_t N = B * HW;

    BatchNormResult res;
    Tensor xhat = Tensor::zeros(x.shape(), x.dtype());
    Tensor istd = Tensor::zeros({C}, x.dtype());
    res.y = Tensor::zeros(x.shape(), x.dtype());

    dispatch(x.dtype(), [&]<typename T>(T) {
        const T* px = x.data<T>();
        const T* pgm = gamma.data<T>();
        const T* pbt = beta.data<T>();
        T* py = res.y.mutable_data<T>();
        T* ph = xhat.mutable_data<T>();
        T* pi = istd.mutable_data<T>();
        std::vector<T> mean(static_cast<std::size_t>(C), T(0));
        std::vector<T> var(static_cast<std::size_t>(C), T(0));
        if (training) {
            for (std::int64_t c = 0; c < C; ++c) {
                T acc(0);
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t s = 0; s < HW; ++s) acc += px[(b * C + c) * HW + s];
                mean[static_cast<std::size_t>(c)] = acc / static_cast<T>(N);
            }
            for (std::int64_t c = 0; c < C; ++c) {
                T acc(0);
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t s = 0; s < HW; ++s) {
                        const T d =
                            px[(b * C + c) * HW + s] - mean[static_cast<std::size_t>(c)];
                        acc += d * d;
                    }
                var[static_cast<std::size_t>(c)] = acc / static_cast<T>(N);
            }
            res.new_running_mean = Tensor::zeros({C}, x.dtype());
            res.new_running_var = Tensor::zeros({C}, x.dtype());
            T* prm = res.new_running_mean.mutable_data<T>();
            T* prv = res.new_running_var.mutable_data<T>();
            const T* orm = running_mean.data<T>();
            const T* orv = running_var.data<T>();
            const T mom = static_cast<T>(momentum);
            const T unbias =
                N > 1 ? static_cast<T>(N) / static_cast<T>(N - 1) : T(1);
            for (std::int64_t c = 0; c < C; ++c) {
                prm[c] = (T(1) - mom) * orm[c] + mom * mean[static_cast<std::size_t>(c)];
                prv[c] = (T(1) - mom) * orv[c] +
                         mom * var[static_cast<std::size_t>(c)] * unbias;
            }
        } else {
            const T* orm = running_mean.data<T>();
            const T* orv = running_var.data<T>();
            for (std::int64_t c = 0; c < C; ++c) {
                mean[static_cast<std::size_t>(c)] = orm[c];
                var[static_cast<std::size_t>(c)] = orv[c];
            }
        }
        for (std::int64_t c = 0; c < C; ++c)
            pi[c] = T(1) / std::sqrt(var[static_cast<std::size_t>(c)] + static_cast<T>(eps));
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t s = 0; s < HW; ++s) {
                    const std::int64_t i = (b * C + c) * HW + s;
                    const T h = (px[i] - mean[static_cast<std::size_t>(c)]) * pi[c];
                    ph[i] = h;
                    py[i] = pgm[c] * h + pbt[c];
                }
    });

    Rec r{&x, &gamma, &beta};
    if (r.active())
        r.done("batch_norm2d", res.y,
               [xhat = xhat.detach(), istd = istd.detach(), gamma = gamma.detach(),
                training, B, C, HW, N](const Tensor& g, const std::vector<bool>& need,
                                       std::vector<Tensor>& gi) {
                   dispatch(g.dtype(), [&]<typename T>(T) {
                       const T* pg = g.data<T>();
                       const T* ph = xhat.data<T>();
                       const T* pi = istd.data<T>();
                       const T* pgm = gamma.data<T>();
                       std::vector<T> sum_g(static_cast<std::size_t>(C), T(0));
                       std::vector<T> sum_gh(static_cast<std::size_t>(C), T(0));
                       for (std::int64_t b = 0; b < B; ++b)
                           for (std::int64_t c = 0; c < C; ++c)
                               for (std::int64_t s = 0; s < HW; ++s) {
                                   const std::int64_t i = (b * C + c) * HW + s;
                                   sum_g[static_cast<std::size_t>(c)] += pg[i];
                                   sum_gh[static_cast<std::size_t>(c)] += pg[i] * ph[i];
                               }
                       if (need[0]) {
                           Tensor gx = Tensor::zeros(g.shape(), g.dtype());
                           T* po = gx.mutable_data<T>();
                           for (std::int64_t b = 0; b < B; ++b)
                               for (std::int64_t c = 0; c < C; ++c) {
                                   const T gm = pgm[c];
                                   const T is = pi[c];
                                   for (std::int64_t s = 0; s < HW; ++s) {
                                       const std::int64_t i = (b * C + c) * HW + s;
                                       if (training) {
                                           po[i] = gm * is *
                                                   (pg[i] -
                                                    sum_g[static_cast<std::size_t>(c)] /
                                                        static_cast<T>(N) -
                                                    ph[i] *
                                                        sum_gh[static_cast<std::size_t>(c)] /
                                                        static_cast<T>(N));
                                       } else {
                                           po[i] = gm * is * pg[i];
                                       }
                                   }
                               }
                           gi[0] = gx;
                       }
                       if (need[1]) {
                           Tensor gg = Tensor::zeros({C}, g.dtype());
                           T* po = gg.mutable_data<T>();
                           for (std::int64_t c = 0; c < C; ++c)
                               po[c] = sum_gh[static_cast<std::size_t>(c)];
                           gi[1] = gg;
                       }
                       if (need[2]) {
                           Tensor gb = Tensor::zeros({C}, g.dtype());
                           T* po = gb.mutable_data<T>();
                           for (std::int64_t c = 0; c < C; ++c)
                               po[c] = sum_g[static_cast<std::size_t>(c)];
                           gi[2] = gb;
                       }
                   });
               });
    return res;
}

std::vector<std::int64_t> argmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("argmax_rows: need [R, C], got " + shape_str(x.shape()));
    const std::int64_t rows = x.dim(0), cols = x.dim(1);
    std::vector<std::int64_t> out(static_cast<std::size_t>(rows), 0);
    for (std::int64_t r = 0; r < rows; ++r) {
        double best = x.at(r * cols);
        std::int64_t arg = 0;
        for (std::int64_t c = 1; c < cols; ++c) {
            const double v = x.at(r * cols + c);
            if (v > best) {
                best = v;
                arg = c;
            }
        }
        out[static_cast<std::size_t>(r)] = arg;
    }
    return out;
}

}  // namespace cadtrans::ops
