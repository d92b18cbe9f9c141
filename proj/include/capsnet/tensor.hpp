#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <cblas.h>

namespace capsnet {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

template <class S>
struct TensorData {
    Shape shape;
    std::vector<S> values;
    std::vector<S> grad;  // sized iff requires_grad
    bool requires_grad = false;
};

// Shared handle to a dense n-d array. Copies are shallow; ops return fresh
// tensors.
template <class S>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }

    static Tensor filled(Shape shape, S value, bool requires_grad = false) {
        Tensor t;
        t.d_ = std::make_shared<TensorData<S>>();
        t.d_->shape = std::move(shape);
        t.d_->values.assign(static_cast<size_t>(shape_numel(t.d_->shape)), value);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false) {
        if (static_cast<int64_t>(values.size()) != shape_numel(shape))
            throw std::runtime_error("tensor: " + std::to_string(values.size()) +
                                     " values do not fill shape " + shape_str(shape));
        Tensor t;
        t.d_ = std::make_shared<TensorData<S>>();
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor scalar(S v) { return from({}, {v}); }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    int ndim() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(d_->values.size()); }

    std::vector<S>& values() { return d_->values; }
    const std::vector<S>& values() const { return d_->values; }
    S* data() { return d_->values.data(); }
    const S* data() const { return d_->values.data(); }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        if (rg)
            d_->grad.assign(d_->values.size(), S(0));
        else
            d_->grad.clear();
    }

    std::vector<S>& grad() {
        if (!d_->requires_grad) throw std::runtime_error("tensor: grad on non-grad tensor");
        return d_->grad;
    }
    const std::vector<S>& grad() const {
        if (!d_->requires_grad) throw std::runtime_error("tensor: grad on non-grad tensor");
        return d_->grad;
    }

    void zero_grad() {
        if (d_->requires_grad) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
    }

    S item() const {
        if (size() != 1) throw std::runtime_error("tensor: item() on non-scalar " + shape_str(shape()));
        return d_->values[0];
    }

    bool same_storage(const Tensor& o) const { return d_ == o.d_; }

private:
    std::shared_ptr<TensorData<S>> d_;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

template <class S>
inline bool all_finite(const std::vector<S>& v) {
    for (S x : v)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

// ---- broadcasting helpers ----

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t n = std::max(a.size(), b.size());
    Shape out(n);
    for (size_t i = 0; i < n; ++i) {
        int da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        int db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::runtime_error("broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// strides of `in` viewed as shape `out` (0 where broadcast)
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    auto st = row_major_strides(in);
    std::vector<int64_t> r(out.size(), 0);
    size_t off = out.size() - in.size();
    for (size_t i = 0; i < in.size(); ++i) r[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : st[i];
    return r;
}

// Visit every output element of a broadcast binary op.
// f(out_index, a_index, b_index)
template <class F>
inline void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
    int64_t n = shape_numel(out);
    if (n == 0) return;
    if (sa == out && sb == out) {
        for (int64_t i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    auto stA = broadcast_strides(sa, out);
    auto stB = broadcast_strides(sb, out);
    size_t nd = out.size();
    std::vector<int64_t> idx(nd, 0);
    int64_t offA = 0, offB = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, offA, offB);
        for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
            idx[d]++;
            offA += stA[d];
            offB += stB[d];
            if (idx[d] < out[d]) break;
            offA -= stA[d] * out[d];
            offB -= stB[d] * out[d];
            idx[d] = 0;
        }
    }
}

// ---- BLAS dispatch ----

template <class S>
struct Gemm;

template <>
struct Gemm<float> {
    // C[m,n] (+)= A[m,k] * B[k,n], optional transposes
    static void run(bool transA, bool transB, int m, int n, int k, float alpha, const float* A,
                    const float* B, float beta, float* C) {
        cblas_sgemm(CblasRowMajor, transA ? CblasTrans : CblasNoTrans, transB ? CblasTrans : CblasNoTrans,
                    m, n, k, alpha, A, transA ? m : k, B, transB ? k : n, beta, C, n);
    }
};

template <>
struct Gemm<double> {
    static void run(bool transA, bool transB, int m, int n, int k, double alpha, const double* A,
                    const double* B, double beta, double* C) {
        cblas_dgemm(CblasRowMajor, transA ? CblasTrans : CblasNoTrans, transB ? CblasTrans : CblasNoTrans,
                    m, n, k, alpha, A, transA ? m : k, B, transB ? k : n, beta, C, n);
    }
};

// ---- computation tape ----

// Records executed primitives in order; backward replays in exact reverse
// order, accumulating (never overwriting) into input grads.
template <class S>
class Tape {
public:
    bool recording = true;
    bool check_finite = false;

    size_t node_count() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    void backward(Tensor<S> loss) {
        require(loss.size() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
        require(loss.requires_grad(), "backward: loss does not require grad");
        loss.grad()[0] = S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    }

    // ---- elementwise binary (broadcasting) ----

    Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
        return binary(a, b, "add", [](S x, S y) { return x + y; },
                      [](S, S, S) { return S(1); }, [](S, S, S) { return S(1); });
    }

    Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
        return binary(a, b, "sub", [](S x, S y) { return x - y; },
                      [](S, S, S) { return S(1); }, [](S, S, S) { return S(-1); });
    }

    Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
        return binary(a, b, "mul", [](S x, S y) { return x * y; },
                      [](S, S y, S) { return y; }, [](S x, S, S) { return x; });
    }

    Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
        return binary(a, b, "div", [](S x, S y) { return x / y; },
                      [](S, S y, S) { return S(1) / y; },
                      [](S x, S y, S) { return -x / (y * y); });
    }

    // ---- elementwise unary ----

    Tensor<S> scale(const Tensor<S>& a, S c) {
        return unary(a, "scale", [c](S x) { return c * x; }, [c](S, S) { return c; });
    }

    Tensor<S> add_scalar(const Tensor<S>& a, S c) {
        return unary(a, "add_scalar", [c](S x) { return x + c; }, [](S, S) { return S(1); });
    }

    Tensor<S> relu(const Tensor<S>& a) {
        return unary(a, "relu", [](S x) { return x > S(0) ? x : S(0); },
                     [](S x, S) { return x > S(0) ? S(1) : S(0); });
    }

    Tensor<S> sigmoid(const Tensor<S>& a) {
        return unary(a, "sigmoid", [](S x) { return S(1) / (S(1) + std::exp(-x)); },
                     [](S, S y) { return y * (S(1) - y); });
    }

    Tensor<S> sqrt(const Tensor<S>& a) {
        return unary(a, "sqrt", [](S x) { return std::sqrt(x); },
                     [](S, S y) { return S(0.5) / y; });
    }

    Tensor<S> stop_gradient(const Tensor<S>& a) {
        return Tensor<S>::from(a.shape(), a.values(), false);
    }

    // ---- shape ops ----

    Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
        // one -1 entry is inferred
        int64_t known = 1;
        int infer = -1;
        for (size_t i = 0; i < shape.size(); ++i) {
            if (shape[i] == -1) {
                require(infer < 0, "reshape: more than one -1 in " + shape_str(shape));
                infer = static_cast<int>(i);
            } else {
                known *= shape[i];
            }
        }
        if (infer >= 0) shape[static_cast<size_t>(infer)] = static_cast<int>(a.size() / known);
        require(shape_numel(shape) == a.size(),
                "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
        Tensor<S> out = Tensor<S>::from(std::move(shape), a.values(), track(a));
        if (out.requires_grad() && recording) {
            Tensor<S> ain = a, o = out;
            record("reshape", [ain, o]() mutable {
                auto& ga = ain.grad();
                const auto& go = o.grad();
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
            });
        }
        finite_check(out, "reshape");
        return out;
    }

    Tensor<S> transpose(const Tensor<S>& a, const std::vector<int>& perm) {
        require(perm.size() == a.shape().size(), "transpose: perm rank mismatch");
        Shape out_shape(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(perm[i]);
        auto in_st = row_major_strides(a.shape());
        std::vector<int64_t> gather_st(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) gather_st[i] = in_st[static_cast<size_t>(perm[i])];
        Tensor<S> out = Tensor<S>::zeros(out_shape, track(a));
        permuted_copy(a.values(), out.values(), out_shape, gather_st);
        if (out.requires_grad() && recording) {
            Tensor<S> ain = a, o = out;
            record("transpose", [ain, o, out_shape, gather_st]() mutable {
                const auto& go = o.grad();
                auto& ga = ain.grad();
                size_t nd = out_shape.size();
                std::vector<int64_t> idx(nd, 0);
                int64_t off = 0;
                for (int64_t i = 0; i < static_cast<int64_t>(go.size()); ++i) {
                    ga[static_cast<size_t>(off)] += go[static_cast<size_t>(i)];
                    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
                        idx[d]++;
                        off += gather_st[d];
                        if (idx[d] < out_shape[d]) break;
                        off -= gather_st[d] * out_shape[d];
                        idx[d] = 0;
                    }
                }
            });
        }
        finite_check(out, "transpose");
        return out;
    }

    // ---- reductions ----

    Tensor<S> reduce_sum(const Tensor<S>& a, std::vector<int> axes, bool keepdims = false) {
        return reduce(a, std::move(axes), keepdims, /*is_max=*/false);
    }

    Tensor<S> reduce_max(const Tensor<S>& a, std::vector<int> axes, bool keepdims = false) {
        return reduce(a, std::move(axes), keepdims, /*is_max=*/true);
    }

    Tensor<S> reduce_sum_all(const Tensor<S>& a) {
        std::vector<int> axes(a.shape().size());
        std::iota(axes.begin(), axes.end(), 0);
        return reduce_sum(a, axes, false);
    }

    // ---- softmax over one axis (stabilized) ----

    Tensor<S> softmax(const Tensor<S>& a, int axis) {
        require(axis >= 0 && axis < a.ndim(), "softmax: axis " + std::to_string(axis) +
                                                  " invalid for " + shape_str(a.shape()));
        const Shape& sh = a.shape();
        int64_t axis_n = sh[static_cast<size_t>(axis)];
        int64_t inner = 1, outer = 1;
        for (int i = axis + 1; i < a.ndim(); ++i) inner *= sh[static_cast<size_t>(i)];
        for (int i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];
        Tensor<S> out = Tensor<S>::zeros(sh, track(a));
        const auto& x = a.values();
        auto& y = out.values();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                int64_t base = o * axis_n * inner + in;
                S mx = x[static_cast<size_t>(base)];
                for (int64_t j = 1; j < axis_n; ++j) mx = std::max(mx, x[static_cast<size_t>(base + j * inner)]);
                S sum = S(0);
                for (int64_t j = 0; j < axis_n; ++j) {
                    S e = std::exp(x[static_cast<size_t>(base + j * inner)] - mx);
                    y[static_cast<size_t>(base + j * inner)] = e;
                    sum += e;
                }
                for (int64_t j = 0; j < axis_n; ++j) y[static_cast<size_t>(base + j * inner)] /= sum;
            }
        if (out.requires_grad() && recording) {
            Tensor<S> ain = a, o = out;
            record("softmax", [ain, o, outer, inner, axis_n]() mutable {
                const auto& y2 = o.values();
                const auto& gy = o.grad();
                auto& gx = ain.grad();
                for (int64_t ou = 0; ou < outer; ++ou)
                    for (int64_t in = 0; in < inner; ++in) {
                        int64_t base = ou * axis_n * inner + in;
                        S dot = S(0);
                        for (int64_t j = 0; j < axis_n; ++j) {
                            size_t p = static_cast<size_t>(base + j * inner);
                            dot += gy[p] * y2[p];
                        }
                        for (int64_t j = 0; j < axis_n; ++j) {
                            size_t p = static_cast<size_t>(base + j * inner);
                            gx[p] += (gy[p] - dot) * y2[p];
                        }
                    }
            });
        }
        finite_check(out, "softmax");
        return out;
    }

    // ---- batched matmul with broadcast leading dims ----
    // a: [..., m, k], b: [..., k, n] -> [..., m, n]

    Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
        require(a.ndim() >= 2 && b.ndim() >= 2, "matmul: operands must have rank >= 2");
        int m = a.dim(a.ndim() - 2), ka = a.dim(a.ndim() - 1);
        int kb = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
        require(ka == kb, "matmul: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
        Shape leadA(a.shape().begin(), a.shape().end() - 2);
        Shape leadB(b.shape().begin(), b.shape().end() - 2);
        Shape lead = broadcast_shape(leadA, leadB);
        Shape out_shape = lead;
        out_shape.push_back(m);
        out_shape.push_back(n);
        Tensor<S> out = Tensor<S>::zeros(out_shape, track(a, b));

        auto stA = broadcast_strides(leadA, lead);
        auto stB = broadcast_strides(leadB, lead);
        int64_t blocks = shape_numel(lead);
        int64_t szA = static_cast<int64_t>(m) * ka, szB = static_cast<int64_t>(ka) * n,
                szO = static_cast<int64_t>(m) * n;

        auto for_each_block = [lead, stA, stB](int64_t nblocks, auto&& f) {
            size_t nd = lead.size();
            std::vector<int64_t> idx(nd, 0);
            int64_t offA = 0, offB = 0;
            for (int64_t i = 0; i < nblocks; ++i) {
                f(i, offA, offB);
                for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
                    idx[static_cast<size_t>(d)]++;
                    offA += stA[static_cast<size_t>(d)];
                    offB += stB[static_cast<size_t>(d)];
                    if (idx[static_cast<size_t>(d)] < lead[static_cast<size_t>(d)]) break;
                    offA -= stA[static_cast<size_t>(d)] * lead[static_cast<size_t>(d)];
                    offB -= stB[static_cast<size_t>(d)] * lead[static_cast<size_t>(d)];
                    idx[static_cast<size_t>(d)] = 0;
                }
            }
        };

        {
            const S* pa = a.data();
            const S* pb = b.data();
            S* po = out.data();
            for_each_block(blocks, [&](int64_t i, int64_t ia, int64_t ib) {
                Gemm<S>::run(false, false, m, n, ka, S(1), pa + ia * szA, pb + ib * szB, S(0), po + i * szO);
            });
        }
        if (out.requires_grad() && recording) {
            Tensor<S> ta = a, tb = b, o = out;
            bool ga = a.requires_grad(), gb = b.requires_grad();
            record("matmul", [ta, tb, o, ga, gb, for_each_block, blocks, m, n, ka, szA, szB, szO]() mutable {
                const S* go = o.grad().data();
                if (ga) {
                    S* da = ta.grad().data();
                    const S* pb = tb.data();
                    for_each_block(blocks, [&](int64_t i, int64_t iA, int64_t iB) {
                        // dA += dOut * B^T, accumulating across broadcast reuse
                        Gemm<S>::run(false, true, m, ka, n, S(1), go + i * szO, pb + iB * szB, S(1), da + iA * szA);
                    });
                }
                if (gb) {
                    S* db = tb.grad().data();
                    const S* pa = ta.data();
                    for_each_block(blocks, [&](int64_t i, int64_t iA, int64_t iB) {
                        Gemm<S>::run(true, false, ka, n, m, S(1), pa + iA * szA, go + i * szO, S(1), db + iB * szB);
                    });
                }
            });
        }
        finite_check(out, "matmul");
        return out;
    }

    // ---- conv2d, valid padding, cross-correlation ----
    // input [K, Cin, H, W], kernel [Cout, Cin, kh, kw]

    Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, int stride) {
        require(input.ndim() == 4, "conv2d: input must be [K,Cin,H,W], got " + shape_str(input.shape()));
        require(kernel.ndim() == 4, "conv2d: kernel must be [Cout,Cin,kh,kw], got " + shape_str(kernel.shape()));
        require(stride >= 1, "conv2d: stride must be >= 1");
        int K = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
        int Cout = kernel.dim(0), KCin = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
        require(Cin == KCin, "conv2d: input channels " + std::to_string(Cin) +
                                 " != kernel channels " + std::to_string(KCin));
        require(kh <= H && kw <= W, "conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                        " exceeds input " + std::to_string(H) + "x" + std::to_string(W));
        int OH = (H - kh) / stride + 1;
        int OW = (W - kw) / stride + 1;
        int ckk = Cin * kh * kw;
        int ohw = OH * OW;
        Tensor<S> out = Tensor<S>::zeros({K, Cout, OH, OW}, track(input, kernel));
        std::vector<S> cols(static_cast<size_t>(ckk) * ohw);
        for (int k = 0; k < K; ++k) {
            im2col(input.data() + static_cast<int64_t>(k) * Cin * H * W, Cin, H, W, kh, kw, stride, OH, OW,
                   cols.data());
            Gemm<S>::run(false, false, Cout, ohw, ckk, S(1), kernel.data(), cols.data(), S(0),
                         out.data() + static_cast<int64_t>(k) * Cout * ohw);
        }
        if (out.requires_grad() && recording) {
            Tensor<S> tin = input, tk = kernel, o = out;
            bool gi = input.requires_grad(), gk = kernel.requires_grad();
            record("conv2d", [tin, tk, o, gi, gk, K, Cin, H, W, Cout, kh, kw, stride, OH, OW, ckk, ohw]() mutable {
                std::vector<S> cols(static_cast<size_t>(ckk) * ohw);
                std::vector<S> dcols(static_cast<size_t>(ckk) * ohw);
                const S* go = o.grad().data();
                for (int k = 0; k < K; ++k) {
                    const S* gok = go + static_cast<int64_t>(k) * Cout * ohw;
                    if (gk) {
                        im2col(tin.data() + static_cast<int64_t>(k) * Cin * H * W, Cin, H, W, kh, kw, stride,
                               OH, OW, cols.data());
                        // dKernel += dOut_k * cols_k^T
                        Gemm<S>::run(false, true, Cout, ckk, ohw, S(1), gok, cols.data(), S(1),
                                     tk.grad().data());
                    }
                    if (gi) {
                        // dcols = kernel^T * dOut_k, then scatter back
                        Gemm<S>::run(true, false, ckk, ohw, Cout, S(1), tk.data(), gok, S(0), dcols.data());
                        col2im_add(dcols.data(), Cin, H, W, kh, kw, stride, OH, OW,
                                   tin.grad().data() + static_cast<int64_t>(k) * Cin * H * W);
                    }
                }
            });
        }
        finite_check(out, "conv2d");
        return out;
    }

private:
    struct Node {
        const char* name;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;

    void record(const char* name, std::function<void()> fn) {
        nodes_.push_back({name, std::move(fn)});
    }

    bool track(const Tensor<S>& a) const { return a.requires_grad(); }
    bool track(const Tensor<S>& a, const Tensor<S>& b) const {
        return a.requires_grad() || b.requires_grad();
    }

    void finite_check(const Tensor<S>& t, const char* op) const {
        if (check_finite && !all_finite(t.values()))
            throw std::runtime_error(std::string("non-finite value produced by ") + op);
    }

    template <class FwdF, class DaF, class DbF>
    Tensor<S> binary(const Tensor<S>& a, const Tensor<S>& b, const char* name, FwdF fwd, DaF dfa, DbF dfb) {
        Shape out_shape = broadcast_shape(a.shape(), b.shape());
        Tensor<S> out = Tensor<S>::zeros(out_shape, track(a, b));
        const auto& xa = a.values();
        const auto& xb = b.values();
        auto& y = out.values();
        for_each_broadcast(out_shape, a.shape(), b.shape(), [&](int64_t io, int64_t ia, int64_t ib) {
            y[static_cast<size_t>(io)] = fwd(xa[static_cast<size_t>(ia)], xb[static_cast<size_t>(ib)]);
        });
        if (out.requires_grad() && recording) {
            Tensor<S> ta = a, tb = b, o = out;
            bool ga = a.requires_grad(), gb = b.requires_grad();
            record(name, [ta, tb, o, out_shape, ga, gb, dfa, dfb]() mutable {
                const auto& xa2 = ta.values();
                const auto& xb2 = tb.values();
                const auto& yo = o.values();
                const auto& go = o.grad();
                for_each_broadcast(out_shape, ta.shape(), tb.shape(), [&](int64_t io, int64_t ia, int64_t ib) {
                    size_t po = static_cast<size_t>(io), pa = static_cast<size_t>(ia), pb = static_cast<size_t>(ib);
                    if (ga) ta.grad()[pa] += go[po] * dfa(xa2[pa], xb2[pb], yo[po]);
                    if (gb) tb.grad()[pb] += go[po] * dfb(xa2[pa], xb2[pb], yo[po]);
                });
            });
        }
        finite_check(out, name);
        return out;
    }

    template <class FwdF, class DF>
    Tensor<S> unary(const Tensor<S>& a, const char* name, FwdF fwd, DF df) {
        Tensor<S> out = Tensor<S>::zeros(a.shape(), track(a));
        const auto& x = a.values();
        auto& y = out.values();
        for (size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
        if (out.requires_grad() && recording) {
            Tensor<S> ain = a, o = out;
            record(name, [ain, o, df]() mutable {
                const auto& x2 = ain.values();
                const auto& y2 = o.values();
                const auto& go = o.grad();
                auto& ga = ain.grad();
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * df(x2[i], y2[i]);
            });
        }
        finite_check(out, name);
        return out;
    }

    Tensor<S> reduce(const Tensor<S>& a, std::vector<int> axes, bool keepdims, bool is_max) {
        const Shape& sh = a.shape();
        std::vector<bool> reduced(sh.size(), false);
        for (int ax : axes) {
            require(ax >= 0 && ax < a.ndim(), "reduce: axis " + std::to_string(ax) + " invalid for " + shape_str(sh));
            reduced[static_cast<size_t>(ax)] = true;
        }
        Shape out_shape;
        Shape kept_shape;  // out shape with reduced dims as 1, same rank as input
        for (size_t i = 0; i < sh.size(); ++i) {
            kept_shape.push_back(reduced[i] ? 1 : sh[i]);
            if (reduced[i]) {
                if (keepdims) out_shape.push_back(1);
            } else {
                out_shape.push_back(sh[i]);
            }
        }
        Tensor<S> out = is_max ? Tensor<S>::filled(out_shape, std::numeric_limits<S>::lowest(), track(a))
                               : Tensor<S>::zeros(out_shape, track(a));
        auto out_st = broadcast_strides(kept_shape, sh);  // maps input index -> output offset
        const auto& x = a.values();
        auto& y = out.values();
        auto arg = std::make_shared<std::vector<int64_t>>();
        if (is_max) arg->assign(y.size(), -1);
        {
            size_t nd = sh.size();
            std::vector<int64_t> idx(nd, 0);
            int64_t off = 0;
            int64_t n = static_cast<int64_t>(x.size());
            for (int64_t i = 0; i < n; ++i) {
                size_t po = static_cast<size_t>(off);
                if (is_max) {
                    if (x[static_cast<size_t>(i)] > y[po]) {
                        y[po] = x[static_cast<size_t>(i)];
                        (*arg)[po] = i;
                    }
                } else {
                    y[po] += x[static_cast<size_t>(i)];
                }
                for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
                    idx[static_cast<size_t>(d)]++;
                    off += out_st[static_cast<size_t>(d)];
                    if (idx[static_cast<size_t>(d)] < sh[static_cast<size_t>(d)]) break;
                    off -= out_st[static_cast<size_t>(d)] * sh[static_cast<size_t>(d)];
                    idx[static_cast<size_t>(d)] = 0;
                }
            }
        }
        if (out.requires_grad() && recording) {
            Tensor<S> ain = a, o = out;
            Shape in_shape = sh;
            record(is_max ? "reduce_max" : "reduce_sum", [ain, o, in_shape, out_st, arg, is_max]() mutable {
                const auto& go = o.grad();
                auto& ga = ain.grad();
                if (is_max) {
                    for (size_t po = 0; po < go.size(); ++po)
                        if ((*arg)[po] >= 0) ga[static_cast<size_t>((*arg)[po])] += go[po];
                } else {
                    size_t nd = in_shape.size();
                    std::vector<int64_t> idx(nd, 0);
                    int64_t off = 0;
                    for (int64_t i = 0; i < static_cast<int64_t>(ga.size()); ++i) {
                        ga[static_cast<size_t>(i)] += go[static_cast<size_t>(off)];
                        for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
                            idx[static_cast<size_t>(d)]++;
                            off += out_st[static_cast<size_t>(d)];
                            if (idx[static_cast<size_t>(d)] < in_shape[static_cast<size_t>(d)]) break;
                            off -= out_st[static_cast<size_t>(d)] * in_shape[static_cast<size_t>(d)];
                            idx[static_cast<size_t>(d)] = 0;
                        }
                    }
                }
            });
        }
        finite_check(out, is_max ? "reduce_max" : "reduce_sum");
        return out;
    }

    static void permuted_copy(const std::vector<S>& in, std::vector<S>& out, const Shape& out_shape,
                              const std::vector<int64_t>& gather_st) {
        size_t nd = out_shape.size();
        std::vector<int64_t> idx(nd, 0);
        int64_t off = 0;
        for (int64_t i = 0; i < static_cast<int64_t>(out.size()); ++i) {
            out[static_cast<size_t>(i)] = in[static_cast<size_t>(off)];
            for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
                idx[static_cast<size_t>(d)]++;
                off += gather_st[static_cast<size_t>(d)];
                if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
                off -= gather_st[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
                idx[static_cast<size_t>(d)] = 0;
            }
        }
    }

    static void im2col(const S* img, int Cin, int H, int W, int kh, int kw, int stride, int OH, int OW,
                       S* cols) {
        // cols is [Cin*kh*kw, OH*OW]
        int ohw = OH * OW;
        int row = 0;
        for (int c = 0; c < Cin; ++c)
            for (int i = 0; i < kh; ++i)
                for (int j = 0; j < kw; ++j, ++row) {
                    const S* base = img + static_cast<int64_t>(c) * H * W;
                    S* dst = cols + static_cast<int64_t>(row) * ohw;
                    for (int oy = 0; oy < OH; ++oy) {
                        const S* src = base + (oy * stride + i) * W + j;
                        if (stride == 1) {
                            for (int ox = 0; ox < OW; ++ox) dst[ox] = src[ox];
                        } else {
                            for (int ox = 0; ox < OW; ++ox) dst[ox] = src[ox * stride];
                        }
                        dst += OW;
                    }
                }
    }

    static void col2im_add(const S* cols, int Cin, int H, int W, int kh, int kw, int stride, int OH, int OW,
                           S* img) {
        int ohw = OH * OW;
        int row = 0;
        for (int c = 0; c < Cin; ++c)
            for (int i = 0; i < kh; ++i)
                for (int j = 0; j < kw; ++j, ++row) {
                    S* base = img + static_cast<int64_t>(c) * H * W;
                    const S* src = cols + static_cast<int64_t>(row) * ohw;
                    for (int oy = 0; oy < OH; ++oy) {
                        S* dst = base + (oy * stride + i) * W + j;
                        for (int ox = 0; ox < OW; ++ox) dst[ox * stride] += src[ox];
                        src += OW;
                    }
                }
    }
};

}  // namespace capsnet
