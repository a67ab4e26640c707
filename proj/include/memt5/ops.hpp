#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "memt5/rng.hpp"
#include "memt5/tensor.hpp"

// Differentiable kernels. Every op builds the forward value eagerly and,
// when grad mode is on and an input requires grad, attaches a closure that
// accumulates into the parents' grad buffers.

namespace memt5 {

// Boolean attention mask, broadcast against score shapes numpy-style
// (aligned right, size-1 dims repeat). 1 = allowed.
struct Mask {
    Shape shape;
    std::vector<uint8_t> v;

    static Mask all_true(Shape s) {
        Mask m;
        m.v.assign(size_t(shape_numel(s)), 1);
        m.shape = std::move(s);
        return m;
    }
    uint8_t at(int64_t flat) const { return v[size_t(flat)]; }
};

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `in` viewed through `out` (0 where `in` repeats).
inline std::vector<int64_t> strides_into(const Shape& in, const Shape& out) {
    std::vector<int64_t> st(out.size(), 0);
    auto in_st = row_major_strides(in);
    size_t off = out.size() - in.size();
    for (size_t i = 0; i < in.size(); ++i)
        if (in[i] != 1) st[off + i] = in_st[i];
    return st;
}

// Odometer over `shape` tracking flat offsets into two broadcast inputs.
struct PairIter {
    const Shape& shape;
    std::vector<int64_t> sa, sb, coord;
    int64_t offa = 0, offb = 0;

    PairIter(const Shape& out, const Shape& a, const Shape& b)
        : shape(out), sa(strides_into(a, out)), sb(strides_into(b, out)), coord(out.size(), 0) {}

    void advance() {
        for (int d = int(shape.size()) - 1; d >= 0; --d) {
            offa += sa[size_t(d)];
            offb += sb[size_t(d)];
            if (++coord[size_t(d)] < shape[size_t(d)]) return;
            offa -= sa[size_t(d)] * shape[size_t(d)];
            offb -= sb[size_t(d)] * shape[size_t(d)];
            coord[size_t(d)] = 0;
        }
    }
};

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> broadcast_binary(const char* name, const Tensor<S>& a, const Tensor<S>& b, FwdFn fwd, BwdFn bwd) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    int64_t n = out.numel();
    {
        PairIter it(out.shape(), a.shape(), b.shape());
        const auto& av = a.data();
        const auto& bv = b.data();
        auto& ov = out.data();
        for (int64_t i = 0; i < n; ++i, it.advance()) ov[size_t(i)] = fwd(av[size_t(it.offa)], bv[size_t(it.offb)]);
    }
    debug_check_finite(name, out.data());
    if (grad_mode() && (a.requires_grad() || b.requires_grad())) {
        auto an = a.node();
        auto bn = b.node();
        out.node()->op = name;
        out.node()->requires_grad = true;
        out.node()->parents = {an, bn};
        out.node()->backprop = [bwd](TensorNode<S>& self) {
            auto& an2 = *self.parents[0];
            auto& bn2 = *self.parents[1];
            PairIter it(self.shape, an2.shape, bn2.shape);
            int64_t n2 = self.numel();
            for (int64_t i = 0; i < n2; ++i, it.advance()) {
                S dy = self.grad[size_t(i)];
                auto [da, db] = bwd(an2.value[size_t(it.offa)], bn2.value[size_t(it.offb)], dy);
                if (an2.requires_grad) an2.grad[size_t(it.offa)] += da;
                if (bn2.requires_grad) bn2.grad[size_t(it.offb)] += db;
            }
        };
    }
    return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::broadcast_binary<S>(
        "add", a, b, [](S x, S y) { return x + y; },
        [](S, S, S dy) { return std::pair<S, S>(dy, dy); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::broadcast_binary<S>(
        "sub", a, b, [](S x, S y) { return x - y; },
        [](S, S, S dy) { return std::pair<S, S>(dy, -dy); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::broadcast_binary<S>(
        "mul", a, b, [](S x, S y) { return x * y; },
        [](S x, S y, S dy) { return std::pair<S, S>(dy * y, dy * x); });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::broadcast_binary<S>(
        "div", a, b, [](S x, S y) { return x / y; },
        [](S x, S y, S dy) { return std::pair<S, S>(dy / y, -dy * x / (y * y)); });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S s) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[size_t(i)] = x.data()[size_t(i)] * s;
    debug_check_finite("scale", out.data());
    if (grad_mode() && x.requires_grad()) {
        out.node()->op = "scale";
        out.node()->requires_grad = true;
        out.node()->parents = {x.node()};
        out.node()->backprop = [s](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
        };
    }
    return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S s) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[size_t(i)] = x.data()[size_t(i)] + s;
    if (grad_mode() && x.requires_grad()) {
        out.node()->op = "add_scalar";
        out.node()->requires_grad = true;
        out.node()->parents = {x.node()};
        out.node()->backprop = [](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        };
    }
    return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[size_t(i)] = std::max(S(0), x.data()[size_t(i)]);
    if (grad_mode() && x.requires_grad()) {
        out.node()->op = "relu";
        out.node()->requires_grad = true;
        out.node()->parents = {x.node()};
        out.node()->backprop = [](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < self.grad.size(); ++i)
                if (p.value[i] > S(0)) p.grad[i] += self.grad[i];
        };
    }
    return out;
}

template <typename S>
Tensor<S> exp_op(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[size_t(i)] = std::exp(x.data()[size_t(i)]);
    debug_check_finite("exp", out.data());
    if (grad_mode() && x.requires_grad()) {
        out.node()->op = "exp";
        out.node()->requires_grad = true;
        out.node()->parents = {x.node()};
        out.node()->backprop = [](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * self.value[i];
        };
    }
    return out;
}

template <typename S>
Tensor<S> log_op(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out.data()[size_t(i)] = std::log(x.data()[size_t(i)]);
    debug_check_finite("log", out.data());
    if (grad_mode() && x.requires_grad()) {
        out.node()->op = "log";
        out.node()->requires_grad = true;
        out.node()->parents = {x.node()};
        out.node()->backprop = [](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] / p.value[i];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
    int64_t known = 1;
    int infer = -1;
    for (size_t i = 0; i < new_shape.size(); ++i) {
        if (new_shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one -1 in " + shape_str(new_shape));
            infer = int(i);
        } else {
            known *= new_shape[i];
        }
    }
    if (infer >= 0) new_shape[size_t(infer)] = x.numel() / known;
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    Tensor<S> out = Tensor<S>::from_data(new_shape, x.data());
    if (grad_mode() && x.requires_grad()) {
        out.node()->op = "reshape";
        out.node()->requires_grad = true;
        out.node()->parents = {x.node()};
        out.node()->backprop = [](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        };
    }
    return out;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, std::vector<int> perm) {
    if (perm.size() != x.rank()) throw ShapeError("permute: axes count mismatch");
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.shape()[size_t(perm[i])];
    auto in_st = row_major_strides(x.shape());
    // per-output-axis stride into the input
    std::vector<int64_t> st(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) st[i] = in_st[size_t(perm[i])];

    Tensor<S> out = Tensor<S>::zeros(out_shape);
    int64_t n = out.numel();
    std::vector<int64_t> coord(out_shape.size(), 0);
    int64_t off = 0;
    for (int64_t i = 0; i < n; ++i) {
        out.data()[size_t(i)] = x.data()[size_t(off)];
        for (int d = int(out_shape.size()) - 1; d >= 0; --d) {
            off += st[size_t(d)];
            if (++coord[size_t(d)] < out_shape[size_t(d)]) break;
            off -= st[size_t(d)] * out_shape[size_t(d)];
            coord[size_t(d)] = 0;
        }
    }
    if (grad_mode() && x.requires_grad()) {
        out.node()->op = "permute";
        out.node()->requires_grad = true;
        out.node()->parents = {x.node()};
        out.node()->backprop = [st, out_shape](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            std::vector<int64_t> c(out_shape.size(), 0);
            int64_t off2 = 0;
            int64_t n2 = self.numel();
            for (int64_t i = 0; i < n2; ++i) {
                p.grad[size_t(off2)] += self.grad[size_t(i)];
                for (int d = int(out_shape.size()) - 1; d >= 0; --d) {
                    off2 += st[size_t(d)];
                    if (++c[size_t(d)] < out_shape[size_t(d)]) break;
                    off2 -= st[size_t(d)] * out_shape[size_t(d)];
                    c[size_t(d)] = 0;
                }
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
    std::vector<int> perm(x.rank());
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(x, perm);
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    size_t r = xs[0].rank();
    if (axis < 0) axis += int(r);
    Shape out_shape = xs[0].shape();
    int64_t total = 0;
    for (const auto& x : xs) {
        if (x.rank() != r) throw ShapeError("concat: rank mismatch");
        for (size_t d = 0; d < r; ++d)
            if (int(d) != axis && x.shape()[d] != out_shape[d])
                throw ShapeError("concat: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(out_shape));
        total += x.dim(axis);
    }
    out_shape[size_t(axis)] = total;

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[size_t(d)];
    for (size_t d = size_t(axis) + 1; d < r; ++d) inner *= out_shape[d];

    Tensor<S> out = Tensor<S>::zeros(out_shape);
    int64_t out_row = total * inner;
    int64_t off_axis = 0;
    bool rg = false;
    for (const auto& x : xs) {
        int64_t ax = x.dim(axis);
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(x.data().begin() + o * ax * inner, ax * inner,
                        out.data().begin() + o * out_row + off_axis * inner);
        off_axis += ax;
        rg = rg || x.requires_grad();
    }
    if (grad_mode() && rg) {
        out.node()->op = "concat";
        out.node()->requires_grad = true;
        for (const auto& x : xs) out.node()->parents.push_back(x.node());
        out.node()->backprop = [outer, inner, total](TensorNode<S>& self) {
            int64_t out_row2 = total * inner;
            int64_t off = 0;
            for (auto& pp : self.parents) {
                auto& p = *pp;
                // this parent's extent on the concat axis
                int64_t ax = p.numel() / (outer * inner);
                if (p.requires_grad) {
                    for (int64_t o = 0; o < outer; ++o) {
                        const S* g = self.grad.data() + o * out_row2 + off * inner;
                        S* dst = p.grad.data() + o * ax * inner;
                        for (int64_t i = 0; i < ax * inner; ++i) dst[i] += g[i];
                    }
                }
                off += ax;
            }
        };
    }
    return out;
}

template <typename S>
std::vector<Tensor<S>> split(const Tensor<S>& x, int axis, const std::vector<int64_t>& sizes) {
    size_t r = x.rank();
    if (axis < 0) axis += int(r);
    int64_t total = 0;
    for (auto s : sizes) total += s;
    if (total != x.dim(axis)) throw ShapeError("split: sizes do not sum to axis extent");
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.shape()[size_t(d)];
    for (size_t d = size_t(axis) + 1; d < r; ++d) inner *= x.shape()[d];

    std::vector<Tensor<S>> outs;
    int64_t off = 0;
    for (auto sz : sizes) {
        Shape s = x.shape();
        s[size_t(axis)] = sz;
        Tensor<S> out = Tensor<S>::zeros(s);
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(x.data().begin() + o * total * inner + off * inner, sz * inner,
                        out.data().begin() + o * sz * inner);
        if (grad_mode() && x.requires_grad()) {
            out.node()->op = "split";
            out.node()->requires_grad = true;
            out.node()->parents = {x.node()};
            int64_t off_c = off, sz_c = sz;
            out.node()->backprop = [outer, inner, total, off_c, sz_c](TensorNode<S>& self) {
                auto& p = *self.parents[0];
                for (int64_t o = 0; o < outer; ++o) {
                    const S* g = self.grad.data() + o * sz_c * inner;
                    S* dst = p.grad.data() + o * total * inner + off_c * inner;
                    for (int64_t i = 0; i < sz_c * inner; ++i) dst[i] += g[i];
                }
            };
        }
        outs.push_back(std::move(out));
        off += sz;
    }
    return outs;
}

// ---------------------------------------------------------------------------
// Matmul

// A: [..., m, k]; B: [k, p] (broadcast over A's batch) or [..., k, p] with
// identical leading dims. Gradients: dA = dC Bᵀ, dB = Aᵀ dC.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: inputs must have rank >= 2");
    int64_t m = a.dim(-2), k = a.dim(-1);
    int64_t kb = b.dim(-2), p = b.dim(-1);
    if (k != kb)
        throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    bool b_broadcast = b.rank() == 2 && a.rank() > 2;
    if (!b_broadcast && a.rank() != b.rank())
        throw ShapeError("matmul: rank mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (!b_broadcast)
        for (size_t d = 0; d + 2 < a.rank(); ++d)
            if (a.shape()[d] != b.shape()[d])
                throw ShapeError("matmul: batch dims differ: " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));

    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(p);
    Tensor<S> out = Tensor<S>::zeros(out_shape);

    int64_t batch = a.numel() / (m * k);
    int64_t b_stride = b_broadcast ? 0 : k * p;
    const S* A = a.data().data();
    const S* B = b.data().data();
    S* C = out.data().data();
    for (int64_t bt = 0; bt < batch; ++bt) {
        const S* Ab = A + bt * m * k;
        const S* Bb = B + bt * b_stride;
        S* Cb = C + bt * m * p;
        for (int64_t i = 0; i < m; ++i) {
            const S* arow = Ab + i * k;
            S* crow = Cb + i * p;
            for (int64_t kk = 0; kk < k; ++kk) {
                S av = arow[kk];
                if (av == S(0)) continue;
                const S* brow = Bb + kk * p;
                for (int64_t j = 0; j < p; ++j) crow[j] += av * brow[j];
            }
        }
    }
    debug_check_finite("matmul", out.data());

    if (grad_mode() && (a.requires_grad() || b.requires_grad())) {
        out.node()->op = "matmul";
        out.node()->requires_grad = true;
        out.node()->parents = {a.node(), b.node()};
        out.node()->backprop = [m, k, p, batch, b_stride](TensorNode<S>& self) {
            auto& an = *self.parents[0];
            auto& bn = *self.parents[1];
            const S* dC = self.grad.data();
            for (int64_t bt = 0; bt < batch; ++bt) {
                const S* dCb = dC + bt * m * p;
                const S* Ab = an.value.data() + bt * m * k;
                const S* Bb = bn.value.data() + bt * b_stride;
                if (an.requires_grad) {
                    S* dA = an.grad.data() + bt * m * k;
                    for (int64_t i = 0; i < m; ++i) {
                        const S* dcrow = dCb + i * p;
                        S* darow = dA + i * k;
                        for (int64_t kk = 0; kk < k; ++kk) {
                            const S* brow = Bb + kk * p;
                            S s = 0;
                            for (int64_t j = 0; j < p; ++j) s += dcrow[j] * brow[j];
                            darow[kk] += s;
                        }
                    }
                }
                if (bn.requires_grad) {
                    S* dB = bn.grad.data() + bt * b_stride;
                    for (int64_t i = 0; i < m; ++i) {
                        const S* arow = Ab + i * k;
                        const S* dcrow = dCb + i * p;
                        for (int64_t kk = 0; kk < k; ++kk) {
                            S av = arow[kk];
                            if (av == S(0)) continue;
                            S* dbrow = dB + kk * p;
                            for (int64_t j = 0; j < p; ++j) dbrow[j] += av * dcrow[j];
                        }
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
    S s = std::accumulate(x.data().begin(), x.data().end(), S(0));
    Tensor<S> out = Tensor<S>::scalar(s);
    if (grad_mode() && x.requires_grad()) {
        out.node()->op = "sum_all";
        out.node()->requires_grad = true;
        out.node()->parents = {x.node()};
        out.node()->backprop = [](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            S g = self.grad[0];
            for (auto& gv : p.grad) gv += g;
        };
    }
    return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
    return scale(sum_all(x), S(1) / S(x.numel()));
}

// Sum over the last axis, keeping it as size 1.
template <typename S>
Tensor<S> sum_last(const Tensor<S>& x) {
    int64_t d = x.dim(-1);
    int64_t rows = x.numel() / d;
    Shape s = x.shape();
    s.back() = 1;
    Tensor<S> out = Tensor<S>::zeros(s);
    for (int64_t r = 0; r < rows; ++r) {
        S acc = 0;
        const S* px = x.data().data() + r * d;
        for (int64_t i = 0; i < d; ++i) acc += px[i];
        out.data()[size_t(r)] = acc;
    }
    if (grad_mode() && x.requires_grad()) {
        out.node()->op = "sum_last";
        out.node()->requires_grad = true;
        out.node()->parents = {x.node()};
        out.node()->backprop = [d, rows](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            for (int64_t r = 0; r < rows; ++r) {
                S g = self.grad[size_t(r)];
                S* pg = p.grad.data() + r * d;
                for (int64_t i = 0; i < d; ++i) pg[i] += g;
            }
        };
    }
    return out;
}

// Row max over the last axis, detached from the graph (used as the shift
// constant in log-sum-exp; the gradient is exact without it).
template <typename S>
Tensor<S> max_last_detached(const Tensor<S>& x) {
    int64_t d = x.dim(-1);
    int64_t rows = x.numel() / d;
    Shape s = x.shape();
    s.back() = 1;
    Tensor<S> out = Tensor<S>::zeros(s);
    for (int64_t r = 0; r < rows; ++r) {
        const S* px = x.data().data() + r * d;
        S m = px[0];
        for (int64_t i = 1; i < d; ++i) m = std::max(m, px[i]);
        out.data()[size_t(r)] = m;
    }
    return out;
}

// Numerically stable log-sum-exp over the last axis (kept as size 1).
template <typename S>
Tensor<S> logsumexp_last(const Tensor<S>& x) {
    Tensor<S> m = max_last_detached(x);
    return add(log_op(sum_last(exp_op(sub(x, m)))), m);
}

// ---------------------------------------------------------------------------
// Softmax / norm / loss

// Softmax over the last axis with a boolean mask. Masked entries come out
// exactly 0; a row with no allowed key is a malformed mask and throws.
template <typename S>
Tensor<S> masked_softmax(const Tensor<S>& scores, const Mask& mask) {
    int64_t d = scores.dim(-1);
    int64_t rows = scores.numel() / d;
    if (mask.shape.size() > scores.rank())
        throw ShapeError("masked_softmax: mask rank exceeds scores rank");
    for (size_t i = 0; i < mask.shape.size(); ++i) {
        int64_t md = mask.shape[i];
        int64_t sd = scores.shape()[scores.rank() - mask.shape.size() + i];
        if (md != 1 && md != sd)
            throw ShapeError("masked_softmax: mask shape " + shape_str(mask.shape) +
                             " does not broadcast to scores " + shape_str(scores.shape()));
    }
    auto mst = detail::strides_into(mask.shape, scores.shape());
    // flat mask offset per score element via odometer
    Tensor<S> out = Tensor<S>::zeros(scores.shape());
    std::vector<int64_t> coord(scores.rank(), 0);
    int64_t moff = 0;
    const S* sv = scores.data().data();
    S* ov = out.data().data();
    const Shape& sh = scores.shape();
    auto step = [&]() {
        for (int dd = int(sh.size()) - 1; dd >= 0; --dd) {
            moff += mst[size_t(dd)];
            if (++coord[size_t(dd)] < sh[size_t(dd)]) return;
            moff -= mst[size_t(dd)] * sh[size_t(dd)];
            coord[size_t(dd)] = 0;
        }
    };
    std::vector<int64_t> row_moff(static_cast<size_t>(d), 0);
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t i = 0; i < d; ++i) {
            row_moff[size_t(i)] = moff;
            step();
        }
        S mx = std::numeric_limits<S>::lowest();
        bool any = false;
        for (int64_t i = 0; i < d; ++i)
            if (mask.at(row_moff[size_t(i)])) {
                any = true;
                mx = std::max(mx, sv[r * d + i]);
            }
        if (!any)
            throw Error("masked_softmax: fully masked row " + std::to_string(r) +
                        " (malformed attention mask)");
        S z = 0;
        for (int64_t i = 0; i < d; ++i) {
            if (mask.at(row_moff[size_t(i)])) {
                S e = std::exp(sv[r * d + i] - mx);
                ov[r * d + i] = e;
                z += e;
            }
        }
        for (int64_t i = 0; i < d; ++i) ov[r * d + i] /= z;
        for (int64_t i = 0; i < d; ++i)
            if (!mask.at(row_moff[size_t(i)])) ov[r * d + i] = S(0);
    }
    debug_check_finite("masked_softmax", out.data());
    if (grad_mode() && scores.requires_grad()) {
        out.node()->op = "masked_softmax";
        out.node()->requires_grad = true;
        out.node()->parents = {scores.node()};
        // dP/ds needs only P: masked entries have p == 0 and get zero grad.
        out.node()->backprop = [d, rows](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            for (int64_t r = 0; r < rows; ++r) {
                const S* pv = self.value.data() + r * d;
                const S* dy = self.grad.data() + r * d;
                S dot = 0;
                for (int64_t i = 0; i < d; ++i) dot += dy[i] * pv[i];
                S* dx = p.grad.data() + r * d;
                for (int64_t i = 0; i < d; ++i) dx[i] += pv[i] * (dy[i] - dot);
            }
        };
    }
    return out;
}

// y = gamma * x / sqrt(mean(x^2) + eps). No mean subtraction, no bias.
template <typename S>
Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>& gamma, S eps) {
    int64_t d = x.dim(-1);
    if (gamma.numel() != d)
        throw ShapeError("rms_norm: gamma size " + std::to_string(gamma.numel()) + " != last dim " +
                         std::to_string(d));
    int64_t rows = x.numel() / d;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    std::vector<S> inv_rms(static_cast<size_t>(rows), S(0));
    for (int64_t r = 0; r < rows; ++r) {
        const S* px = x.data().data() + r * d;
        S ms = 0;
        for (int64_t i = 0; i < d; ++i) ms += px[i] * px[i];
        ms = ms / S(d) + eps;
        S inv = S(1) / std::sqrt(ms);
        if (!std::isfinite(double(inv))) inv = 0;  // eps==0 on a zero vector
        inv_rms[size_t(r)] = inv;
        S* po = out.data().data() + r * d;
        for (int64_t i = 0; i < d; ++i) po[i] = gamma.data()[size_t(i)] * px[i] * inv;
    }
    debug_check_finite("rms_norm", out.data());
    if (grad_mode() && (x.requires_grad() || gamma.requires_grad())) {
        out.node()->op = "rms_norm";
        out.node()->requires_grad = true;
        out.node()->parents = {x.node(), gamma.node()};
        out.node()->backprop = [d, rows, inv_rms](TensorNode<S>& self) {
            auto& xn = *self.parents[0];
            auto& gn = *self.parents[1];
            for (int64_t r = 0; r < rows; ++r) {
                const S* px = xn.value.data() + r * d;
                const S* dy = self.grad.data() + r * d;
                S inv = inv_rms[size_t(r)];
                if (gn.requires_grad) {
                    for (int64_t i = 0; i < d; ++i) gn.grad[size_t(i)] += dy[i] * px[i] * inv;
                }
                if (xn.requires_grad) {
                    S dot = 0;  // sum_j dy_j * gamma_j * x_j
                    for (int64_t i = 0; i < d; ++i) dot += dy[i] * gn.value[size_t(i)] * px[i];
                    S inv3 = inv * inv * inv / S(d);
                    S* dx = xn.grad.data() + r * d;
                    for (int64_t i = 0; i < d; ++i)
                        dx[i] += dy[i] * gn.value[size_t(i)] * inv - px[i] * dot * inv3;
                }
            }
        };
    }
    return out;
}

// Mean negative log-softmax over positions whose target != ignore_index.
template <typename S>
Tensor<S> cross_entropy_mean(const Tensor<S>& logits, const std::vector<int>& targets, int ignore_index) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N, V]");
    int64_t n = logits.dim(0), v = logits.dim(1);
    if (int64_t(targets.size()) != n) throw ShapeError("cross_entropy: targets size mismatch");
    int64_t count = 0;
    S loss = 0;
    std::vector<S> lse(static_cast<size_t>(n), S(0));
    for (int64_t r = 0; r < n; ++r) {
        int t = targets[size_t(r)];
        if (t == ignore_index) continue;
        if (t < 0 || t >= v) throw Error("cross_entropy: target " + std::to_string(t) + " out of range");
        const S* row = logits.data().data() + r * v;
        S mx = row[0];
        for (int64_t i = 1; i < v; ++i) mx = std::max(mx, row[i]);
        S z = 0;
        for (int64_t i = 0; i < v; ++i) z += std::exp(row[i] - mx);
        S l = std::log(z) + mx;
        lse[size_t(r)] = l;
        loss += l - row[t];
        ++count;
    }
    if (count == 0) throw Error("cross_entropy: all positions ignored");
    Tensor<S> out = Tensor<S>::scalar(loss / S(count));
    if (grad_mode() && logits.requires_grad()) {
        out.node()->op = "cross_entropy";
        out.node()->requires_grad = true;
        out.node()->parents = {logits.node()};
        out.node()->backprop = [n, v, targets, ignore_index, lse, count](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            S g = self.grad[0] / S(count);
            for (int64_t r = 0; r < n; ++r) {
                int t = targets[size_t(r)];
                if (t == ignore_index) continue;
                const S* row = p.value.data() + r * v;
                S* dr = p.grad.data() + r * v;
                S l = lse[size_t(r)];
                for (int64_t i = 0; i < v; ++i) dr[i] += g * std::exp(row[i] - l);
                dr[t] -= g;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding / dropout

// Gather rows of `table` ([V, d]) by id; gradient scatter-adds.
// Output shape = prefix_shape + [d], with ids in row-major prefix order.
template <typename S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const std::vector<int>& ids, Shape prefix_shape) {
    if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be [V, d]");
    int64_t v = table.dim(0), d = table.dim(1);
    if (shape_numel(prefix_shape) != int64_t(ids.size()))
        throw ShapeError("embedding_lookup: ids count does not match prefix shape");
    Shape out_shape = prefix_shape;
    out_shape.push_back(d);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    for (size_t r = 0; r < ids.size(); ++r) {
        int id = ids[r];
        if (id < 0 || id >= v) throw Error("embedding_lookup: id " + std::to_string(id) + " out of range");
        std::copy_n(table.data().begin() + int64_t(id) * d, d, out.data().begin() + int64_t(r) * d);
    }
    if (grad_mode() && table.requires_grad()) {
        out.node()->op = "embedding_lookup";
        out.node()->requires_grad = true;
        out.node()->parents = {table.node()};
        out.node()->backprop = [ids, d](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            for (size_t r = 0; r < ids.size(); ++r) {
                const S* g = self.grad.data() + int64_t(r) * d;
                S* dst = p.grad.data() + int64_t(ids[r]) * d;
                for (int64_t i = 0; i < d; ++i) dst[i] += g[i];
            }
        };
    }
    return out;
}

// Bernoulli keep-mask scaled by 1/(1-rate). Identity (same handle) when not
// training or rate == 0; bit-for-bit reproducible for a given stream state.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, bool training, RngStream* rng) {
    if (!training || rate == 0.0) return x;
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
    if (!rng) throw ConfigError("dropout: training mode requires an RNG stream");
    std::vector<uint8_t> keep(size_t(x.numel()));
    for (auto& k : keep) k = rng->uniform() >= rate ? 1 : 0;
    S sc = S(1.0 / (1.0 - rate));
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i)
        out.data()[size_t(i)] = keep[size_t(i)] ? x.data()[size_t(i)] * sc : S(0);
    if (grad_mode() && x.requires_grad()) {
        out.node()->op = "dropout";
        out.node()->requires_grad = true;
        out.node()->parents = {x.node()};
        out.node()->backprop = [keep, sc](TensorNode<S>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < self.grad.size(); ++i)
                if (keep[i]) p.grad[i] += self.grad[i] * sc;
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers

template <typename S>
inline int argmax_row(const S* row, int64_t n) {
    int best = 0;
    for (int64_t i = 1; i < n; ++i)
        if (row[i] > row[best]) best = int(i);
    return best;
}

}  // namespace memt5
