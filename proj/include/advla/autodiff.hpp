#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "advla/common.hpp"
#include "advla/tensor.hpp"

namespace advla {

template <typename S>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
template <typename S>
struct Var {
    Tape<S>* tape = nullptr;
    int id = -1;

    const Tensor<S>& value() const { return tape->value(*this); }
    const std::vector<std::size_t>& shape() const { return value().shape(); }
};

namespace detail {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

/// C = op(A) * op(B), optionally accumulating into C.
template <typename S>
void gemm(const S* a, std::size_t ar, std::size_t ac, bool ta, const S* b, std::size_t br,
          std::size_t bc, bool tb, S* c, bool accumulate) {
    ECMap<S> A(a, static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac));
    ECMap<S> B(b, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc));
    const std::size_t m = ta ? ac : ar;
    const std::size_t n = tb ? br : bc;
    EMap<S> C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (!ta && !tb) {
        if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
    } else if (ta && !tb) {
        if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
    } else if (!ta && tb) {
        if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
    } else {
        if (accumulate) C.noalias() += A.transpose() * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
}

}  // namespace detail

/// Define-by-run reverse-mode gradient tape. Nodes are appended in forward
/// order, which is by construction a topological order; backward walks the
/// records once in reverse. One tape per forward pass, single-threaded;
/// distinct tapes are independent.
template <typename S>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Register an input tensor. Gradients are reported for it iff
    /// t.requires_grad() is set.
    Var<S> leaf(Tensor<S> t) {
        Node n;
        n.value = std::move(t);
        n.is_leaf = true;
        n.requires_grad = n.value.requires_grad();
        return push(std::move(n));
    }

    /// Register a non-differentiable input (weights, masks, references).
    Var<S> constant(Tensor<S> t) {
        t.set_requires_grad(false);
        return leaf(std::move(t));
    }

    const Tensor<S>& value(Var<S> v) const { return nodes_[check(v)].value; }

    std::size_t node_count() const { return nodes_.size(); }

    /// Reverse pass from a scalar loss. Fills gradient buffers for every node
    /// in the loss's history; leaves outside it keep exact zeros.
    void backward(Var<S> loss) {
        const int lid = check(loss);
        if (nodes_.empty()) throw ValidationError("backward on an empty tape");
        if (nodes_[lid].value.size() != 1)
            throw ValidationError("backward requires a scalar loss, got shape " +
                                  nodes_[lid].value.shape_string());
        for (auto& n : nodes_) {
            n.grad.assign(n.value.size(), S(0));
        }
        nodes_[lid].grad[0] = S(1);
        for (int i = lid; i >= 0; --i) {
            if (nodes_[i].backward) nodes_[i].backward(*this, i);
        }
        has_grads_ = true;
    }

    /// Gradient of the last backward() wrt v; zeros if v was untouched.
    Tensor<S> grad(Var<S> v) const {
        const Node& n = nodes_[check(v)];
        if (!has_grads_) throw ValidationError("grad() before backward()");
        return Tensor<S>(n.value.shape(), n.grad);
    }

    /// Gradients for every requires_grad leaf, keyed by node id.
    std::unordered_map<int, Tensor<S>> leaf_gradients() const {
        if (!has_grads_) throw ValidationError("leaf_gradients() before backward()");
        std::unordered_map<int, Tensor<S>> out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            if (n.is_leaf && n.requires_grad)
                out.emplace(static_cast<int>(i), Tensor<S>(n.value.shape(), n.grad));
        }
        return out;
    }

    // --- internals shared with the op free functions ---

    struct Node {
        Tensor<S> value;
        std::vector<S> grad;
        bool is_leaf = false;
        bool requires_grad = false;
        std::function<void(Tape&, int)> backward;  // accumulates into input grads
    };

    Var<S> push(Node n) {
        nodes_.push_back(std::move(n));
        return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<S>& grad_buf(int id) { return nodes_[id].grad; }
    const std::vector<S>& grad_buf(int id) const { return nodes_[id].grad; }
    const Tensor<S>& value_at(int id) const { return nodes_[id].value; }

private:
    int check(Var<S> v) const {
        if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
            throw ValidationError("variable does not belong to this tape");
        return v.id;
    }

    std::vector<Node> nodes_;
    bool has_grads_ = false;
};

namespace detail {

template <typename S>
Tape<S>& same_tape(Var<S> a, Var<S> b) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw ValidationError("operands live on different tapes");
    return *a.tape;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

/// Elementwise sum of same-shape tensors.
template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
    Tape<S>& t = detail::same_tape(a, b);
    const Tensor<S>&A = a.value(), &B = b.value();
    if (!A.same_shape(B))
        throw ValidationError("add: shape mismatch " + A.shape_string() + " vs " + B.shape_string());
    Tensor<S> y(A.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = A[i] + B[i];
    typename Tape<S>::Node n;
    n.value = std::move(y);
    n.backward = [ia = a.id, ib = b.id](Tape<S>& tp, int self) {
        const auto& gy = tp.grad_buf(self);
        auto& ga = tp.grad_buf(ia);
        auto& gb = tp.grad_buf(ib);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            ga[i] += gy[i];
            gb[i] += gy[i];
        }
    };
    return t.push(std::move(n));
}

/// Elementwise product of same-shape tensors.
template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
    Tape<S>& t = detail::same_tape(a, b);
    const Tensor<S>&A = a.value(), &B = b.value();
    if (!A.same_shape(B))
        throw ValidationError("mul: shape mismatch " + A.shape_string() + " vs " + B.shape_string());
    Tensor<S> y(A.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = A[i] * B[i];
    typename Tape<S>::Node n;
    n.value = std::move(y);
    n.backward = [ia = a.id, ib = b.id](Tape<S>& tp, int self) {
        const auto& gy = tp.grad_buf(self);
        const auto& av = tp.value_at(ia).data();
        const auto& bv = tp.value_at(ib).data();
        auto& ga = tp.grad_buf(ia);
        auto& gb = tp.grad_buf(ib);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            ga[i] += gy[i] * bv[i];
            gb[i] += gy[i] * av[i];
        }
    };
    return t.push(std::move(n));
}

/// y = scale * x + shift, elementwise with scalar coefficients.
template <typename S>
Var<S> affine(Var<S> x, S scale, S shift) {
    Tape<S>& t = *x.tape;
    const Tensor<S>& X = x.value();
    Tensor<S> y(X.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = scale * X[i] + shift;
    typename Tape<S>::Node n;
    n.value = std::move(y);
    n.backward = [ix = x.id, scale](Tape<S>& tp, int self) {
        const auto& gy = tp.grad_buf(self);
        auto& gx = tp.grad_buf(ix);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += scale * gy[i];
    };
    return t.push(std::move(n));
}

template <typename S>
Var<S> scale(Var<S> x, S k) {
    return affine(x, k, S(0));
}

/// Matrix product [m x k] * [k x n] -> [m x n].
template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
    Tape<S>& t = detail::same_tape(a, b);
    const Tensor<S>&A = a.value(), &B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
        throw ValidationError("matmul: incompatible shapes " + A.shape_string() + " x " +
                              B.shape_string());
    const std::size_t m = A.dim(0), k = A.dim(1), nn = B.dim(1);
    Tensor<S> y({m, nn});
    detail::gemm(A.raw(), m, k, false, B.raw(), k, nn, false, y.raw(), false);
    typename Tape<S>::Node n;
    n.value = std::move(y);
    n.backward = [ia = a.id, ib = b.id, m, k, nn](Tape<S>& tp, int self) {
        const S* gy = tp.grad_buf(self).data();
        const S* av = tp.value_at(ia).raw();
        const S* bv = tp.value_at(ib).raw();
        // dA += dY * B^T ; dB += A^T * dY
        detail::gemm(gy, m, nn, false, bv, k, nn, true, tp.grad_buf(ia).data(), true);
        detail::gemm(av, m, k, true, gy, m, nn, false, tp.grad_buf(ib).data(), true);
    };
    return t.push(std::move(n));
}

/// 2-D transpose.
template <typename S>
Var<S> transpose(Var<S> x) {
    Tape<S>& t = *x.tape;
    const Tensor<S>& X = x.value();
    if (X.rank() != 2) throw ValidationError("transpose: rank-2 tensor required, got " + X.shape_string());
    const std::size_t r = X.dim(0), c = X.dim(1);
    Tensor<S> y({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) y.at2(j, i) = X.at2(i, j);
    typename Tape<S>::Node n;
    n.value = std::move(y);
    n.backward = [ix = x.id, r, c](Tape<S>& tp, int self) {
        const auto& gy = tp.grad_buf(self);
        auto& gx = tp.grad_buf(ix);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy[j * r + i];
    };
    return t.push(std::move(n));
}

/// Same data, new shape (element count preserved).
template <typename S>
Var<S> reshape(Var<S> x, std::vector<std::size_t> shape) {
    Tape<S>& t = *x.tape;
    const Tensor<S>& X = x.value();
    if (Tensor<S>::count(shape) != X.size())
        throw ValidationError("reshape: cannot view " + X.shape_string() + " as " +
                              Tensor<S>::shape_string(shape));
    typename Tape<S>::Node n;
    n.value = Tensor<S>(std::move(shape), X.data());
    n.backward = [ix = x.id](Tape<S>& tp, int self) {
        const auto& gy = tp.grad_buf(self);
        auto& gx = tp.grad_buf(ix);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    };
    return t.push(std::move(n));
}

/// Row-stabilized softmax over the last dimension.
template <typename S>
Var<S> softmax_rows(Var<S> x) {
    Tape<S>& t = *x.tape;
    const Tensor<S>& X = x.value();
    if (X.rank() < 1 || X.shape().back() < 1)
        throw ValidationError("softmax_rows: last dimension must be >= 1");
    const std::size_t n = X.shape().back();
    const std::size_t rows = X.size() / n;
    Tensor<S> y(X.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xr = X.raw() + r * n;
        S* yr = y.raw() + r * n;
        S mx = xr[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        S sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        for (std::size_t j = 0; j < n; ++j) yr[j] /= sum;
    }
    typename Tape<S>::Node nd;
    nd.value = std::move(y);
    nd.backward = [ix = x.id, rows, n](Tape<S>& tp, int self) {
        const auto& gy = tp.grad_buf(self);
        const auto& yv = tp.value_at(self).data();
        auto& gx = tp.grad_buf(ix);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t off = r * n;
            S dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += gy[off + j] * yv[off + j];
            for (std::size_t j = 0; j < n; ++j)
                gx[off + j] += yv[off + j] * (gy[off + j] - dot);
        }
    };
    return t.push(std::move(nd));
}

/// Per-row normalization to zero mean / unit variance followed by the affine
/// gain/bias. Variance epsilon 1e-6; a single-channel row is rejected.
template <typename S>
Var<S> layernorm(Var<S> x, Var<S> gain, Var<S> bias) {
    Tape<S>& t = detail::same_tape(x, gain);
    detail::same_tape(x, bias);
    const Tensor<S>& X = x.value();
    const std::size_t d = X.shape().back();
    if (d < 2) throw ValidationError("layernorm: last dimension must be >= 2");
    if (gain.value().size() != d || bias.value().size() != d)
        throw ValidationError("layernorm: gain/bias must have length " + std::to_string(d));
    const std::size_t rows = X.size() / d;
    const S eps = S(1e-6);
    Tensor<S> y(X.shape());
    std::vector<S> xhat(X.size());
    std::vector<S> inv_std(rows);
    const S* g = gain.value().raw();
    const S* b = bias.value().raw();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xr = X.raw() + r * d;
        S mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<S>(d);
        S var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<S>(d);
        const S istd = S(1) / std::sqrt(var + eps);
        inv_std[r] = istd;
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (xr[j] - mean) * istd;
            y[r * d + j] = g[j] * xhat[r * d + j] + b[j];
        }
    }
    typename Tape<S>::Node nd;
    nd.value = std::move(y);
    nd.backward = [ix = x.id, ig = gain.id, ib = bias.id, rows, d, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](Tape<S>& tp, int self) {
        const auto& gy = tp.grad_buf(self);
        const S* g = tp.value_at(ig).raw();
        auto& gx = tp.grad_buf(ix);
        auto& gg = tp.grad_buf(ig);
        auto& gb = tp.grad_buf(ib);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t off = r * d;
            S sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const S dxh = gy[off + j] * g[j];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xhat[off + j];
            }
            const S istd = inv_std[r];
            for (std::size_t j = 0; j < d; ++j) {
                const S dxh = gy[off + j] * g[j];
                gx[off + j] += istd * (dxh - (sum_dxhat + xhat[off + j] * sum_dxhat_xhat) /
                                                 static_cast<S>(d));
                gg[j] += gy[off + j] * xhat[off + j];
                gb[j] += gy[off + j];
            }
        }
    };
    return t.push(std::move(nd));
}

/// Exact-erf GELU: x * Phi(x).
template <typename S>
Var<S> gelu(Var<S> x) {
    Tape<S>& t = *x.tape;
    const Tensor<S>& X = x.value();
    Tensor<S> y(X.shape());
    const S inv_sqrt2 = S(0.7071067811865475244);
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = S(0.5) * X[i] * (S(1) + std::erf(X[i] * inv_sqrt2));
    typename Tape<S>::Node n;
    n.value = std::move(y);
    n.backward = [ix = x.id, inv_sqrt2](Tape<S>& tp, int self) {
        const auto& gy = tp.grad_buf(self);
        const auto& xv = tp.value_at(ix).data();
        auto& gx = tp.grad_buf(ix);
        const S inv_sqrt2pi = S(0.3989422804014326779);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            const S v = xv[i];
            const S phi_cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
            const S phi_pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
            gx[i] += gy[i] * (phi_cdf + v * phi_pdf);
        }
    };
    return t.push(std::move(n));
}

/// Mean over one axis of a rank-2 tensor. axis 0 -> [cols], axis 1 -> [rows].
template <typename S>
Var<S> mean_axis(Var<S> x, int axis) {
    Tape<S>& t = *x.tape;
    const Tensor<S>& X = x.value();
    if (X.rank() != 2) throw ValidationError("mean_axis: rank-2 tensor required");
    if (axis != 0 && axis != 1) throw ValidationError("mean_axis: axis must be 0 or 1");
    const std::size_t r = X.dim(0), c = X.dim(1);
    Tensor<S> y(axis == 0 ? std::vector<std::size_t>{c} : std::vector<std::size_t>{r});
    if (axis == 0) {
        for (std::size_t j = 0; j < c; ++j) {
            S s = 0;
            for (std::size_t i = 0; i < r; ++i) s += X.at2(i, j);
            y[j] = s / static_cast<S>(r);
        }
    } else {
        for (std::size_t i = 0; i < r; ++i) {
            S s = 0;
            for (std::size_t j = 0; j < c; ++j) s += X.at2(i, j);
            y[i] = s / static_cast<S>(c);
        }
    }
    typename Tape<S>::Node n;
    n.value = std::move(y);
    n.backward = [ix = x.id, axis, r, c](Tape<S>& tp, int self) {
        const auto& gy = tp.grad_buf(self);
        auto& gx = tp.grad_buf(ix);
        if (axis == 0) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy[j] / static_cast<S>(r);
        } else {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy[i] / static_cast<S>(c);
        }
    };
    return t.push(std::move(n));
}

/// Sum of all elements -> scalar.
template <typename S>
Var<S> sum_all(Var<S> x) {
    Tape<S>& t = *x.tape;
    Tensor<S> y = Tensor<S>::scalar(x.value().sum());
    typename Tape<S>::Node n;
    n.value = std::move(y);
    n.backward = [ix = x.id](Tape<S>& tp, int self) {
        const S g = tp.grad_buf(self)[0];
        auto& gx = tp.grad_buf(ix);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    };
    return t.push(std::move(n));
}

/// Euclidean norm of the flattened tensor -> scalar.
template <typename S>
Var<S> l2_norm(Var<S> x) {
    Tape<S>& t = *x.tape;
    const Tensor<S>& X = x.value();
    S ss = 0;
    for (std::size_t i = 0; i < X.size(); ++i) ss += X[i] * X[i];
    const S norm = std::sqrt(ss);
    typename Tape<S>::Node n;
    n.value = Tensor<S>::scalar(norm);
    n.backward = [ix = x.id, norm](Tape<S>& tp, int self) {
        const S g = tp.grad_buf(self)[0];
        const auto& xv = tp.value_at(ix).data();
        auto& gx = tp.grad_buf(ix);
        if (norm <= S(0)) return;  // subgradient 0 at the origin
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * xv[i] / norm;
    };
    return t.push(std::move(n));
}

/// Cosine similarity of the flattened operands:
/// (a . b) / (|a| |b| + eps) -> scalar.
template <typename S>
Var<S> cosine_similarity(Var<S> a, Var<S> b, S eps) {
    Tape<S>& t = detail::same_tape(a, b);
    const Tensor<S>&A = a.value(), &B = b.value();
    if (A.size() != B.size())
        throw ValidationError("cosine_similarity: length mismatch " + std::to_string(A.size()) +
                              " vs " + std::to_string(B.size()));
    if (!(eps > S(0))) throw ValidationError("cosine_similarity: eps must be positive");
    S dot = 0, na2 = 0, nb2 = 0;
    for (std::size_t i = 0; i < A.size(); ++i) {
        dot += A[i] * B[i];
        na2 += A[i] * A[i];
        nb2 += B[i] * B[i];
    }
    const S na = std::sqrt(na2), nb = std::sqrt(nb2);
    const S q = na * nb + eps;
    const S sim = dot / q;
    typename Tape<S>::Node n;
    n.value = Tensor<S>::scalar(sim);
    n.backward = [ia = a.id, ib = b.id, dot, na, nb, q](Tape<S>& tp, int self) {
        const S g = tp.grad_buf(self)[0];
        const auto& av = tp.value_at(ia).data();
        const auto& bv = tp.value_at(ib).data();
        auto& ga = tp.grad_buf(ia);
        auto& gb = tp.grad_buf(ib);
        const S tiny = S(1e-300);
        const S q2 = q * q;
        const S ka = (na > tiny) ? dot * nb / (na * q2) : S(0);
        const S kb = (nb > tiny) ? dot * na / (nb * q2) : S(0);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += g * (bv[i] / q - ka * av[i]);
            gb[i] += g * (av[i] / q - kb * bv[i]);
        }
    };
    return t.push(std::move(n));
}

/// Add a length-c row vector to every row of an [r x c] matrix.
template <typename S>
Var<S> add_rowvec(Var<S> x, Var<S> v) {
    Tape<S>& t = detail::same_tape(x, v);
    const Tensor<S>&X = x.value(), &V = v.value();
    if (X.rank() != 2 || V.size() != X.dim(1))
        throw ValidationError("add_rowvec: need [r x c] plus [c], got " + X.shape_string() +
                              " and " + V.shape_string());
    const std::size_t r = X.dim(0), c = X.dim(1);
    Tensor<S> y(X.shape());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) y.at2(i, j) = X.at2(i, j) + V[j];
    typename Tape<S>::Node n;
    n.value = std::move(y);
    n.backward = [ix = x.id, iv = v.id, r, c](Tape<S>& tp, int self) {
        const auto& gy = tp.grad_buf(self);
        auto& gx = tp.grad_buf(ix);
        auto& gv = tp.grad_buf(iv);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                gx[i * c + j] += gy[i * c + j];
                gv[j] += gy[i * c + j];
            }
    };
    return t.push(std::move(n));
}

/// Copy out columns [c0, c0+len) of an [r x c] matrix.
template <typename S>
Var<S> slice_cols(Var<S> x, std::size_t c0, std::size_t len) {
    Tape<S>& t = *x.tape;
    const Tensor<S>& X = x.value();
    if (X.rank() != 2 || c0 + len > X.dim(1))
        throw ValidationError("slice_cols: columns [" + std::to_string(c0) + ", " +
                              std::to_string(c0 + len) + ") out of range for " + X.shape_string());
    const std::size_t r = X.dim(0), c = X.dim(1);
    Tensor<S> y({r, len});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < len; ++j) y.at2(i, j) = X.at2(i, c0 + j);
    typename Tape<S>::Node n;
    n.value = std::move(y);
    n.backward = [ix = x.id, c0, len, r, c](Tape<S>& tp, int self) {
        const auto& gy = tp.grad_buf(self);
        auto& gx = tp.grad_buf(ix);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < len; ++j) gx[i * c + c0 + j] += gy[i * len + j];
    };
    return t.push(std::move(n));
}

/// Concatenate same-row-count matrices along columns.
template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw ValidationError("concat_cols: no operands");
    Tape<S>& t = *parts[0].tape;
    const std::size_t r = parts[0].value().dim(0);
    std::size_t total = 0;
    std::vector<int> ids;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        detail::same_tape(parts[0], p);
        const Tensor<S>& P = p.value();
        if (P.rank() != 2 || P.dim(0) != r)
            throw ValidationError("concat_cols: row count mismatch");
        ids.push_back(p.id);
        widths.push_back(P.dim(1));
        total += P.dim(1);
    }
    Tensor<S> y({r, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const Tensor<S>& P = p.value();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < P.dim(1); ++j) y.at2(i, off + j) = P.at2(i, j);
        off += P.dim(1);
    }
    typename Tape<S>::Node n;
    n.value = std::move(y);
    n.backward = [ids, widths, r, total](Tape<S>& tp, int self) {
        const auto& gy = tp.grad_buf(self);
        std::size_t off = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
            auto& gx = tp.grad_buf(ids[p]);
            const std::size_t w = widths[p];
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < w; ++j) gx[i * w + j] += gy[i * total + off + j];
            off += w;
        }
    };
    return t.push(std::move(n));
}

/// Rearrange a [C x H x W] image into patch rows: [N, C*P*P] with patches in
/// row-major grid order and channel-major layout inside each row.
template <typename S>
Var<S> extract_patches(Var<S> img, std::size_t P) {
    Tape<S>& t = *img.tape;
    const Tensor<S>& X = img.value();
    if (X.rank() != 3) throw ValidationError("extract_patches: [C x H x W] image required");
    const std::size_t C = X.dim(0), H = X.dim(1), W = X.dim(2);
    if (P == 0 || H % P != 0 || W % P != 0)
        throw ValidationError("extract_patches: image " + X.shape_string() +
                              " not divisible into " + std::to_string(P) + "-pixel patches");
    const std::size_t gh = H / P, gw = W / P, N = gh * gw, D = C * P * P;
    Tensor<S> y({N, D});
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            const std::size_t n = gy * gw + gx;
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t py = 0; py < P; ++py)
                    for (std::size_t px = 0; px < P; ++px)
                        y.at2(n, c * P * P + py * P + px) =
                            X[(c * H + gy * P + py) * W + gx * P + px];
        }
    typename Tape<S>::Node nd;
    nd.value = std::move(y);
    nd.backward = [ix = img.id, C, H, W, P, gh, gw](Tape<S>& tp, int self) {
        const auto& gy_ = tp.grad_buf(self);
        auto& gx_ = tp.grad_buf(ix);
        const std::size_t D = C * P * P;
        for (std::size_t gy = 0; gy < gh; ++gy)
            for (std::size_t gx = 0; gx < gw; ++gx) {
                const std::size_t n = gy * gw + gx;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t py = 0; py < P; ++py)
                        for (std::size_t px = 0; px < P; ++px)
                            gx_[(c * H + gy * P + py) * W + gx * P + px] +=
                                gy_[n * D + c * P * P + py * P + px];
            }
    };
    return t.push(std::move(nd));
}

}  // namespace advla
