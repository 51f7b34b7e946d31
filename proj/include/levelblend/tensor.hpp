#pragma once

// Dense float32 tensors with reverse-mode gradients. The op set is the
// fixed one the two models need; every op registers a backward rule and is
// covered by finite-difference checks in the test suite. Graphs are DAGs of
// shared nodes; creation order doubles as a topological order because every
// op's inputs exist before its output.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "levelblend/common.hpp"

namespace lvb::num {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad; // allocated per backward pass, cleared by the optimizer
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;
};

using NodePtr = std::shared_ptr<Node>;

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor leaf(Shape shape, std::vector<float> value, bool requires_grad = false) {
        if (shape_numel(shape) != value.size())
            fail("ShapeMismatch", "leaf: shape " + shape_str(shape) + " does not match buffer size " +
                                      std::to_string(value.size()));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        n->id = next_node_id();
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<float> v(shape_numel(shape), 0.0f);
        return leaf(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(Shape shape, float x, bool requires_grad = false) {
        std::vector<float> v(shape_numel(shape), x);
        return leaf(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(float x, bool requires_grad = false) {
        return leaf({1}, {x}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::vector<float>& data() { return node_->value; }
    const std::vector<float>& data() const { return node_->value; }
    bool requires_grad() const { return node_->requires_grad; }

    float item() const {
        if (numel() != 1) fail("ShapeMismatch", "item() on tensor of " + std::to_string(numel()) + " elements");
        return node_->value[0];
    }

    // Gradient of the most recent backward pass; empty means unreachable (zero).
    const std::vector<float>& grad() const { return node_->grad; }

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

namespace detail {

inline NodePtr make_op(Shape shape, std::vector<NodePtr> parents) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(shape_numel(n->shape), 0.0f);
    n->id = next_node_id();
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    return n;
}

inline void check_finite(const Node& n, const char* op) {
    for (float v : n.value)
        if (!std::isfinite(v)) fail("NonFiniteValue", std::string(op) + " produced a non-finite value");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        fail("ShapeMismatch", std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Ensures a parent's grad buffer exists before accumulation.
inline std::vector<float>& grad_of(const NodePtr& p) {
    if (p->grad.size() != p->value.size()) p->grad.assign(p->value.size(), 0.0f);
    return p->grad;
}

} // namespace detail

// ---------------------------------------------------------------------------
// matmul kernels (row-major, accumulate into C)
// ---------------------------------------------------------------------------

// C[M,N] += A[M,K] * B[K,N]. Saxpy form (vectorizes without relaxed FP);
// k-blocking keeps the active B slice cache-resident. Per-element
// accumulation order is k-ascending regardless of block size.
inline void matmul_acc(const float* A, const float* B, float* C, int M, int K, int N) {
    constexpr int kBlock = 64;
    for (int k0 = 0; k0 < K; k0 += kBlock) {
        const int k1 = std::min(k0 + kBlock, K);
        for (int m = 0; m < M; ++m) {
            const float* a = A + static_cast<std::size_t>(m) * K;
            float* c = C + static_cast<std::size_t>(m) * N;
            for (int k = k0; k < k1; ++k) {
                const float av = a[k];
                if (av == 0.0f) continue;
                const float* b = B + static_cast<std::size_t>(k) * N;
                for (int n = 0; n < N; ++n) c[n] += av * b[n];
            }
        }
    }
}

// dst[C][R] = src[R][C]^T, block-wise for cache locality
inline void transpose_into(const float* src, int R, int C, float* dst) {
    constexpr int kBlock = 32;
    for (int r0 = 0; r0 < R; r0 += kBlock)
        for (int c0 = 0; c0 < C; c0 += kBlock) {
            const int r1 = std::min(r0 + kBlock, R), c1 = std::min(c0 + kBlock, C);
            for (int r = r0; r < r1; ++r)
                for (int c = c0; c < c1; ++c)
                    dst[static_cast<std::size_t>(c) * R + r] = src[static_cast<std::size_t>(r) * C + c];
        }
}

// C[M,N] += A[M,K] * B[N,K]^T
inline void matmul_nt_acc(const float* A, const float* B, float* C, int M, int K, int N) {
    std::vector<float> bt(static_cast<std::size_t>(K) * N);
    transpose_into(B, N, K, bt.data());
    matmul_acc(A, bt.data(), C, M, K, N);
}

// C[K,N] += A[M,K]^T * B[M,N]
inline void matmul_tn_acc(const float* A, const float* B, float* C, int M, int K, int N) {
    std::vector<float> at(static_cast<std::size_t>(M) * K);
    transpose_into(A, M, K, at.data());
    matmul_acc(at.data(), B, C, K, M, N);
}

// ---------------------------------------------------------------------------
// elementwise / scalar ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    auto n = detail::make_op(a.shape(), {a.node(), b.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.data()[i] + b.data()[i];
    detail::check_finite(*n, "add");
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            for (const auto& p : self.parents) {
                if (!p->requires_grad) continue;
                auto& g = detail::grad_of(p);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
        };
    return Tensor(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    auto n = detail::make_op(a.shape(), {a.node(), b.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.data()[i] - b.data()[i];
    detail::check_finite(*n, "sub");
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (pa->requires_grad) {
                auto& g = detail::grad_of(pa);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                auto& g = detail::grad_of(pb);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
            }
        };
    return Tensor(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    auto n = detail::make_op(a.shape(), {a.node(), b.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.data()[i] * b.data()[i];
    detail::check_finite(*n, "mul");
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (pa->requires_grad) {
                auto& g = detail::grad_of(pa);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
            }
            if (pb->requires_grad) {
                auto& g = detail::grad_of(pb);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
            }
        };
    return Tensor(n);
}

inline Tensor scale(const Tensor& x, float c) {
    auto n = detail::make_op(x.shape(), {x.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = x.data()[i] * c;
    detail::check_finite(*n, "scale");
    if (n->requires_grad)
        n->backprop = [c](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
        };
    return Tensor(n);
}

inline Tensor add_scalar(const Tensor& x, float c) {
    auto n = detail::make_op(x.shape(), {x.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = x.data()[i] + c;
    detail::check_finite(*n, "add_scalar");
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        };
    return Tensor(n);
}

// y = x / s where s is a 1-element tensor (used for the temperature).
inline Tensor div_by_scalar(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) fail("ShapeMismatch", "div_by_scalar: divisor must be a scalar tensor");
    float sv = s.data()[0];
    auto n = detail::make_op(x.shape(), {x.node(), s.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = x.data()[i] / sv;
    detail::check_finite(*n, "div_by_scalar");
    if (n->requires_grad)
        n->backprop = [sv](Node& self) {
            auto& px = self.parents[0];
            auto& ps = self.parents[1];
            if (px->requires_grad) {
                auto& g = detail::grad_of(px);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / sv;
            }
            if (ps->requires_grad) {
                double acc = 0.0;
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    acc += static_cast<double>(self.grad[i]) * px->value[i];
                detail::grad_of(ps)[0] += static_cast<float>(-acc / (static_cast<double>(sv) * sv));
            }
        };
    return Tensor(n);
}

inline Tensor relu(const Tensor& x) {
    auto n = detail::make_op(x.shape(), {x.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (p->value[i] > 0.0f) g[i] += self.grad[i];
        };
    return Tensor(n);
}

inline Tensor exp(const Tensor& x) {
    auto n = detail::make_op(x.shape(), {x.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = std::exp(x.data()[i]);
    detail::check_finite(*n, "exp");
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
        };
    return Tensor(n);
}

inline Tensor log(const Tensor& x) {
    auto n = detail::make_op(x.shape(), {x.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = std::log(x.data()[i]);
    detail::check_finite(*n, "log");
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / p->value[i];
        };
    return Tensor(n);
}

// Constant copy; cuts the node out of the gradient flow.
inline Tensor stop_grad(const Tensor& x) {
    return Tensor::leaf(x.shape(), x.data(), false);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    auto n = detail::make_op({1}, {x.node()});
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    n->value[0] = static_cast<float>(acc);
    detail::check_finite(*n, "sum_all");
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            float gv = self.grad[0];
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gv;
        };
    return Tensor(n);
}

inline Tensor mean_all(const Tensor& x) {
    auto n = detail::make_op({1}, {x.node()});
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.numel());
    n->value[0] = static_cast<float>(acc * inv);
    detail::check_finite(*n, "mean_all");
    if (n->requires_grad)
        n->backprop = [inv](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            float gv = self.grad[0] * static_cast<float>(inv);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gv;
        };
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        fail("ShapeMismatch", "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    auto n = detail::make_op({M, N}, {a.node(), b.node()});
    matmul_acc(a.data().data(), b.data().data(), n->value.data(), M, K, N);
    detail::check_finite(*n, "matmul");
    if (n->requires_grad)
        n->backprop = [M, K, N](Node& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (pa->requires_grad)
                matmul_nt_acc(self.grad.data(), pb->value.data(), detail::grad_of(pa).data(), M, N, K);
            if (pb->requires_grad)
                matmul_tn_acc(pa->value.data(), self.grad.data(), detail::grad_of(pb).data(), M, K, N);
        };
    return Tensor(n);
}

// C = A * B^T with A [M,K], B [N,K]; the similarity-matrix workhorse.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1])
        fail("ShapeMismatch", "matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int M = a.shape()[0], K = a.shape()[1], N = b.shape()[0];
    auto n = detail::make_op({M, N}, {a.node(), b.node()});
    matmul_nt_acc(a.data().data(), b.data().data(), n->value.data(), M, K, N);
    detail::check_finite(*n, "matmul_nt");
    if (n->requires_grad)
        n->backprop = [M, K, N](Node& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (pa->requires_grad)
                matmul_acc(self.grad.data(), pb->value.data(), detail::grad_of(pa).data(), M, N, K);
            if (pb->requires_grad)
                matmul_tn_acc(self.grad.data(), pa->value.data(), detail::grad_of(pb).data(), M, N, K);
        };
    return Tensor(n);
}

inline Tensor transpose2d(const Tensor& x) {
    if (x.shape().size() != 2) fail("ShapeMismatch", "transpose2d: rank must be 2");
    int R = x.shape()[0], C = x.shape()[1];
    auto n = detail::make_op({C, R}, {x.node()});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) n->value[static_cast<std::size_t>(c) * R + r] = x.data()[static_cast<std::size_t>(r) * C + c];
    if (n->requires_grad)
        n->backprop = [R, C](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c)
                    g[static_cast<std::size_t>(r) * C + c] += self.grad[static_cast<std::size_t>(c) * R + r];
        };
    return Tensor(n);
}

// y = x * w^T + b, x [N,K], w [O,K], b [O]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[1])
        fail("ShapeMismatch", "linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    int N = x.shape()[0], K = x.shape()[1], O = w.shape()[0];
    if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != O))
        fail("ShapeMismatch", "linear: bias must be (O)");
    std::vector<NodePtr> parents{x.node(), w.node()};
    if (b.defined()) parents.push_back(b.node());
    auto n = detail::make_op({N, O}, std::move(parents));
    matmul_nt_acc(x.data().data(), w.data().data(), n->value.data(), N, K, O);
    if (b.defined())
        for (int i = 0; i < N; ++i)
            for (int o = 0; o < O; ++o) n->value[static_cast<std::size_t>(i) * O + o] += b.data()[static_cast<std::size_t>(o)];
    detail::check_finite(*n, "linear");
    if (n->requires_grad)
        n->backprop = [N, K, O](Node& self) {
            auto& px = self.parents[0];
            auto& pw = self.parents[1];
            if (px->requires_grad)
                matmul_acc(self.grad.data(), pw->value.data(), detail::grad_of(px).data(), N, O, K);
            if (pw->requires_grad)
                matmul_tn_acc(self.grad.data(), px->value.data(), detail::grad_of(pw).data(), N, O, K);
            if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                auto& gb = detail::grad_of(self.parents[2]);
                for (int i = 0; i < N; ++i)
                    for (int o = 0; o < O; ++o) gb[static_cast<std::size_t>(o)] += self.grad[static_cast<std::size_t>(i) * O + o];
            }
        };
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// convolutions (NCHW)
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Batch im2col: image i of the batch occupies columns [i*plane, (i+1)*plane)
// of a [K, N*plane] matrix, so each conv layer runs as one large matmul.
inline void im2col_batch(const float* x, int N, int Ci, int H, int W, int kh, int kw, int stride,
                         int pad, int Ho, int Wo, float* cols) {
    const int plane = Ho * Wo;
    const std::size_t in_stride = static_cast<std::size_t>(Ci) * H * W;
    const std::size_t total = static_cast<std::size_t>(N) * plane;
    for (int i = 0; i < N; ++i) {
        const float* src = x + i * in_stride;
        float* base = cols + static_cast<std::size_t>(i) * plane;
        for (int c = 0; c < Ci; ++c) {
            const float* sp = src + static_cast<std::size_t>(c) * H * W;
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    float* dst = base + ((static_cast<std::size_t>(c) * kh + ki) * kw + kj) * total;
                    for (int oi = 0; oi < Ho; ++oi) {
                        int ii = oi * stride - pad + ki;
                        if (ii < 0 || ii >= H) {
                            std::memset(dst + static_cast<std::size_t>(oi) * Wo, 0,
                                        sizeof(float) * static_cast<std::size_t>(Wo));
                            continue;
                        }
                        for (int oj = 0; oj < Wo; ++oj) {
                            int jj = oj * stride - pad + kj;
                            dst[static_cast<std::size_t>(oi) * Wo + oj] =
                                (jj >= 0 && jj < W) ? sp[static_cast<std::size_t>(ii) * W + jj] : 0.0f;
                        }
                    }
                }
        }
    }
}

inline void col2im_batch_add(const float* cols, int N, int Ci, int H, int W, int kh, int kw,
                             int stride, int pad, int Ho, int Wo, float* x) {
    const int plane = Ho * Wo;
    const std::size_t in_stride = static_cast<std::size_t>(Ci) * H * W;
    const std::size_t total = static_cast<std::size_t>(N) * plane;
    for (int i = 0; i < N; ++i) {
        float* dst_img = x + i * in_stride;
        const float* base = cols + static_cast<std::size_t>(i) * plane;
        for (int c = 0; c < Ci; ++c) {
            float* dp = dst_img + static_cast<std::size_t>(c) * H * W;
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    const float* src = base + ((static_cast<std::size_t>(c) * kh + ki) * kw + kj) * total;
                    for (int oi = 0; oi < Ho; ++oi) {
                        int ii = oi * stride - pad + ki;
                        if (ii < 0 || ii >= H) continue;
                        for (int oj = 0; oj < Wo; ++oj) {
                            int jj = oj * stride - pad + kj;
                            if (jj >= 0 && jj < W)
                                dp[static_cast<std::size_t>(ii) * W + jj] += src[static_cast<std::size_t>(oi) * Wo + oj];
                        }
                    }
                }
        }
    }
}

// [N][C][plane] tensor layout <-> [C][N*plane] matrix layout
inline void gather_channel_major(const float* x, int N, int C, int plane, float* out) {
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c)
            std::memcpy(out + (static_cast<std::size_t>(c) * N + i) * plane,
                        x + (static_cast<std::size_t>(i) * C + c) * plane, sizeof(float) * static_cast<std::size_t>(plane));
}

inline void scatter_channel_major_add(const float* mat, int N, int C, int plane, float* x) {
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) {
            const float* src = mat + (static_cast<std::size_t>(c) * N + i) * plane;
            float* dst = x + (static_cast<std::size_t>(i) * C + c) * plane;
            for (int p = 0; p < plane; ++p) dst[p] += src[p];
        }
}

} // namespace detail

// x [N,Ci,H,W], w [Co,Ci,kh,kw], optional b [Co]
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    if (x.shape().size() != 4 || w.shape().size() != 4 || x.shape()[1] != w.shape()[1])
        fail("ShapeMismatch", "conv2d: " + shape_str(x.shape()) + " with kernel " + shape_str(w.shape()));
    if (stride < 1) fail("ShapeMismatch", "conv2d: stride must be >= 1");
    const int N = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int Co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    const int Ho = conv_out_dim(H, kh, stride, pad), Wo = conv_out_dim(W, kw, stride, pad);
    if (Ho < 1 || Wo < 1) fail("ShapeMismatch", "conv2d: output would be empty");
    if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != Co))
        fail("ShapeMismatch", "conv2d: bias must be (Co)");

    std::vector<NodePtr> parents{x.node(), w.node()};
    if (b.defined()) parents.push_back(b.node());
    auto n = detail::make_op({N, Co, Ho, Wo}, std::move(parents));

    const int K = Ci * kh * kw, plane = Ho * Wo;
    const std::size_t total = static_cast<std::size_t>(N) * plane;
    std::vector<float> cols(static_cast<std::size_t>(K) * total);
    detail::im2col_batch(x.data().data(), N, Ci, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
    std::vector<float> out_mat(static_cast<std::size_t>(Co) * total, 0.0f);
    matmul_acc(w.data().data(), cols.data(), out_mat.data(), Co, K, static_cast<int>(total));
    for (int i = 0; i < N; ++i)
        for (int co = 0; co < Co; ++co)
            std::memcpy(n->value.data() + (static_cast<std::size_t>(i) * Co + co) * plane,
                        out_mat.data() + (static_cast<std::size_t>(co) * N + i) * plane,
                        sizeof(float) * static_cast<std::size_t>(plane));
    if (b.defined())
        for (int i = 0; i < N; ++i)
            for (int co = 0; co < Co; ++co) {
                float bv = b.data()[static_cast<std::size_t>(co)];
                float* dst = n->value.data() + (static_cast<std::size_t>(i) * Co + co) * plane;
                for (int p = 0; p < plane; ++p) dst[p] += bv;
            }
    detail::check_finite(*n, "conv2d");

    if (n->requires_grad)
        n->backprop = [=](Node& self) {
            auto& px = self.parents[0];
            auto& pw = self.parents[1];
            std::vector<float> gout_mat(static_cast<std::size_t>(Co) * total);
            detail::gather_channel_major(self.grad.data(), N, Co, plane, gout_mat.data());
            if (pw->requires_grad) {
                std::vector<float> cols2(static_cast<std::size_t>(K) * total);
                detail::im2col_batch(px->value.data(), N, Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                                     cols2.data());
                matmul_nt_acc(gout_mat.data(), cols2.data(), detail::grad_of(pw).data(), Co,
                              static_cast<int>(total), K);
            }
            if (px->requires_grad) {
                std::vector<float> dcols(static_cast<std::size_t>(K) * total, 0.0f);
                matmul_tn_acc(pw->value.data(), gout_mat.data(), dcols.data(), Co, K,
                              static_cast<int>(total));
                detail::col2im_batch_add(dcols.data(), N, Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                                         detail::grad_of(px).data());
            }
            if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                auto& gb = detail::grad_of(self.parents[2]);
                for (int co = 0; co < Co; ++co) {
                    const float* g = gout_mat.data() + static_cast<std::size_t>(co) * total;
                    double acc = 0.0;
                    for (std::size_t p = 0; p < total; ++p) acc += g[p];
                    gb[static_cast<std::size_t>(co)] += static_cast<float>(acc);
                }
            }
        };
    return Tensor(n);
}

// x [N,Ci,H,W], w [Ci,Co,kh,kw], optional b [Co]; output (H-1)*s - 2p + kh.
inline Tensor transposed_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    if (x.shape().size() != 4 || w.shape().size() != 4 || x.shape()[1] != w.shape()[0])
        fail("ShapeMismatch", "transposed_conv2d: " + shape_str(x.shape()) + " with kernel " + shape_str(w.shape()));
    const int N = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int Co = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    const int Ho = (H - 1) * stride - 2 * pad + kh, Wo = (W - 1) * stride - 2 * pad + kw;
    if (Ho < 1 || Wo < 1) fail("ShapeMismatch", "transposed_conv2d: output would be empty");
    if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != Co))
        fail("ShapeMismatch", "transposed_conv2d: bias must be (Co)");

    std::vector<NodePtr> parents{x.node(), w.node()};
    if (b.defined()) parents.push_back(b.node());
    auto n = detail::make_op({N, Co, Ho, Wo}, std::move(parents));

    // Forward is the gradient of the matching conv2d: cols = w^T x, scattered
    // back by col2im, batched across images.
    const int K = Co * kh * kw, plane = H * W;
    const std::size_t total = static_cast<std::size_t>(N) * plane;
    {
        std::vector<float> x_mat(static_cast<std::size_t>(Ci) * total);
        detail::gather_channel_major(x.data().data(), N, Ci, plane, x_mat.data());
        std::vector<float> cols(static_cast<std::size_t>(K) * total, 0.0f);
        matmul_tn_acc(w.data().data(), x_mat.data(), cols.data(), Ci, K, static_cast<int>(total));
        detail::col2im_batch_add(cols.data(), N, Co, Ho, Wo, kh, kw, stride, pad, H, W, n->value.data());
    }
    if (b.defined())
        for (int i = 0; i < N; ++i)
            for (int co = 0; co < Co; ++co) {
                float bv = b.data()[static_cast<std::size_t>(co)];
                float* dst = n->value.data() + (static_cast<std::size_t>(i) * Co + co) * Ho * Wo;
                for (int p = 0; p < Ho * Wo; ++p) dst[p] += bv;
            }
    detail::check_finite(*n, "transposed_conv2d");

    if (n->requires_grad)
        n->backprop = [=](Node& self) {
            auto& px = self.parents[0];
            auto& pw = self.parents[1];
            std::vector<float> gcols(static_cast<std::size_t>(K) * total);
            detail::im2col_batch(self.grad.data(), N, Co, Ho, Wo, kh, kw, stride, pad, H, W,
                                 gcols.data());
            if (px->requires_grad) {
                std::vector<float> dx_mat(static_cast<std::size_t>(Ci) * total, 0.0f);
                matmul_acc(pw->value.data(), gcols.data(), dx_mat.data(), Ci, K, static_cast<int>(total));
                detail::scatter_channel_major_add(dx_mat.data(), N, Ci, plane, detail::grad_of(px).data());
            }
            if (pw->requires_grad) {
                std::vector<float> x_mat(static_cast<std::size_t>(Ci) * total);
                detail::gather_channel_major(px->value.data(), N, Ci, plane, x_mat.data());
                matmul_nt_acc(x_mat.data(), gcols.data(), detail::grad_of(pw).data(), Ci,
                              static_cast<int>(total), K);
            }
            if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                auto& gb = detail::grad_of(self.parents[2]);
                for (int i = 0; i < N; ++i)
                    for (int co = 0; co < Co; ++co) {
                        const float* g = self.grad.data() + (static_cast<std::size_t>(i) * Co + co) * Ho * Wo;
                        double acc = 0.0;
                        for (int p = 0; p < Ho * Wo; ++p) acc += g[p];
                        gb[static_cast<std::size_t>(co)] += static_cast<float>(acc);
                    }
            }
        };
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// structure ops
// ---------------------------------------------------------------------------

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 4 || b.shape().size() != 4 || a.shape()[0] != b.shape()[0] ||
        a.shape()[2] != b.shape()[2] || a.shape()[3] != b.shape()[3])
        fail("ShapeMismatch", "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int N = a.shape()[0], Ca = a.shape()[1], Cb = b.shape()[1];
    const int H = a.shape()[2], W = a.shape()[3];
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    auto n = detail::make_op({N, Ca + Cb, H, W}, {a.node(), b.node()});
    for (int i = 0; i < N; ++i) {
        std::memcpy(n->value.data() + (static_cast<std::size_t>(i) * (Ca + Cb)) * plane,
                    a.data().data() + static_cast<std::size_t>(i) * Ca * plane, sizeof(float) * Ca * plane);
        std::memcpy(n->value.data() + (static_cast<std::size_t>(i) * (Ca + Cb) + Ca) * plane,
                    b.data().data() + static_cast<std::size_t>(i) * Cb * plane, sizeof(float) * Cb * plane);
    }
    if (n->requires_grad)
        n->backprop = [N, Ca, Cb, plane](Node& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            for (int i = 0; i < N; ++i) {
                if (pa->requires_grad) {
                    auto& g = detail::grad_of(pa);
                    const float* src = self.grad.data() + (static_cast<std::size_t>(i) * (Ca + Cb)) * plane;
                    float* dst = g.data() + static_cast<std::size_t>(i) * Ca * plane;
                    for (std::size_t k = 0; k < Ca * plane; ++k) dst[k] += src[k];
                }
                if (pb->requires_grad) {
                    auto& g = detail::grad_of(pb);
                    const float* src = self.grad.data() + (static_cast<std::size_t>(i) * (Ca + Cb) + Ca) * plane;
                    float* dst = g.data() + static_cast<std::size_t>(i) * Cb * plane;
                    for (std::size_t k = 0; k < Cb * plane; ++k) dst[k] += src[k];
                }
            }
        };
    return Tensor(n);
}

inline Tensor global_avg_pool(const Tensor& x) {
    if (x.shape().size() != 4) fail("ShapeMismatch", "global_avg_pool: rank must be 4");
    const int N = x.shape()[0], C = x.shape()[1];
    const std::size_t plane = static_cast<std::size_t>(x.shape()[2]) * x.shape()[3];
    auto n = detail::make_op({N, C}, {x.node()});
    const float inv = 1.0f / static_cast<float>(plane);
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) {
            const float* src = x.data().data() + (static_cast<std::size_t>(i) * C + c) * plane;
            double acc = 0.0;
            for (std::size_t p = 0; p < plane; ++p) acc += src[p];
            n->value[static_cast<std::size_t>(i) * C + c] = static_cast<float>(acc) * inv;
        }
    detail::check_finite(*n, "global_avg_pool");
    if (n->requires_grad)
        n->backprop = [N, C, plane, inv](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c) {
                    float gv = self.grad[static_cast<std::size_t>(i) * C + c] * inv;
                    float* dst = g.data() + (static_cast<std::size_t>(i) * C + c) * plane;
                    for (std::size_t k = 0; k < plane; ++k) dst[k] += gv;
                }
        };
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// row ops over [N,M] matrices
// ---------------------------------------------------------------------------

inline Tensor softmax_rows(const Tensor& x) {
    if (x.shape().size() != 2) fail("ShapeMismatch", "softmax_rows: rank must be 2");
    const int N = x.shape()[0], M = x.shape()[1];
    auto n = detail::make_op({N, M}, {x.node()});
    for (int i = 0; i < N; ++i) {
        const float* row = x.data().data() + static_cast<std::size_t>(i) * M;
        float* out = n->value.data() + static_cast<std::size_t>(i) * M;
        float mx = row[0];
        for (int j = 1; j < M; ++j) mx = std::max(mx, row[j]);
        double den = 0.0;
        for (int j = 0; j < M; ++j) den += std::exp(static_cast<double>(row[j]) - mx);
        for (int j = 0; j < M; ++j)
            out[j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / den);
    }
    detail::check_finite(*n, "softmax_rows");
    if (n->requires_grad)
        n->backprop = [N, M](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            for (int i = 0; i < N; ++i) {
                const float* y = self.value.data() + static_cast<std::size_t>(i) * M;
                const float* gy = self.grad.data() + static_cast<std::size_t>(i) * M;
                double dot = 0.0;
                for (int j = 0; j < M; ++j) dot += static_cast<double>(gy[j]) * y[j];
                float* dst = g.data() + static_cast<std::size_t>(i) * M;
                for (int j = 0; j < M; ++j) dst[j] += y[j] * (gy[j] - static_cast<float>(dot));
            }
        };
    return Tensor(n);
}

inline Tensor l2_normalize_rows(const Tensor& x) {
    if (x.shape().size() != 2) fail("ShapeMismatch", "l2_normalize_rows: rank must be 2");
    const int N = x.shape()[0], M = x.shape()[1];
    auto n = detail::make_op({N, M}, {x.node()});
    std::vector<float> norms(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        const float* row = x.data().data() + static_cast<std::size_t>(i) * M;
        double s = 0.0;
        for (int j = 0; j < M; ++j) s += static_cast<double>(row[j]) * row[j];
        float norm = static_cast<float>(std::sqrt(s));
        norms[static_cast<std::size_t>(i)] = norm;
        float* out = n->value.data() + static_cast<std::size_t>(i) * M;
        if (norm > 1e-12f)
            for (int j = 0; j < M; ++j) out[j] = row[j] / norm;
        // zero rows stay zero (degenerate, only for empty token sequences)
    }
    detail::check_finite(*n, "l2_normalize_rows");
    if (n->requires_grad)
        n->backprop = [N, M, norms](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            for (int i = 0; i < N; ++i) {
                float norm = norms[static_cast<std::size_t>(i)];
                if (norm <= 1e-12f) continue;
                const float* y = self.value.data() + static_cast<std::size_t>(i) * M;
                const float* gy = self.grad.data() + static_cast<std::size_t>(i) * M;
                double dot = 0.0;
                for (int j = 0; j < M; ++j) dot += static_cast<double>(gy[j]) * y[j];
                float* dst = g.data() + static_cast<std::size_t>(i) * M;
                for (int j = 0; j < M; ++j)
                    dst[j] += (gy[j] - static_cast<float>(dot) * y[j]) / norm;
            }
        };
    return Tensor(n);
}

// Stabilized log(sum_j mask[i][j] * exp(x[i][j])) per row. An all-ones mask
// gives the plain row log-sum-exp.
inline Tensor row_logsumexp_masked(const Tensor& x, const std::vector<std::uint8_t>& mask) {
    if (x.shape().size() != 2) fail("ShapeMismatch", "row_logsumexp_masked: rank must be 2");
    const int N = x.shape()[0], M = x.shape()[1];
    if (mask.size() != static_cast<std::size_t>(N) * M)
        fail("ShapeMismatch", "row_logsumexp_masked: mask size mismatch");
    auto n = detail::make_op({N}, {x.node()});
    for (int i = 0; i < N; ++i) {
        const float* row = x.data().data() + static_cast<std::size_t>(i) * M;
        const std::uint8_t* mrow = mask.data() + static_cast<std::size_t>(i) * M;
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < M; ++j)
            if (mrow[j]) mx = std::max(mx, row[j]);
        if (!std::isfinite(mx)) fail("EmptyPositiveSet", "row " + std::to_string(i) + " has no active entries");
        double s = 0.0;
        for (int j = 0; j < M; ++j)
            if (mrow[j]) s += std::exp(static_cast<double>(row[j]) - mx);
        n->value[static_cast<std::size_t>(i)] = mx + static_cast<float>(std::log(s));
    }
    detail::check_finite(*n, "row_logsumexp_masked");
    if (n->requires_grad)
        n->backprop = [N, M, mask](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            for (int i = 0; i < N; ++i) {
                float out = self.value[static_cast<std::size_t>(i)];
                float gv = self.grad[static_cast<std::size_t>(i)];
                const float* row = p->value.data() + static_cast<std::size_t>(i) * M;
                const std::uint8_t* mrow = mask.data() + static_cast<std::size_t>(i) * M;
                float* dst = g.data() + static_cast<std::size_t>(i) * M;
                for (int j = 0; j < M; ++j)
                    if (mrow[j]) dst[j] += gv * std::exp(row[j] - out);
            }
        };
    return Tensor(n);
}

inline Tensor row_logsumexp(const Tensor& x) {
    std::vector<std::uint8_t> ones(x.numel(), 1);
    return row_logsumexp_masked(x, ones);
}

inline Tensor take_diag(const Tensor& x) {
    if (x.shape().size() != 2 || x.shape()[0] != x.shape()[1])
        fail("ShapeMismatch", "take_diag: matrix must be square");
    const int N = x.shape()[0];
    auto n = detail::make_op({N}, {x.node()});
    for (int i = 0; i < N; ++i) n->value[static_cast<std::size_t>(i)] = x.data()[static_cast<std::size_t>(i) * N + i];
    if (n->requires_grad)
        n->backprop = [N](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            for (int i = 0; i < N; ++i) g[static_cast<std::size_t>(i) * N + i] += self.grad[static_cast<std::size_t>(i)];
        };
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Mean binary cross-entropy over all entries, evaluated from logits with the
// usual overflow-free form. Targets are constants.
inline Tensor bce_with_logits_mean(const Tensor& logits, const std::vector<float>& targets) {
    if (targets.size() != logits.numel()) fail("ShapeMismatch", "bce_with_logits_mean: target size mismatch");
    auto n = detail::make_op({1}, {logits.node()});
    double acc = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        double x = logits.data()[i], t = targets[i];
        acc += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    const double inv = 1.0 / static_cast<double>(targets.size());
    n->value[0] = static_cast<float>(acc * inv);
    detail::check_finite(*n, "bce_with_logits_mean");
    if (n->requires_grad)
        n->backprop = [targets, inv](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            float gv = self.grad[0] * static_cast<float>(inv);
            for (std::size_t i = 0; i < targets.size(); ++i) {
                float sig = 1.0f / (1.0f + std::exp(-p->value[i]));
                g[i] += gv * (sig - targets[i]);
            }
        };
    return Tensor(n);
}

// Mean squared difference against a constant target buffer.
inline Tensor mse_against_const(const Tensor& x, const std::vector<float>& target) {
    if (target.size() != x.numel()) fail("ShapeMismatch", "mse_against_const: size mismatch");
    auto n = detail::make_op({1}, {x.node()});
    double acc = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        double d = static_cast<double>(x.data()[i]) - target[i];
        acc += d * d;
    }
    const double inv = 1.0 / static_cast<double>(target.size());
    n->value[0] = static_cast<float>(acc * inv);
    detail::check_finite(*n, "mse_against_const");
    if (n->requires_grad)
        n->backprop = [target, inv](Node& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            auto& g = detail::grad_of(p);
            float gv = self.grad[0] * static_cast<float>(2.0 * inv);
            for (std::size_t i = 0; i < target.size(); ++i) g[i] += gv * (p->value[i] - target[i]);
        };
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Populates grad buffers of every grad-requiring node reachable from `loss`.
// Parameters not reachable keep an empty grad, which readers treat as zero.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) fail("NonScalarLoss", "backward requires a scalar loss");
    if (!loss.node()->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.node().get()};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Node* cur = stack.back();
        stack.pop_back();
        order.push_back(cur);
        for (const auto& p : cur->parents) {
            if (!p->requires_grad) continue;
            if (seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });
    for (Node* nd : order) nd->grad.assign(nd->value.size(), 0.0f);
    loss.node()->grad[0] = 1.0f;
    for (Node* nd : order)
        if (nd->backprop) nd->backprop(*nd);
}

} // namespace lvb::num
