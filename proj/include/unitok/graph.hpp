#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "unitok/tensor.hpp"

namespace unitok {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

// C (+)= A[M,K] * B[K,N], row-major raw pointers.
template <typename T>
void gemm_nn(T* c, const T* a, const T* b, int m, int k, int n, bool accum) {
    MatMap<T> C(c, m, n);
    CMatMap<T> A(a, m, k), B(b, k, n);
    if (accum)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// C (+)= A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(T* c, const T* a, const T* b, int m, int k, int n, bool accum) {
    MatMap<T> C(c, m, n);
    CMatMap<T> A(a, m, k), B(b, n, k);
    if (accum)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

// C (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(T* c, const T* a, const T* b, int m, int k, int n, bool accum) {
    MatMap<T> C(c, m, n);
    CMatMap<T> A(a, k, m), B(b, k, n);
    if (accum)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

template <typename T>
T gelu_fwd(T x) {
    const T c0 = T(0.7978845608), c1 = T(0.044715);
    return T(0.5) * x * (T(1) + std::tanh(c0 * (x + c1 * x * x * x)));
}

template <typename T>
T gelu_bwd(T x) {
    const T c0 = T(0.7978845608), c1 = T(0.044715);
    T u = c0 * (x + c1 * x * x * x);
    T t = std::tanh(u);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c0 * (T(1) + T(3) * c1 * x * x);
}

}  // namespace detail

// Reverse-mode graph. Nodes are appended in creation order, which is a
// topological order by construction; backward walks ids in reverse and
// visits each node at most once.
template <typename T>
class GraphT {
  public:
    struct Node {
        std::string op;
        std::vector<int> inputs;
        TensorT<T> value;  // value.grad doubles as the adjoint buffer
        bool requires_grad = false;
        std::function<void(GraphT&, Node&)> backward_fn;
    };

    int add_node(std::string op, std::vector<int> inputs, TensorT<T> value,
                 std::function<void(GraphT&, Node&)> bwd) {
        Node n;
        n.op = std::move(op);
        n.inputs = std::move(inputs);
        bool rg = false;
        for (int i : n.inputs) rg = rg || nodes_[static_cast<size_t>(i)].requires_grad;
        n.value = std::move(value);
        n.requires_grad = rg || n.value.requires_grad;
        n.value.requires_grad = n.requires_grad;
        n.backward_fn = std::move(bwd);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t size() const { return nodes_.size(); }

    void accum_grad(int id, const T* g, int64_t n) {
        Node& nd = nodes_[static_cast<size_t>(id)];
        if (!nd.requires_grad) return;
        if (nd.value.grad.empty()) {  // first touch: copy beats zero-fill + add
            nd.value.grad.assign(g, g + n);
            return;
        }
        T* dst = nd.value.grad.data();
        for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
    }

    void backward(int loss_id) {
        if (backward_done_)
            throw std::runtime_error("backward already called on this graph; build a fresh graph per step");
        if (node(loss_id).value.numel() != 1)
            throw std::runtime_error("backward requires a scalar loss, got shape " +
                                     shape_str(node(loss_id).value.shape));
        backward_done_ = true;
        Node& loss = node(loss_id);
        loss.value.ensure_grad();
        loss.value.grad[0] = T(1);
        for (int id = loss_id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.requires_grad || n.value.grad.empty()) continue;
            if (n.backward_fn) n.backward_fn(*this, n);
        }
    }

    bool backward_done() const { return backward_done_; }

  private:
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

template <typename T>
struct RefT {
    GraphT<T>* g = nullptr;
    int id = -1;

    // value() is only valid until the next node is added (the arena may
    // reallocate); shape() returns a copy for exactly that reason.
    TensorT<T>& value() const { return g->node(id).value; }
    Shape shape() const { return g->node(id).value.shape; }
    int64_t numel() const { return g->node(id).value.numel(); }
};

using Graph = GraphT<float>;
using Ref = RefT<float>;

template <typename T>
RefT<T> leaf(GraphT<T>& g, TensorT<T> t) {
    // Grad storage stays empty until backward reaches this leaf, so "empty"
    // reliably means "not part of the differentiated subgraph".
    t.grad.clear();
    int id = g.add_node("leaf", {}, std::move(t), nullptr);
    return {&g, id};
}

template <typename T>
RefT<T> constant(GraphT<T>& g, TensorT<T> t) {
    t.requires_grad = false;
    int id = g.add_node("const", {}, std::move(t), nullptr);
    return {&g, id};
}

namespace detail {

// Batched matmul bookkeeping: leading dims broadcast against each other.
inline Shape broadcast_batch(const Shape& a, const Shape& b, const char* op,
                             const Shape& fa, const Shape& fb) {
    size_t nd = std::max(a.size(), b.size());
    Shape out(nd, 1);
    for (size_t i = 0; i < nd; ++i) {
        int da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        int db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": batch dims not broadcastable: " + shape_str(fa) +
                             " vs " + shape_str(fb));
        out[i] = std::max(da, db);
    }
    return out;
}

inline std::vector<int64_t> batch_strides(const Shape& batch_full, const Shape& own_batch) {
    // stride (in units of matrices) into an operand for each output batch index
    std::vector<int64_t> strides(batch_full.size(), 0);
    int64_t s = 1;
    size_t off = batch_full.size() - own_batch.size();
    for (size_t i = batch_full.size(); i-- > 0;) {
        if (i >= off && own_batch[i - off] != 1) {
            strides[i] = s;
            s *= own_batch[i - off];
        }
    }
    return strides;
}

inline int64_t batch_offset(int64_t flat, const Shape& batch, const std::vector<int64_t>& strides) {
    int64_t off = 0;
    for (size_t i = batch.size(); i-- > 0;) {
        int64_t idx = flat % batch[i];
        flat /= batch[i];
        off += idx * strides[i];
    }
    return off;
}

}  // namespace detail

// a[..,M,K] x b[..,K,N] -> [..,M,N]; leading dims broadcast.
template <typename T>
RefT<T> matmul(RefT<T> a, RefT<T> b) {
    GraphT<T>& g = *a.g;
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2)
        throw ShapeError("matmul: operands must have >=2 dims: " + shape_str(sa) + " vs " + shape_str(sb));
    int M = sa[sa.size() - 2], K = sa[sa.size() - 1];
    int Kb = sb[sb.size() - 2], N = sb[sb.size() - 1];
    if (K != Kb)
        throw ShapeError("matmul: inner dims mismatch: " + shape_str(sa) + " x " + shape_str(sb));
    Shape ba(sa.begin(), sa.end() - 2), bb(sb.begin(), sb.end() - 2);
    Shape batch = detail::broadcast_batch(ba, bb, "matmul", sa, sb);
    int64_t nbatch = numel(batch);
    auto stra = detail::batch_strides(batch, ba);
    auto strb = detail::batch_strides(batch, bb);

    Shape so = batch;
    so.push_back(M);
    so.push_back(N);
    TensorT<T> out(so);
    const int64_t am = int64_t(M) * K, bm = int64_t(K) * N, om = int64_t(M) * N;
    {
        const T* pa = a.value().data.data();
        const T* pb = b.value().data.data();
        T* po = out.data.data();
        for (int64_t i = 0; i < nbatch; ++i) {
            detail::gemm_nn(po + i * om, pa + detail::batch_offset(i, batch, stra) * am,
                            pb + detail::batch_offset(i, batch, strb) * bm, M, K, N, false);
        }
    }
    int aid = a.id, bid = b.id;
    int id = g.add_node(
        "matmul", {aid, bid}, std::move(out),
        [=](GraphT<T>& gr, typename GraphT<T>::Node& n) {
            auto& na = gr.node(aid);
            auto& nb = gr.node(bid);
            const T* go = n.value.grad.data();
            if (na.requires_grad) {
                na.value.ensure_grad();
                for (int64_t i = 0; i < nbatch; ++i) {
                    // dA += dC * B^T  (accumulates across broadcast copies)
                    detail::gemm_nt(na.value.grad.data() + detail::batch_offset(i, batch, stra) * am,
                                    go + i * om,
                                    nb.value.data.data() + detail::batch_offset(i, batch, strb) * bm,
                                    M, N, K, true);
                }
            }
            if (nb.requires_grad) {
                nb.value.ensure_grad();
                for (int64_t i = 0; i < nbatch; ++i) {
                    // dB += A^T * dC
                    detail::gemm_tn(nb.value.grad.data() + detail::batch_offset(i, batch, strb) * bm,
                                    na.value.data.data() + detail::batch_offset(i, batch, stra) * am,
                                    go + i * om, K, M, N, true);
                }
            }
        });
    return {&g, id};
}

namespace detail {

enum class BinKind { Add, Sub, Mul };

template <typename T>
RefT<T> binary_op(RefT<T> a, RefT<T> b, BinKind kind, const char* name) {
    GraphT<T>& g = *a.g;
    bool a_scalar = a.numel() == 1, b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && !same_shape(a.shape(), b.shape()))
        throw ShapeError(std::string(name) + ": shapes must match or broadcast from a scalar: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const Shape& so = a_scalar && !b_scalar ? b.shape() : a.shape();
    int64_t n = numel(so);
    TensorT<T> out(so);
    {
        const T* pa = a.value().data.data();
        const T* pb = b.value().data.data();
        T* po = out.data.data();
        for (int64_t i = 0; i < n; ++i) {
            T va = pa[a_scalar ? 0 : i], vb = pb[b_scalar ? 0 : i];
            po[i] = kind == BinKind::Add ? va + vb : kind == BinKind::Sub ? va - vb : va * vb;
        }
    }
    int aid = a.id, bid = b.id;
    int id = g.add_node(
        name, {aid, bid}, std::move(out),
        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
            auto& na = gr.node(aid);
            auto& nb = gr.node(bid);
            const T* go = nd.value.grad.data();
            if (na.requires_grad) {
                na.value.ensure_grad();
                T* da = na.value.grad.data();
                for (int64_t i = 0; i < n; ++i) {
                    T gv = go[i];
                    if (kind == BinKind::Mul) gv *= nb.value.data[b_scalar ? 0 : i];
                    da[a_scalar ? 0 : i] += gv;
                }
            }
            if (nb.requires_grad) {
                nb.value.ensure_grad();
                T* db = nb.value.grad.data();
                for (int64_t i = 0; i < n; ++i) {
                    T gv = go[i];
                    if (kind == BinKind::Sub) gv = -gv;
                    if (kind == BinKind::Mul) gv = go[i] * na.value.data[a_scalar ? 0 : i];
                    db[b_scalar ? 0 : i] += gv;
                }
            }
        });
    return {&g, id};
}

enum class UnKind { Gelu, Exp, Log };

template <typename T>
RefT<T> unary_op(RefT<T> a, UnKind kind, const char* name) {
    GraphT<T>& g = *a.g;
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    using ArrMap = Eigen::Map<Arr>;
    using CArrMap = Eigen::Map<const Arr>;
    int64_t n = a.numel();
    TensorT<T> out(a.shape());
    {
        const T* pa = a.value().data.data();
        T* po = out.data.data();
        CArrMap x(pa, n);
        ArrMap y(po, n);
        switch (kind) {
            case UnKind::Gelu: {
                const T c0 = T(0.7978845608), c1 = T(0.044715);
                y = T(0.5) * x * (T(1) + (c0 * (x + c1 * x.cube())).tanh());
                break;
            }
            case UnKind::Exp:
                y = x.exp();
                break;
            case UnKind::Log:
                for (int64_t i = 0; i < n; ++i) {
                    if (!(pa[i] > T(0)))
                        throw DomainError("log: non-positive input " + std::to_string((double)pa[i]));
                    po[i] = std::log(pa[i]);
                }
                break;
        }
    }
    int aid = a.id;
    int id = g.add_node(
        name, {aid}, std::move(out),
        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
            auto& na = gr.node(aid);
            if (!na.requires_grad) return;
            na.value.ensure_grad();
            const T* go = nd.value.grad.data();
            const T* pa = na.value.data.data();
            const T* po = nd.value.data.data();
            T* da = na.value.grad.data();
            CArrMap x(pa, n), dy(go, n), y(po, n);
            ArrMap dx(da, n);
            switch (kind) {
                case UnKind::Gelu: {
                    const T c0 = T(0.7978845608), c1 = T(0.044715);
                    Arr t = (c0 * (x + c1 * x.cube())).tanh();
                    dx += dy * (T(0.5) * (T(1) + t) +
                                T(0.5) * x * (T(1) - t.square()) * c0 * (T(1) + T(3) * c1 * x.square()));
                    break;
                }
                case UnKind::Exp:
                    dx += dy * y;
                    break;
                case UnKind::Log:
                    dx += dy / x;
                    break;
            }
        });
    return {&g, id};
}

}  // namespace detail

template <typename T>
RefT<T> add(RefT<T> a, RefT<T> b) { return detail::binary_op(a, b, detail::BinKind::Add, "add"); }
template <typename T>
RefT<T> sub(RefT<T> a, RefT<T> b) { return detail::binary_op(a, b, detail::BinKind::Sub, "sub"); }
template <typename T>
RefT<T> mul(RefT<T> a, RefT<T> b) { return detail::binary_op(a, b, detail::BinKind::Mul, "mul"); }
template <typename T>
RefT<T> gelu(RefT<T> a) { return detail::unary_op(a, detail::UnKind::Gelu, "gelu"); }
template <typename T>
RefT<T> exp(RefT<T> a) { return detail::unary_op(a, detail::UnKind::Exp, "exp"); }
template <typename T>
RefT<T> log(RefT<T> a) { return detail::unary_op(a, detail::UnKind::Log, "log"); }

// x * c with a compile-time-constant multiplier.
template <typename T>
RefT<T> scale(RefT<T> a, double c) {
    GraphT<T>& g = *a.g;
    int64_t n = a.numel();
    TensorT<T> out(a.shape());
    for (int64_t i = 0; i < n; ++i) out.data[i] = a.value().data[i] * static_cast<T>(c);
    int aid = a.id;
    int id = g.add_node("scale", {aid}, std::move(out),
                        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
                            auto& na = gr.node(aid);
                            if (!na.requires_grad) return;
                            na.value.ensure_grad();
                            for (int64_t i = 0; i < n; ++i)
                                na.value.grad[i] += nd.value.grad[i] * static_cast<T>(c);
                        });
    return {&g, id};
}

// x[..,D] + bias[D]
template <typename T>
RefT<T> add_bias(RefT<T> x, RefT<T> b) {
    GraphT<T>& g = *x.g;
    int D = x.shape().back();
    if (b.shape() != Shape{D})
        throw ShapeError("add_bias: bias shape " + shape_str(b.shape()) + " vs feature dim " + std::to_string(D));
    int64_t rows = x.numel() / D;
    TensorT<T> out(x.shape());
    {
        const T* px = x.value().data.data();
        const T* pb = b.value().data.data();
        T* po = out.data.data();
        for (int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < D; ++j) po[r * D + j] = px[r * D + j] + pb[j];
    }
    int xid = x.id, bid = b.id;
    int id = g.add_node("add_bias", {xid, bid}, std::move(out),
                        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
                            auto& nx = gr.node(xid);
                            auto& nb = gr.node(bid);
                            const T* go = nd.value.grad.data();
                            if (nx.requires_grad) gr.accum_grad(xid, go, rows * D);
                            if (nb.requires_grad) {
                                nb.value.ensure_grad();
                                T* db = nb.value.grad.data();
                                for (int64_t r = 0; r < rows; ++r)
                                    for (int j = 0; j < D; ++j) db[j] += go[r * D + j];
                            }
                        });
    return {&g, id};
}

// x[N,T,D] + pos[P,D] using the first T rows of the table (P >= T).
template <typename T>
RefT<T> add_pos(RefT<T> x, RefT<T> pos) {
    GraphT<T>& g = *x.g;
    const Shape& sx = x.shape();
    const Shape& sp = pos.shape();
    if (sx.size() != 3 || sp.size() != 2 || sp[1] != sx[2] || sp[0] < sx[1])
        throw ShapeError("add_pos: table " + shape_str(sp) + " incompatible with tokens " + shape_str(sx));
    int N = sx[0], Tn = sx[1], D = sx[2];
    TensorT<T> out(sx);
    {
        const T* px = x.value().data.data();
        const T* pp = pos.value().data.data();
        T* po = out.data.data();
        for (int n = 0; n < N; ++n)
            for (int64_t i = 0; i < int64_t(Tn) * D; ++i)
                po[int64_t(n) * Tn * D + i] = px[int64_t(n) * Tn * D + i] + pp[i];
    }
    int xid = x.id, pid = pos.id;
    int id = g.add_node("add_pos", {xid, pid}, std::move(out),
                        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
                            auto& nx = gr.node(xid);
                            auto& np = gr.node(pid);
                            const T* go = nd.value.grad.data();
                            if (nx.requires_grad) gr.accum_grad(xid, go, int64_t(N) * Tn * D);
                            if (np.requires_grad) {
                                np.value.ensure_grad();
                                for (int n = 0; n < N; ++n)
                                    for (int64_t i = 0; i < int64_t(Tn) * D; ++i)
                                        np.value.grad[static_cast<size_t>(i)] += go[int64_t(n) * Tn * D + i];
                            }
                        });
    return {&g, id};
}

// layer norm over the last axis, learned affine.
template <typename T>
RefT<T> layer_norm(RefT<T> x, RefT<T> gamma, RefT<T> beta, double eps = 1e-5) {
    GraphT<T>& g = *x.g;
    if (x.shape().empty()) throw ShapeError("layer_norm: rank-0 input");
    int D = x.shape().back();
    if (gamma.shape() != Shape{D} || beta.shape() != Shape{D})
        throw ShapeError("layer_norm: affine params must be [D]=" + std::to_string(D) + ", got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    if (eps <= 0) throw DomainError("layer_norm: eps must be positive");
    int64_t rows = x.numel() / D;
    TensorT<T> out(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(rows) * D);
    auto rstd = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    {
        const T* px = x.value().data.data();
        const T* pg = gamma.value().data.data();
        const T* pb = beta.value().data.data();
        T* po = out.data.data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px + r * D;
            T mu = 0;
            for (int j = 0; j < D; ++j) mu += xr[j];
            mu /= static_cast<T>(D);
            T var = 0;
            for (int j = 0; j < D; ++j) {
                T d = xr[j] - mu;
                var += d * d;
            }
            var /= static_cast<T>(D);
            T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
            (*rstd)[static_cast<size_t>(r)] = rs;
            for (int j = 0; j < D; ++j) {
                T xh = (xr[j] - mu) * rs;
                (*xhat)[static_cast<size_t>(r * D + j)] = xh;
                po[r * D + j] = xh * pg[j] + pb[j];
            }
        }
    }
    int xid = x.id, gid = gamma.id, bid = beta.id;
    int id = g.add_node(
        "layer_norm", {xid, gid, bid}, std::move(out),
        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
            auto& nx = gr.node(xid);
            auto& ng = gr.node(gid);
            auto& nb = gr.node(bid);
            const T* go = nd.value.grad.data();
            if (ng.requires_grad) {
                ng.value.ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < D; ++j)
                        ng.value.grad[static_cast<size_t>(j)] +=
                            go[r * D + j] * (*xhat)[static_cast<size_t>(r * D + j)];
            }
            if (nb.requires_grad) {
                nb.value.ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < D; ++j) nb.value.grad[static_cast<size_t>(j)] += go[r * D + j];
            }
            if (nx.requires_grad) {
                nx.value.ensure_grad();
                const T* pg = ng.value.data.data();
                T* dx = nx.value.grad.data();
                for (int64_t r = 0; r < rows; ++r) {
                    T mean_dxh = 0, mean_dxh_xh = 0;
                    for (int j = 0; j < D; ++j) {
                        T dxh = go[r * D + j] * pg[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * (*xhat)[static_cast<size_t>(r * D + j)];
                    }
                    mean_dxh /= static_cast<T>(D);
                    mean_dxh_xh /= static_cast<T>(D);
                    T rs = (*rstd)[static_cast<size_t>(r)];
                    for (int j = 0; j < D; ++j) {
                        T dxh = go[r * D + j] * pg[j];
                        T xh = (*xhat)[static_cast<size_t>(r * D + j)];
                        dx[r * D + j] += rs * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
            }
        });
    return {&g, id};
}

// Mean NLL over non-ignored positions; max-subtracted log-sum-exp.
template <typename T>
RefT<T> softmax_cross_entropy(RefT<T> logits, const std::vector<int>& targets, int ignore_index = -1) {
    GraphT<T>& g = *logits.g;
    if (logits.shape().size() != 2)
        throw ShapeError("softmax_cross_entropy: logits must be [N,V], got " + shape_str(logits.shape()));
    int N = logits.shape()[0], V = logits.shape()[1];
    if (static_cast<int>(targets.size()) != N)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for N=" +
                         std::to_string(N));
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * V);
    int count = 0;
    double loss = 0;
    {
        const T* pl = logits.value().data.data();
        for (int r = 0; r < N; ++r) {
            int t = targets[static_cast<size_t>(r)];
            if (t == ignore_index) continue;
            if (t < 0 || t >= V)
                throw DomainError("softmax_cross_entropy: target " + std::to_string(t) +
                                  " out of range [0," + std::to_string(V) + ")");
            const T* row = pl + static_cast<int64_t>(r) * V;
            T mx = row[0];
            for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
            double sum = 0;
            for (int j = 0; j < V; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
            double lse = std::log(sum) + static_cast<double>(mx);
            loss += lse - static_cast<double>(row[t]);
            T* pr = probs->data() + static_cast<int64_t>(r) * V;
            for (int j = 0; j < V; ++j)
                pr[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
            ++count;
        }
    }
    if (count == 0) throw DomainError("softmax_cross_entropy: every target is ignored; mean undefined");
    TensorT<T> out(Shape{1});
    out.data[0] = static_cast<T>(loss / count);
    int lid = logits.id;
    auto tgt = std::make_shared<std::vector<int>>(targets);
    int id = g.add_node(
        "softmax_cross_entropy", {lid}, std::move(out),
        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
            auto& nl = gr.node(lid);
            if (!nl.requires_grad) return;
            nl.value.ensure_grad();
            T go = nd.value.grad[0];
            T invc = go / static_cast<T>(count);
            T* dl = nl.value.grad.data();
            for (int r = 0; r < N; ++r) {
                int t = (*tgt)[static_cast<size_t>(r)];
                if (t == ignore_index) continue;
                const T* pr = probs->data() + static_cast<int64_t>(r) * V;
                T* dr = dl + static_cast<int64_t>(r) * V;
                for (int j = 0; j < V; ++j) dr[j] += invc * pr[j];
                dr[t] -= invc;
            }
        });
    return {&g, id};
}

// softmax(q k^T / sqrt(Dh)) v over [B,H,T,Dh]; optional causal mask and
// per-row key padding mask [B,T] (0 = masked out).
template <typename T>
RefT<T> attention(RefT<T> q, RefT<T> k, RefT<T> v, bool causal,
                  const std::vector<uint8_t>* key_mask = nullptr) {
    GraphT<T>& g = *q.g;
    const Shape& sq = q.shape();
    if (sq.size() != 4 || k.shape() != sq || v.shape() != sq)
        throw ShapeError("attention: q,k,v must share a [B,H,T,Dh] shape: " + shape_str(sq) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
    int B = sq[0], H = sq[1], Tn = sq[2], Dh = sq[3];
    if (key_mask && static_cast<int>(key_mask->size()) != B * Tn)
        throw ShapeError("attention: key mask must be [B,T]");
    T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(Dh)));
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * H * Tn * Tn);
    std::shared_ptr<std::vector<uint8_t>> mask;
    if (key_mask) mask = std::make_shared<std::vector<uint8_t>>(*key_mask);
    TensorT<T> out(sq);
    const int64_t mat = int64_t(Tn) * Dh, pmat = int64_t(Tn) * Tn;
    {
        const T* pq = q.value().data.data();
        const T* pk = k.value().data.data();
        const T* pv = v.value().data.data();
        T* po = out.data.data();
        std::vector<T> scores(static_cast<size_t>(Tn) * Tn);
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < H; ++h) {
                int64_t o = (int64_t(b) * H + h);
                detail::gemm_nt(scores.data(), pq + o * mat, pk + o * mat, Tn, Dh, Tn, false);
                T* P = probs->data() + o * pmat;
                for (int i = 0; i < Tn; ++i) {
                    T* row = scores.data() + static_cast<int64_t>(i) * Tn;
                    T mx = -std::numeric_limits<T>::infinity();
                    for (int j = 0; j < Tn; ++j) {
                        bool dead = (causal && j > i) || (mask && !(*mask)[static_cast<size_t>(b) * Tn + j]);
                        row[j] = dead ? -std::numeric_limits<T>::infinity() : row[j] * inv_sqrt;
                        mx = std::max(mx, row[j]);
                    }
                    T* pr = P + static_cast<int64_t>(i) * Tn;
                    if (!(mx > -std::numeric_limits<T>::infinity())) {
                        for (int j = 0; j < Tn; ++j) pr[j] = T(0);  // fully masked row
                        continue;
                    }
                    T sum = 0;
                    for (int j = 0; j < Tn; ++j) {
                        T e = row[j] > -std::numeric_limits<T>::infinity() ? std::exp(row[j] - mx) : T(0);
                        pr[j] = e;
                        sum += e;
                    }
                    T inv = T(1) / sum;
                    for (int j = 0; j < Tn; ++j) pr[j] *= inv;
                }
                detail::gemm_nn(po + o * mat, P, pv + o * mat, Tn, Tn, Dh, false);
            }
    }
    int qid = q.id, kid = k.id, vid = v.id;
    int id = g.add_node(
        "attention", {qid, kid, vid}, std::move(out),
        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
            auto& nq = gr.node(qid);
            auto& nk = gr.node(kid);
            auto& nv = gr.node(vid);
            if (!(nq.requires_grad || nk.requires_grad || nv.requires_grad)) return;
            nq.value.ensure_grad();
            nk.value.ensure_grad();
            nv.value.ensure_grad();
            const T* go = nd.value.grad.data();
            std::vector<T> dP(static_cast<size_t>(Tn) * Tn), dS(static_cast<size_t>(Tn) * Tn);
            for (int b = 0; b < B; ++b)
                for (int h = 0; h < H; ++h) {
                    int64_t o = (int64_t(b) * H + h);
                    const T* P = probs->data() + o * pmat;
                    // dV += P^T dO
                    detail::gemm_tn(nv.value.grad.data() + o * mat, P, go + o * mat, Tn, Tn, Dh, true);
                    // dP = dO V^T
                    detail::gemm_nt(dP.data(), go + o * mat, nv.value.data.data() + o * mat, Tn, Dh, Tn, false);
                    // dS = P o (dP - rowsum(dP o P))
                    for (int i = 0; i < Tn; ++i) {
                        const T* pr = P + static_cast<int64_t>(i) * Tn;
                        const T* dpr = dP.data() + static_cast<int64_t>(i) * Tn;
                        T dot = 0;
                        for (int j = 0; j < Tn; ++j) dot += pr[j] * dpr[j];
                        T* ds = dS.data() + static_cast<int64_t>(i) * Tn;
                        for (int j = 0; j < Tn; ++j) ds[j] = pr[j] * (dpr[j] - dot) * inv_sqrt;
                    }
                    // dQ += dS K ; dK += dS^T Q
                    detail::gemm_nn(nq.value.grad.data() + o * mat, dS.data(),
                                    nk.value.data.data() + o * mat, Tn, Tn, Dh, true);
                    detail::gemm_tn(nk.value.grad.data() + o * mat, dS.data(),
                                    nq.value.data.data() + o * mat, Tn, Tn, Dh, true);
                }
        });
    return {&g, id};
}

namespace detail {

inline std::vector<int64_t> row_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

}  // namespace detail

namespace detail {

// Walks the output of a permutation in linear order, handing the callback one
// (dst_offset, src_offset) pair per contiguous inner run of length `inner`
// with source stride `gin`. Shared by permute's forward and backward passes.
template <typename F>
void permute_walk(const Shape& so, const std::vector<int64_t>& gather, F&& fn) {
    int rank = static_cast<int>(so.size());
    int64_t n = numel(so);
    int64_t inner = so[static_cast<size_t>(rank - 1)];
    int64_t gin = gather[static_cast<size_t>(rank - 1)];
    std::vector<int64_t> idx(static_cast<size_t>(rank > 0 ? rank - 1 : 0), 0);
    int64_t src = 0;
    for (int64_t o = 0; o < n; o += inner) {
        fn(o, src, inner, gin);
        for (int a = rank - 2; a >= 0; --a) {
            src += gather[static_cast<size_t>(a)];
            if (++idx[static_cast<size_t>(a)] < so[static_cast<size_t>(a)]) break;
            src -= gather[static_cast<size_t>(a)] * so[static_cast<size_t>(a)];
            idx[static_cast<size_t>(a)] = 0;
        }
    }
}

}  // namespace detail

// Generic axis permutation (rank <= 4 is all the model needs, but the loop is generic).
template <typename T>
RefT<T> permute(RefT<T> x, const std::vector<int>& perm) {
    GraphT<T>& g = *x.g;
    const Shape sx = x.shape();
    if (perm.size() != sx.size() || sx.empty())
        throw ShapeError("permute: perm rank mismatch for " + shape_str(sx));
    Shape so(sx.size());
    for (size_t i = 0; i < perm.size(); ++i) so[i] = sx[static_cast<size_t>(perm[i])];
    auto src_st = detail::row_strides(sx);
    // stride into source for each output axis
    std::vector<int64_t> gather(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) gather[i] = src_st[static_cast<size_t>(perm[i])];
    TensorT<T> out(so);
    {
        const T* px = x.value().data.data();
        T* po = out.data.data();
        detail::permute_walk(so, gather, [&](int64_t o, int64_t src, int64_t inner, int64_t gin) {
            if (gin == 1)
                std::copy(px + src, px + src + inner, po + o);
            else
                for (int64_t j = 0; j < inner; ++j) po[o + j] = px[src + j * gin];
        });
    }
    int xid = x.id;
    int id = g.add_node("permute", {xid}, std::move(out),
                        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
                            auto& nx = gr.node(xid);
                            if (!nx.requires_grad) return;
                            nx.value.ensure_grad();
                            const T* go = nd.value.grad.data();
                            T* dx = nx.value.grad.data();
                            detail::permute_walk(
                                so, gather, [&](int64_t o, int64_t src, int64_t inner, int64_t gin) {
                                    for (int64_t j = 0; j < inner; ++j) dx[src + j * gin] += go[o + j];
                                });
                        });
    return {&g, id};
}

template <typename T>
RefT<T> reshape(RefT<T> x, Shape s) {
    GraphT<T>& g = *x.g;
    if (numel(s) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(s));
    TensorT<T> out(s, x.value().data);
    int xid = x.id;
    int64_t n = x.numel();
    int id = g.add_node("reshape", {xid}, std::move(out),
                        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
                            gr.accum_grad(xid, nd.value.grad.data(), n);
                        });
    return {&g, id};
}

// concat along axis 1 of [N,L,D] tensors
template <typename T>
RefT<T> concat_tokens(RefT<T> a, RefT<T> b) {
    GraphT<T>& g = *a.g;
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
        throw ShapeError("concat_tokens: incompatible " + shape_str(sa) + " and " + shape_str(sb));
    int N = sa[0], La = sa[1], Lb = sb[1], D = sa[2];
    TensorT<T> out(Shape{N, La + Lb, D});
    {
        const T* pa = a.value().data.data();
        const T* pb = b.value().data.data();
        T* po = out.data.data();
        for (int r = 0; r < N; ++r) {
            std::copy(pa + int64_t(r) * La * D, pa + int64_t(r + 1) * La * D,
                      po + int64_t(r) * (La + Lb) * D);
            std::copy(pb + int64_t(r) * Lb * D, pb + int64_t(r + 1) * Lb * D,
                      po + int64_t(r) * (La + Lb) * D + int64_t(La) * D);
        }
    }
    int aid = a.id, bid = b.id;
    int id = g.add_node(
        "concat_tokens", {aid, bid}, std::move(out),
        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
            auto& na = gr.node(aid);
            auto& nb = gr.node(bid);
            const T* go = nd.value.grad.data();
            if (na.requires_grad) {
                na.value.ensure_grad();
                for (int r = 0; r < N; ++r)
                    for (int64_t i = 0; i < int64_t(La) * D; ++i)
                        na.value.grad[static_cast<size_t>(int64_t(r) * La * D + i)] +=
                            go[int64_t(r) * (La + Lb) * D + i];
            }
            if (nb.requires_grad) {
                nb.value.ensure_grad();
                for (int r = 0; r < N; ++r)
                    for (int64_t i = 0; i < int64_t(Lb) * D; ++i)
                        nb.value.grad[static_cast<size_t>(int64_t(r) * Lb * D + i)] +=
                            go[int64_t(r) * (La + Lb) * D + int64_t(La) * D + i];
            }
        });
    return {&g, id};
}

// mean over axis 1: [N,T,D] -> [N,D]
template <typename T>
RefT<T> mean_tokens(RefT<T> x) {
    GraphT<T>& g = *x.g;
    const Shape& sx = x.shape();
    if (sx.size() != 3) throw ShapeError("mean_tokens: expected [N,T,D], got " + shape_str(sx));
    int N = sx[0], Tn = sx[1], D = sx[2];
    TensorT<T> out(Shape{N, D});
    {
        const T* px = x.value().data.data();
        for (int r = 0; r < N; ++r)
            for (int t = 0; t < Tn; ++t)
                for (int j = 0; j < D; ++j)
                    out.data[static_cast<size_t>(int64_t(r) * D + j)] +=
                        px[int64_t(r) * Tn * D + int64_t(t) * D + j] / static_cast<T>(Tn);
    }
    int xid = x.id;
    int id = g.add_node("mean_tokens", {xid}, std::move(out),
                        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
                            auto& nx = gr.node(xid);
                            if (!nx.requires_grad) return;
                            nx.value.ensure_grad();
                            const T* go = nd.value.grad.data();
                            for (int r = 0; r < N; ++r)
                                for (int t = 0; t < Tn; ++t)
                                    for (int j = 0; j < D; ++j)
                                        nx.value.grad[static_cast<size_t>(int64_t(r) * Tn * D +
                                                                          int64_t(t) * D + j)] +=
                                            go[int64_t(r) * D + j] / static_cast<T>(Tn);
                        });
    return {&g, id};
}

// masked mean over axis 1; mask[N,T] with at least one live position per row.
template <typename T>
RefT<T> masked_mean_tokens(RefT<T> x, const std::vector<uint8_t>& mask_in) {
    GraphT<T>& g = *x.g;
    const Shape& sx = x.shape();
    if (sx.size() != 3) throw ShapeError("masked_mean_tokens: expected [N,T,D], got " + shape_str(sx));
    int N = sx[0], Tn = sx[1], D = sx[2];
    if (static_cast<int>(mask_in.size()) != N * Tn) throw ShapeError("masked_mean_tokens: mask must be [N,T]");
    auto mask = std::make_shared<std::vector<uint8_t>>(mask_in);
    auto counts = std::make_shared<std::vector<T>>(static_cast<size_t>(N));
    TensorT<T> out(Shape{N, D});
    {
        const T* px = x.value().data.data();
        for (int r = 0; r < N; ++r) {
            int c = 0;
            for (int t = 0; t < Tn; ++t) c += (*mask)[static_cast<size_t>(r) * Tn + t] ? 1 : 0;
            if (c == 0) throw DomainError("masked_mean_tokens: row " + std::to_string(r) + " is fully masked");
            (*counts)[static_cast<size_t>(r)] = static_cast<T>(c);
            for (int t = 0; t < Tn; ++t) {
                if (!(*mask)[static_cast<size_t>(r) * Tn + t]) continue;
                for (int j = 0; j < D; ++j)
                    out.data[static_cast<size_t>(int64_t(r) * D + j)] +=
                        px[int64_t(r) * Tn * D + int64_t(t) * D + j] / static_cast<T>(c);
            }
        }
    }
    int xid = x.id;
    int id = g.add_node(
        "masked_mean_tokens", {xid}, std::move(out),
        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
            auto& nx = gr.node(xid);
            if (!nx.requires_grad) return;
            nx.value.ensure_grad();
            const T* go = nd.value.grad.data();
            for (int r = 0; r < N; ++r)
                for (int t = 0; t < Tn; ++t) {
                    if (!(*mask)[static_cast<size_t>(r) * Tn + t]) continue;
                    for (int j = 0; j < D; ++j)
                        nx.value.grad[static_cast<size_t>(int64_t(r) * Tn * D + int64_t(t) * D + j)] +=
                            go[int64_t(r) * D + j] / (*counts)[static_cast<size_t>(r)];
                }
        });
    return {&g, id};
}

// row-wise L2 normalization of [N,D]
template <typename T>
RefT<T> l2_normalize_rows(RefT<T> x) {
    GraphT<T>& g = *x.g;
    const Shape& sx = x.shape();
    if (sx.size() != 2) throw ShapeError("l2_normalize_rows: expected [N,D], got " + shape_str(sx));
    int N = sx[0], D = sx[1];
    auto inv_norm = std::make_shared<std::vector<T>>(static_cast<size_t>(N));
    TensorT<T> out(sx);
    {
        const T* px = x.value().data.data();
        for (int r = 0; r < N; ++r) {
            double s = 0;
            for (int j = 0; j < D; ++j) {
                double v = px[int64_t(r) * D + j];
                s += v * v;
            }
            T inv = static_cast<T>(1.0 / std::sqrt(s + 1e-24));
            (*inv_norm)[static_cast<size_t>(r)] = inv;
            for (int j = 0; j < D; ++j)
                out.data[static_cast<size_t>(int64_t(r) * D + j)] = px[int64_t(r) * D + j] * inv;
        }
    }
    int xid = x.id;
    int id = g.add_node(
        "l2_normalize_rows", {xid}, std::move(out),
        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
            auto& nx = gr.node(xid);
            if (!nx.requires_grad) return;
            nx.value.ensure_grad();
            const T* go = nd.value.grad.data();
            const T* py = nd.value.data.data();
            for (int r = 0; r < N; ++r) {
                T dot = 0;
                for (int j = 0; j < D; ++j) dot += go[int64_t(r) * D + j] * py[int64_t(r) * D + j];
                T inv = (*inv_norm)[static_cast<size_t>(r)];
                for (int j = 0; j < D; ++j)
                    nx.value.grad[static_cast<size_t>(int64_t(r) * D + j)] +=
                        (go[int64_t(r) * D + j] - py[int64_t(r) * D + j] * dot) * inv;
            }
        });
    return {&g, id};
}

// mean absolute error between two equal-shape tensors -> scalar
template <typename T>
RefT<T> l1_loss(RefT<T> a, RefT<T> b) {
    GraphT<T>& g = *a.g;
    if (!same_shape(a.shape(), b.shape()))
        throw ShapeError("l1_loss: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int64_t n = a.numel();
    double s = 0;
    {
        const T* pa = a.value().data.data();
        const T* pb = b.value().data.data();
        for (int64_t i = 0; i < n; ++i) s += std::abs(static_cast<double>(pa[i]) - static_cast<double>(pb[i]));
    }
    TensorT<T> out(Shape{1});
    out.data[0] = static_cast<T>(s / static_cast<double>(n));
    int aid = a.id, bid = b.id;
    int id = g.add_node(
        "l1_loss", {aid, bid}, std::move(out),
        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
            auto& na = gr.node(aid);
            auto& nb = gr.node(bid);
            T go = nd.value.grad[0] / static_cast<T>(n);
            const T* pa = na.value.data.data();
            const T* pb = nb.value.data.data();
            if (na.requires_grad) na.value.ensure_grad();
            if (nb.requires_grad) nb.value.ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                T d = pa[i] - pb[i];
                T sgn = d > T(0) ? T(1) : d < T(0) ? T(-1) : T(0);
                if (na.requires_grad) na.value.grad[static_cast<size_t>(i)] += go * sgn;
                if (nb.requires_grad) nb.value.grad[static_cast<size_t>(i)] -= go * sgn;
            }
        });
    return {&g, id};
}

// mean of all elements -> scalar
template <typename T>
RefT<T> mean_all(RefT<T> x) {
    GraphT<T>& g = *x.g;
    int64_t n = x.numel();
    double s = 0;
    for (int64_t i = 0; i < n; ++i) s += x.value().data[static_cast<size_t>(i)];
    TensorT<T> out(Shape{1});
    out.data[0] = static_cast<T>(s / static_cast<double>(n));
    int xid = x.id;
    int id = g.add_node("mean_all", {xid}, std::move(out),
                        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
                            auto& nx = gr.node(xid);
                            if (!nx.requires_grad) return;
                            nx.value.ensure_grad();
                            T go = nd.value.grad[0] / static_cast<T>(n);
                            for (int64_t i = 0; i < n; ++i) nx.value.grad[static_cast<size_t>(i)] += go;
                        });
    return {&g, id};
}

// sum of all elements -> scalar
template <typename T>
RefT<T> sum_all(RefT<T> x) {
    GraphT<T>& g = *x.g;
    int64_t n = x.numel();
    double s = 0;
    for (int64_t i = 0; i < n; ++i) s += x.value().data[static_cast<size_t>(i)];
    TensorT<T> out(Shape{1});
    out.data[0] = static_cast<T>(s);
    int xid = x.id;
    int id = g.add_node("sum_all", {xid}, std::move(out),
                        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
                            auto& nx = gr.node(xid);
                            if (!nx.requires_grad) return;
                            nx.value.ensure_grad();
                            T go = nd.value.grad[0];
                            for (int64_t i = 0; i < n; ++i) nx.value.grad[static_cast<size_t>(i)] += go;
                        });
    return {&g, id};
}

// table[V,D] gathered by ids[N,L] -> [N,L,D]
template <typename T>
RefT<T> embedding(RefT<T> table, const std::vector<int>& ids, int N, int L) {
    GraphT<T>& g = *table.g;
    const Shape& st = table.shape();
    if (st.size() != 2) throw ShapeError("embedding: table must be [V,D], got " + shape_str(st));
    int V = st[0], D = st[1];
    if (static_cast<int>(ids.size()) != N * L) throw ShapeError("embedding: ids size != N*L");
    TensorT<T> out(Shape{N, L, D});
    {
        const T* pt = table.value().data.data();
        for (int i = 0; i < N * L; ++i) {
            int v = ids[static_cast<size_t>(i)];
            if (v < 0 || v >= V)
                throw DomainError("embedding: id " + std::to_string(v) + " out of range [0," +
                                  std::to_string(V) + ")");
            std::copy(pt + int64_t(v) * D, pt + int64_t(v + 1) * D, out.data.data() + int64_t(i) * D);
        }
    }
    int tid = table.id;
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    int id = g.add_node("embedding", {tid}, std::move(out),
                        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
                            auto& nt = gr.node(tid);
                            if (!nt.requires_grad) return;
                            nt.value.ensure_grad();
                            const T* go = nd.value.grad.data();
                            for (int i = 0; i < N * L; ++i) {
                                int v = (*ids_copy)[static_cast<size_t>(i)];
                                for (int j = 0; j < D; ++j)
                                    nt.value.grad[static_cast<size_t>(int64_t(v) * D + j)] +=
                                        go[int64_t(i) * D + j];
                            }
                        });
    return {&g, id};
}

namespace detail {

// [N,H,W,C] <-> [N,(H/p)*(W/p),p*p*C] index plumbing shared by both directions.
struct PatchDims {
    int N, H, W, C, p, gh, gw;
};

template <typename T>
void patch_gather(const PatchDims& d, const T* img, T* tok) {
    for (int n = 0; n < d.N; ++n)
        for (int y = 0; y < d.gh; ++y)
            for (int x = 0; x < d.gw; ++x) {
                T* dst = tok + ((int64_t(n) * d.gh * d.gw + int64_t(y) * d.gw + x)) *
                                   (int64_t(d.p) * d.p * d.C);
                for (int dy = 0; dy < d.p; ++dy)
                    for (int dx = 0; dx < d.p; ++dx) {
                        const T* src = img + (((int64_t(n) * d.H + (int64_t(y) * d.p + dy)) * d.W +
                                               (int64_t(x) * d.p + dx)) *
                                              d.C);
                        std::copy(src, src + d.C, dst + (int64_t(dy) * d.p + dx) * d.C);
                    }
            }
}

template <typename T>
void patch_scatter(const PatchDims& d, const T* tok, T* img, bool accum) {
    for (int n = 0; n < d.N; ++n)
        for (int y = 0; y < d.gh; ++y)
            for (int x = 0; x < d.gw; ++x) {
                const T* src = tok + ((int64_t(n) * d.gh * d.gw + int64_t(y) * d.gw + x)) *
                                         (int64_t(d.p) * d.p * d.C);
                for (int dy = 0; dy < d.p; ++dy)
                    for (int dx = 0; dx < d.p; ++dx) {
                        T* dst = img + (((int64_t(n) * d.H + (int64_t(y) * d.p + dy)) * d.W +
                                         (int64_t(x) * d.p + dx)) *
                                        d.C);
                        const T* s = src + (int64_t(dy) * d.p + dx) * d.C;
                        for (int c = 0; c < d.C; ++c)
                            if (accum)
                                dst[c] += s[c];
                            else
                                dst[c] = s[c];
                    }
            }
}

}  // namespace detail

// [N,H,W,C] -> [N,(H/p)(W/p), p*p*C]
template <typename T>
RefT<T> patchify(RefT<T> x, int p) {
    GraphT<T>& g = *x.g;
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("patchify: expected [N,H,W,C], got " + shape_str(s));
    if (s[1] % p != 0 || s[2] % p != 0)
        throw ShapeError("patchify: spatial dims " + shape_str(s) + " not divisible by patch " +
                         std::to_string(p));
    detail::PatchDims d{s[0], s[1], s[2], s[3], p, s[1] / p, s[2] / p};
    TensorT<T> out(Shape{d.N, d.gh * d.gw, p * p * d.C});
    detail::patch_gather(d, x.value().data.data(), out.data.data());
    int xid = x.id;
    int id = g.add_node("patchify", {xid}, std::move(out),
                        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
                            auto& nx = gr.node(xid);
                            if (!nx.requires_grad) return;
                            nx.value.ensure_grad();
                            detail::patch_scatter(d, nd.value.grad.data(), nx.value.grad.data(), true);
                        });
    return {&g, id};
}

// [N,gh*gw, p*p*C] -> [N, gh*p, gw*p, C]
template <typename T>
RefT<T> unpatchify(RefT<T> x, int gh, int gw, int p) {
    GraphT<T>& g = *x.g;
    const Shape& s = x.shape();
    if (s.size() != 3 || s[1] != gh * gw || s[2] % (p * p) != 0)
        throw ShapeError("unpatchify: tokens " + shape_str(s) + " incompatible with grid " +
                         std::to_string(gh) + "x" + std::to_string(gw) + " patch " + std::to_string(p));
    int C = s[2] / (p * p);
    detail::PatchDims d{s[0], gh * p, gw * p, C, p, gh, gw};
    TensorT<T> out(Shape{d.N, d.H, d.W, C});
    detail::patch_scatter(d, x.value().data.data(), out.data.data(), false);
    int xid = x.id;
    int id = g.add_node("unpatchify", {xid}, std::move(out),
                        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
                            auto& nx = gr.node(xid);
                            if (!nx.requires_grad) return;
                            nx.value.ensure_grad();
                            std::vector<T> tmp(nx.value.grad.size());
                            detail::patch_gather(d, nd.value.grad.data(), tmp.data());
                            for (size_t i = 0; i < tmp.size(); ++i) nx.value.grad[i] += tmp[i];
                        });
    return {&g, id};
}

// conv with frozen weights [KH,KW,Cin,Cout]; gradient flows to x only.
template <typename T>
RefT<T> conv2d_frozen(RefT<T> x, const TensorT<T>& w, const TensorT<T>& bias, int stride, int pad) {
    GraphT<T>& g = *x.g;
    const Shape& s = x.shape();
    if (s.size() != 4 || w.shape.size() != 4 || s[3] != w.shape[2])
        throw ShapeError("conv2d_frozen: input " + shape_str(s) + " vs weights " + shape_str(w.shape));
    int N = s[0], H = s[1], W = s[2], Cin = s[3];
    int KH = w.shape[0], KW = w.shape[1], Cout = w.shape[3];
    int Ho = (H + 2 * pad - KH) / stride + 1;
    int Wo = (W + 2 * pad - KW) / stride + 1;
    int64_t rows = int64_t(N) * Ho * Wo, cols = int64_t(KH) * KW * Cin;
    auto wptr = std::make_shared<TensorT<T>>(w);
    auto im2col = [=](const T* img, T* col) {
        int64_t r = 0;
        for (int n = 0; n < N; ++n)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox, ++r) {
                    T* dst = col + r * cols;
                    for (int ky = 0; ky < KH; ++ky)
                        for (int kx = 0; kx < KW; ++kx) {
                            int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                            T* cell = dst + (int64_t(ky) * KW + kx) * Cin;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
                                std::fill(cell, cell + Cin, T(0));
                            } else {
                                const T* src = img + ((int64_t(n) * H + iy) * W + ix) * Cin;
                                std::copy(src, src + Cin, cell);
                            }
                        }
                }
    };
    TensorT<T> out(Shape{N, Ho, Wo, Cout});
    {
        std::vector<T> col(static_cast<size_t>(rows * cols));
        im2col(x.value().data.data(), col.data());
        detail::gemm_nn(out.data.data(), col.data(), w.data.data(), static_cast<int>(rows),
                        static_cast<int>(cols), Cout, false);
        for (int64_t r = 0; r < rows; ++r)
            for (int c = 0; c < Cout; ++c) out.data[static_cast<size_t>(r * Cout + c)] += bias.data[static_cast<size_t>(c)];
    }
    int xid = x.id;
    int id = g.add_node(
        "conv2d_frozen", {xid}, std::move(out),
        [=](GraphT<T>& gr, typename GraphT<T>::Node& nd) {
            auto& nx = gr.node(xid);
            if (!nx.requires_grad) return;
            nx.value.ensure_grad();
            // dcol = dout * W^T, then scatter back through the im2col map
            std::vector<T> dcol(static_cast<size_t>(rows * cols));
            detail::gemm_nt(dcol.data(), nd.value.grad.data(), wptr->data.data(),
                            static_cast<int>(rows), Cout, static_cast<int>(cols), false);
            T* dx = nx.value.grad.data();
            int64_t r = 0;
            for (int n = 0; n < N; ++n)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox, ++r) {
                        const T* src = dcol.data() + r * cols;
                        for (int ky = 0; ky < KH; ++ky)
                            for (int kx = 0; kx < KW; ++kx) {
                                int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                const T* cell = src + (int64_t(ky) * KW + kx) * Cin;
                                T* dst = dx + ((int64_t(n) * H + iy) * W + ix) * Cin;
                                for (int c = 0; c < Cin; ++c) dst[c] += cell[c];
                            }
                    }
        });
    return {&g, id};
}

}  // namespace unitok
