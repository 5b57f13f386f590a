#pragma once

#include "unitok/graph.hpp"
#include "unitok/rng.hpp"
#include "unitok/tensor.hpp"

namespace unitok {

// Shared default seed for the frozen feature stack. Training and evaluation
// must use the same network for scores to be comparable, so this constant is
// independent of any run-level seed.
inline constexpr uint64_t kDefaultPerceptualSeed = 1729;

// Fixed randomly initialized 3-stage strided conv stack. Never trained; the
// same features back both the perceptual distance and the surrogate Fréchet
// statistics, so scores are comparable within this artifact only.
struct PerceptualNet {
    static constexpr int kStages = 3;
    Tensor w[kStages];  // [3,3,Cin,Cout], stride 2
    Tensor b[kStages];
    uint64_t seed = 0;

    static PerceptualNet make(uint64_t seed) {
        PerceptualNet net;
        net.seed = seed;
        int chans[kStages + 1] = {3, 16, 32, 64};
        for (int s = 0; s < kStages; ++s) {
            Rng rng = Rng(seed).stream("perceptual", static_cast<uint64_t>(s));
            int cin = chans[s], cout = chans[s + 1];
            double std = std::sqrt(2.0 / (9.0 * cin));
            net.w[s] = Tensor::randn(Shape{3, 3, cin, cout}, rng, std);
            net.b[s] = Tensor(Shape{cout});
        }
        return net;
    }

    int feature_dim() const { return 64; }
};

namespace detail {

// Per-stage activations with unit-normalized channel vectors, as graph refs.
template <typename T>
std::vector<RefT<T>> perceptual_features(RefT<T> x, const PerceptualNet& net, bool normalize) {
    std::vector<RefT<T>> feats;
    RefT<T> h = x;
    for (int s = 0; s < PerceptualNet::kStages; ++s) {
        TensorT<T> w = net.w[s].template cast<T>();
        TensorT<T> b = net.b[s].template cast<T>();
        h = conv2d_frozen(h, w, b, /*stride=*/2, /*pad=*/1);
        if (s + 1 < PerceptualNet::kStages) h = gelu(h);
        RefT<T> f = h;
        if (normalize) {
            const Shape& fs = f.shape();
            int C = fs[3];
            int64_t rows = f.numel() / C;
            f = reshape(f, Shape{static_cast<int>(rows), C});
            f = l2_normalize_rows(f);
        }
        feats.push_back(f);
    }
    return feats;
}

}  // namespace detail

// Mean over stages of the MSE between unit-normalized activations; symmetric,
// zero iff activations agree.
template <typename T>
RefT<T> perceptual_loss_ref(RefT<T> x, RefT<T> xhat, const PerceptualNet& net) {
    if (!same_shape(x.shape(), xhat.shape()))
        throw ShapeError("perceptual_loss: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(xhat.shape()));
    auto fa = detail::perceptual_features(x, net, true);
    auto fb = detail::perceptual_features(xhat, net, true);
    RefT<T> total;
    for (int s = 0; s < PerceptualNet::kStages; ++s) {
        auto d = sub(fa[static_cast<size_t>(s)], fb[static_cast<size_t>(s)]);
        auto mse = mean_all(mul(d, d));
        total = s == 0 ? mse : add(total, mse);
    }
    return scale(total, 1.0 / PerceptualNet::kStages);
}

// Globally pooled final-stage activations: one D=64 row per image, the feature
// space for surrogate Fréchet statistics.
inline Tensor perceptual_embed(const Tensor& images, const PerceptualNet& net) {
    Graph g;
    auto x = constant(g, images);
    auto feats = detail::perceptual_features(x, net, false);
    auto last = feats.back();
    const Shape& s = last.shape();
    int N = s[0], C = s[3];
    int64_t hw = int64_t(s[1]) * s[2];
    Tensor out(Shape{N, C});
    const float* p = last.value().data.data();
    for (int n = 0; n < N; ++n)
        for (int64_t i = 0; i < hw; ++i)
            for (int c = 0; c < C; ++c)
                out.data[static_cast<size_t>(n) * C + c] += p[(int64_t(n) * hw + i) * C + c] / static_cast<float>(hw);
    return out;
}

}  // namespace unitok
