#pragma once

#include <Eigen/Dense>

#include "unitok/graph.hpp"
#include "unitok/rng.hpp"
#include "unitok/tensor.hpp"

namespace unitok {

// Frozen invertible image<->latent codec: space-to-depth by factor f followed
// by a fixed orthogonal channel mixing. Lossless by construction, so latent
// reconstruction error downstream is attributable entirely to the trained model.
struct CodecParams {
    int f = 4;
    uint64_t seed = 0;
    Tensor mixing;  // [D,D], D = f*f*3, orthogonal within 1e-5

    int latent_channels() const { return f * f * 3; }
};

inline CodecParams make_codec(int f, uint64_t seed) {
    if (f < 1) throw DomainError("codec: factor must be >= 1, got " + std::to_string(f));
    int D = f * f * 3;
    Rng rng = Rng(seed).stream("codec_mixing");
    Eigen::MatrixXd G(D, D);
    for (int i = 0; i < D; ++i)
        for (int j = 0; j < D; ++j) G(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
    Eigen::MatrixXd Q = qr.householderQ();
    Eigen::MatrixXd R = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < D; ++j)  // fix column signs so the factorization is unique
        if (R(j, j) < 0) Q.col(j) *= -1.0;
    CodecParams cp;
    cp.f = f;
    cp.seed = seed;
    cp.mixing = Tensor(Shape{D, D});
    for (int i = 0; i < D; ++i)
        for (int j = 0; j < D; ++j) cp.mixing.data[static_cast<size_t>(i) * D + j] = static_cast<float>(Q(i, j));
    return cp;
}

namespace detail {

// [N,H,W,C] -> [N,H/f,W/f,f*f*C]
template <typename T>
TensorT<T> space_to_depth(const TensorT<T>& x, int f) {
    const Shape& s = x.shape;
    if (s.size() != 4) throw ShapeError("space_to_depth: expected [N,H,W,C], got " + shape_str(s));
    if (s[1] % f != 0 || s[2] % f != 0)
        throw ShapeError("space_to_depth: dims " + shape_str(s) + " not divisible by f=" + std::to_string(f));
    PatchDims d{s[0], s[1], s[2], s[3], f, s[1] / f, s[2] / f};
    TensorT<T> out(Shape{d.N, d.gh, d.gw, f * f * d.C});
    patch_gather(d, x.data.data(), out.data.data());
    return out;
}

// [N,h,w,f*f*C] -> [N,h*f,w*f,C]
template <typename T>
TensorT<T> depth_to_space(const TensorT<T>& x, int f) {
    const Shape& s = x.shape;
    if (s.size() != 4) throw ShapeError("depth_to_space: expected [N,h,w,D], got " + shape_str(s));
    if (s[3] % (f * f) != 0)
        throw ShapeError("depth_to_space: channels " + shape_str(s) + " not divisible by f*f");
    int C = s[3] / (f * f);
    PatchDims d{s[0], s[1] * f, s[2] * f, C, f, s[1], s[2]};
    TensorT<T> out(Shape{d.N, d.H, d.W, C});
    patch_scatter(d, x.data.data(), out.data.data(), false);
    return out;
}

}  // namespace detail

// x [N,H,W,3] in [-1,1] -> z [N,H/f,W/f,f*f*3]
template <typename T>
TensorT<T> encode_image(const TensorT<T>& x, const CodecParams& codec) {
    const Shape& s = x.shape;
    if (s.size() != 4 || s[3] != 3) throw ShapeError("encode_image: expected [N,H,W,3], got " + shape_str(s));
    if (s[1] % codec.f != 0 || s[2] % codec.f != 0)
        throw ShapeError("encode_image: " + shape_str(s) + " not divisible by codec factor " +
                         std::to_string(codec.f));
    TensorT<T> z = detail::space_to_depth(x, codec.f);
    int D = codec.latent_channels();
    int64_t rows = z.numel() / D;
    TensorT<T> mix = codec.mixing.template cast<T>();
    TensorT<T> out(z.shape);
    detail::gemm_nn(out.data.data(), z.data.data(), mix.data.data(), static_cast<int>(rows), D, D, false);
    return out;
}

// z [N,h,w,f*f*3] -> x [N,h*f,w*f,3]; exact inverse of encode_image within 1e-5.
template <typename T>
TensorT<T> decode_latents(const TensorT<T>& z, const CodecParams& codec) {
    const Shape& s = z.shape;
    int D = codec.latent_channels();
    if (s.size() != 4 || s[3] != D)
        throw ShapeError("decode_latents: expected channels " + std::to_string(D) + ", got " + shape_str(s));
    int64_t rows = z.numel() / D;
    TensorT<T> mix = codec.mixing.template cast<T>();
    TensorT<T> unmixed(s);
    // inverse of an orthogonal mixing is its transpose: rows * M^T
    detail::gemm_nt(unmixed.data.data(), z.data.data(), mix.data.data(), static_cast<int>(rows), D, D, false);
    return detail::depth_to_space(unmixed, codec.f);
}

// Differentiable decode for the training path: z ref [N,h,w,D] -> image ref.
template <typename T>
RefT<T> decode_latents_ref(RefT<T> z, const CodecParams& codec) {
    GraphT<T>& g = *z.g;
    const Shape& s = z.shape();
    int D = codec.latent_channels();
    if (s.size() != 4 || s[3] != D)
        throw ShapeError("decode_latents: expected channels " + std::to_string(D) + ", got " + shape_str(s));
    int N = s[0], h = s[1], w = s[2];
    auto mixT = constant(g, codec.mixing.template cast<T>());
    auto flat = reshape(z, Shape{N * h * w, D});
    // rows * M^T == matmul with the transposed constant
    auto unmixed = matmul(flat, permute(mixT, {1, 0}));
    auto grid = reshape(unmixed, Shape{N, h * w, D});
    return unpatchify(grid, h, w, codec.f);  // depth-to-space
}

}  // namespace unitok
