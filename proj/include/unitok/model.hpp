#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "unitok/codec.hpp"
#include "unitok/graph.hpp"
#include "unitok/perceptual.hpp"
#include "unitok/rng.hpp"
#include "unitok/tensor.hpp"

namespace unitok {

struct ViTConfig {
    int patch = 2;  // fixed latent-space patch side
    int depth = 6;
    int dim = 256;
    int heads = 8;
    int mlp_ratio = 4;
    int embed_dim = 128;  // contrastive embedding width D_e

    void validate() const {
        if (patch != 2) throw DomainError("vit: patch size is fixed at 2");
        if (dim % heads != 0) throw DomainError("vit: dim must be divisible by heads");
        if (depth < 1 || dim < 1 || mlp_ratio < 1 || embed_dim < 1)
            throw DomainError("vit: sizes must be positive");
    }
};

struct TextConfig {
    int layers = 4;
    int width = 256;
    int heads = 4;
    int max_len = 32;
    int vocab = 0;  // filled from the vocabulary file
};

struct ModelConfig {
    int codec_f = 4;
    uint64_t codec_seed = 1234;
    ViTConfig vit;
    int decoder_depth = 6;
    TextConfig text;
    uint64_t seed = 0;  // parameter init seed

    int latent_channels() const { return codec_f * codec_f * 3; }
};

// ---------------------------------------------------------------------------
// Parameter store: ordered named f32 tensors. Order is creation order and is
// the canonical iteration order for optimizer updates and checkpoints.
// ---------------------------------------------------------------------------
class ParamStore {
  public:
    Tensor& add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw std::runtime_error("param '" + name + "' added twice");
        index_[name] = names_.size();
        names_.push_back(name);
        t.requires_grad = true;
        tensors_.push_back(std::move(t));
        return tensors_.back();
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown param '" + name + "'");
        return tensors_[it->second];
    }
    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown param '" + name + "'");
        return tensors_[it->second];
    }
    size_t size() const { return names_.size(); }
    const std::string& name(size_t i) const { return names_[i]; }
    Tensor& tensor(size_t i) { return tensors_[i]; }
    const Tensor& tensor(size_t i) const { return tensors_[i]; }
    int64_t total_params() const {
        int64_t n = 0;
        for (auto& t : tensors_) n += t.numel();
        return n;
    }

  private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::unordered_map<std::string, size_t> index_;
};

// Binds store parameters into a graph as leaves, at most once per step.
template <typename T>
struct Binder {
    GraphT<T>* g = nullptr;
    ParamStore* store = nullptr;

    Binder(GraphT<T>* graph, ParamStore* s) : g(graph), store(s) {}

    RefT<T> operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        TensorT<T> t = store->get(name).template cast<T>();
        t.requires_grad = true;
        RefT<T> r = leaf(*g, std::move(t));
        bound_.emplace(name, r);
        return r;
    }
    const std::map<std::string, RefT<T>>& bound() const { return bound_; }

  private:
    std::map<std::string, RefT<T>> bound_;
};

// ---------------------------------------------------------------------------
// Initialization. Every tensor is seeded by its own name so the layout is
// independent of creation order and identical across runs.
// ---------------------------------------------------------------------------
namespace detail {

inline Tensor init_linear_w(uint64_t seed, const std::string& name, int in, int out) {
    Rng rng = Rng(seed).stream(name);
    float bound = 1.0f / std::sqrt(static_cast<float>(in));
    return Tensor::uniform(Shape{in, out}, rng, -bound, bound);
}
inline Tensor init_linear_b(uint64_t seed, const std::string& name, int in, int out) {
    Rng rng = Rng(seed).stream(name);
    float bound = 1.0f / std::sqrt(static_cast<float>(in));
    return Tensor::uniform(Shape{out}, rng, -bound, bound);
}
inline Tensor init_table(uint64_t seed, const std::string& name, int rows, int cols) {
    Rng rng = Rng(seed).stream(name);
    return Tensor::randn(Shape{rows, cols}, rng, 0.02);
}

inline void add_linear(ParamStore& ps, uint64_t seed, const std::string& prefix, int in, int out) {
    ps.add(prefix + ".w", init_linear_w(seed, prefix + ".w", in, out));
    ps.add(prefix + ".b", init_linear_b(seed, prefix + ".b", in, out));
}

inline void add_block(ParamStore& ps, uint64_t seed, const std::string& p, int dim, int mlp_ratio) {
    ps.add(p + ".ln1.g", Tensor(Shape{dim}, 1.0f));
    ps.add(p + ".ln1.b", Tensor(Shape{dim}));
    add_linear(ps, seed, p + ".attn.q", dim, dim);
    add_linear(ps, seed, p + ".attn.k", dim, dim);
    add_linear(ps, seed, p + ".attn.v", dim, dim);
    add_linear(ps, seed, p + ".attn.o", dim, dim);
    ps.add(p + ".ln2.g", Tensor(Shape{dim}, 1.0f));
    ps.add(p + ".ln2.b", Tensor(Shape{dim}));
    add_linear(ps, seed, p + ".mlp.fc1", dim, dim * mlp_ratio);
    add_linear(ps, seed, p + ".mlp.fc2", dim * mlp_ratio, dim);
}

}  // namespace detail

// Builds all trainable parameters for a given token grid (gh x gw). Codec and
// perceptual-net weights are deliberately absent: they are frozen.
inline ParamStore init_params(const ModelConfig& cfg, int gh, int gw) {
    cfg.vit.validate();
    if (cfg.text.vocab < 5) throw DomainError("model: vocabulary not set");
    ParamStore ps;
    uint64_t s = cfg.seed;
    int D = cfg.vit.dim, Dv = cfg.latent_channels(), T = gh * gw;

    detail::add_linear(ps, s, "enc.patch_embed", 4 * Dv, D);
    ps.add("enc.pos", detail::init_table(s, "enc.pos", T, D));
    for (int i = 0; i < cfg.vit.depth; ++i)
        detail::add_block(ps, s, "enc.blk" + std::to_string(i), D, cfg.vit.mlp_ratio);
    ps.add("enc.final_ln.g", Tensor(Shape{D}, 1.0f));
    ps.add("enc.final_ln.b", Tensor(Shape{D}));
    detail::add_linear(ps, s, "enc.pool_proj", D, cfg.vit.embed_dim);

    detail::add_linear(ps, s, "dec.patch_embed", D, D);
    ps.add("dec.pos", detail::init_table(s, "dec.pos", T, D));
    for (int i = 0; i < cfg.decoder_depth; ++i)
        detail::add_block(ps, s, "dec.blk" + std::to_string(i), D, cfg.vit.mlp_ratio);
    ps.add("dec.final_ln.g", Tensor(Shape{D}, 1.0f));
    ps.add("dec.final_ln.b", Tensor(Shape{D}));
    detail::add_linear(ps, s, "dec.head", D, 4 * Dv);

    int W = cfg.text.width, V = cfg.text.vocab, Lm = cfg.text.max_len;
    ps.add("txt_enc.tok_embed", detail::init_table(s, "txt_enc.tok_embed", V, W));
    ps.add("txt_enc.pos", detail::init_table(s, "txt_enc.pos", Lm, W));
    for (int i = 0; i < cfg.text.layers; ++i)
        detail::add_block(ps, s, "txt_enc.blk" + std::to_string(i), W, 4);
    ps.add("txt_enc.final_ln.g", Tensor(Shape{W}, 1.0f));
    ps.add("txt_enc.final_ln.b", Tensor(Shape{W}));
    detail::add_linear(ps, s, "txt_enc.proj", W, cfg.vit.embed_dim);

    ps.add("txt_dec.tok_embed", detail::init_table(s, "txt_dec.tok_embed", V, W));
    ps.add("txt_dec.pos", detail::init_table(s, "txt_dec.pos", Lm, W));
    detail::add_linear(ps, s, "txt_dec.vis_proj", D, W);
    for (int i = 0; i < cfg.text.layers; ++i)
        detail::add_block(ps, s, "txt_dec.blk" + std::to_string(i), W, 4);
    ps.add("txt_dec.final_ln.g", Tensor(Shape{W}, 1.0f));
    ps.add("txt_dec.final_ln.b", Tensor(Shape{W}));
    detail::add_linear(ps, s, "txt_dec.head", W, V);

    Tensor ls(Shape{1});
    ls.data[0] = std::log(1.0f / 0.07f);
    ps.add("logit_scale", std::move(ls));
    return ps;
}

// ---------------------------------------------------------------------------
// Forward building blocks
// ---------------------------------------------------------------------------
template <typename T>
RefT<T> linear(Binder<T>& B, RefT<T> x, const std::string& prefix) {
    auto w = B(prefix + ".w");
    auto b = B(prefix + ".b");
    Shape xs = x.shape();
    int in = xs.back();
    if (w.shape()[0] != in)
        throw ShapeError("linear " + prefix + ": input dim " + std::to_string(in) + " vs weight " +
                         shape_str(w.shape()));
    int out = w.shape()[1];
    int64_t rows = x.numel() / in;
    auto y = add_bias(matmul(reshape(x, Shape{static_cast<int>(rows), in}), w), b);
    Shape os = xs;
    os.back() = out;
    return reshape(y, os);
}

template <typename T>
RefT<T> transformer_block(Binder<T>& B, RefT<T> x, const std::string& p, int heads, bool causal,
                          const std::vector<uint8_t>* key_mask) {
    const Shape& s = x.shape();
    int N = s[0], Tn = s[1], D = s[2], Dh = D / heads;
    auto h = layer_norm(x, B(p + ".ln1.g"), B(p + ".ln1.b"));
    auto split = [&](RefT<T> t) { return permute(reshape(t, Shape{N, Tn, heads, Dh}), {0, 2, 1, 3}); };
    auto q = split(linear(B, h, p + ".attn.q"));
    auto k = split(linear(B, h, p + ".attn.k"));
    auto v = split(linear(B, h, p + ".attn.v"));
    auto o = attention(q, k, v, causal, key_mask);
    o = reshape(permute(o, {0, 2, 1, 3}), Shape{N, Tn, D});
    x = add(x, linear(B, o, p + ".attn.o"));
    auto h2 = layer_norm(x, B(p + ".ln2.g"), B(p + ".ln2.b"));
    auto m = linear(B, gelu(linear(B, h2, p + ".mlp.fc1")), p + ".mlp.fc2");
    return add(x, m);
}

template <typename T>
struct TokensT {
    RefT<T> t;  // [N, gh*gw, D]
    int gh = 0, gw = 0;
};

// Latent grid [N,h,w,Dv] -> unified tokens via 2x2 patch embedding and the ViT.
template <typename T>
TokensT<T> encode_unified(Binder<T>& B, const ModelConfig& cfg, RefT<T> z) {
    const Shape& s = z.shape();
    if (s.size() != 4) throw ShapeError("encode_unified: expected latent grid, got " + shape_str(s));
    if (s[1] % 2 != 0 || s[2] % 2 != 0)
        throw ShapeError("encode_unified: latent grid " + shape_str(s) + " must have even spatial dims");
    auto x = linear(B, patchify(z, 2), "enc.patch_embed");
    x = add_pos(x, B("enc.pos"));
    for (int i = 0; i < cfg.vit.depth; ++i)
        x = transformer_block(B, x, "enc.blk" + std::to_string(i), cfg.vit.heads, false, nullptr);
    x = layer_norm(x, B("enc.final_ln.g"), B("enc.final_ln.b"));
    return {x, s[1] / 2, s[2] / 2};
}

// Tokens -> unit-norm contrastive embedding [N, D_e].
template <typename T>
RefT<T> pool_visual(Binder<T>& B, RefT<T> tokens) {
    return l2_normalize_rows(linear(B, mean_tokens(tokens), "enc.pool_proj"));
}

// Tokens -> reconstructed latent grid [N, 2gh, 2gw, Dv]: patch-1 ViT decoder,
// per-token linear head to a 2x2 latent block, depth-to-space.
template <typename T>
RefT<T> decode_unified(Binder<T>& B, const ModelConfig& cfg, TokensT<T> tokens) {
    auto x = linear(B, tokens.t, "dec.patch_embed");
    x = add_pos(x, B("dec.pos"));
    for (int i = 0; i < cfg.decoder_depth; ++i)
        x = transformer_block(B, x, "dec.blk" + std::to_string(i), cfg.vit.heads, false, nullptr);
    x = layer_norm(x, B("dec.final_ln.g"), B("dec.final_ln.b"));
    x = linear(B, x, "dec.head");
    return unpatchify(x, tokens.gh, tokens.gw, 2);
}

// Caption ids -> unit-norm text embedding. Pad positions are masked out of
// attention keys and the mean pool, so pad-extension cannot change the result.
template <typename T>
RefT<T> encode_text(Binder<T>& B, const ModelConfig& cfg, const std::vector<int>& ids, int N, int L,
                    int pad_id) {
    if (L < 1) throw DomainError("encode_text: empty captions");
    if (L > cfg.text.max_len)
        throw ShapeError("encode_text: caption length " + std::to_string(L) + " exceeds max " +
                         std::to_string(cfg.text.max_len));
    std::vector<uint8_t> mask(static_cast<size_t>(N) * L);
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = ids[i] != pad_id;
    auto x = embedding(B("txt_enc.tok_embed"), ids, N, L);
    x = add_pos(x, B("txt_enc.pos"));
    for (int i = 0; i < cfg.text.layers; ++i)
        x = transformer_block(B, x, "txt_enc.blk" + std::to_string(i), cfg.text.heads, false, &mask);
    x = layer_norm(x, B("txt_enc.final_ln.g"), B("txt_enc.final_ln.b"));
    auto pooled = masked_mean_tokens(x, mask);
    return l2_normalize_rows(linear(B, pooled, "txt_enc.proj"));
}

// Teacher-forced next-token cross-entropy with the visual tokens prepended as
// a non-predicted prefix. Prefix and pad positions are excluded from the loss.
template <typename T>
RefT<T> caption_loss(Binder<T>& B, const ModelConfig& cfg, TokensT<T> visual,
                     const std::vector<int>& ids, int N, int L, int pad_id) {
    if (L < 2) throw DomainError("caption_loss: need >= 2 caption tokens for teacher forcing");
    int Tv = visual.t.shape()[1];
    int Lc = L - 1;  // decoder input length
    std::vector<int> cap_in(static_cast<size_t>(N) * Lc);
    std::vector<uint8_t> mask(static_cast<size_t>(N) * (Tv + Lc), 1);
    std::vector<int> targets(static_cast<size_t>(N) * (Tv + Lc), -1);
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < Lc; ++i) {
            int tok = ids[static_cast<size_t>(n) * L + i];
            int nxt = ids[static_cast<size_t>(n) * L + i + 1];
            cap_in[static_cast<size_t>(n) * Lc + i] = tok;
            mask[static_cast<size_t>(n) * (Tv + Lc) + Tv + i] = tok != pad_id;
            targets[static_cast<size_t>(n) * (Tv + Lc) + Tv + i] =
                (tok == pad_id || nxt == pad_id) ? -1 : nxt;
        }
    auto vis = linear(B, visual.t, "txt_dec.vis_proj");
    auto cap = embedding(B("txt_dec.tok_embed"), cap_in, N, Lc);
    cap = add_pos(cap, B("txt_dec.pos"));
    auto x = concat_tokens(vis, cap);
    for (int i = 0; i < cfg.text.layers; ++i)
        x = transformer_block(B, x, "txt_dec.blk" + std::to_string(i), cfg.text.heads, true, &mask);
    x = layer_norm(x, B("txt_dec.final_ln.g"), B("txt_dec.final_ln.b"));
    auto logits = linear(B, x, "txt_dec.head");
    auto flat = reshape(logits, Shape{N * (Tv + Lc), cfg.text.vocab});
    return softmax_cross_entropy(flat, targets, -1);
}

// Symmetric InfoNCE over temperature-scaled cosine similarities.
template <typename T>
RefT<T> contrastive_loss(Binder<T>& B, RefT<T> z_img, RefT<T> z_txt) {
    const Shape& si = z_img.shape();
    if (si.size() != 2 || !same_shape(si, z_txt.shape()))
        throw ShapeError("contrastive_loss: need matching [N,D_e], got " + shape_str(si) + " vs " +
                         shape_str(z_txt.shape()));
    int N = si[0];
    if (N < 2) throw DomainError("contrastive_loss: undefined for batch size < 2");
    auto s = exp(B("logit_scale"));
    auto sims = matmul(z_img, permute(z_txt, {1, 0}));
    auto logits = mul(sims, s);
    std::vector<int> diag(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) diag[static_cast<size_t>(i)] = i;
    auto a = softmax_cross_entropy(logits, diag, -1);
    auto b = softmax_cross_entropy(permute(logits, {1, 0}), diag, -1);
    return scale(add(a, b), 0.5);
}

// Additive noise for the reconstruction path: per-sample sigma ~ U[0,tau],
// elementwise standard normal. Returned as a plain tensor so the draw is a
// pure function of (seed-derived rng, shape).
inline Tensor make_perturbation(const Shape& s, double tau, Rng rng) {
    if (tau < 0) throw DomainError("perturb: tau must be >= 0");
    if (s.size() != 3) throw ShapeError("perturb: expected [N,T,D] token shape, got " + shape_str(s));
    Tensor noise(s);
    int64_t per = int64_t(s[1]) * s[2];
    for (int n = 0; n < s[0]; ++n) {
        float sigma = static_cast<float>(rng.uniform(0.0, tau));
        for (int64_t i = 0; i < per; ++i)
            noise.data[static_cast<size_t>(n) * per + i] = sigma * static_cast<float>(rng.normal());
    }
    return noise;
}

// Bilinear, corner-aligned resize of a positional table between token grids.
// Equal grids return the table unchanged, bit for bit.
inline Tensor interpolate_pos_embed(const Tensor& pos, int old_gh, int old_gw, int new_gh, int new_gw) {
    if (pos.shape.size() != 2 || pos.shape[0] != old_gh * old_gw)
        throw ShapeError("interpolate_pos_embed: table " + shape_str(pos.shape) + " vs grid " +
                         std::to_string(old_gh) + "x" + std::to_string(old_gw));
    if (old_gh == new_gh && old_gw == new_gw) return pos;
    int D = pos.shape[1];
    Tensor out(Shape{new_gh * new_gw, D});
    for (int y = 0; y < new_gh; ++y) {
        double fy = new_gh == 1 ? 0.0 : static_cast<double>(y) * (old_gh - 1) / (new_gh - 1);
        int y0 = static_cast<int>(fy);
        int y1 = std::min(y0 + 1, old_gh - 1);
        double wy = fy - y0;
        for (int x = 0; x < new_gw; ++x) {
            double fx = new_gw == 1 ? 0.0 : static_cast<double>(x) * (old_gw - 1) / (new_gw - 1);
            int x0 = static_cast<int>(fx);
            int x1 = std::min(x0 + 1, old_gw - 1);
            double wx = fx - x0;
            for (int j = 0; j < D; ++j) {
                auto at = [&](int yy, int xx) {
                    return static_cast<double>(pos.data[static_cast<size_t>(yy * old_gw + xx) * D + j]);
                };
                double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                           wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
                out.data[static_cast<size_t>(y * new_gw + x) * D + j] = static_cast<float>(v);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Full five-component forward pass
// ---------------------------------------------------------------------------
template <typename T>
struct LossRefsT {
    RefT<T> pixel_l1, latent_l1, perceptual, caption_ce, contrastive;
    TokensT<T> z_u;
    RefT<T> z_img, z_txt;  // pooled contrastive embeddings
};

using LossRefs = LossRefsT<float>;

// Computes every component loss regardless of which ones a training mode will
// backpropagate; the loss-interaction protocol depends on observing all five.
template <typename T>
LossRefsT<T> build_losses(GraphT<T>& g, Binder<T>& B, const ModelConfig& cfg, const CodecParams& codec,
                          const PerceptualNet& pnet, const TensorT<T>& images,
                          const std::vector<int>& caption_ids, int N, int L, int pad_id,
                          const Tensor& noise) {
    LossRefsT<T> out;
    auto imgs = constant(g, images);
    auto z_vae = constant(g, encode_image(images, codec));
    out.z_u = encode_unified(B, cfg, z_vae);

    // understanding branch
    out.z_img = pool_visual(B, out.z_u.t);
    out.z_txt = encode_text(B, cfg, caption_ids, N, L, pad_id);
    out.contrastive = contrastive_loss(B, out.z_img, out.z_txt);
    out.caption_ce = caption_loss(B, cfg, out.z_u, caption_ids, N, L, pad_id);

    // reconstruction branch (perturbed tokens)
    TokensT<T> z_tilde = out.z_u;
    if (!same_shape(noise.shape, out.z_u.t.shape()))
        throw ShapeError("build_losses: noise shape " + shape_str(noise.shape) + " vs tokens " +
                         shape_str(out.z_u.t.shape()));
    z_tilde.t = add(out.z_u.t, constant(g, noise.cast<T>()));
    auto z_hat = decode_unified(B, cfg, z_tilde);
    out.latent_l1 = l1_loss(z_hat, z_vae);
    auto x_hat = decode_latents_ref(z_hat, codec);
    out.pixel_l1 = l1_loss(x_hat, imgs);
    out.perceptual = perceptual_loss_ref(imgs, x_hat, pnet);
    return out;
}

}  // namespace unitok
