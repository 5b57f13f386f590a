#include "unitok/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace unitok {

namespace {

void check_image_pair(const Tensor& x, const Tensor& y, const char* what) {
    if (x.shape.size() != 4 || !same_shape(x.shape, y.shape))
        throw ShapeError(std::string(what) + ": need matching [N,H,W,C] batches, got " +
                         shape_str(x.shape) + " vs " + shape_str(y.shape));
}

constexpr double kRange = 2.0;  // [-1,1] data
constexpr double kPsnrCap = 99.0;

// 11-tap Gaussian, sigma 1.5, normalized to sum 1 (f64).
std::array<double, 11> gaussian_window() {
    std::array<double, 11> k{};
    double sum = 0.0;
    for (int i = 0; i < 11; ++i) {
        double d = i - 5.0;
        k[static_cast<size_t>(i)] = std::exp(-(d * d) / (2.0 * 1.5 * 1.5));
        sum += k[static_cast<size_t>(i)];
    }
    for (double& v : k) v /= sum;
    return k;
}

// Valid-mode separable convolution with the 11-tap window: [H,W] -> [H-10,W-10].
void conv_valid_11(const std::vector<double>& in, int H, int W, std::vector<double>& tmp,
                   std::vector<double>& out) {
    static const std::array<double, 11> k = gaussian_window();
    int Wo = W - 10, Ho = H - 10;
    tmp.assign(static_cast<size_t>(H) * Wo, 0.0);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < Wo; ++c) {
            double acc = 0.0;
            const double* row = in.data() + static_cast<size_t>(r) * W + c;
            for (int t = 0; t < 11; ++t) acc += row[t] * k[static_cast<size_t>(t)];
            tmp[static_cast<size_t>(r) * Wo + c] = acc;
        }
    out.assign(static_cast<size_t>(Ho) * Wo, 0.0);
    for (int r = 0; r < Ho; ++r)
        for (int c = 0; c < Wo; ++c) {
            double acc = 0.0;
            for (int t = 0; t < 11; ++t) acc += tmp[static_cast<size_t>(r + t) * Wo + c] * k[static_cast<size_t>(t)];
            out[static_cast<size_t>(r) * Wo + c] = acc;
        }
}

}  // namespace

BatchStat psnr(const Tensor& x, const Tensor& y) {
    check_image_pair(x, y, "psnr");
    int N = x.shape[0];
    int64_t per = x.numel() / N;
    BatchStat st;
    st.per_image.resize(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n) {
        const float* px = x.data.data() + n * per;
        const float* py = y.data.data() + n * per;
        double mse = 0.0;
        for (int64_t i = 0; i < per; ++i) {
            double d = static_cast<double>(px[i]) - py[i];
            mse += d * d;
        }
        mse /= static_cast<double>(per);
        double v = mse == 0.0 ? kPsnrCap : std::min(kPsnrCap, 10.0 * std::log10(kRange * kRange / mse));
        st.per_image[static_cast<size_t>(n)] = v;
        st.mean += v;
    }
    st.mean /= N;
    return st;
}

BatchStat ssim(const Tensor& x, const Tensor& y) {
    check_image_pair(x, y, "ssim");
    int N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
    if (H < 11 || W < 11)
        throw ShapeError("ssim: image " + std::to_string(H) + "x" + std::to_string(W) +
                         " is smaller than the 11x11 window");
    const double C1 = (0.01 * kRange) * (0.01 * kRange);
    const double C2 = (0.03 * kRange) * (0.03 * kRange);
    int64_t plane_n = static_cast<int64_t>(H) * W;
    std::vector<double> a(plane_n), b(plane_n), aa(plane_n), bb(plane_n), ab(plane_n);
    std::vector<double> tmp, mu_a, mu_b, m_aa, m_bb, m_ab;
    BatchStat st;
    st.per_image.resize(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n) {
        double img_sum = 0.0;
        for (int c = 0; c < C; ++c) {
            const float* px = x.data.data() + (static_cast<int64_t>(n) * H * W) * C + c;
            const float* py = y.data.data() + (static_cast<int64_t>(n) * H * W) * C + c;
            for (int64_t i = 0; i < plane_n; ++i) {
                double va = px[i * C], vb = py[i * C];
                a[static_cast<size_t>(i)] = va;
                b[static_cast<size_t>(i)] = vb;
                aa[static_cast<size_t>(i)] = va * va;
                bb[static_cast<size_t>(i)] = vb * vb;
                ab[static_cast<size_t>(i)] = va * vb;
            }
            conv_valid_11(a, H, W, tmp, mu_a);
            conv_valid_11(b, H, W, tmp, mu_b);
            conv_valid_11(aa, H, W, tmp, m_aa);
            conv_valid_11(bb, H, W, tmp, m_bb);
            conv_valid_11(ab, H, W, tmp, m_ab);
            double ch_sum = 0.0;
            for (size_t i = 0; i < mu_a.size(); ++i) {
                double ma = mu_a[i], mb = mu_b[i];
                double va = m_aa[i] - ma * ma;
                double vb = m_bb[i] - mb * mb;
                double cov = m_ab[i] - ma * mb;
                ch_sum += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) /
                          ((ma * ma + mb * mb + C1) * (va + vb + C2));
            }
            img_sum += ch_sum / static_cast<double>(mu_a.size());
        }
        double v = img_sum / C;
        st.per_image[static_cast<size_t>(n)] = v;
        st.mean += v;
    }
    st.mean /= N;
    return st;
}

void FeatureStats::add(const float* row, int D) {
    if (s1.empty()) {
        s1.assign(static_cast<size_t>(D), 0.0);
        s2.assign(static_cast<size_t>(D) * D, 0.0);
    } else if (dim() != D) {
        throw ShapeError("feature stats: dimension " + std::to_string(D) + " vs accumulated " +
                         std::to_string(dim()));
    }
    for (int i = 0; i < D; ++i) {
        s1[static_cast<size_t>(i)] += row[i];
        for (int j = 0; j < D; ++j)
            s2[static_cast<size_t>(i) * D + j] += static_cast<double>(row[i]) * row[j];
    }
    ++count;
}

void FeatureStats::add_batch(const Tensor& rows) {
    if (rows.shape.size() != 2) throw ShapeError("feature stats: expected [N,D], got " + shape_str(rows.shape));
    int N = rows.shape[0], D = rows.shape[1];
    for (int n = 0; n < N; ++n) add(rows.data.data() + static_cast<int64_t>(n) * D, D);
}

void FeatureStats::merge(const FeatureStats& other) {
    if (other.count == 0) return;
    if (count == 0) {
        *this = other;
        return;
    }
    if (dim() != other.dim())
        throw ShapeError("feature stats merge: dimension " + std::to_string(other.dim()) + " vs " +
                         std::to_string(dim()));
    for (size_t i = 0; i < s1.size(); ++i) s1[i] += other.s1[i];
    for (size_t i = 0; i < s2.size(); ++i) s2[i] += other.s2[i];
    count += other.count;
}

std::vector<double> FeatureStats::mean() const {
    if (count == 0) throw DomainError("feature stats: empty accumulator has no mean");
    std::vector<double> m(s1);
    for (double& v : m) v /= static_cast<double>(count);
    return m;
}

std::vector<double> FeatureStats::covariance() const {
    if (count < 2) throw DomainError("feature stats: covariance needs at least 2 samples, have " +
                                     std::to_string(count));
    int D = dim();
    std::vector<double> m = mean();
    std::vector<double> cov(static_cast<size_t>(D) * D);
    double inv = 1.0 / static_cast<double>(count - 1);
    for (int i = 0; i < D; ++i)
        for (int j = 0; j < D; ++j)
            cov[static_cast<size_t>(i) * D + j] =
                (s2[static_cast<size_t>(i) * D + j] - static_cast<double>(count) * m[static_cast<size_t>(i)] * m[static_cast<size_t>(j)]) * inv;
    for (int i = 0; i < D; ++i)  // exact symmetry regardless of accumulation rounding
        for (int j = i + 1; j < D; ++j) {
            double s = 0.5 * (cov[static_cast<size_t>(i) * D + j] + cov[static_cast<size_t>(j) * D + i]);
            cov[static_cast<size_t>(i) * D + j] = s;
            cov[static_cast<size_t>(j) * D + i] = s;
        }
    return cov;
}

namespace {

// Symmetric PSD square root via eigendecomposition, eigenvalues clamped >= 0.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.dim() != b.dim())
        throw ShapeError("frechet: dimension mismatch " + std::to_string(a.dim()) + " vs " +
                         std::to_string(b.dim()));
    int D = a.dim();
    std::vector<double> ma = a.mean(), mb = b.mean();
    std::vector<double> ca = a.covariance(), cb = b.covariance();
    Eigen::Map<const Eigen::MatrixXd> Sa(ca.data(), D, D), Sb(cb.data(), D, D);
    double mean_term = 0.0;
    for (int i = 0; i < D; ++i) {
        double d = ma[static_cast<size_t>(i)] - mb[static_cast<size_t>(i)];
        mean_term += d * d;
    }
    Eigen::MatrixXd ra = psd_sqrt(Sa);
    // Tr((Sa Sb)^{1/2}) computed on the symmetric similar form sqrt(Sa) Sb sqrt(Sa)
    Eigen::MatrixXd inner = ra * Sb * ra;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()));
    double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    double d2 = mean_term + Sa.trace() + Sb.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, d2);
}

RecallReport retrieval_recall(const Tensor& z_img, const Tensor& z_txt, int k) {
    if (z_img.shape.size() != 2 || !same_shape(z_img.shape, z_txt.shape))
        throw ShapeError("retrieval: need matching [N,D] sets, got " + shape_str(z_img.shape) + " vs " +
                         shape_str(z_txt.shape));
    if (k < 1) throw DomainError("retrieval: k must be >= 1");
    int N = z_img.shape[0], D = z_img.shape[1];
    std::vector<float> sim(static_cast<size_t>(N) * N);
    detail::gemm_nt(sim.data(), z_img.data.data(), z_txt.data.data(), N, D, N, false);
    // rank of the true partner: queries along one axis, candidates along the other
    auto recall_rows = [&](bool img_query) {
        int hits = 0;
        for (int q = 0; q < N; ++q) {
            float self = sim[static_cast<size_t>(q) * N + q];
            int better = 0;
            for (int c = 0; c < N; ++c) {
                if (c == q) continue;
                float v = img_query ? sim[static_cast<size_t>(q) * N + c] : sim[static_cast<size_t>(c) * N + q];
                if (v > self || (v == self && c < q)) ++better;  // ties favor the lower index
            }
            if (better < k) ++hits;
        }
        return static_cast<double>(hits) / N;
    };
    RecallReport r;
    r.k = k;
    r.n = N;
    r.img_to_txt = recall_rows(true);
    r.txt_to_img = recall_rows(false);
    return r;
}

namespace {

std::string fmt_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

}  // namespace

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os << "# resize=bilinear\n";
    os << "metric,value,n\n";
    os << "psnr," << fmt_value(psnr) << "," << n << "\n";
    os << "ssim," << fmt_value(ssim) << "," << n << "\n";
    os << "perceptual," << fmt_value(perceptual) << "," << n << "\n";
    os << "frechet," << fmt_value(frechet) << "," << n << "\n";
    for (const auto& [name, value] : extra) os << name << "," << fmt_value(value) << "," << n << "\n";
    return os.str();
}

std::string MetricReport::to_json() const {
    std::ostringstream os;
    os << "{\n  \"resize\": \"bilinear\",\n  \"n\": " << n << ",\n  \"metrics\": {\n";
    os << "    \"psnr\": " << fmt_value(psnr) << ",\n";
    os << "    \"ssim\": " << fmt_value(ssim) << ",\n";
    os << "    \"perceptual\": " << fmt_value(perceptual) << ",\n";
    os << "    \"frechet\": " << fmt_value(frechet);
    for (const auto& [name, value] : extra) os << ",\n    \"" << name << "\": " << fmt_value(value);
    os << "\n  }\n}\n";
    return os.str();
}

namespace {

// Deterministic sequential index batches over the whole set.
std::vector<std::vector<int>> sequential_batches(size_t n, int batch_size) {
    std::vector<std::vector<int>> out;
    for (size_t at = 0; at < n; at += static_cast<size_t>(batch_size)) {
        std::vector<int> idx;
        for (size_t i = at; i < std::min(n, at + static_cast<size_t>(batch_size)); ++i)
            idx.push_back(static_cast<int>(i));
        out.push_back(std::move(idx));
    }
    return out;
}

Tensor eval_images(const Dataset& ds, const std::vector<int>& idx, int res) {
    std::vector<Tensor> imgs;
    imgs.reserve(idx.size());
    for (int i : idx)
        imgs.push_back(to_tensor(resize_shorter_center_crop(ds.samples[static_cast<size_t>(i)].image, res)));
    return stack_images(imgs);
}

}  // namespace

MetricReport eval_reconstruction(const Dataset& ds, ParamStore& params, const ModelConfig& cfg,
                                 const CodecParams& codec, const PerceptualNet& pnet, int resolution,
                                 int batch_size) {
    if (ds.empty()) throw DomainError("eval: dataset is empty");
    if (batch_size < 1) throw DomainError("eval: batch size must be >= 1");
    MetricReport rep;
    FeatureStats stats_orig, stats_recon;
    double psnr_sum = 0.0, ssim_sum = 0.0, perc_sum = 0.0;
    for (const auto& idx : sequential_batches(ds.size(), batch_size)) {
        Tensor imgs = eval_images(ds, idx, resolution);
        int bn = imgs.shape[0];
        Graph g;
        Binder<float> B(&g, &params);
        auto z_vae = constant(g, encode_image(imgs, codec));
        auto tokens = encode_unified(B, cfg, z_vae);
        auto z_hat = decode_unified(B, cfg, tokens);  // zero perturbation at eval
        auto x_hat_ref = decode_latents_ref(z_hat, codec);
        Tensor x_hat(x_hat_ref.shape(), x_hat_ref.value().data);
        for (float& v : x_hat.data) v = std::clamp(v, -1.0f, 1.0f);

        psnr_sum += psnr(imgs, x_hat).mean * bn;
        ssim_sum += ssim(imgs, x_hat).mean * bn;
        {
            Graph pg;
            auto orig_c = constant(pg, imgs);
            auto recon_c = constant(pg, x_hat);
            perc_sum += static_cast<double>(perceptual_loss_ref(orig_c, recon_c, pnet).value().data[0]) * bn;
        }
        stats_orig.add_batch(perceptual_embed(imgs, pnet));
        stats_recon.add_batch(perceptual_embed(x_hat, pnet));
        rep.n += bn;
    }
    rep.psnr = psnr_sum / static_cast<double>(rep.n);
    rep.ssim = ssim_sum / static_cast<double>(rep.n);
    rep.perceptual = perc_sum / static_cast<double>(rep.n);
    rep.frechet = rep.n >= 2 ? frechet_distance(stats_orig, stats_recon) : 0.0;
    return rep;
}

void embed_corpus(const Dataset& ds, ParamStore& params, const ModelConfig& cfg,
                  const CodecParams& codec, const Vocab& vocab, int resolution, Tensor& z_img,
                  Tensor& z_txt, int batch_size) {
    if (ds.empty()) throw DomainError("embed: dataset is empty");
    int De = cfg.vit.embed_dim;
    z_img = Tensor(Shape{static_cast<int>(ds.size()), De});
    z_txt = Tensor(Shape{static_cast<int>(ds.size()), De});
    int64_t row = 0;
    for (const auto& idx : sequential_batches(ds.size(), batch_size)) {
        Tensor imgs = eval_images(ds, idx, resolution);
        int bn = imgs.shape[0];
        std::vector<int> ids;
        ids.reserve(static_cast<size_t>(bn) * cfg.text.max_len);
        for (int i : idx) {
            auto enc = vocab.encode(ds.samples[static_cast<size_t>(i)].caption, cfg.text.max_len);
            ids.insert(ids.end(), enc.begin(), enc.end());
        }
        Graph g;
        Binder<float> B(&g, &params);
        auto z_vae = constant(g, encode_image(imgs, codec));
        auto tokens = encode_unified(B, cfg, z_vae);
        auto zi = pool_visual(B, tokens.t);
        auto zt = encode_text(B, cfg, ids, bn, cfg.text.max_len, Vocab::PAD);
        const auto& vi = zi.value().data;
        std::copy(vi.begin(), vi.end(), z_img.data.begin() + row * De);
        const auto& vt = zt.value().data;
        std::copy(vt.begin(), vt.end(), z_txt.data.begin() + row * De);
        row += bn;
    }
}

}  // namespace unitok
