#pragma once

#include <string>
#include <utility>
#include <vector>

#include "unitok/codec.hpp"
#include "unitok/data.hpp"
#include "unitok/model.hpp"
#include "unitok/perceptual.hpp"
#include "unitok/tensor.hpp"

namespace unitok {

// Per-image values plus their mean, for batch metrics.
struct BatchStat {
    std::vector<double> per_image;
    double mean = 0.0;
};

// Peak signal-to-noise ratio on a data range of 2 ([-1,1] images), per image
// and mean; zero-MSE images cap at 99 dB (and 99 dB is the report ceiling).
BatchStat psnr(const Tensor& x, const Tensor& y);

// Structural similarity: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// data range 2, valid windows only, per-channel then averaged. Images smaller
// than the window are an error.
BatchStat ssim(const Tensor& x, const Tensor& y);

// Streaming first/second-moment accumulator for feature vectors. Merging two
// accumulators is exact element-wise addition, so aggregation order does not
// matter beyond f64 rounding.
struct FeatureStats {
    int64_t count = 0;
    std::vector<double> s1;  // [D] running sum
    std::vector<double> s2;  // [D*D] running sum of outer products

    int dim() const { return static_cast<int>(s1.size()); }
    void add(const float* row, int D);
    void add_batch(const Tensor& rows);  // [N,D]
    void merge(const FeatureStats& other);
    std::vector<double> mean() const;        // [D]
    std::vector<double> covariance() const;  // [D*D] unbiased, symmetrized; needs count >= 2
};

// Fréchet distance ||mu_a-mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), matrix
// square roots via symmetric eigendecomposition with eigenvalues clamped >= 0.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

struct RecallReport {
    double img_to_txt = 0.0;
    double txt_to_img = 0.0;
    int k = 1;
    int n = 0;
};

// Fraction of queries whose true partner ranks in the top k by cosine
// similarity (inputs are unit-norm rows); ties broken toward the lower index.
RecallReport retrieval_recall(const Tensor& z_img, const Tensor& z_txt, int k);

// Reconstruction metric report over a full dataset.
struct MetricReport {
    double psnr = 0.0;
    double ssim = 0.0;
    double perceptual = 0.0;
    double frechet = 0.0;
    int64_t n = 0;
    std::vector<std::pair<std::string, double>> extra;  // e.g. retrieval rows

    std::string to_csv() const;   // "# resize=bilinear" header + metric,value,n rows
    std::string to_json() const;  // same content for programmatic use
};

// Protocol: resize shorter side to `resolution` (bilinear), center-crop,
// encode -> unified tokens -> decode with zero perturbation, clamp to [-1,1],
// then PSNR/SSIM/perceptual distance and Fréchet over surrogate features.
// Deterministic; empty dataset is an error.
MetricReport eval_reconstruction(const Dataset& ds, ParamStore& params, const ModelConfig& cfg,
                                 const CodecParams& codec, const PerceptualNet& pnet, int resolution,
                                 int batch_size = 16);

// Pooled visual and text embeddings for every sample, unit-norm rows [N,D_e].
void embed_corpus(const Dataset& ds, ParamStore& params, const ModelConfig& cfg,
                  const CodecParams& codec, const Vocab& vocab, int resolution, Tensor& z_img,
                  Tensor& z_txt, int batch_size = 16);

}  // namespace unitok
