// Acceptance gate. Each test case verifies one release criterion and prints
// one [ACCEPTANCE] PASS/FAIL line. The heavyweight fixtures (synthetic
// corpus, the full two-stage joint run, the three-mode ablation suite) are
// built once and shared across criteria.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <memory>

#include "doctest.h"
#include "unitok/codec.hpp"
#include "unitok/metrics.hpp"
#include "unitok/trainer.hpp"

using namespace unitok;
namespace fs = std::filesystem;

using GraphD = GraphT<double>;
using RefD = RefT<double>;
using TenD = TensorT<double>;

namespace {

// ---------------------------------------------------------------------------
// reporting
// ---------------------------------------------------------------------------

void report(int num, const char* name, bool pass) {
    std::printf("[ACCEPTANCE] %d/9 %-58s %s\n", num, name, pass ? "PASS" : "FAIL");
    std::fflush(stdout);
}

double now_s() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

struct TempDir {
    fs::path p;
    TempDir() {
        p = fs::temp_directory_path() / ("utk_accept_" + std::to_string(::getpid()));
        fs::create_directories(p);
    }
    ~TempDir() { std::error_code ec; fs::remove_all(p, ec); }
    std::string file(const char* name) const { return (p / name).string(); }
};

// ---------------------------------------------------------------------------
// shared fixtures
// ---------------------------------------------------------------------------

constexpr uint64_t kCorpusSeed = 20260817;
constexpr int kMasterRes = 64;
constexpr int kTrainN = 8192;
constexpr int kEvalN = 1024;
constexpr int kRetrievalN = 256;

struct Corpus {
    Dataset train, eval_set;
};

const Corpus& corpus() {
    static const Corpus c = [] {
        double t0 = now_s();
        Dataset all = generate_corpus(kCorpusSeed, kTrainN + kEvalN, kMasterRes);
        Corpus out;
        out.train.samples.assign(all.samples.begin(), all.samples.begin() + kTrainN);
        out.eval_set.samples.assign(all.samples.begin() + kTrainN, all.samples.end());
        std::printf("  [fixture] corpus: %d train + %d eval @ %dpx in %.1fs\n", kTrainN, kEvalN,
                    kMasterRes, now_s() - t0);
        return out;
    }();
    return c;
}

Dataset head_of(const Dataset& ds, int n) {
    Dataset out;
    out.samples.assign(ds.samples.begin(), ds.samples.begin() + n);
    return out;
}

// Small full-pipeline run at default model dimensions: 16 steps at the
// first-stage resolution. Used by the closed-form/report-identity criterion
// and reused as run A of the determinism criterion.
TrainerConfig small_run_cfg() {
    TrainerConfig cfg;
    cfg.stage1 = {32, 8, 3e-4, 16, 4, 0.0};
    cfg.stage2 = {64, 4, 1.5e-5, 0, 0, 0.5};
    return cfg;
}

const std::vector<LossReport>& small_run_rows() {
    static const std::vector<LossReport> rows = [] {
        Trainer t(small_run_cfg(), head_of(corpus().train, 512), Vocab::build());
        return t.run();
    }();
    return rows;
}

// The full desk-preset joint run plus its evaluation inputs.
struct JointRun {
    std::unique_ptr<Trainer> trainer;
    std::vector<LossReport> rows;
    double stage_seconds[2] = {0, 0};
};

const JointRun& joint_run() {
    static const JointRun jr = [] {
        JointRun out;
        TrainerConfig cfg;  // defaults are the desk preset
        out.trainer = std::make_unique<Trainer>(cfg, corpus().train, Vocab::build());
        std::printf("  [fixture] joint run: stage 1 (%d steps @ %dpx, batch %d)...\n",
                    cfg.stage1.total_steps, cfg.stage1.resolution, cfg.stage1.batch_size);
        std::fflush(stdout);
        double t0 = now_s();
        out.rows = out.trainer->run_stage(0);
        out.stage_seconds[0] = now_s() - t0;
        std::printf("  [fixture] stage 1 done in %.1f min; stage 2 (%d steps @ %dpx, batch %d)...\n",
                    out.stage_seconds[0] / 60.0, cfg.stage2.total_steps, cfg.stage2.resolution,
                    cfg.stage2.batch_size);
        std::fflush(stdout);
        t0 = now_s();
        auto s2 = out.trainer->run_stage(1);
        out.stage_seconds[1] = now_s() - t0;
        out.rows.insert(out.rows.end(), s2.begin(), s2.end());
        std::printf("  [fixture] stage 2 done in %.1f min (total %.1f min, %zu steps)\n",
                    out.stage_seconds[1] / 60.0, (out.stage_seconds[0] + out.stage_seconds[1]) / 60.0,
                    out.rows.size());
        std::fflush(stdout);
        return out;
    }();
    return jr;
}

// Ablation suite: three aligned single-stage runs differing only in which
// losses are backpropagated. 400 steps is where the directional effects are
// already visible at this scale.
const std::array<std::vector<LossReport>, 3>& ablation_runs() {
    static const std::array<std::vector<LossReport>, 3> runs = [] {
        TrainerConfig cfg;
        cfg.stage1 = {32, 8, 3e-4, 400, 20, 0.0};
        cfg.stage2 = {64, 4, 1.5e-5, 0, 0, 0.5};
        std::printf("  [fixture] ablation suite: 3 aligned runs x %d steps...\n",
                    cfg.stage1.total_steps);
        std::fflush(stdout);
        double t0 = now_s();
        auto out = Trainer::run_ablation_suite(cfg, corpus().train, Vocab::build());
        std::printf("  [fixture] ablation done in %.1f min\n", (now_s() - t0) / 60.0);
        std::fflush(stdout);
        return out;
    }();
    return runs;
}

// Mean of the first (or last) window of a component column; the window is a
// tenth of the run, at least 5 steps, to read curve direction through noise.
double window_mean(const std::vector<LossReport>& rows, double LossReport::* comp, bool from_start) {
    size_t n = rows.size();
    size_t w = std::min(n, std::max<size_t>(5, n / 10));
    double sum = 0;
    for (size_t i = 0; i < w; ++i) sum += rows[from_start ? i : n - 1 - i].*comp;
    return sum / static_cast<double>(w);
}

// ---------------------------------------------------------------------------
// finite-difference harness (f64)
// ---------------------------------------------------------------------------

struct OpSpec {
    std::string name;
    std::vector<TenD> inputs;
    std::function<RefD(GraphD&, std::vector<RefD>&)> build;
};

// Max relative error between analytic and central-difference gradients of a
// fixed weighted-sum probe of the op's output, over sampled input elements.
double op_max_rel(const OpSpec& spec, uint64_t probe_seed) {
    TenD w;  // probe weights, fixed after the first forward
    auto eval = [&](const std::vector<TenD>& ins, GraphD& g, std::vector<RefD>* leaves) {
        std::vector<RefD> refs;
        for (auto t : ins) {
            t.requires_grad = true;
            refs.push_back(leaf(g, std::move(t)));
        }
        RefD y = spec.build(g, refs);
        if (w.numel() == 0) {
            Rng wr(2024);
            w = TenD::uniform(y.shape(), wr, 0.25, 1.0);
        }
        RefD s = sum_all(mul(y, constant(g, w)));
        if (leaves) *leaves = refs;
        return s;
    };

    GraphD g;
    std::vector<RefD> leaves;
    RefD s = eval(spec.inputs, g, &leaves);
    g.backward(s.id);

    const double h = 1e-4;
    double max_rel = 0;
    Rng pick(probe_seed);
    for (size_t i = 0; i < spec.inputs.size(); ++i) {
        const auto& grad = g.node(leaves[i].id).value.grad;
        REQUIRE(!grad.empty());
        int64_t n = spec.inputs[i].numel();
        int probes = static_cast<int>(std::min<int64_t>(6, n));
        for (int p = 0; p < probes; ++p) {
            size_t idx = static_cast<size_t>(pick.below(static_cast<uint64_t>(n)));
            auto ins = spec.inputs;
            ins[i].data[idx] += h;
            GraphD gp;
            double fp = eval(ins, gp, nullptr).value().data[0];
            ins[i].data[idx] -= 2 * h;
            GraphD gm;
            double fm = eval(ins, gm, nullptr).value().data[0];
            double fd = (fp - fm) / (2 * h);
            double an = grad[idx];
            double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

TenD rnd(Shape s, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    return TenD::uniform(std::move(s), rng, lo, hi);
}

ModelConfig micro_model() {
    ModelConfig mc;
    mc.codec_f = 4;
    mc.codec_seed = 11;
    mc.vit.depth = 1;
    mc.vit.dim = 16;
    mc.vit.heads = 2;
    mc.vit.mlp_ratio = 2;
    mc.vit.embed_dim = 8;
    mc.decoder_depth = 1;
    mc.text.layers = 1;
    mc.text.width = 16;
    mc.text.heads = 2;
    mc.text.max_len = 10;
    mc.text.vocab = 12;
    mc.seed = 99;
    return mc;
}

}  // namespace

// ===========================================================================
// 1. gradient integrity
// ===========================================================================

TEST_CASE("gradient integrity: every op and sampled end-to-end parameters") {
    double t0 = now_s();

    std::vector<int> ce_targets{1, 3, -1, 0, 4, 2};
    std::vector<int> emb_ids{1, 3, 1, 5, 0, 2};
    std::vector<uint8_t> attn_mask{1, 1, 0, 1, 0, 1};
    std::vector<uint8_t> pool_mask{1, 1, 0, 1, 1, 0, 0, 1};

    std::vector<OpSpec> ops;
    ops.push_back({"add", {rnd({2, 3}, 1), rnd({2, 3}, 2)},
                   [](GraphD&, std::vector<RefD>& r) { return add(r[0], r[1]); }});
    ops.push_back({"sub", {rnd({2, 3}, 3), rnd({2, 3}, 4)},
                   [](GraphD&, std::vector<RefD>& r) { return sub(r[0], r[1]); }});
    ops.push_back({"mul", {rnd({2, 3}, 5), rnd({2, 3}, 6)},
                   [](GraphD&, std::vector<RefD>& r) { return mul(r[0], r[1]); }});
    ops.push_back({"scale", {rnd({2, 3}, 7)},
                   [](GraphD&, std::vector<RefD>& r) { return scale(r[0], 1.7); }});
    ops.push_back({"gelu", {rnd({2, 4}, 8, -2.0, 2.0)},
                   [](GraphD&, std::vector<RefD>& r) { return gelu(r[0]); }});
    ops.push_back({"exp", {rnd({2, 4}, 9)},
                   [](GraphD&, std::vector<RefD>& r) { return unitok::exp(r[0]); }});
    ops.push_back({"log", {rnd({2, 4}, 10, 0.5, 2.0)},
                   [](GraphD&, std::vector<RefD>& r) { return unitok::log(r[0]); }});
    ops.push_back({"matmul", {rnd({3, 4}, 11), rnd({4, 2}, 12)},
                   [](GraphD&, std::vector<RefD>& r) { return matmul(r[0], r[1]); }});
    ops.push_back({"matmul_batched", {rnd({2, 3, 4}, 13), rnd({4, 2}, 14)},
                   [](GraphD&, std::vector<RefD>& r) { return matmul(r[0], r[1]); }});
    ops.push_back({"add_bias", {rnd({2, 3, 4}, 15), rnd({4}, 16)},
                   [](GraphD&, std::vector<RefD>& r) { return add_bias(r[0], r[1]); }});
    ops.push_back({"add_pos", {rnd({2, 5, 4}, 17), rnd({5, 4}, 18)},
                   [](GraphD&, std::vector<RefD>& r) { return add_pos(r[0], r[1]); }});
    ops.push_back({"layer_norm", {rnd({2, 3, 6}, 19), rnd({6}, 20, 0.5, 1.5), rnd({6}, 21)},
                   [](GraphD&, std::vector<RefD>& r) { return layer_norm(r[0], r[1], r[2]); }});
    ops.push_back({"softmax_cross_entropy", {rnd({6, 5}, 22)},
                   [ce_targets](GraphD&, std::vector<RefD>& r) {
                       return softmax_cross_entropy(r[0], ce_targets, -1);
                   }});
    ops.push_back({"attention", {rnd({2, 2, 3, 4}, 23), rnd({2, 2, 3, 4}, 24), rnd({2, 2, 3, 4}, 25)},
                   [](GraphD&, std::vector<RefD>& r) { return attention(r[0], r[1], r[2], false); }});
    ops.push_back({"attention_causal",
                   {rnd({2, 2, 3, 4}, 26), rnd({2, 2, 3, 4}, 27), rnd({2, 2, 3, 4}, 28)},
                   [](GraphD&, std::vector<RefD>& r) { return attention(r[0], r[1], r[2], true); }});
    ops.push_back({"attention_masked",
                   {rnd({2, 2, 3, 4}, 29), rnd({2, 2, 3, 4}, 30), rnd({2, 2, 3, 4}, 31)},
                   [attn_mask](GraphD&, std::vector<RefD>& r) {
                       return attention(r[0], r[1], r[2], false, &attn_mask);
                   }});
    ops.push_back({"permute", {rnd({2, 3, 4}, 32)},
                   [](GraphD&, std::vector<RefD>& r) { return permute(r[0], {2, 0, 1}); }});
    ops.push_back({"reshape", {rnd({2, 6}, 33)},
                   [](GraphD&, std::vector<RefD>& r) { return reshape(r[0], {3, 4}); }});
    ops.push_back({"concat_tokens", {rnd({2, 3, 4}, 34), rnd({2, 2, 4}, 35)},
                   [](GraphD&, std::vector<RefD>& r) { return concat_tokens(r[0], r[1]); }});
    ops.push_back({"mean_tokens", {rnd({2, 5, 4}, 36)},
                   [](GraphD&, std::vector<RefD>& r) { return mean_tokens(r[0]); }});
    ops.push_back({"masked_mean_tokens", {rnd({2, 4, 3}, 37)},
                   [pool_mask](GraphD&, std::vector<RefD>& r) {
                       return masked_mean_tokens(r[0], pool_mask);
                   }});
    ops.push_back({"l2_normalize_rows", {rnd({3, 5}, 38)},
                   [](GraphD&, std::vector<RefD>& r) { return l2_normalize_rows(r[0]); }});
    ops.push_back({"l1_loss", {rnd({2, 3, 4}, 39, 0.5, 1.5), rnd({2, 3, 4}, 40, -1.5, -0.5)},
                   [](GraphD&, std::vector<RefD>& r) { return l1_loss(r[0], r[1]); }});
    ops.push_back({"mean_all", {rnd({2, 3, 4}, 41)},
                   [](GraphD&, std::vector<RefD>& r) { return mean_all(r[0]); }});
    ops.push_back({"sum_all", {rnd({2, 3, 4}, 42)},
                   [](GraphD&, std::vector<RefD>& r) { return sum_all(r[0]); }});
    ops.push_back({"embedding", {rnd({7, 4}, 43)},
                   [emb_ids](GraphD&, std::vector<RefD>& r) { return embedding(r[0], emb_ids, 2, 3); }});
    ops.push_back({"patchify", {rnd({1, 4, 4, 3}, 44)},
                   [](GraphD&, std::vector<RefD>& r) { return patchify(r[0], 2); }});
    ops.push_back({"unpatchify", {rnd({1, 4, 12}, 45)},
                   [](GraphD&, std::vector<RefD>& r) { return unpatchify(r[0], 2, 2, 2); }});
    {
        TenD cw = rnd({3, 3, 2, 3}, 46, -0.5, 0.5);
        TenD cb = rnd({3}, 47, -0.2, 0.2);
        ops.push_back({"conv2d_frozen", {rnd({1, 5, 5, 2}, 48)},
                       [cw, cb](GraphD&, std::vector<RefD>& r) {
                           return conv2d_frozen(r[0], cw, cb, 2, 1);
                       }});
    }

    bool pass = true;
    double worst = 0;
    std::string worst_op;
    for (size_t i = 0; i < ops.size(); ++i) {
        double rel = op_max_rel(ops[i], 1000 + i);
        if (rel > worst) {
            worst = rel;
            worst_op = ops[i].name;
        }
        CHECK_MESSAGE(rel <= 1e-4, ops[i].name, " max rel err ", rel);
        pass = pass && rel <= 1e-4;
    }
    std::printf("  %zu ops checked, worst rel err %.3g (%s)\n", ops.size(), worst, worst_op.c_str());

    // end to end: three randomly selected parameters of a full model, against
    // finite differences of the sum of all five losses
    ModelConfig mc = micro_model();
    CodecParams codec = make_codec(mc.codec_f, mc.codec_seed);
    PerceptualNet pnet = PerceptualNet::make(kDefaultPerceptualSeed);
    ParamStore store = init_params(mc, 2, 2);
    Rng drng(31);
    TenD images = TenD::uniform({2, 16, 16, 3}, drng, -0.9, 0.9);
    std::vector<int> ids{1, 5, 6, 7, 2, 0, 1, 8, 9, 10, 2, 0};
    Tensor noise = make_perturbation({2, 4, mc.vit.dim}, 0.1, Rng(7).stream("noise", 0));

    auto loss_sum = [&](GraphD& g, Binder<double>& B) {
        auto L = build_losses(g, B, mc, codec, pnet, images, ids, 2, 6, 0, noise);
        return add(add(L.pixel_l1, L.latent_l1), add(L.perceptual, add(L.caption_ce, L.contrastive)));
    };
    GraphD g;
    Binder<double> B(&g, &store);
    RefD total = loss_sum(g, B);
    g.backward(total.id);

    Rng sel(kCorpusSeed);
    std::vector<size_t> chosen;
    while (chosen.size() < 3) {
        size_t c = static_cast<size_t>(sel.below(store.size()));
        bool dup = false;
        for (size_t x : chosen) dup = dup || x == c;
        if (!dup) chosen.push_back(c);
    }
    const double h = 1e-4;
    double worst_e2e = 0;
    for (size_t pi : chosen) {
        const std::string& nm = store.name(pi);
        Tensor& p = store.get(nm);
        const auto& grad = g.node(B.bound().at(nm).id).value.grad;
        REQUIRE_MESSAGE(!grad.empty(), nm, " unreached by the combined losses");
        for (int probe = 0; probe < 2; ++probe) {
            size_t idx = static_cast<size_t>(sel.below(static_cast<uint64_t>(p.numel())));
            float orig = p.data[idx];
            auto eval_at = [&](float v) {
                p.data[idx] = v;
                GraphD ge;
                Binder<double> Be(&ge, &store);
                return loss_sum(ge, Be).value().data[0];
            };
            double fp = eval_at(orig + static_cast<float>(h));
            double fm = eval_at(orig - static_cast<float>(h));
            p.data[idx] = orig;
            double fd = (fp - fm) / (2 * h);
            double an = grad[idx];
            double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            worst_e2e = std::max(worst_e2e, rel);
            CHECK_MESSAGE(rel <= 1e-3, nm, "[", idx, "] end-to-end rel err ", rel);
            pass = pass && rel <= 1e-3;
        }
        std::printf("  end-to-end parameter '%s' checked\n", nm.c_str());
    }
    std::printf("  worst end-to-end rel err %.3g\n", worst_e2e);

    double elapsed = now_s() - t0;
    std::printf("  gradient checks took %.1fs\n", elapsed);
    CHECK_MESSAGE(elapsed < 60.0, "gradient integrity must finish under a minute");
    pass = pass && elapsed < 60.0;

    report(1, "gradient integrity (all ops + end-to-end, f64 FD)", pass);
}

// ===========================================================================
// 2. codec losslessness
// ===========================================================================

TEST_CASE("codec round-trip is lossless") {
    CodecParams codec = make_codec(4, ModelConfig{}.codec_seed);
    Rng rng(77);
    Tensor imgs = Tensor::uniform({100, 32, 32, 3}, rng, -1.0f, 1.0f);
    Tensor z = encode_image(imgs, codec);
    Graph g;
    Tensor back(decode_latents_ref(constant(g, z), codec).value());

    double max_abs = 0;
    for (size_t i = 0; i < imgs.data.size(); ++i)
        max_abs = std::max(max_abs, std::abs(static_cast<double>(imgs.data[i]) - back.data[i]));
    double psnr_db = psnr(imgs, back).mean;

    std::printf("  100 images: max abs err %.3g, PSNR %.1f dB\n", max_abs, psnr_db);
    bool pass = max_abs <= 1e-5 && psnr_db >= 90.0;
    CHECK(max_abs <= 1e-5);
    CHECK(psnr_db >= 90.0);
    report(2, "codec round-trip lossless (<=1e-5, PSNR >= 90 dB)", pass);
}

// ===========================================================================
// 3. loss-formula oracles
// ===========================================================================

TEST_CASE("loss formulas hit their closed forms and the report identity") {
    bool pass = true;

    // contrastive loss on identical unit embeddings == log N
    {
        const int n = 8, d = 16;
        Rng rng(70);
        TenD one = TenD::randn({1, d}, rng);
        double nrm = 0;
        for (double v : one.data) nrm += v * v;
        nrm = std::sqrt(nrm);
        TenD z({n, d});
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < d; ++j) z.data[static_cast<size_t>(r * d + j)] = one.data[static_cast<size_t>(j)] / nrm;
        ParamStore st;
        st.add("logit_scale", Tensor({1}, std::vector<float>{static_cast<float>(std::log(1.0 / 0.07))}));
        GraphD g;
        Binder<double> B(&g, &st);
        double got = contrastive_loss(B, constant(g, z), constant(g, z)).value().data[0];
        double err = std::abs(got - std::log(static_cast<double>(n)));
        std::printf("  contrastive(identical, N=%d) = %.12f vs ln N = %.12f (err %.2g)\n", n, got,
                    std::log(static_cast<double>(n)), err);
        CHECK(err <= 1e-6);
        pass = pass && err <= 1e-6;
    }

    // uniform logits: cross-entropy == log V exactly
    {
        const int v = static_cast<int>(Vocab::build().size());
        GraphD g;
        TenD logits({5, v}, 0.7);
        std::vector<int> targets{0, 3, v - 1, 2, -1};
        double got = softmax_cross_entropy(constant(g, logits), targets, -1).value().data[0];
        double err = std::abs(got - std::log(static_cast<double>(v)));
        std::printf("  uniform-logit CE (V=%d) err %.2g\n", v, err);
        CHECK(err <= 1e-6);
        pass = pass && err <= 1e-6;
    }

    // captioning at random init stays within 10%% of log V
    {
        const auto& rows = small_run_rows();
        REQUIRE(!rows.empty());
        const double lnv = std::log(static_cast<double>(Vocab::build().size()));
        double rel = std::abs(rows[0].caption_ce - lnv) / lnv;
        std::printf("  caption CE at init %.4f vs ln V %.4f (rel %.3f)\n", rows[0].caption_ce, lnv, rel);
        CHECK(rel <= 0.10);
        pass = pass && rel <= 0.10;
    }

    // weighted composition identity at every logged step
    {
        TrainerConfig cfg = small_run_cfg();
        double worst = 0;
        for (const auto& r : small_run_rows()) {
            double lambda = r.stage == 1 ? cfg.lambda_pretrain : cfg.lambda_finetune;
            double want = cfg.omega_rec * (r.pixel_l1 + cfg.beta * r.latent_l1 + lambda * r.perceptual) +
                          cfg.omega_und * (r.caption_ce + cfg.alpha * r.contrastive);
            worst = std::max(worst, std::abs(r.weighted_total - want) / std::max(1.0, std::abs(want)));
        }
        std::printf("  report identity worst deviation %.3g over %zu steps\n", worst,
                    small_run_rows().size());
        CHECK(worst <= 1e-6);
        pass = pass && worst <= 1e-6;
    }

    report(3, "loss closed forms (ln N, ln V) and per-step report identity", pass);
}

// ===========================================================================
// 4. feature-distribution distance oracles
// ===========================================================================

TEST_CASE("distribution distance hits closed forms and an independent root") {
    bool pass = true;

    // identical accumulators
    {
        FeatureStats a;
        Rng rng(81);
        Tensor rows = Tensor::randn({64, 4}, rng);
        a.add_batch(rows);
        double d = frechet_distance(a, a);
        CHECK(d <= 1e-6);
        pass = pass && d <= 1e-6;
    }

    // pure mean shift with identical covariance: distance == squared shift.
    // Samples and shift live on a coarse dyadic grid so the shifted rows are
    // exactly representable and the covariances match bit for bit.
    {
        const int n = 64, d = 4;
        Rng rng(82);
        std::vector<float> base(static_cast<size_t>(n) * d);
        for (float& v : base) v = std::round(static_cast<float>(rng.normal()) * 64.0f) / 64.0f;
        const float shift[4] = {0.5f, -0.25f, 1.0f, 0.0f};
        FeatureStats a, b;
        for (int i = 0; i < n; ++i) {
            float row[4];
            for (int j = 0; j < d; ++j) row[j] = base[static_cast<size_t>(i * d + j)];
            a.add(row, d);
            for (int j = 0; j < d; ++j) row[j] += shift[j];
            b.add(row, d);
        }
        double want = 0.5 * 0.5 + 0.25 * 0.25 + 1.0;
        double got = frechet_distance(a, b);
        std::printf("  mean-shift case: %.9f vs %.9f (err %.2g)\n", got, want, std::abs(got - want));
        CHECK(std::abs(got - want) <= 1e-6);
        pass = pass && std::abs(got - want) <= 1e-6;
    }

    // D=3 full-covariance case against an independent eigendecomposition of
    // the covariance product (trace of the square root via its eigenvalues)
    {
        const int n = 50, d = 3;
        Rng rng(83);
        FeatureStats a, b;
        for (int i = 0; i < n; ++i) {
            float ra[3], rb[3];
            for (int j = 0; j < d; ++j) ra[j] = static_cast<float>(rng.normal());
            for (int j = 0; j < d; ++j)
                rb[j] = static_cast<float>(0.4 * rng.normal() + 0.1 * ra[j] + 0.3);
            a.add(ra, d);
            b.add(rb, d);
        }
        auto to_mat = [&](const std::vector<double>& c) {
            Eigen::MatrixXd m(d, d);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) m(i, j) = c[static_cast<size_t>(i * d + j)];
            return m;
        };
        Eigen::MatrixXd Sa = to_mat(a.covariance()), Sb = to_mat(b.covariance());
        Eigen::EigenSolver<Eigen::MatrixXd> es(Sa * Sb);
        double tr_sqrt = 0;
        for (int i = 0; i < d; ++i) tr_sqrt += std::sqrt(std::max(0.0, es.eigenvalues()[i].real()));
        auto ma = a.mean(), mb = b.mean();
        double mean_term = 0;
        for (int j = 0; j < d; ++j)
            mean_term += (ma[static_cast<size_t>(j)] - mb[static_cast<size_t>(j)]) *
                         (ma[static_cast<size_t>(j)] - mb[static_cast<size_t>(j)]);
        double want = mean_term + Sa.trace() + Sb.trace() - 2.0 * tr_sqrt;
        double got = frechet_distance(a, b);
        std::printf("  full-covariance case: %.9f vs oracle %.9f (err %.2g)\n", got, want,
                    std::abs(got - want));
        CHECK(std::abs(got - want) <= 1e-5);
        pass = pass && std::abs(got - want) <= 1e-5;
    }

    report(4, "distribution distance oracles (zero, mean shift, D=3 SPD)", pass);
}

// ===========================================================================
// 5. desk-scale joint training
// ===========================================================================

TEST_CASE("joint training lifts reconstruction and retrieval off the floor") {
    const JointRun& jr = joint_run();
    const Trainer& t = *jr.trainer;
    const ModelConfig& mc = t.config().model;

    // report identity also holds over the full production run
    {
        const TrainerConfig& cfg = t.config();
        double worst = 0;
        for (const auto& r : jr.rows) {
            double lambda = r.stage == 1 ? cfg.lambda_pretrain : cfg.lambda_finetune;
            double want = cfg.omega_rec * (r.pixel_l1 + cfg.beta * r.latent_l1 + lambda * r.perceptual) +
                          cfg.omega_und * (r.caption_ce + cfg.alpha * r.contrastive);
            worst = std::max(worst, std::abs(r.weighted_total - want) / std::max(1.0, std::abs(want)));
        }
        CHECK(worst <= 1e-6);
    }

    Dataset eval_head = head_of(corpus().eval_set, kRetrievalN);
    const int eval_res = 64;
    const int grid = eval_res / (mc.codec_f * 2);

    ParamStore untrained = init_params(mc, grid, grid);
    MetricReport before = eval_reconstruction(eval_head, untrained, mc, t.codec(), t.perceptual_net(),
                                              eval_res, 16);
    ParamStore trained = t.params();  // copy so nothing mutates the fixture
    MetricReport after = eval_reconstruction(eval_head, trained, mc, t.codec(), t.perceptual_net(),
                                             eval_res, 16);
    double gain = after.psnr - before.psnr;
    std::printf("  held-out PSNR: untrained %.2f dB -> trained %.2f dB (gain %.2f dB)\n", before.psnr,
                after.psnr, gain);
    std::printf("  held-out SSIM %.3f, surrogate-frechet %.3f\n", after.ssim, after.frechet);

    Tensor z_img, z_txt;
    embed_corpus(eval_head, trained, mc, t.codec(), t.vocab(), eval_res, z_img, z_txt, 16);
    RecallReport rec = retrieval_recall(z_img, z_txt, 1);
    double chance = 1.0 / kRetrievalN;
    std::printf("  retrieval recall@1 on %d held-out pairs: txt->img %.4f, img->txt %.4f (chance %.4f)\n",
                kRetrievalN, rec.txt_to_img, rec.img_to_txt, chance);
    std::printf("  training wall time %.1f min\n", (jr.stage_seconds[0] + jr.stage_seconds[1]) / 60.0);

    bool pass = gain >= 10.0 && rec.txt_to_img >= 0.16;
    CHECK(gain >= 10.0);
    CHECK(rec.txt_to_img >= 0.16);
    report(5, "joint training: PSNR gain >= 10 dB, recall@1 >= 0.16", pass);
}

// ===========================================================================
// 6. understanding-only run still improves reconstruction losses
// ===========================================================================

TEST_CASE("understanding-only training leaves the expected curve directions") {
    const auto& runs = ablation_runs();
    const auto& joint = runs[0];
    const auto& und = runs[1];

    double u_pix_i = window_mean(und, &LossReport::pixel_l1, true);
    double u_pix_f = window_mean(und, &LossReport::pixel_l1, false);
    double u_lat_i = window_mean(und, &LossReport::latent_l1, true);
    double u_lat_f = window_mean(und, &LossReport::latent_l1, false);
    std::printf("  und-only pixel %.4f -> %.4f, latent %.4f -> %.4f\n", u_pix_i, u_pix_f, u_lat_i,
                u_lat_f);

    double j_cap = window_mean(joint, &LossReport::caption_ce, false);
    double u_cap = window_mean(und, &LossReport::caption_ce, false);
    double j_con = window_mean(joint, &LossReport::contrastive, false);
    double u_con = window_mean(und, &LossReport::contrastive, false);
    double cap_rel = std::abs(j_cap - u_cap) / std::max(u_cap, 1e-12);
    double con_rel = std::abs(j_con - u_con) / std::max(u_con, 1e-12);
    std::printf("  final caption: joint %.4f vs und-only %.4f (rel diff %.3f)\n", j_cap, u_cap, cap_rel);
    std::printf("  final contrastive: joint %.4f vs und-only %.4f (rel diff %.3f)\n", j_con, u_con,
                con_rel);

    bool pass = u_pix_f < u_pix_i && u_lat_f < u_lat_i && cap_rel < 0.10 && con_rel < 0.10;
    CHECK(u_pix_f < u_pix_i);
    CHECK(u_lat_f < u_lat_i);
    CHECK(cap_rel < 0.10);
    CHECK(con_rel < 0.10);
    report(6, "understanding-only: recon losses fall; semantics match joint", pass);
}

// ===========================================================================
// 7. reconstruction-only run leaves semantic losses flat
// ===========================================================================

TEST_CASE("reconstruction-only training leaves the expected curve directions") {
    const auto& runs = ablation_runs();
    const auto& joint = runs[0];
    const auto& rec = runs[2];

    double r_con_i = window_mean(rec, &LossReport::contrastive, true);
    double r_con_f = window_mean(rec, &LossReport::contrastive, false);
    double ratio = r_con_f / r_con_i;
    double r_cap_i = window_mean(rec, &LossReport::caption_ce, true);
    double r_cap_f = window_mean(rec, &LossReport::caption_ce, false);
    double j_pix_f = window_mean(joint, &LossReport::pixel_l1, false);
    double r_pix_f = window_mean(rec, &LossReport::pixel_l1, false);
    std::printf("  rec-only contrastive %.4f -> %.4f (ratio %.3f)\n", r_con_i, r_con_f, ratio);
    std::printf("  rec-only caption %.4f -> %.4f\n", r_cap_i, r_cap_f);
    std::printf("  final pixel: joint %.4f vs rec-only %.4f\n", j_pix_f, r_pix_f);

    bool pass = ratio >= 0.8 && ratio <= 1.2 && r_cap_f < r_cap_i && j_pix_f <= r_pix_f;
    CHECK(ratio >= 0.8);
    CHECK(ratio <= 1.2);
    CHECK(r_cap_f < r_cap_i);
    CHECK(j_pix_f <= r_pix_f);
    report(7, "reconstruction-only: contrastive flat, caption dips, pixel >= joint", pass);
}

// ===========================================================================
// 8. determinism and checkpoint replay
// ===========================================================================

TEST_CASE("runs are bit-reproducible and checkpoints replay exactly") {
    TempDir tmp;
    bool pass = true;

    // identical config -> byte-identical curve files
    {
        Dataset slice = head_of(corpus().train, 512);
        Vocab vocab = Vocab::build();
        write_curve_csv(tmp.file("a.csv"), small_run_rows());
        Trainer b(small_run_cfg(), slice, vocab);
        write_curve_csv(tmp.file("b.csv"), b.run());
        std::ifstream fa(tmp.file("a.csv"), std::ios::binary), fb(tmp.file("b.csv"), std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
        bool same = !sa.empty() && sa == sb;
        std::printf("  two fresh runs: curve files %s (%zu bytes)\n",
                    same ? "byte-identical" : "DIFFER", sa.size());
        CHECK(same);
        pass = pass && same;
    }

    // mid-run checkpoint -> identical ten-step continuation
    {
        Dataset slice = head_of(corpus().train, 512);
        Vocab vocab = Vocab::build();
        TrainerConfig cfg = small_run_cfg();
        cfg.stage1.total_steps = 16;
        Trainer c(cfg, slice, vocab);
        for (int i = 0; i < 6; ++i) c.train_step(c.next_batch());
        c.save(tmp.file("mid.utkp"));
        Trainer d(cfg, slice, vocab);
        d.restore(tmp.file("mid.utkp"));

        bool same = true;
        for (int i = 0; i < 10; ++i) {
            LossReport rc = c.train_step(c.next_batch());
            LossReport rd = d.train_step(d.next_batch());
            same = same && rc.step == rd.step && rc.lr == rd.lr && rc.pixel_l1 == rd.pixel_l1 &&
                   rc.latent_l1 == rd.latent_l1 && rc.perceptual == rd.perceptual &&
                   rc.caption_ce == rd.caption_ce && rc.contrastive == rd.contrastive &&
                   rc.weighted_total == rd.weighted_total;
        }
        for (size_t i = 0; i < c.params().size() && same; ++i)
            same = c.params().tensor(i).data == d.params().get(c.params().name(i)).data;
        std::printf("  10-step continuation after restore: %s\n", same ? "bit-identical" : "DIFFERS");
        CHECK(same);
        pass = pass && same;
    }

    report(8, "bit-identical reruns and exact checkpoint replay", pass);
}

// ===========================================================================
// 9. perturbation noise statistics
// ===========================================================================

TEST_CASE("perturbation variance matches its design value") {
    const double tau = TrainerConfig{}.tau;
    Tensor noise = make_perturbation({4000, 5, 5}, tau, Rng(kCorpusSeed).stream("noise-mc", 0));
    REQUIRE(noise.numel() == 100000);
    double mean = 0, sq = 0;
    for (float v : noise.data) {
        mean += v;
        sq += static_cast<double>(v) * v;
    }
    mean /= static_cast<double>(noise.numel());
    sq /= static_cast<double>(noise.numel());
    double var = sq - mean * mean;
    double want = tau * tau / 3.0;
    double rel = std::abs(var - want) / want;
    std::printf("  MC variance %.6f vs tau^2/3 = %.6f (rel err %.3f)\n", var, want, rel);
    bool pass = rel <= 0.05;
    CHECK(rel <= 0.05);
    report(9, "perturbation variance equals tau^2/3 within 5%", pass);
}
