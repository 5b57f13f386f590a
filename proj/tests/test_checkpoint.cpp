// Checkpoint durability: bit-exact round-trips of parameters, optimizer
// moments, and counters; bit-exact training continuation after restore; and
// rejection of corrupt or mismatched files.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "unitok/checkpoint.hpp"
#include "unitok/trainer.hpp"

using namespace unitok;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path p;
    TempDir() {
        p = fs::temp_directory_path() / ("utk_ckpt_" + std::to_string(::getpid()));
        fs::create_directories(p);
    }
    ~TempDir() { std::error_code ec; fs::remove_all(p, ec); }
    std::string file(const char* name) const { return (p / name).string(); }
};

TrainerConfig micro_trainer_config() {
    TrainerConfig cfg;
    cfg.model.codec_f = 4;
    cfg.model.codec_seed = 21;
    cfg.model.vit.depth = 1;
    cfg.model.vit.dim = 16;
    cfg.model.vit.heads = 2;
    cfg.model.vit.mlp_ratio = 2;
    cfg.model.vit.embed_dim = 8;
    cfg.model.decoder_depth = 1;
    cfg.model.text.layers = 1;
    cfg.model.text.width = 16;
    cfg.model.text.heads = 2;
    cfg.model.text.max_len = 16;
    cfg.model.text.vocab = 30;  // overridden from the vocabulary inside Trainer
    cfg.model.seed = 7;
    cfg.seed = 77;
    cfg.stage1 = {16, 2, 1e-3, 6, 2, 0.0};
    cfg.stage2 = {32, 2, 5e-4, 4, 1, 0.5};
    return cfg;
}

bool same_floats(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("checkpoint files round-trip parameters, moments, and metadata exactly") {
    TempDir tmp;
    ModelConfig mc = micro_trainer_config().model;
    ParamStore store = init_params(mc, 2, 2);

    AdamW opt;
    std::vector<int> slots;
    for (size_t i = 0; i < store.size(); ++i)
        slots.push_back(opt.register_param(store.name(i), store.tensor(i).numel()));
    // take two updates so the moments are nonzero and float-rounded
    Rng rng(5);
    for (int step = 0; step < 2; ++step) {
        for (size_t i = 0; i < store.size(); ++i) {
            std::vector<float> grad(store.tensor(i).data.size());
            for (float& g : grad) g = static_cast<float>(0.01 * rng.normal());
            opt.update(slots[i], store.tensor(i), grad, 1e-3, true);
        }
        opt.finish_step();
    }

    CheckpointMeta meta;
    meta.codec_seed = mc.codec_seed;
    meta.codec_f = mc.codec_f;
    meta.stage_index = 1;
    meta.step_in_stage = 3;
    meta.global_step = 9;
    meta.opt_step = opt.step_count();
    meta.model_seed = mc.seed;

    std::string path = tmp.file("a.utkp");
    save_checkpoint(path, meta, store, &opt);
    Checkpoint ck = load_checkpoint(path);

    CHECK(ck.meta.codec_seed == meta.codec_seed);
    CHECK(ck.meta.codec_f == meta.codec_f);
    CHECK(ck.meta.stage_index == meta.stage_index);
    CHECK(ck.meta.step_in_stage == meta.step_in_stage);
    CHECK(ck.meta.global_step == meta.global_step);
    CHECK(ck.meta.opt_step == 2);
    CHECK(ck.meta.model_seed == meta.model_seed);

    REQUIRE(ck.params.size() == store.size());
    for (size_t i = 0; i < store.size(); ++i) {
        const std::string& nm = store.name(i);
        REQUIRE(ck.params.has(nm));
        const Tensor& orig = store.tensor(i);
        const Tensor& got = ck.params.get(nm);
        CHECK(got.shape == orig.shape);
        CHECK(same_floats(got.data, orig.data));
        REQUIRE(ck.m.count(nm) == 1);
        REQUIRE(ck.v.count(nm) == 1);
        CHECK(same_floats(ck.m.at(nm), opt.moment1(slots[i])));
        CHECK(same_floats(ck.v.at(nm), opt.moment2(slots[i])));
    }
}

TEST_CASE("saving without an optimizer omits moment entries") {
    TempDir tmp;
    ModelConfig mc = micro_trainer_config().model;
    ParamStore store = init_params(mc, 2, 2);
    CheckpointMeta meta;
    meta.codec_f = mc.codec_f;
    std::string path = tmp.file("no_opt.utkp");
    save_checkpoint(path, meta, store, nullptr);
    Checkpoint ck = load_checkpoint(path);
    CHECK(ck.params.size() == store.size());
    CHECK(ck.m.empty());
    CHECK(ck.v.empty());
}

TEST_CASE("a restored trainer continues bit-identically") {
    TempDir tmp;
    TrainerConfig cfg = micro_trainer_config();
    Dataset data = generate_corpus(300, 12, 32);
    Vocab vocab = Vocab::build();

    Trainer a(cfg, data, vocab);
    for (int i = 0; i < 3; ++i) a.train_step(a.next_batch());  // stop mid-stage
    std::string path = tmp.file("mid.utkp");
    a.save(path);

    Trainer b(cfg, data, vocab);
    b.restore(path);
    CHECK(b.stage_index() == a.stage_index());
    CHECK(b.step_in_stage() == 3);
    CHECK(b.global_step() == 3);

    for (int i = 0; i < 4; ++i) {
        LossReport ra = a.train_step(a.next_batch());
        LossReport rb = b.train_step(b.next_batch());
        CHECK(ra.step == rb.step);
        CHECK(ra.lr == rb.lr);
        CHECK(ra.pixel_l1 == rb.pixel_l1);
        CHECK(ra.latent_l1 == rb.latent_l1);
        CHECK(ra.perceptual == rb.perceptual);
        CHECK(ra.caption_ce == rb.caption_ce);
        CHECK(ra.contrastive == rb.contrastive);
        CHECK(ra.weighted_total == rb.weighted_total);
    }
    for (size_t i = 0; i < a.params().size(); ++i)
        CHECK(same_floats(a.params().tensor(i).data, b.params().get(a.params().name(i)).data));
}

TEST_CASE("restore rejects checkpoints from a different codec") {
    TempDir tmp;
    TrainerConfig cfg = micro_trainer_config();
    Dataset data = generate_corpus(301, 8, 32);
    Vocab vocab = Vocab::build();
    Trainer a(cfg, data, vocab);
    std::string path = tmp.file("codec.utkp");
    a.save(path);

    TrainerConfig other = cfg;
    other.model.codec_seed = cfg.model.codec_seed + 1;
    Trainer b(other, data, vocab);
    CHECK_THROWS(b.restore(path));

    TrainerConfig otherf = cfg;
    otherf.model.codec_f = 8;
    otherf.stage1.resolution = 32;
    otherf.stage2.resolution = 64;
    Trainer c(otherf, data, vocab);
    CHECK_THROWS(c.restore(path));
}

TEST_CASE("corrupt checkpoint files are rejected with clear errors") {
    TempDir tmp;

    std::string garbage = tmp.file("garbage.utkp");
    {
        std::ofstream f(garbage, std::ios::binary);
        f << "NOTACHECKPOINTFILE----------------------";
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(garbage), doctest::Contains("magic"), std::runtime_error);

    // valid file, then truncate mid-entry
    ModelConfig mc = micro_trainer_config().model;
    ParamStore store = init_params(mc, 2, 2);
    CheckpointMeta meta;
    std::string whole = tmp.file("whole.utkp");
    save_checkpoint(whole, meta, store, nullptr);
    auto sz = fs::file_size(whole);
    std::string cut = tmp.file("cut.utkp");
    {
        std::ifstream in(whole, std::ios::binary);
        std::vector<char> buf(static_cast<size_t>(sz) / 2);
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        std::ofstream out(cut, std::ios::binary);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(cut), doctest::Contains("truncated"), std::runtime_error);

    CHECK_THROWS_AS(load_checkpoint(tmp.file("missing.utkp")), std::runtime_error);
}
