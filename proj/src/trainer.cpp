#include "unitok/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "unitok/codec.hpp"
#include "unitok/model.hpp"
#include "unitok/perceptual.hpp"
#include "unitok/rng.hpp"

namespace unitok {

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

double lr_at(int64_t step, const StageConfig& stage) {
    if (step < 0 || step > stage.total_steps)
        throw DomainError("lr_at: step " + std::to_string(step) + " outside [0," +
                          std::to_string(stage.total_steps) + "]");
    if (stage.total_steps == 0) return 0.0;
    if (step < stage.warmup_steps)
        return stage.base_lr * static_cast<double>(step) / static_cast<double>(stage.warmup_steps);
    if (step >= stage.total_steps) return 0.0;
    double t = static_cast<double>(step - stage.warmup_steps) /
               static_cast<double>(stage.total_steps - stage.warmup_steps);
    return stage.base_lr * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

// ---------------------------------------------------------------------------
// Curve CSV
// ---------------------------------------------------------------------------

std::string curve_csv_header() {
    return "step,stage,lr,pixel_l1,latent_l1,perceptual,caption_ce,contrastive,weighted_total";
}

std::string curve_csv_row(const LossReport& r) {
    char buf[320];
    std::snprintf(buf, sizeof buf, "%lld,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                  static_cast<long long>(r.step), r.stage, r.lr, r.pixel_l1, r.latent_l1,
                  r.perceptual, r.caption_ce, r.contrastive, r.weighted_total);
    return std::string(buf);
}

void write_curve_csv(const std::string& path, const std::vector<LossReport>& rows) {
    std::ofstream out(path, std::ios::binary);  // binary keeps line endings LF everywhere
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << curve_csv_header() << '\n';
    for (const auto& r : rows) out << curve_csv_row(r) << '\n';
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<LossReport> read_curve_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty curve file '" + path + "'");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != curve_csv_header())
        throw std::runtime_error("unexpected curve header in '" + path + "': " + line);

    std::vector<LossReport> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f;
        size_t start = 0;
        for (;;) {
            size_t comma = line.find(',', start);
            if (comma == std::string::npos) {
                f.push_back(line.substr(start));
                break;
            }
            f.push_back(line.substr(start, comma - start));
            start = comma + 1;
        }
        if (f.size() != 9)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 9 fields, got " +
                                     std::to_string(f.size()));
        auto num = [&](const std::string& s) {
            char* end = nullptr;
            double v = std::strtod(s.c_str(), &end);
            if (end == s.c_str() || *end != '\0')
                throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad number '" + s + "'");
            return v;
        };
        LossReport r;
        r.step = static_cast<int64_t>(num(f[0]));
        r.stage = static_cast<int>(num(f[1]));
        r.lr = num(f[2]);
        r.pixel_l1 = num(f[3]);
        r.latent_l1 = num(f[4]);
        r.perceptual = num(f[5]);
        r.caption_ce = num(f[6]);
        r.contrastive = num(f[7]);
        r.weighted_total = num(f[8]);
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {
constexpr double kLogitScaleBound = 4.60517018598809;  // ln(100): softmax temperature floor 0.01
}

Trainer::Trainer(const TrainerConfig& cfg, Dataset train, Vocab vocab)
    : cfg_(cfg), train_(std::move(train)), vocab_(std::move(vocab)) {
    cfg_.model.text.vocab = static_cast<int>(vocab_.size());
    cfg_.stage1.lambda = cfg_.lambda_pretrain;  // keep the per-stage mirror coherent
    cfg_.stage2.lambda = cfg_.lambda_finetune;
    cfg_.validate();
    if (train_.empty()) throw DomainError("trainer: training dataset is empty");
    codec_ = make_codec(cfg_.model.codec_f, cfg_.model.codec_seed);
    pnet_ = PerceptualNet::make(kDefaultPerceptualSeed);
    int g = token_grid(0);
    params_ = init_params(cfg_.model, g, g);
    register_optimizer();
}

int Trainer::token_grid(int stage_index) const {
    const StageConfig& st = stage_config(stage_index);
    return st.resolution / (cfg_.model.codec_f * cfg_.model.vit.patch);
}

void Trainer::register_optimizer() {
    opt_ = AdamW();
    opt_slots_.clear();
    opt_slots_.reserve(params_.size());
    for (size_t i = 0; i < params_.size(); ++i)
        opt_slots_.push_back(opt_.register_param(params_.name(i), params_.tensor(i).numel()));
}

void Trainer::enter_stage(int stage_index) {
    int old_g = token_grid(stage_index_);
    int new_g = token_grid(stage_index);
    if (new_g != old_g) {
        for (const char* nm : {"enc.pos", "dec.pos"}) {
            Tensor interp = interpolate_pos_embed(params_.get(nm), old_g, old_g, new_g, new_g);
            interp.requires_grad = true;
            params_.get(nm) = std::move(interp);
        }
    }
    stage_index_ = stage_index;
    step_in_stage_ = 0;
    // Fresh optimizer: moment estimates from the previous resolution do not
    // transfer to the re-gridded model, and the schedule restarts anyway.
    register_optimizer();
}

Batch Trainer::next_batch() {
    const StageConfig& st = stage_config(stage_index_);
    auto idx = batch_indices(hash_combine(cfg_.seed, static_cast<uint64_t>(stage_index_)), train_.size(),
                             st.batch_size, step_in_stage_);
    return make_batch(train_, idx, st.resolution, vocab_, cfg_.model.text.max_len);
}

LossReport Trainer::train_step(const Batch& batch) {
    const StageConfig& st = stage_config(stage_index_);
    const double lambda = stage_index_ == 0 ? cfg_.lambda_pretrain : cfg_.lambda_finetune;
    const double lr = lr_at(step_in_stage_, st);

    Graph g;
    Binder<float> B(&g, &params_);
    int tg = token_grid(stage_index_);
    Shape tok_shape{batch.n, tg * tg, cfg_.model.vit.dim};
    Tensor noise = make_perturbation(tok_shape, cfg_.tau,
                                     Rng(cfg_.seed).stream("noise", static_cast<uint64_t>(global_step_)));
    LossRefs L = build_losses(g, B, cfg_.model, codec_, pnet_, batch.images, batch.token_ids, batch.n,
                              batch.len, Vocab::PAD, noise);

    // Compose every mode's scalar from the same five component nodes, then
    // read values only after the graph stops growing (the arena may move).
    Ref rec = add(L.pixel_l1, add(scale(L.latent_l1, cfg_.beta), scale(L.perceptual, lambda)));
    Ref und = add(L.caption_ce, scale(L.contrastive, cfg_.alpha));
    Ref total;
    switch (cfg_.mode) {
        case TrainMode::joint: total = add(scale(rec, cfg_.omega_rec), scale(und, cfg_.omega_und)); break;
        case TrainMode::und_only: total = scale(und, cfg_.omega_und); break;
        case TrainMode::rec_only: total = scale(rec, cfg_.omega_rec); break;
    }

    const double pix = L.pixel_l1.value().data[0];
    const double lat = L.latent_l1.value().data[0];
    const double perc = L.perceptual.value().data[0];
    const double cap = L.caption_ce.value().data[0];
    const double contr = L.contrastive.value().data[0];
    const struct {
        const char* name;
        double v;
    } comps[] = {{"pixel_l1", pix}, {"latent_l1", lat}, {"perceptual", perc},
                 {"caption_ce", cap}, {"contrastive", contr}};
    for (const auto& c : comps)
        if (!std::isfinite(c.v))
            throw std::runtime_error("trainer: non-finite " + std::string(c.name) + " loss (" +
                                     std::to_string(c.v) + ") at global step " +
                                     std::to_string(global_step_));

    g.backward(total.id);

    const auto& bound = B.bound();
    for (size_t i = 0; i < params_.size(); ++i) {
        const std::string& nm = params_.name(i);
        auto it = bound.find(nm);
        if (it == bound.end()) continue;
        const std::vector<float>& grad = g.node(it->second.id).value.grad;
        if (grad.empty()) continue;  // unreached by this mode's backward: leave untouched
        bool decay = params_.tensor(i).shape.size() >= 2 && nm.find("pos") == std::string::npos &&
                     nm.find("tok_embed") == std::string::npos;
        opt_.update(opt_slots_[i], params_.tensor(i), grad, lr, decay);
    }
    opt_.finish_step();

    Tensor& ls = params_.get("logit_scale");
    ls.data[0] = static_cast<float>(
        std::clamp(static_cast<double>(ls.data[0]), -kLogitScaleBound, kLogitScaleBound));

    LossReport r;
    r.step = global_step_;
    r.stage = stage_index_ + 1;
    r.lr = lr;
    r.pixel_l1 = pix;
    r.latent_l1 = lat;
    r.perceptual = perc;
    r.caption_ce = cap;
    r.contrastive = contr;
    r.weighted_total = cfg_.omega_rec * (pix + cfg_.beta * lat + lambda * perc) +
                       cfg_.omega_und * (cap + cfg_.alpha * contr);
    ++step_in_stage_;
    ++global_step_;
    return r;
}

std::vector<LossReport> Trainer::run_stage(int stage_index) {
    if (stage_index < 0 || stage_index > 1)
        throw DomainError("run_stage: stage index must be 0 or 1, got " + std::to_string(stage_index));
    if (stage_index < stage_index_) return {};  // already past it
    if (stage_index == stage_index_ + 1) enter_stage(stage_index);

    const StageConfig& st = stage_config(stage_index);
    std::vector<LossReport> rows;
    if (st.total_steps > step_in_stage_)
        rows.reserve(static_cast<size_t>(st.total_steps - step_in_stage_));
    while (step_in_stage_ < st.total_steps) {
        Batch b = next_batch();
        rows.push_back(train_step(b));
    }
    if (!checkpoint_dir.empty()) {
        std::filesystem::create_directories(checkpoint_dir);
        save(checkpoint_dir + "/checkpoint_stage" + std::to_string(stage_index + 1) + ".utkp");
    }
    return rows;
}

std::vector<LossReport> Trainer::run() {
    std::vector<LossReport> rows = run_stage(0);
    std::vector<LossReport> tail = run_stage(1);
    rows.insert(rows.end(), tail.begin(), tail.end());
    return rows;
}

std::array<std::vector<LossReport>, 3> Trainer::run_ablation_suite(const TrainerConfig& cfg,
                                                                   const Dataset& train,
                                                                   const Vocab& vocab) {
    const TrainMode modes[3] = {TrainMode::joint, TrainMode::und_only, TrainMode::rec_only};
    std::array<std::vector<LossReport>, 3> out;
    for (int i = 0; i < 3; ++i) {
        TrainerConfig c = cfg;
        c.mode = modes[i];
        Trainer t(c, train, vocab);
        out[static_cast<size_t>(i)] = t.run();
    }
    return out;
}

void Trainer::save(const std::string& path) const {
    CheckpointMeta meta;
    meta.codec_seed = codec_.seed;
    meta.codec_f = codec_.f;
    meta.stage_index = stage_index_;
    meta.step_in_stage = step_in_stage_;
    meta.global_step = global_step_;
    meta.opt_step = opt_.step_count();
    meta.model_seed = cfg_.model.seed;
    save_checkpoint(path, meta, params_, &opt_);
}

void Trainer::restore(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.meta.codec_seed != codec_.seed || ck.meta.codec_f != codec_.f)
        throw DomainError("restore: checkpoint codec (f=" + std::to_string(ck.meta.codec_f) + ", seed=" +
                          std::to_string(ck.meta.codec_seed) + ") does not match configuration (f=" +
                          std::to_string(codec_.f) + ", seed=" + std::to_string(codec_.seed) + ")");
    if (ck.meta.stage_index < 0 || ck.meta.stage_index > 1)
        throw DomainError("restore: checkpoint stage index " + std::to_string(ck.meta.stage_index) +
                          " out of range");
    if (ck.params.size() != params_.size())
        throw DomainError("restore: checkpoint holds " + std::to_string(ck.params.size()) +
                          " parameters, model has " + std::to_string(params_.size()));

    // Positional tables are the only stage-dependent shapes; everything else
    // must match the freshly initialized layout exactly.
    const int tg = token_grid(ck.meta.stage_index);
    for (size_t i = 0; i < params_.size(); ++i) {
        const std::string& nm = params_.name(i);
        if (!ck.params.has(nm)) throw DomainError("restore: checkpoint missing parameter '" + nm + "'");
        const Shape& got = ck.params.get(nm).shape;
        if (nm == "enc.pos" || nm == "dec.pos") {
            Shape want{tg * tg, cfg_.model.vit.dim};
            if (!same_shape(got, want))
                throw DomainError("restore: '" + nm + "' has shape " + shape_str(got) + ", expected " +
                                  shape_str(want) + " for the checkpoint's stage");
        } else if (!same_shape(got, params_.get(nm).shape)) {
            throw DomainError("restore: '" + nm + "' has shape " + shape_str(got) + ", expected " +
                              shape_str(params_.get(nm).shape));
        }
    }

    params_ = std::move(ck.params);
    stage_index_ = ck.meta.stage_index;
    step_in_stage_ = ck.meta.step_in_stage;
    global_step_ = ck.meta.global_step;
    register_optimizer();
    for (size_t i = 0; i < params_.size(); ++i) {
        const std::string& nm = params_.name(i);
        auto mi = ck.m.find(nm);
        auto vi = ck.v.find(nm);
        if (mi == ck.m.end() && vi == ck.v.end()) continue;  // saved without optimizer state
        if (mi == ck.m.end() || vi == ck.v.end())
            throw DomainError("restore: parameter '" + nm + "' has only one moment buffer");
        if (static_cast<int64_t>(mi->second.size()) != params_.tensor(i).numel())
            throw DomainError("restore: moment size mismatch for '" + nm + "'");
        opt_.moment1(opt_slots_[i]) = std::move(mi->second);
        opt_.moment2(opt_slots_[i]) = std::move(vi->second);
    }
    opt_.set_step_count(ck.meta.opt_step);
}

}  // namespace unitok
