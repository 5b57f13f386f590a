// unitok command-line tool: corpus generation, training, loss-interaction
// ablation, evaluation, and curve export, all reproducible from a config file.
//
// Exit codes: 0 success, 2 usage error, 3 validation error, 4 runtime failure.

#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "unitok/checkpoint.hpp"
#include "unitok/config.hpp"
#include "unitok/data.hpp"
#include "unitok/metrics.hpp"
#include "unitok/model.hpp"
#include "unitok/perceptual.hpp"
#include "unitok/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unitok;

namespace {

std::string iso_now() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// The compute kernels are single-threaded and deterministic, so any cap >= 0
// is already satisfied; the variable is validated so typos do not pass
// silently.
void apply_threads_env() {
    const char* v = std::getenv("UNITOK_THREADS");
    if (!v || !*v) return;
    char* end = nullptr;
    long n = std::strtol(v, &end, 10);
    if (end == v || *end != '\0' || n < 0)
        throw DomainError("UNITOK_THREADS must be a non-negative integer, got '" + std::string(v) + "'");
}

void require_file(const std::string& path, const char* what) {
    if (!fs::exists(path)) throw DomainError(std::string(what) + " '" + path + "' does not exist");
    if (fs::is_directory(path)) throw DomainError(std::string(what) + " '" + path + "' is a directory");
}

void require_dir(const std::string& path, const char* what) {
    if (!fs::exists(path)) throw DomainError(std::string(what) + " '" + path + "' does not exist");
    if (!fs::is_directory(path)) throw DomainError(std::string(what) + " '" + path + "' is not a directory");
}

// Output directories are claimed whole: an existing non-empty directory is
// refused so two runs can never silently interleave their files.
void claim_out_dir(const std::string& dir, bool force) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir))
            throw DomainError("output path '" + dir + "' exists and is not a directory");
        if (!fs::is_empty(dir) && !force)
            throw DomainError("output directory '" + dir + "' is not empty (use --force to overwrite)");
    }
    fs::create_directories(dir);
}

void claim_out_file(const std::string& path, bool force) {
    if (fs::exists(path) && !force)
        throw DomainError("output file '" + path + "' exists (use --force to overwrite)");
    fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

void write_manifest(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

TrainerConfig load_config_checked(const std::string& path) {
    require_file(path, "config file");
    return load_config(path);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out, int n, uint64_t seed, int res, bool force) {
    if (n < 1) throw DomainError("--n must be >= 1, got " + std::to_string(n));
    const int f = ModelConfig{}.codec_f;
    if (res % (2 * f) != 0)
        throw DomainError("--res " + std::to_string(res) + " must be divisible by " +
                          std::to_string(2 * f) + " (codec factor " + std::to_string(f) +
                          " times patch size 2)");
    claim_out_dir(out, force);
    Dataset ds = generate_corpus(seed, n, res);
    export_corpus(ds, out, seed, res);
    std::cout << "wrote " << ds.size() << " samples to " << out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

json manifest_base(const char* command, const TrainerConfig& cfg) {
    return json{{"command", command},
                {"build", build_identifier()},
                {"seed", cfg.seed},
                {"mode", mode_name(cfg.mode)},
                {"config", serialize_config(cfg)},
                {"started_utc", iso_now()},
                {"finished_utc", nullptr}};
}

int cmd_train(const std::string& config_path, const std::string& mode_str, const std::string& out,
              bool force) {
    TrainerConfig cfg = load_config_checked(config_path);
    if (!mode_str.empty()) cfg.mode = parse_mode(mode_str);
    if (cfg.train_dir.empty()) throw DomainError("config must set train_dir for training");
    require_dir(cfg.train_dir, "train_dir");

    claim_out_dir(out, force);
    Dataset train = load_corpus(cfg.train_dir);
    Vocab vocab = Vocab::build();

    json manifest = manifest_base("train", cfg);
    manifest["outputs"] = {{"curve", "curve.csv"},
                           {"config_snapshot", "config_snapshot.cfg"},
                           {"checkpoints", {"checkpoint_stage1.utkp", "checkpoint_stage2.utkp"}}};
    const std::string manifest_path = (fs::path(out) / "manifest.json").string();
    write_manifest(manifest_path, manifest);  // before training: the run is reproducible from this
    write_text((fs::path(out) / "config_snapshot.cfg").string(), serialize_config(cfg));

    Trainer trainer(cfg, std::move(train), vocab);
    trainer.checkpoint_dir = out;
    std::vector<LossReport> rows;
    for (int stage = 0; stage < 2; ++stage) {
        std::vector<LossReport> part = trainer.run_stage(stage);
        for (const auto& r : part) {
            if (r.step % 50 == 0)
                std::cout << "step " << r.step << " stage " << r.stage << " weighted_total "
                          << r.weighted_total << " lr " << r.lr << "\n";
            rows.push_back(r);
        }
    }
    write_curve_csv((fs::path(out) / "curve.csv").string(), rows);

    manifest["finished_utc"] = iso_now();
    write_manifest(manifest_path, manifest);
    std::cout << "trained " << rows.size() << " steps; curve and checkpoints in " << out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct ComponentField {
    const char* name;
    double LossReport::*member;
};

constexpr ComponentField kComponents[] = {
    {"pixel_l1", &LossReport::pixel_l1},   {"latent_l1", &LossReport::latent_l1},
    {"perceptual", &LossReport::perceptual}, {"caption_ce", &LossReport::caption_ce},
    {"contrastive", &LossReport::contrastive}, {"weighted_total", &LossReport::weighted_total},
};

double window_mean(const std::vector<LossReport>& rows, double LossReport::*member, bool tail,
                   size_t window) {
    double s = 0.0;
    size_t begin = tail ? rows.size() - window : 0;
    for (size_t i = begin; i < begin + window; ++i) s += rows[i].*member;
    return s / static_cast<double>(window);
}

// Start/end values are means over the first/last 10% of steps (at least 5) so
// single-step noise cannot flip a trend readout.
json curve_summary(const std::vector<LossReport>& rows) {
    if (rows.empty()) return json::object();
    size_t window = std::max<size_t>(5, rows.size() / 10);
    window = std::min(window, rows.size());
    json out;
    for (const auto& c : kComponents) {
        double initial = window_mean(rows, c.member, false, window);
        double final_v = window_mean(rows, c.member, true, window);
        json entry{{"initial", initial}, {"final", final_v}};
        entry["ratio"] = initial != 0.0 ? json(final_v / initial) : json(nullptr);
        out[c.name] = entry;
    }
    return out;
}

int cmd_ablate(const std::string& config_path, const std::string& out, bool force) {
    TrainerConfig cfg = load_config_checked(config_path);
    if (cfg.train_dir.empty()) throw DomainError("config must set train_dir for training");
    require_dir(cfg.train_dir, "train_dir");

    claim_out_dir(out, force);
    Dataset train = load_corpus(cfg.train_dir);
    Vocab vocab = Vocab::build();

    json manifest = manifest_base("ablate", cfg);
    manifest["outputs"] = {{"curves", {"curve_joint.csv", "curve_und_only.csv", "curve_rec_only.csv"}},
                           {"summary", "summary.json"}};
    const std::string manifest_path = (fs::path(out) / "manifest.json").string();
    write_manifest(manifest_path, manifest);

    auto runs = Trainer::run_ablation_suite(cfg, train, vocab);
    const char* names[3] = {"joint", "und_only", "rec_only"};
    json summary{{"steps", runs[0].size()},
                 {"window_steps", std::min(runs[0].size(), std::max<size_t>(5, runs[0].size() / 10))},
                 {"modes", json::object()}};
    for (int i = 0; i < 3; ++i) {
        write_curve_csv((fs::path(out) / ("curve_" + std::string(names[i]) + ".csv")).string(),
                        runs[static_cast<size_t>(i)]);
        summary["modes"][names[i]] = curve_summary(runs[static_cast<size_t>(i)]);
    }
    write_manifest((fs::path(out) / "summary.json").string(), summary);

    manifest["finished_utc"] = iso_now();
    write_manifest(manifest_path, manifest);
    std::cout << "ablation complete: three curves + summary.json in " << out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

void fit_pos_tables(ParamStore& params, const ModelConfig& mc, int res) {
    const int grid = res / (mc.codec_f * mc.vit.patch);
    for (const char* nm : {"enc.pos", "dec.pos"}) {
        const Tensor& pos = params.get(nm);
        int64_t rows = pos.shape.at(0);
        int old_g = static_cast<int>(std::llround(std::sqrt(static_cast<double>(rows))));
        if (static_cast<int64_t>(old_g) * old_g != rows)
            throw DomainError(std::string("checkpoint table '") + nm + "' has non-square " +
                              std::to_string(rows) + " positions");
        if (old_g == grid) continue;
        Tensor interp = interpolate_pos_embed(pos, old_g, old_g, grid, grid);
        interp.requires_grad = true;
        params.get(nm) = std::move(interp);
    }
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, int res,
             const std::string& config_path, const std::string& out, bool force) {
    require_file(ckpt_path, "checkpoint");
    require_dir(data_dir, "data directory");

    ModelConfig mc;
    if (!config_path.empty()) mc = load_config_checked(config_path).model;
    Checkpoint ck = load_checkpoint(ckpt_path);
    mc.codec_f = ck.meta.codec_f;  // the checkpoint's codec is authoritative
    mc.codec_seed = ck.meta.codec_seed;
    if (res % (2 * mc.codec_f) != 0)
        throw DomainError("--res " + std::to_string(res) + " must be divisible by " +
                          std::to_string(2 * mc.codec_f));

    Vocab vocab = Vocab::build();
    mc.text.vocab = vocab.size();
    CodecParams codec = make_codec(mc.codec_f, mc.codec_seed);
    PerceptualNet pnet = PerceptualNet::make(kDefaultPerceptualSeed);
    Dataset ds = load_corpus(data_dir);
    fit_pos_tables(ck.params, mc, res);

    MetricReport rep = eval_reconstruction(ds, ck.params, mc, codec, pnet, res);
    Tensor z_img, z_txt;
    embed_corpus(ds, ck.params, mc, codec, vocab, res, z_img, z_txt);
    for (int k : {1, 5}) {
        if (static_cast<size_t>(k) > ds.size()) continue;
        RecallReport rr = retrieval_recall(z_img, z_txt, k);
        std::string tag = "recall@" + std::to_string(k);
        rep.extra.emplace_back(tag + "_img_to_txt", rr.img_to_txt);
        rep.extra.emplace_back(tag + "_txt_to_img", rr.txt_to_img);
    }

    std::cout << rep.to_csv();
    if (!out.empty()) {
        claim_out_dir(out, force);
        write_text((fs::path(out) / "report.csv").string(), rep.to_csv());
        write_text((fs::path(out) / "report.json").string(), rep.to_json() + "\n");
    }
    return 0;
}

// ---------------------------------------------------------------------------
// export-curves
// ---------------------------------------------------------------------------

int cmd_export_curves(const std::vector<std::string>& run_dirs, const std::string& out, bool force) {
    claim_out_file(out, force);
    std::ostringstream merged;
    merged << "run,step,stage,component,value\n";
    size_t files = 0;
    for (const auto& dir : run_dirs) {
        require_dir(dir, "run directory");
        std::vector<fs::path> csvs;
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (!entry.is_regular_file()) continue;
            const std::string name = entry.path().filename().string();
            if (name.rfind("curve", 0) == 0 && entry.path().extension() == ".csv")
                csvs.push_back(entry.path());
        }
        std::sort(csvs.begin(), csvs.end());
        if (csvs.empty())
            throw DomainError("run directory '" + dir + "' contains no curve*.csv files");
        for (const auto& p : csvs) {
            ++files;
            std::string run = fs::path(dir).filename().string() + "/" + p.stem().string();
            for (const auto& r : read_curve_csv(p.string())) {
                for (const auto& c : kComponents) {
                    char buf[64];
                    std::snprintf(buf, sizeof buf, "%.9g", r.*(c.member));
                    merged << run << ',' << r.step << ',' << r.stage << ',' << c.name << ',' << buf
                           << '\n';
                }
            }
        }
    }
    write_text(out, merged.str());
    std::cout << "merged " << files << " curve files into " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unitok: unified visual tokenizer — synthetic corpus, training, ablation, evaluation"};
    app.require_subcommand(1);

    std::string gd_out;
    int gd_n = 0;
    uint64_t gd_seed = 42;
    int gd_res = 64;
    bool gd_force = false;
    CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic image-caption corpus");
    gen->add_option("--out", gd_out, "Output directory")->required();
    gen->add_option("--n", gd_n, "Number of samples")->required();
    gen->add_option("--seed", gd_seed, "Corpus seed");
    gen->add_option("--res", gd_res, "Master image resolution");
    gen->add_flag("--force", gd_force, "Overwrite a non-empty output directory");

    std::string tr_config, tr_mode, tr_out;
    bool tr_force = false;
    CLI::App* train = app.add_subcommand("train", "Run the two-stage trainer from a config file");
    train->add_option("--config", tr_config, "Config file")->required();
    train->add_option("--mode", tr_mode, "Override training mode")
        ->check(CLI::IsMember({"joint", "und_only", "rec_only"}));
    train->add_option("--out", tr_out, "Output directory")->required();
    train->add_flag("--force", tr_force, "Overwrite a non-empty output directory");

    std::string ab_config, ab_out;
    bool ab_force = false;
    CLI::App* ablate = app.add_subcommand("ablate", "Three aligned runs (joint/und_only/rec_only)");
    ablate->add_option("--config", ab_config, "Config file")->required();
    ablate->add_option("--out", ab_out, "Output directory")->required();
    ablate->add_flag("--force", ab_force, "Overwrite a non-empty output directory");

    std::string ev_ckpt, ev_data, ev_config, ev_out;
    int ev_res = 64;
    bool ev_force = false;
    CLI::App* eval = app.add_subcommand("eval", "Reconstruction + retrieval metrics for a checkpoint");
    eval->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
    eval->add_option("--data", ev_data, "Corpus directory")->required();
    eval->add_option("--res", ev_res, "Evaluation resolution")->required();
    eval->add_option("--config", ev_config, "Config file for non-default model dimensions");
    eval->add_option("--out", ev_out, "Also write report.csv/report.json to this directory");
    eval->add_flag("--force", ev_force, "Overwrite a non-empty output directory");

    std::vector<std::string> xc_runs;
    std::string xc_out;
    bool xc_force = false;
    CLI::App* exportc = app.add_subcommand("export-curves", "Merge run curves into one long-format CSV");
    exportc->add_option("--runs", xc_runs, "Run directories containing curve*.csv")->required();
    exportc->add_option("--out", xc_out, "Merged CSV path")->required();
    exportc->add_flag("--force", xc_force, "Overwrite an existing output file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        app.exit(e);
        return 2;
    }

    try {
        apply_threads_env();
        if (gen->parsed()) return cmd_gen_data(gd_out, gd_n, gd_seed, gd_res, gd_force);
        if (train->parsed()) return cmd_train(tr_config, tr_mode, tr_out, tr_force);
        if (ablate->parsed()) return cmd_ablate(ab_config, ab_out, ab_force);
        if (eval->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_res, ev_config, ev_out, ev_force);
        if (exportc->parsed()) return cmd_export_curves(xc_runs, xc_out, xc_force);
    } catch (const DomainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 2;  // unreachable: require_subcommand guarantees a branch above
}
