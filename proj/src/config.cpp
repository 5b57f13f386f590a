#include "unitok/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace unitok {

std::string build_identifier() {
#ifdef UNITOK_GIT_REV
    return UNITOK_GIT_REV;
#else
    return "unknown";
#endif
}

TrainMode parse_mode(const std::string& s) {
    if (s == "joint") return TrainMode::joint;
    if (s == "und_only") return TrainMode::und_only;
    if (s == "rec_only") return TrainMode::rec_only;
    throw DomainError("mode must be joint|und_only|rec_only, got '" + s + "'");
}

void TrainerConfig::validate() const {
    model.vit.validate();
    if (tau < 0) throw DomainError("recon.tau must be >= 0");
    if (beta < 0 || lambda_pretrain < 0 || lambda_finetune < 0)
        throw DomainError("loss weights must be >= 0");
    if (omega_rec < 0 || omega_und < 0) throw DomainError("omega weights must be >= 0");
    if (alpha < 0) throw DomainError("train.alpha must be >= 0");
    if (model.codec_f < 1) throw DomainError("codec.f must be >= 1");
    if (model.decoder_depth < 1) throw DomainError("recon.decoder_depth must be >= 1");
    if (model.text.layers < 1 || model.text.width < 1 || model.text.heads < 1 ||
        model.text.max_len < 2)
        throw DomainError("text tower sizes invalid");
    if (model.text.width % model.text.heads != 0)
        throw DomainError("text.width must be divisible by text.heads");
    for (const StageConfig* st : {&stage1, &stage2}) {
        if (st->total_steps < 0) throw DomainError("stage steps invalid");
        if (st->batch_size < 2)
            throw DomainError("stage batch_size must be >= 2 (contrastive loss needs pairs)");
        if (st->total_steps > 0 && st->warmup_steps >= st->total_steps)
            throw DomainError("warmup_steps must be < total_steps");
        if (st->base_lr <= 0) throw DomainError("base_lr must be positive");
        int div = 2 * model.codec_f;
        if (st->resolution % div != 0)
            throw DomainError("stage resolution " + std::to_string(st->resolution) +
                              " must be divisible by 2*f=" + std::to_string(div));
    }
    if (stage2.resolution < stage1.resolution)
        throw DomainError("stage resolutions must be nondecreasing");
}

namespace {

struct Setter {
    std::function<void(TrainerConfig&, const std::string&)> fn;
};

int to_int(const std::string& k, const std::string& v) {
    size_t pos = 0;
    int r;
    try {
        r = std::stoi(v, &pos);
    } catch (...) {
        throw DomainError("config key '" + k + "': expected integer, got '" + v + "'");
    }
    if (pos != v.size()) throw DomainError("config key '" + k + "': expected integer, got '" + v + "'");
    return r;
}

uint64_t to_u64(const std::string& k, const std::string& v) {
    size_t pos = 0;
    uint64_t r;
    try {
        r = std::stoull(v, &pos);
    } catch (...) {
        throw DomainError("config key '" + k + "': expected unsigned integer, got '" + v + "'");
    }
    if (pos != v.size())
        throw DomainError("config key '" + k + "': expected unsigned integer, got '" + v + "'");
    return r;
}

double to_real(const std::string& k, const std::string& v) {
    size_t pos = 0;
    double r;
    try {
        r = std::stod(v, &pos);
    } catch (...) {
        throw DomainError("config key '" + k + "': expected number, got '" + v + "'");
    }
    if (pos != v.size()) throw DomainError("config key '" + k + "': expected number, got '" + v + "'");
    return r;
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto set_int = [&](const std::string& key, std::function<int*(TrainerConfig&)> get) {
            t[key] = {[key, get](TrainerConfig& c, const std::string& v) { *get(c) = to_int(key, v); }};
        };
        auto set_real = [&](const std::string& key, std::function<double*(TrainerConfig&)> get) {
            t[key] = {[key, get](TrainerConfig& c, const std::string& v) { *get(c) = to_real(key, v); }};
        };
        auto set_u64 = [&](const std::string& key, std::function<uint64_t*(TrainerConfig&)> get) {
            t[key] = {[key, get](TrainerConfig& c, const std::string& v) { *get(c) = to_u64(key, v); }};
        };
        auto set_str = [&](const std::string& key, std::function<std::string*(TrainerConfig&)> get) {
            t[key] = {[get](TrainerConfig& c, const std::string& v) { *get(c) = v; }};
        };

        set_int("vit.depth", [](TrainerConfig& c) { return &c.model.vit.depth; });
        set_int("vit.dim", [](TrainerConfig& c) { return &c.model.vit.dim; });
        set_int("vit.heads", [](TrainerConfig& c) { return &c.model.vit.heads; });
        set_int("vit.mlp_ratio", [](TrainerConfig& c) { return &c.model.vit.mlp_ratio; });
        set_int("vit.embed_dim_contrastive", [](TrainerConfig& c) { return &c.model.vit.embed_dim; });

        set_real("recon.tau", [](TrainerConfig& c) { return &c.tau; });
        set_real("recon.beta", [](TrainerConfig& c) { return &c.beta; });
        set_real("recon.lambda_pretrain", [](TrainerConfig& c) { return &c.lambda_pretrain; });
        set_real("recon.lambda_finetune", [](TrainerConfig& c) { return &c.lambda_finetune; });
        set_int("recon.decoder_depth", [](TrainerConfig& c) { return &c.model.decoder_depth; });

        set_int("codec.f", [](TrainerConfig& c) { return &c.model.codec_f; });
        set_u64("codec.seed", [](TrainerConfig& c) { return &c.model.codec_seed; });

        set_int("text.layers", [](TrainerConfig& c) { return &c.model.text.layers; });
        set_int("text.width", [](TrainerConfig& c) { return &c.model.text.width; });
        set_int("text.heads", [](TrainerConfig& c) { return &c.model.text.heads; });
        set_int("text.max_len", [](TrainerConfig& c) { return &c.model.text.max_len; });

        set_real("train.omega_rec", [](TrainerConfig& c) { return &c.omega_rec; });
        set_real("train.omega_und", [](TrainerConfig& c) { return &c.omega_und; });
        set_real("train.alpha", [](TrainerConfig& c) { return &c.alpha; });
        set_u64("train.seed", [](TrainerConfig& c) { return &c.seed; });
        t["train.mode"] = {[](TrainerConfig& c, const std::string& v) { c.mode = parse_mode(v); }};

        set_str("data.train_dir", [](TrainerConfig& c) { return &c.train_dir; });
        set_str("data.eval_dir", [](TrainerConfig& c) { return &c.eval_dir; });

        for (int s = 1; s <= 2; ++s) {
            std::string p = "stage" + std::to_string(s) + ".";
            auto stage = [s](TrainerConfig& c) { return s == 1 ? &c.stage1 : &c.stage2; };
            set_int(p + "resolution", [stage](TrainerConfig& c) { return &stage(c)->resolution; });
            set_int(p + "batch_size", [stage](TrainerConfig& c) { return &stage(c)->batch_size; });
            set_real(p + "base_lr", [stage](TrainerConfig& c) { return &stage(c)->base_lr; });
            set_int(p + "total_steps", [stage](TrainerConfig& c) { return &stage(c)->total_steps; });
            set_int(p + "warmup_steps", [stage](TrainerConfig& c) { return &stage(c)->warmup_steps; });
        }
        return t;
    }();
    return table;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

TrainerConfig parse_config_text(const std::string& text) {
    TrainerConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw DomainError("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        auto it = setters().find(key);
        if (it == setters().end())
            throw DomainError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        it->second.fn(cfg, val);
    }
    // stage lambda follows the pretrain/finetune split
    cfg.stage1.lambda = cfg.lambda_pretrain;
    cfg.stage2.lambda = cfg.lambda_finetune;
    cfg.validate();
    return cfg;
}

TrainerConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DomainError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string serialize_config(const TrainerConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "vit.depth=" << c.model.vit.depth << "\n";
    os << "vit.dim=" << c.model.vit.dim << "\n";
    os << "vit.heads=" << c.model.vit.heads << "\n";
    os << "vit.mlp_ratio=" << c.model.vit.mlp_ratio << "\n";
    os << "vit.embed_dim_contrastive=" << c.model.vit.embed_dim << "\n";
    os << "recon.tau=" << c.tau << "\n";
    os << "recon.beta=" << c.beta << "\n";
    os << "recon.lambda_pretrain=" << c.lambda_pretrain << "\n";
    os << "recon.lambda_finetune=" << c.lambda_finetune << "\n";
    os << "recon.decoder_depth=" << c.model.decoder_depth << "\n";
    os << "codec.f=" << c.model.codec_f << "\n";
    os << "codec.seed=" << c.model.codec_seed << "\n";
    os << "text.layers=" << c.model.text.layers << "\n";
    os << "text.width=" << c.model.text.width << "\n";
    os << "text.heads=" << c.model.text.heads << "\n";
    os << "text.max_len=" << c.model.text.max_len << "\n";
    os << "train.omega_rec=" << c.omega_rec << "\n";
    os << "train.omega_und=" << c.omega_und << "\n";
    os << "train.alpha=" << c.alpha << "\n";
    os << "train.seed=" << c.seed << "\n";
    os << "train.mode=" << mode_name(c.mode) << "\n";
    if (!c.train_dir.empty()) os << "data.train_dir=" << c.train_dir << "\n";
    if (!c.eval_dir.empty()) os << "data.eval_dir=" << c.eval_dir << "\n";
    auto stage = [&](const char* p, const StageConfig& s) {
        os << p << ".resolution=" << s.resolution << "\n";
        os << p << ".batch_size=" << s.batch_size << "\n";
        os << p << ".base_lr=" << s.base_lr << "\n";
        os << p << ".total_steps=" << s.total_steps << "\n";
        os << p << ".warmup_steps=" << s.warmup_steps << "\n";
    };
    stage("stage1", c.stage1);
    stage("stage2", c.stage2);
    return os.str();
}

}  // namespace unitok
