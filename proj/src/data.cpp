#include "unitok/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace unitok {

namespace {

const char* kKinds[3] = {"circle", "square", "triangle"};
const char* kSizes[2] = {"small", "large"};
const char* kShapeColors[8] = {"red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink"};
const char* kBackgrounds[4] = {"white", "black", "gray", "olive"};
const char* kCells[9] = {"top left",    "top center",    "top right",
                         "middle left", "center",        "middle right",
                         "bottom left", "bottom center", "bottom right"};

const uint8_t kShapeRgb[8][3] = {{230, 40, 40},  {40, 180, 70},  {50, 90, 230},  {235, 220, 50},
                                 {150, 60, 200}, {245, 145, 30}, {60, 200, 220}, {240, 120, 190}};
const uint8_t kBgRgb[4][3] = {{245, 245, 245}, {25, 25, 25}, {128, 128, 128}, {115, 120, 65}};

// unit-square geometry; shapes stay inside their cell so they never overlap
bool inside_shape(const ShapeSpec& sp, double x, double y) {
    int row = sp.cell / 3, col = sp.cell % 3;
    double cx = (col + 0.5) / 3.0, cy = (row + 0.5) / 3.0;
    double r = sp.size == 0 ? 0.09 : 0.145;
    double dx = x - cx, dy = y - cy;
    switch (sp.kind) {
        case 0:
            return dx * dx + dy * dy <= r * r;
        case 1:
            return std::abs(dx) <= r * 0.9 && std::abs(dy) <= r * 0.9;
        default: {
            // upward triangle: apex (cx, cy-r), base corners (cx +- 0.95r, cy + 0.8r)
            double x0 = 0.0, y0 = -r, x1 = -0.95 * r, y1 = 0.8 * r, x2 = 0.95 * r, y2 = 0.8 * r;
            auto side = [&](double ax, double ay, double bx, double by) {
                return (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
            };
            double s0 = side(x0, y0, x1, y1), s1 = side(x1, y1, x2, y2), s2 = side(x2, y2, x0, y0);
            return (s0 >= 0 && s1 >= 0 && s2 >= 0) || (s0 <= 0 && s1 <= 0 && s2 <= 0);
        }
    }
}

}  // namespace

SceneSpec sample_scene(Rng rng) {
    SceneSpec spec;
    int n = 1 + static_cast<int>(rng.below(3));
    std::vector<int> cells{0, 1, 2, 3, 4, 5, 6, 7, 8};
    shuffle_inplace(cells.begin(), cells.end(), rng);
    cells.resize(static_cast<size_t>(n));
    std::sort(cells.begin(), cells.end());  // canonical reading order for the caption
    for (int c : cells) {
        ShapeSpec sp;
        sp.kind = static_cast<int>(rng.below(3));
        sp.color = static_cast<int>(rng.below(8));
        sp.cell = c;
        sp.size = static_cast<int>(rng.below(2));
        spec.shapes.push_back(sp);
    }
    spec.background = static_cast<int>(rng.below(4));
    return spec;
}

ImageU8 render_scene(const SceneSpec& spec, int res) {
    if (res < 8) throw DomainError("render_scene: resolution too small");
    constexpr int SS = 4;  // 4x4 subsamples per pixel
    ImageU8 img;
    img.w = img.h = res;
    img.rgb.resize(static_cast<size_t>(res) * res * 3);
    const uint8_t* bg = kBgRgb[spec.background];
    for (int py = 0; py < res; ++py)
        for (int px = 0; px < res; ++px) {
            double acc[3] = {0, 0, 0};
            for (int sy = 0; sy < SS; ++sy)
                for (int sx = 0; sx < SS; ++sx) {
                    double x = (px + (sx + 0.5) / SS) / res;
                    double y = (py + (sy + 0.5) / SS) / res;
                    const uint8_t* c = bg;
                    for (const auto& sp : spec.shapes)
                        if (inside_shape(sp, x, y)) {
                            c = kShapeRgb[sp.color];
                            break;
                        }
                    for (int k = 0; k < 3; ++k) acc[k] += c[k];
                }
            for (int k = 0; k < 3; ++k)
                img.rgb[(static_cast<size_t>(py) * res + px) * 3 + k] =
                    static_cast<uint8_t>(std::lround(acc[k] / (SS * SS)));
        }
    return img;
}

std::string caption_for(const SceneSpec& spec) {
    std::ostringstream os;
    for (size_t i = 0; i < spec.shapes.size(); ++i) {
        const auto& sp = spec.shapes[i];
        if (i) os << " and ";
        os << "a " << kSizes[sp.size] << " " << kShapeColors[sp.color] << " " << kKinds[sp.kind]
           << " at the " << kCells[sp.cell];
    }
    os << " on a " << kBackgrounds[spec.background] << " background";
    return os.str();
}

Vocab Vocab::build() {
    std::set<std::string> words;
    auto add_phrase = [&](const std::string& phrase) {
        std::istringstream is(phrase);
        std::string w;
        while (is >> w) words.insert(w);
    };
    add_phrase("a and at the on background");
    for (auto* s : kKinds) add_phrase(s);
    for (auto* s : kSizes) add_phrase(s);
    for (auto* s : kShapeColors) add_phrase(s);
    for (auto* s : kBackgrounds) add_phrase(s);
    for (auto* s : kCells) add_phrase(s);
    Vocab v;
    v.words = {"<pad>", "<bos>", "<eos>", "<unk>"};
    v.words.insert(v.words.end(), words.begin(), words.end());
    for (size_t i = 0; i < v.words.size(); ++i) v.index[v.words[i]] = static_cast<int>(i);
    return v;
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("vocab: cannot open '" + path + "'");
    Vocab v;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        v.index[line] = static_cast<int>(v.words.size());
        v.words.push_back(line);
    }
    if (v.words.size() < 5 || v.words[0] != "<pad>" || v.words[1] != "<bos>" || v.words[2] != "<eos>" ||
        v.words[3] != "<unk>")
        throw std::runtime_error("vocab: '" + path + "' must start with <pad>,<bos>,<eos>,<unk>");
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("vocab: cannot write '" + path + "'");
    for (const auto& w : words) out << w << "\n";
}

std::vector<int> Vocab::encode(const std::string& caption, int max_len) const {
    std::vector<int> ids;
    ids.push_back(BOS);
    std::istringstream is(caption);
    std::string w;
    while (is >> w) {
        if (static_cast<int>(ids.size()) >= max_len - 1) break;  // leave room for EOS
        ids.push_back(id_of(w));
    }
    ids.push_back(EOS);
    ids.resize(static_cast<size_t>(max_len), PAD);
    return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::ostringstream os;
    bool first = true;
    for (int id : ids) {
        if (id == PAD || id == BOS) continue;
        if (id == EOS) break;
        if (!first) os << " ";
        os << (id >= 0 && id < size() ? words[static_cast<size_t>(id)] : "<unk>");
        first = false;
    }
    return os.str();
}

Dataset generate_corpus(uint64_t seed, int n, int res) {
    if (n < 0) throw DomainError("generate_corpus: n must be >= 0");
    Dataset ds;
    ds.samples.reserve(static_cast<size_t>(n));
    std::set<std::string> seen;
    Rng root(seed);
    for (int i = 0; i < n; ++i) {
        for (uint64_t attempt = 0;; ++attempt) {
            if (attempt > 1000)
                throw std::runtime_error("generate_corpus: caption space exhausted at sample " +
                                         std::to_string(i));
            SceneSpec spec = sample_scene(root.stream("sample", static_cast<uint64_t>(i)).stream("try", attempt));
            std::string cap = caption_for(spec);
            if (!seen.insert(cap).second) continue;
            ds.samples.push_back({render_scene(spec, res), std::move(cap)});
            break;
        }
    }
    return ds;
}

void export_corpus(const Dataset& ds, const std::string& dir, uint64_t seed, int res) {
    fs::create_directories(dir);
    std::ofstream tsv(fs::path(dir) / "captions.tsv", std::ios::trunc | std::ios::binary);
    if (!tsv) throw std::runtime_error("export_corpus: cannot write captions.tsv in '" + dir + "'");
    char name[32];
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        std::snprintf(name, sizeof(name), "img_%05zu.png", i);
        write_png((fs::path(dir) / name).string(), ds.samples[i].image);
        tsv << name << "\t" << ds.samples[i].caption << "\n";
    }
    tsv.close();
    nlohmann::json manifest{{"seed", seed},
                            {"grammar_version", kGrammarVersion},
                            {"count", ds.samples.size()},
                            {"resolution", res}};
    std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
}

Dataset load_corpus(const std::string& dir) {
    fs::path tsv_path = fs::path(dir) / "captions.tsv";
    std::ifstream tsv(tsv_path, std::ios::binary);
    if (!tsv) throw std::runtime_error("load_corpus: cannot open '" + tsv_path.string() + "'");
    Dataset ds;
    std::string line;
    int lineno = 0;
    while (std::getline(tsv, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("load_corpus: '" + tsv_path.string() + "' line " +
                                     std::to_string(lineno) + ": missing TAB separator");
        std::string rel = line.substr(0, tab);
        std::string cap = line.substr(tab + 1);
        fs::path img_path = fs::path(dir) / rel;
        ImageU8 img;
        try {
            img = read_png(img_path.string());
        } catch (const std::exception& e) {
            throw std::runtime_error("load_corpus: line " + std::to_string(lineno) + ": " + e.what());
        }
        ds.samples.push_back({std::move(img), std::move(cap)});
    }
    return ds;
}

Batch make_batch(const Dataset& ds, const std::vector<int>& indices, int res, const Vocab& vocab,
                 int max_len) {
    if (indices.empty()) throw DomainError("make_batch: empty index list");
    Batch b;
    b.n = static_cast<int>(indices.size());
    b.len = max_len;
    b.images = Tensor(Shape{b.n, res, res, 3});
    b.token_ids.reserve(static_cast<size_t>(b.n) * max_len);
    for (int i = 0; i < b.n; ++i) {
        int idx = indices[static_cast<size_t>(i)];
        if (idx < 0 || idx >= static_cast<int>(ds.size()))
            throw DomainError("make_batch: index " + std::to_string(idx) + " out of range");
        const Sample& s = ds.samples[static_cast<size_t>(idx)];
        Tensor t = to_tensor(resize_shorter_center_crop(s.image, res));
        std::copy(t.data.begin(), t.data.end(), b.images.data.begin() + static_cast<int64_t>(i) * t.numel());
        auto ids = vocab.encode(s.caption, max_len);
        b.token_ids.insert(b.token_ids.end(), ids.begin(), ids.end());
    }
    return b;
}

std::vector<int> batch_indices(uint64_t seed, size_t dataset_size, int batch_size, int64_t step) {
    if (dataset_size == 0) throw DomainError("batch_indices: empty dataset");
    int64_t batches_per_epoch = std::max<int64_t>(1, static_cast<int64_t>(dataset_size) / batch_size);
    int64_t epoch = step / batches_per_epoch;
    int64_t slot = step % batches_per_epoch;
    std::vector<int> perm(dataset_size);
    for (size_t i = 0; i < dataset_size; ++i) perm[i] = static_cast<int>(i);
    Rng rng = Rng(seed).stream("shuffle", static_cast<uint64_t>(epoch));
    shuffle_inplace(perm.begin(), perm.end(), rng);
    std::vector<int> out;
    out.reserve(static_cast<size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i)
        out.push_back(perm[static_cast<size_t>((slot * batch_size + i) % static_cast<int64_t>(dataset_size))]);
    return out;
}

}  // namespace unitok
