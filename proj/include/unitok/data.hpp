#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "unitok/image_io.hpp"
#include "unitok/rng.hpp"
#include "unitok/tensor.hpp"

namespace unitok {

// A scene is 1-3 non-overlapping shapes on a colored background; the caption
// is a deterministic function of the scene, and shape/background palettes are
// disjoint so every caption difference is visible in pixels (bijectivity).
struct ShapeSpec {
    int kind;   // 0 circle, 1 square, 2 triangle
    int color;  // 0-7 shape palette
    int cell;   // 0-8 row-major 3x3 grid cell
    int size;   // 0 small, 1 large
};

struct SceneSpec {
    std::vector<ShapeSpec> shapes;  // sorted by cell: canonical caption order
    int background;                 // 0-3 background palette
};

inline constexpr int kGrammarVersion = 1;

SceneSpec sample_scene(Rng rng);
ImageU8 render_scene(const SceneSpec& spec, int res);  // anti-aliased, content-determined
std::string caption_for(const SceneSpec& spec);

// Word-level closed vocabulary; ids 0-3 fixed to PAD, BOS, EOS, UNK.
struct Vocab {
    static constexpr int PAD = 0, BOS = 1, EOS = 2, UNK = 3;
    std::vector<std::string> words;
    std::unordered_map<std::string, int> index;

    static Vocab build();  // from the caption grammar, sorted and deduplicated
    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    int size() const { return static_cast<int>(words.size()); }
    int id_of(const std::string& w) const {
        auto it = index.find(w);
        return it == index.end() ? UNK : it->second;
    }
    // BOS + word ids + EOS, right-padded with PAD to max_len.
    std::vector<int> encode(const std::string& caption, int max_len) const;
    std::string decode(const std::vector<int>& ids) const;
};

struct Sample {
    ImageU8 image;  // master-resolution pixels
    std::string caption;
};

struct Dataset {
    std::vector<Sample> samples;
    size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

// Deterministic corpus with unique captions (repeated draws are redrawn).
Dataset generate_corpus(uint64_t seed, int n, int res);
void export_corpus(const Dataset& ds, const std::string& dir, uint64_t seed, int res);
// Reads captions.tsv (relative_image_path<TAB>caption) + PNGs; iteration order = TSV order.
Dataset load_corpus(const std::string& dir);

struct Batch {
    Tensor images;               // [N,res,res,3] in [-1,1]
    std::vector<int> token_ids;  // [N, max_len]
    int n = 0;
    int len = 0;
};

Batch make_batch(const Dataset& ds, const std::vector<int>& indices, int res, const Vocab& vocab,
                 int max_len);

// Seeded per-epoch permutation; the batch at `step` is a pure function of
// (seed, dataset size, batch size, step), which is what checkpoint replay
// and the aligned ablation runs rely on.
std::vector<int> batch_indices(uint64_t seed, size_t dataset_size, int batch_size, int64_t step);

}  // namespace unitok
