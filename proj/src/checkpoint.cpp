#include "unitok/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace unitok {

namespace {

constexpr char kMagic[4] = {'U', 'T', 'K', 'P'};
constexpr uint32_t kVersion = 1;

void write_bytes(std::ofstream& f, const void* p, size_t n) {
    f.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ofstream& f, T v) {
    write_bytes(f, &v, sizeof(T));
}

void write_entry(std::ofstream& f, const std::string& name, const Shape& shape,
                 const std::vector<float>& data) {
    write_pod<uint32_t>(f, static_cast<uint32_t>(name.size()));
    write_bytes(f, name.data(), name.size());
    write_pod<uint32_t>(f, static_cast<uint32_t>(shape.size()));
    for (int d : shape) write_pod<int32_t>(f, d);
    write_bytes(f, data.data(), data.size() * sizeof(float));
}

void read_bytes(std::ifstream& f, void* p, size_t n, const std::string& path) {
    f.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(f.gcount()) != n)
        throw std::runtime_error("checkpoint: '" + path + "' truncated");
}

template <typename T>
T read_pod(std::ifstream& f, const std::string& path) {
    T v;
    read_bytes(f, &v, sizeof(T), path);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointMeta& meta, const ParamStore& params,
                     const AdamW* opt) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    write_bytes(f, kMagic, 4);
    write_pod<uint32_t>(f, kVersion);
    write_pod<uint64_t>(f, meta.codec_seed);
    write_pod<int32_t>(f, meta.codec_f);
    write_pod<int32_t>(f, meta.stage_index);
    write_pod<int64_t>(f, meta.step_in_stage);
    write_pod<int64_t>(f, meta.global_step);
    write_pod<int64_t>(f, opt ? opt->step_count() : meta.opt_step);
    write_pod<uint64_t>(f, meta.model_seed);
    uint32_t n = static_cast<uint32_t>(params.size() * (opt ? 3 : 1));
    write_pod<uint32_t>(f, n);
    for (size_t i = 0; i < params.size(); ++i)
        write_entry(f, params.name(i), params.tensor(i).shape, params.tensor(i).data);
    if (opt) {
        if (opt->num_slots() != params.size())
            throw std::runtime_error("checkpoint: optimizer has " + std::to_string(opt->num_slots()) +
                                     " slots for " + std::to_string(params.size()) + " params");
        for (size_t i = 0; i < params.size(); ++i) {
            Shape flat{static_cast<int>(params.tensor(i).numel())};
            write_entry(f, "m." + params.name(i), flat, opt->moment1(static_cast<int>(i)));
            write_entry(f, "v." + params.name(i), flat, opt->moment2(static_cast<int>(i)));
        }
    }
    if (!f) throw std::runtime_error("checkpoint: short write to '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[4];
    read_bytes(f, magic, 4, path);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: '" + path + "' has wrong magic bytes");
    uint32_t version = read_pod<uint32_t>(f, path);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: '" + path + "' version " + std::to_string(version) +
                                 " unsupported");
    Checkpoint ck;
    ck.meta.codec_seed = read_pod<uint64_t>(f, path);
    ck.meta.codec_f = read_pod<int32_t>(f, path);
    ck.meta.stage_index = read_pod<int32_t>(f, path);
    ck.meta.step_in_stage = read_pod<int64_t>(f, path);
    ck.meta.global_step = read_pod<int64_t>(f, path);
    ck.meta.opt_step = read_pod<int64_t>(f, path);
    ck.meta.model_seed = read_pod<uint64_t>(f, path);
    uint32_t n = read_pod<uint32_t>(f, path);
    for (uint32_t e = 0; e < n; ++e) {
        uint32_t name_len = read_pod<uint32_t>(f, path);
        if (name_len > 4096) throw std::runtime_error("checkpoint: '" + path + "' corrupt entry name");
        std::string name(name_len, '\0');
        read_bytes(f, name.data(), name_len, path);
        uint32_t ndim = read_pod<uint32_t>(f, path);
        if (ndim > 8) throw std::runtime_error("checkpoint: '" + path + "' corrupt entry rank");
        Shape shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = read_pod<int32_t>(f, path);
        std::vector<float> data(static_cast<size_t>(numel(shape)));
        read_bytes(f, data.data(), data.size() * sizeof(float), path);
        if (name.rfind("m.", 0) == 0)
            ck.m[name.substr(2)] = std::move(data);
        else if (name.rfind("v.", 0) == 0)
            ck.v[name.substr(2)] = std::move(data);
        else
            ck.params.add(name, Tensor(shape, std::move(data)));
    }
    return ck;
}

}  // namespace unitok
