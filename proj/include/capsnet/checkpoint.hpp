#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include <nlohmann/json.hpp>

#include "capsnet/adam.hpp"
#include "capsnet/config.hpp"
#include "capsnet/model.hpp"
#include "capsnet/rng.hpp"
#include "capsnet/sparsity.hpp"

namespace capsnet {

// On-disk training snapshot. Format: 8-byte magic, u32 version, then two
// sections ("META" JSON, "TENS" raw tensors), each CRC-32 guarded. All
// multi-byte values little-endian; tensor payloads are 32-bit floats.
struct Checkpoint {
    static constexpr uint32_t kVersion = 1;

    ExperimentConfig config;
    CapsNetModel<float> model;
    Adam<float> adam;
    SparsityState sparsity;
    int64_t step = 0;
    Rng loop_rng;
};

namespace ckpt_detail {

constexpr char kMagic[8] = {'C', 'A', 'P', 'S', 'C', 'K', 'P', 'T'};

inline void put_u32(std::vector<uint8_t>& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(uint8_t(v >> (8 * i)));
}
inline void put_u64(std::vector<uint8_t>& b, uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(uint8_t(v >> (8 * i)));
}
inline void put_f32(std::vector<uint8_t>& b, float v) { put_u32(b, std::bit_cast<uint32_t>(v)); }

struct Reader {
    const uint8_t* p;
    const uint8_t* end;
    uint32_t u32() {
        require(end - p >= 4, "checkpoint: truncated");
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(p[i]) << (8 * i);
        p += 4;
        return v;
    }
    uint64_t u64() {
        require(end - p >= 8, "checkpoint: truncated");
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
        p += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str(size_t n) {
        require(size_t(end - p) >= n, "checkpoint: truncated");
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        return s;
    }
};

inline void put_tensor(std::vector<uint8_t>& b, const std::string& name, const Tensor<float>& t) {
    put_u32(b, uint32_t(name.size()));
    b.insert(b.end(), name.begin(), name.end());
    put_u32(b, uint32_t(t.shape().size()));
    for (int d : t.shape()) put_u32(b, uint32_t(d));
    for (float v : t.values()) put_f32(b, v);
}

inline void put_vec(std::vector<uint8_t>& b, const std::string& name, const std::vector<float>& v,
                    const Shape& shape) {
    put_u32(b, uint32_t(name.size()));
    b.insert(b.end(), name.begin(), name.end());
    put_u32(b, uint32_t(shape.size()));
    for (int d : shape) put_u32(b, uint32_t(d));
    for (float x : v) put_f32(b, x);
}

inline void write_section(std::ofstream& os, const char tag[4], const std::vector<uint8_t>& payload) {
    os.write(tag, 4);
    uint8_t len[8];
    uint64_t n = payload.size();
    for (int i = 0; i < 8; ++i) len[i] = uint8_t(n >> (8 * i));
    os.write(reinterpret_cast<const char*>(len), 8);
    os.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size()));
    uint32_t crc = uint32_t(crc32(0L, payload.data(), uInt(payload.size())));
    uint8_t cb[4];
    for (int i = 0; i < 4; ++i) cb[i] = uint8_t(crc >> (8 * i));
    os.write(reinterpret_cast<const char*>(cb), 4);
}

}  // namespace ckpt_detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    using namespace ckpt_detail;

    nlohmann::json meta;
    meta["config"] = ck.config;
    meta["fingerprint"] = config_fingerprint(ck.config);
    meta["step"] = ck.step;
    meta["sparsity"] = {{"g", ck.sparsity.g}, {"mu", ck.sparsity.mu}, {"n", ck.sparsity.n}};
    meta["adam_step"] = ck.adam.step_count;
    meta["loop_rng"] = ck.loop_rng.serialize();
    std::string meta_s = meta.dump();
    std::vector<uint8_t> meta_b(meta_s.begin(), meta_s.end());

    std::vector<uint8_t> tens;
    auto named = ck.model.named_params();
    put_u32(tens, uint32_t(named.size()));
    for (auto& [name, t] : named) put_tensor(tens, name, t);
    require(ck.adam.param_count() == named.size(), "checkpoint: adam not aligned with model params");
    for (size_t i = 0; i < named.size(); ++i) {
        put_vec(tens, named[i].first + ".m", ck.adam.first_moments()[i], named[i].second.shape());
        put_vec(tens, named[i].first + ".v", ck.adam.second_moments()[i], named[i].second.shape());
    }

    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("checkpoint: cannot write " + tmp);
        os.write(kMagic, 8);
        uint8_t vb[4];
        for (int i = 0; i < 4; ++i) vb[i] = uint8_t(Checkpoint::kVersion >> (8 * i));
        os.write(reinterpret_cast<const char*>(vb), 4);
        write_section(os, "META", meta_b);
        write_section(os, "TENS", tens);
        require(bool(os), "checkpoint: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    using namespace ckpt_detail;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    require(buf.size() >= 12 && std::memcmp(buf.data(), kMagic, 8) == 0,
            "checkpoint: bad magic in " + path);
    Reader r{buf.data() + 8, buf.data() + buf.size()};
    uint32_t version = r.u32();
    require(version == Checkpoint::kVersion,
            "checkpoint: version mismatch: file has " + std::to_string(version) + ", reader expects " +
                std::to_string(Checkpoint::kVersion));

    auto read_section = [&r](const char* tag) {
        std::string t = r.str(4);
        require(t == tag, "checkpoint: expected section " + std::string(tag) + ", found " + t);
        uint64_t n = r.u64();
        require(size_t(r.end - r.p) >= n + 4, "checkpoint: truncated section " + t);
        const uint8_t* payload = r.p;
        r.p += n;
        uint32_t stored = r.u32();
        uint32_t crc = uint32_t(crc32(0L, payload, uInt(n)));
        require(stored == crc, "checkpoint: CRC mismatch in section " + t + " (corrupt file)");
        return std::pair<const uint8_t*, uint64_t>(payload, n);
    };

    auto [mp, mn] = read_section("META");
    nlohmann::json meta = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(mp), mn));
    Checkpoint ck;
    ck.config = meta.at("config").get<ExperimentConfig>();
    ck.step = meta.at("step").get<int64_t>();
    ck.sparsity.g = meta.at("sparsity").at("g").get<std::vector<double>>();
    ck.sparsity.mu = meta.at("sparsity").at("mu").get<std::vector<double>>();
    ck.sparsity.n = meta.at("sparsity").at("n").get<int64_t>();
    ck.loop_rng.deserialize(meta.at("loop_rng").get<std::string>());

    auto [tp, tn] = read_section("TENS");
    Reader tr{tp, tp + tn};
    uint32_t n_model = tr.u32();
    auto read_tensor = [&tr]() {
        uint32_t nl = tr.u32();
        std::string name = tr.str(nl);
        uint32_t nd = tr.u32();
        Shape shape(nd);
        for (auto& d : shape) d = int(tr.u32());
        std::vector<float> vals((size_t(shape_numel(shape))));
        for (auto& v : vals) v = tr.f32();
        return std::pair<std::string, Tensor<float>>(name, Tensor<float>::from(shape, std::move(vals)));
    };

    // model tensors by name
    Rng dummy(0);
    ck.model = CapsNetModel<float>::init(ck.config.geometry, dummy);
    std::vector<std::pair<std::string, Tensor<float>>> loaded;
    for (uint32_t i = 0; i < n_model; ++i) loaded.push_back(read_tensor());
    auto assign = [&loaded](const std::string& name, Tensor<float>& dst) {
        for (auto& [n2, t] : loaded)
            if (n2 == name) {
                require(t.shape() == dst.shape(), "checkpoint: shape mismatch for " + name);
                dst.values() = t.values();
                return;
            }
        throw std::runtime_error("checkpoint: missing tensor " + name);
    };
    assign("conv1_kernel", ck.model.conv1_kernel);
    assign("conv1_bias", ck.model.conv1_bias);
    assign("primary_kernel", ck.model.primary_kernel);
    assign("primary_bias", ck.model.primary_bias);
    assign("vote_weights", ck.model.vote_weights);
    assign("dec_w1", ck.model.dec_w1);
    assign("dec_b1", ck.model.dec_b1);
    assign("dec_w2", ck.model.dec_w2);
    assign("dec_b2", ck.model.dec_b2);
    assign("dec_w3", ck.model.dec_w3);
    assign("dec_b3", ck.model.dec_b3);

    ck.adam.cfg.lr = float(ck.config.lr);
    ck.adam.cfg.beta1 = float(ck.config.beta1);
    ck.adam.cfg.beta2 = float(ck.config.beta2);
    auto params = ck.model.params();
    ck.adam.init(params);
    ck.adam.step_count = meta.at("adam_step").get<int64_t>();
    for (size_t i = 0; i < params.size(); ++i) {
        auto [mname, mt] = read_tensor();
        auto [vname, vt] = read_tensor();
        ck.adam.first_moments()[i] = mt.values();
        ck.adam.second_moments()[i] = vt.values();
    }
    return ck;
}

}  // namespace capsnet
