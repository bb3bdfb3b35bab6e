#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nisqa/audio_io.hpp"
#include "nisqa/common.hpp"
#include "nisqa/model.hpp"

// NQW1 weight-bundle format:
//   magic(4) | format_version(u32 LE) | config_len(u32 LE) | config JSON
//   | tensor_count(u32 LE)
//   | per tensor { name_len(u16 LE), name, ndim(u8), dims(u32 LE each),
//                  float32 LE row-major data }
//   | CRC32 of all preceding bytes (LE)

namespace nisqa {

constexpr char kBundleMagic[4] = {'N', 'Q', 'W', '1'};
constexpr std::uint32_t kBundleVersion = 1;

struct WeightBundle {
    ModelConfig config;
    ad::ParamSet<float> params;
};

namespace bundle_detail {

inline void put_u16(std::string& s, std::uint16_t v) {
    s.push_back(char(v & 0xff));
    s.push_back(char((v >> 8) & 0xff));
}
inline void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& s, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_u32(s, u);
}

struct Reader {
    const unsigned char* p;
    std::size_t len, pos = 0;

    void need(std::size_t n) const {
        if (pos + n > len) throw DataError("bundle truncated");
    }
    std::uint8_t u8() {
        need(1);
        return p[pos++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = std::uint16_t(p[pos]) | (std::uint16_t(p[pos + 1]) << 8);
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    float f32() {
        std::uint32_t u = u32();
        float f;
        std::memcpy(&f, &u, 4);
        return f;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace bundle_detail

inline std::string serialize_bundle(const WeightBundle& bundle) {
    std::string out;
    out.append(kBundleMagic, 4);
    bundle_detail::put_u32(out, kBundleVersion);
    nlohmann::json j = bundle.config;
    std::string cfg = j.dump();
    bundle_detail::put_u32(out, std::uint32_t(cfg.size()));
    out += cfg;
    bundle_detail::put_u32(out, std::uint32_t(bundle.params.size()));
    for (std::size_t i = 0; i < bundle.params.size(); ++i) {
        const auto& name = bundle.params.names[i];
        const auto& t = bundle.params.tensors[i];
        bundle_detail::put_u16(out, std::uint16_t(name.size()));
        out += name;
        out.push_back(char(t.rank()));
        for (auto d : t.dims) bundle_detail::put_u32(out, std::uint32_t(d));
        for (float v : t.data) bundle_detail::put_f32(out, v);
    }
    bundle_detail::put_u32(out, crc32(out.data(), out.size()));
    return out;
}

inline void save_bundle(const WeightBundle& bundle, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open bundle for writing: " + path);
    std::string bytes = serialize_bundle(bundle);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw DataError("failed writing bundle: " + path);
}

inline WeightBundle parse_bundle(const std::string& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kBundleMagic, 4) != 0)
        throw DataError("bad bundle magic");
    {
        if (bytes.size() < 4) throw DataError("bundle truncated");
        std::uint32_t stored = 0;
        for (int i = 0; i < 4; ++i)
            stored |= std::uint32_t((unsigned char)bytes[bytes.size() - 4 + i]) << (8 * i);
        std::uint32_t actual = crc32(bytes.data(), bytes.size() - 4);
        if (stored != actual) throw DataError("bundle checksum mismatch");
    }
    bundle_detail::Reader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size() - 4};
    r.pos = 4;
    std::uint32_t version = r.u32();
    if (version != kBundleVersion) throw DataError("unsupported bundle version " + std::to_string(version));
    std::uint32_t cfg_len = r.u32();
    WeightBundle b;
    b.config = nlohmann::json::parse(r.bytes(cfg_len)).get<ModelConfig>();
    std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t nlen = r.u16();
        std::string name = r.bytes(nlen);
        std::uint8_t ndim = r.u8();
        std::vector<std::size_t> dims(ndim);
        for (auto& d : dims) d = r.u32();
        Tensor<float> t(dims);
        for (auto& v : t.data) v = r.f32();
        b.params.names.push_back(std::move(name));
        b.params.tensors.push_back(std::move(t));
    }

    // validate against the architecture implied by the config
    auto specs = build_param_specs(b.config);
    for (const auto& spec : specs) {
        auto idx = b.params.find(spec.name);
        if (idx < 0) throw DataError("bundle missing tensor: " + spec.name);
        if (b.params.tensors[std::size_t(idx)].dims != spec.dims)
            throw DataError("bundle shape mismatch on tensor: " + spec.name);
    }
    if (b.params.size() != specs.size()) throw DataError("bundle has unexpected extra tensors");
    return b;
}

inline WeightBundle load_bundle(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open bundle: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_bundle(ss.str());
}

// Full pipeline in the 32-bit release path; deterministic (dropout off).
struct Prediction {
    QualityScores scores;
    std::size_t sequence_length = 0;  // L
    std::map<std::string, std::vector<float>> attention;  // per task, AP only
};

inline Prediction predict(const AudioBuffer& buffer, const WeightBundle& bundle) {
    auto segs = segment_melspec(compute_melspec(buffer));
    auto gp = GraphParams<float>::make(bundle.params, false);
    auto fwd = model_forward(bundle.config, gp, segs);
    Prediction out;
    out.sequence_length = segs.segments.size();
    for (std::size_t i = 0; i < fwd.tasks.size(); ++i) {
        out.scores.by_name(fwd.tasks[i]) = double(fwd.heads[i].score->value[0]);
        if (fwd.heads[i].weights)
            out.attention[fwd.tasks[i]] =
                std::vector<float>(fwd.heads[i].weights->data.begin(), fwd.heads[i].weights->data.end());
    }
    return out;
}

}  // namespace nisqa
