#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dfn/fusion.hpp"
#include "dfn/image_io.hpp"
#include "dfn/losses.hpp"
#include "dfn/optim.hpp"

namespace dfn {

// Container layout (all integers and doubles little-endian):
//   magic "DFNCKPT\0", version u32, kind u32,
//   config text: u64 length + "key=value\n" lines,
//   records: u32 count, each { u32 name_len, name,
//                              u32 ndim, i64 extents[ndim],
//                              f64 values[numel] }.
// Kind 1 holds model weights (+ optional Adam state records), kind 2 holds
// feature-extractor weights.

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kKindModel = 1;
constexpr std::uint32_t kKindFeatureExtractor = 2;

struct Record {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct RecordsFile {
    std::uint32_t version = kCheckpointVersion;
    std::uint32_t kind = 0;
    std::string config_text;
    std::vector<Record> records;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::string& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw IoError("checkpoint file truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

inline void write_records_file(const std::string& path, const RecordsFile& f) {
    std::string out = "DFNCKPT";
    out.push_back('\0');
    detail::put_u32(out, f.version);
    detail::put_u32(out, f.kind);
    detail::put_u64(out, f.config_text.size());
    out += f.config_text;
    detail::put_u32(out, static_cast<std::uint32_t>(f.records.size()));
    for (const auto& r : f.records) {
        detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
        out += r.name;
        detail::put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
        for (auto e : r.shape) detail::put_u64(out, static_cast<std::uint64_t>(e));
        for (double v : r.values) detail::put_f64(out, v);
    }
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open '" + path + "' for writing");
    if (std::fwrite(out.data(), 1, out.size(), fp.get()) != out.size()) {
        throw IoError("short write to '" + path + "'");
    }
}

inline RecordsFile read_records_file(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open '" + path + "' for reading");
    std::string buf;
    char chunk[65536];
    std::size_t got;
    while ((got = std::fread(chunk, 1, sizeof chunk, fp.get())) > 0) {
        buf.append(chunk, got);
    }
    detail::ByteReader rd{buf};
    if (rd.bytes(8) != std::string("DFNCKPT\0", 8)) {
        throw IoError("'" + path + "' is not a checkpoint file");
    }
    RecordsFile f;
    f.version = rd.u32();
    if (f.version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " +
                      std::to_string(f.version));
    }
    f.kind = rd.u32();
    f.config_text = rd.bytes(static_cast<std::size_t>(rd.u64()));
    const std::uint32_t count = rd.u32();
    f.records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Record r;
        r.name = rd.bytes(rd.u32());
        const std::uint32_t ndim = rd.u32();
        r.shape.resize(ndim);
        std::int64_t numel = 1;
        for (std::uint32_t dI = 0; dI < ndim; ++dI) {
            r.shape[dI] = static_cast<std::int64_t>(rd.u64());
            if (r.shape[dI] <= 0) throw IoError("checkpoint record has bad shape");
            numel *= r.shape[dI];
        }
        r.values.resize(static_cast<std::size_t>(numel));
        for (auto& v : r.values) v = rd.f64();
        f.records.push_back(std::move(r));
    }
    return f;
}

// --- key=value config text -------------------------------------------------

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string format_int_list(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw IoError("malformed config line: '" + line + "'");
        }
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline std::string dfnet_config_text(const DFNetConfig& c, int image_size,
                                     std::int64_t adam_step = -1) {
    std::string t;
    t += "encoder_depth=" + std::to_string(c.encoder_depth) + "\n";
    t += "widths=" + format_int_list(c.widths) + "\n";
    t += "fusion_blocks=" + std::to_string(c.fusion_blocks) + "\n";
    t += "alpha_hidden=" + std::to_string(c.alpha_hidden) + "\n";
    t += "leaky_slope=" + format_double(c.leaky_slope) + "\n";
    t += "p_layers=" + format_int_list(c.p_layers) + "\n";
    t += "q_layers=" + format_int_list(c.q_layers) + "\n";
    t += "lambda_l1=" + format_double(c.loss_weights.l1) + "\n";
    t += "lambda_p=" + format_double(c.loss_weights.perceptual) + "\n";
    t += "lambda_s=" + format_double(c.loss_weights.style) + "\n";
    t += "lambda_tv=" + format_double(c.loss_weights.tv) + "\n";
    t += "hard_mask_blend=" + std::to_string(c.hard_mask_blend ? 1 : 0) + "\n";
    t += "image_size=" + std::to_string(image_size) + "\n";
    if (adam_step >= 0) t += "adam_step=" + std::to_string(adam_step) + "\n";
    return t;
}

inline DFNetConfig dfnet_config_from_kv(
    const std::map<std::string, std::string>& kv) {
    DFNetConfig c;
    auto get = [&kv](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw IoError("checkpoint config missing '" + key + "'");
        return it->second;
    };
    c.encoder_depth = std::stoi(get("encoder_depth"));
    c.widths = parse_int_list(get("widths"));
    c.fusion_blocks = std::stoi(get("fusion_blocks"));
    c.alpha_hidden = std::stoi(get("alpha_hidden"));
    c.leaky_slope = std::stod(get("leaky_slope"));
    c.p_layers = parse_int_list(get("p_layers"));
    c.q_layers = parse_int_list(get("q_layers"));
    c.loss_weights.l1 = std::stod(get("lambda_l1"));
    c.loss_weights.perceptual = std::stod(get("lambda_p"));
    c.loss_weights.style = std::stod(get("lambda_s"));
    c.loss_weights.tv = std::stod(get("lambda_tv"));
    c.hard_mask_blend = std::stoi(get("hard_mask_blend")) != 0;
    return c;
}

// --- model checkpoints -------------------------------------------------------

inline void save_model_checkpoint(const std::string& path, DFNet& model,
                                  int image_size,
                                  const ParamGroup* adam = nullptr) {
    RecordsFile f;
    f.kind = kKindModel;
    f.config_text = dfnet_config_text(model.config(), image_size,
                                      adam ? adam->step_count : -1);
    for (auto& [name, tensor] : model.named_params()) {
        f.records.push_back({name, tensor.shape(), tensor.data()});
    }
    for (auto& [name, buf] : model.named_buffers()) {
        f.records.push_back(
            {name, Shape{static_cast<std::int64_t>(buf->size())}, *buf});
    }
    if (adam) {
        for (const auto& e : adam->entries) {
            f.records.push_back(
                {e.name + ".adam.m",
                 Shape{static_cast<std::int64_t>(e.m.size())}, e.m});
            f.records.push_back(
                {e.name + ".adam.v",
                 Shape{static_cast<std::int64_t>(e.v.size())}, e.v});
        }
    }
    write_records_file(path, f);
}

struct LoadedCheckpoint {
    DFNet model;
    int image_size = 0;
    std::optional<ParamGroup> adam;
};

inline LoadedCheckpoint load_model_checkpoint(const std::string& path) {
    RecordsFile f = read_records_file(path);
    if (f.kind != kKindModel) {
        throw IoError("'" + path + "' is not a model checkpoint");
    }
    auto kv = parse_kv_text(f.config_text);
    DFNetConfig cfg = dfnet_config_from_kv(kv);

    LoadedCheckpoint out{DFNet(cfg, /*seed=*/0), 0, std::nullopt};
    out.image_size = std::stoi(kv.at("image_size"));

    std::map<std::string, const Record*> by_name;
    for (const auto& r : f.records) by_name[r.name] = &r;
    auto take = [&by_name, &path](const std::string& name) -> const Record& {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw IoError("checkpoint '" + path + "' missing record '" + name + "'");
        }
        return *it->second;
    };

    for (auto& [name, tensor] : out.model.named_params()) {
        const Record& r = take(name);
        if (r.shape != tensor.shape()) {
            throw IoError("checkpoint record '" + name + "' has shape " +
                          shape_str(r.shape) + ", expected " +
                          shape_str(tensor.shape()));
        }
        tensor.data() = r.values;
    }
    for (auto& [name, buf] : out.model.named_buffers()) {
        const Record& r = take(name);
        if (r.values.size() != buf->size()) {
            throw IoError("checkpoint buffer '" + name + "' has wrong length");
        }
        *buf = r.values;
    }
    if (kv.count("adam_step")) {
        ParamGroup group;
        for (auto& [name, tensor] : out.model.named_params()) {
            group.add(name, tensor);
        }
        group.step_count = std::stoll(kv.at("adam_step"));
        for (auto& e : group.entries) {
            e.m = take(e.name + ".adam.m").values;
            e.v = take(e.name + ".adam.v").values;
            if (e.m.size() != e.param.data().size() ||
                e.v.size() != e.param.data().size()) {
                throw IoError("checkpoint Adam state for '" + e.name +
                              "' has wrong length");
            }
        }
        out.adam = std::move(group);
    }
    return out;
}

// --- feature-extractor weight files -----------------------------------------

inline void save_feature_extractor(const std::string& path,
                                   FeatureExtractor& fx) {
    RecordsFile f;
    f.kind = kKindFeatureExtractor;
    const auto& c = fx.config();
    f.config_text += "widths=" + format_int_list(c.widths) + "\n";
    f.config_text += "leaky_slope=" + format_double(c.leaky_slope) + "\n";
    f.config_text += "taps=" + format_int_list(c.taps) + "\n";
    f.config_text += "seed=" + std::to_string(c.seed) + "\n";
    for (auto& [name, tensor] : fx.named_tensors()) {
        f.records.push_back({name, tensor.shape(), tensor.data()});
    }
    write_records_file(path, f);
}

inline FeatureExtractor load_feature_extractor(const std::string& path) {
    RecordsFile f = read_records_file(path);
    if (f.kind != kKindFeatureExtractor) {
        throw IoError("'" + path + "' is not a feature-extractor file");
    }
    auto kv = parse_kv_text(f.config_text);
    FeatureExtractorConfig cfg;
    cfg.widths = parse_int_list(kv.at("widths"));
    cfg.leaky_slope = std::stod(kv.at("leaky_slope"));
    cfg.taps = parse_int_list(kv.at("taps"));
    cfg.seed = std::stoull(kv.at("seed"));
    FeatureExtractor fx(cfg);
    std::map<std::string, const Record*> by_name;
    for (const auto& r : f.records) by_name[r.name] = &r;
    for (auto& [name, tensor] : fx.named_tensors()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw IoError("feature-extractor file missing record '" + name + "'");
        }
        if (it->second->shape != tensor.shape()) {
            throw IoError("feature-extractor record '" + name + "' shape mismatch");
        }
        tensor.data() = it->second->values;
    }
    return fx;
}

}  // namespace dfn
