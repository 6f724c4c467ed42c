// io.hpp - bit-exact persistence: VQFT feature files, dataset manifests and
// model checkpoints. All integers little-endian.
//
// VQFT feature file:
//   "VQFT"  u16 version  u16 scale count L
//   per scale: u32 D, u32 H, u32 W
//   per scale: f32 payload, row-major D x H x W
//   u8 label (0 normal / 1 anomalous)  u32 class id  u8 mask present
//   if mask present: u8 per position (H_1 x W_1)
//
// VQFC checkpoint:
//   "VQFC"  u16 version
//   named config fields, then parameters in registry order (name, shape,
//   f32 payload), then codebook usage counters.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "vqflow/model.hpp"
#include "vqflow/types.hpp"

namespace vqflow {

namespace detail {

class ByteReader {
public:
    explicit ByteReader(std::istream& in) : in_(in) {}

    std::size_t offset() const { return offset_; }

    void read(void* dst, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw FormatError(std::string("truncated while reading ") + what + " at offset " +
                              std::to_string(offset_));
        offset_ += n;
    }

    std::uint8_t u8(const char* what) {
        std::uint8_t v;
        read(&v, 1, what);
        return v;
    }
    std::uint16_t u16(const char* what) {
        unsigned char b[2];
        read(b, 2, what);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        read(b, 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    std::uint64_t u64(const char* what) {
        std::uint64_t lo = u32(what), hi = u32(what);
        return lo | (hi << 32);
    }
    float f32(const char* what) {
        std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    bool at_eof() {
        return in_.peek() == std::char_traits<char>::eof();
    }

private:
    std::istream& in_;
    std::size_t offset_ = 0;
};

class ByteWriter {
public:
    explicit ByteWriter(std::ostream& out) : out_(out) {}

    void write(const void* src, std::size_t n) {
        out_.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
    }
    void u8(std::uint8_t v) { write(&v, 1); }
    void u16(std::uint16_t v) {
        unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>(v >> 8)};
        write(b, 2);
    }
    void u32(std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
        write(b, 4);
    }
    void u64(std::uint64_t v) {
        u32(static_cast<std::uint32_t>(v & 0xffffffffULL));
        u32(static_cast<std::uint32_t>(v >> 32));
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void str(const std::string& s) {
        u16(static_cast<std::uint16_t>(s.size()));
        write(s.data(), s.size());
    }

private:
    std::ostream& out_;
};

inline std::string read_str(ByteReader& r, const char* what) {
    std::uint16_t n = r.u16(what);
    std::string s(n, '\0');
    r.read(s.data(), n, what);
    return s;
}

constexpr std::uint32_t kMaxExtent = 1u << 20;

}  // namespace detail

inline constexpr std::uint16_t kFeatureFileVersion = 1;
inline constexpr std::uint16_t kCheckpointVersion = 1;

// ---------------------------------------------------------------------------
// Feature files
// ---------------------------------------------------------------------------

inline void write_feature_file(const FeatureSample& sample, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path);
    detail::ByteWriter w(out);
    w.write("VQFT", 4);
    w.u16(kFeatureFileVersion);
    w.u16(static_cast<std::uint16_t>(sample.scales()));
    for (const Tensor& f : sample.features) {
        w.u32(static_cast<std::uint32_t>(f.dim(2)));  // D
        w.u32(static_cast<std::uint32_t>(f.dim(0)));  // H
        w.u32(static_cast<std::uint32_t>(f.dim(1)));  // W
    }
    for (const Tensor& f : sample.features) {
        const int h = f.dim(0), wd = f.dim(1), d = f.dim(2);
        const float* p = f.data();
        // memory is [H,W,D]; file is row-major D x H x W
        for (int c = 0; c < d; ++c)
            for (int m = 0; m < h; ++m)
                for (int n = 0; n < wd; ++n)
                    w.f32(p[(static_cast<std::size_t>(m) * static_cast<std::size_t>(wd) +
                             static_cast<std::size_t>(n)) *
                                static_cast<std::size_t>(d) +
                            static_cast<std::size_t>(c)]);
    }
    w.u8(sample.anomalous ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(sample.class_id));
    w.u8(sample.mask.empty() ? 0 : 1);
    if (!sample.mask.empty()) w.write(sample.mask.data(), sample.mask.size());
    out.flush();
    if (!out) throw FormatError("write failed: " + path);
}

inline FeatureSample read_feature_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path);
    detail::ByteReader r(in);
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, "VQFT", 4) != 0)
        throw FormatError("bad magic at offset 0 in " + path);
    std::uint16_t version = r.u16("version");
    if (version != kFeatureFileVersion)
        throw VersionError("feature file version " + std::to_string(version) + " unsupported");
    std::uint16_t scales = r.u16("scale count");
    if (scales == 0 || scales > 64)
        throw FormatError("implausible scale count " + std::to_string(scales) + " at offset 6");

    struct Dims {
        std::uint32_t d, h, w;
    };
    std::vector<Dims> dims;
    for (int i = 0; i < scales; ++i) {
        Dims dd{r.u32("D"), r.u32("H"), r.u32("W")};
        if (dd.d == 0 || dd.h == 0 || dd.w == 0 || dd.d > detail::kMaxExtent ||
            dd.h > detail::kMaxExtent || dd.w > detail::kMaxExtent)
            throw FormatError("declared dims " + std::to_string(dd.d) + "x" +
                              std::to_string(dd.h) + "x" + std::to_string(dd.w) +
                              " out of range at offset " + std::to_string(r.offset() - 12));
        dims.push_back(dd);
    }

    FeatureSample s;
    for (const auto& dd : dims) {
        Tensor f(Shape{static_cast<int>(dd.h), static_cast<int>(dd.w), static_cast<int>(dd.d)});
        auto& data = f.mut();
        for (std::uint32_t c = 0; c < dd.d; ++c)
            for (std::uint32_t m = 0; m < dd.h; ++m)
                for (std::uint32_t n = 0; n < dd.w; ++n)
                    data[(static_cast<std::size_t>(m) * dd.w + n) * dd.d + c] = r.f32("payload");
        s.features.push_back(std::move(f));
    }
    s.anomalous = r.u8("label") != 0;
    s.class_id = static_cast<int>(r.u32("class id"));
    bool has_mask = r.u8("mask flag") != 0;
    if (has_mask) {
        std::size_t n = static_cast<std::size_t>(dims[0].h) * dims[0].w;
        s.mask.resize(n);
        r.read(s.mask.data(), n, "mask payload");
    }
    if (!r.at_eof())
        throw FormatError("trailing bytes after payload at offset " + std::to_string(r.offset()) +
                          " in " + path);
    if (s.anomalous != has_mask)
        throw FormatError("label/mask inconsistency in " + path);
    return s;
}

// ---------------------------------------------------------------------------
// Dataset directory: train/ and test/ feature files plus a plain manifest of
// "<split> <relative path>" lines.
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "train");
    fs::create_directories(fs::path(dir) / "test");
    std::ofstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) throw FormatError("cannot write manifest in " + dir);
    for (const auto& s : ds.train) {
        std::string rel = "train/" + s.id + ".vqft";
        write_feature_file(s, (fs::path(dir) / rel).string());
        manifest << "train " << rel << "\n";
    }
    for (const auto& s : ds.test) {
        std::string rel = "test/" + s.id + ".vqft";
        write_feature_file(s, (fs::path(dir) / rel).string());
        manifest << "test " << rel << "\n";
    }
    manifest.flush();
    if (!manifest) throw FormatError("manifest write failed in " + dir);
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) throw FormatError("cannot open manifest in " + dir);
    Dataset ds;
    std::string split, rel;
    while (manifest >> split >> rel) {
        FeatureSample s = read_feature_file((fs::path(dir) / rel).string());
        s.id = fs::path(rel).stem().string();
        if (split == "train") {
            if (s.anomalous)
                throw ContractError("train split purity violated: " + rel + " is anomalous");
            ds.train.push_back(std::move(s));
        } else if (split == "test") {
            ds.test.push_back(std::move(s));
        } else {
            throw FormatError("unknown split tag '" + split + "' in manifest");
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

struct ConfigField {
    bool is_float;
    std::int64_t i = 0;
    float f = 0.0f;
};

inline std::map<std::string, ConfigField> config_fields(const ModelConfig& cfg) {
    std::map<std::string, ConfigField> m;
    auto put_i = [&](const std::string& k, std::int64_t v) { m[k] = {false, v, 0.0f}; };
    auto put_f = [&](const std::string& k, float v) { m[k] = {true, 0, v}; };
    put_i("scales", cfg.scales);
    for (int i = 0; i < cfg.scales; ++i) {
        put_i("channels." + std::to_string(i), cfg.channels[static_cast<std::size_t>(i)]);
        put_i("spatial." + std::to_string(i), cfg.spatial[static_cast<std::size_t>(i)]);
    }
    put_i("blocks_per_branch", cfg.blocks_per_branch);
    put_i("d_cp", cfg.d_cp);
    put_i("d_pe", cfg.d_pe);
    put_i("k_cp", cfg.k_cp);
    put_i("k_csp", cfg.k_csp);
    put_i("mlp_hidden", cfg.mlp_hidden);
    put_i("head_hidden", cfg.head_hidden);
    put_i("cadm", cfg.cadm);
    put_i("cpc", cfg.cpc);
    put_i("cspc", cfg.cspc);
    put_i("pe", cfg.pe);
    put_i("seed", static_cast<std::int64_t>(cfg.seed));
    put_f("clamp", cfg.clamp);
    put_f("sigma_eps", cfg.sigma_eps);
    put_f("commitment", cfg.commitment);
    return m;
}

}  // namespace detail

// Names of fields that differ between two configs (empty = compatible).
inline std::vector<std::string> config_mismatches(const ModelConfig& a, const ModelConfig& b) {
    auto fa = detail::config_fields(a);
    auto fb = detail::config_fields(b);
    std::vector<std::string> out;
    for (const auto& [k, v] : fa) {
        auto it = fb.find(k);
        if (it == fb.end() || v.is_float != it->second.is_float || v.i != it->second.i ||
            v.f != it->second.f)
            out.push_back(k);
    }
    for (const auto& [k, v] : fb)
        if (!fa.count(k)) out.push_back(k);
    return out;
}

inline void save_checkpoint(VqFlowModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path);
    detail::ByteWriter w(out);
    w.write("VQFC", 4);
    w.u16(kCheckpointVersion);

    auto fields = detail::config_fields(model.cfg);
    w.u32(static_cast<std::uint32_t>(fields.size()));
    for (const auto& [k, v] : fields) {
        w.str(k);
        w.u8(v.is_float ? 1 : 0);
        if (v.is_float)
            w.f32(v.f);
        else
            w.u64(static_cast<std::uint64_t>(v.i));
    }

    auto params = model.params();
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        w.str(p.name);
        const Tensor& t = *p.tensor;
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) w.u32(static_cast<std::uint32_t>(t.dim(i)));
        const float* d = t.data();
        for (std::size_t i = 0; i < t.numel(); ++i) w.f32(d[i]);
    }

    w.u8(model.codebooks_ready ? 1 : 0);
    w.u8(model.cfg.cpc ? 1 : 0);
    if (model.cfg.cpc) {
        w.u32(static_cast<std::uint32_t>(model.cpc_book.usage_counts.size()));
        for (auto c : model.cpc_book.usage_counts) w.u64(c);
    }
    w.u32(static_cast<std::uint32_t>(model.cspc_books.size()));
    for (const auto& cb : model.cspc_books) {
        w.u32(static_cast<std::uint32_t>(cb.usage_counts.size()));
        for (auto c : cb.usage_counts) w.u64(c);
    }
    out.flush();
    if (!out) throw FormatError("write failed: " + path);
}

inline VqFlowModel load_checkpoint(const std::string& path,
                                   const ModelConfig* expected = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path);
    detail::ByteReader r(in);
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, "VQFC", 4) != 0)
        throw FormatError("bad magic at offset 0 in " + path);
    std::uint16_t version = r.u16("version");
    if (version != kCheckpointVersion)
        throw VersionError("checkpoint version " + std::to_string(version) + " unsupported");

    std::uint32_t nfields = r.u32("config field count");
    std::map<std::string, detail::ConfigField> fields;
    for (std::uint32_t i = 0; i < nfields; ++i) {
        std::string key = detail::read_str(r, "config key");
        detail::ConfigField f;
        f.is_float = r.u8("config type") != 0;
        if (f.is_float)
            f.f = r.f32("config value");
        else
            f.i = static_cast<std::int64_t>(r.u64("config value"));
        fields[key] = f;
    }
    auto need_i = [&](const std::string& k) -> std::int64_t {
        auto it = fields.find(k);
        if (it == fields.end() || it->second.is_float)
            throw VersionError("checkpoint missing config field '" + k + "'");
        return it->second.i;
    };
    auto need_f = [&](const std::string& k) -> float {
        auto it = fields.find(k);
        if (it == fields.end() || !it->second.is_float)
            throw VersionError("checkpoint missing config field '" + k + "'");
        return it->second.f;
    };

    ModelConfig cfg;
    cfg.scales = static_cast<int>(need_i("scales"));
    cfg.channels.clear();
    cfg.spatial.clear();
    for (int i = 0; i < cfg.scales; ++i) {
        cfg.channels.push_back(static_cast<int>(need_i("channels." + std::to_string(i))));
        cfg.spatial.push_back(static_cast<int>(need_i("spatial." + std::to_string(i))));
    }
    cfg.blocks_per_branch = static_cast<int>(need_i("blocks_per_branch"));
    cfg.d_cp = static_cast<int>(need_i("d_cp"));
    cfg.d_pe = static_cast<int>(need_i("d_pe"));
    cfg.k_cp = static_cast<int>(need_i("k_cp"));
    cfg.k_csp = static_cast<int>(need_i("k_csp"));
    cfg.mlp_hidden = static_cast<int>(need_i("mlp_hidden"));
    cfg.head_hidden = static_cast<int>(need_i("head_hidden"));
    cfg.cadm = need_i("cadm") != 0;
    cfg.cpc = need_i("cpc") != 0;
    cfg.cspc = need_i("cspc") != 0;
    cfg.pe = need_i("pe") != 0;
    cfg.seed = static_cast<std::uint64_t>(need_i("seed"));
    cfg.clamp = need_f("clamp");
    cfg.sigma_eps = need_f("sigma_eps");
    cfg.commitment = need_f("commitment");

    if (expected) {
        auto mism = config_mismatches(cfg, *expected);
        if (!mism.empty()) {
            std::string joined;
            for (const auto& m : mism) joined += (joined.empty() ? "" : ", ") + m;
            throw VersionError("checkpoint config incompatible with requested config; "
                               "mismatched fields: " + joined);
        }
    }

    VqFlowModel model = VqFlowModel::build(cfg);
    auto params = model.params();
    std::uint32_t nparams = r.u32("parameter count");
    if (nparams != params.size())
        throw VersionError("checkpoint has " + std::to_string(nparams) + " parameters, model expects " +
                           std::to_string(params.size()));
    for (auto& p : params) {
        std::string name = detail::read_str(r, "parameter name");
        if (name != p.name)
            throw VersionError("parameter order mismatch: stored '" + name + "', expected '" +
                               p.name + "'");
        std::uint8_t rank = r.u8("parameter rank");
        Shape shape;
        for (int i = 0; i < rank; ++i) shape.push_back(static_cast<int>(r.u32("parameter dim")));
        if (shape != p.tensor->shape())
            throw VersionError("parameter '" + name + "': stored shape " + shape_str(shape) +
                               " vs expected " + shape_str(p.tensor->shape()));
        auto& data = p.tensor->mut();
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = r.f32("parameter payload");
    }

    model.codebooks_ready = r.u8("codebook init flag") != 0;
    bool has_cpc_usage = r.u8("cpc usage flag") != 0;
    if (has_cpc_usage != model.cfg.cpc)
        throw VersionError("checkpoint usage section inconsistent with cpc flag");
    if (has_cpc_usage) {
        std::uint32_t k = r.u32("cpc usage count");
        if (k != model.cpc_book.usage_counts.size())
            throw VersionError("cpc usage length mismatch");
        for (auto& c : model.cpc_book.usage_counts) c = r.u64("cpc usage");
    }
    std::uint32_t nbooks = r.u32("cspc book count");
    if (nbooks != model.cspc_books.size())
        throw VersionError("checkpoint cspc book count mismatch");
    for (auto& cb : model.cspc_books) {
        std::uint32_t k = r.u32("cspc usage count");
        if (k != cb.usage_counts.size()) throw VersionError("cspc usage length mismatch");
        for (auto& c : cb.usage_counts) c = r.u64("cspc usage");
    }
    if (!r.at_eof())
        throw FormatError("trailing bytes after checkpoint payload at offset " +
                          std::to_string(r.offset()));
    return model;
}

inline std::uint64_t file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a64(reinterpret_cast<const unsigned char*>(buf),
                    static_cast<std::size_t>(in.gcount()), h);
        if (in.gcount() < static_cast<std::streamsize>(sizeof(buf))) break;
    }
    return h;
}

}  // namespace vqflow
