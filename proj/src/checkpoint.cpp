#include "refinery/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "refinery/error.hpp"

namespace refinery {

namespace {

constexpr char kMagic[5] = {'R', 'F', 'N', 'Y', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(const std::vector<std::uint8_t>& in, std::size_t& off, const std::string& what) {
    if (off + sizeof(T) > in.size()) {
        throw parse_error(what + ": truncated at offset " + std::to_string(off));
    }
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

void write_sections(const std::string& path, const std::vector<Section>& sections) {
    std::vector<std::uint8_t> bytes;
    bytes.insert(bytes.end(), kMagic, kMagic + 5);
    put<std::uint32_t>(bytes, static_cast<std::uint32_t>(sections.size()));
    for (const Section& s : sections) {
        put<std::uint32_t>(bytes, static_cast<std::uint32_t>(s.name.size()));
        bytes.insert(bytes.end(), s.name.begin(), s.name.end());
        put<std::uint64_t>(bytes, s.payload.size());
        bytes.insert(bytes.end(), s.payload.begin(), s.payload.end());
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
    if (!f) throw io_error("write failure on " + path);
}

std::vector<Section> read_sections(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    std::size_t off = 0;
    if (bytes.size() < 5 || std::memcmp(bytes.data(), kMagic, 5) != 0) {
        throw parse_error(path + ": bad magic at offset 0 (want RFNY1)");
    }
    off = 5;
    const auto count = take<std::uint32_t>(bytes, off, path);
    std::vector<Section> sections(count);
    for (auto& s : sections) {
        const auto name_len = take<std::uint32_t>(bytes, off, path);
        if (off + name_len > bytes.size()) {
            throw parse_error(path + ": truncated section name at offset " + std::to_string(off));
        }
        s.name.assign(bytes.begin() + static_cast<long>(off),
                      bytes.begin() + static_cast<long>(off + name_len));
        off += name_len;
        const auto payload_len = take<std::uint64_t>(bytes, off, path);
        if (off + payload_len > bytes.size()) {
            throw parse_error(path + ": truncated payload at offset " + std::to_string(off));
        }
        s.payload.assign(bytes.begin() + static_cast<long>(off),
                         bytes.begin() + static_cast<long>(off + payload_len));
        off += payload_len;
    }
    if (off != bytes.size()) {
        throw parse_error(path + ": trailing bytes after offset " + std::to_string(off));
    }
    return sections;
}

std::vector<std::uint8_t> encode_codebook(const Codebook& cb) {
    std::vector<std::uint8_t> out;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(cb.count()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(cb.dim()));
    for (std::size_t i = 0; i < cb.entries.size(); ++i) put<double>(out, cb.entries[i]);
    out.insert(out.end(), cb.bit_codes.begin(), cb.bit_codes.end());
    return out;
}

Codebook decode_codebook(const std::vector<std::uint8_t>& payload, const std::string& what) {
    std::size_t off = 0;
    const auto v = take<std::uint32_t>(payload, off, what);
    const auto d = take<std::uint32_t>(payload, off, what);
    Codebook cb;
    cb.entries = Grid({v, d});
    for (std::size_t i = 0; i < cb.entries.size(); ++i) {
        cb.entries[i] = take<double>(payload, off, what);
    }
    const std::size_t rest = payload.size() - off;
    if (rest == v) {
        cb.bit_codes.assign(payload.begin() + static_cast<long>(off), payload.end());
    } else if (rest != 0) {
        throw parse_error(what + ": unexpected " + std::to_string(rest) +
                          " bytes after entries at offset " + std::to_string(off));
    }
    return cb;
}

std::vector<std::uint8_t> encode_grid(const Grid& g) {
    std::vector<std::uint8_t> out;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(g.rank()));
    for (std::size_t a = 0; a < g.rank(); ++a) {
        put<std::uint64_t>(out, g.dim(a));
    }
    for (std::size_t i = 0; i < g.size(); ++i) put<double>(out, g[i]);
    return out;
}

Grid decode_grid(const std::vector<std::uint8_t>& payload, const std::string& what) {
    std::size_t off = 0;
    const auto rank = take<std::uint32_t>(payload, off, what);
    std::vector<std::size_t> shape(rank);
    for (auto& dim : shape) dim = take<std::uint64_t>(payload, off, what);
    Grid g(shape);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = take<double>(payload, off, what);
    if (off != payload.size()) {
        throw parse_error(what + ": trailing bytes at offset " + std::to_string(off));
    }
    return g;
}

std::vector<std::uint8_t> encode_mlp(const MlpModel& m) {
    std::vector<std::uint8_t> out;
    for (const Grid* p : m.params()) {
        const auto enc = encode_grid(*p);
        put<std::uint64_t>(out, enc.size());
        out.insert(out.end(), enc.begin(), enc.end());
    }
    return out;
}

MlpModel decode_mlp(const std::vector<std::uint8_t>& payload, const std::string& what) {
    MlpModel m;
    std::size_t off = 0;
    for (Grid* p : m.params()) {
        const auto len = take<std::uint64_t>(payload, off, what);
        if (off + len > payload.size()) {
            throw parse_error(what + ": truncated parameter block at offset " +
                              std::to_string(off));
        }
        std::vector<std::uint8_t> block(payload.begin() + static_cast<long>(off),
                                        payload.begin() + static_cast<long>(off + len));
        *p = decode_grid(block, what);
        off += len;
    }
    return m;
}

void save_refinery_model(const std::string& path, const RefineryModel& model) {
    std::vector<Section> sections;
    {
        std::vector<std::uint8_t> meta;
        put<std::uint32_t>(meta, static_cast<std::uint32_t>(model.num_scales));
        put<std::uint32_t>(meta, static_cast<std::uint32_t>(model.latent_dim));
        for (const auto& [h, w] : model.level_dims) {
            put<std::uint64_t>(meta, h);
            put<std::uint64_t>(meta, w);
        }
        sections.push_back({"meta", std::move(meta)});
    }
    sections.push_back({"base_codebook", encode_codebook(model.base_codebook)});
    for (std::size_t level = 0; level < model.residual_codebooks.size(); ++level) {
        sections.push_back({"residual_codebook_" + std::to_string(level),
                            encode_codebook(model.residual_codebooks[level])});
    }
    sections.push_back({"base_prior", encode_grid(model.base_prior)});
    for (std::size_t level = 0; level < model.predictors.size(); ++level) {
        sections.push_back(
            {"predictor_" + std::to_string(level), encode_mlp(model.predictors[level])});
    }
    write_sections(path, sections);
}

RefineryModel load_refinery_model(const std::string& path) {
    const std::vector<Section> sections = read_sections(path);
    auto find = [&](const std::string& name) -> const Section& {
        for (const Section& s : sections) {
            if (s.name == name) return s;
        }
        throw parse_error(path + ": missing section " + name);
    };

    RefineryModel m;
    {
        const Section& meta = find("meta");
        std::size_t off = 0;
        m.num_scales = static_cast<int>(take<std::uint32_t>(meta.payload, off, path));
        m.latent_dim = take<std::uint32_t>(meta.payload, off, path);
        for (int level = 0; level <= m.num_scales; ++level) {
            const auto h = take<std::uint64_t>(meta.payload, off, path);
            const auto w = take<std::uint64_t>(meta.payload, off, path);
            m.level_dims.push_back({h, w});
        }
    }
    m.base_codebook = decode_codebook(find("base_codebook").payload, path);
    for (int level = 0; level < m.num_scales; ++level) {
        m.residual_codebooks.push_back(
            decode_codebook(find("residual_codebook_" + std::to_string(level)).payload, path));
    }
    m.base_prior = decode_grid(find("base_prior").payload, path);
    for (int level = 0; level < m.num_scales; ++level) {
        m.predictors.push_back(
            decode_mlp(find("predictor_" + std::to_string(level)).payload, path));
    }
    return m;
}

}  // namespace refinery
