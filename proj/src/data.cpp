#include "refinery/data.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>

#include "refinery/error.hpp"

namespace refinery {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

// Reads a whole IDX file; gzFile handles both raw and gzip transparently.
std::vector<std::uint8_t> read_all_bytes(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw io_error("cannot open " + path);
    std::vector<std::uint8_t> bytes;
    std::uint8_t buf[1 << 16];
    int got;
    while ((got = gzread(f, buf, sizeof(buf))) > 0) {
        bytes.insert(bytes.end(), buf, buf + got);
    }
    const bool read_error = got < 0;
    gzclose(f);
    if (read_error) throw io_error("read failure on " + path);
    return bytes;
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t offset,
                        const std::string& path) {
    if (offset + 4 > b.size()) {
        throw parse_error(path + ": truncated at offset " + std::to_string(offset) +
                          " (expected 4 more bytes)");
    }
    return (std::uint32_t(b[offset]) << 24) | (std::uint32_t(b[offset + 1]) << 16) |
           (std::uint32_t(b[offset + 2]) << 8) | std::uint32_t(b[offset + 3]);
}

void write_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    b.push_back(static_cast<std::uint8_t>(v >> 24));
    b.push_back(static_cast<std::uint8_t>(v >> 16));
    b.push_back(static_cast<std::uint8_t>(v >> 8));
    b.push_back(static_cast<std::uint8_t>(v));
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw io_error("cannot open " + path + " for writing");
    const std::size_t wrote = std::fwrite(bytes.data(), 1, bytes.size(), f);
    std::fclose(f);
    if (wrote != bytes.size()) throw io_error("short write to " + path);
}

std::string pick_existing(const std::string& dir, const std::string& name) {
    namespace fs = std::filesystem;
    const std::string plain = dir + "/" + name;
    if (fs::exists(plain)) return plain;
    const std::string gz = plain + ".gz";
    if (fs::exists(gz)) return gz;
    throw io_error("missing data file " + plain + " (or .gz)");
}

}  // namespace

Grid load_idx_images(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_all_bytes(path);
    const std::uint32_t magic = read_be32(bytes, 0, path);
    if (magic != kImageMagic) {
        char hex[16];
        std::snprintf(hex, sizeof(hex), "0x%08x", magic);
        throw parse_error(path + ": bad image magic " + hex + " at offset 0");
    }
    const std::size_t n = read_be32(bytes, 4, path);
    const std::size_t rows = read_be32(bytes, 8, path);
    const std::size_t cols = read_be32(bytes, 12, path);
    if (rows == 0 || cols == 0) {
        throw parse_error(path + ": zero image dimensions at offset 8");
    }
    const std::size_t expected = 16 + n * rows * cols;
    if (bytes.size() < expected) {
        throw parse_error(path + ": truncated at offset " + std::to_string(bytes.size()) +
                          " (header promises " + std::to_string(expected) + " bytes)");
    }
    if (bytes.size() > expected) {
        throw parse_error(path + ": trailing bytes after offset " + std::to_string(expected));
    }
    Grid images({n, rows, cols});
    for (std::size_t i = 0; i < n * rows * cols; ++i) {
        images[i] = static_cast<double>(bytes[16 + i]) / 255.0;
    }
    return images;
}

std::vector<std::int32_t> load_idx_labels(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_all_bytes(path);
    const std::uint32_t magic = read_be32(bytes, 0, path);
    if (magic != kLabelMagic) {
        char hex[16];
        std::snprintf(hex, sizeof(hex), "0x%08x", magic);
        throw parse_error(path + ": bad label magic " + hex + " at offset 0");
    }
    const std::size_t n = read_be32(bytes, 4, path);
    if (bytes.size() != 8 + n) {
        throw parse_error(path + ": truncated at offset " + std::to_string(bytes.size()) +
                          " (header promises " + std::to_string(8 + n) + " bytes)");
    }
    std::vector<std::int32_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = bytes[8 + i];
    return labels;
}

Dataset load_dataset(const std::string& dir, const std::string& split) {
    std::string image_name, label_name;
    if (split == "train") {
        image_name = "train-images-idx3-ubyte";
        label_name = "train-labels-idx1-ubyte";
    } else if (split == "test") {
        image_name = "t10k-images-idx3-ubyte";
        label_name = "t10k-labels-idx1-ubyte";
    } else {
        throw input_error("load_dataset: split must be 'train' or 'test'");
    }
    Dataset ds;
    ds.images = load_idx_images(pick_existing(dir, image_name));
    ds.labels = load_idx_labels(pick_existing(dir, label_name));
    ds.split = split;
    if (ds.labels.size() != ds.count()) {
        throw parse_error(dir + ": image/label counts disagree (" +
                          std::to_string(ds.count()) + " vs " +
                          std::to_string(ds.labels.size()) + ")");
    }
    return ds;
}

std::string resolve_data_dir(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    const char* env = std::getenv("REFINERY_DATA_DIR");
    return env ? env : "";
}

void write_idx_images(const std::string& path, const Grid& images) {
    if (images.rank() != 3) throw dim_error("write_idx_images: expected N x H x W");
    std::vector<std::uint8_t> bytes;
    bytes.reserve(16 + images.size());
    write_be32(bytes, kImageMagic);
    write_be32(bytes, static_cast<std::uint32_t>(images.dim(0)));
    write_be32(bytes, static_cast<std::uint32_t>(images.dim(1)));
    write_be32(bytes, static_cast<std::uint32_t>(images.dim(2)));
    for (std::size_t i = 0; i < images.size(); ++i) {
        const double v = std::clamp(images[i], 0.0, 1.0) * 255.0;
        bytes.push_back(static_cast<std::uint8_t>(v + 0.5));
    }
    write_file(path, bytes);
}

void write_idx_labels(const std::string& path, const std::vector<std::int32_t>& labels) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(8 + labels.size());
    write_be32(bytes, kLabelMagic);
    write_be32(bytes, static_cast<std::uint32_t>(labels.size()));
    for (std::int32_t v : labels) bytes.push_back(static_cast<std::uint8_t>(v));
    write_file(path, bytes);
}

Grid add_noise(const Grid& x, double sigma, RngStream& rng) {
    if (sigma < 0.0) throw input_error("add_noise: sigma must be >= 0");
    Grid out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + sigma * rng.normal();
    return out;
}

Batcher::Batcher(std::size_t n, std::size_t batch_size, const RngStream& rng)
    : n_(n), batch_size_(batch_size), base_(rng) {
    if (batch_size_ < 1) throw input_error("Batcher: batch_size must be >= 1");
}

std::vector<std::vector<std::size_t>> Batcher::epoch(std::uint64_t epoch_index) const {
    RngStream rng = base_.substream(epoch_index);
    const std::vector<std::size_t> order = random_permutation(n_, rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n_; start += batch_size_) {
        const std::size_t count = std::min(batch_size_, n_ - start);
        batches.emplace_back(order.begin() + static_cast<long>(start),
                             order.begin() + static_cast<long>(start + count));
    }
    return batches;
}

Grid gather_rows(const Grid& examples, const std::vector<std::size_t>& idx) {
    if (examples.rank() < 2) throw dim_error("gather_rows: expected at least 2-D");
    const std::size_t n = examples.dim(0);
    const std::size_t row_len = examples.size() / n;
    Grid out({idx.size(), row_len});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= n) throw input_error("gather_rows: index out of range");
        const double* src = examples.data() + idx[i] * row_len;
        std::copy(src, src + row_len, out.data() + i * row_len);
    }
    return out;
}

Grid flatten_examples(const Grid& images) {
    if (images.rank() != 3) throw dim_error("flatten_examples: expected N x H x W");
    return images.reshaped({images.dim(0), images.dim(1) * images.dim(2)});
}

}  // namespace refinery
