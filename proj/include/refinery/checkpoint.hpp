// Little-endian checkpoint container: magic "RFNY1", then a u32 section
// count, then sections of [u32 name length][name][u64 payload length]
// [payload]. Codebook sections hold V and d as u32 followed by V*d f64
// entries and, when present, V bytes of bit codes.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refinery/grid.hpp"
#include "refinery/quantize.hpp"
#include "refinery/refine.hpp"

namespace refinery {

struct Section {
    std::string name;
    std::vector<std::uint8_t> payload;
};

void write_sections(const std::string& path, const std::vector<Section>& sections);
std::vector<Section> read_sections(const std::string& path);

std::vector<std::uint8_t> encode_codebook(const Codebook& cb);
Codebook decode_codebook(const std::vector<std::uint8_t>& payload, const std::string& what);

std::vector<std::uint8_t> encode_grid(const Grid& g);
Grid decode_grid(const std::vector<std::uint8_t>& payload, const std::string& what);

std::vector<std::uint8_t> encode_mlp(const MlpModel& m);
MlpModel decode_mlp(const std::vector<std::uint8_t>& payload, const std::string& what);

// Full refinery model checkpoint (codebooks, base prior, predictors).
void save_refinery_model(const std::string& path, const RefineryModel& model);
RefineryModel load_refinery_model(const std::string& path);

}  // namespace refinery
