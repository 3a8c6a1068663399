// Per-seed metric collection with mean ± sample-std aggregation, and the
// deterministic report writers (CSV, markdown, per-epoch traces).
//
// report.csv carries only deterministic metric values and reproduces
// byte-identically for a given config + seed set. Measured wall-clock
// metrics go to timing.csv and report.md only.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "refinery/grid.hpp"

namespace refinery {

struct MetricValues {
    std::string name;  // e.g. "mse_sigma020/pixel"
    std::vector<double> per_seed;

    double mean() const;
    double sample_std() const;  // n-1 denominator
};

struct RunReport {
    std::string setup;
    std::vector<std::uint64_t> seeds;
    std::string config_hash;
    std::string code_version;

    std::vector<MetricValues> metrics;         // deterministic
    std::vector<MetricValues> timing_metrics;  // measured, non-deterministic

    // trace name (metric/method/seed) -> per-epoch values
    std::map<std::string, std::vector<double>> traces;

    const MetricValues& metric(const std::string& name) const;
    const MetricValues& timing_metric(const std::string& name) const;
    void add_metric(const std::string& name, std::vector<double> per_seed);
    void add_timing_metric(const std::string& name, std::vector<double> per_seed);
};

// Writes report.csv, report.md, trace.tsv and (when timing metrics exist)
// timing.csv under out_dir. Creates the directory if needed.
void emit_report(const RunReport& report, const std::string& out_dir);

// Reads back the per-seed rows of a report.csv written by emit_report.
std::vector<MetricValues> load_report_csv(const std::string& path);

// Canonical double formatting used by all report writers (round-trippable).
std::string format_double(double v);

// Binary PGM (P5) contact sheet: rows of `images` (N x tile_h*tile_w, values
// clamped to [0,1]) tiled `cols` per row.
void write_pgm_sheet(const std::string& path, const Grid& images, std::size_t tile_h,
                     std::size_t tile_w, std::size_t cols);

}  // namespace refinery
