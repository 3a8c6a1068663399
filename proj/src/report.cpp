#include "refinery/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "refinery/error.hpp"

namespace refinery {

double MetricValues::mean() const {
    if (per_seed.empty()) throw input_error("MetricValues::mean: no values");
    double acc = 0.0;
    for (double v : per_seed) acc += v;
    return acc / static_cast<double>(per_seed.size());
}

double MetricValues::sample_std() const {
    if (per_seed.size() < 2) return 0.0;
    const double mu = mean();
    double acc = 0.0;
    for (double v : per_seed) acc += (v - mu) * (v - mu);
    return std::sqrt(acc / static_cast<double>(per_seed.size() - 1));
}

const MetricValues& RunReport::metric(const std::string& name) const {
    for (const auto& m : metrics) {
        if (m.name == name) return m;
    }
    throw input_error("RunReport: unknown metric " + name);
}

const MetricValues& RunReport::timing_metric(const std::string& name) const {
    for (const auto& m : timing_metrics) {
        if (m.name == name) return m;
    }
    throw input_error("RunReport: unknown timing metric " + name);
}

void RunReport::add_metric(const std::string& name, std::vector<double> per_seed) {
    metrics.push_back({name, std::move(per_seed)});
}

void RunReport::add_timing_metric(const std::string& name, std::vector<double> per_seed) {
    timing_metrics.push_back({name, std::move(per_seed)});
}

std::string format_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    // %.17g round-trips doubles exactly and formats deterministically.
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

namespace {

double parse_double(const std::string& s) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    return std::stod(s);
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path + " for writing");
    f << text;
    if (!f) throw io_error("write failure on " + path);
}

std::string provenance_block(const RunReport& r) {
    std::ostringstream os;
    os << "# setup=" << r.setup << "\n";
    os << "# config_hash=" << r.config_hash << "\n";
    os << "# seeds=";
    for (std::size_t i = 0; i < r.seeds.size(); ++i) {
        if (i) os << ",";
        os << r.seeds[i];
    }
    os << "\n# version=" << r.code_version << "\n";
    return os.str();
}

std::string metrics_csv(const RunReport& r, const std::vector<MetricValues>& metrics) {
    std::ostringstream os;
    os << provenance_block(r);
    os << "metric,seed,value\n";
    for (const auto& m : metrics) {
        for (std::size_t i = 0; i < m.per_seed.size(); ++i) {
            os << m.name << "," << r.seeds[i] << "," << format_double(m.per_seed[i]) << "\n";
        }
    }
    return os.str();
}

std::string fmt3(double v) {
    if (std::isinf(v)) return "inf";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

}  // namespace

void emit_report(const RunReport& report, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);

    write_text_file(out_dir + "/report.csv", metrics_csv(report, report.metrics));
    if (!report.timing_metrics.empty()) {
        write_text_file(out_dir + "/timing.csv", metrics_csv(report, report.timing_metrics));
    }

    // Markdown summary in the same row/column spirit as the paper tables.
    std::ostringstream md;
    md << "# Setup " << report.setup << "\n\n";
    md << "config hash `" << report.config_hash << "`, seeds ";
    for (std::size_t i = 0; i < report.seeds.size(); ++i) {
        if (i) md << ",";
        md << report.seeds[i];
    }
    md << ", " << report.code_version << "\n\n";
    md << "| Metric | Mean ± std |\n|---|---|\n";
    for (const auto& m : report.metrics) {
        md << "| " << m.name << " | " << fmt3(m.mean()) << " ± " << fmt3(m.sample_std())
           << " |\n";
    }
    if (!report.timing_metrics.empty()) {
        md << "\n| Timing (measured) | Mean ± std |\n|---|---|\n";
        for (const auto& m : report.timing_metrics) {
            md << "| " << m.name << " | " << fmt3(m.mean()) << " ± " << fmt3(m.sample_std())
               << " |\n";
        }
    }
    write_text_file(out_dir + "/report.md", md.str());

    std::ostringstream tsv;
    tsv << "trace\tepoch\tvalue\n";
    for (const auto& [name, values] : report.traces) {
        for (std::size_t e = 0; e < values.size(); ++e) {
            tsv << name << "\t" << (e + 1) << "\t" << format_double(values[e]) << "\n";
        }
    }
    write_text_file(out_dir + "/trace.tsv", tsv.str());
}

void write_pgm_sheet(const std::string& path, const Grid& images, std::size_t tile_h,
                     std::size_t tile_w, std::size_t cols) {
    if (images.rank() != 2 || images.dim(1) != tile_h * tile_w) {
        throw dim_error("write_pgm_sheet: rows must hold tile_h*tile_w pixels");
    }
    const std::size_t n = images.dim(0);
    const std::size_t rows = (n + cols - 1) / cols;
    const std::size_t sheet_h = rows * tile_h, sheet_w = cols * tile_w;
    std::vector<std::uint8_t> pixels(sheet_h * sheet_w, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ty = (i / cols) * tile_h;
        const std::size_t tx = (i % cols) * tile_w;
        for (std::size_t y = 0; y < tile_h; ++y) {
            for (std::size_t x = 0; x < tile_w; ++x) {
                const double v = std::clamp(images[i * tile_h * tile_w + y * tile_w + x], 0.0, 1.0);
                pixels[(ty + y) * sheet_w + tx + x] = static_cast<std::uint8_t>(v * 255.0 + 0.5);
            }
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path + " for writing");
    f << "P5\n" << sheet_w << " " << sheet_h << "\n255\n";
    f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<long>(pixels.size()));
    if (!f) throw io_error("write failure on " + path);
}

std::vector<MetricValues> load_report_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open " + path);
    std::vector<MetricValues> metrics;
    std::string line;
    bool saw_header = false;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!saw_header) {
            if (line != "metric,seed,value") {
                throw parse_error(path + ": unexpected CSV header '" + line + "'");
            }
            saw_header = true;
            continue;
        }
        const std::size_t c1 = line.find(',');
        const std::size_t c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) {
            throw parse_error(path + ": malformed row '" + line + "'");
        }
        const std::string name = line.substr(0, c1);
        const double value = parse_double(line.substr(c2 + 1));
        if (metrics.empty() || metrics.back().name != name) {
            metrics.push_back({name, {}});
        }
        metrics.back().per_seed.push_back(value);
    }
    return metrics;
}

}  // namespace refinery
