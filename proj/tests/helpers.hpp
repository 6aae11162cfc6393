// Shared scaffolding for the test suites: small statistics helpers, custom
// spec builders, and scratch-directory management for CLI round trips.
#pragma once

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "statewise/model.hpp"

namespace testutil {

inline double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
    double tv = 0.0;
    for (size_t i = 0; i < a.size(); ++i) tv += std::abs(a[i] - b[i]);
    return 0.5 * tv;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; ++i) { ma += a[i]; mb += b[i]; }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (size_t i = 0; i < n; ++i) {
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
        sab += (a[i] - ma) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// Standard error of the mean.
inline double sem_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / (static_cast<double>(v.size()) - 1.0) /
                     static_cast<double>(v.size()));
}

// Single queue with an explicit per-state arrival-rate table.
inline statewise::SystemSpec admission_with_rates(std::vector<double> rates, double mu,
                                                  int cap) {
    statewise::SystemSpec s = statewise::spec_mm1_admission(1.0, mu, cap);
    rates.resize(static_cast<size_t>(cap + 1), 0.0);
    rates[static_cast<size_t>(cap)] = 0.0;
    s.arrival_rates = std::move(rates);
    return s;
}

// Fresh scratch directory; removed when the object dies.
class ScratchDir {
  public:
    explicit ScratchDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("statewise_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~ScratchDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

  private:
    std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Rows of a CSV emitted by the library: one fingerprint comment, one header,
// then data rows split on commas.
struct CsvFile {
    std::string comment;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline CsvFile read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open csv " + path);
    CsvFile f;
    std::string line;
    auto split = [](const std::string& s) {
        std::vector<std::string> cells;
        std::stringstream ss(s);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        return cells;
    };
    bool have_header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            f.comment = line;
            continue;
        }
        if (!have_header) {
            f.header = split(line);
            have_header = true;
            continue;
        }
        f.rows.push_back(split(line));
    }
    return f;
}

// name -> value lookup for two-column fixture files.
inline double fixture_value(const CsvFile& f, const std::string& name) {
    for (const auto& row : f.rows)
        if (row.size() == 2 && row[0] == name) return std::stod(row[1]);
    throw std::runtime_error("fixture row not found: " + name);
}

}  // namespace testutil
