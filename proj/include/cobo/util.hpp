// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cobo {

/// Empirical q-quantile by linear interpolation of order statistics:
/// position p = q * (n - 1) between the sorted values.
inline double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("quantile: empty input");
    std::sort(values.begin(), values.end());
    if (values.size() == 1) return values[0];
    const double p = q * static_cast<double>(values.size() - 1);
    const double lo = std::floor(p);
    const auto i = static_cast<std::size_t>(std::clamp(lo, 0.0, double(values.size() - 1)));
    if (i + 1 >= values.size()) return values.back();
    const double frac = p - lo;
    return values[i] * (1.0 - frac) + values[i + 1] * frac;
}

/// Shortest round-trip decimal rendering, locale independent.
inline std::string fmt_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

/// CSV writer with RFC-style quoting, '.' decimal separator and '\n' line
/// endings. Rows are flushed as they are written so interrupted runs leave
/// partial but valid files.
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path) {
        if (!out_) throw std::runtime_error("cannot open for writing: " + path);
        columns_ = header.size();
        write_row_strings(header);
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != columns_)
            throw std::logic_error("CsvWriter: expected " + std::to_string(columns_) +
                                   " cells, got " + std::to_string(cells.size()));
        write_row_strings(cells);
    }

    static std::string cell(double v) { return fmt_double(v); }
    static std::string cell(std::size_t v) { return std::to_string(v); }
    static std::string cell(int v) { return std::to_string(v); }

private:
    void write_row_strings(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << quote(cells[i]);
        }
        out_ << '\n';
        out_.flush();
    }

    static std::string quote(const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char c : s) {
            if (c == '"') q += '"';
            q += c;
        }
        return q + "\"";
    }

    std::ofstream out_;
    std::size_t columns_ = 0;
};

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

/// Process-wide log level, set once at startup from COBO_LOG_LEVEL.
LogLevel log_level();
void set_log_level(LogLevel lv);
void log_line(LogLevel lv, const std::string& msg);

inline void log_error(const std::string& msg) { log_line(LogLevel::kError, msg); }
inline void log_info(const std::string& msg) { log_line(LogLevel::kInfo, msg); }
inline void log_debug(const std::string& msg) { log_line(LogLevel::kDebug, msg); }

}  // namespace cobo
