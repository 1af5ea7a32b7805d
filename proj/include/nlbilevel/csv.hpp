#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <variant>
#include <vector>

#include "nlbilevel/error.hpp"
#include "nlbilevel/optimizer.hpp"

namespace nlbilevel {

/// Shortest round-trip-safe text for a double: 17 significant digits.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Minimal CSV writer: header row, ',' separator, '.' decimal point.
class CsvWriter {
public:
    using Field = std::variant<double, long long, std::string>;

    CsvWriter(const std::filesystem::path& path, std::initializer_list<std::string> header)
        : out_(path) {
        if (!out_) {
            throw IoError("cannot open " + path.string() + " for writing");
        }
        write_fields(std::vector<Field>(header.begin(), header.end()));
    }

    void row(const std::vector<Field>& fields) { write_fields(fields); }

private:
    void write_fields(const std::vector<Field>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out_ << ',';
            if (const auto* d = std::get_if<double>(&fields[i])) {
                out_ << format_double(*d);
            } else if (const auto* n = std::get_if<long long>(&fields[i])) {
                out_ << *n;
            } else {
                out_ << std::get<std::string>(fields[i]);
            }
        }
        out_ << '\n';
        if (!out_) {
            throw IoError("write failed");
        }
    }

    std::ofstream out_;
};

inline void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceEntry>& trace) {
    CsvWriter w(path, {"iter", "j", "projected_gradient", "radius", "step", "seconds"});
    for (const auto& e : trace) {
        w.row({static_cast<long long>(e.iteration), e.objective, e.projected_gradient, e.radius,
               std::string(to_string(e.step)), e.seconds});
    }
}

}  // namespace nlbilevel
