#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spi/core.hpp"

namespace spi::harness {

/// printf-style %.{sig}g; "nan"/"inf" spelled out so CSV stays parseable.
inline std::string num(double v, int sig = 9)
{
    if (std::isnan(v))
        return "nan";
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", sig, v);
    return buf;
}

/// Value rounded to `sig` significant digits (for JSON reports).
inline double rounded(double v, int sig)
{
    if (!std::isfinite(v))
        return v;
    return std::strtod(num(v, sig).c_str(), nullptr);
}

/// Round-trip precision.
inline std::string exact(double v) { return num(v, 17); }

struct OutputFile
{
    std::string name;
    std::string content;
};

struct CommandOutput
{
    int exit_code = 0;
    std::vector<OutputFile> files;
    /// Human-readable summary for stdout.
    std::string summary;
};

inline void write_outputs(const CommandOutput& out, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    for (const auto& f : out.files) {
        std::ofstream os(dir / f.name, std::ios::binary);
        if (!os)
            throw Error("cannot write " + (dir / f.name).string());
        os << f.content;
    }
}

inline std::vector<std::string> split(const std::string& line, char sep = ',')
{
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, sep))
        out.push_back(cell);
    if (!line.empty() && line.back() == sep)
        out.emplace_back();
    return out;
}

/// Header plus rows of a small CSV file.
struct Table
{
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const
    {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name)
                return i;
        throw InvalidArgument("csv: missing column '" + name + "'");
    }
};

inline Table read_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw InvalidArgument("cannot open " + path.string());
    Table t;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty() || line[0] == '#')
            continue;
        if (first) {
            t.header = split(line);
            first = false;
        } else {
            t.rows.push_back(split(line));
            if (t.rows.back().size() != t.header.size())
                throw InvalidArgument(path.string() + ": row " + std::to_string(t.rows.size())
                                      + " has the wrong number of fields");
        }
    }
    if (first)
        throw InvalidArgument(path.string() + ": empty file");
    return t;
}

inline double to_double(const std::string& s)
{
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw InvalidArgument("csv: not a number: '" + s + "'");
    }
    if (pos != s.size())
        throw InvalidArgument("csv: not a number: '" + s + "'");
    return v;
}

} // namespace spi::harness
