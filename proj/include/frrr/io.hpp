#pragma once

// Plain-text matrices, the binary chain format and dataset directories.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "frrr/errors.hpp"
#include "frrr/model.hpp"
#include "frrr/posterior.hpp"
#include "frrr/types.hpp"

namespace frrr::io {

/// Shortest-safe decimal for CSV output: 17 significant digits, so every
/// double round-trips exactly.
inline std::string num(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

class io_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::ofstream open_out(const std::filesystem::path& path, bool binary = false) {
    std::ofstream os(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!os) throw io_error("cannot open " + path.string() + " for writing");
    return os;
}

inline std::ifstream open_in(const std::filesystem::path& path, bool binary = false) {
    std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
    if (!is) throw io_error("cannot open " + path.string());
    return is;
}

/// Headerless comma-separated rows.
inline void write_matrix_csv(const std::filesystem::path& path, const Matrix& m) {
    auto os = open_out(path);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j) os << ',';
            os << num(m(i, j));
        }
        os << '\n';
    }
    if (!os) throw io_error("write failed: " + path.string());
}

inline Matrix read_matrix_csv(const std::filesystem::path& path) {
    auto is = open_in(path);
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t width = 0;
    long lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (end == cell.c_str() || *end != '\0') {
                throw data_error(path.string() + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
            }
            row.push_back(v);
        }
        if (width == 0) width = row.size();
        if (row.size() != width) throw data_error(path.string() + ":" + std::to_string(lineno) + ": ragged row");
        rows.push_back(std::move(row));
    }
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < width; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    return m;
}

// --- chain files ------------------------------------------------------------------
//
// Layout, all little-endian:
//   "FRRRCHN1"                                   8 bytes
//   p, q, samples, n_steps, burn_in, thin        int32 each
//   alpha, step_size, acceptance_rate            float64 each
//   seed, dataset_digest                         uint64 each
//   samples x (p*q) float64, each matrix row-major
// The sidecar CSV holds step,log_post,accepted per retained sample.

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
    static_assert(std::is_arithmetic_v<T>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    unsigned char b[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw data_error("chain file truncated");
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
}

inline std::int32_t narrow32(long v, const char* what) {
    if (v < 0 || v > INT32_MAX) throw invalid_parameter(std::string("chain file: ") + what + " out of int32 range");
    return static_cast<std::int32_t>(v);
}

}  // namespace detail

inline constexpr char kChainMagic[8] = {'F', 'R', 'R', 'R', 'C', 'H', 'N', '1'};

inline void write_chain(const std::filesystem::path& path, const Chain& chain, Eigen::Index p, Eigen::Index q) {
    auto os = open_out(path, true);
    os.write(kChainMagic, 8);
    detail::put<std::int32_t>(os, detail::narrow32(p, "p"));
    detail::put<std::int32_t>(os, detail::narrow32(q, "q"));
    detail::put<std::int32_t>(os, detail::narrow32(static_cast<long>(chain.size()), "samples"));
    detail::put<std::int32_t>(os, detail::narrow32(chain.config.n_steps, "n_steps"));
    detail::put<std::int32_t>(os, detail::narrow32(chain.config.burn_in, "burn_in"));
    detail::put<std::int32_t>(os, detail::narrow32(chain.config.thin, "thin"));
    detail::put<double>(os, chain.config.alpha);
    detail::put<double>(os, chain.step_size);
    detail::put<double>(os, chain.acceptance_rate);
    detail::put<std::uint64_t>(os, chain.config.seed);
    detail::put<std::uint64_t>(os, chain.dataset_digest);
    for (const auto& s : chain.samples) {
        if (s.rows() != p || s.cols() != q) throw shape_error("write_chain: sample shape differs from p x q");
        for (Eigen::Index i = 0; i < p; ++i) {
            for (Eigen::Index j = 0; j < q; ++j) detail::put<double>(os, s(i, j));
        }
    }
    if (!os) throw io_error("write failed: " + path.string());
}

inline void write_chain_trace(const std::filesystem::path& path, const Chain& chain) {
    auto os = open_out(path);
    os << "step,log_post,accepted\n";
    for (std::size_t k = 0; k < chain.size(); ++k) {
        os << chain.steps[k] << ',' << num(chain.log_post[k]) << ',' << (chain.accepted[k] ? 1 : 0) << '\n';
    }
    if (!os) throw io_error("write failed: " + path.string());
}

/// Reads a chain file; log_post/accepted/steps come from the sidecar when it
/// exists and are left empty otherwise.
inline Chain read_chain(const std::filesystem::path& path, const std::filesystem::path& trace = {}) {
    auto is = open_in(path, true);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kChainMagic, 8) != 0) {
        throw data_error(path.string() + ": not a chain file (bad magic)");
    }
    const auto p = detail::get<std::int32_t>(is);
    const auto q = detail::get<std::int32_t>(is);
    const auto count = detail::get<std::int32_t>(is);
    Chain c;
    c.config.n_steps = detail::get<std::int32_t>(is);
    c.config.burn_in = detail::get<std::int32_t>(is);
    c.config.thin = detail::get<std::int32_t>(is);
    c.config.alpha = detail::get<double>(is);
    c.step_size = detail::get<double>(is);
    c.acceptance_rate = detail::get<double>(is);
    c.config.seed = detail::get<std::uint64_t>(is);
    c.dataset_digest = detail::get<std::uint64_t>(is);
    if (p < 1 || q < 1 || count < 0) throw data_error(path.string() + ": bad chain header");
    c.samples.reserve(static_cast<std::size_t>(count));
    for (std::int32_t k = 0; k < count; ++k) {
        Matrix m(p, q);
        for (int i = 0; i < p; ++i) {
            for (int j = 0; j < q; ++j) m(i, j) = detail::get<double>(is);
        }
        c.samples.push_back(std::move(m));
    }
    if (!trace.empty() && std::filesystem::exists(trace)) {
        auto ts = open_in(trace);
        std::string line;
        std::getline(ts, line);
        while (std::getline(ts, line)) {
            if (line.empty()) continue;
            long step = 0;
            double lp = 0;
            int acc = 0;
            if (std::sscanf(line.c_str(), "%ld,%lf,%d", &step, &lp, &acc) != 3) {
                throw data_error(trace.string() + ": malformed row '" + line + "'");
            }
            c.steps.push_back(step);
            c.log_post.push_back(lp);
            c.accepted.push_back(acc != 0);
        }
        if (c.steps.size() != c.samples.size()) throw data_error(trace.string() + ": length differs from the chain");
    }
    return c;
}

}  // namespace frrr::io
