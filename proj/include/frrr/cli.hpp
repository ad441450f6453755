#pragma once

// Command-line layer: INI configs with a fixed schema per subcommand, the
// subcommand drivers, output manifests and exit-code mapping. Argument
// parsing lives in tools/frrr.cpp.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <boost/version.hpp>
#include <nlohmann/json.hpp>

#include "frrr/divergence.hpp"
#include "frrr/errors.hpp"
#include "frrr/experiments.hpp"
#include "frrr/io.hpp"
#include "frrr/model.hpp"
#include "frrr/posterior.hpp"
#include "frrr/prior.hpp"
#include "frrr/simulate.hpp"

namespace frrr::cli {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;
using json = nlohmann::json;

enum ExitCode : int { ok = 0, other = 1, config = 2, data = 3, numerical = 4 };

// --- schema -----------------------------------------------------------------------

enum class Kind { integer, real, boolean, text, path, choice, int_list, real_list, real_or_auto };

struct Key {
    std::string section;
    std::string name;
    Kind kind;
    std::string def;
    std::vector<std::string> choices = {};

    std::string full() const { return section + "." + name; }
};

using Schema = std::vector<Key>;

inline const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> s{"generate",      "fit",        "summarize", "divergence",
                                            "verify-bounds", "rate-study", "misspec"};
    return s;
}

namespace detail {

inline std::vector<std::string> family_names() {
    std::vector<std::string> v;
    for (FamilyId id : kAllFamilies) v.emplace_back(to_string(id));
    return v;
}

inline void add_family(Schema& s, const std::string& section, const std::string& name, const std::string& lo = "auto",
                       const std::string& hi = "auto") {
    s.push_back({section, "name", Kind::choice, name, family_names()});
    s.push_back({section, "dispersion", Kind::real_or_auto, "auto"});
    s.push_back({section, "shape", Kind::real_or_auto, "auto"});
    s.push_back({section, "theta_lo", Kind::real_or_auto, lo});
    s.push_back({section, "theta_hi", Kind::real_or_auto, hi});
    s.push_back({section, "clip_margin", Kind::real, "0.001"});
}

inline void add_run(Schema& s, const std::string& seed) {
    s.push_back({"run", "seed", Kind::integer, seed});
    s.push_back({"run", "output_dir", Kind::path, "out"});
    s.push_back({"run", "threads", Kind::integer, "0"});
}

inline void add_sampling(Schema& s, const std::string& section, bool with_init) {
    s.push_back({section, "alpha", Kind::real, "0.5"});
    s.push_back({section, "n_steps", Kind::integer, "20000"});
    s.push_back({section, "burn_in", Kind::integer, "4000"});
    s.push_back({section, "thin", Kind::integer, "10"});
    s.push_back({section, "precondition", Kind::boolean, "true"});
    if (with_init) {
        s.push_back({section, "algorithm", Kind::choice, "mala", {"mala", "ula"}});
        s.push_back({section, "step_size", Kind::real, "0"});
        s.push_back({section, "tune", Kind::boolean, "true"});
        s.push_back({section, "init", Kind::choice, "mode", {"zero", "mode"}});
    }
}

}  // namespace detail

inline Schema schema_for(const std::string& sub) {
    Schema s;
    const std::vector<std::string> presets{"theorem1", "theorem3", "misspecified", "manual"};
    const std::vector<std::string> designs{"iid_normal", "column_normalized"};
    if (sub == "generate") {
        detail::add_family(s, "family", "gaussian");
        s.push_back({"design", "n", Kind::integer, "200"});
        s.push_back({"design", "p", Kind::integer, "4"});
        s.push_back({"design", "mode", Kind::choice, "iid_normal", designs});
        s.push_back({"truth", "q", Kind::integer, "3"});
        s.push_back({"truth", "rank", Kind::integer, "2"});
        s.push_back({"truth", "calibrate", Kind::boolean, "true"});
        s.push_back({"truth", "eta_bound", Kind::real, "3"});
        s.push_back({"truth", "coverage", Kind::real, "0.99"});
        s.push_back({"truth", "scale", Kind::real, "1"});
        detail::add_run(s, "1");
    } else if (sub == "fit") {
        s.push_back({"data", "dir", Kind::path, "data"});
        s.push_back({"data", "family_source", Kind::choice, "meta", {"meta", "config"}});
        detail::add_family(s, "family", "gaussian");
        s.push_back({"prior", "tau_preset", Kind::choice, "theorem1", presets});
        s.push_back({"prior", "tau", Kind::real, "1"});
        detail::add_sampling(s, "sampler", true);
        s.push_back({"summary", "rank_threshold", Kind::real, "0.001"});
        detail::add_run(s, "1");
    } else if (sub == "summarize") {
        s.push_back({"input", "chain", Kind::path, "chain.bin"});
        s.push_back({"input", "trace", Kind::path, "chain_trace.csv"});
        s.push_back({"summary", "rank_threshold", Kind::real, "0.001"});
        detail::add_run(s, "1");
    } else if (sub == "divergence") {
        detail::add_family(s, "family", "gaussian");
        s.push_back({"input", "theta", Kind::path, "theta.csv"});
        s.push_back({"input", "zeta", Kind::path, "zeta.csv"});
        s.push_back({"divergence", "alphas", Kind::real_list, "0.25,0.5,0.75"});
        detail::add_run(s, "1");
    } else if (sub == "verify-bounds") {
        detail::add_family(s, "family", "gaussian");
        s.push_back({"verify", "trials", Kind::integer, "10000"});
        s.push_back({"verify", "alphas", Kind::real_list, "0.25,0.5,0.75"});
        s.push_back({"verify", "max_rows", Kind::integer, "4"});
        s.push_back({"verify", "max_cols", Kind::integer, "3"});
        s.push_back({"verify", "write_rows", Kind::boolean, "true"});
        detail::add_run(s, "1");
    } else if (sub == "rate-study") {
        detail::add_family(s, "family", "gaussian");
        s.push_back({"study", "n_grid", Kind::int_list, "100,200,400,800,1600"});
        s.push_back({"study", "p", Kind::integer, "8"});
        s.push_back({"study", "q", Kind::integer, "6"});
        s.push_back({"study", "ranks", Kind::int_list, "2"});
        s.push_back({"study", "rank_sweep_n", Kind::integer, "0"});
        s.push_back({"study", "replications", Kind::integer, "20"});
        s.push_back({"study", "tau_preset", Kind::choice, "theorem1", {"theorem1", "theorem3", "misspecified"}});
        s.push_back({"study", "design", Kind::choice, "iid_normal", designs});
        s.push_back({"study", "eta_bound", Kind::real, "3"});
        s.push_back({"study", "coverage", Kind::real, "0.99"});
        s.push_back({"study", "divergence_samples", Kind::integer, "200"});
        detail::add_sampling(s, "sampler", false);
        detail::add_run(s, "2024");
    } else if (sub == "misspec") {
        detail::add_family(s, "true_family", "bernoulli_probit");
        detail::add_family(s, "fitted_family", "bernoulli_logit", "-6", "6");
        s.push_back({"study", "n_grid", Kind::int_list, "100,400,1600"});
        s.push_back({"study", "p", Kind::integer, "6"});
        s.push_back({"study", "q", Kind::integer, "4"});
        s.push_back({"study", "rank", Kind::integer, "2"});
        s.push_back({"study", "replications", Kind::integer, "10"});
        s.push_back({"study", "design", Kind::choice, "iid_normal", designs});
        s.push_back({"study", "eta_bound", Kind::real, "2"});
        s.push_back({"study", "coverage", Kind::real, "0.99"});
        s.push_back({"study", "divergence_samples", Kind::integer, "200"});
        s.push_back({"study", "restarts", Kind::integer, "10"});
        detail::add_sampling(s, "sampler", false);
        detail::add_run(s, "4242");
    } else {
        throw config_error("unknown subcommand '" + sub + "'");
    }
    return s;
}

// --- values -------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

inline long parse_long(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    long out = 0;
    try {
        out = std::stol(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (v.empty() || pos != v.size()) throw config_error(key + ": expected an integer, got '" + v + "'");
    return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || std::isnan(out)) {
        throw config_error(key + ": expected a number, got '" + v + "'");
    }
    return out;
}

}  // namespace detail

namespace detail {

/// Shortest decimal that parses back to the same double.
inline std::string shortest(double v) {
    if (!std::isfinite(v)) return io::num(v);
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::string csv_text(std::string s) {
    std::replace(s.begin(), s.end(), '"', '\'');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return "\"" + s + "\"";
}

}  // namespace detail

/// Canonical text of a value: parsing it again gives the same text.
inline std::string canonical_value(const Key& k, const std::string& raw) {
    const std::string v = detail::trim(raw);
    const std::string key = k.full();
    switch (k.kind) {
        case Kind::integer: return std::to_string(detail::parse_long(key, v));
        case Kind::real: return detail::shortest(detail::parse_double(key, v));
        case Kind::real_or_auto: return v == "auto" ? v : detail::shortest(detail::parse_double(key, v));
        case Kind::boolean:
            if (v == "true" || v == "1" || v == "yes" || v == "on") return "true";
            if (v == "false" || v == "0" || v == "no" || v == "off") return "false";
            throw config_error(key + ": expected true/false, got '" + v + "'");
        case Kind::text:
        case Kind::path:
            if (v.find('\n') != std::string::npos) throw config_error(key + ": multi-line value");
            return v;
        case Kind::choice:
            if (std::find(k.choices.begin(), k.choices.end(), v) == k.choices.end()) {
                std::string all;
                for (const auto& c : k.choices) all += (all.empty() ? "" : "|") + c;
                throw config_error(key + ": '" + v + "' is not one of " + all);
            }
            return v;
        case Kind::int_list:
        case Kind::real_list: {
            std::string out;
            for (const auto& item : detail::split(v, ',')) {
                const std::string c = k.kind == Kind::int_list ? std::to_string(detail::parse_long(key, item))
                                                               : detail::shortest(detail::parse_double(key, item));
                out += (out.empty() ? "" : ",") + c;
            }
            if (out.empty()) throw config_error(key + ": empty list");
            return out;
        }
    }
    return v;
}

/// Fully materialized configuration of one subcommand.
class Config {
public:
    std::string subcommand;
    std::map<std::string, std::string> values;  // "section.key" -> canonical text
    fs::path base_dir;                          // relative paths resolve against this

    bool operator==(const Config& o) const { return subcommand == o.subcommand && values == o.values; }

    const std::string& raw(const std::string& key) const {
        const auto it = values.find(key);
        if (it == values.end()) throw config_error("missing config key " + key);
        return it->second;
    }
    long integer(const std::string& key) const { return detail::parse_long(key, raw(key)); }
    double real(const std::string& key) const { return detail::parse_double(key, raw(key)); }
    bool boolean(const std::string& key) const { return raw(key) == "true"; }
    const std::string& text(const std::string& key) const { return raw(key); }
    std::optional<double> real_or_auto(const std::string& key) const {
        if (raw(key) == "auto") return std::nullopt;
        return real(key);
    }
    fs::path path(const std::string& key) const {
        const fs::path p(raw(key));
        return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
    }
    std::vector<long> integers(const std::string& key) const {
        std::vector<long> out;
        for (const auto& s : detail::split(raw(key), ',')) out.push_back(detail::parse_long(key, s));
        return out;
    }
    std::vector<double> reals(const std::string& key) const {
        std::vector<double> out;
        for (const auto& s : detail::split(raw(key), ',')) out.push_back(detail::parse_double(key, s));
        return out;
    }
};

inline Config default_config(const std::string& sub) {
    Config c;
    c.subcommand = sub;
    for (const Key& k : schema_for(sub)) c.values[k.full()] = canonical_value(k, k.def);
    return c;
}

/// Applies one "section.key=value" assignment.
inline void apply_assignment(Config& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw config_error("expected section.key=value, got '" + assignment + "'");
    const std::string key = detail::trim(assignment.substr(0, eq));
    for (const Key& k : schema_for(c.subcommand)) {
        if (k.full() == key) {
            c.values[key] = canonical_value(k, assignment.substr(eq + 1));
            return;
        }
    }
    throw config_error("unknown config key '" + key + "' for " + c.subcommand);
}

/// Parses INI text. Every key must belong to the subcommand's schema; keys not
/// given keep their defaults.
inline Config parse_config(const std::string& sub, const std::string& text, const fs::path& base_dir = {}) {
    Config c = default_config(sub);
    c.base_dir = base_dir;
    boost::property_tree::ptree pt;
    std::istringstream is(text);
    try {
        boost::property_tree::read_ini(is, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw config_error(std::string("config: ") + e.what());
    }
    for (const auto& [section, body] : pt) {
        if (body.empty()) throw config_error("config: key '" + section + "' outside a section");
        for (const auto& [name, leaf] : body) {
            apply_assignment(c, section + "." + name + "=" + leaf.get_value<std::string>());
        }
    }
    return c;
}

inline Config load_config(const std::string& sub, const fs::path& file) {
    std::ifstream is(file);
    if (!is) throw config_error("cannot read config file " + file.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(sub, ss.str(), file.has_parent_path() ? file.parent_path() : fs::path("."));
}

/// INI text with sections and keys in schema order, optionally leaving some out.
inline std::string serialize(const Config& c, const std::vector<std::string>& omit = {}) {
    std::ostringstream os;
    std::string section;
    for (const Key& k : schema_for(c.subcommand)) {
        if (std::find(omit.begin(), omit.end(), k.full()) != omit.end()) continue;
        if (k.section != section) {
            if (!section.empty()) os << '\n';
            section = k.section;
            os << '[' << section << "]\n";
        }
        os << k.name << " = " << c.raw(k.full()) << '\n';
    }
    return os.str();
}

inline std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Keys that cannot change any output byte: where the output goes and how
/// many threads compute it.
inline const std::vector<std::string>& unhashed_keys() {
    static const std::vector<std::string> k{"run.output_dir", "run.threads"};
    return k;
}

inline std::string config_hash(const Config& c) {
    return hex64(fnv1a(c.subcommand + "\n" + serialize(c, unhashed_keys())));
}

// --- typed views -------------------------------------------------------------------

/// Family from a config block; "auto" keeps the FamilyOptions default, or the
/// bounded-Theta default from bounded_family when `bounded` is set.
inline FamilySpec family_from(const Config& c, const std::string& section, bool bounded = false) {
    const FamilyId id = family_from_string(c.text(section + ".name"));
    FamilyOptions o = bounded ? bounded_family(id).options() : FamilyOptions{};
    if (auto v = c.real_or_auto(section + ".dispersion")) o.dispersion = *v;
    if (auto v = c.real_or_auto(section + ".shape")) o.shape = *v;
    if (auto v = c.real_or_auto(section + ".theta_lo")) o.theta_lo = *v;
    if (auto v = c.real_or_auto(section + ".theta_hi")) o.theta_hi = *v;
    o.clip_margin = c.real(section + ".clip_margin");
    try {
        return FamilySpec(id, o);
    } catch (const invalid_parameter& e) {
        throw config_error("[" + section + "] " + e.what());
    }
}

inline void family_to_ini(std::ostream& os, const FamilySpec& f) {
    os << "[family]\n";
    os << "name = " << to_string(f.id()) << '\n';
    os << "dispersion = " << io::num(f.dispersion()) << '\n';
    os << "shape = " << io::num(f.shape()) << '\n';
    os << "theta_lo = " << io::num(f.options().theta_lo) << '\n';
    os << "theta_hi = " << io::num(f.options().theta_hi) << '\n';
    os << "clip_margin = " << io::num(f.clip_margin()) << '\n';
}

/// Family block of a dataset's meta.ini.
inline FamilySpec family_from_meta(const fs::path& meta) {
    boost::property_tree::ptree pt;
    try {
        boost::property_tree::read_ini(meta.string(), pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw data_error(std::string("dataset meta: ") + e.what());
    }
    Config c = default_config("generate");
    const auto fam = pt.get_child_optional("family");
    if (!fam) throw data_error(meta.string() + ": no [family] section");
    for (const auto& [name, leaf] : *fam) {
        try {
            apply_assignment(c, "family." + name + "=" + leaf.get_value<std::string>());
        } catch (const config_error& e) {
            throw data_error(meta.string() + ": " + e.what());
        }
    }
    return family_from(c, "family");
}

struct Versions {
    static json get() {
        json v;
        v["frrr"] = kVersion;
        v["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                     std::to_string(EIGEN_MINOR_VERSION);
        v["boost"] = BOOST_LIB_VERSION;
        v["nlohmann_json"] = std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                             std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                             std::to_string(NLOHMANN_JSON_VERSION_PATCH);
        v["chain_format"] = std::string(io::kChainMagic, 8);
        return v;
    }
};

// --- output directory -----------------------------------------------------------------

/// Tracks written files so the manifest can list them with content digests.
class OutputDir {
public:
    explicit OutputDir(fs::path dir) : dir_(std::move(dir)) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw io::io_error("cannot create " + dir_.string() + ": " + ec.message());
    }

    fs::path file(const std::string& name) {
        if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
        return dir_ / name;
    }

    void text(const std::string& name, const std::string& content) {
        auto os = io::open_out(file(name));
        os << content;
        if (!os) throw io::io_error("write failed: " + name);
    }

    void json_file(const std::string& name, const json& j) { text(name, j.dump(2) + "\n"); }

    void manifest(const Config& c, const json& extra = json::object()) {
        json m;
        m["subcommand"] = c.subcommand;
        m["config_hash"] = config_hash(c);
        m["seed"] = c.integer("run.seed");
        json cfg = json::object();
        for (const auto& [k, v] : c.values) {
            if (k != "run.output_dir") cfg[k] = v;
        }
        m["config"] = cfg;
        m["versions"] = Versions::get();
        json files = json::object();
        std::vector<std::string> names = files_;
        std::sort(names.begin(), names.end());
        for (const auto& n : names) {
            auto is = io::open_in(dir_ / n, true);
            std::stringstream ss;
            ss << is.rdbuf();
            files[n] = "fnv1a:" + hex64(fnv1a(ss.str()));
        }
        m["files"] = files;
        for (const auto& [k, v] : extra.items()) m[k] = v;
        auto os = io::open_out(dir_ / "manifest.json");
        os << m.dump(2) << '\n';
        if (!os) throw io::io_error("write failed: manifest.json");
    }

    const fs::path& dir() const { return dir_; }

private:
    fs::path dir_;
    std::vector<std::string> files_;
};

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json mean_se_json(const MeanSe& m) {
    return json{{"mean", finite_or_null(m.mean)}, {"se", finite_or_null(m.se)}, {"count", m.count}};
}

/// Two-column gnuplot data file.
inline std::string dat(const std::string& comment, const std::vector<std::pair<double, double>>& xy) {
    std::string s = "# " + comment + "\n";
    for (const auto& [x, y] : xy) s += io::num(x) + " " + io::num(y) + "\n";
    return s;
}

// --- subcommands -----------------------------------------------------------------------
//
// Each command validates everything it can before touching the output
// directory (config errors exit with 2 before any computation) and returns
// an exit code. Errors after that propagate as exceptions.

inline int cmd_generate(const Config& c, std::ostream& log) {
    const FamilySpec f = family_from(c, "family");
    const long n = c.integer("design.n");
    const long p = c.integer("design.p");
    const long q = c.integer("truth.q");
    const int rank = static_cast<int>(c.integer("truth.rank"));
    const DesignMode mode = design_mode_from_string(c.text("design.mode"));
    if (n < 1 || p < 1 || q < 1) throw config_error("generate: n, p, q must be positive");
    if (rank < 0 || rank > std::min(p, q)) throw config_error("generate: rank must lie in [0, min(p, q)]");
    const bool calibrate = c.boolean("truth.calibrate");
    const double eta_bound = c.real("truth.eta_bound");
    const double coverage = c.real("truth.coverage");
    if (calibrate && (!(eta_bound > 0) || !(coverage > 0 && coverage < 1))) {
        throw config_error("generate: need eta_bound > 0 and coverage in (0, 1)");
    }
    const std::uint64_t seed = static_cast<std::uint64_t>(c.integer("run.seed"));

    Rng design_rng = make_rng(seed, 1);
    Rng truth_rng = make_rng(seed, 2);
    Rng data_rng = make_rng(seed, 3);
    const Matrix X = make_design(n, p, mode, design_rng);
    SyntheticTruth truth = calibrate && rank > 0
                               ? make_calibrated_truth(X, q, rank, truth_rng, eta_bound, coverage)
                               : make_low_rank_truth(p, q, rank, c.real("truth.scale"), truth_rng);
    const Dataset d = generate_dataset(X, truth, f, data_rng);

    OutputDir out(c.path("run.output_dir"));
    io::write_matrix_csv(out.file("X.csv"), d.X);
    io::write_matrix_csv(out.file("Y.csv"), d.Y);
    io::write_matrix_csv(out.file("truth.csv"), truth.B0);
    std::ostringstream meta;
    family_to_ini(meta, f);
    meta << "\n[dataset]\n"
         << "n = " << n << "\np = " << p << "\nq = " << q << "\nrank = " << rank << "\nseed = " << seed
         << "\nscale = " << io::num(truth.scale) << "\ntheta_clip_events = " << truth.theta_clip_events
         << "\ndigest = " << hex64(dataset_digest(d)) << '\n';
    out.text("meta.ini", meta.str());
    out.manifest(c);
    log << "generate: wrote " << n << "x" << q << " " << to_string(f.id()) << " responses to " << out.dir().string()
        << '\n';
    return ExitCode::ok;
}

inline Dataset load_dataset(const fs::path& dir, const FamilySpec& f) {
    for (const char* name : {"X.csv", "Y.csv"}) {
        if (!fs::exists(dir / name)) throw data_error("dataset file missing: " + (dir / name).string());
    }
    Dataset d{io::read_matrix_csv(dir / "X.csv"), io::read_matrix_csv(dir / "Y.csv"), f};
    d.validate();
    return d;
}

inline json chain_summary_json(const Chain& chain, const Matrix& B_hat, double threshold) {
    json s;
    s["retained_samples"] = chain.size();
    s["acceptance_rate"] = chain.acceptance_rate;
    s["step_size"] = chain.step_size;
    s["alpha"] = chain.config.alpha;
    s["seed"] = chain.config.seed;
    s["dataset_digest"] = hex64(chain.dataset_digest);
    s["effective_rank"] = B_hat.isZero(0.0) ? 0 : effective_rank(B_hat, threshold);
    s["rank_threshold"] = threshold;
    s["bhat_frobenius"] = B_hat.norm();
    if (!chain.log_post.empty()) {
        s["log_post_last"] = chain.log_post.back();
        const double mean = std::accumulate(chain.log_post.begin(), chain.log_post.end(), 0.0) /
                            static_cast<double>(chain.log_post.size());
        s["log_post_mean"] = mean;
    }
    return s;
}

inline int cmd_fit(const Config& c, std::ostream& log) {
    const fs::path dir = c.path("data.dir");
    const double threshold = c.real("summary.rank_threshold");
    if (!(threshold > 0 && threshold < 1)) throw config_error("summary.rank_threshold must lie in (0, 1)");
    FractionalConfig fc;
    fc.alpha = c.real("sampler.alpha");
    fc.n_steps = c.integer("sampler.n_steps");
    fc.burn_in = c.integer("sampler.burn_in");
    fc.thin = c.integer("sampler.thin");
    fc.step_size = c.real("sampler.step_size");
    fc.tune = c.boolean("sampler.tune");
    fc.algorithm = algorithm_from_string(c.text("sampler.algorithm"));
    fc.seed = derive_seed(static_cast<std::uint64_t>(c.integer("run.seed")), 7);
    try {
        fc.validate();
    } catch (const invalid_parameter& e) {
        throw config_error(std::string("sampler: ") + e.what());
    }
    if ((fc.n_steps - fc.burn_in) / fc.thin < 1) throw config_error("sampler: no retained samples");
    const TauPreset preset = tau_preset_from_string(c.text("prior.tau_preset"));
    if (preset == TauPreset::manual && !(c.real("prior.tau") > 0)) throw config_error("prior.tau must be positive");
    const bool from_meta = c.text("data.family_source") == "meta";
    const FamilySpec f = from_meta ? family_from_meta(dir / "meta.ini") : family_from(c, "family");

    const Dataset d = load_dataset(dir, f);
    const PriorConfig prior = make_prior(preset, d.X, d.q(), f.dispersion(), c.real("prior.tau"));
    json start = json::object();
    const bool precondition = c.boolean("sampler.precondition");
    if (precondition || c.text("sampler.init") == "mode") {
        const PreconditionedStart st = preconditioned_start(d, prior, fc.alpha);
        fc.init = st.init;
        if (precondition) fc.preconditioner = st.preconditioner;
        start = json{{"mode_converged", st.mode.converged},
                     {"mode_iterations", st.mode.iterations},
                     {"mode_grad_norm", st.mode.grad_norm},
                     {"mode_log_post", st.mode.log_post}};
    }
    const Chain chain = run_sampler(d, prior, fc);
    if (chain.empty()) throw numerical_failure("fit: chain retained no samples");
    const Matrix B_hat = posterior_mean(chain);

    OutputDir out(c.path("run.output_dir"));
    io::write_chain(out.file("chain.bin"), chain, d.p(), d.q());
    io::write_chain_trace(out.file("chain_trace.csv"), chain);
    io::write_matrix_csv(out.file("bhat.csv"), B_hat);
    json s = chain_summary_json(chain, B_hat, threshold);
    s["family"] = std::string(to_string(f.id()));
    s["tau"] = prior.tau;
    s["tau_preset"] = std::string(to_string(prior.preset));
    s["precondition"] = precondition;
    s["start"] = start;
    s["n"] = d.n();
    s["p"] = d.p();
    s["q"] = d.q();
    out.json_file("fit_summary.json", s);
    out.manifest(c);
    log << "fit: " << chain.size() << " retained samples, acceptance " << chain.acceptance_rate << ", effective rank "
        << s["effective_rank"].get<int>() << '\n';
    return ExitCode::ok;
}

inline int cmd_summarize(const Config& c, std::ostream& log) {
    const double threshold = c.real("summary.rank_threshold");
    if (!(threshold > 0 && threshold < 1)) throw config_error("summary.rank_threshold must lie in (0, 1)");
    const fs::path chain_path = c.path("input.chain");
    if (!fs::exists(chain_path)) throw data_error("chain file missing: " + chain_path.string());
    const Chain chain = io::read_chain(chain_path, c.path("input.trace"));
    if (chain.empty()) throw data_error("summarize: chain has no samples");
    const Matrix B_hat = posterior_mean(chain);
    OutputDir out(c.path("run.output_dir"));
    io::write_matrix_csv(out.file("bhat.csv"), B_hat);
    out.json_file("summary.json", chain_summary_json(chain, B_hat, threshold));
    out.manifest(c);
    log << "summarize: " << chain.size() << " samples\n";
    return ExitCode::ok;
}

inline int cmd_divergence(const Config& c, std::ostream& log) {
    const FamilySpec f = family_from(c, "family");
    std::vector<double> alphas = c.reals("divergence.alphas");
    for (double a : alphas) {
        if (!(a > 0 && a < 1)) throw config_error("divergence.alphas must lie in (0, 1)");
    }
    for (const char* k : {"input.theta", "input.zeta"}) {
        if (!fs::exists(c.path(k))) throw data_error(std::string(k) + ": file missing: " + c.path(k).string());
    }
    const Matrix theta = io::read_matrix_csv(c.path("input.theta"));
    const Matrix zeta = io::read_matrix_csv(c.path("input.zeta"));
    DivergenceReport r;
    try {
        r = divergence_report(f, theta, zeta, alphas);
    } catch (const invalid_parameter& e) {
        throw data_error(e.what());
    }
    OutputDir out(c.path("run.output_dir"));
    {
        auto os = io::open_out(out.file("divergence.csv"));
        write_report_csv(os, r);
    }
    json j;
    j["cells"] = r.cells;
    j["kl_avg"] = r.kl_avg;
    j["kl_total"] = r.kl_total;
    json rn = json::array();
    for (std::size_t k = 0; k < r.alphas.size(); ++k) {
        rn.push_back({{"alpha", r.alphas[k]}, {"avg", r.renyi_avg[k]}, {"total", r.renyi_total[k]}});
    }
    j["renyi"] = rn;
    j["hellinger_sq"] = r.hellinger_sq;
    j["hellinger_sq_avg"] = r.hellinger_sq_avg;
    j["tv_lower"] = r.tv_lower;
    j["tv_upper"] = r.tv_upper;
    out.json_file("divergence.json", j);
    out.manifest(c);
    log << "divergence: " << r.cells << " entries, KL avg " << r.kl_avg << '\n';
    return ExitCode::ok;
}

inline int cmd_verify_bounds(const Config& c, std::ostream& log) {
    const FamilySpec f = family_from(c, "family", true);
    VerifyOptions opt;
    opt.alphas = c.reals("verify.alphas");
    opt.max_rows = static_cast<int>(c.integer("verify.max_rows"));
    opt.max_cols = static_cast<int>(c.integer("verify.max_cols"));
    opt.keep_rows = c.boolean("verify.write_rows");
    const long trials = c.integer("verify.trials");
    if (trials < 1 || opt.max_rows < 1 || opt.max_cols < 1) throw config_error("verify: counts must be positive");
    for (double a : opt.alphas) {
        if (!(a > 0 && a < 1)) throw config_error("verify.alphas must lie in (0, 1)");
    }
    const FamilyBounds fb = family_bounds(f);
    fb.require_c_upper();
    fb.require_c_lower();
    fb.require_u1();

    Rng rng = make_rng(static_cast<std::uint64_t>(c.integer("run.seed")), 11);
    const BoundReport rep = verify_divergence_bounds(f, trials, rng, opt);

    OutputDir out(c.path("run.output_dir"));
    if (opt.keep_rows) {
        auto os = io::open_out(out.file("bounds_rows.csv"));
        os << "trial,lemma,alpha,exact,bound,satisfied\n";
        for (const auto& b : rep.rows) {
            os << b.trial << ',' << b.lemma << ',' << (std::isnan(b.alpha) ? "" : io::num(b.alpha)) << ','
               << io::num(b.exact) << ',' << io::num(b.bound) << ',' << (b.satisfied ? 1 : 0) << '\n';
        }
    }
    json lemmas = json::array();
    {
        auto os = io::open_out(out.file("bounds_summary.csv"));
        os << "lemma,alpha,diagnostic,checks,violations,satisfied_fraction,min_ratio,max_ratio,worst_excess\n";
        for (const auto& s : rep.summary) {
            os << s.lemma << ',' << (std::isnan(s.alpha) ? "" : io::num(s.alpha)) << ',' << (s.diagnostic ? 1 : 0)
               << ',' << s.checks << ',' << s.violations << ',' << io::num(s.satisfied_fraction()) << ','
               << io::num(s.min_ratio) << ',' << io::num(s.max_ratio) << ',' << io::num(s.worst_excess) << '\n';
            lemmas.push_back({{"lemma", s.lemma},
                              {"alpha", finite_or_null(s.alpha)},
                              {"diagnostic", s.diagnostic},
                              {"checks", s.checks},
                              {"violations", s.violations},
                              {"satisfied_fraction", s.satisfied_fraction()},
                              {"min_ratio", finite_or_null(s.min_ratio)},
                              {"max_ratio", s.max_ratio}});
        }
    }
    json j;
    j["family"] = std::string(to_string(f.id()));
    j["theta_lo"] = rep.theta_lo;
    j["theta_hi"] = rep.theta_hi;
    j["c_upper"] = fb.c_upper;
    j["c_lower"] = fb.c_lower;
    j["u1"] = fb.u1;
    j["trials"] = rep.trials;
    j["rel_tol"] = rep.rel_tol;
    j["satisfied_fraction"] = rep.satisfied_fraction();
    j["stated_violations"] = rep.stated_violations();
    j["oracle_checks"] = rep.oracle_checks;
    j["oracle_max_abs_diff"] = rep.oracle_max_abs_diff;
    j["lemmas"] = lemmas;
    out.json_file("summary.json", j);
    out.manifest(c);
    log << "verify-bounds " << to_string(f.id()) << ": satisfied_fraction " << rep.satisfied_fraction() << " ("
        << rep.stated_violations() << " violations of the stated lemmas)\n";
    return ExitCode::ok;
}

inline RateStudyConfig rate_config_from(const Config& c) {
    RateStudyConfig r;
    const FamilySpec f = family_from(c, "family");
    r.family = f.id();
    r.family_options = f.options();
    r.n_grid = c.integers("study.n_grid");
    r.p = c.integer("study.p");
    r.q = c.integer("study.q");
    r.ranks.clear();
    for (long v : c.integers("study.ranks")) r.ranks.push_back(static_cast<int>(v));
    r.rank_sweep_n = c.integer("study.rank_sweep_n");
    r.replications = static_cast<int>(c.integer("study.replications"));
    r.tau_preset = tau_preset_from_string(c.text("study.tau_preset"));
    r.design = design_mode_from_string(c.text("study.design"));
    r.eta_bound = c.real("study.eta_bound");
    r.coverage = c.real("study.coverage");
    r.divergence_samples = static_cast<int>(c.integer("study.divergence_samples"));
    r.alpha = c.real("sampler.alpha");
    r.n_steps = c.integer("sampler.n_steps");
    r.burn_in = c.integer("sampler.burn_in");
    r.thin = c.integer("sampler.thin");
    r.precondition = c.boolean("sampler.precondition");
    r.seed = static_cast<std::uint64_t>(c.integer("run.seed"));
    r.threads = static_cast<int>(c.integer("run.threads"));
    try {
        r.validate();
        const FamilyBounds fb = family_bounds(f);
        fb.require_c_upper();
        fb.require_c_lower();
    } catch (const std::invalid_argument& e) {
        throw config_error(e.what());
    } catch (const std::domain_error& e) {
        throw config_error(e.what());
    }
    return r;
}

inline int cmd_rate_study(const Config& c, std::ostream& log) {
    const RateStudyConfig rc = rate_config_from(c);
    const RateStudyResult res = run_rate_study(rc);
    const auto hel = hellinger_consistency_check(res);

    OutputDir out(c.path("run.output_dir"));
    {
        auto os = io::open_out(out.file("reps.csv"));
        os << "n,rank,rep,seed,ok,pred_err_hat,est_err_hat,pred_err_post,est_err_post,renyi_post,hellinger_post,"
              "tv2_upper_post,acceptance,step_size,effective_rank,theta_clip_events,error\n";
        for (const auto& r : res.reps) {
            os << r.n << ',' << r.rank << ',' << r.rep << ',' << r.seed << ',' << (r.ok ? 1 : 0) << ','
               << io::num(r.pred_err_hat) << ',' << io::num(r.est_err_hat) << ',' << io::num(r.pred_err_post) << ','
               << io::num(r.est_err_post) << ',' << io::num(r.renyi_post) << ',' << io::num(r.hellinger_post) << ','
               << io::num(r.tv2_upper_post) << ',' << io::num(r.acceptance) << ',' << io::num(r.step_size) << ','
               << r.effective_rank << ',' << r.theta_clip_events << ',' << detail::csv_text(r.error) << '\n';
        }
    }
    bool partial = false;
    json cells = json::array();
    {
        auto os = io::open_out(out.file("cells.csv"));
        os << "status,n,p,q,rank,alpha,replications,failed,tau,kappa,x_frob,b0_frob,eps1,eps3,eps_prime,"
              "pred_err_hat_mean,pred_err_hat_se,pred_err_post_mean,pred_err_post_se,est_err_hat_mean,"
              "est_err_post_mean,renyi_post_mean,renyi_post_se,acceptance_mean,thm1_bound,prop1_bound,thm3_bound,"
              "prop2_bound,cor4_bound,prob_floor,thm3_vacuous,thm1_satisfied,prop1_satisfied,bound_satisfied,"
              "prop1_near_miss,thm3_frequency,thm3_satisfied,prop2_frequency,prop2_satisfied,cor4_frequency,"
              "cor4_satisfied\n";
        for (const auto& x : res.cells) {
            partial = partial || x.aborted;
            os << (x.aborted ? "aborted" : "ok") << ',' << x.n << ',' << x.p << ',' << x.q << ',' << x.rank << ','
               << io::num(x.alpha) << ',' << x.replications << ',' << x.failed << ',' << io::num(x.tau) << ','
               << io::num(x.kappa) << ',' << io::num(x.x_frob) << ',' << io::num(x.b0_frob) << ','
               << io::num(x.rates.epsilon_n_thm1) << ',' << io::num(x.rates.epsilon_n_thm3) << ','
               << io::num(x.rates.epsilon_prime_n) << ',' << io::num(x.pred_err_hat.mean) << ','
               << io::num(x.pred_err_hat.se) << ',' << io::num(x.pred_err_post.mean) << ','
               << io::num(x.pred_err_post.se) << ',' << io::num(x.est_err_hat.mean) << ','
               << io::num(x.est_err_post.mean) << ',' << io::num(x.renyi_post.mean) << ','
               << io::num(x.renyi_post.se) << ',' << io::num(x.acceptance.mean) << ',' << io::num(x.thm1_bound)
               << ',' << io::num(x.prop1_bound) << ',' << io::num(x.thm3_bound) << ',' << io::num(x.prop2_bound)
               << ',' << io::num(x.cor4_bound) << ',' << io::num(x.prob_floor) << ',' << x.thm3_vacuous << ','
               << x.thm1_satisfied << ',' << x.prop1_satisfied << ',' << x.bound_satisfied << ','
               << x.prop1_near_miss << ',' << io::num(x.thm3_frequency) << ',' << x.thm3_satisfied << ','
               << io::num(x.prop2_frequency) << ',' << x.prop2_satisfied << ',' << io::num(x.cor4_frequency) << ','
               << x.cor4_satisfied << '\n';
            cells.push_back({{"n", x.n},
                             {"rank", x.rank},
                             {"aborted", x.aborted},
                             {"diagnostic", x.diagnostic},
                             {"pred_err_hat", mean_se_json(x.pred_err_hat)},
                             {"pred_err_post", mean_se_json(x.pred_err_post)},
                             {"renyi_post", mean_se_json(x.renyi_post)},
                             {"prop1_bound", x.prop1_bound},
                             {"thm1_bound", x.thm1_bound},
                             {"bound_satisfied", x.bound_satisfied},
                             {"prop1_satisfied", x.prop1_satisfied},
                             {"prop1_near_miss", x.prop1_near_miss},
                             {"thm1_satisfied", x.thm1_satisfied},
                             {"thm3_vacuous", x.thm3_vacuous},
                             {"thm3_frequency", x.thm3_frequency},
                             {"prob_floor", x.prob_floor},
                             {"thm3_satisfied", x.thm3_satisfied}});
        }
        if (partial) os << "PARTIAL\n";
    }
    {
        auto os = io::open_out(out.file("hellinger.csv"));
        os << "n,rank,alpha,c_alpha,hellinger_mean,hellinger_bound,hellinger_ok,tv2_mean,tv2_bound,tv2_ok,"
              "hellinger_frequency,tv2_frequency,prob_floor,vacuous,hellinger_prob_ok,tv2_prob_ok\n";
        for (const auto& h : hel) {
            os << h.n << ',' << h.rank << ',' << io::num(h.alpha) << ',' << io::num(h.c_alpha) << ','
               << io::num(h.hellinger_mean) << ',' << io::num(h.hellinger_bound) << ',' << h.hellinger_ok << ','
               << io::num(h.tv2_mean) << ',' << io::num(h.tv2_bound) << ',' << h.tv2_ok << ','
               << io::num(h.hellinger_frequency) << ',' << io::num(h.tv2_frequency) << ',' << io::num(h.prob_floor)
               << ',' << h.vacuous << ',' << h.hellinger_prob_ok << ',' << h.tv2_prob_ok << '\n';
        }
        if (partial) os << "PARTIAL\n";
    }
    std::vector<std::pair<double, double>> err, bound, renyi, thm1;
    for (const auto& x : res.cells) {
        if (x.rank != rc.ranks.front() || x.aborted) continue;
        err.emplace_back(static_cast<double>(x.n), x.pred_err_hat.mean);
        bound.emplace_back(static_cast<double>(x.n), x.prop1_bound);
        renyi.emplace_back(static_cast<double>(x.n), x.renyi_post.mean);
        thm1.emplace_back(static_cast<double>(x.n), x.thm1_bound);
    }
    out.text("error_vs_n.dat", dat("n mean_prediction_error", err));
    out.text("bound_vs_n.dat", dat("n prediction_error_bound", bound));
    out.text("renyi_vs_n.dat", dat("n mean_posterior_renyi", renyi));
    out.text("renyi_bound_vs_n.dat", dat("n renyi_bound", thm1));

    long satisfied = 0, thm3 = 0, nonvacuous = 0;
    for (const auto& x : res.cells) {
        satisfied += x.bound_satisfied ? 1 : 0;
        if (!x.thm3_vacuous) {
            ++nonvacuous;
            thm3 += x.thm3_satisfied ? 1 : 0;
        }
    }
    auto slope_json = [](const SlopeFit& s) {
        return json{{"slope", finite_or_null(s.slope)},
                    {"intercept", finite_or_null(s.intercept)},
                    {"se", finite_or_null(s.se)},
                    {"ci_low", finite_or_null(s.ci_low)},
                    {"ci_high", finite_or_null(s.ci_high)},
                    {"points", s.points}};
    };
    json j;
    j["status"] = partial ? "PARTIAL" : "ok";
    j["slope_prediction_error"] = slope_json(res.slope_hat);
    j["slope_posterior_prediction_error"] = slope_json(res.slope_post);
    j["n_monotone"] = res.n_monotone;
    j["r_monotone"] = res.r_monotone;
    j["r_monotone_checked"] = res.r_monotone_checked;
    j["cells_total"] = res.cells.size();
    j["cells_bound_satisfied"] = satisfied;
    j["cells_nonvacuous_thm3"] = nonvacuous;
    j["cells_thm3_satisfied"] = thm3;
    j["cells"] = cells;
    out.json_file("summary.json", j);
    out.manifest(c);
    log << "rate-study: slope " << res.slope_hat.slope << " [" << res.slope_hat.ci_low << ", " << res.slope_hat.ci_high
        << "], bound satisfied in " << satisfied << "/" << res.cells.size() << " cells\n";
    if (partial) {
        std::cerr << "rate-study: some cells aborted; outputs marked PARTIAL\n";
        return ExitCode::numerical;
    }
    return ExitCode::ok;
}

inline MisspecStudyConfig misspec_config_from(const Config& c) {
    MisspecStudyConfig m;
    const FamilySpec tf = family_from(c, "true_family");
    const FamilySpec ff = family_from(c, "fitted_family");
    m.true_family = tf.id();
    m.true_options = tf.options();
    m.fitted_family = ff.id();
    m.fitted_options = ff.options();
    m.n_grid = c.integers("study.n_grid");
    m.p = c.integer("study.p");
    m.q = c.integer("study.q");
    m.rank = static_cast<int>(c.integer("study.rank"));
    m.replications = static_cast<int>(c.integer("study.replications"));
    m.design = design_mode_from_string(c.text("study.design"));
    m.eta_bound = c.real("study.eta_bound");
    m.coverage = c.real("study.coverage");
    m.divergence_samples = static_cast<int>(c.integer("study.divergence_samples"));
    m.restarts = static_cast<int>(c.integer("study.restarts"));
    m.alpha = c.real("sampler.alpha");
    m.n_steps = c.integer("sampler.n_steps");
    m.burn_in = c.integer("sampler.burn_in");
    m.thin = c.integer("sampler.thin");
    m.precondition = c.boolean("sampler.precondition");
    m.seed = static_cast<std::uint64_t>(c.integer("run.seed"));
    m.threads = static_cast<int>(c.integer("run.threads"));
    try {
        m.validate();
        frrr::detail::require_comparable(tf, ff);
        const FamilyBounds fb = family_bounds(ff);
        fb.require_u1();
        fb.require_c_upper();
        fb.require_c_lower();
    } catch (const std::invalid_argument& e) {
        throw config_error(e.what());
    } catch (const std::domain_error& e) {
        throw config_error(e.what());
    } catch (const unsupported& e) {
        throw config_error(e.what());
    }
    return m;
}

inline int cmd_misspec(const Config& c, std::ostream& log) {
    const MisspecStudyConfig mc = misspec_config_from(c);
    const MisspecStudyResult res = run_misspec_study(mc);

    OutputDir out(c.path("run.output_dir"));
    io::write_matrix_csv(out.file("B0.csv"), res.B0);
    bool partial = false;
    {
        auto os = io::open_out(out.file("cells.csv"));
        os << "status,n,tau,x_frob,kl_floor,renyi_floor,thm2_rhs,thm2_rhs_literal,cor2_rhs,renyi_post_mean,"
              "renyi_post_se,theta_sq_post_mean,theta_sq_post_se,theta_sq_hat_mean,acceptance_mean,acceptance_min,"
              "acceptance_max,replications,failed,thm2_fraction,cor2_fraction,bbar_grad_norm,bbar_converged,"
              "bbar_agreement,bbar_certificate,bbar_max_start_distance\n";
        for (const auto& x : res.cells) {
            partial = partial || x.aborted;
            os << (x.aborted ? "aborted" : "ok") << ',' << x.n << ',' << io::num(x.tau) << ',' << io::num(x.x_frob)
               << ',' << io::num(x.kl_floor) << ',' << io::num(x.renyi_floor) << ',' << io::num(x.thm2_rhs) << ','
               << io::num(x.thm2_rhs_literal) << ',' << io::num(x.cor2_rhs) << ',' << io::num(x.renyi_post.mean)
               << ',' << io::num(x.renyi_post.se) << ',' << io::num(x.theta_sq_post.mean) << ','
               << io::num(x.theta_sq_post.se) << ',' << io::num(x.theta_sq_hat.mean) << ','
               << io::num(x.acceptance.mean) << ',' << io::num(x.acceptance_min) << ','
               << io::num(x.acceptance_max) << ',' << x.replications << ',' << x.failed << ','
               << io::num(x.thm2_fraction) << ',' << io::num(x.cor2_fraction) << ',' << io::num(x.bbar.grad_norm)
               << ',' << x.bbar.converged << ',' << x.bbar.agreement << ',' << x.bbar.certificate << ','
               << io::num(x.bbar.max_start_distance) << '\n';
        }
        if (partial) os << "PARTIAL\n";
    }
    {
        auto os = io::open_out(out.file("candidates.csv"));
        os << "n,rank,kl,theta_sq,b_frob,r_n,thm2_rhs,cor2_rhs,converged\n";
        for (const auto& x : res.cells) {
            for (const auto& k : x.candidates) {
                os << x.n << ',' << k.rank << ',' << io::num(k.kl) << ',' << io::num(k.theta_sq) << ','
                   << io::num(k.b_frob) << ',' << io::num(k.r_n) << ',' << io::num(k.thm2_rhs) << ','
                   << io::num(k.cor2_rhs) << ',' << k.converged << '\n';
            }
        }
    }
    {
        auto os = io::open_out(out.file("reps.csv"));
        os << "n,rep,seed,ok,renyi_post,theta_sq_post,theta_sq_hat,acceptance,step_size,effective_rank,thm2_ok,"
              "cor2_ok,error\n";
        for (const auto& r : res.reps) {
            os << r.n << ',' << r.rep << ',' << r.seed << ',' << r.ok << ',' << io::num(r.renyi_post) << ','
               << io::num(r.theta_sq_post) << ',' << io::num(r.theta_sq_hat) << ',' << io::num(r.acceptance) << ','
               << io::num(r.step_size) << ',' << r.effective_rank << ',' << r.thm2_ok << ',' << r.cor2_ok << ','
               << detail::csv_text(r.error) << '\n';
        }
    }
    std::vector<std::pair<double, double>> renyi, floor, bound;
    for (const auto& x : res.cells) {
        io::write_matrix_csv(out.file("bbar_n" + std::to_string(x.n) + ".csv"), x.bbar.B);
        const double n = static_cast<double>(x.n);
        if (!x.aborted) renyi.emplace_back(n, x.renyi_post.mean);
        floor.emplace_back(n, x.renyi_floor);
        bound.emplace_back(n, x.thm2_rhs);
    }
    out.text("renyi_vs_n.dat", dat("n mean_posterior_renyi", renyi));
    out.text("floor_vs_n.dat", dat("n renyi_at_kl_minimizer", floor));
    out.text("bound_vs_n.dat", dat("n oracle_bound", bound));

    long total = 0, t2 = 0, c2 = 0;
    for (const auto& r : res.reps) {
        ++total;
        t2 += r.thm2_ok ? 1 : 0;
        c2 += r.cor2_ok ? 1 : 0;
    }
    json cells = json::array();
    for (const auto& x : res.cells) {
        cells.push_back({{"n", x.n},
                         {"kl_floor", x.kl_floor},
                         {"renyi_floor", x.renyi_floor},
                         {"thm2_rhs", x.thm2_rhs},
                         {"cor2_rhs", x.cor2_rhs},
                         {"renyi_post", mean_se_json(x.renyi_post)},
                         {"theta_sq_post", mean_se_json(x.theta_sq_post)},
                         {"thm2_fraction", x.thm2_fraction},
                         {"cor2_fraction", x.cor2_fraction},
                         {"aborted", x.aborted},
                         {"diagnostic", x.diagnostic}});
    }
    json j;
    j["status"] = partial ? "PARTIAL" : "ok";
    j["true_family"] = std::string(to_string(res.true_family));
    j["fitted_family"] = std::string(to_string(res.fitted_family));
    j["solver_ok"] = res.solver_ok;
    j["max_grad_norm"] = res.max_grad_norm;
    j["max_start_distance"] = res.max_start_distance;
    j["thm2_fraction"] = total ? static_cast<double>(t2) / static_cast<double>(total) : 0.0;
    j["cor2_fraction"] = total ? static_cast<double>(c2) / static_cast<double>(total) : 0.0;
    j["above_floor"] = res.above_floor;
    j["excess_shrinks"] = res.excess_shrinks;
    j["plateau"] = res.plateau;
    j["cells"] = cells;
    out.json_file("summary.json", j);
    out.manifest(c);
    log << "misspec: oracle bound held in " << t2 << "/" << total << " replications, plateau "
        << (res.plateau ? "yes" : "no") << '\n';
    if (partial) {
        std::cerr << "misspec: some cells aborted; outputs marked PARTIAL\n";
        return ExitCode::numerical;
    }
    return ExitCode::ok;
}

inline int run_command(const Config& c, std::ostream& log) {
    const std::string& s = c.subcommand;
    if (s == "generate") return cmd_generate(c, log);
    if (s == "fit") return cmd_fit(c, log);
    if (s == "summarize") return cmd_summarize(c, log);
    if (s == "divergence") return cmd_divergence(c, log);
    if (s == "verify-bounds") return cmd_verify_bounds(c, log);
    if (s == "rate-study") return cmd_rate_study(c, log);
    if (s == "misspec") return cmd_misspec(c, log);
    throw config_error("unknown subcommand '" + s + "'");
}

/// Exit code for an exception escaping a subcommand.
inline int exit_code_for(const std::exception_ptr& e) {
    try {
        std::rethrow_exception(e);
    } catch (const config_error&) {
        return ExitCode::config;
    } catch (const unbounded_bound&) {
        return ExitCode::config;
    } catch (const unsupported&) {
        return ExitCode::config;
    } catch (const data_error&) {
        return ExitCode::data;
    } catch (const shape_error&) {
        return ExitCode::data;
    } catch (const invalid_parameter&) {
        return ExitCode::data;
    } catch (const numerical_failure&) {
        return ExitCode::numerical;
    } catch (...) {
        return ExitCode::other;
    }
}

}  // namespace frrr::cli
