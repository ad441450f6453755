#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <Eigen/SVD>

#include "frrr/cli.hpp"
#include "frrr/io.hpp"

using namespace frrr;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("frrr_cli_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int run(const std::string& args) {
    const std::string cmd = std::string(FRRR_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

}  // namespace

// --- config ---------------------------------------------------------------------------

TEST(Config, DefaultsRoundTripForEverySubcommand) {
    for (const auto& sub : cli::subcommands()) {
        const cli::Config c = cli::default_config(sub);
        const std::string text = cli::serialize(c);
        const cli::Config again = cli::parse_config(sub, text);
        EXPECT_EQ(c, again) << sub;
        EXPECT_EQ(cli::serialize(again), text) << sub;
    }
}

TEST(Config, ValuesAreCanonicalized) {
    const cli::Config c = cli::parse_config("rate-study",
                                            "[study]\n"
                                            "n_grid = 100, 0200 ,400\n"
                                            "eta_bound = 3.000\n"
                                            "[sampler]\n"
                                            "precondition = no\n"
                                            "alpha = 0.1\n"
                                            "[family]\n"
                                            "theta_lo = -2.50\n");
    EXPECT_EQ(c.raw("study.n_grid"), "100,200,400");
    EXPECT_EQ(c.raw("study.eta_bound"), "3");
    EXPECT_EQ(c.raw("sampler.precondition"), "false");
    EXPECT_EQ(c.raw("sampler.alpha"), "0.1");
    EXPECT_EQ(c.real("sampler.alpha"), 0.1);
    EXPECT_EQ(c.raw("family.theta_lo"), "-2.5");
    EXPECT_EQ(c.raw("family.theta_hi"), "auto");
    EXPECT_EQ(c.integers("study.n_grid"), (std::vector<long>{100, 200, 400}));
    EXPECT_EQ(cli::parse_config("rate-study", cli::serialize(c)), c);
}

TEST(Config, RandomRealsRoundTripExactly) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1e6, 1e6);
    for (int k = 0; k < 1000; ++k) {
        const double v = u(rng) * std::pow(10.0, static_cast<int>(rng() % 40) - 20);
        cli::Config c = cli::default_config("fit");
        cli::apply_assignment(c, "prior.tau=" + io::num(v));
        EXPECT_EQ(c.real("prior.tau"), v);
        EXPECT_EQ(cli::parse_config("fit", cli::serialize(c)), c);
        EXPECT_EQ(std::strtod(io::num(v).c_str(), nullptr), v);
    }
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(cli::parse_config("fit", "[sampler]\nalpah = 0.5\n"), config_error);
    EXPECT_THROW(cli::parse_config("fit", "[nosuch]\nx = 1\n"), config_error);
    EXPECT_THROW(cli::parse_config("fit", "toplevel = 1\n"), config_error);
    EXPECT_THROW(cli::parse_config("fit", "[sampler]\nn_steps = 10.5\n"), config_error);
    EXPECT_THROW(cli::parse_config("fit", "[sampler]\nalpha = half\n"), config_error);
    EXPECT_THROW(cli::parse_config("fit", "[sampler]\ninit = random\n"), config_error);
    EXPECT_THROW(cli::parse_config("fit", "[sampler]\nalpha = 0.5\nalpha = 0.6\n"), config_error);
    EXPECT_THROW(cli::parse_config("generate", "[sampler]\nalpha = 0.5\n"), config_error);
    EXPECT_THROW(cli::default_config("plot"), config_error);
    cli::Config c = cli::default_config("fit");
    EXPECT_THROW(cli::apply_assignment(c, "sampler.alpha"), config_error);
}

TEST(Config, RelativePathsFollowTheConfigFile) {
    const fs::path dir = scratch("paths");
    {
        std::ofstream os(dir / "fit.ini");
        os << "[data]\ndir = ../data\n[run]\noutput_dir = /abs/out\n";
    }
    const cli::Config c = cli::load_config("fit", dir / "fit.ini");
    EXPECT_EQ(c.path("data.dir"), dir / "../data");
    EXPECT_EQ(c.path("run.output_dir"), fs::path("/abs/out"));
}

TEST(Config, HashIgnoresOutputLocationOnly) {
    cli::Config a = cli::default_config("generate");
    cli::Config b = a;
    cli::apply_assignment(b, "run.output_dir=elsewhere");
    cli::apply_assignment(b, "run.threads=7");
    EXPECT_EQ(cli::config_hash(a), cli::config_hash(b));
    cli::apply_assignment(b, "run.seed=2");
    EXPECT_NE(cli::config_hash(a), cli::config_hash(b));
}

// --- file formats ------------------------------------------------------------------------

TEST(Formats, MatrixCsvRoundTripsBitExactly) {
    const fs::path dir = scratch("csv");
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n01;
    Matrix m(7, 3);
    for (auto& v : m.reshaped()) v = n01(rng) * 1e-7;
    m(0, 0) = 1.0 / 3.0;
    io::write_matrix_csv(dir / "m.csv", m);
    EXPECT_EQ(io::read_matrix_csv(dir / "m.csv"), m);
    {
        std::ofstream os(dir / "bad.csv");
        os << "1,2\n3\n";
    }
    EXPECT_THROW(io::read_matrix_csv(dir / "bad.csv"), data_error);
    {
        std::ofstream os(dir / "nan.csv");
        os << "1,x\n";
    }
    EXPECT_THROW(io::read_matrix_csv(dir / "nan.csv"), data_error);
}

TEST(Formats, ChainFileRoundTrip) {
    const fs::path dir = scratch("chain");
    Chain c;
    c.config.alpha = 0.3;
    c.config.n_steps = 100;
    c.config.burn_in = 20;
    c.config.thin = 4;
    c.config.seed = 0xfeedbeefcafeULL;
    c.step_size = 0.0125;
    c.acceptance_rate = 0.61;
    c.dataset_digest = 0x0123456789abcdefULL;
    for (int k = 0; k < 20; ++k) {
        Matrix m(3, 2);
        m << k, 1.0 / (k + 1), -k, 0.5, 1e-300, k * 1e10;
        c.samples.push_back(m);
        c.log_post.push_back(-1.5 * k);
        c.accepted.push_back(k % 3 != 0);
        c.steps.push_back(20 + 4 * k);
    }
    io::write_chain(dir / "c.bin", c, 3, 2);
    io::write_chain_trace(dir / "t.csv", c);
    const Chain r = io::read_chain(dir / "c.bin", dir / "t.csv");
    ASSERT_EQ(r.size(), c.size());
    for (std::size_t k = 0; k < c.size(); ++k) {
        EXPECT_EQ(r.samples[k], c.samples[k]);
        EXPECT_EQ(r.log_post[k], c.log_post[k]);
        EXPECT_EQ(r.accepted[k], c.accepted[k]);
        EXPECT_EQ(r.steps[k], c.steps[k]);
    }
    EXPECT_EQ(r.config.alpha, 0.3);
    EXPECT_EQ(r.config.thin, 4);
    EXPECT_EQ(r.config.seed, c.config.seed);
    EXPECT_EQ(r.step_size, c.step_size);
    EXPECT_EQ(r.dataset_digest, c.dataset_digest);
    // header: magic then p = 3 as a little-endian int32
    const std::string bytes = slurp(dir / "c.bin");
    EXPECT_EQ(bytes.substr(0, 8), "FRRRCHN1");
    EXPECT_EQ(bytes[8], 3);
    EXPECT_EQ(bytes[9], 0);
    EXPECT_EQ(bytes.size(), 8u + 6 * 4 + 3 * 8 + 2 * 8 + 20 * 6 * 8);

    std::ofstream(dir / "junk.bin") << "NOTACHAIN-------------------";
    EXPECT_THROW(io::read_chain(dir / "junk.bin"), data_error);
    std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    EXPECT_THROW(io::read_chain(dir / "short.bin"), data_error);
}

// --- subcommands through the binary --------------------------------------------------------

TEST(Binary, GenerateIsDeterministicAndLowRank) {
    const fs::path dir = scratch("generate");
    const std::string args = "generate --set design.n=60 --set design.p=4 --set truth.q=3 --set truth.rank=2";
    ASSERT_EQ(run(args + " --out " + (dir / "a").string()), 0);
    ASSERT_EQ(run(args + " --out " + (dir / "b").string()), 0);
    for (const char* f : {"X.csv", "Y.csv", "truth.csv", "meta.ini", "manifest.json"}) {
        ASSERT_TRUE(fs::exists(dir / "a" / f)) << f;
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    }
    const Matrix B0 = io::read_matrix_csv(dir / "a" / "truth.csv");
    ASSERT_EQ(B0.rows(), 4);
    ASSERT_EQ(B0.cols(), 3);
    const Vector s = Eigen::JacobiSVD<Matrix>(B0).singularValues();
    EXPECT_GT(s(1), 1e-8 * s(0));
    EXPECT_LT(s(2), 1e-10 * s(0));
    const json m = read_json(dir / "a" / "manifest.json");
    EXPECT_EQ(m["subcommand"], "generate");
    EXPECT_EQ(m["seed"], 1);
    EXPECT_TRUE(m["files"].contains("Y.csv"));
    EXPECT_EQ(m["config"]["design.n"], "60");
    EXPECT_FALSE(m["config"].contains("run.output_dir"));
    // another seed changes the data
    ASSERT_EQ(run(args + " --set run.seed=2 --out " + (dir / "c").string()), 0);
    EXPECT_NE(slurp(dir / "a" / "Y.csv"), slurp(dir / "c" / "Y.csv"));
}

TEST(Binary, NullTruthCentersOnTheNullMean) {
    const fs::path dir = scratch("null");
    ASSERT_EQ(run("generate --set family.name=bernoulli_logit --set truth.rank=0 --set design.n=3000 --out " +
                  dir.string()),
              0);
    EXPECT_TRUE(io::read_matrix_csv(dir / "truth.csv").isZero(0.0));
    EXPECT_NEAR(io::read_matrix_csv(dir / "Y.csv").mean(), 0.5, 0.02);
}

TEST(Binary, FitMatchesOlsFixtureAndSummarizeReproducesIt) {
    const fs::path dir = scratch("fit");
    const fs::path fixture = fs::path(FRRR_FIXTURE_DIR) / "gaussian_flat";
    const std::string fit = "fit --set data.dir=" + fixture.string() +
                            " --set prior.tau_preset=manual --set prior.tau=1000 --set sampler.n_steps=40000"
                            " --set sampler.burn_in=5000 --set sampler.thin=5 --out " +
                            (dir / "fit").string();
    ASSERT_EQ(run(fit), 0);
    const Matrix bhat = io::read_matrix_csv(dir / "fit" / "bhat.csv");
    const Matrix ref = io::read_matrix_csv(fixture / "ols.csv");
    EXPECT_LT((bhat - ref).norm(), 0.05);
    const json s = read_json(dir / "fit" / "fit_summary.json");
    EXPECT_EQ(s["retained_samples"], 7000);
    EXPECT_GT(s["acceptance_rate"].get<double>(), 0.1);
    EXPECT_LT(s["acceptance_rate"].get<double>(), 0.95);
    EXPECT_EQ(s["effective_rank"], 1);
    EXPECT_EQ(s["family"], "gaussian");

    ASSERT_EQ(run("summarize --set input.chain=" + (dir / "fit" / "chain.bin").string() +
                  " --set input.trace=" + (dir / "fit" / "chain_trace.csv").string() + " --out " +
                  (dir / "sum").string()),
              0);
    EXPECT_EQ(slurp(dir / "fit" / "bhat.csv"), slurp(dir / "sum" / "bhat.csv"));

    // rerun: byte-identical chain and CSVs
    ASSERT_EQ(run(fit + "2"), 0);
    for (const char* f : {"chain.bin", "chain_trace.csv", "bhat.csv", "fit_summary.json"}) {
        EXPECT_EQ(slurp(dir / "fit" / f), slurp(dir / "fit2" / f)) << f;
    }
}

TEST(Binary, ExitCodes) {
    const fs::path dir = scratch("codes");
    const fs::path fixture = fs::path(FRRR_FIXTURE_DIR) / "gaussian_flat";
    // alpha outside (0, 1) is a config error and nothing is written
    EXPECT_EQ(run("fit --set data.dir=" + fixture.string() + " --set sampler.alpha=1.5 --out " + (dir / "a").string()),
              2);
    EXPECT_FALSE(fs::exists(dir / "a"));
    EXPECT_EQ(run("fit --set sampler.nosuch=1"), 2);
    EXPECT_EQ(run("plot"), 2);
    EXPECT_EQ(run("fit --config " + (dir / "missing.ini").string()), 2);
    // data errors
    EXPECT_EQ(run("fit --set data.dir=" + (dir / "nothing").string() + " --out " + (dir / "b").string()), 3);
    {
        std::ofstream(dir / "t.csv") << "0.1,0.2\n";
        std::ofstream(dir / "z.csv") << "0.1\n";
    }
    EXPECT_EQ(run("divergence --set input.theta=" + (dir / "t.csv").string() +
                  " --set input.zeta=" + (dir / "z.csv").string() + " --out " + (dir / "c").string()),
              3);
    // a family without finite curvature bounds cannot drive the lemma sweep
    EXPECT_EQ(run("verify-bounds --set family.name=poisson_log --set family.theta_hi=inf --out " + (dir / "d").string()),
              2);
}

TEST(Binary, DivergenceOfIdenticalInputsIsZero) {
    const fs::path dir = scratch("divergence");
    {
        std::ofstream os(dir / "theta.csv");
        os << "0.25,-1\n1.5,0.75\n-0.5,2\n";
    }
    for (const char* fam : {"gaussian", "bernoulli_logit", "poisson_log"}) {
        ASSERT_EQ(run(std::string("divergence --set family.name=") + fam + " --set input.theta=" +
                      (dir / "theta.csv").string() + " --set input.zeta=" + (dir / "theta.csv").string() +
                      " --out " + (dir / fam).string()),
                  0);
        std::istringstream is(slurp(dir / fam / "divergence.csv"));
        std::string line;
        std::getline(is, line);
        EXPECT_EQ(line, "metric,alpha,per_entry_avg,total,normalization");
        int rows = 0;
        while (std::getline(is, line)) {
            ++rows;
            std::vector<std::string> cells;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) cells.push_back(cell);
            ASSERT_GE(cells.size(), 4u);
            EXPECT_EQ(std::stod(cells[2]), 0.0) << line;
            EXPECT_EQ(std::stod(cells[3]), 0.0) << line;
        }
        EXPECT_EQ(rows, 7);
        EXPECT_EQ(read_json(dir / fam / "divergence.json")["kl_total"], 0.0);
    }
}

TEST(Binary, VerifyBoundsReportsPerLemma) {
    const fs::path dir = scratch("verify");
    ASSERT_EQ(run("verify-bounds --set family.name=bernoulli_logit --set verify.trials=500 --out " + dir.string()), 0);
    const json s = read_json(dir / "summary.json");
    EXPECT_EQ(s["family"], "bernoulli_logit");
    EXPECT_EQ(s["theta_lo"], -2.0);
    EXPECT_EQ(s["trials"], 500);
    for (const auto& l : s["lemmas"]) {
        const std::string name = l["lemma"];
        if (name == "kl_upper" || name == "second_moment" || name == "misspecified_kl" ||
            name == "renyi_lower_alpha_scaled") {
            EXPECT_EQ(l["violations"], 0) << name;
        }
    }
    const double frac = s["satisfied_fraction"];
    EXPECT_GT(frac, 0.0);
    EXPECT_LE(frac, 1.0);
    EXPECT_TRUE(fs::exists(dir / "bounds_rows.csv"));
    EXPECT_TRUE(fs::exists(dir / "bounds_summary.csv"));
}

TEST(Binary, RateStudySmokeGrid) {
    const fs::path dir = scratch("rate");
    const auto t0 = std::chrono::steady_clock::now();
    ASSERT_EQ(run("rate-study --set study.n_grid=100,200 --set study.replications=2 --set sampler.n_steps=6000 "
                  "--set sampler.burn_in=1500 --out " +
                  dir.string()),
              0);
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 300.0);
    const json s = read_json(dir / "summary.json");
    EXPECT_EQ(s["status"], "ok");
    EXPECT_EQ(s["cells_total"], 2);
    EXPECT_EQ(s["slope_prediction_error"]["points"], 2);
    for (const char* f : {"reps.csv", "cells.csv", "hellinger.csv", "error_vs_n.dat", "bound_vs_n.dat"}) {
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    }
    std::istringstream dat(slurp(dir / "error_vs_n.dat"));
    std::string line;
    std::getline(dat, line);
    EXPECT_EQ(line[0], '#');
    double n = 0, e = 0;
    dat >> n >> e;
    EXPECT_EQ(n, 100.0);
    EXPECT_GT(e, 0.0);
    EXPECT_EQ(slurp(dir / "cells.csv").find("PARTIAL"), std::string::npos);
}
