#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nlbilevel/config.hpp"
#include "nlbilevel/image_io.hpp"
#include "oracles.hpp"

using namespace nlbilevel;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string output;
};

class Cli : public ::testing::Test {
protected:
    fs::path dir;

    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir = fs::temp_directory_path() / (std::string("nlb_cli_") + info->name());
        fs::remove_all(dir);
        fs::create_directories(dir);
        const Image truth = oracle::random_scene(16, 16, 3);
        write_image(dir / "truth.png", truth);
        write_image(dir / "noisy.png", add_gaussian_noise(truth, {100.0, 1}));
        write_image(dir / "truth2.png", oracle::random_scene(16, 16, 4));
    }

    Outcome nlb(const std::string& args) const {
        const fs::path log = dir / "log.txt";
        const std::string cmd = std::string(NLB_TOOL) + " " + args + " > " + log.string() + " 2>&1";
        const int status = std::system(cmd.c_str());
        std::ifstream in(log);
        std::stringstream ss;
        ss << in.rdbuf();
        return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
    }

    std::string p(const char* name) const { return (dir / name).string(); }

    static std::vector<std::string> lines(const fs::path& path) {
        std::ifstream in(path);
        std::vector<std::string> out;
        for (std::string l; std::getline(in, l);) out.push_back(l);
        return out;
    }

    // small, fast settings shared by the learning commands
    static constexpr const char* kFast = " --rho 1 --eps 2 --max-iter 3 ";
};

}  // namespace

TEST_F(Cli, UsageErrors) {
    EXPECT_EQ(nlb("").code, 2);
    EXPECT_EQ(nlb("frobnicate").code, 2);
    EXPECT_EQ(nlb("denoise --no-such-flag 1").code, 2);
    EXPECT_EQ(nlb("denoise --input " + p("noisy.png") + " --rho x").code, 2);
    EXPECT_EQ(nlb("learn-lambda-scalar --input " + p("noisy.png")).code, 2);  // no truth
    EXPECT_EQ(nlb("denoise --input " + p("missing.png")).code, 2);
    EXPECT_EQ(nlb("denoise --input " + p("noisy.png") + " --lambda0 -1").code, 2);
    EXPECT_EQ(nlb("--help").code, 0);
}

TEST_F(Cli, MetricsPrintsCsvLine) {
    const auto r = nlb("metrics --input " + p("truth.png") + " --truth " + p("truth.png"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("ssim,psnr,loss\n1.0000,inf,0\n"), std::string::npos) << r.output;
    const auto noisy = nlb("metrics --input " + p("noisy.png") + " --truth " + p("truth.png"));
    EXPECT_EQ(noisy.code, 0);
}

TEST_F(Cli, DenoiseWritesImageAndSummary) {
    const auto r = nlb("denoise --input " + p("noisy.png") + " --truth " + p("truth.png") +
                       " --lambda0 1 --rho 1 --eps 2 --out " + p("out"));
    ASSERT_EQ(r.code, 0) << r.output;
    const Image u = read_image(dir / "out" / "denoised.png");
    EXPECT_EQ(u.width(), 16);
    const auto summary = lines(dir / "out" / "summary.csv");
    ASSERT_EQ(summary.size(), 2u);
    EXPECT_EQ(summary[0], "problem,image,lambda,weight,ssim_noisy,psnr_noisy,ssim,psnr,loss,iterations,termination");
    EXPECT_EQ(summary[1].rfind("denoise,noisy,1,0.0001,", 0), 0u) << summary[1];
    EXPECT_TRUE(fs::exists(dir / "out" / "summary.txt"));
}

TEST_F(Cli, RefusesToOverwrite) {
    const std::string args = "denoise --input " + p("noisy.png") + " --lambda0 1 --rho 1 --eps 1 --out " + p("out");
    ASSERT_EQ(nlb(args).code, 0);
    const auto again = nlb(args);
    EXPECT_EQ(again.code, 3);
    EXPECT_NE(again.output.find("--overwrite"), std::string::npos);
    EXPECT_EQ(nlb(args + " --overwrite").code, 0);
}

TEST_F(Cli, ScalarLearningWritesTrace) {
    const auto r = nlb("learn-lambda-scalar --truth " + p("truth.png") + " --sigma2 100 --seed 3" + kFast +
                       "--lambda0 2 --out " + p("out"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto trace = lines(dir / "out" / "trace.csv");
    ASSERT_GE(trace.size(), 2u);
    EXPECT_EQ(trace[0], "iter,j,projected_gradient,radius,step,seconds");
    // 17 significant digits, '.' decimal
    const std::string j = trace[1].substr(2, trace[1].find(',', 2) - 2);
    EXPECT_EQ(std::stod(j), std::stod(j));
    EXPECT_NE(j.find('.'), std::string::npos);
    EXPECT_GE(j.size(), 17u);
    EXPECT_TRUE(fs::exists(dir / "out" / "denoised.png"));
}

TEST_F(Cli, SameSeedSameResult) {
    const std::string base = "learn-lambda-scalar --truth " + p("truth.png") + " --sigma2 100 --seed 9" + kFast +
                             "--lambda0 2 --out ";
    ASSERT_EQ(nlb(base + p("a")).code, 0);
    ASSERT_EQ(nlb(base + p("b")).code, 0);
    EXPECT_EQ(lines(dir / "a" / "summary.csv"), lines(dir / "b" / "summary.csv"));
}

TEST_F(Cli, SpatialLearningWritesLambdaField) {
    const auto r = nlb("learn-lambda-spatial --input " + p("noisy.png") + " --truth " + p("truth.png") + kFast +
                       "--lambda0 1 --upper 10 --out " + p("out"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(fs::file_size(dir / "out" / "lambda.f64"), 8u + 17u * 17u * 8u);
    EXPECT_EQ(read_image(dir / "out" / "lambda.png").width(), 17);
}

TEST_F(Cli, WeightLearning) {
    const auto r = nlb("learn-weight --input " + p("noisy.png") + " --truth " + p("truth.png") + kFast +
                       "--out " + p("out"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("weight bound W"), std::string::npos);
    EXPECT_EQ(lines(dir / "out" / "summary.csv").size(), 2u);
}

TEST_F(Cli, BatchTraining) {
    const auto r = nlb("train-batch --truth " + p("truth.png") + " --truth " + p("truth2.png") +
                       " --sigma2 100" + kFast + "--out " + p("out"));
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(dir / "out" / "denoised_0.png"));
    EXPECT_TRUE(fs::exists(dir / "out" / "denoised_1.png"));
    EXPECT_EQ(lines(dir / "out" / "summary.csv").size(), 3u);
}

TEST_F(Cli, SweepGrid) {
    const auto r = nlb("sweep --input " + p("noisy.png") + " --truth " + p("truth.png") +
                       " --rho 1 --eps 2 --lambda-count 3 --weight-count 2 --out " + p("out"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto rows = lines(dir / "out" / "sweep.csv");
    ASSERT_EQ(rows.size(), 7u);
    EXPECT_EQ(rows[0], "lambda,weight,loss");
    EXPECT_EQ(rows[1].rfind("0.01,1.0000000000000001e-05,", 0), 0u) << rows[1];
}

TEST_F(Cli, ConfigFileWithCommandLineOverride) {
    std::ofstream(dir / "run.cfg") << "# test\nlambda0 = 3\nrho=1\neps=1\nout=" << p("cfg_out") << "\n";
    const auto r = nlb("denoise --config " + p("run.cfg") + " --input " + p("noisy.png") + " --lambda0 5");
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("lambda0=5\n"), std::string::npos);
    EXPECT_NE(r.output.find("rho=1\n"), std::string::npos);
    EXPECT_TRUE(fs::exists(dir / "cfg_out" / "denoised.png"));
    std::ofstream(dir / "bad.cfg") << "nonsense\n";
    EXPECT_EQ(nlb("denoise --config " + p("bad.cfg") + " --input " + p("noisy.png")).code, 2);
}

TEST_F(Cli, SynthWritesTexture) {
    ASSERT_EQ(nlb("synth --out " + p("data")).code, 0);
    EXPECT_EQ(read_image(dir / "data" / "texture.png").width(), 64);
    EXPECT_TRUE(fs::exists(dir / "data" / "texture_noisy.png"));
}

TEST(Config, PresetsAndDefaults) {
    RunConfig c;
    c.problem = "synth";
    c.preset = "c";
    resolve(c);
    EXPECT_NEAR(c.sigma2, std::pow(10.0, 2.5), 1e-9);
    EXPECT_NEAR(c.weight, 1.0 / (316.0 * 316.0), 1e-15);
    EXPECT_EQ(c.bound_factor, 6.0);

    RunConfig b;
    b.problem = "synth";
    resolve(b);
    EXPECT_EQ(b.weight, 1e-4);
    EXPECT_EQ(b.iota, 1e-9);

    RunConfig w;
    w.problem = "learn-weight";
    EXPECT_THROW(resolve(w), ConfigError);  // no images

    RunConfig bad;
    bad.problem = "synth";
    EXPECT_THROW(set_config_value(bad, "rho", "1.5"), ConfigError);
    EXPECT_THROW(set_config_value(bad, "nope", "1"), ConfigError);
    set_config_value(bad, "krylov", "bicg");
    EXPECT_THROW(resolve(bad), ConfigError);
}
