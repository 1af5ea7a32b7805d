#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "nlbilevel/kernel.hpp"
#include "oracles.hpp"

using namespace nlbilevel;

namespace {

PatchConfig config(int rho, int eps, double iota = 0.0) { return PatchConfig{rho, eps, iota}; }

}  // namespace

TEST(BandLayout, ColumnsAndMirror) {
    const BandLayout l(4, 3, 1);
    EXPECT_EQ(l.count(), 9);
    EXPECT_EQ(l.center(), 4);
    EXPECT_EQ(l.column(0, 0), -1);
    EXPECT_EQ(l.column(0, 4), 0);
    EXPECT_EQ(l.column(0, 5), 1);
    EXPECT_EQ(l.column(0, 7), 4);
    EXPECT_EQ(l.column(11, 8), -1);
    for (std::size_t i = 0; i < l.rows(); ++i)
        for (int k = 0; k < l.count(); ++k) {
            const auto j = l.column(i, k);
            if (j >= 0) EXPECT_EQ(l.column(j, l.mirror(k)), static_cast<std::int32_t>(i));
        }
    EXPECT_THROW(BandLayout(3, 3, 0), ConfigError);
}

TEST(BandLayout, DefaultRadius) {
    EXPECT_EQ(default_interaction_radius(64, 64), 8);   // 17^2 = 289 <= 320
    EXPECT_EQ(default_interaction_radius(32, 32), 5);   // 11^2 = 121 <= 160
    EXPECT_EQ(default_interaction_radius(1, 1), 1);
}

TEST(Dissimilarity, MatchesBruteForce) {
    for (int seed = 0; seed < 3; ++seed) {
        const Image f = oracle::random_image(6, 6, 100 + seed);
        for (int rho : {0, 1, 2}) {
            const auto d = build_dissimilarity(f, config(rho, 2));
            double worst = 0.0;
            for (int y = 0; y < 6; ++y)
                for (int x = 0; x < 6; ++x)
                    for (int k = 0; k < d.layout.count(); ++k) {
                        const double ref = oracle::patch_distance(f, rho, x, y, x + d.layout.dx(k),
                                                                  y + d.layout.dy(k));
                        worst = std::max(worst, std::abs(d(y * 6 + x, k) - ref) / std::max(1.0, ref));
                    }
            EXPECT_LE(worst, 1e-10) << "seed " << seed << " rho " << rho;
        }
    }
}

TEST(Dissimilarity, SymmetricAndZeroOnDiagonal) {
    const auto d = build_dissimilarity(oracle::random_scene(9, 7, 3), config(2, 3));
    const BandLayout& l = d.layout;
    for (std::size_t i = 0; i < l.rows(); ++i) {
        EXPECT_EQ(d(i, l.center()), 0.0);
        for (int k = 0; k < l.count(); ++k) {
            EXPECT_GE(d(i, k), 0.0);
            const auto j = l.column(i, k);
            if (j >= 0) EXPECT_EQ(d(i, k), d(j, l.mirror(k)));
        }
    }
}

TEST(Dissimilarity, RejectsBadConfig) {
    const Image f = oracle::random_image(4, 4, 1);
    EXPECT_THROW(build_dissimilarity(f, config(-1, 1)), ConfigError);
    EXPECT_THROW(build_dissimilarity(f, config(1, 0)), ConfigError);
    EXPECT_THROW(build_dissimilarity(f, config(1, 1, -1.0)), ConfigError);
}

TEST(Kernel, AssemblyAndThreshold) {
    const Image f = oracle::random_scene(8, 8, 5);
    const auto d = build_dissimilarity(f, config(1, 2, 1e-3));
    const auto k = assemble_kernel(d, 1e-4);
    for (std::size_t e = 0; e < d.values.size(); ++e) {
        const double g = std::exp(-1e-4 * d.values[e]);
        if (g > 1e-3) {
            EXPECT_EQ(k.mask[e], 1);
            EXPECT_EQ(k.values[e], g);
        } else {
            EXPECT_EQ(k.mask[e], 0);
            EXPECT_EQ(k.values[e], 0.0);
        }
    }
    for (std::size_t i = 0; i < k.layout.rows(); ++i) {
        double s = 0.0;
        for (int q = 0; q < k.layout.count(); ++q) s += k(i, q);
        EXPECT_NEAR(k.row_sums[i], s, 1e-14 * s);
        EXPECT_EQ(k(i, k.layout.center()), 1.0);
    }
    EXPECT_THROW(assemble_kernel(d, -1.0), ConfigError);
}

TEST(Kernel, ReweightMatchesFreshAssembly) {
    const Image f = oracle::random_scene(12, 12, 9);
    const auto d = build_dissimilarity(f, config(1, 2));
    const auto base = assemble_kernel(d, 1e-6);
    for (double w : {1e-6, 5e-6, 1e-4}) {
        const auto fresh = assemble_kernel(d, w);
        const auto re = reweight(base, w);
        double worst = 0.0;
        for (std::size_t e = 0; e < fresh.values.size(); ++e)
            worst = std::max(worst, std::abs(fresh.values[e] - re.values[e]));
        EXPECT_LE(worst, 1e-12) << "w = " << w;
        EXPECT_EQ(re.weight, w);
    }
}

TEST(Kernel, ReweightFromZeroWeightFallsBack) {
    const auto d = build_dissimilarity(oracle::random_image(5, 5, 2), config(1, 1));
    const auto zero = assemble_kernel(d, 0.0);
    EXPECT_THROW(reweight(zero, 1e-4), ConfigError);
    const auto k = reweight(zero, d, 1e-4);
    const auto fresh = assemble_kernel(d, 1e-4, zero.mask);
    EXPECT_EQ(k.values, fresh.values);
}

TEST(Kernel, LinearizationMatchesCentralDifferences) {
    const Image f = oracle::random_scene(10, 10, 4);
    const auto d = build_dissimilarity(f, config(1, 2));
    for (double w : {1e-6, 5e-6, 1e-4}) {
        const auto k = assemble_kernel(d, w);
        const auto lin = linearized_kernel(k, d);
        const double h = 1e-4 * w;
        const auto kp = assemble_kernel(d, w + h, k.mask);
        const auto km = assemble_kernel(d, w - h, k.mask);
        double worst = 0.0, scale = 0.0;
        for (std::size_t e = 0; e < k.values.size(); ++e) {
            const double fd = (kp.values[e] - km.values[e]) / (2 * h);
            worst = std::max(worst, std::abs(fd - lin.values[e]));
            scale = std::max(scale, std::abs(lin.values[e]));
        }
        EXPECT_LE(worst / scale, 1e-6) << "w = " << w;
    }
}

TEST(Kernel, OperationCountWithinBudget) {
    for (int n : {16, 32}) {
        const Image f = oracle::random_scene(n, n, 1);
        const PatchConfig cfg = config(2, 3);
        KernelOpCount ops;
        build_dissimilarity(f, cfg, &ops);
        const double ratio = ops.multiply_adds / kernel_op_budget(n, n, cfg);
        EXPECT_GE(ratio, 0.5);
        EXPECT_LE(ratio, 2.0);
    }
}

TEST(Kernel, DissimilarityRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "nlb_kernel_io";
    std::filesystem::create_directories(dir);
    const auto d = build_dissimilarity(oracle::random_image(7, 5, 8), config(1, 2, 1e-7));
    save_dissimilarity(dir / "d.bin", d);
    const auto back = load_dissimilarity(dir / "d.bin");
    EXPECT_EQ(back.values, d.values);
    EXPECT_TRUE(back.layout.compatible(d.layout));
    EXPECT_EQ(back.config.patch_radius, 1);
    EXPECT_EQ(back.config.threshold, 1e-7);

    std::ofstream(dir / "junk.bin") << "NLBDISS0";
    EXPECT_THROW(load_dissimilarity(dir / "junk.bin"), IoError);
    EXPECT_THROW(load_dissimilarity(dir / "missing.bin"), IoError);
}
