#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "nlbilevel/config.hpp"
#include "nlbilevel/csv.hpp"
#include "nlbilevel/error.hpp"
#include "nlbilevel/image.hpp"
#include "nlbilevel/image_io.hpp"
#include "nlbilevel/kernel.hpp"
#include "nlbilevel/learning.hpp"
#include "nlbilevel/metrics.hpp"

namespace nlbilevel {

/// Process exit codes, one per error class.
enum ExitCode : int {
    exit_ok = 0,
    exit_unexpected = 1,
    exit_config = 2,
    exit_io = 3,
    exit_solver = 4,
};

namespace detail {

/// Output paths checked up front so a run never stops half-way on a clobber.
class OutputDir {
public:
    OutputDir(const RunConfig& cfg) : root_(cfg.out), overwrite_(cfg.overwrite) {}

    std::filesystem::path claim(const std::string& name) {
        const auto p = root_ / name;
        if (!overwrite_ && std::filesystem::exists(p)) {
            throw IoError(p.string() + " exists (pass --overwrite to replace it)");
        }
        return p;
    }

    void create() const {
        std::error_code ec;
        std::filesystem::create_directories(root_, ec);
        if (ec) {
            throw IoError("cannot create output directory " + root_.string() + ": " + ec.message());
        }
    }

private:
    std::filesystem::path root_;
    bool overwrite_;
};

inline std::string fixed4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

inline std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

struct Sample {
    std::string name;
    Image noisy;
    Image truth;  // empty when not available
};

inline std::vector<Sample> load_samples(const RunConfig& cfg) {
    std::vector<Sample> out;
    const std::size_t n = std::max(cfg.input.size(), cfg.truth.size());
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        if (!cfg.truth.empty()) s.truth = read_image(cfg.truth[i]);
        if (!cfg.input.empty()) {
            s.noisy = read_image(cfg.input[i]);
            s.name = std::filesystem::path(cfg.input[i]).stem().string();
        } else {
            // per-image seed offset keeps batch members independent
            s.noisy = add_gaussian_noise(s.truth, {cfg.sigma2, cfg.seed + i});
            s.name = std::filesystem::path(cfg.truth[i]).stem().string();
        }
        if (!s.truth.empty() && !s.noisy.same_shape(s.truth)) {
            throw ConfigError("input and truth sizes differ for " + s.name);
        }
        out.push_back(std::move(s));
    }
    return out;
}

inline PatchConfig patch_config(const RunConfig& cfg, const Image& img) {
    PatchConfig p;
    p.patch_radius = cfg.rho;
    p.interaction_radius = cfg.eps > 0 ? cfg.eps : default_interaction_radius(img.width(), img.height());
    p.threshold = cfg.iota;
    return p;
}

inline LearnOptions learn_options(const RunConfig& cfg, std::vector<TraceEntry>* trace, std::ostream* log) {
    LearnOptions o;
    o.krylov.method = cfg.krylov == "cg" ? KrylovMethod::cg : KrylovMethod::lgmres;
    o.krylov.tolerance = cfg.krylov_tol;
    o.krylov.max_iterations = cfg.krylov_max_iter;
    o.trust_region.tolerance = cfg.tol;
    o.trust_region.relative_tolerance = cfg.rtol;
    o.trust_region.max_iterations = cfg.max_iter;
    o.trust_region.memory = static_cast<std::size_t>(cfg.memory);
    o.trust_region.initial_radius = cfg.radius0;
    o.trust_region.line_search_points = cfg.line_search;
    o.on_trace = [trace, log](const TraceEntry& e) {
        if (trace) trace->push_back(e);
        if (log && e.step != StepType::rejected) {
            *log << "  iter " << e.iteration << "  j=" << format_double(e.objective)
                 << "  r=" << format_double(e.projected_gradient) << "  radius=" << format_double(e.radius)
                 << "  " << to_string(e.step) << '\n';
        }
    };
    return o;
}

struct SummaryRow {
    std::string image;
    double lambda = std::nan("");
    double weight = std::nan("");
    QualityReport noisy;
    QualityReport denoised;
    int iterations = 0;
    std::string termination;
};

inline void write_summary(OutputDir& dir, const std::string& problem, const std::vector<SummaryRow>& rows,
                          std::ostream& log) {
    CsvWriter csv(dir.claim("summary.csv"), {"problem", "image", "lambda", "weight", "ssim_noisy",
                                             "psnr_noisy", "ssim", "psnr", "loss", "iterations",
                                             "termination"});
    std::ofstream txt(dir.claim("summary.txt"));
    if (!txt) {
        throw IoError("cannot write summary.txt");
    }
    txt << "problem: " << problem << '\n';
    for (const auto& r : rows) {
        csv.row({problem, r.image, r.lambda, r.weight, fixed4(r.noisy.ssim), r.noisy.psnr,
                 fixed4(r.denoised.ssim), r.denoised.psnr, r.denoised.l2_loss,
                 static_cast<long long>(r.iterations), r.termination});
        std::string line = r.image + ": ";
        if (!std::isnan(r.lambda)) line += "lambda " + format_double(r.lambda) + ", ";
        if (!std::isnan(r.weight)) line += "w " + format_double(r.weight) + ", ";
        line += "SSIM " + fixed2(r.noisy.ssim) + " -> " + fixed2(r.denoised.ssim) + ", PSNR " +
                fixed2(r.noisy.psnr) + " -> " + fixed2(r.denoised.psnr) + " dB";
        if (!r.termination.empty()) {
            line += ", " + std::to_string(r.iterations) + " iterations (" + r.termination + ")";
        }
        txt << line << '\n';
        log << line << '\n';
    }
}

inline QualityReport quality_or_empty(const Image& estimate, const Image& truth) {
    if (truth.empty()) return {std::nan(""), std::nan(""), std::nan("")};
    return quality(estimate, truth);
}

}  // namespace detail

/// Writes the synthetic test texture (and a noisy copy) into cfg.out.
inline void run_synth(const RunConfig& cfg, int size, std::ostream& log) {
    detail::OutputDir dir(cfg);
    const auto clean_path = dir.claim("texture.png");
    const auto noisy_path = dir.claim("texture_noisy.png");
    dir.create();
    const Image clean = synthetic_texture(size, size);
    write_image(clean_path, clean);
    const double var = std::isnan(cfg.sigma2) ? 100.0 : cfg.sigma2;
    write_image(noisy_path, add_gaussian_noise(clean, {var, cfg.seed}));
    log << "wrote " << clean_path.string() << " and " << noisy_path.string() << '\n';
}

/// Runs one resolved configuration and writes its artifacts.
inline void run(const RunConfig& cfg, std::ostream& log) {
    using namespace detail;
    if (cfg.problem == "synth") {
        run_synth(cfg, 64, log);
        return;
    }
    std::vector<Sample> samples = load_samples(cfg);

    if (cfg.problem == "metrics") {
        const Sample& s = samples.front();
        if (s.truth.empty()) throw ConfigError("metrics needs --truth");
        const QualityReport q = quality(s.noisy, s.truth);
        log << "ssim,psnr,loss\n"
            << fixed4(q.ssim) << ',' << format_double(q.psnr) << ',' << format_double(q.l2_loss) << '\n';
        return;
    }

    OutputDir dir(cfg);
    std::vector<TraceEntry> trace;
    const LearnOptions opts = learn_options(cfg, &trace, &log);

    if (cfg.problem == "train-batch") {
        std::vector<DissimilarityMatrix> ds;
        std::vector<KernelMatrix> ks;
        for (const auto& s : samples) {
            ds.push_back(build_dissimilarity(s.noisy, patch_config(cfg, s.noisy)));
            ks.push_back(assemble_kernel(ds.back(), cfg.weight));
        }
        std::vector<BatchSample> batch;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            batch.push_back({&samples[i].noisy, &samples[i].truth, &ks[i]});
        }
        std::vector<std::filesystem::path> paths;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            paths.push_back(dir.claim("denoised_" + std::to_string(i) + ".png"));
        }
        const auto trace_path = dir.claim("trace.csv");
        dir.create();
        std::vector<Vector> states;
        const LearnResult r = learn_lambda_batch(batch, cfg.lambda0, cfg.upper, opts, cfg.threads, &states);
        std::vector<SummaryRow> rows;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const Image u = Image::from_interior(samples[i].noisy.width(), samples[i].noisy.height(), 0,
                                                 states[i]);
            write_image(paths[i], u);
            rows.push_back({samples[i].name, r.parameter[0], cfg.weight,
                            quality(samples[i].noisy, samples[i].truth), quality(u, samples[i].truth),
                            r.optimizer.iterations, to_string(r.optimizer.termination)});
        }
        write_trace_csv(trace_path, trace);
        write_summary(dir, cfg.problem, rows, log);
        return;
    }

    const Sample& s = samples.front();
    const int w = s.noisy.width();
    const int h = s.noisy.height();
    const DissimilarityMatrix d = build_dissimilarity(s.noisy, patch_config(cfg, s.noisy));

    if (cfg.problem == "sweep") {
        const auto path = dir.claim("sweep.csv");
        dir.create();
        const Vector lambdas = log_space(cfg.lambda_min, cfg.lambda_max, cfg.lambda_count);
        const Vector weights = log_space(cfg.weight_min, cfg.weight_max, cfg.weight_count);
        const auto points = sweep(s.noisy, s.truth, d, lambdas, weights, opts.krylov);
        CsvWriter csv(path, {"lambda", "weight", "loss"});
        for (const auto& p : points) csv.row({p.lambda, p.weight, p.loss});
        log << "wrote " << points.size() << " grid points to " << path.string() << '\n';
        return;
    }

    const auto denoised_path = dir.claim("denoised.png");
    SummaryRow row;
    row.image = s.name;
    Vector state;

    if (cfg.problem == "denoise") {
        dir.create();
        const KernelMatrix k = assemble_kernel(d, cfg.weight);
        state = denoise(s.noisy, k, cfg.lambda0, opts.krylov).first;
        row.lambda = cfg.lambda0;
        row.weight = cfg.weight;
    } else {
        const auto trace_path = dir.claim("trace.csv");
        std::filesystem::path lambda_png, lambda_raw;
        if (cfg.problem == "learn-lambda-spatial") {
            lambda_png = dir.claim("lambda.png");
            lambda_raw = dir.claim("lambda.f64");
        }
        dir.create();
        LearnResult r;
        if (cfg.problem == "learn-lambda-scalar") {
            r = learn_lambda_scalar(s.noisy, s.truth, assemble_kernel(d, cfg.weight), cfg.lambda0,
                                    cfg.upper, opts);
            row.lambda = r.parameter[0];
            row.weight = cfg.weight;
        } else if (cfg.problem == "learn-lambda-spatial") {
            const auto rep = cfg.spatial_gradient == "riesz" ? SpatialGradient::riesz : SpatialGradient::dual;
            r = learn_lambda_spatial(s.noisy, s.truth, assemble_kernel(d, cfg.weight), cfg.lambda0,
                                     cfg.upper, cfg.beta, opts, rep);
            write_raw_grid(lambda_raw, w + 1, h + 1, r.parameter);
            write_image(lambda_png, normalized_grid_image(w + 1, h + 1, r.parameter));
            double mean = 0.0;
            for (double v : r.fidelity) mean += v;
            row.lambda = mean / static_cast<double>(r.fidelity.size());
            row.weight = cfg.weight;
        } else {
            WeightProblem p;
            p.lambda = cfg.weight_lambda;
            p.initial_weight = cfg.weight0;
            p.kappa = cfg.kappa;
            p.upper = std::isnan(cfg.upper) ? weight_upper_bound(d.max_value(), cfg.bound_factor, cfg.kappa)
                                            : cfg.upper;
            log << "weight bound W = " << format_double(p.upper) << " (on w / kappa)\n";
            r = learn_weight(s.noisy, s.truth, d, p, opts);
            row.lambda = p.lambda;
            row.weight = r.weight;
        }
        state = r.state;
        row.iterations = r.optimizer.iterations;
        row.termination = to_string(r.optimizer.termination);
        write_trace_csv(trace_path, trace);
    }
    const Image u = Image::from_interior(w, h, 0, state);
    write_image(denoised_path, u);
    row.noisy = quality_or_empty(s.noisy, s.truth);
    row.denoised = quality_or_empty(u, s.truth);
    write_summary(dir, cfg.problem, {row}, log);
}

}  // namespace nlbilevel
