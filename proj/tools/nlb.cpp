// Command-line front end: nlb <subcommand> [options]

#include <exception>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "nlbilevel/config.hpp"
#include "nlbilevel/error.hpp"
#include "nlbilevel/run.hpp"

namespace {

const std::map<std::string, std::string> kDescriptions = {
    {"denoise", "denoise an image with fixed lambda and kernel weight"},
    {"learn-lambda-scalar", "learn a constant fidelity weight"},
    {"learn-lambda-spatial", "learn a spatially varying fidelity weight"},
    {"learn-weight", "learn the kernel weight w"},
    {"train-batch", "learn one constant fidelity weight for several images"},
    {"sweep", "tabulate the loss on a lambda x w grid"},
    {"metrics", "SSIM, PSNR and loss of --input against --truth"},
    {"synth", "write the built-in synthetic test texture"},
};

const std::map<std::string, std::string> kOptionHelp = {
    {"out", "output directory"},
    {"preset", "noise level a, b, c or d (sets sigma2, delta and the weight bound factor)"},
    {"sigma2", "noise variance used when the noisy image is synthesized from --truth"},
    {"seed", "noise seed"},
    {"rho", "patch radius"},
    {"eps", "interaction radius (0 picks one from the image size)"},
    {"iota", "kernel entries at or below this are dropped"},
    {"delta", "NLM filtering parameter; w = 1 / delta^2"},
    {"weight", "kernel weight w (overrides --delta)"},
    {"lambda0", "starting (or fixed, for denoise) fidelity weight"},
    {"upper", "upper bound of the parameter box"},
    {"beta", "H1 penalty weight for the spatial problem"},
    {"kappa", "scaling of the weight variable, w = kappa s"},
    {"bound-factor", "factor in the automatic weight bound"},
    {"weight0", "starting kernel weight for learn-weight"},
    {"weight-lambda", "fixed fidelity weight for learn-weight"},
    {"spatial-gradient", "dual or riesz"},
    {"threads", "worker threads for train-batch (0 = hardware)"},
    {"tol", "stop when the projected gradient residual is below this"},
    {"rtol", "also stop when the residual is below rtol * |j|"},
    {"max-iter", "optimizer iteration limit"},
    {"memory", "L-BFGS pairs kept"},
    {"radius0", "initial trust-region radius"},
    {"line-search", "objective evaluations per trial step"},
    {"krylov", "lgmres or cg"},
    {"krylov-tol", "relative residual target of the linear solves"},
    {"krylov-max-iter", "iteration limit of the linear solves"},
    {"lambda-min", "sweep: smallest lambda"},
    {"lambda-max", "sweep: largest lambda"},
    {"lambda-count", "sweep: number of lambdas (log spaced)"},
    {"weight-min", "sweep: smallest w"},
    {"weight-max", "sweep: largest w"},
    {"weight-count", "sweep: number of weights (log spaced)"},
};

}  // namespace

int main(int argc, char** argv) {
    using namespace nlbilevel;
    CLI::App app{"Nonlocal-means denoising with learned parameters"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_file;
    app.add_option("--config", config_file, "key=value file; command-line flags take precedence");

    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
    for (const auto& key : config_keys()) {
        if (key.name == "overwrite" || key.name == "input" || key.name == "truth") continue;
        const auto help = kOptionHelp.find(key.name);
        options[key.name] = app.add_option("--" + key.name, values[key.name],
                                           help == kOptionHelp.end() ? "" : help->second);
    }
    // repeated --input/--truth accumulate
    std::vector<std::string> inputs, truths;
    app.add_option("--input", inputs, "noisy image(s), PNG or PGM");
    app.add_option("--truth", truths, "ground-truth image(s)");
    bool overwrite = false;
    app.add_flag("--overwrite", overwrite, "replace existing output files");

    for (const auto& name : problem_names()) app.add_subcommand(name, kDescriptions.at(name));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_config;
    }

    try {
        RunConfig cfg;
        cfg.problem = app.get_subcommands().front()->get_name();
        if (!config_file.empty()) load_config_file(cfg, config_file);
        for (const auto& [name, opt] : options) {
            if (opt->count() > 0) set_config_value(cfg, name, values[name]);
        }
        if (!inputs.empty()) cfg.input = inputs;
        if (!truths.empty()) cfg.truth = truths;
        if (overwrite) cfg.overwrite = true;
        resolve(cfg);
        std::cout << dump_config(cfg);
        run(cfg, std::cout);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return exit_config;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return exit_io;
    } catch (const SolverError& e) {
        std::cerr << "solver error: " << e.what() << '\n';
        return exit_solver;
    } catch (const OptimizerError& e) {
        std::cerr << "optimizer error: " << e.what() << '\n';
        return exit_solver;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_unexpected;
    }
    return exit_ok;
}
