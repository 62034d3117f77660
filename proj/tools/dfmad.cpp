// dfmad: train, evaluate and compare differential morphing-attack detectors.
//
// Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or
// arguments, 3 I/O error, 4 checkpoint/dataset incompatibility, 5 protocol
// error, 6 numeric failure during training.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dfmad/error.hpp"
#include "dfmad/harness.hpp"

namespace {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kValidation = 2,
    kIo = 3,
    kCompatibility = 4,
    kProtocol = 5,
    kNumeric = 6,
};

void print_report(const std::string& label, const dfmad::MetricsReport& r)
{
    std::printf("%s: d_eer=%.4f%% (threshold %.6g)", label.c_str(), r.d_eer.rate, r.d_eer.threshold);
    for (const auto& b : r.bscer_at) {
        std::printf(" bscer@macer%g=%.4f%%", b.macer_target, b.point.rate);
    }
    std::printf(" [%zu bona fide, %zu morph]\n", r.num_bona_fide, r.num_morph);
    if (r.flat_scores) {
        std::fprintf(stderr, "warning: %s: every score is identical, the error rates are degenerate\n", label.c_str());
    }
}

struct CommonOptions {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    bool quiet = false;
};

void add_common(CLI::App* cmd, CommonOptions& opts)
{
    cmd->add_option("-c,--config", opts.config, "Experiment INI file")->required()->check(CLI::ExistingFile);
    cmd->add_option("-s,--set", opts.overrides, "Override a config field, section.key=value (repeatable)");
    cmd->add_option("-o,--out", opts.out,
                    "Output root (default: experiment.output_root, $DFMAD_OUTPUT_ROOT or ./runs)");
    cmd->add_flag("-q,--quiet", opts.quiet, "No progress output");
}

dfmad::ExperimentConfig load_config(const CommonOptions& opts)
{
    auto config = dfmad::ExperimentConfig::load(opts.config, opts.overrides);
    if (!opts.out.empty()) {
        config.output_root = opts.out;
    }
    if (opts.quiet) {
        config.verbose = false;
    }
    return config;
}

int run(int argc, char** argv)
{
    CLI::App app{"Differential morphing attack detection with LoRA-adapted transformer encoders"};
    app.require_subcommand(1);

    CommonOptions common;

    auto* train = app.add_subcommand("train", "Train a detector and evaluate it on the test split");
    add_common(train, common);

    auto* eval = app.add_subcommand("eval", "Evaluate a saved detector on the configured test split");
    add_common(eval, common);
    std::string model_dir;
    eval->add_option("-m,--model", model_dir, "Checkpoint directory written by train")->required();

    auto* grid = app.add_subcommand("grid", "LoRA hyperparameter grid search");
    add_common(grid, common);
    std::optional<unsigned> threads;
    grid->add_option("-j,--threads", threads, "Grid cells trained in parallel");

    auto* protocol = app.add_subcommand("protocol", "Run known_attack_cross, unknown_attack_loo or ablation_smad");
    add_common(protocol, common);
    std::string protocol_name;
    protocol->add_option("-p,--protocol", protocol_name, "Protocol (overrides experiment.protocol)");

    auto* gen = app.add_subcommand("gen-data", "Write the configured synthetic benchmark to disk");
    add_common(gen, common);
    std::string data_dir;
    gen->add_option("-d,--dir", data_dir, "Dataset directory")->required();

    auto* metrics = app.add_subcommand("metrics", "Metrics from an external score CSV");
    std::string scores;
    std::string metrics_out;
    std::size_t det_resolution = 0;
    metrics->add_option("-i,--scores", scores, "CSV with header pair_id,label,score,tool_tag")
        ->required()
        ->check(CLI::ExistingFile);
    metrics->add_option("-o,--out", metrics_out, "Output directory")->required();
    metrics->add_option("--det-resolution", det_resolution, "Maximum DET points (0 = all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kValidation;
    }

    if (*metrics) {
        print_report(scores, dfmad::cmd_metrics(scores, metrics_out, det_resolution));
        return kOk;
    }

    if (*protocol && !protocol_name.empty()) {
        common.overrides.push_back("experiment.protocol=" + protocol_name);
    }
    auto config = load_config(common);

    if (*train) {
        const auto summary = dfmad::cmd_train(config);
        print_report(summary.label, summary.report);
        std::printf("outputs: %s\n", summary.dir.string().c_str());
    } else if (*eval) {
        const auto summary = dfmad::cmd_eval(config, model_dir);
        print_report(summary.label, summary.report);
        std::printf("outputs: %s\n", summary.dir.string().c_str());
    } else if (*grid) {
        if (threads) {
            config.grid_threads = *threads;
        }
        for (const auto& cell : dfmad::cmd_grid(config)) {
            char label[96];
            std::snprintf(label, sizeof(label), "r=%zu alpha=%g dropout=%g", cell.lora.rank, cell.lora.alpha,
                          cell.lora.dropout);
            if (!cell.ok()) {
                std::printf("%s: failed: %s\n", label, cell.error.c_str());
                continue;
            }
            print_report(std::string(label) + " A->B", cell.a_to_b);
            print_report(std::string(label) + " B->A", cell.b_to_a);
            std::printf("%s: mean d_eer=%.4f%%%s\n", label, cell.mean_d_eer, cell.best ? " (best)" : "");
        }
        std::printf("outputs: %s\n", (config.output_dir() / "grid.csv").string().c_str());
    } else if (*protocol) {
        for (const auto& run : dfmad::cmd_protocol(config)) {
            print_report(run.label + " [" + run.train_on + " -> " + run.test_on + "]", run.report);
        }
        std::printf("outputs: %s\n", (config.output_dir() / "protocol.csv").string().c_str());
    } else if (*gen) {
        const auto split = dfmad::cmd_gen_data(config, data_dir);
        const auto tr = split.train_counts();
        const auto te = split.test_counts();
        std::printf("wrote %s/manifest.csv: train %zu bona fide + %zu morph, test %zu bona fide + %zu morph\n",
                    data_dir.c_str(), tr.bona_fide, tr.morph, te.bona_fide, te.morph);
    }
    return kOk;
}

} // namespace

int main(int argc, char** argv)
{
    try {
        return run(argc, argv);
    } catch (const dfmad::ValidationError& e) {
        std::cerr << "invalid configuration: " << e.what() << '\n';
        return kValidation;
    } catch (const dfmad::ConfigError& e) {
        std::cerr << "invalid configuration: " << e.what() << '\n';
        return kValidation;
    } catch (const dfmad::IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kIo;
    } catch (const dfmad::CompatibilityError& e) {
        std::cerr << "incompatible inputs: " << e.what() << '\n';
        return kCompatibility;
    } catch (const dfmad::ProtocolError& e) {
        std::cerr << "protocol error: " << e.what() << '\n';
        return kProtocol;
    } catch (const dfmad::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
}
