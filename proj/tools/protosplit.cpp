#include "protosplit/bundle_io.hpp"
#include "protosplit/pipeline.hpp"
#include "protosplit/service.hpp"
#include "protosplit/synthetic.hpp"

#include <CLI11.hpp>
#include <httplib.h>

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace protosplit;

namespace {

constexpr int exit_usage = 1;
constexpr int exit_failure = 2;

void write_report(const fs::path& path, const json& report) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const fs::path temp = path.string() + ".tmp";
    {
        std::ofstream out(temp, std::ios::trunc);
        out << report.dump(2) << "\n";
        if (!out) {
            throw std::runtime_error("cannot write " + temp.string());
        }
    }
    fs::rename(temp, path);
}

json read_json(const fs::path& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

struct DetectFlags {
    std::size_t min_clique = 2;
    std::size_t k = 10;
    double delta_min = 0.05;
    double delta_max = 0.95;
    double delta_step = 0.05;
    std::size_t workers = 1;
    bool no_dedup = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("-q,--min-clique", min_clique, "Minimum concept (clique) size Q")
            ->check(CLI::PositiveNumber);
        cmd->add_option("-k,--patches", k, "Top-activated patches per prototype")->check(CLI::PositiveNumber);
        cmd->add_option("--delta-min", delta_min, "Smallest similarity threshold");
        cmd->add_option("--delta-max", delta_max, "Largest similarity threshold");
        cmd->add_option("--delta-step", delta_step, "Threshold grid step")->check(CLI::PositiveNumber);
        cmd->add_option("--workers", workers, "Threads used by the threshold sweep")->check(CLI::PositiveNumber);
        cmd->add_flag("--no-dedup", no_dedup, "Allow several patches of one image in the top-k");
    }

    DetectionOptions options() const {
        DetectionOptions o;
        o.patch_set_size = k;
        o.dedup_per_image = !no_dedup;
        o.sweep = {delta_min, delta_max, delta_step};
        o.min_clique_size = min_clique;
        o.workers = workers;
        return o;
    }
};

httplib::Server* running_server = nullptr;

void stop_server(int) {
    if (running_server) {
        running_server->stop();
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prototype splitting engine: detect inconsistent prototypes and split them"};
    app.require_subcommand(1);

    SynthConfig synth;
    std::string gen_out;
    auto* generate = app.add_subcommand("generate", "Write a synthetic bundle with planted entangled prototypes");
    generate->add_option("-o,--out", gen_out, "Bundle directory")->required();
    generate->add_option("--seed", synth.seed, "Generator seed");
    generate->add_option("--feature-width", synth.feature_width, "Feature width C");
    generate->add_option("--prototypes", synth.prototypes, "Prototype count D");
    generate->add_option("--classes", synth.classes, "Class count K");
    generate->add_option("--parts", synth.parts, "Part label count");
    generate->add_option("--patches-per-part", synth.patches_per_part, "Patches per concept cluster");
    generate->add_option("--entangled", synth.entangled_count, "Planted two-concept prototypes");
    generate->add_option("--spread", synth.cluster_spread, "Within-cluster angular spread");

    std::string bundle_path;
    std::string detect_report;
    DetectFlags detect_flags;
    auto* detect = app.add_subcommand("detect", "Rank prototypes by inter-clique dissimilarity");
    detect->add_option("-b,--bundle", bundle_path, "Bundle directory")->required()->check(CLI::ExistingDirectory);
    detect->add_option("-r,--report", detect_report, "Detection report output")->required();
    detect_flags.attach(detect);

    std::string split_in_report;
    std::string split_labels;
    std::string split_out;
    std::string split_report;
    std::string config_path;
    std::size_t top_n = 10;
    std::uint64_t seed = 0;
    std::size_t split_q = 2;
    bool keep_something_else = true;
    auto* split = app.add_subcommand("split", "Split prototypes automatically or from a labels file");
    split->add_option("-b,--bundle", bundle_path, "Bundle directory")->required()->check(CLI::ExistingDirectory);
    auto* auto_opt = split->add_option("--auto", split_in_report, "Detection report driving automatic splits")
                         ->check(CLI::ExistingFile);
    auto* labels_opt = split->add_option("--labels", split_labels, "Labels file: prototype -> patch -> A|B|SomethingElse")
                           ->check(CLI::ExistingFile);
    auto_opt->excludes(labels_opt);
    split->add_option("--top", top_n, "Number of ranked prototypes to split in auto mode");
    split->add_option("-o,--out", split_out, "Output bundle directory (default: update in place)");
    split->add_option("-r,--report", split_report, "Split report output")->required();
    split->add_option("-c,--config", config_path, "JSON overrides for split hyperparameters")->check(CLI::ExistingFile);
    split->add_option("--seed", seed, "Optimizer seed");
    split->add_option("-q,--min-clique", split_q, "Minimum concept size Q for labels mode");
    split->add_option("--something-else-to-reference", keep_something_else,
                      "Use SomethingElse patches as reference patches");

    std::string metrics_split_report;
    std::string metrics_out;
    std::size_t metrics_k = 10;
    auto* metrics = app.add_subcommand("metrics", "Purity and accuracy before and after splitting");
    metrics->add_option("-b,--bundle", bundle_path, "Split bundle directory")->required()->check(CLI::ExistingDirectory);
    metrics->add_option("-s,--split-report", metrics_split_report, "Split report")->required()->check(CLI::ExistingFile);
    metrics->add_option("-o,--out", metrics_out, "Metrics report output")->required();
    metrics->add_option("-k,--patches", metrics_k, "Top patches per channel")->check(CLI::PositiveNumber);

    ServiceConfig service_config;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string log_path;
    std::string save_path;
    bool detect_on_start = false;
    DetectFlags serve_detect;
    auto* serve = app.add_subcommand("serve", "Run the HTTP API");
    serve->add_option("-b,--bundle", bundle_path, "Bundle directory")
        ->envname("PROTOSPLIT_BUNDLE")
        ->required()
        ->check(CLI::ExistingDirectory);
    serve->add_option("--host", host, "Listen address")->envname("PROTOSPLIT_HOST");
    serve->add_option("--port", port, "Listen port")->envname("PROTOSPLIT_PORT");
    serve->add_option("--jobs", service_config.workers, "Concurrent background jobs")
        ->envname("PROTOSPLIT_WORKERS")
        ->check(CLI::PositiveNumber);
    serve->add_option("--log", log_path, "Session log (JSON lines)")->envname("PROTOSPLIT_LOG");
    serve->add_option("--save", save_path, "Write the bundle here after each committed split");
    serve->add_option("-c,--config", config_path, "JSON overrides for split hyperparameters")->check(CLI::ExistingFile);
    serve->add_option("--seed", service_config.seed, "Optimizer seed");
    serve->add_option("--something-else-to-reference", service_config.something_else_to_reference,
                      "Use SomethingElse patches as reference patches");
    serve->add_flag("--detect", detect_on_start, "Run detection before accepting requests");
    serve_detect.attach(serve);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*generate) {
            write_bundle(bundle_from_workbench(generate_bank(synth)), gen_out);
            std::cout << "wrote " << gen_out << "\n";
            return 0;
        }

        if (*detect) {
            const auto bundle = read_bundle(bundle_path);
            const auto report = run_detection(bundle.corpus, bundle.bank, detect_flags.options());
            write_report(detect_report, to_json(report));
            std::cout << "threshold " << report.threshold << ", flagged " << report.ranking.size() << " of "
                      << bundle.bank.num_prototypes() << "\n";
            return 0;
        }

        if (*split) {
            if (split_in_report.empty() == split_labels.empty()) {
                std::cerr << "split: pass exactly one of --auto REPORT or --labels FILE\n";
                return exit_usage;
            }
            auto bundle = read_bundle(bundle_path);
            SplitHyperparams hyper;
            HeadFinetuneConfig head;
            if (!config_path.empty()) {
                apply_overrides(read_json(config_path), hyper, head);
            }
            SplitReport report;
            if (!split_in_report.empty()) {
                const auto detection = detection_report_from_json(read_json(split_in_report));
                if (detection.prototypes.size() != bundle.bank.num_prototypes()) {
                    throw std::runtime_error("detection report does not describe this bundle");
                }
                report = auto_split(bundle.corpus, bundle.bank, detection, top_n, hyper, head, seed);
            } else {
                const auto labels = labels_from_json(read_json(split_labels));
                try {
                    report = labeled_split(bundle.corpus, bundle.bank, labels, hyper, head, split_q,
                                           keep_something_else, seed);
                } catch (const SplitError& e) {
                    std::cerr << "split rejected: " << e.what() << "\n";
                    return exit_failure;
                }
            }
            write_bundle(bundle, split_out.empty() ? bundle_path : split_out);
            write_report(split_report, to_json(report));
            std::size_t failed = 0;
            for (const auto& s : report.splits) {
                std::cout << "prototype " << s.prototype << ": " << s.status;
                if (s.status != "failed") {
                    std::cout << " in " << s.steps << " steps, new channel " << s.new_channel;
                } else {
                    std::cout << " (" << s.error << ")";
                    ++failed;
                }
                std::cout << "\n";
            }
            std::cout << "accuracy " << report.accuracy_before << " -> " << report.accuracy_after << "\n";
            return failed == 0 ? 0 : exit_failure;
        }

        if (*metrics) {
            const auto bundle = read_bundle(bundle_path);
            const auto report = split_report_from_json(read_json(metrics_split_report));
            PartAnnotations annotations;
            if (bundle.annotations) {
                annotations = *bundle.annotations;
            } else if (bundle.ground_truth) {
                annotations = bundle.ground_truth->annotations();
            } else {
                throw std::runtime_error("bundle has neither part annotations nor ground truth");
            }
            const auto before = reconstruct_original(bundle.bank, report);
            const auto m = compute_metrics(bundle.corpus, before, bundle.bank, report, annotations, metrics_k);
            write_report(metrics_out, to_json(m));
            std::cout << "pattern purity (split channels) " << m.pattern_purity.split_channels_before << " -> "
                      << m.pattern_purity.split_channels_after << ", accuracy " << m.accuracy_before << " -> "
                      << m.accuracy_after << "\n";
            return 0;
        }

        if (*serve) {
            if (!config_path.empty()) {
                apply_overrides(read_json(config_path), service_config.hyper, service_config.head);
            }
            service_config.detection = serve_detect.options();
            if (!log_path.empty()) {
                service_config.log_path = log_path;
            }
            if (!save_path.empty()) {
                service_config.save_path = save_path;
            }
            Service service(read_bundle(bundle_path), service_config);
            if (detect_on_start) {
                service.detect_now();
            }
            httplib::Server server;
            register_routes(server, service);
            running_server = &server;
            std::signal(SIGINT, stop_server);
            std::signal(SIGTERM, stop_server);
            std::cout << "listening on http://" << host << ":" << port << "/api/v1" << std::endl;
            if (!server.listen(host, port)) {
                std::cerr << "cannot listen on " << host << ":" << port << "\n";
                return exit_failure;
            }
            running_server = nullptr;
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_failure;
    }
    return exit_usage;
}
