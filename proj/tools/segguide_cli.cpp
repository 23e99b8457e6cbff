// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "segguide/evalharness.hpp"
#include "segguide/service.hpp"

#include <CLI11.hpp>

namespace fs = std::filesystem;
using namespace segguide;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitStage = 3;
constexpr int kExitPort = 4;

ClassVocabulary load_vocab(const fs::path& path) {
    const Bytes text = read_file(path);
    return ClassVocabulary::from_json(std::string(text.begin(), text.end()));
}

/// "toy" or a path to a backend config document.
nlohmann::json backend_config(const std::string& backend, int width, int height) {
    if (backend == "toy") {
        return toy_backend_config(width, height);
    }
    const Bytes text = read_file(backend);
    try {
        return nlohmann::json::parse(text.begin(), text.end());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("backend config " + backend + " is not valid JSON: " + e.what());
    }
}

/// "alpha_clip,alpha_seg_0[,alpha_seg_1...]"; a single alpha_seg applies
/// to every guide.
nlohmann::json parse_weights(const std::string& text) {
    std::vector<double> values;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            values.push_back(std::stod(item, &used));
            if (used != item.size()) {
                throw std::invalid_argument(item);
            }
        } catch (const std::exception&) {
            throw ValidationError("weights", "'" + item + "' is not a number");
        }
    }
    if (values.size() < 2) {
        throw ValidationError("weights", "expected alpha_clip,alpha_seg[,alpha_seg...]");
    }
    nlohmann::json w{{"alpha_clip", values[0]}};
    if (values.size() == 2) {
        w["alpha_seg"] = values[1];
    } else {
        w["alpha_seg"] = std::vector<double>(values.begin() + 1, values.end());
    }
    return w;
}

void print_validation(const ValidationError& e) {
    std::cerr << "error: invalid job\n";
    for (const auto& f : e.fields()) {
        std::cerr << "  " << f.field << ": " << f.message << "\n";
    }
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
    std::string mask, vocab, prompt, weights, backend = "toy", out_dir = ".";
    std::optional<double> strength;
    std::uint64_t seed = 0;
    int n_stage1 = 1, n_stage2 = 1;
    std::optional<int> steps;
};

int run_generate(const GenerateArgs& a) {
    try {
        const auto vocab = load_vocab(a.vocab);
        const SegMask mask = decode_mask(read_file(a.mask), vocab);
        const Pipeline pipeline(make_backends(backend_config(a.backend, mask.width(), mask.height()), vocab));

        nlohmann::json spec{{"prompt", a.prompt},
                            {"mask_path", fs::absolute(a.mask).string()},
                            {"vocab_path", fs::absolute(a.vocab).string()},
                            {"seed", a.seed},
                            {"mode", "auto"},
                            {"fan_out", {{"n_stage1", a.n_stage1}, {"n_stage2", a.n_stage2}}}};
        if (!a.weights.empty()) {
            spec["weights"] = parse_weights(a.weights);
        }
        if (a.strength) {
            spec["refine"]["strength"] = *a.strength;
        }
        if (a.steps) {
            spec["optimizer"]["max_steps"] = *a.steps;
        }
        GenerationJob job = job_from_spec(spec, fs::current_path(), pipeline);
        job.id = "cli";
        job = pipeline.run_job(std::move(job), RunMode::Auto);

        const fs::path out(a.out_dir);
        fs::create_directories(out);
        nlohmann::json traces = nlohmann::json::array();
        for (std::size_t i = 0; i < job.stage1.size(); ++i) {
            write_file(out / ("stage1_" + std::to_string(i) + ".png"), encode_png(job.stage1[i].image));
            traces.push_back(trace_to_json(job.stage1[i]));
        }
        for (std::size_t k = 0; k < job.stage2.size(); ++k) {
            const auto& r = job.stage2[k];
            const std::string suffix = r.id.substr(3);  // "s2-i-j" -> "i-j"
            std::string name = "stage2_" + suffix + ".png";
            std::replace(name.begin(), name.end(), '-', '_');
            write_file(out / name, encode_png(r.image));
        }
        write_file(out / "trace.json", traces.dump(2));
        write_file(out / "job.json", job_to_json(job).dump(2));

        if (job.status != JobStatus::Done) {
            std::cerr << "error: " << job.failed_stage << " failed: " << job.diagnostic << "\n";
            return kExitStage;
        }
        std::cout << "wrote " << job.stage1.size() << " stage-1 and " << job.stage2.size() << " stage-2 images to "
                  << out.string() << "\n";
        return 0;
    } catch (const ValidationError& e) {
        print_validation(e);
        return kExitValidation;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::string manifest, backend, vocab, out_dir = ".";
    bool filter_off = false;
    bool compare_unguided = false;
    int jobs = 1;
    std::optional<int> steps;
};

/// Vocabulary of the first manifest line, for manifests without --vocab.
ClassVocabulary manifest_vocab(const fs::path& manifest) {
    std::ifstream in(manifest);
    if (!in) {
        throw NotFoundError("cannot open manifest " + manifest.string());
    }
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const auto doc = nlohmann::json::parse(line);
            fs::path p = doc.at("vocab_path").get<std::string>();
            return load_vocab(p.is_absolute() ? p : manifest.parent_path() / p);
        } catch (const nlohmann::json::exception& e) {
            throw ManifestError(number, e.what());
        } catch (const Error& e) {
            throw ManifestError(number, e.what());
        }
    }
    throw ConfigError("manifest " + manifest.string() + " has no records");
}

int run_evaluate(const EvaluateArgs& a) {
    try {
        const auto vocab = a.vocab.empty() ? manifest_vocab(a.manifest) : load_vocab(a.vocab);
        const auto records = load_manifest(a.manifest, vocab);
        if (records.empty()) {
            throw ConfigError("manifest " + a.manifest + " has no records");
        }
        const auto& first = records.front().target();
        const Pipeline pipeline(make_backends(backend_config(a.backend, first.width(), first.height()), vocab));

        FilterSettings settings = FilterSettings::standard(vocab);
        settings.enabled = !a.filter_off;
        const FilterOutcome filtered = filter_records(records, settings);

        OptimizerConfig opt;
        opt.weights = LossWeights::uniform(pipeline.backends().segmenters.size());
        if (a.steps) {
            opt.max_steps = *a.steps;
        }
        EvalOptions options;
        options.jobs = a.jobs;
        std::vector<IoUReport> reports;
        reports.push_back(evaluate(filtered.kept, pipeline_runner(pipeline, opt, RefineConfig{}),
                                   *pipeline.backends().eval_segmenter, settings.fingerprint(), options));
        if (a.compare_unguided) {
            OptimizerConfig unguided = opt;
            std::fill(unguided.weights.alpha_seg.begin(), unguided.weights.alpha_seg.end(), 0.0);
            options.method = "TCIG alpha_s=0";
            reports.push_back(evaluate(filtered.kept, pipeline_runner(pipeline, unguided, RefineConfig{}),
                                       *pipeline.backends().eval_segmenter, settings.fingerprint(), options));
        }

        const auto refs = reference_rows();
        std::string text = render_report(reports, refs);
        text += "filter " + std::string(settings.enabled ? "on" : "off") + ": kept " +
                std::to_string(filtered.kept.size()) + " of " + std::to_string(filtered.total) +
                " (rejected: excluded class " + std::to_string(filtered.rejected_excluded_class) + ", count " +
                std::to_string(filtered.rejected_count) + ", area " + std::to_string(filtered.rejected_area) + ")\n";

        nlohmann::json doc{{"reports", nlohmann::json::array()},
                           {"filter",
                            {{"settings", settings.to_json()},
                             {"total", filtered.total},
                             {"kept", filtered.kept.size()},
                             {"rejected_excluded_class", filtered.rejected_excluded_class},
                             {"rejected_count", filtered.rejected_count},
                             {"rejected_area", filtered.rejected_area}}}};
        for (const auto& r : reports) {
            doc["reports"].push_back(r.to_json());
        }
        const fs::path out(a.out_dir);
        fs::create_directories(out);
        write_file(out / "report.txt", text);
        write_file(out / "report.json", doc.dump(2));
        std::cout << text;
        return 0;
    } catch (const ValidationError& e) {
        print_validation(e);
        return kExitValidation;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
}

// ---------------------------------------------------------------------------

int run_serve(const std::string& config_path, std::optional<int> port) {
    // Block termination signals in every thread; one thread waits for them.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    std::unique_ptr<JobService> service;
    try {
        ServiceConfig config = ServiceConfig::from_file(config_path);
        config.apply_env();
        if (port) {
            config.port = *port;
        }
        service = std::make_unique<JobService>(config);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }

    HttpServer server(*service);
    int bound = 0;
    try {
        bound = server.bind(service->config().host, service->config().port);
    } catch (const PortInUseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitPort;
    }
    std::cout << "listening on http://" << service->config().host << ":" << bound << std::endl;

    std::thread waiter([&] {
        int sig = 0;
        sigwait(&signals, &sig);
        server.stop();
    });
    server.listen();
    service->shutdown();
    // Wake the waiter if listen() ended for another reason.
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
    std::cout << "stopped" << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Segmentation-guided two-stage image generation"};
    app.require_subcommand(1);

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "Run one auto-mode job in-process");
    g->add_option("--mask", gen.mask, "Target mask index map (PNG or PGM)")->required();
    g->add_option("--vocab", gen.vocab, "Vocabulary sidecar JSON")->required();
    g->add_option("--prompt", gen.prompt, "Text prompt")->required();
    g->add_option("--weights", gen.weights, "alpha_clip,alpha_seg[,alpha_seg...]");
    g->add_option("--strength", gen.strength, "Stage-2 strength in [0,1]");
    g->add_option("--seed", gen.seed, "Base seed");
    g->add_option("--n-stage1", gen.n_stage1, "Stage-1 candidates");
    g->add_option("--n-stage2", gen.n_stage2, "Stage-2 refinements per candidate");
    g->add_option("--steps", gen.steps, "Stage-1 step budget");
    g->add_option("--out-dir", gen.out_dir, "Output directory");
    g->add_option("--backend", gen.backend, "'toy' or a backend config JSON file");

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "Filter, generate and score a manifest");
    e->add_option("--manifest", ev.manifest, "JSON-lines manifest")->required();
    e->add_option("--backend", ev.backend, "'toy' or a backend config JSON file")->required();
    e->add_option("--vocab", ev.vocab, "Vocabulary (default: the manifest's)");
    e->add_flag("--filter-off", ev.filter_off, "Evaluate every record");
    e->add_flag("--compare-unguided", ev.compare_unguided, "Add an alpha_s=0 arm with the same seeds");
    e->add_option("--jobs", ev.jobs, "Records evaluated in parallel")->check(CLI::PositiveNumber);
    e->add_option("--steps", ev.steps, "Stage-1 step budget");
    e->add_option("--out-dir", ev.out_dir, "Output directory");

    std::string config;
    std::optional<int> port;
    auto* s = app.add_subcommand("serve", "Run the HTTP job service");
    s->add_option("--config", config, "Service config JSON")->required();
    s->add_option("--port", port, "Port (overrides the config; 0 picks one)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        std::cerr << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
        return kExitValidation;
    }

    if (g->parsed()) {
        return run_generate(gen);
    }
    if (e->parsed()) {
        return run_evaluate(ev);
    }
    return run_serve(config, port);
}
