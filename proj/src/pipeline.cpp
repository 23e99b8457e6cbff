// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#include "segguide/pipeline.hpp"

#include <algorithm>
#include <array>

#include <openssl/evp.h>

namespace segguide {

namespace {

constexpr std::array<std::pair<JobStatus, const char*>, 6> kStatusNames{{
    {JobStatus::Pending, "pending"},
    {JobStatus::Stage1Running, "stage1_running"},
    {JobStatus::AwaitingSelection, "awaiting_selection"},
    {JobStatus::Stage2Running, "stage2_running"},
    {JobStatus::Done, "done"},
    {JobStatus::Failed, "failed"},
}};

}  // namespace

std::string to_string(JobStatus status) {
    for (const auto& [s, name] : kStatusNames) {
        if (s == status) {
            return name;
        }
    }
    return "unknown";
}

JobStatus job_status_from_string(const std::string& s) {
    for (const auto& [status, name] : kStatusNames) {
        if (s == name) {
            return status;
        }
    }
    throw ConfigError("unknown job status '" + s + "'");
}

std::string to_string(RunMode mode) { return mode == RunMode::Auto ? "auto" : "interactive"; }

RunMode run_mode_from_string(const std::string& s) {
    if (s == "auto") {
        return RunMode::Auto;
    }
    if (s == "interactive") {
        return RunMode::Interactive;
    }
    throw ConfigError("mode must be 'auto' or 'interactive', got '" + s + "'");
}

bool is_legal_transition(JobStatus from, JobStatus to) {
    switch (from) {
        case JobStatus::Pending:
            return to == JobStatus::Stage1Running || to == JobStatus::Failed;
        case JobStatus::Stage1Running:
            return to == JobStatus::AwaitingSelection || to == JobStatus::Failed;
        case JobStatus::AwaitingSelection:
            return to == JobStatus::Stage2Running;
        case JobStatus::Stage2Running:
            return to == JobStatus::Done || to == JobStatus::Failed;
        case JobStatus::Done:
        case JobStatus::Failed:
            return false;
    }
    return false;
}

void GenerationJob::transition(JobStatus next) {
    if (!is_legal_transition(status, next)) {
        throw StateError("job " + id + " cannot move from " + to_string(status) + " to " + to_string(next));
    }
    status = next;
    history.push_back(next);
}

void GenerationJob::fail(const std::string& stage, const std::string& why) {
    transition(JobStatus::Failed);
    failed_stage = stage;
    diagnostic = why;
}

const StageOneResult* GenerationJob::find_stage1(const std::string& result_id) const {
    for (const auto& r : stage1) {
        if (r.id == result_id) {
            return &r;
        }
    }
    return nullptr;
}

std::string stage1_id(int i) { return "s1-" + std::to_string(i); }

std::string stage2_id(int i, int j) { return "s2-" + std::to_string(i) + "-" + std::to_string(j); }

// ---------------------------------------------------------------------------

Pipeline::Pipeline(BackendSet backends) : backends_(std::move(backends)) {
    if (!backends_.generator || !backends_.scorer || !backends_.refiner) {
        throw ConfigError("pipeline needs a generator, a scorer and a refiner");
    }
}

void Pipeline::validate(const GenerationJob& job) const {
    std::vector<FieldError> errors;
    auto merge = [&errors](auto&& check) {
        try {
            check();
        } catch (const ValidationError& e) {
            errors.insert(errors.end(), e.fields().begin(), e.fields().end());
        }
    };

    try {
        backends_.scorer->validate_prompt(job.prompt);
    } catch (const Error& e) {
        errors.push_back({"prompt", e.what()});
    }

    const auto& gen = *backends_.generator;
    bool mask_ok = true;
    if (job.target.width() != gen.width() || job.target.height() != gen.height()) {
        errors.push_back({"mask", "is " + std::to_string(job.target.width()) + "x" +
                                      std::to_string(job.target.height()) + " but the generator renders " +
                                      std::to_string(gen.width()) + "x" + std::to_string(gen.height())});
        mask_ok = false;
    }
    if (job.target.num_classes() != backends_.vocab.size()) {
        errors.push_back({"mask", "has " + std::to_string(job.target.num_classes()) + " class planes, vocabulary has " +
                                      std::to_string(backends_.vocab.size())});
        mask_ok = false;
    } else if (!job.target.is_hard()) {
        errors.push_back({"mask", "must be a hard mask"});
        mask_ok = false;
    }
    if (mask_ok) {
        try {
            route_guides(job.target, register_guides(backends_.segmenters), &backends_.vocab);
        } catch (const OrphanClassError& e) {
            errors.push_back({"mask", e.what()});
        }
    }

    merge([&] { job.optimizer.validate(backends_.segmenters.size()); });
    merge([&] { job.refine.validate(); });
    if (job.n_stage1 < 1) {
        errors.push_back({"n_stage1", "must be a positive integer"});
    }
    if (job.n_stage2_per_stage1 < 1) {
        errors.push_back({"n_stage2", "must be a positive integer"});
    }
    if (!errors.empty()) {
        throw ValidationError(std::move(errors));
    }
}

GenerationJob Pipeline::run_job(GenerationJob job, RunMode mode, const PipelineObserver& observer) const {
    if (job.status != JobStatus::Pending) {
        throw StateError("job " + job.id + " is " + to_string(job.status) + ", expected pending");
    }
    validate(job);
    job.mode = mode;

    auto notify = [&] {
        if (observer.on_status) {
            observer.on_status(job);
        }
    };

    job.transition(JobStatus::Stage1Running);
    notify();
    const auto stage_one = StageOneBackends::from(backends_);
    for (int i = 0; i < job.n_stage1; ++i) {
        StepObserver step_observer;
        if (observer.on_step) {
            step_observer = [&, i](const TraceRow& row) { observer.on_step(job, i, row); };
        }
        try {
            StageOneResult r =
                optimize(job.prompt, job.target, stage_one, job.optimizer, stage1_seed(job.seed, i), step_observer);
            r.id = stage1_id(i);
            job.stage1.push_back(std::move(r));
        } catch (const std::exception& e) {
            job.fail("stage1", stage1_id(i) + ": " + e.what());
            notify();
            return job;
        }
        if (observer.on_stage1) {
            observer.on_stage1(job, job.stage1.back());
        }
    }
    job.transition(JobStatus::AwaitingSelection);
    notify();
    if (mode == RunMode::Interactive) {
        return job;
    }

    std::vector<int> all(static_cast<std::size_t>(job.n_stage1));
    for (int i = 0; i < job.n_stage1; ++i) {
        all[static_cast<std::size_t>(i)] = i;
    }
    job.transition(JobStatus::Stage2Running);
    notify();
    run_stage2(job, all, job.refine, observer);
    return job;
}

GenerationJob Pipeline::select_candidates(GenerationJob job, const std::vector<std::string>& stage1_ids,
                                          const RefineOverride& override, const PipelineObserver& observer) const {
    if (job.status != JobStatus::AwaitingSelection) {
        throw StateError("job " + job.id + " is " + to_string(job.status) + ", not awaiting_selection");
    }
    if (stage1_ids.empty()) {
        throw ValidationError("stage1_ids", "select at least one candidate");
    }
    std::vector<int> chosen;
    for (const auto& sid : stage1_ids) {
        const auto it = std::find_if(job.stage1.begin(), job.stage1.end(),
                                     [&](const StageOneResult& r) { return r.id == sid; });
        if (it == job.stage1.end()) {
            throw NotFoundError("job " + job.id + " has no Stage-1 candidate '" + sid + "'");
        }
        const int index = static_cast<int>(it - job.stage1.begin());
        if (std::find(chosen.begin(), chosen.end(), index) != chosen.end()) {
            throw ValidationError("stage1_ids", "candidate '" + sid + "' selected twice");
        }
        chosen.push_back(index);
    }
    RefineConfig config = job.refine;
    if (override.strength) {
        config.strength = *override.strength;
    }
    if (override.steps) {
        config.steps = *override.steps;
    }
    config.validate();

    job.transition(JobStatus::Stage2Running);
    if (observer.on_status) {
        observer.on_status(job);
    }
    run_stage2(job, chosen, config, observer);
    return job;
}

void Pipeline::run_stage2(GenerationJob& job, const std::vector<int>& candidates, const RefineConfig& config,
                          const PipelineObserver& observer) const {
    for (int i : candidates) {
        const StageOneResult& parent = job.stage1[static_cast<std::size_t>(i)];
        for (int j = 0; j < job.n_stage2_per_stage1; ++j) {
            RefineConfig rc = config;
            rc.seed = stage2_seed(job.seed, i, j);
            try {
                StageTwoResult r = refine(parent.image, parent.id, job.prompt, rc, *backends_.refiner);
                r.id = stage2_id(i, j);
                job.stage2.push_back(std::move(r));
            } catch (const std::exception& e) {
                job.fail("stage2", stage2_id(i, j) + ": " + e.what());
                if (observer.on_status) {
                    observer.on_status(job);
                }
                return;
            }
            if (observer.on_stage2) {
                observer.on_stage2(job, job.stage2.back());
            }
        }
    }
    job.transition(JobStatus::Done);
    if (observer.on_status) {
        observer.on_status(job);
    }
}

// ---------------------------------------------------------------------------
// Documents
// ---------------------------------------------------------------------------

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    std::string clean;
    for (char c : text) {
        if (c != '\n' && c != '\r' && c != ' ') {
            clean.push_back(c);
        }
    }
    if (clean.size() % 4 != 0) {
        throw ConfigError("base64 text length is not a multiple of 4");
    }
    std::vector<std::uint8_t> out(3 * clean.size() / 4);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                  static_cast<int>(clean.size()));
    if (n < 0) {
        throw ConfigError("invalid base64 text");
    }
    // EVP_DecodeBlock counts padding bytes as output.
    std::size_t size = static_cast<std::size_t>(n);
    for (auto it = clean.rbegin(); it != clean.rend() && *it == '='; ++it) {
        --size;
    }
    out.resize(size);
    return out;
}

Bytes mask_index_png(const SegMask& mask) {
    if (!mask.is_hard()) {
        throw RangeError("mask must be hard for serialization");
    }
    RawImage raw{mask.width(), mask.height(), 1, {}};
    for (int l : mask.labels()) {
        raw.data.push_back(static_cast<std::uint8_t>(l));
    }
    return encode_png(raw);
}

namespace {

using nlohmann::json;

/// Collects field errors while reading a spec document.
class SpecReader {
public:
    explicit SpecReader(const json& doc) : doc_(doc) {}

    template <typename T>
    std::optional<T> get(const json& obj, const std::string& key, const std::string& field) {
        if (!obj.is_object() || !obj.contains(key) || obj.at(key).is_null()) {
            return std::nullopt;
        }
        try {
            return obj.at(key).get<T>();
        } catch (const json::exception&) {
            error(field, "has the wrong type");
            return std::nullopt;
        }
    }

    const json& section(const std::string& key) {
        static const json empty = json::object();
        if (!doc_.contains(key) || doc_.at(key).is_null()) {
            return empty;
        }
        if (!doc_.at(key).is_object()) {
            error(key, "must be an object");
            return empty;
        }
        return doc_.at(key);
    }

    void error(std::string field, std::string message) { errors.push_back({std::move(field), std::move(message)}); }

    std::vector<FieldError> errors;

private:
    const json& doc_;
};

}  // namespace

GenerationJob job_from_spec(const json& spec, const std::filesystem::path& base_dir, const Pipeline& pipeline) {
    if (!spec.is_object()) {
        throw ValidationError("spec", "must be a JSON object");
    }
    SpecReader in(spec);
    const BackendSet& backends = pipeline.backends();
    GenerationJob job;
    job.optimizer.weights = LossWeights::uniform(backends.segmenters.size());

    auto resolve = [&](const std::string& p) {
        const std::filesystem::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    };

    if (auto prompt = in.get<std::string>(spec, "prompt", "prompt")) {
        job.prompt = *prompt;
    } else if (!spec.contains("prompt")) {
        in.error("prompt", "is required");
    }

    // Vocabulary: must match the one the backends were built with.
    if (auto vp = in.get<std::string>(spec, "vocab_path", "vocab_path")) {
        try {
            const Bytes text = read_file(resolve(*vp));
            const auto vocab = ClassVocabulary::from_json(std::string(text.begin(), text.end()));
            if (!(vocab == backends.vocab)) {
                in.error("vocab_path", "vocabulary differs from the configured backends' vocabulary");
            }
        } catch (const Error& e) {
            in.error("vocab_path", e.what());
        }
    } else if (spec.contains("vocab") && !spec.at("vocab").is_null()) {
        try {
            const auto vocab = ClassVocabulary::from_json(spec.at("vocab").dump());
            if (!(vocab == backends.vocab)) {
                in.error("vocab", "vocabulary differs from the configured backends' vocabulary");
            }
        } catch (const Error& e) {
            in.error("vocab", e.what());
        }
    }

    // Mask: a file path or an inline base64 PNG/PGM index map.
    std::optional<Bytes> mask_bytes;
    std::string mask_field = "mask_path";
    if (auto mp = in.get<std::string>(spec, "mask_path", "mask_path")) {
        try {
            mask_bytes = read_file(resolve(*mp));
        } catch (const Error& e) {
            in.error("mask_path", e.what());
        }
    } else if (auto inline_png = in.get<std::string>(spec, "mask_png", "mask_png")) {
        mask_field = "mask_png";
        try {
            mask_bytes = base64_decode(*inline_png);
        } catch (const Error& e) {
            in.error("mask_png", e.what());
        }
    } else if (!spec.contains("mask_path") && !spec.contains("mask_png")) {
        in.error("mask_path", "is required (or mask_png)");
    }
    bool have_mask = false;
    if (mask_bytes) {
        try {
            job.target = decode_mask(*mask_bytes, backends.vocab);
            have_mask = true;
        } catch (const Error& e) {
            in.error(mask_field, std::string("does not decode: ") + e.what());
        }
    }

    const json& weights = in.section("weights");
    if (auto ac = in.get<double>(weights, "alpha_clip", "alpha_clip")) {
        job.optimizer.weights.alpha_clip = *ac;
    }
    if (weights.contains("alpha_seg")) {
        const json& as = weights.at("alpha_seg");
        if (as.is_number()) {
            std::fill(job.optimizer.weights.alpha_seg.begin(), job.optimizer.weights.alpha_seg.end(),
                      as.get<double>());
        } else if (auto v = in.get<std::vector<double>>(weights, "alpha_seg", "alpha_seg")) {
            job.optimizer.weights.alpha_seg = *v;
        }
    }

    const json& opt = in.section("optimizer");
    if (auto v = in.get<int>(opt, "max_steps", "max_steps")) job.optimizer.max_steps = *v;
    if (auto v = in.get<double>(opt, "step_size", "step_size")) job.optimizer.step_size = *v;
    if (auto v = in.get<double>(opt, "momentum", "momentum")) job.optimizer.momentum = *v;
    if (auto v = in.get<int>(opt, "plateau_patience", "plateau_patience")) job.optimizer.plateau_patience = *v;
    if (auto v = in.get<double>(opt, "plateau_tolerance", "plateau_tolerance")) job.optimizer.plateau_tolerance = *v;

    const json& ref = in.section("refine");
    if (auto v = in.get<double>(ref, "strength", "strength")) job.refine.strength = *v;
    if (auto v = in.get<int>(ref, "steps", "steps")) job.refine.steps = *v;

    const json& fan = in.section("fan_out");
    if (auto v = in.get<int>(fan, "n_stage1", "n_stage1")) job.n_stage1 = *v;
    if (auto v = in.get<int>(fan, "n_stage2", "n_stage2")) job.n_stage2_per_stage1 = *v;

    if (auto v = in.get<std::uint64_t>(spec, "seed", "seed")) job.seed = *v;
    if (auto m = in.get<std::string>(spec, "mode", "mode")) {
        try {
            job.mode = run_mode_from_string(*m);
        } catch (const ConfigError& e) {
            in.error("mode", e.what());
        }
    }

    // Semantic checks; mask checks only when the mask decoded.
    try {
        if (!have_mask) {
            job.target = SegMask::from_labels(
                backends.generator->width(), backends.generator->height(), backends.vocab.size(),
                std::vector<int>(static_cast<std::size_t>(backends.generator->width() * backends.generator->height()),
                                 0));
        }
        pipeline.validate(job);
    } catch (const ValidationError& e) {
        for (const auto& f : e.fields()) {
            if (f.field == "prompt" && std::any_of(in.errors.begin(), in.errors.end(),
                                                   [](const FieldError& x) { return x.field == "prompt"; })) {
                continue;
            }
            in.errors.push_back(f);
        }
    }
    if (!in.errors.empty()) {
        throw ValidationError(std::move(in.errors));
    }
    return job;
}

json job_config_to_json(const GenerationJob& job) {
    return {{"prompt", job.prompt},
            {"weights", {{"alpha_clip", job.optimizer.weights.alpha_clip}, {"alpha_seg", job.optimizer.weights.alpha_seg}}},
            {"optimizer",
             {{"max_steps", job.optimizer.max_steps},
              {"step_size", job.optimizer.step_size},
              {"momentum", job.optimizer.momentum},
              {"plateau_patience", job.optimizer.plateau_patience},
              {"plateau_tolerance", job.optimizer.plateau_tolerance}}},
            {"refine", {{"strength", job.refine.strength}, {"steps", job.refine.steps}}},
            {"fan_out", {{"n_stage1", job.n_stage1}, {"n_stage2", job.n_stage2_per_stage1}}},
            {"seed", job.seed},
            {"mode", to_string(job.mode)}};
}

json job_to_json(const GenerationJob& job) {
    json history = json::array();
    for (auto s : job.history) {
        history.push_back(to_string(s));
    }
    json s1 = json::array();
    for (const auto& r : job.stage1) {
        s1.push_back({{"id", r.id},
                      {"artifact", sha256_hex(encode_png(r.image))},
                      {"seed", r.latent.seed},
                      {"best_step", r.best_step},
                      {"final_loss", r.final_loss},
                      {"steps_run", r.steps_run},
                      {"guides", r.routed_guides},
                      {"latent", std::vector<double>(r.latent.z.data(), r.latent.z.data() + r.latent.z.size())}});
    }
    json s2 = json::array();
    for (const auto& r : job.stage2) {
        s2.push_back({{"id", r.id},
                      {"source", r.source},
                      {"artifact", sha256_hex(encode_png(r.image))},
                      {"strength", r.config.strength},
                      {"steps", r.config.steps},
                      {"seed", r.config.seed}});
    }
    json out = {{"id", job.id},
                {"status", to_string(job.status)},
                {"history", std::move(history)},
                {"config", job_config_to_json(job)},
                {"stage1", std::move(s1)},
                {"stage2", std::move(s2)}};
    if (job.target.pixel_count() > 0) {
        out["mask"] = sha256_hex(mask_index_png(job.target));
    }
    if (job.status == JobStatus::Failed) {
        out["failed_stage"] = job.failed_stage;
        out["diagnostic"] = job.diagnostic;
    }
    return out;
}

GenerationJob job_from_json(const json& doc, const std::function<Bytes(const std::string&)>& fetch,
                            const Pipeline& pipeline) {
    const auto& backends = pipeline.backends();
    GenerationJob job;
    try {
        const json& c = doc.at("config");
        job.id = doc.at("id").get<std::string>();
        job.prompt = c.at("prompt").get<std::string>();
        job.optimizer.weights.alpha_clip = c.at("weights").at("alpha_clip").get<double>();
        job.optimizer.weights.alpha_seg = c.at("weights").at("alpha_seg").get<std::vector<double>>();
        const json& o = c.at("optimizer");
        job.optimizer.max_steps = o.at("max_steps").get<int>();
        job.optimizer.step_size = o.at("step_size").get<double>();
        job.optimizer.momentum = o.at("momentum").get<double>();
        job.optimizer.plateau_patience = o.at("plateau_patience").get<int>();
        job.optimizer.plateau_tolerance = o.at("plateau_tolerance").get<double>();
        job.refine.strength = c.at("refine").at("strength").get<double>();
        job.refine.steps = c.at("refine").at("steps").get<int>();
        job.n_stage1 = c.at("fan_out").at("n_stage1").get<int>();
        job.n_stage2_per_stage1 = c.at("fan_out").at("n_stage2").get<int>();
        job.seed = c.at("seed").get<std::uint64_t>();
        job.mode = run_mode_from_string(c.at("mode").get<std::string>());

        job.status = job_status_from_string(doc.at("status").get<std::string>());
        job.history.clear();
        for (const auto& h : doc.at("history")) {
            job.history.push_back(job_status_from_string(h.get<std::string>()));
        }
        job.failed_stage = doc.value("failed_stage", "");
        job.diagnostic = doc.value("diagnostic", "");
        if (doc.contains("mask")) {
            job.target = decode_mask(fetch(doc.at("mask").get<std::string>()), backends.vocab);
        }

        for (const auto& r : doc.at("stage1")) {
            StageOneResult s;
            s.id = r.at("id").get<std::string>();
            s.best_step = r.at("best_step").get<int>();
            s.steps_run = r.at("steps_run").get<int>();
            s.final_loss = r.at("final_loss").get<double>();
            s.routed_guides = r.at("guides").get<std::vector<std::size_t>>();
            const auto z = r.at("latent").get<std::vector<double>>();
            s.latent.z = Eigen::Map<const Eigen::VectorXd>(z.data(), static_cast<Eigen::Index>(z.size()));
            s.latent.seed = r.at("seed").get<std::uint64_t>();
            s.latent.step = s.best_step;
            s.image = backends.generator->decode(s.latent);
            job.stage1.push_back(std::move(s));
        }
        for (const auto& r : doc.at("stage2")) {
            StageTwoResult s;
            s.id = r.at("id").get<std::string>();
            s.source = r.at("source").get<std::string>();
            s.config.strength = r.at("strength").get<double>();
            s.config.steps = r.at("steps").get<int>();
            s.config.seed = r.at("seed").get<std::uint64_t>();
            s.image = decode_image(fetch(r.at("artifact").get<std::string>()));
            job.stage2.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed job document: ") + e.what());
    }
    return job;
}

}  // namespace segguide
