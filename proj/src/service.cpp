// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#include "segguide/service.hpp"

#include <cstdio>
#include <cstdlib>

#include "segguide/hash.hpp"

namespace segguide {

namespace {

/// Raised from the step hook to abandon a job during shutdown.
class Interrupted : public Error {
public:
    Interrupted() : Error("interrupted by service shutdown") {}
};

bool is_terminal(JobStatus s) { return s == JobStatus::Done || s == JobStatus::Failed; }

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

ServiceConfig ServiceConfig::from_file(const std::filesystem::path& path) {
    const Bytes text = read_file(path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text.begin(), text.end());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(doc, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

ServiceConfig ServiceConfig::from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
    if (!doc.is_object()) {
        throw ConfigError("service config must be a JSON object");
    }
    ServiceConfig c;
    c.base_dir = base_dir;
    auto resolve = [&](const std::string& p) {
        const std::filesystem::path fp(p);
        return fp.is_absolute() ? fp : base_dir / fp;
    };
    try {
        if (doc.contains("vocab_path")) {
            const Bytes text = read_file(resolve(doc.at("vocab_path").get<std::string>()));
            c.vocab = ClassVocabulary::from_json(std::string(text.begin(), text.end()));
        } else if (doc.contains("vocab")) {
            c.vocab = ClassVocabulary::from_json(doc.at("vocab").dump());
        }
        if (doc.contains("backends")) {
            c.backends = doc.at("backends");
        }
        c.workers = doc.value("workers", c.workers);
        c.cadence = doc.value("cadence", c.cadence);
        c.host = doc.value("host", c.host);
        c.port = doc.value("port", c.port);
        if (doc.contains("storage_root")) {
            c.storage_root = resolve(doc.at("storage_root").get<std::string>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("service config: ") + e.what());
    }
    if (c.workers < 1) {
        throw ConfigError("service config: workers must be at least 1");
    }
    if (c.cadence < 1) {
        throw ConfigError("service config: cadence must be at least 1");
    }
    return c;
}

void ServiceConfig::apply_env() {
    if (const char* root = std::getenv("SEGGUIDE_STORAGE_ROOT"); root != nullptr && *root != '\0') {
        storage_root = root;
    }
}

// ---------------------------------------------------------------------------
// Service
// ---------------------------------------------------------------------------

JobService::JobService(ServiceConfig config)
    : config_(std::move(config)),
      store_(config_.storage_root),
      pipeline_(make_backends(config_.backends, config_.vocab)) {
    recover();
    for (int i = 0; i < config_.workers; ++i) {
        workers_.emplace_back([this] { worker_loop(); });
    }
}

JobService::~JobService() { shutdown(); }

void JobService::recover() {
    for (const auto& id : store_.job_ids()) {
        auto doc = *store_.load_job(id);
        const auto status = job_status_from_string(doc.at("status").get<std::string>());
        if (status == JobStatus::Pending || status == JobStatus::Stage1Running ||
            status == JobStatus::Stage2Running) {
            doc["status"] = to_string(JobStatus::Failed);
            doc["history"].push_back(to_string(JobStatus::Failed));
            doc["failed_stage"] = "interrupted";
            doc["diagnostic"] = "service restarted while the job was " + to_string(status);
            store_.save_job(id, doc);
            store_.append_event(id, "status", {{"status", "failed"}});
            store_.append_event(id, "end", {{"status", "failed"},
                                            {"failed_stage", "interrupted"},
                                            {"diagnostic", doc["diagnostic"]}});
        }
    }
}

void JobService::shutdown() {
    std::deque<Task> abandoned;
    {
        std::lock_guard lock(mutex_);
        if (stopping_) {
            return;
        }
        stopping_ = true;
        abandoned.swap(queue_);
    }
    queue_cv_.notify_all();
    events_cv_.notify_all();
    for (auto& t : workers_) {
        t.join();
    }
    workers_.clear();
    // Jobs that never started end failed; queued selections leave the job
    // awaiting_selection.
    for (const auto& task : abandoned) {
        if (task.select) {
            continue;
        }
        auto e = entry(task.job_id);
        e->job.fail("interrupted", "service stopped before the job started");
        persist(e->job);
        record(task.job_id, "status", {{"status", "failed"}});
        record(task.job_id, "end",
               {{"status", "failed"}, {"failed_stage", "interrupted"}, {"diagnostic", e->job.diagnostic}});
    }
}

std::string JobService::submit(const nlohmann::json& spec) {
    GenerationJob job = job_from_spec(spec, config_.base_dir, pipeline_);
    {
        std::lock_guard lock(mutex_);
        if (stopping_) {
            throw StateError("service is shutting down");
        }
        char buf[24];
        const auto now = static_cast<std::uint64_t>(std::chrono::system_clock::now().time_since_epoch().count());
        std::snprintf(buf, sizeof buf, "j%016llx",
                      static_cast<unsigned long long>(hash64(now, ++counter_, hash64(spec.dump()))));
        job.id = buf;
        auto e = std::make_shared<Entry>();
        e->job = job;
        e->busy = true;
        entries_[job.id] = e;
    }
    persist(job);
    record(job.id, "status", {{"status", to_string(job.status)}});
    {
        std::lock_guard lock(mutex_);
        queue_.push_back(Task{job.id, false, {}, {}});
    }
    queue_cv_.notify_one();
    return job.id;
}

nlohmann::json JobService::job(const std::string& id) const {
    auto doc = store_.load_job(id);
    if (!doc) {
        throw NotFoundError("no job " + id);
    }
    return *doc;
}

std::vector<JobEvent> JobService::events(const std::string& id, std::int64_t after) const {
    if (!store_.load_job(id)) {
        throw NotFoundError("no job " + id);
    }
    return store_.events_after(id, after);
}

bool JobService::wait_for_events(const std::string& id, std::int64_t after, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(mutex_);
    return events_cv_.wait_for(lock, timeout,
                               [&] { return stopping_ || !store_.events_after(id, after).empty(); }) &&
           !store_.events_after(id, after).empty();
}

nlohmann::json JobService::wait_until_settled(const std::string& id, std::chrono::milliseconds timeout) const {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::unique_lock lock(mutex_);
    for (;;) {
        auto doc = job(id);
        const auto status = job_status_from_string(doc.at("status").get<std::string>());
        const auto it = entries_.find(id);
        const bool busy = it != entries_.end() && it->second->busy;
        if (!busy && (is_terminal(status) || status == JobStatus::AwaitingSelection)) {
            return doc;
        }
        if (stopping_ && !busy) {
            return doc;
        }
        if (events_cv_.wait_until(lock, deadline) == std::cv_status::timeout) {
            throw Error("timed out waiting for job " + id);
        }
    }
}

void JobService::select(const std::string& id, const std::vector<std::string>& stage1_ids,
                        const RefineOverride& override) {
    auto e = entry(id);
    std::lock_guard lock(mutex_);
    if (stopping_) {
        throw StateError("service is shutting down");
    }
    if (e->busy || e->job.status != JobStatus::AwaitingSelection) {
        throw StateError("job " + id + " is " + (e->busy ? "busy" : to_string(e->job.status)) +
                         ", not awaiting_selection");
    }
    if (stage1_ids.empty()) {
        throw ValidationError("ids", "select at least one candidate");
    }
    for (const auto& sid : stage1_ids) {
        if (e->job.find_stage1(sid) == nullptr) {
            throw NotFoundError("job " + id + " has no Stage-1 candidate '" + sid + "'");
        }
    }
    RefineConfig check = e->job.refine;
    check.strength = override.strength.value_or(check.strength);
    check.steps = override.steps.value_or(check.steps);
    check.validate();
    e->busy = true;
    queue_.push_back(Task{id, true, stage1_ids, override});
    queue_cv_.notify_one();
}

Bytes JobService::artifact(const std::string& id) const { return store_.get_artifact(id); }

std::shared_ptr<JobService::Entry> JobService::entry(const std::string& id) const {
    {
        std::lock_guard lock(mutex_);
        if (auto it = entries_.find(id); it != entries_.end()) {
            return it->second;
        }
    }
    auto doc = store_.load_job(id);
    if (!doc) {
        throw NotFoundError("no job " + id);
    }
    auto e = std::make_shared<Entry>();
    e->job = job_from_json(*doc, [this](const std::string& a) { return store_.get_artifact(a); }, pipeline_);
    std::lock_guard lock(mutex_);
    return entries_.emplace(id, e).first->second;
}

void JobService::worker_loop() {
    for (;;) {
        Task task;
        {
            std::unique_lock lock(mutex_);
            queue_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
            if (stopping_) {
                return;
            }
            task = std::move(queue_.front());
            queue_.pop_front();
        }
        execute(std::move(task));
    }
}

void JobService::persist(const GenerationJob& job) {
    if (job.target.pixel_count() > 0) {
        store_.put_artifact(mask_index_png(job.target));
    }
    for (const auto& r : job.stage1) {
        store_.put_artifact(encode_png(r.image));
    }
    for (const auto& r : job.stage2) {
        store_.put_artifact(encode_png(r.image));
    }
    store_.save_job(job.id, job_to_json(job));
}

void JobService::record(const std::string& id, const std::string& kind, const nlohmann::json& data) {
    store_.append_event(id, kind, data);
    std::lock_guard lock(mutex_);
    events_cv_.notify_all();
}

PipelineObserver JobService::observer_for(const std::string& id) {
    PipelineObserver obs;
    const int cadence = config_.cadence;
    auto stopping = [this] {
        std::lock_guard lock(mutex_);
        return stopping_;
    };
    auto loss = [this, id](int candidate, const TraceRow& row) {
        record(id, "loss",
               {{"candidate", stage1_id(candidate)},
                {"step", row.step},
                {"l_clip", row.l_clip},
                {"l_seg", row.l_seg},
                {"l_total", row.l_total}});
    };
    obs.on_step = [=](const GenerationJob&, int candidate, const TraceRow& row) {
        if (stopping()) {
            throw Interrupted();
        }
        if (row.step % cadence == 0) {
            loss(candidate, row);
        }
    };
    obs.on_stage1 = [=, this](const GenerationJob& job, const StageOneResult& r) {
        if (!r.trace.empty() && r.trace.back().step % cadence != 0) {
            loss(static_cast<int>(job.stage1.size()) - 1, r.trace.back());
        }
        persist(job);
        record(id, "candidate",
               {{"stage", 1}, {"id", r.id}, {"artifact", sha256_hex(encode_png(r.image))}, {"seed", r.latent.seed}});
    };
    obs.on_stage2 = [=, this](const GenerationJob& job, const StageTwoResult& r) {
        persist(job);
        record(id, "candidate",
               {{"stage", 2},
                {"id", r.id},
                {"source", r.source},
                {"artifact", sha256_hex(encode_png(r.image))},
                {"strength", r.config.strength},
                {"seed", r.config.seed}});
    };
    obs.on_status = [=, this](const GenerationJob& job) {
        GenerationJob copy = job;
        if (copy.status == JobStatus::Failed && stopping()) {
            copy.failed_stage = "interrupted";
        }
        persist(copy);
        if (copy.status == JobStatus::AwaitingSelection && copy.mode == RunMode::Interactive) {
            // Release the job before announcing it so a selection can follow at once.
            auto e = entry(id);
            std::lock_guard lock(mutex_);
            e->job = copy;
            e->busy = false;
        }
        record(id, "status", {{"status", to_string(copy.status)}});
        if (is_terminal(copy.status)) {
            nlohmann::json end{{"status", to_string(copy.status)}};
            if (copy.status == JobStatus::Failed) {
                end["failed_stage"] = copy.failed_stage;
                end["diagnostic"] = copy.diagnostic;
            }
            record(id, "end", end);
        }
    };
    return obs;
}

void JobService::execute(Task task) {
    auto e = entry(task.job_id);
    GenerationJob job;
    {
        std::lock_guard lock(mutex_);
        job = e->job;
    }
    const auto obs = observer_for(task.job_id);
    GenerationJob result;
    try {
        result = task.select ? pipeline_.select_candidates(job, task.ids, task.override, obs)
                             : pipeline_.run_job(job, job.mode, obs);
    } catch (const std::exception& ex) {
        // Rejected before any stage ran (specs are validated on submit).
        result = job;
        if (is_legal_transition(result.status, JobStatus::Failed)) {
            result.fail(task.select ? "stage2" : "stage1", ex.what());
            obs.on_status(result);
        }
    }
    {
        std::lock_guard lock(mutex_);
        if (result.status == JobStatus::Failed && stopping_) {
            result.failed_stage = "interrupted";
        }
        // An interactive job was already released at awaiting_selection.
        if (result.status != JobStatus::AwaitingSelection) {
            e->job = std::move(result);
            e->busy = false;
        }
    }
    events_cv_.notify_all();
}

}  // namespace segguide
