// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "segguide/image_io.hpp"
#include "segguide/pipeline.hpp"

struct sqlite3;

namespace segguide {

struct JobEvent {
    std::int64_t seq = 0;  // 1-based, gap-free per job
    std::string kind;      // status | loss | candidate | end
    nlohmann::json data;
};

/// Single-file SQLite database plus a directory of content-addressed
/// PNG blobs. All methods are thread-safe.
class JobStore {
public:
    explicit JobStore(const std::filesystem::path& root);
    ~JobStore();
    JobStore(const JobStore&) = delete;
    JobStore& operator=(const JobStore&) = delete;

    /// Stores bytes under their SHA-256 hex digest; identical bytes are
    /// stored once.
    std::string put_artifact(std::span<const std::uint8_t> bytes);
    Bytes get_artifact(const std::string& id) const;
    bool has_artifact(const std::string& id) const;

    void save_job(const std::string& id, const nlohmann::json& doc);
    std::optional<nlohmann::json> load_job(const std::string& id) const;
    std::vector<std::string> job_ids() const;

    /// Appends the next event of a job and returns its sequence number.
    std::int64_t append_event(const std::string& job_id, const std::string& kind, const nlohmann::json& data);
    std::vector<JobEvent> events_after(const std::string& job_id, std::int64_t after) const;

    const std::filesystem::path& root() const noexcept { return root_; }

private:
    std::filesystem::path blob_path(const std::string& id) const;

    std::filesystem::path root_;
    sqlite3* db_ = nullptr;
    mutable std::mutex mutex_;
};

struct ServiceConfig {
    nlohmann::json backends = toy_backend_config();
    ClassVocabulary vocab = ClassVocabulary::toy_default();
    int workers = 2;
    std::filesystem::path storage_root = "segguide-data";
    /// Stage-1 loss events every `cadence` steps plus each final step.
    int cadence = 10;
    std::string host = "127.0.0.1";
    int port = 8080;
    /// Relative mask/vocab paths in job specs resolve against this.
    std::filesystem::path base_dir = ".";

    /// {backends, vocab_path | vocab, workers, storage_root, cadence, host,
    ///  port}; relative paths resolve against the config file's directory.
    static ServiceConfig from_file(const std::filesystem::path& path);
    static ServiceConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);

    /// SEGGUIDE_STORAGE_ROOT, when set, replaces storage_root.
    void apply_env();
};

/// Job execution and bookkeeping behind the HTTP API.
class JobService {
public:
    explicit JobService(ServiceConfig config);
    ~JobService();
    JobService(const JobService&) = delete;
    JobService& operator=(const JobService&) = delete;

    /// Validates and persists a spec as a pending job, then queues it.
    std::string submit(const nlohmann::json& spec);

    nlohmann::json job(const std::string& id) const;

    /// Events with seq > after; NotFoundError for an unknown job.
    std::vector<JobEvent> events(const std::string& id, std::int64_t after = 0) const;

    /// Blocks until the job has an event past `after`, the timeout runs
    /// out or the service stops. Returns whether new events exist.
    bool wait_for_events(const std::string& id, std::int64_t after, std::chrono::milliseconds timeout) const;

    /// Queues Stage 2 for the chosen candidates of a job awaiting
    /// selection. Unknown ids, bad overrides and wrong states throw here.
    void select(const std::string& id, const std::vector<std::string>& stage1_ids, const RefineOverride& override);

    Bytes artifact(const std::string& id) const;

    /// Blocks until the job reaches done, failed or awaiting_selection.
    nlohmann::json wait_until_settled(const std::string& id,
                                      std::chrono::milliseconds timeout = std::chrono::minutes(5)) const;

    const ClassVocabulary& vocab() const noexcept { return config_.vocab; }
    const ServiceConfig& config() const noexcept { return config_; }
    const JobStore& store() const noexcept { return store_; }

    bool stopped() const {
        std::lock_guard lock(mutex_);
        return stopping_;
    }

    /// Stops accepting work; running jobs end failed with stage
    /// "interrupted". Idempotent.
    void shutdown();

private:
    struct Entry {
        GenerationJob job;
        bool busy = false;
    };
    struct Task {
        std::string job_id;
        bool select = false;
        std::vector<std::string> ids;
        RefineOverride override;
    };

    void recover();
    void worker_loop();
    void execute(Task task);
    PipelineObserver observer_for(const std::string& id);
    void record(const std::string& id, const std::string& kind, const nlohmann::json& data);
    void persist(const GenerationJob& job);
    std::shared_ptr<Entry> entry(const std::string& id) const;

    ServiceConfig config_;
    JobStore store_;
    Pipeline pipeline_;

    mutable std::mutex mutex_;
    mutable std::condition_variable events_cv_;
    std::condition_variable queue_cv_;
    mutable std::map<std::string, std::shared_ptr<Entry>> entries_;
    std::deque<Task> queue_;
    std::vector<std::thread> workers_;
    bool stopping_ = false;
    std::uint64_t counter_ = 0;
};

/// Thrown when the HTTP port cannot be bound.
class PortInUseError : public Error {
public:
    using Error::Error;
};

/// HTTP+JSON front end with server-sent event streams.
class HttpServer {
public:
    explicit HttpServer(JobService& service);
    ~HttpServer();

    /// Binds host:port (port 0 picks a free port) and returns the port.
    int bind(const std::string& host, int port);
    /// Serves until stop(); call after bind().
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace segguide
