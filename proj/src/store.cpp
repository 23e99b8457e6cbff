// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#include <sqlite3.h>

#include <algorithm>
#include <cctype>

#include "segguide/hash.hpp"
#include "segguide/service.hpp"

namespace segguide {

namespace {

/// Finalizes a prepared statement on scope exit.
class Statement {
public:
    Statement(sqlite3* db, const char* sql) : db_(db) {
        if (sqlite3_prepare_v2(db, sql, -1, &stmt_, nullptr) != SQLITE_OK) {
            throw Error(std::string("sqlite prepare failed: ") + sqlite3_errmsg(db));
        }
    }
    ~Statement() { sqlite3_finalize(stmt_); }
    Statement(const Statement&) = delete;
    Statement& operator=(const Statement&) = delete;

    void bind(int i, const std::string& s) { sqlite3_bind_text(stmt_, i, s.data(), static_cast<int>(s.size()), SQLITE_TRANSIENT); }
    void bind(int i, std::int64_t v) { sqlite3_bind_int64(stmt_, i, v); }

    /// True while a row is available.
    bool step() {
        const int rc = sqlite3_step(stmt_);
        if (rc == SQLITE_ROW) {
            return true;
        }
        if (rc != SQLITE_DONE) {
            throw Error(std::string("sqlite step failed: ") + sqlite3_errmsg(db_));
        }
        return false;
    }

    std::string text(int col) const {
        const auto* p = reinterpret_cast<const char*>(sqlite3_column_text(stmt_, col));
        return p ? std::string(p, static_cast<std::size_t>(sqlite3_column_bytes(stmt_, col))) : std::string{};
    }
    std::int64_t integer(int col) const { return sqlite3_column_int64(stmt_, col); }

private:
    sqlite3* db_;
    sqlite3_stmt* stmt_ = nullptr;
};

void exec(sqlite3* db, const char* sql) {
    char* err = nullptr;
    if (sqlite3_exec(db, sql, nullptr, nullptr, &err) != SQLITE_OK) {
        std::string msg = err ? err : "unknown error";
        sqlite3_free(err);
        throw Error("sqlite: " + msg);
    }
}

bool is_artifact_id(const std::string& id) {
    return id.size() == 64 && std::all_of(id.begin(), id.end(), [](char c) {
               return std::isdigit(static_cast<unsigned char>(c)) || (c >= 'a' && c <= 'f');
           });
}

}  // namespace

JobStore::JobStore(const std::filesystem::path& root) : root_(root) {
    std::filesystem::create_directories(root_ / "blobs");
    const auto db_path = (root_ / "jobs.sqlite").string();
    if (sqlite3_open_v2(db_path.c_str(), &db_, SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE | SQLITE_OPEN_FULLMUTEX,
                        nullptr) != SQLITE_OK) {
        const std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
        sqlite3_close(db_);
        throw Error("cannot open job store " + db_path + ": " + msg);
    }
    sqlite3_busy_timeout(db_, 5000);
    exec(db_,
         "PRAGMA journal_mode=WAL;"
         "CREATE TABLE IF NOT EXISTS jobs (id TEXT PRIMARY KEY, doc TEXT NOT NULL);"
         "CREATE TABLE IF NOT EXISTS events (job_id TEXT NOT NULL, seq INTEGER NOT NULL, kind TEXT NOT NULL,"
         " data TEXT NOT NULL, PRIMARY KEY (job_id, seq));");
}

JobStore::~JobStore() { sqlite3_close(db_); }

std::filesystem::path JobStore::blob_path(const std::string& id) const {
    return root_ / "blobs" / id.substr(0, 2) / (id + ".png");
}

std::string JobStore::put_artifact(std::span<const std::uint8_t> bytes) {
    const std::string id = sha256_hex(bytes);
    const auto path = blob_path(id);
    std::lock_guard lock(mutex_);
    if (!std::filesystem::exists(path)) {
        std::filesystem::create_directories(path.parent_path());
        const auto tmp = path.string() + ".tmp";
        write_file(tmp, bytes);
        std::filesystem::rename(tmp, path);
    }
    return id;
}

Bytes JobStore::get_artifact(const std::string& id) const {
    if (!has_artifact(id)) {
        throw NotFoundError("no artifact " + id);
    }
    Bytes bytes = read_file(blob_path(id));
    if (sha256_hex(bytes) != id) {
        throw Error("artifact " + id + " is corrupted on disk");
    }
    return bytes;
}

bool JobStore::has_artifact(const std::string& id) const {
    return is_artifact_id(id) && std::filesystem::exists(blob_path(id));
}

void JobStore::save_job(const std::string& id, const nlohmann::json& doc) {
    std::lock_guard lock(mutex_);
    Statement st(db_, "INSERT INTO jobs (id, doc) VALUES (?1, ?2) ON CONFLICT(id) DO UPDATE SET doc = excluded.doc");
    st.bind(1, id);
    st.bind(2, doc.dump());
    st.step();
}

std::optional<nlohmann::json> JobStore::load_job(const std::string& id) const {
    std::lock_guard lock(mutex_);
    Statement st(db_, "SELECT doc FROM jobs WHERE id = ?1");
    st.bind(1, id);
    if (!st.step()) {
        return std::nullopt;
    }
    return nlohmann::json::parse(st.text(0));
}

std::vector<std::string> JobStore::job_ids() const {
    std::lock_guard lock(mutex_);
    Statement st(db_, "SELECT id FROM jobs ORDER BY rowid");
    std::vector<std::string> out;
    while (st.step()) {
        out.push_back(st.text(0));
    }
    return out;
}

std::int64_t JobStore::append_event(const std::string& job_id, const std::string& kind, const nlohmann::json& data) {
    std::lock_guard lock(mutex_);
    Statement st(db_,
                 "INSERT INTO events (job_id, seq, kind, data) "
                 "SELECT ?1, COALESCE(MAX(seq), 0) + 1, ?2, ?3 FROM events WHERE job_id = ?1 RETURNING seq");
    st.bind(1, job_id);
    st.bind(2, kind);
    st.bind(3, data.dump());
    if (!st.step()) {
        throw Error("event insert returned no sequence number");
    }
    const auto seq = st.integer(0);
    while (st.step()) {
    }
    return seq;
}

std::vector<JobEvent> JobStore::events_after(const std::string& job_id, std::int64_t after) const {
    std::lock_guard lock(mutex_);
    Statement st(db_, "SELECT seq, kind, data FROM events WHERE job_id = ?1 AND seq > ?2 ORDER BY seq");
    st.bind(1, job_id);
    st.bind(2, after);
    std::vector<JobEvent> out;
    while (st.step()) {
        out.push_back({st.integer(0), st.text(1), nlohmann::json::parse(st.text(2))});
    }
    return out;
}

}  // namespace segguide
