// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segguide/backends.hpp"
#include "segguide/hash.hpp"
#include "segguide/image_io.hpp"
#include "segguide/stage1.hpp"
#include "segguide/stage2.hpp"

namespace segguide {

enum class JobStatus {
    Pending,
    Stage1Running,
    AwaitingSelection,
    Stage2Running,
    Done,
    Failed,
};

enum class RunMode {
    Auto,
    Interactive,
};

std::string to_string(JobStatus status);
JobStatus job_status_from_string(const std::string& s);
std::string to_string(RunMode mode);
RunMode run_mode_from_string(const std::string& s);

/// Whether `from -> to` is a legal status transition. The forward order is
/// pending, stage1_running, awaiting_selection, stage2_running, done;
/// failed is reachable from pending and both running states.
bool is_legal_transition(JobStatus from, JobStatus to);

struct GenerationJob {
    std::string id;
    std::string prompt;
    SegMask target;
    OptimizerConfig optimizer;
    RefineConfig refine;
    int n_stage1 = 1;
    int n_stage2_per_stage1 = 1;
    std::uint64_t seed = 0;
    RunMode mode = RunMode::Auto;

    JobStatus status = JobStatus::Pending;
    std::vector<JobStatus> history{JobStatus::Pending};
    std::string failed_stage;  // "stage1", "stage2" or "interrupted"
    std::string diagnostic;

    std::vector<StageOneResult> stage1;
    std::vector<StageTwoResult> stage2;

    /// Throws StateError on an illegal transition.
    void transition(JobStatus next);
    void fail(const std::string& stage, const std::string& why);

    const StageOneResult* find_stage1(const std::string& id) const;
};

/// Stage-1 seed for candidate i.
constexpr std::uint64_t stage1_seed(std::uint64_t base, int i) { return base + static_cast<std::uint64_t>(i); }

/// Stage-2 seed for refinement j of candidate i.
constexpr std::uint64_t stage2_seed(std::uint64_t base, int i, int j) {
    return hash64(base, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j));
}

std::string stage1_id(int i);
std::string stage2_id(int i, int j);

/// Receives progress from a running job. Every hook is optional.
struct PipelineObserver {
    std::function<void(const GenerationJob&)> on_status;
    std::function<void(const GenerationJob&, int candidate, const TraceRow&)> on_step;
    std::function<void(const GenerationJob&, const StageOneResult&)> on_stage1;
    std::function<void(const GenerationJob&, const StageTwoResult&)> on_stage2;
};

/// Partial override of the job's refine config for a selection.
struct RefineOverride {
    std::optional<double> strength;
    std::optional<int> steps;
};

class Pipeline {
public:
    explicit Pipeline(BackendSet backends);

    const BackendSet& backends() const noexcept { return backends_; }

    /// Checks every field of a job against the backends; throws
    /// ValidationError naming each violation.
    void validate(const GenerationJob& job) const;

    /// Auto mode runs both stages; interactive mode stops at
    /// awaiting_selection. Stage failures mark the job failed and keep
    /// completed results.
    GenerationJob run_job(GenerationJob job, RunMode mode, const PipelineObserver& observer = {}) const;

    /// Refines the chosen Stage-1 candidates of a job awaiting selection.
    GenerationJob select_candidates(GenerationJob job, const std::vector<std::string>& stage1_ids,
                                    const RefineOverride& override = {},
                                    const PipelineObserver& observer = {}) const;

private:
    void run_stage2(GenerationJob& job, const std::vector<int>& candidates, const RefineConfig& config,
                    const PipelineObserver& observer) const;

    BackendSet backends_;
};

// ---------------------------------------------------------------------------
// Job spec documents
// ---------------------------------------------------------------------------

/// Parses a job spec
/// {prompt, mask_path | mask_png (base64), vocab_path | vocab, weights,
///  optimizer, refine, fan_out: {n_stage1, n_stage2}, seed, mode}.
/// Relative paths resolve against `base_dir`. Every problem found is
/// reported in one ValidationError.
GenerationJob job_from_spec(const nlohmann::json& spec, const std::filesystem::path& base_dir,
                            const Pipeline& pipeline);

/// Job summary with results referenced by artifact id (SHA-256 of PNG).
nlohmann::json job_to_json(const GenerationJob& job);

/// Canonical JSON of the config part of a job (no results).
nlohmann::json job_config_to_json(const GenerationJob& job);

/// 8-bit single-channel PNG whose pixel values are the class ids.
Bytes mask_index_png(const SegMask& mask);

/// Rebuilds a job from job_to_json output. Stage-1 images are re-decoded
/// from their stored latents (bit-exact); the target mask and Stage-2
/// images are loaded through `fetch` by artifact id.
GenerationJob job_from_json(const nlohmann::json& doc, const std::function<Bytes(const std::string&)>& fetch,
                            const Pipeline& pipeline);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace segguide
