// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "segguide/core.hpp"
#include "segguide/pipeline.hpp"

namespace segguide {

struct ObjectStat {
    int class_id = 0;
    double fraction = 0.0;  // share of image pixels
};

/// Per-class foreground statistics of a hard mask, ascending class id.
/// Masks are semantic, so each present foreground class is one object.
std::vector<ObjectStat> object_stats(const SegMask& target);

/// A ground-truth layout plus caption. object_stats are always derived
/// from the target.
class DatasetRecord {
public:
    DatasetRecord(std::string id, SegMask target, std::string caption);

    const std::string& id() const noexcept { return id_; }
    const SegMask& target() const noexcept { return target_; }
    const std::string& caption() const noexcept { return caption_; }
    const std::vector<ObjectStat>& object_stats() const noexcept { return stats_; }

private:
    std::string id_;
    SegMask target_;
    std::string caption_;
    std::vector<ObjectStat> stats_;
};

struct FilterSettings {
    int min_objects = 2;
    int max_objects = 4;
    double min_fraction = 0.05;
    /// Records containing this class are dropped; -1 disables the clause.
    int excluded_class = -1;
    bool enabled = true;

    /// Settings with the excluded class resolved from `vocab` ("person").
    static FilterSettings standard(const ClassVocabulary& vocab);

    /// SHA-256 over a canonical rendering of the settings.
    std::string fingerprint() const;
    nlohmann::json to_json() const;
};

struct FilterOutcome {
    std::vector<DatasetRecord> kept;
    int total = 0;
    /// Per-clause counts; a record failing several clauses counts in each.
    int rejected_excluded_class = 0;
    int rejected_count = 0;
    int rejected_area = 0;
};

/// Keeps records without the excluded class, with min..max foreground
/// objects, each covering at least min_fraction of the image.
FilterOutcome filter_records(std::span<const DatasetRecord> records, const FilterSettings& settings);

struct RecordIou {
    std::string id;
    double iou = 0.0;
};

struct RecordFailure {
    std::string id;
    std::string error;
};

struct IoUReport {
    std::string method = "TCIG";
    std::vector<RecordIou> per_record;
    std::vector<RecordFailure> missing;
    double mean = 0.0;
    double std = 0.0;  // population standard deviation
    int n = 0;
    std::string protocol_fingerprint;

    /// Recomputes mean, std and n from per_record.
    void aggregate();
    nlohmann::json to_json() const;
};

/// Produces the final image for a record; `seed` is hash64(record id).
using RecordRunner = std::function<Image(const DatasetRecord&, std::uint64_t seed)>;

struct EvalOptions {
    std::string method = "TCIG";
    int jobs = 1;
    IouMode mode = IouMode::PerClass;
};

/// Runs each record, re-segments the result with `eval_segmenter`,
/// hardens it and scores IoU against the target. Runner failures are
/// reported as missing. Output order follows input order for any `jobs`.
IoUReport evaluate(std::span<const DatasetRecord> records, const RecordRunner& runner,
                   const Segmenter& eval_segmenter, const std::string& fingerprint, const EvalOptions& options = {});

/// Runner executing an auto-mode job with one Stage-1 and one Stage-2
/// result, using the caption as prompt.
RecordRunner pipeline_runner(const Pipeline& pipeline, OptimizerConfig optimizer, RefineConfig refine);

/// A transcribed comparison row (method, mean, std).
struct ReferenceRow {
    std::string method;
    double mean = 0.0;
    double std = 0.0;
};

/// Baseline rows reported in the literature for the same protocol.
std::vector<ReferenceRow> reference_rows();

/// Formats "<method> <mean> ± <std>" with two decimals; "n=0" when empty.
std::string format_row(const IoUReport& report);

/// Table of the given reports (input order), optional reference rows and
/// one fingerprint line per distinct protocol.
std::string render_report(std::span<const IoUReport> reports, std::span<const ReferenceRow> references = {});

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// Error in a manifest line (1-based).
class ManifestError : public ConfigError {
public:
    ManifestError(int line, const std::string& what)
        : ConfigError("manifest line " + std::to_string(line) + ": " + what), line_(line) {}

    int line() const noexcept { return line_; }

private:
    int line_;
};

/// Reads JSON lines {id, mask_path, caption, vocab_path}; paths are
/// relative to the manifest. Every line's vocabulary must equal `vocab`.
std::vector<DatasetRecord> load_manifest(const std::filesystem::path& path, const ClassVocabulary& vocab);

/// Random rectangle layouts over the vocabulary with toy-grammar captions.
std::vector<DatasetRecord> synthesize_records(int count, const ClassVocabulary& vocab, int width, int height,
                                              std::uint64_t seed);

/// Writes masks, a vocabulary sidecar and manifest.jsonl into `dir`;
/// returns the manifest path.
std::filesystem::path write_manifest(std::span<const DatasetRecord> records, const ClassVocabulary& vocab,
                                     const std::filesystem::path& dir);

}  // namespace segguide
