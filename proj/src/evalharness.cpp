// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#include "segguide/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "segguide/hash.hpp"
#include "segguide/image_io.hpp"

namespace segguide {

std::vector<ObjectStat> object_stats(const SegMask& target) {
    if (!target.is_hard()) {
        throw RangeError("object statistics need a hard mask");
    }
    std::vector<ObjectStat> out;
    const double pixels = static_cast<double>(target.pixel_count());
    for (int c = 1; c < target.num_classes(); ++c) {
        const double count = target.planes().row(c).sum();
        if (count > 0.0) {
            out.push_back({c, count / pixels});
        }
    }
    return out;
}

DatasetRecord::DatasetRecord(std::string id, SegMask target, std::string caption)
    : id_(std::move(id)), target_(std::move(target)), caption_(std::move(caption)), stats_(segguide::object_stats(target_)) {}

// ---------------------------------------------------------------------------

FilterSettings FilterSettings::standard(const ClassVocabulary& vocab) {
    FilterSettings s;
    s.excluded_class = vocab.find("person").value_or(-1);
    return s;
}

nlohmann::json FilterSettings::to_json() const {
    return {{"enabled", enabled},
            {"min_objects", min_objects},
            {"max_objects", max_objects},
            {"min_fraction", min_fraction},
            {"excluded_class", excluded_class}};
}

std::string FilterSettings::fingerprint() const { return sha256_hex(to_json().dump()); }

FilterOutcome filter_records(std::span<const DatasetRecord> records, const FilterSettings& settings) {
    FilterOutcome out;
    out.total = static_cast<int>(records.size());
    for (const auto& r : records) {
        if (!settings.enabled) {
            out.kept.push_back(r);
            continue;
        }
        const auto& stats = r.object_stats();
        const bool has_excluded = std::any_of(stats.begin(), stats.end(), [&](const ObjectStat& s) {
            return s.class_id == settings.excluded_class;
        });
        const int count = static_cast<int>(stats.size());
        const bool count_ok = count >= settings.min_objects && count <= settings.max_objects;
        const bool area_ok = std::all_of(stats.begin(), stats.end(),
                                         [&](const ObjectStat& s) { return s.fraction >= settings.min_fraction; });
        out.rejected_excluded_class += has_excluded ? 1 : 0;
        out.rejected_count += count_ok ? 0 : 1;
        out.rejected_area += area_ok ? 0 : 1;
        if (!has_excluded && count_ok && area_ok) {
            out.kept.push_back(r);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

void IoUReport::aggregate() {
    n = static_cast<int>(per_record.size());
    mean = 0.0;
    std = 0.0;
    if (n == 0) {
        return;
    }
    for (const auto& r : per_record) {
        mean += r.iou;
    }
    mean /= n;
    double ss = 0.0;
    for (const auto& r : per_record) {
        ss += (r.iou - mean) * (r.iou - mean);
    }
    std = std::sqrt(ss / n);
}

nlohmann::json IoUReport::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : per_record) {
        rows.push_back({{"id", r.id}, {"iou", r.iou}});
    }
    nlohmann::json miss = nlohmann::json::array();
    for (const auto& m : missing) {
        miss.push_back({{"id", m.id}, {"error", m.error}});
    }
    return {{"method", method},     {"n", n},
            {"mean", mean},         {"std", std},
            {"per_record", rows},   {"missing", miss},
            {"protocol_fingerprint", protocol_fingerprint}};
}

IoUReport evaluate(std::span<const DatasetRecord> records, const RecordRunner& runner,
                   const Segmenter& eval_segmenter, const std::string& fingerprint, const EvalOptions& options) {
    struct Slot {
        bool ok = false;
        double iou = 0.0;
        std::string error;
    };
    std::vector<Slot> slots(records.size());

    auto run_one = [&](std::size_t i) {
        const DatasetRecord& r = records[i];
        try {
            Image image = runner(r, hash64(r.id()));
            if (image.width() != r.target().width() || image.height() != r.target().height()) {
                image = resize_bridge(image, r.target().width(), r.target().height());
            }
            const SegMask pred = eval_segmenter.predict(image).hardened();
            slots[i].iou = iou(pred, r.target(), options.mode);
            slots[i].ok = true;
        } catch (const std::exception& e) {
            slots[i].error = e.what();
        }
    };

    const int jobs = std::max(1, options.jobs);
    if (jobs == 1) {
        for (std::size_t i = 0; i < records.size(); ++i) {
            run_one(i);
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> workers;
        for (int w = 0; w < jobs; ++w) {
            workers.emplace_back([&] {
                for (std::size_t i = next++; i < records.size(); i = next++) {
                    run_one(i);
                }
            });
        }
        for (auto& t : workers) {
            t.join();
        }
    }

    IoUReport report;
    report.method = options.method;
    report.protocol_fingerprint = fingerprint;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (slots[i].ok) {
            report.per_record.push_back({records[i].id(), slots[i].iou});
        } else {
            report.missing.push_back({records[i].id(), slots[i].error});
        }
    }
    report.aggregate();
    return report;
}

RecordRunner pipeline_runner(const Pipeline& pipeline, OptimizerConfig optimizer, RefineConfig refine) {
    return [&pipeline, optimizer, refine](const DatasetRecord& record, std::uint64_t seed) {
        GenerationJob job;
        job.id = record.id();
        job.prompt = record.caption();
        job.target = record.target();
        job.optimizer = optimizer;
        job.refine = refine;
        job.seed = seed;
        job = pipeline.run_job(std::move(job), RunMode::Auto);
        if (job.status != JobStatus::Done || job.stage2.empty()) {
            throw Error(job.failed_stage + " failed: " + job.diagnostic);
        }
        return job.stage2.front().image;
    };
}

// ---------------------------------------------------------------------------

std::vector<ReferenceRow> reference_rows() {
    return {{"SI", 0.16, 0.10}, {"BLD", 0.17, 0.11}, {"multidiffusion", 0.26, 0.12}};
}

namespace {

std::string two_decimals(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

}  // namespace

std::string format_row(const IoUReport& report) {
    if (report.n == 0) {
        return report.method + " n=0";
    }
    return report.method + " " + two_decimals(report.mean) + " ± " + two_decimals(report.std);
}

std::string render_report(std::span<const IoUReport> reports, std::span<const ReferenceRow> references) {
    std::ostringstream os;
    os << "method IoU\n";
    for (const auto& r : reports) {
        os << format_row(r);
        os << "  (n=" << r.n;
        if (!r.missing.empty()) {
            os << ", missing=" << r.missing.size();
        }
        os << ")\n";
    }
    if (!references.empty()) {
        os << "reference (transcribed)\n";
        for (const auto& ref : references) {
            os << ref.method << " " << two_decimals(ref.mean) << " ± " << two_decimals(ref.std) << "\n";
        }
    }
    std::vector<std::string> seen;
    for (const auto& r : reports) {
        if (std::find(seen.begin(), seen.end(), r.protocol_fingerprint) == seen.end()) {
            seen.push_back(r.protocol_fingerprint);
            os << "protocol " << r.protocol_fingerprint << "\n";
        }
    }
    return os.str();
}

// ---------------------------------------------------------------------------

std::vector<DatasetRecord> load_manifest(const std::filesystem::path& path, const ClassVocabulary& vocab) {
    std::ifstream in(path);
    if (!in) {
        throw NotFoundError("cannot open manifest " + path.string());
    }
    const auto dir = path.parent_path();
    auto resolve = [&](const std::string& p) {
        const std::filesystem::path fp(p);
        return fp.is_absolute() ? fp : dir / fp;
    };
    std::map<std::string, bool> vocab_ok;
    std::vector<DatasetRecord> out;
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ManifestError(number, std::string("not valid JSON: ") + e.what());
        }
        if (!doc.is_object()) {
            throw ManifestError(number, "expected a JSON object");
        }
        for (const char* key : {"id", "mask_path", "caption", "vocab_path"}) {
            if (!doc.contains(key) || !doc.at(key).is_string()) {
                throw ManifestError(number, std::string("missing string field '") + key + "'");
            }
        }
        const auto vocab_path = doc.at("vocab_path").get<std::string>();
        if (!vocab_ok.contains(vocab_path)) {
            try {
                const Bytes text = read_file(resolve(vocab_path));
                vocab_ok[vocab_path] = ClassVocabulary::from_json(std::string(text.begin(), text.end())) == vocab;
            } catch (const Error& e) {
                throw ManifestError(number, e.what());
            }
        }
        if (!vocab_ok[vocab_path]) {
            throw ManifestError(number, "vocabulary " + vocab_path + " differs from the backend vocabulary");
        }
        try {
            SegMask target = decode_mask(read_file(resolve(doc.at("mask_path").get<std::string>())), vocab);
            out.emplace_back(doc.at("id").get<std::string>(), std::move(target), doc.at("caption").get<std::string>());
        } catch (const Error& e) {
            throw ManifestError(number, e.what());
        }
    }
    return out;
}

std::vector<DatasetRecord> synthesize_records(int count, const ClassVocabulary& vocab, int width, int height,
                                              std::uint64_t seed) {
    if (vocab.size() < 2) {
        throw ConfigError("synthetic records need at least one foreground class");
    }
    SeededRng rng(seed);
    std::vector<DatasetRecord> out;
    for (int n = 0; n < count; ++n) {
        std::vector<int> labels(static_cast<std::size_t>(width) * height, 0);
        std::vector<int> classes;
        for (int c = 1; c < vocab.size(); ++c) {
            classes.push_back(c);
        }
        const int objects = rng.uniform_int(1, std::min(5, vocab.size() - 1));
        for (int k = 0; k < objects; ++k) {
            const int pick = rng.uniform_int(k, static_cast<int>(classes.size()) - 1);
            std::swap(classes[static_cast<std::size_t>(k)], classes[static_cast<std::size_t>(pick)]);
            const int cls = classes[static_cast<std::size_t>(k)];
            const int w = rng.uniform_int(1, std::max(1, width / 2));
            const int h = rng.uniform_int(1, std::max(1, height / 2));
            const int x0 = rng.uniform_int(0, width - w);
            const int y0 = rng.uniform_int(0, height - h);
            for (int y = y0; y < y0 + h; ++y) {
                for (int x = x0; x < x0 + w; ++x) {
                    labels[static_cast<std::size_t>(y) * width + x] = cls;
                }
            }
        }
        SegMask target = SegMask::from_labels(width, height, vocab.size(), labels);
        std::string caption;
        for (const auto& s : object_stats(target)) {
            caption += (caption.empty() ? "a " : " and a ") + vocab[s.class_id].name;
        }
        char id[32];
        std::snprintf(id, sizeof id, "syn-%04d", n);
        out.emplace_back(id, std::move(target), caption);
    }
    return out;
}

std::filesystem::path write_manifest(std::span<const DatasetRecord> records, const ClassVocabulary& vocab,
                                     const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "masks");
    write_file(dir / "vocab.json", vocab.to_json());
    std::string lines;
    for (const auto& r : records) {
        const std::string mask = "masks/" + r.id() + ".png";
        write_file(dir / mask, encode_mask(r.target(), vocab).index_map);
        lines += nlohmann::json{{"id", r.id()}, {"mask_path", mask}, {"caption", r.caption()}, {"vocab_path", "vocab.json"}}
                     .dump() +
                 "\n";
    }
    const auto path = dir / "manifest.jsonl";
    write_file(path, lines);
    return path;
}

}  // namespace segguide
