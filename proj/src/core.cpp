// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#include "segguide/core.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

namespace segguide {

ClassVocabulary::ClassVocabulary(std::vector<ClassEntry> entries) : entries_(std::move(entries)) {
    if (entries_.empty()) {
        throw ConfigError("vocabulary must contain a background class");
    }
    std::sort(entries_.begin(), entries_.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::set<std::string> names;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto& e = entries_[i];
        if (e.id != static_cast<int>(i)) {
            throw ConfigError("class ids must be unique and contiguous from 0; missing or duplicate id near " +
                              std::to_string(i));
        }
        if (e.name.empty() || !names.insert(e.name).second) {
            throw ConfigError("class names must be unique and non-empty: '" + e.name + "'");
        }
        if ((e.color < 0.0).any() || (e.color > 1.0).any()) {
            throw ConfigError("prototype colour of '" + e.name + "' must lie in [0,1]^3");
        }
    }
    if (entries_.size() > 256) {
        throw ConfigError("at most 256 classes fit an 8-bit index map");
    }
}

ClassVocabulary ClassVocabulary::toy_default() {
    return ClassVocabulary({
        {0, "background", Color(0.10, 0.10, 0.10)},
        {1, "person", Color(0.90, 0.85, 0.20)},
        {2, "dog", Color(0.90, 0.20, 0.20)},
        {3, "car", Color(0.20, 0.85, 0.25)},
        {4, "boat", Color(0.20, 0.30, 0.90)},
    });
}

const ClassEntry& ClassVocabulary::operator[](int id) const {
    if (id < 0 || id >= size()) {
        throw RangeError("class id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(size()));
    }
    return entries_[static_cast<std::size_t>(id)];
}

std::optional<int> ClassVocabulary::find(std::string_view name) const {
    for (const auto& e : entries_) {
        if (e.name == name) {
            return e.id;
        }
    }
    return std::nullopt;
}

std::string ClassVocabulary::names_joined() const {
    std::string out;
    for (const auto& e : entries_) {
        if (!out.empty()) {
            out += ", ";
        }
        out += e.name;
    }
    return out;
}

std::string ClassVocabulary::to_json() const {
    nlohmann::ordered_json doc = nlohmann::ordered_json::object();
    for (const auto& e : entries_) {
        doc[std::to_string(e.id)] = {{"name", e.name}, {"color", {e.color[0], e.color[1], e.color[2]}}};
    }
    return doc.dump(2);
}

ClassVocabulary ClassVocabulary::from_json(std::string_view text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("vocabulary document is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) {
        throw ConfigError("vocabulary document must be an object of class_id -> {name, color}");
    }
    std::vector<ClassEntry> entries;
    for (const auto& [key, value] : doc.items()) {
        ClassEntry e;
        try {
            std::size_t used = 0;
            e.id = std::stoi(key, &used);
            if (used != key.size()) {
                throw std::invalid_argument(key);
            }
            e.name = value.at("name").get<std::string>();
            const auto& c = value.at("color");
            if (!c.is_array() || c.size() != 3) {
                throw ConfigError("colour of class " + key + " must be an RGB triple");
            }
            e.color = Color(c[0].get<double>(), c[1].get<double>(), c[2].get<double>());
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& ex) {
            throw ConfigError("bad vocabulary entry '" + key + "': " + ex.what());
        }
        entries.push_back(std::move(e));
    }
    return ClassVocabulary(std::move(entries));
}

bool ClassVocabulary::operator==(const ClassVocabulary& other) const {
    return std::equal(entries_.begin(), entries_.end(), other.entries_.begin(), other.entries_.end(),
                      [](const ClassEntry& a, const ClassEntry& b) {
                          return a.id == b.id && a.name == b.name && (a.color == b.color).all();
                      });
}

SegMask restrict_prediction(const SegMask& pred, std::span<const int> classes) {
    SegMask::Planes planes(static_cast<Eigen::Index>(classes.size()), pred.pixel_count());
    for (std::size_t r = 0; r < classes.size(); ++r) {
        if (classes[r] < 0 || classes[r] >= pred.num_classes()) {
            throw ShapeError("restriction class " + std::to_string(classes[r]) + " not in mask of shape " +
                             pred.shape_string());
        }
        planes.row(static_cast<Eigen::Index>(r)) = pred.planes().row(classes[r]);
    }
    return SegMask(pred.width(), pred.height(), std::move(planes));
}

SegMask restrict_target(const SegMask& target, std::span<const int> classes) {
    std::vector<int> row_of(static_cast<std::size_t>(target.num_classes()), 0);
    for (std::size_t r = 0; r < classes.size(); ++r) {
        if (classes[r] < 0 || classes[r] >= target.num_classes()) {
            throw ShapeError("restriction class " + std::to_string(classes[r]) + " not in mask of shape " +
                             target.shape_string());
        }
        row_of[static_cast<std::size_t>(classes[r])] = static_cast<int>(r);
    }
    auto labels = target.labels();
    for (auto& l : labels) {
        l = row_of[static_cast<std::size_t>(l)];
    }
    return SegMask::from_labels(target.width(), target.height(), static_cast<int>(classes.size()), labels);
}

void LossWeights::validate(std::size_t guide_count) const {
    std::vector<FieldError> errors;
    if (!(alpha_clip >= 0.0) || !std::isfinite(alpha_clip)) {
        errors.push_back({"alpha_clip", "must be a finite nonnegative number"});
    }
    for (std::size_t i = 0; i < alpha_seg.size(); ++i) {
        if (!(alpha_seg[i] >= 0.0) || !std::isfinite(alpha_seg[i])) {
            errors.push_back({"alpha_seg[" + std::to_string(i) + "]", "must be a finite nonnegative number"});
        }
    }
    if (alpha_seg.size() != guide_count) {
        errors.push_back({"alpha_seg", "has " + std::to_string(alpha_seg.size()) + " entries but " +
                                           std::to_string(guide_count) + " guides are registered"});
    }
    if (!errors.empty()) {
        throw ValidationError(std::move(errors));
    }
}

LossWeights LossWeights::scaled(double factor) const {
    LossWeights out{alpha_clip * factor, alpha_seg};
    for (auto& a : out.alpha_seg) {
        a *= factor;
    }
    return out;
}

double iou(const SegMask& pred, const SegMask& target, IouMode mode) {
    if (!pred.same_shape(target)) {
        throw ShapeError("iou shape mismatch: pred " + pred.shape_string() + " vs target " + target.shape_string());
    }
    if (!pred.is_hard() || !target.is_hard()) {
        throw RangeError("iou requires hard masks");
    }
    const auto a = pred.labels();
    const auto b = target.labels();
    const auto classes = static_cast<std::size_t>(pred.num_classes());

    if (mode == IouMode::ClassAgnostic) {
        std::size_t inter = 0;
        std::size_t uni = 0;
        for (std::size_t p = 0; p < a.size(); ++p) {
            if (a[p] > 0 || b[p] > 0) {
                ++uni;
                inter += (a[p] == b[p]) ? 1 : 0;
            }
        }
        return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }

    std::vector<std::size_t> inter(classes, 0);
    std::vector<std::size_t> uni(classes, 0);
    for (std::size_t p = 0; p < a.size(); ++p) {
        if (a[p] == b[p]) {
            ++inter[static_cast<std::size_t>(a[p])];
            ++uni[static_cast<std::size_t>(a[p])];
        } else {
            ++uni[static_cast<std::size_t>(a[p])];
            ++uni[static_cast<std::size_t>(b[p])];
        }
    }
    double sum = 0.0;
    int present = 0;
    for (std::size_t c = 1; c < classes; ++c) {
        if (uni[c] > 0) {
            sum += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
            ++present;
        }
    }
    return present == 0 ? 1.0 : sum / present;
}

}  // namespace segguide
