// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

// Shared fixtures and independent reference implementations for tests.

#pragma once

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "segguide/backends.hpp"
#include "segguide/core.hpp"
#include "segguide/evalharness.hpp"
#include "segguide/hash.hpp"
#include "segguide/pipeline.hpp"
#include "segguide/stage1.hpp"

namespace fixture {

using namespace segguide;

inline constexpr int kSize = 16;
inline constexpr int kDog = 2;
inline constexpr double kGuidedThreshold = 0.8;
inline constexpr int kSeeds = 20;

/// The toy task: one 10x10 dog square at [3,13)^2 on a 16x16 canvas,
/// prompt "a dog".
inline SegMask toy_task_target() {
    std::vector<int> labels(kSize * kSize, 0);
    for (int y = 3; y < 13; ++y) {
        for (int x = 3; x < 13; ++x) {
            labels[static_cast<std::size_t>(y * kSize + x)] = kDog;
        }
    }
    return SegMask::from_labels(kSize, kSize, ClassVocabulary::toy_default().size(), labels);
}

inline const char* toy_task_prompt() { return "a dog"; }

inline BackendSet toy_backends(int width = kSize, int height = kSize) {
    return make_backends(toy_backend_config(width, height), ClassVocabulary::toy_default());
}

/// Backends whose guides support the given class lists.
inline BackendSet toy_backends_with_guides(const std::vector<std::vector<int>>& guide_classes) {
    auto config = toy_backend_config();
    config["segmenters"] = nlohmann::json::array();
    for (const auto& classes : guide_classes) {
        config["segmenters"].push_back({{"name", "toy"}, {"params", {{"classes", classes}}}});
    }
    return make_backends(config, ClassVocabulary::toy_default());
}

inline SegMask random_hard_mask(SeededRng& rng, int width, int height, int classes) {
    std::vector<int> labels(static_cast<std::size_t>(width * height));
    for (auto& l : labels) {
        l = rng.uniform_int(0, classes - 1);
    }
    return SegMask::from_labels(width, height, classes, labels);
}

inline SegMask random_soft_mask(SeededRng& rng, int width, int height, int classes) {
    SegMask::Planes p(classes, width * height);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        p.data()[i] = rng.uniform();
    }
    return SegMask(width, height, p);
}

/// Reference IoU by direct pixel counting over label arrays.
inline double brute_force_iou(const std::vector<int>& pred, const std::vector<int>& target, int classes) {
    double sum = 0.0;
    int present = 0;
    for (int c = 1; c < classes; ++c) {
        long inter = 0;
        long uni = 0;
        for (std::size_t p = 0; p < pred.size(); ++p) {
            const bool a = pred[p] == c;
            const bool b = target[p] == c;
            inter += (a && b) ? 1 : 0;
            uni += (a || b) ? 1 : 0;
        }
        if (uni > 0) {
            sum += static_cast<double>(inter) / static_cast<double>(uni);
            ++present;
        }
    }
    return present == 0 ? 1.0 : sum / present;
}

/// Reference record filter written from the protocol text.
inline bool brute_force_keep(const std::vector<int>& labels, int classes, int person) {
    std::vector<long> counts(static_cast<std::size_t>(classes), 0);
    for (int l : labels) {
        ++counts[static_cast<std::size_t>(l)];
    }
    int objects = 0;
    for (int c = 1; c < classes; ++c) {
        if (counts[static_cast<std::size_t>(c)] == 0) {
            continue;
        }
        if (c == person) {
            return false;
        }
        ++objects;
        if (static_cast<double>(counts[static_cast<std::size_t>(c)]) < 0.05 * static_cast<double>(labels.size())) {
            return false;
        }
    }
    return objects >= 2 && objects <= 4;
}

/// Reference mean squared plane difference.
inline double reference_seg_loss(const SegMask& a, const SegMask& b) {
    double sum = 0.0;
    long n = 0;
    for (int c = 0; c < a.num_classes(); ++c) {
        for (int p = 0; p < a.pixel_count(); ++p) {
            const double d = a.planes()(c, p) - b.planes()(c, p);
            sum += d * d;
            ++n;
        }
    }
    return sum / static_cast<double>(n);
}

/// Guides invoked for a target, from set intersection.
inline std::set<std::size_t> brute_force_routing(const std::vector<int>& target_labels,
                                                 const std::vector<std::vector<int>>& guide_classes) {
    std::set<int> wanted;
    for (int l : target_labels) {
        if (l > 0) {
            wanted.insert(l);
        }
    }
    std::set<std::size_t> out;
    for (std::size_t g = 0; g < guide_classes.size(); ++g) {
        for (int c : guide_classes[g]) {
            if (wanted.count(c)) {
                out.insert(g);
            }
        }
    }
    return out;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto dir = std::filesystem::temp_directory_path() /
                     ("segguide-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

/// L2 distance between two images' pixel arrays.
inline double image_distance(const Image& a, const Image& b) { return (a.pixels() - b.pixels()).matrix().norm(); }

}  // namespace fixture
