// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "segguide/backends.hpp"
#include "segguide/core.hpp"

namespace segguide {

struct RefineConfig {
    /// 0 keeps the Stage-1 image, 1 ignores it.
    double strength = 0.55;
    /// Step budget passed to the refiner (below the usual 50 from pure noise).
    int steps = 25;
    std::uint64_t seed = 0;

    void validate() const;
};

struct StageTwoResult {
    std::string id;
    Image image;
    std::string source;  // id of the parent StageOneResult
    RefineConfig config;
};

/// Raised when the refiner fails; carries the refiner's diagnostic.
class StageTwoError : public Error {
public:
    using Error::Error;
};

/// Bilinear resampling with pixel-centre alignment; returns the input
/// unchanged when the size already matches.
Image resize_bridge(const Image& image, int target_width, int target_height);

/// Resizes to the refiner's working resolution (if it has one) and
/// delegates to Refiner::refine.
StageTwoResult refine(const Image& stage1_image, const std::string& source_id, const std::string& prompt,
                      const RefineConfig& config, const Refiner& refiner);

}  // namespace segguide
