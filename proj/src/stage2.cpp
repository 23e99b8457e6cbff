// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#include "segguide/stage2.hpp"

#include <algorithm>
#include <cmath>

namespace segguide {

void RefineConfig::validate() const {
    std::vector<FieldError> errors;
    if (!(strength >= 0.0 && strength <= 1.0)) {
        errors.push_back({"strength", "must lie in [0,1]"});
    }
    if (steps < 1) {
        errors.push_back({"steps", "must be at least 1"});
    }
    if (!errors.empty()) {
        throw ValidationError(std::move(errors));
    }
}

Image resize_bridge(const Image& image, int target_width, int target_height) {
    if (target_width <= 0 || target_height <= 0) {
        throw RangeError("resize target must be positive, got " + std::to_string(target_width) + "x" +
                         std::to_string(target_height));
    }
    if (target_width == image.width() && target_height == image.height()) {
        return image;
    }
    // Source coordinate of a destination pixel centre, clamped to the
    // outermost source centres.
    auto sample = [](int dst, int dst_extent, int src_extent) {
        const double s = (dst + 0.5) * src_extent / dst_extent - 0.5;
        const double clamped = std::clamp(s, 0.0, static_cast<double>(src_extent - 1));
        const int i0 = static_cast<int>(std::floor(clamped));
        const int i1 = std::min(i0 + 1, src_extent - 1);
        return std::tuple{i0, i1, clamped - i0};
    };

    Image::Pixels out(3, static_cast<Eigen::Index>(target_width) * target_height);
    for (int y = 0; y < target_height; ++y) {
        const auto [y0, y1, fy] = sample(y, target_height, image.height());
        for (int x = 0; x < target_width; ++x) {
            const auto [x0, x1, fx] = sample(x, target_width, image.width());
            const Color top = (1.0 - fx) * image.at(x0, y0) + fx * image.at(x1, y0);
            const Color bottom = (1.0 - fx) * image.at(x0, y1) + fx * image.at(x1, y1);
            out.col(static_cast<Eigen::Index>(y) * target_width + x) = (1.0 - fy) * top + fy * bottom;
        }
    }
    return Image(target_width, target_height, std::move(out));
}

StageTwoResult refine(const Image& stage1_image, const std::string& source_id, const std::string& prompt,
                      const RefineConfig& config, const Refiner& refiner) {
    config.validate();
    Image input = stage1_image;
    if (const auto res = refiner.resolution()) {
        input = resize_bridge(stage1_image, res->first, res->second);
    }
    StageTwoResult result;
    result.source = source_id;
    result.config = config;
    try {
        result.image = refiner.refine(input, prompt, config.strength, config.seed, config.steps);
    } catch (const std::exception& e) {
        throw StageTwoError("refiner '" + refiner.name() + "' failed: " + e.what());
    }
    if (result.image.width() != input.width() || result.image.height() != input.height()) {
        throw StageTwoError("refiner '" + refiner.name() + "' returned " + std::to_string(result.image.width()) + "x" +
                            std::to_string(result.image.height()) + ", expected " + std::to_string(input.width()) +
                            "x" + std::to_string(input.height()));
    }
    return result;
}

}  // namespace segguide
