// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "segguide/errors.hpp"

namespace segguide {

using Color = Eigen::Array3d;

struct ClassEntry {
    int id = 0;
    std::string name;
    Color color = Color::Zero();
};

/// Ordered class universe. Class 0 is always background; ids are
/// contiguous from 0 and names are unique.
class ClassVocabulary {
public:
    ClassVocabulary() = default;
    explicit ClassVocabulary(std::vector<ClassEntry> entries);

    /// background, person and three animal/vehicle classes with
    /// well separated prototype colours.
    static ClassVocabulary toy_default();

    int size() const noexcept { return static_cast<int>(entries_.size()); }
    const ClassEntry& operator[](int id) const;
    const std::vector<ClassEntry>& entries() const noexcept { return entries_; }

    std::optional<int> find(std::string_view name) const;
    std::string names_joined() const;

    /// Sidecar document: {"<id>": {"name": ..., "color": [r, g, b]}, ...}.
    std::string to_json() const;
    static ClassVocabulary from_json(std::string_view text);

    bool operator==(const ClassVocabulary& other) const;

private:
    std::vector<ClassEntry> entries_;
};

/// RGB image in [0,1], one column per pixel in row-major pixel order.
template <typename Scalar>
class ImageT {
public:
    using Pixels = Eigen::Array<Scalar, 3, Eigen::Dynamic>;
    using Pixel = Eigen::Array<Scalar, 3, 1>;

    ImageT() = default;

    ImageT(int width, int height, Pixels pixels) : width_(width), height_(height), pixels_(std::move(pixels)) {
        if (width <= 0 || height <= 0) {
            throw ShapeError("image dimensions must be positive, got " + std::to_string(width) + "x" +
                             std::to_string(height));
        }
        if (pixels_.cols() != static_cast<Eigen::Index>(width) * height) {
            throw ShapeError("image pixel count " + std::to_string(pixels_.cols()) + " does not match " +
                             std::to_string(width) + "x" + std::to_string(height));
        }
        pixels_ = pixels_.max(Scalar(0)).min(Scalar(1));
    }

    static ImageT filled(int width, int height, const Pixel& color) {
        Pixels px(3, static_cast<Eigen::Index>(width) * height);
        px.colwise() = color;
        return ImageT(width, height, std::move(px));
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    Eigen::Index pixel_count() const noexcept { return pixels_.cols(); }
    const Pixels& pixels() const noexcept { return pixels_; }

    Pixel at(int x, int y) const { return pixels_.col(static_cast<Eigen::Index>(y) * width_ + x); }

    bool operator==(const ImageT& other) const {
        return width_ == other.width_ && height_ == other.height_ && (pixels_ == other.pixels_).all();
    }

private:
    int width_ = 0;
    int height_ = 0;
    Pixels pixels_;
};

using Image = ImageT<double>;

/// Upstream/downstream gradient with the layout of Image::Pixels.
using ImageGradient = Eigen::Array3Xd;

/// Stack of per-class planes, rows = classes, columns = pixels.
template <typename Scalar>
class SegMaskT {
public:
    using Planes = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

    SegMaskT() = default;

    SegMaskT(int width, int height, Planes planes) : width_(width), height_(height), planes_(std::move(planes)) {
        if (width <= 0 || height <= 0) {
            throw ShapeError("mask dimensions must be positive");
        }
        if (planes_.cols() != static_cast<Eigen::Index>(width) * height || planes_.rows() < 1) {
            throw ShapeError("mask planes " + std::to_string(planes_.rows()) + "x" + std::to_string(planes_.cols()) +
                             " do not match " + std::to_string(width) + "x" + std::to_string(height));
        }
        if ((planes_ < Scalar(0)).any() || (planes_ > Scalar(1)).any() || !planes_.allFinite()) {
            throw RangeError("mask plane values must lie in [0,1]");
        }
    }

    /// One-hot mask from a per-pixel label map.
    static SegMaskT from_labels(int width, int height, int num_classes, std::span<const int> labels) {
        if (labels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
            throw ShapeError("label count does not match mask dimensions");
        }
        Planes planes = Planes::Zero(num_classes, static_cast<Eigen::Index>(labels.size()));
        for (std::size_t p = 0; p < labels.size(); ++p) {
            if (labels[p] < 0 || labels[p] >= num_classes) {
                throw RangeError("label " + std::to_string(labels[p]) + " outside vocabulary of size " +
                                 std::to_string(num_classes));
            }
            planes(labels[p], static_cast<Eigen::Index>(p)) = Scalar(1);
        }
        return SegMaskT(width, height, std::move(planes));
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    int num_classes() const noexcept { return static_cast<int>(planes_.rows()); }
    Eigen::Index pixel_count() const noexcept { return planes_.cols(); }
    const Planes& planes() const noexcept { return planes_; }

    bool same_shape(const SegMaskT& other) const noexcept {
        return width_ == other.width_ && height_ == other.height_ && num_classes() == other.num_classes();
    }

    std::string shape_string() const {
        return std::to_string(num_classes()) + "x" + std::to_string(height_) + "x" + std::to_string(width_);
    }

    /// Values in {0,1} with exactly one 1 per pixel.
    bool is_hard() const {
        if (((planes_ != Scalar(0)) && (planes_ != Scalar(1))).any()) {
            return false;
        }
        return (planes_.colwise().sum() == Scalar(1)).all();
    }

    /// Argmax per pixel; ties go to the lower class id.
    std::vector<int> labels() const {
        std::vector<int> out(static_cast<std::size_t>(pixel_count()));
        for (Eigen::Index p = 0; p < pixel_count(); ++p) {
            Eigen::Index best = 0;
            for (Eigen::Index c = 1; c < planes_.rows(); ++c) {
                if (planes_(c, p) > planes_(best, p)) {
                    best = c;
                }
            }
            out[static_cast<std::size_t>(p)] = static_cast<int>(best);
        }
        return out;
    }

    SegMaskT hardened() const {
        const auto l = labels();
        return from_labels(width_, height_, num_classes(), l);
    }

    /// Class ids with at least one pixel in the argmax labelling.
    std::vector<int> present_classes() const {
        std::vector<bool> seen(static_cast<std::size_t>(num_classes()), false);
        for (int l : labels()) {
            seen[static_cast<std::size_t>(l)] = true;
        }
        std::vector<int> out;
        for (int c = 0; c < num_classes(); ++c) {
            if (seen[static_cast<std::size_t>(c)]) {
                out.push_back(c);
            }
        }
        return out;
    }

    bool operator==(const SegMaskT& other) const {
        return same_shape(other) && (planes_ == other.planes_).all();
    }

private:
    int width_ = 0;
    int height_ = 0;
    Planes planes_;
};

using SegMask = SegMaskT<double>;

/// Selects rows `classes` (in the given order) of a predicted mask.
SegMask restrict_prediction(const SegMask& pred, std::span<const int> classes);

/// Restricts a hard target to `classes`; pixels of any other class are
/// relabelled to the first entry (background).
SegMask restrict_target(const SegMask& target, std::span<const int> classes);

/// Loss factors: one for the text-image scorer, one per registered guide.
struct LossWeights {
    double alpha_clip = 1.0;
    std::vector<double> alpha_seg;

    static LossWeights uniform(std::size_t guides, double alpha_clip = 1.0, double alpha_seg = 5.0) {
        return LossWeights{alpha_clip, std::vector<double>(guides, alpha_seg)};
    }

    /// Throws ValidationError listing every negative weight and a count mismatch.
    void validate(std::size_t guide_count) const;

    LossWeights scaled(double factor) const;
};

/// The optimizable generator input plus its provenance.
struct LatentState {
    Eigen::VectorXd z;
    std::uint64_t seed = 0;
    int step = 0;
};

enum class IouMode {
    PerClass,
    ClassAgnostic,
};

/// Foreground IoU between two hard masks.
///
/// PerClass averages per-class IoU over foreground classes present in
/// either mask; ClassAgnostic pools all foreground pixels, counting an
/// intersection only where both masks carry the same class. Both-empty
/// foreground yields 1.0.
double iou(const SegMask& pred, const SegMask& target, IouMode mode = IouMode::PerClass);

}  // namespace segguide
