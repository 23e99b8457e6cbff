// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segguide/backends.hpp"
#include "segguide/core.hpp"

namespace segguide {

/// A guide model plus the slot of its loss factor in LossWeights::alpha_seg.
struct GuideRegistration {
    std::shared_ptr<const Segmenter> segmenter;
    std::size_t weight_index = 0;
};

/// One registration per segmenter, weight_index = position.
std::vector<GuideRegistration> register_guides(const std::vector<std::shared_ptr<const Segmenter>>& segmenters);

struct OptimizerConfig {
    int max_steps = 300;
    double step_size = 0.2;
    /// Heavy-ball coefficient; 0 gives plain fixed-step gradient descent.
    double momentum = 0.9;
    int plateau_patience = 30;
    double plateau_tolerance = 1e-5;
    LossWeights weights;

    /// Throws ValidationError listing every bad field.
    void validate(std::size_t guide_count) const;
};

struct TraceRow {
    int step = 0;
    double l_clip = 0.0;
    std::vector<double> l_seg;  // one per routed guide, routing order
    double l_total = 0.0;
};

struct StageOneResult {
    std::string id;
    Image image;
    double final_loss = 0.0;
    int best_step = 0;
    int steps_run = 0;
    std::vector<TraceRow> trace;  // empty when restored from a job document
    LatentState latent;
    std::vector<std::size_t> routed_guides;  // weight indices of the guides in each trace row
};

/// mean((pred - target)^2) over every plane value.
double segmentation_loss(const SegMask& pred, const SegMask& target);

/// Registrations whose supported classes intersect the foreground classes
/// present in `target`, in registration order. Throws OrphanClassError
/// for a target class no registration supports.
std::vector<GuideRegistration> route_guides(const SegMask& target, std::span<const GuideRegistration> registered,
                                            const ClassVocabulary* vocab = nullptr);

/// alpha_c * l_clip + sum_i alpha_s_i * l_seg_i, in index order.
double total_loss(double l_clip, std::span<const double> l_segs, const LossWeights& weights);

/// Loss components and latent gradient at one latent.
struct ObjectiveValue {
    double l_clip = 0.0;
    std::vector<double> l_seg;
    double l_total = 0.0;
    Eigen::VectorXd gradient;  // empty unless requested
    Image image;
};

/// The composite Stage-1 objective over a fixed prompt, target and set of
/// routed guides.
class Objective {
public:
    Objective(std::shared_ptr<const Generator> generator, std::shared_ptr<const Scorer> scorer,
              std::vector<GuideRegistration> routed, std::string prompt, SegMask target, LossWeights weights);

    ObjectiveValue operator()(const LatentState& latent, bool with_gradient) const;

    /// The weights of the routed guides only, in routing order.
    const LossWeights& active_weights() const noexcept { return active_weights_; }
    const std::vector<GuideRegistration>& routed() const noexcept { return routed_; }

private:
    std::shared_ptr<const Generator> generator_;
    std::shared_ptr<const Scorer> scorer_;
    std::vector<GuideRegistration> routed_;
    std::vector<std::vector<int>> guide_classes_;  // background + supported, per routed guide
    std::vector<SegMask> guide_targets_;
    std::string prompt_;
    LossWeights active_weights_;
};

struct StageOneBackends {
    std::shared_ptr<const Generator> generator;
    std::shared_ptr<const Scorer> scorer;
    std::vector<GuideRegistration> guides;
    ClassVocabulary vocab;

    static StageOneBackends from(const BackendSet& set);
};

/// Called once per optimization step with the fresh trace row.
using StepObserver = std::function<void(const TraceRow&)>;

/// Gradient descent on the generator latent under total_loss. Returns the best
/// step by total loss, not the last iterate.
StageOneResult optimize(const std::string& prompt, const SegMask& target, const StageOneBackends& backends,
                        const OptimizerConfig& config, std::uint64_t seed, const StepObserver& observer = {});

nlohmann::json trace_to_json(const StageOneResult& result);
std::string trace_to_csv(const StageOneResult& result);

}  // namespace segguide
