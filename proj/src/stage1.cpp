// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#include "segguide/stage1.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace segguide {

std::vector<GuideRegistration> register_guides(const std::vector<std::shared_ptr<const Segmenter>>& segmenters) {
    std::vector<GuideRegistration> out;
    for (std::size_t i = 0; i < segmenters.size(); ++i) {
        out.push_back({segmenters[i], i});
    }
    return out;
}

void OptimizerConfig::validate(std::size_t guide_count) const {
    std::vector<FieldError> errors;
    if (max_steps <= 0) {
        errors.push_back({"max_steps", "must be positive"});
    }
    if (!(step_size > 0.0) || !std::isfinite(step_size)) {
        errors.push_back({"step_size", "must be positive"});
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        errors.push_back({"momentum", "must lie in [0,1)"});
    }
    if (plateau_patience <= 0) {
        errors.push_back({"plateau_patience", "must be positive"});
    }
    if (!(plateau_tolerance >= 0.0)) {
        errors.push_back({"plateau_tolerance", "must be nonnegative"});
    }
    try {
        weights.validate(guide_count);
    } catch (const ValidationError& e) {
        errors.insert(errors.end(), e.fields().begin(), e.fields().end());
    }
    if (!errors.empty()) {
        throw ValidationError(std::move(errors));
    }
}

double segmentation_loss(const SegMask& pred, const SegMask& target) {
    if (!pred.same_shape(target)) {
        throw ShapeError("segmentation_loss shape mismatch: " + pred.shape_string() + " vs " + target.shape_string());
    }
    return (pred.planes() - target.planes()).square().mean();
}

std::vector<GuideRegistration> route_guides(const SegMask& target, std::span<const GuideRegistration> registered,
                                            const ClassVocabulary* vocab) {
    if (!target.is_hard()) {
        throw RangeError("route_guides requires a hard target mask");
    }
    std::vector<int> wanted;
    for (int c : target.present_classes()) {
        if (c > 0) {
            wanted.push_back(c);
        }
    }
    for (int c : wanted) {
        const bool covered = std::any_of(registered.begin(), registered.end(), [c](const GuideRegistration& g) {
            const auto s = g.segmenter->supported_classes();
            return std::find(s.begin(), s.end(), c) != s.end();
        });
        if (!covered) {
            std::string name;
            if (vocab != nullptr && c < vocab->size()) {
                name = (*vocab)[c].name;
            }
            throw OrphanClassError(c, name);
        }
    }
    std::vector<GuideRegistration> out;
    for (const auto& g : registered) {
        const auto s = g.segmenter->supported_classes();
        const bool hit = std::any_of(wanted.begin(), wanted.end(),
                                     [&](int c) { return std::find(s.begin(), s.end(), c) != s.end(); });
        if (hit) {
            out.push_back(g);
        }
    }
    return out;
}

double total_loss(double l_clip, std::span<const double> l_segs, const LossWeights& weights) {
    if (l_segs.size() != weights.alpha_seg.size()) {
        throw ShapeError("total_loss got " + std::to_string(l_segs.size()) + " segmentation losses for " +
                         std::to_string(weights.alpha_seg.size()) + " weights");
    }
    double total = weights.alpha_clip * l_clip;
    for (std::size_t i = 0; i < l_segs.size(); ++i) {
        total += weights.alpha_seg[i] * l_segs[i];
    }
    return total;
}

// ---------------------------------------------------------------------------

Objective::Objective(std::shared_ptr<const Generator> generator, std::shared_ptr<const Scorer> scorer,
                     std::vector<GuideRegistration> routed, std::string prompt, SegMask target, LossWeights weights)
    : generator_(std::move(generator)),
      scorer_(std::move(scorer)),
      routed_(std::move(routed)),
      prompt_(std::move(prompt)),
      active_weights_{weights.alpha_clip, {}} {
    if (target.width() != generator_->width() || target.height() != generator_->height()) {
        throw ShapeError("target mask is " + std::to_string(target.width()) + "x" + std::to_string(target.height()) +
                         " but the generator renders " + std::to_string(generator_->width()) + "x" +
                         std::to_string(generator_->height()));
    }
    for (const auto& g : routed_) {
        if (g.weight_index >= weights.alpha_seg.size()) {
            throw ShapeError("guide weight_index " + std::to_string(g.weight_index) + " outside alpha_seg of size " +
                             std::to_string(weights.alpha_seg.size()));
        }
        if (g.segmenter->num_classes() != target.num_classes()) {
            throw ShapeError("guide '" + g.segmenter->name() + "' predicts " +
                             std::to_string(g.segmenter->num_classes()) + " planes, target has " +
                             std::to_string(target.num_classes()));
        }
        active_weights_.alpha_seg.push_back(weights.alpha_seg[g.weight_index]);
        std::vector<int> classes{0};
        for (int c : g.segmenter->supported_classes()) {
            classes.push_back(c);
        }
        guide_targets_.push_back(restrict_target(target, classes));
        guide_classes_.push_back(std::move(classes));
    }
}

ObjectiveValue Objective::operator()(const LatentState& latent, bool with_gradient) const {
    ObjectiveValue out;
    out.image = generator_->decode(latent);
    out.l_clip = scorer_->score(out.image, prompt_);

    ImageGradient image_grad;
    if (with_gradient) {
        image_grad = active_weights_.alpha_clip * scorer_->score_gradient(out.image, prompt_);
    }

    for (std::size_t i = 0; i < routed_.size(); ++i) {
        const auto& seg = *routed_[i].segmenter;
        const SegMask pred = seg.predict(out.image);
        const SegMask restricted = restrict_prediction(pred, guide_classes_[i]);
        const SegMask& target = guide_targets_[i];
        out.l_seg.push_back(segmentation_loss(restricted, target));

        if (with_gradient) {
            // d mean((p - t)^2) / dp = 2 (p - t) / N, scattered back to full planes.
            const double scale = 2.0 / static_cast<double>(restricted.planes().size());
            SegMask::Planes upstream = SegMask::Planes::Zero(pred.num_classes(), pred.pixel_count());
            for (std::size_t r = 0; r < guide_classes_[i].size(); ++r) {
                const auto row = static_cast<Eigen::Index>(r);
                upstream.row(guide_classes_[i][r]) =
                    active_weights_.alpha_seg[i] * scale * (restricted.planes().row(row) - target.planes().row(row));
            }
            image_grad += seg.predict_vjp(out.image, upstream);
        }
    }
    out.l_total = total_loss(out.l_clip, out.l_seg, active_weights_);
    if (with_gradient) {
        out.gradient = generator_->decode_vjp(latent, image_grad);
    }
    return out;
}

StageOneBackends StageOneBackends::from(const BackendSet& set) {
    return StageOneBackends{set.generator, set.scorer, register_guides(set.segmenters), set.vocab};
}

// ---------------------------------------------------------------------------

namespace {

std::string describe(const ObjectiveValue& v) {
    std::ostringstream os;
    os << "L_clip=" << v.l_clip << " L_seg=[";
    for (std::size_t i = 0; i < v.l_seg.size(); ++i) {
        os << (i ? ", " : "") << v.l_seg[i];
    }
    os << "] L_t=" << v.l_total;
    return os.str();
}

}  // namespace

StageOneResult optimize(const std::string& prompt, const SegMask& target, const StageOneBackends& backends,
                        const OptimizerConfig& config, std::uint64_t seed, const StepObserver& observer) {
    config.validate(backends.guides.size());
    if (!target.is_hard()) {
        throw RangeError("target mask must be hard");
    }
    backends.scorer->validate_prompt(prompt);
    auto routed = route_guides(target, backends.guides, backends.vocab.size() > 0 ? &backends.vocab : nullptr);

    StageOneResult result;
    for (const auto& g : routed) {
        result.routed_guides.push_back(g.weight_index);
    }
    const Objective objective(backends.generator, backends.scorer, std::move(routed), prompt, target,
                              config.weights);

    LatentState state{backends.generator->initial_latent(seed), seed, 0};
    Eigen::VectorXd velocity = Eigen::VectorXd::Zero(state.z.size());

    double best = std::numeric_limits<double>::infinity();
    double plateau_ref = std::numeric_limits<double>::infinity();
    int since_improvement = 0;

    for (int step = 0; step < config.max_steps; ++step) {
        state.step = step;
        ObjectiveValue value = objective(state, true);
        if (!std::isfinite(value.l_total) || !value.gradient.allFinite()) {
            throw NumericError("non-finite loss or gradient at step " + std::to_string(step) + ": " + describe(value),
                               step);
        }

        TraceRow row{step, value.l_clip, value.l_seg, value.l_total};
        result.trace.push_back(row);
        result.steps_run = step + 1;
        if (observer) {
            observer(row);
        }

        if (value.l_total < best) {
            best = value.l_total;
            result.final_loss = value.l_total;
            result.best_step = step;
            result.image = std::move(value.image);
            result.latent = state;
        }
        if (value.l_total < plateau_ref - config.plateau_tolerance) {
            plateau_ref = value.l_total;
            since_improvement = 0;
        } else if (++since_improvement >= config.plateau_patience) {
            break;
        }

        velocity = config.momentum * velocity - config.step_size * value.gradient;
        state.z += velocity;
    }
    return result;
}

nlohmann::json trace_to_json(const StageOneResult& result) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : result.trace) {
        rows.push_back({{"step", r.step}, {"l_clip", r.l_clip}, {"l_seg", r.l_seg}, {"l_total", r.l_total}});
    }
    return {{"id", result.id},
            {"best_step", result.best_step},
            {"final_loss", result.final_loss},
            {"guides", result.routed_guides},
            {"trace", std::move(rows)}};
}

std::string trace_to_csv(const StageOneResult& result) {
    std::ostringstream os;
    os.precision(17);
    os << "step,l_clip";
    for (auto g : result.routed_guides) {
        os << ",l_seg_" << g;
    }
    os << ",l_total\n";
    for (const auto& r : result.trace) {
        os << r.step << ',' << r.l_clip;
        for (double s : r.l_seg) {
            os << ',' << s;
        }
        os << ',' << r.l_total << '\n';
    }
    return os.str();
}

}  // namespace segguide
