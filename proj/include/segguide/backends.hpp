// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "segguide/core.hpp"

namespace segguide {

/// Maps a latent vector to an image (the VQGAN role).
class Generator {
public:
    virtual ~Generator() = default;

    virtual std::string name() const = 0;
    virtual int latent_dim() const = 0;
    virtual int width() const = 0;
    virtual int height() const = 0;

    virtual Image decode(const LatentState& latent) const = 0;

    /// Vector-Jacobian product: d<upstream, decode(z)>/dz.
    virtual Eigen::VectorXd decode_vjp(const LatentState& latent, const ImageGradient& upstream) const = 0;

    /// Initial latent drawn from the seeded source.
    virtual Eigen::VectorXd initial_latent(std::uint64_t seed) const;

    /// Exclusive backends are called by one job at a time.
    virtual bool exclusive() const { return false; }
};

/// Text-image loss; lower is a better prompt match (the CLIP role).
class Scorer {
public:
    virtual ~Scorer() = default;

    virtual std::string name() const = 0;
    virtual double score(const Image& image, const std::string& prompt) const = 0;
    virtual ImageGradient score_gradient(const Image& image, const std::string& prompt) const = 0;

    /// Throws if the prompt cannot be scored; called once before optimization.
    virtual void validate_prompt(const std::string& prompt) const { (void)prompt; }

    virtual bool exclusive() const { return false; }
};

/// Soft segmentation over the full vocabulary. Planes outside
/// supported_classes() plus background are identically zero.
class Segmenter {
public:
    virtual ~Segmenter() = default;

    virtual std::string name() const = 0;
    virtual int num_classes() const = 0;
    virtual std::vector<int> supported_classes() const = 0;
    virtual SegMask predict(const Image& image) const = 0;

    /// d<upstream, predict(image).planes()>/d image.
    virtual ImageGradient predict_vjp(const Image& image, const SegMask::Planes& upstream) const = 0;

    virtual bool exclusive() const { return false; }
};

/// Img-to-img refinement (the diffusion role).
class Refiner {
public:
    virtual ~Refiner() = default;

    virtual std::string name() const = 0;

    /// strength 0 returns the input; strength 1 ignores it.
    virtual Image refine(const Image& image, const std::string& prompt, double strength, std::uint64_t seed,
                         int steps) const = 0;

    /// Native working resolution, if the refiner has one.
    virtual std::optional<std::pair<int, int>> resolution() const { return std::nullopt; }

    virtual bool exclusive() const { return false; }
};

/// Everything the two stages need, resolved from a backend config.
struct BackendSet {
    std::shared_ptr<const Generator> generator;
    std::shared_ptr<const Scorer> scorer;
    std::vector<std::shared_ptr<const Segmenter>> segmenters;  // registered guides, in order
    std::shared_ptr<const Refiner> refiner;
    std::shared_ptr<const Segmenter> eval_segmenter;  // full-vocabulary, used for hardening/IoU
    ClassVocabulary vocab;
};

// ---------------------------------------------------------------------------
// Toy backend
// ---------------------------------------------------------------------------

namespace toy {

inline constexpr double kDefaultTau = 0.05;
inline constexpr int kDefaultBlobs = 4;
inline constexpr double kSelectorSigma = 0.35;
/// Blob radii are max_radius * sigmoid(.) in image-width units.
inline constexpr double kMaxRadius = 0.5;
inline constexpr double kObjectFraction = 0.1;

template <typename Scalar>
Scalar sigmoid(Scalar x) {
    using std::exp;
    return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + exp(-x)) : exp(x) / (Scalar(1) + exp(x));
}

/// Pixel-centre coordinate in (0,1).
inline double pixel_center(int i, int extent) { return (i + 0.5) / extent; }

/// Per-class target histogram of a prompt in the toy grammar
/// "a <class> and a <class> ...". Articles and "and" are ignored; every
/// other token must be a foreground class name.
Eigen::ArrayXd prompt_histogram(const std::string& prompt, const ClassVocabulary& vocab,
                                double object_fraction = kObjectFraction);

/// Foreground class ids named by a prompt, in order of appearance.
std::vector<int> prompt_classes(const std::string& prompt, const ClassVocabulary& vocab);

/// k soft radial blobs over the background colour; latent is k groups of
/// (cx, cy, rx, ry, class_selector), each through a sigmoid.
class BlobGenerator final : public Generator {
public:
    BlobGenerator(ClassVocabulary vocab, int width, int height, int blobs = kDefaultBlobs,
                  double selector_sigma = kSelectorSigma, double max_radius = kMaxRadius);

    std::string name() const override { return "toy"; }
    int latent_dim() const override { return 5 * blobs_; }
    int width() const override { return width_; }
    int height() const override { return height_; }
    int blobs() const { return blobs_; }

    Image decode(const LatentState& latent) const override;
    Eigen::VectorXd decode_vjp(const LatentState& latent, const ImageGradient& upstream) const override;

private:
    void check_latent(const Eigen::VectorXd& z) const;
    /// Colour mix of a selector value over foreground prototypes and its derivative.
    std::pair<Color, Color> selector_color(double selector) const;

    ClassVocabulary vocab_;
    int width_;
    int height_;
    int blobs_;
    double selector_sigma_;
    double max_radius_;
};

/// Softmax over negative squared colour distance to class prototypes.
class ColorSegmenter final : public Segmenter {
public:
    /// Empty `classes` means every foreground class.
    ColorSegmenter(ClassVocabulary vocab, std::vector<int> classes = {}, double tau = kDefaultTau);

    std::string name() const override { return "toy"; }
    int num_classes() const override { return vocab_.size(); }
    std::vector<int> supported_classes() const override { return classes_; }
    double tau() const { return tau_; }

    SegMask predict(const Image& image) const override;
    ImageGradient predict_vjp(const Image& image, const SegMask::Planes& upstream) const override;

private:
    ClassVocabulary vocab_;
    std::vector<int> classes_;
    std::vector<int> active_;  // background + classes_
    double tau_;
};

/// Squared distance between the soft class histogram of an image and the
/// prompt's target histogram.
class HistogramScorer final : public Scorer {
public:
    HistogramScorer(ClassVocabulary vocab, double tau = kDefaultTau, double object_fraction = kObjectFraction);

    std::string name() const override { return "toy"; }
    double score(const Image& image, const std::string& prompt) const override;
    ImageGradient score_gradient(const Image& image, const std::string& prompt) const override;
    void validate_prompt(const std::string& prompt) const override;

private:
    ClassVocabulary vocab_;
    ColorSegmenter segmenter_;
    double object_fraction_;
};

/// Blend toward a procedural image seeded by (seed, prompt).
class BlendRefiner final : public Refiner {
public:
    explicit BlendRefiner(ClassVocabulary vocab, std::optional<std::pair<int, int>> resolution = std::nullopt);

    std::string name() const override { return "toy"; }
    Image refine(const Image& image, const std::string& prompt, double strength, std::uint64_t seed,
                 int steps) const override;
    std::optional<std::pair<int, int>> resolution() const override { return resolution_; }

    /// The strength-1 endpoint.
    Image procedural(int width, int height, const std::string& prompt, std::uint64_t seed) const;

private:
    ClassVocabulary vocab_;
    std::optional<std::pair<int, int>> resolution_;
};

}  // namespace toy

// ---------------------------------------------------------------------------
// Exclusive-access decorators
// ---------------------------------------------------------------------------

/// Serializes every call into an exclusive generator.
class SerializedGenerator final : public Generator {
public:
    explicit SerializedGenerator(std::shared_ptr<const Generator> inner) : inner_(std::move(inner)) {}

    std::string name() const override { return inner_->name(); }
    int latent_dim() const override { return inner_->latent_dim(); }
    int width() const override { return inner_->width(); }
    int height() const override { return inner_->height(); }
    Image decode(const LatentState& latent) const override {
        std::lock_guard lock(mutex_);
        return inner_->decode(latent);
    }
    Eigen::VectorXd decode_vjp(const LatentState& latent, const ImageGradient& upstream) const override {
        std::lock_guard lock(mutex_);
        return inner_->decode_vjp(latent, upstream);
    }
    Eigen::VectorXd initial_latent(std::uint64_t seed) const override { return inner_->initial_latent(seed); }
    bool exclusive() const override { return true; }

private:
    std::shared_ptr<const Generator> inner_;
    mutable std::mutex mutex_;
};

class SerializedScorer final : public Scorer {
public:
    explicit SerializedScorer(std::shared_ptr<const Scorer> inner) : inner_(std::move(inner)) {}

    std::string name() const override { return inner_->name(); }
    double score(const Image& image, const std::string& prompt) const override {
        std::lock_guard lock(mutex_);
        return inner_->score(image, prompt);
    }
    ImageGradient score_gradient(const Image& image, const std::string& prompt) const override {
        std::lock_guard lock(mutex_);
        return inner_->score_gradient(image, prompt);
    }
    void validate_prompt(const std::string& prompt) const override { inner_->validate_prompt(prompt); }
    bool exclusive() const override { return true; }

private:
    std::shared_ptr<const Scorer> inner_;
    mutable std::mutex mutex_;
};

class SerializedSegmenter final : public Segmenter {
public:
    explicit SerializedSegmenter(std::shared_ptr<const Segmenter> inner) : inner_(std::move(inner)) {}

    std::string name() const override { return inner_->name(); }
    int num_classes() const override { return inner_->num_classes(); }
    std::vector<int> supported_classes() const override { return inner_->supported_classes(); }
    SegMask predict(const Image& image) const override {
        std::lock_guard lock(mutex_);
        return inner_->predict(image);
    }
    ImageGradient predict_vjp(const Image& image, const SegMask::Planes& upstream) const override {
        std::lock_guard lock(mutex_);
        return inner_->predict_vjp(image, upstream);
    }
    bool exclusive() const override { return true; }

private:
    std::shared_ptr<const Segmenter> inner_;
    mutable std::mutex mutex_;
};

class SerializedRefiner final : public Refiner {
public:
    explicit SerializedRefiner(std::shared_ptr<const Refiner> inner) : inner_(std::move(inner)) {}

    std::string name() const override { return inner_->name(); }
    Image refine(const Image& image, const std::string& prompt, double strength, std::uint64_t seed,
                 int steps) const override {
        std::lock_guard lock(mutex_);
        return inner_->refine(image, prompt, strength, seed, steps);
    }
    std::optional<std::pair<int, int>> resolution() const override { return inner_->resolution(); }
    bool exclusive() const override { return true; }

private:
    std::shared_ptr<const Refiner> inner_;
    mutable std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

using GeneratorFactory =
    std::function<std::shared_ptr<const Generator>(const nlohmann::json& params, const ClassVocabulary&)>;
using ScorerFactory =
    std::function<std::shared_ptr<const Scorer>(const nlohmann::json& params, const ClassVocabulary&)>;
using SegmenterFactory =
    std::function<std::shared_ptr<const Segmenter>(const nlohmann::json& params, const ClassVocabulary&)>;
using RefinerFactory =
    std::function<std::shared_ptr<const Refiner>(const nlohmann::json& params, const ClassVocabulary&)>;

/// Name -> factory tables. "toy" is always registered; adapters for real
/// models register under their own names.
class BackendRegistry {
public:
    static BackendRegistry& global();

    BackendRegistry();

    void add_generator(const std::string& name, GeneratorFactory f);
    void add_scorer(const std::string& name, ScorerFactory f);
    void add_segmenter(const std::string& name, SegmenterFactory f);
    void add_refiner(const std::string& name, RefinerFactory f);

    /// Builds a BackendSet from
    /// {generator, scorer, segmenters: [name | {name, params}], refiner,
    ///  params: {generator: {}, scorer: {}, refiner: {}, eval_segmenter: {}}}.
    /// Exclusive backends come back wrapped in Serialized* decorators.
    BackendSet build(const nlohmann::json& config, const ClassVocabulary& vocab) const;

private:
    mutable std::mutex mutex_;
    std::map<std::string, GeneratorFactory> generators_;
    std::map<std::string, ScorerFactory> scorers_;
    std::map<std::string, SegmenterFactory> segmenters_;
    std::map<std::string, RefinerFactory> refiners_;
};

/// The default toy configuration: one full-vocabulary guide, 16x16 images.
nlohmann::json toy_backend_config(int width = 16, int height = 16);

inline BackendSet make_backends(const nlohmann::json& config, const ClassVocabulary& vocab) {
    return BackendRegistry::global().build(config, vocab);
}

// ---------------------------------------------------------------------------
// Contract checks (shared by the toy backend and external adapters)
// ---------------------------------------------------------------------------

struct ContractOptions {
    /// Compare gradients against central finite differences. External
    /// adapters replace this with a shape-only check.
    bool finite_differences = true;
    int probes = 10;
    double fd_step = 1e-6;
    double rel_tolerance = 1e-4;
    std::uint64_t seed = 7;
    std::string prompt;
};

struct ContractReport {
    std::vector<std::string> failures;
    bool ok() const { return failures.empty(); }
};

/// Relative error used by every gradient check:
/// |a - b| / max(|a|, |b|, floor).
double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric, double floor = 1e-8);

ContractReport check_generator(const Generator& gen, const ContractOptions& options = {});
ContractReport check_scorer(const Scorer& scorer, int width, int height, const ContractOptions& options = {});
ContractReport check_segmenter(const Segmenter& seg, int width, int height, const ContractOptions& options = {});
ContractReport check_refiner(const Refiner& refiner, int width, int height, const ContractOptions& options = {});

}  // namespace segguide
