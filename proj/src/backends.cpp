// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "segguide/backends.hpp"
#include "segguide/hash.hpp"

namespace segguide {

namespace {

std::optional<std::pair<int, int>> optional_resolution(const nlohmann::json& params) {
    if (params.contains("width") || params.contains("height")) {
        return std::pair{params.value("width", 0), params.value("height", 0)};
    }
    return std::nullopt;
}

template <typename Wrapped, typename Base>
std::shared_ptr<const Base> maybe_serialize(std::shared_ptr<const Base> backend, const nlohmann::json& params) {
    if (backend->exclusive() || params.value("exclusive", false)) {
        return std::make_shared<Wrapped>(std::move(backend));
    }
    return backend;
}

std::pair<std::string, nlohmann::json> name_and_params(const nlohmann::json& entry, const nlohmann::json& fallback) {
    if (entry.is_string()) {
        return {entry.get<std::string>(), fallback};
    }
    if (entry.is_object() && entry.contains("name")) {
        return {entry.at("name").get<std::string>(), entry.value("params", nlohmann::json::object())};
    }
    throw ConfigError("backend entry must be a name or {name, params}: " + entry.dump());
}

template <typename Map>
const typename Map::mapped_type& lookup(const Map& map, const std::string& kind, const std::string& name) {
    const auto it = map.find(name);
    if (it == map.end()) {
        std::string known;
        for (const auto& [k, v] : map) {
            known += (known.empty() ? "" : ", ") + k;
        }
        throw ConfigError("unknown " + kind + " backend '" + name + "' (registered: " + known + ")");
    }
    return it->second;
}

}  // namespace

BackendRegistry& BackendRegistry::global() {
    static BackendRegistry registry;
    return registry;
}

BackendRegistry::BackendRegistry() {
    add_generator("toy", [](const nlohmann::json& p, const ClassVocabulary& v) -> std::shared_ptr<const Generator> {
        return std::make_shared<toy::BlobGenerator>(v, p.value("width", 16), p.value("height", 16),
                                                    p.value("blobs", toy::kDefaultBlobs),
                                                    p.value("selector_sigma", toy::kSelectorSigma),
                                                    p.value("max_radius", toy::kMaxRadius));
    });
    add_scorer("toy", [](const nlohmann::json& p, const ClassVocabulary& v) -> std::shared_ptr<const Scorer> {
        return std::make_shared<toy::HistogramScorer>(v, p.value("tau", toy::kDefaultTau),
                                                      p.value("object_fraction", toy::kObjectFraction));
    });
    add_segmenter("toy", [](const nlohmann::json& p, const ClassVocabulary& v) -> std::shared_ptr<const Segmenter> {
        return std::make_shared<toy::ColorSegmenter>(v, p.value("classes", std::vector<int>{}),
                                                     p.value("tau", toy::kDefaultTau));
    });
    add_refiner("toy", [](const nlohmann::json& p, const ClassVocabulary& v) -> std::shared_ptr<const Refiner> {
        return std::make_shared<toy::BlendRefiner>(v, optional_resolution(p));
    });
}

void BackendRegistry::add_generator(const std::string& name, GeneratorFactory f) {
    std::lock_guard lock(mutex_);
    generators_[name] = std::move(f);
}

void BackendRegistry::add_scorer(const std::string& name, ScorerFactory f) {
    std::lock_guard lock(mutex_);
    scorers_[name] = std::move(f);
}

void BackendRegistry::add_segmenter(const std::string& name, SegmenterFactory f) {
    std::lock_guard lock(mutex_);
    segmenters_[name] = std::move(f);
}

void BackendRegistry::add_refiner(const std::string& name, RefinerFactory f) {
    std::lock_guard lock(mutex_);
    refiners_[name] = std::move(f);
}

BackendSet BackendRegistry::build(const nlohmann::json& config, const ClassVocabulary& vocab) const {
    std::lock_guard lock(mutex_);
    if (!config.is_object()) {
        throw ConfigError("backend config must be a JSON object");
    }
    const nlohmann::json params = config.value("params", nlohmann::json::object());
    auto block = [&](const char* key) { return params.value(key, nlohmann::json::object()); };

    BackendSet set;
    set.vocab = vocab;
    try {
        const auto gen_params = block("generator");
        set.generator = maybe_serialize<SerializedGenerator>(
            lookup(generators_, "generator", config.value("generator", "toy"))(gen_params, vocab), gen_params);

        const auto scorer_params = block("scorer");
        set.scorer = maybe_serialize<SerializedScorer>(
            lookup(scorers_, "scorer", config.value("scorer", "toy"))(scorer_params, vocab), scorer_params);

        const auto seg_list = config.value("segmenters", nlohmann::json::array({"toy"}));
        if (!seg_list.is_array() || seg_list.empty()) {
            throw ConfigError("segmenters must be a non-empty list");
        }
        const auto seg_params = params.value("segmenters", nlohmann::json::array());
        for (std::size_t i = 0; i < seg_list.size(); ++i) {
            const auto fallback = i < seg_params.size() ? seg_params[i] : nlohmann::json::object();
            auto [name, p] = name_and_params(seg_list[i], fallback);
            set.segmenters.push_back(
                maybe_serialize<SerializedSegmenter>(lookup(segmenters_, "segmenter", name)(p, vocab), p));
        }

        const auto refiner_params = block("refiner");
        set.refiner = maybe_serialize<SerializedRefiner>(
            lookup(refiners_, "refiner", config.value("refiner", "toy"))(refiner_params, vocab), refiner_params);

        auto eval_params = block("eval_segmenter");
        eval_params.erase("classes");  // always full vocabulary
        set.eval_segmenter = maybe_serialize<SerializedSegmenter>(
            lookup(segmenters_, "segmenter", config.value("eval_segmenter", "toy"))(eval_params, vocab), eval_params);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad backend parameter: ") + e.what());
    }
    return set;
}

nlohmann::json toy_backend_config(int width, int height) {
    return {
        {"generator", "toy"},
        {"scorer", "toy"},
        {"segmenters", {"toy"}},
        {"refiner", "toy"},
        {"params", {{"generator", {{"width", width}, {"height", height}, {"blobs", toy::kDefaultBlobs}}}}},
    };
}

// ---------------------------------------------------------------------------
// Contract checks
// ---------------------------------------------------------------------------

double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric, double floor) {
    const double scale = std::max({analytic.norm(), numeric.norm(), floor});
    return (analytic - numeric).norm() / scale;
}

namespace {

Image random_image(int width, int height, SeededRng& rng) {
    Image::Pixels px(3, static_cast<Eigen::Index>(width) * height);
    for (Eigen::Index i = 0; i < px.size(); ++i) {
        px.data()[i] = rng.uniform(0.05, 0.95);
    }
    return Image(width, height, std::move(px));
}

ImageGradient random_image_gradient(Eigen::Index pixels, SeededRng& rng) {
    ImageGradient g(3, pixels);
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        g.data()[i] = rng.uniform(-1.0, 1.0);
    }
    return g;
}

std::string fmt_err(const char* what, int probe, double err) {
    return std::string(what) + " probe " + std::to_string(probe) + ": relative error " + std::to_string(err);
}

/// Central differences of f over every pixel channel.
template <typename F>
Eigen::VectorXd image_fd(const Image& image, double h, F&& f) {
    Eigen::VectorXd out(image.pixels().size());
    for (Eigen::Index i = 0; i < image.pixels().size(); ++i) {
        Image::Pixels plus = image.pixels();
        Image::Pixels minus = image.pixels();
        plus.data()[i] += h;
        minus.data()[i] -= h;
        out[i] = (f(Image(image.width(), image.height(), std::move(plus))) -
                  f(Image(image.width(), image.height(), std::move(minus)))) /
                 (2.0 * h);
    }
    return out;
}

Eigen::VectorXd flat(const ImageGradient& g) { return Eigen::Map<const Eigen::VectorXd>(g.data(), g.size()); }

}  // namespace

ContractReport check_generator(const Generator& gen, const ContractOptions& options) {
    ContractReport report;
    SeededRng rng(options.seed);
    for (int probe = 0; probe < options.probes; ++probe) {
        LatentState latent{gen.initial_latent(rng.next_u64()), 0, 0};
        const Image a = gen.decode(latent);
        const Image b = gen.decode(latent);
        if (!(a == b)) {
            report.failures.push_back("decode is not deterministic");
        }
        if (a.width() != gen.width() || a.height() != gen.height()) {
            report.failures.push_back("decode output size differs from declared resolution");
        }
        const ImageGradient upstream = random_image_gradient(a.pixel_count(), rng);
        const Eigen::VectorXd grad = gen.decode_vjp(latent, upstream);
        if (grad.size() != gen.latent_dim()) {
            report.failures.push_back("decode_vjp returns " + std::to_string(grad.size()) + " entries, expected " +
                                      std::to_string(gen.latent_dim()));
            continue;
        }
        if (!grad.allFinite()) {
            report.failures.push_back("decode_vjp returned non-finite values");
        }
        if (!options.finite_differences) {
            continue;
        }
        Eigen::VectorXd numeric(grad.size());
        for (Eigen::Index i = 0; i < grad.size(); ++i) {
            LatentState plus = latent;
            LatentState minus = latent;
            plus.z[i] += options.fd_step;
            minus.z[i] -= options.fd_step;
            numeric[i] = ((upstream * gen.decode(plus).pixels()).sum() - (upstream * gen.decode(minus).pixels()).sum()) /
                         (2.0 * options.fd_step);
        }
        const double err = relative_error(grad, numeric);
        if (!(err < options.rel_tolerance)) {
            report.failures.push_back(fmt_err("decode_vjp vs finite differences", probe, err));
        }
    }
    return report;
}

ContractReport check_scorer(const Scorer& scorer, int width, int height, const ContractOptions& options) {
    ContractReport report;
    SeededRng rng(options.seed);
    for (int probe = 0; probe < options.probes; ++probe) {
        const Image img = random_image(width, height, rng);
        const double s = scorer.score(img, options.prompt);
        if (!(s >= 0.0) || !std::isfinite(s)) {
            report.failures.push_back("score must be a finite nonnegative loss");
        }
        const ImageGradient g = scorer.score_gradient(img, options.prompt);
        if (g.rows() != 3 || g.cols() != img.pixel_count()) {
            report.failures.push_back("score_gradient has the wrong shape");
            continue;
        }
        if (!options.finite_differences) {
            continue;
        }
        const Eigen::VectorXd numeric =
            image_fd(img, options.fd_step, [&](const Image& x) { return scorer.score(x, options.prompt); });
        const double err = relative_error(flat(g), numeric);
        if (!(err < options.rel_tolerance)) {
            report.failures.push_back(fmt_err("score_gradient vs finite differences", probe, err));
        }
    }
    return report;
}

ContractReport check_segmenter(const Segmenter& seg, int width, int height, const ContractOptions& options) {
    ContractReport report;
    SeededRng rng(options.seed);
    const auto supported = seg.supported_classes();
    if (supported.empty()) {
        report.failures.push_back("segmenter supports no classes");
        return report;
    }
    std::vector<bool> active(static_cast<std::size_t>(seg.num_classes()), false);
    active[0] = true;
    for (int c : supported) {
        if (c <= 0 || c >= seg.num_classes()) {
            report.failures.push_back("supported class " + std::to_string(c) + " is not a foreground class");
            return report;
        }
        active[static_cast<std::size_t>(c)] = true;
    }
    for (int probe = 0; probe < options.probes; ++probe) {
        const Image img = random_image(width, height, rng);
        const SegMask m = seg.predict(img);
        if (m.num_classes() != seg.num_classes() || m.width() != width || m.height() != height) {
            report.failures.push_back("predict output has the wrong shape");
            continue;
        }
        if (((m.planes().colwise().sum() - 1.0).abs() > 1e-9).any()) {
            report.failures.push_back("predicted planes are not on the per-pixel simplex");
        }
        for (int c = 0; c < m.num_classes(); ++c) {
            if (!active[static_cast<std::size_t>(c)] && (m.planes().row(c) != 0.0).any()) {
                report.failures.push_back("plane " + std::to_string(c) + " is outside supported classes but nonzero");
            }
        }
        SegMask::Planes upstream(m.num_classes(), m.pixel_count());
        for (Eigen::Index i = 0; i < upstream.size(); ++i) {
            upstream.data()[i] = rng.uniform(-1.0, 1.0);
        }
        const ImageGradient g = seg.predict_vjp(img, upstream);
        if (g.rows() != 3 || g.cols() != img.pixel_count()) {
            report.failures.push_back("predict_vjp has the wrong shape");
            continue;
        }
        if (!options.finite_differences) {
            continue;
        }
        const Eigen::VectorXd numeric = image_fd(
            img, options.fd_step, [&](const Image& x) { return (upstream * seg.predict(x).planes()).sum(); });
        const double err = relative_error(flat(g), numeric);
        if (!(err < options.rel_tolerance)) {
            report.failures.push_back(fmt_err("predict_vjp vs finite differences", probe, err));
        }
    }
    return report;
}

ContractReport check_refiner(const Refiner& refiner, int width, int height, const ContractOptions& options) {
    ContractReport report;
    SeededRng rng(options.seed);
    for (int probe = 0; probe < options.probes; ++probe) {
        const Image a = random_image(width, height, rng);
        const Image b = random_image(width, height, rng);
        const std::uint64_t seed = rng.next_u64();
        if (!(refiner.refine(a, options.prompt, 0.0, seed, 25) == a)) {
            report.failures.push_back("strength 0 does not return the input exactly");
        }
        if (!(refiner.refine(a, options.prompt, 1.0, seed, 25) == refiner.refine(b, options.prompt, 1.0, seed, 25))) {
            report.failures.push_back("strength 1 output depends on the input");
        }
        if (!(refiner.refine(a, options.prompt, 0.4, seed, 25) == refiner.refine(a, options.prompt, 0.4, seed, 25))) {
            report.failures.push_back("refine is not deterministic");
        }
        for (double bad : {-0.1, 1.1}) {
            try {
                (void)refiner.refine(a, options.prompt, bad, seed, 25);
                report.failures.push_back("strength " + std::to_string(bad) + " was accepted");
            } catch (const RangeError&) {
            }
        }
    }
    return report;
}

}  // namespace segguide
