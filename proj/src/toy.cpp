// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

#include "segguide/backends.hpp"
#include "segguide/hash.hpp"

namespace segguide {

Eigen::VectorXd Generator::initial_latent(std::uint64_t seed) const {
    SeededRng rng(seed);
    Eigen::VectorXd z(latent_dim());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        z[i] = rng.normal();
    }
    return z;
}

namespace toy {

namespace {

// Guards F / (S + eps) where every blob intensity has underflowed.
constexpr double kBlendEps = 1e-12;

const std::set<std::string>& filler_words() {
    static const std::set<std::string> words{"a", "an", "and", "the", "with"};
    return words;
}

std::string foreground_names(const ClassVocabulary& vocab) {
    std::string out;
    for (const auto& e : vocab.entries()) {
        if (e.id == 0) {
            continue;
        }
        out += (out.empty() ? "" : ", ") + e.name;
    }
    return out;
}

}  // namespace

std::vector<int> prompt_classes(const std::string& prompt, const ClassVocabulary& vocab) {
    std::string cleaned;
    cleaned.reserve(prompt.size());
    for (char ch : prompt) {
        const auto c = static_cast<unsigned char>(ch);
        cleaned.push_back(std::isalnum(c) || ch == '-' || ch == '_' ? static_cast<char>(std::tolower(c)) : ' ');
    }
    std::istringstream tokens(cleaned);
    std::vector<int> out;
    for (std::string token; tokens >> token;) {
        if (filler_words().count(token) != 0) {
            continue;
        }
        const auto id = vocab.find(token);
        if (!id || *id == 0) {
            throw ConfigError("prompt token '" + token + "' is not a class name; valid class names: " +
                              foreground_names(vocab));
        }
        out.push_back(*id);
    }
    return out;
}

Eigen::ArrayXd prompt_histogram(const std::string& prompt, const ClassVocabulary& vocab, double object_fraction) {
    Eigen::ArrayXd hist = Eigen::ArrayXd::Zero(vocab.size());
    for (int c : prompt_classes(prompt, vocab)) {
        hist[c] += object_fraction;
    }
    const double fg = hist.sum();
    if (fg > 1.0) {
        hist /= fg;
    } else {
        hist[0] = 1.0 - fg;
    }
    return hist;
}

// ---------------------------------------------------------------------------

BlobGenerator::BlobGenerator(ClassVocabulary vocab, int width, int height, int blobs, double selector_sigma,
                             double max_radius)
    : vocab_(std::move(vocab)),
      width_(width),
      height_(height),
      blobs_(blobs),
      selector_sigma_(selector_sigma),
      max_radius_(max_radius) {
    if (!(max_radius > 0.0)) {
        throw ConfigError("max_radius must be positive");
    }
    if (width <= 0 || height <= 0) {
        throw ConfigError("toy generator resolution must be positive");
    }
    if (blobs <= 0) {
        throw ConfigError("toy generator needs at least one blob");
    }
    if (vocab_.size() < 2) {
        throw ConfigError("toy generator needs at least one foreground class");
    }
    if (!(selector_sigma > 0.0)) {
        throw ConfigError("selector_sigma must be positive");
    }
}

void BlobGenerator::check_latent(const Eigen::VectorXd& z) const {
    if (z.size() % 5 != 0) {
        throw ConfigError("latent_dim " + std::to_string(z.size()) + " is not divisible by 5");
    }
    if (z.size() != latent_dim()) {
        throw ConfigError("latent_dim " + std::to_string(z.size()) + " does not match " +
                          std::to_string(latent_dim()) + " (= 5 x " + std::to_string(blobs_) + " blobs)");
    }
}

std::pair<Color, Color> BlobGenerator::selector_color(double selector) const {
    const int k = vocab_.size() - 1;
    const double t = selector * k - 0.5;
    const double inv_var = 1.0 / (selector_sigma_ * selector_sigma_);

    Eigen::ArrayXd logits(k);
    for (int c = 0; c < k; ++c) {
        logits[c] = -0.5 * (t - c) * (t - c) * inv_var;
    }
    Eigen::ArrayXd w = (logits - logits.maxCoeff()).exp();
    w /= w.sum();
    // d logit_c / dt
    Eigen::ArrayXd d(k);
    for (int c = 0; c < k; ++c) {
        d[c] = -(t - c) * inv_var;
    }
    const double d_mean = (w * d).sum();

    Color color = Color::Zero();
    Color dcolor = Color::Zero();
    for (int c = 0; c < k; ++c) {
        const Color& proto = vocab_[c + 1].color;
        color += w[c] * proto;
        dcolor += w[c] * (d[c] - d_mean) * proto;
    }
    return {color, dcolor * static_cast<double>(k)};
}

Image BlobGenerator::decode(const LatentState& latent) const {
    const auto& z = latent.z;
    check_latent(z);
    const Color bg = vocab_[0].color;

    std::vector<std::array<double, 4>> geom(static_cast<std::size_t>(blobs_));
    std::vector<Color> colors(static_cast<std::size_t>(blobs_));
    for (int b = 0; b < blobs_; ++b) {
        const auto o = static_cast<Eigen::Index>(5 * b);
        geom[static_cast<std::size_t>(b)] = {sigmoid(z[o]), sigmoid(z[o + 1]), max_radius_ * sigmoid(z[o + 2]),
                                             max_radius_ * sigmoid(z[o + 3])};
        colors[static_cast<std::size_t>(b)] = selector_color(sigmoid(z[o + 4])).first;
    }

    Image::Pixels px(3, static_cast<Eigen::Index>(width_) * height_);
    for (int y = 0; y < height_; ++y) {
        const double py = pixel_center(y, height_);
        for (int x = 0; x < width_; ++x) {
            const double pxc = pixel_center(x, width_);
            double transmit = 1.0;
            double sum = 0.0;
            Color fg = Color::Zero();
            for (int b = 0; b < blobs_; ++b) {
                const auto& [cx, cy, rx, ry] = geom[static_cast<std::size_t>(b)];
                const double dx = (pxc - cx) / rx;
                const double dy = (py - cy) / ry;
                const double a = std::exp(-(dx * dx + dy * dy));
                transmit *= 1.0 - a;
                sum += a;
                fg += a * colors[static_cast<std::size_t>(b)];
            }
            px.col(static_cast<Eigen::Index>(y) * width_ + x) = transmit * bg + (1.0 - transmit) * fg / (sum + kBlendEps);
        }
    }
    return Image(width_, height_, std::move(px));
}

Eigen::VectorXd BlobGenerator::decode_vjp(const LatentState& latent, const ImageGradient& upstream) const {
    const auto& z = latent.z;
    check_latent(z);
    if (upstream.cols() != static_cast<Eigen::Index>(width_) * height_) {
        throw ShapeError("decode_vjp upstream has " + std::to_string(upstream.cols()) + " pixels, expected " +
                         std::to_string(width_ * height_));
    }
    const Color bg = vocab_[0].color;
    const auto nb = static_cast<std::size_t>(blobs_);

    std::vector<std::array<double, 5>> u(nb);
    std::vector<Color> colors(nb);
    std::vector<Color> dcolors(nb);
    std::vector<std::array<double, 2>> radius(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        const auto o = static_cast<Eigen::Index>(5 * b);
        for (int j = 0; j < 5; ++j) {
            u[b][static_cast<std::size_t>(j)] = sigmoid(z[o + j]);
        }
        radius[b] = {max_radius_ * u[b][2], max_radius_ * u[b][3]};
        std::tie(colors[b], dcolors[b]) = selector_color(u[b][4]);
    }

    // Gradients w.r.t. the squashed parameters (cx, cy, rx, ry, selector).
    std::vector<std::array<double, 5>> gu(nb, {0, 0, 0, 0, 0});
    std::vector<double> a(nb);
    std::vector<double> qx(nb);
    std::vector<double> qy(nb);

    for (int y = 0; y < height_; ++y) {
        const double py = pixel_center(y, height_);
        for (int x = 0; x < width_; ++x) {
            const double pxc = pixel_center(x, width_);
            double transmit = 1.0;
            double sum = 0.0;
            Color fg = Color::Zero();
            for (std::size_t b = 0; b < nb; ++b) {
                qx[b] = (pxc - u[b][0]) / radius[b][0];
                qy[b] = (py - u[b][1]) / radius[b][1];
                a[b] = std::exp(-(qx[b] * qx[b] + qy[b] * qy[b]));
                transmit *= 1.0 - a[b];
                sum += a[b];
                fg += a[b] * colors[b];
            }
            const Color g = upstream.col(static_cast<Eigen::Index>(y) * width_ + x);
            const double denom = sum + kBlendEps;
            const Color mix = fg / denom;
            const double g_transmit = (g * (bg - mix)).sum();
            const Color g_fg = g * ((1.0 - transmit) / denom);
            const double g_sum = -(1.0 - transmit) * (g * fg).sum() / (denom * denom);

            for (std::size_t b = 0; b < nb; ++b) {
                double others = 1.0;
                for (std::size_t k = 0; k < nb; ++k) {
                    if (k != b) {
                        others *= 1.0 - a[k];
                    }
                }
                const double g_a = -g_transmit * others + (g_fg * colors[b]).sum() + g_sum;
                // a = exp(-(qx^2 + qy^2)), qx = (px - cx) / rx, qy = (py - cy) / ry
                const double g_q = -a[b] * g_a;
                gu[b][0] += g_q * (-2.0 * qx[b] / radius[b][0]);
                gu[b][1] += g_q * (-2.0 * qy[b] / radius[b][1]);
                gu[b][2] += g_q * (-2.0 * qx[b] * qx[b] / radius[b][0]) * max_radius_;
                gu[b][3] += g_q * (-2.0 * qy[b] * qy[b] / radius[b][1]) * max_radius_;
                gu[b][4] += a[b] * (g_fg * dcolors[b]).sum();
            }
        }
    }

    Eigen::VectorXd grad(z.size());
    for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t j = 0; j < 5; ++j) {
            const double s = u[b][j];
            grad[static_cast<Eigen::Index>(5 * b + j)] = gu[b][j] * s * (1.0 - s);
        }
    }
    return grad;
}

// ---------------------------------------------------------------------------

ColorSegmenter::ColorSegmenter(ClassVocabulary vocab, std::vector<int> classes, double tau)
    : vocab_(std::move(vocab)), classes_(std::move(classes)), tau_(tau) {
    if (!(tau > 0.0)) {
        throw ConfigError("segmenter temperature must be positive");
    }
    if (classes_.empty()) {
        for (int c = 1; c < vocab_.size(); ++c) {
            classes_.push_back(c);
        }
    }
    std::sort(classes_.begin(), classes_.end());
    classes_.erase(std::unique(classes_.begin(), classes_.end()), classes_.end());
    for (int c : classes_) {
        if (c <= 0 || c >= vocab_.size()) {
            throw ConfigError("segmenter class " + std::to_string(c) + " is not a foreground class of the vocabulary");
        }
    }
    if (classes_.empty()) {
        throw ConfigError("segmenter supports no classes");
    }
    active_.push_back(0);
    active_.insert(active_.end(), classes_.begin(), classes_.end());
}

SegMask ColorSegmenter::predict(const Image& image) const {
    const auto n = image.pixel_count();
    const auto k = static_cast<Eigen::Index>(active_.size());
    SegMask::Planes planes = SegMask::Planes::Zero(vocab_.size(), n);
    Eigen::ArrayXd logits(k);
    for (Eigen::Index p = 0; p < n; ++p) {
        const Color x = image.pixels().col(p);
        for (Eigen::Index i = 0; i < k; ++i) {
            logits[i] = -(x - vocab_[active_[static_cast<std::size_t>(i)]].color).square().sum() / tau_;
        }
        Eigen::ArrayXd e = (logits - logits.maxCoeff()).exp();
        e /= e.sum();
        for (Eigen::Index i = 0; i < k; ++i) {
            planes(active_[static_cast<std::size_t>(i)], p) = e[i];
        }
    }
    return SegMask(image.width(), image.height(), std::move(planes));
}

ImageGradient ColorSegmenter::predict_vjp(const Image& image, const SegMask::Planes& upstream) const {
    const auto n = image.pixel_count();
    if (upstream.rows() != vocab_.size() || upstream.cols() != n) {
        throw ShapeError("predict_vjp upstream shape does not match " + std::to_string(vocab_.size()) + " planes x " +
                         std::to_string(n) + " pixels");
    }
    const auto k = static_cast<Eigen::Index>(active_.size());
    ImageGradient grad(3, n);
    Eigen::ArrayXd logits(k);
    for (Eigen::Index p = 0; p < n; ++p) {
        const Color x = image.pixels().col(p);
        for (Eigen::Index i = 0; i < k; ++i) {
            logits[i] = -(x - vocab_[active_[static_cast<std::size_t>(i)]].color).square().sum() / tau_;
        }
        Eigen::ArrayXd prob = (logits - logits.maxCoeff()).exp();
        prob /= prob.sum();
        double weighted = 0.0;
        for (Eigen::Index i = 0; i < k; ++i) {
            weighted += prob[i] * upstream(active_[static_cast<std::size_t>(i)], p);
        }
        Color g = Color::Zero();
        for (Eigen::Index i = 0; i < k; ++i) {
            const int c = active_[static_cast<std::size_t>(i)];
            const double g_logit = prob[i] * (upstream(c, p) - weighted);
            g += g_logit * (-2.0 / tau_) * (x - vocab_[c].color);
        }
        grad.col(p) = g;
    }
    return grad;
}

// ---------------------------------------------------------------------------

HistogramScorer::HistogramScorer(ClassVocabulary vocab, double tau, double object_fraction)
    : vocab_(vocab), segmenter_(std::move(vocab), {}, tau), object_fraction_(object_fraction) {
    if (!(object_fraction > 0.0 && object_fraction <= 1.0)) {
        throw ConfigError("object_fraction must lie in (0,1]");
    }
}

void HistogramScorer::validate_prompt(const std::string& prompt) const { (void)prompt_classes(prompt, vocab_); }

double HistogramScorer::score(const Image& image, const std::string& prompt) const {
    const Eigen::ArrayXd target = prompt_histogram(prompt, vocab_, object_fraction_);
    const Eigen::ArrayXd hist = segmenter_.predict(image).planes().rowwise().mean();
    return (hist - target).square().sum();
}

ImageGradient HistogramScorer::score_gradient(const Image& image, const std::string& prompt) const {
    const Eigen::ArrayXd target = prompt_histogram(prompt, vocab_, object_fraction_);
    const Eigen::ArrayXd hist = segmenter_.predict(image).planes().rowwise().mean();
    const auto n = static_cast<double>(image.pixel_count());
    SegMask::Planes upstream(vocab_.size(), image.pixel_count());
    upstream.colwise() = 2.0 * (hist - target) / n;
    return segmenter_.predict_vjp(image, upstream);
}

// ---------------------------------------------------------------------------

BlendRefiner::BlendRefiner(ClassVocabulary vocab, std::optional<std::pair<int, int>> resolution)
    : vocab_(std::move(vocab)), resolution_(resolution) {
    if (resolution_ && (resolution_->first <= 0 || resolution_->second <= 0)) {
        throw ConfigError("refiner resolution must be positive");
    }
}

Image BlendRefiner::procedural(int width, int height, const std::string& prompt, std::uint64_t seed) const {
    SeededRng rng(hash64(seed, hash64(prompt)));
    const Color bg = vocab_[0].color;
    std::vector<int> classes;
    try {
        classes = prompt_classes(prompt, vocab_);
    } catch (const ConfigError&) {
        // Free-form prompts fall back to a background-only texture.
    }

    Image::Pixels px(3, static_cast<Eigen::Index>(width) * height);
    for (Eigen::Index p = 0; p < px.cols(); ++p) {
        for (int c = 0; c < 3; ++c) {
            px(c, p) = bg[c] + 0.05 * (rng.uniform() - 0.5);
        }
    }
    for (int cls : classes) {
        const double cx = rng.uniform(0.15, 0.85);
        const double cy = rng.uniform(0.15, 0.85);
        const double r = rng.uniform(0.1, 0.3);
        const Color& color = vocab_[cls].color;
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                const double dx = (pixel_center(x, width) - cx) / r;
                const double dy = (pixel_center(y, height) - cy) / r;
                const double a = std::exp(-(dx * dx + dy * dy));
                auto col = px.col(static_cast<Eigen::Index>(y) * width + x);
                col = (1.0 - a) * col + a * color;
            }
        }
    }
    return Image(width, height, std::move(px));
}

Image BlendRefiner::refine(const Image& image, const std::string& prompt, double strength, std::uint64_t seed,
                           int steps) const {
    (void)steps;
    if (!(strength >= 0.0 && strength <= 1.0)) {
        throw RangeError("strength " + std::to_string(strength) + " outside [0,1]");
    }
    const Image noise = procedural(image.width(), image.height(), prompt, seed);
    Image::Pixels px = (1.0 - strength) * image.pixels() + strength * noise.pixels();
    return Image(image.width(), image.height(), std::move(px));
}

}  // namespace toy

}  // namespace segguide
