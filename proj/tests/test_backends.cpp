// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"

using namespace segguide;
using namespace fixture;

namespace {

std::string joined(const ContractReport& r) {
    std::string out;
    for (const auto& f : r.failures) out += f + "; ";
    return out;
}

}  // namespace

TEST_CASE("toy backends pass their contract checks with finite differences") {
    const auto b = toy_backends();
    ContractOptions opts;
    opts.prompt = "a dog and a car";
    const auto g = check_generator(*b.generator, opts);
    CHECK_MESSAGE(g.ok(), joined(g));
    const auto s = check_scorer(*b.scorer, kSize, kSize, opts);
    CHECK_MESSAGE(s.ok(), joined(s));
    for (const auto& seg : b.segmenters) {
        const auto r = check_segmenter(*seg, kSize, kSize, opts);
        CHECK_MESSAGE(r.ok(), joined(r));
    }
    const auto rr = check_refiner(*b.refiner, kSize, kSize, opts);
    CHECK_MESSAGE(rr.ok(), joined(rr));
}

TEST_CASE("generator latent dimension stays small and sizes match") {
    const auto b = toy_backends();
    CHECK(b.generator->latent_dim() <= 20);
    CHECK(b.generator->width() == kSize);
    CHECK(b.generator->height() == kSize);
    LatentState bad{Eigen::VectorXd::Zero(7), 0, 0};
    CHECK_THROWS_AS(b.generator->decode(bad), ConfigError);
}

TEST_CASE("collapsed blobs decode to the background colour") {
    const auto vocab = ClassVocabulary::toy_default();
    const auto b = toy_backends();
    LatentState z{Eigen::VectorXd::Constant(b.generator->latent_dim(), -20.0), 0, 0};
    const Image img = b.generator->decode(z);
    for (int p = 0; p < img.pixel_count(); ++p) {
        CHECK((img.pixels().col(p) - vocab[0].color).abs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("segmenter planes form a simplex and sharpen at low temperature") {
    const auto vocab = ClassVocabulary::toy_default();
    Image::Pixels px(3, 4);
    for (int p = 0; p < 4; ++p) px.col(p) = vocab[2].color;
    const Image dog(2, 2, px);

    const toy::ColorSegmenter sharp(vocab, {}, 0.01);
    const auto m = sharp.predict(dog);
    for (int p = 0; p < 4; ++p) CHECK(m.planes()(kDog, p) > 0.95);

    SeededRng rng(4);
    const toy::ColorSegmenter soft(vocab, {2, 3});
    for (int i = 0; i < 20; ++i) {
        Image::Pixels q(3, 9);
        for (Eigen::Index k = 0; k < q.size(); ++k) q.data()[k] = rng.uniform();
        const auto pred = soft.predict(Image(3, 3, q));
        CHECK(pred.num_classes() == vocab.size());
        for (int p = 0; p < 9; ++p) {
            CHECK(pred.planes().col(p).sum() == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(pred.planes()(1, p) == 0.0);  // unsupported class
            CHECK(pred.planes()(4, p) == 0.0);
        }
    }
}

TEST_CASE("a colour equidistant to two prototypes splits evenly") {
    ClassVocabulary v({{0, "background", Color(0, 0, 0)}, {1, "x", Color(1, 0, 0)}, {2, "y", Color(0, 1, 0)}});
    const toy::ColorSegmenter seg(v, {1, 2});
    Image::Pixels px(3, 1);
    px.col(0) = Color(0.5, 0.5, 0.0);
    const auto m = seg.predict(Image(1, 1, px));
    CHECK(m.planes()(1, 0) == doctest::Approx(m.planes()(2, 0)).epsilon(1e-12));
}

TEST_CASE("distinct seeds give distinct initial images") {
    const auto b = toy_backends();
    for (std::uint64_t s = 0; s < 20; ++s) {
        const Image a = b.generator->decode({b.generator->initial_latent(s), s, 0});
        const Image c = b.generator->decode({b.generator->initial_latent(s + 1), s + 1, 0});
        CHECK(image_distance(a, c) > 1e-3);
    }
}

TEST_CASE("prompt histograms") {
    const auto vocab = ClassVocabulary::toy_default();
    const auto empty = toy::prompt_histogram("", vocab);
    CHECK(empty[0] == 1.0);
    CHECK(empty.tail(vocab.size() - 1).abs().maxCoeff() == 0.0);
    const auto two = toy::prompt_histogram("a dog and a car", vocab);
    CHECK(two[2] == doctest::Approx(toy::kObjectFraction));
    CHECK(two[3] == doctest::Approx(toy::kObjectFraction));
    CHECK(two.sum() == doctest::Approx(1.0));
    CHECK_THROWS_AS(toy::prompt_histogram("a unicorn", vocab), ConfigError);
    CHECK_THROWS_AS(toy_backends().scorer->validate_prompt("a unicorn"), ConfigError);
}

TEST_CASE("blend refiner interpolates linearly toward its procedural endpoint") {
    const auto vocab = ClassVocabulary::toy_default();
    const toy::BlendRefiner r(vocab);
    SeededRng rng(8);
    Image::Pixels px(3, 16);
    for (Eigen::Index k = 0; k < px.size(); ++k) px.data()[k] = rng.uniform();
    const Image in(4, 4, px);
    const Image end = r.procedural(4, 4, "a dog", 5);
    for (double s : {0.5, 0.3}) {
        const Image out = r.refine(in, "a dog", s, 5, 25);
        const Image::Pixels want = (1 - s) * in.pixels() + s * end.pixels();
        CHECK((out.pixels() - want).abs().maxCoeff() < 1e-12);
    }
    CHECK_THROWS_AS(r.refine(in, "a dog", 1.5, 5, 25), RangeError);
}

TEST_CASE("backend config errors") {
    auto cfg = toy_backend_config();
    cfg["generator"] = "nope";
    CHECK_THROWS_AS(make_backends(cfg, ClassVocabulary::toy_default()), ConfigError);
}
