// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <chrono>

#include "support.hpp"

using namespace segguide;
using namespace fixture;

namespace {

/// Wraps a segmenter and counts predict calls.
class CountingSegmenter final : public Segmenter {
public:
    explicit CountingSegmenter(std::shared_ptr<const Segmenter> inner) : inner_(std::move(inner)) {}
    std::string name() const override { return "counting"; }
    int num_classes() const override { return inner_->num_classes(); }
    std::vector<int> supported_classes() const override { return inner_->supported_classes(); }
    SegMask predict(const Image& image) const override {
        ++calls;
        return inner_->predict(image);
    }
    ImageGradient predict_vjp(const Image& image, const SegMask::Planes& upstream) const override {
        return inner_->predict_vjp(image, upstream);
    }
    mutable std::atomic<int> calls{0};

private:
    std::shared_ptr<const Segmenter> inner_;
};

double reference_total(double l_clip, const std::vector<double>& segs, const LossWeights& w) {
    double t = w.alpha_clip * l_clip;
    for (std::size_t i = 0; i < segs.size(); ++i) t += w.alpha_seg[i] * segs[i];
    return t;
}

OptimizerConfig toy_config(double alpha_seg) {
    OptimizerConfig c;
    c.weights = LossWeights::uniform(1, 1.0, alpha_seg);
    return c;
}

double final_iou(const BackendSet& b, const StageOneResult& r) {
    return iou(b.eval_segmenter->predict(r.image).hardened(), toy_task_target());
}

}  // namespace

TEST_CASE("segmentation loss examples") {
    const auto a = SegMask::from_labels(2, 2, 2, std::vector<int>{0, 1, 1, 0});
    CHECK(segmentation_loss(a, a) == 0.0);
    const auto b = SegMask::from_labels(2, 2, 2, std::vector<int>{1, 0, 0, 1});
    CHECK(segmentation_loss(a, b) == 1.0);
    // one of four pixels flipped: 2 of 8 plane values differ by 1
    const auto c = SegMask::from_labels(2, 2, 2, std::vector<int>{0, 1, 1, 1});
    CHECK(segmentation_loss(a, c) == 0.25);
    // every plane value off by 0.5
    const SegMask::Planes half = SegMask::Planes::Constant(2, 4, 0.5);
    CHECK(segmentation_loss(SegMask(2, 2, half), a) == 0.25);
    SegMask::Planes q = a.planes();
    q(0, 0) = 0.0;
    q(1, 0) = 1.0;
    q(0, 1) = 0.5;
    q(1, 1) = 0.5;
    // diffs: 1, 1, 0.5, 0.5 -> (1 + 1 + 0.25 + 0.25) / 8
    CHECK(segmentation_loss(SegMask(2, 2, q), a) == 0.3125);
    CHECK_THROWS_AS(segmentation_loss(a, SegMask::from_labels(4, 1, 2, std::vector<int>{0, 0, 0, 0})), ShapeError);
}

TEST_CASE("total loss examples") {
    const double segs1[] = {0.2};
    CHECK(total_loss(1.0, std::span<const double>{}, LossWeights{1.0, {}}) == 1.0);
    CHECK(total_loss(0.7, std::span<const double>{}, LossWeights{3.0, {}}) == 3.0 * 0.7);
    CHECK(total_loss(0.0, segs1, LossWeights{1.0, {2.5}}) == 0.5);
    CHECK_THROWS_AS(total_loss(0.0, segs1, LossWeights{1.0, {1.0, 1.0}}), ShapeError);
}

TEST_CASE("losses equal independent recomputation on 100 random inputs") {
    SeededRng rng(77);
    for (int i = 0; i < 100; ++i) {
        const int w = rng.uniform_int(1, 9);
        const int h = rng.uniform_int(1, 9);
        const int k = rng.uniform_int(2, 6);
        const auto pred = random_soft_mask(rng, w, h, k);
        const auto tgt = random_hard_mask(rng, w, h, k);
        const double got = segmentation_loss(pred, tgt);
        CHECK(std::abs(got - reference_seg_loss(pred, tgt)) <= 1e-12);

        const int g = rng.uniform_int(0, 4);
        std::vector<double> segs;
        LossWeights wts{rng.uniform() * 3, {}};
        for (int j = 0; j < g; ++j) {
            segs.push_back(rng.uniform());
            wts.alpha_seg.push_back(i % 5 == 0 ? 0.0 : rng.uniform() * 10);
        }
        const double l_clip = rng.uniform();
        CHECK(std::abs(total_loss(l_clip, segs, wts) - reference_total(l_clip, segs, wts)) <= 1e-12);
        const LossWeights zero{wts.alpha_clip, std::vector<double>(segs.size(), 0.0)};
        CHECK(total_loss(l_clip, segs, zero) == wts.alpha_clip * l_clip);
    }
}

TEST_CASE("routing examples") {
    const auto b = toy_backends_with_guides({{1, 2}, {3}, {4}});
    const auto guides = StageOneBackends::from(b).guides;
    const auto t = SegMask::from_labels(4, 1, 5, std::vector<int>{0, 2, 3, 0});
    const auto routed = route_guides(t, guides);
    REQUIRE(routed.size() == 2);
    CHECK(routed[0].weight_index == 0);
    CHECK(routed[1].weight_index == 1);

    const auto bg = SegMask::from_labels(2, 1, 5, std::vector<int>{0, 0});
    CHECK(route_guides(bg, guides).empty());

    const auto only_dog = toy_backends_with_guides({{2}});
    const auto gd = StageOneBackends::from(only_dog).guides;
    const auto vocab = ClassVocabulary::toy_default();
    try {
        route_guides(SegMask::from_labels(2, 1, 5, std::vector<int>{2, 4}), gd, &vocab);
        FAIL("expected OrphanClassError");
    } catch (const OrphanClassError& e) {
        CHECK(e.class_id() == 4);
        CHECK(std::string(e.what()).find("boat") != std::string::npos);
    }
}

TEST_CASE("routing matches set intersection over every class-to-guide assignment") {
    // Each of classes 1..4 goes to guide A, guide B, both or neither (4^4
    // assignments); targets range over all 16 foreground subsets.
    int checked = 0;
    int orphans = 0;
    for (int assign = 0; assign < 256; ++assign) {
        std::vector<std::vector<int>> classes(2);
        for (int c = 1; c <= 4; ++c) {
            const int code = (assign >> (2 * (c - 1))) & 3;
            if (code & 1) classes[0].push_back(c);
            if (code & 2) classes[1].push_back(c);
        }
        std::vector<std::shared_ptr<const Segmenter>> segs;
        const auto vocab = ClassVocabulary::toy_default();
        for (const auto& cl : classes) segs.push_back(std::make_shared<toy::ColorSegmenter>(vocab, cl));
        // An empty class list means "all" for the toy segmenter; model it
        // as a guide covering no class by leaving it unregistered.
        std::vector<std::shared_ptr<const Segmenter>> registered;
        std::vector<std::vector<int>> registered_classes;
        for (std::size_t g = 0; g < 2; ++g) {
            if (!classes[g].empty()) {
                registered.push_back(segs[g]);
                registered_classes.push_back(classes[g]);
            }
        }
        const auto guides = register_guides(registered);

        for (int subset = 0; subset < 16; ++subset) {
            std::vector<int> labels{0};
            for (int c = 1; c <= 4; ++c) {
                if (subset & (1 << (c - 1))) labels.push_back(c);
            }
            const auto target = SegMask::from_labels(static_cast<int>(labels.size()), 1, 5, labels);
            bool orphan = false;
            for (int c : labels) {
                if (c == 0) continue;
                bool covered = false;
                for (const auto& cl : registered_classes) {
                    covered = covered || std::find(cl.begin(), cl.end(), c) != cl.end();
                }
                orphan = orphan || !covered;
            }
            if (orphan) {
                CHECK_THROWS_AS(route_guides(target, guides), OrphanClassError);
                ++orphans;
                continue;
            }
            std::set<std::size_t> got;
            for (const auto& g : route_guides(target, guides)) got.insert(g.weight_index);
            CHECK(got == brute_force_routing(labels, registered_classes));
            ++checked;
        }
    }
    CHECK(checked + orphans == 256 * 16);
    CHECK(orphans > 0);
}

TEST_CASE("unrouted guides are never invoked") {
    const auto vocab = ClassVocabulary::toy_default();
    auto dog = std::make_shared<CountingSegmenter>(std::make_shared<toy::ColorSegmenter>(vocab, std::vector<int>{2}));
    auto boat = std::make_shared<CountingSegmenter>(std::make_shared<toy::ColorSegmenter>(vocab, std::vector<int>{4}));
    const auto b = toy_backends();
    StageOneBackends s1{b.generator, b.scorer, register_guides({dog, boat}), vocab};
    OptimizerConfig cfg;
    cfg.max_steps = 5;
    cfg.weights = LossWeights::uniform(2);
    const auto r = optimize(toy_task_prompt(), toy_task_target(), s1, cfg, 0);
    CHECK(dog->calls.load() == static_cast<int>(r.trace.size()));
    CHECK(boat->calls.load() == 0);
    CHECK(r.routed_guides == std::vector<std::size_t>{0});
}

TEST_CASE("objective gradient matches central finite differences") {
    const auto b = toy_backends();
    const auto s1 = StageOneBackends::from(b);
    const auto target = toy_task_target();
    const Objective obj(b.generator, b.scorer, route_guides(target, s1.guides), toy_task_prompt(), target,
                        LossWeights::uniform(1, 1.0, 5.0));
    const auto start = std::chrono::steady_clock::now();
    SeededRng rng(99);
    const double h = 1e-6;
    for (int probe = 0; probe < 10; ++probe) {
        LatentState z{b.generator->initial_latent(rng.next_u64()), 0, 0};
        const Eigen::VectorXd g = obj(z, true).gradient;
        Eigen::VectorXd fd(g.size());
        for (Eigen::Index i = 0; i < g.size(); ++i) {
            LatentState p = z;
            LatentState m = z;
            p.z[i] += h;
            m.z[i] -= h;
            fd[i] = (obj(p, false).l_total - obj(m, false).l_total) / (2 * h);
        }
        CHECK(relative_error(g, fd) < 1e-4);
    }
    CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(30));
}

TEST_CASE("objective is linear in the weights") {
    const auto b = toy_backends();
    const auto target = toy_task_target();
    const auto routed = route_guides(target, StageOneBackends::from(b).guides);
    const LossWeights w{0.7, {3.0}};
    const Objective one(b.generator, b.scorer, routed, toy_task_prompt(), target, w);
    const Objective two(b.generator, b.scorer, routed, toy_task_prompt(), target, w.scaled(2.0));
    SeededRng rng(1);
    for (int i = 0; i < 10; ++i) {
        LatentState z{b.generator->initial_latent(rng.next_u64()), 0, 0};
        const auto a = one(z, true);
        const auto c = two(z, true);
        CHECK(c.l_total == doctest::Approx(2 * a.l_total).epsilon(1e-12));
        CHECK((c.gradient - 2 * a.gradient).norm() <= 1e-12 * (1 + a.gradient.norm()));
    }
}

TEST_CASE("zero segmentation weight reduces to the scorer-only objective") {
    const auto b = toy_backends();
    const auto target = toy_task_target();
    const auto routed = route_guides(target, StageOneBackends::from(b).guides);
    const Objective guided(b.generator, b.scorer, routed, toy_task_prompt(), target, LossWeights{1.5, {0.0}});
    const Objective clip_only(b.generator, b.scorer, {}, toy_task_prompt(), target, LossWeights{1.5, {0.0}});
    SeededRng rng(3);
    for (int i = 0; i < 10; ++i) {
        LatentState z{b.generator->initial_latent(rng.next_u64()), 0, 0};
        const auto a = guided(z, true);
        const auto c = clip_only(z, true);
        CHECK(a.l_total == c.l_total);
        CHECK(a.l_total == 1.5 * a.l_clip);
        CHECK((a.gradient - c.gradient).cwiseAbs().maxCoeff() <= 1e-15);
    }

    OptimizerConfig cfg = toy_config(0.0);
    cfg.max_steps = 40;
    const auto r = optimize(toy_task_prompt(), target, StageOneBackends::from(b), cfg, 4);
    for (const auto& row : r.trace) CHECK(row.l_total == row.l_clip);
}

TEST_CASE("zero segmentation weight gives the same trace as a scorer-only descent") {
    const auto b = toy_backends();
    const auto target = toy_task_target();
    OptimizerConfig cfg = toy_config(0.0);
    cfg.max_steps = 60;
    const auto r = optimize(toy_task_prompt(), target, StageOneBackends::from(b), cfg, 8);

    // Heavy-ball descent on the scorer alone, written out directly.
    Eigen::VectorXd z = b.generator->initial_latent(8);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(z.size());
    for (const auto& row : r.trace) {
        const LatentState state{z, 8, row.step};
        const Image img = b.generator->decode(state);
        CHECK(row.l_clip == b.scorer->score(img, toy_task_prompt()));
        const Eigen::VectorXd g = b.generator->decode_vjp(state, b.scorer->score_gradient(img, toy_task_prompt()));
        v = cfg.momentum * v - cfg.step_size * g;
        z += v;
    }
}

TEST_CASE("optimizer bookkeeping") {
    const auto b = toy_backends();
    const auto s1 = StageOneBackends::from(b);
    OptimizerConfig cfg = toy_config(5.0);
    const auto r = optimize(toy_task_prompt(), toy_task_target(), s1, cfg, 12);
    const auto again = optimize(toy_task_prompt(), toy_task_target(), s1, cfg, 12);
    CHECK(r.image == again.image);
    CHECK(r.final_loss == again.final_loss);

    REQUIRE_FALSE(r.trace.empty());
    CHECK(static_cast<int>(r.trace.size()) <= cfg.max_steps);
    double best = std::numeric_limits<double>::infinity();
    double prev_best = best;
    for (const auto& row : r.trace) {
        CHECK(row.l_total == doctest::Approx(reference_total(row.l_clip, row.l_seg, LossWeights{1.0, {5.0}})));
        best = std::min(best, row.l_total);
        CHECK(best <= prev_best);
        prev_best = best;
    }
    CHECK(r.final_loss == best);
    CHECK(r.trace[static_cast<std::size_t>(r.best_step)].l_total == best);
    CHECK(r.image == b.generator->decode(r.latent));
    CHECK(r.final_loss < r.trace.front().l_total);

    const auto j = trace_to_json(r);
    CHECK(j["trace"].size() == r.trace.size());
    CHECK(trace_to_csv(r).rfind("step,l_clip,l_seg_0,l_total\n", 0) == 0);
}

TEST_CASE("optimizer rejects bad configuration and inputs") {
    const auto b = toy_backends();
    const auto s1 = StageOneBackends::from(b);
    OptimizerConfig cfg = toy_config(5.0);
    cfg.max_steps = 0;
    cfg.momentum = 1.0;
    try {
        optimize(toy_task_prompt(), toy_task_target(), s1, cfg, 0);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(e.fields().size() == 2);
    }
    CHECK_THROWS_AS(optimize("a unicorn", toy_task_target(), s1, toy_config(5.0), 0), ConfigError);
    const auto small = SegMask::from_labels(2, 1, 5, std::vector<int>{0, 2});
    CHECK_THROWS_AS(optimize(toy_task_prompt(), small, s1, toy_config(5.0), 0), ShapeError);
}

TEST_CASE("segmentation guidance reaches the toy layout and beats the unguided baseline") {
    const auto start = std::chrono::steady_clock::now();
    const auto b = toy_backends();
    const auto s1 = StageOneBackends::from(b);
    double guided = 0.0;
    double unguided = 0.0;
    for (int seed = 0; seed < kSeeds; ++seed) {
        guided += final_iou(b, optimize(toy_task_prompt(), toy_task_target(), s1, toy_config(5.0), seed));
        unguided += final_iou(b, optimize(toy_task_prompt(), toy_task_target(), s1, toy_config(0.0), seed));
    }
    guided /= kSeeds;
    unguided /= kSeeds;
    MESSAGE("guided " << guided << " unguided " << unguided);
    CHECK(guided > unguided);
    CHECK(guided > kGuidedThreshold);
    CHECK(std::chrono::steady_clock::now() - start < std::chrono::minutes(2));
}
