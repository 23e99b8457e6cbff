// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"
// after Eigen (see http.cpp)
#include "segguide/service.hpp"

#include <httplib.h>

#include <fstream>
#include <thread>

using namespace segguide;
using namespace fixture;

namespace {

struct Scratch {
    std::filesystem::path dir = temp_dir("service");
    ~Scratch() { std::filesystem::remove_all(dir); }
};

ServiceConfig config_for(const std::filesystem::path& dir, int workers = 2) {
    ServiceConfig c;
    c.storage_root = dir / "store";
    c.base_dir = dir;
    c.workers = workers;
    return c;
}

nlohmann::json toy_spec(std::uint64_t seed = 1, int n1 = 2, int n2 = 2, const std::string& mode = "auto") {
    const auto enc = encode_mask(toy_task_target(), ClassVocabulary::toy_default());
    return {{"prompt", toy_task_prompt()},
            {"mask_png", base64_encode(enc.index_map)},
            {"fan_out", {{"n_stage1", n1}, {"n_stage2", n2}}},
            {"seed", seed},
            {"mode", mode}};
}

std::vector<std::string> fields_of(const ValidationError& e) {
    std::vector<std::string> out;
    for (const auto& f : e.fields()) out.push_back(f.field);
    return out;
}

}  // namespace

TEST_CASE("artifact store") {
    Scratch s;
    JobStore store(s.dir);
    const Bytes data{1, 2, 3};
    const auto id = store.put_artifact(data);
    CHECK(id == sha256_hex(data));
    CHECK(store.put_artifact(data) == id);
    CHECK(store.get_artifact(id) == data);

    std::string tampered = id;
    tampered[5] = tampered[5] == 'a' ? 'b' : 'a';
    CHECK_THROWS_AS(store.get_artifact(tampered), NotFoundError);
    CHECK_THROWS_AS(store.get_artifact("../../etc/passwd"), NotFoundError);
    CHECK_FALSE(store.has_artifact("xyz"));

    // a blob edited on disk is refused
    std::ofstream(s.dir / "blobs" / id.substr(0, 2) / (id + ".png"), std::ios::binary) << "junk";
    CHECK_THROWS_AS(store.get_artifact(id), Error);

    int files = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(s.dir / "blobs")) {
        files += e.is_regular_file() ? 1 : 0;
    }
    CHECK(files == 1);
}

TEST_CASE("event log sequence numbers are gap-free per job") {
    Scratch s;
    JobStore store(s.dir);
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t) {
        threads.emplace_back([&store, t] {
            for (int i = 0; i < 25; ++i) store.append_event(t % 2 ? "a" : "b", "loss", {{"i", i}});
        });
    }
    for (auto& t : threads) t.join();
    for (const char* job : {"a", "b"}) {
        const auto ev = store.events_after(job, 0);
        REQUIRE(ev.size() == 50);
        for (std::size_t k = 0; k < ev.size(); ++k) CHECK(ev[k].seq == static_cast<std::int64_t>(k + 1));
        CHECK(store.events_after(job, 45).size() == 5);
    }
}

TEST_CASE("submitted jobs run to completion and match the in-process pipeline") {
    Scratch s;
    JobService svc(config_for(s.dir));
    const auto spec = toy_spec(9);
    const auto id = svc.submit(spec);
    const auto doc = svc.wait_until_settled(id);
    REQUIRE(doc["status"] == "done");
    CHECK(doc["stage1"].size() == 2);
    CHECK(doc["stage2"].size() == 4);

    const Pipeline p(toy_backends());
    auto job = job_from_spec(spec, s.dir, p);
    job = p.run_job(job, RunMode::Auto);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto bytes = svc.artifact(doc["stage1"][i]["artifact"]);
        CHECK(bytes == encode_png(job.stage1[i].image));
    }
    for (std::size_t k = 0; k < 4; ++k) {
        const auto bytes = svc.artifact(doc["stage2"][k]["artifact"]);
        CHECK(bytes == encode_png(job.stage2[k].image));
    }

    const auto events = svc.events(id);
    for (std::size_t k = 0; k < events.size(); ++k) CHECK(events[k].seq == static_cast<std::int64_t>(k + 1));
    CHECK(events.back().kind == "end");
    std::vector<std::string> statuses;
    std::map<std::string, std::vector<int>> steps;
    int candidates = 0;
    for (const auto& e : events) {
        if (e.kind == "status") statuses.push_back(e.data["status"]);
        if (e.kind == "loss") steps[e.data["candidate"]].push_back(e.data["step"]);
        if (e.kind == "candidate") {
            ++candidates;
            CHECK(svc.store().has_artifact(e.data["artifact"]));
        }
    }
    CHECK(statuses ==
          std::vector<std::string>{"pending", "stage1_running", "awaiting_selection", "stage2_running", "done"});
    CHECK(candidates == 6);
    REQUIRE(steps.size() == 2);
    for (const auto& [cand, list] : steps) {
        CHECK(list.size() <= 31);
        CHECK(std::is_sorted(list.begin(), list.end()));
        CHECK(std::adjacent_find(list.begin(), list.end()) == list.end());
        CHECK(list.front() == 0);
    }
    // late subscribers replay from any point
    CHECK(svc.events(id, 3).size() == events.size() - 3);
}

TEST_CASE("identical artifacts are stored once") {
    Scratch s;
    JobService svc(config_for(s.dir));
    const auto a = svc.submit(toy_spec(4, 1, 1));
    const auto b = svc.submit(toy_spec(4, 1, 1));
    const auto da = svc.wait_until_settled(a);
    const auto db = svc.wait_until_settled(b);
    CHECK(da["stage2"][0]["artifact"] == db["stage2"][0]["artifact"]);
    int files = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(s.dir / "store" / "blobs")) {
        files += e.is_regular_file() ? 1 : 0;
    }
    CHECK(files == 3);  // mask, one stage-1 and one stage-2 image
}

TEST_CASE("bad submissions are rejected synchronously") {
    Scratch s;
    JobService svc(config_for(s.dir));
    auto spec = toy_spec();
    spec["weights"] = {{"alpha_clip", -1.0}};
    try {
        svc.submit(spec);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(fields_of(e) == std::vector<std::string>{"alpha_clip"});
    }
    CHECK(svc.store().job_ids().empty());

    ServiceConfig dog_only = config_for(s.dir / "b");
    dog_only.backends["segmenters"] = nlohmann::json::array({{{"name", "toy"}, {"params", {{"classes", {2}}}}}});
    JobService narrow(dog_only);
    auto boat = toy_spec();
    const auto enc = encode_mask(SegMask::from_labels(kSize, kSize, 5, std::vector<int>(kSize * kSize, 4)),
                                 ClassVocabulary::toy_default());
    boat["mask_png"] = base64_encode(enc.index_map);
    CHECK_THROWS_WITH_AS(narrow.submit(boat), doctest::Contains("boat"), ValidationError);
    CHECK_THROWS_AS(svc.job("nope"), NotFoundError);
    CHECK_THROWS_AS(svc.events("nope"), NotFoundError);
}

TEST_CASE("interactive jobs wait for selection") {
    Scratch s;
    JobService svc(config_for(s.dir));
    const auto id = svc.submit(toy_spec(2, 2, 2, "interactive"));
    auto doc = svc.wait_until_settled(id);
    REQUIRE(doc["status"] == "awaiting_selection");
    CHECK(doc["stage2"].empty());

    CHECK_THROWS_AS(svc.select(id, {"s1-7"}, {}), NotFoundError);
    CHECK_THROWS_AS(svc.select(id, {}, {}), ValidationError);
    RefineOverride bad;
    bad.strength = -0.5;
    CHECK_THROWS_AS(svc.select(id, {"s1-0"}, bad), ValidationError);

    RefineOverride o;
    o.strength = 0.2;
    svc.select(id, {"s1-1"}, o);
    doc = svc.wait_until_settled(id);
    REQUIRE(doc["status"] == "done");
    REQUIRE(doc["stage2"].size() == 2);
    CHECK(doc["stage2"][0]["source"] == "s1-1");
    CHECK(doc["stage2"][0]["strength"] == 0.2);
    CHECK_THROWS_AS(svc.select(id, {"s1-0"}, {}), StateError);
}

TEST_CASE("restart marks unfinished jobs interrupted and keeps finished ones") {
    Scratch s;
    std::string done_id;
    std::string waiting_id;
    {
        JobService svc(config_for(s.dir));
        done_id = svc.submit(toy_spec(3, 1, 1));
        waiting_id = svc.submit(toy_spec(3, 1, 1, "interactive"));
        svc.wait_until_settled(done_id);
        svc.wait_until_settled(waiting_id);
    }
    {
        // a job left in a running state by a crash
        JobStore store(s.dir / "store");
        auto doc = *store.load_job(done_id);
        doc["status"] = "stage1_running";
        doc["history"] = {"pending", "stage1_running"};
        store.save_job("jcrashed", doc);
    }
    JobService svc(config_for(s.dir));
    const auto crashed = svc.job("jcrashed");
    CHECK(crashed["status"] == "failed");
    CHECK(crashed["failed_stage"] == "interrupted");
    CHECK(svc.events("jcrashed").back().kind == "end");

    const auto done = svc.job(done_id);
    CHECK(done["status"] == "done");
    CHECK(svc.artifact(done["stage2"][0]["artifact"]).size() > 0);

    // an awaiting job can still be selected after restart
    CHECK(svc.job(waiting_id)["status"] == "awaiting_selection");
    svc.select(waiting_id, {"s1-0"}, {});
    CHECK(svc.wait_until_settled(waiting_id)["status"] == "done");
}

TEST_CASE("shutdown interrupts running work") {
    Scratch s;
    auto cfg = config_for(s.dir, 1);
    auto spec = toy_spec(5, 4, 1);
    spec["optimizer"] = {{"max_steps", 100000}, {"plateau_patience", 100000}, {"plateau_tolerance", 0.0}};
    std::string id;
    {
        JobService svc(cfg);
        id = svc.submit(spec);
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
        svc.shutdown();
        CHECK_THROWS_AS(svc.submit(toy_spec()), StateError);
    }
    JobStore store(s.dir / "store");
    const auto doc = *store.load_job(id);
    CHECK(doc["status"] == "failed");
    CHECK(doc["failed_stage"] == "interrupted");
}

TEST_CASE("service config") {
    Scratch s;
    std::ofstream(s.dir / "cfg.json") << R"({"workers": 3, "storage_root": "data", "cadence": 5, "port": 0})";
    const auto c = ServiceConfig::from_file(s.dir / "cfg.json");
    CHECK(c.workers == 3);
    CHECK(c.cadence == 5);
    CHECK(c.storage_root == s.dir / "data");
    CHECK_THROWS_AS(ServiceConfig::from_json({{"workers", 0}}, s.dir), ConfigError);
    CHECK_THROWS_AS(ServiceConfig::from_json({{"workers", "many"}}, s.dir), ConfigError);
    std::ofstream(s.dir / "bad.json") << "{";
    CHECK_THROWS_AS(ServiceConfig::from_file(s.dir / "bad.json"), ConfigError);
}

TEST_CASE("http endpoints") {
    Scratch s;
    JobService svc(config_for(s.dir));
    HttpServer http(svc);
    const int port = http.bind("127.0.0.1", 0);
    std::thread loop([&] { http.listen(); });
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(30, 0);

    auto vocab = cli.Get("/vocab");
    REQUIRE(vocab);
    CHECK(ClassVocabulary::from_json(vocab->body) == ClassVocabulary::toy_default());

    auto bad = cli.Post("/jobs", R"({"weights": {"alpha_clip": -1}})", "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 400);
    const auto bad_doc = nlohmann::json::parse(bad->body);
    CHECK(bad_doc["fields"].size() >= 3);  // prompt, mask, alpha_clip
    CHECK(cli.Post("/jobs", "{not json", "application/json")->status == 400);

    auto created = cli.Post("/jobs", toy_spec(6, 2, 1, "interactive").dump(), "application/json");
    REQUIRE(created);
    REQUIRE(created->status == 201);
    const std::string id = nlohmann::json::parse(created->body)["id"];

    // the SSE stream of an interactive job stays open, so read the job state instead
    svc.wait_until_settled(id);
    CHECK(cli.Post("/jobs/" + id + "/select", R"({"ids": ["s1-9"]})", "application/json")->status == 404);
    CHECK(cli.Post("/jobs/" + id + "/select", R"({"ids": []})", "application/json")->status == 400);
    auto sel = cli.Post("/jobs/" + id + "/select", R"({"ids": ["s1-0"], "strength": 0.3})", "application/json");
    REQUIRE(sel);
    CHECK(sel->status == 202);

    std::string stream;
    auto ev = cli.Get("/jobs/" + id + "/events", [&](const char* data, std::size_t n) {
        stream.append(data, n);
        return true;
    });
    REQUIRE(ev);
    CHECK(ev->status == 200);
    CHECK(stream.find("event: end") != std::string::npos);
    const auto count = [](const std::string& text) {
        std::size_t k = 0;
        for (std::size_t at = text.find("\nevent: "); at != std::string::npos; at = text.find("\nevent: ", at + 1)) ++k;
        return k;
    };
    CHECK(count(stream) == svc.events(id).size());

    std::string tail;
    httplib::Headers from{{"Last-Event-ID", std::to_string(svc.events(id).size() - 2)}};
    cli.Get("/jobs/" + id + "/events", from, [&](const char* data, std::size_t n) {
        tail.append(data, n);
        return true;
    });
    CHECK(count(tail) == 2);

    auto job = cli.Get("/jobs/" + id);
    REQUIRE(job);
    const auto doc = nlohmann::json::parse(job->body);
    CHECK(doc["status"] == "done");
    CHECK(cli.Post("/jobs/" + id + "/select", R"({"ids": ["s1-0"]})", "application/json")->status == 409);

    const std::string art = doc["stage2"][0]["artifact"];
    auto png = cli.Get("/artifacts/" + art);
    REQUIRE(png);
    CHECK(png->status == 200);
    CHECK(png->get_header_value("Content-Type") == "image/png");
    CHECK(sha256_hex(std::string_view(png->body)) == art);
    std::string wrong = art;
    wrong[0] = wrong[0] == '0' ? '1' : '0';
    CHECK(cli.Get("/artifacts/" + wrong)->status == 404);
    CHECK(cli.Get("/jobs/unknown")->status == 404);

    // the uploaded mask is stored and comes back pixel-identical
    auto mask = cli.Get("/artifacts/" + doc["mask"].get<std::string>());
    REQUIRE(mask);
    const Bytes mask_bytes(mask->body.begin(), mask->body.end());
    CHECK(decode_mask(mask_bytes, ClassVocabulary::toy_default()) == toy_task_target());

    http.stop();
    loop.join();
}

TEST_CASE("binding an occupied port fails") {
    Scratch s;
    JobService svc(config_for(s.dir));
    HttpServer a(svc);
    const int port = a.bind("127.0.0.1", 0);
    HttpServer b(svc);
    CHECK_THROWS_AS(b.bind("127.0.0.1", port), PortInUseError);
}
