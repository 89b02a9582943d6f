#include "temp_dir.hpp"

#include "protosplit/service.hpp"
#include "protosplit/synthetic.hpp"

#include <doctest.h>
#include <httplib.h>

#include <thread>

using namespace protosplit;
using namespace std::chrono_literals;
using nlohmann::json;

namespace {

const SyntheticWorkbench& shared_workbench() {
    static const SyntheticWorkbench wb = [] {
        SynthConfig cfg;
        cfg.seed = 21;
        return generate_bank(cfg);
    }();
    return wb;
}

ServiceConfig config_with_log(const TempDir& dir) {
    ServiceConfig cfg;
    cfg.log_path = dir / "session.jsonl";
    return cfg;
}

json labels_json(const SyntheticWorkbench& wb, std::size_t e, std::size_t a, std::size_t b) {
    json labels = json::object();
    const auto& p = wb.truth.prototypes[e];
    REQUIRE(a <= p.planted_a.size());
    REQUIRE(b <= p.planted_b.size());
    for (std::size_t i = 0; i < a; ++i) labels[p.planted_a[i]] = "A";
    for (std::size_t i = 0; i < b; ++i) labels[p.planted_b[i]] = "B";
    return labels;
}

int status_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const ApiError& e) {
        return e.status();
    }
    return 200;
}

} // namespace

TEST_CASE("prototype listing needs detection and then ranks entangled prototypes first") {
    const auto& wb = shared_workbench();
    Service service(bundle_from_workbench(wb), {});
    CHECK(status_of([&] { service.list_prototypes(0, 10); }) == 409);

    const auto job = service.start_detection();
    const auto done = service.wait_job(job, 60s);
    CHECK(done.at("status") == "done");

    const auto page = service.list_prototypes(0, 8);
    CHECK(page.at("total") == 64);
    CHECK(page.at("items").size() == 8);
    for (const auto& item : page.at("items")) {
        CHECK(wb.truth.prototypes[item.at("id").get<std::size_t>()].entangled);
        CHECK(item.at("flagged").get<bool>());
    }
    CHECK(service.list_prototypes(500, 10).at("items").empty());
    CHECK(service.list_prototypes(0, 1000).at("items").size() == 64);
}

TEST_CASE("empty flagged set still lists every prototype") {
    SynthConfig cfg;
    cfg.seed = 3;
    cfg.entangled_count = 0;
    Service service(bundle_from_workbench(generate_bank(cfg)), {});
    service.detect_now();
    const auto page = service.list_prototypes(0, 100);
    CHECK(page.at("ranked").empty());
    CHECK(page.at("items").size() == 64);
}

TEST_CASE("patches endpoint mirrors top_activated_patches") {
    const auto& wb = shared_workbench();
    Service service(bundle_from_workbench(wb), {});
    const auto payload = service.get_patches(5, 10);
    const auto top = top_activated_patches(wb.corpus, wb.bank, 5, 10);
    REQUIRE(payload.at("patches").size() == top.indices.size());
    for (std::size_t i = 0; i < top.indices.size(); ++i) {
        CHECK(payload.at("patches")[i].at("id") == wb.corpus.patches[top.indices[i]].id);
    }
    CHECK(status_of([&] { service.get_patches(9999, 10); }) == 404);
    CHECK(status_of([&] { service.get_patch("nope"); }) == 404);
    CHECK(service.thumbnail(wb.corpus.patches[0].id).substr(0, 2) == "P5");
}

TEST_CASE("label submission, Q gate and replay") {
    TempDir dir;
    const auto& wb = shared_workbench();
    const auto e = wb.truth.entangled_prototypes().front();
    ConceptSets accepted;
    {
        Service service(bundle_from_workbench(wb), config_with_log(dir));
        service.detect_now();
        const auto verdict = service.submit_labels("alice", e, labels_json(wb, e, 5, 5));
        CHECK(verdict.at("sizes").at("s1") == 5);
        CHECK(verdict.at("sizes").at("s2") == 5);

        try {
            service.submit_labels("alice", e, labels_json(wb, e, 5, 1));
            FAIL("expected rejection");
        } catch (const ApiError& err) {
            CHECK(err.status() == 422);
            CHECK(std::string(err.what()).find("concept B below minimum size") != std::string::npos);
        }
        json stranger = labels_json(wb, e, 5, 5);
        stranger["not-a-patch"] = "A";
        CHECK(status_of([&] { service.submit_labels("alice", e, stranger); }) == 400);
        accepted = *service.accepted_sets("alice", e);
    }
    Service restarted(bundle_from_workbench(wb), config_with_log(dir));
    const auto replayed = restarted.accepted_sets("alice", e);
    REQUIRE(replayed);
    CHECK(*replayed == accepted);
}

TEST_CASE("split jobs: exclusivity, polling, results and assessments") {
    TempDir dir;
    const auto& wb = shared_workbench();
    auto cfg = config_with_log(dir);
    cfg.workers = 2;
    Service service(bundle_from_workbench(wb), cfg);
    service.detect_now();
    const auto entangled = wb.truth.entangled_prototypes();
    const auto e = entangled[0];

    CHECK(status_of([&] { service.submit_assessment("bob", e, {{std::to_string(e), "more"}}); }) == 409);
    CHECK(status_of([&] { service.start_split("bob", e, "labels"); }) == 409);

    service.submit_judgment("bob", e, false);
    const auto job = service.start_split("bob", e, "auto");
    CHECK(status_of([&] { service.start_split("bob", e, "auto"); }) == 409);

    const auto finished = service.wait_job(job, 120s);
    REQUIRE(finished.at("status") == "done");
    CHECK(service.get_job(job) == finished);
    CHECK(finished.at("progress").at("step").get<std::size_t>() > 0);

    const auto result = service.split_result(e, 10);
    const auto new_channel = result.at("new_channel").get<std::size_t>();
    CHECK(new_channel == 64);
    const auto& truth = wb.truth.prototypes[e];
    for (const auto& channel : result.at("channels")) {
        std::map<std::size_t, std::size_t> clusters;
        for (const auto& p : channel.at("patches")) {
            clusters[*wb.truth.concept_of(p.at("id").get<std::string>())]++;
        }
        std::size_t best = 0;
        for (const auto& [c, n] : clusters) best = std::max(best, n);
        CHECK(best >= 9);
        CHECK(clusters.size() <= 2);
    }
    (void)truth;

    const auto agg = service.submit_assessment("bob", e, {{std::to_string(e), "more"}, {std::to_string(new_channel), "more"}});
    CHECK(agg.at("assessments") == 2);
    CHECK(agg.at("more_consistent_fraction") == 1.0);
    CHECK(agg.at("decisions") == 3);
    CHECK(status_of([&] { service.submit_assessment("bob", e, {{"3000", "more"}}); }) == 400);
    CHECK(status_of([&] { service.submit_assessment("bob", e, {{std::to_string(e), "meh"}}); }) == 400);

    const auto before = service.aggregates();
    Service restarted(bundle_from_workbench(wb), cfg);
    CHECK(restarted.aggregates() == before);
    CHECK(restarted.session_state("bob").at("prototypes").at(std::to_string(e)).at("split_status") == "converged");
}

TEST_CASE("simulated protocol: aggregate equals the share of channels whose purity rose") {
    const auto& wb = shared_workbench();
    Service service(bundle_from_workbench(wb), {});
    service.detect_now();
    const auto ann = wb.truth.annotations();
    const auto before_acts = corpus_activations(wb.corpus, wb.bank);
    std::vector<std::string> jobs;
    const auto entangled = wb.truth.entangled_prototypes();
    for (std::size_t i = 0; i < 3; ++i) jobs.push_back(service.start_split("sim", entangled[i], "auto"));
    for (const auto& j : jobs) REQUIRE(service.wait_job(j, 120s).at("status") == "done");

    const auto after_acts = corpus_activations(wb.corpus, service.bank());
    std::size_t rose = 0, channels = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const auto e = entangled[i];
        const auto result = service.split_result(e, 10);
        const double pp_before = pattern_purity(channel_top_patterns(wb.corpus, before_acts, e, ann));
        json verdicts = json::object();
        for (const auto& channel : result.at("channels")) {
            const auto c = channel.at("channel").get<std::size_t>();
            const double pp_after = pattern_purity(channel_top_patterns(wb.corpus, after_acts, c, ann));
            verdicts[std::to_string(c)] = pp_after > pp_before ? "more" : "less";
            rose += pp_after > pp_before ? 1 : 0;
            ++channels;
        }
        service.submit_assessment("sim", e, verdicts);
    }
    CHECK(service.aggregates().at("more_consistent_fraction").get<double>() ==
          static_cast<double>(rose) / static_cast<double>(channels));
}

TEST_CASE("HTTP routes") {
    const auto& wb = shared_workbench();
    Service service(bundle_from_workbench(wb), {});
    httplib::Server server;
    register_routes(server, service);
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::jthread thread([&] { server.listen_after_bind(); });
    struct Stop {
        httplib::Server& server;
        ~Stop() { server.stop(); }
    } stop{server};
    server.wait_until_ready();
    httplib::Client client("127.0.0.1", port);

    auto res = client.Get("/api/v1/prototypes");
    REQUIRE(res);
    CHECK(res->status == 409);
    CHECK(json::parse(res->body).at("error") == "run detection first");

    res = client.Post("/api/v1/detect", "", "application/json");
    REQUIRE(res);
    CHECK(res->status == 202);
    const auto job = json::parse(res->body).at("job").get<std::string>();
    service.wait_job(job, 60s);
    res = client.Get("/api/v1/jobs/" + job);
    CHECK(json::parse(res->body).at("status") == "done");

    res = client.Get("/api/v1/prototypes?offset=0&limit=3");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(json::parse(res->body).at("items").size() == 3);
    CHECK(client.Get("/api/v1/prototypes?limit=abc")->status == 400);

    CHECK(client.Get("/api/v1/prototypes/9999/patches")->status == 404);
    res = client.Get("/api/v1/prototypes/2/patches?k=4");
    const auto patches = json::parse(res->body).at("patches");
    CHECK(patches.size() == 4);
    res = client.Get(patches[0].at("thumbnail").get<std::string>());
    CHECK(res->status == 200);
    CHECK(res->body.substr(0, 2) == "P5");

    const auto e = wb.truth.entangled_prototypes().front();
    const std::string base = "/api/v1/sessions/carol/prototypes/" + std::to_string(e);
    json nine_one = json::object();
    const auto served = service.get_patches(e, 10).at("patches");
    for (std::size_t i = 0; i < served.size(); ++i) nine_one[served[i].at("id").get<std::string>()] = i < 9 ? "A" : "B";
    res = client.Post(base + "/labels", json{{"labels", nine_one}}.dump(), "application/json");
    CHECK(res->status == 422);
    CHECK(json::parse(res->body).at("accepted") == false);
    res = client.Post(base + "/labels", json{{"labels", labels_json(wb, e, 5, 5)}}.dump(), "application/json");
    CHECK(res->status == 200);
    res = client.Post(base + "/judgment", R"({"consistent": false})", "application/json");
    CHECK(res->status == 200);
    CHECK(client.Post(base + "/judgment", "{not json", "application/json")->status == 400);

    res = client.Post(base + "/split", R"({"mode": "labels"})", "application/json");
    REQUIRE(res->status == 202);
    const auto split_job = json::parse(res->body).at("job").get<std::string>();
    CHECK(service.wait_job(split_job, 120s).at("status") == "done");
    res = client.Get("/api/v1/prototypes/" + std::to_string(e) + "/split-result");
    CHECK(res->status == 200);
    res = client.Get("/api/v1/sessions/carol");
    CHECK(json::parse(res->body).at("decisions") == 11);
    CHECK(client.Get("/api/v1/sessions/nobody")->status == 404);
    CHECK(client.Get("/api/v1/aggregates")->status == 200);
}
