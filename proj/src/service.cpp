#include "protosplit/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <iomanip>
#include <sstream>

namespace protosplit {

using nlohmann::json;

namespace {

json accuracy_json(const ConceptAccuracy& a) {
    return {{"s1", a.s1}, {"s2", a.s2}, {"sr", a.sr}};
}

bool terminal(JobStatus status) {
    return status == JobStatus::done || status == JobStatus::failed;
}

} // namespace

std::string to_string(JobStatus status) {
    switch (status) {
    case JobStatus::queued:
        return "queued";
    case JobStatus::running:
        return "running";
    case JobStatus::done:
        return "done";
    case JobStatus::failed:
        return "failed";
    }
    return "failed";
}

json to_json(const Job& job) {
    json j = {{"id", job.id}, {"kind", job.kind}, {"status", to_string(job.status)}};
    j["prototype"] = job.prototype ? json(*job.prototype) : json(nullptr);
    if (job.progress) {
        j["progress"] = {{"step", job.progress->step},
                         {"loss", job.progress->loss},
                         {"accuracy", accuracy_json(job.progress->accuracy)}};
    } else {
        j["progress"] = nullptr;
    }
    j["result"] = job.result;
    if (!job.error.empty()) {
        j["error"] = job.error;
    }
    return j;
}

WorkerPool::WorkerPool(std::size_t workers) {
    workers = std::max<std::size_t>(1, workers);
    for (std::size_t i = 0; i < workers; ++i) {
        threads_.emplace_back([this] {
            for (;;) {
                std::function<void()> task;
                {
                    std::unique_lock lock(mutex_);
                    cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
                    if (queue_.empty()) {
                        return;
                    }
                    task = std::move(queue_.front());
                    queue_.pop_front();
                }
                task();
            }
        });
    }
}

WorkerPool::~WorkerPool() {
    {
        std::lock_guard lock(mutex_);
        stopping_ = true;
    }
    cv_.notify_all();
}

void WorkerPool::submit(std::function<void()> task) {
    {
        std::lock_guard lock(mutex_);
        if (stopping_) {
            throw ApiError(503, "service is shutting down", true);
        }
        queue_.push_back(std::move(task));
    }
    cv_.notify_one();
}

Service::Service(PatchBundle bundle, ServiceConfig config)
    : config_(std::move(config)),
      corpus_(std::move(bundle.corpus)),
      thumbnails_(std::move(bundle.thumbnails)),
      annotations_(std::move(bundle.annotations)),
      ground_truth_(std::move(bundle.ground_truth)),
      bank_(std::move(bundle.bank)) {
    config_.hyper.validate();
    if (config_.log_path) {
        log_ = std::make_unique<SessionLog>(*config_.log_path);
        replay_.apply_all(SessionLog::read(*config_.log_path));
        for (const auto& [session, state] : replay_.sessions()) {
            for (const auto& [prototype, proto] : state.prototypes) {
                if (proto.labels.empty() || prototype >= bank_.num_prototypes()) {
                    continue;
                }
                try {
                    accepted_[{session, prototype}] = concept_sets_from_labels(
                        corpus_, bank_, prototype, proto.labels, config_.detection.min_clique_size,
                        config_.something_else_to_reference);
                } catch (const std::exception&) {
                }
            }
        }
    }
    pool_ = std::make_unique<WorkerPool>(config_.workers);
}

Service::~Service() {
    pool_.reset();
}

json Service::status() const {
    std::shared_lock lock(model_mutex_);
    return {{"feature_width", bank_.feature_width()},
            {"prototypes", bank_.num_prototypes()},
            {"classes", bank_.num_classes()},
            {"patches", corpus_.patches.size()},
            {"images", corpus_.images.size()},
            {"detection_available", detection_.has_value()},
            {"splits_committed", results_.size()},
            {"min_concept_size", config_.detection.min_clique_size},
            {"top_k", config_.top_k},
            {"workers", config_.workers}};
}

void Service::check_prototype(std::size_t prototype) const {
    std::shared_lock lock(model_mutex_);
    if (prototype >= bank_.num_prototypes()) {
        throw ApiError(404, "unknown prototype " + std::to_string(prototype));
    }
}

std::string Service::new_job(const std::string& kind, std::optional<std::size_t> prototype) {
    std::lock_guard lock(jobs_mutex_);
    std::ostringstream id;
    id << "job-" << std::setw(6) << std::setfill('0') << ++job_counter_;
    Job job;
    job.id = id.str();
    job.kind = kind;
    job.prototype = prototype;
    jobs_.emplace(job.id, job);
    return job.id;
}

void Service::update_job(const std::string& id, const std::function<void(Job&)>& update) {
    {
        std::lock_guard lock(jobs_mutex_);
        auto& job = jobs_.at(id);
        if (terminal(job.status)) {
            return;
        }
        update(job);
    }
    jobs_cv_.notify_all();
}

void Service::log(SessionEvent event) {
    if (!log_) {
        return;
    }
    try {
        log_->append(event);
    } catch (const LogWriteError& e) {
        throw ApiError(503, e.what(), true);
    }
}

void Service::log_batch(std::vector<SessionEvent>& events) {
    if (!log_) {
        return;
    }
    try {
        log_->append_batch(events);
    } catch (const LogWriteError& e) {
        throw ApiError(503, e.what(), true);
    }
}

std::string Service::start_detection() {
    const auto id = new_job("detect", std::nullopt);
    pool_->submit([this, id] {
        update_job(id, [](Job& j) { j.status = JobStatus::running; });
        try {
            PrototypeBank snapshot = bank();
            auto report = run_detection(corpus_, snapshot, config_.detection);
            json summary = {{"threshold", report.threshold},
                            {"score", report.score},
                            {"flagged", report.ranking.size()},
                            {"ranking", report.ranking}};
            {
                std::unique_lock lock(model_mutex_);
                if (snapshot.num_prototypes() == bank_.num_prototypes()) {
                    detection_ = std::move(report);
                } else {
                    throw std::runtime_error("bank changed during detection; rerun it");
                }
            }
            update_job(id, [&](Job& j) {
                j.status = JobStatus::done;
                j.result = summary;
            });
        } catch (const std::exception& e) {
            update_job(id, [&](Job& j) {
                j.status = JobStatus::failed;
                j.error = e.what();
            });
        }
    });
    return id;
}

void Service::detect_now() {
    PrototypeBank snapshot = bank();
    auto report = run_detection(corpus_, snapshot, config_.detection);
    std::unique_lock lock(model_mutex_);
    detection_ = std::move(report);
}

std::string Service::split_status(std::size_t prototype) const {
    {
        std::lock_guard lock(jobs_mutex_);
        if (active_splits_.contains(prototype)) {
            return "running";
        }
    }
    const auto it = results_.find(prototype);
    return it == results_.end() ? "none" : "done";
}

json Service::list_prototypes(std::size_t offset, std::size_t limit) const {
    std::shared_lock lock(model_mutex_);
    if (!detection_) {
        throw ApiError(409, "run detection first");
    }
    const auto& report = *detection_;
    std::vector<std::size_t> order = report.ranking;
    std::vector<bool> placed(bank_.num_prototypes(), false);
    for (auto d : order) {
        placed[d] = true;
    }
    for (std::size_t d = 0; d < bank_.num_prototypes(); ++d) {
        if (!placed[d]) {
            order.push_back(d);
        }
    }
    json items = json::array();
    for (std::size_t i = offset; i < order.size() && items.size() < limit; ++i) {
        const auto d = order[i];
        json item = {{"id", d}, {"split_status", split_status(d)}};
        if (d < report.prototypes.size()) {
            const auto& f = report.prototypes[d];
            item["flagged"] = f.flagged;
            item["dissimilarity"] = f.dissimilarity;
        } else {
            item["flagged"] = false;
            item["dissimilarity"] = nullptr;
        }
        item["rank"] = i < report.ranking.size() ? json(i + 1) : json(nullptr);
        items.push_back(item);
    }
    return {{"threshold", report.threshold},
            {"total", order.size()},
            {"offset", offset},
            {"limit", limit},
            {"ranked", report.ranking},
            {"items", items}};
}

json Service::patch_payloads(const PrototypeBank& bank, std::size_t prototype, std::size_t k) const {
    const auto top = top_activated_patches(corpus_, bank, prototype, k, config_.detection.dedup_per_image);
    json patches = json::array();
    for (std::size_t i = 0; i < top.indices.size(); ++i) {
        const auto& p = corpus_.patches[top.indices[i]];
        patches.push_back({{"id", p.id},
                           {"image_id", p.image_id},
                           {"h", p.location.h},
                           {"w", p.location.w},
                           {"activation", top.activations[i]},
                           {"thumbnail", "/api/v1/patches/" + p.id + "/thumbnail"}});
    }
    return {{"prototype", prototype}, {"k", k}, {"short_of_request", top.short_of_request},
            {"patches", patches}};
}

json Service::get_patches(std::size_t prototype, std::size_t k) const {
    check_prototype(prototype);
    if (k == 0) {
        throw ApiError(400, "k must be at least 1");
    }
    return patch_payloads(bank(), prototype, k);
}

json Service::get_patch(const std::string& patch_id) const {
    const auto index = corpus_.find_patch(patch_id);
    if (!index) {
        throw ApiError(404, "unknown patch " + patch_id);
    }
    const auto& p = corpus_.patches[*index];
    json j = {{"id", p.id},
              {"image_id", p.image_id},
              {"h", p.location.h},
              {"w", p.location.w},
              {"thumbnail", "/api/v1/patches/" + p.id + "/thumbnail"}};
    if (annotations_) {
        const auto it = annotations_->find(p.id);
        if (it != annotations_->end()) {
            j["parts"] = it->second;
        }
    }
    return j;
}

std::string Service::thumbnail(const std::string& patch_id) const {
    const auto index = corpus_.find_patch(patch_id);
    if (!index) {
        throw ApiError(404, "unknown patch " + patch_id);
    }
    const auto it = thumbnails_.find(corpus_.patches[*index].thumbnail_ref);
    if (it == thumbnails_.end()) {
        throw ApiError(404, "patch " + patch_id + " has no thumbnail");
    }
    return it->second;
}

json Service::submit_judgment(const std::string& session, std::size_t prototype, bool consistent) {
    check_prototype(prototype);
    std::lock_guard lock(sessions_mutex_);
    SessionEvent event{0, session, SessionEventType::phase1_judgment, prototype,
                       {{"consistent", consistent}}};
    log(event);
    replay_.apply(event);
    return {{"session", session}, {"prototype", prototype}, {"consistent", consistent}};
}

std::set<std::string> Service::served_patch_ids(std::size_t prototype) const {
    std::set<std::string> ids;
    std::shared_lock lock(model_mutex_);
    const auto top = top_activated_patches(corpus_, bank_, prototype, config_.top_k,
                                           config_.detection.dedup_per_image);
    for (auto i : top.indices) {
        ids.insert(corpus_.patches[i].id);
    }
    if (detection_ && prototype < detection_->prototypes.size()) {
        const auto& f = detection_->prototypes[prototype];
        ids.insert(f.patch_ids.begin(), f.patch_ids.end());
    }
    return ids;
}

json Service::submit_labels(const std::string& session, std::size_t prototype, const json& labels) {
    check_prototype(prototype);
    if (!labels.is_object() || labels.empty()) {
        throw ApiError(400, "labels must map patch ids to A, B or SomethingElse");
    }
    LabelMap map;
    const auto served = served_patch_ids(prototype);
    for (const auto& [patch, label] : labels.items()) {
        if (!served.contains(patch)) {
            throw ApiError(400, "patch " + patch + " is not among the patches served for prototype " +
                                    std::to_string(prototype));
        }
        try {
            map.emplace(patch, parse_patch_label(label.get<std::string>()));
        } catch (const std::exception& e) {
            throw ApiError(400, e.what());
        }
    }
    ConceptSets sets;
    try {
        std::shared_lock lock(model_mutex_);
        sets = concept_sets_from_labels(corpus_, bank_, prototype, map, config_.detection.min_clique_size,
                                        config_.something_else_to_reference);
    } catch (const SplitError& e) {
        throw ApiError(422, e.what());
    }

    std::lock_guard lock(sessions_mutex_);
    const auto* state = replay_.session(session);
    std::uint64_t submission = 1;
    if (state) {
        const auto it = state->prototypes.find(prototype);
        if (it != state->prototypes.end()) {
            submission = it->second.submission + 1;
        }
    }
    std::vector<SessionEvent> events;
    for (const auto& [patch, label] : map) {
        events.push_back({0, session, SessionEventType::patch_label, prototype,
                          {{"submission", submission}, {"patch", patch}, {"label", to_string(label)}}});
    }
    log_batch(events);
    for (const auto& e : events) {
        replay_.apply(e);
    }
    json sizes = {{"s1", sets.s1.size()}, {"s2", sets.s2.size()}, {"sr", sets.sr.size()}};
    accepted_[{session, prototype}] = std::move(sets);
    return {{"accepted", true}, {"submission", submission}, {"sizes", sizes}};
}

std::optional<ConceptSets> Service::accepted_sets(const std::string& session, std::size_t prototype) const {
    std::lock_guard lock(sessions_mutex_);
    const auto it = accepted_.find({session, prototype});
    if (it == accepted_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::string Service::start_split(const std::string& session, std::size_t prototype, const std::string& mode) {
    check_prototype(prototype);
    ConceptSets sets;
    if (mode == "labels") {
        auto accepted = accepted_sets(session, prototype);
        if (!accepted) {
            throw ApiError(409, "no accepted labels for prototype " + std::to_string(prototype));
        }
        sets = std::move(*accepted);
    } else if (mode == "auto") {
        std::shared_lock lock(model_mutex_);
        if (!detection_) {
            throw ApiError(409, "run detection first");
        }
        if (prototype >= detection_->prototypes.size() || !detection_->prototypes[prototype].flagged) {
            throw ApiError(409, "prototype " + std::to_string(prototype) +
                                    " has no detected concept pair; submit labels instead");
        }
        sets = auto_concept_sets(corpus_, bank_, detection_->prototypes[prototype]);
    } else {
        throw ApiError(400, "mode must be 'labels' or 'auto'");
    }

    {
        std::lock_guard lock(jobs_mutex_);
        if (active_splits_.contains(prototype)) {
            throw ApiError(409, "a split of prototype " + std::to_string(prototype) + " is already running");
        }
        active_splits_.insert(prototype);
    }
    const auto id = new_job("split", prototype);
    try {
        {
            std::lock_guard lock(sessions_mutex_);
            SessionEvent event{0, session, SessionEventType::split_started, prototype,
                               {{"job", id}, {"mode", mode}}};
            log(event);
            replay_.apply(event);
        }
        pool_->submit([this, id, session, prototype, sets = std::move(sets)]() mutable {
            run_split_job(id, session, prototype, std::move(sets));
        });
    } catch (...) {
        update_job(id, [](Job& j) {
            j.status = JobStatus::failed;
            j.error = "could not be scheduled";
        });
        std::lock_guard lock(jobs_mutex_);
        active_splits_.erase(prototype);
        throw;
    }
    return id;
}

void Service::run_split_job(const std::string& job_id, const std::string& session, std::size_t prototype,
                            ConceptSets sets) {
    update_job(job_id, [](Job& j) { j.status = JobStatus::running; });
    json finished;
    try {
        const PrototypeBank snapshot = bank();
        auto progress = [&](const SplitProgress& p) {
            update_job(job_id, [&](Job& j) {
                if (!j.progress || p.step > j.progress->step) {
                    j.progress = p;
                }
            });
            std::lock_guard lock(sessions_mutex_);
            if (log_) {
                SessionEvent event{0, session, SessionEventType::split_progress, prototype,
                                   {{"job", job_id}, {"step", p.step}, {"loss", p.loss},
                                    {"accuracy", accuracy_json(p.accuracy)}}};
                try {
                    log_->append(event);
                } catch (const LogWriteError&) {
                }
            }
        };
        auto outcome = split_and_finetune(corpus_, snapshot, prototype, std::move(sets), config_.hyper,
                                          config_.head, config_.detection.min_clique_size,
                                          split_seed(config_.seed, prototype), progress);
        const std::size_t dup = outcome.bank.num_prototypes() - 1;
        std::size_t new_channel = 0;
        {
            std::unique_lock lock(model_mutex_);
            std::copy(outcome.bank.kernels.row(prototype).begin(), outcome.bank.kernels.row(prototype).end(),
                      bank_.kernels.row(prototype).begin());
            std::copy(outcome.bank.head.row(prototype).begin(), outcome.bank.head.row(prototype).end(),
                      bank_.head.row(prototype).begin());
            new_channel = bank_.num_prototypes();
            bank_.kernels.append_row(outcome.bank.kernels.row(dup));
            bank_.head.append_row(outcome.bank.head.row(dup));
            results_[prototype] = {prototype, new_channel, job_id, session};
            if (config_.save_path) {
                PatchBundle out{bank_, corpus_, thumbnails_, annotations_, ground_truth_};
                write_bundle(out, *config_.save_path);
            }
        }
        auto record = to_json(outcome.record);
        record["new_channel"] = new_channel;
        finished = {{"job", job_id}, {"status", outcome.record.status}, {"new_channel", new_channel},
                    {"steps", outcome.record.steps}};
        update_job(job_id, [&](Job& j) {
            j.status = JobStatus::done;
            j.result = {{"prototype", prototype},
                        {"new_channel", new_channel},
                        {"split_status", outcome.record.status},
                        {"steps", outcome.record.steps},
                        {"accuracy", accuracy_json(outcome.record.accuracy)},
                        {"final_loss", outcome.record.final_loss}};
        });
    } catch (const std::exception& e) {
        finished = {{"job", job_id}, {"status", "failed"}, {"new_channel", nullptr}, {"error", e.what()}};
        update_job(job_id, [&](Job& j) {
            j.status = JobStatus::failed;
            j.error = e.what();
        });
    }
    {
        std::lock_guard lock(sessions_mutex_);
        SessionEvent event{0, session, SessionEventType::split_finished, prototype, finished};
        try {
            log(event);
        } catch (const ApiError&) {
        }
        replay_.apply(event);
    }
    {
        std::lock_guard lock(jobs_mutex_);
        active_splits_.erase(prototype);
    }
    jobs_cv_.notify_all();
}

json Service::get_job(const std::string& job_id) const {
    std::lock_guard lock(jobs_mutex_);
    const auto it = jobs_.find(job_id);
    if (it == jobs_.end()) {
        throw ApiError(404, "unknown job " + job_id);
    }
    return to_json(it->second);
}

json Service::wait_job(const std::string& job_id, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(jobs_mutex_);
    const auto it = jobs_.find(job_id);
    if (it == jobs_.end()) {
        throw ApiError(404, "unknown job " + job_id);
    }
    jobs_cv_.wait_for(lock, timeout, [&] {
        return terminal(it->second.status) &&
               !(it->second.kind == "split" && it->second.prototype &&
                 active_splits_.contains(*it->second.prototype));
    });
    return to_json(it->second);
}

json Service::split_result(std::size_t prototype, std::size_t k) const {
    check_prototype(prototype);
    std::shared_lock lock(model_mutex_);
    const auto it = results_.find(prototype);
    if (it == results_.end()) {
        throw ApiError(404, "no split result for prototype " + std::to_string(prototype));
    }
    json channels = json::array();
    for (auto channel : {it->second.prototype, it->second.new_channel}) {
        auto payload = patch_payloads(bank_, channel, k);
        channels.push_back({{"channel", channel}, {"patches", payload.at("patches")}});
    }
    return {{"prototype", prototype}, {"new_channel", it->second.new_channel}, {"job", it->second.job},
            {"channels", channels}};
}

json Service::submit_assessment(const std::string& session, std::size_t prototype, const json& verdicts) {
    check_prototype(prototype);
    SplitEntry entry;
    {
        std::shared_lock lock(model_mutex_);
        const auto it = results_.find(prototype);
        if (it == results_.end()) {
            throw ApiError(409, "no split result to assess for prototype " + std::to_string(prototype));
        }
        entry = it->second;
    }
    if (!verdicts.is_object() || verdicts.empty()) {
        throw ApiError(400, "verdicts must map result channels to 'more' or 'less'");
    }
    std::vector<SessionEvent> events;
    for (const auto& [key, value] : verdicts.items()) {
        std::size_t channel = 0;
        try {
            channel = std::stoul(key);
        } catch (const std::exception&) {
            throw ApiError(400, "channel '" + key + "' is not an integer");
        }
        if (channel != entry.prototype && channel != entry.new_channel) {
            throw ApiError(400, "channel " + key + " is not a result of splitting prototype " +
                                    std::to_string(prototype));
        }
        const auto verdict = value.is_string() ? value.get<std::string>() : std::string{};
        if (verdict != "more" && verdict != "less") {
            throw ApiError(400, "verdict must be 'more' or 'less'");
        }
        events.push_back({0, session, SessionEventType::phase3_assessment, prototype,
                          {{"channel", channel}, {"verdict", verdict}}});
    }
    std::lock_guard lock(sessions_mutex_);
    log_batch(events);
    for (const auto& e : events) {
        replay_.apply(e);
    }
    return to_json(replay_.aggregate());
}

json Service::session_state(const std::string& session) const {
    std::lock_guard lock(sessions_mutex_);
    const auto* state = replay_.session(session);
    if (!state) {
        throw ApiError(404, "unknown session " + session);
    }
    return to_json(*state);
}

json Service::aggregates() const {
    std::lock_guard lock(sessions_mutex_);
    return to_json(replay_.aggregate());
}

PrototypeBank Service::bank() const {
    std::shared_lock lock(model_mutex_);
    return bank_;
}

// ---- HTTP ----

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

template <typename Handler>
httplib::Server::Handler guarded(Handler handler) {
    return [handler](const httplib::Request& req, httplib::Response& res) {
        try {
            handler(req, res);
        } catch (const ApiError& e) {
            json body = {{"error", e.what()}};
            if (e.retryable()) {
                body["retryable"] = true;
            }
            send_json(res, e.status(), body);
        } catch (const json::exception& e) {
            send_json(res, 400, {{"error", std::string("malformed request: ") + e.what()}});
        } catch (const std::exception& e) {
            send_json(res, 500, {{"error", e.what()}});
        }
    };
}

std::size_t query_size(const httplib::Request& req, const std::string& key, std::size_t fallback) {
    if (!req.has_param(key)) {
        return fallback;
    }
    const auto text = req.get_param_value(key);
    try {
        std::size_t consumed = 0;
        const auto value = std::stoull(text, &consumed);
        if (consumed == text.size()) {
            return value;
        }
    } catch (const std::exception&) {
    }
    throw ApiError(400, "query parameter " + key + " must be a non-negative integer");
}

std::size_t path_size(const std::string& text) {
    try {
        return std::stoull(text);
    } catch (const std::exception&) {
        throw ApiError(404, "unknown prototype " + text);
    }
}

json body_of(const httplib::Request& req) {
    if (req.body.empty()) {
        return json::object();
    }
    return json::parse(req.body);
}

} // namespace

void register_routes(httplib::Server& server, Service& service) {
    const std::string api = "/api/v1";
    const std::string session = R"(/sessions/([A-Za-z0-9_.\-]+))";

    server.Get(api + "/status", guarded([&](const httplib::Request&, httplib::Response& res) {
                   send_json(res, 200, service.status());
               }));
    server.Post(api + "/detect", guarded([&](const httplib::Request&, httplib::Response& res) {
                    send_json(res, 202, {{"job", service.start_detection()}});
                }));
    server.Get(api + "/prototypes", guarded([&](const httplib::Request& req, httplib::Response& res) {
                   send_json(res, 200,
                             service.list_prototypes(query_size(req, "offset", 0),
                                                     query_size(req, "limit", 50)));
               }));
    server.Get(api + R"(/prototypes/(\d+)/patches)",
               guarded([&](const httplib::Request& req, httplib::Response& res) {
                   send_json(res, 200,
                             service.get_patches(path_size(req.matches[1]),
                                                 query_size(req, "k", service.config().top_k)));
               }));
    server.Get(api + R"(/prototypes/(\d+)/split-result)",
               guarded([&](const httplib::Request& req, httplib::Response& res) {
                   send_json(res, 200,
                             service.split_result(path_size(req.matches[1]),
                                                  query_size(req, "k", service.config().top_k)));
               }));
    server.Get(api + R"(/patches/([^/]+)/thumbnail)",
               guarded([&](const httplib::Request& req, httplib::Response& res) {
                   res.status = 200;
                   res.set_content(service.thumbnail(req.matches[1]), "image/x-portable-graymap");
               }));
    server.Get(api + R"(/patches/([^/]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
                   send_json(res, 200, service.get_patch(req.matches[1]));
               }));
    server.Post(api + session + R"(/prototypes/(\d+)/judgment)",
                guarded([&](const httplib::Request& req, httplib::Response& res) {
                    const auto body = body_of(req);
                    send_json(res, 200,
                              service.submit_judgment(req.matches[1], path_size(req.matches[2]),
                                                      body.at("consistent").get<bool>()));
                }));
    server.Post(api + session + R"(/prototypes/(\d+)/labels)",
                guarded([&](const httplib::Request& req, httplib::Response& res) {
                    const auto body = body_of(req);
                    try {
                        send_json(res, 200,
                                  service.submit_labels(req.matches[1], path_size(req.matches[2]),
                                                        body.at("labels")));
                    } catch (const ApiError& e) {
                        if (e.status() != 422) {
                            throw;
                        }
                        send_json(res, 422, {{"accepted", false}, {"reason", e.what()}, {"error", e.what()}});
                    }
                }));
    server.Post(api + session + R"(/prototypes/(\d+)/split)",
                guarded([&](const httplib::Request& req, httplib::Response& res) {
                    const auto body = body_of(req);
                    const auto mode = body.value("mode", std::string("labels"));
                    send_json(res, 202,
                              {{"job", service.start_split(req.matches[1], path_size(req.matches[2]), mode)}});
                }));
    server.Post(api + session + R"(/prototypes/(\d+)/assessment)",
                guarded([&](const httplib::Request& req, httplib::Response& res) {
                    const auto body = body_of(req);
                    send_json(res, 200,
                              service.submit_assessment(req.matches[1], path_size(req.matches[2]),
                                                        body.at("verdicts")));
                }));
    server.Get(api + session, guarded([&](const httplib::Request& req, httplib::Response& res) {
                   send_json(res, 200, service.session_state(req.matches[1]));
               }));
    server.Get(api + R"(/jobs/([A-Za-z0-9\-]+))",
               guarded([&](const httplib::Request& req, httplib::Response& res) {
                   send_json(res, 200, service.get_job(req.matches[1]));
               }));
    server.Get(api + "/aggregates", guarded([&](const httplib::Request&, httplib::Response& res) {
                   send_json(res, 200, service.aggregates());
               }));
}

} // namespace protosplit
