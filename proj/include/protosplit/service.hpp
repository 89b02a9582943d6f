#pragma once

#include "protosplit/bundle_io.hpp"
#include "protosplit/pipeline.hpp"
#include "protosplit/session_log.hpp"

#include <json.hpp>

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace httplib {
class Server;
}

namespace protosplit {

/// An error with an HTTP status attached.
class ApiError : public std::runtime_error {
public:
    ApiError(int status, const std::string& what, bool retryable = false)
        : std::runtime_error(what), status_(status), retryable_(retryable) {}
    int status() const { return status_; }
    bool retryable() const { return retryable_; }

private:
    int status_;
    bool retryable_;
};

struct ServiceConfig {
    std::size_t workers = 2;
    std::size_t top_k = 10;
    DetectionOptions detection;
    SplitHyperparams hyper;
    HeadFinetuneConfig head;
    bool something_else_to_reference = true;
    std::uint64_t seed = 0;
    std::optional<std::filesystem::path> log_path;
    /// Committed splits are written here atomically when set.
    std::optional<std::filesystem::path> save_path;
};

enum class JobStatus { queued, running, done, failed };
std::string to_string(JobStatus status);

struct Job {
    std::string id;
    std::string kind;   // detect | split
    JobStatus status = JobStatus::queued;
    std::optional<std::size_t> prototype;
    std::optional<SplitProgress> progress;
    nlohmann::json result;
    std::string error;
};

nlohmann::json to_json(const Job& job);

/// Fixed number of threads draining a FIFO queue. Queued tasks still run on shutdown.
class WorkerPool {
public:
    explicit WorkerPool(std::size_t workers);
    ~WorkerPool();
    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;

    void submit(std::function<void()> task);

private:
    std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<std::function<void()>> queue_;
    bool stopping_ = false;
    std::vector<std::jthread> threads_;
};

/// The interactive loop behind the HTTP API. Every method is safe to call concurrently.
class Service {
public:
    Service(PatchBundle bundle, ServiceConfig config);
    ~Service();

    nlohmann::json status() const;

    std::string start_detection();
    /// Runs detection synchronously on the calling thread.
    void detect_now();

    nlohmann::json list_prototypes(std::size_t offset, std::size_t limit) const;
    nlohmann::json get_patches(std::size_t prototype, std::size_t k) const;
    nlohmann::json get_patch(const std::string& patch_id) const;
    std::string thumbnail(const std::string& patch_id) const;

    nlohmann::json submit_judgment(const std::string& session, std::size_t prototype, bool consistent);
    nlohmann::json submit_labels(const std::string& session, std::size_t prototype,
                                 const nlohmann::json& labels);
    std::string start_split(const std::string& session, std::size_t prototype, const std::string& mode);
    nlohmann::json get_job(const std::string& job_id) const;
    /// Blocks until the job reaches a terminal state or the timeout passes.
    nlohmann::json wait_job(const std::string& job_id, std::chrono::milliseconds timeout) const;
    nlohmann::json split_result(std::size_t prototype, std::size_t k) const;
    nlohmann::json submit_assessment(const std::string& session, std::size_t prototype,
                                     const nlohmann::json& verdicts);

    nlohmann::json session_state(const std::string& session) const;
    nlohmann::json aggregates() const;

    /// The ConceptSets accepted for (session, prototype), if any.
    std::optional<ConceptSets> accepted_sets(const std::string& session, std::size_t prototype) const;
    PrototypeBank bank() const;
    const ServiceConfig& config() const { return config_; }

private:
    struct SplitEntry {
        std::size_t prototype = 0;
        std::size_t new_channel = 0;
        std::string job;
        std::string session;
    };

    void check_prototype(std::size_t prototype) const;
    nlohmann::json patch_payloads(const PrototypeBank& bank, std::size_t prototype, std::size_t k) const;
    std::set<std::string> served_patch_ids(std::size_t prototype) const;
    std::string new_job(const std::string& kind, std::optional<std::size_t> prototype);
    void update_job(const std::string& id, const std::function<void(Job&)>& update);
    void log(SessionEvent event);
    void log_batch(std::vector<SessionEvent>& events);
    void run_split_job(const std::string& job_id, const std::string& session, std::size_t prototype,
                       ConceptSets sets);
    std::string split_status(std::size_t prototype) const;

    ServiceConfig config_;
    Corpus corpus_;
    std::map<std::string, std::string> thumbnails_;
    std::optional<PartAnnotations> annotations_;
    std::optional<GroundTruth> ground_truth_;

    mutable std::shared_mutex model_mutex_;
    PrototypeBank bank_;
    std::optional<DetectionReport> detection_;
    std::map<std::size_t, SplitEntry> results_;

    mutable std::mutex jobs_mutex_;
    mutable std::condition_variable jobs_cv_;
    std::map<std::string, Job> jobs_;
    std::set<std::size_t> active_splits_;
    std::uint64_t job_counter_ = 0;

    mutable std::mutex sessions_mutex_;
    SessionReplay replay_;
    std::map<std::pair<std::string, std::size_t>, ConceptSets> accepted_;
    std::unique_ptr<SessionLog> log_;

    std::unique_ptr<WorkerPool> pool_;   // last member: joined first on destruction
};

/// Registers every /api/v1 route on `server`.
void register_routes(httplib::Server& server, Service& service);

} // namespace protosplit
