#pragma once

#include "protosplit/pipeline.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace protosplit {

enum class SessionEventType {
    phase1_judgment,
    patch_label,
    split_started,
    split_progress,
    split_finished,
    phase3_assessment,
};

std::string to_string(SessionEventType type);
SessionEventType parse_session_event_type(const std::string& text);

struct SessionEvent {
    std::uint64_t seq = 0;   // assigned by the log
    std::string session;
    SessionEventType type = SessionEventType::phase1_judgment;
    std::size_t prototype = 0;
    nlohmann::json payload = nlohmann::json::object();

    bool operator==(const SessionEvent&) const = default;
};

nlohmann::json to_json(const SessionEvent& event);
SessionEvent session_event_from_json(const nlohmann::json& j);

/// The log could not be written; the caller may retry.
class LogWriteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Append-only JSON-lines journal shared by many sessions. Each record is written with a single
/// write(2) under a mutex; phase boundaries are fsynced.
class SessionLog {
public:
    explicit SessionLog(std::filesystem::path path);
    ~SessionLog();
    SessionLog(const SessionLog&) = delete;
    SessionLog& operator=(const SessionLog&) = delete;

    void append(SessionEvent& event);
    /// All records in one write; one fsync at the end.
    void append_batch(std::span<SessionEvent> events);

    const std::filesystem::path& path() const { return path_; }

    /// Parses every record; a torn final line (crash mid-write) is skipped.
    static std::vector<SessionEvent> read(const std::filesystem::path& path);

private:
    void write_locked(std::span<SessionEvent> events, bool sync);

    std::filesystem::path path_;
    int fd_ = -1;
    std::uint64_t next_seq_ = 1;
    std::mutex mutex_;
};

bool is_phase_boundary(SessionEventType type);

struct PrototypeSessionState {
    std::optional<bool> consistent;
    std::uint64_t submission = 0;
    LabelMap labels;                      // latest submission only
    std::string split_status;             // empty until a split starts
    std::optional<std::size_t> new_channel;
    std::map<std::size_t, std::string> assessments;   // channel -> "more" | "less"

    bool operator==(const PrototypeSessionState&) const = default;
};

struct SessionState {
    std::map<std::size_t, PrototypeSessionState> prototypes;
    std::size_t judgments = 0;
    std::size_t inconsistent_judgments = 0;
    std::size_t patch_labels = 0;
    std::size_t assessments = 0;
    std::size_t more_consistent = 0;
    std::uint64_t last_seq = 0;

    std::size_t decisions() const { return judgments + patch_labels + assessments; }
    bool operator==(const SessionState&) const = default;
};

struct AssessmentAggregate {
    std::size_t sessions = 0;
    std::size_t judgments = 0;
    std::size_t inconsistent_judgments = 0;
    std::size_t patch_labels = 0;
    std::size_t assessments = 0;
    std::size_t more_consistent = 0;
    std::size_t decisions = 0;
    double inconsistent_fraction = 0.0;
    double more_consistent_fraction = 0.0;

    bool operator==(const AssessmentAggregate&) const = default;
};

nlohmann::json to_json(const AssessmentAggregate& aggregate);
nlohmann::json to_json(const SessionState& state);

/// Per-session state rebuilt from events. Events at or below a session's last applied sequence
/// number are ignored, so applying the same log twice changes nothing.
class SessionReplay {
public:
    void apply(const SessionEvent& event);
    void apply_all(std::span<const SessionEvent> events);

    const std::map<std::string, SessionState>& sessions() const { return sessions_; }
    const SessionState* session(const std::string& id) const;
    AssessmentAggregate aggregate() const;

    bool operator==(const SessionReplay&) const = default;

private:
    std::map<std::string, SessionState> sessions_;
};

SessionReplay replay_log(const std::filesystem::path& path);

} // namespace protosplit
