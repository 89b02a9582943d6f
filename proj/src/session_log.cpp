#include "protosplit/session_log.hpp"

#include <cerrno>
#include <cstring>
#include <fcntl.h>
#include <fstream>
#include <unistd.h>

namespace protosplit {

using nlohmann::json;

namespace {

constexpr std::pair<SessionEventType, const char*> event_names[] = {
    {SessionEventType::phase1_judgment, "phase1_judgment"},
    {SessionEventType::patch_label, "patch_label"},
    {SessionEventType::split_started, "split_started"},
    {SessionEventType::split_progress, "split_progress"},
    {SessionEventType::split_finished, "split_finished"},
    {SessionEventType::phase3_assessment, "phase3_assessment"},
};

double fraction(std::size_t part, std::size_t whole) {
    return whole == 0 ? 0.0 : static_cast<double>(part) / static_cast<double>(whole);
}

} // namespace

std::string to_string(SessionEventType type) {
    for (const auto& [t, name] : event_names) {
        if (t == type) {
            return name;
        }
    }
    return "unknown";
}

SessionEventType parse_session_event_type(const std::string& text) {
    for (const auto& [t, name] : event_names) {
        if (text == name) {
            return t;
        }
    }
    throw std::invalid_argument("unknown session event '" + text + "'");
}

bool is_phase_boundary(SessionEventType type) {
    return type != SessionEventType::split_progress;
}

json to_json(const SessionEvent& event) {
    return {{"seq", event.seq},
            {"session", event.session},
            {"event", to_string(event.type)},
            {"prototype", event.prototype},
            {"payload", event.payload}};
}

SessionEvent session_event_from_json(const json& j) {
    SessionEvent event;
    event.seq = j.at("seq").get<std::uint64_t>();
    event.session = j.at("session").get<std::string>();
    event.type = parse_session_event_type(j.at("event").get<std::string>());
    event.prototype = j.at("prototype").get<std::size_t>();
    event.payload = j.value("payload", json::object());
    return event;
}

SessionLog::SessionLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) {
        std::filesystem::create_directories(path_.parent_path());
    }
    for (const auto& event : read(path_)) {
        next_seq_ = std::max(next_seq_, event.seq + 1);
    }
    fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) {
        throw LogWriteError("cannot open session log " + path_.string() + ": " + std::strerror(errno));
    }
}

SessionLog::~SessionLog() {
    if (fd_ >= 0) {
        ::fsync(fd_);
        ::close(fd_);
    }
}

void SessionLog::append(SessionEvent& event) {
    write_locked(std::span<SessionEvent>(&event, 1), is_phase_boundary(event.type));
}

void SessionLog::append_batch(std::span<SessionEvent> events) {
    bool sync = false;
    for (const auto& e : events) {
        sync = sync || is_phase_boundary(e.type);
    }
    write_locked(events, sync);
}

void SessionLog::write_locked(std::span<SessionEvent> events, bool sync) {
    if (events.empty()) {
        return;
    }
    std::lock_guard lock(mutex_);
    std::string buffer;
    std::uint64_t seq = next_seq_;
    for (auto& event : events) {
        event.seq = seq++;
        buffer += to_json(event).dump();
        buffer += '\n';
    }
    std::size_t written = 0;
    while (written < buffer.size()) {
        const ssize_t n = ::write(fd_, buffer.data() + written, buffer.size() - written);
        if (n < 0) {
            if (errno == EINTR) {
                continue;
            }
            throw LogWriteError("session log write failed: " + std::string(std::strerror(errno)));
        }
        written += static_cast<std::size_t>(n);
    }
    if (sync && ::fsync(fd_) != 0) {
        throw LogWriteError("session log fsync failed: " + std::string(std::strerror(errno)));
    }
    next_seq_ = seq;
}

std::vector<SessionEvent> SessionLog::read(const std::filesystem::path& path) {
    std::vector<SessionEvent> events;
    std::ifstream in(path);
    if (!in) {
        return events;
    }
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            lines.push_back(line);
        }
    }
    for (std::size_t i = 0; i < lines.size(); ++i) {
        try {
            events.push_back(session_event_from_json(json::parse(lines[i])));
        } catch (const std::exception& e) {
            if (i + 1 == lines.size()) {
                break;
            }
            throw std::runtime_error("corrupt session log record " + std::to_string(i + 1) + ": " +
                                     e.what());
        }
    }
    return events;
}

void SessionReplay::apply(const SessionEvent& event) {
    auto& session = sessions_[event.session];
    if (event.seq != 0 && event.seq <= session.last_seq) {
        return;
    }
    session.last_seq = std::max(session.last_seq, event.seq);
    auto& proto = session.prototypes[event.prototype];
    const auto& p = event.payload;
    switch (event.type) {
    case SessionEventType::phase1_judgment: {
        const bool consistent = p.at("consistent").get<bool>();
        proto.consistent = consistent;
        ++session.judgments;
        session.inconsistent_judgments += consistent ? 0 : 1;
        break;
    }
    case SessionEventType::patch_label: {
        const auto submission = p.at("submission").get<std::uint64_t>();
        if (submission > proto.submission) {
            proto.submission = submission;
            proto.labels.clear();
        }
        if (submission == proto.submission) {
            proto.labels[p.at("patch").get<std::string>()] =
                parse_patch_label(p.at("label").get<std::string>());
        }
        ++session.patch_labels;
        break;
    }
    case SessionEventType::split_started:
        proto.split_status = "running";
        proto.new_channel.reset();
        proto.assessments.clear();
        break;
    case SessionEventType::split_progress:
        break;
    case SessionEventType::split_finished:
        proto.split_status = p.at("status").get<std::string>();
        if (p.contains("new_channel") && !p.at("new_channel").is_null()) {
            proto.new_channel = p.at("new_channel").get<std::size_t>();
        }
        break;
    case SessionEventType::phase3_assessment: {
        const auto channel = p.at("channel").get<std::size_t>();
        const auto verdict = p.at("verdict").get<std::string>();
        const auto previous = proto.assessments.find(channel);
        if (previous != proto.assessments.end()) {
            session.more_consistent -= previous->second == "more" ? 1 : 0;
        } else {
            ++session.assessments;
        }
        proto.assessments[channel] = verdict;
        session.more_consistent += verdict == "more" ? 1 : 0;
        break;
    }
    }
}

void SessionReplay::apply_all(std::span<const SessionEvent> events) {
    for (const auto& e : events) {
        apply(e);
    }
}

const SessionState* SessionReplay::session(const std::string& id) const {
    const auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : &it->second;
}

AssessmentAggregate SessionReplay::aggregate() const {
    AssessmentAggregate a;
    a.sessions = sessions_.size();
    for (const auto& [id, s] : sessions_) {
        a.judgments += s.judgments;
        a.inconsistent_judgments += s.inconsistent_judgments;
        a.patch_labels += s.patch_labels;
        a.assessments += s.assessments;
        a.more_consistent += s.more_consistent;
    }
    a.decisions = a.judgments + a.patch_labels + a.assessments;
    a.inconsistent_fraction = fraction(a.inconsistent_judgments, a.judgments);
    a.more_consistent_fraction = fraction(a.more_consistent, a.assessments);
    return a;
}

json to_json(const AssessmentAggregate& a) {
    return {{"sessions", a.sessions},
            {"judgments", a.judgments},
            {"inconsistent_judgments", a.inconsistent_judgments},
            {"inconsistent_fraction", a.inconsistent_fraction},
            {"patch_labels", a.patch_labels},
            {"assessments", a.assessments},
            {"more_consistent", a.more_consistent},
            {"more_consistent_fraction", a.more_consistent_fraction},
            {"decisions", a.decisions}};
}

json to_json(const SessionState& s) {
    json prototypes = json::object();
    for (const auto& [id, p] : s.prototypes) {
        json labels = json::object();
        for (const auto& [patch, label] : p.labels) {
            labels[patch] = to_string(label);
        }
        json assessments = json::object();
        for (const auto& [channel, verdict] : p.assessments) {
            assessments[std::to_string(channel)] = verdict;
        }
        prototypes[std::to_string(id)] = {
            {"consistent", p.consistent ? json(*p.consistent) : json(nullptr)},
            {"submission", p.submission},
            {"labels", labels},
            {"split_status", p.split_status},
            {"new_channel", p.new_channel ? json(*p.new_channel) : json(nullptr)},
            {"assessments", assessments}};
    }
    return {{"judgments", s.judgments},
            {"patch_labels", s.patch_labels},
            {"assessments", s.assessments},
            {"more_consistent", s.more_consistent},
            {"decisions", s.decisions()},
            {"prototypes", prototypes}};
}

SessionReplay replay_log(const std::filesystem::path& path) {
    SessionReplay replay;
    replay.apply_all(SessionLog::read(path));
    return replay;
}

} // namespace protosplit
