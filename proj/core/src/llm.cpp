#include <httplib.h>

#include "psyforge/llm.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace psyforge::llm {

using nlohmann::json;
using nlohmann::ordered_json;

void RetryPolicy::validate() const {
    if (max_attempts < 1) throw ValidationError("retry policy requires max_attempts >= 1");
    if (max_parallel < 1) throw ValidationError("retry policy requires max_parallel >= 1");
    if (base_delay_ms < 0) throw ValidationError("retry policy requires base_delay_ms >= 0");
    if (!(backoff_factor > 1.0)) throw ValidationError("retry policy requires backoff_factor > 1");
}

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Transport: return "transport";
    case ErrorKind::Timeout: return "timeout";
    case ErrorKind::HttpStatus: return "http_status";
    case ErrorKind::Auth: return "auth";
    case ErrorKind::Config: return "config";
    case ErrorKind::ScriptExhausted: return "script_exhausted";
    case ErrorKind::BadResponse: return "bad_response";
    }
    return "?";
}

ErrorKind parse_error_kind(std::string_view text) {
    for (auto kind : {ErrorKind::Transport, ErrorKind::Timeout, ErrorKind::HttpStatus, ErrorKind::Auth,
                      ErrorKind::Config, ErrorKind::ScriptExhausted, ErrorKind::BadResponse}) {
        if (to_string(kind) == text) return kind;
    }
    // Shorthand used in scripts.
    if (text == "retryable") return ErrorKind::Transport;
    if (text == "fatal") return ErrorKind::Auth;
    throw ValidationError("unknown error kind '" + std::string(text) + "'");
}

bool LlmError::retryable() const {
    switch (kind_) {
    case ErrorKind::Transport:
    case ErrorKind::Timeout:
    case ErrorKind::BadResponse: return true;
    case ErrorKind::HttpStatus: return status_ == 408 || status_ == 429 || status_ >= 500;
    case ErrorKind::Auth:
    case ErrorKind::Config:
    case ErrorKind::ScriptExhausted: return false;
    }
    return false;
}

bool LlmError::fatal() const {
    return kind_ == ErrorKind::Auth || kind_ == ErrorKind::Config || kind_ == ErrorKind::ScriptExhausted;
}

namespace {

std::string_view to_string(Role role) {
    switch (role) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
    }
    return "user";
}

Role parse_role(std::string_view s) {
    if (s == "system") return Role::System;
    if (s == "assistant") return Role::Assistant;
    return Role::User;
}

std::string_view to_string(FinishReason reason) {
    switch (reason) {
    case FinishReason::Stop: return "stop";
    case FinishReason::Length: return "length";
    case FinishReason::Error: return "error";
    }
    return "error";
}

FinishReason parse_finish_reason(std::string_view s) {
    if (s == "length") return FinishReason::Length;
    if (s == "error") return FinishReason::Error;
    return FinishReason::Stop;
}

const std::string& last_user_message(const ChatRequest& request) {
    for (auto it = request.messages.rbegin(); it != request.messages.rend(); ++it) {
        if (it->role == Role::User) return it->content;
    }
    static const std::string empty;
    return empty;
}

void validate_request(const ChatRequest& request) {
    if (request.messages.empty()) throw LlmError(ErrorKind::Config, "chat request has no messages");
    if (request.messages.back().role != Role::User) {
        throw LlmError(ErrorKind::Config, "chat request must end with a user message");
    }
    if (request.temperature < 0) throw LlmError(ErrorKind::Config, "temperature must be >= 0");
}

} // namespace

// ------------------------------------------------------------ ScriptedBackend

ScriptedBackend::ScriptedBackend(std::vector<Entry> script)
    : script_(std::move(script)), consumed_(script_.size(), false) {
    if (script_.empty()) throw ValidationError("scripted backend requires a non-empty script");
}

std::vector<ScriptedBackend::Entry> ScriptedBackend::parse_script(const json& j) {
    if (!j.is_array()) throw ValidationError("script must be a JSON array");
    std::vector<Entry> entries;
    for (const auto& item : j) {
        Entry e;
        e.match = item.value("match", std::string("*"));
        if (auto it = item.find("error"); it != item.end()) {
            e.failure = parse_error_kind(it->get<std::string>());
        } else {
            e.reply = item.at("reply").get<std::string>();
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

std::shared_ptr<ScriptedBackend> ScriptedBackend::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open script " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("script " + path.string() + ": " + e.what());
    }
    return std::make_shared<ScriptedBackend>(parse_script(j));
}

namespace {

bool entry_matches(std::string_view rule, const ChatRequest& request, const std::string& user) {
    if (rule == "*") return true;
    if (rule.starts_with("tag:")) return request.request_tag.find(rule.substr(4)) != std::string::npos;
    return user.find(rule) != std::string::npos;
}

} // namespace

BackendReply ScriptedBackend::complete(const ChatRequest& request) {
    const std::string& user = last_user_message(request);
    std::lock_guard lock(mutex_);
    ++calls_;
    for (std::size_t i = 0; i < script_.size(); ++i) {
        if (consumed_[i]) continue;
        const Entry& e = script_[i];
        if (!entry_matches(e.match, request, user)) continue;
        consumed_[i] = true;
        if (e.failure) throw LlmError(*e.failure, "scripted failure (" + std::string(to_string(*e.failure)) + ")");
        return {e.reply, FinishReason::Stop};
    }
    throw LlmError(ErrorKind::ScriptExhausted,
                   "scripted backend has no unconsumed entry for request '" + request.request_tag + "'");
}

std::size_t ScriptedBackend::calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
}

std::size_t ScriptedBackend::remaining() const {
    std::lock_guard lock(mutex_);
    return static_cast<std::size_t>(std::count(consumed_.begin(), consumed_.end(), false));
}

// -------------------------------------------------------------- OpenAiBackend

OpenAiBackend::OpenAiBackend(OpenAiConfig config) : config_(std::move(config)) {
    std::string url = config_.base_url;
    while (!url.empty() && url.back() == '/') url.pop_back();
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ValidationError("base_url must include a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    scheme_host_port_ = url.substr(0, path_start);
    path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
}

json OpenAiBackend::build_body(const OpenAiConfig& config, const ChatRequest& request) {
    json messages = json::array();
    for (const auto& m : request.messages) messages.push_back({{"role", to_string(m.role)}, {"content", m.content}});
    return {{"model", config.model},
            {"messages", std::move(messages)},
            {"temperature", request.temperature},
            {"max_tokens", request.max_tokens}};
}

BackendReply OpenAiBackend::parse_reply(int status, const std::string& body) {
    if (status == 401 || status == 403) {
        throw LlmError(ErrorKind::Auth, "authentication rejected (HTTP " + std::to_string(status) + ")", status);
    }
    if (status < 200 || status >= 300) {
        throw LlmError(ErrorKind::HttpStatus, "HTTP " + std::to_string(status) + ": " + body.substr(0, 200), status);
    }
    json j;
    try {
        j = json::parse(body);
    } catch (const json::parse_error&) {
        throw LlmError(ErrorKind::BadResponse, "response body is not JSON", status);
    }
    const auto choices = j.find("choices");
    if (choices == j.end() || !choices->is_array() || choices->empty()) {
        throw LlmError(ErrorKind::BadResponse, "response has no choices", status);
    }
    const auto& choice = (*choices)[0];
    const auto message = choice.find("message");
    if (message == choice.end() || !message->contains("content") || !(*message)["content"].is_string()) {
        throw LlmError(ErrorKind::BadResponse, "response has no message content", status);
    }
    BackendReply reply;
    reply.content = (*message)["content"].get<std::string>();
    if (auto fr = choice.find("finish_reason"); fr != choice.end() && fr->is_string()) {
        reply.finish_reason = fr->get<std::string>() == "length" ? FinishReason::Length : FinishReason::Stop;
    }
    return reply;
}

BackendReply OpenAiBackend::complete(const ChatRequest& request) {
    httplib::Client client(scheme_host_port_);
    const auto timeout = std::chrono::milliseconds(static_cast<long long>(config_.timeout_s * 1000));
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
    const std::string body = build_body(config_, request).dump();
    auto result = client.Post(path_prefix_ + "/chat/completions", headers, body, "application/json");
    if (!result) {
        const auto err = result.error();
        const bool timed_out = err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read;
        throw LlmError(timed_out ? ErrorKind::Timeout : ErrorKind::Transport,
                       "request to " + scheme_host_port_ + " failed: " + httplib::to_string(err));
    }
    return parse_reply(result->status, result->body);
}

// ----------------------------------------------------------------- transcript

ordered_json to_json(const TranscriptEntry& e) {
    ordered_json j;
    j["seq"] = e.seq;
    j["request_tag"] = e.request_tag;
    j["backend"] = e.backend;
    j["attempt"] = e.attempt;
    ordered_json messages = ordered_json::array();
    for (const auto& m : e.messages) {
        ordered_json mj;
        mj["role"] = to_string(m.role);
        mj["content"] = m.content;
        messages.push_back(std::move(mj));
    }
    j["messages"] = std::move(messages);
    j["temperature"] = e.temperature;
    j["max_tokens"] = e.max_tokens;
    j["ok"] = e.ok;
    if (e.ok) {
        j["content"] = e.content;
        j["finish_reason"] = to_string(e.finish_reason);
    } else {
        j["error_kind"] = to_string(e.error_kind.value_or(ErrorKind::Transport));
        j["error"] = e.error_message;
    }
    j["latency_ms"] = e.latency_ms;
    return j;
}

TranscriptEntry transcript_entry_from_json(const json& j) {
    TranscriptEntry e;
    e.seq = j.value("seq", std::uint64_t{0});
    e.request_tag = j.at("request_tag").get<std::string>();
    e.backend = j.at("backend").get<std::string>();
    e.attempt = j.value("attempt", 1);
    for (const auto& m : j.value("messages", json::array())) {
        e.messages.push_back({parse_role(m.value("role", "user")), m.value("content", "")});
    }
    e.temperature = j.value("temperature", 0.0);
    e.max_tokens = j.value("max_tokens", 0);
    e.ok = j.value("ok", true);
    if (e.ok) {
        e.content = j.value("content", "");
        e.finish_reason = parse_finish_reason(j.value("finish_reason", "stop"));
    } else {
        e.error_kind = parse_error_kind(j.value("error_kind", "transport"));
        e.error_message = j.value("error", "");
        e.finish_reason = FinishReason::Error;
    }
    e.latency_ms = j.value("latency_ms", 0.0);
    return e;
}

std::vector<TranscriptEntry> load_transcript(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open transcript " + path.string());
    std::vector<TranscriptEntry> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(transcript_entry_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ValidationError("transcript line " + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

ReplayBackend::ReplayBackend(std::string backend_name, const std::vector<TranscriptEntry>& transcript) {
    for (const auto& e : transcript) {
        if (e.backend == backend_name) by_tag_[e.request_tag].push_back(e);
    }
}

BackendReply ReplayBackend::complete(const ChatRequest& request) {
    std::lock_guard lock(mutex_);
    auto it = by_tag_.find(request.request_tag);
    if (it == by_tag_.end() || it->second.empty()) {
        throw LlmError(ErrorKind::ScriptExhausted, "transcript has no recorded response for '" + request.request_tag + "'");
    }
    TranscriptEntry e = std::move(it->second.front());
    it->second.pop_front();
    if (!e.ok) throw LlmError(e.error_kind.value_or(ErrorKind::Transport), e.error_message);
    return {e.content, e.finish_reason};
}

// -------------------------------------------------------------------- Gateway

struct Gateway::Slot {
    std::shared_ptr<Backend> backend;
    BackendOptions options;

    std::mutex mutex;
    std::condition_variable cv;
    int in_flight = 0;

    double tokens = 0.0;
    std::chrono::steady_clock::time_point last_refill = std::chrono::steady_clock::now();
};

Gateway::Gateway() : sleep_([](std::chrono::microseconds d) { std::this_thread::sleep_for(d); }) {}

Gateway::~Gateway() = default;

void Gateway::register_backend(const std::string& name, std::shared_ptr<Backend> backend, BackendOptions options) {
    options.policy.validate();
    if (!backend) throw ValidationError("backend '" + name + "' is null");
    auto slot = std::make_unique<Slot>();
    slot->backend = std::move(backend);
    slot->options = options;
    slot->tokens = options.burst;
    std::lock_guard lock(mutex_);
    slots_[name] = std::move(slot);
}

bool Gateway::has_backend(const std::string& name) const {
    std::lock_guard lock(mutex_);
    return slots_.contains(name);
}

std::vector<std::string> Gateway::backend_names() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> names;
    for (const auto& [name, _] : slots_) names.push_back(name);
    return names;
}

Gateway::Slot& Gateway::slot(const std::string& name) {
    std::lock_guard lock(mutex_);
    auto it = slots_.find(name);
    if (it == slots_.end()) throw LlmError(ErrorKind::Config, "unknown backend '" + name + "'");
    return *it->second;
}

void Gateway::set_transcript_path(const std::filesystem::path& path) {
    std::lock_guard lock(mutex_);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    transcript_file_.emplace(path, std::ios::app | std::ios::binary);
    if (!*transcript_file_) throw IoError("cannot open transcript " + path.string());
}

void Gateway::set_sleep_function(std::function<void(std::chrono::microseconds)> sleep) {
    std::lock_guard lock(mutex_);
    sleep_ = std::move(sleep);
}

std::vector<TranscriptEntry> Gateway::transcript() const {
    std::lock_guard lock(mutex_);
    return transcript_;
}

std::uint64_t Gateway::request_count() const {
    std::lock_guard lock(mutex_);
    return next_seq_;
}

void Gateway::record(TranscriptEntry entry) {
    std::lock_guard lock(mutex_);
    entry.seq = next_seq_++;
    if (transcript_file_) {
        *transcript_file_ << to_json(entry).dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
        transcript_file_->flush();
    }
    transcript_.push_back(std::move(entry));
}

ChatResponse Gateway::chat(const ChatRequest& request) {
    validate_request(request);
    Slot& s = slot(request.backend_name);
    const RetryPolicy& policy = s.options.policy;
    std::function<void(std::chrono::microseconds)> sleep;
    {
        std::lock_guard lock(mutex_);
        sleep = sleep_;
    }

    // Concurrency gate for the whole call, retries included.
    {
        std::unique_lock lock(s.mutex);
        s.cv.wait(lock, [&] { return s.in_flight < policy.max_parallel; });
        ++s.in_flight;
    }
    struct Release {
        Slot& s;
        ~Release() {
            {
                std::lock_guard lock(s.mutex);
                --s.in_flight;
            }
            s.cv.notify_one();
        }
    } release{s};

    for (int attempt = 1;; ++attempt) {
        if (s.options.rate_per_sec > 0) {
            for (;;) {
                std::chrono::microseconds wait{0};
                {
                    std::lock_guard lock(s.mutex);
                    const auto now = std::chrono::steady_clock::now();
                    const double elapsed = std::chrono::duration<double>(now - s.last_refill).count();
                    s.last_refill = now;
                    s.tokens = std::min(s.options.burst, s.tokens + elapsed * s.options.rate_per_sec);
                    if (s.tokens >= 1.0) {
                        s.tokens -= 1.0;
                        break;
                    }
                    wait = std::chrono::microseconds(
                        static_cast<long long>(std::ceil((1.0 - s.tokens) / s.options.rate_per_sec * 1e6)));
                }
                sleep(wait);
            }
        }

        TranscriptEntry entry;
        entry.request_tag = request.request_tag;
        entry.backend = request.backend_name;
        entry.attempt = attempt;
        entry.messages = request.messages;
        entry.temperature = request.temperature;
        entry.max_tokens = request.max_tokens;

        const auto start = std::chrono::steady_clock::now();
        try {
            BackendReply reply = s.backend->complete(request);
            if (reply.finish_reason == FinishReason::Stop && reply.content.empty()) {
                throw LlmError(ErrorKind::BadResponse, "backend returned an empty completion");
            }
            entry.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
            entry.content = reply.content;
            entry.finish_reason = reply.finish_reason;
            const double latency = entry.latency_ms;
            record(std::move(entry));
            return ChatResponse{std::move(reply.content), reply.finish_reason, latency, attempt};
        } catch (const LlmError& e) {
            entry.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
            entry.ok = false;
            entry.error_kind = e.kind();
            entry.error_message = e.what();
            entry.finish_reason = FinishReason::Error;
            record(std::move(entry));
            if (!e.retryable() || attempt >= policy.max_attempts) throw;
        }
        const double delay_ms = policy.base_delay_ms * std::pow(policy.backoff_factor, attempt - 1);
        if (delay_ms > 0) sleep(std::chrono::microseconds(static_cast<long long>(delay_ms * 1000)));
    }
}

ChatResponse ModelRef::ask(const std::string& user, const std::string& tag, const std::string& system) const {
    if (gateway == nullptr) throw LlmError(ErrorKind::Config, "model reference has no gateway");
    ChatRequest request;
    request.backend_name = backend;
    if (!system.empty()) request.messages.push_back({Role::System, system});
    request.messages.push_back({Role::User, user});
    request.temperature = temperature;
    request.max_tokens = max_tokens;
    request.request_tag = tag;
    return gateway->chat(request);
}

} // namespace psyforge::llm
