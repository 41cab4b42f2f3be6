#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyforge/error.hpp"

namespace psyforge::llm {

enum class Role { System, User, Assistant };

struct Message {
    Role role = Role::User;
    std::string content;
};

struct ChatRequest {
    std::string backend_name;
    std::vector<Message> messages;
    double temperature = 0.7;
    int max_tokens = 2048;
    /// Correlates transcript entries and replay lookups; callers build it
    /// from stage, item id and purpose so it is stable across runs.
    std::string request_tag;
};

enum class FinishReason { Stop, Length, Error };

struct ChatResponse {
    std::string content;
    FinishReason finish_reason = FinishReason::Stop;
    double latency_ms = 0.0;
    int attempt = 1;
};

struct RetryPolicy {
    int max_attempts = 3;
    double base_delay_ms = 500.0;
    double backoff_factor = 2.0;
    int max_parallel = 4;

    void validate() const;
};

enum class ErrorKind { Transport, Timeout, HttpStatus, Auth, Config, ScriptExhausted, BadResponse };

std::string_view to_string(ErrorKind kind);
ErrorKind parse_error_kind(std::string_view text);

class LlmError : public Error {
public:
    LlmError(ErrorKind kind, const std::string& message, int status = 0)
        : Error(message), kind_(kind), status_(status) {}

    ErrorKind kind() const { return kind_; }
    int status() const { return status_; }
    /// Transport hiccups, timeouts, 429/5xx and empty replies are worth
    /// retrying; auth, configuration and script exhaustion are not.
    bool retryable() const;
    /// Errors that no later request can fix. Stages stop the run on these
    /// instead of marking the item unresolved.
    bool fatal() const;

private:
    ErrorKind kind_;
    int status_;
};

struct BackendReply {
    std::string content;
    FinishReason finish_reason = FinishReason::Stop;
};

/// A chat-completion provider. Implementations throw LlmError on failure and
/// must be safe to call from several threads.
class Backend {
public:
    virtual ~Backend() = default;
    virtual BackendReply complete(const ChatRequest& request) = 0;
};

/// Deterministic backend driven by an ordered script. Each request consumes
/// the first unconsumed entry whose rule matches: "*" matches anything,
/// "tag:<text>" tests the request tag for a substring and any other rule is
/// a substring test on the last user message.
class ScriptedBackend final : public Backend {
public:
    struct Entry {
        std::string match = "*";
        std::string reply;
        /// When set the entry raises this error instead of replying.
        std::optional<ErrorKind> failure;
    };

    explicit ScriptedBackend(std::vector<Entry> script);

    /// Script file: JSON array of {"match", "reply"} or {"match", "error"}.
    static std::shared_ptr<ScriptedBackend> from_file(const std::filesystem::path& path);
    static std::vector<Entry> parse_script(const nlohmann::json& j);

    BackendReply complete(const ChatRequest& request) override;

    std::size_t calls() const;
    std::size_t remaining() const;

private:
    mutable std::mutex mutex_;
    std::vector<Entry> script_;
    std::vector<bool> consumed_;
    std::size_t calls_ = 0;
};

struct OpenAiConfig {
    std::string base_url;
    std::string model;
    std::string api_key;
    double timeout_s = 120.0;
};

/// POST {base_url}/chat/completions and read choices[0].message.content.
class OpenAiBackend final : public Backend {
public:
    explicit OpenAiBackend(OpenAiConfig config);
    BackendReply complete(const ChatRequest& request) override;

    /// Request body sent on the wire; exposed for tests.
    static nlohmann::json build_body(const OpenAiConfig& config, const ChatRequest& request);
    /// Interprets an HTTP status and body, throwing LlmError on failure.
    static BackendReply parse_reply(int status, const std::string& body);

private:
    OpenAiConfig config_;
    std::string scheme_host_port_;
    std::string path_prefix_;
};

/// One attempt as recorded in the run transcript.
struct TranscriptEntry {
    std::uint64_t seq = 0;
    std::string request_tag;
    std::string backend;
    int attempt = 1;
    std::vector<Message> messages;
    double temperature = 0.0;
    int max_tokens = 0;
    bool ok = true;
    std::string content;
    FinishReason finish_reason = FinishReason::Stop;
    std::optional<ErrorKind> error_kind;
    std::string error_message;
    double latency_ms = 0.0;
};

nlohmann::ordered_json to_json(const TranscriptEntry& entry);
TranscriptEntry transcript_entry_from_json(const nlohmann::json& j);
std::vector<TranscriptEntry> load_transcript(const std::filesystem::path& path);

/// Serves recorded attempts back in order, keyed by (backend, request_tag).
/// Makes no network calls.
class ReplayBackend final : public Backend {
public:
    ReplayBackend(std::string backend_name, const std::vector<TranscriptEntry>& transcript);
    BackendReply complete(const ChatRequest& request) override;

private:
    std::mutex mutex_;
    std::map<std::string, std::deque<TranscriptEntry>> by_tag_;
};

struct BackendOptions {
    RetryPolicy policy;
    /// Token-bucket rate limit; 0 disables it.
    double rate_per_sec = 0.0;
    double burst = 1.0;
};

/// Registry of named backends with retry, bounded parallelism, rate limiting
/// and transcript logging. Safe for concurrent use.
class Gateway {
public:
    Gateway();
    ~Gateway();
    Gateway(const Gateway&) = delete;
    Gateway& operator=(const Gateway&) = delete;

    void register_backend(const std::string& name, std::shared_ptr<Backend> backend, BackendOptions options = {});
    bool has_backend(const std::string& name) const;
    std::vector<std::string> backend_names() const;

    /// Sends the request with retries. Throws LlmError (kind Config) for an
    /// unknown backend and the last error once attempts are exhausted.
    ChatResponse chat(const ChatRequest& request);

    /// Appends every attempt to `path` as JSON lines.
    void set_transcript_path(const std::filesystem::path& path);
    std::vector<TranscriptEntry> transcript() const;
    std::uint64_t request_count() const;

    /// Replaces the sleep used between retries and by the rate limiter.
    void set_sleep_function(std::function<void(std::chrono::microseconds)> sleep);

private:
    struct Slot;

    Slot& slot(const std::string& name);
    void record(TranscriptEntry entry);

    mutable std::mutex mutex_;
    std::map<std::string, std::unique_ptr<Slot>> slots_;
    std::vector<TranscriptEntry> transcript_;
    std::optional<std::ofstream> transcript_file_;
    std::uint64_t next_seq_ = 0;
    std::function<void(std::chrono::microseconds)> sleep_;
};

/// A backend name bound to a gateway and sampling settings; this is what
/// pipeline operations receive.
struct ModelRef {
    Gateway* gateway = nullptr;
    std::string backend;
    double temperature = 0.7;
    int max_tokens = 2048;

    /// Single-turn helper: optional system message then the user message.
    ChatResponse ask(const std::string& user, const std::string& tag, const std::string& system = {}) const;
};

/// Default temperatures: generation stages sample, judging stays greedy.
inline constexpr double kGenerationTemperature = 0.7;
inline constexpr double kJudgeTemperature = 0.0;

} // namespace psyforge::llm
