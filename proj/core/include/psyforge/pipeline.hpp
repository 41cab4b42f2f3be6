#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyforge/dedup.hpp"
#include "psyforge/error.hpp"
#include "psyforge/llm.hpp"
#include "psyforge/synthesis.hpp"

namespace psyforge::pipeline {

/// Stage names in the default order.
inline constexpr std::string_view kDefaultStages[] = {"clean",   "synth_questions", "dedup", "quality_filter",
                                                      "synth_rationales", "enrich", "select", "split"};

bool is_stage_name(std::string_view name);

enum class LogLevel { Debug, Info, Warn, Error };
LogLevel parse_log_level(std::string_view text);
std::string_view to_string(LogLevel level);

struct BackendDecl {
    std::string name;
    /// scripted, openai or replay.
    std::string kind;
    std::filesystem::path script;
    std::filesystem::path transcript;
    std::string base_url;
    std::string model;
    std::string api_key_env;
    double timeout_s = 120.0;
    std::vector<std::string> roles;
    llm::RetryPolicy policy;
    double rate_per_sec = 0.0;
    double burst = 1.0;
    std::optional<double> temperature;
    int max_tokens = 2048;
};

struct PipelineParams {
    std::size_t chunk_len = 900;
    std::size_t questions_per_chunk = 5;
    dedup::DedupParams dedup;
    synthesis::OptimizeConfig optimize;
    bool substantive_filter = true;
};

/// Paths of the configured inputs. Every path is optional.
struct PipelineInputs {
    std::optional<std::filesystem::path> qa;
    std::optional<std::filesystem::path> documents;
    std::optional<std::filesystem::path> dialogues;
    std::optional<std::filesystem::path> ps;
    std::optional<std::filesystem::path> cp;
};

struct PipelineConfig {
    std::filesystem::path source;
    std::uint64_t seed = 42;
    std::size_t max_parallel = 4;
    LogLevel log_level = LogLevel::Info;
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> templates_dir;
    std::vector<std::string> stages;
    std::vector<BackendDecl> backends;
    PipelineInputs inputs;
    PipelineParams params;
    /// The parsed document, kept for the digest.
    nlohmann::json raw;

    /// Relative paths resolve against `base_dir`.
    static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
    static PipelineConfig load(const std::filesystem::path& path);

    /// Stage names, role coverage, backend fields, inputs and API keys.
    /// Throws ValidationError.
    void validate() const;

    /// SHA-256 over the config (runtime-only keys removed) and the bytes of
    /// every referenced input and script file.
    std::string digest() const;

    /// First backend declaring `role`, if any.
    const BackendDecl* backend_for(std::string_view role) const;
    /// Backends holding "selector" or "selector_N", ordered by N then name.
    std::vector<const BackendDecl*> selectors() const;
};

/// Roles a stage needs under `config`.
std::vector<std::string> required_roles(std::string_view stage, const PipelineConfig& config);

/// Registers every declared backend. With `replay` set, each backend is
/// served from the transcript instead.
void register_backends(llm::Gateway& gateway, const PipelineConfig& config,
                       const std::optional<std::filesystem::path>& replay = std::nullopt);

/// JSON-lines logger writing to a stream and optionally a file.
class Logger {
public:
    Logger(LogLevel level, std::ostream* stream);
    void set_file(const std::filesystem::path& path);
    void log(LogLevel level, std::string_view event, nlohmann::ordered_json fields = nlohmann::ordered_json::object());

private:
    LogLevel level_;
    std::ostream* stream_;
    std::unique_ptr<std::ofstream> file_;
    std::mutex mutex_;
};

/// Stage failure after which a checkpoint has been written.
class StageFailure : public Error {
public:
    StageFailure(std::string stage, const std::string& message)
        : Error("stage " + stage + " failed: " + message), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct Checkpoint {
    std::string config_digest;
    std::vector<std::string> completed_stages;
    std::optional<std::string> stage;
    std::vector<std::string> processed_ids;
    std::optional<std::filesystem::path> partial_outputs;
    /// Reports of completed stages, replayed into the final run report.
    nlohmann::ordered_json stage_reports = nlohmann::ordered_json::object();

    static std::optional<Checkpoint> load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
};

struct RunOptions {
    bool resume = false;
    std::optional<std::filesystem::path> replay_transcript;
    /// Stops (as a stage failure) after this many items; simulates a kill.
    std::optional<std::size_t> stop_after;
    std::ostream* log_stream = nullptr;
};

struct RunReport {
    /// Stage name to counts, in execution order. Deterministic.
    nlohmann::ordered_json stages = nlohmann::ordered_json::object();
    /// Items processed by this invocation (not persisted).
    std::size_t new_items = 0;
};

/// Runs the configured stages in order with checkpointing. Writes
/// run_report.json into out_dir. Throws ValidationError for bad config or
/// a refused resume, StageFailure when a stage fails.
RunReport run_pipeline(const PipelineConfig& config, const RunOptions& options);

/// Files under out_dir that vary between runs (logs, transcript,
/// checkpoint) and are excluded from golden comparisons.
bool is_volatile_artifact(const std::filesystem::path& relative);

} // namespace psyforge::pipeline
