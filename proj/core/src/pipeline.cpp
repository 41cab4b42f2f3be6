#include "psyforge/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "psyforge/corpus.hpp"
#include "psyforge/parallel.hpp"
#include "psyforge/prompts.hpp"
#include "psyforge/selection.hpp"
#include "psyforge/textclean.hpp"
#include "psyforge/utf8.hpp"

namespace psyforge::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

bool is_stage_name(std::string_view name) {
    return std::find(std::begin(kDefaultStages), std::end(kDefaultStages), name) != std::end(kDefaultStages);
}

LogLevel parse_log_level(std::string_view text) {
    if (text == "debug") return LogLevel::Debug;
    if (text == "info") return LogLevel::Info;
    if (text == "warn" || text == "warning") return LogLevel::Warn;
    if (text == "error") return LogLevel::Error;
    throw ValidationError("unknown log level '" + std::string(text) + "' (expected debug, info, warn or error)");
}

std::string_view to_string(LogLevel level) {
    switch (level) {
    case LogLevel::Debug: return "debug";
    case LogLevel::Info: return "info";
    case LogLevel::Warn: return "warn";
    case LogLevel::Error: return "error";
    }
    return "info";
}

// ----------------------------------------------------------------- config

namespace {

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
    if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ValidationError(where + ": unknown key '" + key + "'");
        }
    }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
    const auto it = j.find(key);
    if (it == j.end() || it->is_null()) return fallback;
    try {
        return it->get<T>();
    } catch (const json::exception&) {
        throw ValidationError(where + "." + key + " has the wrong type");
    }
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

std::optional<fs::path> optional_path(const json& j, const char* key, const fs::path& base) {
    const auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    if (!it->is_string()) throw ValidationError(std::string("path '") + key + "' must be a string");
    return resolve(base, it->get<std::string>());
}

bool is_role_name(std::string_view role) {
    if (role == "generator" || role == "judge" || role == "ranker" || role == "selector") return true;
    if (!role.starts_with("selector_") || role.size() == 9) return false;
    return std::all_of(role.begin() + 9, role.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
}

std::string default_key_env(const std::string& name) {
    std::string out = "PSYFORGE_KEY_";
    for (char c : name) out += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::toupper(c)) : '_';
    return out;
}

std::string file_digest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return "missing";
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return sha256_hex(buffer.str());
}

} // namespace

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base_dir) {
    check_keys(j, {"seed", "max_parallel", "log_level", "out_dir", "templates_dir", "stages", "backends", "inputs",
                   "params"},
               "config");
    PipelineConfig c;
    c.raw = j;
    c.seed = get_or<std::uint64_t>(j, "seed", 42, "config");
    c.max_parallel = get_or<std::size_t>(j, "max_parallel", 4, "config");
    c.log_level = parse_log_level(get_or<std::string>(j, "log_level", "info", "config"));
    c.out_dir = resolve(base_dir, get_or<std::string>(j, "out_dir", "out", "config"));
    c.templates_dir = optional_path(j, "templates_dir", base_dir);

    if (const auto it = j.find("stages"); it != j.end()) {
        if (!it->is_array()) throw ValidationError("config.stages must be an array of stage names");
        for (const auto& s : *it) {
            if (!s.is_string()) throw ValidationError("config.stages must be an array of stage names");
            c.stages.push_back(s.get<std::string>());
        }
    } else {
        c.stages.assign(std::begin(kDefaultStages), std::end(kDefaultStages));
    }

    if (const auto it = j.find("backends"); it != j.end()) {
        if (!it->is_array()) throw ValidationError("config.backends must be an array");
        for (const auto& b : *it) {
            const std::string where = "backend '" + b.value("name", std::string("?")) + "'";
            check_keys(b, {"name", "kind", "script", "transcript", "base_url", "model", "api_key_env", "timeout_s",
                           "roles", "policy", "rate_per_sec", "burst", "temperature", "max_tokens"},
                       where);
            BackendDecl d;
            d.name = get_or<std::string>(b, "name", "", where);
            d.kind = get_or<std::string>(b, "kind", "openai", where);
            if (auto p = optional_path(b, "script", base_dir)) d.script = *p;
            if (auto p = optional_path(b, "transcript", base_dir)) d.transcript = *p;
            d.base_url = get_or<std::string>(b, "base_url", "", where);
            d.model = get_or<std::string>(b, "model", "", where);
            d.api_key_env = get_or<std::string>(b, "api_key_env", default_key_env(d.name), where);
            d.timeout_s = get_or<double>(b, "timeout_s", 120.0, where);
            d.roles = get_or<std::vector<std::string>>(b, "roles", {}, where);
            if (const auto p = b.find("policy"); p != b.end()) {
                check_keys(*p, {"max_attempts", "base_delay_ms", "backoff_factor", "max_parallel"}, where + ".policy");
                d.policy.max_attempts = get_or<int>(*p, "max_attempts", d.policy.max_attempts, where);
                d.policy.base_delay_ms = get_or<double>(*p, "base_delay_ms", d.policy.base_delay_ms, where);
                d.policy.backoff_factor = get_or<double>(*p, "backoff_factor", d.policy.backoff_factor, where);
                d.policy.max_parallel = get_or<int>(*p, "max_parallel", d.policy.max_parallel, where);
            }
            d.rate_per_sec = get_or<double>(b, "rate_per_sec", 0.0, where);
            d.burst = get_or<double>(b, "burst", 1.0, where);
            if (b.contains("temperature") && !b.at("temperature").is_null()) {
                d.temperature = get_or<double>(b, "temperature", 0.0, where);
            }
            d.max_tokens = get_or<int>(b, "max_tokens", 2048, where);
            c.backends.push_back(std::move(d));
        }
    }

    if (const auto it = j.find("inputs"); it != j.end()) {
        check_keys(*it, {"qa", "documents", "dialogues", "ps", "cp"}, "config.inputs");
        c.inputs.qa = optional_path(*it, "qa", base_dir);
        c.inputs.documents = optional_path(*it, "documents", base_dir);
        c.inputs.dialogues = optional_path(*it, "dialogues", base_dir);
        c.inputs.ps = optional_path(*it, "ps", base_dir);
        c.inputs.cp = optional_path(*it, "cp", base_dir);
    }

    c.params.dedup.seed = c.seed;
    if (const auto it = j.find("params"); it != j.end()) {
        const json& p = *it;
        check_keys(p, {"chunk_len", "questions_per_chunk", "dedup", "rounds", "max_regen", "keep_policy",
                       "substantive_filter"},
                   "config.params");
        c.params.chunk_len = get_or<std::size_t>(p, "chunk_len", c.params.chunk_len, "params");
        c.params.questions_per_chunk =
            get_or<std::size_t>(p, "questions_per_chunk", c.params.questions_per_chunk, "params");
        c.params.optimize.rounds = get_or<int>(p, "rounds", c.params.optimize.rounds, "params");
        c.params.optimize.max_regen = get_or<int>(p, "max_regen", c.params.optimize.max_regen, "params");
        c.params.optimize.keep_policy = synthesis::parse_keep_policy(get_or<std::string>(
            p, "keep_policy", std::string(synthesis::to_string(c.params.optimize.keep_policy)), "params"));
        c.params.substantive_filter = get_or<bool>(p, "substantive_filter", true, "params");
        if (const auto d = p.find("dedup"); d != p.end()) {
            check_keys(*d, {"k", "perms", "bands", "rows", "threshold", "seed", "rank_max_chars"}, "params.dedup");
            auto& dp = c.params.dedup;
            dp.k = get_or<std::size_t>(*d, "k", dp.k, "params.dedup");
            dp.num_perms = get_or<std::size_t>(*d, "perms", dp.num_perms, "params.dedup");
            dp.bands = get_or<std::size_t>(*d, "bands", dp.bands, "params.dedup");
            dp.rows = get_or<std::size_t>(*d, "rows", dp.rows, "params.dedup");
            dp.threshold = get_or<double>(*d, "threshold", dp.threshold, "params.dedup");
            dp.seed = get_or<std::uint64_t>(*d, "seed", dp.seed, "params.dedup");
            dp.rank_max_chars = get_or<std::size_t>(*d, "rank_max_chars", dp.rank_max_chars, "params.dedup");
        }
    }
    return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("config " + path.string() + ": " + e.what());
    }
    auto config = from_json(j, fs::absolute(path).parent_path());
    config.source = path;
    return config;
}

const BackendDecl* PipelineConfig::backend_for(std::string_view role) const {
    for (const auto& b : backends) {
        if (std::find(b.roles.begin(), b.roles.end(), role) != b.roles.end()) return &b;
    }
    return nullptr;
}

std::vector<const BackendDecl*> PipelineConfig::selectors() const {
    std::vector<std::pair<std::pair<long, std::string>, const BackendDecl*>> found;
    for (const auto& b : backends) {
        for (const auto& role : b.roles) {
            if (role == "selector") {
                found.push_back({{0, b.name}, &b});
                break;
            }
            if (role.starts_with("selector_")) {
                found.push_back({{std::stol(role.substr(9)), b.name}, &b});
                break;
            }
        }
    }
    std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<const BackendDecl*> out;
    for (const auto& [_, decl] : found) out.push_back(decl);
    return out;
}

std::vector<std::string> required_roles(std::string_view stage, const PipelineConfig& config) {
    const bool dialogues = config.inputs.dialogues.has_value();
    if (stage == "clean") return dialogues && config.params.substantive_filter ? std::vector<std::string>{"judge"}
                                                                               : std::vector<std::string>{};
    if (stage == "synth_questions") {
        return config.inputs.documents ? std::vector<std::string>{"generator"} : std::vector<std::string>{};
    }
    if (stage == "dedup") return {"ranker"};
    if (stage == "quality_filter") return {"judge"};
    if (stage == "synth_rationales") {
        if (config.params.optimize.keep_policy == synthesis::KeepPolicy::LlmJudged) return {"generator", "judge"};
        return {"generator"};
    }
    if (stage == "enrich") return dialogues ? std::vector<std::string>{"generator"} : std::vector<std::string>{};
    if (stage == "select") return {"selector"};
    return {};
}

void PipelineConfig::validate() const {
    if (max_parallel < 1) throw ValidationError("max_parallel must be >= 1");
    if (stages.empty()) throw ValidationError("config.stages is empty");
    std::set<std::string> seen_stages;
    for (const auto& s : stages) {
        if (!is_stage_name(s)) throw ValidationError("unknown stage '" + s + "'");
        if (!seen_stages.insert(s).second) throw ValidationError("stage '" + s + "' listed twice");
    }

    std::set<std::string> names;
    for (const auto& b : backends) {
        if (b.name.empty()) throw ValidationError("every backend needs a name");
        if (!names.insert(b.name).second) throw ValidationError("backend '" + b.name + "' declared twice");
        const std::string where = "backend '" + b.name + "'";
        if (b.kind == "scripted") {
            if (b.script.empty()) throw ValidationError(where + ": scripted backends need a script");
            if (!fs::exists(b.script)) throw ValidationError(where + ": script " + b.script.string() + " not found");
        } else if (b.kind == "openai") {
            if (b.base_url.empty() || b.model.empty()) {
                throw ValidationError(where + ": openai backends need base_url and model");
            }
        } else if (b.kind == "replay") {
            if (b.transcript.empty() || !fs::exists(b.transcript)) {
                throw ValidationError(where + ": replay backends need an existing transcript");
            }
        } else {
            throw ValidationError(where + ": unknown kind '" + b.kind + "' (expected scripted, openai or replay)");
        }
        for (const auto& role : b.roles) {
            if (!is_role_name(role)) throw ValidationError(where + ": unknown role '" + role + "'");
        }
        try {
            b.policy.validate();
        } catch (const ValidationError& e) {
            throw ValidationError(where + ": " + e.what());
        }
        if (b.rate_per_sec < 0) throw ValidationError(where + ": rate_per_sec must be >= 0");
    }

    for (const auto& stage : stages) {
        for (const auto& role : required_roles(stage, *this)) {
            const bool covered = role == "selector" ? !selectors().empty() : backend_for(role) != nullptr;
            if (!covered) {
                throw ValidationError("stage '" + stage + "' needs a backend with role '" + role + "'");
            }
        }
    }

    for (const auto& [label, path] : {std::pair{"qa", inputs.qa}, std::pair{"documents", inputs.documents},
                                      std::pair{"dialogues", inputs.dialogues}, std::pair{"ps", inputs.ps},
                                      std::pair{"cp", inputs.cp}}) {
        if (path && !fs::exists(*path)) {
            throw ValidationError(std::string("input '") + label + "' not found: " + path->string());
        }
    }
    if (templates_dir && !fs::is_directory(*templates_dir)) {
        throw ValidationError("templates_dir " + templates_dir->string() + " is not a directory");
    }
    if (params.chunk_len < 200) throw ValidationError("params.chunk_len must be >= 200");
    if (params.questions_per_chunk < 1) throw ValidationError("params.questions_per_chunk must be >= 1");
    params.dedup.validate();
    params.optimize.validate();
}

std::string PipelineConfig::digest() const {
    json config = raw;
    if (config.is_object()) {
        config.erase("max_parallel");
        config.erase("log_level");
    }
    config["seed"] = seed;

    json files = json::object();
    auto add = [&](const std::string& key, const std::optional<fs::path>& path) {
        if (path) files[key] = file_digest(*path);
    };
    add("inputs.qa", inputs.qa);
    add("inputs.documents", inputs.documents);
    add("inputs.dialogues", inputs.dialogues);
    add("inputs.ps", inputs.ps);
    add("inputs.cp", inputs.cp);
    for (const auto& b : backends) {
        if (!b.script.empty()) add("script." + b.name, b.script);
        if (!b.transcript.empty()) add("transcript." + b.name, b.transcript);
    }
    if (templates_dir && fs::is_directory(*templates_dir)) {
        std::vector<fs::path> entries;
        for (const auto& e : fs::directory_iterator(*templates_dir)) {
            if (e.path().extension() == ".txt") entries.push_back(e.path());
        }
        std::sort(entries.begin(), entries.end());
        for (const auto& p : entries) add("template." + p.stem().string(), p);
    }
    return sha256_hex(json{{"config", config}, {"files", files}}.dump());
}

// --------------------------------------------------------------- backends

void register_backends(llm::Gateway& gateway, const PipelineConfig& config,
                       const std::optional<fs::path>& replay) {
    std::vector<llm::TranscriptEntry> replay_entries;
    if (replay) {
        if (!fs::exists(*replay)) throw ValidationError("transcript " + replay->string() + " not found");
        replay_entries = llm::load_transcript(*replay);
    }
    for (const auto& b : config.backends) {
        llm::BackendOptions options{b.policy, b.rate_per_sec, b.burst};
        std::shared_ptr<llm::Backend> backend;
        if (replay) {
            backend = std::make_shared<llm::ReplayBackend>(b.name, replay_entries);
        } else if (b.kind == "scripted") {
            backend = llm::ScriptedBackend::from_file(b.script);
        } else if (b.kind == "replay") {
            backend = std::make_shared<llm::ReplayBackend>(b.name, llm::load_transcript(b.transcript));
        } else {
            const char* key = std::getenv(b.api_key_env.c_str());
            if (key == nullptr || *key == '\0') {
                throw ValidationError("backend '" + b.name + "': environment variable " + b.api_key_env +
                                      " is not set");
            }
            backend = std::make_shared<llm::OpenAiBackend>(llm::OpenAiConfig{b.base_url, b.model, key, b.timeout_s});
        }
        gateway.register_backend(b.name, std::move(backend), options);
    }
}

// ----------------------------------------------------------------- logger

Logger::Logger(LogLevel level, std::ostream* stream) : level_(level), stream_(stream) {}

void Logger::set_file(const fs::path& path) {
    std::lock_guard lock(mutex_);
    file_ = std::make_unique<std::ofstream>(path, std::ios::app);
    if (!*file_) throw IoError("cannot open log file " + path.string());
}

void Logger::log(LogLevel level, std::string_view event, ordered_json fields) {
    if (level < level_) return;
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%S", &tm);
    char full[40];
    std::snprintf(full, sizeof full, "%s.%03dZ", stamp, static_cast<int>(ms));

    ordered_json line;
    line["ts"] = full;
    line["level"] = to_string(level);
    line["event"] = event;
    for (auto& [key, value] : fields.items()) line[key] = value;
    const std::string text = line.dump(-1, ' ', false, json::error_handler_t::replace);

    std::lock_guard lock(mutex_);
    if (stream_ != nullptr) *stream_ << text << '\n' << std::flush;
    if (file_) *file_ << text << '\n' << std::flush;
}

// ------------------------------------------------------------- checkpoint

std::optional<Checkpoint> Checkpoint::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) return std::nullopt;
    ordered_json j;
    try {
        j = ordered_json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("checkpoint " + path.string() + " is corrupt: " + e.what());
    }
    Checkpoint c;
    c.config_digest = j.value("config_digest", std::string());
    c.completed_stages = j.value("completed_stages", std::vector<std::string>{});
    if (j.contains("stage") && j.at("stage").is_string()) c.stage = j.at("stage").get<std::string>();
    c.processed_ids = j.value("processed_ids", std::vector<std::string>{});
    if (j.contains("partial_outputs") && j.at("partial_outputs").is_string()) {
        c.partial_outputs = fs::path(j.at("partial_outputs").get<std::string>());
    }
    if (j.contains("stage_reports")) c.stage_reports = j.at("stage_reports");
    return c;
}

void Checkpoint::save(const fs::path& path) const {
    ordered_json j;
    j["config_digest"] = config_digest;
    j["completed_stages"] = completed_stages;
    j["stage"] = stage ? ordered_json(*stage) : ordered_json(nullptr);
    j["processed_ids"] = processed_ids;
    j["partial_outputs"] = partial_outputs ? ordered_json(partial_outputs->string()) : ordered_json(nullptr);
    j["stage_reports"] = stage_reports;
    const fs::path tmp = path.string() + ".tmp";
    write_json_file(j, tmp);
    fs::rename(tmp, path);
}

bool is_volatile_artifact(const fs::path& relative) {
    const std::string first = relative.begin() == relative.end() ? std::string() : relative.begin()->string();
    const std::string name = relative.filename().string();
    return first == "logs" || name == "checkpoint.json" || name.ends_with(".partial.jsonl") || name.ends_with(".tmp");
}

// ----------------------------------------------------------------- stages

namespace {

class StopRequested : public Error {
public:
    using Error::Error;
};

/// Latest artifact of each data stream as stages advance.
struct Streams {
    std::optional<fs::path> qa;
    std::optional<fs::path> documents;
    std::optional<fs::path> dialogues;
    std::optional<fs::path> remaining;
    std::optional<fs::path> challenging;
};

void advance(Streams& s, std::string_view stage, const fs::path& out) {
    auto file = [&](const char* name) { return out / (std::string(stage) + "." + name); };
    if (stage == "clean") {
        if (s.qa) s.qa = file("qa.jsonl");
        if (s.documents) s.documents = file("documents.jsonl");
        if (s.dialogues) s.dialogues = file("dialogues.jsonl");
    } else if (stage == "synth_questions") {
        if (s.qa || s.documents) s.qa = file("qa.jsonl");
    } else if (stage == "dedup" || stage == "quality_filter" || stage == "synth_rationales") {
        if (s.qa) s.qa = file("qa.jsonl");
    } else if (stage == "enrich") {
        if (s.dialogues) s.dialogues = file("dialogues.jsonl");
    } else if (stage == "select") {
        if (s.qa) {
            s.remaining = file("remaining.jsonl");
            s.challenging = file("challenging.jsonl");
        }
    }
}

/// Stage results live as plain json; audit rows are ordered_json.
ordered_json ord(const json& j) { return ordered_json::parse(j.dump()); }

ordered_json counts(std::size_t in, std::size_t out, std::size_t dropped, std::size_t pruned, std::size_t unresolved) {
    ordered_json j;
    j["in"] = in;
    j["out"] = out;
    j["dropped"] = dropped;
    j["pruned"] = pruned;
    j["unresolved"] = unresolved;
    return j;
}


/// Shared state of one pipeline invocation.
struct Context {
    const PipelineConfig& config;
    const RunOptions& options;
    llm::Gateway& gateway;
    PromptTemplates templates;
    Logger& log;
    fs::path out;
    Checkpoint& checkpoint;
    fs::path checkpoint_path;
    std::atomic<std::size_t> new_items{0};
    std::atomic<std::size_t> budget_used{0};

    std::optional<llm::ModelRef> model(std::string_view role) const {
        const BackendDecl* decl = config.backend_for(role);
        if (decl == nullptr) return std::nullopt;
        return make_ref(*decl, role == "generator" ? llm::kGenerationTemperature : llm::kJudgeTemperature);
    }

    llm::ModelRef make_ref(const BackendDecl& decl, double default_temperature) const {
        return {&gateway, decl.name, decl.temperature.value_or(default_temperature), decl.max_tokens};
    }

    llm::ModelRef require(std::string_view role) const {
        auto ref = model(role);
        if (!ref) throw ValidationError("no backend with role '" + std::string(role) + "'");
        return *ref;
    }

    fs::path file(std::string_view stage, std::string_view name) const {
        return out / (std::string(stage) + "." + std::string(name));
    }
};

/// Runs fn for each id not yet present in the stage's partial file and
/// returns every result in id order. Results are appended to the partial
/// file as they complete so an interrupted stage can resume.
std::vector<json> run_items(Context& ctx, const std::string& stage, const std::vector<std::string>& ids,
                            const std::function<json(std::size_t)>& fn) {
    const fs::path partial = ctx.file(stage, "partial.jsonl");
    std::map<std::string, json> done;
    if (ctx.checkpoint.stage == stage && fs::exists(partial)) {
        std::ifstream in(partial);
        std::string line;
        while (std::getline(in, line)) {
            // A torn final line from a hard kill is simply redone.
            const json j = json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.is_object() || !j.contains("id") || !j.contains("result")) continue;
            done[j.at("id").get<std::string>()] = j.at("result");
        }
    } else {
        fs::remove(partial);
    }

    std::set<std::string> processed;
    for (const auto& [id, _] : done) processed.insert(id);
    ctx.checkpoint.stage = stage;
    ctx.checkpoint.partial_outputs = fs::path(partial.filename());
    ctx.checkpoint.processed_ids.assign(processed.begin(), processed.end());
    ctx.checkpoint.save(ctx.checkpoint_path);

    std::vector<json> results(ids.size());
    std::vector<std::size_t> pending;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (const auto it = done.find(ids[i]); it != done.end()) {
            results[i] = it->second;
        } else {
            pending.push_back(i);
        }
    }
    if (!done.empty()) {
        ctx.log.log(LogLevel::Info, "stage_resume",
                    {{"stage", stage}, {"already_processed", done.size()}, {"pending", pending.size()}});
    }

    std::ofstream sink(partial, std::ios::app);
    if (!sink) throw IoError("cannot open " + partial.string());
    std::mutex sink_mutex;
    try {
        parallel_for(pending.size(), ctx.config.max_parallel, [&](std::size_t k) {
            const std::size_t i = pending[k];
            if (ctx.options.stop_after && ctx.budget_used.fetch_add(1) >= *ctx.options.stop_after) {
                throw StopRequested("stopped after " + std::to_string(*ctx.options.stop_after) + " items");
            }
            const json result = fn(i);
            const std::string line = json{{"id", ids[i]}, {"result", result}}.dump(-1, ' ', false,
                                                                                   json::error_handler_t::replace);
            std::lock_guard lock(sink_mutex);
            sink << line << '\n' << std::flush;
            // Round-trip so fresh and resumed results are identical values.
            results[i] = json::parse(line).at("result");
            processed.insert(ids[i]);
            ++ctx.new_items;
            ctx.log.log(LogLevel::Debug, "item_done", {{"stage", stage}, {"id", ids[i]}});
        });
    } catch (...) {
        ctx.checkpoint.processed_ids.assign(processed.begin(), processed.end());
        ctx.checkpoint.save(ctx.checkpoint_path);
        throw;
    }
    ctx.checkpoint.processed_ids.assign(processed.begin(), processed.end());
    return results;
}

std::vector<std::string> ids_of(const std::vector<QAPair>& records) {
    std::vector<std::string> ids;
    ids.reserve(records.size());
    for (const auto& r : records) ids.push_back(r.id);
    return ids;
}

json error_result(const llm::LlmError& e) {
    if (e.fatal()) throw;
    return {{"status", "unresolved"}, {"error", e.what()}};
}

// clean --------------------------------------------------------------------

ordered_json run_clean(Context& ctx, const Streams& in, const Streams& next) {
    textclean::CleanReport totals;
    std::vector<ordered_json> dropped;
    std::vector<ordered_json> unresolved;
    std::size_t n_in = 0;
    std::size_t n_out = 0;

    auto clean_field = [&](std::string& text) {
        auto r = textclean::clean_text(text);
        totals.merge(r.report);
        text = std::move(r.text);
    };
    auto drop = [&](const std::string& id, const char* kind, const std::string& reason) {
        dropped.push_back(ordered_json{{"id", id}, {"kind", kind}, {"reason", reason}});
    };

    if (in.qa) {
        std::vector<QAPair> kept;
        for (auto qa : load_qa_jsonl(*in.qa)) {
            ++n_in;
            clean_field(qa.question);
            for (auto& [_, text] : qa.options) clean_field(text);
            clean_field(qa.reference_answer);
            try {
                validate(qa);
                if (utf8::trim(qa.question).empty()) throw ValidationError("question is empty after cleaning");
                kept.push_back(std::move(qa));
            } catch (const ValidationError& e) {
                drop(qa.id, "qa", e.what());
            }
        }
        n_out += kept.size();
        save_jsonl(kept, *next.qa);
    }

    if (in.documents) {
        std::vector<ordered_json> kept;
        for (const auto& row : read_json_lines(*in.documents)) {
            ++n_in;
            auto doc = synthesis::chunk_from_json(row);
            if (doc.text) {
                clean_field(*doc.text);
                if (utf8::trim(*doc.text).empty()) {
                    drop(doc.id, "document", "text is empty after cleaning");
                    continue;
                }
            }
            kept.push_back(synthesis::to_json(doc));
        }
        n_out += kept.size();
        write_json_lines(kept, *next.documents);
    }

    std::size_t substantive_dropped = 0;
    if (in.dialogues) {
        std::vector<DialogueSession> candidates;
        for (auto session : load_dialogue_jsonl(*in.dialogues)) {
            ++n_in;
            for (auto& turn : session.turns) clean_field(turn.content);
            const bool empty_turn = std::any_of(session.turns.begin(), session.turns.end(),
                                                [](const Turn& t) { return utf8::trim(t.content).empty(); });
            if (empty_turn) {
                drop(session.id, "dialogue", "turn is empty after cleaning");
                continue;
            }
            candidates.push_back(std::move(session));
        }

        std::vector<DialogueSession> kept;
        if (ctx.config.params.substantive_filter) {
            const auto judge = ctx.require("judge");
            std::vector<std::string> ids;
            for (const auto& s : candidates) ids.push_back(s.id);
            const auto results = run_items(ctx, "clean", ids, [&](std::size_t i) {
                const auto v = textclean::filter_substantive(candidates[i], judge,
                                                             ctx.templates.get("substantive_filter"));
                return json{{"verdict", textclean::to_string(v.kind)}, {"reason", v.reason}};
            });
            for (std::size_t i = 0; i < candidates.size(); ++i) {
                const std::string verdict = results[i].at("verdict");
                const std::string reason = results[i].at("reason");
                if (verdict == "keep") {
                    kept.push_back(candidates[i]);
                } else if (verdict == "drop") {
                    ++substantive_dropped;
                    drop(candidates[i].id, "dialogue", "not substantive: " + reason);
                } else {
                    unresolved.push_back(ordered_json{{"id", candidates[i].id}, {"reason", reason}});
                }
            }
        } else {
            kept = std::move(candidates);
        }
        n_out += kept.size();
        save_jsonl(kept, *next.dialogues);
    }

    write_json_lines(dropped, ctx.file("clean", "dropped.jsonl"));
    write_json_lines(unresolved, ctx.file("clean", "unresolved.jsonl"));
    auto report = counts(n_in, n_out, dropped.size(), 0, unresolved.size());
    report["substantive_dropped"] = substantive_dropped;
    report["removals"] = to_json(totals)["removals"];
    return report;
}

// synth_questions ----------------------------------------------------------

ordered_json run_synth_questions(Context& ctx, const Streams& in, const Streams& next) {
    std::vector<QAPair> records;
    if (in.qa) records = load_qa_jsonl(*in.qa);
    const std::size_t passthrough = records.size();

    std::vector<synthesis::SourceChunk> chunks;
    if (in.documents) {
        for (const auto& row : read_json_lines(*in.documents)) {
            const auto doc = synthesis::chunk_from_json(row);
            if (!doc.text) {
                chunks.push_back(doc);
                continue;
            }
            const auto pieces = synthesis::segment_chunks(*doc.text, ctx.config.params.chunk_len);
            for (std::size_t k = 0; k < pieces.size(); ++k) {
                chunks.push_back({doc.id + "-c" + std::to_string(k + 1), pieces[k], doc.subfield});
            }
        }
    }

    std::size_t generated = 0;
    std::size_t skipped = 0;
    std::size_t warnings = 0;
    std::size_t unresolved = 0;
    std::vector<ordered_json> audit;
    if (!chunks.empty()) {
        const auto generator = ctx.require("generator");
        std::vector<std::string> ids;
        for (const auto& c : chunks) ids.push_back(c.id);
        const auto results = run_items(ctx, "synth_questions", ids, [&](std::size_t i) -> json {
            try {
                const auto g = synthesis::generate_questions(chunks[i], ctx.config.params.questions_per_chunk,
                                                             generator, ctx.templates);
                json pairs = json::array();
                for (const auto& qa : g.pairs) pairs.push_back(json::parse(to_json(qa).dump()));
                return {{"status", "ok"}, {"pairs", pairs}, {"skipped", g.skipped}, {"warning", g.warning}};
            } catch (const llm::LlmError& e) {
                return error_result(e);
            }
        });
        for (std::size_t i = 0; i < chunks.size(); ++i) {
            const json& r = results[i];
            ordered_json row;
            row["chunk"] = chunks[i].id;
            row["status"] = r.at("status");
            if (r.at("status") == "ok") {
                std::vector<std::string> made;
                for (const auto& p : r.at("pairs")) {
                    records.push_back(qa_from_json(p));
                    made.push_back(records.back().id);
                }
                generated += made.size();
                skipped += r.at("skipped").get<std::size_t>();
                if (r.at("warning").get<bool>()) {
                    ++warnings;
                    ctx.log.log(LogLevel::Warn, "no_questions_parsed", {{"chunk", chunks[i].id}});
                }
                row["generated"] = made;
                row["skipped"] = r.at("skipped");
            } else {
                ++unresolved;
                row["error"] = r.at("error");
            }
            audit.push_back(std::move(row));
        }
    }

    if (next.qa) save_jsonl(records, *next.qa);
    write_json_lines(audit, ctx.file("synth_questions", "chunks.jsonl"));
    auto report = counts(passthrough + chunks.size(), passthrough + chunks.size() - unresolved, 0, 0, unresolved);
    report["passthrough"] = passthrough;
    report["chunks"] = chunks.size();
    report["generated"] = generated;
    report["skipped_items"] = skipped;
    report["warnings"] = warnings;
    return report;
}

// dedup --------------------------------------------------------------------

ordered_json run_dedup(Context& ctx, const Streams& in, const Streams& next) {
    if (!in.qa) return counts(0, 0, 0, 0, 0);
    const auto records = load_qa_jsonl(*in.qa);
    const auto& params = ctx.config.params.dedup;
    std::map<std::string, QAPair> by_id;
    for (const auto& qa : records) by_id.emplace(qa.id, qa);
    const auto clusters =
        dedup::lsh_cluster(dedup::signatures_for(records, params), params.bands, params.rows, params.threshold);

    std::vector<std::size_t> multi;
    std::vector<std::string> ids;
    for (std::size_t c = 0; c < clusters.size(); ++c) {
        if (clusters[c].size() < 2) continue;
        multi.push_back(c);
        ids.push_back(clusters[c].front());
    }
    const auto ranker = ctx.require("ranker");
    const auto results = run_items(ctx, "dedup", ids, [&](std::size_t i) {
        const auto rep = dedup::select_representative(clusters[multi[i]], by_id, &ranker,
                                                      ctx.templates.get("rank_duplicates"), params.rank_max_chars);
        return json{{"survivor", rep.id}, {"fallback", rep.fallback}, {"note", rep.note}};
    });

    std::vector<dedup::ClusterAudit> audits;
    std::set<std::string> keep;
    std::size_t fallbacks = 0;
    std::size_t k = 0;
    for (std::size_t c = 0; c < clusters.size(); ++c) {
        dedup::ClusterAudit audit;
        if (clusters[c].size() < 2) {
            audit.survivor = clusters[c].front();
        } else {
            const json& r = results[k++];
            audit.survivor = r.at("survivor");
            audit.fallback = r.at("fallback");
            fallbacks += audit.fallback;
        }
        for (const auto& id : clusters[c]) {
            if (id != audit.survivor) audit.absorbed.push_back(id);
        }
        keep.insert(audit.survivor);
        audits.push_back(std::move(audit));
    }
    std::vector<QAPair> survivors;
    for (const auto& qa : records) {
        if (keep.contains(qa.id)) survivors.push_back(qa);
    }
    save_jsonl(survivors, *next.qa);
    write_json_file(dedup::clusters_to_json(audits), ctx.file("dedup", "clusters.json"));
    auto report = counts(records.size(), survivors.size(), records.size() - survivors.size(), 0, 0);
    report["clusters"] = multi.size();
    report["ranking_fallbacks"] = fallbacks;
    return report;
}

// quality_filter -----------------------------------------------------------

ordered_json run_quality_filter(Context& ctx, const Streams& in, const Streams& next) {
    if (!in.qa) return counts(0, 0, 0, 0, 0);
    const auto records = load_qa_jsonl(*in.qa);
    // Only synthesised questions are screened; curated bank items pass.
    std::vector<std::size_t> targets;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].source_type == SourceType::I || records[i].source_type == SourceType::III) {
            targets.push_back(i);
            ids.push_back(records[i].id);
        }
    }
    const auto judge = ctx.require("judge");
    const auto results = run_items(ctx, "quality_filter", ids, [&](std::size_t i) {
        const auto v = synthesis::quality_filter(records[targets[i]], judge, ctx.templates);
        return json{{"verdict", textclean::to_string(v.kind)},
                    {"reason", synthesis::to_string(v.reason)},
                    {"detail", v.detail}};
    });

    std::map<std::size_t, const json*> verdict_of;
    for (std::size_t k = 0; k < targets.size(); ++k) verdict_of[targets[k]] = &results[k];
    std::vector<QAPair> kept;
    std::vector<ordered_json> dropped;
    std::vector<ordered_json> unresolved;
    ordered_json reasons = ordered_json::object();
    for (auto reason : {synthesis::DropReason::IncompleteInformation, synthesis::DropReason::LogicalConfusion,
                        synthesis::DropReason::UnclearExpression, synthesis::DropReason::Other}) {
        reasons[std::string(synthesis::to_string(reason))] = 0;
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto it = verdict_of.find(i);
        if (it == verdict_of.end() || it->second->at("verdict") == "keep") {
            kept.push_back(records[i]);
            continue;
        }
        const json& v = *it->second;
        if (v.at("verdict") == "drop") {
            const std::string reason = v.at("reason");
            reasons[reason] = reasons[reason].get<std::size_t>() + 1;
            dropped.push_back(ordered_json{{"id", records[i].id}, {"reason", reason}, {"detail", ord(v.at("detail"))}});
        } else {
            unresolved.push_back(ordered_json{{"id", records[i].id}, {"detail", ord(v.at("detail"))}});
        }
    }
    save_jsonl(kept, *next.qa);
    write_json_lines(dropped, ctx.file("quality_filter", "dropped.jsonl"));
    write_json_lines(unresolved, ctx.file("quality_filter", "unresolved.jsonl"));
    auto report = counts(records.size(), kept.size(), dropped.size(), 0, unresolved.size());
    report["screened"] = targets.size();
    report["drop_reasons"] = reasons;
    return report;
}

// synth_rationales ---------------------------------------------------------

ordered_json run_synth_rationales(Context& ctx, const Streams& in, const Streams& next) {
    if (!in.qa) return counts(0, 0, 0, 0, 0);
    const auto records = load_qa_jsonl(*in.qa);
    const auto generator = ctx.require("generator");
    const auto judge = ctx.model("judge");
    const auto& optimize = ctx.config.params.optimize;

    const auto results = run_items(ctx, "synth_rationales", ids_of(records), [&](std::size_t i) -> json {
        const QAPair& qa = records[i];
        if (!qa.is_mcq()) return {{"status", "passthrough"}};
        try {
            const auto run = synthesis::run_rationale_pipeline(qa, optimize, generator, judge ? &*judge : nullptr,
                                                               ctx.templates);
            if (run.pruned()) return {{"status", "pruned"}, {"attempts", run.initial_attempts}};
            json accepted = json::array();
            for (std::size_t k = 1; k < run.lineage.size(); ++k) accepted.push_back(run.lineage[k].text);
            return {{"status", "retained"},
                    {"qa", json::parse(to_json(synthesis::attach(qa, run)).dump())},
                    {"initial_attempts", run.initial_attempts},
                    {"accepted_prompts", accepted},
                    {"rejected_prompts", run.rejected_prompts.size()},
                    {"failed_rounds", run.failed_rounds},
                    {"round_generation_calls", run.round_generation_calls},
                    {"judge_fallback", run.judge_fallback},
                    {"winner_round", run.best->round}};
        } catch (const llm::LlmError& e) {
            return error_result(e);
        }
    });

    std::vector<QAPair> kept;
    std::vector<ordered_json> pruned;
    std::vector<ordered_json> unresolved;
    std::vector<ordered_json> audit;
    std::size_t retained = 0;
    std::size_t passthrough = 0;
    std::size_t accepted_rounds = 0;
    std::size_t failed_rounds = 0;
    std::size_t fallbacks = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const json& r = results[i];
        const std::string status = r.at("status");
        if (status == "passthrough") {
            ++passthrough;
            kept.push_back(records[i]);
        } else if (status == "retained") {
            ++retained;
            kept.push_back(qa_from_json(r.at("qa")));
            accepted_rounds += r.at("accepted_prompts").size();
            failed_rounds += r.at("failed_rounds").get<std::size_t>();
            fallbacks += r.at("judge_fallback").get<bool>();
            ordered_json row;
            row["id"] = records[i].id;
            for (const char* key : {"initial_attempts", "winner_round", "accepted_prompts", "rejected_prompts",
                                    "failed_rounds", "round_generation_calls", "judge_fallback"}) {
                row[key] = r.at(key);
            }
            audit.push_back(std::move(row));
        } else if (status == "pruned") {
            auto row = to_json(records[i]);
            row["attempts"] = r.at("attempts");
            pruned.push_back(std::move(row));
        } else {
            unresolved.push_back(ordered_json{{"id", records[i].id}, {"error", ord(r.at("error"))}});
        }
    }
    save_jsonl(kept, *next.qa);
    write_json_lines(pruned, ctx.file("synth_rationales", "pruned.jsonl"));
    write_json_lines(unresolved, ctx.file("synth_rationales", "unresolved.jsonl"));
    write_json_lines(audit, ctx.file("synth_rationales", "audit.jsonl"));
    auto report = counts(records.size(), kept.size(), 0, pruned.size(), unresolved.size());
    report["attempted"] = retained + pruned.size() + unresolved.size();
    report["retained"] = retained;
    report["passthrough"] = passthrough;
    report["accepted_rounds"] = accepted_rounds;
    report["failed_rounds"] = failed_rounds;
    report["judge_fallbacks"] = fallbacks;
    return report;
}

// enrich -------------------------------------------------------------------

ordered_json run_enrich(Context& ctx, const Streams& in, const Streams& next) {
    if (!in.dialogues) return counts(0, 0, 0, 0, 0);
    const auto sessions = load_dialogue_jsonl(*in.dialogues);
    const auto generator = ctx.require("generator");
    std::vector<std::string> ids;
    for (const auto& s : sessions) ids.push_back(s.id);
    const auto results = run_items(ctx, "enrich", ids, [&](std::size_t i) {
        const auto r = synthesis::enrich_dialogue(sessions[i], generator, ctx.templates);
        return json{{"flagged", r.flagged}, {"note", r.note}, {"session", json::parse(to_json(r.session).dump())}};
    });
    std::vector<DialogueSession> enriched;
    std::vector<ordered_json> flagged;
    for (std::size_t i = 0; i < sessions.size(); ++i) {
        if (results[i].at("flagged").get<bool>()) {
            flagged.push_back(ordered_json{{"id", sessions[i].id}, {"note", ord(results[i].at("note"))}});
        } else {
            enriched.push_back(dialogue_from_json(results[i].at("session")));
        }
    }
    save_jsonl(enriched, *next.dialogues);
    write_json_lines(flagged, ctx.file("enrich", "flagged.jsonl"));
    return counts(sessions.size(), enriched.size(), 0, 0, flagged.size());
}

// select -------------------------------------------------------------------

ordered_json run_select(Context& ctx, const Streams& in, const Streams& next) {
    if (!in.qa) return counts(0, 0, 0, 0, 0);
    const auto records = load_qa_jsonl(*in.qa);
    std::vector<llm::ModelRef> selectors;
    for (const auto* decl : ctx.config.selectors()) selectors.push_back(ctx.make_ref(*decl, llm::kJudgeTemperature));

    const auto results = run_items(ctx, "select", ids_of(records), [&](std::size_t i) -> json {
        // Open-ended items cannot be answered wrong by option choice; they
        // stay with the non-challenging data.
        if (!records[i].is_mcq()) return {{"status", "remaining"}};
        const auto r = selection::cross_select({records[i]}, selectors, ctx.templates, 1);
        if (!r.unresolved.empty()) {
            const auto& u = r.unresolved.front();
            return {{"status", "unresolved"}, {"selector", u.selector}, {"error", u.error}};
        }
        const auto& v = r.verdicts.front();
        return {{"status", v.challenging ? "challenging" : "remaining"},
                {"verdict", json::parse(selection::to_json(v).dump())}};
    });

    std::vector<QAPair> challenging;
    std::vector<QAPair> remaining;
    std::vector<ordered_json> unresolved;
    std::vector<ordered_json> verdicts;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const json& r = results[i];
        const std::string status = r.at("status");
        if (r.contains("verdict")) {
            // Rebuild in the writer's key order.
            const json& v = r.at("verdict");
            ordered_json row;
            row["qa_id"] = v.at("qa_id");
            ordered_json models = ordered_json::object();
            for (const auto& [name, answer] : v.at("per_model").items()) {
                models[name] = {{"predicted", ord(answer.at("predicted"))}, {"correct", ord(answer.at("correct"))}};
            }
            row["per_model"] = models;
            row["challenging"] = v.at("challenging");
            verdicts.push_back(std::move(row));
        }
        if (status == "challenging") {
            challenging.push_back(records[i]);
        } else if (status == "remaining") {
            remaining.push_back(records[i]);
        } else {
            unresolved.push_back(
                ordered_json{{"id", records[i].id}, {"selector", ord(r.at("selector"))}, {"error", ord(r.at("error"))}});
        }
    }
    save_jsonl(challenging, *next.challenging);
    save_jsonl(remaining, *next.remaining);
    write_json_lines(unresolved, ctx.file("select", "unresolved.jsonl"));
    write_json_lines(verdicts, ctx.file("select", "verdicts.jsonl"));
    auto report = counts(records.size(), challenging.size() + remaining.size(), 0, 0, unresolved.size());
    report["challenging"] = challenging.size();
    report["remaining"] = remaining.size();
    report["selectors"] = selectors.size();
    return report;
}

// split --------------------------------------------------------------------

ordered_json run_split(Context& ctx, const Streams& in) {
    std::vector<QAPair> pr;
    std::vector<QAPair> pc;
    std::vector<DialogueSession> em;
    std::vector<QAPair> ps;
    std::vector<QAPair> cp;
    if (in.remaining) {
        pr = load_qa_jsonl(*in.remaining);
    } else if (in.qa) {
        pr = load_qa_jsonl(*in.qa);
    }
    if (in.challenging) pc = load_qa_jsonl(*in.challenging);
    if (in.dialogues) em = load_dialogue_jsonl(*in.dialogues);
    if (ctx.config.inputs.ps) ps = load_qa_jsonl(*ctx.config.inputs.ps);
    if (ctx.config.inputs.cp) cp = load_qa_jsonl(*ctx.config.inputs.cp);

    std::vector<std::string> em_ids;
    for (const auto& s : em) em_ids.push_back(s.id);
    const auto d_pr = DatasetSplit::make(SplitRole::D_pr, ids_of(pr));
    const auto d_pc = DatasetSplit::make(SplitRole::D_pc, ids_of(pc));
    const auto d_em = DatasetSplit::make(SplitRole::D_em, em_ids);
    const auto d_ps = DatasetSplit::make(SplitRole::D_ps, ids_of(ps));
    const auto d_cp = DatasetSplit::make(SplitRole::D_cp, ids_of(cp));
    const auto assembled = assemble_splits(d_pr, d_em, d_ps, d_pc, d_cp);

    ordered_json manifest = ordered_json::object();
    for (const DatasetSplit* s : {&d_pr, &d_pc, &d_em, &d_ps, &d_cp, &assembled.sft, &assembled.grpo}) {
        manifest[std::string(to_string(s->role))] = {
            {"count", s->records.size()}, {"digest", s->manifest_digest}, {"records", s->records}};
    }
    write_json_file(manifest, ctx.file("split", "manifest.json"));

    std::vector<Record> sft;
    for (const auto& r : pr) sft.emplace_back(r);
    for (const auto& r : em) sft.emplace_back(r);
    for (const auto& r : ps) sft.emplace_back(r);
    std::vector<Record> grpo;
    for (const auto& r : pc) grpo.emplace_back(r);
    for (const auto& r : cp) grpo.emplace_back(r);
    save_jsonl(sft, ctx.file("split", "sft.jsonl"));
    save_jsonl(grpo, ctx.file("split", "grpo.jsonl"));

    const std::size_t total = pr.size() + pc.size() + em.size() + ps.size() + cp.size();
    auto report = counts(total, sft.size() + grpo.size(), 0, 0, 0);
    for (const DatasetSplit* s : {&d_pr, &d_pc, &d_em, &d_ps, &d_cp, &assembled.sft, &assembled.grpo}) {
        report[std::string(to_string(s->role))] = s->records.size();
    }
    return report;
}

ordered_json run_stage(Context& ctx, std::string_view stage, const Streams& in, const Streams& next) {
    if (stage == "clean") return run_clean(ctx, in, next);
    if (stage == "synth_questions") return run_synth_questions(ctx, in, next);
    if (stage == "dedup") return run_dedup(ctx, in, next);
    if (stage == "quality_filter") return run_quality_filter(ctx, in, next);
    if (stage == "synth_rationales") return run_synth_rationales(ctx, in, next);
    if (stage == "enrich") return run_enrich(ctx, in, next);
    if (stage == "select") return run_select(ctx, in, next);
    return run_split(ctx, in);
}

} // namespace

// ------------------------------------------------------------------- driver

RunReport run_pipeline(const PipelineConfig& config, const RunOptions& options) {
    config.validate();
    const fs::path out = config.out_dir;
    const fs::path checkpoint_path = out / "checkpoint.json";
    const std::string digest = config.digest();

    Checkpoint checkpoint;
    if (options.resume) {
        auto loaded = Checkpoint::load(checkpoint_path);
        if (!loaded) throw ValidationError("nothing to resume: no checkpoint at " + checkpoint_path.string());
        if (loaded->config_digest != digest) {
            throw ValidationError("refusing to resume: config digest " + digest.substr(0, 12) +
                                  " differs from checkpoint digest " + loaded->config_digest.substr(0, 12) +
                                  " (config, inputs or scripts changed since the interrupted run; rerun without "
                                  "--resume to start over)");
        }
        checkpoint = std::move(*loaded);
    } else {
        checkpoint.config_digest = digest;
    }

    llm::Gateway gateway;
    register_backends(gateway, config, options.replay_transcript);

    fs::create_directories(out / "logs");
    if (!options.resume) {
        for (const auto& entry : fs::directory_iterator(out)) {
            if (entry.is_regular_file() && entry.path().filename().string().ends_with(".partial.jsonl")) {
                fs::remove(entry.path());
            }
        }
        fs::remove(out / "logs" / "run.log.jsonl");
        fs::remove(out / "logs" / "transcript.jsonl");
    }
    checkpoint.save(checkpoint_path);
    gateway.set_transcript_path(out / "logs" / "transcript.jsonl");
    Logger logger(config.log_level, options.log_stream);
    logger.set_file(out / "logs" / "run.log.jsonl");

    Context ctx{config,
                options,
                gateway,
                config.templates_dir ? PromptTemplates::with_overrides(*config.templates_dir)
                                     : PromptTemplates::defaults(),
                logger,
                out,
                checkpoint,
                checkpoint_path};

    logger.log(LogLevel::Info, "run_start",
               {{"config_digest", digest}, {"resume", options.resume}, {"stages", config.stages}});

    Streams streams{config.inputs.qa, config.inputs.documents, config.inputs.dialogues, std::nullopt, std::nullopt};
    RunReport report;
    for (const auto& stage : config.stages) {
        Streams next = streams;
        advance(next, stage, out);
        const bool done = std::find(checkpoint.completed_stages.begin(), checkpoint.completed_stages.end(), stage) !=
                          checkpoint.completed_stages.end();
        if (done) {
            report.stages[stage] = checkpoint.stage_reports.value(stage, ordered_json::object());
            logger.log(LogLevel::Info, "stage_skip", {{"stage", stage}, {"reason", "completed"}});
            streams = next;
            continue;
        }

        logger.log(LogLevel::Info, "stage_start", {{"stage", stage}});
        ordered_json stage_report;
        try {
            if (checkpoint.stage != stage) {
                checkpoint.stage = stage;
                checkpoint.processed_ids.clear();
                checkpoint.partial_outputs.reset();
                checkpoint.save(checkpoint_path);
            }
            stage_report = run_stage(ctx, stage, streams, next);
        } catch (const std::exception& e) {
            checkpoint.save(checkpoint_path);
            logger.log(LogLevel::Error, "stage_failed", {{"stage", stage}, {"error", e.what()}});
            throw StageFailure(stage, e.what());
        }

        checkpoint.completed_stages.push_back(stage);
        checkpoint.stage_reports[stage] = stage_report;
        checkpoint.stage.reset();
        checkpoint.processed_ids.clear();
        checkpoint.partial_outputs.reset();
        checkpoint.save(checkpoint_path);
        fs::remove(ctx.file(stage, "partial.jsonl"));
        report.stages[stage] = stage_report;
        logger.log(LogLevel::Info, "stage_done", {{"stage", stage}, {"report", stage_report}});
        streams = next;
    }

    report.new_items = ctx.new_items;
    write_json_file(ordered_json{{"stages", report.stages}}, out / "run_report.json");
    logger.log(LogLevel::Info, "run_done", {{"new_items", report.new_items}});
    return report;
}

} // namespace psyforge::pipeline
