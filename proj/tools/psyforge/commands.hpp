#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace psyforge::cli {

struct Globals {
    std::filesystem::path config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> max_parallel;
    std::string log_level = "info";
};

struct CleanArgs {
    std::filesystem::path in;
    std::filesystem::path out;
    std::filesystem::path report;
    std::filesystem::path dropped;
    std::filesystem::path unresolved;
    bool filter_dialogues = false;
    std::string backend;
};

struct DedupArgs {
    std::filesystem::path in;
    std::filesystem::path out;
    std::filesystem::path clusters;
    std::size_t k = 3;
    std::size_t perms = 256;
    std::size_t bands = 32;
    std::optional<std::size_t> rows;
    double threshold = 0.7;
    std::optional<std::uint64_t> seed;
    std::size_t rank_max_chars = 0;
    std::string backend;
};

struct ChunkArgs {
    std::filesystem::path documents;
    std::filesystem::path out;
    std::size_t target = 900;
};

struct QuestionsArgs {
    std::filesystem::path chunks;
    std::filesystem::path out;
    std::filesystem::path audit;
    std::size_t per_chunk = 5;
    std::string backend;
};

struct RationalesArgs {
    std::filesystem::path qa;
    std::filesystem::path out;
    std::filesystem::path pruned;
    std::filesystem::path audit;
    int rounds = 3;
    int max_regen = 3;
    std::string keep_policy = "llm_judged";
    std::vector<std::string> backends;
};

struct EnrichArgs {
    std::filesystem::path dialogues;
    std::filesystem::path out;
    std::filesystem::path flagged;
    std::string backend;
};

struct SelectArgs {
    std::filesystem::path qa;
    std::filesystem::path out_challenging;
    std::filesystem::path out_rest;
    std::filesystem::path audit;
    std::filesystem::path unresolved;
    std::vector<std::string> selectors;
};

struct SplitArgs {
    std::optional<std::filesystem::path> pr;
    std::optional<std::filesystem::path> pc;
    std::optional<std::filesystem::path> em;
    std::optional<std::filesystem::path> ps;
    std::optional<std::filesystem::path> cp;
    std::filesystem::path out_dir;
};

struct RewardArgs {
    std::filesystem::path completions;
    std::optional<std::filesystem::path> gold;
    std::filesystem::path out;
    std::string group_by;
    bool advantages = false;
    double epsilon = 1e-8;
};

struct EvalArgs {
    std::filesystem::path benchmark;
    std::filesystem::path outputs;
    std::filesystem::path report;
    std::string average = "uniform";
};

struct RunArgs {
    bool resume = false;
    std::optional<std::size_t> stop_after;
    std::optional<std::filesystem::path> transcript;
    std::optional<std::filesystem::path> out_dir;
};

// Each returns the process exit code; errors propagate as exceptions.
int cmd_clean(const Globals& g, const CleanArgs& a);
int cmd_dedup(const Globals& g, const DedupArgs& a);
int cmd_chunk(const Globals& g, const ChunkArgs& a);
int cmd_questions(const Globals& g, const QuestionsArgs& a);
int cmd_rationales(const Globals& g, const RationalesArgs& a);
int cmd_enrich(const Globals& g, const EnrichArgs& a);
int cmd_select(const Globals& g, const SelectArgs& a);
int cmd_split(const Globals& g, const SplitArgs& a);
int cmd_reward(const Globals& g, const RewardArgs& a);
int cmd_eval(const Globals& g, const EvalArgs& a);
int cmd_run(const Globals& g, const RunArgs& a);

} // namespace psyforge::cli
