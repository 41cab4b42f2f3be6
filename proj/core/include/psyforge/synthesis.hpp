#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyforge/corpus.hpp"
#include "psyforge/llm.hpp"
#include "psyforge/prompts.hpp"
#include "psyforge/textclean.hpp"

namespace psyforge::synthesis {

/// A chain-of-thought prompt and its place in a per-question lineage.
struct PromptState {
    int version = 0;
    std::string text;
    std::optional<int> parent_version;

    friend bool operator==(const PromptState&, const PromptState&) = default;
};

struct RationaleInstance {
    std::string qa_id;
    int prompt_version = 0;
    std::string prompt_text;
    std::string rationale;
    Prediction predicted;
    bool valid = false;
    /// 0 for the initial chain of thought, 1..R for optimisation rounds.
    int round = 0;
    int regen_attempt = 1;

    friend bool operator==(const RationaleInstance&, const RationaleInstance&) = default;
};

enum class KeepPolicy { LlmJudged, LastValid };

KeepPolicy parse_keep_policy(std::string_view text);
std::string_view to_string(KeepPolicy policy);

struct OptimizeConfig {
    int rounds = 3;
    /// Total generation attempts for the initial rationale.
    int max_regen = 3;
    KeepPolicy keep_policy = KeepPolicy::LlmJudged;

    void validate() const;
};

// ------------------------------------------------------------- questions

/// Greedy packing of paragraphs (or, for oversized paragraphs, sentences)
/// into chunks of at most `target_len` characters. Concatenating the result
/// reproduces `source`. Throws ContractError when target_len < 200.
std::vector<std::string> segment_chunks(std::string_view source, std::size_t target_len);

struct SourceChunk {
    std::string id;
    /// Absent for chunkless generation (resource Type III).
    std::optional<std::string> text;
    std::string subfield;
};

SourceChunk chunk_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const SourceChunk& chunk);

struct GeneratedQuestions {
    std::vector<QAPair> pairs;
    std::size_t skipped = 0;
    /// No parseable pair at all.
    bool warning = false;
};

/// Parses a generator reply (a JSON array of question objects, optionally
/// fenced) into at most `n` validated pairs.
GeneratedQuestions parse_generated_questions(std::string_view reply, const SourceChunk& chunk, std::size_t n);

/// Throws LlmError when the backend fails.
GeneratedQuestions generate_questions(const SourceChunk& chunk, std::size_t n, const llm::ModelRef& generator,
                                      const PromptTemplates& templates);

enum class DropReason { IncompleteInformation, LogicalConfusion, UnclearExpression, Other };

std::string_view to_string(DropReason reason);

struct QualityVerdict {
    textclean::VerdictKind kind = textclean::VerdictKind::Unresolved;
    DropReason reason = DropReason::Other;
    std::string detail;
};

QualityVerdict quality_filter(const QAPair& qa, const llm::ModelRef& judge, const PromptTemplates& templates);

// ------------------------------------------------------------- rationales

std::string render_options(const QAPair& qa);

/// Applies a prompt to a question. Prompts lacking a {question} placeholder
/// get the question and options appended.
std::string render_question_prompt(std::string_view prompt_text, const QAPair& qa);

PromptState initial_prompt(const PromptTemplates& templates);

struct RationaleOutcome {
    /// Set when an attempt predicted the gold answer.
    std::optional<RationaleInstance> instance;
    int attempts = 0;

    bool pruned() const { return !instance.has_value(); }
};

/// Up to `max_regen` chain-of-thought attempts; the first whose parsed
/// answer equals gold wins. Throws LlmError on backend failure, which is
/// distinct from pruning.
RationaleOutcome generate_rationale(const QAPair& qa, const PromptState& prompt, const llm::ModelRef& generator,
                                    int max_regen);

struct RoundResult {
    PromptState prompt;
    RationaleInstance instance;
    bool accepted = false;
    /// Backend failure forced a revert.
    bool failed = false;
    std::string rejected_candidate;
    std::string note;
    int generation_calls = 0;
};

/// One refinement round: propose a candidate prompt from (P, q, r), answer
/// again with it, and keep the candidate only if the new answer equals gold.
/// Otherwise the incoming state is returned unchanged.
RoundResult optimize_round(const QAPair& qa, const PromptState& prompt, const RationaleInstance& current,
                           const llm::ModelRef& generator, const PromptTemplates& templates, int round);

struct BestSelection {
    RationaleInstance winner;
    bool judged = false;
    bool fallback = false;
};

/// Highest round wins, ties broken by fewer regeneration attempts.
const RationaleInstance& last_valid(const std::vector<RationaleInstance>& candidates);

BestSelection select_best(const QAPair& qa, const std::vector<RationaleInstance>& candidates,
                          const llm::ModelRef* judge, KeepPolicy policy, const PromptTemplates& templates);

struct RationaleRun {
    std::optional<RationaleInstance> best;
    std::vector<PromptState> lineage;
    std::vector<RationaleInstance> candidates;
    std::vector<std::string> rejected_prompts;
    int initial_attempts = 0;
    int round_generation_calls = 0;
    int failed_rounds = 0;
    bool judge_fallback = false;

    bool pruned() const { return !best.has_value(); }
};

/// Initial rationale, R optimisation rounds and best-rationale selection for
/// one question. Throws LlmError if the initial generation fails.
RationaleRun run_rationale_pipeline(const QAPair& qa, const OptimizeConfig& config, const llm::ModelRef& generator,
                                    const llm::ModelRef* judge, const PromptTemplates& templates);

/// The question with its winning rationale attached.
QAPair attach(const QAPair& qa, const RationaleRun& run);

// --------------------------------------------------------------- dialogues

struct EnrichResult {
    DialogueSession session;
    /// Reply was malformed or the backend failed; `session` is the original.
    bool flagged = false;
    std::string note;
};

/// Rewrites supporter turns for empathy, evidence-based guidance and
/// concrete coping strategies. Seeker turns are copied verbatim.
EnrichResult enrich_dialogue(const DialogueSession& session, const llm::ModelRef& generator,
                             const PromptTemplates& templates);

} // namespace psyforge::synthesis
