#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyforge/corpus.hpp"

namespace psyforge::metrics {

enum class ExtractionRule { PostThink, AnswerKeyword, TrailingLetters, None };

std::string_view to_string(ExtractionRule rule);

struct ParsedAnswer {
    Prediction labels;
    ExtractionRule rule = ExtractionRule::None;
    /// Set when an SMCQ answer named several letters and only the first was kept.
    bool ambiguous = false;

    bool has_answer() const { return labels.has_value(); }
};

/// Extracts option letters from a model completion with a fixed cascade:
///   1. the segment after the last `</think>`,
///   2. the last answer keyword (答案, 正确答案, answer is, ...) followed by letters,
///   3. a trailing line made only of option letters.
/// The first rule producing at least one letter wins.
ParsedAnswer parse_answer(std::string_view text, QuestionKind kind);

struct ScoredItem {
    Prediction predicted;
    AnswerSet gold;
};

/// Partial-credit score of one item: 1 on exact match, |p∩g|/|g| when p is a
/// non-empty strict subset of g, 0 otherwise.
double elastic_credit(const Prediction& predicted, const AnswerSet& gold);

/// Percentage of exact set matches. Throws ContractError on an empty list or
/// an empty gold set.
double standard_accuracy(std::span<const ScoredItem> items);
/// Mean elastic credit as a percentage.
double elastic_accuracy(std::span<const ScoredItem> items);

/// One token per CJK character, one per maximal ASCII letter/digit run
/// (lowercased); punctuation and white space are dropped.
std::vector<std::string> tokenize(std::string_view text);

struct RougeScore {
    double recall = 0.0;
    double precision = 0.0;
    double f1 = 0.0;
};

RougeScore rouge_1(std::string_view candidate, std::string_view reference);
RougeScore rouge_l(std::string_view candidate, std::string_view reference);
RougeScore rouge_1(std::span<const std::string> candidate, std::span<const std::string> reference);
RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// Sentence BLEU-4 with brevity penalty. A zero precision for n >= 2 is
/// replaced by 1 / (2 * number of candidate n-grams).
double bleu_4(std::string_view candidate, std::string_view reference);
double bleu_4(std::span<const std::string> candidate, std::span<const std::string> reference);

struct CategoryScores {
    std::size_t smcq_count = 0;
    std::size_t mmcq_count = 0;
    std::size_t open_count = 0;
    std::size_t missing = 0;
    double smcq_standard = 0.0;
    double mmcq_standard = 0.0;
    double mmcq_elastic = 0.0;
};

struct OpenEndedScores {
    std::size_t count = 0;
    double rouge1 = 0.0;
    double rougeL = 0.0;
    double bleu4 = 0.0;
};

enum class AverageMode { Uniform, ItemWeighted };

struct EvalReport {
    std::map<std::string, CategoryScores> per_category;
    OpenEndedScores open_ended;
    /// Mean of the standard-accuracy columns.
    double average_standard = 0.0;
    /// Mean of SMCQ standard and MMCQ elastic columns.
    double average_elastic = 0.0;
    std::size_t total_items = 0;
    std::size_t missing = 0;
    std::size_t ambiguous = 0;
};

/// Scores model outputs against a benchmark. Items without an output count
/// as no-answer; duplicate output ids throw ValidationError.
EvalReport evaluate_benchmark(const std::vector<CompletionRecord>& outputs, const std::vector<QAPair>& benchmark,
                              AverageMode mode = AverageMode::Uniform);

/// Report JSON with every score rounded to two decimals.
nlohmann::ordered_json to_json(const EvalReport& report);

} // namespace psyforge::metrics
