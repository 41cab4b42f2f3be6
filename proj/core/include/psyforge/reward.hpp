#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "psyforge/corpus.hpp"

namespace psyforge::reward {

inline constexpr double kFormatReward = 1.25;
inline constexpr double kFormatPenalty = -1.0;
inline constexpr double kDefaultAdvantageEpsilon = 1e-8;

struct RewardBreakdown {
    double format = 0.0;
    double accuracy = 0.0;
    double final = 0.0;
};

/// +1.25 when the completion is `<think>reasoning</think>answer` with exactly
/// one tag pair, non-blank reasoning and a non-blank answer; -1 otherwise.
/// Only white space may precede the opening tag.
double format_reward(std::string_view completion);

/// True when `completion` satisfies the format grammar; on success `answer`
/// receives the text after `</think>`.
bool split_think(std::string_view completion, std::string_view* answer = nullptr);

/// Set-overlap accuracy reward:
///   +1             when predicted == gold
///   |p ∩ g| / |g|  when predicted is a non-empty strict subset of gold
///   -1             otherwise, including no-answer.
/// Throws ContractError when gold is empty.
double accuracy_reward(const Prediction& predicted, const AnswerSet& gold);

/// Format and accuracy combined. The answer is parsed from the text after
/// `</think>` when the format is valid and from the whole completion
/// otherwise. Uses `completion.gold`, which must be set and non-empty.
RewardBreakdown final_reward(const CompletionRecord& completion, QuestionKind kind = QuestionKind::MMCQ);

/// Group-normalised advantages (r - mean) / (population stddev + epsilon).
std::vector<double> group_advantages(std::span<const double> rewards, double epsilon = kDefaultAdvantageEpsilon);

} // namespace psyforge::reward
