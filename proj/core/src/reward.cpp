#include "psyforge/reward.hpp"

#include <algorithm>
#include <cmath>

#include "psyforge/error.hpp"
#include "psyforge/metrics.hpp"
#include "psyforge/utf8.hpp"

namespace psyforge::reward {

namespace {

constexpr std::string_view kOpen = "<think>";
constexpr std::string_view kClose = "</think>";

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
    std::size_t n = 0;
    for (auto p = text.find(needle); p != std::string_view::npos; p = text.find(needle, p + needle.size())) ++n;
    return n;
}

bool blank(std::string_view text) { return utf8::trim(text).empty(); }

} // namespace

bool split_think(std::string_view completion, std::string_view* answer) {
    if (count_occurrences(completion, kOpen) != 1 || count_occurrences(completion, kClose) != 1) return false;
    const auto open = completion.find(kOpen);
    const auto close = completion.find(kClose);
    if (open > close) return false;
    if (!blank(completion.substr(0, open))) return false;
    const auto reasoning = completion.substr(open + kOpen.size(), close - open - kOpen.size());
    const auto tail = completion.substr(close + kClose.size());
    if (blank(reasoning) || blank(tail)) return false;
    if (answer != nullptr) *answer = tail;
    return true;
}

double format_reward(std::string_view completion) {
    return split_think(completion) ? kFormatReward : kFormatPenalty;
}

double accuracy_reward(const Prediction& predicted, const AnswerSet& gold) {
    if (gold.empty()) throw ContractError("accuracy_reward requires a non-empty gold set");
    if (!predicted || predicted->empty()) return -1.0;
    if (*predicted == gold) return 1.0;
    if (predicted->is_subset_of(gold)) {
        return static_cast<double>(predicted->intersect(gold).size()) / static_cast<double>(gold.size());
    }
    return -1.0;
}

RewardBreakdown final_reward(const CompletionRecord& completion, QuestionKind kind) {
    if (!completion.gold || completion.gold->empty()) {
        throw ContractError("completion for '" + completion.qa_id + "' has no gold answer");
    }
    RewardBreakdown out;
    std::string_view answer;
    const bool well_formed = split_think(completion.text, &answer);
    out.format = well_formed ? kFormatReward : kFormatPenalty;
    const auto parsed = metrics::parse_answer(well_formed ? answer : std::string_view(completion.text), kind);
    out.accuracy = accuracy_reward(parsed.labels, *completion.gold);
    out.final = out.format + out.accuracy;
    return out;
}

std::vector<double> group_advantages(std::span<const double> rewards, double epsilon) {
    if (rewards.empty()) throw ContractError("group_advantages requires a non-empty reward group");
    // A group with identical rewards carries no signal; avoid 0 / epsilon noise.
    if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards.front(); })) {
        return std::vector<double>(rewards.size(), 0.0);
    }
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double stddev = std::sqrt(var / n);
    std::vector<double> out;
    out.reserve(rewards.size());
    for (double r : rewards) out.push_back((r - mean) / (stddev + epsilon));
    return out;
}

} // namespace psyforge::reward
