#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyforge/corpus.hpp"
#include "psyforge/llm.hpp"
#include "psyforge/prompts.hpp"

namespace psyforge::selection {

struct ModelAnswer {
    Prediction predicted;
    bool correct = false;

    friend bool operator==(const ModelAnswer&, const ModelAnswer&) = default;
};

struct SelectionVerdict {
    std::string qa_id;
    /// Selector backend name to its answer.
    std::map<std::string, ModelAnswer> per_model;
    bool challenging = false;
};

/// Exact set equality; a strict subset of gold is not correct here.
ModelAnswer judge_response(const QAPair& qa, std::string_view reply);

/// Prompt sent to every selector; uses the same answer-line convention as
/// evaluation so parsing behaves identically.
std::string selector_prompt(const QAPair& qa, const PromptTemplates& templates);

struct UnresolvedItem {
    std::string qa_id;
    std::string selector;
    std::string error;
};

struct SelectionResult {
    /// Input order is kept within each bucket.
    std::vector<QAPair> challenging;
    std::vector<QAPair> remaining;
    std::vector<UnresolvedItem> unresolved;
    /// One verdict per resolved item, in input order.
    std::vector<SelectionVerdict> verdicts;
};

/// Routes each question to `challenging` iff every selector answers it
/// incorrectly. A selector failure moves the item to `unresolved`.
/// `max_parallel` bounds concurrent items.
SelectionResult cross_select(const std::vector<QAPair>& dataset, const std::vector<llm::ModelRef>& selectors,
                             const PromptTemplates& templates, std::size_t max_parallel = 1);

nlohmann::ordered_json to_json(const SelectionVerdict& verdict);

} // namespace psyforge::selection
