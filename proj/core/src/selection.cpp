#include "psyforge/selection.hpp"

#include <optional>

#include "psyforge/error.hpp"
#include "psyforge/metrics.hpp"
#include "psyforge/parallel.hpp"
#include "psyforge/synthesis.hpp"

namespace psyforge::selection {

ModelAnswer judge_response(const QAPair& qa, std::string_view reply) {
    if (!qa.is_mcq()) throw ContractError("judge_response requires an SMCQ or MMCQ question (" + qa.id + ")");
    ModelAnswer out;
    out.predicted = metrics::parse_answer(reply, qa.kind).labels;
    out.correct = out.predicted.has_value() && *out.predicted == qa.gold;
    return out;
}

std::string selector_prompt(const QAPair& qa, const PromptTemplates& templates) {
    const std::string hint = qa.kind == QuestionKind::MMCQ ? "多选题" : "单选题";
    return render(templates.get("selector_answer"),
                  {{"kind_hint", hint}, {"question", qa.question}, {"options", synthesis::render_options(qa)}});
}

SelectionResult cross_select(const std::vector<QAPair>& dataset, const std::vector<llm::ModelRef>& selectors,
                             const PromptTemplates& templates, std::size_t max_parallel) {
    if (selectors.empty()) throw ContractError("cross-selection requires at least one selector");
    struct Slot {
        std::optional<SelectionVerdict> verdict;
        UnresolvedItem failure;
    };
    std::vector<Slot> slots(dataset.size());
    parallel_for(dataset.size(), max_parallel, [&](std::size_t i) {
        const QAPair& qa = dataset[i];
        if (!qa.is_mcq()) throw ContractError("open-ended question " + qa.id + " cannot be cross-selected");
        const std::string prompt = selector_prompt(qa, templates);
        SelectionVerdict verdict;
        verdict.qa_id = qa.id;
        verdict.challenging = true;
        for (const auto& selector : selectors) {
            try {
                const auto response = selector.ask(prompt, "select:" + selector.backend + ":" + qa.id);
                const auto answer = judge_response(qa, response.content);
                verdict.per_model[selector.backend] = answer;
                verdict.challenging = verdict.challenging && !answer.correct;
            } catch (const llm::LlmError& e) {
                if (e.fatal()) throw;
                slots[i].failure = {qa.id, selector.backend, e.what()};
                return;
            }
        }
        slots[i].verdict = std::move(verdict);
    });

    SelectionResult result;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (!slots[i].verdict) {
            result.unresolved.push_back(std::move(slots[i].failure));
            continue;
        }
        (slots[i].verdict->challenging ? result.challenging : result.remaining).push_back(dataset[i]);
        result.verdicts.push_back(std::move(*slots[i].verdict));
    }
    return result;
}

nlohmann::ordered_json to_json(const SelectionVerdict& verdict) {
    nlohmann::ordered_json j;
    j["qa_id"] = verdict.qa_id;
    nlohmann::ordered_json models = nlohmann::ordered_json::object();
    for (const auto& [name, answer] : verdict.per_model) {
        models[name] = {{"predicted", answer.predicted ? nlohmann::ordered_json(answer.predicted->str())
                                                       : nlohmann::ordered_json(nullptr)},
                        {"correct", answer.correct}};
    }
    j["per_model"] = std::move(models);
    j["challenging"] = verdict.challenging;
    return j;
}

} // namespace psyforge::selection
