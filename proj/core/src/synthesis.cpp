#include "psyforge/synthesis.hpp"

#include <algorithm>

#include "psyforge/dedup.hpp"
#include "psyforge/error.hpp"
#include "psyforge/metrics.hpp"
#include "psyforge/utf8.hpp"

namespace psyforge::synthesis {

using nlohmann::json;

KeepPolicy parse_keep_policy(std::string_view text) {
    if (text == "llm_judged") return KeepPolicy::LlmJudged;
    if (text == "last_valid") return KeepPolicy::LastValid;
    throw ValidationError("unknown keep_policy '" + std::string(text) + "' (expected llm_judged or last_valid)");
}

std::string_view to_string(KeepPolicy policy) {
    return policy == KeepPolicy::LlmJudged ? "llm_judged" : "last_valid";
}

void OptimizeConfig::validate() const {
    if (rounds < 0) throw ValidationError("rounds must be >= 0");
    if (max_regen < 1) throw ValidationError("max_regen must be >= 1");
}

// --------------------------------------------------------------- chunking

namespace {

bool is_sentence_end(char32_t cp) {
    switch (cp) {
    case U'。': case U'！': case U'？': case U'；': case U'!': case U'?': case U';': case U'.': case U'…':
        return true;
    default:
        return false;
    }
}

bool is_closer(char32_t cp) {
    switch (cp) {
    case U'”': case U'’': case U'」': case U'』': case U'）': case U')': case U'"': case U'\'': case U'】':
        return true;
    default:
        return false;
    }
}

/// Splits into pieces that each end after a run of newlines (paragraphs).
std::vector<std::u32string> split_paragraphs(const std::u32string& text) {
    std::vector<std::u32string> out;
    std::size_t start = 0;
    std::size_t i = 0;
    while (i < text.size()) {
        if (text[i] == U'\n') {
            while (i < text.size() && text[i] == U'\n') ++i;
            out.push_back(text.substr(start, i - start));
            start = i;
        } else {
            ++i;
        }
    }
    if (start < text.size()) out.push_back(text.substr(start));
    return out;
}

/// Sentences keep their terminator, trailing closing quotes and trailing
/// white space.
std::vector<std::u32string> split_sentences(const std::u32string& text) {
    std::vector<std::u32string> out;
    std::size_t start = 0;
    std::size_t i = 0;
    while (i < text.size()) {
        if (!is_sentence_end(text[i])) {
            ++i;
            continue;
        }
        while (i < text.size() && is_sentence_end(text[i])) ++i;
        while (i < text.size() && is_closer(text[i])) ++i;
        while (i < text.size() && utf8::is_space(text[i])) ++i;
        out.push_back(text.substr(start, i - start));
        start = i;
    }
    if (start < text.size()) out.push_back(text.substr(start));
    return out;
}

} // namespace

std::vector<std::string> segment_chunks(std::string_view source, std::size_t target_len) {
    if (target_len < 200) throw ContractError("segment_chunks requires target_len >= 200");
    const std::u32string text = utf8::decode(source);
    if (text.empty()) return {};

    std::vector<std::u32string> units;
    for (auto& paragraph : split_paragraphs(text)) {
        if (paragraph.size() <= target_len) {
            units.push_back(std::move(paragraph));
        } else {
            for (auto& sentence : split_sentences(paragraph)) units.push_back(std::move(sentence));
        }
    }

    std::vector<std::string> chunks;
    std::u32string current;
    for (const auto& unit : units) {
        if (!current.empty() && current.size() + unit.size() > target_len) {
            chunks.push_back(utf8::encode(current));
            current.clear();
        }
        current += unit;
    }
    if (!current.empty()) chunks.push_back(utf8::encode(current));
    return chunks;
}

SourceChunk chunk_from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("chunk must be a JSON object");
    SourceChunk chunk;
    if (!j.contains("id") || !j.at("id").is_string() || j.at("id").get<std::string>().empty()) {
        throw ValidationError("chunk requires a non-empty string id");
    }
    chunk.id = j.at("id").get<std::string>();
    if (j.contains("text") && !j.at("text").is_null()) chunk.text = j.at("text").get<std::string>();
    chunk.subfield = j.value("subfield", std::string());
    return chunk;
}

nlohmann::ordered_json to_json(const SourceChunk& chunk) {
    nlohmann::ordered_json j;
    j["id"] = chunk.id;
    j["text"] = chunk.text ? nlohmann::ordered_json(*chunk.text) : nlohmann::ordered_json(nullptr);
    j["subfield"] = chunk.subfield;
    return j;
}

// -------------------------------------------------------------- questions

namespace {

std::string strip_fences(std::string_view reply) {
    std::string text = utf8::trim(reply);
    if (text.starts_with("```")) {
        const auto nl = text.find('\n');
        text = nl == std::string::npos ? std::string() : text.substr(nl + 1);
        if (const auto close = text.rfind("```"); close != std::string::npos) text = text.substr(0, close);
        text = utf8::trim(text);
    }
    return text;
}

/// The question array of a reply: the whole reply, a fenced block, the
/// bracketed span, or {"questions": [...]}; JSON lines as a last resort.
std::optional<json> extract_question_array(std::string_view reply) {
    const std::string text = strip_fences(reply);
    auto as_array = [](const json& j) -> std::optional<json> {
        if (j.is_array()) return std::optional<json>(std::in_place, j);
        if (j.is_object() && j.contains("questions") && j.at("questions").is_array()) {
            return std::optional<json>(std::in_place, j.at("questions"));
        }
        if (j.is_object() && j.contains("question")) return std::optional<json>(std::in_place, json::array({j}));
        return std::nullopt;
    };
    if (auto j = json::parse(text, nullptr, false); !j.is_discarded()) {
        if (auto arr = as_array(j)) return arr;
    }
    const auto open = text.find('[');
    const auto close = text.rfind(']');
    if (open != std::string::npos && close != std::string::npos && close > open) {
        if (auto j = json::parse(text.substr(open, close - open + 1), nullptr, false); !j.is_discarded()) {
            if (auto arr = as_array(j)) return arr;
        }
    }
    json lines = json::array();
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = utf8::trim(std::string_view(text).substr(start, end - start));
        if (!line.empty()) {
            if (auto j = json::parse(line, nullptr, false); !j.is_discarded() && j.is_object()) lines.push_back(j);
        }
        start = end + 1;
    }
    if (!lines.empty()) return std::optional<json>(std::in_place, std::move(lines));
    return std::nullopt;
}

bool all_labels(std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return AnswerSet::is_label(c); });
}

std::string compact_labels(std::string_view s) {
    std::string out;
    for (char c : s) {
        if (c == ',' || c == ' ' || c == '/' || c == ';') continue;
        out.push_back(c);
    }
    return out;
}

/// Converts one generated item; nullopt when it is malformed.
std::optional<QAPair> item_to_pair(const json& item, const SourceChunk& chunk) {
    if (!item.is_object()) return std::nullopt;
    const auto q = item.find("question");
    if (q == item.end() || !q->is_string() || utf8::trim(q->get<std::string>()).empty()) return std::nullopt;

    QAPair qa;
    qa.question = utf8::trim(q->get<std::string>());
    qa.subfield = item.value("subfield", chunk.subfield);
    qa.source_type = chunk.text ? SourceType::I : SourceType::III;

    if (const auto opts = item.find("options"); opts != item.end()) {
        if (opts->is_object()) {
            for (const auto& [key, value] : opts->items()) {
                if (key.size() != 1 || !AnswerSet::is_label(key[0]) || !value.is_string()) return std::nullopt;
                qa.options[key[0]] = value.get<std::string>();
            }
        } else if (opts->is_array()) {
            if (opts->size() > AnswerSet::kLabelCount) return std::nullopt;
            char label = AnswerSet::kFirstLabel;
            for (const auto& value : *opts) {
                if (!value.is_string()) return std::nullopt;
                qa.options[label++] = value.get<std::string>();
            }
        } else {
            return std::nullopt;
        }
    }

    auto answer = item.find("answer");
    if (answer == item.end()) answer = item.find("gold");
    if (answer == item.end()) answer = item.find("reference_answer");
    if (answer == item.end() || answer->is_null()) return std::nullopt;
    try {
        if (answer->is_array()) {
            for (const auto& label : *answer) {
                if (!label.is_string()) return std::nullopt;
                const std::string s = compact_labels(utf8::trim(label.get<std::string>()));
                if (!all_labels(s)) return std::nullopt;
                for (char c : s) qa.gold.insert(c);
            }
        } else if (answer->is_string()) {
            const std::string raw = utf8::trim(answer->get<std::string>());
            const std::string s = compact_labels(raw);
            if (!qa.options.empty() && all_labels(s)) {
                qa.gold = AnswerSet::from_string(s);
            } else if (qa.options.empty()) {
                qa.reference_answer = raw;
            } else {
                return std::nullopt;
            }
        } else {
            return std::nullopt;
        }
    } catch (const ValidationError&) {
        return std::nullopt;
    }

    if (qa.options.empty()) {
        qa.kind = QuestionKind::OPEN;
    } else {
        qa.kind = qa.gold.size() >= 2 ? QuestionKind::MMCQ : QuestionKind::SMCQ;
    }
    return qa;
}

} // namespace

GeneratedQuestions parse_generated_questions(std::string_view reply, const SourceChunk& chunk, std::size_t n) {
    if (n < 1) throw ContractError("generate_questions requires n >= 1");
    GeneratedQuestions out;
    const auto items = extract_question_array(reply);
    if (!items) {
        out.warning = true;
        return out;
    }
    for (const auto& item : *items) {
        auto qa = item_to_pair(item, chunk);
        if (qa) {
            qa->id = chunk.id + "-q" + std::to_string(out.pairs.size() + 1);
            try {
                validate(*qa);
            } catch (const ValidationError&) {
                qa.reset();
            }
        }
        if (!qa) {
            ++out.skipped;
            continue;
        }
        if (out.pairs.size() < n) out.pairs.push_back(std::move(*qa));
    }
    out.warning = out.pairs.empty();
    return out;
}

GeneratedQuestions generate_questions(const SourceChunk& chunk, std::size_t n, const llm::ModelRef& generator,
                                      const PromptTemplates& templates) {
    if (n < 1) throw ContractError("generate_questions requires n >= 1");
    std::string prompt;
    if (chunk.text) {
        prompt = render(templates.get("question_generation"),
                        {{"n", std::to_string(n)}, {"subfield", chunk.subfield}, {"chunk", *chunk.text}});
    } else {
        prompt = render(templates.get("question_generation_chunkless"),
                        {{"n", std::to_string(n)}, {"subfield", chunk.subfield}});
    }
    const auto response = generator.ask(prompt, "questions:generate:" + chunk.id);
    return parse_generated_questions(response.content, chunk, n);
}

std::string_view to_string(DropReason reason) {
    switch (reason) {
    case DropReason::IncompleteInformation: return "incomplete_information";
    case DropReason::LogicalConfusion: return "logical_confusion";
    case DropReason::UnclearExpression: return "unclear_expression";
    case DropReason::Other: return "other";
    }
    return "other";
}

namespace {

DropReason classify_reason(std::string_view text) {
    const std::pair<std::string_view, DropReason> table[] = {
        {"incomplete_information", DropReason::IncompleteInformation},
        {"incomplete information", DropReason::IncompleteInformation},
        {"信息不完整", DropReason::IncompleteInformation},
        {"logical_confusion", DropReason::LogicalConfusion},
        {"logical confusion", DropReason::LogicalConfusion},
        {"逻辑混乱", DropReason::LogicalConfusion},
        {"unclear_expression", DropReason::UnclearExpression},
        {"unclear expression", DropReason::UnclearExpression},
        {"表述不清", DropReason::UnclearExpression},
    };
    std::size_t best = std::string_view::npos;
    DropReason reason = DropReason::Other;
    for (const auto& [needle, value] : table) {
        const auto pos = text.find(needle);
        if (pos < best) {
            best = pos;
            reason = value;
        }
    }
    return reason;
}

} // namespace

QualityVerdict quality_filter(const QAPair& qa, const llm::ModelRef& judge, const PromptTemplates& templates) {
    std::string answer = qa.is_mcq() ? qa.gold.str() : qa.reference_answer;
    const std::string prompt = render(templates.get("quality_filter"),
                                      {{"question", qa.question}, {"options", render_options(qa)}, {"answer", answer}});
    QualityVerdict out;
    try {
        const auto response = judge.ask(prompt, "quality:judge:" + qa.id);
        const auto verdict = textclean::parse_verdict(response.content);
        out.kind = verdict.kind;
        out.detail = verdict.reason;
        if (verdict.kind == textclean::VerdictKind::Drop) out.reason = classify_reason(verdict.reason);
    } catch (const llm::LlmError& e) {
        if (e.fatal()) throw;
        out.kind = textclean::VerdictKind::Unresolved;
        out.detail = std::string("backend failure: ") + e.what();
    }
    return out;
}

// ------------------------------------------------------------- rationales

std::string render_options(const QAPair& qa) {
    std::string out;
    for (const auto& [label, text] : qa.options) {
        if (!out.empty()) out += '\n';
        out += label;
        out += ". ";
        out += text;
    }
    return out;
}

std::string render_question_prompt(std::string_view prompt_text, const QAPair& qa) {
    const std::string options = render_options(qa);
    std::string out = render(prompt_text, {{"question", qa.question}, {"options", options}});
    if (prompt_text.find("{question}") == std::string_view::npos) {
        out = utf8::trim(out) + "\n\n" + qa.question + "\n" + options;
    }
    return out;
}

PromptState initial_prompt(const PromptTemplates& templates) { return {0, templates.get("cot"), std::nullopt}; }

namespace {

RationaleInstance make_instance(const QAPair& qa, const PromptState& prompt, const std::string& reply, int round,
                                int attempt) {
    RationaleInstance inst;
    inst.qa_id = qa.id;
    inst.prompt_version = prompt.version;
    inst.prompt_text = prompt.text;
    inst.rationale = utf8::trim(reply);
    inst.predicted = metrics::parse_answer(reply, qa.kind).labels;
    inst.valid = inst.predicted.has_value() && *inst.predicted == qa.gold;
    inst.round = round;
    inst.regen_attempt = attempt;
    return inst;
}

void require_mcq(const QAPair& qa, const char* op) {
    if (!qa.is_mcq()) throw ContractError(std::string(op) + " requires an SMCQ or MMCQ question (" + qa.id + ")");
}

} // namespace

RationaleOutcome generate_rationale(const QAPair& qa, const PromptState& prompt, const llm::ModelRef& generator,
                                    int max_regen) {
    require_mcq(qa, "generate_rationale");
    if (max_regen < 1) throw ContractError("generate_rationale requires max_regen >= 1");
    const std::string user = render_question_prompt(prompt.text, qa);
    RationaleOutcome out;
    for (int attempt = 1; attempt <= max_regen; ++attempt) {
        out.attempts = attempt;
        const auto response =
            generator.ask(user, "rationale:cot:" + qa.id + ":" + std::to_string(attempt));
        auto inst = make_instance(qa, prompt, response.content, 0, attempt);
        if (inst.valid) {
            out.instance = std::move(inst);
            break;
        }
    }
    return out;
}

RoundResult optimize_round(const QAPair& qa, const PromptState& prompt, const RationaleInstance& current,
                           const llm::ModelRef& generator, const PromptTemplates& templates, int round) {
    require_mcq(qa, "optimize_round");
    if (!current.valid) throw ContractError("optimize_round requires a valid incoming instance");

    RoundResult result{prompt, current, false, false, {}, {}, 0};
    const std::string suffix = qa.id + ":" + std::to_string(round);
    try {
        const std::string refine = render(templates.get("prompt_refinement"), {{"prompt", prompt.text},
                                                                                {"question", qa.question},
                                                                                {"options", render_options(qa)},
                                                                                {"rationale", current.rationale}});
        ++result.generation_calls;
        const std::string candidate = strip_fences(generator.ask(refine, "rationale:refine:" + suffix).content);
        if (candidate.empty()) {
            result.note = "empty candidate prompt";
            return result;
        }
        const PromptState next{prompt.version + 1, candidate, prompt.version};
        ++result.generation_calls;
        const auto revised = generator.ask(render_question_prompt(candidate, qa), "rationale:revise:" + suffix);
        auto inst = make_instance(qa, next, revised.content, round, 1);
        if (!inst.valid) {
            result.rejected_candidate = candidate;
            result.note = "revision predicted " + (inst.predicted ? inst.predicted->str() : std::string("nothing")) +
                          ", gold " + qa.gold.str();
            return result;
        }
        result.prompt = next;
        result.instance = std::move(inst);
        result.accepted = true;
    } catch (const llm::LlmError& e) {
        if (e.fatal()) throw;
        result.failed = true;
        result.note = std::string("backend failure: ") + e.what();
    }
    return result;
}

const RationaleInstance& last_valid(const std::vector<RationaleInstance>& candidates) {
    if (candidates.empty()) throw ContractError("select_best requires at least one candidate");
    const RationaleInstance* best = &candidates.front();
    for (const auto& c : candidates) {
        if (c.round > best->round || (c.round == best->round && c.regen_attempt < best->regen_attempt)) best = &c;
    }
    return *best;
}

BestSelection select_best(const QAPair& qa, const std::vector<RationaleInstance>& candidates,
                          const llm::ModelRef* judge, KeepPolicy policy, const PromptTemplates& templates) {
    if (candidates.empty()) throw ContractError("select_best requires at least one candidate");
    for (const auto& c : candidates) {
        if (!c.valid) throw ContractError("select_best requires valid candidates");
    }
    if (candidates.size() == 1) return {candidates.front(), false, false};
    if (policy == KeepPolicy::LastValid || judge == nullptr) return {last_valid(candidates), false, false};

    std::vector<std::string> labels;
    std::string listing;
    for (const auto& c : candidates) {
        labels.push_back("R" + std::to_string(c.round));
        listing += "[" + labels.back() + "]\n" + c.rationale + "\n\n";
    }
    const std::string prompt = render(templates.get("select_best"), {{"question", qa.question},
                                                                     {"options", render_options(qa)},
                                                                     {"candidates", utf8::trim(listing)}});
    try {
        const auto response = judge->ask(prompt, "rationale:select:" + qa.id);
        const auto ranking = dedup::parse_ranking(response.content, labels);
        if (!ranking.empty()) {
            const auto pos = std::find(labels.begin(), labels.end(), ranking.front()) - labels.begin();
            return {candidates[static_cast<std::size_t>(pos)], true, false};
        }
    } catch (const llm::LlmError& e) {
        if (e.fatal()) throw;
    }
    return {last_valid(candidates), false, true};
}

RationaleRun run_rationale_pipeline(const QAPair& qa, const OptimizeConfig& config, const llm::ModelRef& generator,
                                    const llm::ModelRef* judge, const PromptTemplates& templates) {
    config.validate();
    RationaleRun run;
    PromptState prompt = initial_prompt(templates);
    run.lineage.push_back(prompt);

    const auto initial = generate_rationale(qa, prompt, generator, config.max_regen);
    run.initial_attempts = initial.attempts;
    if (initial.pruned()) return run;

    RationaleInstance current = *initial.instance;
    run.candidates.push_back(current);
    for (int round = 1; round <= config.rounds; ++round) {
        auto step = optimize_round(qa, prompt, current, generator, templates, round);
        run.round_generation_calls += step.generation_calls;
        if (step.failed) ++run.failed_rounds;
        if (step.accepted) {
            prompt = step.prompt;
            current = step.instance;
            run.lineage.push_back(prompt);
            run.candidates.push_back(current);
        } else if (!step.rejected_candidate.empty()) {
            run.rejected_prompts.push_back(step.rejected_candidate);
        }
    }

    auto best = select_best(qa, run.candidates, judge, config.keep_policy, templates);
    run.judge_fallback = best.fallback;
    run.best = std::move(best.winner);
    return run;
}

QAPair attach(const QAPair& qa, const RationaleRun& run) {
    if (!run.best) throw ContractError("cannot attach a pruned rationale run (" + qa.id + ")");
    QAPair out = qa;
    const auto& best = *run.best;
    out.rationale = AttachedRationale{best.prompt_version, best.prompt_text, best.rationale,
                                      best.predicted.value_or(AnswerSet{}), best.round, best.regen_attempt};
    return out;
}

// --------------------------------------------------------------- dialogues

namespace {

std::string_view speaker_name(Speaker s) { return s == Speaker::Seeker ? "seeker" : "supporter"; }

} // namespace

EnrichResult enrich_dialogue(const DialogueSession& session, const llm::ModelRef& generator,
                             const PromptTemplates& templates) {
    json turns = json::array();
    for (const auto& t : session.turns) turns.push_back({{"role", speaker_name(t.role)}, {"content", t.content}});
    const std::string prompt = render(templates.get("enrich_dialogue"),
                                      {{"dialogue_json", turns.dump(-1, ' ', false, json::error_handler_t::replace)}});

    auto fallback = [&](std::string note) { return EnrichResult{session, true, std::move(note)}; };
    std::string reply;
    try {
        reply = generator.ask(prompt, "enrich:rewrite:" + session.id).content;
    } catch (const llm::LlmError& e) {
        if (e.fatal()) throw;
        return fallback(std::string("backend failure: ") + e.what());
    }

    const std::string text = strip_fences(reply);
    const auto open = text.find('[');
    const auto close = text.rfind(']');
    if (open == std::string::npos || close == std::string::npos || close < open) {
        return fallback("reply contains no JSON array");
    }
    const json parsed = json::parse(text.substr(open, close - open + 1), nullptr, false);
    if (parsed.is_discarded() || !parsed.is_array()) return fallback("reply is not a JSON array");
    if (parsed.size() != session.turns.size()) {
        return fallback("reply has " + std::to_string(parsed.size()) + " turns, expected " +
                        std::to_string(session.turns.size()));
    }

    DialogueSession out = session;
    for (std::size_t i = 0; i < parsed.size(); ++i) {
        const json& t = parsed[i];
        if (!t.is_object() || !t.contains("role") || !t.contains("content") || !t.at("role").is_string() ||
            !t.at("content").is_string()) {
            return fallback("turn " + std::to_string(i) + " is malformed");
        }
        if (t.at("role").get<std::string>() != speaker_name(session.turns[i].role)) {
            return fallback("turn " + std::to_string(i) + " changes role");
        }
        if (session.turns[i].role == Speaker::Supporter) {
            std::string content = utf8::trim(t.at("content").get<std::string>());
            if (content.empty()) return fallback("turn " + std::to_string(i) + " is empty");
            out.turns[i].content = std::move(content);
        }
    }
    out.enriched = true;
    return {std::move(out), false, {}};
}

} // namespace psyforge::synthesis
