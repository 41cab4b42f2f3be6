#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyforge/corpus.hpp"
#include "psyforge/llm.hpp"

namespace psyforge::textclean {

struct CleanReport {
    std::size_t input_chars = 0;
    std::size_t output_chars = 0;
    /// Rule name (emoji, emoticon, url) to number of removed matches.
    std::map<std::string, std::size_t> removals{{"emoji", 0}, {"emoticon", 0}, {"url", 0}};

    void merge(const CleanReport& other);
    std::size_t total_removals() const;
};

nlohmann::ordered_json to_json(const CleanReport& report);

/// Context-sensitive punctuation normalisation. Half-width , . ? ! : ; next
/// to a CJK character become full-width; full-width ASCII forms with no CJK
/// neighbour and a Latin neighbour become half-width. Neighbours are the
/// nearest non-space character on each side. Idempotent.
std::string normalize_punctuation(std::string_view text);

struct StripResult {
    std::string text;
    CleanReport report;
};

/// Removes emoji sequences, catalogued emoticons and URLs, collapsing the
/// white space around each removed span. Idempotent.
StripResult strip_noise(std::string_view text);

/// strip_noise followed by normalize_punctuation.
StripResult clean_text(std::string_view text);

/// Emoticons shipped with the library, longest first.
const std::vector<std::string>& emoticon_catalog();
std::string_view emoticon_catalog_name();

enum class VerdictKind { Keep, Drop, Unresolved };

struct Verdict {
    VerdictKind kind = VerdictKind::Unresolved;
    /// Model-stated reason for Drop, error description for Unresolved.
    std::string reason;
};

std::string_view to_string(VerdictKind kind);

/// Finds the first upper-case KEEP or DROP token (optionally after
/// "VERDICT:"); the text following DROP is the reason.
Verdict parse_verdict(std::string_view reply);

/// Renders a dialogue as "来访者: ... / 咨询师: ..." lines for prompts.
std::string render_dialogue(const DialogueSession& session);

/// Asks the judge whether the supporter turns give concrete advice. Backend
/// failures and unparseable replies yield Unresolved, never Drop.
Verdict filter_substantive(const DialogueSession& session, const llm::ModelRef& judge,
                           const std::string& prompt_template, const std::string& tag_prefix = "clean");

} // namespace psyforge::textclean
