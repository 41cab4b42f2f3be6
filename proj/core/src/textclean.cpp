#include "psyforge/textclean.hpp"

#include <algorithm>
#include <sstream>

#include "embedded_catalog.hpp"
#include "psyforge/prompts.hpp"
#include "psyforge/utf8.hpp"

namespace psyforge::textclean {

void CleanReport::merge(const CleanReport& other) {
    input_chars += other.input_chars;
    output_chars += other.output_chars;
    for (const auto& [rule, count] : other.removals) removals[rule] += count;
}

std::size_t CleanReport::total_removals() const {
    std::size_t n = 0;
    for (const auto& [_, count] : removals) n += count;
    return n;
}

nlohmann::ordered_json to_json(const CleanReport& report) {
    nlohmann::ordered_json j;
    j["input_chars"] = report.input_chars;
    j["output_chars"] = report.output_chars;
    nlohmann::ordered_json removals = nlohmann::ordered_json::object();
    for (const auto& [rule, count] : report.removals) removals[rule] = count;
    j["removals"] = std::move(removals);
    return j;
}

// ------------------------------------------------------------- punctuation

namespace {

enum class CharClass { Cjk, Latin, Other };

CharClass classify(char32_t cp) {
    if (utf8::is_cjk(cp)) return CharClass::Cjk;
    if (utf8::is_ascii_alnum(cp) || utf8::is_fullwidth_alnum(cp)) return CharClass::Latin;
    return CharClass::Other;
}

bool is_ascii_digit(char32_t cp) { return cp >= '0' && cp <= '9'; }

char32_t to_fullwidth(char32_t cp) {
    switch (cp) {
    case U',': return U'，';
    case U'.': return U'。';
    case U'?': return U'？';
    case U'!': return U'！';
    case U':': return U'：';
    case U';': return U'；';
    default: return 0;
    }
}

char32_t to_halfwidth(char32_t cp) {
    if (cp >= 0xFF01 && cp <= 0xFF5E) return cp - 0xFEE0;
    if (cp == U'。') return U'.';
    return 0;
}

} // namespace

std::string normalize_punctuation(std::string_view text) {
    const std::u32string in = utf8::decode(text);
    std::u32string out(in);
    const std::size_t n = in.size();

    // Nearest non-space neighbours, precomputed in both directions.
    std::vector<std::ptrdiff_t> left(n, -1);
    std::vector<std::ptrdiff_t> right(n, -1);
    std::ptrdiff_t last = -1;
    for (std::size_t i = 0; i < n; ++i) {
        left[i] = last;
        if (!utf8::is_space(in[i])) last = static_cast<std::ptrdiff_t>(i);
    }
    last = -1;
    for (std::size_t i = n; i-- > 0;) {
        right[i] = last;
        if (!utf8::is_space(in[i])) last = static_cast<std::ptrdiff_t>(i);
    }

    for (std::size_t i = 0; i < n; ++i) {
        const char32_t cp = in[i];
        const char32_t l = left[i] >= 0 ? in[left[i]] : 0;
        const char32_t r = right[i] >= 0 ? in[right[i]] : 0;
        const CharClass lc = l ? classify(l) : CharClass::Other;
        const CharClass rc = r ? classify(r) : CharClass::Other;
        if (char32_t full = to_fullwidth(cp)) {
            if ((lc == CharClass::Cjk || rc == CharClass::Cjk) && !is_ascii_digit(l) && !is_ascii_digit(r)) {
                out[i] = full;
            }
        } else if (char32_t half = to_halfwidth(cp)) {
            if (lc != CharClass::Cjk && rc != CharClass::Cjk && (lc == CharClass::Latin || rc == CharClass::Latin)) {
                out[i] = half;
            }
        }
    }
    return utf8::encode(out);
}

// ------------------------------------------------------------------- noise

namespace {

bool in_range(char32_t cp, char32_t lo, char32_t hi) { return cp >= lo && cp <= hi; }

bool is_emoji_base(char32_t cp) {
    return in_range(cp, 0x1F000, 0x1FAFF) || in_range(cp, 0x2600, 0x27BF) || cp == 0x2B50 || cp == 0x2B55 ||
           in_range(cp, 0x2B05, 0x2B07) || cp == 0x2B1B || cp == 0x2B1C || cp == 0x231A || cp == 0x231B ||
           cp == 0x2328 || cp == 0x23CF || in_range(cp, 0x23E9, 0x23F3) || in_range(cp, 0x23F8, 0x23FA) ||
           cp == 0x3030 || cp == 0x303D || cp == 0x3297 || cp == 0x3299;
}

bool is_emoji_modifier(char32_t cp) {
    return cp == 0xFE0F || cp == 0xFE0E || cp == 0x20E3 || in_range(cp, 0x1F3FB, 0x1F3FF) ||
           in_range(cp, 0xE0020, 0xE007F);
}

bool is_regional_indicator(char32_t cp) { return in_range(cp, 0x1F1E6, 0x1F1FF); }

/// Length of the emoji sequence starting at i, 0 if none.
std::size_t match_emoji(const std::u32string& s, std::size_t i) {
    const char32_t cp = s[i];
    std::size_t j = i;
    if (is_emoji_base(cp)) {
        j = i + 1;
        if (is_regional_indicator(cp) && j < s.size() && is_regional_indicator(s[j])) ++j;
    } else if ((is_ascii_digit(cp) || cp == '#' || cp == '*') && i + 1 < s.size()) {
        // Keycap: digit [FE0F] 20E3.
        std::size_t k = i + 1;
        if (s[k] == 0xFE0F) ++k;
        if (k < s.size() && s[k] == 0x20E3) j = k + 1;
        else return 0;
    } else if (i + 1 < s.size() && s[i + 1] == 0xFE0F && classify(cp) == CharClass::Other && !utf8::is_space(cp) &&
               cp > 0x7F) {
        // Text symbol forced to emoji presentation (❤️, ©️, ↔️).
        j = i + 1;
    } else {
        return 0;
    }
    for (;;) {
        while (j < s.size() && is_emoji_modifier(s[j])) ++j;
        if (j + 1 < s.size() && s[j] == 0x200D && (is_emoji_base(s[j + 1]) || s[j + 1] > 0x7F)) {
            j += 2;
            continue;
        }
        break;
    }
    return j - i;
}

bool is_url_char(char32_t c) {
    if (c > 0x7E || c <= 0x20) return false;
    if (utf8::is_ascii_alnum(c)) return true;
    static constexpr std::u32string_view kAllowed = U"-._~:/?#[]@!$&'()*+,;=%";
    return kAllowed.find(c) != std::u32string_view::npos;
}

bool starts_with_ci(const std::u32string& s, std::size_t i, std::u32string_view prefix) {
    if (i + prefix.size() > s.size()) return false;
    for (std::size_t k = 0; k < prefix.size(); ++k) {
        char32_t c = s[i + k];
        if (c >= 'A' && c <= 'Z') c += 32;
        if (c != prefix[k]) return false;
    }
    return true;
}

std::size_t trim_url_tail(const std::u32string& s, std::size_t i, std::size_t j) {
    static constexpr std::u32string_view kTrailing = U".,;:!?')]";
    while (j > i && kTrailing.find(s[j - 1]) != std::u32string_view::npos) --j;
    return j;
}

bool is_domain_char(char32_t c) { return utf8::is_ascii_alnum(c) || c == '-'; }

/// Length of a URL starting at i, 0 if none.
std::size_t match_url(const std::u32string& s, std::size_t i) {
    if (i > 0 && (utf8::is_ascii_alnum(s[i - 1]) || s[i - 1] == '.' || s[i - 1] == '@' || s[i - 1] == '/')) return 0;
    for (std::u32string_view scheme : {U"https://", U"http://", U"ftp://", U"www."}) {
        if (starts_with_ci(s, i, scheme)) {
            std::size_t j = i + scheme.size();
            while (j < s.size() && is_url_char(s[j])) ++j;
            j = trim_url_tail(s, i, j);
            return j > i + scheme.size() ? j - i : 0;
        }
    }
    // Bare domain: label(.label)+ ending in a known TLD, optional port/path.
    static const std::vector<std::u32string> kTlds = {U"com", U"cn", U"net", U"org", U"edu", U"gov", U"io",
                                                       U"me",  U"cc", U"co",  U"info", U"top", U"xyz", U"tv",
                                                       U"app", U"dev", U"ly", U"hk", U"tw", U"jp", U"uk"};
    std::size_t j = i;
    std::size_t labels = 0;
    std::size_t last_label_start = i;
    while (j < s.size() && is_domain_char(s[j])) {
        last_label_start = j;
        while (j < s.size() && is_domain_char(s[j])) ++j;
        ++labels;
        if (j + 1 < s.size() && s[j] == '.' && is_domain_char(s[j + 1])) {
            ++j;
            continue;
        }
        break;
    }
    if (labels < 2) return 0;
    std::u32string tld(s.begin() + last_label_start, s.begin() + j);
    for (auto& c : tld) if (c >= 'A' && c <= 'Z') c += 32;
    if (std::find(kTlds.begin(), kTlds.end(), tld) == kTlds.end()) return 0;
    if (j < s.size() && (s[j] == ':' || s[j] == '/')) {
        while (j < s.size() && is_url_char(s[j])) ++j;
        j = trim_url_tail(s, i, j);
    }
    return j - i;
}

struct Catalog {
    std::vector<std::string> utf8_entries;
    std::vector<std::u32string> entries; // longest first
    std::string name;
};

const Catalog& catalog() {
    static const Catalog instance = [] {
        Catalog c;
        const auto& [name, text] = detail::kEmbeddedCatalog[0];
        c.name = std::string(name);
        std::istringstream in{std::string(text)};
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line[0] == '#') continue;
            c.utf8_entries.push_back(line);
        }
        std::stable_sort(c.utf8_entries.begin(), c.utf8_entries.end(), [](const auto& a, const auto& b) {
            return utf8::length(a) > utf8::length(b);
        });
        for (const auto& e : c.utf8_entries) c.entries.push_back(utf8::decode(e));
        return c;
    }();
    return instance;
}

std::size_t match_emoticon(const std::u32string& s, std::size_t i) {
    for (const auto& e : catalog().entries) {
        if (e.size() > s.size() - i || s.compare(i, e.size(), e) != 0) continue;
        if (utf8::is_ascii_alnum(e.front()) && i > 0 && utf8::is_ascii_alnum(s[i - 1])) continue;
        const std::size_t end = i + e.size();
        if (utf8::is_ascii_alnum(e.back()) && end < s.size() && utf8::is_ascii_alnum(s[end])) continue;
        return e.size();
    }
    return 0;
}

/// One removal pass. Returns the number of matches removed.
std::size_t strip_once(std::u32string& text, CleanReport& report) {
    std::u32string out;
    out.reserve(text.size());
    std::vector<std::size_t> cuts;
    std::size_t removed = 0;
    std::size_t i = 0;
    while (i < text.size()) {
        std::size_t len = 0;
        const char* rule = nullptr;
        if ((len = match_url(text, i)) > 0) {
            rule = "url";
        } else if ((len = match_emoji(text, i)) > 0) {
            rule = "emoji";
        } else if ((len = match_emoticon(text, i)) > 0) {
            rule = "emoticon";
        } else if (text[i] == 0xFE0F || text[i] == 0x200D) {
            // Stray presentation selector or joiner left behind by an edit.
            len = 1;
        }
        if (len == 0) {
            out.push_back(text[i]);
            ++i;
            continue;
        }
        if (rule != nullptr) {
            ++report.removals[rule];
            ++removed;
        }
        cuts.push_back(out.size());
        i += len;
    }
    if (cuts.empty()) return 0;

    // Collapse the white space touching each removal point.
    std::vector<bool> drop(out.size(), false);
    for (std::size_t p : cuts) {
        std::size_t a = p;
        while (a > 0 && utf8::is_space(out[a - 1])) --a;
        std::size_t b = p;
        while (b < out.size() && utf8::is_space(out[b])) ++b;
        if (a == 0 || b == out.size()) {
            for (std::size_t k = a; k < b; ++k) drop[k] = true;
        } else if (p > a && b > p) {
            for (std::size_t k = p; k < b; ++k) drop[k] = true;
        }
    }
    std::u32string collapsed;
    collapsed.reserve(out.size());
    for (std::size_t k = 0; k < out.size(); ++k) {
        if (!drop[k]) collapsed.push_back(out[k]);
    }
    text = std::move(collapsed);
    return removed == 0 ? 1 : removed;
}

} // namespace

StripResult strip_noise(std::string_view text) {
    StripResult result;
    std::u32string s = utf8::decode(text);
    result.report.input_chars = s.size();
    // Removing a span can join fragments into new noise (":" + emoji + ")").
    for (int pass = 0; pass < 8 && strip_once(s, result.report) > 0; ++pass) {
    }
    result.report.output_chars = s.size();
    result.text = utf8::encode(s);
    return result;
}

StripResult clean_text(std::string_view text) {
    // Noise goes first: emoticons such as ":)" must be matched before their
    // punctuation is widened.
    StripResult result = strip_noise(text);
    result.text = normalize_punctuation(result.text);
    return result;
}

const std::vector<std::string>& emoticon_catalog() { return catalog().utf8_entries; }

std::string_view emoticon_catalog_name() { return catalog().name; }

// ---------------------------------------------------------------- verdicts

std::string_view to_string(VerdictKind kind) {
    switch (kind) {
    case VerdictKind::Keep: return "keep";
    case VerdictKind::Drop: return "drop";
    case VerdictKind::Unresolved: return "unresolved";
    }
    return "unresolved";
}

namespace {

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

} // namespace

Verdict parse_verdict(std::string_view reply) {
    for (std::size_t i = 0; i + 4 <= reply.size(); ++i) {
        const auto token = reply.substr(i, 4);
        if (token != "KEEP" && token != "DROP") continue;
        if (i > 0 && is_word_char(reply[i - 1])) continue;
        if (i + 4 < reply.size() && is_word_char(reply[i + 4])) continue;
        if (token == "KEEP") return {VerdictKind::Keep, {}};
        std::string_view rest = reply.substr(i + 4);
        if (const auto nl = rest.find('\n'); nl != std::string_view::npos) rest = rest.substr(0, nl);
        std::string reason = utf8::trim(rest);
        // Strip leading separators: ":", "：", "-", "—", "–", ",", "，".
        for (bool changed = true; changed && !reason.empty();) {
            changed = false;
            for (std::string_view sep : {":", "：", "-", "—", "–", ",", "，"}) {
                if (reason.starts_with(sep)) {
                    reason = utf8::trim(std::string_view(reason).substr(sep.size()));
                    changed = true;
                }
            }
        }
        return {VerdictKind::Drop, reason};
    }
    return {VerdictKind::Unresolved, "no KEEP/DROP verdict in reply"};
}

std::string render_dialogue(const DialogueSession& session) {
    std::string out;
    for (const auto& t : session.turns) {
        out += t.role == Speaker::Seeker ? "来访者: " : "咨询师: ";
        out += t.content;
        out += '\n';
    }
    return out;
}

Verdict filter_substantive(const DialogueSession& session, const llm::ModelRef& judge,
                           const std::string& prompt_template, const std::string& tag_prefix) {
    const std::string prompt = render(prompt_template, {{"dialogue", render_dialogue(session)}});
    try {
        const auto response = judge.ask(prompt, tag_prefix + ":substantive:" + session.id);
        return parse_verdict(response.content);
    } catch (const llm::LlmError& e) {
        if (e.fatal()) throw;
        return {VerdictKind::Unresolved, std::string("backend failure: ") + e.what()};
    }
}

} // namespace psyforge::textclean
