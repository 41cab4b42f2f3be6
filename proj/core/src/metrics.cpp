#include "psyforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "psyforge/error.hpp"
#include "psyforge/utf8.hpp"

namespace psyforge::metrics {

std::string_view to_string(ExtractionRule rule) {
    switch (rule) {
    case ExtractionRule::PostThink: return "post_think";
    case ExtractionRule::AnswerKeyword: return "answer_keyword";
    case ExtractionRule::TrailingLetters: return "trailing_letters";
    case ExtractionRule::None: return "none";
    }
    return "none";
}

// ------------------------------------------------------------ answer parsing

namespace {

using Letters = std::vector<char>; // in order of appearance

bool is_ascii_letter(char32_t c) { return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z'); }

char32_t ascii_lower(char32_t c) { return (c >= 'A' && c <= 'Z') ? c + 32 : c; }

/// Option label at position i, accepting lower case only when `allow_lower`.
std::optional<char> label_at(const std::u32string& s, std::size_t i, bool allow_lower) {
    char32_t c = s[i];
    if (allow_lower && c >= 'a' && c <= 'e') c -= 32;
    if (c >= 0xFF21 && c <= 0xFF25) c = c - 0xFF21 + 'A'; // full-width Ａ..Ｅ
    if (c < 'A' || c > 'E') return std::nullopt;
    const bool prev_letter = i > 0 && is_ascii_letter(s[i - 1]);
    const bool next_letter = i + 1 < s.size() && is_ascii_letter(s[i + 1]);
    if (prev_letter || next_letter) return std::nullopt;
    return static_cast<char>(c);
}

bool is_run_separator(char32_t c) {
    return c == U' ' || c == U'\t' || c == U'、' || c == U',' || c == U'，' || c == U'/' || c == U'和' ||
           c == U'与' || c == U'及' || c == U'&' || c == U'+' || c == U'　' || c == U';' || c == U'；';
}

/// Reads a run of option letters starting at `pos`, such as "ACD", "A、C",
/// "B and D". Lower case letters count here because a keyword precedes them.
Letters read_letter_run(const std::u32string& s, std::size_t pos) {
    Letters out;
    std::size_t i = pos;
    while (i < s.size()) {
        // Contiguous capital labels ("ACD") are a single token.
        std::size_t j = i;
        Letters word;
        while (j < s.size()) {
            char32_t c = s[j];
            if (c >= 'a' && c <= 'e') c -= 32;
            if (c >= 0xFF21 && c <= 0xFF25) c = c - 0xFF21 + 'A';
            if (c < 'A' || c > 'E') break;
            word.push_back(static_cast<char>(c));
            ++j;
        }
        if (word.empty() || (j < s.size() && is_ascii_letter(s[j])) || (i > 0 && is_ascii_letter(s[i - 1]))) break;
        out.insert(out.end(), word.begin(), word.end());
        i = j;
        // Separator followed by another label continues the run.
        std::size_t k = i;
        while (k < s.size() && is_run_separator(s[k])) ++k;
        if (k + 3 <= s.size() && ascii_lower(s[k]) == 'a' && ascii_lower(s[k + 1]) == 'n' &&
            ascii_lower(s[k + 2]) == 'd') {
            k += 3;
            while (k < s.size() && is_run_separator(s[k])) ++k;
        }
        if (k == i || k >= s.size()) break;
        i = k;
    }
    return out;
}

bool is_keyword_filler(char32_t c) {
    static const std::u32string kFiller = U" \t:：是为為应應该該选選择擇项項\"'“”‘’(（【[*=";
    return kFiller.find(c) != std::u32string::npos;
}

Letters keyword_rule(const std::u32string& s) {
    static const std::vector<std::u32string> kKeywords = {
        U"正确答案", U"答案", U"正确选项", U"故选", U"应选", U"answer is", U"answer:", U"answer：", U"answers are",
    };
    std::u32string lower(s);
    for (auto& c : lower) c = ascii_lower(c);

    std::vector<std::size_t> ends;
    for (const auto& kw : kKeywords) {
        for (std::size_t p = lower.find(kw); p != std::u32string::npos; p = lower.find(kw, p + 1)) {
            ends.push_back(p + kw.size());
        }
    }
    std::sort(ends.begin(), ends.end());
    for (auto it = ends.rbegin(); it != ends.rend(); ++it) {
        std::size_t i = *it;
        for (;;) {
            while (i < s.size() && is_keyword_filler(s[i])) ++i;
            // "option B" / "options A and C"
            if (lower.compare(i, 6, U"option") == 0) {
                i += 6;
                if (i < s.size() && lower[i] == 's') ++i;
                continue;
            }
            break;
        }
        if (i >= s.size()) continue;
        Letters run = read_letter_run(s, i);
        if (!run.empty()) return run;
    }
    return {};
}

Letters trailing_line_rule(const std::u32string& s) {
    std::size_t end = s.size();
    while (end > 0) {
        std::size_t start = s.rfind(U'\n', end - 1);
        start = start == std::u32string::npos ? 0 : start + 1;
        std::u32string line = s.substr(start, end - start);
        std::size_t a = 0;
        std::size_t b = line.size();
        while (a < b && utf8::is_space(line[a])) ++a;
        while (b > a && utf8::is_space(line[b - 1])) --b;
        if (a == b) {
            if (start == 0) break;
            end = start - 1;
            continue;
        }
        line = line.substr(a, b - a);
        while (!line.empty() && (line.back() == U'.' || line.back() == U'。')) line.pop_back();
        static const std::u32string kOpen = U"(（【[";
        static const std::u32string kClose = U")）】]";
        if (!line.empty() && kOpen.find(line.front()) != std::u32string::npos) line.erase(line.begin());
        if (!line.empty() && kClose.find(line.back()) != std::u32string::npos) line.pop_back();
        Letters out;
        for (char32_t c : line) {
            if (c >= 0xFF21 && c <= 0xFF25) c = c - 0xFF21 + 'A';
            if (c >= 'A' && c <= 'E') {
                out.push_back(static_cast<char>(c));
            } else if (!is_run_separator(c)) {
                return {};
            }
        }
        return out;
    }
    return {};
}

Letters standalone_letters(const std::u32string& s) {
    Letters out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (auto l = label_at(s, i, false)) out.push_back(*l);
    }
    return out;
}

ParsedAnswer finish(const Letters& letters, ExtractionRule rule, QuestionKind kind) {
    ParsedAnswer parsed;
    parsed.rule = rule;
    AnswerSet set;
    if (kind == QuestionKind::SMCQ) {
        set.insert(letters.front());
        parsed.ambiguous = std::any_of(letters.begin(), letters.end(), [&](char c) { return c != letters.front(); });
    } else {
        for (char c : letters) set.insert(c);
    }
    parsed.labels = set;
    return parsed;
}

} // namespace

ParsedAnswer parse_answer(std::string_view text, QuestionKind kind) {
    const std::u32string s = utf8::decode(text);

    static const std::u32string kCloseThink = U"</think>";
    if (const auto pos = s.rfind(kCloseThink); pos != std::u32string::npos) {
        const std::u32string segment = s.substr(pos + kCloseThink.size());
        for (auto rule : {keyword_rule, trailing_line_rule, standalone_letters}) {
            Letters letters = rule(segment);
            if (!letters.empty()) return finish(letters, ExtractionRule::PostThink, kind);
        }
    }
    if (Letters letters = keyword_rule(s); !letters.empty()) {
        return finish(letters, ExtractionRule::AnswerKeyword, kind);
    }
    if (Letters letters = trailing_line_rule(s); !letters.empty()) {
        return finish(letters, ExtractionRule::TrailingLetters, kind);
    }
    return {};
}

// ------------------------------------------------------------------ accuracy

double elastic_credit(const Prediction& predicted, const AnswerSet& gold) {
    if (gold.empty()) throw ContractError("gold answer set must be non-empty");
    if (!predicted || predicted->empty()) return 0.0;
    if (*predicted == gold) return 1.0;
    if (predicted->is_subset_of(gold)) {
        return static_cast<double>(predicted->intersect(gold).size()) / static_cast<double>(gold.size());
    }
    return 0.0;
}

double standard_accuracy(std::span<const ScoredItem> items) {
    if (items.empty()) throw ContractError("standard_accuracy requires at least one item");
    std::size_t correct = 0;
    for (const auto& item : items) {
        if (item.gold.empty()) throw ContractError("gold answer set must be non-empty");
        if (item.predicted && *item.predicted == item.gold) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(items.size());
}

double elastic_accuracy(std::span<const ScoredItem> items) {
    if (items.empty()) throw ContractError("elastic_accuracy requires at least one item");
    double total = 0.0;
    for (const auto& item : items) total += elastic_credit(item.predicted, item.gold);
    return 100.0 * total / static_cast<double>(items.size());
}

// ---------------------------------------------------------------- text scores

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string run;
    auto flush = [&] {
        if (!run.empty()) tokens.push_back(std::move(run));
        run.clear();
    };
    for (char32_t cp : utf8::decode(text)) {
        if (utf8::is_fullwidth_alnum(cp)) cp -= 0xFEE0;
        if (utf8::is_ascii_alnum(cp)) {
            run.push_back(static_cast<char>(ascii_lower(cp)));
            continue;
        }
        flush();
        if (utf8::is_cjk(cp)) {
            std::string token;
            utf8::append(token, cp);
            tokens.push_back(std::move(token));
        }
    }
    flush();
    return tokens;
}

namespace {

RougeScore make_score(double overlap, std::size_t candidate_len, std::size_t reference_len) {
    RougeScore s;
    if (overlap <= 0 || candidate_len == 0) return s;
    s.recall = overlap / static_cast<double>(reference_len);
    s.precision = overlap / static_cast<double>(candidate_len);
    s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

void require_reference(std::size_t reference_len) {
    if (reference_len == 0) throw ContractError("reference text has no tokens");
}

} // namespace

RougeScore rouge_1(std::span<const std::string> candidate, std::span<const std::string> reference) {
    require_reference(reference.size());
    std::unordered_map<std::string_view, std::size_t> ref_counts;
    for (const auto& t : reference) ++ref_counts[t];
    std::size_t overlap = 0;
    for (const auto& t : candidate) {
        auto it = ref_counts.find(t);
        if (it != ref_counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    return make_score(static_cast<double>(overlap), candidate.size(), reference.size());
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
    std::vector<std::size_t> prev(b.size() + 1, 0);
    std::vector<std::size_t> cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
    require_reference(reference.size());
    return make_score(static_cast<double>(lcs_length(candidate, reference)), candidate.size(), reference.size());
}

RougeScore rouge_1(std::string_view candidate, std::string_view reference) {
    const auto c = tokenize(candidate);
    const auto r = tokenize(reference);
    return rouge_1(std::span<const std::string>(c), std::span<const std::string>(r));
}

RougeScore rouge_l(std::string_view candidate, std::string_view reference) {
    const auto c = tokenize(candidate);
    const auto r = tokenize(reference);
    return rouge_l(std::span<const std::string>(c), std::span<const std::string>(r));
}

double bleu_4(std::span<const std::string> candidate, std::span<const std::string> reference) {
    require_reference(reference.size());
    if (candidate.empty()) return 0.0;

    double log_sum = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        std::map<std::vector<std::string_view>, std::size_t> ref_counts;
        for (std::size_t i = 0; i + n <= reference.size(); ++i) {
            ++ref_counts[std::vector<std::string_view>(reference.begin() + i, reference.begin() + i + n)];
        }
        std::map<std::vector<std::string_view>, std::size_t> cand_counts;
        std::size_t total = 0;
        for (std::size_t i = 0; i + n <= candidate.size(); ++i) {
            ++cand_counts[std::vector<std::string_view>(candidate.begin() + i, candidate.begin() + i + n)];
            ++total;
        }
        std::size_t clipped = 0;
        for (const auto& [gram, count] : cand_counts) {
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end()) clipped += std::min(count, it->second);
        }
        double precision = 0.0;
        if (clipped > 0) {
            precision = static_cast<double>(clipped) / static_cast<double>(total);
        } else if (n == 1) {
            return 0.0;
        } else {
            precision = 1.0 / (2.0 * static_cast<double>(std::max<std::size_t>(total, 1)));
        }
        log_sum += std::log(precision);
    }
    const double c = static_cast<double>(candidate.size());
    const double r = static_cast<double>(reference.size());
    const double brevity = c > r ? 1.0 : std::exp(1.0 - r / c);
    return brevity * std::exp(log_sum / 4.0);
}

double bleu_4(std::string_view candidate, std::string_view reference) {
    const auto c = tokenize(candidate);
    const auto r = tokenize(reference);
    return bleu_4(std::span<const std::string>(c), std::span<const std::string>(r));
}

// ----------------------------------------------------------------- benchmark

EvalReport evaluate_benchmark(const std::vector<CompletionRecord>& outputs, const std::vector<QAPair>& benchmark,
                              AverageMode mode) {
    std::unordered_map<std::string, const CompletionRecord*> by_id;
    for (const auto& o : outputs) {
        if (!by_id.emplace(o.qa_id, &o).second) throw ValidationError("duplicate output id '" + o.qa_id + "'");
    }

    struct Accumulator {
        std::vector<ScoredItem> smcq;
        std::vector<ScoredItem> mmcq;
    };
    std::map<std::string, Accumulator> acc;
    EvalReport report;
    double rouge1_sum = 0.0;
    double rougel_sum = 0.0;
    double bleu_sum = 0.0;

    for (const auto& qa : benchmark) {
        const std::string category = qa.category.empty() ? "all" : qa.category;
        auto& scores = report.per_category[category];
        auto& bucket = acc[category];
        ++report.total_items;
        auto it = by_id.find(qa.id);
        const bool missing = it == by_id.end();
        if (missing) {
            ++scores.missing;
            ++report.missing;
        }
        if (qa.kind == QuestionKind::OPEN) {
            ++scores.open_count;
            ++report.open_ended.count;
            if (!missing) {
                const auto cand = tokenize(it->second->text);
                const auto ref = tokenize(qa.reference_answer);
                rouge1_sum += rouge_1(std::span<const std::string>(cand), std::span<const std::string>(ref)).f1;
                rougel_sum += rouge_l(std::span<const std::string>(cand), std::span<const std::string>(ref)).f1;
                bleu_sum += bleu_4(std::span<const std::string>(cand), std::span<const std::string>(ref));
            }
            continue;
        }
        Prediction predicted;
        if (!missing) {
            const ParsedAnswer parsed = parse_answer(it->second->text, qa.kind);
            predicted = parsed.labels;
            if (parsed.ambiguous) ++report.ambiguous;
        }
        (qa.kind == QuestionKind::SMCQ ? bucket.smcq : bucket.mmcq).push_back({predicted, qa.gold});
    }

    std::vector<double> standard_columns;
    std::vector<double> elastic_columns;
    double weighted_exact = 0.0;
    double weighted_elastic = 0.0;
    std::size_t mcq_items = 0;
    for (auto& [category, scores] : report.per_category) {
        const auto& bucket = acc[category];
        scores.smcq_count = bucket.smcq.size();
        scores.mmcq_count = bucket.mmcq.size();
        if (!bucket.smcq.empty()) {
            scores.smcq_standard = standard_accuracy(bucket.smcq);
            standard_columns.push_back(scores.smcq_standard);
            elastic_columns.push_back(scores.smcq_standard);
            weighted_exact += scores.smcq_standard * static_cast<double>(bucket.smcq.size());
            weighted_elastic += scores.smcq_standard * static_cast<double>(bucket.smcq.size());
        }
        if (!bucket.mmcq.empty()) {
            scores.mmcq_standard = standard_accuracy(bucket.mmcq);
            scores.mmcq_elastic = elastic_accuracy(bucket.mmcq);
            standard_columns.push_back(scores.mmcq_standard);
            elastic_columns.push_back(scores.mmcq_elastic);
            weighted_exact += scores.mmcq_standard * static_cast<double>(bucket.mmcq.size());
            weighted_elastic += scores.mmcq_elastic * static_cast<double>(bucket.mmcq.size());
        }
        mcq_items += bucket.smcq.size() + bucket.mmcq.size();
    }
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    if (mode == AverageMode::Uniform) {
        report.average_standard = mean(standard_columns);
        report.average_elastic = mean(elastic_columns);
    } else if (mcq_items > 0) {
        report.average_standard = weighted_exact / static_cast<double>(mcq_items);
        report.average_elastic = weighted_elastic / static_cast<double>(mcq_items);
    }
    if (report.open_ended.count > 0) {
        const double n = static_cast<double>(report.open_ended.count);
        report.open_ended.rouge1 = 100.0 * rouge1_sum / n;
        report.open_ended.rougeL = 100.0 * rougel_sum / n;
        report.open_ended.bleu4 = 100.0 * bleu_sum / n;
    }
    return report;
}

namespace {

double round2(double x) { return std::round(x * 100.0) / 100.0; }

} // namespace

nlohmann::ordered_json to_json(const EvalReport& report) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json categories = nlohmann::ordered_json::object();
    nlohmann::ordered_json counts = nlohmann::ordered_json::object();
    for (const auto& [category, s] : report.per_category) {
        nlohmann::ordered_json c;
        if (s.smcq_count > 0) c["smcq_standard"] = round2(s.smcq_standard);
        if (s.mmcq_count > 0) {
            c["mmcq_standard"] = round2(s.mmcq_standard);
            c["mmcq_elastic"] = round2(s.mmcq_elastic);
        }
        categories[category] = c.is_null() ? nlohmann::ordered_json::object() : c;
        nlohmann::ordered_json n;
        n["smcq"] = s.smcq_count;
        n["mmcq"] = s.mmcq_count;
        n["open"] = s.open_count;
        n["missing"] = s.missing;
        counts[category] = std::move(n);
    }
    j["per_category"] = std::move(categories);
    nlohmann::ordered_json open;
    open["rouge1"] = round2(report.open_ended.rouge1);
    open["rougeL"] = round2(report.open_ended.rougeL);
    open["bleu4"] = round2(report.open_ended.bleu4);
    open["count"] = report.open_ended.count;
    j["open_ended"] = std::move(open);
    j["average_standard"] = round2(report.average_standard);
    j["average_elastic"] = round2(report.average_elastic);
    nlohmann::ordered_json totals;
    totals["items"] = report.total_items;
    totals["missing"] = report.missing;
    totals["ambiguous"] = report.ambiguous;
    j["counts"] = std::move(counts);
    j["totals"] = std::move(totals);
    return j;
}

} // namespace psyforge::metrics
