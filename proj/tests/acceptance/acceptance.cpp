// Acceptance checks. Each criterion prints one PASS/FAIL line; the process
// exits non-zero when any criterion fails. Tolerances and time limits are
// pinned here and nowhere else.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "psyforge/corpus.hpp"
#include "psyforge/dedup.hpp"
#include "psyforge/metrics.hpp"
#include "psyforge/pipeline.hpp"
#include "psyforge/prompts.hpp"
#include "psyforge/reward.hpp"
#include "psyforge/selection.hpp"
#include "psyforge/synthesis.hpp"
#include "psyforge/utf8.hpp"
#include "test_support.hpp"

using namespace psyforge;
using nlohmann::json;
namespace ts = psyforge::testing;

namespace {

struct Outcome {
    bool ok = true;
    std::string detail;

    void expect(bool condition, const std::string& what) {
        if (!condition && ok) detail = what;
        ok = ok && condition;
    }
};

int failures = 0;

void criterion(int number, const std::string& name, double limit_s, const std::function<Outcome()>& body) {
    const auto start = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
        outcome = body();
    } catch (const std::exception& e) {
        outcome.ok = false;
        outcome.detail = std::string("exception: ") + e.what();
    }
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (outcome.ok && elapsed >= limit_s) {
        outcome.ok = false;
        outcome.detail = "took " + std::to_string(elapsed) + " s, limit " + std::to_string(limit_s) + " s";
    }
    if (!outcome.ok) ++failures;
    std::printf("%s  %2d  %-40s %7.3f s%s%s\n", outcome.ok ? "PASS" : "FAIL", number, name.c_str(), elapsed,
                outcome.detail.empty() ? "" : "  ", outcome.detail.c_str());
    std::fflush(stdout);
}

// ---------------------------------------------------------------- oracles

/// Set-overlap reward written directly from its definition over label
/// strings, sharing nothing with the library's bitmask arithmetic.
double reward_oracle(const std::string& predicted, const std::string& gold) {
    if (predicted.empty()) return -1.0;
    if (predicted == gold) return 1.0;
    const bool subset = std::all_of(predicted.begin(), predicted.end(),
                                    [&](char c) { return gold.find(c) != std::string::npos; });
    if (!subset) return -1.0;
    return static_cast<double>(predicted.size()) / static_cast<double>(gold.size());
}

std::vector<std::string> subsets_of(const std::string& labels) {
    std::vector<std::string> out;
    for (unsigned mask = 0; mask < (1U << labels.size()); ++mask) {
        std::string s;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (mask & (1U << i)) s += labels[i];
        }
        out.push_back(s);
    }
    return out;
}

double exact_jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
    std::size_t inter = 0;
    for (const auto& x : a) inter += b.count(x);
    return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

/// Longest common subsequence by enumerating every subsequence of `a`.
std::size_t lcs_brute_force(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::size_t best = 0;
    for (unsigned mask = 0; mask < (1U << a.size()); ++mask) {
        std::vector<std::string> sub;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (mask & (1U << i)) sub.push_back(a[i]);
        }
        std::size_t j = 0;
        for (const auto& tok : b) {
            if (j < sub.size() && sub[j] == tok) ++j;
        }
        if (j == sub.size()) best = std::max(best, sub.size());
    }
    return best;
}

QAPair mcq(const std::string& id, const std::string& gold) {
    QAPair qa;
    qa.id = id;
    qa.question = "题目 " + id;
    qa.options = {{'A', "甲"}, {'B', "乙"}, {'C', "丙"}, {'D', "丁"}};
    qa.gold = AnswerSet::from_string(gold);
    qa.kind = gold.size() > 1 ? QuestionKind::MMCQ : QuestionKind::SMCQ;
    return qa;
}

json reply(const std::string& tag, const std::string& text) { return {{"match", "tag:" + tag}, {"reply", text}}; }
json failure(const std::string& tag) { return {{"match", "tag:" + tag}, {"error", "transport"}}; }

// -------------------------------------------------------------- criteria

Outcome reward_oracle_exhaustion() {
    Outcome out;
    std::size_t cases = 0;
    std::size_t mismatches = 0;
    for (const auto& gold : subsets_of("ABCD")) {
        if (gold.empty()) continue;
        for (const auto& pred : subsets_of("ABCD")) {
            ++cases;
            const double got = reward::accuracy_reward(AnswerSet::from_string(pred), AnswerSet::from_string(gold));
            if (got != reward_oracle(pred, gold)) ++mismatches;
        }
    }
    out.expect(cases == 240, "expected 240 combinations, enumerated " + std::to_string(cases));
    out.expect(mismatches == 0, std::to_string(mismatches) + " mismatches");
    out.detail = out.ok ? "240/240 agree" : out.detail;
    return out;
}

Outcome reward_constants() {
    Outcome out;
    struct Case {
        const char* text;
        bool well_formed;
    };
    const Case grammar[] = {
        {"<think>先回忆定义。</think>答案：B", true},
        {"<think>reasoning</think>B", true},
        {"  \n<think>推理</think>\n答案：AC", true},
        {"<think>\n多行\n推理\n</think>\n\nB", true},
        {"<think>x</think> 最终答案是 D。", true},
        {"\t<think>步骤一；步骤二</think>C", true},
        {"<think>a</think>b", true},
        {"<think>长推理 with English words</think>The answer is A", true},
        {"答案：B", false},
        {"", false},
        {"<think></think>B", false},
        {"<think>   </think>B", false},
        {"<think>推理</think>", false},
        {"<think>推理</think>   \n", false},
        {"前言<think>推理</think>B", false},
        {"<think>推理</think>B</think>", false},
        {"<think><think>推理</think>B", false},
        {"</think>推理<think>B", false},
        {"<think>推理 B", false},
        {"推理</think>B", false},
        {"<Think>推理</Think>B", false},
        {"<think>a</think>B<think>b</think>C", false},
    };
    std::size_t n = 0;
    for (const auto& c : grammar) {
        ++n;
        const double got = reward::format_reward(c.text);
        out.expect(got == (c.well_formed ? 1.25 : -1.0), std::string("grammar case: ") + c.text);
    }
    out.expect(n >= 20, "fixture too small");

    CompletionRecord best{"hi", "<think>铃声与食物配对，属于经典条件反射。</think>答案：B", AnswerSet::from_string("B")};
    CompletionRecord worst{"lo", "我认为答案：A", AnswerSet::from_string("B")};
    out.expect(reward::final_reward(best).final == 2.25, "designated maximum fixture is not 2.25");
    out.expect(reward::final_reward(worst).final == -2.0, "designated minimum fixture is not -2");
    if (out.ok) out.detail = std::to_string(n) + " grammar cases, extremes -2 and 2.25";
    return out;
}

Outcome minhash_fidelity() {
    Outcome out;
    std::mt19937_64 rng(20240501);
    constexpr std::size_t kPairs = 100;
    double error_sum = 0.0;
    for (std::size_t p = 0; p < kPairs; ++p) {
        // Shared core plus private tails gives exact Jaccard spread over [0, 1].
        const std::size_t shared = rng() % 120;
        const std::size_t only_a = rng() % 60 + (shared == 0 ? 1 : 0);
        const std::size_t only_b = rng() % 60;
        std::set<std::string> a;
        std::set<std::string> b;
        std::size_t next = 0;
        auto fresh = [&] { return "s" + std::to_string(p) + "_" + std::to_string(next++); };
        for (std::size_t i = 0; i < shared; ++i) {
            auto s = fresh();
            a.insert(s);
            b.insert(s);
        }
        for (std::size_t i = 0; i < only_a; ++i) a.insert(fresh());
        for (std::size_t i = 0; i < only_b; ++i) b.insert(fresh());
        if (b.empty()) b.insert(fresh());
        const auto sa = dedup::minhash_signature(a, 256, 42);
        const auto sb = dedup::minhash_signature(b, 256, 42);
        error_sum += std::abs(dedup::estimate_jaccard(sa, sb) - exact_jaccard(a, b));
    }
    const double mean_error = error_sum / kPairs;
    out.expect(mean_error <= 0.08, "mean error " + std::to_string(mean_error));

    // 1k-item corpus: 250 random base strings, each with three mutated copies.
    const std::u32string alphabet = U"心理学认知情绪记忆发展人格社会咨询治疗焦虑抑郁压力睡眠行为动机学习注意思维语言感觉知觉意识";
    std::vector<std::string> texts;
    for (int base = 0; base < 250; ++base) {
        std::u32string s;
        for (int i = 0; i < 80; ++i) s += alphabet[rng() % alphabet.size()];
        for (int copy = 0; copy < 4; ++copy) {
            std::u32string v = s;
            const int edits = copy == 0 ? 0 : static_cast<int>(rng() % 3);
            for (int e = 0; e < edits; ++e) v[rng() % v.size()] = alphabet[rng() % alphabet.size()];
            texts.push_back(utf8::encode(v));
        }
    }
    std::vector<std::set<std::string>> shingles;
    dedup::LshIndex index(32, 8);
    for (std::size_t i = 0; i < texts.size(); ++i) {
        shingles.push_back(dedup::shingle(texts[i], 3));
        index.insert("t" + std::to_string(10000 + i), dedup::minhash_signature(shingles.back(), 256, 42));
    }
    const auto candidates = index.candidate_pairs();
    std::size_t truth = 0;
    std::size_t found = 0;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        for (std::size_t j = i + 1; j < texts.size(); ++j) {
            if (exact_jaccard(shingles[i], shingles[j]) < 0.8) continue;
            ++truth;
            found += candidates.count({"t" + std::to_string(10000 + i), "t" + std::to_string(10000 + j)});
        }
    }
    const double recall = truth == 0 ? 0.0 : static_cast<double>(found) / static_cast<double>(truth);
    out.expect(truth >= 100, "synthetic corpus produced only " + std::to_string(truth) + " similar pairs");
    out.expect(recall >= 0.90, "recall " + std::to_string(recall));
    if (out.ok) {
        std::ostringstream s;
        s << "mean error " << mean_error << ", recall " << found << "/" << truth;
        out.detail = s.str();
    }
    return out;
}

Outcome metric_parity() {
    Outcome out;
    struct Fixture {
        const char* candidate;
        const char* reference;
        double r1_p, r1_r, rl_p, rl_r, bleu;
    };
    auto f1 = [](double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); };
    // Expected values worked out by hand from the n-gram counts.
    const Fixture fixtures[] = {
        {"the cat sat on the mat", "the cat sat on the mat", 1, 1, 1, 1, 1.0},
        {"the cat", "the cat sat on the mat", 1, 1.0 / 3, 1, 1.0 / 3, std::exp(-2.0) * std::sqrt(0.5)},
        {"a b c d", "d c b a", 1, 1, 0.25, 0.25, std::pow(1.0 / 48, 0.25)},
        {"我喜欢心理学", "我非常喜欢心理学", 1, 0.75, 1, 0.75, std::exp(-1.0 / 3) * std::pow(0.4, 0.25)},
        {"x y", "a b c", 0, 0, 0, 0, 0.0},
        {"the the the the", "the cat", 0.25, 0.5, 0.25, 0.5, std::pow(1.0 / 192, 0.25)},
        {"Hello, World!", "hello world", 1, 1, 1, 1, std::sqrt(0.5)},
        {"a b c d e f", "a c e b d f", 1, 1, 4.0 / 6, 4.0 / 6, std::pow(1.0 / 480, 0.25)},
        {"第1版 2024", "第1版 2025", 0.75, 0.75, 0.75, 0.75, std::pow(1.0 / 8, 0.25)},
        {"a b c d e", "a b c", 0.6, 1, 0.6, 1, std::pow(1.0 / 40, 0.25)},
    };
    constexpr double kTol = 1e-6;
    int index = 0;
    for (const auto& f : fixtures) {
        ++index;
        const std::string tag = "fixture " + std::to_string(index);
        const auto r1 = metrics::rouge_1(f.candidate, f.reference);
        const auto rl = metrics::rouge_l(f.candidate, f.reference);
        out.expect(std::abs(r1.precision - f.r1_p) <= kTol && std::abs(r1.recall - f.r1_r) <= kTol &&
                       std::abs(r1.f1 - f1(f.r1_p, f.r1_r)) <= kTol,
                   tag + " ROUGE-1");
        out.expect(std::abs(rl.precision - f.rl_p) <= kTol && std::abs(rl.recall - f.rl_r) <= kTol &&
                       std::abs(rl.f1 - f1(f.rl_p, f.rl_r)) <= kTol,
                   tag + " ROUGE-L");
        out.expect(std::abs(metrics::bleu_4(f.candidate, f.reference) - f.bleu) <= kTol, tag + " BLEU-4");
        const auto c = metrics::tokenize(f.candidate);
        const auto r = metrics::tokenize(f.reference);
        out.expect(c.size() <= 10 && r.size() <= 10, tag + " exceeds 10 tokens");
        out.expect(metrics::lcs_length(c, r) == lcs_brute_force(c, r), tag + " LCS");
    }
    if (out.ok) out.detail = "10 fixtures within 1e-6";
    return out;
}

Outcome elastic_dominance() {
    Outcome out;
    std::mt19937 rng(7);
    std::size_t violations = 0;
    for (int set = 0; set < 1000; ++set) {
        std::vector<metrics::ScoredItem> items(1 + rng() % 40);
        for (auto& item : items) {
            item.gold = AnswerSet::from_mask(static_cast<std::uint8_t>(1 + rng() % 15));
            const unsigned roll = rng() % 10;
            if (roll == 0) {
                item.predicted = std::nullopt;
            } else if (roll < 4) {
                item.predicted = item.gold;
            } else {
                item.predicted = AnswerSet::from_mask(static_cast<std::uint8_t>(rng() % 16));
            }
        }
        if (metrics::elastic_accuracy(items) < metrics::standard_accuracy(items)) ++violations;
    }
    out.expect(violations == 0, std::to_string(violations) + " sets violate elastic >= standard");
    if (out.ok) out.detail = "1000 random sets";
    return out;
}

Outcome rationale_loop() {
    Outcome out;
    const auto templates = PromptTemplates::defaults();
    const auto qa = mcq("r1", "B");

    // (a) pruning after exactly T failed attempts.
    for (int t = 1; t <= 4; ++t) {
        json script = json::array();
        for (int a = 1; a <= t + 1; ++a) script.push_back(reply("rationale:cot:r1:" + std::to_string(a), "答案：A"));
        auto backend = ts::scripted(script);
        auto gw = ts::scripted_gateway({{"gen", backend}});
        const llm::ModelRef gen{gw.get(), "gen", 0.7, 512};
        const auto outcome = synthesis::generate_rationale(qa, synthesis::initial_prompt(templates), gen, t);
        out.expect(outcome.pruned(), "T=" + std::to_string(t) + " not pruned");
        out.expect(outcome.attempts == t && backend->calls() == static_cast<std::size_t>(t),
                   "T=" + std::to_string(t) + " made a different number of attempts");
    }

    // (b) an invalid revision reverts to the incoming prompt and rationale.
    {
        auto backend = ts::scripted(json::array({reply("rationale:refine:r1:1", "新的提示：{question}\n{options}"),
                                                 reply("rationale:revise:r1:1", "答案：C")}));
        auto gw = ts::scripted_gateway({{"gen", backend}});
        const llm::ModelRef gen{gw.get(), "gen", 0.7, 512};
        const auto prompt = synthesis::initial_prompt(templates);
        synthesis::RationaleInstance current{"r1", prompt.version, prompt.text, "旧推理\n答案：B",
                                             AnswerSet::from_string("B"), true, 0, 1};
        const auto round = synthesis::optimize_round(qa, prompt, current, gen, templates, 1);
        out.expect(!round.accepted, "invalid revision accepted");
        out.expect(round.prompt == prompt && round.instance == current, "state did not revert");
    }

    // (c) R = 3: every accept/reject/failure pattern stays within 6 calls and
    // retains a correct instance.
    int patterns = 0;
    for (int code = 0; code < 27; ++code) {
        json script = json::array({reply("rationale:cot:r1:1", "答案：B")});
        int c = code;
        for (int round = 1; round <= 3; ++round, c /= 3) {
            const std::string r = std::to_string(round);
            switch (c % 3) {
            case 0:
                script.push_back(reply("rationale:refine:r1:" + r, "第" + r + "版提示\n{question}\n{options}"));
                script.push_back(reply("rationale:revise:r1:" + r, "修订推理\n答案：B"));
                break;
            case 1:
                script.push_back(reply("rationale:refine:r1:" + r, "第" + r + "版提示\n{question}\n{options}"));
                script.push_back(reply("rationale:revise:r1:" + r, "修订推理\n答案：D"));
                break;
            default:
                script.push_back(failure("rationale:refine:r1:" + r));
                break;
            }
        }
        auto backend = ts::scripted(script);
        auto gw = ts::scripted_gateway({{"gen", backend}});
        const llm::ModelRef gen{gw.get(), "gen", 0.7, 512};
        synthesis::OptimizeConfig config;
        config.rounds = 3;
        config.max_regen = 3;
        config.keep_policy = synthesis::KeepPolicy::LastValid;
        const auto run = synthesis::run_rationale_pipeline(qa, config, gen, nullptr, templates);
        ++patterns;
        const auto round_calls = backend->calls() - static_cast<std::size_t>(run.initial_attempts);
        out.expect(round_calls <= 6 && run.round_generation_calls <= 6,
                   "pattern " + std::to_string(code) + " used " + std::to_string(round_calls) + " calls");
        out.expect(run.best && run.best->predicted == qa.gold && run.best->valid,
                   "pattern " + std::to_string(code) + " retained an incorrect instance");
        for (const auto& cand : run.candidates) {
            out.expect(cand.predicted == qa.gold, "pattern " + std::to_string(code) + " kept a wrong candidate");
        }
    }
    if (out.ok) out.detail = "T=1..4 pruning, revert, " + std::to_string(patterns) + " R=3 patterns";
    return out;
}

Outcome cross_selection_partition() {
    Outcome out;
    // Per item: the three selectors' answers, 'x' for a backend failure.
    struct Item {
        const char* gold;
        const char* answers[3];
    };
    const Item items[20] = {
        {"A", {"A", "A", "A"}},    {"A", {"B", "C", "D"}},    {"B", {"B", "C", "D"}},    {"C", {"A", "A", "C"}},
        {"D", {"A", "B", "C"}},    {"AB", {"A", "B", "AB"}},  {"AB", {"A", "B", "ABC"}}, {"ABC", {"ABC", "AB", "C"}},
        {"CD", {"C", "D", "ABCD"}}, {"B", {"x", "B", "B"}},    {"B", {"A", "x", "C"}},    {"C", {"A", "B", "x"}},
        {"D", {"D", "D", "D"}},    {"A", {"B", "B", "B"}},    {"BD", {"BD", "x", "A"}},  {"E", {"A", "B", "C"}},
        {"A", {"a", "A", "A"}},    {"ACD", {"AC", "AD", "CD"}}, {"B", {"B", "A", "A"}},  {"C", {"D", "D", "C"}},
    };
    std::vector<QAPair> dataset;
    json scripts[3] = {json::array(), json::array(), json::array()};
    std::set<std::string> expect_challenging;
    std::set<std::string> expect_unresolved;
    for (int i = 0; i < 20; ++i) {
        const std::string id = "x" + std::to_string(100 + i);
        auto qa = mcq(id, items[i].gold);
        qa.options['E'] = "戊";
        dataset.push_back(qa);
        bool all_wrong = true;
        for (int s = 0; s < 3; ++s) {
            const std::string a = items[i].answers[s];
            const std::string tag = "select:sel" + std::to_string(s + 1) + ":" + id;
            if (a == "x") {
                scripts[s].push_back(failure(tag));
                expect_unresolved.insert(id);
                continue;
            }
            scripts[s].push_back(reply(tag, "分析略。\n答案：" + a));
            if (a == items[i].gold) all_wrong = false;
        }
        if (all_wrong && !expect_unresolved.count(id)) expect_challenging.insert(id);
    }
    auto gw = ts::scripted_gateway(
        {{"sel1", ts::scripted(scripts[0])}, {"sel2", ts::scripted(scripts[1])}, {"sel3", ts::scripted(scripts[2])}});
    std::vector<llm::ModelRef> selectors;
    for (const char* name : {"sel1", "sel2", "sel3"}) selectors.push_back({gw.get(), name, 0.0, 512});
    const auto result = selection::cross_select(dataset, selectors, PromptTemplates::defaults(), 4);

    std::set<std::string> challenging;
    std::set<std::string> remaining;
    std::set<std::string> unresolved;
    for (const auto& q : result.challenging) challenging.insert(q.id);
    for (const auto& q : result.remaining) remaining.insert(q.id);
    for (const auto& u : result.unresolved) unresolved.insert(u.qa_id);
    out.expect(challenging == expect_challenging, "challenging set differs from the fixture");
    out.expect(unresolved == expect_unresolved, "unresolved set differs from the fixture");
    out.expect(challenging.size() + remaining.size() + unresolved.size() == 20, "partition is not exhaustive");
    for (const auto& id : challenging) {
        out.expect(!remaining.count(id) && !unresolved.count(id), "partition overlaps at " + id);
    }
    for (const auto& id : remaining) out.expect(!unresolved.count(id), "partition overlaps at " + id);
    for (const auto& v : result.verdicts) {
        const bool all_wrong = std::none_of(v.per_model.begin(), v.per_model.end(),
                                            [](const auto& kv) { return kv.second.correct; });
        out.expect(v.per_model.size() == 3, v.qa_id + " lacks a selector verdict");
        out.expect(v.challenging == all_wrong, v.qa_id + " violates challenging <=> all wrong");
    }
    if (out.ok) {
        out.detail = std::to_string(challenging.size()) + " challenging, " + std::to_string(remaining.size()) +
                     " remaining, " + std::to_string(unresolved.size()) + " unresolved";
    }
    return out;
}

Outcome split_algebra() {
    Outcome out;
    auto ids = [](const std::string& prefix, int n) {
        std::vector<std::string> v;
        for (int i = 0; i < n; ++i) v.push_back(prefix + std::to_string(i));
        return v;
    };
    const auto pr = DatasetSplit::make(SplitRole::D_pr, ids("pr", 7));
    const auto pc = DatasetSplit::make(SplitRole::D_pc, ids("pc", 3));
    const auto em = DatasetSplit::make(SplitRole::D_em, ids("em", 5));
    const auto ps = DatasetSplit::make(SplitRole::D_ps, ids("ps", 4));
    const auto cp = DatasetSplit::make(SplitRole::D_cp, ids("cp", 6));
    const auto splits = assemble_splits(pr, em, ps, pc, cp);

    auto as_set = [](const DatasetSplit& s) { return std::set<std::string>(s.records.begin(), s.records.end()); };
    std::set<std::string> sft_union;
    for (const auto* s : {&pr, &em, &ps}) sft_union.merge(as_set(*s));
    std::set<std::string> grpo_union;
    for (const auto* s : {&pc, &cp}) grpo_union.merge(as_set(*s));
    out.expect(as_set(splits.sft) == sft_union, "sft != pr ∪ em ∪ ps");
    out.expect(as_set(splits.grpo) == grpo_union, "grpo != pc ∪ cp");
    out.expect(splits.sft.records.size() == 16 && splits.grpo.records.size() == 9, "size identity fails");
    for (const auto& id : splits.sft.records) out.expect(!as_set(splits.grpo).count(id), "sft and grpo share " + id);
    out.expect(splits.sft.manifest_digest == manifest_digest(splits.sft.records), "sft digest");

    auto rejects = [&](const DatasetSplit& a, const DatasetSplit& b, const DatasetSplit& c, const DatasetSplit& d,
                       const DatasetSplit& e) {
        try {
            assemble_splits(a, b, c, d, e);
        } catch (const ValidationError&) {
            return true;
        }
        return false;
    };
    const auto pc_collides = DatasetSplit::make(SplitRole::D_pc, {"pc0", "pr3"});
    const auto ps_collides = DatasetSplit::make(SplitRole::D_ps, {"em2"});
    out.expect(rejects(pr, em, ps, pc_collides, cp), "pr/pc collision accepted");
    out.expect(rejects(pr, em, ps_collides, pc, cp), "em/ps collision accepted");
    if (out.ok) out.detail = "|sft| = 7+5+4, |grpo| = 3+6, collisions rejected";
    return out;
}

Outcome end_to_end() {
    Outcome out;
    const auto golden = ts::toy_dir() / "golden";
    std::ostringstream sink;
    pipeline::RunOptions quiet;
    quiet.log_stream = &sink;

    ts::TempDir fresh;
    pipeline::run_pipeline(ts::toy_config(fresh.path()), quiet);
    const auto fresh_diff = ts::diff_against_golden(fresh.path(), golden);
    out.expect(fresh_diff.empty(), "fresh run: " + (fresh_diff.empty() ? "" : fresh_diff.front()));

    for (std::size_t stop : {1U, 6U, 13U, 22U}) {
        ts::TempDir resumed;
        auto killed = quiet;
        killed.stop_after = stop;
        bool interrupted = false;
        try {
            pipeline::run_pipeline(ts::toy_config(resumed.path()), killed);
        } catch (const pipeline::StageFailure&) {
            interrupted = true;
        }
        out.expect(interrupted, "stop after " + std::to_string(stop) + " items did not interrupt");
        auto resume = quiet;
        resume.resume = true;
        pipeline::run_pipeline(ts::toy_config(resumed.path()), resume);
        const auto diff = ts::diff_against_golden(resumed.path(), golden);
        out.expect(diff.empty(), "resume after " + std::to_string(stop) + ": " + (diff.empty() ? "" : diff.front()));
    }
    if (out.ok) out.detail = std::to_string(ts::stable_files(golden).size()) + " files, 4 kill points";
    return out;
}

Outcome group_advantages() {
    Outcome out;
    for (double v : {-2.0, 0.0, 2.25}) {
        const std::vector<double> flat(8, v);
        const auto adv = reward::group_advantages(flat);
        out.expect(std::all_of(adv.begin(), adv.end(), [](double a) { return a == 0.0; }), "zero-variance group");
    }
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> reward_dist(-2.0, 2.25);
    std::uniform_real_distribution<double> shift_dist(-10.0, 10.0);
    for (int g = 0; g < 500; ++g) {
        std::vector<double> group(2 + rng() % 15);
        for (auto& r : group) r = reward_dist(rng);
        const auto adv = reward::group_advantages(group);
        double sum = 0.0;
        for (double a : adv) sum += a;
        out.expect(std::abs(sum) <= 1e-9, "advantages do not sum to zero");
        const double shift = shift_dist(rng);
        auto shifted = group;
        for (auto& r : shifted) r += shift;
        const auto adv_shifted = reward::group_advantages(shifted);
        for (std::size_t i = 0; i < adv.size(); ++i) {
            out.expect(std::abs(adv[i] - adv_shifted[i]) <= 1e-9, "translation changes advantages");
        }
    }
    if (out.ok) out.detail = "500 random groups";
    return out;
}

} // namespace

int main() {
    criterion(1, "reward oracle exhaustion", 1.0, reward_oracle_exhaustion);
    criterion(2, "reward constants", 1.0, reward_constants);
    criterion(3, "minhash fidelity and LSH recall", 30.0, minhash_fidelity);
    criterion(4, "metric parity", 1.0, metric_parity);
    criterion(5, "elastic dominance", 5.0, elastic_dominance);
    criterion(6, "rationale loop semantics", 5.0, rationale_loop);
    criterion(7, "cross-selection partition", 5.0, cross_selection_partition);
    criterion(8, "split algebra", 1.0, split_algebra);
    criterion(9, "end-to-end determinism", 60.0, end_to_end);
    criterion(10, "group advantages", 1.0, group_advantages);
    std::printf("%s: %d of 10 criteria failed\n", failures == 0 ? "OK" : "FAILED", failures);
    return failures == 0 ? 0 : 1;
}
