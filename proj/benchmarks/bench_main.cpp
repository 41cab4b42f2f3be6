#include <benchmark/benchmark.h>

#include <random>
#include <string>
#include <vector>

#include "psyforge/dedup.hpp"
#include "psyforge/metrics.hpp"
#include "psyforge/reward.hpp"
#include "psyforge/utf8.hpp"

using namespace psyforge;

namespace {

std::string random_cjk(std::mt19937& rng, std::size_t n) {
    const std::u32string alphabet = U"心理学认知情绪记忆发展人格社会咨询治疗焦虑抑郁压力睡眠行为动机学习注意思维语言";
    std::u32string s;
    for (std::size_t i = 0; i < n; ++i) s += alphabet[rng() % alphabet.size()];
    return utf8::encode(s);
}

void BM_Shingle(benchmark::State& state) {
    std::mt19937 rng(1);
    const auto text = random_cjk(rng, static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(dedup::shingle(text, 3));
}
BENCHMARK(BM_Shingle)->Arg(64)->Arg(512);

void BM_MinHashSignature(benchmark::State& state) {
    std::mt19937 rng(2);
    const auto shingles = dedup::shingle(random_cjk(rng, 200), 3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(dedup::minhash_signature(shingles, static_cast<std::size_t>(state.range(0)), 42));
    }
}
BENCHMARK(BM_MinHashSignature)->Arg(128)->Arg(256);

void BM_LshCluster(benchmark::State& state) {
    std::mt19937 rng(3);
    std::map<std::string, dedup::MinHashSignature> sigs;
    for (int i = 0; i < state.range(0); ++i) {
        sigs["id" + std::to_string(i)] = dedup::minhash_signature(dedup::shingle(random_cjk(rng, 80), 3), 256, 42);
    }
    for (auto _ : state) benchmark::DoNotOptimize(dedup::lsh_cluster(sigs, 32, 8, 0.7));
}
BENCHMARK(BM_LshCluster)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_RougeL(benchmark::State& state) {
    std::mt19937 rng(4);
    const auto a = random_cjk(rng, 300);
    const auto b = random_cjk(rng, 300);
    for (auto _ : state) benchmark::DoNotOptimize(metrics::rouge_l(a, b));
}
BENCHMARK(BM_RougeL);

void BM_Bleu4(benchmark::State& state) {
    std::mt19937 rng(5);
    const auto a = random_cjk(rng, 300);
    const auto b = random_cjk(rng, 300);
    for (auto _ : state) benchmark::DoNotOptimize(metrics::bleu_4(a, b));
}
BENCHMARK(BM_Bleu4);

void BM_ParseAnswer(benchmark::State& state) {
    const std::string text = "<think>先排除选项A和C，再比较B与D的表述。</think>综上所述，正确答案是 B、D。";
    for (auto _ : state) benchmark::DoNotOptimize(metrics::parse_answer(text, QuestionKind::MMCQ));
}
BENCHMARK(BM_ParseAnswer);

void BM_FinalReward(benchmark::State& state) {
    const CompletionRecord c{"q", "<think>逐项分析。</think>答案：ABD", AnswerSet::from_string("ABD")};
    for (auto _ : state) benchmark::DoNotOptimize(reward::final_reward(c));
}
BENCHMARK(BM_FinalReward);

void BM_GroupAdvantages(benchmark::State& state) {
    std::mt19937 rng(6);
    std::uniform_real_distribution<double> dist(-2.0, 2.25);
    std::vector<double> rewards(static_cast<std::size_t>(state.range(0)));
    for (auto& r : rewards) r = dist(rng);
    for (auto _ : state) benchmark::DoNotOptimize(reward::group_advantages(rewards));
}
BENCHMARK(BM_GroupAdvantages)->Arg(8)->Arg(64);

} // namespace

BENCHMARK_MAIN();
