#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"
#include "psyforge/error.hpp"
#include "psyforge/llm.hpp"
#include "psyforge/pipeline.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitStageFailure = 3;

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find(',', start);
        if (end == std::string::npos) end = text.size();
        if (end > start) out.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    using namespace psyforge::cli;

    CLI::App app{"psyforge: psychological QA curation, reward scoring and evaluation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "psyforge 0.1.0");

    Globals g;
    std::string config;
    app.add_option("--config", config, "Pipeline/backends config (JSON)");
    app.add_option("--seed", g.seed, "Seed override");
    app.add_option("--max-parallel", g.max_parallel, "Concurrent items")->check(CLI::PositiveNumber);
    app.add_option("--log-level", g.log_level, "debug, info, warn or error")
        ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

    std::function<int()> action;

    CleanArgs clean;
    auto* c = app.add_subcommand("clean", "Normalise punctuation, strip noise, filter dialogues");
    c->add_option("--in", clean.in, "Input JSONL (QA or dialogue records)")->required();
    c->add_option("--out", clean.out, "Cleaned JSONL")->required();
    c->add_option("--report", clean.report, "Clean report JSON (default <out>.report.json)");
    c->add_option("--dropped", clean.dropped, "Dropped ids (default <out>.dropped.jsonl)");
    c->add_option("--unresolved", clean.unresolved, "Quarantined dialogues (default <out>.unresolved.jsonl)");
    c->add_flag("--filter-dialogues", clean.filter_dialogues, "Run the substantive-advice judge on dialogues");
    c->add_option("--backend", clean.backend, "Judge backend name");
    c->callback([&] { action = [&] { return cmd_clean(g, clean); }; });

    DedupArgs dd;
    auto* d = app.add_subcommand("dedup", "MinHash-LSH near-duplicate removal");
    d->add_option("--in", dd.in, "QA JSONL")->required();
    d->add_option("--out", dd.out, "Deduplicated QA JSONL")->required();
    d->add_option("--clusters", dd.clusters, "Cluster audit (default clusters.json beside --out)");
    d->add_option("--k", dd.k, "Shingle width")->capture_default_str();
    d->add_option("--perms", dd.perms, "Permutations")->capture_default_str();
    d->add_option("--bands", dd.bands, "LSH bands")->capture_default_str();
    d->add_option("--rows", dd.rows, "Rows per band (default perms/bands)");
    d->add_option("--threshold", dd.threshold, "Verification threshold")->capture_default_str();
    d->add_option("--seed", dd.seed, "Permutation seed (default global --seed or 42)");
    d->add_option("--rank-max-chars", dd.rank_max_chars, "Truncate questions shown to the ranker (0 = full)");
    d->add_option("--backend", dd.backend, "Ranking backend name");
    d->callback([&] { action = [&] { return cmd_dedup(g, dd); }; });

    auto* s = app.add_subcommand("synth", "LLM-backed synthesis");
    s->require_subcommand(1);

    ChunkArgs ch;
    auto* sc = s->add_subcommand("chunk", "Segment documents into chunks");
    sc->add_option("--documents", ch.documents, "Documents JSONL {id,text,subfield}")->required();
    sc->add_option("--out", ch.out, "Chunks JSONL")->required();
    sc->add_option("--target", ch.target, "Target chunk length in characters")->capture_default_str();
    sc->callback([&] { action = [&] { return cmd_chunk(g, ch); }; });

    QuestionsArgs qs;
    auto* sq = s->add_subcommand("questions", "Generate questions from chunks");
    sq->add_option("--chunks", qs.chunks, "Chunks JSONL")->required();
    sq->add_option("--per-chunk", qs.per_chunk, "Questions per chunk")->capture_default_str();
    sq->add_option("--backend", qs.backend, "Generator backend name")->required();
    sq->add_option("--out", qs.out, "Generated QA JSONL")->capture_default_str();
    sq->add_option("--audit", qs.audit, "Per-chunk audit (default <out>.chunks.jsonl)");
    qs.out = "questions.jsonl";
    sq->callback([&] { action = [&] { return cmd_questions(g, qs); }; });

    RationalesArgs rs;
    std::string rationale_backends;
    auto* sr = s->add_subcommand("rationales", "Rationale generation and prompt-rationale optimisation");
    sr->add_option("--qa", rs.qa, "QA JSONL")->required();
    sr->add_option("--rounds", rs.rounds, "Optimisation rounds R")->capture_default_str();
    sr->add_option("--max-regen", rs.max_regen, "Generation attempts T")->capture_default_str();
    sr->add_option("--keep-policy", rs.keep_policy, "llm_judged or last_valid")->capture_default_str();
    sr->add_option("--backends", rationale_backends, "GENERATOR[,JUDGE]")->required();
    sr->add_option("--out", rs.out, "QA with rationales")->required();
    sr->add_option("--pruned", rs.pruned, "Pruned questions (default <out>.pruned.jsonl)");
    sr->add_option("--audit", rs.audit, "Per-item audit (default <out>.audit.jsonl)");
    sr->callback([&] {
        rs.backends = split_list(rationale_backends);
        action = [&] { return cmd_rationales(g, rs); };
    });

    EnrichArgs en;
    auto* se = s->add_subcommand("enrich", "Empathetic dialogue enrichment");
    se->add_option("--dialogues", en.dialogues, "Dialogue JSONL")->required();
    se->add_option("--backend", en.backend, "Generator backend name")->required();
    se->add_option("--out", en.out, "Enriched dialogues")->capture_default_str();
    se->add_option("--flagged", en.flagged, "Unenriched sessions (default <out>.flagged.jsonl)");
    en.out = "enriched.jsonl";
    se->callback([&] { action = [&] { return cmd_enrich(g, en); }; });

    SelectArgs sel;
    std::string selector_list;
    auto* sl = app.add_subcommand("select", "Multi-model cross-selection");
    sl->add_option("--qa", sel.qa, "QA JSONL")->required();
    sl->add_option("--selectors", selector_list, "Comma-separated selector backends")->required();
    sl->add_option("--out-challenging", sel.out_challenging, "Challenging subset")->required();
    sl->add_option("--out-rest", sel.out_rest, "Remaining subset")->required();
    sl->add_option("--audit", sel.audit, "Per-model verdicts")->required();
    sl->add_option("--unresolved", sel.unresolved, "Unresolved items (default <audit>.unresolved.jsonl)");
    sl->callback([&] {
        sel.selectors = split_list(selector_list);
        action = [&] { return cmd_select(g, sel); };
    });

    SplitArgs sp;
    auto* spc = app.add_subcommand("split", "Assemble SFT and GRPO splits");
    spc->add_option("--pr", sp.pr, "Rationale-bearing non-challenging QA");
    spc->add_option("--pc", sp.pc, "Challenging QA");
    spc->add_option("--em", sp.em, "Empathetic dialogues");
    spc->add_option("--ps", sp.ps, "Converted counselling QA");
    spc->add_option("--cp", sp.cp, "Exam-derived QA");
    spc->add_option("--out-dir", sp.out_dir, "Output directory")->required();
    spc->callback([&] { action = [&] { return cmd_split(g, sp); }; });

    RewardArgs rw;
    auto* r = app.add_subcommand("reward", "Format, accuracy and final rewards");
    r->add_option("--completions", rw.completions, "Completions JSONL {qa_id,text[,gold]}")->required();
    r->add_option("--gold", rw.gold, "QA JSONL supplying gold answers");
    r->add_option("--out", rw.out, "Rewards JSONL")->required();
    r->add_option("--group-by", rw.group_by, "Group key for advantages (qa_id)");
    r->add_flag("--advantages", rw.advantages, "Add group-normalised advantages");
    r->add_option("--epsilon", rw.epsilon, "Advantage epsilon")->capture_default_str();
    r->callback([&] { action = [&] { return cmd_reward(g, rw); }; });

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Benchmark evaluation");
    e->add_option("--benchmark", ev.benchmark, "Benchmark QA JSONL with categories")->required();
    e->add_option("--outputs", ev.outputs, "Model outputs {qa_id,text}")->required();
    e->add_option("--report", ev.report, "Report JSON")->required();
    e->add_option("--average", ev.average, "uniform or weighted")->capture_default_str();
    e->callback([&] { action = [&] { return cmd_eval(g, ev); }; });

    RunArgs run;
    auto* rn = app.add_subcommand("run", "Run the configured pipeline");
    rn->add_flag("--resume", run.resume, "Continue from the checkpoint in out_dir");
    rn->add_option("--stop-after", run.stop_after, "Stop after N items (interruption testing)");
    rn->add_option("--out-dir", run.out_dir, "Override out_dir");
    rn->callback([&] { action = [&] { return cmd_run(g, run); }; });

    RunArgs replay;
    std::string transcript;
    auto* rp = app.add_subcommand("replay", "Re-run the pipeline from a recorded transcript");
    rp->add_option("--transcript", transcript, "Transcript JSONL")->required();
    rp->add_option("--out-dir", replay.out_dir, "Override out_dir");
    rp->callback([&] {
        replay.transcript = transcript;
        action = [&] { return cmd_run(g, replay); };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : kExitValidation;
    }
    g.config = config;

    try {
        return action();
    } catch (const psyforge::ValidationError& err) {
        std::cerr << "psyforge: validation error: " << err.what() << '\n';
        return kExitValidation;
    } catch (const psyforge::ContractError& err) {
        std::cerr << "psyforge: invalid argument: " << err.what() << '\n';
        return kExitValidation;
    } catch (const psyforge::pipeline::StageFailure& err) {
        std::cerr << "psyforge: " << err.what() << " (checkpoint written; rerun with --resume)\n";
        return kExitStageFailure;
    } catch (const std::exception& err) {
        std::cerr << "psyforge: error: " << err.what() << '\n';
        return kExitStageFailure;
    }
}
