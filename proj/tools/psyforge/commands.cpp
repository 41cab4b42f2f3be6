#include "commands.hpp"

#include <iostream>
#include <map>
#include <memory>

#include <nlohmann/json.hpp>

#include "psyforge/corpus.hpp"
#include "psyforge/dedup.hpp"
#include "psyforge/error.hpp"
#include "psyforge/llm.hpp"
#include "psyforge/metrics.hpp"
#include "psyforge/parallel.hpp"
#include "psyforge/pipeline.hpp"
#include "psyforge/prompts.hpp"
#include "psyforge/reward.hpp"
#include "psyforge/selection.hpp"
#include "psyforge/synthesis.hpp"
#include "psyforge/textclean.hpp"

namespace psyforge::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

fs::path sibling(const fs::path& out, const std::string& suffix) {
    return out.parent_path() / (out.stem().string() + "." + suffix);
}

fs::path or_default(const fs::path& chosen, const fs::path& fallback) { return chosen.empty() ? fallback : chosen; }

void require_file(const fs::path& path, const std::string& what) {
    if (!fs::exists(path)) throw ValidationError(what + " not found: " + path.string());
}

pipeline::PipelineConfig load_config(const Globals& g) {
    if (g.config.empty()) throw ValidationError("--config is required for commands that talk to a backend");
    auto config = pipeline::PipelineConfig::load(g.config);
    if (g.seed) {
        config.seed = *g.seed;
        const json& raw = config.raw;
        const bool explicit_dedup_seed =
            raw.contains("params") && raw["params"].contains("dedup") && raw["params"]["dedup"].contains("seed");
        if (!explicit_dedup_seed) config.params.dedup.seed = *g.seed;
    }
    if (g.max_parallel) config.max_parallel = *g.max_parallel;
    config.log_level = pipeline::parse_log_level(g.log_level);
    return config;
}

std::size_t parallelism(const Globals& g) { return g.max_parallel.value_or(1); }

/// Backends declared in the config file, registered on a private gateway.
class Backends {
public:
    explicit Backends(const Globals& g) : config_(load_config(g)) {
        pipeline::register_backends(gateway_, config_);
    }

    llm::ModelRef ref(const std::string& name, double default_temperature) const {
        for (const auto& decl : config_.backends) {
            if (decl.name == name) {
                return {&gateway_, name, decl.temperature.value_or(default_temperature), decl.max_tokens};
            }
        }
        throw ValidationError("backend '" + name + "' is not declared in " + config_.source.string());
    }

    PromptTemplates templates() const {
        return config_.templates_dir ? PromptTemplates::with_overrides(*config_.templates_dir)
                                     : PromptTemplates::defaults();
    }

private:
    pipeline::PipelineConfig config_;
    mutable llm::Gateway gateway_;
};

} // namespace

int cmd_clean(const Globals& g, const CleanArgs& a) {
    require_file(a.in, "input");
    if (a.filter_dialogues && a.backend.empty()) throw ValidationError("--filter-dialogues needs --backend");
    std::unique_ptr<Backends> backends;
    std::optional<llm::ModelRef> judge;
    PromptTemplates templates = PromptTemplates::defaults();
    if (a.filter_dialogues) {
        backends = std::make_unique<Backends>(g);
        judge = backends->ref(a.backend, llm::kJudgeTemperature);
        templates = backends->templates();
    }

    textclean::CleanReport totals;
    auto clean_field = [&](std::string& text) {
        auto r = textclean::clean_text(text);
        totals.merge(r.report);
        text = std::move(r.text);
    };

    std::vector<Record> kept;
    std::vector<ordered_json> dropped;
    std::vector<ordered_json> unresolved;
    const auto records = load_record_jsonl(a.in);
    for (auto record : records) {
        if (auto* qa = std::get_if<QAPair>(&record)) {
            clean_field(qa->question);
            for (auto& [_, text] : qa->options) clean_field(text);
            clean_field(qa->reference_answer);
            try {
                validate(*qa);
            } catch (const ValidationError& e) {
                dropped.push_back(ordered_json{{"id", qa->id}, {"reason", e.what()}});
                continue;
            }
            kept.push_back(std::move(record));
            continue;
        }
        auto& session = std::get<DialogueSession>(record);
        for (auto& turn : session.turns) clean_field(turn.content);
        try {
            validate(session);
        } catch (const ValidationError& e) {
            dropped.push_back(ordered_json{{"id", session.id}, {"reason", e.what()}});
            continue;
        }
        if (judge) {
            const auto v = textclean::filter_substantive(session, *judge, templates.get("substantive_filter"));
            if (v.kind == textclean::VerdictKind::Drop) {
                dropped.push_back(ordered_json{{"id", session.id}, {"reason", "not substantive: " + v.reason}});
                continue;
            }
            if (v.kind == textclean::VerdictKind::Unresolved) {
                unresolved.push_back(ordered_json{{"id", session.id}, {"reason", v.reason}});
                continue;
            }
        }
        kept.push_back(std::move(record));
    }

    save_jsonl(kept, a.out);
    write_json_lines(dropped, or_default(a.dropped, sibling(a.out, "dropped.jsonl")));
    if (judge) write_json_lines(unresolved, or_default(a.unresolved, sibling(a.out, "unresolved.jsonl")));
    ordered_json report = to_json(totals);
    report["records_in"] = records.size();
    report["records_out"] = kept.size();
    report["dropped"] = dropped.size();
    report["unresolved"] = unresolved.size();
    write_json_file(report, or_default(a.report, sibling(a.out, "report.json")));
    std::cout << report.dump() << '\n';
    return 0;
}

int cmd_dedup(const Globals& g, const DedupArgs& a) {
    require_file(a.in, "input");
    dedup::DedupParams params;
    params.k = a.k;
    params.num_perms = a.perms;
    params.bands = a.bands;
    if (a.bands == 0) throw ValidationError("--bands must be >= 1");
    params.rows = a.rows.value_or(a.perms / a.bands);
    params.threshold = a.threshold;
    params.seed = a.seed.value_or(g.seed.value_or(42));
    params.rank_max_chars = a.rank_max_chars;
    params.validate();

    std::unique_ptr<Backends> backends;
    std::optional<llm::ModelRef> ranker;
    PromptTemplates templates = PromptTemplates::defaults();
    if (!a.backend.empty()) {
        backends = std::make_unique<Backends>(g);
        ranker = backends->ref(a.backend, llm::kJudgeTemperature);
        templates = backends->templates();
    }
    const auto records = load_qa_jsonl(a.in);
    const auto result =
        dedup::deduplicate(records, params, ranker ? &*ranker : nullptr, templates.get("rank_duplicates"));
    save_jsonl(result.survivors, a.out);
    write_json_file(dedup::clusters_to_json(result.clusters),
                    or_default(a.clusters, a.out.parent_path() / "clusters.json"));
    std::cout << ordered_json{{"in", records.size()}, {"out", result.survivors.size()}}.dump() << '\n';
    return 0;
}

int cmd_chunk(const Globals&, const ChunkArgs& a) {
    require_file(a.documents, "documents");
    std::vector<ordered_json> rows;
    for (const auto& row : read_json_lines(a.documents)) {
        const auto doc = synthesis::chunk_from_json(row);
        if (!doc.text) {
            rows.push_back(synthesis::to_json(doc));
            continue;
        }
        const auto pieces = synthesis::segment_chunks(*doc.text, a.target);
        for (std::size_t k = 0; k < pieces.size(); ++k) {
            rows.push_back(synthesis::to_json({doc.id + "-c" + std::to_string(k + 1), pieces[k], doc.subfield}));
        }
    }
    write_json_lines(rows, a.out);
    std::cout << ordered_json{{"chunks", rows.size()}}.dump() << '\n';
    return 0;
}

int cmd_questions(const Globals& g, const QuestionsArgs& a) {
    require_file(a.chunks, "chunks");
    Backends backends(g);
    const auto generator = backends.ref(a.backend, llm::kGenerationTemperature);
    const auto templates = backends.templates();
    std::vector<synthesis::SourceChunk> chunks;
    for (const auto& row : read_json_lines(a.chunks)) chunks.push_back(synthesis::chunk_from_json(row));

    std::vector<synthesis::GeneratedQuestions> results(chunks.size());
    std::vector<std::string> errors(chunks.size());
    parallel_for(chunks.size(), parallelism(g), [&](std::size_t i) {
        try {
            results[i] = synthesis::generate_questions(chunks[i], a.per_chunk, generator, templates);
        } catch (const llm::LlmError& e) {
            errors[i] = e.what();
        }
    });

    std::vector<QAPair> pairs;
    std::vector<ordered_json> audit;
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        ordered_json row{{"chunk", chunks[i].id}};
        if (!errors[i].empty()) {
            row["status"] = "unresolved";
            row["error"] = errors[i];
        } else {
            row["status"] = "ok";
            row["generated"] = results[i].pairs.size();
            row["skipped"] = results[i].skipped;
            if (results[i].warning) std::cerr << "warning: no questions parsed for chunk " << chunks[i].id << '\n';
            skipped += results[i].skipped;
            for (auto& qa : results[i].pairs) pairs.push_back(std::move(qa));
        }
        audit.push_back(std::move(row));
    }
    save_jsonl(pairs, a.out);
    write_json_lines(audit, or_default(a.audit, sibling(a.out, "chunks.jsonl")));
    std::cout << ordered_json{{"chunks", chunks.size()}, {"generated", pairs.size()}, {"skipped", skipped}}.dump()
              << '\n';
    return 0;
}

int cmd_rationales(const Globals& g, const RationalesArgs& a) {
    require_file(a.qa, "qa");
    if (a.backends.empty() || a.backends.size() > 2) {
        throw ValidationError("--backends takes GENERATOR or GENERATOR,JUDGE");
    }
    synthesis::OptimizeConfig config{a.rounds, a.max_regen, synthesis::parse_keep_policy(a.keep_policy)};
    config.validate();
    Backends backends(g);
    const auto generator = backends.ref(a.backends[0], llm::kGenerationTemperature);
    std::optional<llm::ModelRef> judge;
    if (a.backends.size() == 2) judge = backends.ref(a.backends[1], llm::kJudgeTemperature);
    const auto templates = backends.templates();

    const auto records = load_qa_jsonl(a.qa);
    std::vector<std::optional<synthesis::RationaleRun>> runs(records.size());
    std::vector<std::string> errors(records.size());
    parallel_for(records.size(), parallelism(g), [&](std::size_t i) {
        if (!records[i].is_mcq()) return;
        try {
            runs[i] = synthesis::run_rationale_pipeline(records[i], config, generator, judge ? &*judge : nullptr,
                                                        templates);
        } catch (const llm::LlmError& e) {
            errors[i] = e.what();
        }
    });

    std::vector<QAPair> kept;
    std::vector<QAPair> pruned;
    std::vector<ordered_json> audit;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!records[i].is_mcq()) {
            kept.push_back(records[i]);
            continue;
        }
        if (!errors[i].empty()) {
            audit.push_back(ordered_json{{"id", records[i].id}, {"status", "unresolved"}, {"error", errors[i]}});
            continue;
        }
        const auto& run = *runs[i];
        ordered_json row{{"id", records[i].id}, {"initial_attempts", run.initial_attempts}};
        if (run.pruned()) {
            pruned.push_back(records[i]);
            row["status"] = "pruned";
        } else {
            kept.push_back(synthesis::attach(records[i], run));
            row["status"] = "retained";
            row["winner_round"] = run.best->round;
            row["lineage"] = run.lineage.size();
            row["rejected_prompts"] = run.rejected_prompts.size();
            row["failed_rounds"] = run.failed_rounds;
            row["judge_fallback"] = run.judge_fallback;
        }
        audit.push_back(std::move(row));
    }
    save_jsonl(kept, a.out);
    save_jsonl(pruned, or_default(a.pruned, sibling(a.out, "pruned.jsonl")));
    write_json_lines(audit, or_default(a.audit, sibling(a.out, "audit.jsonl")));
    std::cout << ordered_json{{"in", records.size()}, {"out", kept.size()}, {"pruned", pruned.size()}}.dump() << '\n';
    return 0;
}

int cmd_enrich(const Globals& g, const EnrichArgs& a) {
    require_file(a.dialogues, "dialogues");
    Backends backends(g);
    const auto generator = backends.ref(a.backend, llm::kGenerationTemperature);
    const auto templates = backends.templates();
    const auto sessions = load_dialogue_jsonl(a.dialogues);
    std::vector<synthesis::EnrichResult> results(sessions.size());
    parallel_for(sessions.size(), parallelism(g), [&](std::size_t i) {
        results[i] = synthesis::enrich_dialogue(sessions[i], generator, templates);
    });
    std::vector<DialogueSession> out;
    std::vector<ordered_json> flagged;
    for (auto& r : results) {
        if (r.flagged) flagged.push_back(ordered_json{{"id", r.session.id}, {"note", r.note}});
        out.push_back(std::move(r.session));
    }
    save_jsonl(out, a.out);
    write_json_lines(flagged, or_default(a.flagged, sibling(a.out, "flagged.jsonl")));
    std::cout << ordered_json{{"in", sessions.size()}, {"flagged", flagged.size()}}.dump() << '\n';
    return 0;
}

int cmd_select(const Globals& g, const SelectArgs& a) {
    require_file(a.qa, "qa");
    if (a.selectors.empty()) throw ValidationError("--selectors needs at least one backend");
    Backends backends(g);
    std::vector<llm::ModelRef> selectors;
    for (const auto& name : a.selectors) selectors.push_back(backends.ref(name, llm::kJudgeTemperature));
    const auto records = load_qa_jsonl(a.qa);
    const auto result = selection::cross_select(records, selectors, backends.templates(), parallelism(g));

    save_jsonl(result.challenging, a.out_challenging);
    save_jsonl(result.remaining, a.out_rest);
    std::vector<ordered_json> verdicts;
    for (const auto& v : result.verdicts) verdicts.push_back(selection::to_json(v));
    write_json_lines(verdicts, a.audit);
    std::vector<ordered_json> unresolved;
    for (const auto& u : result.unresolved) {
        unresolved.push_back(ordered_json{{"id", u.qa_id}, {"selector", u.selector}, {"error", u.error}});
    }
    write_json_lines(unresolved, or_default(a.unresolved, sibling(a.audit, "unresolved.jsonl")));
    std::cout << ordered_json{{"challenging", result.challenging.size()},
                              {"remaining", result.remaining.size()},
                              {"unresolved", result.unresolved.size()}}
                     .dump()
              << '\n';
    return 0;
}

int cmd_split(const Globals&, const SplitArgs& a) {
    auto qa_or_empty = [](const std::optional<fs::path>& p) {
        if (!p) return std::vector<QAPair>{};
        require_file(*p, "split input");
        return load_qa_jsonl(*p);
    };
    const auto pr = qa_or_empty(a.pr);
    const auto pc = qa_or_empty(a.pc);
    const auto ps = qa_or_empty(a.ps);
    const auto cp = qa_or_empty(a.cp);
    std::vector<DialogueSession> em;
    if (a.em) {
        require_file(*a.em, "split input");
        em = load_dialogue_jsonl(*a.em);
    }
    auto ids = [](const auto& records) {
        std::vector<std::string> out;
        for (const auto& r : records) out.push_back(r.id);
        return out;
    };
    const auto d_pr = DatasetSplit::make(SplitRole::D_pr, ids(pr));
    const auto d_pc = DatasetSplit::make(SplitRole::D_pc, ids(pc));
    const auto d_em = DatasetSplit::make(SplitRole::D_em, ids(em));
    const auto d_ps = DatasetSplit::make(SplitRole::D_ps, ids(ps));
    const auto d_cp = DatasetSplit::make(SplitRole::D_cp, ids(cp));
    const auto assembled = assemble_splits(d_pr, d_em, d_ps, d_pc, d_cp);

    fs::create_directories(a.out_dir);
    ordered_json manifest = ordered_json::object();
    for (const DatasetSplit* s : {&d_pr, &d_pc, &d_em, &d_ps, &d_cp, &assembled.sft, &assembled.grpo}) {
        manifest[std::string(to_string(s->role))] = {
            {"count", s->records.size()}, {"digest", s->manifest_digest}, {"records", s->records}};
    }
    write_json_file(manifest, a.out_dir / "manifest.json");
    std::vector<Record> sft;
    for (const auto& r : pr) sft.emplace_back(r);
    for (const auto& r : em) sft.emplace_back(r);
    for (const auto& r : ps) sft.emplace_back(r);
    std::vector<Record> grpo;
    for (const auto& r : pc) grpo.emplace_back(r);
    for (const auto& r : cp) grpo.emplace_back(r);
    save_jsonl(sft, a.out_dir / "sft.jsonl");
    save_jsonl(grpo, a.out_dir / "grpo.jsonl");
    std::cout << ordered_json{{"D_sft", sft.size()}, {"D_grpo", grpo.size()}}.dump() << '\n';
    return 0;
}

int cmd_reward(const Globals&, const RewardArgs& a) {
    require_file(a.completions, "completions");
    if (!a.group_by.empty() && a.group_by != "qa_id") throw ValidationError("--group-by only supports qa_id");
    if (a.advantages && a.group_by.empty()) throw ValidationError("--advantages needs --group-by qa_id");

    std::map<std::string, AnswerSet> gold;
    if (a.gold) {
        require_file(*a.gold, "gold");
        for (const auto& qa : load_qa_jsonl(*a.gold)) {
            if (qa.is_mcq()) gold[qa.id] = qa.gold;
        }
    }
    auto completions = load_completion_jsonl(a.completions);
    std::vector<reward::RewardBreakdown> rewards;
    for (std::size_t i = 0; i < completions.size(); ++i) {
        auto& c = completions[i];
        if (!c.gold) {
            const auto it = gold.find(c.qa_id);
            if (it == gold.end()) {
                throw ValidationError("completion " + std::to_string(i + 1) + " (" + c.qa_id +
                                      "): no gold answer inline or in --gold");
            }
            c.gold = it->second;
        }
        rewards.push_back(reward::final_reward(c));
    }

    std::vector<std::optional<double>> advantage(completions.size());
    if (a.advantages) {
        std::map<std::string, std::vector<std::size_t>> groups;
        for (std::size_t i = 0; i < completions.size(); ++i) groups[completions[i].qa_id].push_back(i);
        for (const auto& [_, members] : groups) {
            std::vector<double> values;
            for (auto i : members) values.push_back(rewards[i].final);
            const auto adv = reward::group_advantages(values, a.epsilon);
            for (std::size_t k = 0; k < members.size(); ++k) advantage[members[k]] = adv[k];
        }
    }

    std::vector<ordered_json> rows;
    for (std::size_t i = 0; i < completions.size(); ++i) {
        ordered_json row{{"qa_id", completions[i].qa_id},
                         {"format", rewards[i].format},
                         {"accuracy", rewards[i].accuracy},
                         {"final", rewards[i].final}};
        if (advantage[i]) row["advantage"] = *advantage[i];
        rows.push_back(std::move(row));
    }
    write_json_lines(rows, a.out);
    std::cout << ordered_json{{"completions", rows.size()}}.dump() << '\n';
    return 0;
}

int cmd_eval(const Globals&, const EvalArgs& a) {
    require_file(a.benchmark, "benchmark");
    require_file(a.outputs, "outputs");
    metrics::AverageMode mode;
    if (a.average == "uniform") {
        mode = metrics::AverageMode::Uniform;
    } else if (a.average == "weighted") {
        mode = metrics::AverageMode::ItemWeighted;
    } else {
        throw ValidationError("--average must be uniform or weighted");
    }
    const auto report =
        metrics::evaluate_benchmark(load_completion_jsonl(a.outputs), load_qa_jsonl(a.benchmark), mode);
    const auto j = metrics::to_json(report);
    write_json_file(j, a.report);
    std::cout << j.dump() << '\n';
    return 0;
}

int cmd_run(const Globals& g, const RunArgs& a) {
    auto config = load_config(g);
    if (a.out_dir) config.out_dir = *a.out_dir;
    pipeline::RunOptions options;
    options.resume = a.resume;
    options.stop_after = a.stop_after;
    options.replay_transcript = a.transcript;
    options.log_stream = &std::cerr;
    const auto report = pipeline::run_pipeline(config, options);
    std::cout << ordered_json{{"new_items", report.new_items},
                              {"run_report", (config.out_dir / "run_report.json").string()}}
                     .dump()
              << '\n';
    return 0;
}

} // namespace psyforge::cli
