#include <doctest.h>

#include <fstream>
#include <sstream>

#include "psyforge/error.hpp"
#include "psyforge/pipeline.hpp"
#include "test_support.hpp"

using namespace psyforge;
using namespace psyforge::pipeline;
using nlohmann::json;
namespace ts = psyforge::testing;

namespace {

json toy_json() { return json::parse(ts::read_file(ts::toy_dir() / "config.json")); }

PipelineConfig config_from(const json& j, const std::filesystem::path& out) {
    auto config = PipelineConfig::from_json(j, ts::toy_dir());
    config.out_dir = out;
    return config;
}

RunOptions quiet(std::ostringstream& sink) {
    RunOptions options;
    options.log_stream = &sink;
    return options;
}

std::string first_problem(const std::vector<std::string>& problems) {
    return problems.empty() ? std::string() : problems.front();
}

} // namespace

TEST_SUITE("pipeline") {

TEST_CASE("toy corpus reproduces the golden output") {
    ts::TempDir out;
    std::ostringstream sink;
    const auto report = run_pipeline(ts::toy_config(out.path()), quiet(sink));
    CHECK(first_problem(ts::diff_against_golden(out.path(), ts::toy_dir() / "golden")) == "");
    CHECK(report.new_items == 23);
    CHECK(report.stages["select"]["challenging"] == 2);
    CHECK(report.stages["split"]["D_sft"] == 5);
    CHECK(std::filesystem::exists(out / "logs" / "transcript.jsonl"));
    CHECK(sink.str().find("\"event\":\"run_done\"") != std::string::npos);
}

TEST_CASE("the golden partition matches the scripted behaviour") {
    const auto golden = ts::toy_dir() / "golden";
    const auto manifest = json::parse(ts::read_file(golden / "split.manifest.json"));
    CHECK(manifest["D_pr"]["records"] == json::array({"q01", "q04", "d2-q1"}));
    CHECK(manifest["D_pc"]["records"] == json::array({"q02", "q05"}));
    CHECK(manifest["D_em"]["records"] == json::array({"s1"}));
    CHECK(manifest["D_grpo"]["records"] == json::array({"q02", "q05", "cp1"}));
    const auto clusters = json::parse(ts::read_file(golden / "dedup.clusters.json"));
    CHECK(clusters["q05"]["absorbed"] == json::array({"q06"}));
    const auto pruned = read_json_lines(golden / "synth_rationales.pruned.jsonl");
    REQUIRE(pruned.size() == 1);
    CHECK(pruned[0]["id"] == "q03");
    const auto qa = load_qa_jsonl(golden / "clean.qa.jsonl");
    CHECK(qa[0].question == "下列哪一项属于经典条件反射的例子？");
    CHECK(qa[1].question == "马斯洛需要层次理论中，最高层次的需要是什么？");
}

TEST_CASE("kill and resume matches the uninterrupted run") {
    for (std::size_t stop : {3U, 9U, 17U}) {
        CAPTURE(stop);
        ts::TempDir out;
        std::ostringstream sink;
        auto killed = quiet(sink);
        killed.stop_after = stop;
        CHECK_THROWS_AS(run_pipeline(ts::toy_config(out.path()), killed), StageFailure);
        const auto checkpoint = Checkpoint::load(out / "checkpoint.json");
        REQUIRE(checkpoint.has_value());
        CHECK(checkpoint->stage.has_value());

        auto resume = quiet(sink);
        resume.resume = true;
        const auto report = run_pipeline(ts::toy_config(out.path()), resume);
        CHECK(report.new_items == 23 - stop);
        CHECK(first_problem(ts::diff_against_golden(out.path(), ts::toy_dir() / "golden")) == "");
    }
}

TEST_CASE("a torn partial line is ignored on resume") {
    ts::TempDir out;
    std::ostringstream sink;
    auto killed = quiet(sink);
    killed.stop_after = 12;
    CHECK_THROWS_AS(run_pipeline(ts::toy_config(out.path()), killed), StageFailure);
    const auto checkpoint = Checkpoint::load(out / "checkpoint.json");
    REQUIRE(checkpoint.has_value());
    REQUIRE(checkpoint->stage.has_value());
    {
        std::ofstream partial(out / (*checkpoint->stage + ".partial.jsonl"), std::ios::app);
        partial << R"({"id":"q0)";
    }
    auto resume = quiet(sink);
    resume.resume = true;
    run_pipeline(ts::toy_config(out.path()), resume);
    CHECK(first_problem(ts::diff_against_golden(out.path(), ts::toy_dir() / "golden")) == "");
}

TEST_CASE("resume after completion does no work") {
    ts::TempDir out;
    std::ostringstream sink;
    run_pipeline(ts::toy_config(out.path()), quiet(sink));
    auto resume = quiet(sink);
    resume.resume = true;
    const auto again = run_pipeline(ts::toy_config(out.path()), resume);
    CHECK(again.new_items == 0);
    CHECK(first_problem(ts::diff_against_golden(out.path(), ts::toy_dir() / "golden")) == "");
}

TEST_CASE("resume refuses a changed configuration") {
    ts::TempDir out;
    std::ostringstream sink;
    auto killed = quiet(sink);
    killed.stop_after = 5;
    CHECK_THROWS_AS(run_pipeline(ts::toy_config(out.path()), killed), StageFailure);

    auto changed = toy_json();
    changed["params"]["dedup"] = {{"threshold", 0.6}};
    auto resume = quiet(sink);
    resume.resume = true;
    CHECK_THROWS_AS(run_pipeline(config_from(changed, out.path()), resume), ValidationError);

    // Runtime-only keys do not affect the digest.
    auto tuned = toy_json();
    tuned["max_parallel"] = 1;
    tuned["log_level"] = "debug";
    CHECK(config_from(tuned, out.path()).digest() == ts::toy_config(out.path()).digest());
    CHECK_NOTHROW(run_pipeline(config_from(tuned, out.path()), resume));
}

TEST_CASE("a fatal backend error stops the run at the failing stage") {
    ts::TempDir dir;
    ts::write_file(dir / "judge.json", R"([{"match": "*", "error": "auth"}])");
    auto j = toy_json();
    j["backends"][1]["script"] = (dir / "judge.json").string();
    std::ostringstream sink;
    try {
        run_pipeline(config_from(j, dir / "out"), quiet(sink));
        FAIL("expected a stage failure");
    } catch (const StageFailure& e) {
        CHECK(e.stage() == "clean");
    }
    CHECK(Checkpoint::load(dir / "out" / "checkpoint.json").has_value());
}

TEST_CASE("resume without a checkpoint is refused") {
    ts::TempDir out;
    std::ostringstream sink;
    auto resume = quiet(sink);
    resume.resume = true;
    CHECK_THROWS_AS(run_pipeline(ts::toy_config(out.path()), resume), ValidationError);
}

TEST_CASE("a recorded transcript replays the run offline") {
    ts::TempDir first;
    ts::TempDir second;
    std::ostringstream sink;
    run_pipeline(ts::toy_config(first.path()), quiet(sink));
    std::filesystem::copy_file(first / "logs" / "transcript.jsonl", second / "recorded.jsonl");
    auto replay = quiet(sink);
    replay.replay_transcript = second / "recorded.jsonl";
    run_pipeline(ts::toy_config(second / "out"), replay);
    CHECK(first_problem(ts::diff_against_golden(second / "out", ts::toy_dir() / "golden")) == "");
}

TEST_CASE("parallelism does not change the output") {
    ts::TempDir out;
    std::ostringstream sink;
    auto config = ts::toy_config(out.path());
    config.max_parallel = 1;
    run_pipeline(config, quiet(sink));
    CHECK(first_problem(ts::diff_against_golden(out.path(), ts::toy_dir() / "golden")) == "");
}

TEST_CASE("configuration validation") {
    const auto out = std::filesystem::temp_directory_path();
    auto expect_invalid = [&](const json& j) {
        CHECK_THROWS_AS(config_from(j, out).validate(), ValidationError);
    };
    auto j = toy_json();
    j["colour"] = "blue";
    CHECK_THROWS_AS(config_from(j, out), ValidationError);

    j = toy_json();
    j["stages"] = json::array({"clean", "transmogrify"});
    expect_invalid(j);

    j = toy_json();
    j["backends"].erase(1);
    expect_invalid(j);

    j = toy_json();
    j["backends"][0]["kind"] = "openai";
    j["backends"][0]["base_url"] = "http://127.0.0.1:9";
    j["backends"][0]["model"] = "m";
    j["backends"][0]["api_key_env"] = "PSYFORGE_TEST_KEY_THAT_IS_NOT_SET";
    // The key is only needed for live calls, so it is checked when backends are registered.
    CHECK_NOTHROW(config_from(j, out).validate());
    llm::Gateway gateway;
    CHECK_THROWS_AS(register_backends(gateway, config_from(j, out), std::nullopt), ValidationError);

    j = toy_json();
    j["inputs"]["qa"] = "does-not-exist.jsonl";
    expect_invalid(j);

    j = toy_json();
    j["params"]["rounds"] = -2;
    CHECK_THROWS_AS(config_from(j, out).validate(), ValidationError);
}

TEST_CASE("required roles depend on the stage and inputs") {
    const auto config = ts::toy_config(std::filesystem::temp_directory_path());
    CHECK(required_roles("dedup", config) == std::vector<std::string>{"ranker"});
    CHECK(required_roles("split", config).empty());
    const auto rationale = required_roles("synth_rationales", config);
    CHECK(std::find(rationale.begin(), rationale.end(), "judge") != rationale.end());
    CHECK(config.selectors().size() == 3);
    CHECK(config.backend_for("generator")->name == "gen");
    CHECK(is_stage_name("enrich"));
    CHECK_FALSE(is_stage_name("train"));
}

TEST_CASE("volatile artifacts") {
    CHECK(is_volatile_artifact("logs/run.log.jsonl"));
    CHECK(is_volatile_artifact("checkpoint.json"));
    CHECK(is_volatile_artifact("dedup.partial.jsonl"));
    CHECK_FALSE(is_volatile_artifact("run_report.json"));
    CHECK_FALSE(is_volatile_artifact("split.sft.jsonl"));
}

} // TEST_SUITE
