#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>

#include "psyforge/corpus.hpp"
#include "test_support.hpp"

using nlohmann::json;
namespace ts = psyforge::testing;

namespace {

struct Result {
    int code = -1;
    std::string out;
    std::string err;
};

Result psyforge_cli(const std::string& args, const ts::TempDir& dir) {
    const auto out = dir / "stdout.txt";
    const auto err = dir / "stderr.txt";
    const std::string command =
        std::string("\"") + PSYFORGE_CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" + err.string() + "\"";
    const int status = std::system(command.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = ts::read_file(out);
    r.err = ts::read_file(err);
    return r;
}

std::string quoted(const std::filesystem::path& p) { return "\"" + p.string() + "\""; }

} // namespace

TEST_SUITE("cli") {

TEST_CASE("help and version") {
    ts::TempDir dir;
    auto r = psyforge_cli("--help", dir);
    CHECK(r.code == 0);
    for (const char* sub : {"clean", "dedup", "synth", "select", "split", "reward", "eval", "run", "replay"}) {
        CHECK(r.out.find(sub) != std::string::npos);
    }
    CHECK(psyforge_cli("--version", dir).code == 0);
}

TEST_CASE("usage and validation errors exit with 2") {
    ts::TempDir dir;
    CHECK(psyforge_cli("frobnicate", dir).code == 2);
    CHECK(psyforge_cli("run", dir).code == 2);
    ts::write_file(dir / "bad.jsonl", "{\"id\": \"x\"}\n");
    const auto r = psyforge_cli("clean --in " + quoted(dir / "bad.jsonl") + " --out " + quoted(dir / "o.jsonl"), dir);
    CHECK(r.code == 2);
    CHECK(r.err.find("line 1") != std::string::npos);
}

TEST_CASE("run, interrupt and resume through the binary") {
    ts::TempDir dir;
    const auto config = quoted(ts::toy_dir() / "config.json");
    const auto out = dir / "run";
    auto r = psyforge_cli("--config " + config + " run --out-dir " + quoted(out) + " --stop-after 7", dir);
    CHECK(r.code == 3);
    r = psyforge_cli("--config " + config + " run --resume --out-dir " + quoted(out), dir);
    CHECK(r.code == 0);
    CHECK(ts::diff_against_golden(out, ts::toy_dir() / "golden").empty());

    r = psyforge_cli("--config " + config + " replay --transcript " + quoted(out / "logs" / "transcript.jsonl") +
                         " --out-dir " + quoted(dir / "replayed"),
                     dir);
    CHECK(r.code == 0);
    CHECK(ts::diff_against_golden(dir / "replayed", ts::toy_dir() / "golden").empty());
}

TEST_CASE("clean and dedup without a backend") {
    ts::TempDir dir;
    auto r = psyforge_cli("clean --in " + quoted(ts::toy_dir() / "qa.jsonl") + " --out " + quoted(dir / "c.jsonl"),
                          dir);
    REQUIRE(r.code == 0);
    const auto cleaned = psyforge::load_qa_jsonl(dir / "c.jsonl");
    CHECK(cleaned.size() == 6);
    CHECK(cleaned[2].question == "以下哪些属于防御机制？详见");
    CHECK(std::filesystem::exists(dir / "c.report.json"));

    r = psyforge_cli("dedup --in " + quoted(dir / "c.jsonl") + " --out " + quoted(dir / "d.jsonl"), dir);
    REQUIRE(r.code == 0);
    const auto survivors = psyforge::load_qa_jsonl(dir / "d.jsonl");
    REQUIRE(survivors.size() == 5);
    // Without a ranker the longer question of the duplicate pair survives.
    CHECK(survivors.back().id == "q06");
}

TEST_CASE("reward with grouped advantages") {
    ts::TempDir dir;
    ts::write_file(dir / "c.jsonl", R"({"qa_id":"q02","text":"<think>最高层次</think>答案：D"}
{"qa_id":"q02","text":"答案：A"}
{"qa_id":"q03","text":"<think>防御</think>答案：AB"}
)");
    const auto r = psyforge_cli("reward --completions " + quoted(dir / "c.jsonl") + " --gold " +
                                    quoted(ts::toy_dir() / "qa.jsonl") + " --out " + quoted(dir / "r.jsonl") +
                                    " --group-by qa_id --advantages --epsilon 1e-12",
                                dir);
    REQUIRE(r.code == 0);
    const auto rows = psyforge::read_json_lines(dir / "r.jsonl");
    REQUIRE(rows.size() == 3);
    CHECK(rows[0]["final"] == 2.25);
    CHECK(rows[1]["final"] == -2.0);
    CHECK(rows[0]["advantage"].get<double>() == doctest::Approx(1.0));
    CHECK(rows[1]["advantage"].get<double>() == doctest::Approx(-1.0));
    CHECK(rows[2]["accuracy"].get<double>() == doctest::Approx(2.0 / 3));
    CHECK(rows[2]["advantage"] == 0.0);
}

TEST_CASE("eval writes a report") {
    ts::TempDir dir;
    ts::write_file(dir / "o.jsonl", R"({"qa_id":"q01","text":"答案：A"}
{"qa_id":"q03","text":"答案：AB"}
)");
    const auto r = psyforge_cli("eval --benchmark " + quoted(ts::toy_dir() / "qa.jsonl") + " --outputs " +
                                    quoted(dir / "o.jsonl") + " --report " + quoted(dir / "rep.json"),
                                dir);
    REQUIRE(r.code == 0);
    const auto report = json::parse(ts::read_file(dir / "rep.json"));
    CHECK(report["totals"]["missing"] == 4);
}

TEST_CASE("split rejects overlapping inputs") {
    ts::TempDir dir;
    const auto qa = quoted(ts::toy_dir() / "qa.jsonl");
    auto r = psyforge_cli("split --pr " + qa + " --pc " + qa + " --out-dir " + quoted(dir / "s"), dir);
    CHECK(r.code == 2);
    r = psyforge_cli("split --pr " + qa + " --cp " + quoted(ts::toy_dir() / "cp.jsonl") + " --out-dir " +
                         quoted(dir / "s"),
                     dir);
    CHECK(r.code == 0);
    const auto manifest = json::parse(ts::read_file(dir / "s" / "manifest.json"));
    CHECK(manifest["D_sft"]["count"] == 6);
    CHECK(manifest["D_grpo"]["count"] == 1);
}

} // TEST_SUITE
