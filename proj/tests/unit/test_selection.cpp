#include <doctest.h>

#include "psyforge/error.hpp"
#include "psyforge/selection.hpp"
#include "test_support.hpp"

using namespace psyforge;
using namespace psyforge::selection;
using nlohmann::json;
namespace ts = psyforge::testing;

namespace {

QAPair item(const std::string& id, const std::string& gold) {
    QAPair qa;
    qa.id = id;
    qa.question = "题目" + id;
    qa.options = {{'A', "甲"}, {'B', "乙"}, {'C', "丙"}};
    qa.gold = AnswerSet::from_string(gold);
    qa.kind = gold.size() > 1 ? QuestionKind::MMCQ : QuestionKind::SMCQ;
    return qa;
}

json say(const std::string& tag, const std::string& text) { return {{"match", "tag:" + tag}, {"reply", text}}; }

} // namespace

TEST_SUITE("selection") {

TEST_CASE("judging requires exact set equality") {
    const auto mm = item("x", "AB");
    CHECK(judge_response(mm, "答案：AB").correct);
    CHECK_FALSE(judge_response(mm, "答案：A").correct);
    CHECK_FALSE(judge_response(mm, "答案：ABC").correct);
    const auto none = judge_response(mm, "我不确定");
    CHECK_FALSE(none.correct);
    CHECK_FALSE(none.predicted.has_value());
}

TEST_CASE("selector prompt names the question kind") {
    const auto t = PromptTemplates::defaults();
    CHECK(selector_prompt(item("x", "A"), t).find("单选题") != std::string::npos);
    CHECK(selector_prompt(item("x", "AB"), t).find("多选题") != std::string::npos);
}

TEST_CASE("cross selection routes by unanimity of wrong answers") {
    auto s1 = ts::scripted(json::array({say("select:s1:a", "答案：B"), say("select:s1:b", "答案：A"),
                                        say("select:s1:c", "答案：C")}));
    auto s2 = ts::scripted(json::array({say("select:s2:a", "答案：C"), say("select:s2:b", "答案：C"),
                                        {{"match", "tag:select:s2:c"}, {"error", "timeout"}}}));
    auto gw = ts::scripted_gateway({{"s1", s1}, {"s2", s2}});
    std::vector<llm::ModelRef> selectors{{gw.get(), "s1", 0.0, 64}, {gw.get(), "s2", 0.0, 64}};
    const auto r = cross_select({item("a", "A"), item("b", "A"), item("c", "C")}, selectors,
                                PromptTemplates::defaults(), 2);
    REQUIRE(r.challenging.size() == 1);
    CHECK(r.challenging[0].id == "a");
    REQUIRE(r.remaining.size() == 1);
    CHECK(r.remaining[0].id == "b");
    REQUIRE(r.unresolved.size() == 1);
    CHECK(r.unresolved[0].qa_id == "c");
    CHECK(r.unresolved[0].selector == "s2");
    REQUIRE(r.verdicts.size() == 2);
    CHECK(r.verdicts[0].qa_id == "a");
    CHECK(r.verdicts[0].challenging);
    CHECK(r.verdicts[1].per_model.at("s1").correct);

    const auto j = to_json(r.verdicts[0]);
    CHECK(j["per_model"]["s1"]["predicted"] == "B");
    CHECK(j["challenging"] == true);
}

TEST_CASE("cross selection rejects open questions and empty selector lists") {
    QAPair open;
    open.id = "o";
    open.question = "?";
    open.kind = QuestionKind::OPEN;
    open.reference_answer = "r";
    auto gw = ts::scripted_gateway({});
    std::vector<llm::ModelRef> selectors{{gw.get(), "none", 0.0, 64}};
    CHECK_THROWS_AS(cross_select({open}, selectors, PromptTemplates::defaults()), ContractError);
    CHECK_THROWS_AS(cross_select({item("a", "A")}, {}, PromptTemplates::defaults()), ContractError);
}

TEST_CASE("a fatal selector error aborts instead of marking items unresolved") {
    auto s1 = ts::scripted(json::array({{{"match", "*"}, {"error", "auth"}}}));
    auto gw = ts::scripted_gateway({{"s1", s1}});
    std::vector<llm::ModelRef> selectors{{gw.get(), "s1", 0.0, 64}};
    CHECK_THROWS_AS(cross_select({item("a", "A")}, selectors, PromptTemplates::defaults()), llm::LlmError);
    CHECK_THROWS_AS(cross_select({item("a", "A")}, {}, PromptTemplates::defaults()), ContractError);
}

} // TEST_SUITE
