#include <doctest.h>

#include <atomic>
#include <thread>

#include <httplib.h>

#include "psyforge/llm.hpp"
#include "test_support.hpp"

using namespace psyforge;
using namespace psyforge::llm;
using nlohmann::json;
namespace ts = psyforge::testing;

namespace {

ChatRequest request(const std::string& backend, const std::string& user, const std::string& tag = "t") {
    ChatRequest r;
    r.backend_name = backend;
    r.messages = {{Role::User, user}};
    r.request_tag = tag;
    return r;
}

/// Local chat-completions endpoint that replays a queue of (status, body).
class FakeServer {
public:
    explicit FakeServer(std::vector<std::pair<int, std::string>> replies) : replies_(std::move(replies)) {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            bodies_.push_back(json::parse(req.body));
            auth_.push_back(req.get_header_value("Authorization"));
            const auto n = hits_++;
            const auto& [status, body] = replies_.at(std::min(n, replies_.size() - 1));
            res.status = status;
            res.set_content(body, "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~FakeServer() {
        server_.stop();
        thread_.join();
    }

    std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
    std::size_t hits() const { return hits_; }
    const std::vector<json>& bodies() const { return bodies_; }
    const std::vector<std::string>& auth() const { return auth_; }

private:
    httplib::Server server_;
    std::vector<std::pair<int, std::string>> replies_;
    std::vector<json> bodies_;
    std::vector<std::string> auth_;
    std::atomic<std::size_t> hits_{0};
    int port_ = 0;
    std::thread thread_;
};

std::string completion_body(const std::string& content, const std::string& finish = "stop") {
    return json{{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", content}}},
                                          {"finish_reason", finish}}})}}
        .dump();
}

} // namespace

TEST_SUITE("llm") {

TEST_CASE("scripted backend matches wildcard, tag and substring rules in order") {
    auto backend = ts::scripted(json::array({{{"match", "tag:judge:"}, {"reply", "by tag"}},
                                             {{"match", "心理"}, {"reply", "by text"}},
                                             {{"match", "*"}, {"reply", "anything"}}}));
    auto gw = ts::scripted_gateway({{"m", backend}});
    CHECK(gw->chat(request("m", "心理学", "x")).content == "by text");
    CHECK(gw->chat(request("m", "z", "quality:judge:1")).content == "by tag");
    CHECK(gw->chat(request("m", "你好", "other")).content == "anything");
    CHECK_THROWS_AS(gw->chat(request("m", "z")), LlmError);
    CHECK(backend->calls() == 4);
    CHECK(backend->remaining() == 0);
}

TEST_CASE("scripted backend queues hello") {
    auto gw = ts::scripted_gateway({{"m", ts::scripted(json::array({{{"match", "*"}, {"reply", "hello"}}}))}});
    const auto r = gw->chat(request("m", "hi"));
    CHECK(r.content == "hello");
    CHECK(r.finish_reason == FinishReason::Stop);
    CHECK(r.attempt == 1);
}

TEST_CASE("script files reject unknown shapes") {
    CHECK_THROWS(ScriptedBackend::parse_script(json::object()));
    CHECK_THROWS(ScriptedBackend::parse_script(json::array({{{"match", "*"}}})));
    CHECK_THROWS(ScriptedBackend::parse_script(json::array({{{"match", "*"}, {"error", "nonsense"}}})));
    const auto entries = ScriptedBackend::parse_script(json::array({{{"match", "*"}, {"error", "http_status"}}}));
    REQUIRE(entries.size() == 1);
    CHECK(entries[0].failure == ErrorKind::HttpStatus);
}

TEST_CASE("gateway retries retryable errors with exponential backoff") {
    auto backend = ts::scripted(json::array({{{"match", "*"}, {"error", "transport"}},
                                             {{"match", "*"}, {"error", "timeout"}},
                                             {{"match", "*"}, {"reply", "ok"}}}));
    Gateway gw;
    std::vector<long long> sleeps;
    gw.set_sleep_function([&](std::chrono::microseconds d) { sleeps.push_back(d.count()); });
    BackendOptions options;
    options.policy.max_attempts = 3;
    options.policy.base_delay_ms = 100;
    options.policy.backoff_factor = 2;
    gw.register_backend("m", backend, options);
    const auto r = gw.chat(request("m", "q"));
    CHECK(r.content == "ok");
    CHECK(r.attempt == 3);
    CHECK(sleeps == std::vector<long long>{100000, 200000});
    const auto transcript = gw.transcript();
    REQUIRE(transcript.size() == 3);
    CHECK_FALSE(transcript[0].ok);
    CHECK(transcript[0].error_kind == ErrorKind::Transport);
    CHECK(transcript[2].ok);
    CHECK(transcript[2].attempt == 3);
}

TEST_CASE("gateway gives up on exhausted attempts and on fatal errors") {
    auto backend = ts::scripted(json::array({{{"match", "*"}, {"error", "transport"}},
                                             {{"match", "*"}, {"error", "transport"}},
                                             {{"match", "*"}, {"error", "auth"}},
                                             {{"match", "*"}, {"reply", "never"}}}));
    Gateway gw;
    gw.set_sleep_function([](std::chrono::microseconds) {});
    BackendOptions options;
    options.policy.max_attempts = 2;
    gw.register_backend("m", backend, options);
    try {
        gw.chat(request("m", "q"));
        FAIL("expected failure");
    } catch (const LlmError& e) {
        CHECK(e.kind() == ErrorKind::Transport);
    }
    try {
        gw.chat(request("m", "q"));
        FAIL("expected failure");
    } catch (const LlmError& e) {
        CHECK(e.kind() == ErrorKind::Auth);
        CHECK_FALSE(e.retryable());
    }
    CHECK(backend->calls() == 3);
}

TEST_CASE("retry classification") {
    CHECK(LlmError(ErrorKind::HttpStatus, "", 429).retryable());
    CHECK(LlmError(ErrorKind::HttpStatus, "", 503).retryable());
    CHECK_FALSE(LlmError(ErrorKind::HttpStatus, "", 400).retryable());
    CHECK_FALSE(LlmError(ErrorKind::ScriptExhausted, "").retryable());
    CHECK(parse_error_kind(to_string(ErrorKind::BadResponse)) == ErrorKind::BadResponse);
    CHECK(LlmError(ErrorKind::Auth, "").fatal());
    CHECK(LlmError(ErrorKind::ScriptExhausted, "").fatal());
    CHECK_FALSE(LlmError(ErrorKind::Timeout, "").fatal());
    CHECK_FALSE(LlmError(ErrorKind::HttpStatus, "", 400).fatal());
}

TEST_CASE("gateway rejects malformed requests and unknown backends") {
    Gateway gw;
    CHECK_THROWS_AS(gw.chat(request("nobody", "q")), LlmError);
    gw.register_backend("m", ts::scripted(json::array({{{"match", "*"}, {"reply", "x"}}})));
    auto r = request("m", "q");
    r.messages.push_back({Role::Assistant, "a"});
    CHECK_THROWS_AS(gw.chat(r), LlmError);
    r = request("m", "q");
    r.temperature = -1;
    CHECK_THROWS_AS(gw.chat(r), LlmError);
    CHECK(gw.has_backend("m"));
    CHECK_FALSE(gw.has_backend("nobody"));
}

TEST_CASE("empty completions are treated as retryable bad responses") {
    auto gw = ts::scripted_gateway({{"m", ts::scripted(json::array({{{"match", "*"}, {"reply", ""}}}))}});
    try {
        gw->chat(request("m", "q"));
        FAIL("expected failure");
    } catch (const LlmError& e) {
        CHECK(e.kind() == ErrorKind::BadResponse);
    }
}

TEST_CASE("rate limiter waits for tokens") {
    Gateway gw;
    std::vector<long long> sleeps;
    gw.set_sleep_function([&](std::chrono::microseconds d) {
        sleeps.push_back(d.count());
        std::this_thread::sleep_for(d);
    });
    BackendOptions options;
    options.rate_per_sec = 50;
    options.burst = 1;
    gw.register_backend("m", ts::scripted(json::array({{{"match", "*"}, {"reply", "a"}},
                                                       {{"match", "*"}, {"reply", "b"}},
                                                       {{"match", "*"}, {"reply", "c"}}})),
                        options);
    for (int i = 0; i < 3; ++i) gw.chat(request("m", "q"));
    CHECK(sleeps.size() >= 2);
}

TEST_CASE("concurrent calls respect max_parallel") {
    class Slow final : public Backend {
    public:
        BackendReply complete(const ChatRequest&) override {
            const int now = ++active;
            int seen = peak.load();
            while (now > seen && !peak.compare_exchange_weak(seen, now)) {
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(5));
            --active;
            return {"ok", FinishReason::Stop};
        }
        std::atomic<int> active{0};
        std::atomic<int> peak{0};
    };
    auto slow = std::make_shared<Slow>();
    Gateway gw;
    BackendOptions options;
    options.policy.max_parallel = 2;
    gw.register_backend("m", slow, options);
    std::vector<std::thread> threads;
    for (int i = 0; i < 8; ++i) threads.emplace_back([&] { gw.chat(request("m", "q")); });
    for (auto& t : threads) t.join();
    CHECK(slow->peak.load() <= 2);
    CHECK(gw.request_count() == 8);
}

TEST_CASE("openai wire format against a local server") {
    FakeServer server({{503, "busy"}, {200, completion_body("答案：B", "length")}});
    OpenAiConfig config{server.base_url(), "test-model", "secret", 5.0};
    Gateway gw;
    gw.set_sleep_function([](std::chrono::microseconds) {});
    gw.register_backend("remote", std::make_shared<OpenAiBackend>(config));

    ChatRequest r = request("remote", "题目", "eval:1");
    r.messages.insert(r.messages.begin(), {Role::System, "你是助手"});
    r.temperature = 0.0;
    r.max_tokens = 64;
    const auto response = gw.chat(r);
    CHECK(response.content == "答案：B");
    CHECK(response.finish_reason == FinishReason::Length);
    CHECK(response.attempt == 2);
    REQUIRE(server.hits() == 2);
    const auto& body = server.bodies().back();
    CHECK(body["model"] == "test-model");
    CHECK(body["max_tokens"] == 64);
    CHECK(body["temperature"] == 0.0);
    CHECK(body["messages"][0]["role"] == "system");
    CHECK(body["messages"][1]["content"] == "题目");
    CHECK(server.auth().back() == "Bearer secret");
}

TEST_CASE("openai auth failures are not retried") {
    FakeServer server({{401, R"({"error":"bad key"})"}});
    Gateway gw;
    gw.set_sleep_function([](std::chrono::microseconds) {});
    gw.register_backend("remote", std::make_shared<OpenAiBackend>(OpenAiConfig{server.base_url(), "m", "k", 5.0}));
    try {
        gw.chat(request("remote", "q"));
        FAIL("expected failure");
    } catch (const LlmError& e) {
        CHECK(e.kind() == ErrorKind::Auth);
    }
    CHECK(server.hits() == 1);
}

TEST_CASE("openai reply parsing") {
    CHECK(OpenAiBackend::parse_reply(200, completion_body("hi")).content == "hi");
    CHECK_THROWS_AS(OpenAiBackend::parse_reply(200, "not json"), LlmError);
    CHECK_THROWS_AS(OpenAiBackend::parse_reply(200, R"({"choices":[]})"), LlmError);
    CHECK_THROWS_AS(OpenAiBackend::parse_reply(500, "oops"), LlmError);
    CHECK_THROWS_AS(OpenAiBackend(OpenAiConfig{"localhost:80", "m", "", 1.0}), ValidationError);
}

TEST_CASE("transcripts replay without a backend") {
    ts::TempDir dir;
    {
        auto backend = ts::scripted(json::array({{{"match", "*"}, {"error", "timeout"}},
                                                 {{"match", "*"}, {"reply", "first"}},
                                                 {{"match", "*"}, {"reply", "second"}}}));
        Gateway gw;
        gw.set_sleep_function([](std::chrono::microseconds) {});
        gw.register_backend("m", backend);
        gw.set_transcript_path(dir / "t.jsonl");
        CHECK(gw.chat(request("m", "q", "a")).content == "first");
        CHECK(gw.chat(request("m", "q", "b")).content == "second");
    }
    const auto transcript = load_transcript(dir / "t.jsonl");
    REQUIRE(transcript.size() == 3);
    CHECK(transcript[0].seq < transcript[1].seq);

    Gateway replay;
    replay.set_sleep_function([](std::chrono::microseconds) {});
    replay.register_backend("m", std::make_shared<ReplayBackend>("m", transcript));
    // Out of order: lookups are keyed by tag, and the recorded timeout replays too.
    CHECK(replay.chat(request("m", "q", "b")).content == "second");
    const auto a = replay.chat(request("m", "q", "a"));
    CHECK(a.content == "first");
    CHECK(a.attempt == 2);
    try {
        replay.chat(request("m", "q", "c"));
        FAIL("expected failure");
    } catch (const LlmError& e) {
        CHECK(e.kind() == ErrorKind::ScriptExhausted);
    }
}

TEST_CASE("model refs add an optional system message") {
    auto backend = ts::scripted(json::array({{{"match", "tag:x"}, {"reply", "ok"}}}));
    auto gw = ts::scripted_gateway({{"m", backend}});
    const ModelRef ref{gw.get(), "m", 0.2, 100};
    CHECK(ref.ask("题目", "x", "系统").content == "ok");
    const auto t = gw->transcript();
    REQUIRE(t.size() == 1);
    REQUIRE(t[0].messages.size() == 2);
    CHECK(t[0].messages[0].role == Role::System);
    CHECK(t[0].temperature == doctest::Approx(0.2));
    CHECK(t[0].max_tokens == 100);
}

} // TEST_SUITE
