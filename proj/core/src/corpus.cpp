#include "psyforge/corpus.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <openssl/evp.h>

#include "psyforge/error.hpp"

namespace psyforge {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------- AnswerSet

AnswerSet AnswerSet::from_string(std::string_view labels) {
    AnswerSet set;
    for (char c : labels) set.insert(c);
    return set;
}

void AnswerSet::insert(char label) {
    if (!is_label(label)) {
        throw ValidationError(std::string("option label '") + label + "' outside A-E");
    }
    mask_ = static_cast<std::uint8_t>(mask_ | (1U << (label - kFirstLabel)));
}

int AnswerSet::size() const { return std::popcount(mask_); }

std::string AnswerSet::str() const {
    std::string out;
    for (char c = kFirstLabel; c <= kLastLabel; ++c) {
        if (contains(c)) out.push_back(c);
    }
    return out;
}

std::vector<char> AnswerSet::labels() const {
    const auto s = str();
    return {s.begin(), s.end()};
}

// -------------------------------------------------------------------- enums

std::string_view to_string(QuestionKind kind) {
    switch (kind) {
    case QuestionKind::SMCQ: return "SMCQ";
    case QuestionKind::MMCQ: return "MMCQ";
    case QuestionKind::OPEN: return "OPEN";
    }
    return "?";
}

std::string_view to_string(SourceType type) {
    switch (type) {
    case SourceType::I: return "I";
    case SourceType::II: return "II";
    case SourceType::III: return "III";
    case SourceType::IV: return "IV";
    }
    return "?";
}

QuestionKind parse_question_kind(std::string_view text) {
    if (text == "SMCQ") return QuestionKind::SMCQ;
    if (text == "MMCQ") return QuestionKind::MMCQ;
    if (text == "OPEN") return QuestionKind::OPEN;
    throw ValidationError("unknown kind '" + std::string(text) + "'");
}

SourceType parse_source_type(std::string_view text) {
    if (text == "I") return SourceType::I;
    if (text == "II") return SourceType::II;
    if (text == "III") return SourceType::III;
    if (text == "IV") return SourceType::IV;
    throw ValidationError("unknown source_type '" + std::string(text) + "'");
}

std::string_view to_string(SplitRole role) {
    switch (role) {
    case SplitRole::D_pr: return "D_pr";
    case SplitRole::D_pc: return "D_pc";
    case SplitRole::D_em: return "D_em";
    case SplitRole::D_ps: return "D_ps";
    case SplitRole::D_cp: return "D_cp";
    case SplitRole::D_sft: return "D_sft";
    case SplitRole::D_grpo: return "D_grpo";
    }
    return "?";
}

const std::string& record_id(const Record& record) {
    return std::visit([](const auto& r) -> const std::string& { return r.id; }, record);
}

// --------------------------------------------------------------- validation

void validate(const QAPair& qa) {
    if (qa.id.empty()) throw ValidationError("id must be non-empty");
    for (const auto& [label, text] : qa.options) {
        if (!AnswerSet::is_label(label)) {
            throw ValidationError(std::string("option label '") + label + "' outside A-E");
        }
    }
    switch (qa.kind) {
    case QuestionKind::SMCQ:
        if (qa.gold.size() != 1) throw ValidationError("SMCQ requires |gold|=1");
        break;
    case QuestionKind::MMCQ:
        if (qa.gold.size() < 2) throw ValidationError("MMCQ requires |gold|>=2");
        break;
    case QuestionKind::OPEN:
        if (!qa.gold.empty()) throw ValidationError("OPEN requires empty gold");
        if (qa.reference_answer.empty()) throw ValidationError("OPEN requires non-empty reference_answer");
        break;
    }
    for (char label : qa.gold.labels()) {
        if (!qa.options.contains(label)) {
            throw ValidationError(std::string("gold label ") + label + " is not an option key");
        }
    }
}

void validate(const DialogueSession& session) {
    if (session.id.empty()) throw ValidationError("id must be non-empty");
    if (session.turns.empty()) throw ValidationError("dialogue requires at least one turn");
    for (std::size_t i = 0; i < session.turns.size(); ++i) {
        const Speaker expected = i % 2 == 0 ? Speaker::Seeker : Speaker::Supporter;
        if (session.turns[i].role != expected) {
            throw ValidationError("dialogue roles must alternate starting with seeker (turn " + std::to_string(i) +
                                  ")");
        }
    }
}

void validate(const CompletionRecord& completion) {
    if (completion.qa_id.empty()) throw ValidationError("qa_id must be non-empty");
}

// --------------------------------------------------------------------- JSON

namespace {

const json& require(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end()) throw ValidationError(std::string("missing field \"") + key + "\"");
    return *it;
}

std::string require_string(const json& j, const char* key) {
    const auto& v = require(j, key);
    if (!v.is_string()) throw ValidationError(std::string("field \"") + key + "\" must be a string");
    return v.get<std::string>();
}

std::string optional_string(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return {};
    if (!it->is_string()) throw ValidationError(std::string("field \"") + key + "\" must be a string");
    return it->get<std::string>();
}

AnswerSet answer_set_from_json(const json& j, const char* key) {
    AnswerSet set;
    if (j.is_string()) return AnswerSet::from_string(j.get<std::string>());
    if (!j.is_array()) throw ValidationError(std::string("field \"") + key + "\" must be an array of labels");
    for (const auto& item : j) {
        if (!item.is_string() || item.get<std::string>().size() != 1) {
            throw ValidationError(std::string("field \"") + key + "\" entries must be single labels");
        }
        set.insert(item.get<std::string>()[0]);
    }
    return set;
}

ordered_json answer_set_to_json(const AnswerSet& set) {
    ordered_json arr = ordered_json::array();
    for (char c : set.labels()) arr.push_back(std::string(1, c));
    return arr;
}

std::string_view to_string(Speaker s) { return s == Speaker::Seeker ? "seeker" : "supporter"; }

Speaker parse_speaker(std::string_view s) {
    if (s == "seeker") return Speaker::Seeker;
    if (s == "supporter") return Speaker::Supporter;
    throw ValidationError("unknown role '" + std::string(s) + "'");
}

} // namespace

ordered_json to_json(const QAPair& qa) {
    ordered_json j;
    j["id"] = qa.id;
    j["question"] = qa.question;
    ordered_json options = ordered_json::object();
    for (const auto& [label, text] : qa.options) options[std::string(1, label)] = text;
    j["options"] = std::move(options);
    j["gold"] = answer_set_to_json(qa.gold);
    j["reference_answer"] = qa.reference_answer;
    j["kind"] = to_string(qa.kind);
    j["source_type"] = to_string(qa.source_type);
    j["subfield"] = qa.subfield;
    if (!qa.category.empty()) j["category"] = qa.category;
    if (qa.rationale) {
        const auto& r = *qa.rationale;
        ordered_json rj;
        rj["prompt_version"] = r.prompt_version;
        rj["prompt"] = r.prompt;
        rj["text"] = r.text;
        rj["predicted"] = answer_set_to_json(r.predicted);
        rj["round"] = r.round;
        rj["regen_attempt"] = r.regen_attempt;
        j["rationale"] = std::move(rj);
    }
    return j;
}

ordered_json to_json(const DialogueSession& session) {
    ordered_json j;
    j["id"] = session.id;
    ordered_json turns = ordered_json::array();
    for (const auto& t : session.turns) {
        ordered_json tj;
        tj["role"] = to_string(t.role);
        tj["content"] = t.content;
        turns.push_back(std::move(tj));
    }
    j["turns"] = std::move(turns);
    j["enriched"] = session.enriched;
    return j;
}

ordered_json to_json(const CompletionRecord& completion) {
    ordered_json j;
    j["qa_id"] = completion.qa_id;
    j["text"] = completion.text;
    if (completion.gold) j["gold"] = answer_set_to_json(*completion.gold);
    return j;
}

ordered_json to_json(const Record& record) {
    return std::visit([](const auto& r) { return to_json(r); }, record);
}

QAPair qa_from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("record must be a JSON object");
    QAPair qa;
    qa.id = require_string(j, "id");
    qa.question = require_string(j, "question");
    if (auto it = j.find("options"); it != j.end() && !it->is_null()) {
        if (!it->is_object()) throw ValidationError("field \"options\" must be an object");
        for (const auto& [key, value] : it->items()) {
            if (key.size() != 1 || !AnswerSet::is_label(key[0])) {
                throw ValidationError("option label '" + key + "' outside A-E");
            }
            if (!value.is_string()) throw ValidationError("option " + key + " must be a string");
            qa.options[key[0]] = value.get<std::string>();
        }
    }
    if (auto it = j.find("gold"); it != j.end() && !it->is_null()) qa.gold = answer_set_from_json(*it, "gold");
    qa.reference_answer = optional_string(j, "reference_answer");
    qa.kind = parse_question_kind(require_string(j, "kind"));
    if (auto s = optional_string(j, "source_type"); !s.empty()) qa.source_type = parse_source_type(s);
    qa.subfield = optional_string(j, "subfield");
    qa.category = optional_string(j, "category");
    if (auto it = j.find("rationale"); it != j.end() && !it->is_null()) {
        AttachedRationale r;
        r.prompt_version = it->value("prompt_version", 0);
        r.prompt = optional_string(*it, "prompt");
        r.text = require_string(*it, "text");
        if (auto p = it->find("predicted"); p != it->end()) r.predicted = answer_set_from_json(*p, "predicted");
        r.round = it->value("round", 0);
        r.regen_attempt = it->value("regen_attempt", 1);
        qa.rationale = std::move(r);
    }
    validate(qa);
    return qa;
}

DialogueSession dialogue_from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("record must be a JSON object");
    DialogueSession s;
    s.id = require_string(j, "id");
    const auto& turns = require(j, "turns");
    if (!turns.is_array()) throw ValidationError("field \"turns\" must be an array");
    for (const auto& t : turns) {
        s.turns.push_back(Turn{parse_speaker(require_string(t, "role")), require_string(t, "content")});
    }
    if (auto it = j.find("enriched"); it != j.end()) {
        if (!it->is_boolean()) throw ValidationError("field \"enriched\" must be a boolean");
        s.enriched = it->get<bool>();
    }
    validate(s);
    return s;
}

CompletionRecord completion_from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("record must be a JSON object");
    CompletionRecord c;
    c.qa_id = require_string(j, "qa_id");
    c.text = require_string(j, "text");
    if (auto it = j.find("gold"); it != j.end() && !it->is_null()) c.gold = answer_set_from_json(*it, "gold");
    validate(c);
    return c;
}

Record record_from_json(const json& j) {
    if (j.is_object() && j.contains("turns")) return dialogue_from_json(j);
    return qa_from_json(j);
}

// ------------------------------------------------------------------- files

namespace {

template <typename F>
void for_each_line(const std::filesystem::path& path, F&& fn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        json parsed;
        try {
            parsed = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ValidationError("line " + std::to_string(number) + ": malformed JSON: " + e.what());
        }
        try {
            fn(number, parsed);
        } catch (const ValidationError& e) {
            throw ValidationError("line " + std::to_string(number) + ": " + e.what());
        }
    }
}

template <typename T, typename Parse>
std::vector<T> load_unique(const std::filesystem::path& path, Parse parse) {
    std::vector<T> out;
    std::unordered_set<std::string> seen;
    for_each_line(path, [&](std::size_t, const json& j) {
        T record = parse(j);
        const auto& id = [&]() -> const std::string& {
            if constexpr (std::is_same_v<T, Record>) return record_id(record);
            else return record.id;
        }();
        if (!seen.insert(id).second) throw ValidationError("duplicate id '" + id + "'");
        out.push_back(std::move(record));
    });
    return out;
}

void write_lines(const std::vector<std::string>& lines, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& line : lines) out << line << '\n';
    out.flush();
    if (!out) throw IoError("write failed for " + path.string());
}

std::string dump(const ordered_json& j) {
    return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

template <typename T>
void save_unique(const std::vector<T>& records, const std::filesystem::path& path) {
    std::unordered_set<std::string> seen;
    std::vector<std::string> lines;
    lines.reserve(records.size());
    for (const auto& r : records) {
        const std::string& id = [&]() -> const std::string& {
            if constexpr (std::is_same_v<T, Record>) return record_id(r);
            else return r.id;
        }();
        if (!seen.insert(id).second) throw ValidationError("duplicate id '" + id + "'");
        lines.push_back(dump(to_json(r)));
    }
    write_lines(lines, path);
}

} // namespace

std::vector<QAPair> load_qa_jsonl(const std::filesystem::path& path) {
    return load_unique<QAPair>(path, qa_from_json);
}

std::vector<DialogueSession> load_dialogue_jsonl(const std::filesystem::path& path) {
    return load_unique<DialogueSession>(path, dialogue_from_json);
}

std::vector<CompletionRecord> load_completion_jsonl(const std::filesystem::path& path) {
    std::vector<CompletionRecord> out;
    for_each_line(path, [&](std::size_t, const json& j) { out.push_back(completion_from_json(j)); });
    return out;
}

std::vector<Record> load_record_jsonl(const std::filesystem::path& path) {
    return load_unique<Record>(path, record_from_json);
}

AnyRecords load_jsonl(const std::filesystem::path& path, Schema schema) {
    switch (schema) {
    case Schema::Qa: return load_qa_jsonl(path);
    case Schema::Dialogue: return load_dialogue_jsonl(path);
    case Schema::Completion: return load_completion_jsonl(path);
    }
    throw ContractError("unknown schema");
}

void save_jsonl(const std::vector<QAPair>& records, const std::filesystem::path& path) { save_unique(records, path); }

void save_jsonl(const std::vector<DialogueSession>& records, const std::filesystem::path& path) {
    save_unique(records, path);
}

void save_jsonl(const std::vector<Record>& records, const std::filesystem::path& path) { save_unique(records, path); }

void save_jsonl(const std::vector<CompletionRecord>& records, const std::filesystem::path& path) {
    std::vector<std::string> lines;
    lines.reserve(records.size());
    for (const auto& r : records) lines.push_back(dump(to_json(r)));
    write_lines(lines, path);
}

void write_json_lines(const std::vector<ordered_json>& rows, const std::filesystem::path& path) {
    std::vector<std::string> lines;
    lines.reserve(rows.size());
    for (const auto& r : rows) lines.push_back(dump(r));
    write_lines(lines, path);
}

std::vector<json> read_json_lines(const std::filesystem::path& path) {
    std::vector<json> out;
    for_each_line(path, [&](std::size_t, const json& j) { out.push_back(j); });
    return out;
}

void write_json_file(const ordered_json& value, const std::filesystem::path& path) {
    write_lines({value.dump(2, ' ', false, json::error_handler_t::replace)}, path);
}

// ------------------------------------------------------------------- splits

std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int length = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &length, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 computation failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(length * 2);
    for (unsigned int i = 0; i < length; ++i) {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 0xF]);
    }
    return out;
}

std::string manifest_digest(const std::vector<std::string>& ids) {
    std::vector<std::string> sorted(ids);
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    std::string joined;
    for (const auto& id : sorted) {
        joined += id;
        joined.push_back('\n');
    }
    return sha256_hex(joined);
}

DatasetSplit DatasetSplit::make(SplitRole role, std::vector<std::string> ids) {
    std::unordered_set<std::string> seen;
    for (const auto& id : ids) {
        if (!seen.insert(id).second) {
            throw ValidationError(std::string(to_string(role)) + " contains duplicate id '" + id + "'");
        }
    }
    DatasetSplit split;
    split.role = role;
    split.manifest_digest = psyforge::manifest_digest(ids);
    split.records = std::move(ids);
    return split;
}

AssembledSplits assemble_splits(const DatasetSplit& pr, const DatasetSplit& em, const DatasetSplit& ps,
                                const DatasetSplit& pc, const DatasetSplit& cp) {
    std::map<std::string, std::vector<std::string_view>> owners;
    for (const DatasetSplit* split : {&pr, &em, &ps, &pc, &cp}) {
        std::unordered_set<std::string_view> local;
        for (const auto& id : split->records) {
            if (!local.insert(id).second) {
                throw ValidationError(std::string(to_string(split->role)) + " contains duplicate id '" + id + "'");
            }
            owners[id].push_back(to_string(split->role));
        }
    }
    std::ostringstream collisions;
    std::size_t count = 0;
    for (const auto& [id, roles] : owners) {
        if (roles.size() < 2) continue;
        collisions << (count++ ? "; " : "") << id << " in ";
        for (std::size_t i = 0; i < roles.size(); ++i) collisions << (i ? "," : "") << roles[i];
    }
    if (count > 0) throw ValidationError("splits overlap on " + std::to_string(count) + " id(s): " + collisions.str());

    std::vector<std::string> sft;
    sft.reserve(pr.records.size() + em.records.size() + ps.records.size());
    for (const DatasetSplit* split : {&pr, &em, &ps}) sft.insert(sft.end(), split->records.begin(), split->records.end());
    std::vector<std::string> grpo;
    grpo.reserve(pc.records.size() + cp.records.size());
    for (const DatasetSplit* split : {&pc, &cp}) grpo.insert(grpo.end(), split->records.begin(), split->records.end());
    return {DatasetSplit::make(SplitRole::D_sft, std::move(sft)), DatasetSplit::make(SplitRole::D_grpo, std::move(grpo))};
}

} // namespace psyforge
