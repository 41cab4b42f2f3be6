#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace psyforge {

/// Set of option labels drawn from A..E, stored as a bitmask so that set
/// algebra and equality are trivial. Iteration order is always sorted.
class AnswerSet {
public:
    static constexpr char kFirstLabel = 'A';
    static constexpr char kLastLabel = 'E';
    static constexpr int kLabelCount = kLastLabel - kFirstLabel + 1;

    constexpr AnswerSet() = default;

    /// Parses a run of labels such as "ACD"; throws ValidationError on a
    /// character outside A..E.
    static AnswerSet from_string(std::string_view labels);
    static constexpr AnswerSet from_mask(std::uint8_t mask) { return AnswerSet(mask); }

    static constexpr bool is_label(char c) { return c >= kFirstLabel && c <= kLastLabel; }

    void insert(char label);
    constexpr bool contains(char label) const {
        return is_label(label) && (mask_ >> (label - kFirstLabel)) & 1U;
    }
    constexpr bool empty() const { return mask_ == 0; }
    int size() const;
    constexpr std::uint8_t mask() const { return mask_; }

    constexpr bool is_subset_of(const AnswerSet& other) const { return (mask_ & ~other.mask_) == 0; }
    constexpr AnswerSet intersect(const AnswerSet& other) const { return AnswerSet(mask_ & other.mask_); }

    /// Sorted labels, e.g. "BD".
    std::string str() const;
    std::vector<char> labels() const;

    friend constexpr bool operator==(AnswerSet, AnswerSet) = default;

private:
    constexpr explicit AnswerSet(std::uint8_t mask) : mask_(mask) {}
    std::uint8_t mask_ = 0;
};

/// A parsed model answer: `std::nullopt` is the no-answer marker.
using Prediction = std::optional<AnswerSet>;

enum class QuestionKind { SMCQ, MMCQ, OPEN };
enum class SourceType { I, II, III, IV };

std::string_view to_string(QuestionKind kind);
std::string_view to_string(SourceType type);
QuestionKind parse_question_kind(std::string_view text);
SourceType parse_source_type(std::string_view text);

/// Rationale attached to a question once synthesis has validated it.
struct AttachedRationale {
    int prompt_version = 0;
    std::string prompt;
    std::string text;
    AnswerSet predicted;
    int round = 0;
    int regen_attempt = 1;

    friend bool operator==(const AttachedRationale&, const AttachedRationale&) = default;
};

struct QAPair {
    std::string id;
    std::string question;
    std::map<char, std::string> options;
    AnswerSet gold;
    std::string reference_answer;
    QuestionKind kind = QuestionKind::SMCQ;
    SourceType source_type = SourceType::II;
    std::string subfield;
    /// Benchmark category (case/moral/theory, knowledge/case); empty for
    /// training data.
    std::string category;
    std::optional<AttachedRationale> rationale;

    bool is_mcq() const { return kind != QuestionKind::OPEN; }

    friend bool operator==(const QAPair&, const QAPair&) = default;
};

enum class Speaker { Seeker, Supporter };

struct Turn {
    Speaker role = Speaker::Seeker;
    std::string content;

    friend bool operator==(const Turn&, const Turn&) = default;
};

struct DialogueSession {
    std::string id;
    std::vector<Turn> turns;
    bool enriched = false;

    friend bool operator==(const DialogueSession&, const DialogueSession&) = default;
};

/// One model output to be scored. `gold` is optional on disk and joined from
/// the question file when absent.
struct CompletionRecord {
    std::string qa_id;
    std::string text;
    std::optional<AnswerSet> gold;

    friend bool operator==(const CompletionRecord&, const CompletionRecord&) = default;
};

using Record = std::variant<QAPair, DialogueSession>;

const std::string& record_id(const Record& record);

enum class Schema { Qa, Dialogue, Completion };

// Validation. Each throws ValidationError naming the failed invariant.
void validate(const QAPair& qa);
void validate(const DialogueSession& session);
void validate(const CompletionRecord& completion);

// JSON conversion in fixed schema key order.
nlohmann::ordered_json to_json(const QAPair& qa);
nlohmann::ordered_json to_json(const DialogueSession& session);
nlohmann::ordered_json to_json(const CompletionRecord& completion);
nlohmann::ordered_json to_json(const Record& record);
QAPair qa_from_json(const nlohmann::json& j);
DialogueSession dialogue_from_json(const nlohmann::json& j);
CompletionRecord completion_from_json(const nlohmann::json& j);
/// Dialogue when the object carries "turns", QA otherwise.
Record record_from_json(const nlohmann::json& j);

/// One line of a JSONL file together with its 1-based line number.
template <typename T>
struct Numbered {
    std::size_t line = 0;
    T value;
};

std::vector<QAPair> load_qa_jsonl(const std::filesystem::path& path);
std::vector<DialogueSession> load_dialogue_jsonl(const std::filesystem::path& path);
std::vector<CompletionRecord> load_completion_jsonl(const std::filesystem::path& path);
std::vector<Record> load_record_jsonl(const std::filesystem::path& path);

/// Schema-dispatched loader.
using AnyRecords = std::variant<std::vector<QAPair>, std::vector<DialogueSession>, std::vector<CompletionRecord>>;
AnyRecords load_jsonl(const std::filesystem::path& path, Schema schema);

/// Writes one record per line. Rejects duplicate ids before touching the
/// file; output is byte-deterministic for equal input.
void save_jsonl(const std::vector<QAPair>& records, const std::filesystem::path& path);
void save_jsonl(const std::vector<DialogueSession>& records, const std::filesystem::path& path);
void save_jsonl(const std::vector<CompletionRecord>& records, const std::filesystem::path& path);
void save_jsonl(const std::vector<Record>& records, const std::filesystem::path& path);

/// Writes raw JSON objects, one per line, without id checks (audit files).
void write_json_lines(const std::vector<nlohmann::ordered_json>& rows, const std::filesystem::path& path);
std::vector<nlohmann::json> read_json_lines(const std::filesystem::path& path);
void write_json_file(const nlohmann::ordered_json& value, const std::filesystem::path& path);

enum class SplitRole { D_pr, D_pc, D_em, D_ps, D_cp, D_sft, D_grpo };
std::string_view to_string(SplitRole role);

struct DatasetSplit {
    SplitRole role = SplitRole::D_pr;
    std::vector<std::string> records;
    std::string manifest_digest;

    /// Builds a split and computes its digest; throws on duplicate ids.
    static DatasetSplit make(SplitRole role, std::vector<std::string> ids);
};

/// SHA-256 over the sorted member ids. Depends on membership only.
std::string manifest_digest(const std::vector<std::string>& ids);

/// Hex SHA-256 of arbitrary bytes.
std::string sha256_hex(std::string_view bytes);

struct AssembledSplits {
    DatasetSplit sft;
    DatasetSplit grpo;
};

/// sft = pr ∪ em ∪ ps and grpo = pc ∪ cp. The five inputs must be pairwise
/// disjoint; collisions are reported in the thrown ValidationError.
AssembledSplits assemble_splits(const DatasetSplit& pr, const DatasetSplit& em, const DatasetSplit& ps,
                                const DatasetSplit& pc, const DatasetSplit& cp);

} // namespace psyforge
