#include "psyforge/dedup.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "psyforge/error.hpp"
#include "psyforge/prompts.hpp"
#include "psyforge/utf8.hpp"

namespace psyforge::dedup {

void DedupParams::validate() const {
    if (k < 1) throw ValidationError("dedup: k must be >= 1");
    if (num_perms < 1) throw ValidationError("dedup: perms must be >= 1");
    if (bands * rows != num_perms) {
        throw ValidationError("dedup: bands x rows must equal perms (" + std::to_string(bands) + " x " +
                              std::to_string(rows) + " != " + std::to_string(num_perms) + ")");
    }
    if (threshold < 0.0 || threshold > 1.0) throw ValidationError("dedup: threshold must lie in [0, 1]");
}

namespace {

bool is_punctuation(char32_t cp) {
    if (cp < 0x80) return !utf8::is_ascii_alnum(cp);
    return (cp >= 0x00A0 && cp <= 0x00BF) || (cp >= 0x2000 && cp <= 0x206F) || (cp >= 0x3000 && cp <= 0x303F) ||
           (cp >= 0xFE30 && cp <= 0xFE4F) || (cp >= 0xFF00 && cp <= 0xFF65 && !utf8::is_fullwidth_alnum(cp));
}

std::uint64_t fmix64(std::uint64_t x) {
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdULL;
    x ^= x >> 33;
    x *= 0xc4ceb9fe1a85ec53ULL;
    x ^= x >> 33;
    return x;
}

} // namespace

std::set<std::string> shingle(std::string_view text, std::size_t k) {
    if (k < 1) throw ContractError("shingle width must be >= 1");
    std::u32string normalized;
    for (char32_t cp : utf8::decode(text)) {
        if (utf8::is_fullwidth_alnum(cp)) cp -= 0xFEE0;
        if (cp >= 'A' && cp <= 'Z') cp += 32;
        if (utf8::is_space(cp) || is_punctuation(cp)) continue;
        normalized.push_back(cp);
    }
    std::set<std::string> out;
    if (normalized.size() < k) {
        out.insert(utf8::encode(normalized));
        return out;
    }
    for (std::size_t i = 0; i + k <= normalized.size(); ++i) {
        out.insert(utf8::encode(std::u32string_view(normalized).substr(i, k)));
    }
    return out;
}

std::uint64_t shingle_hash(std::string_view shingle) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : shingle) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

MinHashSignature minhash_signature(const std::set<std::string>& shingles, std::size_t num_perms, std::uint64_t seed) {
    if (shingles.empty()) throw ContractError("minhash_signature requires a non-empty shingle set");
    if (num_perms == 0) throw ContractError("minhash_signature requires num_perms >= 1");
    std::mt19937_64 rng(seed);
    std::vector<std::uint64_t> keys(num_perms);
    for (auto& key : keys) key = rng();

    MinHashSignature sig;
    sig.perm_seed = seed;
    sig.values.assign(num_perms, std::numeric_limits<std::uint64_t>::max());
    for (const auto& s : shingles) {
        const std::uint64_t base = shingle_hash(s);
        for (std::size_t p = 0; p < num_perms; ++p) {
            sig.values[p] = std::min(sig.values[p], fmix64(base ^ keys[p]));
        }
    }
    return sig;
}

double estimate_jaccard(const MinHashSignature& a, const MinHashSignature& b) {
    if (a.values.size() != b.values.size() || a.values.empty()) {
        throw ContractError("signatures have mismatched lengths");
    }
    std::size_t agree = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) agree += a.values[i] == b.values[i];
    return static_cast<double>(agree) / static_cast<double>(a.values.size());
}

// -------------------------------------------------------------------- LSH

LshIndex::LshIndex(std::size_t bands, std::size_t rows) : bands_(bands), rows_(rows), buckets_(bands) {
    if (bands == 0 || rows == 0) throw ContractError("LSH requires bands >= 1 and rows >= 1");
}

void LshIndex::insert(const std::string& id, const MinHashSignature& signature) {
    if (signature.values.size() != bands_ * rows_) {
        throw ContractError("signature length " + std::to_string(signature.values.size()) + " != bands x rows (" +
                            std::to_string(bands_ * rows_) + ")");
    }
    for (std::size_t b = 0; b < bands_; ++b) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (std::size_t r = 0; r < rows_; ++r) h = fmix64(h ^ signature.values[b * rows_ + r]);
        buckets_[b][h].push_back(id);
    }
}

std::set<std::pair<std::string, std::string>> LshIndex::candidate_pairs() const {
    std::set<std::pair<std::string, std::string>> pairs;
    for (const auto& band : buckets_) {
        for (const auto& [_, ids] : band) {
            for (std::size_t i = 0; i < ids.size(); ++i) {
                for (std::size_t j = i + 1; j < ids.size(); ++j) {
                    pairs.insert(std::minmax(ids[i], ids[j]));
                }
            }
        }
    }
    return pairs;
}

std::vector<std::vector<std::string>> lsh_cluster(const std::map<std::string, MinHashSignature>& signatures,
                                                  std::size_t bands, std::size_t rows, double threshold) {
    LshIndex index(bands, rows);
    std::vector<std::string> ids;
    std::map<std::string, std::size_t> position;
    for (const auto& [id, sig] : signatures) {
        index.insert(id, sig);
        position[id] = ids.size();
        ids.push_back(id);
    }

    std::vector<std::size_t> parent(ids.size());
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    for (const auto& [a, b] : index.candidate_pairs()) {
        if (estimate_jaccard(signatures.at(a), signatures.at(b)) < threshold) continue;
        const std::size_t ra = find(position[a]);
        const std::size_t rb = find(position[b]);
        if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
    }

    // ids are sorted, so grouping by root in index order yields clusters
    // ordered by smallest member with sorted members.
    std::map<std::size_t, std::vector<std::string>> groups;
    for (std::size_t i = 0; i < ids.size(); ++i) groups[find(i)].push_back(ids[i]);
    std::vector<std::vector<std::string>> clusters;
    clusters.reserve(groups.size());
    for (auto& [_, members] : groups) clusters.push_back(std::move(members));
    std::sort(clusters.begin(), clusters.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
    return clusters;
}

// --------------------------------------------------------- representatives

std::string fallback_representative(const std::vector<std::string>& cluster, const std::map<std::string, QAPair>& records) {
    if (cluster.empty()) throw ContractError("cluster must be non-empty");
    std::string best;
    std::size_t best_len = 0;
    bool first = true;
    for (const auto& id : cluster) {
        const std::size_t len = utf8::length(records.at(id).question);
        if (first || len > best_len || (len == best_len && id < best)) {
            best = id;
            best_len = len;
            first = false;
        }
    }
    return best;
}

std::vector<std::string> parse_ranking(std::string_view reply, const std::vector<std::string>& labels) {
    auto is_token_char = [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
    };
    std::vector<std::pair<std::size_t, std::string>> found;
    for (const auto& label : labels) {
        for (auto p = reply.find(label); p != std::string_view::npos; p = reply.find(label, p + 1)) {
            const bool left_ok = p == 0 || !is_token_char(reply[p - 1]);
            const bool right_ok = p + label.size() >= reply.size() || !is_token_char(reply[p + label.size()]);
            if (left_ok && right_ok) {
                found.emplace_back(p, label);
                break;
            }
        }
    }
    std::sort(found.begin(), found.end());
    std::vector<std::string> out;
    for (auto& [_, label] : found) out.push_back(std::move(label));
    return out;
}

namespace {

std::string render_options(const QAPair& qa) {
    std::string out;
    for (const auto& [label, text] : qa.options) {
        out += label;
        out += ". ";
        out += text;
        out += '\n';
    }
    return out;
}

std::string truncate_chars(const std::string& text, std::size_t max_chars) {
    if (max_chars == 0) return text;
    const auto cps = utf8::decode(text);
    if (cps.size() <= max_chars) return text;
    return utf8::encode(std::u32string_view(cps).substr(0, max_chars));
}

} // namespace

Representative select_representative(const std::vector<std::string>& cluster,
                                     const std::map<std::string, QAPair>& records, const llm::ModelRef* ranker,
                                     const std::string& prompt_template, std::size_t max_chars) {
    if (cluster.empty()) throw ContractError("cluster must be non-empty");
    if (cluster.size() == 1) return {cluster.front(), false, {}};

    std::vector<std::string> members(cluster);
    std::sort(members.begin(), members.end());
    if (ranker == nullptr) return {fallback_representative(members, records), true, "no ranking backend"};

    std::string candidates;
    for (const auto& id : members) {
        const QAPair& qa = records.at(id);
        candidates += "[" + id + "] " + truncate_chars(qa.question, max_chars) + "\n" + render_options(qa) + "\n";
    }
    const std::string prompt = render(prompt_template, {{"candidates", candidates}});
    try {
        const auto response = ranker->ask(prompt, "dedup:rank:" + members.front());
        const auto ranking = parse_ranking(response.content, members);
        if (!ranking.empty()) return {ranking.front(), false, {}};
        return {fallback_representative(members, records), true, "unparseable ranking"};
    } catch (const llm::LlmError& e) {
        if (e.fatal()) throw;
        return {fallback_representative(members, records), true, std::string("backend failure: ") + e.what()};
    }
}

std::map<std::string, MinHashSignature> signatures_for(const std::vector<QAPair>& records, const DedupParams& params) {
    std::map<std::string, MinHashSignature> signatures;
    for (const auto& qa : records) {
        signatures.emplace(qa.id, minhash_signature(shingle(qa.question, params.k), params.num_perms, params.seed));
    }
    return signatures;
}

DedupResult deduplicate(const std::vector<QAPair>& records, const DedupParams& params, const llm::ModelRef* ranker,
                        const std::string& prompt_template) {
    params.validate();
    std::map<std::string, QAPair> by_id;
    for (const auto& qa : records) by_id.emplace(qa.id, qa);
    const auto clusters = lsh_cluster(signatures_for(records, params), params.bands, params.rows, params.threshold);

    DedupResult result;
    std::set<std::string> keep;
    for (const auto& cluster : clusters) {
        const auto rep = select_representative(cluster, by_id, ranker, prompt_template, params.rank_max_chars);
        ClusterAudit audit;
        audit.survivor = rep.id;
        audit.fallback = rep.fallback;
        for (const auto& id : cluster) {
            if (id != rep.id) audit.absorbed.push_back(id);
        }
        keep.insert(rep.id);
        result.clusters.push_back(std::move(audit));
    }
    for (const auto& qa : records) {
        if (keep.contains(qa.id)) result.survivors.push_back(qa);
    }
    return result;
}

nlohmann::ordered_json clusters_to_json(const std::vector<ClusterAudit>& clusters) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& c : clusters) {
        if (c.absorbed.empty()) continue;
        nlohmann::ordered_json entry;
        entry["absorbed"] = c.absorbed;
        entry["fallback"] = c.fallback;
        j[c.survivor] = std::move(entry);
    }
    return j;
}

} // namespace psyforge::dedup
