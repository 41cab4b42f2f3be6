#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "psyforge/corpus.hpp"
#include "psyforge/llm.hpp"

namespace psyforge::dedup {

struct DedupParams {
    std::size_t k = 3;
    std::size_t num_perms = 256;
    std::size_t bands = 32;
    std::size_t rows = 8;
    double threshold = 0.7;
    std::uint64_t seed = 42;
    /// Characters of question text shown to the ranking model; 0 = full text.
    std::size_t rank_max_chars = 0;

    void validate() const;
};

/// Character k-grams of the normalised text (Latin lower-cased, punctuation
/// and white space removed). Text shorter than k yields itself.
std::set<std::string> shingle(std::string_view text, std::size_t k);

struct MinHashSignature {
    std::vector<std::uint64_t> values;
    std::uint64_t perm_seed = 0;

    friend bool operator==(const MinHashSignature&, const MinHashSignature&) = default;
};

/// Stable 64-bit hash of a shingle (FNV-1a), independent of std::hash.
std::uint64_t shingle_hash(std::string_view shingle);

/// Per-permutation minima of a keyed 64-bit mixer over the shingle hashes.
/// Throws ContractError on an empty set.
MinHashSignature minhash_signature(const std::set<std::string>& shingles, std::size_t num_perms, std::uint64_t seed);

/// Fraction of agreeing positions. Throws ContractError on mismatched lengths.
double estimate_jaccard(const MinHashSignature& a, const MinHashSignature& b);

class LshIndex {
public:
    LshIndex(std::size_t bands, std::size_t rows);

    void insert(const std::string& id, const MinHashSignature& signature);
    /// Unordered candidate pairs (first < second) sharing at least one band.
    std::set<std::pair<std::string, std::string>> candidate_pairs() const;

    std::size_t bands() const { return bands_; }
    std::size_t rows() const { return rows_; }

private:
    std::size_t bands_;
    std::size_t rows_;
    std::vector<std::map<std::uint64_t, std::vector<std::string>>> buckets_;
};

/// Groups ids connected by verified candidate pairs (band collision and
/// estimated similarity >= threshold). Clusters are sorted internally and
/// ordered by smallest member.
std::vector<std::vector<std::string>> lsh_cluster(const std::map<std::string, MinHashSignature>& signatures,
                                                  std::size_t bands, std::size_t rows, double threshold);

struct Representative {
    std::string id;
    /// Ranking was attempted but failed or was unparseable.
    bool fallback = false;
    std::string note;
};

/// Longest question (in characters), then lexicographically smallest id.
std::string fallback_representative(const std::vector<std::string>& cluster, const std::map<std::string, QAPair>& records);

/// Labels that appear in `reply`, ordered by first appearance; a label only
/// matches at token boundaries.
std::vector<std::string> parse_ranking(std::string_view reply, const std::vector<std::string>& labels);

/// Singleton clusters return without a backend call; larger ones are ranked
/// by the model, falling back deterministically on failure.
Representative select_representative(const std::vector<std::string>& cluster,
                                     const std::map<std::string, QAPair>& records, const llm::ModelRef* ranker,
                                     const std::string& prompt_template, std::size_t max_chars = 0);

struct ClusterAudit {
    std::string survivor;
    std::vector<std::string> absorbed;
    bool fallback = false;
};

struct DedupResult {
    std::vector<QAPair> survivors;
    std::vector<ClusterAudit> clusters;
};

/// Signatures for every record's question text.
std::map<std::string, MinHashSignature> signatures_for(const std::vector<QAPair>& records, const DedupParams& params);

/// Full stage: shingle, sign, cluster, pick one survivor per cluster.
/// Survivors keep input order. `ranker` may be null (fallback rule only).
DedupResult deduplicate(const std::vector<QAPair>& records, const DedupParams& params, const llm::ModelRef* ranker,
                        const std::string& prompt_template);

nlohmann::ordered_json clusters_to_json(const std::vector<ClusterAudit>& clusters);

} // namespace psyforge::dedup
