#pragma once
// Triple verbalization, pluggable text embedding, exact cosine top-k.
//
// The default provider is a seeded hash embedder: the text's stable hash keys
// a counter-based normal stream, giving a deterministic unit vector per text
// with no model dependency. A file provider serves precomputed embeddings.
//
// Embedding file (EMB1):
//     "EMB1"  u32 count  u32 dim  count*dim f32 (row-major, little-endian)
//     then count id strings, each terminated by '\n'
//
// Indexes are immutable once built; top_k is a full scan (no approximation)
// and safe to call concurrently.

#include "kgfusion/errors.hpp"
#include "kgfusion/kg_store.hpp"
#include "kgfusion/matrix.hpp"

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace kgf {

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::vector<float> embed_text(std::string_view text) const = 0;
    virtual uint32_t dim() const = 0;
};

// embed_text(t) = normalize(N(0,1) samples from the stream keyed by
// hash(t) ^ mix(seed)). Unit norm by construction; resamples on an exactly
// zero draw (never observed, guarded anyway).
class HashEmbeddingProvider final : public EmbeddingProvider {
public:
    HashEmbeddingProvider(uint32_t dim, uint64_t seed);
    std::vector<float> embed_text(std::string_view text) const override;
    uint32_t dim() const override { return dim_; }
    uint64_t seed() const { return seed_; }

private:
    uint32_t dim_;
    uint64_t seed_;
};

// Serves vectors from an EMB1 file keyed by id string (typically the text
// itself). Unknown keys throw.
class FileEmbeddingProvider final : public EmbeddingProvider {
public:
    explicit FileEmbeddingProvider(const std::string& path);
    std::vector<float> embed_text(std::string_view text) const override;
    uint32_t dim() const override { return dim_; }
    size_t size() const { return ids_.size(); }

private:
    uint32_t dim_ = 0;
    std::vector<float> data_;
    std::vector<std::string> ids_;
    std::unordered_map<std::string, uint32_t> index_;
};

std::vector<float> hash_embed(std::string_view text, uint32_t dim, uint64_t seed);

// "<subject label> <relation label> <object label>"
std::string verbalize_triple(const Triple& t, const KnowledgeGraph& g);

// dot(a,b)/(|a||b|), clamped into [-1,1]. Throws DimensionMismatch /
// ZeroNormInput.
double cosine_similarity(std::span<const double> a, std::span<const double> b);
double cosine_similarity(std::span<const float> a, std::span<const float> b);

struct ScoredTriple {
    uint32_t triple_id = 0;
    double score = 0.0;

    bool operator==(const ScoredTriple&) const = default;
};

class EmbeddingIndex {
public:
    EmbeddingIndex() = default;
    EmbeddingIndex(uint32_t dim, std::vector<float> rows, std::vector<uint32_t> triple_ids);

    uint32_t dim() const { return dim_; }
    uint32_t row_count() const { return static_cast<uint32_t>(triple_ids_.size()); }
    std::span<const float> row(uint32_t r) const {
        return {data_.data() + static_cast<size_t>(r) * dim_, dim_};
    }
    uint32_t triple_id_of_row(uint32_t r) const { return triple_ids_[r]; }
    const std::vector<float>& raw_data() const { return data_; }
    const std::vector<uint32_t>& triple_ids() const { return triple_ids_; }

    // Row for a given triple id (valid when ids are a permutation of rows).
    std::span<const float> row_for_triple(uint32_t triple_id) const;

    void save(std::ostream& out) const;
    static EmbeddingIndex load(std::istream& in);
    void save_file(const std::string& path) const;
    static EmbeddingIndex load_file(const std::string& path);

private:
    uint32_t dim_ = 0;
    std::vector<float> data_;
    std::vector<uint32_t> triple_ids_;
    std::vector<uint32_t> row_of_triple_;  // derived inverse map
    void rebuild_inverse();
};

// One unit row per triple, in triple order. Provider failures are rethrown
// with the offending triple id.
EmbeddingIndex build_index(const KnowledgeGraph& g, const EmbeddingProvider& p);

struct NodeEmbeddingTable {
    Matrix matrix;                            // |concepts| x d, f64
    std::vector<uint32_t> occurrence_counts;  // triples touching each concept
};

// Per-concept mean of the index rows of the triples containing it. A
// reflexive triple contributes to its concept once.
NodeEmbeddingTable build_node_table(const KnowledgeGraph& g, const EmbeddingIndex& idx);

// Exact full-scan top-k by cosine, non-increasing scores, ties broken by
// ascending triple id. Returns min(k, rows) entries.
std::vector<ScoredTriple> top_k(const EmbeddingIndex& idx,
                                std::span<const float> query, uint32_t k);

// normalize(sqrt(1-noise)*embed(text) + sqrt(noise)*unit Gaussian): a query
// vector with a controlled cosine to the text's embedding. noise in [0,1).
std::vector<float> noisy_query(const EmbeddingProvider& p, std::string_view text,
                               double noise_fraction, uint64_t seed);

} // namespace kgf
