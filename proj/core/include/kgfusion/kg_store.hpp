#pragma once
// ConceptNet-style triple store: interned concepts, a bounded relation
// vocabulary, and an adjacency index over the triple list.
//
// Input text format, one triple per line (LF or CRLF, '#' comments):
//     relation<TAB>subject<TAB>object[<TAB>surface]
//
// Snapshot format (graph.kgf):
//     "KGF1"
//     u64 concept_count,  per concept:  u32 len + label bytes
//     u32 relation_capacity
//     u64 relation_count, per relation: u32 len + label bytes
//     u64 triple_count,   per triple:   u32 subject, u32 relation, u32 object,
//                                       u8 has_surface [, u32 len + bytes]
// All integers little-endian. Save(load(x)) is byte-identical to x.
//
// Construction is single-writer; a built graph is immutable and safe for
// concurrent readers.

#include "kgfusion/errors.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kgf {

inline constexpr uint32_t kRelationCapacity = 34;

// Dense 0-based relation ids in first-seen order, hard-capped at capacity.
class RelationVocab {
public:
    explicit RelationVocab(uint32_t capacity = kRelationCapacity)
        : capacity_(capacity) {}

    uint32_t intern(std::string_view label);
    std::optional<uint32_t> find(std::string_view label) const;
    const std::string& label(uint32_t id) const { return names_.at(id); }
    uint32_t size() const { return static_cast<uint32_t>(names_.size()); }
    uint32_t capacity() const { return capacity_; }
    const std::vector<std::string>& names() const { return names_; }

private:
    uint32_t capacity_;
    std::vector<std::string> names_;
    std::unordered_map<std::string, uint32_t> index_;
};

struct Triple {
    uint32_t subject = 0;
    uint32_t relation = 0;
    uint32_t object = 0;
    std::string surface;  // verbatim source text, empty if absent

    bool operator==(const Triple&) const = default;
};

class KnowledgeGraph {
public:
    explicit KnowledgeGraph(uint32_t relation_capacity = kRelationCapacity)
        : relations_(relation_capacity) {}

    // Concepts are case-folded (ASCII) and whitespace-trimmed before interning.
    uint32_t intern_concept(std::string_view label);
    std::optional<uint32_t> find_concept(std::string_view label) const;
    const std::string& concept_label(uint32_t id) const { return concepts_.at(id); }
    uint32_t concept_count() const { return static_cast<uint32_t>(concepts_.size()); }
    const std::vector<std::string>& concept_labels() const { return concepts_; }

    RelationVocab& relations() { return relations_; }
    const RelationVocab& relations() const { return relations_; }

    uint32_t add_triple(uint32_t subject, uint32_t relation, uint32_t object,
                        std::string surface = {});

    const std::vector<Triple>& triples() const { return triples_; }
    const Triple& triple(uint32_t id) const { return triples_.at(id); }
    uint32_t triple_count() const { return static_cast<uint32_t>(triples_.size()); }

    // Triple ids with the concept as subject / as object.
    const std::vector<uint32_t>& out_edges(uint32_t concept_id) const {
        return out_adj_.at(concept_id);
    }
    const std::vector<uint32_t>& in_edges(uint32_t concept_id) const {
        return in_adj_.at(concept_id);
    }

    void save(std::ostream& out) const;
    static KnowledgeGraph load(std::istream& in);
    void save_file(const std::string& path) const;
    static KnowledgeGraph load_file(const std::string& path);

    // Text form: one parseable line per triple, in triple order.
    std::string to_triple_lines() const;

private:
    std::vector<std::string> concepts_;
    std::unordered_map<std::string, uint32_t> concept_index_;
    RelationVocab relations_;
    std::vector<Triple> triples_;
    std::vector<std::vector<uint32_t>> out_adj_;
    std::vector<std::vector<uint32_t>> in_adj_;
};

// Parses one tab-separated line and appends the triple to the graph.
// Throws MalformedLine / RelationOverflow.
Triple parse_triple_line(std::string_view line, KnowledgeGraph& graph);

// Streams a whole triple file; blank lines and '#' comments are skipped.
// Parse errors are rethrown with 1-based line numbers.
KnowledgeGraph load_graph(std::istream& source,
                          uint32_t relation_capacity = kRelationCapacity);
KnowledgeGraph load_graph_file(const std::string& path,
                               uint32_t relation_capacity = kRelationCapacity);

// A deliberately planted fact, the needle the relevance benchmark and the
// planted QA dataset are built around. The underlying triple is stored as
// (answer, relation, subject): `subject` is the dedicated per-fact entity
// (the triple's object) and `answer` the shared answer concept (the triple's
// subject).
struct PlantedFact {
    uint32_t triple_id = 0;
    uint32_t subject = 0;
    uint32_t relation = 0;
    uint32_t answer = 0;
};

struct GraphGenConfig {
    uint64_t seed = 0;
    uint32_t n_concepts = 0;
    uint32_t n_relations = 0;
    uint32_t n_triples = 0;
    uint32_t relation_capacity = kRelationCapacity;
    // Planting: the first `answer_pool` concepts are answer concepts, each the
    // subject of `planted_per_answer` facts whose objects are otherwise-unused
    // dedicated entities. Planted facts and their entities form a closed block
    // with no edges into the general component.
    uint32_t answer_pool = 0;
    uint32_t planted_per_answer = 0;
    // Multi-edge copies of each planted fact (>= 1).
    uint32_t planted_duplicates = 1;
    // Object-popularity skew; higher => stronger hubs.
    double zipf_exponent = 1.05;
};

struct SyntheticGraph {
    KnowledgeGraph graph;
    std::vector<PlantedFact> planted;
};

// Deterministic per seed: every concept occurs in >= 1 triple, relation ids
// stay below n_relations, no reflexive triples. Concept interning order equals
// first appearance in the triple list, so a text round trip through
// load_graph reproduces identical ids.
SyntheticGraph generate_synthetic_graph(const GraphGenConfig& cfg);
SyntheticGraph generate_synthetic_graph(uint64_t seed, uint32_t n_concepts,
                                        uint32_t n_relations, uint32_t n_triples);

// Case-fold (ASCII) + trim, the concept-label normalization.
std::string normalize_concept(std::string_view label);

} // namespace kgf
