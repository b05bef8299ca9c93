#include "kgfusion/kg_store.hpp"

#include "kgfusion/binio.hpp"
#include "kgfusion/rng.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace kgf {

namespace {

std::string_view trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

} // namespace

std::string normalize_concept(std::string_view label) {
    std::string_view t = trim(label);
    std::string out(t);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

uint32_t RelationVocab::intern(std::string_view label) {
    std::string key(trim(label));
    auto it = index_.find(key);
    if (it != index_.end()) return it->second;
    if (names_.size() >= capacity_)
        throw RelationOverflow("relation vocabulary full (capacity " +
                               std::to_string(capacity_) + "): " + key);
    const auto id = static_cast<uint32_t>(names_.size());
    names_.push_back(key);
    index_.emplace(std::move(key), id);
    return id;
}

std::optional<uint32_t> RelationVocab::find(std::string_view label) const {
    auto it = index_.find(std::string(trim(label)));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

uint32_t KnowledgeGraph::intern_concept(std::string_view label) {
    std::string key = normalize_concept(label);
    auto it = concept_index_.find(key);
    if (it != concept_index_.end()) return it->second;
    const auto id = static_cast<uint32_t>(concepts_.size());
    concepts_.push_back(key);
    concept_index_.emplace(std::move(key), id);
    out_adj_.emplace_back();
    in_adj_.emplace_back();
    return id;
}

std::optional<uint32_t> KnowledgeGraph::find_concept(std::string_view label) const {
    auto it = concept_index_.find(normalize_concept(label));
    if (it == concept_index_.end()) return std::nullopt;
    return it->second;
}

uint32_t KnowledgeGraph::add_triple(uint32_t subject, uint32_t relation,
                                    uint32_t object, std::string surface) {
    if (subject >= concepts_.size() || object >= concepts_.size())
        throw Error("add_triple: concept id out of range");
    if (relation >= relations_.size())
        throw Error("add_triple: relation id out of range");
    const auto id = static_cast<uint32_t>(triples_.size());
    triples_.push_back(Triple{subject, relation, object, std::move(surface)});
    out_adj_[subject].push_back(id);
    in_adj_[object].push_back(id);
    return id;
}

Triple parse_triple_line(std::string_view line, KnowledgeGraph& graph) {
    // Split on tabs; a trailing \r (CRLF input) is trimmed with the field.
    std::vector<std::string_view> fields;
    size_t start = 0;
    while (true) {
        size_t pos = line.find('\t', start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    if (fields.size() < 3)
        throw MalformedLine("expected >= 3 tab-separated fields, got " +
                            std::to_string(fields.size()));
    const auto rel = trim(fields[0]);
    const auto sub = trim(fields[1]);
    const auto obj = trim(fields[2]);
    if (rel.empty() || sub.empty() || obj.empty())
        throw MalformedLine("empty relation/subject/object field");

    const uint32_t relation = graph.relations().intern(rel);
    const uint32_t subject = graph.intern_concept(sub);
    const uint32_t object = graph.intern_concept(obj);
    std::string surface = fields.size() >= 4 ? std::string(trim(fields[3])) : std::string();
    const uint32_t id = graph.add_triple(subject, relation, object, std::move(surface));
    return graph.triple(id);
}

KnowledgeGraph load_graph(std::istream& source, uint32_t relation_capacity) {
    KnowledgeGraph graph(relation_capacity);
    std::string line;
    size_t line_no = 0;
    while (std::getline(source, line)) {
        ++line_no;
        std::string_view view = trim(line);
        if (view.empty() || view.front() == '#') continue;
        try {
            parse_triple_line(line, graph);
        } catch (const Error& e) {
            throw MalformedLine("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return graph;
}

KnowledgeGraph load_graph_file(const std::string& path, uint32_t relation_capacity) {
    auto in = open_in(path);
    return load_graph(in, relation_capacity);
}

void KnowledgeGraph::save(std::ostream& out) const {
    write_magic(out, "KGF1");
    write_pod<uint64_t>(out, concepts_.size());
    for (const auto& label : concepts_) write_string(out, label);
    write_pod<uint32_t>(out, relations_.capacity());
    write_pod<uint64_t>(out, relations_.size());
    for (const auto& label : relations_.names()) write_string(out, label);
    write_pod<uint64_t>(out, triples_.size());
    for (const auto& t : triples_) {
        write_pod<uint32_t>(out, t.subject);
        write_pod<uint32_t>(out, t.relation);
        write_pod<uint32_t>(out, t.object);
        write_pod<uint8_t>(out, t.surface.empty() ? 0 : 1);
        if (!t.surface.empty()) write_string(out, t.surface);
    }
}

KnowledgeGraph KnowledgeGraph::load(std::istream& in) {
    expect_magic(in, "KGF1");
    const auto concept_count = read_pod<uint64_t>(in);
    std::vector<std::string> labels;
    labels.reserve(concept_count);
    for (uint64_t i = 0; i < concept_count; ++i) labels.push_back(read_string(in));

    const auto capacity = read_pod<uint32_t>(in);
    KnowledgeGraph graph(capacity);
    for (auto& label : labels) {
        // Snapshot labels are already normalized; intern preserves ids.
        graph.intern_concept(label);
    }
    if (graph.concept_count() != concept_count)
        throw FormatError("snapshot concept table contains duplicates");

    const auto relation_count = read_pod<uint64_t>(in);
    for (uint64_t i = 0; i < relation_count; ++i)
        graph.relations().intern(read_string(in));

    const auto triple_count = read_pod<uint64_t>(in);
    for (uint64_t i = 0; i < triple_count; ++i) {
        const auto subject = read_pod<uint32_t>(in);
        const auto relation = read_pod<uint32_t>(in);
        const auto object = read_pod<uint32_t>(in);
        const auto has_surface = read_pod<uint8_t>(in);
        std::string surface = has_surface ? read_string(in) : std::string();
        graph.add_triple(subject, relation, object, std::move(surface));
    }
    return graph;
}

void KnowledgeGraph::save_file(const std::string& path) const {
    auto out = open_out(path);
    save(out);
}

KnowledgeGraph KnowledgeGraph::load_file(const std::string& path) {
    auto in = open_in(path);
    return load(in);
}

std::string KnowledgeGraph::to_triple_lines() const {
    std::string out;
    for (const auto& t : triples_) {
        out += relations_.label(t.relation);
        out += '\t';
        out += concepts_[t.subject];
        out += '\t';
        out += concepts_[t.object];
        if (!t.surface.empty()) {
            out += '\t';
            out += t.surface;
        }
        out += '\n';
    }
    return out;
}

namespace {

// Popularity-skewed concept sampler: rank permutation + zipf weights.
class ZipfSampler {
public:
    ZipfSampler(uint32_t n, double exponent, Rng& rng) : perm_(n) {
        std::iota(perm_.begin(), perm_.end(), 0u);
        for (uint32_t i = n; i > 1; --i)
            std::swap(perm_[i - 1], perm_[rng.next_below(i)]);
        cumulative_.resize(n);
        double acc = 0.0;
        for (uint32_t rank = 0; rank < n; ++rank) {
            acc += 1.0 / std::pow(static_cast<double>(rank + 1), exponent);
            cumulative_[rank] = acc;
        }
        total_ = acc;
    }

    uint32_t sample(Rng& rng) const {
        const double u = rng.next_unit() * total_;
        const auto it = std::lower_bound(cumulative_.begin(), cumulative_.end(), u);
        const auto rank = static_cast<uint32_t>(it - cumulative_.begin());
        return perm_[std::min<uint32_t>(rank, static_cast<uint32_t>(perm_.size()) - 1)];
    }

private:
    std::vector<uint32_t> perm_;
    std::vector<double> cumulative_;
    double total_ = 0.0;
};

struct RawTriple {
    uint32_t subject, relation, object;
};

} // namespace

SyntheticGraph generate_synthetic_graph(const GraphGenConfig& cfg) {
    if (cfg.n_concepts == 0 || cfg.n_relations == 0 || cfg.n_triples == 0)
        throw InvalidConfig("generator sizes must be positive");
    if (cfg.n_relations > cfg.relation_capacity)
        throw InvalidConfig("n_relations exceeds relation capacity");
    if (cfg.answer_pool > 0 && cfg.planted_per_answer == 0)
        throw InvalidConfig("answer pool requires planted_per_answer >= 1");
    if (cfg.planted_duplicates == 0)
        throw InvalidConfig("planted_duplicates must be >= 1");
    const uint64_t planted_subjects =
        static_cast<uint64_t>(cfg.answer_pool) * cfg.planted_per_answer;
    const uint64_t planted_total = planted_subjects * cfg.planted_duplicates;
    // Answers + dedicated planted subjects form a closed block at the front of
    // the index space; the rest is the general component.
    const uint64_t block_end = cfg.answer_pool + planted_subjects;
    if (block_end >= cfg.n_concepts)
        throw InvalidConfig("answer pool + planted subjects exceed concept count");
    const auto n_general = static_cast<uint32_t>(cfg.n_concepts - block_end);
    if (n_general < 2)
        throw InvalidConfig("need >= 2 general concepts for non-reflexive noise triples");
    if (static_cast<uint64_t>(cfg.n_triples) < n_general + planted_total)
        throw InvalidConfig("need n_triples >= general concepts + planted facts for coverage");

    Rng rng(cfg.seed);
    ZipfSampler zipf(n_general, cfg.zipf_exponent, rng);

    // Popularity-skewed pick from the general component only: planted facts
    // stay unreachable by graph walks from general concepts, so neighborhood
    // methods find them exactly when a kept node pair spans a planted edge.
    auto pick_general = [&](uint32_t avoid) {
        uint32_t c = static_cast<uint32_t>(block_end) + zipf.sample(rng);
        if (c == avoid) {
            c = c + 1 < cfg.n_concepts ? c + 1 : static_cast<uint32_t>(block_end);
        }
        return c;
    };

    std::vector<RawTriple> raw;
    raw.reserve(cfg.n_triples);

    // Coverage: every general concept appears as subject once. Block concepts
    // are covered by the planted triples themselves (answers as subjects,
    // dedicated entities as objects).
    for (uint32_t i = static_cast<uint32_t>(block_end); i < cfg.n_concepts; ++i)
        raw.push_back({i, static_cast<uint32_t>(rng.next_below(cfg.n_relations)),
                       pick_general(i)});

    // Planted facts: (answer, relation, dedicated entity), optionally
    // repeated as multi-edges. Orienting the edge away from the answer keeps
    // the answer node free of incoming messages, so a message-passing encoder
    // preserves its identity instead of averaging it into the entity's.
    std::vector<uint64_t> planted_positions;
    planted_positions.reserve(planted_total);
    for (uint32_t a = 0; a < cfg.answer_pool; ++a) {
        for (uint32_t j = 0; j < cfg.planted_per_answer; ++j) {
            const uint32_t entity = cfg.answer_pool + a * cfg.planted_per_answer + j;
            const auto relation = static_cast<uint32_t>(rng.next_below(cfg.n_relations));
            for (uint32_t c = 0; c < cfg.planted_duplicates; ++c) {
                planted_positions.push_back(raw.size());
                raw.push_back({a, relation, entity});
            }
        }
    }

    // Noise triples over the general component fill the remainder.
    while (raw.size() < cfg.n_triples) {
        const auto subject =
            static_cast<uint32_t>(block_end + rng.next_below(n_general));
        raw.push_back({subject, static_cast<uint32_t>(rng.next_below(cfg.n_relations)),
                       pick_general(subject)});
    }

    // Materialize through the interning path so ids follow first appearance.
    SyntheticGraph out{KnowledgeGraph(cfg.relation_capacity), {}};
    std::vector<uint32_t> concept_id(cfg.n_concepts);
    std::vector<uint32_t> relation_id(cfg.n_relations);
    std::vector<uint8_t> concept_seen(cfg.n_concepts, 0), relation_seen(cfg.n_relations, 0);
    auto concept_of = [&](uint32_t index) {
        if (!concept_seen[index]) {
            concept_id[index] = out.graph.intern_concept("c" + std::to_string(index));
            concept_seen[index] = 1;
        }
        return concept_id[index];
    };
    auto relation_of = [&](uint32_t index) {
        if (!relation_seen[index]) {
            relation_id[index] = out.graph.relations().intern("r" + std::to_string(index));
            relation_seen[index] = 1;
        }
        return relation_id[index];
    };

    for (const auto& t : raw) {
        const uint32_t s = concept_of(t.subject);
        const uint32_t r = relation_of(t.relation);
        const uint32_t o = concept_of(t.object);
        out.graph.add_triple(s, r, o);
    }
    out.planted.reserve(planted_positions.size());
    for (uint64_t pos : planted_positions) {
        const auto& t = out.graph.triple(static_cast<uint32_t>(pos));
        out.planted.push_back(PlantedFact{static_cast<uint32_t>(pos), t.object,
                                          t.relation, t.subject});
    }
    return out;
}

SyntheticGraph generate_synthetic_graph(uint64_t seed, uint32_t n_concepts,
                                        uint32_t n_relations, uint32_t n_triples) {
    GraphGenConfig cfg;
    cfg.seed = seed;
    cfg.n_concepts = n_concepts;
    cfg.n_relations = n_relations;
    cfg.n_triples = n_triples;
    return generate_synthetic_graph(cfg);
}

} // namespace kgf
