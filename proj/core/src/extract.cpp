#include "kgfusion/extract.hpp"

#include "kgfusion/rng.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>

namespace kgf {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Dot product with eight independent f32 accumulator chains: breaks the
// loop-carried dependency so the compiler can vectorize. The result is
// deterministic — each lane has a fixed accumulator, so the summation order
// never depends on how the loop is compiled. f32 accumulation over unit-norm
// rows keeps relative error around 1e-6, well inside ranking noise.
template <size_t N>
double dotf_fixed(const float* a, const float* b) {
    static_assert(N % 8 == 0);
    float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
    float s4 = 0.f, s5 = 0.f, s6 = 0.f, s7 = 0.f;
    for (size_t i = 0; i < N; i += 8) {
        s0 += a[i + 0] * b[i + 0];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        s4 += a[i + 4] * b[i + 4];
        s5 += a[i + 5] * b[i + 5];
        s6 += a[i + 6] * b[i + 6];
        s7 += a[i + 7] * b[i + 7];
    }
    return static_cast<double>(((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7)));
}

double dotf(const float* a, const float* b, size_t n) {
    // Constant trip counts unlock full unrolling for the common widths; the
    // generic loop computes the identical chain assignment.
    switch (n) {
        case 32: return dotf_fixed<32>(a, b);
        case 64: return dotf_fixed<64>(a, b);
        case 128: return dotf_fixed<128>(a, b);
        default: break;
    }
    float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
    float s4 = 0.f, s5 = 0.f, s6 = 0.f, s7 = 0.f;
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        s0 += a[i + 0] * b[i + 0];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        s4 += a[i + 4] * b[i + 4];
        s5 += a[i + 5] * b[i + 5];
        s6 += a[i + 6] * b[i + 6];
        s7 += a[i + 7] * b[i + 7];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return static_cast<double>(((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7)));
}

bool rank_before(const ScoredTriple& a, const ScoredTriple& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.triple_id < b.triple_id;
}

// The exact top-c of the ranking, best first, fused with the scoring scan so
// the full score vector is never materialized: one pass keeps a bounded heap
// whose front is the weakest retained candidate (rank_before is a strict
// total order, so the result equals the length-c prefix of a full sort).
std::vector<ScoredTriple> top_candidates(const EmbeddingIndex& idx,
                                         std::span<const float> query, double qinv,
                                         size_t c) {
    const size_t d = idx.dim();
    const uint32_t rows = idx.row_count();
    std::vector<ScoredTriple> heap;
    heap.reserve(c);
    for (uint32_t r = 0; r < rows; ++r) {
        const double dot = dotf(idx.row(r).data(), query.data(), d);
        const ScoredTriple cand{idx.triple_id_of_row(r),
                                std::clamp(dot * qinv, -1.0, 1.0)};
        if (heap.size() < c) {
            heap.push_back(cand);
            std::push_heap(heap.begin(), heap.end(), rank_before);
        } else if (rank_before(cand, heap.front())) {
            std::pop_heap(heap.begin(), heap.end(), rank_before);
            heap.back() = cand;
            std::push_heap(heap.begin(), heap.end(), rank_before);
        }
    }
    std::sort_heap(heap.begin(), heap.end(), rank_before);
    return heap;
}

} // namespace

ExtractResult extract_topk(std::span<const float> query, const EmbeddingIndex& idx,
                           const KnowledgeGraph& g, const NodeEmbeddingTable& nodes_tbl,
                           uint32_t k, uint32_t node_cap) {
    const auto t0 = Clock::now();
    if (k == 0) throw InvalidConfig("extract_topk: k must be >= 1");
    if (node_cap < 2) throw InvalidConfig("extract_topk: node_cap must be >= 2");
    if (g.triple_count() == 0 || idx.row_count() == 0)
        throw EmptyGraph("extract_topk: empty graph or index");

    if (query.size() != idx.dim())
        throw DimensionMismatch("query dim " + std::to_string(query.size()) +
                                " vs index dim " + std::to_string(idx.dim()));
    double qss = 0.0;
    for (float x : query) qss += static_cast<double>(x) * x;
    if (qss == 0.0) throw ZeroNormInput("zero-norm query");
    const double qinv = 1.0 / std::sqrt(qss);

    const size_t total = idx.row_count();

    // Consume the exact ranking lazily: retrieve a top chunk and greedy-scan
    // it; in the rare case the node budget forces enough skips to exhaust the
    // chunk before k triples are admitted, grow the chunk and replay (the
    // shorter chunk is a prefix of the longer one, so the outcome extends).
    Subgraph sg;
    std::vector<uint32_t> local_of;
    size_t pos = 0;
    size_t chunk = std::min<size_t>(total, std::max<size_t>(512, 2 * static_cast<size_t>(k)));
    for (;;) {
        const std::vector<ScoredTriple> cands = top_candidates(idx, query, qinv, chunk);
        sg = Subgraph{};
        local_of.assign(g.concept_count(), UINT32_MAX);
        auto local_index = [&](uint32_t concept_id) {
            if (local_of[concept_id] == UINT32_MAX) {
                local_of[concept_id] = static_cast<uint32_t>(sg.nodes.size());
                sg.nodes.push_back(concept_id);
            }
            return local_of[concept_id];
        };
        pos = 0;
        while (pos < cands.size() && sg.triple_ids.size() < k) {
            const ScoredTriple& cand = cands[pos++];
            const Triple& t = g.triple(cand.triple_id);
            size_t new_nodes = 0;
            if (local_of[t.subject] == UINT32_MAX) ++new_nodes;
            if (t.object != t.subject && local_of[t.object] == UINT32_MAX) ++new_nodes;
            if (sg.nodes.size() + new_nodes > node_cap) continue;  // skip, keep scanning
            const uint32_t src = local_index(t.subject);
            const uint32_t dst = local_index(t.object);
            sg.edges.push_back({src, t.relation, dst});
            sg.triple_ids.push_back(cand.triple_id);
            sg.scores.push_back(cand.score);
            sg.triple_texts.push_back(verbalize_triple(t, g));
        }
        if (sg.triple_ids.size() >= k || chunk >= total) break;
        chunk = std::min(total, chunk * 4);
    }

    sg.node_features = Matrix(sg.nodes.size(), nodes_tbl.matrix.cols());
    for (uint32_t i = 0; i < sg.nodes.size(); ++i) {
        const auto src_row = nodes_tbl.matrix.row(sg.nodes[i]);
        std::copy(src_row.begin(), src_row.end(), sg.node_features.row(i).begin());
    }

    ExtractionReport report;
    report.method = "proposed";
    report.triples_considered = pos;
    report.triples_kept = sg.triple_ids.size();
    report.nodes_kept = sg.nodes.size();
    report.wall_clock_ms = ms_since(t0);
    return {std::move(sg), std::move(report)};
}

std::vector<uint32_t> ground_concepts(std::string_view question, const KnowledgeGraph& g) {
    const std::string q = normalize_concept(question);
    auto is_word = [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_';
    };
    std::vector<uint32_t> out;
    for (uint32_t c = 0; c < g.concept_count(); ++c) {
        const std::string& label = g.concept_label(c);
        if (label.empty() || label.size() > q.size()) continue;
        for (size_t at = q.find(label, 0); at != std::string::npos;
             at = q.find(label, at + 1)) {
            const bool left_ok = at == 0 || !is_word(q[at - 1]);
            const size_t end = at + label.size();
            const bool right_ok = end == q.size() || !is_word(q[end]);
            if (left_ok && right_ok) {
                out.push_back(c);
                break;
            }
        }
    }
    return out;  // ascending by construction
}

ExtractResult extract_baseline(std::string_view question, std::span<const float> query,
                               const KnowledgeGraph& g, const NodeEmbeddingTable& nodes_tbl,
                               uint32_t node_cap) {
    const auto t0 = Clock::now();
    if (node_cap < 2) throw InvalidConfig("extract_baseline: node_cap must be >= 2");
    if (g.triple_count() == 0) throw EmptyGraph("extract_baseline: empty graph");

    ExtractionReport report;
    report.method = "baseline";

    const std::vector<uint32_t> grounded = ground_concepts(question, g);
    if (grounded.empty()) {
        // Soft failure: empty sub-graph, zeroed counters.
        Subgraph sg;
        sg.node_features = Matrix(0, nodes_tbl.matrix.cols());
        report.wall_clock_ms = ms_since(t0);
        return {std::move(sg), std::move(report)};
    }

    // Candidates = grounded concepts plus their 2-hop neighborhood.
    std::vector<uint8_t> seen(g.concept_count(), 0);
    std::vector<uint32_t> candidates;
    std::vector<uint32_t> frontier;
    for (uint32_t c : grounded) {
        if (!seen[c]) {
            seen[c] = 1;
            candidates.push_back(c);
            frontier.push_back(c);
        }
    }
    uint64_t edges_scanned = 0;
    for (int hop = 0; hop < 2; ++hop) {
        std::vector<uint32_t> next;
        for (uint32_t c : frontier) {
            auto visit = [&](uint32_t neighbor) {
                ++edges_scanned;
                if (!seen[neighbor]) {
                    seen[neighbor] = 1;
                    candidates.push_back(neighbor);
                    next.push_back(neighbor);
                }
            };
            for (uint32_t t : g.out_edges(c)) visit(g.triple(t).object);
            for (uint32_t t : g.in_edges(c)) visit(g.triple(t).subject);
        }
        frontier = std::move(next);
    }

    // Rank every candidate concept against the query.
    double qss = 0.0;
    for (float x : query) qss += static_cast<double>(x) * x;
    if (qss == 0.0) throw ZeroNormInput("extract_baseline: zero-norm query");
    if (query.size() != nodes_tbl.matrix.cols())
        throw DimensionMismatch("extract_baseline: query dim vs node table width");
    const double qinv = 1.0 / std::sqrt(qss);

    struct ScoredNode {
        uint32_t concept_id;
        double score;
    };
    std::vector<ScoredNode> ranked;
    ranked.reserve(candidates.size());
    for (uint32_t c : candidates) {
        const auto row = nodes_tbl.matrix.row(c);
        const size_t n = row.size();
        double d0 = 0.0, d1 = 0.0, r0 = 0.0, r1 = 0.0;
        size_t i = 0;
        for (; i + 2 <= n; i += 2) {
            d0 += row[i] * query[i];
            d1 += row[i + 1] * query[i + 1];
            r0 += row[i] * row[i];
            r1 += row[i + 1] * row[i + 1];
        }
        for (; i < n; ++i) {
            d0 += row[i] * query[i];
            r0 += row[i] * row[i];
        }
        const double dot = d0 + d1, rss = r0 + r1;
        const double score =
            rss > 0.0 ? std::clamp(dot * qinv / std::sqrt(rss), -1.0, 1.0) : 0.0;
        ranked.push_back({c, score});
    }
    const size_t keep = std::min<size_t>(node_cap, ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<ptrdiff_t>(keep),
                      ranked.end(), [](const ScoredNode& a, const ScoredNode& b) {
                          if (a.score != b.score) return a.score > b.score;
                          return a.concept_id < b.concept_id;
                      });
    ranked.resize(keep);

    Subgraph sg;
    std::vector<uint32_t> local_of(g.concept_count(), UINT32_MAX);
    std::vector<double> node_score(keep, 0.0);
    for (const ScoredNode& n : ranked) {
        local_of[n.concept_id] = static_cast<uint32_t>(sg.nodes.size());
        node_score[sg.nodes.size()] = n.score;
        sg.nodes.push_back(n.concept_id);
    }

    // Induce every graph edge among kept nodes (scan each kept subject's out
    // list once; a triple appears exactly once). Sort by triple id for a
    // deterministic edge order.
    std::vector<uint32_t> induced;
    for (uint32_t c : sg.nodes)
        for (uint32_t t : g.out_edges(c))
            if (local_of[g.triple(t).object] != UINT32_MAX) induced.push_back(t);
    std::sort(induced.begin(), induced.end());

    for (uint32_t tid : induced) {
        const Triple& t = g.triple(tid);
        const uint32_t src = local_of[t.subject];
        const uint32_t dst = local_of[t.object];
        sg.edges.push_back({src, t.relation, dst});
        sg.triple_ids.push_back(tid);
        // Provenance score for an induced triple: mean of its endpoint node
        // scores (the baseline ranks concepts, not triples).
        sg.scores.push_back(0.5 * (node_score[src] + node_score[dst]));
        sg.triple_texts.push_back(verbalize_triple(t, g));
    }

    sg.node_features = Matrix(sg.nodes.size(), nodes_tbl.matrix.cols());
    for (uint32_t i = 0; i < sg.nodes.size(); ++i) {
        const auto src_row = nodes_tbl.matrix.row(sg.nodes[i]);
        std::copy(src_row.begin(), src_row.end(), sg.node_features.row(i).begin());
    }

    report.triples_considered = edges_scanned;
    report.triples_kept = sg.triple_ids.size();
    report.nodes_kept = sg.nodes.size();
    report.wall_clock_ms = ms_since(t0);
    return {std::move(sg), std::move(report)};
}

namespace {

struct RunningStats {
    double sum = 0.0, sum_sq = 0.0;
    uint32_t n = 0;
    void add(double x) {
        sum += x;
        sum_sq += x * x;
        ++n;
    }
    double mean() const { return n ? sum / n : 0.0; }
    double stddev() const {
        if (n == 0) return 0.0;
        const double m = mean();
        return std::sqrt(std::max(0.0, sum_sq / n - m * m));
    }
};

// Mean cosine between the kept triples' embeddings and the answer embedding;
// empty sub-graphs score 0 (and are counted).
double answer_similarity(const Subgraph& sg, const EmbeddingIndex& idx,
                         std::span<const float> answer_unit) {
    if (sg.triple_ids.empty()) return 0.0;
    double acc = 0.0;
    for (uint32_t tid : sg.triple_ids) {
        const auto row = idx.row_for_triple(tid);
        double dot = 0.0;
        for (size_t i = 0; i < row.size(); ++i)
            dot += static_cast<double>(row[i]) * answer_unit[i];
        acc += std::clamp(dot, -1.0, 1.0);
    }
    return acc / static_cast<double>(sg.triple_ids.size());
}

std::vector<float> unit_of(std::vector<float> v) {
    double ss = 0.0;
    for (float x : v) ss += static_cast<double>(x) * x;
    if (ss == 0.0) throw ZeroNormInput("answer embedding has zero norm");
    const double inv = 1.0 / std::sqrt(ss);
    for (float& x : v) x = static_cast<float>(x * inv);
    return v;
}

} // namespace

BenchResult bench_extractors(const std::vector<WorkloadQuery>& workload,
                             const EmbeddingIndex& idx, const KnowledgeGraph& g,
                             const NodeEmbeddingTable& nodes_tbl,
                             const EmbeddingProvider& provider, const BenchConfig& cfg) {
    if (cfg.repeat == 0) throw InvalidConfig("bench_extractors: repeat must be >= 1");
    BenchResult result;
    result.proposed.method = "proposed";
    result.baseline.method = "baseline";

    RunningStats prop_wall, prop_sim, prop_kept, prop_nodes;
    RunningStats base_wall, base_sim, base_kept, base_nodes;

    for (const WorkloadQuery& q : workload) {
        const std::vector<float> answer_unit = unit_of(provider.embed_text(q.answer_text));

        double wall = 0.0;
        ExtractResult prop;
        for (uint32_t r = 0; r < cfg.repeat; ++r) {
            prop = extract_topk(q.query_vec, idx, g, nodes_tbl, cfg.k, cfg.node_cap);
            wall += prop.report.wall_clock_ms;
        }
        prop_wall.add(wall / cfg.repeat);
        prop_sim.add(answer_similarity(prop.subgraph, idx, answer_unit));
        prop_kept.add(static_cast<double>(prop.report.triples_kept));
        prop_nodes.add(static_cast<double>(prop.report.nodes_kept));

        wall = 0.0;
        ExtractResult base;
        for (uint32_t r = 0; r < cfg.repeat; ++r) {
            base = extract_baseline(q.question, q.query_vec, g, nodes_tbl, cfg.node_cap);
            wall += base.report.wall_clock_ms;
        }
        base_wall.add(wall / cfg.repeat);
        base_sim.add(answer_similarity(base.subgraph, idx, answer_unit));
        base_kept.add(static_cast<double>(base.report.triples_kept));
        base_nodes.add(static_cast<double>(base.report.nodes_kept));
    }

    auto fill = [](BenchRow& row, const RunningStats& wall, const RunningStats& sim,
                   const RunningStats& kept, const RunningStats& nodes) {
        row.mean_wall_ms = wall.mean();
        row.similarity_mean = sim.mean();
        row.similarity_std = sim.stddev();
        row.mean_triples_kept = kept.mean();
        row.mean_nodes_kept = nodes.mean();
        row.queries = wall.n;
    };
    fill(result.proposed, prop_wall, prop_sim, prop_kept, prop_nodes);
    fill(result.baseline, base_wall, base_sim, base_kept, base_nodes);
    return result;
}

std::vector<WorkloadQuery> make_relevance_workload(const SyntheticGraph& sg,
                                                   const EmbeddingProvider& provider,
                                                   const WorkloadConfig& cfg) {
    if (sg.planted.empty())
        throw InvalidConfig("make_relevance_workload: graph has no planted facts");
    if (cfg.n_queries == 0 || cfg.grounded_per_question == 0)
        throw InvalidConfig("make_relevance_workload: zero sizes");
    const KnowledgeGraph& g = sg.graph;

    // Concepts inside the planted block never appear in question text: the
    // question grounds popular general-component concepts only.
    std::vector<uint8_t> in_block(g.concept_count(), 0);
    for (const PlantedFact& f : sg.planted) {
        in_block[f.subject] = 1;
        in_block[f.answer] = 1;
    }

    Rng rng(splitmix64(cfg.seed ^ 0x9e3779b97f4a7c15ull));
    // Degree-biased concept pick: a random triple's object follows the
    // generator's popularity skew.
    auto pick_popular = [&]() {
        for (int guard = 0; guard < 4096; ++guard) {
            const auto t = static_cast<uint32_t>(rng.next_below(g.triple_count()));
            const uint32_t c = g.triple(t).object;
            if (!in_block[c]) return c;
        }
        throw InvalidConfig("make_relevance_workload: graph is almost all planted block");
    };

    std::vector<WorkloadQuery> out;
    out.reserve(cfg.n_queries);
    for (uint32_t i = 0; i < cfg.n_queries; ++i) {
        const PlantedFact& fact = sg.planted[rng.next_below(sg.planted.size())];
        WorkloadQuery q;
        q.id = "q" + std::to_string(i);
        q.answer_text = verbalize_triple(g.triple(fact.triple_id), g);
        q.question = "which concept is linked with";
        for (uint32_t j = 0; j < cfg.grounded_per_question; ++j) {
            q.question += ' ';
            q.question += g.concept_label(pick_popular());
            if (j + 1 < cfg.grounded_per_question) q.question += " and";
        }
        q.query_vec = noisy_query(provider, q.answer_text, cfg.noise_fraction,
                                  mix64(cfg.seed, 0x51f0 + i));
        out.push_back(std::move(q));
    }
    return out;
}

} // namespace kgf
