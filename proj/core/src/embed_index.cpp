#include "kgfusion/embed_index.hpp"

#include "kgfusion/binio.hpp"
#include "kgfusion/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace kgf {

std::vector<float> hash_embed(std::string_view text, uint32_t dim, uint64_t seed) {
    if (dim < 2) throw InvalidConfig("hash_embed: dim must be >= 2");
    const uint64_t key = fnv1a64(text) ^ splitmix64(seed);
    std::vector<double> v(dim);
    for (uint64_t attempt = 0;; ++attempt) {
        for (uint32_t i = 0; i < dim; ++i)
            v[i] = normal_at(key, attempt * dim + i);
        double ss = 0.0;
        for (double x : v) ss += x * x;
        if (ss > 0.0) {
            const double inv = 1.0 / std::sqrt(ss);
            std::vector<float> out(dim);
            for (uint32_t i = 0; i < dim; ++i)
                out[i] = static_cast<float>(v[i] * inv);
            return out;
        }
        // All-zero draw is astronomically unlikely; advance the counter block.
    }
}

HashEmbeddingProvider::HashEmbeddingProvider(uint32_t dim, uint64_t seed)
    : dim_(dim), seed_(seed) {
    if (dim < 2) throw InvalidConfig("HashEmbeddingProvider: dim must be >= 2");
}

std::vector<float> HashEmbeddingProvider::embed_text(std::string_view text) const {
    return hash_embed(text, dim_, seed_);
}

FileEmbeddingProvider::FileEmbeddingProvider(const std::string& path) {
    std::ifstream in = open_in(path);
    expect_magic(in, "EMB1");
    const uint32_t count = read_pod<uint32_t>(in);
    dim_ = read_pod<uint32_t>(in);
    if (dim_ == 0) throw FormatError("EMB1: zero dim");
    data_.resize(static_cast<size_t>(count) * dim_);
    read_floats(in, data_);
    ids_.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        ids_.push_back(read_line_string(in));
        if (!index_.emplace(ids_.back(), i).second)
            throw FormatError("EMB1: duplicate id '" + ids_.back() + "'");
    }
}

std::vector<float> FileEmbeddingProvider::embed_text(std::string_view text) const {
    auto it = index_.find(std::string(text));
    if (it == index_.end())
        throw UnknownToken("file embedding provider has no entry for '" + std::string(text) + "'");
    const float* base = data_.data() + static_cast<size_t>(it->second) * dim_;
    return {base, base + dim_};
}

std::string verbalize_triple(const Triple& t, const KnowledgeGraph& g) {
    std::string out = g.concept_label(t.subject);
    out += ' ';
    out += g.relations().label(t.relation);
    out += ' ';
    out += g.concept_label(t.object);
    return out;
}

namespace {

template <typename T>
double cosine_impl(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size())
        throw DimensionMismatch("cosine_similarity: " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double x = a[i], y = b[i];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0)
        throw ZeroNormInput("cosine_similarity: zero-norm vector");
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

} // namespace

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    return cosine_impl(a, b);
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
    return cosine_impl(a, b);
}

EmbeddingIndex::EmbeddingIndex(uint32_t dim, std::vector<float> rows,
                               std::vector<uint32_t> triple_ids)
    : dim_(dim), data_(std::move(rows)), triple_ids_(std::move(triple_ids)) {
    if (dim_ == 0) throw InvalidConfig("EmbeddingIndex: dim must be positive");
    if (data_.size() != triple_ids_.size() * static_cast<size_t>(dim_))
        throw InvalidConfig("EmbeddingIndex: data size does not match rows*dim");
    rebuild_inverse();
}

void EmbeddingIndex::rebuild_inverse() {
    uint32_t max_id = 0;
    for (uint32_t id : triple_ids_) max_id = std::max(max_id, id);
    row_of_triple_.assign(triple_ids_.empty() ? 0 : max_id + 1, UINT32_MAX);
    for (uint32_t r = 0; r < triple_ids_.size(); ++r) {
        if (row_of_triple_[triple_ids_[r]] != UINT32_MAX)
            throw InvalidConfig("EmbeddingIndex: duplicate triple id " +
                                std::to_string(triple_ids_[r]));
        row_of_triple_[triple_ids_[r]] = r;
    }
}

std::span<const float> EmbeddingIndex::row_for_triple(uint32_t triple_id) const {
    if (triple_id >= row_of_triple_.size() || row_of_triple_[triple_id] == UINT32_MAX)
        throw InvalidConfig("EmbeddingIndex: no row for triple " + std::to_string(triple_id));
    return row(row_of_triple_[triple_id]);
}

void EmbeddingIndex::save(std::ostream& out) const {
    write_magic(out, "EMB1");
    write_pod<uint32_t>(out, row_count());
    write_pod<uint32_t>(out, dim_);
    write_floats(out, data_);
    for (uint32_t id : triple_ids_)
        write_line_string(out, std::to_string(id));
}

EmbeddingIndex EmbeddingIndex::load(std::istream& in) {
    expect_magic(in, "EMB1");
    const uint32_t count = read_pod<uint32_t>(in);
    const uint32_t dim = read_pod<uint32_t>(in);
    if (dim == 0) throw FormatError("EMB1: zero dim");
    std::vector<float> data(static_cast<size_t>(count) * dim);
    read_floats(in, data);
    std::vector<uint32_t> ids(count);
    for (uint32_t i = 0; i < count; ++i) {
        const std::string line = read_line_string(in);
        try {
            size_t pos = 0;
            const unsigned long parsed = std::stoul(line, &pos);
            if (pos != line.size() || parsed > UINT32_MAX)
                throw std::invalid_argument(line);
            ids[i] = static_cast<uint32_t>(parsed);
        } catch (const std::exception&) {
            throw FormatError("EMB1: bad triple id line '" + line + "'");
        }
    }
    return EmbeddingIndex(dim, std::move(data), std::move(ids));
}

void EmbeddingIndex::save_file(const std::string& path) const {
    std::ofstream out = open_out(path);
    save(out);
    if (!out) throw FormatError("failed writing " + path);
}

EmbeddingIndex EmbeddingIndex::load_file(const std::string& path) {
    std::ifstream in = open_in(path);
    return load(in);
}

EmbeddingIndex build_index(const KnowledgeGraph& g, const EmbeddingProvider& p) {
    if (g.triple_count() == 0) throw EmptyGraph("build_index: graph has no triples");
    const uint32_t dim = p.dim();
    std::vector<float> data;
    data.reserve(static_cast<size_t>(g.triple_count()) * dim);
    std::vector<uint32_t> ids(g.triple_count());
    for (uint32_t t = 0; t < g.triple_count(); ++t) {
        ids[t] = t;
        std::vector<float> e;
        try {
            e = p.embed_text(verbalize_triple(g.triple(t), g));
        } catch (const Error&) {
            throw;
        } catch (const std::exception& ex) {
            throw InvalidConfig("embedding provider failed on triple " +
                                std::to_string(t) + ": " + ex.what());
        }
        if (e.size() != dim)
            throw DimensionMismatch("provider returned " + std::to_string(e.size()) +
                                    " floats for triple " + std::to_string(t) +
                                    ", expected " + std::to_string(dim));
        double ss = 0.0;
        for (float x : e) ss += static_cast<double>(x) * x;
        if (ss == 0.0)
            throw ZeroNormInput("provider returned a zero vector for triple " +
                                std::to_string(t));
        if (std::abs(ss - 1.0) <= 1e-6) {
            // Already unit within tolerance: keep provider bytes verbatim so
            // node averaging over index rows sees the provider's embeddings.
            data.insert(data.end(), e.begin(), e.end());
        } else {
            const double inv = 1.0 / std::sqrt(ss);
            for (float x : e) data.push_back(static_cast<float>(x * inv));
        }
    }
    return EmbeddingIndex(dim, std::move(data), std::move(ids));
}

NodeEmbeddingTable build_node_table(const KnowledgeGraph& g, const EmbeddingIndex& idx) {
    if (g.triple_count() == 0) throw EmptyGraph("build_node_table: graph has no triples");
    NodeEmbeddingTable table;
    table.matrix = Matrix(g.concept_count(), idx.dim());
    table.occurrence_counts.assign(g.concept_count(), 0);
    for (uint32_t t = 0; t < g.triple_count(); ++t) {
        const Triple& tr = g.triple(t);
        const std::span<const float> row = idx.row_for_triple(t);
        auto add_to = [&](uint32_t concept_id) {
            double* dst = table.matrix.row(concept_id).data();
            for (uint32_t i = 0; i < idx.dim(); ++i) dst[i] += row[i];
            ++table.occurrence_counts[concept_id];
        };
        add_to(tr.subject);
        if (tr.object != tr.subject) add_to(tr.object);
    }
    for (uint32_t c = 0; c < g.concept_count(); ++c) {
        if (table.occurrence_counts[c] == 0)
            throw OrphanConcept("concept " + std::to_string(c) + " ('" +
                                g.concept_label(c) + "') occurs in no triple");
        const double inv = 1.0 / table.occurrence_counts[c];
        for (double& x : table.matrix.row(c)) x *= inv;
    }
    return table;
}

std::vector<ScoredTriple> top_k(const EmbeddingIndex& idx,
                                std::span<const float> query, uint32_t k) {
    if (k == 0) throw InvalidConfig("top_k: k must be >= 1");
    if (query.size() != idx.dim())
        throw DimensionMismatch("top_k: query dim " + std::to_string(query.size()) +
                                " vs index dim " + std::to_string(idx.dim()));
    double qss = 0.0;
    for (float x : query) qss += static_cast<double>(x) * x;
    if (qss == 0.0) throw ZeroNormInput("top_k: zero-norm query");
    const double qinv = 1.0 / std::sqrt(qss);

    std::vector<ScoredTriple> scored(idx.row_count());
    for (uint32_t r = 0; r < idx.row_count(); ++r) {
        const std::span<const float> row = idx.row(r);
        double dot = 0.0;
        for (uint32_t i = 0; i < idx.dim(); ++i)
            dot += static_cast<double>(row[i]) * query[i];
        scored[r] = {idx.triple_id_of_row(r), std::clamp(dot * qinv, -1.0, 1.0)};
    }
    const size_t take = std::min<size_t>(k, scored.size());
    auto better = [](const ScoredTriple& a, const ScoredTriple& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.triple_id < b.triple_id;
    };
    std::partial_sort(scored.begin(), scored.begin() + take, scored.end(), better);
    scored.resize(take);
    return scored;
}

std::vector<float> noisy_query(const EmbeddingProvider& p, std::string_view text,
                               double noise_fraction, uint64_t seed) {
    if (noise_fraction < 0.0 || noise_fraction >= 1.0)
        throw InvalidConfig("noisy_query: noise_fraction must be in [0,1)");
    const std::vector<float> base = p.embed_text(text);
    const uint32_t dim = p.dim();
    Rng rng(seed);
    std::vector<double> noise(dim);
    double ss = 0.0;
    for (uint32_t i = 0; i < dim; ++i) {
        noise[i] = rng.next_normal();
        ss += noise[i] * noise[i];
    }
    const double ninv = ss > 0.0 ? 1.0 / std::sqrt(ss) : 0.0;
    const double wa = std::sqrt(1.0 - noise_fraction);
    const double wb = std::sqrt(noise_fraction);
    std::vector<double> mixed(dim);
    double mss = 0.0;
    for (uint32_t i = 0; i < dim; ++i) {
        mixed[i] = wa * base[i] + wb * noise[i] * ninv;
        mss += mixed[i] * mixed[i];
    }
    if (mss == 0.0) throw ZeroNormInput("noisy_query: degenerate mix");
    const double minv = 1.0 / std::sqrt(mss);
    std::vector<float> out(dim);
    for (uint32_t i = 0; i < dim; ++i)
        out[i] = static_cast<float>(mixed[i] * minv);
    return out;
}

} // namespace kgf
