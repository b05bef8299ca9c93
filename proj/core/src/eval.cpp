#include "kgfusion/eval.hpp"

#include "kgfusion/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

namespace kgf {

namespace {

void finish_stats(ProximityReport& r) {
    r.k = static_cast<uint32_t>(r.per_sample.size());
    if (r.per_sample.empty()) {
        r.mean = r.stddev = 0.0;
        return;
    }
    double sum = 0.0;
    for (double v : r.per_sample) sum += v;
    r.mean = sum / static_cast<double>(r.per_sample.size());
    double sq = 0.0;
    for (double v : r.per_sample) sq += (v - r.mean) * (v - r.mean);
    r.stddev = std::sqrt(sq / static_cast<double>(r.per_sample.size()));
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

double parse_double(const std::string& s, const char* what) {
    try {
        size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::logic_error&) {
        throw FormatError(std::string("csv: bad ") + what + " value '" + s + "'");
    }
}

uint32_t parse_u32(const std::string& s, const char* what) {
    try {
        size_t used = 0;
        const unsigned long v = std::stoul(s, &used);
        if (used != s.size() || v > UINT32_MAX) throw std::invalid_argument(s);
        return static_cast<uint32_t>(v);
    } catch (const std::logic_error&) {
        throw FormatError(std::string("csv: bad ") + what + " value '" + s + "'");
    }
}

std::string expect_header(std::istream& is, const std::string& want) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError("csv: empty stream");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line == want ? line
                        : throw FormatError("csv: expected header '" + want +
                                            "', got '" + line + "'");
}

} // namespace

ProximityReport proximity(const std::vector<Subgraph>& subgraphs,
                          const std::vector<std::string>& answers,
                          const EmbeddingProvider& p) {
    if (subgraphs.size() != answers.size())
        throw DimensionMismatch("proximity: " + std::to_string(subgraphs.size()) +
                                " sub-graphs vs " + std::to_string(answers.size()) +
                                " answers");
    ProximityReport report;
    report.per_sample.reserve(subgraphs.size());
    for (size_t i = 0; i < subgraphs.size(); ++i) {
        const auto& sg = subgraphs[i];
        if (sg.triple_texts.empty()) {
            report.per_sample.push_back(0.0);  // empty sub-graph counts as zero
            continue;
        }
        const std::vector<float> ans = p.embed_text(answers[i]);
        double sum = 0.0;
        for (const auto& text : sg.triple_texts) {
            const std::vector<float> emb = p.embed_text(text);
            sum += cosine_similarity(std::span<const float>(emb),
                                     std::span<const float>(ans));
        }
        report.per_sample.push_back(sum / static_cast<double>(sg.triple_texts.size()));
    }
    finish_stats(report);
    return report;
}

AblationCurve similarity_curve(const std::vector<WorkloadQuery>& queries,
                               const EmbeddingIndex& idx, const EmbeddingProvider& p,
                               const std::vector<uint32_t>& ks) {
    if (ks.empty()) throw InvalidConfig("similarity_curve: empty k list");
    for (size_t i = 0; i + 1 < ks.size(); ++i)
        if (ks[i] >= ks[i + 1])
            throw InvalidConfig("similarity_curve: k list must be strictly increasing");
    if (ks.front() == 0) throw InvalidConfig("similarity_curve: k must be positive");
    if (queries.empty()) throw InvalidConfig("similarity_curve: no queries");

    AblationCurve curve;
    curve.x_name = "k";
    const uint32_t k_max = ks.back();
    std::vector<double> sums(ks.size(), 0.0);
    for (const auto& q : queries) {
        const auto hits = top_k(idx, q.query_vec, k_max);
        std::vector<float> ans = p.embed_text(q.answer_text);
        if (ans.size() != idx.dim())
            throw DimensionMismatch("similarity_curve: provider width " +
                                    std::to_string(ans.size()) + " vs index width " +
                                    std::to_string(idx.dim()));
        double ss = 0.0;
        for (float v : ans) ss += static_cast<double>(v) * v;
        const double inv = ss > 0.0 ? 1.0 / std::sqrt(ss) : 0.0;

        // Running prefix sums: the k-set is the first k entries of the k_max
        // retrieval.
        double acc = 0.0;
        size_t next = 0;
        for (size_t r = 0; r < hits.size(); ++r) {
            const auto row = idx.row_for_triple(hits[r].triple_id);
            double dotv = 0.0;
            for (size_t c = 0; c < row.size(); ++c)
                dotv += static_cast<double>(row[c]) * ans[c];
            acc += std::clamp(dotv * inv, -1.0, 1.0);
            while (next < ks.size() && r + 1 == ks[next]) {
                sums[next] += acc / static_cast<double>(ks[next]);
                ++next;
            }
        }
        // Retrieval shorter than some k (graph smaller than k): the mean over
        // what exists.
        while (next < ks.size()) {
            sums[next] += hits.empty() ? 0.0 : acc / static_cast<double>(hits.size());
            ++next;
        }
    }
    for (size_t i = 0; i < ks.size(); ++i)
        curve.points.emplace_back(ks[i], sums[i] / static_cast<double>(queries.size()));
    return curve;
}

AblationCurve node_cap_ablation(const std::vector<uint32_t>& caps,
                                const AblationContext& ctx) {
    if (caps.empty()) throw InvalidConfig("ablation: empty cap list");
    for (size_t i = 0; i + 1 < caps.size(); ++i)
        if (caps[i] >= caps[i + 1])
            throw InvalidConfig("ablation: caps must be strictly increasing");
    if (!ctx.idx || !ctx.graph || !ctx.nodes || !ctx.dataset)
        throw InvalidConfig("ablation: incomplete context");

    AblationCurve curve;
    curve.x_name = "node_cap";
    for (uint32_t cap : caps) {
        QaDataset ds = *ctx.dataset;
        attach_subgraphs(ds, *ctx.idx, *ctx.graph, *ctx.nodes, ctx.extract_k, cap);
        ToyFusionModel model = ToyFusionModel::init(ctx.fusion, ds.vocab);
        const TrainLog log = train(model, ds, ctx.training);
        curve.points.emplace_back(cap, log.epochs.back().val_acc);
    }
    return curve;
}

ContrastReport knowledge_contrast(const QaDataset& dataset, const FusionConfig& fusion,
                                  const TrainConfig& training) {
    ContrastReport report;
    {
        QaDataset no_kg = dataset;
        strip_subgraphs(no_kg);
        ToyFusionModel model = ToyFusionModel::init(fusion, no_kg.vocab);
        const TrainLog log = train(model, no_kg, training);
        report.no_kg_acc = log.epochs.back().val_acc;
    }
    {
        ToyFusionModel model = ToyFusionModel::init(fusion, dataset.vocab);
        const TrainLog log = train(model, dataset, training);
        report.with_kg_acc = log.epochs.back().val_acc;
    }
    report.gap = report.with_kg_acc - report.no_kg_acc;
    return report;
}

void proximity_to_csv(const ProximityReport& r, std::ostream& os) {
    os << "sample,score\n" << std::setprecision(17);
    for (size_t i = 0; i < r.per_sample.size(); ++i)
        os << i << ',' << r.per_sample[i] << '\n';
}

ProximityReport proximity_from_csv(std::istream& is) {
    expect_header(is, "sample,score");
    ProximityReport r;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != 2) throw FormatError("csv: expected 2 columns");
        const uint32_t idx = parse_u32(cells[0], "sample");
        if (idx != r.per_sample.size())
            throw FormatError("csv: sample rows out of order");
        r.per_sample.push_back(parse_double(cells[1], "score"));
    }
    finish_stats(r);
    return r;
}

void curve_to_csv(const AblationCurve& c, std::ostream& os) {
    os << c.x_name << ",value\n" << std::setprecision(17);
    for (const auto& [x, v] : c.points) os << x << ',' << v << '\n';
}

AblationCurve curve_from_csv(std::istream& is) {
    std::string header;
    if (!std::getline(is, header)) throw FormatError("csv: empty stream");
    if (!header.empty() && header.back() == '\r') header.pop_back();
    const auto cells = split_csv_line(header);
    if (cells.size() != 2 || cells[1] != "value")
        throw FormatError("csv: expected '<x>,value' header");
    AblationCurve c;
    c.x_name = cells[0];
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto row = split_csv_line(line);
        if (row.size() != 2) throw FormatError("csv: expected 2 columns");
        c.points.emplace_back(parse_u32(row[0], c.x_name.c_str()),
                              parse_double(row[1], "value"));
    }
    return c;
}

void contrast_to_csv(const ContrastReport& r, std::ostream& os) {
    os << "variant,accuracy\n" << std::setprecision(17);
    os << "no_kg," << r.no_kg_acc << '\n';
    os << "with_kg," << r.with_kg_acc << '\n';
}

ContrastReport contrast_from_csv(std::istream& is) {
    expect_header(is, "variant,accuracy");
    ContrastReport r;
    bool has_no = false, has_with = false;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != 2) throw FormatError("csv: expected 2 columns");
        if (cells[0] == "no_kg") {
            r.no_kg_acc = parse_double(cells[1], "accuracy");
            has_no = true;
        } else if (cells[0] == "with_kg") {
            r.with_kg_acc = parse_double(cells[1], "accuracy");
            has_with = true;
        } else {
            throw FormatError("csv: unknown variant '" + cells[0] + "'");
        }
    }
    if (!has_no || !has_with) throw FormatError("csv: contrast report incomplete");
    r.gap = r.with_kg_acc - r.no_kg_acc;
    return r;
}

void bench_to_csv(const BenchResult& r, std::ostream& os) {
    os << "method,mean_wall_ms,similarity_mean,similarity_std,mean_triples_kept,"
          "mean_nodes_kept,queries\n"
       << std::setprecision(17);
    for (const BenchRow* row : {&r.proposed, &r.baseline})
        os << row->method << ',' << row->mean_wall_ms << ',' << row->similarity_mean
           << ',' << row->similarity_std << ',' << row->mean_triples_kept << ','
           << row->mean_nodes_kept << ',' << row->queries << '\n';
}

} // namespace kgf
