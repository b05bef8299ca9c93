#pragma once
// Evaluation harness: triple–answer proximity, similarity-vs-k curves, the
// node-cap ablation (train per cap, same seed), and the with/without-knowledge
// accuracy contrast. Every report serializes to CSV and reloads losslessly.

#include "kgfusion/dataset.hpp"
#include "kgfusion/embed_index.hpp"
#include "kgfusion/extract.hpp"
#include "kgfusion/trainer.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace kgf {

struct ProximityReport {
    std::vector<double> per_sample;  // mean cosine over each sample's triples
    double mean = 0.0;
    double stddev = 0.0;  // population
    uint32_t k = 0;       // sample count
};

struct AblationCurve {
    std::string x_name;  // "k" or "node_cap"
    std::vector<std::pair<uint32_t, double>> points;  // x strictly increasing
};

struct ContrastReport {
    double no_kg_acc = 0.0;
    double with_kg_acc = 0.0;
    double gap = 0.0;  // with - no
};

// Per sample: mean cosine between each retained triple's verbalization
// embedding and the answer embedding. Empty sub-graphs score 0 and count.
ProximityReport proximity(const std::vector<Subgraph>& subgraphs,
                          const std::vector<std::string>& answers,
                          const EmbeddingProvider& p);

// One proximity mean per k over the same retrievals; the k-set is a prefix of
// every larger set, so each query is scanned once at the largest k.
AblationCurve similarity_curve(const std::vector<WorkloadQuery>& queries,
                               const EmbeddingIndex& idx, const EmbeddingProvider& p,
                               const std::vector<uint32_t>& ks);

// Everything the per-cap pipeline needs: the dataset is re-extracted at each
// cap, the model re-initialized from the same seed, then trained.
struct AblationContext {
    const EmbeddingIndex* idx = nullptr;
    const KnowledgeGraph* graph = nullptr;
    const NodeEmbeddingTable* nodes = nullptr;
    const QaDataset* dataset = nullptr;  // sub-graphs are overwritten per cap
    uint32_t extract_k = 4;
    FusionConfig fusion;
    TrainConfig training;
};

AblationCurve node_cap_ablation(const std::vector<uint32_t>& caps,
                                const AblationContext& ctx);

// Trains two models identically except for the KG block (stripped for the
// first row) and reports validation accuracies.
ContrastReport knowledge_contrast(const QaDataset& dataset, const FusionConfig& fusion,
                                  const TrainConfig& training);

void proximity_to_csv(const ProximityReport& r, std::ostream& os);
ProximityReport proximity_from_csv(std::istream& is);

void curve_to_csv(const AblationCurve& c, std::ostream& os);
AblationCurve curve_from_csv(std::istream& is);

void contrast_to_csv(const ContrastReport& r, std::ostream& os);
ContrastReport contrast_from_csv(std::istream& is);

// Table-1-shaped extractor comparison rows.
void bench_to_csv(const BenchResult& r, std::ostream& os);

} // namespace kgf
