#pragma once
// Planted QA corpus: each instance asks which concept a planted subject links
// to. The correct answer is recoverable from the graph (the planted triple the
// instance's query vector points at) but not from the question text alone —
// subjects are split disjointly between train and validation, so text-only
// models generalize at option-chance. Serialized as JSON-lines, one instance
// per line, with base64-encoded patch and query matrices.

#include "kgfusion/embed_index.hpp"
#include "kgfusion/extract.hpp"
#include "kgfusion/fusion.hpp"
#include "kgfusion/kg_store.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace kgf {

struct DatasetOptions {
    uint32_t n_options = 4;        // answer choices listed per question
    uint32_t patch_rows = 2;       // noise image patches per instance
    uint32_t d_img = 16;
    double noise_fraction = 0.25;  // query-vector perturbation
    double val_fact_fraction = 0.2;  // share of each answer's subjects held out
};

struct QaDataset {
    std::vector<QaInstance> train, val;
    // Triple id of the planted fact each instance's extractor should find,
    // parallel to train/val.
    std::vector<uint32_t> train_gold, val_gold;
    Vocab vocab;
};

// Instances sample planted facts; train and validation draw from disjoint
// subject pools per answer (requires planted_per_answer >= 2).
QaDataset make_planted_dataset(uint64_t seed, const SyntheticGraph& sg,
                               const EmbeddingProvider& provider, uint32_t n_train,
                               uint32_t n_val, const DatasetOptions& opts = {});

// Runs the proposed extractor on every instance's query vector and stores the
// resulting sub-graph on the instance.
void attach_subgraphs(QaDataset& ds, const EmbeddingIndex& idx, const KnowledgeGraph& g,
                      const NodeEmbeddingTable& nodes, uint32_t k,
                      uint32_t node_cap = kDefaultNodeCap);

// Drops every instance's sub-graph (the no-knowledge variant).
void strip_subgraphs(QaDataset& ds);

// Rebuilds the vocabulary from the current text fields (question, options,
// context, reference words) and re-encodes references. Call after editing
// instance text in place.
void rebuild_vocab(QaDataset& ds);

// JSON-lines; every line is one instance tagged with its split. Deterministic
// bytes for a deterministic dataset.
void save_dataset(const QaDataset& ds, std::ostream& os);
QaDataset load_dataset(std::istream& is);
void save_dataset_file(const QaDataset& ds, const std::string& path);
QaDataset load_dataset_file(const std::string& path);

} // namespace kgf
