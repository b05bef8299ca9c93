#pragma once
// Toy multimodal fusion decoder. The prefix [H_kg; H_img; H_lang] is encoded
// with bidirectional self-attention; reference tokens are decoded causally on
// top of it (prefix-LM): row s < P attends to [0, P), row s >= P attends to
// [0, s]. Blocks are pre-LN transformer blocks with GELU MLPs; the output
// head is tied to the token embedding table. All math is f64 and every
// gradient is written by hand.

#include "kgfusion/extract.hpp"
#include "kgfusion/gnn.hpp"
#include "kgfusion/matrix.hpp"
#include "kgfusion/tokenizer.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace kgf {

struct QaInstance {
    std::string id;
    std::string question;
    std::vector<std::string> options;
    std::string context;
    Matrix image_patches;            // m x d_img
    std::vector<uint32_t> reference; // rationale ++ SEP ++ answer ++ EOS
    Subgraph subgraph;               // may be empty (the no-knowledge variant)
    std::vector<float> query_vec;    // retrieval vector used to build subgraph

    // Token ids fed as the language block: question ++ options ++ context.
    std::vector<uint32_t> prompt_tokens(const Vocab& v) const;
};

struct BlockParams {
    Matrix wq, wk, wv, wo;                     // d x d
    std::vector<double> ln1_g, ln1_b, ln2_g, ln2_b;  // d
    Matrix w1;                                 // d x ff
    std::vector<double> b1;                    // ff
    Matrix w2;                                 // ff x d
    std::vector<double> b2;                    // d
};

struct FusionConfig {
    uint32_t d = 32;
    uint32_t heads = 2;
    uint32_t layers = 2;
    uint32_t ff = 64;
    uint32_t d_img = 16;
    uint32_t max_seq = 256;  // positions available for prefix + decoded tokens
    uint64_t seed = 1;
};

struct ToyFusionModel {
    FusionConfig cfg;
    Vocab vocab;
    Matrix embed;   // |V| x d, tied with the output head
    Matrix pos;     // max_seq x d learned positions
    Matrix w_img;   // d_img x d
    std::vector<BlockParams> blocks;
    std::vector<double> lnf_g, lnf_b;  // final layer norm
    KgEncoderParams kg;

    static ToyFusionModel init(const FusionConfig& cfg, Vocab vocab);
    void validate() const;
};

struct FusionGrads {
    Matrix embed, pos, w_img;
    std::vector<BlockParams> blocks;  // same shapes, gradient values
    std::vector<double> lnf_g, lnf_b;
    KgEncoderGrads kg;

    static FusionGrads zeros_like(const ToyFusionModel& m, size_t kg_nodes);
    void accumulate(const FusionGrads& other);
    void scale(double s);
};

// H_lang: one embedding row per token id.
Matrix embed_text(std::span<const uint32_t> tokens, const ToyFusionModel& model);

// H_img = patches * w_img.
Matrix project_image(const Matrix& patches, const ToyFusionModel& model);

// [H_kg; H_img; H_lang], row-stacked in that order.
Matrix fuse(const Matrix& h_kg, const Matrix& h_img, const Matrix& h_lang);

// Mean token NLL of the reference under teacher forcing.
double decoder_nll(const ToyFusionModel& model, const QaInstance& instance);

// Loss plus exact gradients for every trainable tensor (including the KG
// encoder parameters through H_kg).
double decoder_nll_backward(const ToyFusionModel& model, const QaInstance& instance,
                            FusionGrads& grads);

struct GenerationResult {
    std::vector<uint32_t> rationale;  // tokens before the first SEP
    std::vector<uint32_t> answer;     // tokens after SEP, EOS excluded
    bool emitted_sep = false;
    bool truncated = false;  // max_len reached before EOS
};

// Greedy decoding from BOS over the instance's prefix.
GenerationResult generate(const ToyFusionModel& model, const QaInstance& instance,
                          uint32_t max_len);

} // namespace kgf
