#pragma once
// Sub-graph encoder: one relational graph-attention layer, a LeakyReLU, and
// one symmetric-normalized graph-convolution layer, with exact hand-written
// reverse-mode gradients (no autodiff dependency).
//
// RGAT, per directed edge (i, r, j):
//     u_i   = W_node^T h_i                    (messages stay d-wide)
//     q_r   = W_rel^T rel_r                   (relation feature projected to d_a)
//     z     = LeakyReLU(a_src.u_i + a_dst.u_j + a_rel.q_r)
//     alpha = softmax(z) over j's incoming edges plus an implicit self-loop
//             that uses a learned self-relation feature
//     out_j = sum_i alpha_ij u_i
// GCN: H' = D^{-1/2}(A+I)D^{-1/2} H W over the undirected, relation-agnostic,
// zero-diagonal adjacency of the sub-graph (self-contribution enters only via
// the +I term, so reflexive edges do not double-count).
//
// All math is in 64-bit floats; softmax logits are max-shifted per
// destination. Forward/backward are pure functions of (sub-graph, params).

#include "kgfusion/extract.hpp"
#include "kgfusion/matrix.hpp"

#include <cstdint>
#include <vector>

namespace kgf {

inline constexpr uint32_t kRelationFeatureWidth = 64;

struct KgEncoderParams {
    Matrix relations;              // capacity x rel_width, trainable lookup
    std::vector<double> self_rel;  // rel_width, the self-loop relation feature
    Matrix w_node;                 // d x d
    Matrix w_rel;                  // rel_width x d_a
    std::vector<double> attn;      // 2*d + d_a, split (a_src | a_dst | a_rel)
    Matrix gcn_w;                  // d x d
    double leaky_slope = 0.01;     // shared by attention logits and activation

    uint32_t d() const { return static_cast<uint32_t>(w_node.rows()); }
    uint32_t d_attn() const { return static_cast<uint32_t>(w_rel.cols()); }
    uint32_t rel_width() const { return static_cast<uint32_t>(w_rel.rows()); }

    // Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) per tensor.
    static KgEncoderParams init(uint32_t d, uint32_t d_a, uint64_t seed,
                                uint32_t relation_capacity = kRelationCapacity,
                                uint32_t rel_width = kRelationFeatureWidth);

    void validate() const;  // shape consistency + finiteness
};

struct KgEncoderGrads {
    Matrix relations;
    std::vector<double> self_rel;
    Matrix w_node;
    Matrix w_rel;
    std::vector<double> attn;
    Matrix gcn_w;
    Matrix node_features;  // gradient w.r.t. the sub-graph's input features

    static KgEncoderGrads zeros_like(const KgEncoderParams& p, size_t nodes);
};

struct AttentionEntry {
    uint32_t src = 0;      // local node index the weight attends to
    double weight = 0.0;
};

struct EncodedSubgraph {
    Matrix h_kg;  // p x d
    // Per destination node: one entry per incoming edge (sub-graph edge
    // order), then the implicit self-loop entry last. Weights sum to 1.
    std::vector<std::vector<AttentionEntry>> attention;
};

// First layer only (attention aggregation, before the activation).
Matrix rgat_forward(const Subgraph& sg, const KgEncoderParams& params);

// Second layer only: h is the activated RGAT output.
Matrix gcn_forward(const Matrix& h, const Subgraph& sg, const KgEncoderParams& params);

// Full encoder: gcn(leaky_relu(rgat)). Attention records retained.
EncodedSubgraph kg_encode(const Subgraph& sg, const KgEncoderParams& params);

// Exact gradients for every parameter tensor and the input features.
// Recomputes the forward pass internally.
KgEncoderGrads kg_encode_backward(const Subgraph& sg, const KgEncoderParams& params,
                                  const Matrix& upstream_grad);

} // namespace kgf
