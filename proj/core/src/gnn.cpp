#include "kgfusion/gnn.hpp"

#include "kgfusion/rng.hpp"

#include <algorithm>
#include <cmath>

namespace kgf {

namespace {

double leaky(double x, double slope) { return x > 0.0 ? x : slope * x; }
double leaky_grad(double x, double slope) { return x > 0.0 ? 1.0 : slope; }

// Everything the backward pass needs from the attention layer.
struct RgatDetail {
    Matrix u;  // p x d transformed node features
    // Per destination: incoming sub-graph edge indices; the implicit
    // self-loop is appended implicitly as the last logit slot.
    std::vector<std::vector<uint32_t>> incoming;
    std::vector<std::vector<double>> raw;    // pre-LeakyReLU logits (+ self last)
    std::vector<std::vector<double>> alpha;  // softmax weights (+ self last)
    std::vector<double> q_self;              // projected self-relation feature
    std::vector<std::vector<double>> q_rel;  // projected feature per relation id
    std::vector<uint8_t> q_rel_set;
    Matrix out;  // p x d aggregated messages
};

void project_relation(const Matrix& w_rel, std::span<const double> feature,
                      std::vector<double>& q) {
    const size_t width = w_rel.rows(), d_a = w_rel.cols();
    q.assign(d_a, 0.0);
    for (size_t k = 0; k < width; ++k)
        axpy(feature[k], w_rel.row(k), q);
}

RgatDetail rgat_run(const Subgraph& sg, const KgEncoderParams& params) {
    params.validate();
    const size_t p = sg.nodes.size();
    const uint32_t d = params.d();
    const uint32_t d_a = params.d_attn();
    if (sg.node_features.rows() != p || sg.node_features.cols() != d)
        throw DimensionMismatch("rgat: node feature shape " +
                                std::to_string(sg.node_features.rows()) + "x" +
                                std::to_string(sg.node_features.cols()) +
                                " vs expected " + std::to_string(p) + "x" +
                                std::to_string(d));

    RgatDetail w;
    w.u = matmul(sg.node_features, params.w_node);
    w.incoming.resize(p);
    for (uint32_t e = 0; e < sg.edges.size(); ++e) {
        if (sg.edges[e].relation >= params.relations.rows())
            throw RelationOutOfRange("rgat: relation id " +
                                     std::to_string(sg.edges[e].relation) +
                                     " >= table rows " +
                                     std::to_string(params.relations.rows()));
        w.incoming[sg.edges[e].dst].push_back(e);
    }

    project_relation(params.w_rel, params.self_rel, w.q_self);
    w.q_rel.resize(params.relations.rows());
    w.q_rel_set.assign(params.relations.rows(), 0);
    auto q_of = [&](uint32_t r) -> const std::vector<double>& {
        if (!w.q_rel_set[r]) {
            project_relation(params.w_rel, params.relations.row(r), w.q_rel[r]);
            w.q_rel_set[r] = 1;
        }
        return w.q_rel[r];
    };

    const std::span<const double> a_full(params.attn);
    const auto a_src = a_full.subspan(0, d);
    const auto a_dst = a_full.subspan(d, d);
    const auto a_rel = a_full.subspan(2 * static_cast<size_t>(d), d_a);

    w.raw.resize(p);
    w.alpha.resize(p);
    w.out = Matrix(p, d);
    for (size_t j = 0; j < p; ++j) {
        const double dst_term = dot(a_dst, w.u.row(j));
        auto& raw = w.raw[j];
        raw.reserve(w.incoming[j].size() + 1);
        for (uint32_t e : w.incoming[j]) {
            const auto& edge = sg.edges[e];
            raw.push_back(dot(a_src, w.u.row(edge.src)) + dst_term +
                          dot(a_rel, q_of(edge.relation)));
        }
        raw.push_back(dot(a_src, w.u.row(j)) + dst_term + dot(a_rel, w.q_self));

        // Max-shifted softmax over LeakyReLU(raw logits).
        auto& alpha = w.alpha[j];
        alpha.resize(raw.size());
        double zmax = -HUGE_VAL;
        for (size_t e = 0; e < raw.size(); ++e) {
            alpha[e] = leaky(raw[e], params.leaky_slope);
            zmax = std::max(zmax, alpha[e]);
        }
        double denom = 0.0;
        for (double& z : alpha) {
            z = std::exp(z - zmax);
            denom += z;
        }
        for (double& z : alpha) z /= denom;

        auto out_j = w.out.row(j);
        for (size_t e = 0; e < w.incoming[j].size(); ++e)
            axpy(alpha[e], w.u.row(sg.edges[w.incoming[j][e]].src), out_j);
        axpy(alpha.back(), w.u.row(j), out_j);
    }
    return w;
}

// Symmetric-normalized dense propagation: rows of result = sum over
// neighbors-with-self of norm_i * norm_j * h_j. Duplicate and reflexive edges
// collapse (binary zero-diagonal A; self enters via +I only).
Matrix normalized_propagate(const Matrix& h, const Subgraph& sg) {
    const size_t p = sg.nodes.size();
    std::vector<uint8_t> adj(p * p, 0);
    for (const auto& e : sg.edges) {
        if (e.src == e.dst) continue;
        adj[e.src * p + e.dst] = 1;
        adj[e.dst * p + e.src] = 1;
    }
    std::vector<double> norm(p);
    for (size_t i = 0; i < p; ++i) {
        size_t deg = 0;
        for (size_t j = 0; j < p; ++j) deg += adj[i * p + j];
        norm[i] = 1.0 / std::sqrt(static_cast<double>(deg) + 1.0);
    }
    Matrix m(p, h.cols());
    for (size_t i = 0; i < p; ++i) {
        auto mi = m.row(i);
        axpy(norm[i] * norm[i], h.row(i), mi);  // the +I term
        for (size_t j = 0; j < p; ++j)
            if (adj[i * p + j]) axpy(norm[i] * norm[j], h.row(j), mi);
    }
    return m;
}

} // namespace

KgEncoderParams KgEncoderParams::init(uint32_t d, uint32_t d_a, uint64_t seed,
                                      uint32_t relation_capacity, uint32_t rel_width) {
    if (d == 0 || d_a == 0 || relation_capacity == 0 || rel_width == 0)
        throw InvalidConfig("KgEncoderParams::init: zero dimension");
    KgEncoderParams p;
    Rng rng(seed);
    p.relations = Matrix(relation_capacity, rel_width);
    p.relations.fill_uniform(rng, 1.0 / std::sqrt(static_cast<double>(rel_width)));
    p.self_rel.resize(rel_width);
    for (double& x : p.self_rel)
        x = rng.next_uniform(1.0 / std::sqrt(static_cast<double>(rel_width)));
    p.w_node = Matrix(d, d);
    p.w_node.fill_uniform(rng, 1.0 / std::sqrt(static_cast<double>(d)));
    p.w_rel = Matrix(rel_width, d_a);
    p.w_rel.fill_uniform(rng, 1.0 / std::sqrt(static_cast<double>(rel_width)));
    p.attn.resize(2 * static_cast<size_t>(d) + d_a);
    for (double& x : p.attn)
        x = rng.next_uniform(1.0 / std::sqrt(static_cast<double>(p.attn.size())));
    p.gcn_w = Matrix(d, d);
    p.gcn_w.fill_uniform(rng, 1.0 / std::sqrt(static_cast<double>(d)));
    return p;
}

void KgEncoderParams::validate() const {
    const size_t d = w_node.rows();
    if (w_node.cols() != d) throw DimensionMismatch("w_node must be square");
    if (gcn_w.rows() != d || gcn_w.cols() != d)
        throw DimensionMismatch("gcn_w must be d x d");
    if (relations.cols() != w_rel.rows())
        throw DimensionMismatch("relation feature width vs w_rel rows");
    if (self_rel.size() != w_rel.rows())
        throw DimensionMismatch("self_rel width vs w_rel rows");
    if (attn.size() != 2 * d + w_rel.cols())
        throw DimensionMismatch("attn length must be 2d + d_a");
    if (!w_node.all_finite() || !w_rel.all_finite() || !gcn_w.all_finite() ||
        !relations.all_finite())
        throw InvalidConfig("encoder parameters contain non-finite values");
    for (double x : attn)
        if (!std::isfinite(x)) throw InvalidConfig("attn contains non-finite values");
    for (double x : self_rel)
        if (!std::isfinite(x)) throw InvalidConfig("self_rel contains non-finite values");
}

KgEncoderGrads KgEncoderGrads::zeros_like(const KgEncoderParams& p, size_t nodes) {
    KgEncoderGrads g;
    g.relations = Matrix(p.relations.rows(), p.relations.cols());
    g.self_rel.assign(p.self_rel.size(), 0.0);
    g.w_node = Matrix(p.w_node.rows(), p.w_node.cols());
    g.w_rel = Matrix(p.w_rel.rows(), p.w_rel.cols());
    g.attn.assign(p.attn.size(), 0.0);
    g.gcn_w = Matrix(p.gcn_w.rows(), p.gcn_w.cols());
    g.node_features = Matrix(nodes, p.d());
    return g;
}

Matrix rgat_forward(const Subgraph& sg, const KgEncoderParams& params) {
    return rgat_run(sg, params).out;
}

Matrix gcn_forward(const Matrix& h, const Subgraph& sg, const KgEncoderParams& params) {
    if (h.rows() != sg.nodes.size())
        throw DimensionMismatch("gcn: h rows vs sub-graph nodes");
    if (h.cols() != params.gcn_w.rows())
        throw DimensionMismatch("gcn: h cols vs gcn_w rows");
    return matmul(normalized_propagate(h, sg), params.gcn_w);
}

EncodedSubgraph kg_encode(const Subgraph& sg, const KgEncoderParams& params) {
    RgatDetail w = rgat_run(sg, params);
    Matrix z = w.out;
    for (size_t i = 0; i < z.rows(); ++i)
        for (double& x : z.row(i)) x = leaky(x, params.leaky_slope);

    EncodedSubgraph enc;
    enc.h_kg = gcn_forward(z, sg, params);
    enc.attention.resize(sg.nodes.size());
    for (size_t j = 0; j < sg.nodes.size(); ++j) {
        auto& entries = enc.attention[j];
        entries.reserve(w.alpha[j].size());
        for (size_t e = 0; e < w.incoming[j].size(); ++e)
            entries.push_back({sg.edges[w.incoming[j][e]].src, w.alpha[j][e]});
        entries.push_back({static_cast<uint32_t>(j), w.alpha[j].back()});
    }
    return enc;
}

KgEncoderGrads kg_encode_backward(const Subgraph& sg, const KgEncoderParams& params,
                                  const Matrix& upstream_grad) {
    const size_t p = sg.nodes.size();
    const uint32_t d = params.d();
    if (upstream_grad.rows() != p || upstream_grad.cols() != d)
        throw DimensionMismatch("kg_encode_backward: upstream grad shape");

    RgatDetail w = rgat_run(sg, params);
    Matrix z = w.out;  // activated RGAT output
    for (size_t i = 0; i < z.rows(); ++i)
        for (double& x : z.row(i)) x = leaky(x, params.leaky_slope);

    KgEncoderGrads g = KgEncoderGrads::zeros_like(params, p);

    // GCN: H' = (P z) W with P symmetric, so dW = z^T (P G), dz = (P G) W^T.
    const Matrix pg = normalized_propagate(upstream_grad, sg);
    g.gcn_w = matmul_at(z, pg);
    Matrix dz = matmul_bt(pg, params.gcn_w);

    // Activation gate back to the raw RGAT output.
    Matrix dr = std::move(dz);
    for (size_t i = 0; i < p; ++i) {
        auto rrow = w.out.row(i);
        auto drow = dr.row(i);
        for (size_t c = 0; c < d; ++c) drow[c] *= leaky_grad(rrow[c], params.leaky_slope);
    }

    // RGAT backward.
    const std::span<const double> a_full(params.attn);
    const uint32_t d_a = params.d_attn();
    const auto a_src = a_full.subspan(0, d);
    const auto a_dst = a_full.subspan(d, d);
    const auto a_rel = a_full.subspan(2 * static_cast<size_t>(d), d_a);
    auto g_a_src = std::span<double>(g.attn).subspan(0, d);
    auto g_a_dst = std::span<double>(g.attn).subspan(d, d);
    auto g_a_rel = std::span<double>(g.attn).subspan(2 * static_cast<size_t>(d), d_a);

    Matrix du(p, d);
    std::vector<std::vector<double>> dq_rel(params.relations.rows());
    std::vector<uint8_t> dq_rel_used(params.relations.rows(), 0);
    std::vector<double> dq_self(d_a, 0.0);
    std::vector<double> dalpha, draw;

    for (size_t j = 0; j < p; ++j) {
        const auto& incoming = w.incoming[j];
        const auto& alpha = w.alpha[j];
        const auto& raw = w.raw[j];
        const size_t slots = alpha.size();  // incoming + self
        const auto dr_j = dr.row(j);

        // out_j = sum_e alpha_e u_src(e): split into dalpha and du.
        dalpha.assign(slots, 0.0);
        for (size_t e = 0; e < incoming.size(); ++e) {
            const uint32_t src = sg.edges[incoming[e]].src;
            dalpha[e] = dot(dr_j, w.u.row(src));
            axpy(alpha[e], dr_j, du.row(src));
        }
        dalpha[slots - 1] = dot(dr_j, w.u.row(j));
        axpy(alpha[slots - 1], dr_j, du.row(j));

        // Softmax jacobian, then the logit LeakyReLU gate.
        double mix = 0.0;
        for (size_t e = 0; e < slots; ++e) mix += alpha[e] * dalpha[e];
        draw.assign(slots, 0.0);
        for (size_t e = 0; e < slots; ++e)
            draw[e] = alpha[e] * (dalpha[e] - mix) * leaky_grad(raw[e], params.leaky_slope);

        // Raw logit = a_src.u_i + a_dst.u_j + a_rel.q.
        for (size_t e = 0; e < slots; ++e) {
            const double gl = draw[e];
            if (gl == 0.0) continue;
            const bool self = e == slots - 1;
            const uint32_t src = self ? static_cast<uint32_t>(j) : sg.edges[incoming[e]].src;
            const auto u_i = w.u.row(src);
            const auto u_j = w.u.row(j);
            axpy(gl, u_i, g_a_src);
            axpy(gl, u_j, g_a_dst);
            axpy(gl, a_src, du.row(src));
            axpy(gl, a_dst, du.row(j));
            if (self) {
                axpy(gl, std::span<const double>(w.q_self), g_a_rel);
                axpy(gl, a_rel, std::span<double>(dq_self));
            } else {
                const uint32_t r = sg.edges[incoming[e]].relation;
                if (!dq_rel_used[r]) {
                    dq_rel[r].assign(d_a, 0.0);
                    dq_rel_used[r] = 1;
                }
                axpy(gl, std::span<const double>(w.q_rel[r]), g_a_rel);
                axpy(gl, a_rel, std::span<double>(dq_rel[r]));
            }
        }
    }

    // u = H W_node.
    g.w_node = matmul_at(sg.node_features, du);
    g.node_features = matmul_bt(du, params.w_node);

    // q_r = rel_r W_rel (and q_self = self_rel W_rel).
    const size_t width = params.w_rel.rows();
    for (uint32_t r = 0; r < params.relations.rows(); ++r) {
        if (!dq_rel_used[r]) continue;
        const auto rel_row = params.relations.row(r);
        auto g_rel_row = g.relations.row(r);
        for (size_t k = 0; k < width; ++k) {
            g_rel_row[k] += dot(std::span<const double>(dq_rel[r]), params.w_rel.row(k));
            axpy(rel_row[k], std::span<const double>(dq_rel[r]), g.w_rel.row(k));
        }
    }
    for (size_t k = 0; k < width; ++k) {
        g.self_rel[k] += dot(std::span<const double>(dq_self), params.w_rel.row(k));
        axpy(params.self_rel[k], std::span<const double>(dq_self), g.w_rel.row(k));
    }
    return g;
}

} // namespace kgf
