#include "kgfusion/fusion.hpp"

#include "kgfusion/rng.hpp"

#include <algorithm>
#include <cmath>

namespace kgf {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_grad(double x) {
    const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    return 0.5 * (1.0 + t) +
           0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

struct LnCache {
    std::vector<double> mean, rstd;
};

// y = g * (x - mean) * rstd + b, per row.
Matrix layer_norm(const Matrix& x, std::span<const double> g, std::span<const double> b,
                  LnCache& cache) {
    const size_t n = x.rows(), d = x.cols();
    Matrix y(n, d);
    cache.mean.resize(n);
    cache.rstd.resize(n);
    for (size_t i = 0; i < n; ++i) {
        const auto xr = x.row(i);
        double mu = 0.0;
        for (double v : xr) mu += v;
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (double v : xr) var += (v - mu) * (v - mu);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        cache.mean[i] = mu;
        cache.rstd[i] = rstd;
        auto yr = y.row(i);
        for (size_t c = 0; c < d; ++c) yr[c] = g[c] * (xr[c] - mu) * rstd + b[c];
    }
    return y;
}

// Adds dx into dx_out; accumulates dg/db.
void layer_norm_backward(const Matrix& x, std::span<const double> g, const LnCache& cache,
                         const Matrix& dy, Matrix& dx_out, std::span<double> dg,
                         std::span<double> db) {
    const size_t n = x.rows(), d = x.cols();
    for (size_t i = 0; i < n; ++i) {
        const auto xr = x.row(i);
        const auto dyr = dy.row(i);
        auto dxr = dx_out.row(i);
        const double mu = cache.mean[i], rstd = cache.rstd[i];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (size_t c = 0; c < d; ++c) {
            const double xhat = (xr[c] - mu) * rstd;
            const double dxhat = dyr[c] * g[c];
            dg[c] += dyr[c] * xhat;
            db[c] += dyr[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        const double inv_d = 1.0 / static_cast<double>(d);
        for (size_t c = 0; c < d; ++c) {
            const double xhat = (xr[c] - mu) * rstd;
            const double dxhat = dyr[c] * g[c];
            dxr[c] += rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
}

struct BlockTrace {
    Matrix x_in, ln1, q, k, v;
    LnCache ln1c, ln2c;
    std::vector<Matrix> attn;  // per head, S x S (zero outside allowed range)
    Matrix ctx, x_mid, ln2, h_pre, h_act, x_out;
};

struct Trace {
    size_t p = 0, m = 0, n = 0, prefix = 0, t = 0, s = 0;
    Matrix h_kg, h_img, h_lang;
    Matrix x0;
    std::vector<BlockTrace> blocks;
    Matrix lnf;
    LnCache lnfc;
    std::vector<uint32_t> in_tokens;  // BOS ++ reference[0..T-2]
};

// Attention window: prefix rows see the whole prefix; decoded rows see
// everything up to and including themselves.
size_t allowed_limit(size_t row, size_t prefix) {
    return row < prefix ? prefix : row + 1;
}

void run_blocks(const ToyFusionModel& model, Trace& tr) {
    const size_t s = tr.s, d = model.cfg.d;
    const size_t heads = model.cfg.heads, dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix x = tr.x0;
    tr.blocks.resize(model.blocks.size());
    for (size_t l = 0; l < model.blocks.size(); ++l) {
        const BlockParams& bp = model.blocks[l];
        BlockTrace& bt = tr.blocks[l];
        bt.x_in = x;
        bt.ln1 = layer_norm(bt.x_in, bp.ln1_g, bp.ln1_b, bt.ln1c);
        bt.q = matmul(bt.ln1, bp.wq);
        bt.k = matmul(bt.ln1, bp.wk);
        bt.v = matmul(bt.ln1, bp.wv);

        bt.attn.assign(heads, Matrix(s, s));
        bt.ctx = Matrix(s, d);
        for (size_t h = 0; h < heads; ++h) {
            const size_t off = h * dh;
            Matrix& w = bt.attn[h];
            for (size_t i = 0; i < s; ++i) {
                const size_t limit = allowed_limit(i, tr.prefix);
                auto wrow = w.row(i);
                double zmax = -HUGE_VAL;
                for (size_t j = 0; j < limit; ++j) {
                    double sc = 0.0;
                    for (size_t c = 0; c < dh; ++c)
                        sc += bt.q(i, off + c) * bt.k(j, off + c);
                    wrow[j] = sc * scale;
                    zmax = std::max(zmax, wrow[j]);
                }
                double denom = 0.0;
                for (size_t j = 0; j < limit; ++j) {
                    wrow[j] = std::exp(wrow[j] - zmax);
                    denom += wrow[j];
                }
                auto crow = tr.blocks[l].ctx.row(i);
                for (size_t j = 0; j < limit; ++j) {
                    wrow[j] /= denom;
                    for (size_t c = 0; c < dh; ++c)
                        crow[off + c] += wrow[j] * bt.v(j, off + c);
                }
            }
        }

        bt.x_mid = bt.x_in;
        bt.x_mid += matmul(bt.ctx, bp.wo);

        bt.ln2 = layer_norm(bt.x_mid, bp.ln2_g, bp.ln2_b, bt.ln2c);
        bt.h_pre = matmul(bt.ln2, bp.w1);
        for (size_t i = 0; i < s; ++i) {
            auto row = bt.h_pre.row(i);
            for (size_t c = 0; c < row.size(); ++c) row[c] += bp.b1[c];
        }
        bt.h_act = bt.h_pre;
        for (size_t i = 0; i < s; ++i)
            for (double& vcell : bt.h_act.row(i)) vcell = gelu(vcell);

        bt.x_out = bt.x_mid;
        Matrix mlp_out = matmul(bt.h_act, bp.w2);
        for (size_t i = 0; i < s; ++i) {
            auto row = mlp_out.row(i);
            for (size_t c = 0; c < row.size(); ++c) row[c] += bp.b2[c];
        }
        bt.x_out += mlp_out;
        x = bt.x_out;
    }
    tr.lnf = layer_norm(x, model.lnf_g, model.lnf_b, tr.lnfc);
}

// Builds the full input sequence (prefix + BOS + teacher-forced tokens) and
// runs the stack. `decode_tokens` are the token rows after the prefix.
Trace run_forward(const ToyFusionModel& model, const QaInstance& instance,
                  std::span<const uint32_t> decode_tokens) {
    model.validate();
    const uint32_t d = model.cfg.d;

    Trace tr;
    EncodedSubgraph enc;
    if (!instance.subgraph.nodes.empty()) {
        enc = kg_encode(instance.subgraph, model.kg);
        tr.h_kg = std::move(enc.h_kg);
    } else {
        tr.h_kg = Matrix(0, d);
    }
    tr.h_img = project_image(instance.image_patches, model);
    const std::vector<uint32_t> lang = instance.prompt_tokens(model.vocab);
    tr.h_lang = embed_text(lang, model);

    tr.p = tr.h_kg.rows();
    tr.m = tr.h_img.rows();
    tr.n = tr.h_lang.rows();
    tr.prefix = tr.p + tr.m + tr.n;
    tr.t = decode_tokens.size();
    tr.s = tr.prefix + tr.t;
    if (tr.s > model.cfg.max_seq)
        throw InvalidConfig("sequence length " + std::to_string(tr.s) +
                            " exceeds max_seq " + std::to_string(model.cfg.max_seq));
    if (tr.prefix == 0) throw InvalidConfig("empty prefix");

    tr.in_tokens.assign(decode_tokens.begin(), decode_tokens.end());
    tr.x0 = fuse(tr.h_kg, tr.h_img, tr.h_lang);
    Matrix token_rows = embed_text(tr.in_tokens, model);
    Matrix x0(tr.s, d);
    for (size_t i = 0; i < tr.prefix; ++i) {
        auto dst = x0.row(i);
        const auto src = tr.x0.row(i);
        std::copy(src.begin(), src.end(), dst.begin());
    }
    for (size_t i = 0; i < tr.t; ++i) {
        auto dst = x0.row(tr.prefix + i);
        const auto src = token_rows.row(i);
        std::copy(src.begin(), src.end(), dst.begin());
    }
    for (size_t i = 0; i < tr.s; ++i) axpy(1.0, model.pos.row(i), x0.row(i));
    tr.x0 = std::move(x0);

    run_blocks(model, tr);
    return tr;
}

// Softmax over logits = lnf_row . embed^T; returns probabilities.
std::vector<double> output_distribution(const ToyFusionModel& model,
                                        std::span<const double> lnf_row) {
    const uint32_t v = model.vocab.size();
    std::vector<double> logits(v);
    for (uint32_t i = 0; i < v; ++i) logits[i] = dot(lnf_row, model.embed.row(i));
    const double zmax = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double& x : logits) {
        x = std::exp(x - zmax);
        denom += x;
    }
    for (double& x : logits) x /= denom;
    return logits;
}

void check_reference(const ToyFusionModel& model, const QaInstance& instance) {
    if (instance.reference.empty())
        throw EmptyReference("instance '" + instance.id + "' has an empty reference");
    for (uint32_t t : instance.reference)
        if (t >= model.vocab.size())
            throw UnknownToken("reference token id " + std::to_string(t) +
                               " out of vocabulary");
}

} // namespace

std::vector<uint32_t> QaInstance::prompt_tokens(const Vocab& v) const {
    std::string text = question;
    for (const auto& o : options) {
        text += ' ';
        text += o;
    }
    if (!context.empty()) {
        text += ' ';
        text += context;
    }
    return v.encode(text);
}

ToyFusionModel ToyFusionModel::init(const FusionConfig& cfg, Vocab vocab) {
    if (cfg.d == 0 || cfg.heads == 0 || cfg.d % cfg.heads != 0)
        throw InvalidConfig("fusion: d must be a positive multiple of heads");
    if (cfg.layers == 0 || cfg.ff == 0 || cfg.d_img == 0 || cfg.max_seq == 0)
        throw InvalidConfig("fusion: zero-sized configuration");

    ToyFusionModel m;
    m.cfg = cfg;
    m.vocab = std::move(vocab);
    Rng rng(mix64(cfg.seed, 0xf051));
    const double inv_d = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    m.embed = Matrix(m.vocab.size(), cfg.d);
    m.embed.fill_uniform(rng, inv_d);
    m.pos = Matrix(cfg.max_seq, cfg.d);
    m.pos.fill_uniform(rng, inv_d);
    m.w_img = Matrix(cfg.d_img, cfg.d);
    m.w_img.fill_uniform(rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_img)));
    m.blocks.resize(cfg.layers);
    for (auto& b : m.blocks) {
        for (Matrix* w : {&b.wq, &b.wk, &b.wv, &b.wo}) {
            *w = Matrix(cfg.d, cfg.d);
            w->fill_uniform(rng, inv_d);
        }
        b.ln1_g.assign(cfg.d, 1.0);
        b.ln1_b.assign(cfg.d, 0.0);
        b.ln2_g.assign(cfg.d, 1.0);
        b.ln2_b.assign(cfg.d, 0.0);
        b.w1 = Matrix(cfg.d, cfg.ff);
        b.w1.fill_uniform(rng, inv_d);
        b.b1.assign(cfg.ff, 0.0);
        b.w2 = Matrix(cfg.ff, cfg.d);
        b.w2.fill_uniform(rng, 1.0 / std::sqrt(static_cast<double>(cfg.ff)));
        b.b2.assign(cfg.d, 0.0);
    }
    m.lnf_g.assign(cfg.d, 1.0);
    m.lnf_b.assign(cfg.d, 0.0);
    m.kg = KgEncoderParams::init(cfg.d, cfg.d, mix64(cfg.seed, 0x6e77));
    return m;
}

void ToyFusionModel::validate() const {
    if (embed.rows() != vocab.size() || embed.cols() != cfg.d)
        throw DimensionMismatch("embed table shape");
    if (pos.rows() != cfg.max_seq || pos.cols() != cfg.d)
        throw DimensionMismatch("position table shape");
    if (w_img.rows() != cfg.d_img || w_img.cols() != cfg.d)
        throw DimensionMismatch("w_img shape");
    if (blocks.size() != cfg.layers) throw DimensionMismatch("block count");
    if (kg.d() != cfg.d) throw DimensionMismatch("kg encoder width vs fusion d");
}

Matrix embed_text(std::span<const uint32_t> tokens, const ToyFusionModel& model) {
    Matrix out(tokens.size(), model.cfg.d);
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= model.vocab.size())
            throw UnknownToken("token id " + std::to_string(tokens[i]) +
                               " out of vocabulary");
        const auto src = model.embed.row(tokens[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

Matrix project_image(const Matrix& patches, const ToyFusionModel& model) {
    if (patches.cols() != model.cfg.d_img && patches.rows() != 0)
        throw DimensionMismatch("patch width " + std::to_string(patches.cols()) +
                                " vs d_img " + std::to_string(model.cfg.d_img));
    if (patches.rows() == 0) return Matrix(0, model.cfg.d);
    return matmul(patches, model.w_img);
}

Matrix fuse(const Matrix& h_kg, const Matrix& h_img, const Matrix& h_lang) {
    const size_t d = std::max({h_kg.cols(), h_img.cols(), h_lang.cols()});
    for (const Matrix* m : {&h_kg, &h_img, &h_lang})
        if (m->rows() != 0 && m->cols() != d)
            throw DimensionMismatch("fuse: block widths differ");
    Matrix out(h_kg.rows() + h_img.rows() + h_lang.rows(), d);
    size_t r = 0;
    for (const Matrix* m : {&h_kg, &h_img, &h_lang})
        for (size_t i = 0; i < m->rows(); ++i, ++r) {
            const auto src = m->row(i);
            std::copy(src.begin(), src.end(), out.row(r).begin());
        }
    return out;
}

double decoder_nll(const ToyFusionModel& model, const QaInstance& instance) {
    check_reference(model, instance);
    const auto& y = instance.reference;
    std::vector<uint32_t> in_tokens;
    in_tokens.reserve(y.size());
    in_tokens.push_back(Vocab::kBos);
    in_tokens.insert(in_tokens.end(), y.begin(), y.end() - 1);

    Trace tr = run_forward(model, instance, in_tokens);
    double loss = 0.0;
    for (size_t t = 0; t < y.size(); ++t) {
        const auto probs = output_distribution(model, tr.lnf.row(tr.prefix + t));
        loss -= std::log(std::max(probs[y[t]], 1e-300));
    }
    return loss / static_cast<double>(y.size());
}

FusionGrads FusionGrads::zeros_like(const ToyFusionModel& m, size_t kg_nodes) {
    FusionGrads g;
    g.embed = Matrix(m.embed.rows(), m.embed.cols());
    g.pos = Matrix(m.pos.rows(), m.pos.cols());
    g.w_img = Matrix(m.w_img.rows(), m.w_img.cols());
    g.blocks.resize(m.blocks.size());
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        const auto& b = m.blocks[l];
        auto& gb = g.blocks[l];
        gb.wq = Matrix(b.wq.rows(), b.wq.cols());
        gb.wk = Matrix(b.wk.rows(), b.wk.cols());
        gb.wv = Matrix(b.wv.rows(), b.wv.cols());
        gb.wo = Matrix(b.wo.rows(), b.wo.cols());
        gb.ln1_g.assign(b.ln1_g.size(), 0.0);
        gb.ln1_b.assign(b.ln1_b.size(), 0.0);
        gb.ln2_g.assign(b.ln2_g.size(), 0.0);
        gb.ln2_b.assign(b.ln2_b.size(), 0.0);
        gb.w1 = Matrix(b.w1.rows(), b.w1.cols());
        gb.b1.assign(b.b1.size(), 0.0);
        gb.w2 = Matrix(b.w2.rows(), b.w2.cols());
        gb.b2.assign(b.b2.size(), 0.0);
    }
    g.lnf_g.assign(m.lnf_g.size(), 0.0);
    g.lnf_b.assign(m.lnf_b.size(), 0.0);
    g.kg = KgEncoderGrads::zeros_like(m.kg, kg_nodes);
    return g;
}

namespace {

void add_vec(std::vector<double>& dst, const std::vector<double>& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void scale_vec(std::vector<double>& v, double s) {
    for (double& x : v) x *= s;
}

} // namespace

void FusionGrads::accumulate(const FusionGrads& o) {
    embed += o.embed;
    pos += o.pos;
    w_img += o.w_img;
    for (size_t l = 0; l < blocks.size(); ++l) {
        blocks[l].wq += o.blocks[l].wq;
        blocks[l].wk += o.blocks[l].wk;
        blocks[l].wv += o.blocks[l].wv;
        blocks[l].wo += o.blocks[l].wo;
        add_vec(blocks[l].ln1_g, o.blocks[l].ln1_g);
        add_vec(blocks[l].ln1_b, o.blocks[l].ln1_b);
        add_vec(blocks[l].ln2_g, o.blocks[l].ln2_g);
        add_vec(blocks[l].ln2_b, o.blocks[l].ln2_b);
        blocks[l].w1 += o.blocks[l].w1;
        add_vec(blocks[l].b1, o.blocks[l].b1);
        blocks[l].w2 += o.blocks[l].w2;
        add_vec(blocks[l].b2, o.blocks[l].b2);
    }
    add_vec(lnf_g, o.lnf_g);
    add_vec(lnf_b, o.lnf_b);
    kg.relations += o.kg.relations;
    add_vec(kg.self_rel, o.kg.self_rel);
    kg.w_node += o.kg.w_node;
    kg.w_rel += o.kg.w_rel;
    add_vec(kg.attn, o.kg.attn);
    kg.gcn_w += o.kg.gcn_w;
}

void FusionGrads::scale(double s) {
    embed *= s;
    pos *= s;
    w_img *= s;
    for (auto& b : blocks) {
        b.wq *= s;
        b.wk *= s;
        b.wv *= s;
        b.wo *= s;
        scale_vec(b.ln1_g, s);
        scale_vec(b.ln1_b, s);
        scale_vec(b.ln2_g, s);
        scale_vec(b.ln2_b, s);
        b.w1 *= s;
        scale_vec(b.b1, s);
        b.w2 *= s;
        scale_vec(b.b2, s);
    }
    scale_vec(lnf_g, s);
    scale_vec(lnf_b, s);
    kg.relations *= s;
    scale_vec(kg.self_rel, s);
    kg.w_node *= s;
    kg.w_rel *= s;
    scale_vec(kg.attn, s);
    kg.gcn_w *= s;
}

double decoder_nll_backward(const ToyFusionModel& model, const QaInstance& instance,
                            FusionGrads& grads) {
    check_reference(model, instance);
    const auto& y = instance.reference;
    std::vector<uint32_t> in_tokens;
    in_tokens.reserve(y.size());
    in_tokens.push_back(Vocab::kBos);
    in_tokens.insert(in_tokens.end(), y.begin(), y.end() - 1);

    Trace tr = run_forward(model, instance, in_tokens);
    const size_t s = tr.s, d = model.cfg.d;
    const size_t heads = model.cfg.heads, dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double inv_t = 1.0 / static_cast<double>(y.size());

    // Output head (tied embeddings): loss -> lnf rows and embed rows.
    double loss = 0.0;
    Matrix dlnf(s, d);
    for (size_t t = 0; t < y.size(); ++t) {
        const size_t row = tr.prefix + t;
        auto probs = output_distribution(model, tr.lnf.row(row));
        loss -= std::log(std::max(probs[y[t]], 1e-300));
        probs[y[t]] -= 1.0;  // now dlogits * T
        auto drow = dlnf.row(row);
        for (uint32_t vtok = 0; vtok < model.vocab.size(); ++vtok) {
            const double gl = probs[vtok] * inv_t;
            if (gl == 0.0) continue;
            axpy(gl, model.embed.row(vtok), drow);
            axpy(gl, tr.lnf.row(row), grads.embed.row(vtok));
        }
    }
    loss *= inv_t;

    // Final layer norm.
    Matrix dx(s, d);
    layer_norm_backward(tr.blocks.back().x_out, model.lnf_g, tr.lnfc, dlnf, dx,
                        grads.lnf_g, grads.lnf_b);

    // Blocks in reverse.
    for (size_t li = model.blocks.size(); li-- > 0;) {
        const BlockParams& bp = model.blocks[li];
        BlockParams& gb = grads.blocks[li];
        const BlockTrace& bt = tr.blocks[li];

        // x_out = x_mid + gelu(ln2 W1 + b1) W2 + b2
        Matrix dh_act = matmul_bt(dx, bp.w2);
        gb.w2 += matmul_at(bt.h_act, dx);
        for (size_t i = 0; i < s; ++i) {
            const auto dr = dx.row(i);
            for (size_t c = 0; c < gb.b2.size(); ++c) gb.b2[c] += dr[c];
        }
        Matrix dh_pre = std::move(dh_act);
        for (size_t i = 0; i < s; ++i) {
            auto row = dh_pre.row(i);
            const auto pre = bt.h_pre.row(i);
            for (size_t c = 0; c < row.size(); ++c) row[c] *= gelu_grad(pre[c]);
        }
        gb.w1 += matmul_at(bt.ln2, dh_pre);
        for (size_t i = 0; i < s; ++i) {
            const auto dr = dh_pre.row(i);
            for (size_t c = 0; c < gb.b1.size(); ++c) gb.b1[c] += dr[c];
        }
        Matrix dln2 = matmul_bt(dh_pre, bp.w1);
        // dx currently carries d(x_out); the skip keeps it as d(x_mid), the
        // LN2 path adds to it.
        layer_norm_backward(bt.x_mid, bp.ln2_g, bt.ln2c, dln2, dx, gb.ln2_g, gb.ln2_b);

        // x_mid = x_in + ctx Wo
        Matrix dctx = matmul_bt(dx, bp.wo);
        gb.wo += matmul_at(bt.ctx, dx);

        Matrix dq(s, d), dk(s, d), dv(s, d);
        for (size_t h = 0; h < heads; ++h) {
            const size_t off = h * dh;
            const Matrix& w = bt.attn[h];
            for (size_t i = 0; i < s; ++i) {
                const size_t limit = allowed_limit(i, tr.prefix);
                const auto wrow = w.row(i);
                const auto dctx_i = dctx.row(i);
                // dw and softmax jacobian within the allowed range.
                double mix = 0.0;
                std::vector<double> dw(limit);
                for (size_t j = 0; j < limit; ++j) {
                    double acc = 0.0;
                    for (size_t c = 0; c < dh; ++c)
                        acc += dctx_i[off + c] * bt.v(j, off + c);
                    dw[j] = acc;
                    mix += wrow[j] * acc;
                    for (size_t c = 0; c < dh; ++c)
                        dv(j, off + c) += wrow[j] * dctx_i[off + c];
                }
                for (size_t j = 0; j < limit; ++j) {
                    const double ds = wrow[j] * (dw[j] - mix) * scale;
                    if (ds == 0.0) continue;
                    for (size_t c = 0; c < dh; ++c) {
                        dq(i, off + c) += ds * bt.k(j, off + c);
                        dk(j, off + c) += ds * bt.q(i, off + c);
                    }
                }
            }
        }
        gb.wq += matmul_at(bt.ln1, dq);
        gb.wk += matmul_at(bt.ln1, dk);
        gb.wv += matmul_at(bt.ln1, dv);
        Matrix dln1 = matmul_bt(dq, bp.wq);
        dln1 += matmul_bt(dk, bp.wk);
        dln1 += matmul_bt(dv, bp.wv);
        layer_norm_backward(bt.x_in, bp.ln1_g, bt.ln1c, dln1, dx, gb.ln1_g, gb.ln1_b);
    }

    // dx is now the gradient of x0 = [h_kg; h_img; h_lang; token rows] + pos.
    for (size_t i = 0; i < s; ++i) axpy(1.0, dx.row(i), grads.pos.row(i));

    const size_t p = tr.p, m = tr.m;
    if (p > 0) {
        Matrix dh_kg(p, d);
        for (size_t i = 0; i < p; ++i) {
            const auto src = dx.row(i);
            std::copy(src.begin(), src.end(), dh_kg.row(i).begin());
        }
        KgEncoderGrads kgg = kg_encode_backward(instance.subgraph, model.kg, dh_kg);
        grads.kg.relations += kgg.relations;
        add_vec(grads.kg.self_rel, kgg.self_rel);
        grads.kg.w_node += kgg.w_node;
        grads.kg.w_rel += kgg.w_rel;
        add_vec(grads.kg.attn, kgg.attn);
        grads.kg.gcn_w += kgg.gcn_w;
    }
    if (m > 0) {
        Matrix dh_img(m, d);
        for (size_t i = 0; i < m; ++i) {
            const auto src = dx.row(p + i);
            std::copy(src.begin(), src.end(), dh_img.row(i).begin());
        }
        grads.w_img += matmul_at(instance.image_patches, dh_img);
    }
    const std::vector<uint32_t> lang = instance.prompt_tokens(model.vocab);
    for (size_t i = 0; i < lang.size(); ++i)
        axpy(1.0, dx.row(p + m + i), grads.embed.row(lang[i]));
    for (size_t i = 0; i < tr.t; ++i)
        axpy(1.0, dx.row(tr.prefix + i), grads.embed.row(tr.in_tokens[i]));

    return loss;
}

GenerationResult generate(const ToyFusionModel& model, const QaInstance& instance,
                          uint32_t max_len) {
    GenerationResult res;
    std::vector<uint32_t> emitted;  // BOS + generated so far
    emitted.push_back(Vocab::kBos);
    std::vector<uint32_t> generated;
    for (uint32_t step = 0; step < max_len; ++step) {
        Trace tr = run_forward(model, instance, emitted);
        const auto probs = output_distribution(model, tr.lnf.row(tr.s - 1));
        uint32_t best = 0;
        for (uint32_t v = 1; v < probs.size(); ++v)
            if (probs[v] > probs[best]) best = v;  // ties keep the lowest id
        if (best == Vocab::kEos) {
            res.truncated = false;
            break;
        }
        generated.push_back(best);
        emitted.push_back(best);
        res.truncated = step + 1 == max_len;
        if (tr.s + 1 >= model.cfg.max_seq) {
            res.truncated = true;
            break;
        }
    }
    // Split at the first SEP.
    auto sep = std::find(generated.begin(), generated.end(), Vocab::kSep);
    if (sep == generated.end()) {
        res.rationale = generated;
        res.emitted_sep = false;
    } else {
        res.rationale.assign(generated.begin(), sep);
        res.answer.assign(sep + 1, generated.end());
        res.emitted_sep = true;
    }
    return res;
}

} // namespace kgf
