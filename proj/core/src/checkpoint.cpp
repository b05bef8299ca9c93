#include "kgfusion/checkpoint.hpp"

#include "kgfusion/binio.hpp"
#include "kgfusion/errors.hpp"

#include <cstdint>
#include <vector>

namespace kgf {

namespace {

void write_tensor(std::ostream& os, const Matrix& m) {
    write_pod(os, static_cast<uint32_t>(m.rows()));
    write_pod(os, static_cast<uint32_t>(m.cols()));
    write_doubles(os, m.data(), m.rows() * m.cols());
}

void write_tensor(std::ostream& os, const std::vector<double>& v) {
    write_pod(os, uint32_t{1});
    write_pod(os, static_cast<uint32_t>(v.size()));
    write_doubles(os, v.data(), v.size());
}

Matrix read_tensor(std::istream& is, size_t rows, size_t cols, const char* what) {
    const auto r = read_pod<uint32_t>(is);
    const auto c = read_pod<uint32_t>(is);
    if (r != rows || c != cols)
        throw FormatError(std::string("checkpoint tensor '") + what + "' has shape " +
                          std::to_string(r) + "x" + std::to_string(c) + ", expected " +
                          std::to_string(rows) + "x" + std::to_string(cols));
    Matrix m(rows, cols);
    read_doubles(is, m.data(), rows * cols);
    return m;
}

std::vector<double> read_vector(std::istream& is, size_t n, const char* what) {
    Matrix m = read_tensor(is, 1, n, what);
    return std::vector<double>(m.data(), m.data() + n);
}

} // namespace

void save_checkpoint(const ToyFusionModel& model, std::ostream& os) {
    model.validate();
    write_magic(os, "KGP1");
    write_pod(os, model.cfg.d);
    write_pod(os, model.cfg.heads);
    write_pod(os, model.cfg.layers);
    write_pod(os, model.cfg.ff);
    write_pod(os, model.cfg.d_img);
    write_pod(os, model.cfg.max_seq);
    write_pod(os, model.cfg.seed);
    write_pod(os, model.vocab.size());
    for (uint32_t i = 0; i < model.vocab.size(); ++i)
        write_string(os, model.vocab.word(i));
    write_tensor(os, model.embed);
    write_tensor(os, model.pos);
    write_tensor(os, model.w_img);
    for (const auto& b : model.blocks) {
        write_tensor(os, b.wq);
        write_tensor(os, b.wk);
        write_tensor(os, b.wv);
        write_tensor(os, b.wo);
        write_tensor(os, b.ln1_g);
        write_tensor(os, b.ln1_b);
        write_tensor(os, b.ln2_g);
        write_tensor(os, b.ln2_b);
        write_tensor(os, b.w1);
        write_tensor(os, b.b1);
        write_tensor(os, b.w2);
        write_tensor(os, b.b2);
    }
    write_tensor(os, model.lnf_g);
    write_tensor(os, model.lnf_b);
    write_tensor(os, model.kg.relations);
    write_tensor(os, model.kg.self_rel);
    write_tensor(os, model.kg.w_node);
    write_tensor(os, model.kg.w_rel);
    write_tensor(os, model.kg.attn);
    write_tensor(os, model.kg.gcn_w);
    write_pod(os, model.kg.leaky_slope);
    if (!os) throw FormatError("failed to write checkpoint stream");
}

ToyFusionModel load_checkpoint(std::istream& is) {
    expect_magic(is, "KGP1");
    FusionConfig cfg;
    cfg.d = read_pod<uint32_t>(is);
    cfg.heads = read_pod<uint32_t>(is);
    cfg.layers = read_pod<uint32_t>(is);
    cfg.ff = read_pod<uint32_t>(is);
    cfg.d_img = read_pod<uint32_t>(is);
    cfg.max_seq = read_pod<uint32_t>(is);
    cfg.seed = read_pod<uint64_t>(is);

    const auto vocab_count = read_pod<uint32_t>(is);
    if (vocab_count < Vocab::kReservedCount)
        throw FormatError("checkpoint vocabulary smaller than the reserved tokens");
    Vocab vocab;
    for (uint32_t i = 0; i < vocab_count; ++i) {
        const std::string w = read_string(is);
        if (i < Vocab::kReservedCount) {
            if (w != vocab.word(i))
                throw FormatError("checkpoint reserved token mismatch at id " +
                                  std::to_string(i));
        } else if (vocab.add(w) != i) {
            throw FormatError("duplicate vocabulary word '" + w + "' in checkpoint");
        }
    }

    ToyFusionModel m;
    m.cfg = cfg;
    m.vocab = std::move(vocab);
    m.embed = read_tensor(is, vocab_count, cfg.d, "embed");
    m.pos = read_tensor(is, cfg.max_seq, cfg.d, "pos");
    m.w_img = read_tensor(is, cfg.d_img, cfg.d, "w_img");
    m.blocks.resize(cfg.layers);
    for (auto& b : m.blocks) {
        b.wq = read_tensor(is, cfg.d, cfg.d, "wq");
        b.wk = read_tensor(is, cfg.d, cfg.d, "wk");
        b.wv = read_tensor(is, cfg.d, cfg.d, "wv");
        b.wo = read_tensor(is, cfg.d, cfg.d, "wo");
        b.ln1_g = read_vector(is, cfg.d, "ln1_g");
        b.ln1_b = read_vector(is, cfg.d, "ln1_b");
        b.ln2_g = read_vector(is, cfg.d, "ln2_g");
        b.ln2_b = read_vector(is, cfg.d, "ln2_b");
        b.w1 = read_tensor(is, cfg.d, cfg.ff, "w1");
        b.b1 = read_vector(is, cfg.ff, "b1");
        b.w2 = read_tensor(is, cfg.ff, cfg.d, "w2");
        b.b2 = read_vector(is, cfg.d, "b2");
    }
    m.lnf_g = read_vector(is, cfg.d, "lnf_g");
    m.lnf_b = read_vector(is, cfg.d, "lnf_b");

    // KG encoder shapes: the relations tensor carries capacity and feature
    // width, w_rel carries the attention projection width.
    const auto rel_rows = read_pod<uint32_t>(is);
    const auto rel_cols = read_pod<uint32_t>(is);
    m.kg.relations = Matrix(rel_rows, rel_cols);
    read_doubles(is, m.kg.relations.data(), size_t{rel_rows} * rel_cols);
    m.kg.self_rel = read_vector(is, rel_cols, "kg.self_rel");
    m.kg.w_node = read_tensor(is, cfg.d, cfg.d, "kg.w_node");
    const auto wr_rows = read_pod<uint32_t>(is);
    const auto wr_cols = read_pod<uint32_t>(is);
    if (wr_rows != rel_cols)
        throw FormatError("checkpoint tensor 'kg.w_rel' row count disagrees with "
                          "relation feature width");
    m.kg.w_rel = Matrix(wr_rows, wr_cols);
    read_doubles(is, m.kg.w_rel.data(), size_t{wr_rows} * wr_cols);
    m.kg.attn = read_vector(is, 2 * size_t{cfg.d} + wr_cols, "kg.attn");
    m.kg.gcn_w = read_tensor(is, cfg.d, cfg.d, "kg.gcn_w");
    m.kg.leaky_slope = read_pod<double>(is);

    m.validate();
    m.kg.validate();
    return m;
}

void save_checkpoint_file(const ToyFusionModel& model, const std::string& path) {
    auto os = open_out(path);
    save_checkpoint(model, os);
}

ToyFusionModel load_checkpoint_file(const std::string& path) {
    auto is = open_in(path);
    return load_checkpoint(is);
}

} // namespace kgf
