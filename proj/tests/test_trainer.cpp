// Tests for the planted QA dataset and the deterministic training loop:
// dataset structure and split discipline, serialization, the Adam/cosine/
// early-stopping contract, and exact-match validation accuracy.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <limits>
#include <vector>

#include "kgfusion/dataset.hpp"
#include "kgfusion/embed_index.hpp"
#include "kgfusion/errors.hpp"
#include "kgfusion/extract.hpp"
#include "kgfusion/kg_store.hpp"
#include "kgfusion/trainer.hpp"
#include "test_support.hpp"

using namespace kgf;

namespace {

struct PlantedFixture {
    SyntheticGraph sg;
    HashEmbeddingProvider provider;
    EmbeddingIndex idx;
    NodeEmbeddingTable tbl;

    explicit PlantedFixture(uint64_t seed) : provider(16, seed ^ 0x5eedull) {
        GraphGenConfig gc;
        gc.seed = seed;
        gc.n_concepts = 80;
        gc.n_relations = 5;
        gc.n_triples = 300;
        gc.answer_pool = 6;
        gc.planted_per_answer = 4;
        gc.planted_duplicates = 1;
        sg = generate_synthetic_graph(gc);
        idx = build_index(sg.graph, provider);
        tbl = build_node_table(sg.graph, idx);
    }
};

DatasetOptions small_opts() {
    DatasetOptions opts;
    opts.n_options = 3;
    opts.patch_rows = 2;
    opts.d_img = 8;
    opts.noise_fraction = 0.0;  // exact queries: retrieval is unambiguous
    opts.val_fact_fraction = 0.25;
    return opts;
}

QaDataset small_dataset(const PlantedFixture& fx, uint32_t n_train = 30,
                        uint32_t n_val = 10, uint64_t seed = 3) {
    return make_planted_dataset(seed, fx.sg, fx.provider, n_train, n_val, small_opts());
}

std::string dataset_bytes(const QaDataset& ds) {
    std::ostringstream os;
    save_dataset(ds, os);
    return os.str();
}

bool bits_equal(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (size_t i = 0; i < a.rows(); ++i)
        for (size_t c = 0; c < a.cols(); ++c)
            if (a(i, c) != b(i, c)) return false;
    return true;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a == b;
}

bool models_identical(const ToyFusionModel& a, const ToyFusionModel& b) {
    if (!bits_equal(a.embed, b.embed) || !bits_equal(a.pos, b.pos) ||
        !bits_equal(a.w_img, b.w_img))
        return false;
    if (a.blocks.size() != b.blocks.size()) return false;
    for (size_t l = 0; l < a.blocks.size(); ++l) {
        const auto& x = a.blocks[l];
        const auto& y = b.blocks[l];
        if (!bits_equal(x.wq, y.wq) || !bits_equal(x.wk, y.wk) ||
            !bits_equal(x.wv, y.wv) || !bits_equal(x.wo, y.wo) ||
            !bits_equal(x.w1, y.w1) || !bits_equal(x.w2, y.w2) ||
            !bits_equal(x.ln1_g, y.ln1_g) || !bits_equal(x.ln1_b, y.ln1_b) ||
            !bits_equal(x.ln2_g, y.ln2_g) || !bits_equal(x.ln2_b, y.ln2_b) ||
            !bits_equal(x.b1, y.b1) || !bits_equal(x.b2, y.b2))
            return false;
    }
    return bits_equal(a.lnf_g, b.lnf_g) && bits_equal(a.lnf_b, b.lnf_b) &&
           bits_equal(a.kg.relations, b.kg.relations) &&
           bits_equal(a.kg.self_rel, b.kg.self_rel) &&
           bits_equal(a.kg.w_node, b.kg.w_node) &&
           bits_equal(a.kg.w_rel, b.kg.w_rel) && bits_equal(a.kg.attn, b.kg.attn) &&
           bits_equal(a.kg.gcn_w, b.kg.gcn_w);
}

ToyFusionModel small_model(const Vocab& vocab, uint64_t seed = 11) {
    FusionConfig cfg;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.ff = 16;
    cfg.d_img = 8;
    cfg.max_seq = 64;
    cfg.seed = seed;
    return ToyFusionModel::init(cfg, vocab);
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset construction
// ---------------------------------------------------------------------------

TEST_CASE("dataset: instances carry the planted answer, options, and reference shape") {
    PlantedFixture fx(5);
    QaDataset ds = small_dataset(fx);

    REQUIRE(ds.train.size() == 30);
    REQUIRE(ds.val.size() == 10);
    REQUIRE(ds.train_gold.size() == 30);
    REQUIRE(ds.val_gold.size() == 10);

    std::set<std::string> ids;
    auto check_split = [&](const std::vector<QaInstance>& split,
                           const std::vector<uint32_t>& gold) {
        for (size_t i = 0; i < split.size(); ++i) {
            const QaInstance& inst = split[i];
            ids.insert(inst.id);
            // Question text is constant: no graph entity is nameable from it.
            CHECK(inst.question == "which concept does the probed entity reach");
            CHECK(inst.context.empty());
            CHECK(inst.options.size() == 3);
            CHECK(inst.image_patches.rows() == 2);
            CHECK(inst.image_patches.cols() == 8);
            CHECK(inst.query_vec.size() == 16);

            // The gold triple's subject is the answer concept; its label must
            // be an option and must be the reference's answer span.
            REQUIRE(gold[i] < fx.sg.graph.triple_count());
            const Triple& t = fx.sg.graph.triple(gold[i]);
            const std::string label = fx.sg.graph.concept_label(t.subject);
            CHECK(std::count(inst.options.begin(), inst.options.end(), label) == 1);

            REQUIRE(inst.reference.size() == 4);
            CHECK(ds.vocab.word(inst.reference[0]) == label);
            CHECK(inst.reference[1] == Vocab::kSep);
            CHECK(ds.vocab.word(inst.reference[2]) == label);
            CHECK(inst.reference[3] == Vocab::kEos);

            // The query vector points exactly at the gold triple (noise 0).
            std::vector<float> emb =
                fx.provider.embed_text(verbalize_triple(t, fx.sg.graph));
            REQUIRE(emb.size() == inst.query_vec.size());
            double dot = 0.0;
            for (size_t c = 0; c < emb.size(); ++c)
                dot += static_cast<double>(emb[c]) * inst.query_vec[c];
            CHECK(dot == doctest::Approx(1.0).epsilon(1e-6));
        }
    };
    check_split(ds.train, ds.train_gold);
    check_split(ds.val, ds.val_gold);
    CHECK(ids.size() == 40);  // unique instance ids across splits
}

TEST_CASE("dataset: train and validation probe disjoint subject entities") {
    PlantedFixture fx(7);
    QaDataset ds = small_dataset(fx, 60, 30, 9);

    std::set<uint32_t> train_entities, val_entities;
    for (uint32_t id : ds.train_gold) train_entities.insert(fx.sg.graph.triple(id).object);
    for (uint32_t id : ds.val_gold) val_entities.insert(fx.sg.graph.triple(id).object);

    std::vector<uint32_t> overlap;
    std::set_intersection(train_entities.begin(), train_entities.end(),
                          val_entities.begin(), val_entities.end(),
                          std::back_inserter(overlap));
    CHECK(overlap.empty());
    CHECK_FALSE(train_entities.empty());
    CHECK_FALSE(val_entities.empty());
}

TEST_CASE("dataset: generation is deterministic per seed") {
    PlantedFixture fx(5);
    const std::string a = dataset_bytes(small_dataset(fx, 20, 8, 3));
    const std::string b = dataset_bytes(small_dataset(fx, 20, 8, 3));
    const std::string c = dataset_bytes(small_dataset(fx, 20, 8, 4));
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("dataset: attach_subgraphs pins the gold triple under exact queries") {
    PlantedFixture fx(5);
    QaDataset ds = small_dataset(fx, 20, 8, 3);
    attach_subgraphs(ds, fx.idx, fx.sg.graph, fx.tbl, /*k=*/1);

    auto check_split = [&](const std::vector<QaInstance>& split,
                           const std::vector<uint32_t>& gold) {
        for (size_t i = 0; i < split.size(); ++i) {
            REQUIRE(split[i].subgraph.triple_ids.size() == 1);
            // Exact query: cosine 1.0 against the gold verbalization, ties on
            // identical text broken toward the smaller triple id, which is
            // the recorded gold copy.
            CHECK(split[i].subgraph.triple_ids[0] == gold[i]);
            CHECK(split[i].subgraph.nodes.size() == 2);
        }
    };
    check_split(ds.train, ds.train_gold);
    check_split(ds.val, ds.val_gold);

    strip_subgraphs(ds);
    for (const auto* split : {&ds.train, &ds.val})
        for (const auto& inst : *split) CHECK(inst.subgraph.empty());
}

TEST_CASE("dataset: JSON-lines serialization round-trips byte-identically") {
    PlantedFixture fx(5);
    QaDataset ds = small_dataset(fx, 12, 6, 3);
    const std::string first = dataset_bytes(ds);

    std::istringstream is(first);
    QaDataset loaded = load_dataset(is);
    const std::string second = dataset_bytes(loaded);
    CHECK(first == second);

    REQUIRE(loaded.train.size() == ds.train.size());
    REQUIRE(loaded.val.size() == ds.val.size());
    CHECK(loaded.train_gold == ds.train_gold);
    CHECK(loaded.val_gold == ds.val_gold);
    for (size_t i = 0; i < ds.train.size(); ++i) {
        CHECK(loaded.train[i].id == ds.train[i].id);
        CHECK(loaded.train[i].question == ds.train[i].question);
        CHECK(loaded.train[i].options == ds.train[i].options);
        CHECK(loaded.train[i].reference == ds.train[i].reference);
        CHECK(loaded.train[i].query_vec == ds.train[i].query_vec);
        CHECK(bits_equal(loaded.train[i].image_patches, ds.train[i].image_patches));
    }
    CHECK(loaded.vocab.words() == ds.vocab.words());
}

TEST_CASE("dataset: configuration guards") {
    PlantedFixture fx(5);
    DatasetOptions opts = small_opts();

    SUBCASE("unplanted graph") {
        SyntheticGraph plain = generate_synthetic_graph(1, 50, 4, 120);
        CHECK_THROWS_AS(make_planted_dataset(1, plain, fx.provider, 4, 2, opts),
                        InvalidConfig);
    }
    SUBCASE("empty split") {
        CHECK_THROWS_AS(make_planted_dataset(1, fx.sg, fx.provider, 0, 2, opts),
                        InvalidConfig);
        CHECK_THROWS_AS(make_planted_dataset(1, fx.sg, fx.provider, 4, 0, opts),
                        InvalidConfig);
    }
    SUBCASE("more options than distinct answers") {
        opts.n_options = 7;  // the graph plants 6 answers
        CHECK_THROWS_AS(make_planted_dataset(1, fx.sg, fx.provider, 4, 2, opts),
                        InvalidConfig);
    }
    SUBCASE("one planted subject per answer cannot split disjointly") {
        GraphGenConfig gc;
        gc.seed = 2;
        gc.n_concepts = 40;
        gc.n_relations = 4;
        gc.n_triples = 100;
        gc.answer_pool = 4;
        gc.planted_per_answer = 1;
        SyntheticGraph thin = generate_synthetic_graph(gc);
        CHECK_THROWS_AS(make_planted_dataset(1, thin, fx.provider, 4, 2, opts),
                        InvalidConfig);
    }
    SUBCASE("val_fact_fraction outside (0, 1)") {
        opts.val_fact_fraction = 0.0;
        CHECK_THROWS_AS(make_planted_dataset(1, fx.sg, fx.provider, 4, 2, opts),
                        InvalidConfig);
        opts.val_fact_fraction = 1.0;
        CHECK_THROWS_AS(make_planted_dataset(1, fx.sg, fx.provider, 4, 2, opts),
                        InvalidConfig);
    }
}

TEST_CASE("dataset: rebuild_vocab re-encodes references after text edits") {
    PlantedFixture fx(5);
    QaDataset ds = small_dataset(fx, 10, 4, 3);

    std::vector<std::string> before;
    for (uint32_t t : ds.train[0].reference) before.push_back(ds.vocab.word(t));

    ds.train[0].question += " zebra99";
    rebuild_vocab(ds);

    CHECK_NOTHROW(ds.vocab.id("zebra99"));
    std::vector<std::string> after;
    for (uint32_t t : ds.train[0].reference) after.push_back(ds.vocab.word(t));
    CHECK(after == before);
    // Every reference must be encodable under the new vocabulary.
    for (const auto* split : {&ds.train, &ds.val})
        for (const auto& inst : *split)
            for (uint32_t t : inst.reference) CHECK(t < ds.vocab.size());
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TEST_CASE("train: zero learning rate leaves every parameter bit-identical") {
    PlantedFixture fx(5);
    QaDataset ds = small_dataset(fx, 16, 6, 3);
    attach_subgraphs(ds, fx.idx, fx.sg.graph, fx.tbl, 1);

    ToyFusionModel model = small_model(ds.vocab);
    const ToyFusionModel before = model;

    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.max_epochs = 20;
    cfg.patience = 3;
    cfg.seed = 9;
    cfg.batch_size = 8;
    cfg.gen_max_len = 8;
    TrainLog log = train(model, ds, cfg);

    CHECK(models_identical(model, before));
    // Frozen validation accuracy: epoch 0 establishes the best, the next
    // `patience` epochs fail to improve, then training stops early.
    CHECK(log.epochs.size() == 1 + cfg.patience);
    CHECK(log.stopped_early);
    CHECK(log.best_epoch == 0);
    for (const auto& e : log.epochs) {
        CHECK(e.lr == 0.0);
        CHECK(e.val_acc == log.epochs[0].val_acc);
        // Identical parameters, but each epoch shuffles the batch order, so
        // the mean loss differs only by summation order.
        CHECK(e.train_loss ==
              doctest::Approx(log.epochs[0].train_loss).epsilon(1e-12));
    }
}

TEST_CASE("train: patience equal to max_epochs exhausts the budget without early stop") {
    PlantedFixture fx(5);
    QaDataset ds = small_dataset(fx, 12, 4, 3);
    attach_subgraphs(ds, fx.idx, fx.sg.graph, fx.tbl, 1);

    ToyFusionModel model = small_model(ds.vocab);
    TrainConfig cfg;
    cfg.learning_rate = 0.0;  // frozen validation curve
    cfg.max_epochs = 5;
    cfg.patience = 5;
    cfg.seed = 9;
    cfg.batch_size = 8;
    cfg.gen_max_len = 8;
    TrainLog log = train(model, ds, cfg);

    CHECK(log.epochs.size() == 5);
    CHECK_FALSE(log.stopped_early);
}

TEST_CASE("train: memorizes a small planted split and follows the cosine schedule") {
    PlantedFixture fx(5);
    QaDataset ds = small_dataset(fx, 30, 10, 3);
    attach_subgraphs(ds, fx.idx, fx.sg.graph, fx.tbl, 1);

    TrainConfig cfg;
    cfg.learning_rate = 2e-3;
    cfg.max_epochs = 12;
    cfg.patience = 12;  // disable early stopping for a fixed-length log
    cfg.seed = 4;
    cfg.batch_size = 8;
    cfg.gen_max_len = 8;

    ToyFusionModel model = small_model(ds.vocab);
    TrainLog log = train(model, ds, cfg);

    REQUIRE(log.epochs.size() == 12);
    for (size_t e = 0; e < log.epochs.size(); ++e) {
        CHECK(std::isfinite(log.epochs[e].train_loss));
        const double expect = cfg.learning_rate * 0.5 *
                              (1.0 + std::cos(std::numbers::pi * static_cast<double>(e) /
                                              static_cast<double>(cfg.max_epochs)));
        CHECK(log.epochs[e].lr == doctest::Approx(expect).epsilon(1e-12));
        CHECK(log.epochs[e].epoch == e);
    }
    CHECK(log.epochs.back().train_loss < 0.7 * log.epochs.front().train_loss);

    // The loop is deterministic: a fresh model and the same config reproduce
    // the log bit for bit and land on identical parameters.
    ToyFusionModel model2 = small_model(ds.vocab);
    TrainLog log2 = train(model2, ds, cfg);
    REQUIRE(log2.epochs.size() == log.epochs.size());
    for (size_t e = 0; e < log.epochs.size(); ++e) {
        CHECK(log2.epochs[e].train_loss == log.epochs[e].train_loss);
        CHECK(log2.epochs[e].val_acc == log.epochs[e].val_acc);
    }
    CHECK(models_identical(model, model2));
}

TEST_CASE("train: non-finite batch loss raises DivergedLoss") {
    // Layer norm and the probability clamp keep pure learning-rate blow-ups
    // finite; the diverged-loss guard catches non-finite values entering the
    // loss, e.g. through corrupted instance data.
    PlantedFixture fx(5);
    QaDataset ds = small_dataset(fx, 16, 4, 3);
    attach_subgraphs(ds, fx.idx, fx.sg.graph, fx.tbl, 1);
    for (auto& inst : ds.train)
        inst.image_patches(0, 0) = std::numeric_limits<double>::quiet_NaN();

    ToyFusionModel model = small_model(ds.vocab);
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.max_epochs = 4;
    cfg.patience = 4;
    cfg.seed = 4;
    cfg.batch_size = 8;
    cfg.gen_max_len = 8;
    CHECK_THROWS_AS(train(model, ds, cfg), DivergedLoss);
}

TEST_CASE("train: empty train split is rejected") {
    PlantedFixture fx(5);
    QaDataset ds = small_dataset(fx, 8, 4, 3);
    ds.train.clear();
    ds.train_gold.clear();
    ToyFusionModel model = small_model(ds.vocab);
    CHECK_THROWS_AS(train(model, ds, TrainConfig{}), InvalidConfig);
}

// ---------------------------------------------------------------------------
// Accuracy and config parsing
// ---------------------------------------------------------------------------

TEST_CASE("dataset_accuracy: exact match of the generated answer span") {
    // Engineered generator (see the fusion suite): blocks are identity maps,
    // position rows after the prefix force SEP, then "a", then EOS.
    FusionConfig cfg;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.ff = 8;
    cfg.d_img = 4;
    cfg.max_seq = 16;
    Vocab v;
    v.add("q");  // id 4
    v.add("a");  // id 5
    ToyFusionModel model = ToyFusionModel::init(cfg, v);
    for (Matrix* w : {&model.blocks[0].wq, &model.blocks[0].wk, &model.blocks[0].wv,
                      &model.blocks[0].wo, &model.blocks[0].w1, &model.blocks[0].w2,
                      &model.embed, &model.pos, &model.w_img})
        for (size_t i = 0; i < w->rows(); ++i)
            for (size_t c = 0; c < w->cols(); ++c) (*w)(i, c) = 0.0;
    for (auto* vec : {&model.blocks[0].ln1_g, &model.blocks[0].ln1_b,
                      &model.blocks[0].ln2_g, &model.blocks[0].ln2_b,
                      &model.blocks[0].b1, &model.blocks[0].b2, &model.lnf_b})
        std::fill(vec->begin(), vec->end(), 0.0);
    std::fill(model.lnf_g.begin(), model.lnf_g.end(), 1.0);

    auto walsh = [](int which, size_t c) {
        const int bit = which == 1 ? (c & 1) : which == 2 ? ((c >> 1) & 1) : ((c >> 2) & 1);
        return bit ? -1.0 : 1.0;
    };
    for (size_t c = 0; c < 8; ++c) {
        model.embed(Vocab::kSep, c) = 1e-6 * walsh(1, c);
        model.embed(5, c) = 1e-6 * walsh(2, c);
        model.embed(Vocab::kEos, c) = 1e-6 * walsh(3, c);
        model.pos(1, c) = 4.0 * walsh(1, c);
        model.pos(2, c) = 4.0 * walsh(2, c);
        model.pos(3, c) = 4.0 * walsh(3, c);
    }

    QaInstance hit;
    hit.id = "hit";
    hit.question = "q";
    hit.reference = {5, Vocab::kSep, 5, Vocab::kEos};  // answer span ["a"]

    QaInstance miss = hit;
    miss.id = "miss";
    miss.reference = {5, Vocab::kSep, 4, Vocab::kEos};  // expects "q" instead

    CHECK(dataset_accuracy(model, {hit}, 8) == 1.0);
    CHECK(dataset_accuracy(model, {miss}, 8) == 0.0);
    CHECK(dataset_accuracy(model, {hit, miss}, 8) == 0.5);
    CHECK(dataset_accuracy(model, {}, 8) == 0.0);
}

TEST_CASE("parse_train_config: key=value lines with comments") {
    std::istringstream is(
        "# training configuration\n"
        "learning_rate = 0.001\n"
        "\n"
        "max_epochs = 10  # capped\n"
        "patience=2\n"
        "seed = 17\n"
        "batch_size = 4\n"
        "gen_max_len = 12\n");
    TrainConfig cfg = parse_train_config(is);
    CHECK(cfg.learning_rate == 0.001);
    CHECK(cfg.max_epochs == 10);
    CHECK(cfg.patience == 2);
    CHECK(cfg.seed == 17);
    CHECK(cfg.batch_size == 4);
    CHECK(cfg.gen_max_len == 12);
}

TEST_CASE("parse_train_config: rejects malformed input") {
    SUBCASE("unknown key") {
        std::istringstream is("momentum = 0.9\n");
        CHECK_THROWS_AS(parse_train_config(is), InvalidConfig);
    }
    SUBCASE("bad value") {
        std::istringstream is("learning_rate = fast\n");
        CHECK_THROWS_AS(parse_train_config(is), InvalidConfig);
    }
    SUBCASE("missing equals") {
        std::istringstream is("learning_rate 0.1\n");
        CHECK_THROWS_AS(parse_train_config(is), InvalidConfig);
    }
    SUBCASE("patience above max_epochs fails validation") {
        std::istringstream is("max_epochs = 5\npatience = 6\n");
        CHECK_THROWS_AS(parse_train_config(is), InvalidConfig);
    }
    SUBCASE("direct validate guards") {
        TrainConfig cfg;
        cfg.patience = 0;
        CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
        cfg = TrainConfig{};
        cfg.learning_rate = -1.0;
        CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
        cfg = TrainConfig{};
        cfg.batch_size = 0;
        CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
    }
}

TEST_CASE("write_training_csv: one row per epoch with the logged values") {
    TrainLog log;
    log.epochs.push_back({0, 2.5, 0.25, 1e-3});
    log.epochs.push_back({1, 1.25, 0.5, 5e-4});
    std::ostringstream os;
    write_training_csv(log, os);

    std::istringstream is(os.str());
    std::string line;
    REQUIRE(std::getline(is, line));
    CHECK(line == "epoch,train_loss,val_acc,lr");
    size_t rows = 0;
    while (std::getline(is, line)) {
        std::istringstream row(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(row, cell, ',')) cells.push_back(cell);
        REQUIRE(cells.size() == 4);
        CHECK(std::stoul(cells[0]) == rows);
        CHECK(std::stod(cells[1]) == log.epochs[rows].train_loss);
        CHECK(std::stod(cells[2]) == log.epochs[rows].val_acc);
        CHECK(std::stod(cells[3]) == log.epochs[rows].lr);
        ++rows;
    }
    CHECK(rows == 2);
}
