// Command-line front end: graph/workload/dataset generation, embedding index
// construction, sub-graph extraction, training, evaluation, and the extractor
// benchmark. Inputs and outputs are the documented on-disk formats (KGF1,
// EMB1, KGP1, JSON-lines, CSV).

#include <CLI11.hpp>
#include <json.hpp>

#include "kgfusion/binio.hpp"
#include "kgfusion/checkpoint.hpp"
#include "kgfusion/dataset.hpp"
#include "kgfusion/embed_index.hpp"
#include "kgfusion/errors.hpp"
#include "kgfusion/eval.hpp"
#include "kgfusion/extract.hpp"
#include "kgfusion/kg_store.hpp"
#include "kgfusion/trainer.hpp"

#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

namespace {

using nlohmann::json;
using namespace kgf;

void save_planted(const std::vector<PlantedFact>& planted, const std::string& path) {
    json j = json::array();
    for (const auto& f : planted)
        j.push_back({{"triple_id", f.triple_id},
                     {"subject", f.subject},
                     {"relation", f.relation},
                     {"answer", f.answer}});
    auto os = open_out(path);
    os << json{{"planted", j}}.dump() << '\n';
}

std::vector<PlantedFact> load_planted(const std::string& path) {
    auto is = open_in(path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    std::vector<PlantedFact> out;
    for (const auto& f : j.at("planted")) {
        PlantedFact p;
        p.triple_id = f.at("triple_id").get<uint32_t>();
        p.subject = f.at("subject").get<uint32_t>();
        p.relation = f.at("relation").get<uint32_t>();
        p.answer = f.at("answer").get<uint32_t>();
        out.push_back(p);
    }
    return out;
}

void save_workload(const std::vector<WorkloadQuery>& ws, const std::string& path) {
    auto os = open_out(path);
    for (const auto& q : ws) {
        json j;
        j["id"] = q.id;
        j["question"] = q.question;
        j["answer"] = q.answer_text;
        j["query_b64"] = base64_of_floats(q.query_vec);
        os << j.dump() << '\n';
    }
}

std::vector<WorkloadQuery> load_workload(const std::string& path) {
    auto is = open_in(path);
    std::vector<WorkloadQuery> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            WorkloadQuery q;
            q.id = j.at("id").get<std::string>();
            q.question = j.at("question").get<std::string>();
            q.answer_text = j.at("answer").get<std::string>();
            q.query_vec = floats_of_base64(j.at("query_b64").get<std::string>());
            out.push_back(std::move(q));
        } catch (const json::exception& e) {
            throw FormatError(path + " line " + std::to_string(line_no) + ": " +
                              e.what());
        }
    }
    return out;
}

json subgraph_to_json(const Subgraph& sg, const ExtractionReport& rep,
                      const KnowledgeGraph& g) {
    json j;
    j["query_id"] = sg.query_id;
    j["method"] = rep.method;
    j["wall_ms"] = rep.wall_clock_ms;
    json nodes = json::array();
    for (uint32_t c : sg.nodes) nodes.push_back(g.concept_label(c));
    j["nodes"] = nodes;
    j["triple_ids"] = sg.triple_ids;
    j["triple_texts"] = sg.triple_texts;
    j["scores"] = sg.scores;
    return j;
}

struct ProviderFlags {
    uint32_t dim = 64;
    uint64_t seed = 1;
    std::string file;  // EMB1-keyed provider instead of the hash provider

    std::unique_ptr<EmbeddingProvider> make() const {
        if (!file.empty()) return std::make_unique<FileEmbeddingProvider>(file);
        return std::make_unique<HashEmbeddingProvider>(dim, seed);
    }

    void attach(CLI::App* cmd) {
        cmd->add_option("--dim", dim, "hash embedding width")->capture_default_str();
        cmd->add_option("--embed-seed", seed, "hash embedding seed")
            ->capture_default_str();
        cmd->add_option("--provider-file", file,
                        "EMB1 file of per-text embeddings (overrides the hash provider)");
    }
};

int run(int argc, char** argv) {
    CLI::App app{"knowledge-graph retrieval, fusion training, and evaluation"};
    app.require_subcommand(1);

    // ---------------------------------------------------------------- gen-graph
    auto* gen_graph = app.add_subcommand("gen-graph", "generate a synthetic graph");
    GraphGenConfig gg;
    std::string gg_out, gg_planted_out;
    gen_graph->add_option("--seed", gg.seed)->capture_default_str();
    gen_graph->add_option("--concepts", gg.n_concepts)->capture_default_str();
    gen_graph->add_option("--relations", gg.n_relations)->capture_default_str();
    gen_graph->add_option("--triples", gg.n_triples)->capture_default_str();
    gen_graph->add_option("--answers", gg.answer_pool)->capture_default_str();
    gen_graph->add_option("--per-answer", gg.planted_per_answer)->capture_default_str();
    gen_graph->add_option("--duplicates", gg.planted_duplicates)->capture_default_str();
    gen_graph->add_option("--zipf", gg.zipf_exponent)->capture_default_str();
    gen_graph->add_option("--out", gg_out, "KGF1 snapshot path")->required();
    gen_graph->add_option("--planted-out", gg_planted_out,
                          "JSON sidecar recording planted facts");
    gen_graph->callback([&] {
        const SyntheticGraph sg = generate_synthetic_graph(gg);
        sg.graph.save_file(gg_out);
        if (!gg_planted_out.empty()) save_planted(sg.planted, gg_planted_out);
        std::cout << "graph: " << sg.graph.concept_count() << " concepts, "
                  << sg.graph.triple_count() << " triples, " << sg.planted.size()
                  << " planted facts\n";
    });

    // -------------------------------------------------------------------- embed
    auto* embed = app.add_subcommand("embed", "build the triple embedding index");
    std::string em_graph, em_out;
    ProviderFlags em_provider;
    embed->add_option("--graph", em_graph)->required();
    embed->add_option("--out", em_out, "EMB1 index path")->required();
    em_provider.attach(embed);
    embed->callback([&] {
        const KnowledgeGraph g = KnowledgeGraph::load_file(em_graph);
        const auto provider = em_provider.make();
        const EmbeddingIndex idx = build_index(g, *provider);
        idx.save_file(em_out);
        std::cout << "index: " << idx.row_count() << " rows, dim " << idx.dim()
                  << "\n";
    });

    // ------------------------------------------------------------- gen-workload
    auto* gen_wl = app.add_subcommand("gen-workload",
                                      "planted-relevance retrieval workload");
    std::string wl_graph, wl_planted, wl_out;
    ProviderFlags wl_provider;
    WorkloadConfig wl_cfg;
    gen_wl->add_option("--graph", wl_graph)->required();
    gen_wl->add_option("--planted", wl_planted, "planted-fact sidecar")->required();
    gen_wl->add_option("--queries", wl_cfg.n_queries)->capture_default_str();
    gen_wl->add_option("--grounded", wl_cfg.grounded_per_question)
        ->capture_default_str();
    gen_wl->add_option("--noise", wl_cfg.noise_fraction)->capture_default_str();
    gen_wl->add_option("--seed", wl_cfg.seed)->capture_default_str();
    gen_wl->add_option("--out", wl_out)->required();
    wl_provider.attach(gen_wl);
    gen_wl->callback([&] {
        SyntheticGraph sg;
        sg.graph = KnowledgeGraph::load_file(wl_graph);
        sg.planted = load_planted(wl_planted);
        const auto provider = wl_provider.make();
        const auto ws = make_relevance_workload(sg, *provider, wl_cfg);
        save_workload(ws, wl_out);
        std::cout << "workload: " << ws.size() << " queries\n";
    });

    // ------------------------------------------------------------------ extract
    auto* extract = app.add_subcommand("extract", "extract sub-graphs for queries");
    std::string ex_graph, ex_emb, ex_queries, ex_out, ex_method = "proposed";
    uint32_t ex_k = 200, ex_cap = kDefaultNodeCap;
    extract->add_option("--graph", ex_graph)->required();
    extract->add_option("--embeddings", ex_emb, "EMB1 index")->required();
    extract->add_option("--query-file", ex_queries, "workload JSON-lines")->required();
    extract->add_option("--k", ex_k)->capture_default_str();
    extract->add_option("--node-cap", ex_cap)->capture_default_str();
    extract->add_option("--method", ex_method, "proposed|baseline")
        ->check(CLI::IsMember({"proposed", "baseline"}))
        ->capture_default_str();
    extract->add_option("--out", ex_out, "sub-graph JSON-lines")->required();
    extract->callback([&] {
        const KnowledgeGraph g = KnowledgeGraph::load_file(ex_graph);
        const EmbeddingIndex idx = EmbeddingIndex::load_file(ex_emb);
        const NodeEmbeddingTable nodes = build_node_table(g, idx);
        const auto queries = load_workload(ex_queries);
        auto os = open_out(ex_out);
        for (const auto& q : queries) {
            ExtractResult r = ex_method == "proposed"
                                  ? extract_topk(q.query_vec, idx, g, nodes, ex_k, ex_cap)
                                  : extract_baseline(q.question, q.query_vec, g, nodes,
                                                     ex_cap);
            r.subgraph.query_id = q.id;
            os << subgraph_to_json(r.subgraph, r.report, g).dump() << '\n';
        }
        std::cout << "extracted " << queries.size() << " sub-graphs -> " << ex_out
                  << "\n";
    });

    // -------------------------------------------------------------- gen-dataset
    auto* gen_ds = app.add_subcommand("gen-dataset", "planted QA dataset");
    std::string ds_graph, ds_planted, ds_out;
    ProviderFlags ds_provider;
    uint64_t ds_seed = 1;
    uint32_t ds_train = 2000, ds_val = 500;
    DatasetOptions ds_opts;
    gen_ds->add_option("--graph", ds_graph)->required();
    gen_ds->add_option("--planted", ds_planted)->required();
    gen_ds->add_option("--seed", ds_seed)->capture_default_str();
    gen_ds->add_option("--train", ds_train)->capture_default_str();
    gen_ds->add_option("--val", ds_val)->capture_default_str();
    gen_ds->add_option("--options", ds_opts.n_options)->capture_default_str();
    gen_ds->add_option("--patches", ds_opts.patch_rows)->capture_default_str();
    gen_ds->add_option("--d-img", ds_opts.d_img)->capture_default_str();
    gen_ds->add_option("--noise", ds_opts.noise_fraction)->capture_default_str();
    gen_ds->add_option("--out", ds_out)->required();
    ds_provider.attach(gen_ds);
    gen_ds->callback([&] {
        SyntheticGraph sg;
        sg.graph = KnowledgeGraph::load_file(ds_graph);
        sg.planted = load_planted(ds_planted);
        const auto provider = ds_provider.make();
        const QaDataset ds =
            make_planted_dataset(ds_seed, sg, *provider, ds_train, ds_val, ds_opts);
        save_dataset_file(ds, ds_out);
        std::cout << "dataset: " << ds.train.size() << " train / " << ds.val.size()
                  << " val, vocab " << ds.vocab.size() << "\n";
    });

    // -------------------------------------------------------------------- train
    auto* train_cmd = app.add_subcommand("train", "train the fusion model");
    std::string tr_graph, tr_emb, tr_dataset, tr_config, tr_ckpt, tr_log;
    uint32_t tr_k = 4, tr_cap = kDefaultNodeCap;
    bool tr_no_kg = false;
    FusionConfig tr_fusion;
    tr_fusion.d = 0;  // 0 = match the embedding width
    train_cmd->add_option("--graph", tr_graph)->required();
    train_cmd->add_option("--embeddings", tr_emb)->required();
    train_cmd->add_option("--dataset", tr_dataset)->required();
    train_cmd->add_option("--config", tr_config, "key=value training config");
    train_cmd->add_option("--checkpoint-out", tr_ckpt, "KGP1 path")->required();
    train_cmd->add_option("--log-out", tr_log, "training log CSV (default stdout)");
    train_cmd->add_option("--k", tr_k, "triples per sub-graph")->capture_default_str();
    train_cmd->add_option("--node-cap", tr_cap)->capture_default_str();
    train_cmd->add_flag("--no-kg", tr_no_kg, "train without KG sub-graphs");
    train_cmd->add_option("--fusion-d", tr_fusion.d,
                          "model width (default: embedding width)");
    train_cmd->add_option("--heads", tr_fusion.heads)->capture_default_str();
    train_cmd->add_option("--layers", tr_fusion.layers)->capture_default_str();
    train_cmd->add_option("--ff", tr_fusion.ff)->capture_default_str();
    train_cmd->add_option("--d-img", tr_fusion.d_img)->capture_default_str();
    train_cmd->add_option("--max-seq", tr_fusion.max_seq)->capture_default_str();
    train_cmd->add_option("--model-seed", tr_fusion.seed)->capture_default_str();
    train_cmd->callback([&] {
        const KnowledgeGraph g = KnowledgeGraph::load_file(tr_graph);
        const EmbeddingIndex idx = EmbeddingIndex::load_file(tr_emb);
        QaDataset ds = load_dataset_file(tr_dataset);
        if (tr_fusion.d == 0) tr_fusion.d = idx.dim();
        if (tr_no_kg) {
            strip_subgraphs(ds);
        } else {
            const NodeEmbeddingTable nodes = build_node_table(g, idx);
            attach_subgraphs(ds, idx, g, nodes, tr_k, tr_cap);
        }
        TrainConfig tcfg;
        if (!tr_config.empty()) tcfg = parse_train_config_file(tr_config);
        ToyFusionModel model = ToyFusionModel::init(tr_fusion, ds.vocab);
        const TrainLog log = train(model, ds, tcfg);
        save_checkpoint_file(model, tr_ckpt);
        if (tr_log.empty()) {
            write_training_csv(log, std::cout);
        } else {
            auto os = open_out(tr_log);
            write_training_csv(log, os);
        }
        std::cerr << "best val_acc " << log.best_val_acc << " at epoch "
                  << log.best_epoch << (log.stopped_early ? " (early stop)" : "")
                  << "\n";
    });

    // --------------------------------------------------------------------- eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluation reports");
    std::string ev_mode, ev_in, ev_queries, ev_out, ev_graph, ev_planted, ev_emb,
        ev_dataset, ev_config, ev_ks = "1,5,25,100", ev_caps = "10,50,200";
    uint32_t ev_k = 4, ev_cap = kDefaultNodeCap;
    ProviderFlags ev_provider;
    FusionConfig ev_fusion;
    ev_fusion.d = 0;
    eval_cmd->add_option("--mode", ev_mode, "proximity|curve|ablation|contrast")
        ->required()
        ->check(CLI::IsMember({"proximity", "curve", "ablation", "contrast"}));
    eval_cmd->add_option("--in", ev_in, "extracted sub-graphs JSON-lines (proximity)");
    eval_cmd->add_option("--queries", ev_queries, "workload JSON-lines");
    eval_cmd->add_option("--graph", ev_graph);
    eval_cmd->add_option("--planted", ev_planted);
    eval_cmd->add_option("--embeddings", ev_emb);
    eval_cmd->add_option("--dataset", ev_dataset);
    eval_cmd->add_option("--config", ev_config, "key=value training config");
    eval_cmd->add_option("--ks", ev_ks, "comma-separated k grid (curve)")
        ->capture_default_str();
    eval_cmd->add_option("--caps", ev_caps, "comma-separated node caps (ablation)")
        ->capture_default_str();
    eval_cmd->add_option("--k", ev_k, "triples per sub-graph")->capture_default_str();
    eval_cmd->add_option("--node-cap", ev_cap)->capture_default_str();
    eval_cmd->add_option("--out", ev_out, "report CSV")->required();
    ev_provider.attach(eval_cmd);
    eval_cmd->callback([&] {
        auto need = [](const std::string& v, const char* flag) {
            if (v.empty())
                throw CLI::ValidationError(std::string("--") + flag +
                                           " is required for this mode");
        };
        auto parse_list = [](const std::string& text) {
            std::vector<uint32_t> out;
            std::stringstream ss(text);
            std::string cell;
            while (std::getline(ss, cell, ','))
                out.push_back(static_cast<uint32_t>(std::stoul(cell)));
            return out;
        };
        auto os = open_out(ev_out);
        if (ev_mode == "proximity") {
            need(ev_in, "in");
            need(ev_queries, "queries");
            const auto queries = load_workload(ev_queries);
            std::vector<Subgraph> subs;
            std::vector<std::string> answers;
            std::unordered_map<std::string, const WorkloadQuery*> by_id;
            for (const auto& q : queries) by_id[q.id] = &q;
            auto is = open_in(ev_in);
            std::string line;
            while (std::getline(is, line)) {
                if (line.empty()) continue;
                const json j = json::parse(line);
                Subgraph sg;
                sg.query_id = j.at("query_id").get<std::string>();
                sg.triple_texts = j.at("triple_texts").get<std::vector<std::string>>();
                auto it = by_id.find(sg.query_id);
                if (it == by_id.end())
                    throw FormatError("sub-graph query id " + sg.query_id +
                                      " missing from the workload");
                answers.push_back(it->second->answer_text);
                subs.push_back(std::move(sg));
            }
            const auto provider = ev_provider.make();
            proximity_to_csv(proximity(subs, answers, *provider), os);
        } else if (ev_mode == "curve") {
            need(ev_queries, "queries");
            need(ev_emb, "embeddings");
            const auto queries = load_workload(ev_queries);
            const EmbeddingIndex idx = EmbeddingIndex::load_file(ev_emb);
            const auto provider = ev_provider.make();
            curve_to_csv(similarity_curve(queries, idx, *provider, parse_list(ev_ks)),
                         os);
        } else if (ev_mode == "ablation") {
            need(ev_graph, "graph");
            need(ev_emb, "embeddings");
            need(ev_dataset, "dataset");
            const KnowledgeGraph g = KnowledgeGraph::load_file(ev_graph);
            const EmbeddingIndex idx = EmbeddingIndex::load_file(ev_emb);
            const NodeEmbeddingTable nodes = build_node_table(g, idx);
            const QaDataset ds = load_dataset_file(ev_dataset);
            AblationContext ctx;
            ctx.idx = &idx;
            ctx.graph = &g;
            ctx.nodes = &nodes;
            ctx.dataset = &ds;
            ctx.extract_k = ev_k;
            ev_fusion.d = idx.dim();
            ctx.fusion = ev_fusion;
            if (!ev_config.empty()) ctx.training = parse_train_config_file(ev_config);
            curve_to_csv(node_cap_ablation(parse_list(ev_caps), ctx), os);
        } else {  // contrast
            need(ev_graph, "graph");
            need(ev_emb, "embeddings");
            need(ev_dataset, "dataset");
            const KnowledgeGraph g = KnowledgeGraph::load_file(ev_graph);
            const EmbeddingIndex idx = EmbeddingIndex::load_file(ev_emb);
            const NodeEmbeddingTable nodes = build_node_table(g, idx);
            QaDataset ds = load_dataset_file(ev_dataset);
            attach_subgraphs(ds, idx, g, nodes, ev_k, ev_cap);
            ev_fusion.d = idx.dim();
            TrainConfig tcfg;
            if (!ev_config.empty()) tcfg = parse_train_config_file(ev_config);
            const ContrastReport report = knowledge_contrast(ds, ev_fusion, tcfg);
            contrast_to_csv(report, os);
            std::cerr << "no_kg " << report.no_kg_acc << "  with_kg "
                      << report.with_kg_acc << "  gap " << report.gap << "\n";
        }
        std::cout << "report -> " << ev_out << "\n";
    });

    // -------------------------------------------------------------------- bench
    auto* bench = app.add_subcommand("bench", "proposed vs baseline extractor");
    std::string be_graph, be_emb, be_queries, be_out;
    BenchConfig be_cfg;
    bench->add_option("--graph", be_graph)->required();
    bench->add_option("--embeddings", be_emb)->required();
    bench->add_option("--queries", be_queries)->required();
    bench->add_option("--k", be_cfg.k)->capture_default_str();
    bench->add_option("--node-cap", be_cfg.node_cap)->capture_default_str();
    bench->add_option("--repeat", be_cfg.repeat)->capture_default_str();
    bench->add_option("--out", be_out, "Table-shaped CSV")->required();
    ProviderFlags be_provider;
    be_provider.attach(bench);
    bench->callback([&] {
        const KnowledgeGraph g = KnowledgeGraph::load_file(be_graph);
        const EmbeddingIndex idx = EmbeddingIndex::load_file(be_emb);
        const NodeEmbeddingTable nodes = build_node_table(g, idx);
        const auto queries = load_workload(be_queries);
        const auto provider = be_provider.make();
        const BenchResult result =
            bench_extractors(queries, idx, g, nodes, *provider, be_cfg);
        auto os = open_out(be_out);
        bench_to_csv(result, os);
        std::cout << "proposed " << result.proposed.mean_wall_ms << " ms, baseline "
                  << result.baseline.mean_wall_ms << " ms over "
                  << result.proposed.queries << " queries\n";
    });

    CLI11_PARSE(app, argc, argv);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
