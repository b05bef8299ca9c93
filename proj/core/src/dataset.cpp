#include "kgfusion/dataset.hpp"

#include "kgfusion/binio.hpp"
#include "kgfusion/errors.hpp"
#include "kgfusion/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <unordered_map>

namespace kgf {

namespace {

using nlohmann::json;

struct FactSlot {
    uint32_t subject;
    uint32_t relation;
    uint32_t triple_id;
};

// One slot per distinct (answer, subject) pair; duplicate planted edges share
// the first copy's triple id.
struct PlantedPools {
    std::vector<uint32_t> answers;                    // concept ids, encounter order
    std::vector<std::vector<FactSlot>> slots;         // parallel to answers
};

PlantedPools group_planted(const SyntheticGraph& sg) {
    PlantedPools pools;
    std::unordered_map<uint32_t, size_t> answer_of;
    std::unordered_map<uint64_t, bool> seen_pair;
    for (const auto& f : sg.planted) {
        auto [it, fresh] = answer_of.try_emplace(f.answer, pools.answers.size());
        if (fresh) {
            pools.answers.push_back(f.answer);
            pools.slots.emplace_back();
        }
        const uint64_t pair = (static_cast<uint64_t>(f.answer) << 32) | f.subject;
        if (!seen_pair.emplace(pair, true).second) continue;
        pools.slots[it->second].push_back({f.subject, f.relation, f.triple_id});
    }
    return pools;
}

Matrix noise_patches(const std::string& instance_id, uint64_t seed, uint32_t rows,
                     uint32_t cols) {
    const uint64_t key = fnv1a64(instance_id) ^ splitmix64(seed);
    Matrix m(rows, cols);
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j)
            m(i, j) = static_cast<double>(
                static_cast<float>(normal_at(key, i * cols + j)));
    return m;
}

void add_words(Vocab& v, const std::string& text) {
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) v.add(w);
}

// Deterministic vocabulary: scan instances in order and add every word as it
// first appears. The same scan runs at construction and after load, so ids
// agree with serialized token words.
Vocab scan_vocab(const std::vector<QaInstance>& train, const std::vector<QaInstance>& val,
                 const std::vector<std::vector<std::string>>& train_ref_words,
                 const std::vector<std::vector<std::string>>& val_ref_words) {
    Vocab v;
    auto scan = [&](const std::vector<QaInstance>& split,
                    const std::vector<std::vector<std::string>>& refs) {
        for (size_t i = 0; i < split.size(); ++i) {
            add_words(v, split[i].question);
            for (const auto& o : split[i].options) add_words(v, o);
            add_words(v, split[i].context);
            for (const auto& w : refs[i]) v.add(w);
        }
    };
    scan(train, train_ref_words);
    scan(val, val_ref_words);
    return v;
}

std::vector<uint32_t> encode_reference(const Vocab& v,
                                       const std::vector<std::string>& words) {
    std::vector<uint32_t> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(v.id(w));
    return ids;
}

json instance_to_json(const QaInstance& inst, const Vocab& vocab, uint32_t gold,
                      const char* split) {
    json j;
    j["id"] = inst.id;
    j["split"] = split;
    j["question"] = inst.question;
    j["options"] = inst.options;
    j["context"] = inst.context;
    std::vector<std::string> ref_words;
    ref_words.reserve(inst.reference.size());
    for (uint32_t t : inst.reference) ref_words.push_back(vocab.word(t));
    j["reference"] = ref_words;
    j["gold_triple"] = gold;
    std::vector<float> patches(inst.image_patches.rows() * inst.image_patches.cols());
    for (size_t i = 0; i < inst.image_patches.rows(); ++i)
        for (size_t c = 0; c < inst.image_patches.cols(); ++c)
            patches[i * inst.image_patches.cols() + c] =
                static_cast<float>(inst.image_patches(i, c));
    j["patch_rows"] = inst.image_patches.rows();
    j["patch_cols"] = inst.image_patches.cols();
    j["patches_b64"] = base64_of_floats(patches);
    j["query_b64"] = base64_of_floats(inst.query_vec);
    return j;
}

} // namespace

QaDataset make_planted_dataset(uint64_t seed, const SyntheticGraph& sg,
                               const EmbeddingProvider& provider, uint32_t n_train,
                               uint32_t n_val, const DatasetOptions& opts) {
    if (sg.planted.empty())
        throw InvalidConfig("dataset: graph carries no planted facts");
    if (n_train == 0 || n_val == 0)
        throw InvalidConfig("dataset: both splits must be non-empty");
    if (opts.n_options < 2) throw InvalidConfig("dataset: need at least 2 options");
    if (opts.val_fact_fraction <= 0.0 || opts.val_fact_fraction >= 1.0)
        throw InvalidConfig("dataset: val_fact_fraction must lie in (0, 1)");

    const KnowledgeGraph& g = sg.graph;
    PlantedPools pools = group_planted(sg);
    const size_t n_answers = pools.answers.size();
    if (n_answers < opts.n_options)
        throw InvalidConfig("dataset: need at least as many distinct answers as options");

    // Subjects per answer split disjointly: the tail fraction feeds validation.
    std::vector<size_t> train_counts(n_answers);
    for (size_t a = 0; a < n_answers; ++a) {
        const size_t total = pools.slots[a].size();
        if (total < 2)
            throw InvalidConfig("dataset: every answer needs >= 2 planted subjects "
                                "to split train/val disjointly");
        size_t val_count = static_cast<size_t>(opts.val_fact_fraction *
                                               static_cast<double>(total));
        val_count = std::clamp<size_t>(val_count, 1, total - 1);
        train_counts[a] = total - val_count;
    }

    QaDataset ds;
    Rng rng(mix64(seed, 0xda7a5e7));
    std::vector<std::vector<std::string>> ref_words_of[2];
    for (int split = 0; split < 2; ++split) {
        const bool is_val = split == 1;
        const uint32_t count = is_val ? n_val : n_train;
        auto& instances = is_val ? ds.val : ds.train;
        auto& gold = is_val ? ds.val_gold : ds.train_gold;
        auto& ref_words = ref_words_of[split];
        instances.reserve(count);
        for (uint32_t i = 0; i < count; ++i) {
            const size_t a = rng.next_below(static_cast<uint32_t>(n_answers));
            const auto& slots = pools.slots[a];
            const size_t train_n = train_counts[a];
            const size_t pick =
                is_val ? train_n + rng.next_below(static_cast<uint32_t>(
                                       slots.size() - train_n))
                       : rng.next_below(static_cast<uint32_t>(train_n));
            const FactSlot& fact = slots[pick];

            QaInstance inst;
            inst.id = (is_val ? std::string("val-") : std::string("train-")) +
                      std::to_string(i);
            const std::string a_label = g.concept_label(pools.answers[a]);
            // The text names no graph entity: the planted fact is reachable
            // only through the attached sub-graph, never from the words.
            inst.question = "which concept does the probed entity reach";
            inst.context.clear();

            // Correct answer plus distinct distractor answers, shuffled.
            std::vector<size_t> opt_answers{a};
            while (opt_answers.size() < opts.n_options) {
                const size_t cand = rng.next_below(static_cast<uint32_t>(n_answers));
                if (std::find(opt_answers.begin(), opt_answers.end(), cand) ==
                    opt_answers.end())
                    opt_answers.push_back(cand);
            }
            for (size_t j = opt_answers.size(); j > 1; --j)
                std::swap(opt_answers[j - 1], opt_answers[rng.next_below(
                                                  static_cast<uint32_t>(j))]);
            inst.options.reserve(opt_answers.size());
            for (size_t idx : opt_answers)
                inst.options.push_back(g.concept_label(pools.answers[idx]));

            inst.image_patches =
                noise_patches(inst.id, seed, opts.patch_rows, opts.d_img);
            inst.query_vec =
                noisy_query(provider, verbalize_triple(g.triple(fact.triple_id), g),
                            opts.noise_fraction,
                            mix64(seed, 0x9e55u + static_cast<uint64_t>(split) * 0x10000u + i));
            ref_words.push_back({a_label, "<sep>", a_label, "<eos>"});
            gold.push_back(fact.triple_id);
            instances.push_back(std::move(inst));
        }
    }

    ds.vocab = scan_vocab(ds.train, ds.val, ref_words_of[0], ref_words_of[1]);
    for (size_t i = 0; i < ds.train.size(); ++i)
        ds.train[i].reference = encode_reference(ds.vocab, ref_words_of[0][i]);
    for (size_t i = 0; i < ds.val.size(); ++i)
        ds.val[i].reference = encode_reference(ds.vocab, ref_words_of[1][i]);
    return ds;
}

void attach_subgraphs(QaDataset& ds, const EmbeddingIndex& idx, const KnowledgeGraph& g,
                      const NodeEmbeddingTable& nodes, uint32_t k, uint32_t node_cap) {
    for (auto* split : {&ds.train, &ds.val})
        for (auto& inst : *split)
            inst.subgraph =
                extract_topk(inst.query_vec, idx, g, nodes, k, node_cap).subgraph;
}

void strip_subgraphs(QaDataset& ds) {
    for (auto* split : {&ds.train, &ds.val})
        for (auto& inst : *split) inst.subgraph = Subgraph{};
}

void rebuild_vocab(QaDataset& ds) {
    std::vector<std::vector<std::string>> train_words, val_words;
    for (const auto& inst : ds.train) {
        std::vector<std::string> w;
        for (uint32_t t : inst.reference) w.push_back(ds.vocab.word(t));
        train_words.push_back(std::move(w));
    }
    for (const auto& inst : ds.val) {
        std::vector<std::string> w;
        for (uint32_t t : inst.reference) w.push_back(ds.vocab.word(t));
        val_words.push_back(std::move(w));
    }
    ds.vocab = scan_vocab(ds.train, ds.val, train_words, val_words);
    for (size_t i = 0; i < ds.train.size(); ++i)
        ds.train[i].reference = encode_reference(ds.vocab, train_words[i]);
    for (size_t i = 0; i < ds.val.size(); ++i)
        ds.val[i].reference = encode_reference(ds.vocab, val_words[i]);
}

void save_dataset(const QaDataset& ds, std::ostream& os) {
    for (size_t i = 0; i < ds.train.size(); ++i)
        os << instance_to_json(ds.train[i], ds.vocab, ds.train_gold[i], "train").dump()
           << '\n';
    for (size_t i = 0; i < ds.val.size(); ++i)
        os << instance_to_json(ds.val[i], ds.vocab, ds.val_gold[i], "val").dump()
           << '\n';
    if (!os) throw FormatError("failed to write dataset stream");
}

QaDataset load_dataset(std::istream& is) {
    QaDataset ds;
    std::vector<std::vector<std::string>> ref_words[2];
    std::string line;
    size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError("dataset line " + std::to_string(line_no) + ": " +
                              e.what());
        }
        try {
            QaInstance inst;
            inst.id = j.at("id").get<std::string>();
            inst.question = j.at("question").get<std::string>();
            inst.options = j.at("options").get<std::vector<std::string>>();
            inst.context = j.at("context").get<std::string>();
            const size_t rows = j.at("patch_rows").get<size_t>();
            const size_t cols = j.at("patch_cols").get<size_t>();
            const auto patches = floats_of_base64(j.at("patches_b64").get<std::string>());
            if (patches.size() != rows * cols)
                throw FormatError("patch matrix size disagrees with its shape");
            inst.image_patches = Matrix(rows, cols);
            for (size_t r = 0; r < rows; ++r)
                for (size_t c = 0; c < cols; ++c)
                    inst.image_patches(r, c) = patches[r * cols + c];
            inst.query_vec = floats_of_base64(j.at("query_b64").get<std::string>());
            const auto split = j.at("split").get<std::string>();
            const auto words = j.at("reference").get<std::vector<std::string>>();
            const auto gold = j.at("gold_triple").get<uint32_t>();
            if (split == "train") {
                ds.train.push_back(std::move(inst));
                ds.train_gold.push_back(gold);
                ref_words[0].push_back(words);
            } else if (split == "val") {
                ds.val.push_back(std::move(inst));
                ds.val_gold.push_back(gold);
                ref_words[1].push_back(words);
            } else {
                throw FormatError("unknown split '" + split + "'");
            }
        } catch (const json::exception& e) {
            throw FormatError("dataset line " + std::to_string(line_no) + ": " +
                              e.what());
        }
    }
    ds.vocab = scan_vocab(ds.train, ds.val, ref_words[0], ref_words[1]);
    for (size_t i = 0; i < ds.train.size(); ++i)
        ds.train[i].reference = encode_reference(ds.vocab, ref_words[0][i]);
    for (size_t i = 0; i < ds.val.size(); ++i)
        ds.val[i].reference = encode_reference(ds.vocab, ref_words[1][i]);
    return ds;
}

void save_dataset_file(const QaDataset& ds, const std::string& path) {
    auto os = open_out(path);
    save_dataset(ds, os);
}

QaDataset load_dataset_file(const std::string& path) {
    auto is = open_in(path);
    return load_dataset(is);
}

} // namespace kgf
