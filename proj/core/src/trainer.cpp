#include "kgfusion/trainer.hpp"

#include "kgfusion/binio.hpp"
#include "kgfusion/errors.hpp"
#include "kgfusion/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

namespace kgf {

namespace {

std::string trim_copy(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// One flat view over every trainable tensor, in a fixed order shared by the
// model and its gradients.
std::vector<std::span<double>> collect_spans(Matrix& embed, Matrix& pos, Matrix& w_img,
                                             std::vector<BlockParams>& blocks,
                                             std::vector<double>& lnf_g,
                                             std::vector<double>& lnf_b, Matrix& relations,
                                             std::vector<double>& self_rel, Matrix& w_node,
                                             Matrix& w_rel, std::vector<double>& attn,
                                             Matrix& gcn_w) {
    std::vector<std::span<double>> spans;
    auto add_m = [&](Matrix& m) {
        spans.emplace_back(m.data(), m.rows() * m.cols());
    };
    auto add_v = [&](std::vector<double>& v) { spans.emplace_back(v); };
    add_m(embed);
    add_m(pos);
    add_m(w_img);
    for (auto& b : blocks) {
        add_m(b.wq);
        add_m(b.wk);
        add_m(b.wv);
        add_m(b.wo);
        add_v(b.ln1_g);
        add_v(b.ln1_b);
        add_v(b.ln2_g);
        add_v(b.ln2_b);
        add_m(b.w1);
        add_v(b.b1);
        add_m(b.w2);
        add_v(b.b2);
    }
    add_v(lnf_g);
    add_v(lnf_b);
    add_m(relations);
    add_v(self_rel);
    add_m(w_node);
    add_m(w_rel);
    add_v(attn);
    add_m(gcn_w);
    return spans;
}

std::vector<std::span<double>> param_spans(ToyFusionModel& m) {
    return collect_spans(m.embed, m.pos, m.w_img, m.blocks, m.lnf_g, m.lnf_b,
                         m.kg.relations, m.kg.self_rel, m.kg.w_node, m.kg.w_rel,
                         m.kg.attn, m.kg.gcn_w);
}

std::vector<std::span<double>> grad_spans(FusionGrads& g) {
    return collect_spans(g.embed, g.pos, g.w_img, g.blocks, g.lnf_g, g.lnf_b,
                         g.kg.relations, g.kg.self_rel, g.kg.w_node, g.kg.w_rel,
                         g.kg.attn, g.kg.gcn_w);
}

struct Adam {
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    std::vector<double> m, v;
    uint64_t t = 0;

    explicit Adam(size_t n) : m(n, 0.0), v(n, 0.0) {}

    void step(std::vector<std::span<double>>& params,
              const std::vector<std::span<double>>& grads, double lr) {
        ++t;
        const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
        size_t k = 0;
        for (size_t s = 0; s < params.size(); ++s) {
            auto p = params[s];
            const auto g = grads[s];
            for (size_t i = 0; i < p.size(); ++i, ++k) {
                m[k] = kBeta1 * m[k] + (1.0 - kBeta1) * g[i];
                v[k] = kBeta2 * v[k] + (1.0 - kBeta2) * g[i] * g[i];
                p[i] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + kEps);
            }
        }
    }
};

// Answer span of a reference: tokens after the first SEP, EOS excluded.
std::vector<uint32_t> reference_answer(const std::vector<uint32_t>& reference) {
    std::vector<uint32_t> out;
    auto sep = std::find(reference.begin(), reference.end(), Vocab::kSep);
    if (sep == reference.end()) return out;
    for (auto it = sep + 1; it != reference.end() && *it != Vocab::kEos; ++it)
        out.push_back(*it);
    return out;
}

} // namespace

void TrainConfig::validate() const {
    if (!std::isfinite(learning_rate) || learning_rate < 0.0)
        throw InvalidConfig("training: learning_rate must be finite and >= 0");
    if (max_epochs == 0) throw InvalidConfig("training: max_epochs must be positive");
    if (patience == 0 || patience > max_epochs)
        throw InvalidConfig("training: patience must lie in [1, max_epochs]");
    if (batch_size == 0) throw InvalidConfig("training: batch_size must be positive");
    if (gen_max_len == 0) throw InvalidConfig("training: gen_max_len must be positive");
}

TrainConfig parse_train_config(std::istream& is) {
    TrainConfig cfg;
    std::string line;
    size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string text = trim_copy(line);
        if (text.empty()) continue;
        const auto eq = text.find('=');
        if (eq == std::string::npos)
            throw InvalidConfig("training config line " + std::to_string(line_no) +
                                ": expected key=value");
        const std::string key = trim_copy(text.substr(0, eq));
        const std::string value = trim_copy(text.substr(eq + 1));
        try {
            if (key == "learning_rate")
                cfg.learning_rate = std::stod(value);
            else if (key == "max_epochs")
                cfg.max_epochs = static_cast<uint32_t>(std::stoul(value));
            else if (key == "patience")
                cfg.patience = static_cast<uint32_t>(std::stoul(value));
            else if (key == "seed")
                cfg.seed = std::stoull(value);
            else if (key == "batch_size")
                cfg.batch_size = static_cast<uint32_t>(std::stoul(value));
            else if (key == "gen_max_len")
                cfg.gen_max_len = static_cast<uint32_t>(std::stoul(value));
            else
                throw InvalidConfig("training config line " + std::to_string(line_no) +
                                    ": unknown key '" + key + "'");
        } catch (const std::logic_error&) {
            throw InvalidConfig("training config line " + std::to_string(line_no) +
                                ": bad value for '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

TrainConfig parse_train_config_file(const std::string& path) {
    auto is = open_in(path);
    return parse_train_config(is);
}

double dataset_accuracy(const ToyFusionModel& model,
                        const std::vector<QaInstance>& instances, uint32_t gen_max_len) {
    if (instances.empty()) return 0.0;
    size_t correct = 0;
    for (const auto& inst : instances) {
        const GenerationResult res = generate(model, inst, gen_max_len);
        if (res.emitted_sep && res.answer == reference_answer(inst.reference)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(instances.size());
}

TrainLog train(ToyFusionModel& model, const QaDataset& dataset, const TrainConfig& cfg) {
    cfg.validate();
    model.validate();
    if (dataset.train.empty()) throw InvalidConfig("training: empty train split");

    auto params = param_spans(model);
    size_t total = 0;
    for (const auto& s : params) total += s.size();
    Adam adam(total);

    TrainLog log;
    double best = -std::numeric_limits<double>::infinity();
    uint32_t streak = 0;

    const size_t n = dataset.train.size();
    std::vector<uint32_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = static_cast<uint32_t>(i);

    for (uint32_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr = cfg.learning_rate * 0.5 *
                          (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                                          static_cast<double>(cfg.max_epochs)));
        Rng rng(mix64(cfg.seed, 0xe90c0000ull + epoch));
        for (size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[rng.next_below(static_cast<uint32_t>(i))]);

        double epoch_loss = 0.0;
        for (size_t start = 0; start < n; start += cfg.batch_size) {
            const size_t end = std::min(n, start + cfg.batch_size);
            FusionGrads grads = FusionGrads::zeros_like(model, 0);
            double batch_loss = 0.0;
            for (size_t i = start; i < end; ++i)
                batch_loss += decoder_nll_backward(model, dataset.train[order[i]], grads);
            const double denom = static_cast<double>(end - start);
            if (!std::isfinite(batch_loss))
                throw DivergedLoss("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch) + ", batch starting at " +
                                   std::to_string(start));
            epoch_loss += batch_loss;
            grads.scale(1.0 / denom);
            auto gspans = grad_spans(grads);
            adam.step(params, gspans, lr);
        }
        epoch_loss /= static_cast<double>(n);

        const double val_acc = dataset_accuracy(model, dataset.val, cfg.gen_max_len);
        log.epochs.push_back({epoch, epoch_loss, val_acc, lr});

        if (val_acc > best) {
            best = val_acc;
            log.best_epoch = epoch;
            log.best_val_acc = val_acc;
            streak = 0;
        } else if (++streak >= cfg.patience) {
            log.stopped_early = true;
            break;
        }
    }
    return log;
}

void write_training_csv(const TrainLog& log, std::ostream& os) {
    os << "epoch,train_loss,val_acc,lr\n";
    os << std::setprecision(17);
    for (const auto& e : log.epochs)
        os << e.epoch << ',' << e.train_loss << ',' << e.val_acc << ',' << e.lr << '\n';
}

} // namespace kgf
