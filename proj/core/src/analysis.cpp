#include "taskmoe/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "taskmoe/config_io.hpp"
#include "taskmoe/error.hpp"

namespace taskmoe {

RoutingLog RoutingLog::empty(std::vector<TaskKey> tasks, std::size_t layers, std::size_t experts,
                             std::size_t encoder_layers) {
    RoutingLog log;
    const std::size_t t = tasks.size();
    log.tasks = std::move(tasks);
    log.num_experts = experts;
    log.encoder_layers = encoder_layers;
    log.counts.assign(layers, std::vector<std::vector<std::uint64_t>>(t, std::vector<std::uint64_t>(experts, 0)));
    log.weighted.assign(layers, std::vector<std::vector<double>>(t, std::vector<double>(experts, 0.0)));
    log.token_totals.assign(layers, std::vector<std::uint64_t>(t, 0));
    return log;
}

void RoutingLog::validate() const {
    if (weighted.size() != counts.size() || token_totals.size() != counts.size()) {
        throw ValidationError("routing log: inconsistent layer count");
    }
    for (std::size_t l = 0; l < counts.size(); ++l) {
        if (counts[l].size() != tasks.size() || weighted[l].size() != tasks.size() ||
            token_totals[l].size() != tasks.size()) {
            throw ValidationError("routing log: inconsistent task count on layer " + std::to_string(l));
        }
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            if (counts[l][t].size() != num_experts || weighted[l][t].size() != num_experts) {
                throw ValidationError("routing log: inconsistent expert count");
            }
            std::uint64_t n = 0;
            double w = 0.0;
            for (std::size_t e = 0; e < num_experts; ++e) {
                n += counts[l][t][e];
                w += weighted[l][t][e];
            }
            if (n != token_totals[l][t]) {
                throw ValidationError("routing log: counts do not sum to the token total");
            }
            if (std::abs(w - static_cast<double>(n)) > 1e-9 * std::max(1.0, static_cast<double>(n))) {
                throw ValidationError("routing log: weights do not sum to the token total");
            }
        }
    }
}

namespace {

class LogObserver : public RoutingObserver {
public:
    LogObserver(RoutingLog& log, std::size_t task) : log_(log), task_(task) {}

    void on_dispatch(Side side, std::size_t moe_index, const MoELayerParams& layer,
                     const DispatchPlan& plan) override {
        const std::size_t l = side == Side::Encoder ? moe_index : log_.encoder_layers + moe_index;
        for (const GateDecision& d : plan.decisions) {
            ++log_.counts[l][task_][global_expert_id(layer, d.expert_ids.front())];
            for (std::size_t k = 0; k < d.expert_ids.size(); ++k) {
                log_.weighted[l][task_][global_expert_id(layer, d.expert_ids[k])] += d.weights[k];
            }
            ++log_.token_totals[l][task_];
        }
    }

private:
    RoutingLog& log_;
    std::size_t task_;
};

} // namespace

RoutingLog log_decisions(const Seq2SeqModel& model, std::span<const Corpus> corpora) {
    const ModelConfig& cfg = model.config();
    std::vector<TaskKey> tasks;
    for (const auto& c : corpora) {
        tasks.push_back(c.spec.key());
    }
    const std::size_t enc = cfg.moe_layers(Side::Encoder);
    RoutingLog log = RoutingLog::empty(tasks, enc + cfg.moe_layers(Side::Decoder), cfg.moe.num_experts, enc);
    for (std::size_t t = 0; t < corpora.size(); ++t) {
        LogObserver observer(log, t);
        for (const Sample& s : corpora[t].samples) {
            const TaskKey task = corpora[t].spec.key();
            const Matrix memory = model.encode(model.encoder_input(s.src, task), task, &observer);
            std::vector<std::size_t> dec_in{cfg.bos()};
            dec_in.insert(dec_in.end(), s.tgt.begin(), s.tgt.end());
            model.decoder_logits(memory, dec_in, task, &observer);
        }
    }
    return log;
}

Matrix expert_distribution(const RoutingLog& log, std::size_t layer) {
    if (layer >= log.num_layers()) {
        throw IndexError("routing log has no layer " + std::to_string(layer));
    }
    Matrix dist(log.tasks.size(), log.num_experts);
    for (std::size_t t = 0; t < log.tasks.size(); ++t) {
        const std::uint64_t total = log.token_totals[layer][t];
        if (total == 0) {
            throw EvaluationError("no routed tokens for task " + to_string(log.tasks[t]) + " on layer " +
                                  std::to_string(layer));
        }
        for (std::size_t e = 0; e < log.num_experts; ++e) {
            dist(t, e) = static_cast<double>(log.counts[layer][t][e]) / static_cast<double>(total);
        }
    }
    return dist;
}

double task_similarity(const Matrix& dist, std::size_t task_a, std::size_t task_b) {
    if (task_a >= dist.rows() || task_b >= dist.rows()) {
        throw IndexError("task_similarity: task index out of range");
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t e = 0; e < dist.cols(); ++e) {
        dot += dist(task_a, e) * dist(task_b, e);
        na += dist(task_a, e) * dist(task_a, e);
        nb += dist(task_b, e) * dist(task_b, e);
    }
    if (na == 0.0 || nb == 0.0) {
        throw EvaluationError("task_similarity: zero distribution row");
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

double between_task_variance(const Matrix& dist) {
    if (dist.rows() == 0 || dist.cols() == 0) {
        throw EvaluationError("between_task_variance: empty distribution");
    }
    const double n = static_cast<double>(dist.rows());
    double total = 0.0;
    for (std::size_t e = 0; e < dist.cols(); ++e) {
        double mean = 0.0;
        for (std::size_t t = 0; t < dist.rows(); ++t) {
            mean += dist(t, e);
        }
        mean /= n;
        double var = 0.0;
        for (std::size_t t = 0; t < dist.rows(); ++t) {
            var += (dist(t, e) - mean) * (dist(t, e) - mean);
        }
        total += var / n;
    }
    return total / static_cast<double>(dist.cols());
}

double load_cv(const RoutingLog& log, std::size_t layer) {
    if (layer >= log.num_layers()) {
        throw IndexError("routing log has no layer " + std::to_string(layer));
    }
    std::vector<double> load(log.num_experts, 0.0);
    double total = 0.0;
    for (const auto& row : log.counts[layer]) {
        for (std::size_t e = 0; e < log.num_experts; ++e) {
            load[e] += static_cast<double>(row[e]);
            total += static_cast<double>(row[e]);
        }
    }
    if (total == 0.0) {
        throw EvaluationError("load_cv: no routed tokens on layer " + std::to_string(layer));
    }
    const double mean = total / static_cast<double>(log.num_experts);
    double var = 0.0;
    for (double v : load) {
        var += (v - mean) * (v - mean);
    }
    return std::sqrt(var / static_cast<double>(log.num_experts)) / mean;
}

namespace {

std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

std::string to_csv(const RoutingLog& log) {
    std::string out = "layer,task,expert,count,weighted,frequency\n";
    for (std::size_t l = 0; l < log.num_layers(); ++l) {
        for (std::size_t t = 0; t < log.tasks.size(); ++t) {
            const std::uint64_t total = log.token_totals[l][t];
            for (std::size_t e = 0; e < log.num_experts; ++e) {
                const std::uint64_t c = log.counts[l][t][e];
                const double freq = total == 0 ? 0.0 : static_cast<double>(c) / static_cast<double>(total);
                out += std::to_string(l) + ',' + to_string(log.tasks[t]) + ',' + std::to_string(e) + ',' +
                       std::to_string(c) + ',' + format_real(log.weighted[l][t][e]) + ',' + format_real(freq) + '\n';
            }
        }
    }
    return out;
}

void export_csv(const RoutingLog& log, const std::filesystem::path& path) { write_text_file(path, to_csv(log)); }

RoutingLog parse_csv(const std::string& text, std::size_t encoder_layers) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "layer,task,expert,count,weighted,frequency") {
        throw IoError("routing CSV: unexpected header");
    }
    struct Row {
        std::size_t layer, expert;
        TaskKey task;
        std::uint64_t count;
        double weighted;
    };
    std::vector<Row> rows;
    std::vector<TaskKey> tasks;
    std::size_t layers = 0, experts = 0;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            f.push_back(cell);
        }
        if (f.size() != 6) {
            throw IoError("routing CSV line " + std::to_string(line_no) + ": expected 6 fields");
        }
        Row r{};
        try {
            r.layer = std::stoull(f[0]);
            r.task = parse_task_key(f[1]);
            r.expert = std::stoull(f[2]);
            r.count = std::stoull(f[3]);
            r.weighted = std::stod(f[4]);
        } catch (const std::exception& e) {
            throw IoError("routing CSV line " + std::to_string(line_no) + ": " + e.what());
        }
        bool known = false;
        for (const auto& t : tasks) {
            known = known || t == r.task;
        }
        if (!known) {
            tasks.push_back(r.task);
        }
        layers = std::max(layers, r.layer + 1);
        experts = std::max(experts, r.expert + 1);
        rows.push_back(r);
    }
    if (rows.size() != layers * tasks.size() * experts) {
        throw IoError("routing CSV: row count does not match layers x tasks x experts");
    }
    RoutingLog log = RoutingLog::empty(tasks, layers, experts, encoder_layers);
    for (const Row& r : rows) {
        std::size_t t = 0;
        while (!(tasks[t] == r.task)) {
            ++t;
        }
        log.counts[r.layer][t][r.expert] = r.count;
        log.weighted[r.layer][t][r.expert] = r.weighted;
        log.token_totals[r.layer][t] += r.count;
    }
    return log;
}

RoutingLog import_csv(const std::filesystem::path& path, std::size_t encoder_layers) {
    return parse_csv(read_text_file(path), encoder_layers);
}

} // namespace taskmoe
