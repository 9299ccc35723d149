#include "taskmoe/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json_support.hpp"
#include "taskmoe/error.hpp"
#include "taskmoe/rng.hpp"

namespace taskmoe {

void TaskSpec::validate() const {
    if (dataset_size < 1) {
        throw ValidationError("TaskSpec: dataset_size must be at least 1");
    }
    if (num_symbols < 1) {
        throw ValidationError("TaskSpec: num_symbols must be positive");
    }
    const std::size_t count = symbol_count == 0 ? num_symbols : symbol_count;
    if (symbol_offset + count > num_symbols) {
        throw ValidationError("TaskSpec: source symbol range exceeds the alphabet");
    }
    if (target_offset >= num_symbols) {
        throw ValidationError("TaskSpec: target_offset must be below num_symbols");
    }
    if (min_len < 1 || min_len > max_len) {
        throw ValidationError("TaskSpec: need 1 <= min_len <= max_len");
    }
}

std::vector<std::size_t> make_cipher(std::uint64_t cipher_seed, std::size_t num_symbols, std::size_t lo,
                                     std::size_t count) {
    if (count == 0) {
        count = num_symbols - std::min(lo, num_symbols);
    }
    if (lo + count > num_symbols) {
        throw ValidationError("make_cipher: range exceeds the alphabet");
    }
    std::vector<std::size_t> perm(num_symbols);
    for (std::size_t i = 0; i < num_symbols; ++i) {
        perm[i] = i;
    }
    if (cipher_seed != 0) {
        std::vector<std::size_t> block(perm.begin() + static_cast<std::ptrdiff_t>(lo),
                                       perm.begin() + static_cast<std::ptrdiff_t>(lo + count));
        Rng rng(derive_seed(cipher_seed, 0xc1f3));
        rng.shuffle(block);
        std::copy(block.begin(), block.end(), perm.begin() + static_cast<std::ptrdiff_t>(lo));
    }
    return perm;
}

std::vector<std::size_t> task_symbol_map(const TaskSpec& spec) {
    spec.validate();
    auto map = make_cipher(spec.cipher_seed, spec.num_symbols, spec.symbol_offset, spec.symbol_count);
    for (auto& v : map) {
        v = (v + spec.target_offset) % spec.num_symbols;
    }
    return map;
}

namespace {

std::vector<std::size_t> apply_cipher(const std::vector<std::size_t>& cipher, std::size_t target_lang,
                                      std::span<const std::size_t> src) {
    std::vector<std::size_t> tgt;
    tgt.reserve(src.size());
    for (std::size_t s : src) {
        if (s >= cipher.size()) {
            throw IndexError("source symbol " + std::to_string(s) + " outside the alphabet");
        }
        tgt.push_back(cipher[s]);
    }
    if (target_lang % 2 == 1) {
        std::reverse(tgt.begin(), tgt.end());
    }
    return tgt;
}

} // namespace

std::vector<std::size_t> apply_task(const TaskSpec& spec, std::span<const std::size_t> src) {
    return apply_cipher(task_symbol_map(spec), spec.target_lang, src);
}

std::vector<Sample> make_task_corpus(const TaskSpec& spec) {
    const auto cipher = task_symbol_map(spec);
    const std::size_t count = spec.symbol_count == 0 ? spec.num_symbols : spec.symbol_count;
    Rng rng(derive_seed(spec.data_seed, 0xda7a));
    std::vector<Sample> out;
    out.reserve(spec.dataset_size);
    for (std::size_t i = 0; i < spec.dataset_size; ++i) {
        const std::size_t len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        Sample s;
        s.task = spec.key();
        s.src.reserve(len);
        for (std::size_t t = 0; t < len; ++t) {
            s.src.push_back(spec.symbol_offset + rng.below(count));
        }
        s.tgt = apply_cipher(cipher, spec.target_lang, s.src);
        out.push_back(std::move(s));
    }
    return out;
}

void SamplerConfig::validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ValidationError("sampling temperature must be positive and finite");
    }
}

std::vector<double> temperature_sample(std::span<const std::size_t> sizes, double temperature) {
    SamplerConfig{temperature}.validate();
    double total = 0.0;
    for (std::size_t s : sizes) {
        total += static_cast<double>(s);
    }
    if (sizes.empty() || total == 0.0) {
        throw ValidationError("temperature_sample: total size is zero");
    }
    std::vector<double> p;
    p.reserve(sizes.size());
    double norm = 0.0;
    for (std::size_t s : sizes) {
        p.push_back(std::pow(static_cast<double>(s) / total, 1.0 / temperature));
        norm += p.back();
    }
    for (double& v : p) {
        v /= norm;
    }
    return p;
}

void TrainConfig::validate() const {
    if (steps < 1) {
        throw ValidationError("train: steps must be at least 1");
    }
    if (batch_size < 1) {
        throw ValidationError("train: batch_size must be at least 1");
    }
    if (!(final_lr_ratio >= 0.0 && final_lr_ratio <= 1.0)) {
        throw ValidationError("train: final_lr_ratio must lie in [0, 1]");
    }
    if (!(lr >= 0.0) || !(clip_norm > 0.0) || !(adam_eps > 0.0)) {
        throw ValidationError("train: lr must be >= 0, clip_norm and adam_eps > 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ValidationError("train: Adam betas must lie in [0, 1)");
    }
    sampler.validate();
}

std::vector<StepMetrics> train(Seq2SeqModel& model, std::span<const Corpus> corpora, const TrainConfig& config,
                               const StepCallback& callback) {
    config.validate();
    if (corpora.empty()) {
        throw ValidationError("train: no corpora");
    }
    std::vector<std::size_t> sizes;
    for (const auto& c : corpora) {
        if (c.samples.empty()) {
            throw ValidationError("train: empty corpus for task " + to_string(c.spec.key()));
        }
        sizes.push_back(c.samples.size());
    }
    const auto task_probs = temperature_sample(sizes, config.sampler.temperature);

    const auto params = model.parameters();
    std::vector<Matrix> m, v;
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Parameter* p : params) {
        m.emplace_back(p->value.rows(), p->value.cols());
        v.emplace_back(p->value.rows(), p->value.cols());
    }

    Rng rng(derive_seed(config.seed, 0x7a11));
    std::vector<StepMetrics> history;
    history.reserve(config.steps);
    std::vector<Sample> batch(config.batch_size);
    for (std::size_t step = 1; step <= config.steps; ++step) {
        const std::size_t task = rng.categorical(task_probs);
        const auto& samples = corpora[task].samples;
        for (auto& s : batch) {
            s = samples[rng.below(samples.size())];
        }

        model.zero_grad();
        const LossBreakdown loss = model.forward_loss(batch, true);
        if (!std::isfinite(loss.total)) {
            std::ostringstream msg;
            msg << "non-finite loss at step " << step << " (task " << to_string(corpora[task].spec.key())
                << ", cross-entropy " << loss.cross_entropy << ", aux " << loss.aux << ")";
            throw TrainingError(msg.str());
        }

        double sq = 0.0;
        for (const Parameter* p : params) {
            for (double g : p->grad.data()) {
                sq += g * g;
            }
        }
        const double norm = std::sqrt(sq);
        const double scale = norm > config.clip_norm ? config.clip_norm / norm : 1.0;

        const double progress = static_cast<double>(step - 1) / static_cast<double>(config.steps);
        const double lr = config.lr * (1.0 - (1.0 - config.final_lr_ratio) * progress);
        const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto value = params[i]->value.data();
            const auto grad = params[i]->grad.data();
            auto mi = m[i].data();
            auto vi = v[i].data();
            for (std::size_t j = 0; j < value.size(); ++j) {
                const double g = grad[j] * scale;
                mi[j] = config.beta1 * mi[j] + (1.0 - config.beta1) * g;
                vi[j] = config.beta2 * vi[j] + (1.0 - config.beta2) * g * g;
                const double mhat = mi[j] / bc1;
                const double vhat = vi[j] / bc2;
                value[j] -= lr * mhat / (std::sqrt(vhat) + config.adam_eps);
            }
        }

        StepMetrics sm;
        sm.step = step;
        sm.task_index = task;
        sm.loss = loss.total;
        sm.cross_entropy = loss.cross_entropy;
        sm.aux = loss.aux;
        sm.grad_norm = norm;
        sm.batch_accuracy = loss.target_tokens == 0
                                ? 0.0
                                : static_cast<double>(loss.correct_tokens) / static_cast<double>(loss.target_tokens);
        history.push_back(sm);
        if (callback) {
            callback(sm);
        }
    }
    model.zero_grad();
    return history;
}

EvalMetrics evaluate(const Seq2SeqModel& model, std::span<const Sample> corpus, const TaskKey& task) {
    EvalMetrics out;
    std::vector<std::vector<std::size_t>> hyps, refs;
    std::size_t matches = 0, exact = 0;
    for (const auto& s : corpus) {
        auto hyp = model.greedy_decode(s.src, task, s.src.size() + 4);
        const std::size_t n = std::min(hyp.size(), s.tgt.size());
        for (std::size_t i = 0; i < n; ++i) {
            matches += hyp[i] == s.tgt[i];
        }
        exact += hyp == s.tgt;
        out.reference_tokens += s.tgt.size();
        hyps.push_back(std::move(hyp));
        refs.push_back(s.tgt);
    }
    out.sentences = corpus.size();
    if (out.sentences == 0) {
        return out;
    }
    out.token_accuracy =
        out.reference_tokens == 0 ? 0.0 : static_cast<double>(matches) / static_cast<double>(out.reference_tokens);
    out.exact_match = static_cast<double>(exact) / static_cast<double>(out.sentences);
    out.bleu = corpus_bleu(hyps, refs);
    return out;
}

double corpus_bleu(std::span<const std::vector<std::size_t>> hyps, std::span<const std::vector<std::size_t>> refs) {
    if (hyps.empty()) {
        throw ValidationError("corpus_bleu: empty hypothesis set");
    }
    if (hyps.size() != refs.size()) {
        throw ValidationError("corpus_bleu: hypothesis and reference counts differ");
    }
    constexpr std::size_t max_n = 4;
    std::size_t hyp_len = 0, ref_len = 0;
    std::size_t matches[max_n] = {};
    std::size_t totals[max_n] = {};
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        const auto& h = hyps[i];
        const auto& r = refs[i];
        hyp_len += h.size();
        ref_len += r.size();
        for (std::size_t n = 1; n <= max_n; ++n) {
            if (h.size() < n) {
                continue;
            }
            std::map<std::vector<std::size_t>, std::size_t> ref_counts;
            for (std::size_t j = 0; j + n <= r.size(); ++j) {
                ++ref_counts[std::vector<std::size_t>(r.begin() + j, r.begin() + j + n)];
            }
            std::map<std::vector<std::size_t>, std::size_t> hyp_counts;
            for (std::size_t j = 0; j + n <= h.size(); ++j) {
                ++hyp_counts[std::vector<std::size_t>(h.begin() + j, h.begin() + j + n)];
            }
            for (const auto& [gram, c] : hyp_counts) {
                const auto it = ref_counts.find(gram);
                matches[n - 1] += std::min(c, it == ref_counts.end() ? std::size_t{0} : it->second);
            }
            totals[n - 1] += h.size() - n + 1;
        }
    }
    if (hyp_len == 0) {
        return 0.0;
    }
    double log_sum = 0.0;
    for (std::size_t n = 0; n < max_n; ++n) {
        const double p = matches[n] > 0 ? static_cast<double>(matches[n]) / static_cast<double>(totals[n])
                                        : 1.0 / (2.0 * static_cast<double>(hyp_len));
        log_sum += std::log(p);
    }
    const double bp =
        hyp_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)) : 1.0;
    return 100.0 * bp * std::exp(log_sum / max_n);
}

namespace {

void write_ids(std::ostream& out, const std::vector<std::size_t>& ids) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) {
            out << ' ';
        }
        out << ids[i];
    }
}

std::vector<std::size_t> parse_ids(const std::string& text, std::size_t line_no) {
    std::vector<std::size_t> ids;
    std::istringstream in(text);
    std::string tok;
    while (in >> tok) {
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(tok, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != tok.size() || tok.front() == '-') {
            throw IoError("corpus line " + std::to_string(line_no) + ": bad token id '" + tok + "'");
        }
        ids.push_back(static_cast<std::size_t>(v));
    }
    return ids;
}

} // namespace

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out << nlohmann::json(corpus.spec).dump() << '\n';
    for (const auto& s : corpus.samples) {
        write_ids(out, s.src);
        out << '\t';
        write_ids(out, s.tgt);
        out << '\n';
    }
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

Corpus read_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    Corpus corpus;
    std::string line;
    if (!std::getline(in, line)) {
        throw IoError(path.string() + ": missing header line");
    }
    try {
        corpus.spec = nlohmann::json::parse(line).get<TaskSpec>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": bad header: " + e.what());
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw IoError("corpus line " + std::to_string(line_no) + ": missing tab");
        }
        Sample s;
        s.task = corpus.spec.key();
        s.src = parse_ids(line.substr(0, tab), line_no);
        s.tgt = parse_ids(line.substr(tab + 1), line_no);
        corpus.samples.push_back(std::move(s));
    }
    return corpus;
}

} // namespace taskmoe
