#include <algorithm>
#include <cstring>
#include <filesystem>

#include "acceptance.hpp"
#include "taskmoe/analysis.hpp"
#include "taskmoe/checkpoint.hpp"
#include "taskmoe/extraction.hpp"
#include "taskmoe/moe_layer.hpp"

namespace taskmoe::acceptance {

namespace {

constexpr const char* kMultiway = "experiments/multiway.json";

double mean_load_cv(const Run& run) {
    const RoutingLog log = log_decisions(run.model, run.heldout);
    double sum = 0.0;
    for (std::size_t l = 0; l < log.num_layers(); ++l) {
        sum += load_cv(log, l);
    }
    return sum / static_cast<double>(log.num_layers());
}

struct Structure {
    double encoder_variance;
    double decoder_variance;
    double same_cipher_similarity;
    double conflicting_similarity;
};

/// Tasks 0 and 2 share a cipher, as do 1 and 3.
Structure routing_structure_of(const Run& run) {
    const RoutingLog log = log_decisions(run.model, run.heldout);
    const Matrix enc = expert_distribution(log, log.encoder_layers - 1);
    const Matrix dec = expert_distribution(log, log.num_layers() - 1);
    const double same = (task_similarity(dec, 0, 2) + task_similarity(dec, 1, 3)) / 2.0;
    const double conflicting = (task_similarity(dec, 0, 1) + task_similarity(dec, 0, 3) + task_similarity(dec, 2, 1) +
                                task_similarity(dec, 2, 3)) /
                               4.0;
    return {between_task_variance(enc), between_task_variance(dec), same, conflicting};
}

std::string bytes_of(const std::filesystem::path& p) { return read_text_file(p); }

} // namespace

Verdict load_balance(Lab& lab) {
    bool uniform_exact = true;
    std::string uniform_detail;
    for (std::size_t experts : {1u, 2u, 4u, 8u, 16u, 32u, 64u}) {
        const std::size_t rows = 4 * experts;
        Matrix probs(rows, experts, 1.0 / static_cast<double>(experts));
        std::vector<std::size_t> top1(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            top1[r] = r % experts;
        }
        const double l = load_balance_loss(probs, top1);
        uniform_exact = uniform_exact && l == 1.0;
        if (l != 1.0) {
            uniform_detail += fmt(" E=%zu gives %.17g", experts, l);
        }
    }

    std::vector<double> balanced, free;
    for (int seed = 1; seed <= kSeeds; ++seed) {
        balanced.push_back(mean_load_cv(lab.run(kMultiway, seed, 0.01)));
        free.push_back(mean_load_cv(lab.run(kMultiway, seed, 0.0)));
    }
    const double cv_balanced = median(balanced);
    const double cv_free = median(free);
    const bool pass = uniform_exact && cv_balanced < 0.5 && cv_free >= 2.0 * cv_balanced;
    return {pass, fmt("uniform l_aux %s;%s median top-1 load CV over %d seeds: %.4f with lambda 0.01 (< 0.5), "
                      "%.4f with lambda 0 (ratio %.2f, need >= 2)",
                      uniform_exact ? "== 1.0 for E in 1..64 (powers of two)" : "not exactly 1",
                      uniform_detail.c_str(), kSeeds, cv_balanced, cv_free, cv_free / cv_balanced)};
}

Verdict interference(Lab& lab) {
    std::vector<double> routed, dense;
    for (int seed = 1; seed <= kSeeds; ++seed) {
        routed.push_back(lab.run("experiments/interference.json", seed).mean_token_accuracy());
        dense.push_back(lab.run("experiments/interference_dense.json", seed).mean_token_accuracy());
    }
    const double gap = median(routed) - median(dense);

    struct Variant {
        const char* name;
        RoutingStrategy enc, dec;
    };
    const Variant variants[] = {
        {"token/token", RoutingStrategy::token(), RoutingStrategy::token()},
        {"token/task", RoutingStrategy::token(), RoutingStrategy::task(TaskBoundary::TargetLanguage)},
        {"task/task", RoutingStrategy::task(TaskBoundary::TargetLanguage),
         RoutingStrategy::task(TaskBoundary::TargetLanguage)},
    };
    bool variants_ok = true;
    std::string variant_detail;
    for (const auto& v : variants) {
        ExperimentConfig cfg = lab.load("default.json");
        cfg.model.enc_strategy = v.enc;
        cfg.model.dec_strategy = v.dec;
        const Run& run = cfg == lab.load("default.json") ? lab.run("default.json", cfg.train.seed)
                                                         : lab.run_config(v.name, cfg);
        double worst = 1.0;
        for (const auto& e : run.eval) {
            worst = std::min(worst, e.token_accuracy);
        }
        variants_ok = variants_ok && worst >= 0.99 && run.config.train.steps <= 3000;
        variant_detail += fmt("%s %s min %.4f (%zu steps, %.0fs)", variant_detail.empty() ? "" : ";", v.name, worst,
                              run.config.train.steps, run.seconds);
    }
    const bool pass = gap >= 0.02 && variants_ok;
    return {pass, fmt("median held-out token accuracy over %d seeds: task-routed %.4f vs dense %.4f (gap %.2f points, "
                      "need >= 2); non-conflicting tasks, per-task accuracy >= 0.99:%s",
                      kSeeds, median(routed), median(dense), 100.0 * gap, variant_detail.c_str())};
}

Verdict routing_structure(Lab& lab) {
    std::vector<double> enc, dec, same, conflicting;
    std::string reference;
    for (int seed = 1; seed <= kSeeds; ++seed) {
        const Structure s = routing_structure_of(lab.run(kMultiway, seed, 0.0));
        enc.push_back(s.encoder_variance);
        dec.push_back(s.decoder_variance);
        same.push_back(s.same_cipher_similarity);
        conflicting.push_back(s.conflicting_similarity);
    }
    std::vector<double> enc_aux, dec_aux, same_aux, conflicting_aux;
    for (int seed = 1; seed <= kSeeds; ++seed) {
        const Structure s = routing_structure_of(lab.run(kMultiway, seed, 0.01));
        enc_aux.push_back(s.encoder_variance);
        dec_aux.push_back(s.decoder_variance);
        same_aux.push_back(s.same_cipher_similarity);
        conflicting_aux.push_back(s.conflicting_similarity);
    }
    const bool pass = median(dec) > median(enc) && median(same) > median(conflicting);
    return {pass, fmt("lambda 0, median over %d seeds: between-task variance decoder %.5f vs encoder %.5f; decoder "
                      "similarity same-cipher %.4f vs conflicting %.4f | lambda 0.01 (reference): variance decoder "
                      "%.5f vs encoder %.5f, similarity %.4f vs %.4f",
                      kSeeds, median(dec), median(enc), median(same), median(conflicting), median(dec_aux),
                      median(enc_aux), median(same_aux), median(conflicting_aux))};
}

Verdict determinism(Lab& lab) {
    ExperimentConfig cfg = lab.load("default.json");
    cfg.train.steps = 300;
    cfg.train.seed = 11;
    const Run a = Lab::train_config(cfg);
    const Run b = Lab::train_config(cfg);
    bool steps_equal = a.steps.size() == b.steps.size();
    for (std::size_t i = 0; steps_equal && i < a.steps.size(); ++i) {
        steps_equal = std::memcmp(&a.steps[i].loss, &b.steps[i].loss, sizeof(double)) == 0 &&
                      std::memcmp(&a.steps[i].grad_norm, &b.steps[i].grad_norm, sizeof(double)) == 0 &&
                      a.steps[i].task_index == b.steps[i].task_index;
    }
    const std::string ckpt_a = serialize_checkpoint(a.model);
    const bool train_reproducible = steps_equal && ckpt_a == serialize_checkpoint(b.model);

    const auto tmp = std::filesystem::temp_directory_path() / "taskmoe_acceptance";
    std::filesystem::create_directories(tmp);

    const Run& trained = lab.run("default.json", 1);
    const std::string bytes = serialize_checkpoint(trained.model);
    bool ckpt_ok = serialize_checkpoint(deserialize_checkpoint(bytes)) == bytes;
    save_checkpoint(trained.model, tmp / "full.ckpt");
    save_checkpoint(load_checkpoint(tmp / "full.ckpt"), tmp / "full2.ckpt");
    ckpt_ok = ckpt_ok && bytes_of(tmp / "full.ckpt") == bytes && bytes_of(tmp / "full2.ckpt") == bytes;
    const auto sub = extract_subnetwork(trained.model, trained.config.tasks[0].key());
    save_checkpoint(sub, tmp / "sub.ckpt");
    save_checkpoint(load_checkpoint(tmp / "sub.ckpt"), tmp / "sub2.ckpt");
    ckpt_ok = ckpt_ok && bytes_of(tmp / "sub.ckpt") == bytes_of(tmp / "sub2.ckpt") &&
              bytes_of(tmp / "sub.ckpt") == serialize_checkpoint(sub);

    const RoutingLog log = log_decisions(trained.model, trained.heldout);
    export_csv(log, tmp / "routing.csv");
    const std::string csv = bytes_of(tmp / "routing.csv");
    const RoutingLog back = import_csv(tmp / "routing.csv", log.encoder_layers);
    export_csv(back, tmp / "routing2.csv");
    bool csv_ok = to_csv(back) == csv && bytes_of(tmp / "routing2.csv") == csv && back == log;

    write_corpus(tmp / "corpus.tsv", trained.heldout[0]);
    write_corpus(tmp / "corpus2.tsv", read_corpus(tmp / "corpus.tsv"));
    csv_ok = csv_ok && bytes_of(tmp / "corpus.tsv") == bytes_of(tmp / "corpus2.tsv");
    std::filesystem::remove_all(tmp);

    return {train_reproducible && ckpt_ok && csv_ok,
            fmt("two seeded %zu-step runs %s (%zu checkpoint bytes); checkpoint round trips (full and sub-network) "
                "%s; routing CSV (%zu bytes) and corpus file round trips %s",
                cfg.train.steps, train_reproducible ? "bitwise identical" : "differ", ckpt_a.size(),
                ckpt_ok ? "byte-identical" : "differ", csv.size(), csv_ok ? "byte-identical" : "differ")};
}

} // namespace taskmoe::acceptance
