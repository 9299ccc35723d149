// taskmoe command-line tool: train, evaluate, extract and inspect toy MoE
// translation models, and run the serving cost model.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "taskmoe/analysis.hpp"
#include "taskmoe/checkpoint.hpp"
#include "taskmoe/config_io.hpp"
#include "taskmoe/error.hpp"
#include "taskmoe/extraction.hpp"
#include "taskmoe/model_grad_check.hpp"
#include "taskmoe/serving_sim.hpp"
#include "taskmoe/training.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace taskmoe;

namespace {

constexpr int kExitFailure = 1;

void emit(const std::string& text, const std::string& out) {
    if (out.empty() || out == "-") {
        std::cout << text;
    } else {
        write_text_file(out, text);
    }
}

std::string corpus_file_name(const TaskKey& t) {
    return "heldout_" + std::to_string(t.source_lang) + "_" + std::to_string(t.target_lang) + ".tsv";
}

std::string metrics_csv(const std::vector<StepMetrics>& steps, const std::vector<TaskSpec>& tasks) {
    std::string out = "step,task,loss,cross_entropy,aux,grad_norm,batch_accuracy\n";
    char buf[256];
    for (const auto& m : steps) {
        std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.17g,%.17g\n", m.step,
                      to_string(tasks[m.task_index].key()).c_str(), m.loss, m.cross_entropy, m.aux, m.grad_norm,
                      m.batch_accuracy);
        out += buf;
    }
    return out;
}

ordered_json eval_json(const EvalMetrics& e, const TaskKey& task) {
    return {{"task", to_string(task)},
            {"sentences", e.sentences},
            {"reference_tokens", e.reference_tokens},
            {"token_accuracy", e.token_accuracy},
            {"exact_match", e.exact_match},
            {"bleu", e.bleu}};
}

struct TrainArgs {
    std::string config;
    std::string out_dir = "run";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    bool quiet = false;
};

int run_train(const TrainArgs& a) {
    ExperimentConfig cfg = load_experiment(a.config);
    if (a.seed) {
        cfg.train.seed = *a.seed;
    }
    if (a.steps) {
        cfg.train.steps = *a.steps;
    }
    cfg.validate();
    fs::create_directories(a.out_dir);
    const fs::path dir(a.out_dir);

    std::vector<Corpus> corpora;
    ordered_json eval_report = ordered_json::array();
    for (const TaskSpec& spec : cfg.tasks) {
        corpora.push_back({spec, make_task_corpus(spec)});
        const TaskSpec held = heldout_spec(spec, cfg.eval_size);
        write_corpus(dir / corpus_file_name(spec.key()), {held, make_task_corpus(held)});
    }
    Seq2SeqModel model = Seq2SeqModel::initialize(cfg.model, cfg.train.seed);
    const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 20);
    const auto steps = train(model, corpora, cfg.train, [&](const StepMetrics& m) {
        if (!a.quiet && (m.step % every == 0 || m.step == cfg.train.steps)) {
            std::fprintf(stderr, "step %zu task %s loss %.4f acc %.3f\n", m.step,
                         to_string(cfg.tasks[m.task_index].key()).c_str(), m.loss, m.batch_accuracy);
        }
    });
    save_checkpoint(model, dir / "model.ckpt");
    write_text_file(dir / "metrics.csv", metrics_csv(steps, cfg.tasks));
    write_text_file(dir / "experiment.json", experiment_to_json(cfg));
    for (const TaskSpec& spec : cfg.tasks) {
        const Corpus held = read_corpus(dir / corpus_file_name(spec.key()));
        eval_report.push_back(eval_json(evaluate(model, held.samples, spec.key()), spec.key()));
    }
    write_text_file(dir / "eval.json", eval_report.dump(2) + "\n");
    std::cout << eval_report.dump(2) << "\n";
    return 0;
}

int run_eval(const std::string& ckpt, const std::vector<std::string>& corpora, const std::string& out) {
    const Seq2SeqModel model = load_checkpoint(ckpt);
    ordered_json report = ordered_json::array();
    for (const auto& path : corpora) {
        const Corpus c = read_corpus(path);
        report.push_back(eval_json(evaluate(model, c.samples, c.spec.key()), c.spec.key()));
    }
    emit(report.dump(2) + "\n", out);
    return 0;
}

std::vector<Side> parse_sides(const std::vector<std::string>& names) {
    std::vector<Side> sides;
    for (const auto& n : names) {
        sides.push_back(n == "encoder" ? Side::Encoder : Side::Decoder);
    }
    return sides;
}

int run_extract(const std::string& ckpt, const std::string& task, const std::vector<std::string>& sides,
                const std::string& out) {
    const Seq2SeqModel model = load_checkpoint(ckpt);
    const auto side_list = parse_sides(sides);
    const Seq2SeqModel sub = extract_subnetwork(model, parse_task_key(task), side_list);
    save_checkpoint(sub, out);
    const auto full = count_params(model);
    const auto small = count_params(sub);
    std::fprintf(stderr, "extracted %s: %llu of %llu parameters\n", task.c_str(),
                 static_cast<unsigned long long>(small.total), static_cast<unsigned long long>(full.total));
    return 0;
}

int run_verify(const std::string& ckpt, const std::string& sub_path, const std::string& corpus,
               const std::string& task, const std::string& out) {
    const Seq2SeqModel full = load_checkpoint(ckpt);
    const Seq2SeqModel sub = load_checkpoint(sub_path);
    const Corpus c = read_corpus(corpus);
    const TaskKey key = parse_task_key(task);
    const auto r = verify_equivalence(full, sub, c.samples, key);
    ordered_json j = {{"task", task},
                      {"sentences", r.sentences},
                      {"steps_compared", r.steps_compared},
                      {"max_abs_diff", r.max_abs_diff},
                      {"tokens_identical", r.tokens_identical},
                      {"equivalent", r.equivalent()}};
    if (r.first_divergent_sentence) {
        j["first_divergent_sentence"] = *r.first_divergent_sentence;
        j["first_divergent_step"] = *r.first_divergent_step;
    }
    emit(j.dump(2) + "\n", out);
    if (!r.equivalent()) {
        std::fprintf(stderr, "verify: sub-network diverges from the full model\n");
        return kExitFailure;
    }
    return 0;
}

std::vector<std::size_t> default_batches(std::size_t largest) {
    std::vector<std::size_t> out;
    for (std::size_t b = 1; b < largest; b *= 2) {
        out.push_back(b);
    }
    out.push_back(largest);
    return out;
}

struct BenchArgs {
    std::string scenario;
    std::string hardware;
    std::vector<std::size_t> batches;
    std::string calibration;
    std::string compare;
    std::string report;
    std::string out;
};

int run_bench(const BenchArgs& a) {
    ServingScenario s = scenario_from_json(read_text_file(a.scenario));
    HardwareProfile hw = hardware_from_json(read_text_file(a.hardware));
    const auto batches = a.batches.empty() ? default_batches(s.sentences) : a.batches;
    const std::size_t largest = *std::max_element(batches.begin(), batches.end());
    ordered_json report;
    if (!a.calibration.empty()) {
        const auto target = calibration_target_from_json(read_text_file(a.calibration));
        const Calibration cal = calibrate(s, hw, largest, target);
        s.min_expert_batch = cal.scenario.min_expert_batch;
        hw = cal.hardware;
        report["calibration"] = {{"batch", largest},
                                 {"min_expert_batch", s.min_expert_batch},
                                 {"link_bandwidth", hw.link_bandwidth},
                                 {"comm_fraction", cal.achieved_comm_fraction},
                                 {"utilization", cal.achieved_utilization}};
    }
    const auto curve = throughput_curve(s, hw, batches);
    emit(to_csv(curve), a.out);
    if (!a.compare.empty()) {
        ServingScenario other = scenario_from_json(read_text_file(a.compare));
        other.min_expert_batch = s.min_expert_batch;
        const auto c = compare_strategies(s, other, hw, batches);
        report["comparison"] = {{"peak_ratio", c.peak_ratio},
                                {"peak_batch", c.token_peak.batch},
                                {"peak_tokens_per_s", c.token_peak.tokens_per_s},
                                {"other_peak_batch", c.task_peak.batch},
                                {"other_peak_tokens_per_s", c.task_peak.tokens_per_s},
                                {"comm_fraction_at_peak", c.token_peak.comm_fraction},
                                {"other_comm_fraction_at_peak", c.task_peak.comm_fraction},
                                {"utilization_at_peak", c.token_utilization_at_peak},
                                {"effective_params", c.token_effective_params},
                                {"other_effective_params", c.task_effective_params}};
    }
    if (!report.empty()) {
        if (a.report.empty()) {
            std::cerr << report.dump(2) << "\n";
        } else {
            write_text_file(a.report, report.dump(2) + "\n");
        }
    }
    return 0;
}

int run_analyze(const std::string& ckpt, const std::vector<std::string>& corpus_paths, const std::string& out,
                const std::string& summary) {
    const Seq2SeqModel model = load_checkpoint(ckpt);
    std::vector<Corpus> corpora;
    for (const auto& p : corpus_paths) {
        corpora.push_back(read_corpus(p));
    }
    const RoutingLog log = log_decisions(model, corpora);
    emit(to_csv(log), out);
    ordered_json layers = ordered_json::array();
    for (std::size_t l = 0; l < log.num_layers(); ++l) {
        const Matrix dist = expert_distribution(log, l);
        ordered_json sim = ordered_json::array();
        for (std::size_t i = 0; i < log.tasks.size(); ++i) {
            ordered_json row = ordered_json::array();
            for (std::size_t j = 0; j < log.tasks.size(); ++j) {
                row.push_back(task_similarity(dist, i, j));
            }
            sim.push_back(row);
        }
        layers.push_back({{"layer", l},
                          {"side", l < log.encoder_layers ? "encoder" : "decoder"},
                          {"load_cv", load_cv(log, l)},
                          {"between_task_variance", between_task_variance(dist)},
                          {"task_similarity", sim}});
    }
    const std::string text = ordered_json{{"layers", layers}}.dump(2) + "\n";
    if (summary.empty()) {
        std::cerr << text;
    } else {
        write_text_file(summary, text);
    }
    return 0;
}

struct GradcheckArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::size_t points = 20;
    double h = 1e-4;
    double tolerance = 1e-4;
    bool verbose = false;
};

int run_gradcheck(const GradcheckArgs& a) {
    const ExperimentConfig cfg = load_experiment(a.config);
    const std::uint64_t seed = a.seed.value_or(cfg.train.seed);
    // A two-sentence batch drawn from the first two tasks.
    std::vector<Sample> batch;
    for (std::size_t i = 0; i < 2; ++i) {
        TaskSpec spec = cfg.tasks[i % cfg.tasks.size()];
        spec.dataset_size = 1;
        spec.data_seed = seed + i;
        const auto samples = make_task_corpus(spec);
        batch.push_back(samples.front());
    }
    ModelGradCheckOptions opt;
    opt.points = a.points;
    opt.h = a.h;
    opt.verbose = a.verbose;
    const auto r = check_model_gradients(cfg.model, batch, seed, opt);
    ordered_json j = {{"points", r.point_errors.size()},
                      {"attempts", r.attempts},
                      {"max_rel_error", r.max_rel_error},
                      {"tolerance", a.tolerance}};
    std::cout << j.dump(2) << "\n";
    return r.max_rel_error <= a.tolerance ? 0 : kExitFailure;
}

int run_params(const std::string& ckpt, const std::string& arch, const std::string& out) {
    if (!arch.empty()) {
        emit(to_csv(count_params(arch_dims_from_json(read_text_file(arch)))), out);
        return 0;
    }
    if (ckpt.empty()) {
        throw ValidationError("params: give a checkpoint or --arch");
    }
    emit(to_csv(count_params(load_checkpoint(ckpt))), out);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"taskmoe: task-level mixture-of-experts toy translation models and serving cost model"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "taskmoe 0.1.0");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train a model from an experiment config");
    train_cmd->add_option("config", train_args.config, "Experiment JSON")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("-o,--out", train_args.out_dir, "Output directory (model.ckpt, metrics.csv, held-out corpora)")
        ->capture_default_str();
    train_cmd->add_option("--seed", train_args.seed, "Override the training seed");
    train_cmd->add_option("--steps", train_args.steps, "Override the number of steps");
    train_cmd->add_flag("-q,--quiet", train_args.quiet, "No progress on stderr");

    std::string ckpt;
    std::string out;
    std::vector<std::string> corpora;
    auto* eval_cmd = app.add_subcommand("eval", "Greedy-decode corpora and report accuracy and BLEU as JSON");
    eval_cmd->add_option("checkpoint", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("corpus", corpora, "Corpus files")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("-o,--out", out, "Output file (default stdout)");

    std::string task;
    std::vector<std::string> sides;
    auto* extract_cmd = app.add_subcommand("extract", "Write the sub-network serving one task");
    extract_cmd->add_option("checkpoint", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    extract_cmd->add_option("-t,--task", task, "Task as SRC:TGT")->required();
    extract_cmd->add_option("--side", sides, "Side(s) to extract; default every task-routed side")
        ->check(CLI::IsMember({"encoder", "decoder"}));
    extract_cmd->add_option("-o,--out", out, "Sub-network file")->required();

    std::string sub;
    std::string corpus;
    auto* verify_cmd = app.add_subcommand("verify", "Check a sub-network decodes bitwise like the full model");
    verify_cmd->add_option("checkpoint", ckpt, "Full model checkpoint")->required()->check(CLI::ExistingFile);
    verify_cmd->add_option("subnetwork", sub, "Sub-network checkpoint")->required()->check(CLI::ExistingFile);
    verify_cmd->add_option("corpus", corpus, "Corpus file")->required()->check(CLI::ExistingFile);
    verify_cmd->add_option("-t,--task", task, "Task as SRC:TGT")->required();
    verify_cmd->add_option("-o,--out", out, "Report file (default stdout)");

    BenchArgs bench_args;
    auto* bench_cmd = app.add_subcommand("bench", "Sweep batch sizes through the serving cost model");
    bench_cmd->add_option("scenario", bench_args.scenario, "Scenario JSON")->required()->check(CLI::ExistingFile);
    bench_cmd->add_option("hardware", bench_args.hardware, "Hardware JSON")->required()->check(CLI::ExistingFile);
    bench_cmd->add_option("--batches", bench_args.batches, "Batch sizes (default powers of two up to the scenario's)")
        ->delimiter(',');
    bench_cmd->add_option("--calibration", bench_args.calibration,
                          "Calibration JSON; solves b_min and bandwidth at the largest batch")
        ->check(CLI::ExistingFile);
    bench_cmd->add_option("--compare", bench_args.compare, "Second scenario for a peak-throughput comparison")
        ->check(CLI::ExistingFile);
    bench_cmd->add_option("--report", bench_args.report, "Calibration/comparison JSON file (default stderr)");
    bench_cmd->add_option("-o,--out", bench_args.out, "Curve CSV (default stdout)");

    std::string summary;
    auto* analyze_cmd = app.add_subcommand("analyze", "Log routing decisions and write per-task expert counts");
    analyze_cmd->add_option("checkpoint", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    analyze_cmd->add_option("corpus", corpora, "Corpus files, one per task")->required()->check(CLI::ExistingFile);
    analyze_cmd->add_option("-o,--out", out, "Routing CSV (default stdout)");
    analyze_cmd->add_option("--summary", summary, "Per-layer load CV, variance and similarity JSON (default stderr)");

    GradcheckArgs gc;
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Compare analytic and central-difference gradients");
    gradcheck_cmd->add_option("config", gc.config, "Experiment JSON")->required()->check(CLI::ExistingFile);
    gradcheck_cmd->add_option("--seed", gc.seed, "Seed (default: the config's training seed)");
    gradcheck_cmd->add_option("--points", gc.points, "Parameter points")->capture_default_str();
    gradcheck_cmd->add_option("--step", gc.h, "Finite-difference step")->capture_default_str();
    gradcheck_cmd->add_option("--tolerance", gc.tolerance, "Maximum relative error")->capture_default_str();
    gradcheck_cmd->add_flag("-v,--verbose", gc.verbose, "Per-point details on stderr");

    std::string arch;
    auto* params_cmd = app.add_subcommand("params", "Parameter counts by component as CSV");
    params_cmd->add_option("checkpoint", ckpt, "Model or sub-network checkpoint")->check(CLI::ExistingFile);
    params_cmd->add_option("--arch", arch, "Count a transformer described by dims JSON instead")
        ->check(CLI::ExistingFile);
    params_cmd->add_option("-o,--out", out, "Output file (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;   // help and version exit 0, usage errors 2
    }

    try {
        if (*train_cmd) {
            return run_train(train_args);
        }
        if (*eval_cmd) {
            return run_eval(ckpt, corpora, out);
        }
        if (*extract_cmd) {
            return run_extract(ckpt, task, sides, out);
        }
        if (*verify_cmd) {
            return run_verify(ckpt, sub, corpus, task, out);
        }
        if (*bench_cmd) {
            return run_bench(bench_args);
        }
        if (*analyze_cmd) {
            return run_analyze(ckpt, corpora, out, summary);
        }
        if (*gradcheck_cmd) {
            return run_gradcheck(gc);
        }
        if (*params_cmd) {
            return run_params(ckpt, arch, out);
        }
    } catch (const taskmoe::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}
