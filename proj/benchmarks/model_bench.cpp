#include <benchmark/benchmark.h>

#include "taskmoe/extraction.hpp"
#include "taskmoe/model.hpp"
#include "taskmoe/serving_sim.hpp"
#include "taskmoe/training.hpp"

namespace {

using namespace taskmoe;

ModelConfig bench_model(RoutingStrategy dec) {
    ModelConfig cfg;
    cfg.moe.num_experts = 8;
    cfg.moe.capacity_factor = 2.0;
    cfg.enc_strategy = RoutingStrategy::token();
    cfg.dec_strategy = dec;
    cfg.tasks = {{0, 0}, {0, 1}};
    return cfg;
}

std::vector<Sample> bench_batch() {
    TaskSpec spec;
    spec.dataset_size = 16;
    spec.data_seed = 3;
    spec.cipher_seed = 5;
    return make_task_corpus(spec);
}

void BM_TrainStepForwardBackward(benchmark::State& state) {
    auto model = Seq2SeqModel::initialize(bench_model(RoutingStrategy::task(TaskBoundary::TargetLanguage)), 1);
    const auto batch = bench_batch();
    for (auto _ : state) {
        model.zero_grad();
        benchmark::DoNotOptimize(model.forward_loss(batch, true));
    }
}
BENCHMARK(BM_TrainStepForwardBackward)->Unit(benchmark::kMillisecond);

void BM_GreedyDecodeFull(benchmark::State& state) {
    const auto model = Seq2SeqModel::initialize(bench_model(RoutingStrategy::task(TaskBoundary::TargetLanguage)), 2);
    const auto batch = bench_batch();
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.greedy_decode(batch[0].src, {0, 0}, 16));
    }
}
BENCHMARK(BM_GreedyDecodeFull);

void BM_GreedyDecodeExtracted(benchmark::State& state) {
    const auto full = Seq2SeqModel::initialize(bench_model(RoutingStrategy::task(TaskBoundary::TargetLanguage)), 2);
    const Side decoder[] = {Side::Decoder};
    const auto sub = extract_subnetwork(full, {0, 0}, decoder);
    const auto batch = bench_batch();
    for (auto _ : state) {
        benchmark::DoNotOptimize(sub.greedy_decode(batch[0].src, {0, 0}, 16));
    }
}
BENCHMARK(BM_GreedyDecodeExtracted);

void BM_ThroughputCurve(benchmark::State& state) {
    ServingScenario s;
    const HardwareProfile hw;
    const std::vector<std::size_t> batches{1, 2, 4, 8, 16, 32, 64, 128, 256};
    for (auto _ : state) {
        benchmark::DoNotOptimize(throughput_curve(s, hw, batches));
    }
}
BENCHMARK(BM_ThroughputCurve);

} // namespace
