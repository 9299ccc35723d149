#include <gtest/gtest.h>

#include <set>
#include <string>

#include "taskmoe/checkpoint.hpp"
#include "taskmoe/error.hpp"
#include "taskmoe/extraction.hpp"
#include "taskmoe/training.hpp"
#include "test_util.hpp"

namespace taskmoe {
namespace {

using testing::tiny_config;

const RoutingStrategy kTaskTarget = RoutingStrategy::task(TaskBoundary::TargetLanguage);

std::vector<Sample> corpus_for(const TaskKey& task, std::size_t size, std::uint64_t seed) {
    TaskSpec s;
    s.source_lang = task.source_lang;
    s.target_lang = task.target_lang;
    s.cipher_seed = 5;
    s.num_symbols = 8;
    s.min_len = 2;
    s.max_len = 8;
    s.dataset_size = size;
    s.data_seed = seed;
    return make_task_corpus(s);
}

class TouchedObserver : public RoutingObserver {
public:
    void on_dispatch(Side side, std::size_t moe_index, const MoELayerParams& layer, const DispatchPlan& plan) override {
        if (side != Side::Decoder) {
            return;
        }
        touched.resize(std::max(touched.size(), moe_index + 1));
        for (std::size_t e : plan.touched_experts()) {
            touched[moe_index].insert(global_expert_id(layer, e));
        }
    }
    std::vector<std::set<std::size_t>> touched;
};

TEST(ResolveTaskExperts, StaticPartitionGivesMappedExpertsWithEqualWeights) {
    const auto st = RoutingStrategy::static_partition(TaskBoundary::TargetLanguage);
    auto cfg = tiny_config(st, st);
    cfg.enc_static_map = {{1, 0}, {2, 3}};
    cfg.dec_static_map = {{1, 0}, {2, 3}};
    const auto model = Seq2SeqModel::initialize(cfg, 1);
    const TaskExpertMap map = resolve_task_experts(model, {0, 0});
    ASSERT_EQ(map.layers.size(), 2u);
    for (const auto& l : map.layers) {
        EXPECT_EQ(l.route.expert_ids, (std::vector<std::size_t>{0, 1}));
        EXPECT_EQ(l.route.weights, (std::vector<double>{0.5, 0.5}));
    }
    EXPECT_EQ(map.layers[0].side, Side::Encoder);
    EXPECT_EQ(map.layers[1].side, Side::Decoder);
    EXPECT_EQ(map.layers[1].block, 1u);
}

TEST(ResolveTaskExperts, RepeatedCallsAgreeBitwise) {
    const auto model = Seq2SeqModel::initialize(tiny_config(kTaskTarget, kTaskTarget), 2);
    for (const TaskKey t : {TaskKey{0, 0}, TaskKey{0, 1}}) {
        const auto a = resolve_task_experts(model, t);
        const auto b = resolve_task_experts(model, t);
        EXPECT_EQ(a, b);
        a.validate(2, 4);
    }
}

TEST(ResolveTaskExperts, TokenRoutedSideIsNotExtractable) {
    const auto token = Seq2SeqModel::initialize(tiny_config(), 3);
    EXPECT_THROW(resolve_task_experts(token, {0, 0}), NotExtractableError);

    const auto hybrid = Seq2SeqModel::initialize(tiny_config(RoutingStrategy::token(), kTaskTarget), 3);
    const Side enc[] = {Side::Encoder};
    EXPECT_THROW(resolve_task_experts(hybrid, {0, 0}, enc), NotExtractableError);
    const auto map = resolve_task_experts(hybrid, {0, 0});
    ASSERT_EQ(map.layers.size(), 1u);
    EXPECT_EQ(map.layers[0].side, Side::Decoder);
}

TEST(ResolveTaskExperts, UnknownTaskIsRejected) {
    const auto model = Seq2SeqModel::initialize(tiny_config(kTaskTarget, kTaskTarget), 3);
    EXPECT_THROW(resolve_task_experts(model, {0, 5}), UnknownTaskError);
}

TEST(ResolveTaskExperts, MatchesExpertsObservedDuringDecoding) {
    auto cfg = tiny_config(RoutingStrategy::token(), kTaskTarget);
    cfg.dec_layers = 4;
    const auto model = Seq2SeqModel::initialize(cfg, 4);
    for (const TaskKey t : {TaskKey{0, 0}, TaskKey{0, 1}}) {
        const auto map = resolve_task_experts(model, t);
        TouchedObserver obs;
        for (const auto& s : corpus_for(t, 20, 9)) {
            model.greedy_decode(s.src, t, s.src.size() + 4, &obs);
        }
        ASSERT_EQ(obs.touched.size(), map.layers.size());
        for (std::size_t l = 0; l < map.layers.size(); ++l) {
            const auto& ids = map.layers[l].route.expert_ids;
            EXPECT_EQ(obs.touched[l], std::set<std::size_t>(ids.begin(), ids.end()));
        }
    }
}

TEST(TaskExpertMap, ValidateRejectsBadMaps) {
    TaskExpertMap m;
    m.layers.push_back({Side::Decoder, 1, FrozenRoute{{0, 1}, {0.5, 0.5}}});
    EXPECT_NO_THROW(m.validate(2, 4));
    EXPECT_THROW(m.validate(3, 4), ValidationError);
    m.layers[0].route = {{1, 1}, {0.5, 0.5}};
    EXPECT_THROW(m.validate(2, 4), ValidationError);
    m.layers[0].route = {{0, 4}, {0.5, 0.5}};
    EXPECT_THROW(m.validate(2, 4), ValidationError);
    m.layers[0].route = {{0, 1}, {0.5, 0.6}};
    EXPECT_THROW(m.validate(2, 4), ValidationError);
}

TEST(ExtractSubnetwork, KeepsKExpertsAndNoGate) {
    const auto model = Seq2SeqModel::initialize(tiny_config(kTaskTarget, kTaskTarget), 5);
    auto sub = extract_subnetwork(model, {0, 1});
    ASSERT_TRUE(sub.extracted_task());
    EXPECT_EQ(*sub.extracted_task(), (TaskKey{0, 1}));
    for (const auto& np : sub.named_parameters()) {
        EXPECT_EQ(np.name.find("gate"), std::string::npos) << np.name;
    }
    const auto map = resolve_task_experts(model, {0, 1});
    const auto& layer = std::get<MoELayerParams>(sub.decoder_blocks()[1].ffn);
    ASSERT_EQ(layer.experts.size(), 2u);
    ASSERT_TRUE(layer.frozen);
    EXPECT_EQ(*layer.frozen, map.layers[1].route);
    const auto& full = std::get<MoELayerParams>(model.decoder_blocks()[1].ffn);
    EXPECT_EQ(layer.experts[1].wi.value, full.experts[map.layers[1].route.expert_ids[1]].wi.value);
    // Shared weights are copied verbatim.
    EXPECT_EQ(sub.embedding().value, model.embedding().value);
    EXPECT_EQ(sub.decoder_blocks()[0].cross_attn.wq.value, model.decoder_blocks()[0].cross_attn.wq.value);
}

TEST(ExtractSubnetwork, SubNetworkRefusesOtherTasks) {
    const auto model = Seq2SeqModel::initialize(tiny_config(kTaskTarget, kTaskTarget), 5);
    const auto sub = extract_subnetwork(model, {0, 1});
    const std::vector<std::size_t> src{1, 2, 3};
    EXPECT_THROW(sub.greedy_decode(src, {0, 0}, 5), UnknownTaskError);
    EXPECT_THROW(resolve_task_experts(sub, {0, 0}), UnknownTaskError);
    EXPECT_EQ(resolve_task_experts(sub, {0, 1}), resolve_task_experts(model, {0, 1}));
}

TEST(ExtractSubnetwork, ExtractingTwiceGivesIdenticalFiles) {
    const auto model = Seq2SeqModel::initialize(tiny_config(kTaskTarget, kTaskTarget), 6);
    EXPECT_EQ(serialize_checkpoint(extract_subnetwork(model, {0, 0})),
              serialize_checkpoint(extract_subnetwork(model, {0, 0})));
}

struct EquivalenceCase {
    RoutingStrategy enc;
    RoutingStrategy dec;
};

class Equivalence : public ::testing::TestWithParam<EquivalenceCase> {};

TEST_P(Equivalence, ExtractedModelMatchesBitwise) {
    auto cfg = tiny_config(GetParam().enc, GetParam().dec);
    const auto model = Seq2SeqModel::initialize(cfg, 7);
    for (const TaskKey t : {TaskKey{0, 0}, TaskKey{0, 1}}) {
        const auto sub = extract_subnetwork(model, t);
        const auto corpus = corpus_for(t, 30, 11);
        const auto report = verify_equivalence(model, sub, corpus, t);
        EXPECT_TRUE(report.equivalent());
        EXPECT_EQ(report.max_abs_diff, 0.0);
        EXPECT_EQ(report.sentences, 30u);
        EXPECT_GT(report.steps_compared, 30u);
        EXPECT_FALSE(report.first_divergent_sentence);
    }
}

INSTANTIATE_TEST_SUITE_P(Strategies, Equivalence,
                         ::testing::Values(EquivalenceCase{kTaskTarget, kTaskTarget},
                                           EquivalenceCase{RoutingStrategy::token(), kTaskTarget},
                                           EquivalenceCase{RoutingStrategy::task(TaskBoundary::LanguagePair),
                                                           RoutingStrategy::task(TaskBoundary::LanguagePair)},
                                           EquivalenceCase{RoutingStrategy::static_partition(
                                                               TaskBoundary::TargetLanguage),
                                                           RoutingStrategy::static_partition(
                                                               TaskBoundary::TargetLanguage)}),
                         [](const ::testing::TestParamInfo<EquivalenceCase>& info) {
                             std::string name = to_string(info.param.enc) + "_" + to_string(info.param.dec);
                             for (char& c : name) {
                                 if (c == ':') {
                                     c = '_';
                                 }
                             }
                             return name;
                         });

TEST(VerifyEquivalence, DetectsTinyPerturbation) {
    const auto model = Seq2SeqModel::initialize(tiny_config(kTaskTarget, kTaskTarget), 8);
    auto sub = extract_subnetwork(model, {0, 0});
    auto& layer = std::get<MoELayerParams>(sub.decoder_blocks()[1].ffn);
    auto& wo = layer.experts[0].wo.value;
    for (std::size_t r = 0; r < wo.rows(); ++r) {
        wo(r, 0) += 1e-9;
    }
    const auto report = verify_equivalence(model, sub, corpus_for({0, 0}, 10, 3), {0, 0});
    EXPECT_GT(report.max_abs_diff, 0.0);
    EXPECT_FALSE(report.equivalent());
    ASSERT_TRUE(report.first_divergent_sentence);
    EXPECT_EQ(*report.first_divergent_sentence, 0u);
    EXPECT_EQ(*report.first_divergent_step, 0u);
}

TEST(VerifyEquivalence, ReportsTokenMismatch) {
    const auto model = Seq2SeqModel::initialize(tiny_config(kTaskTarget, kTaskTarget), 8);
    auto other = Seq2SeqModel::initialize(tiny_config(kTaskTarget, kTaskTarget), 9);
    const auto report = verify_equivalence(model, other, corpus_for({0, 0}, 10, 3), {0, 0});
    EXPECT_FALSE(report.tokens_identical);
    EXPECT_GT(report.max_abs_diff, 0.0);
}

// Hand counts for tiny_config: d=8, d_ff=8, V=12, E=4, K=2, one MoE block per
// side (block 1), two target languages.
constexpr std::uint64_t kAttn = 4 * 8 * 8;       // 256
constexpr std::uint64_t kFfn = 2 * 8 * 8;        // 128
constexpr std::uint64_t kVocab = 12 * 8;         // 96

TEST(CountParams, DenseModelEffectiveEqualsTotal) {
    auto cfg = tiny_config();
    cfg.moe_every = 3;   // no MoE block in two layers
    const auto model = Seq2SeqModel::initialize(cfg, 1);
    const auto p = count_params(model);
    EXPECT_EQ(p.vocabulary, kVocab);
    EXPECT_EQ(p.encoder, 2 * (kAttn + kFfn));
    EXPECT_EQ(p.decoder, 2 * (2 * kAttn + kFfn));
    EXPECT_EQ(p.softmax, 0u);
    EXPECT_EQ(p.total, 96u + 768u + 1280u);
    EXPECT_EQ(p.effective_at_inference, p.total);
}

TEST(CountParams, TokenAndTaskModelsMatchHandArithmetic) {
    const auto token = count_params(Seq2SeqModel::initialize(tiny_config(), 1));
    const std::uint64_t token_gate = 8 * 4;
    EXPECT_EQ(token.encoder, (kAttn + kFfn) + (kAttn + 4 * kFfn + token_gate));
    EXPECT_EQ(token.decoder, (2 * kAttn + kFfn) + (2 * kAttn + 4 * kFfn + token_gate));
    EXPECT_EQ(token.effective_at_inference, token.total);

    const auto task = count_params(Seq2SeqModel::initialize(tiny_config(kTaskTarget, kTaskTarget), 1));
    const std::uint64_t task_gate = 2 * 4;
    EXPECT_EQ(task.decoder, (2 * kAttn + kFfn) + (2 * kAttn + 4 * kFfn + task_gate));
    // Dense decoder plus K experts on the MoE block.
    EXPECT_EQ(task.effective_decoder, (2 * kAttn + kFfn) + (2 * kAttn + 2 * kFfn));
    EXPECT_EQ(task.effective_encoder, (kAttn + kFfn) + (kAttn + 2 * kFfn));
    EXPECT_EQ(task.total, task.vocabulary + task.encoder + task.decoder + task.softmax);
    EXPECT_LT(task.effective_at_inference, token.effective_at_inference);
}

TEST(CountParams, SubNetworkCountsMatchEffectiveCounts) {
    const auto model = Seq2SeqModel::initialize(tiny_config(kTaskTarget, kTaskTarget), 1);
    const auto full = count_params(model);
    const auto sub = count_params(extract_subnetwork(model, {0, 0}));
    EXPECT_EQ(sub.total, full.effective_at_inference);
    EXPECT_EQ(sub.effective_at_inference, sub.total);
}

TEST(CountParams, ExtractionWithEEqualsKOnlyDropsTheGate) {
    auto cfg = tiny_config(kTaskTarget, kTaskTarget);
    cfg.moe.num_experts = 2;
    const auto model = Seq2SeqModel::initialize(cfg, 1);
    const auto full = count_params(model);
    const auto sub = count_params(extract_subnetwork(model, {0, 1}));
    const std::uint64_t gate_table = 2 * 2;   // two rows × E per MoE block
    EXPECT_EQ(sub.total, full.total - 2 * gate_table);
}

TEST(CountParams, ExpertParametersShrinkByFourForEightExpertsTopTwo) {
    ModelConfig cfg;   // 4+4 layers, MoE on blocks 1 and 3 of each side
    cfg.moe.num_experts = 8;
    cfg.moe.top_k = 2;
    cfg.enc_strategy = kTaskTarget;
    cfg.dec_strategy = kTaskTarget;
    cfg.tasks = {{0, 0}, {0, 1}};
    const auto model = Seq2SeqModel::initialize(cfg, 1);
    auto sub = extract_subnetwork(model, {0, 0});
    auto full_copy = model;
    auto expert_params = [](Seq2SeqModel& m) {
        std::uint64_t n = 0;
        for (const auto& np : m.named_parameters()) {
            if (np.name.find(".moe.expert.") != std::string::npos) {
                n += np.param->value.size();
            }
        }
        return n;
    };
    const std::uint64_t per_expert = 2 * 32 * 64;
    EXPECT_EQ(expert_params(full_copy), 4 * 8 * per_expert);
    EXPECT_EQ(expert_params(sub), 4 * 2 * per_expert);
    EXPECT_EQ(count_params(model).total - count_params(sub).total, 4 * 6 * per_expert + 4 * 2 * 8);
}

TEST(CountParams, ArchFormulaDenseBase) {
    ArchDims a;
    const auto p = count_params(a);
    EXPECT_EQ(p.vocabulary, 64000u * 512u);
    EXPECT_EQ(p.encoder, 6u * (4u * 512 * 512 + 2u * 512 * 2048));
    EXPECT_EQ(p.decoder, 6u * (8u * 512 * 512 + 2u * 512 * 2048));
    EXPECT_EQ(p.softmax, 64000u * 1024u);
    EXPECT_EQ(p.effective_at_inference, p.total);
}

TEST(CountParams, CsvListsEveryComponent) {
    ParamBreakdown p{1, 2, 3, 4, 10, 5, 6, 7};
    EXPECT_EQ(to_csv(p), "component,count\nvocabulary,1\nencoder,2\ndecoder,3\nsoftmax,4\ntotal,10\n"
                         "effective_encoder,5\neffective_decoder,6\neffective_at_inference,7\n");
}

} // namespace
} // namespace taskmoe
