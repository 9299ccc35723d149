#include <gtest/gtest.h>

#include <filesystem>

#include "taskmoe/checkpoint.hpp"
#include "taskmoe/config_io.hpp"
#include "taskmoe/error.hpp"
#include "taskmoe/extraction.hpp"
#include "test_util.hpp"

namespace taskmoe {
namespace {

using testing::tiny_config;

const RoutingStrategy kTaskTarget = RoutingStrategy::task(TaskBoundary::TargetLanguage);

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("taskmoe_ckpt_" + name);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
    for (const auto& cfg : {tiny_config(), tiny_config(kTaskTarget, kTaskTarget),
                            tiny_config(RoutingStrategy::sentence(),
                                        RoutingStrategy::static_partition(TaskBoundary::LanguagePair))}) {
        const auto model = Seq2SeqModel::initialize(cfg, 21);
        const std::string bytes = serialize_checkpoint(model);
        const auto loaded = deserialize_checkpoint(bytes);
        EXPECT_EQ(loaded.config(), model.config());
        EXPECT_EQ(serialize_checkpoint(loaded), bytes);
    }
}

TEST(Checkpoint, FileRoundTripPreservesEveryValue) {
    auto model = Seq2SeqModel::initialize(tiny_config(), 22);
    const auto path = temp_path("file.bin");
    save_checkpoint(model, path);
    auto loaded = load_checkpoint(path);
    auto a = model.named_parameters();
    auto b = loaded.named_parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_EQ(a[i].param->value, b[i].param->value);
    }
    std::filesystem::remove(path);
}

TEST(Checkpoint, LayoutStartsWithMagicAndHeaderLength) {
    const auto model = Seq2SeqModel::initialize(tiny_config(), 23);
    const std::string bytes = serialize_checkpoint(model);
    ASSERT_GT(bytes.size(), 16u);
    EXPECT_EQ(bytes.substr(0, 8), "TMOECKPT");
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) {
        len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    }
    auto copy = model;
    std::uint64_t values = 0;
    for (const auto& np : copy.named_parameters()) {
        values += np.param->value.size();
    }
    EXPECT_EQ(bytes.size(), 16 + len + 8 * values);
    EXPECT_EQ(bytes[16], '{');
}

TEST(Checkpoint, SubNetworkLoadsWithoutGateAndDecodesIdentically) {
    const auto model = Seq2SeqModel::initialize(tiny_config(RoutingStrategy::token(), kTaskTarget), 24);
    const auto sub = extract_subnetwork(model, {0, 1});
    const std::string bytes = serialize_checkpoint(sub);
    EXPECT_NE(bytes.find("task_expert_map"), std::string::npos);
    auto loaded = deserialize_checkpoint(bytes);
    EXPECT_EQ(serialize_checkpoint(loaded), bytes);
    ASSERT_TRUE(loaded.extracted_task());
    EXPECT_EQ(*loaded.extracted_task(), (TaskKey{0, 1}));
    for (const auto& np : loaded.named_parameters()) {
        EXPECT_FALSE(np.name.starts_with("dec.1.moe.gate")) << np.name;
    }
    EXPECT_EQ(frozen_routes(loaded), frozen_routes(sub));
    const std::vector<std::size_t> src{3, 1, 4, 1, 5};
    std::vector<std::vector<double>> la;
    std::vector<std::vector<double>> lb;
    EXPECT_EQ(model.greedy_decode(src, {0, 1}, 9, nullptr, &la), loaded.greedy_decode(src, {0, 1}, 9, nullptr, &lb));
    EXPECT_EQ(la, lb);
}

TEST(Checkpoint, MalformedInputsRaiseIoError) {
    const auto model = Seq2SeqModel::initialize(tiny_config(), 25);
    const std::string bytes = serialize_checkpoint(model);
    EXPECT_THROW(deserialize_checkpoint(""), IoError);
    EXPECT_THROW(deserialize_checkpoint("NOTACKPT" + bytes.substr(8)), IoError);
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
    EXPECT_THROW(deserialize_checkpoint(bytes + "x"), IoError);
    std::string bad_header = bytes;
    bad_header[16] = '[';
    EXPECT_THROW(deserialize_checkpoint(bad_header), IoError);
    std::string renamed = bytes;
    const auto at = renamed.find("\"embedding\"");
    ASSERT_NE(at, std::string::npos);
    renamed.replace(at, 11, "\"embeddinX\"");
    EXPECT_THROW(deserialize_checkpoint(renamed), IoError);
    EXPECT_THROW(load_checkpoint(temp_path("does_not_exist")), IoError);
}

} // namespace
} // namespace taskmoe
