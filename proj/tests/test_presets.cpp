#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "timesbert/presets.hpp"

using namespace timesbert;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("timesbert_presets_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST(Presets, SplitSizes) {
    const auto c = synthetic_preset("classify", 7);
    EXPECT_EQ(c.train.size(), 64u);
    EXPECT_EQ(c.val.size(), 16u);
    EXPECT_EQ(c.test.size(), 16u);
    for (const auto& s : c.all()) EXPECT_TRUE(s.class_label.has_value());
    EXPECT_EQ(synthetic_preset("default", 7).train.size(), 64u);
    const auto a = synthetic_preset("anomaly", 7);
    ASSERT_TRUE(a.is_stream());
    EXPECT_EQ(a.stream_train->stream.length, 4000u);
    for (auto l : a.stream_train->labels) EXPECT_EQ(l, 0);
    EXPECT_THROW(synthetic_preset("nope", 7), ConfigError);
}

TEST(Presets, SameSeedSameData) {
    const auto a = synthetic_preset("forecast", 3), b = synthetic_preset("forecast", 3);
    ASSERT_EQ(a.train.size(), b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].values, b.train[i].values);
}

TEST(Presets, SampleDirectoryRoundTrip) {
    const auto dir = scratch("samples");
    const auto t = synthetic_preset("classify", 5);
    write_task_data(dir.string(), t, 5);
    const auto r = read_task_data(dir.string());
    EXPECT_EQ(r.preset, "classify");
    EXPECT_EQ(r.registry.size(), t.registry.size());
    ASSERT_EQ(r.train.size(), t.train.size());
    ASSERT_EQ(r.test.size(), t.test.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < t.test.size(); ++i)
        for (std::size_t k = 0; k < t.test[i].values.size(); ++k)
            worst = std::max(worst, std::abs(r.test[i].values[k] - t.test[i].values[k]));
    EXPECT_LT(worst, 1e-9);
    fs::remove_all(dir);
}

TEST(Presets, StreamDirectoryRoundTrip) {
    const auto dir = scratch("stream");
    const auto t = synthetic_preset("anomaly", 5);
    write_task_data(dir.string(), t, 5);
    const auto r = read_task_data(dir.string());
    ASSERT_TRUE(r.is_stream());
    EXPECT_EQ(r.stream_test->labels, t.stream_test->labels);
    EXPECT_EQ(r.stream_val->stream.length, t.stream_val->stream.length);
    fs::remove_all(dir);
}

TEST(Presets, BrokenDirectoriesAreDataErrors) {
    const auto dir = scratch("broken");
    EXPECT_THROW(read_task_data(dir.string()), DataError);
    fs::create_directories(dir);
    std::ofstream(dir / "manifest.json") << "{not json";
    EXPECT_THROW(read_task_data(dir.string()), DataError);
    std::ofstream(dir / "manifest.json", std::ios::trunc) << R"({"registry": [], "files": [{"split": "train"}]})";
    EXPECT_THROW(read_task_data(dir.string()), DataError);
    fs::remove_all(dir);
}
