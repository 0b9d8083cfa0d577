#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "prem/json_io.hpp"

using namespace prem;
using nlohmann::json;

namespace {

RunConfig parse(const std::string& text) { return json::parse(text).get<RunConfig>(); }

bool same(const RunConfig& a, const RunConfig& b) { return dump_run_config(a) == dump_run_config(b); }

}  // namespace

TEST_CASE("full config round trips through json") {
    RunConfig c;
    c.synthetic.seed = 42;
    c.synthetic.train_video_count = 200;
    c.synthetic.noise_sigma = 0.125;
    c.model.hidden = 48;
    c.pooling = PoolingMode::mean;
    c.modalities.subtitle = false;
    c.use_gates = false;
    c.fusion_layers = 1;
    c.train.learning_rate = 3e-3;
    c.train.use_shared_norm = false;
    c.inference.nms_iou = 0.5;
    c.inference.retrieval_divisor = 1.0;
    const RunConfig back = parse(dump_run_config(c));
    CHECK(same(back, c));
    CHECK(back.synthetic == c.synthetic);
    CHECK(back.train == c.train);
    CHECK(back.model == c.model);
    CHECK(back.pooling == PoolingMode::mean);
    CHECK_FALSE(back.modalities.subtitle);
}

TEST_CASE("partial objects keep defaults") {
    const RunConfig c = parse(R"({"train": {"seed": 9}, "inference": {"top_k": 3}})");
    RunConfig expected;
    expected.train.seed = 9;
    expected.inference.top_k = 3;
    CHECK(same(c, expected));
    CHECK(same(parse("{}"), RunConfig{}));
}

TEST_CASE("defaults are emitted in full") {
    const json j = json::parse(dump_run_config(RunConfig{}));
    CHECK(j.at("train").at("learning_rate") == 1e-4);
    CHECK(j.at("train").at("temperature") == 0.01);
    CHECK(j.at("train").at("lambda") == 0.5);
    CHECK(j.at("train").at("gamma") == 0.8);
    CHECK(j.at("inference").at("nms_iou") == 0.7);
    CHECK(j.at("inference").at("max_len") == 24);
    CHECK(j.at("pooling") == "modality_specific");
    CHECK(j.at("synthetic").at("video_count") == 100);
}

TEST_CASE("bad configs are rejected") {
    CHECK_THROWS_AS(parse(R"({"trian": {}})"), ConfigError);
    CHECK_THROWS_AS(parse(R"({"train": {"lr": 1}})"), ConfigError);
    CHECK_THROWS_AS(parse(R"({"train": {"learning_rate": "fast"}})"), ConfigError);
    CHECK_THROWS_AS(parse(R"({"pooling": "median"})"), ConfigError);
    CHECK_THROWS_AS(parse(R"({"modalities": {"audio": true}})"), ConfigError);
    CHECK_THROWS_AS(parse(R"({"model": 3})"), ConfigError);
    try {
        parse(R"({"inference": {"topk": 3}})");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("topk") != std::string::npos);
    }

    RunConfig c;
    c.model.heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.train.temperature = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.synthetic.moment_len_max = 40;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config files") {
    const auto path = std::filesystem::temp_directory_path() / "prem_run_config.json";
    std::ofstream(path) << R"({"synthetic": {"video_count": 12}})";
    CHECK(load_run_config(path.string()).synthetic.video_count == 12);
    std::ofstream(path) << "{broken";
    CHECK_THROWS_AS(load_run_config(path.string()), ConfigError);
    std::ofstream(path) << R"({"inference": {"min_len": 5, "max_len": 2}})";
    CHECK_THROWS_AS(load_run_config(path.string()), ConfigError);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_run_config(path.string()), ConfigError);
}
