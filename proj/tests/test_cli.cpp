#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string output;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    std::random_device rd;
    dir_ = fs::temp_directory_path() / ("lime_cli_test_" + std::to_string(rd()));
    fs::create_directories(dir_);
    write("small.json", R"({
      "seed": 3,
      "model": {"d": 16, "links": 8, "heads": 2, "layers": 2, "interaction_widths": [16, 8]},
      "synthetic": {"users": 60, "items": 120, "history_min": 5, "history_max": 12, "item_id_attribute": false},
      "train": {"epochs": 1, "attribute_dim": 8},
      "sweep": {"fixed_history": 32, "fixed_candidates": 16, "iterations": 10, "warmup": 0},
      "analysis": {"requests": 2, "history": 16, "candidates": 8, "rank": 8}
    })");
  }
  void TearDown() override { fs::remove_all(dir_); }

  void write(const std::string& name, const std::string& text) { std::ofstream(dir_ / name) << text; }

  std::string read(const fs::path& p) {
    std::ifstream in(dir_ / p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
  }

  Outcome run(const std::string& args) {
    const std::string cmd = "cd '" + dir_.string() + "' && '" LIME_CLI_PATH "' " + args + " 2>&1";
    Outcome r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), p)) r.output += buf.data();
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
  }

  std::set<std::string> files_outside(const std::string& out) {
    std::set<std::string> s;
    for (const auto& e : fs::recursive_directory_iterator(dir_)) {
      const auto rel = fs::relative(e.path(), dir_).string();
      if (rel.rfind(out, 0) != 0) s.insert(rel);
    }
    return s;
  }

  fs::path dir_;
};

std::size_t lines(const std::string& s) { return std::count(s.begin(), s.end(), '\n'); }

TEST_F(Cli, GenDataIsDeterministic) {
  ASSERT_EQ(run("gen-data --config small.json --out a").code, 0);
  ASSERT_EQ(run("gen-data --config small.json --out b").code, 0);
  EXPECT_FALSE(read("a/train.csv").empty());
  EXPECT_EQ(read("a/train.csv"), read("b/train.csv"));
  EXPECT_EQ(read("a/test.csv"), read("b/test.csv"));
  ASSERT_EQ(run("gen-data --config small.json --seed 4 --out c").code, 0);
  EXPECT_NE(read("a/train.csv"), read("c/train.csv"));
}

TEST_F(Cli, TrainCacheScoreEval) {
  ASSERT_EQ(run("gen-data --config small.json --out d").code, 0);
  auto r = run("train --config small.json --model lime-mha --data d/train.csv --test d/test.csv --out m");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir_ / "m/model.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "m/train_log.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "m/metrics.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "m/config.json"));

  r = run("build-cache --config small.json --checkpoint m/model.ckpt --data d/train.csv --out c");
  ASSERT_EQ(r.code, 0) << r.output;
  r = run("score --config small.json --checkpoint m/model.ckpt --cache c/cache.bin --data d/test.csv --out s");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read("s/scores.csv").substr(0, 22), "user_id,item_id,score\n");
  r = run("eval --config small.json --checkpoint m/model.ckpt --data d/test.csv --out e");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(lines(read("e/metrics.csv")), 2u);
}

TEST_F(Cli, ScoreListsItemsMissingFromCache) {
  ASSERT_EQ(run("gen-data --config small.json --out d").code, 0);
  ASSERT_EQ(run("train --config small.json --model lime-xor --data d/train.csv --out m").code, 0);
  // Cache only the items of the first user.
  std::istringstream in(read("d/train.csv"));
  std::string header, line, subset;
  std::getline(in, header);
  subset = header + "\n";
  std::string first_user;
  while (std::getline(in, line)) {
    const auto user = line.substr(0, line.find(','));
    if (first_user.empty()) first_user = user;
    if (user == first_user) subset += line + "\n";
  }
  write("subset.csv", subset);
  ASSERT_EQ(run("build-cache --config small.json --checkpoint m/model.ckpt --data subset.csv --out c").code, 0);
  const auto r = run("score --config small.json --checkpoint m/model.ckpt --cache c/cache.bin --data d/test.csv --out s");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("cache miss for"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(dir_ / "s/scores.csv"));
}

TEST_F(Cli, BenchWritesOneRowPerModelAndGridPoint) {
  const auto r = run("bench --config small.json --axis candidates --grid 16,32,64 --out b");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto csv = read("b/bench.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "model,axis,axis_value,median_ms,p90_ms,flops_stage2,flops_stage3,skipped_reason");
  // default sweep compares one LIME variant against its skyline
  EXPECT_EQ(lines(csv), 1u + 2u * 3u);
  EXPECT_TRUE(fs::exists(dir_ / "b/bench.svg"));

  ASSERT_EQ(run("bench --config small.json --model hstu-sky --axis history --grid 16,32 --out h").code, 0);
  EXPECT_EQ(lines(read("h/bench.csv")), 3u);
}

TEST_F(Cli, AnalyzeSvdOnSkylineAndLime) {
  ASSERT_EQ(run("gen-data --config small.json --out d").code, 0);
  ASSERT_EQ(run("train --config small.json --model hstu-sky --data d/train.csv --out h").code, 0);
  auto r = run("analyze-svd --config small.json --checkpoint h/model.ckpt --data d/test.csv --out a");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read("a/spectrum.csv").substr(0, 27), "label,rank,sigma,cumulative");
  EXPECT_TRUE(fs::exists(dir_ / "a/spectrum.svg"));
  EXPECT_TRUE(fs::exists(dir_ / "a/summary.json"));

  ASSERT_EQ(run("train --config small.json --model mha-sky --data d/train.csv --out ms").code, 0);
  ASSERT_EQ(run("train --config small.json --model lime-mha --data d/train.csv --out ml").code, 0);
  r = run("analyze-svd --config small.json --checkpoint ml/model.ckpt --skyline ms/model.ckpt --out l");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(read("l/summary.json").find("\"decomposition\""), std::string::npos);
}

TEST_F(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate --out x").code, 2);
  write("typo.json", R"({"seed": 1, "model": {"dd": 3}})");
  auto r = run("gen-data --config typo.json --out x");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("dd"), std::string::npos) << r.output;
  write("noseed.json", R"({"model": {"d": 16}})");
  r = run("gen-data --config noseed.json --out x");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("seed"), std::string::npos) << r.output;
  EXPECT_EQ(run("gen-data --config noseed.json --seed 1 --out x").code, 0);
  EXPECT_EQ(run("train --config small.json --model nope --data x/train.csv --out y").code, 2);
  EXPECT_EQ(run("bench --config small.json --axis sideways --grid 16 --out z").code, 2);
}

TEST_F(Cli, RuntimeErrorsExitWithOne) {
  ASSERT_EQ(run("gen-data --config small.json --out d").code, 0);
  const auto r = run("eval --config small.json --checkpoint small.json --data d/test.csv --out e");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.output.rfind("error: ", 0), 0u) << r.output;
}

TEST_F(Cli, WritesOnlyInsideOut) {
  ASSERT_EQ(run("gen-data --config small.json --out d").code, 0);
  const auto before = files_outside("o");
  ASSERT_EQ(run("train --config small.json --model lime-mha --data d/train.csv --out o/m").code, 0);
  ASSERT_EQ(run("build-cache --config small.json --checkpoint o/m/model.ckpt --data d/train.csv --out o/c").code, 0);
  ASSERT_EQ(run("score --config small.json --checkpoint o/m/model.ckpt --cache o/c/cache.bin --data d/test.csv "
                "--out o/s")
                .code,
            0);
  ASSERT_EQ(run("bench --config small.json --axis candidates --grid 16 --out o/b").code, 0);
  ASSERT_EQ(run("analyze-svd --config small.json --checkpoint o/m/model.ckpt --out o/a").code, 0);
  EXPECT_EQ(files_outside("o"), before);
}

}  // namespace
