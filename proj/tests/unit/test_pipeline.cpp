#include <cmath>
#include <filesystem>
#include <regex>
#include <sstream>

#include "doctest.h"
#include "hmnas/checkpoint.hpp"
#include "hmnas/error.hpp"
#include "hmnas/pipeline.hpp"

using namespace hmnas;
namespace fs = std::filesystem;

namespace {

const std::vector<Stage> kAll{Stage::train_supernet, Stage::search_mask, Stage::finetune, Stage::derive, Stage::eval};

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "hmnas_test_pipeline" / name;
  fs::remove_all(d);
  return d;
}

ExperimentConfig small(const fs::path& out) {
  ExperimentConfig c = parse_config_string(
      "dataset = synthetic:blobs2:5:200\n"
      "search.nodes_per_cell = 4\n"
      "search.num_cells = 1\n"
      "search.reduction_cells = none\n"
      "search.ops = sep_conv_3x3,max_pool_3x3\n"
      "train.epochs = 4\n"
      "train.warmup_epochs = 2\n"
      "train.batch_size = 32\n"
      "masker.epochs = 20\n"
      "masker.batch_size = 8\n"
      "masker.lr_w_mask = 1e-3\n"
      "finetune.epochs = 3\n"
      "finetune.batch_size = 32\n"
      "ablation.random_archs = 2\n");
  c.out = out.string();
  return c;
}

bool epoch_ordered(const std::vector<MetricsRow>& rows) {
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].epoch < rows[i - 1].epoch) return false;
    if (rows[i].epoch == rows[i - 1].epoch && rows[i].split == rows[i - 1].split) return false;
  }
  return !rows.empty();
}

}  // namespace

TEST_CASE("stage names") {
  for (Stage s : kAll) CHECK(parse_stage(stage_name(s)) == s);
  CHECK_FALSE(parse_stage("ablate"));
}

TEST_CASE("data is split into disjoint pool and test sets") {
  const ExperimentConfig c = small("unused");
  const ExperimentData d = prepare_data(c);
  CHECK(d.pool.size() + d.test.size() == 200);
  CHECK(d.test.size() == 40);
  CHECK(d.test.mean == d.pool.mean);
  CHECK(d.split.train.size() + d.split.val.size() == d.pool.size());
  const ExperimentData again = prepare_data(c);
  CHECK(again.test.images.storage() == d.test.images.storage());
  CHECK(again.split.train == d.split.train);
}

TEST_CASE("stages demand their prerequisites") {
  const fs::path out = fresh_dir("prereq");
  const ExperimentConfig c = small(out);
  for (Stage s : {Stage::search_mask, Stage::finetune, Stage::derive, Stage::eval}) {
    CHECK_THROWS_AS(run_pipeline(c, std::vector<Stage>{s}), PrerequisiteError);
  }
  CHECK_THROWS_AS(run_ablation(c), PrerequisiteError);
}

TEST_CASE("all stages end to end") {
  const fs::path out = fresh_dir("full");
  const ExperimentConfig c = small(out);
  std::vector<std::string> log;
  run_pipeline(c, kAll, [&](const std::string& s) { log.push_back(s); });
  for (const char* f : {"supernet.ckpt", "masks.ckpt", "final.ckpt", "arch.dot", "supernet_metrics.csv",
                        "masks_metrics.csv", "finetune_metrics.csv", "edges_per_node.csv", "ops_per_edge.csv",
                        "importance.csv", "sparsity.csv", "eval.csv", "config.resolved"})
    CHECK_MESSAGE(fs::exists(out / f), f);
  CHECK(!log.empty());

  for (const char* f : {"supernet_metrics.csv", "masks_metrics.csv", "finetune_metrics.csv"}) {
    CHECK(read_file(out / f).rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
    CHECK_MESSAGE(epoch_ordered(read_metrics_csv(out / f)), f);
  }
  CHECK(parse_config(out / "config.resolved") == c);

  const EvalReport r = run_eval(c);
  CHECK(r.final.params < r.supernet.params);
  CHECK(r.masked.params == r.final.params);
  CHECK(r.params_fraction == static_cast<double>(r.final.params) / r.supernet.params);
  CHECK(std::regex_search(read_file(out / "arch.dot"), std::regex("^digraph arch \\{")));

  SUBCASE("a changed upstream setting invalidates the downstream checkpoints") {
    ExperimentConfig d = c;
    d.masker.tau = 1e-3;
    CHECK_THROWS_AS(run_pipeline(d, std::vector<Stage>{Stage::finetune}), PrerequisiteError);
    CHECK_THROWS_AS(run_eval(d), PrerequisiteError);
    ExperimentConfig e = c;
    e.finetune.epochs = 4;
    CHECK_THROWS_AS(run_eval(e), PrerequisiteError);
    CHECK_NOTHROW(run_pipeline(e, std::vector<Stage>{Stage::finetune}));
  }

  SUBCASE("rerunning finished stages leaves every artifact unchanged") {
    std::vector<std::string> before;
    for (const char* f : {"supernet.ckpt", "masks.ckpt", "final.ckpt", "arch.dot", "finetune_metrics.csv"})
      before.push_back(read_file(out / f));
    run_pipeline(c, kAll);
    int i = 0;
    for (const char* f : {"supernet.ckpt", "masks.ckpt", "final.ckpt", "arch.dot", "finetune_metrics.csv"})
      CHECK_MESSAGE(read_file(out / f) == before[i++], f);
  }

  SUBCASE("ablation table") {
    const auto rows = run_ablation(c);
    REQUIRE(rows.size() == 5);
    const char* arms[] = {"a", "b", "c", "d", "e"};
    for (int i = 0; i < 5; ++i) {
      CHECK(rows[i].arm == arms[i]);
      CHECK(!rows[i].description.empty());
      CHECK(rows[i].params > 0);
      CHECK(std::isfinite(rows[i].test_error_mean));
      CHECK(!std::isnan(rows[i].epochs_to_target));
    }
    CHECK(rows[3].runs == 2);
    CHECK(rows[0].runs == 1);
    CHECK(rows[0].params == static_cast<double>(r.final.params));
    CHECK(rows[0].params == rows[4].params);
    const std::string csv = read_file(out / "ablation.csv");
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == kAblationHeader);
    int n = 0;
    while (std::getline(in, line)) {
      ++n;
      CHECK(std::count(line.begin(), line.end(), ',') == 6);
      CHECK(line.find(",,") == std::string::npos);
    }
    CHECK(n == 5);
  }
}
