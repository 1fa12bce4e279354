#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "hmnas/checkpoint.hpp"
#include "hmnas/error.hpp"

using namespace hmnas;
namespace fs = std::filesystem;

namespace {

SearchSpaceSpec tiny_spec() {
  SearchSpaceSpec s;
  s.nodes_per_cell = 4;
  s.num_cells = 2;
  s.init_channels = 2;
  s.num_classes = 2;
  s.ops = {OpKind::sep_conv_3x3, OpKind::max_pool_3x3};
  return s;
}

TrainConfig tiny_train(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.warmup_epochs = 2;
  c.batch_size = 32;
  c.seed = 3;
  return c;
}

fs::path tmp(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "hmnas_test_checkpoint";
  fs::create_directories(dir);
  return dir / name;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.storage().data(), b.storage().data(), a.storage().size() * sizeof(double)) == 0;
}

bool same_bits(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!same_bits(a[i], b[i])) return false;
  return true;
}

void check_net(const Supernet& a, const Supernet& b) {
  CHECK(a.spec == b.spec);
  for (int k = 0; k < kNumCellKinds; ++k) {
    CHECK(same_bits(a.arch.alpha[k], b.arch.alpha[k]));
    CHECK(same_bits(a.arch.beta[k], b.arch.beta[k]));
  }
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    CHECK(a.params[i].name == b.params[i].name);
    CHECK(same_bits(a.params[i].value, b.params[i].value));
  }
  REQUIRE(a.bn.size() == b.bn.size());
  for (std::size_t i = 0; i < a.bn.size(); ++i) {
    CHECK(same_bits(a.bn[i].mean, b.bn[i].mean));
    CHECK(same_bits(a.bn[i].var, b.bn[i].var));
  }
}

Checkpoint trained(const Dataset& d) {
  Checkpoint c;
  c.stage = "final";
  c.net = build_supernet(tiny_spec(), 1);
  train_supernet(c.net, d, tiny_train(3), c.train);
  MaskTrainConfig mc;
  mc.epochs = 1;
  mc.batch_size = 32;
  c.masks = init_masks(c.net, mc);
  train_masks(c.net, d, mc, *c.masks, c.mask_state);
  c.final_masks = c.masks->binary();
  c.finetune_state.epochs_to_target = 4;
  c.finetune_state.rng_state = "rng";
  c.config = "seed = 1\n";
  return c;
}

}  // namespace

TEST_CASE("save then load is bit-exact") {
  const Dataset d = load_dataset("synthetic:blobs2:1:96");
  const Checkpoint c = trained(d);
  const fs::path p = tmp("rt.ckpt");
  save_checkpoint(c, p);
  const Checkpoint r = load_checkpoint(p);
  CHECK(r.stage == c.stage);
  CHECK(r.config == c.config);
  check_net(c.net, r.net);
  CHECK(r.train.epoch == c.train.epoch);
  CHECK(r.train.arch_iter == c.train.arch_iter);
  CHECK(r.train.arch_steps == c.train.arch_steps);
  CHECK(same_bits(r.train.w_opt.velocity, c.train.w_opt.velocity));
  CHECK(same_bits(r.train.arch_opt.m, c.train.arch_opt.m));
  CHECK(same_bits(r.train.arch_opt.v, c.train.arch_opt.v));
  CHECK(r.train.arch_opt.step == c.train.arch_opt.step);
  CHECK(r.train.rng_state == c.train.rng_state);
  CHECK(r.train.metrics == c.train.metrics);
  REQUIRE(r.masks);
  CHECK(same_bits(r.masks->w, c.masks->w));
  for (int k = 0; k < kNumCellKinds; ++k) CHECK(same_bits(r.masks->alpha[k], c.masks->alpha[k]));
  CHECK(r.masks->tau == c.masks->tau);
  CHECK(same_bits(r.mask_state.w_opt.m, c.mask_state.w_opt.m));
  CHECK(r.mask_state.metrics == c.mask_state.metrics);
  REQUIRE(r.final_masks);
  CHECK(same_bits(r.final_masks->w, c.final_masks->w));
  CHECK(r.finetune_state.epochs_to_target == 4);
  CHECK(r.finetune_state.rng_state == "rng");
  // and re-encoding gives the same bytes
  CHECK(encode_checkpoint(r) == encode_checkpoint(c));
}

TEST_CASE("resuming at epoch 5 of 10 reproduces the uninterrupted run") {
  const Dataset d = load_dataset("synthetic:blobs2:4:96");
  const TrainConfig cfg = tiny_train(10);

  Supernet straight = build_supernet(tiny_spec(), 2);
  TrainState s_state;
  train_supernet(straight, d, cfg, s_state);

  Checkpoint half;
  half.stage = "supernet";
  half.net = build_supernet(tiny_spec(), 2);
  TrainHooks stop;
  stop.stop_after_epoch = 5;
  train_supernet(half.net, d, cfg, half.train, stop);
  REQUIRE(half.train.epoch == 5);
  const fs::path p = tmp("half.ckpt");
  save_checkpoint(half, p);

  Checkpoint resumed = load_checkpoint(p);
  train_supernet(resumed.net, d, cfg, resumed.train);
  REQUIRE(resumed.train.metrics.size() == s_state.metrics.size());
  CHECK(resumed.train.metrics.back() == s_state.metrics.back());
  CHECK(resumed.train.metrics == s_state.metrics);
  check_net(straight, resumed.net);
}

TEST_CASE("damaged files are rejected without returning state") {
  const Dataset d = load_dataset("synthetic:blobs2:1:64");
  Checkpoint c;
  c.stage = "supernet";
  c.net = build_supernet(tiny_spec(), 1);
  const std::vector<std::uint8_t> good = encode_checkpoint(c);
  CHECK_NOTHROW(decode_checkpoint(good));

  auto trailing = good;
  trailing.push_back(0x42);
  CHECK_THROWS_AS(decode_checkpoint(trailing), IntegrityError);

  auto flipped = good;
  flipped[flipped.size() - 1] ^= 0x01;
  CHECK_THROWS_AS(decode_checkpoint(flipped), IntegrityError);

  auto truncated = good;
  truncated.resize(good.size() - 10);
  CHECK_THROWS_AS(decode_checkpoint(truncated), IntegrityError);

  auto version = good;
  version[4] = 99;
  CHECK_THROWS_AS(decode_checkpoint(version), VersionError);

  auto magic = good;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(magic), FormatError);

  const fs::path p = tmp("trailing.ckpt");
  write_file(p, std::string(trailing.begin(), trailing.end()));
  CHECK_THROWS_AS(load_checkpoint(p), IntegrityError);
}

TEST_CASE("metrics csv round trip keeps every digit") {
  const std::vector<MetricsRow> rows{{"supernet", 1, "train", 0.1 + 0.2, 1.0 / 3.0, 0.025, 1234},
                                     {"supernet", 1, "val", 2.5e-300, 0.0, 1e-3, 0}};
  const fs::path p = tmp("m.csv");
  write_metrics_csv(rows, p);
  CHECK(read_file(p).rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
  CHECK(read_metrics_csv(p) == rows);
}
