// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance [work_dir] [--only N,N,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hmnas/checkpoint.hpp"
#include "hmnas/derive.hpp"
#include "hmnas/gradsuite.hpp"
#include "hmnas/masker.hpp"
#include "hmnas/pipeline.hpp"
#include "hmnas/platform.hpp"
#include "hmnas/rng.hpp"

using namespace hmnas;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

void randomize_arch(Supernet& net, Rng& rng) {
  for (int k = 0; k < kNumCellKinds; ++k) {
    for (double& v : net.arch.alpha[k].data()) v = rng.normal();
    for (double& v : net.arch.beta[k].data()) v = rng.normal();
  }
}

fs::path g_work;

fs::path run_dir(const std::string& name) {
  const fs::path d = g_work / name;
  fs::remove_all(d);
  return d;
}

const std::vector<Stage> kAllStages{Stage::train_supernet, Stage::search_mask, Stage::finetune, Stage::derive,
                                    Stage::eval};

// The micro space: one normal cell with a single intermediate node and two ops.
const char* kMicroConfig =
    "search.nodes_per_cell = 4\n"
    "search.num_cells = 1\n"
    "search.reduction_cells = none\n"
    "search.ops = sep_conv_3x3,max_pool_3x3\n"
    "search.init_channels = 4\n"
    "train.epochs = 20\n"
    "masker.epochs = 20\n"
    "masker.batch_size = 16\n"
    "finetune.epochs = 20\n";

// Two intermediate nodes so the top-2 edge choice matters.
const char* kAblationConfig =
    "search.nodes_per_cell = 5\n"
    "search.num_cells = 1\n"
    "search.reduction_cells = none\n"
    "search.ops = sep_conv_3x3,max_pool_3x3,identity\n"
    "search.init_channels = 2\n"
    "train.epochs = 20\n"
    "masker.epochs = 20\n"
    "masker.batch_size = 16\n"
    "finetune.epochs = 20\n"
    "ablation.random_archs = 5\n";

ExperimentConfig config_for(const char* base, const std::string& dataset, std::uint64_t seed, const fs::path& out) {
  ExperimentConfig c = parse_config_string(base);
  apply_overrides(c, {"dataset=" + dataset, "seed=" + std::to_string(seed), "out=" + out.string()});
  return c;
}

// ---------------------------------------------------------------------------

Outcome c1_gradients() {
  const GradSuiteReport r = run_grad_suite(10, 1e-4, 1e-5);
  double worst = 0.0;
  int min_seeds = 1 << 30;
  std::string failed;
  for (const auto& c : r.checks) {
    worst = std::max(worst, c.max_rel_err);
    min_seeds = std::min(min_seeds, c.seeds);
    if (!c.passed) failed += " " + c.name;
  }
  const bool pass = r.passed() && r.seconds < 120.0 && r.checks.size() == 13;
  return {pass, std::to_string(r.checks.size()) + " checks, >=" + std::to_string(min_seeds) +
                    " seeds each, max rel err " + fmt("%.2e", worst) + ", " + fmt("%.1f s", r.seconds) +
                    (failed.empty() ? "" : ", failed:" + failed)};
}

Outcome c2_identity_projection() {
  SearchSpaceSpec spec;  // the default space: 7-node cells, all seven ops, two reduction cells
  spec.num_classes = 4;
  Supernet net = build_supernet(spec, 17);
  Rng rng(2024);
  randomize_arch(net, rng);
  for (auto& b : net.bn) {
    for (double& v : b.mean.data()) v = 0.1 * rng.normal();
    for (double& v : b.var.data()) v = 1.0 + 0.5 * rng.uniform();
  }
  const MaskedView view = project(net, init_masks(net, MaskTrainConfig{}));
  int identical = 0;
  for (int i = 0; i < 100; ++i) {
    const Tensor x = randn({2, 3, 8, 8}, rng);
    const bool training = i % 2 == 0;
    if (supernet_logits(net, x, nullptr, training).bit_equal(view.logits(x, training))) ++identical;
  }
  return {identical == 100, std::to_string(identical) + "/100 batches bit-identical (train and eval mode)"};
}

Outcome c3_straight_through() {
  // loss = (m_bin * w * x - y)^2; the update must be Adam applied to dL/dm_bin
  const double w = 0.7, x = 1.3, y = 0.2, lr = 1e-4, tau = 5e-3;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor real({1}, 1e-2), grad({1});
  AdamState st;
  const ParamRef ref{"m", &real, &grad};
  double m = 0.0, v = 0.0, worst = 0.0;
  for (int t = 1; t <= 50; ++t) {
    const double mb = binarize(real, tau)[0];
    const double g = 2.0 * (mb * w * x - y) * w * x;
    grad[0] = g;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double step = lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    const double expected = std::clamp(real[0] - step, -0.1, 1.0);
    straight_through_update(std::span(&ref, 1), st, lr, -0.1, 1.0);
    worst = std::max(worst, std::abs(real[0] - expected) / std::numeric_limits<double>::epsilon());
  }
  const bool exact = worst <= 4.0;

  // engineered harmful weight: keeping it always raises the loss
  Tensor hreal({1}, 1e-2), hgrad({1});
  AdamState hst;
  const ParamRef href{"m", &hreal, &hgrad};
  int flipped_at = -1;
  for (int step = 1; step <= 100 && flipped_at < 0; ++step) {
    const double mb = binarize(hreal, tau)[0];
    hgrad[0] = 2.0 * (mb * 1.0 * 1.0 - (-1.0)) * 1.0;
    straight_through_update(std::span(&href, 1), hst, 1e-4, -0.1, 1.0);
    if (binarize(hreal, tau)[0] == 0.0) flipped_at = step;
  }
  return {exact && flipped_at > 0 && flipped_at <= 100,
          "50-step trajectory within " + fmt("%.1f", worst) + " eps of the Adam oracle; harmful mask flipped at step " +
              std::to_string(flipped_at)};
}

Outcome c4_threshold_robustness() {
  SearchSpaceSpec spec;
  const Supernet net = build_supernet(spec, 5);
  const HierMasks masks = init_masks(net, MaskTrainConfig{});
  const BinaryMasks ref = masks.binary();
  bool same = true, all_ones = true;
  for (double tau : {1e-4, 1e-3, 5e-3, 1e-2}) {
    HierMasks h = masks;
    h.tau = tau;
    const BinaryMasks b = h.binary();
    for (int k = 0; k < kNumCellKinds; ++k)
      same = same && b.alpha[k].bit_equal(ref.alpha[k]) && b.beta[k].bit_equal(ref.beta[k]);
    for (std::size_t i = 0; i < b.w.size(); ++i) same = same && b.w[i].bit_equal(ref.w[i]);
  }
  for (const auto& t : ref.w)
    for (double v : t.data()) all_ones = all_ones && v == 1.0;
  return {same && all_ones, std::string("binarization identical for tau in {1e-4,1e-3,5e-3,1e-2}: ") +
                                (same ? "yes" : "no") + ", all ones: " + (all_ones ? "yes" : "no")};
}

SearchSpaceSpec micro_spec(int channels, int classes) {
  SearchSpaceSpec s;
  s.nodes_per_cell = 4;
  s.num_cells = 1;
  s.init_channels = channels;
  s.num_classes = classes;
  s.ops = {OpKind::sep_conv_3x3, OpKind::max_pool_3x3};
  s.reduction_cells = std::vector<int>{};
  return s;
}

// The 8 discrete settings of the micro space: each edge off, op 0 or op 1, not both off.
std::vector<BinaryMasks> micro_settings(const Supernet& net) {
  std::vector<BinaryMasks> out;
  for (int c0 = 0; c0 < 3; ++c0)
    for (int c1 = 0; c1 < 3; ++c1) {
      if (c0 == 0 && c1 == 0) continue;
      BinaryMasks m = net.all_ones_masks();
      const int choice[2] = {c0, c1};
      for (int e = 0; e < 2; ++e) {
        m.beta[0][e] = choice[e] ? 1.0 : 0.0;
        for (int o = 0; o < 2; ++o) m.alpha[0][e * 2 + o] = choice[e] == o + 1 ? 1.0 : 0.0;
      }
      out.push_back(std::move(m));
    }
  return out;
}

Outcome c5_micro_oracle() {
  double worst = 0.0;
  int settings = 0, comparisons = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Supernet net = build_supernet(micro_spec(3, 3), 100 + seed);
    Rng rng(derive_seed(seed, "acceptance-c5"));
    randomize_arch(net, rng);
    for (auto& b : net.bn) {
      for (double& v : b.mean.data()) v = 0.1 * rng.normal();
      for (double& v : b.var.data()) v = 1.0 + 0.3 * rng.uniform();
    }
    const auto all = micro_settings(net);
    settings = static_cast<int>(all.size());
    for (const auto& m : all) {
      const DerivedArch a = from_masks(net, m);
      for (int trial = 0; trial < 2; ++trial) {
        const Tensor x = randn({3, 3, 6, 6}, rng);
        for (bool training : {true, false}) {
          worst = std::max(worst, max_abs_diff(supernet_logits(net, x, &m, training), discrete_forward(net, a, x, training)));
          ++comparisons;
        }
      }
    }
  }
  return {settings == 8 && worst < 1e-10, std::to_string(settings) + " settings, " + std::to_string(comparisons) +
                                              " comparisons, max |diff| " + fmt("%.2e", worst)};
}

// Criteria 6 and 7 share these runs.
struct SearchRun {
  double hm_error;
  double best_oracle_error;
  std::vector<double> oracle_errors;
  EvalReport eval;
};
std::vector<SearchRun> g_search_runs;
double g_search_seconds = 0.0;

void ensure_search_runs() {
  if (!g_search_runs.empty()) return;
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const std::string ds = "synthetic:blobs2:" + std::to_string(seed);
    const ExperimentConfig cfg = config_for(kMicroConfig, ds, seed, run_dir("search_seed" + std::to_string(seed)));
    run_pipeline(cfg, kAllStages);
    SearchRun r;
    r.eval = run_eval(cfg);
    r.hm_error = 1.0 - r.eval.final.accuracy;

    // brute-force oracle: every discrete architecture trained from scratch with
    // the whole epoch budget of the pipeline
    const ExperimentData data = prepare_data(cfg);
    SearchSpaceSpec spec = cfg.search;
    spec.in_channels = data.pool.channels();
    spec.num_classes = data.pool.num_classes;
    FinetuneConfig oc = cfg.finetune;
    oc.epochs = cfg.train.epochs + cfg.finetune.epochs;
    oc.lr_init = cfg.train.w_lr_init;
    oc.init_mode = InitMode::random;
    oc.target_loss = 0.0;
    const Supernet shape = build_supernet(spec, 0);
    int k = 0;
    for (const BinaryMasks& m : micro_settings(shape)) {
      oc.seed = derive_seed(seed, "oracle:" + std::to_string(k++));
      FinalModel model = prepare_final_model(shape, m, oc);
      FinetuneState st;
      finetune(model, data.pool, data.split, oc, st);
      std::vector<std::size_t> all(data.test.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      const EvalResult e = evaluate(model.net, &model.masks, data.test, all, oc.batch_size, SplitTag::test);
      r.oracle_errors.push_back(1.0 - e.accuracy);
    }
    r.best_oracle_error = *std::min_element(r.oracle_errors.begin(), r.oracle_errors.end());
    std::printf("  [search seed %llu] hm-nas test error %.4f, best of 8 oracle %.4f, supernet %.4f, params %zu/%zu\n",
                static_cast<unsigned long long>(seed), r.hm_error, r.best_oracle_error,
                1.0 - r.eval.supernet.accuracy, r.eval.final.params, r.eval.supernet.params);
    std::fflush(stdout);
    g_search_runs.push_back(std::move(r));
  }
  g_search_seconds = seconds_since(t0);
}

Outcome c6_search_vs_oracle() {
  ensure_search_runs();
  std::vector<double> gaps;
  for (const auto& r : g_search_runs) gaps.push_back(r.hm_error - r.best_oracle_error);
  const double med = median(gaps);
  return {med <= 0.02 && g_search_seconds < 1800.0,
          "median gap to best enumerated architecture " + fmt("%+.2f pp", 100.0 * med) + " over 5 seeds (limit 2 pp), " +
              fmt("%.0f s", g_search_seconds)};
}

Outcome c7_pruning() {
  ensure_search_runs();
  bool fewer = true;
  std::vector<double> gaps, fractions;
  for (const auto& r : g_search_runs) {
    fewer = fewer && r.eval.final.params < r.eval.supernet.params;
    fractions.push_back(r.eval.params_fraction);
    gaps.push_back((1.0 - r.eval.final.accuracy) - (1.0 - r.eval.supernet.accuracy));
  }
  const double med = median(gaps);
  return {fewer && med <= 0.01, std::string("strictly fewer params on every seed: ") + (fewer ? "yes" : "no") +
                                    ", median kept fraction " + fmt("%.3f", median(fractions)) +
                                    ", median error change after fine-tuning " + fmt("%+.2f pp", 100.0 * med) +
                                    " (limit 1 pp)"};
}

Outcome c8_ablation() {
  int viol_random = 0, viol_warm = 0, viol_levels = 0;
  std::vector<double> warm, cold, multi, single, hm, rnd;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const std::string ds = "synthetic:stripes4:" + std::to_string(seed);
    const ExperimentConfig cfg = config_for(kAblationConfig, ds, seed, run_dir("ablation_seed" + std::to_string(seed)));
    run_pipeline(cfg, std::vector<Stage>{Stage::train_supernet, Stage::search_mask});
    const auto rows = run_ablation(cfg);
    const auto& a = rows[0];
    const auto& b = rows[1];
    const auto& c = rows[2];
    const auto& d = rows[3];
    const auto& e = rows[4];
    if (d.runs != 5) return {false, "random arm ran " + std::to_string(d.runs) + " seeds"};
    viol_random += a.test_error_mean > d.test_error_mean;
    viol_warm += a.epochs_to_target > e.epochs_to_target;
    viol_levels += b.test_error_mean > c.test_error_mean;
    hm.push_back(a.test_error_mean);
    rnd.push_back(d.test_error_mean);
    warm.push_back(a.epochs_to_target);
    cold.push_back(e.epochs_to_target);
    multi.push_back(b.test_error_mean);
    single.push_back(c.test_error_mean);
    std::printf("  [ablation seed %llu] err a=%.4f b=%.4f c=%.4f d=%.4f e=%.4f | epochs-to-target warm=%g random-init=%g\n",
                static_cast<unsigned long long>(seed), a.test_error_mean, b.test_error_mean, c.test_error_mean,
                d.test_error_mean, e.test_error_mean, a.epochs_to_target, e.epochs_to_target);
    std::fflush(stdout);
  }
  const bool pass = viol_random < 4 && viol_warm < 4 && viol_levels < 4;
  double mean_hm = 0, mean_rnd = 0;
  for (double v : hm) mean_hm += v / 5;
  for (double v : rnd) mean_rnd += v / 5;
  return {pass, "(a) mean error hm " + fmt("%.4f", mean_hm) + " vs random " + fmt("%.4f", mean_rnd) + ", violated on " +
                    std::to_string(viol_random) + "/5; (b) median epochs-to-target warm " + fmt("%g", median(warm)) +
                    " vs random init " + fmt("%g", median(cold)) + ", violated on " + std::to_string(viol_warm) +
                    "/5; (c) median error multi " + fmt("%.4f", median(multi)) + " vs single " +
                    fmt("%.4f", median(single)) + ", violated on " + std::to_string(viol_levels) + "/5"};
}

Outcome c9_determinism() {
  const char* det =
      "search.nodes_per_cell = 4\n"
      "search.num_cells = 2\n"
      "search.ops = sep_conv_3x3,max_pool_3x3\n"
      "train.epochs = 12\n"
      "masker.epochs = 4\n"
      "masker.batch_size = 16\n"
      "finetune.epochs = 4\n";
  std::vector<fs::path> dirs;
  for (const char* name : {"determinism_a", "determinism_b"}) {
    dirs.push_back(run_dir(name));
    run_pipeline(config_for(det, "synthetic:blobs2:3", 42, dirs.back()), kAllStages);
  }
  int compared = 0;
  std::string differing;
  for (const auto& entry : fs::directory_iterator(dirs[0])) {
    const fs::path name = entry.path().filename();
    const std::string ext = name.extension().string();
    if (ext != ".csv" && ext != ".ckpt" && ext != ".dot") continue;
    ++compared;
    if (!fs::exists(dirs[1] / name) || read_file(entry.path()) != read_file(dirs[1] / name)) differing += " " + name.string();
  }
  return {differing.empty() && compared >= 12,
          std::to_string(compared) + " artifacts compared" + (differing.empty() ? ", all byte-identical" : ", differ:" + differing)};
}

Outcome c10_warmup_and_splits() {
  const Dataset data = load_dataset("synthetic:blobs2:9:256");
  SearchSpaceSpec spec = micro_spec(4, 2);
  Supernet net = build_supernet(spec, 8);
  TrainConfig cfg;  // default warm-up of 10 epochs
  cfg.epochs = 12;
  cfg.batch_size = 32;
  cfg.seed = 8;
  const ArchParams init = net.arch;
  int frozen_epochs = 0;
  bool moved_after = false;
  std::vector<ProvenanceRecord> prov;
  TrainHooks hooks;
  hooks.provenance = &prov;
  hooks.on_epoch = [&](const Supernet& n, const TrainState& st) {
    bool same = true;
    for (int k = 0; k < kNumCellKinds; ++k)
      same = same && n.arch.alpha[k].bit_equal(init.alpha[k]) && n.arch.beta[k].bit_equal(init.beta[k]);
    if (st.epoch <= cfg.warmup_epochs && same) ++frozen_epochs;
    if (st.epoch > cfg.warmup_epochs && !same) moved_after = true;
  };
  TrainState st;
  train_supernet(net, data, cfg, st, hooks);

  const DataSplit split = split_dataset(data.size(), cfg.train_fraction, cfg.seed);
  const std::set<std::size_t> train(split.train.begin(), split.train.end()), val(split.val.begin(), split.val.end());
  int bad = 0, w_steps = 0, a_steps = 0;
  for (const auto& r : prov) {
    const bool w = r.step == 'w';
    (w ? w_steps : a_steps)++;
    if (r.split != (w ? SplitTag::train : SplitTag::val)) ++bad;
    if (!w && r.epoch < cfg.warmup_epochs) ++bad;
    for (auto i : r.indices)
      if ((w ? train : val).count(i) != 1) ++bad;
  }
  const bool pass = frozen_epochs == cfg.warmup_epochs && bad == 0 && w_steps > 0 && a_steps > 0;
  return {pass, "alpha/beta bit-unchanged through " + std::to_string(frozen_epochs) + "/" +
                    std::to_string(cfg.warmup_epochs) + " warm-up epochs (moved afterwards: " +
                    (moved_after ? "yes" : "no") + "); " + std::to_string(w_steps) + " w batches, " +
                    std::to_string(a_steps) + " alpha/beta batches, " + std::to_string(bad) + " provenance violations"};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  g_work = fs::current_path() / "acceptance_runs";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
    } else {
      g_work = argv[i];
    }
  }
  fs::create_directories(g_work);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, c1_gradients},          {2, c2_identity_projection}, {3, c3_straight_through},
      {4, c4_threshold_robustness}, {5, c5_micro_oracle},      {6, c6_search_vs_oracle},
      {7, c7_pruning},            {8, c8_ablation},            {9, c9_determinism},
      {10, c10_warmup_and_splits},
  };
  int failed = 0;
  for (const auto& [n, fn] : criteria) {
    if (!only.empty() && !only.count(n)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s criterion %d: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", n, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
