#include "hmnas/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "hmnas/checkpoint.hpp"
#include "hmnas/error.hpp"
#include "hmnas/masker.hpp"
#include "hmnas/rng.hpp"

namespace hmnas {

namespace fs = std::filesystem;

namespace {

constexpr std::array<std::pair<Stage, const char*>, 5> kStages{{
    {Stage::train_supernet, "train-supernet"},
    {Stage::search_mask, "search-mask"},
    {Stage::finetune, "finetune"},
    {Stage::derive, "derive"},
    {Stage::eval, "eval"},
}};

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

bool has_prefix(const std::string& s, std::string_view p) { return s.rfind(p, 0) == 0; }

std::optional<Checkpoint> load_matching(const fs::path& path, const std::string& stage, const std::string& fp) {
  if (!fs::exists(path)) return std::nullopt;
  Checkpoint c = load_checkpoint(path);
  if (c.stage != stage || c.config != fp) return std::nullopt;
  return c;
}

// A completed checkpoint of an earlier stage, or PrerequisiteError.
Checkpoint require(const fs::path& path, const std::string& stage, const std::string& fp, const char* producer,
                   const char* consumer) {
  if (!fs::exists(path)) {
    throw PrerequisiteError(std::string(consumer) + " needs " + path.string() + "; run " + producer + " first");
  }
  Checkpoint c = load_checkpoint(path);
  if (c.stage != stage) throw PrerequisiteError(path.string() + " holds a '" + c.stage + "' checkpoint, not '" + stage + "'");
  if (c.config != fp) {
    throw PrerequisiteError(path.string() + " was produced under a different configuration; rerun " + producer);
  }
  return c;
}

Checkpoint require_supernet(const ExperimentConfig& cfg, const StagePaths& p, const char* consumer) {
  Checkpoint c = require(p.supernet(), "supernet", stage_fingerprint(cfg, Stage::train_supernet), "train-supernet", consumer);
  if (c.train.epoch < cfg.train.epochs) {
    throw PrerequisiteError("supernet training stopped after epoch " + std::to_string(c.train.epoch) + " of " +
                            std::to_string(cfg.train.epochs) + "; rerun train-supernet");
  }
  return c;
}

Checkpoint require_masks(const ExperimentConfig& cfg, const StagePaths& p, const char* consumer) {
  Checkpoint c = require(p.masks(), "masks", stage_fingerprint(cfg, Stage::search_mask), "search-mask", consumer);
  if (c.mask_state.epoch < cfg.masker.epochs || !c.masks) {
    throw PrerequisiteError("mask search is incomplete; rerun search-mask");
  }
  return c;
}

Checkpoint require_final(const ExperimentConfig& cfg, const StagePaths& p, const char* consumer) {
  Checkpoint c = require(p.final_model(), "final", stage_fingerprint(cfg, Stage::finetune), "finetune", consumer);
  if (c.finetune_state.epoch < cfg.finetune.epochs || !c.final_masks) {
    throw PrerequisiteError("fine-tuning is incomplete; rerun finetune");
  }
  return c;
}

std::string last_row(const std::vector<MetricsRow>& m) {
  std::string s;
  for (auto it = m.rbegin(); it != m.rend() && it->epoch == m.back().epoch; ++it)
    s = " " + it->split + "_loss=" + fmt("%.4f", it->loss) + " " + it->split + "_acc=" + fmt("%.3f", it->accuracy) + s;
  return s;
}

void stage_train_supernet(const ExperimentConfig& cfg, const ExperimentData& data, const StagePaths& p,
                          const Logger& log) {
  const std::string fp = stage_fingerprint(cfg, Stage::train_supernet);
  Checkpoint ck;
  if (auto old = load_matching(p.supernet(), "supernet", fp)) {
    ck = std::move(*old);
    say(log, "train-supernet: resuming at epoch " + std::to_string(ck.train.epoch));
  } else {
    ck.stage = "supernet";
    ck.net = build_supernet(cfg.search, cfg.train.seed);
    ck.config = fp;
  }
  const auto metrics_path = p.dir / "supernet_metrics.csv";
  TrainHooks hooks;
  hooks.on_epoch = [&](const Supernet&, const TrainState& st) {
    save_checkpoint(ck, p.supernet());
    write_metrics_csv(st.metrics, metrics_path);
    say(log, "train-supernet epoch " + std::to_string(st.epoch) + "/" + std::to_string(cfg.train.epochs) +
                 last_row(st.metrics));
  };
  train_supernet(ck.net, data.pool, cfg.train, ck.train, hooks);
  save_checkpoint(ck, p.supernet());
  write_metrics_csv(ck.train.metrics, metrics_path);
}

void write_sparsity(const SparsityReport& r, const fs::path& path) {
  std::string s = "alpha,beta,w,params,params_kept,params_total\n";
  s += fmt("%.17g", r.alpha) + "," + fmt("%.17g", r.beta) + "," + fmt("%.17g", r.w) + "," + fmt("%.17g", r.params) +
       "," + std::to_string(r.params_kept) + "," + std::to_string(r.params_total) + "\n";
  write_file(path, s);
}

Checkpoint stage_search_mask(const ExperimentConfig& cfg, const ExperimentData& data, const StagePaths& p,
                             const Logger& log) {
  const std::string fp = stage_fingerprint(cfg, Stage::search_mask);
  Checkpoint sup = require_supernet(cfg, p, "search-mask");
  Checkpoint ck;
  if (auto old = load_matching(p.masks(), "masks", fp); old && old->masks) {
    ck = std::move(*old);
    say(log, "search-mask: resuming at epoch " + std::to_string(ck.mask_state.epoch));
  } else {
    ck.stage = "masks";
    ck.net = std::move(sup.net);
    ck.train = std::move(sup.train);
    ck.masks = init_masks(ck.net, cfg.masker);
    ck.config = fp;
  }
  const Dataset train = data.pool.subset(data.split.train);
  const auto metrics_path = p.dir / "masks_metrics.csv";
  MaskTrainHooks hooks;
  hooks.on_epoch = [&](const HierMasks&, const MaskTrainState& st) {
    save_checkpoint(ck, p.masks());
    write_metrics_csv(st.metrics, metrics_path);
    say(log, "search-mask epoch " + std::to_string(st.epoch) + "/" + std::to_string(cfg.masker.epochs) +
                 last_row(st.metrics) + " params=" + std::to_string(st.metrics.back().params));
  };
  train_masks(ck.net, train, cfg.masker, *ck.masks, ck.mask_state, hooks);
  save_checkpoint(ck, p.masks());
  write_metrics_csv(ck.mask_state.metrics, metrics_path);
  const SparsityReport r = sparsity_report(ck.net, *ck.masks);
  write_sparsity(r, p.dir / "sparsity.csv");
  say(log, "search-mask: kept " + std::to_string(r.params_kept) + " of " + std::to_string(r.params_total) +
               " parameters");
  if (ck.mask_state.degenerate) say(log, "search-mask: warning, the masked network is degenerate");
  return ck;
}

FinetuneConfig finetune_config(const ExperimentConfig& cfg, const std::vector<MetricsRow>& supernet_metrics) {
  FinetuneConfig f = cfg.finetune;
  if (f.target_loss <= 0.0) f.target_loss = default_target_loss(supernet_metrics);
  return f;
}

void stage_finetune(const ExperimentConfig& cfg, const ExperimentData& data, const StagePaths& p, const Logger& log) {
  const std::string fp = stage_fingerprint(cfg, Stage::finetune);
  Checkpoint ck;
  if (auto old = load_matching(p.final_model(), "final", fp); old && old->final_masks) {
    ck = std::move(*old);
    say(log, "finetune: resuming at epoch " + std::to_string(ck.finetune_state.epoch));
  } else {
    Checkpoint m = require_masks(cfg, p, "finetune");
    ck.stage = "final";
    ck.train = std::move(m.train);
    ck.masks = std::move(m.masks);
    ck.mask_state = std::move(m.mask_state);
    ck.config = fp;
    FinalModel fm = prepare_final_model(m.net, ck.masks->binary(), cfg.finetune);
    ck.net = std::move(fm.net);
    ck.final_masks = std::move(fm.masks);
  }
  const FinetuneConfig fcfg = finetune_config(cfg, ck.train.metrics);
  FinalModel model{std::move(ck.net), *ck.final_masks};
  const auto metrics_path = p.dir / "finetune_metrics.csv";
  FinetuneHooks hooks;
  hooks.on_epoch = [&](const FinalModel& m, const FinetuneState& st) {
    ck.net = m.net;
    save_checkpoint(ck, p.final_model());
    write_metrics_csv(st.metrics, metrics_path);
    say(log, "finetune epoch " + std::to_string(st.epoch) + "/" + std::to_string(fcfg.epochs) + last_row(st.metrics));
  };
  finetune(model, data.pool, data.split, fcfg, ck.finetune_state, hooks);
  ck.net = std::move(model.net);
  save_checkpoint(ck, p.final_model());
  write_metrics_csv(ck.finetune_state.metrics, metrics_path);
  if (ck.finetune_state.epochs_to_target > 0)
    say(log, "finetune: target loss reached after " + std::to_string(ck.finetune_state.epochs_to_target) + " epochs");
}

void stage_derive(const ExperimentConfig& cfg, const StagePaths& p, const Logger& log) {
  const Checkpoint ck = require_masks(cfg, p, "derive");
  DerivedArch arch = from_masks(ck.net, ck.masks->binary());
  attach_importance(arch, ck.net);
  export_dot(arch, p.dir / "arch.dot");
  write_histogram_csvs(op_histogram(arch, CellKind::normal), p.dir / "edges_per_node.csv", p.dir / "ops_per_edge.csv");
  write_importance_csv(edge_importance_report(ck.net), p.dir / "importance.csv");
  std::size_t edges = 0;
  for (const auto& c : arch.cells) edges += c.size();
  say(log, "derive: " + std::to_string(edges) + " surviving edges" + (arch.degenerate() ? " (degenerate)" : ""));
}

ModelScore score(const std::string& name, const Supernet& net, const BinaryMasks* masks, const Dataset& test,
                 int batch) {
  const EvalResult r = evaluate(net, masks, test, iota_n(test.size()), batch, SplitTag::test);
  return {name, r.loss, r.accuracy, count_params(net, masks)};
}

std::string eval_csv(const EvalReport& r) {
  std::string s = "model,loss,accuracy,error,params\n";
  for (const ModelScore* m : {&r.supernet, &r.masked, &r.final})
    s += m->model + "," + fmt("%.17g", m->loss) + "," + fmt("%.17g", m->accuracy) + "," +
         fmt("%.17g", 1.0 - m->accuracy) + "," + std::to_string(m->params) + "\n";
  return s;
}

struct ArmRun {
  double test_error;
  std::size_t params;
  int epochs_to_target;
};

ArmRun finetune_arm(const Supernet& supernet, const BinaryMasks& masks, const FinetuneConfig& fcfg,
                    const ExperimentData& data) {
  FinalModel m = prepare_final_model(supernet, masks, fcfg);
  FinetuneState st;
  finetune(m, data.pool, data.split, fcfg, st);
  const ModelScore s = score("arm", m.net, &m.masks, data.test, fcfg.batch_size);
  return {1.0 - s.accuracy, s.params, st.epochs_to_target};
}

AblationRow summarize(std::string arm, std::string description, const std::vector<ArmRun>& runs) {
  AblationRow r{std::move(arm), std::move(description), static_cast<int>(runs.size())};
  const double n = static_cast<double>(runs.size());
  for (const auto& x : runs) {
    r.test_error_mean += x.test_error / n;
    r.params += static_cast<double>(x.params) / n;
    r.epochs_to_target = x.epochs_to_target < 0 ? std::numeric_limits<double>::infinity()
                                                : r.epochs_to_target + x.epochs_to_target / n;
  }
  if (runs.size() > 1) {
    double ss = 0.0;
    for (const auto& x : runs) ss += (x.test_error - r.test_error_mean) * (x.test_error - r.test_error_mean);
    r.test_error_std = std::sqrt(ss / (n - 1.0));
  }
  return r;
}

}  // namespace

const char* stage_name(Stage s) {
  for (const auto& [k, n] : kStages)
    if (k == s) return n;
  return "?";
}

std::optional<Stage> parse_stage(std::string_view name) {
  for (const auto& [k, n] : kStages)
    if (name == n) return k;
  return std::nullopt;
}

ExperimentData prepare_data(const ExperimentConfig& cfg) {
  const Dataset all = load_dataset(cfg.dataset);
  const DataSplit outer = split_dataset(all.size(), 1.0 - cfg.test_fraction, derive_seed(cfg.seed, "test-split"));
  ExperimentData d;
  d.pool = all.subset(outer.train);
  d.pool.compute_stats();
  d.test = all.subset(outer.val);
  d.test.mean = d.pool.mean;
  d.test.stddev = d.pool.stddev;
  d.split = split_dataset(d.pool.size(), cfg.train.train_fraction, cfg.train.seed);
  return d;
}

ExperimentConfig bind_to_data(ExperimentConfig cfg, const Dataset& data) {
  cfg.search.in_channels = data.channels();
  cfg.search.num_classes = data.num_classes;
  return cfg;
}

std::string stage_fingerprint(const ExperimentConfig& cfg, Stage s) {
  std::vector<std::string_view> prefixes{"dataset ", "seed ", "test_fraction ", "search.", "train."};
  if (s != Stage::train_supernet) prefixes.push_back("masker.");
  if (s != Stage::train_supernet && s != Stage::search_mask) prefixes.push_back("finetune.");
  std::istringstream in(echo_config(cfg));
  std::string line, out;
  while (std::getline(in, line))
    for (auto p : prefixes)
      if (has_prefix(line, p)) {
        out += line + "\n";
        break;
      }
  return out;
}

void run_pipeline(const ExperimentConfig& cfg_in, std::span<const Stage> stages, const Logger& log) {
  cfg_in.validate();
  const ExperimentData data = prepare_data(cfg_in);
  const ExperimentConfig cfg = bind_to_data(cfg_in, data.pool);
  cfg.search.validate();
  const StagePaths p{cfg.out};
  fs::create_directories(p.dir);
  write_file(p.dir / "config.resolved", echo_config(cfg));
  for (Stage s : stages) {
    switch (s) {
      case Stage::train_supernet: stage_train_supernet(cfg, data, p, log); break;
      case Stage::search_mask: stage_search_mask(cfg, data, p, log); break;
      case Stage::finetune: stage_finetune(cfg, data, p, log); break;
      case Stage::derive: stage_derive(cfg, p, log); break;
      case Stage::eval: run_eval(cfg, log); break;
    }
  }
}

EvalReport run_eval(const ExperimentConfig& cfg_in, const Logger& log) {
  cfg_in.validate();
  const ExperimentData data = prepare_data(cfg_in);
  const ExperimentConfig cfg = bind_to_data(cfg_in, data.pool);
  const StagePaths p{cfg.out};
  const Checkpoint fin = require_final(cfg, p, "eval");
  const Checkpoint sup = require_supernet(cfg, p, "eval");
  const int batch = cfg.finetune.batch_size;
  EvalReport r;
  r.supernet = score("supernet", sup.net, nullptr, data.test, batch);
  const BinaryMasks bin = fin.masks->binary();
  r.masked = score("masked", sup.net, &bin, data.test, batch);
  r.final = score("final", fin.net, &*fin.final_masks, data.test, batch);
  r.params_fraction = static_cast<double>(r.final.params) / static_cast<double>(r.supernet.params);
  fs::create_directories(p.dir);
  write_file(p.dir / "eval.csv", eval_csv(r));
  for (const ModelScore* m : {&r.supernet, &r.masked, &r.final})
    say(log, "eval " + m->model + ": test_loss=" + fmt("%.4f", m->loss) + " test_error=" +
                 fmt("%.4f", 1.0 - m->accuracy) + " params=" + std::to_string(m->params));
  say(log, "eval: masked network keeps " + fmt("%.1f", 100.0 * r.params_fraction) + "% of the supernet parameters");
  return r;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg_in, const Logger& log) {
  cfg_in.validate();
  const ExperimentData data = prepare_data(cfg_in);
  const ExperimentConfig cfg = bind_to_data(cfg_in, data.pool);
  const StagePaths p{cfg.out};
  fs::create_directories(p.dir);
  write_file(p.dir / "config.resolved", echo_config(cfg));

  const Checkpoint sup = require_supernet(cfg, p, "ablate");
  std::optional<Checkpoint> mk = load_matching(p.masks(), "masks", stage_fingerprint(cfg, Stage::search_mask));
  if (!mk || !mk->masks || mk->mask_state.epoch < cfg.masker.epochs) {
    say(log, "ablate: no finished mask search, running search-mask");
    mk = stage_search_mask(cfg, data, p, log);
  }
  const Supernet& net = sup.net;
  const FinetuneConfig warm = finetune_config(cfg, sup.train.metrics);
  FinetuneConfig cold = warm;
  cold.init_mode = InitMode::random;
  const BinaryMasks hm = mk->masks->binary();

  std::vector<AblationRow> rows;
  auto arm = [&](const char* name, const char* desc, const std::vector<ArmRun>& runs) {
    rows.push_back(summarize(name, desc, runs));
    const auto& r = rows.back();
    say(log, std::string("ablate arm ") + name + ": test_error=" + fmt("%.4f", r.test_error_mean) + " params=" +
                 fmt("%.0f", r.params) + " epochs_to_target=" + fmt("%g", r.epochs_to_target));
  };
  arm("a", "multi-level encoding with hierarchical masks", {finetune_arm(net, hm, warm, data)});
  arm("b", "multi-level encoding with top-2 heuristic",
      {finetune_arm(net, arch_masks(net, derive_heuristic(net, EncodingLevel::multi)), warm, data)});
  arm("c", "single-level encoding with top-2 heuristic",
      {finetune_arm(net, arch_masks(net, derive_heuristic(net, EncodingLevel::single)), warm, data)});
  std::vector<ArmRun> random_runs;
  for (int i = 0; i < cfg.ablation.random_archs; ++i) {
    const DerivedArch a = sample_random_arch(cfg.search, derive_seed(cfg.seed, "ablation-random:" + std::to_string(i)));
    random_runs.push_back(finetune_arm(net, arch_masks(net, a), warm, data));
  }
  arm("d", "random architectures", random_runs);
  arm("e", "hierarchical masks fine-tuned from random initialization", {finetune_arm(net, hm, cold, data)});

  write_file(p.dir / "ablation.csv", ablation_csv(rows));
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string s = std::string(kAblationHeader) + "\n";
  for (const auto& r : rows) {
    s += r.arm + "," + r.description + "," + std::to_string(r.runs) + "," + fmt("%.17g", r.test_error_mean) + "," +
         fmt("%.17g", r.test_error_std) + "," + fmt("%.17g", r.params) + "," +
         (std::isinf(r.epochs_to_target) ? std::string("inf") : fmt("%.17g", r.epochs_to_target)) + "\n";
  }
  return s;
}

}  // namespace hmnas
