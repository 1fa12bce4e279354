#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hmnas/config.hpp"
#include "hmnas/error.hpp"
#include "hmnas/gradsuite.hpp"
#include "hmnas/pipeline.hpp"
#include "hmnas/platform.hpp"

using namespace hmnas;

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, prerequisite_error = 3, numeric_error = 4 };

struct Common {
  std::string config;
  std::string out;
  std::string seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value config file (defaults if omitted)");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--seed", c.seed, "global seed");
  cmd->add_option("--stage-override", c.overrides, "key=value, repeatable")->allow_extra_args(false);
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : parse_config(c.config);
  std::vector<std::string> ov = c.overrides;
  if (!c.out.empty()) ov.push_back("out=" + c.out);
  if (!c.seed.empty()) ov.push_back("seed=" + c.seed);
  apply_overrides(cfg, ov);
  return cfg;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

int run_check_grad(int seeds) {
  const GradSuiteReport rep = run_grad_suite(seeds);
  std::printf("%-24s %6s %8s %12s\n", "check", "seeds", "skipped", "max_rel_err");
  for (const auto& c : rep.checks)
    std::printf("%-24s %6d %8d %12.3e %s\n", c.name.c_str(), c.seeds, c.skipped, c.max_rel_err, c.passed ? "ok" : "FAIL");
  std::printf("%s in %.1f s\n", rep.passed() ? "all checks passed" : "gradient check FAILED", rep.seconds);
  return rep.passed() ? ok : failure;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"HM-NAS: differentiable architecture search with hierarchical masks"};
  app.require_subcommand(1);

  Common common;
  struct Cmd {
    const char* name;
    const char* help;
  };
  const std::vector<Cmd> stages{
      {"train-supernet", "bilevel supernet training with warm-up"},
      {"search-mask", "learn hierarchical binary masks on the trained supernet"},
      {"finetune", "fine-tune the unmasked weights of the searched network"},
      {"derive", "export the searched architecture (dot graph, histograms, edge importance)"},
      {"eval", "test loss, error and parameter counts before and after masking"},
      {"run", "all five stages in order"},
      {"ablate", "the five-arm comparison table"},
  };
  for (const auto& s : stages) add_common(app.add_subcommand(s.name, s.help), common);
  int grad_seeds = 10;
  app.add_subcommand("check-grad", "finite-difference gradient suite")
      ->add_option("--seeds", grad_seeds, "well-conditioned seeds per check")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return config_error;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "check-grad") return run_check_grad(grad_seeds);
    const ExperimentConfig cfg = load(common);
    if (cmd == "ablate") {
      const auto rows = run_ablation(cfg, log_line);
      std::cout << ablation_csv(rows);
    } else if (cmd == "eval") {
      run_eval(cfg, log_line);
    } else if (cmd == "run") {
      const std::vector<Stage> all{Stage::train_supernet, Stage::search_mask, Stage::finetune, Stage::derive, Stage::eval};
      run_pipeline(cfg, all, log_line);
    } else {
      const Stage s = *parse_stage(cmd);
      run_pipeline(cfg, std::span<const Stage>(&s, 1), log_line);
    }
    return ok;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const SpecError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const PrerequisiteError& e) {
    std::cerr << "prerequisite error: " << e.what() << "\n";
    return prerequisite_error;
  } catch (const NumericError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return numeric_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return failure;
  }
}
