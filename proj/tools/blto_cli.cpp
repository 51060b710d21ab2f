// Command-line driver: blto <subcommand> --config FILE [--set key.path=value]...
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

#include "blto/common.hpp"
#include "blto/config.hpp"
#include "blto/report.hpp"
#include "blto/runner.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct CommonArgs {
  std::string config;
  std::vector<std::string> overrides;
  bool force = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("-c,--config", args.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", args.overrides, "Override a config key, e.g. --set victim.epochs=10");
  cmd->add_flag("-f,--force", args.force, "Recompute stages that already completed");
  cmd->add_flag("-q,--quiet", args.quiet, "Only print result paths");
}

blto::Experiment make_experiment(const CommonArgs& args) {
  blto::RunOptions opts;
  opts.force = args.force;
  if (!args.quiet) opts.log = [](const std::string& line) { std::cerr << line << std::endl; };
  return blto::Experiment(blto::load_config(args.config, args.overrides), opts);
}

std::vector<blto::AblationMode> parse_modes(const std::string& list) {
  std::vector<blto::AblationMode> modes;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) modes.push_back(blto::ablation_mode_from_string(item));
  }
  return modes;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bi-level trigger optimization experiments for contrastive-learning backdoors"};
  app.require_subcommand(1);

  CommonArgs trig_args, poison_args, pre_args, eval_args, abl_args;
  auto* trig = app.add_subcommand("optimize-trigger", "Train the trigger generator");
  add_common(trig, trig_args);

  auto* poison = app.add_subcommand("poison", "Export the backdoored training set");
  add_common(poison, poison_args);

  auto* pre = app.add_subcommand("pretrain", "Train victim encoders with per-epoch monitoring");
  add_common(pre, pre_args);

  auto* eval = app.add_subcommand("evaluate", "Re-score trained victims");
  add_common(eval, eval_args);
  int victim_index = -1;
  std::string embeddings;
  eval->add_option("--victim", victim_index, "Victim index in the config (default: all)");
  eval->add_option("--export-embeddings", embeddings, "Write an embedding TSV (victim index suffix added for sweeps)");

  auto* report = app.add_subcommand("report", "Tables and plots from completed runs");
  std::vector<std::string> report_inputs;
  std::string report_out;
  report->add_option("runs", report_inputs, "Run or output directories")->required();
  report->add_option("-o,--out", report_out, "Report directory")->required();

  auto* abl = app.add_subcommand("ablate", "Compare full, no_inner and no_outer trigger optimization");
  add_common(abl, abl_args);
  std::string modes = "full,no_inner,no_outer";
  abl->add_option("--modes", modes, "Comma-separated ablation modes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*trig) {
      auto exp = make_experiment(trig_args);
      std::cout << exp.optimize_trigger().string() << std::endl;
    } else if (*poison) {
      auto exp = make_experiment(poison_args);
      std::cout << exp.poison().string() << std::endl;
    } else if (*pre) {
      auto exp = make_experiment(pre_args);
      for (const auto& d : exp.pretrain()) std::cout << d.string() << std::endl;
    } else if (*eval) {
      auto exp = make_experiment(eval_args);
      const size_t count = exp.config().victims.size();
      if (victim_index >= static_cast<int>(count)) {
        throw blto::ArgumentError("--victim " + std::to_string(victim_index) + " out of range (config has " +
                                  std::to_string(count) + ")");
      }
      for (size_t i = 0; i < count; ++i) {
        if (victim_index >= 0 && static_cast<size_t>(victim_index) != i) continue;
        std::optional<std::filesystem::path> emb;
        if (!embeddings.empty()) {
          emb = victim_index >= 0 || count == 1 ? std::filesystem::path(embeddings)
                                                : std::filesystem::path(embeddings + "." + std::to_string(i));
        }
        std::cout << exp.evaluate(i, emb).dump() << std::endl;
      }
    } else if (*report) {
      std::vector<std::filesystem::path> inputs(report_inputs.begin(), report_inputs.end());
      const auto result = blto::write_report(inputs, report_out);
      for (const auto& f : result.files) std::cout << f.string() << std::endl;
      for (const auto& m : result.missing) std::cerr << "no ledger found in " << m.string() << ", skipped" << std::endl;
      if (!result.missing.empty()) return kExitValidation;
    } else if (*abl) {
      auto cfg = blto::load_config(abl_args.config, abl_args.overrides);
      blto::RunOptions opts;
      opts.force = abl_args.force;
      if (!abl_args.quiet) opts.log = [](const std::string& line) { std::cerr << line << std::endl; };
      std::cout << blto::run_ablation(cfg, parse_modes(modes), opts).string() << std::endl;
    }
  } catch (const blto::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kExitValidation;
  } catch (const blto::ArgumentError& e) {
    std::cerr << "invalid input: " << e.what() << std::endl;
    return kExitValidation;
  } catch (const blto::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << " " << e.record() << std::endl;
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitRuntime;
  }
  return kExitOk;
}
