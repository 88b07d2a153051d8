// gto_lab: command-line harness for the draft-tree training lab.
//
//   gto_lab world   --seed 1 --vocab 16 --order 2 --out target.model
//   gto_lab train   [--config cfg.json] [--set gto.loss_weight=0] --out runs/a
//   gto_lab decode  --target target.model --draft gto.model [--config cfg.json]
//   gto_lab ablate  aggregator|group_size|debias [--config cfg.json] --out runs/b
//   gto_lab report  runs/a/report.json
//
// Exit codes: 0 success, 1 configuration error, 2 runtime error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gto/lab.hpp"
#include "gto/model_io.hpp"

namespace {

using nlohmann::json;
namespace lab = gto::lab;

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("-c,--config", args.path, "JSON config file (comments allowed)");
  cmd->add_option("-s,--set", args.overrides, "Override a config value, e.g. gto.group_size=4")
      ->take_all();
}

lab::ExperimentConfig resolve_config(const ConfigArgs& args, const std::string& out_dir) {
  json j = json::object();
  if (!args.path.empty()) {
    std::ifstream in(args.path);
    if (!in) throw lab::ConfigError("cannot open config " + args.path);
    try {
      j = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw lab::ConfigError(args.path + ": " + e.what());
    }
  }
  for (const auto& o : args.overrides) lab::apply_override(j, o);
  if (!out_dir.empty()) j["output_dir"] = out_dir;
  return lab::config_from_json(j);
}

void write_jsonl_logger(std::ofstream& file, gto::StepLogger& logger) {
  logger = [&file](const gto::StepReport& r) { file << r.to_json().dump() << '\n'; };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Draft-tree policy training lab"};
  app.require_subcommand(1);

  // world
  auto* world = app.add_subcommand("world", "Generate and save a synthetic target model");
  lab::WorldConfig wc;
  std::string world_out = "target.model";
  world->add_option("--seed", wc.seed, "World seed")->capture_default_str();
  world->add_option("--vocab", wc.vocab, "Vocabulary size")->capture_default_str();
  world->add_option("--order", wc.order, "Markov order")->capture_default_str();
  world->add_option("--concentration", wc.concentration, "Dirichlet concentration")
      ->capture_default_str();
  world->add_option("-o,--out", world_out, "Output model file")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Run Phase I and Phase II, evaluate, write a report");
  ConfigArgs train_cfg;
  std::string train_out;
  add_config_options(train, train_cfg);
  train->add_option("-o,--out", train_out, "Output directory");

  // decode
  auto* decode = app.add_subcommand("decode", "Evaluate a saved drafter on held-out prompts");
  ConfigArgs decode_cfg;
  std::string target_path, draft_path;
  add_config_options(decode, decode_cfg);
  decode->add_option("--target", target_path, "Target model file")->required();
  decode->add_option("--draft", draft_path, "Drafter model file")->required();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Sweep one ablation axis");
  ConfigArgs ablate_cfg;
  std::string axis_name, ablate_out;
  add_config_options(ablate, ablate_cfg);
  ablate->add_option("axis", axis_name, "aggregator | group_size | debias")->required();
  ablate->add_option("-o,--out", ablate_out, "Output directory");

  // report
  auto* report = app.add_subcommand("report", "Validate a report and print its tables as CSV");
  std::string report_path;
  report->add_option("report", report_path, "report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*world) {
      const auto target = lab::make_world(wc.seed, wc.vocab, wc.order, wc.concentration);
      gto::save_model(world_out, target);
      std::cout << "wrote " << world_out << '\n';
    } else if (*train) {
      const auto cfg = resolve_config(train_cfg, train_out);
      std::ofstream log_file;
      gto::StepLogger logger;
      if (!cfg.output_dir.empty()) {
        std::filesystem::create_directories(cfg.output_dir);
        log_file.open(std::filesystem::path(cfg.output_dir) / "train_log.jsonl");
        write_jsonl_logger(log_file, logger);
      }
      lab::ExperimentArtifacts artifacts;
      const auto rep = lab::run_experiment(cfg, logger, &artifacts);
      if (!cfg.output_dir.empty()) {
        const std::filesystem::path dir(cfg.output_dir);
        lab::emit_diagnostics(rep, dir);
        gto::save_model(dir / "target.model", *artifacts.target);
        gto::save_model(dir / "reference.model", *artifacts.reference);
        gto::save_model(dir / "gto.model", *artifacts.trained);
      }
      std::cout << lab::render_tables(rep);
    } else if (*decode) {
      const auto cfg = resolve_config(decode_cfg, "");
      const auto target = gto::load_conditional_model(target_path);
      const auto draft = gto::load_conditional_model(draft_path);
      const auto data = lab::make_dataset(*target, cfg.corpus,
                                          gto::derive_seed(cfg.world.seed, 1));
      json out = json::array();
      for (double t : cfg.eval.temperatures) {
        const auto m = lab::evaluate_drafter(*target, *draft, data.prompts, cfg, gto::Temperature(t));
        out.push_back({{"temperature", t}, {"metrics", m.to_json()}});
      }
      std::cout << out.dump(2) << '\n';
    } else if (*ablate) {
      const auto cfg = resolve_config(ablate_cfg, ablate_out);
      const auto rep = lab::run_ablation(cfg, lab::parse_axis(axis_name));
      if (!cfg.output_dir.empty()) lab::emit_diagnostics(rep, cfg.output_dir);
      std::cout << lab::render_tables(rep);
    } else if (*report) {
      std::ifstream in(report_path);
      if (!in) throw std::runtime_error("cannot open " + report_path);
      const auto rep = json::parse(in);
      const auto problems = lab::validate_report(rep);
      for (const auto& p : problems) std::cerr << "invalid report: " << p << '\n';
      if (!problems.empty()) return kExitRuntime;
      std::cout << lab::render_tables(rep);
    }
  } catch (const lab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
