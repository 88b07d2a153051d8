#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include <gtest/gtest.h>

#include "gto/lab.hpp"
#include "test_support.hpp"

namespace gto::lab {
namespace {

using nlohmann::json;

ExperimentConfig tiny_config() {
  json j = {{"world", {{"vocab", 6}, {"order", 2}}},
            {"corpus", {{"sequences", 12}, {"length", 24}, {"eval_prompts", 6}, {"prompt_length", 6},
                        {"eval_tokens", 30}}},
            {"phase1", {{"epochs", 5}}},
            {"policy", {{"depth", 3}, {"layer_topk", 2}, {"leaf_budget", 4}}},
            {"gto", {{"group_size", 4}, {"groups_per_seq", 3}, {"learning_rate", 0.5}}}};
  return config_from_json(j);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(MakeWorld, SameSeedSameTable) {
  EXPECT_EQ(make_world(3, 5, 2, 0.5).table(), make_world(3, 5, 2, 0.5).table());
  EXPECT_NE(make_world(3, 5, 2, 0.5).table(), make_world(4, 5, 2, 0.5).table());
}

TEST(MakeWorld, RowsAreDistributions) {
  const auto w = make_world(9, 7, 2, 0.05);
  for (std::size_t r = 0; r < w.num_rows(); ++r) {
    const auto row = w.row(r);
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-9);
    for (double p : row) EXPECT_GE(p, 0.0);
  }
}

TEST(MakeWorld, LargeConcentrationIsNearlyUniform) {
  const auto w = make_world(5, 8, 2, 1000.0);
  double tv = 0.0;
  for (std::size_t r = 0; r < w.num_rows(); ++r) {
    double d = 0.0;
    for (double p : w.row(r)) d += std::abs(p - 1.0 / 8.0);
    tv += 0.5 * d;
  }
  EXPECT_LT(tv / static_cast<double>(w.num_rows()), 0.05);
}

TEST(MakeWorld, RejectsBadArguments) {
  EXPECT_THROW(make_world(1, 4, 2, 0.0), std::domain_error);
  EXPECT_THROW(make_world(1, 4, 0, 1.0), std::domain_error);
}

TEST(Config, DefaultsMatchToyExperiment) {
  const ExperimentConfig c;
  EXPECT_EQ(c.world.vocab, 16);
  EXPECT_EQ(c.world.order, 2);
  EXPECT_EQ(c.policy.depth, 4);
  EXPECT_EQ(c.policy.layer_topk, 3);
  EXPECT_EQ(c.policy.leaf_budget, 8);
  EXPECT_EQ(c.gto.group_size, 8);
  EXPECT_EQ(c.reward.eta, 1.0);
  EXPECT_EQ(c.gto.loss_weight, 0.5);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTrip) {
  auto c = tiny_config();
  c.policy.token_budget = 7;
  c.reward.aggregator = Aggregator::sum_avg;
  c.gto.debias = false;
  c.eval.temperatures = {0.0, 0.5, 1.0};
  const auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  c.policy.token_budget = std::nullopt;
  EXPECT_EQ(to_json(config_from_json(to_json(c))), to_json(c));
}

TEST(Config, UnknownKeysAndBadValuesAreConfigErrors) {
  EXPECT_THROW(config_from_json({{"wrold", {{"seed", 1}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"gto", {{"groupsize", 4}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"gto", {{"group_size", "four"}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"gto", {{"clip_eps", 0.0}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"eval", {{"temperatures", {-1.0}}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"reward", {{"aggregator", "mean"}}}}), ConfigError);
  EXPECT_THROW(config_from_json(json::array()), ConfigError);
}

TEST(Config, Overrides) {
  json j = json::object();
  apply_override(j, "gto.group_size=4");
  apply_override(j, "reward.aggregator=max");
  apply_override(j, "eval.temperatures=[0.5]");
  apply_override(j, "policy.token_budget=null");
  const auto c = config_from_json(j);
  EXPECT_EQ(c.gto.group_size, 4);
  EXPECT_EQ(c.reward.aggregator, Aggregator::max);
  EXPECT_EQ(c.eval.temperatures, (std::vector<double>{0.5}));
  EXPECT_FALSE(c.policy.token_budget.has_value());
  EXPECT_THROW(apply_override(j, "novalue"), ConfigError);
}

TEST(Config, LoadFileWithComments) {
  const auto dir = std::filesystem::temp_directory_path() / "gto_lab_config_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "cfg.json";
  {
    std::ofstream out(path);
    out << "{\n  // smaller groups\n  \"gto\": {\"group_size\": 2}\n}\n";
  }
  EXPECT_EQ(load_config(path).gto.group_size, 2);
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST(MakeDataset, HeldOutPromptsAvoidCorpusWindows) {
  const auto target = make_world(2, 4, 2, 0.5);
  CorpusConfig cfg;
  cfg.sequences = 30;
  cfg.length = 40;
  cfg.eval_prompts = 20;
  cfg.prompt_length = 7;
  const auto data = make_dataset(target, cfg, 11);
  ASSERT_EQ(data.corpus.size(), 30u);
  ASSERT_EQ(data.prompts.size(), 20u);
  std::set<TokenSeq> windows;
  for (const auto& s : data.corpus) {
    EXPECT_EQ(s.size(), 40u);
    for (std::size_t i = 0; i + 7 <= s.size(); ++i) windows.insert(TokenSeq(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + 7)));
  }
  std::set<TokenSeq> prompts;
  for (const auto& p : data.prompts) {
    EXPECT_EQ(p.size(), 7u);
    EXPECT_EQ(windows.count(p), 0u);
    prompts.insert(p);
  }
  EXPECT_EQ(prompts.size(), data.prompts.size());
}

TEST(MeanConditionalEntropy, UniformWorld) {
  const auto target = make_world(1, 4, 1, 1e9);
  const std::vector<TokenSeq> corpus{{0, 1, 2, 3}, {3, 3}};
  EXPECT_NEAR(mean_conditional_entropy(target, corpus), std::log(4.0), 1e-6);
}

TEST(EvaluateDrafter, PerfectDrafterDiagnostics) {
  const testing::FnModel target(5, [](ContextView ctx) {
    std::vector<double> p(5, 0.0);
    p[static_cast<std::size_t>((ctx.empty() ? 0 : ctx.back() + 2) % 5)] = 1.0;
    return p;
  });
  auto cfg = tiny_config();
  const std::vector<TokenSeq> prompts{{0}, {1, 2}, {4}};
  for (double t : {0.0, 1.0}) {
    const auto m = evaluate_drafter(target, target, prompts, cfg, Temperature(t));
    EXPECT_EQ(m.greedy_pruned_frac(), 0.0);
    EXPECT_EQ(m.greedy_accept_match_frac(), 1.0);
    EXPECT_NEAR(m.tau(), 30.0 / 8.0, 1e-12);  // 7 full cycles of 4 plus a truncated one of 2
  }
}

TEST(RunExperiment, ReportIsValidDeterministicAndConsistent) {
  const auto cfg = tiny_config();
  const auto a = run_experiment(cfg);
  const auto b = run_experiment(cfg);
  EXPECT_EQ(a.dump(), b.dump());
  EXPECT_TRUE(validate_report(a).empty());
  const auto round = json::parse(a.dump());
  EXPECT_TRUE(validate_report(round).empty());
  EXPECT_EQ(round, a);
  EXPECT_EQ(config_from_json(a.at("config")).gto.group_size, 4);

  const auto& eval = a.at("evaluation");
  EXPECT_EQ(eval.size(), 3 * cfg.eval.temperatures.size());
  for (const auto& row : eval) {
    const auto& m = row.at("metrics");
    const auto& hist = m.at("per_cycle_histogram");
    std::int64_t mass = 0;
    for (const auto& h : hist) mass += h.get<std::int64_t>();
    EXPECT_EQ(mass, m.at("cycles").get<std::int64_t>());
    for (const char* f : {"greedy_pruned_frac", "greedy_accept_match_frac"}) {
      EXPECT_GE(m.at(f).get<double>(), 0.0);
      EXPECT_LE(m.at(f).get<double>(), 1.0);
    }
    EXPECT_GE(m.at("tau").get<double>(), 1.0);
  }
}

TEST(RunExperiment, ZeroWeightMatchesControl) {
  auto cfg = tiny_config();
  cfg.gto.loss_weight = 0.0;
  const auto rep = run_experiment(cfg);
  for (const auto& row : rep.at("summary")) {
    EXPECT_EQ(row.at("tau_gto").get<double>(), row.at("tau_control").get<double>());
  }
}

TEST(RunExperiment, ReturnsArtifacts) {
  const auto cfg = tiny_config();
  ExperimentArtifacts art;
  std::size_t steps = 0;
  const auto rep = run_experiment(cfg, [&](const StepReport&) { ++steps; }, &art);
  ASSERT_TRUE(art.target && art.reference && art.trained);
  EXPECT_EQ(steps, static_cast<std::size_t>(cfg.corpus.sequences * cfg.gto.epochs));
  EXPECT_EQ(rep.at("training").at("reference_hash").get<std::uint64_t>(), art.reference->parameter_hash());
  EXPECT_NE(art.trained->parameter_hash(), art.reference->parameter_hash());
}

TEST(RunAblation, AggregatorAxisHasThreeRowsPerTemperature) {
  const auto cfg = tiny_config();
  const auto rep = run_ablation(cfg, AblationAxis::aggregator);
  EXPECT_TRUE(validate_report(rep).empty());
  EXPECT_EQ(rep.at("rows").size(), 3 * cfg.eval.temperatures.size());
}

TEST(RunAblation, GroupSizeAxisCoversPaperValues) {
  const auto rep = run_ablation(tiny_config(), AblationAxis::group_size);
  std::set<int> sizes;
  for (const auto& row : rep.at("rows")) sizes.insert(row.at("config").at("gto").at("group_size").get<int>());
  EXPECT_EQ(sizes, (std::set<int>{1, 4, 8, 16, 32}));
}

TEST(RunAblation, RowsDifferOnlyInTheSweptField) {
  for (auto axis : {AblationAxis::aggregator, AblationAxis::group_size, AblationAxis::debias}) {
    const auto rep = run_ablation(tiny_config(), axis);
    const auto base = rep.at("config");
    for (const auto& row : rep.at("rows")) {
      auto c = row.at("config");
      switch (axis) {
        case AblationAxis::aggregator: c["reward"]["aggregator"] = base["reward"]["aggregator"]; break;
        case AblationAxis::group_size: c["gto"]["group_size"] = base["gto"]["group_size"]; break;
        case AblationAxis::debias: c["gto"]["debias"] = base["gto"]["debias"]; break;
      }
      EXPECT_EQ(c, base) << to_string(axis);
    }
  }
}

TEST(RunAblation, DebiasOffUsesRawRewards) {
  auto cfg = tiny_config();
  auto gto_cfg = cfg.effective_gto();
  gto_cfg.debias = false;
  const auto prepared = prepare(cfg);
  const auto& seq = prepared.data.corpus[0];
  const auto sample = build_group_sample(prepared.reference, prepared.reference, prepared.target, seq, {2, 4}, gto_cfg);
  for (const auto& e : sample.entries) {
    EXPECT_EQ(e.ref_reward, 0.0);
    EXPECT_EQ(e.debiased, e.reward);
  }
  const auto rep = run_ablation(cfg, AblationAxis::debias);
  std::set<std::string> settings;
  for (const auto& row : rep.at("rows")) settings.insert(row.at("setting").get<std::string>());
  EXPECT_EQ(settings, (std::set<std::string>{"debias_on", "debias_off"}));
}

TEST(AblationAxis, Names) {
  for (auto a : {AblationAxis::aggregator, AblationAxis::group_size, AblationAxis::debias}) {
    EXPECT_EQ(parse_axis(to_string(a)), a);
  }
  EXPECT_THROW(parse_axis("eta"), ConfigError);
}

TEST(ValidateReport, FlagsBrokenReports) {
  auto rep = run_experiment(tiny_config());
  EXPECT_TRUE(validate_report(rep).empty());
  auto no_schema = rep;
  no_schema.erase("schema");
  EXPECT_FALSE(validate_report(no_schema).empty());
  auto bad_version = rep;
  bad_version["version"] = 99;
  EXPECT_FALSE(validate_report(bad_version).empty());
  auto bad_metric = rep;
  bad_metric["evaluation"][0]["metrics"]["greedy_pruned_frac"] = 1.5;
  EXPECT_FALSE(validate_report(bad_metric).empty());
  EXPECT_FALSE(validate_report(json::array()).empty());
}

TEST(EmitDiagnostics, WritesReportAndTables) {
  const auto rep = run_experiment(tiny_config());
  const auto dir = std::filesystem::temp_directory_path() / "gto_lab_diag_test";
  std::filesystem::remove_all(dir);
  emit_diagnostics(rep, dir);
  EXPECT_EQ(json::parse(slurp(dir / "report.json")), rep);
  const auto diag = slurp(dir / "diagnostics.csv");
  EXPECT_NE(diag.find("greedy_pruned_frac"), std::string::npos);
  EXPECT_NE(diag.find("greedy_accept_match_frac"), std::string::npos);
  const auto hist = slurp(dir / "histograms.csv");
  EXPECT_FALSE(hist.empty());
  EXPECT_NE(render_tables(rep).find("control"), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(EmitDiagnostics, UnwritableDirectoryThrows) {
  const auto rep = run_experiment(tiny_config());
  EXPECT_ANY_THROW(emit_diagnostics(rep, "/proc/gto_lab_cannot_write_here"));
}

}  // namespace
}  // namespace gto::lab
