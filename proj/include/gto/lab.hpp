#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gto/gto_train.hpp"
#include "gto/lm_core.hpp"
#include "gto/tree_policy.hpp"
#include "gto/tree_reward.hpp"
#include "gto/verifier.hpp"

namespace gto::lab {

inline constexpr int kReportVersion = 1;
inline constexpr const char* kReportSchema = "gto-lab-report";

/// Raised for invalid or unparsable experiment configuration (CLI exit code 1).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct WorldConfig {
  std::uint64_t seed = 1;
  int vocab = 16;
  int order = 2;
  double concentration = 0.3;
};

struct DrafterConfig {
  int order = 1;
};

struct CorpusConfig {
  int sequences = 160;
  int length = 64;  ///< s
  int eval_prompts = 48;
  int prompt_length = 8;
  int eval_tokens = 160;
};

struct Phase1Config {
  int epochs = 30;
  double learning_rate = 2.0;
};

struct EvalConfig {
  std::vector<double> temperatures{0.0, 1.0};
  CostModel cost{};
};

struct ExperimentConfig {
  WorldConfig world;
  DrafterConfig drafter;
  CorpusConfig corpus;
  Phase1Config phase1;
  TreePolicyConfig policy{4, 3, 8, std::nullopt};
  RewardConfig reward{};
  GTOConfig gto{};
  EvalConfig eval;
  std::string output_dir;

  /// GTO settings with the shared policy and reward filled in.
  GTOConfig effective_gto() const;
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Applies "section.key=value" overrides; the value is parsed as JSON when possible.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Synthetic target: every row drawn from a symmetric Dirichlet.
TabularMarkovModel make_world(std::uint64_t seed, int vocab, int order, double concentration);

struct Dataset {
  std::vector<TokenSeq> corpus;
  std::vector<TokenSeq> prompts;
};

/// Training corpus plus held-out prompts that never occur inside a corpus sequence.
Dataset make_dataset(const ConditionalModel& target, const CorpusConfig& cfg, std::uint64_t seed);

/// Mean conditional entropy of the target over the teacher-forced contexts of `corpus`.
double mean_conditional_entropy(const ConditionalModel& target, std::span<const TokenSeq> corpus);

/// Decodes every prompt with common random numbers per (prompt, temperature).
DecodeMetrics evaluate_drafter(const ConditionalModel& target, const ConditionalModel& draft,
                               std::span<const TokenSeq> prompts, const ExperimentConfig& cfg,
                               Temperature temp);

struct TrainedModels {
  TabularMarkovModel target;
  Dataset data;
  LinearSoftmaxModel reference;
  WarmupReport warmup;
};

/// World, corpus and Phase I. Shared by every Phase II variant of one config.
TrainedModels prepare(const ExperimentConfig& cfg);

/// Models produced by run_experiment, for callers that want to save them.
struct ExperimentArtifacts {
  std::optional<TabularMarkovModel> target;
  std::optional<LinearSoftmaxModel> reference;
  std::optional<LinearSoftmaxModel> trained;
};

/// Full pipeline: world, corpus, Phase I, Phase II with and without the GTO term
/// (the omega = 0 run is the control), then evaluation of reference, control and GTO drafters.
nlohmann::json run_experiment(const ExperimentConfig& cfg, const StepLogger& log = {},
                              ExperimentArtifacts* artifacts = nullptr);

enum class AblationAxis { aggregator, group_size, debias };
AblationAxis parse_axis(const std::string& name);
std::string to_string(AblationAxis axis);

/// Sweeps one axis with everything else fixed. Rows: {setting, temperature, tau, speedup_proxy}.
nlohmann::json run_ablation(const ExperimentConfig& cfg, AblationAxis axis);

/// Checks the report layout; returns a list of problems (empty when valid).
std::vector<std::string> validate_report(const nlohmann::json& report);

/// Writes report.json, diagnostics.csv and histograms.csv under `dir`.
void emit_diagnostics(const nlohmann::json& report, const std::filesystem::path& dir);

/// Renders the evaluation and ablation tables of a report as CSV text.
std::string render_tables(const nlohmann::json& report);

}  // namespace gto::lab
