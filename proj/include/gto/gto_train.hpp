#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gto/lm_core.hpp"
#include "gto/random.hpp"
#include "gto/tree_policy.hpp"
#include "gto/tree_reward.hpp"

namespace gto {

/// Adjacent training positions {start, ..., start + size - 1}. Position i
/// stands for the prefix x_{1:i}, so positions are 1-based.
struct Group {
  int start = 1;
  int size = 1;

  std::vector<int> indices() const;
};

enum class GroupPlacement { random, packed };

/// How the sequence used by the likelihood ratio is picked from a tree.
enum class SelectionMode {
  expected_length,  ///< branch with the largest expected acceptance length
  greedy_match,     ///< T = 0: branch prefix matched by the greedy target rollout
};

struct GTOConfig {
  int group_size = 8;       ///< m
  int groups_per_seq = 16;  ///< K, further capped at floor(s / m)
  double clip_eps = 0.2;
  double std_floor = 1e-6;  ///< delta
  double loss_weight = 0.5; ///< omega
  double learning_rate = 0.05;
  int epochs = 1;
  std::uint64_t seed = 0;
  bool debias = true;  ///< false uses the raw reward r_i as R_i
  GroupPlacement placement = GroupPlacement::random;
  SelectionMode selection = SelectionMode::expected_length;
  TreePolicyConfig policy{};
  RewardConfig reward{};
  Temperature reward_temperature{};

  void validate() const;
};

// -- Phase I -----------------------------------------------------------------

struct WarmupReport {
  std::vector<double> epoch_loss;  ///< mean per-sequence token loss seen during each epoch
};

/// Token-loss-only training, one gradient step per corpus sequence.
/// Returns the trained model; callers freeze it as the reference drafter.
LinearSoftmaxModel warmup_phase1(const LinearSoftmaxModel& init, const ConditionalModel& target,
                                 std::span<const TokenSeq> corpus, int epochs, double lr,
                                 WarmupReport* report = nullptr);

// -- Phase II building blocks --------------------------------------------------

/// Up to min(K, floor(s/m)) non-overlapping groups; empty when s < m.
/// Random placement is uniform over all non-overlapping arrangements.
std::vector<Group> sample_groups(int seq_len, int group_size, int max_groups, Rng& rng,
                                 GroupPlacement placement = GroupPlacement::random);

inline double debiased_reward(double reward, double ref_reward) { return reward - ref_reward; }

/// (R_i - mean) / (population std + delta).
std::vector<double> standardize_group(std::span<const double> rewards, double delta);

struct AcceptedSequence {
  TokenSeq tokens;
  int length = 0;
};

AcceptedSequence longest_accepted_sequence(const DraftTree& tree, const ConditionalModel& target,
                                           ContextView ctx, Temperature temp,
                                           SelectionMode mode = SelectionMode::expected_length);

/// Per-token log-probabilities below this are clamped when forming ratios.
inline constexpr double kLogProbFloor = -30.0;

/// Sum of log M(seq_k | ctx, seq_<k) with each term clamped at kLogProbFloor.
double clamped_sequence_log_prob(const ConditionalModel& model, ContextView ctx,
                                 std::span<const Token> seq);

/// Geometric-mean likelihood ratio exp((log M - log M0) / max(length, 1)).
double likelihood_ratio(const ConditionalModel& draft, const ConditionalModel& ref,
                        ContextView ctx, std::span<const Token> seq, int length);

struct GroupEntry {
  int position = 0;
  TokenSeq context;
  double reward = 0.0;
  double ref_reward = 0.0;
  double debiased = 0.0;
  double advantage = 0.0;
  AcceptedSequence accepted;
  double ref_log_prob = 0.0;  ///< clamped log M0(accepted | context)
  double ratio = 1.0;
};

struct GroupSample {
  std::vector<GroupEntry> entries;
};

/// Builds current and reference trees for every position of `group`, then
/// fills rewards, advantages, accepted sequences and ratios.
GroupSample build_group_sample(const LinearSoftmaxModel& draft, const ConditionalModel& ref,
                               const ConditionalModel& target, std::span<const Token> sequence,
                               const Group& group, const GTOConfig& cfg);

/// Recomputes every ratio against the current drafter (trees and Ŝ_i fixed).
void refresh_ratios(GroupSample& group, const ConditionalModel& draft);

/// -(1/m) * sum_i min(s_i A_i, clip(s_i, 1-eps, 1+eps) A_i).
double gto_surrogate(const GroupSample& group, double eps);

/// Fraction of terms where the clipped value is selected and differs from s_i A_i.
double clip_active_fraction(const GroupSample& group, double eps);

/// Gradient of gto_surrogate w.r.t. the drafter logits. Only log M(Ŝ_i)
/// carries gradient; trees, advantages and reference terms are constants.
std::vector<double> grad_gto(const LinearSoftmaxModel& draft, const GroupSample& group,
                             double eps);

/// Gradient of log M(seq | ctx) w.r.t. the logits, accumulated into `grad` with weight `scale`.
void accumulate_log_prob_grad(const LinearSoftmaxModel& draft, ContextView ctx,
                              std::span<const Token> seq, double scale, std::span<double> grad);

struct StepReport {
  std::uint64_t step = 0;
  double token_loss = 0.0;
  double gto_loss = 0.0;
  double mean_abs_advantage = 0.0;
  double mean_ratio = 1.0;
  double clip_active_frac = 0.0;
  double mean_reward = 0.0;
  double mean_ref_reward = 0.0;
  std::size_t groups = 0;

  nlohmann::json to_json() const;
};

/// One Algorithm-1 update on a single training sequence: groups, trees,
/// rewards, advantages, ratios, then a gradient step on L_token + omega * L_GTO.
/// The GTO term is averaged over the sequence's groups.
StepReport train_step(LinearSoftmaxModel& draft, const ConditionalModel& ref,
                      const ConditionalModel& target, std::span<const Token> sequence,
                      const GTOConfig& cfg, Rng& rng);

using StepLogger = std::function<void(const StepReport&)>;

struct Phase2Report {
  std::vector<double> epoch_token_loss;
  std::vector<double> epoch_gto_loss;
  std::vector<double> epoch_mean_reward;
};

/// Runs cfg.epochs passes of train_step over the corpus. `ref` is never modified.
Phase2Report run_phase2(LinearSoftmaxModel& draft, const LinearSoftmaxModel& ref,
                        const ConditionalModel& target, std::span<const TokenSeq> corpus,
                        const GTOConfig& cfg, const StepLogger& log = {});

}  // namespace gto
