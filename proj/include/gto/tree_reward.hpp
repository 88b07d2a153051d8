#pragma once

#include <span>
#include <string>
#include <vector>

#include "gto/lm_core.hpp"
#include "gto/tree_policy.hpp"

namespace gto {

/// Expected acceptance length of one branch under the target.
struct BranchScore {
  std::size_t branch = 0;
  double expected_len = 0.0;
  /// chain[j] = probability that the target reproduces the first j+1 branch tokens.
  std::vector<double> chain;
};

enum class Aggregator { lse, max, sum_avg };

std::string to_string(Aggregator a);
/// Accepts "lse", "max", "sum_avg"; throws std::invalid_argument otherwise.
Aggregator parse_aggregator(const std::string& name);

struct RewardConfig {
  double eta = 1.0;
  Aggregator aggregator = Aggregator::lse;

  void validate() const;
};

BranchScore branch_expected_acceptance(const ConditionalModel& target, ContextView ctx,
                                       std::span<const Token> branch, Temperature temp);

/// Scores every branch of `tree`, in branch order.
std::vector<BranchScore> score_tree(const ConditionalModel& target, ContextView ctx,
                                    const DraftTree& tree, Temperature temp);

/// Aggregated tree reward r_t. Throws std::domain_error on an empty list.
double tree_reward(std::span<const double> lengths, const RewardConfig& cfg);
double tree_reward(std::span<const BranchScore> scores, const RewardConfig& cfg);

/// d r_t / d L_i for the log-sum-exp aggregator: softmax(eta * L).
std::vector<double> grad_tree_reward_wrt_target_chain(std::span<const double> lengths,
                                                      const RewardConfig& cfg);
std::vector<double> grad_tree_reward_wrt_target_chain(std::span<const BranchScore> scores,
                                                      const RewardConfig& cfg);

std::vector<double> expected_lengths(std::span<const BranchScore> scores);

}  // namespace gto
