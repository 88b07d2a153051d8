#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "gto/lm_core.hpp"
#include "gto/random.hpp"
#include "gto/tree_policy.hpp"

namespace gto {

/// Raised when an exact enumeration would exceed its size guard.
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Largest number of rollouts expected_acceptance_exact will enumerate.
inline constexpr std::uint64_t kMaxEnumeratedRollouts = std::uint64_t{1} << 20;

struct Rollout {
  TokenSeq tokens;
  double log_prob = 0.0;
};

TokenSeq greedy_rollout(const ConditionalModel& target, ContextView ctx, int depth);

/// Greedy at T = 0, sampled otherwise.
Rollout draw_rollout(const ConditionalModel& target, ContextView ctx, int depth, Temperature temp,
                     Rng& rng);

struct BranchMatch {
  int length = 0;                     ///< accepted tokens (longest common prefix)
  std::optional<std::size_t> branch;  ///< best branch; empty when length == 0
  int ties = 0;                       ///< other branches matching just as far
};

/// Longest common prefix of the rollout against every branch. Among branches
/// that tie, the one listed first (highest confidence) wins.
BranchMatch best_match(const DraftTree& tree, std::span<const Token> rollout);

int acceptance_length(const DraftTree& tree, std::span<const Token> rollout);

/// Exact E[acceptance length] over every target rollout as deep as the
/// longest branch. Throws CapacityError past kMaxEnumeratedRollouts.
double expected_acceptance_exact(const ConditionalModel& target, ContextView ctx,
                                 const DraftTree& tree, Temperature temp);

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

McEstimate expected_acceptance_mc(const ConditionalModel& target, ContextView ctx,
                                  const DraftTree& tree, Temperature temp, std::size_t n_samples,
                                  Rng& rng);

struct CostModel {
  double target_pass_cost = 1.0;
  double draft_pass_cost = 0.05;  ///< per tree layer

  void validate() const;
};

struct DecodeMetrics {
  std::int64_t cycles = 0;
  std::int64_t total_tokens = 0;
  double simulated_cost = 0.0;
  double vanilla_cost_per_token = 1.0;
  std::vector<std::int64_t> per_cycle_histogram;  ///< index = tokens emitted in a cycle
  std::int64_t greedy_pruned = 0;
  std::int64_t greedy_accept_match = 0;
  std::int64_t lcp_ties = 0;

  double tau() const;
  double speedup_proxy() const;
  double greedy_pruned_frac() const;
  double greedy_accept_match_frac() const;

  void record_cycle(int emitted);
  /// Adds another run's counts (same cost model).
  void merge(const DecodeMetrics& other);

  nlohmann::json to_json() const;
};

struct DecodeResult {
  TokenSeq tokens;
  DecodeMetrics metrics;
  std::vector<int> cycle_lengths;  ///< tokens emitted by each cycle, in order
};

/// Drafting/verification loop with rollout-match acceptance and one bonus
/// token per cycle. At T = 0 the output equals greedy target decoding.
DecodeResult speculative_decode(const ConditionalModel& target, const ConditionalModel& draft,
                                ContextView prompt, std::size_t max_tokens,
                                const TreePolicyConfig& policy, Temperature temp,
                                const CostModel& cost, Rng& rng);

}  // namespace gto
