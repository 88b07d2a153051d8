#include "gto/verifier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gto {

TokenSeq greedy_rollout(const ConditionalModel& target, ContextView ctx, int depth) {
  if (depth < 1) throw std::invalid_argument("rollout depth must be >= 1");
  validate_context(target, ctx);
  TokenSeq full(ctx.begin(), ctx.end());
  TokenSeq out;
  out.reserve(static_cast<std::size_t>(depth));
  for (int i = 0; i < depth; ++i) {
    const Token t = argmax_token(target.base_distribution(full));
    out.push_back(t);
    full.push_back(t);
  }
  return out;
}

Rollout draw_rollout(const ConditionalModel& target, ContextView ctx, int depth, Temperature temp,
                     Rng& rng) {
  if (depth < 1) throw std::invalid_argument("rollout depth must be >= 1");
  Rollout r;
  r.tokens = sample_sequence(target, ctx, static_cast<std::size_t>(depth), temp, rng);
  r.log_prob = sequence_log_prob(target, ctx, r.tokens, temp);
  return r;
}

BranchMatch best_match(const DraftTree& tree, std::span<const Token> rollout) {
  BranchMatch m;
  const auto& branches = tree.branches();
  for (std::size_t i = 0; i < branches.size(); ++i) {
    const auto& b = branches[i].tokens;
    const std::size_t n = std::min(b.size(), rollout.size());
    std::size_t lcp = 0;
    while (lcp < n && b[lcp] == rollout[lcp]) ++lcp;
    const int len = static_cast<int>(lcp);
    if (len == 0) continue;
    if (len > m.length) {
      m.length = len;
      m.branch = i;
      m.ties = 0;
    } else if (len == m.length) {
      ++m.ties;
    }
  }
  return m;
}

int acceptance_length(const DraftTree& tree, std::span<const Token> rollout) {
  return best_match(tree, rollout).length;
}

double expected_acceptance_exact(const ConditionalModel& target, ContextView ctx,
                                 const DraftTree& tree, Temperature temp) {
  validate_context(target, ctx);
  const std::size_t depth = tree.max_branch_length();
  if (depth == 0) return 0.0;
  const auto v = static_cast<std::uint64_t>(target.vocab_size());
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < depth; ++i) {
    if (count > kMaxEnumeratedRollouts / v) {
      throw CapacityError("exact acceptance: vocab^depth exceeds the enumeration guard");
    }
    count *= v;
  }

  // Depth-first walk over rollout prefixes; zero-probability subtrees add nothing.
  TokenSeq full(ctx.begin(), ctx.end());
  TokenSeq rollout;
  rollout.reserve(depth);
  double expected = 0.0;
  auto walk = [&](auto&& self, double prob) -> void {
    if (rollout.size() == depth) {
      expected += prob * acceptance_length(tree, rollout);
      return;
    }
    const auto probs = next_distribution(target, full, temp);
    for (std::size_t t = 0; t < probs.size(); ++t) {
      if (probs[t] <= 0.0) continue;
      full.push_back(static_cast<Token>(t));
      rollout.push_back(static_cast<Token>(t));
      self(self, prob * probs[t]);
      rollout.pop_back();
      full.pop_back();
    }
  };
  walk(walk, 1.0);
  return expected;
}

McEstimate expected_acceptance_mc(const ConditionalModel& target, ContextView ctx,
                                  const DraftTree& tree, Temperature temp, std::size_t n_samples,
                                  Rng& rng) {
  if (temp.is_greedy()) throw std::invalid_argument("Monte-Carlo estimate needs T > 0");
  if (n_samples == 0) throw std::invalid_argument("n_samples must be >= 1");
  const int depth = static_cast<int>(std::max<std::size_t>(tree.max_branch_length(), 1));
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    const auto tokens = sample_sequence(target, ctx, static_cast<std::size_t>(depth), temp, rng);
    const double a = acceptance_length(tree, tokens);
    sum += a;
    sum_sq += a * a;
  }
  const double n = static_cast<double>(n_samples);
  McEstimate est;
  est.mean = sum / n;
  if (n_samples > 1) {
    const double var = std::max(0.0, (sum_sq - n * est.mean * est.mean) / (n - 1.0));
    est.std_error = std::sqrt(var / n);
  }
  return est;
}

void CostModel::validate() const {
  if (!(target_pass_cost > 0.0)) throw std::invalid_argument("target pass cost must be > 0");
  if (!(draft_pass_cost >= 0.0)) throw std::invalid_argument("draft pass cost must be >= 0");
}

double DecodeMetrics::tau() const {
  return cycles == 0 ? 0.0 : static_cast<double>(total_tokens) / static_cast<double>(cycles);
}

double DecodeMetrics::speedup_proxy() const {
  return simulated_cost == 0.0
             ? 0.0
             : static_cast<double>(total_tokens) * vanilla_cost_per_token / simulated_cost;
}

double DecodeMetrics::greedy_pruned_frac() const {
  return cycles == 0 ? 0.0 : static_cast<double>(greedy_pruned) / static_cast<double>(cycles);
}

double DecodeMetrics::greedy_accept_match_frac() const {
  return cycles == 0 ? 0.0 : static_cast<double>(greedy_accept_match) / static_cast<double>(cycles);
}

void DecodeMetrics::record_cycle(int emitted) {
  const auto idx = static_cast<std::size_t>(emitted);
  if (per_cycle_histogram.size() <= idx) per_cycle_histogram.resize(idx + 1, 0);
  ++per_cycle_histogram[idx];
  ++cycles;
  total_tokens += emitted;
}

void DecodeMetrics::merge(const DecodeMetrics& other) {
  cycles += other.cycles;
  total_tokens += other.total_tokens;
  simulated_cost += other.simulated_cost;
  vanilla_cost_per_token = other.vanilla_cost_per_token;
  if (per_cycle_histogram.size() < other.per_cycle_histogram.size()) {
    per_cycle_histogram.resize(other.per_cycle_histogram.size(), 0);
  }
  for (std::size_t i = 0; i < other.per_cycle_histogram.size(); ++i) {
    per_cycle_histogram[i] += other.per_cycle_histogram[i];
  }
  greedy_pruned += other.greedy_pruned;
  greedy_accept_match += other.greedy_accept_match;
  lcp_ties += other.lcp_ties;
}

nlohmann::json DecodeMetrics::to_json() const {
  return {{"tau", tau()},
          {"cycles", cycles},
          {"total_tokens", total_tokens},
          {"speedup_proxy", speedup_proxy()},
          {"greedy_pruned_frac", greedy_pruned_frac()},
          {"greedy_accept_match_frac", greedy_accept_match_frac()},
          {"per_cycle_histogram", per_cycle_histogram},
          {"lcp_ties", lcp_ties}};
}

DecodeResult speculative_decode(const ConditionalModel& target, const ConditionalModel& draft,
                                ContextView prompt, std::size_t max_tokens,
                                const TreePolicyConfig& policy, Temperature temp,
                                const CostModel& cost, Rng& rng) {
  if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
  if (target.vocab_size() != draft.vocab_size()) throw std::domain_error("vocab mismatch");
  policy.validate();
  cost.validate();

  DecodeResult result;
  result.metrics.vanilla_cost_per_token = cost.target_pass_cost;
  TokenSeq context(prompt.begin(), prompt.end());
  auto& m = result.metrics;

  while (result.tokens.size() < max_tokens) {
    const auto tree = build_draft_tree(draft, context, policy);
    // One extra position supplies the bonus token after a full-depth match.
    const auto rollout = draw_rollout(target, context, policy.depth + 1, temp, rng);
    const auto match = best_match(tree, rollout.tokens);

    const auto greedy = greedy_branch(tree);
    if (!greedy) ++m.greedy_pruned;
    if (greedy && match.branch && *match.branch == *greedy) ++m.greedy_accept_match;
    m.lcp_ties += match.ties;

    const std::size_t room = max_tokens - result.tokens.size();
    const std::size_t emitted = std::min(static_cast<std::size_t>(match.length) + 1, room);
    for (std::size_t i = 0; i < emitted; ++i) {
      result.tokens.push_back(rollout.tokens[i]);
      context.push_back(rollout.tokens[i]);
    }
    m.record_cycle(static_cast<int>(emitted));
    result.cycle_lengths.push_back(static_cast<int>(emitted));
    m.simulated_cost += cost.target_pass_cost + tree.expanded_depth() * cost.draft_pass_cost;
  }
  return result;
}

}  // namespace gto
