#include "gto/tree_reward.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gto {

std::string to_string(Aggregator a) {
  switch (a) {
    case Aggregator::lse: return "lse";
    case Aggregator::max: return "max";
    case Aggregator::sum_avg: return "sum_avg";
  }
  return "?";
}

Aggregator parse_aggregator(const std::string& name) {
  if (name == "lse") return Aggregator::lse;
  if (name == "max") return Aggregator::max;
  if (name == "sum_avg") return Aggregator::sum_avg;
  throw std::invalid_argument("unknown aggregator '" + name + "'");
}

void RewardConfig::validate() const {
  if (aggregator == Aggregator::lse && !(eta > 0.0 && std::isfinite(eta))) {
    throw std::invalid_argument("lse aggregator needs a finite eta > 0");
  }
}

BranchScore branch_expected_acceptance(const ConditionalModel& target, ContextView ctx,
                                       std::span<const Token> branch, Temperature temp) {
  BranchScore score;
  score.chain.reserve(branch.size());
  TokenSeq full(ctx.begin(), ctx.end());
  double survive = 1.0;
  for (Token t : branch) {
    if (survive > 0.0) {
      const auto probs = next_distribution(target, full, temp);
      survive *= probs.at(static_cast<std::size_t>(t));
    }
    score.chain.push_back(survive);
    score.expected_len += survive;
    full.push_back(t);
  }
  return score;
}

std::vector<BranchScore> score_tree(const ConditionalModel& target, ContextView ctx,
                                    const DraftTree& tree, Temperature temp) {
  std::vector<BranchScore> scores;
  scores.reserve(tree.branches().size());
  for (std::size_t i = 0; i < tree.branches().size(); ++i) {
    auto s = branch_expected_acceptance(target, ctx, tree.branches()[i].tokens, temp);
    s.branch = i;
    scores.push_back(std::move(s));
  }
  return scores;
}

std::vector<double> expected_lengths(std::span<const BranchScore> scores) {
  std::vector<double> out;
  out.reserve(scores.size());
  for (const auto& s : scores) out.push_back(s.expected_len);
  return out;
}

double tree_reward(std::span<const double> lengths, const RewardConfig& cfg) {
  if (lengths.empty()) throw std::domain_error("tree_reward: no branches");
  cfg.validate();
  const double hi = *std::max_element(lengths.begin(), lengths.end());
  switch (cfg.aggregator) {
    case Aggregator::max:
      return hi;
    case Aggregator::sum_avg: {
      double sum = 0.0;
      for (double l : lengths) sum += l;
      return sum / static_cast<double>(lengths.size());
    }
    case Aggregator::lse: {
      double acc = 0.0;
      for (double l : lengths) acc += std::exp(cfg.eta * (l - hi));
      return hi + std::log(acc) / cfg.eta;
    }
  }
  throw std::logic_error("unreachable aggregator");
}

double tree_reward(std::span<const BranchScore> scores, const RewardConfig& cfg) {
  const auto lengths = expected_lengths(scores);
  return tree_reward(lengths, cfg);
}

std::vector<double> grad_tree_reward_wrt_target_chain(std::span<const double> lengths,
                                                      const RewardConfig& cfg) {
  if (lengths.empty()) throw std::domain_error("tree_reward: no branches");
  if (cfg.aggregator != Aggregator::lse) {
    throw std::invalid_argument("reward weights are defined for the lse aggregator only");
  }
  cfg.validate();
  const double hi = *std::max_element(lengths.begin(), lengths.end());
  std::vector<double> w(lengths.size());
  double total = 0.0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    w[i] = std::exp(cfg.eta * (lengths[i] - hi));
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

std::vector<double> grad_tree_reward_wrt_target_chain(std::span<const BranchScore> scores,
                                                      const RewardConfig& cfg) {
  const auto lengths = expected_lengths(scores);
  return grad_tree_reward_wrt_target_chain(lengths, cfg);
}

}  // namespace gto
