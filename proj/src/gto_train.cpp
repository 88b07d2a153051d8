#include "gto/gto_train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "gto/verifier.hpp"

namespace gto {

std::vector<int> Group::indices() const {
  std::vector<int> out(static_cast<std::size_t>(size));
  std::iota(out.begin(), out.end(), start);
  return out;
}

void GTOConfig::validate() const {
  if (group_size < 1) throw std::invalid_argument("group size must be >= 1");
  if (groups_per_seq < 1) throw std::invalid_argument("groups per sequence must be >= 1");
  if (!(clip_eps > 0.0)) throw std::invalid_argument("clip epsilon must be > 0");
  if (!(std_floor > 0.0)) throw std::invalid_argument("std floor must be > 0");
  if (!(loss_weight >= 0.0)) throw std::invalid_argument("loss weight must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  policy.validate();
  reward.validate();
}

LinearSoftmaxModel warmup_phase1(const LinearSoftmaxModel& init, const ConditionalModel& target,
                                 std::span<const TokenSeq> corpus, int epochs, double lr,
                                 WarmupReport* report) {
  if (corpus.empty()) throw std::invalid_argument("warmup needs a nonempty corpus");
  LinearSoftmaxModel model = init;
  for (int e = 0; e < epochs; ++e) {
    double loss_sum = 0.0;
    std::size_t counted = 0;
    for (const auto& seq : corpus) {
      if (seq.empty()) continue;
      const auto ctxs = teacher_forced_contexts(seq);
      loss_sum += token_loss(model, target, ctxs);
      ++counted;
      model.apply_gradient(grad_token_loss(model, target, ctxs), lr);
    }
    if (report) report->epoch_loss.push_back(counted ? loss_sum / static_cast<double>(counted) : 0.0);
  }
  return model;
}

std::vector<Group> sample_groups(int seq_len, int group_size, int max_groups, Rng& rng,
                                 GroupPlacement placement) {
  if (group_size < 1) throw std::invalid_argument("group size must be >= 1");
  if (max_groups < 1 || seq_len < group_size) return {};
  const int count = std::min(max_groups, seq_len / group_size);

  std::vector<Group> groups;
  groups.reserve(static_cast<std::size_t>(count));
  if (placement == GroupPlacement::packed) {
    for (int k = 0; k < count; ++k) groups.push_back({1 + k * group_size, group_size});
    return groups;
  }

  // Collapse each group to one slot: choosing `count` of the remaining slots
  // uniformly is the same as a uniform non-overlapping arrangement.
  const int slots = seq_len - count * (group_size - 1);
  std::vector<int> pool(static_cast<std::size_t>(slots));
  std::iota(pool.begin(), pool.end(), 0);
  for (int k = 0; k < count; ++k) {
    const auto j = static_cast<std::size_t>(k) +
                   rng.uniform_int(static_cast<std::uint64_t>(slots - k));
    std::swap(pool[static_cast<std::size_t>(k)], pool[j]);
  }
  std::sort(pool.begin(), pool.begin() + count);
  for (int k = 0; k < count; ++k) {
    groups.push_back({pool[static_cast<std::size_t>(k)] + k * (group_size - 1) + 1, group_size});
  }
  return groups;
}

std::vector<double> standardize_group(std::span<const double> rewards, double delta) {
  if (rewards.empty()) throw std::invalid_argument("cannot standardize an empty group");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double denom = std::sqrt(var / n) + delta;
  std::vector<double> adv;
  adv.reserve(rewards.size());
  for (double r : rewards) adv.push_back((r - mean) / denom);
  return adv;
}

AcceptedSequence longest_accepted_sequence(const DraftTree& tree, const ConditionalModel& target,
                                           ContextView ctx, Temperature temp, SelectionMode mode) {
  const auto& branches = tree.branches();
  if (branches.empty()) return {};

  if (mode == SelectionMode::greedy_match) {
    const int depth = static_cast<int>(tree.max_branch_length());
    const auto rollout = greedy_rollout(target, ctx, depth);
    const auto match = best_match(tree, rollout);
    if (!match.branch) return {};
    const auto& tokens = branches[*match.branch].tokens;
    return {TokenSeq(tokens.begin(), tokens.begin() + match.length), match.length};
  }

  // Branches are already in (confidence, lexicographic) order, so the first
  // maximum honours the tie-break.
  std::size_t best = 0;
  double best_len = -1.0;
  for (std::size_t i = 0; i < branches.size(); ++i) {
    const double len = branch_expected_acceptance(target, ctx, branches[i].tokens, temp).expected_len;
    if (len > best_len) {
      best_len = len;
      best = i;
    }
  }
  if (best_len <= 0.0) return {};
  const auto& tokens = branches[best].tokens;
  return {tokens, static_cast<int>(tokens.size())};
}

double clamped_sequence_log_prob(const ConditionalModel& model, ContextView ctx,
                                 std::span<const Token> seq) {
  TokenSeq full(ctx.begin(), ctx.end());
  double total = 0.0;
  for (Token t : seq) {
    const auto probs = next_distribution(model, full, Temperature(1.0));
    const double p = probs.at(static_cast<std::size_t>(t));
    total += p > 0.0 ? std::max(std::log(p), kLogProbFloor) : kLogProbFloor;
    full.push_back(t);
  }
  return total;
}

double likelihood_ratio(const ConditionalModel& draft, const ConditionalModel& ref,
                        ContextView ctx, std::span<const Token> seq, int length) {
  const double gap = clamped_sequence_log_prob(draft, ctx, seq) -
                     clamped_sequence_log_prob(ref, ctx, seq);
  return std::exp(gap / std::max(length, 1));
}

GroupSample build_group_sample(const LinearSoftmaxModel& draft, const ConditionalModel& ref,
                               const ConditionalModel& target, std::span<const Token> sequence,
                               const Group& group, const GTOConfig& cfg) {
  if (group.start < 1 || group.start + group.size - 1 > static_cast<int>(sequence.size())) {
    throw std::out_of_range("group does not fit inside the sequence");
  }
  GroupSample sample;
  sample.entries.reserve(static_cast<std::size_t>(group.size));
  for (int pos : group.indices()) {
    GroupEntry e;
    e.position = pos;
    e.context.assign(sequence.begin(), sequence.begin() + pos);

    const auto tree = build_draft_tree(draft, e.context, cfg.policy);
    e.reward = tree_reward(score_tree(target, e.context, tree, cfg.reward_temperature), cfg.reward);
    if (cfg.debias) {
      const auto ref_tree = build_draft_tree(ref, e.context, cfg.policy);
      e.ref_reward =
          tree_reward(score_tree(target, e.context, ref_tree, cfg.reward_temperature), cfg.reward);
    }
    e.debiased = cfg.debias ? debiased_reward(e.reward, e.ref_reward) : e.reward;

    e.accepted = longest_accepted_sequence(tree, target, e.context, cfg.reward_temperature,
                                           cfg.selection);
    e.ref_log_prob = clamped_sequence_log_prob(ref, e.context, e.accepted.tokens);
    const double cur = clamped_sequence_log_prob(draft, e.context, e.accepted.tokens);
    e.ratio = std::exp((cur - e.ref_log_prob) / std::max(e.accepted.length, 1));
    sample.entries.push_back(std::move(e));
  }

  std::vector<double> rewards;
  for (const auto& e : sample.entries) rewards.push_back(e.debiased);
  const auto adv = standardize_group(rewards, cfg.std_floor);
  for (std::size_t i = 0; i < adv.size(); ++i) sample.entries[i].advantage = adv[i];
  return sample;
}

void refresh_ratios(GroupSample& group, const ConditionalModel& draft) {
  for (auto& e : group.entries) {
    const double cur = clamped_sequence_log_prob(draft, e.context, e.accepted.tokens);
    e.ratio = std::exp((cur - e.ref_log_prob) / std::max(e.accepted.length, 1));
  }
}

namespace {

double clip(double s, double eps) { return std::clamp(s, 1.0 - eps, 1.0 + eps); }

// The clipped term wins the min and is flat in s.
bool clip_saturated(double s, double adv, double eps) {
  return (adv > 0.0 && s > 1.0 + eps) || (adv < 0.0 && s < 1.0 - eps);
}

}  // namespace

double gto_surrogate(const GroupSample& group, double eps) {
  if (group.entries.empty()) throw std::invalid_argument("empty group");
  double acc = 0.0;
  for (const auto& e : group.entries) {
    acc += std::min(e.ratio * e.advantage, clip(e.ratio, eps) * e.advantage);
  }
  return -acc / static_cast<double>(group.entries.size());
}

double clip_active_fraction(const GroupSample& group, double eps) {
  if (group.entries.empty()) return 0.0;
  std::size_t active = 0;
  for (const auto& e : group.entries) active += clip_saturated(e.ratio, e.advantage, eps) ? 1 : 0;
  return static_cast<double>(active) / static_cast<double>(group.entries.size());
}

void accumulate_log_prob_grad(const LinearSoftmaxModel& draft, ContextView ctx,
                              std::span<const Token> seq, double scale, std::span<double> grad) {
  const auto v = static_cast<std::size_t>(draft.vocab_size());
  TokenSeq full(ctx.begin(), ctx.end());
  for (Token t : seq) {
    const std::size_t row = draft.row_index(full);
    const auto log_q = draft.row_log_softmax(row);
    // Clamped tokens are flat in the logits.
    if (log_q[static_cast<std::size_t>(t)] > kLogProbFloor) {
      double* g = grad.data() + row * v;
      for (std::size_t i = 0; i < v; ++i) g[i] -= scale * std::exp(log_q[i]);
      g[static_cast<std::size_t>(t)] += scale;
    }
    full.push_back(t);
  }
}

std::vector<double> grad_gto(const LinearSoftmaxModel& draft, const GroupSample& group,
                             double eps) {
  if (group.entries.empty()) throw std::invalid_argument("empty group");
  std::vector<double> grad(draft.logits().size(), 0.0);
  const double m = static_cast<double>(group.entries.size());
  for (const auto& e : group.entries) {
    if (e.advantage == 0.0 || clip_saturated(e.ratio, e.advantage, eps)) continue;
    const double scale = -e.advantage * e.ratio / (m * std::max(e.accepted.length, 1));
    accumulate_log_prob_grad(draft, e.context, e.accepted.tokens, scale, grad);
  }
  return grad;
}

nlohmann::json StepReport::to_json() const {
  return {{"step", step},
          {"token_loss", token_loss},
          {"gto_loss", gto_loss},
          {"mean_abs_advantage", mean_abs_advantage},
          {"mean_ratio", mean_ratio},
          {"clip_active_frac", clip_active_frac},
          {"mean_reward", mean_reward},
          {"mean_ref_reward", mean_ref_reward},
          {"groups", groups}};
}

StepReport train_step(LinearSoftmaxModel& draft, const ConditionalModel& ref,
                      const ConditionalModel& target, std::span<const Token> sequence,
                      const GTOConfig& cfg, Rng& rng) {
  if (sequence.empty()) throw std::invalid_argument("train_step needs a nonempty sequence");
  StepReport report;

  const auto ctxs = teacher_forced_contexts(sequence);
  report.token_loss = token_loss(draft, target, ctxs);
  auto grad = grad_token_loss(draft, target, ctxs);

  const auto groups = sample_groups(static_cast<int>(sequence.size()), cfg.group_size,
                                    cfg.groups_per_seq, rng, cfg.placement);
  if (!groups.empty()) {
    std::vector<double> gto_grad(grad.size(), 0.0);
    double abs_adv = 0.0;
    double ratio_sum = 0.0;
    double clip_sum = 0.0;
    double reward_sum = 0.0;
    double ref_reward_sum = 0.0;
    std::size_t entries = 0;
    for (const auto& g : groups) {
      const auto sample = build_group_sample(draft, ref, target, sequence, g, cfg);
      report.gto_loss += gto_surrogate(sample, cfg.clip_eps);
      const auto gg = grad_gto(draft, sample, cfg.clip_eps);
      for (std::size_t i = 0; i < gg.size(); ++i) gto_grad[i] += gg[i];
      clip_sum += clip_active_fraction(sample, cfg.clip_eps);
      for (const auto& e : sample.entries) {
        abs_adv += std::abs(e.advantage);
        ratio_sum += e.ratio;
        reward_sum += e.reward;
        ref_reward_sum += e.ref_reward;
        ++entries;
      }
    }
    const double k = static_cast<double>(groups.size());
    const double n = static_cast<double>(entries);
    report.groups = groups.size();
    report.gto_loss /= k;
    report.clip_active_frac = clip_sum / k;
    report.mean_abs_advantage = abs_adv / n;
    report.mean_ratio = ratio_sum / n;
    report.mean_reward = reward_sum / n;
    report.mean_ref_reward = ref_reward_sum / n;
    const double w = cfg.loss_weight / k;
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += w * gto_grad[i];
  }

  draft.apply_gradient(grad, cfg.learning_rate);
  report.step = draft.steps();
  return report;
}

Phase2Report run_phase2(LinearSoftmaxModel& draft, const LinearSoftmaxModel& ref,
                        const ConditionalModel& target, std::span<const TokenSeq> corpus,
                        const GTOConfig& cfg, const StepLogger& log) {
  cfg.validate();
  Rng rng(cfg.seed);
  Phase2Report report;
  for (int e = 0; e < cfg.epochs; ++e) {
    double tok = 0.0;
    double gto = 0.0;
    double reward = 0.0;
    std::size_t steps = 0;
    for (const auto& seq : corpus) {
      if (seq.empty()) continue;
      const auto step = train_step(draft, ref, target, seq, cfg, rng);
      if (log) log(step);
      tok += step.token_loss;
      gto += step.gto_loss;
      reward += step.mean_reward;
      ++steps;
    }
    const double n = steps ? static_cast<double>(steps) : 1.0;
    report.epoch_token_loss.push_back(tok / n);
    report.epoch_gto_loss.push_back(gto / n);
    report.epoch_mean_reward.push_back(reward / n);
  }
  return report;
}

}  // namespace gto
