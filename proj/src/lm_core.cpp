#include "gto/lm_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace gto {

namespace {

constexpr double kRowTolerance = 1e-9;

double log_sum_exp(std::span<const double> xs) {
  const double hi = *std::max_element(xs.begin(), xs.end());
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

}  // namespace

Vocab::Vocab(int size) : size_(size) {
  if (size < 2) throw std::domain_error("vocabulary needs at least two tokens");
}

Temperature::Temperature(double value) : value_(value) {
  if (!(value >= 0.0) || !std::isfinite(value)) {
    throw std::domain_error("temperature must be finite and nonnegative");
  }
}

void validate_context(const ConditionalModel& model, ContextView ctx) {
  const int v = model.vocab_size();
  for (Token t : ctx) {
    if (t < 0 || t >= v) {
      throw std::domain_error("token id " + std::to_string(t) + " outside vocabulary of size " +
                              std::to_string(v));
    }
  }
}

Token argmax_token(std::span<const double> probs) {
  // max_element returns the first maximum, i.e. the lowest id.
  return static_cast<Token>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

void apply_temperature(std::vector<double>& probs, Temperature temp) {
  if (probs.empty()) return;
  if (temp.is_greedy()) {
    const Token best = argmax_token(probs);
    std::fill(probs.begin(), probs.end(), 0.0);
    probs[static_cast<std::size_t>(best)] = 1.0;
    return;
  }
  if (temp.value() == 1.0) return;

  // p^(1/T) in the log domain so small T does not underflow everything.
  const double inv_t = 1.0 / temp.value();
  double hi = -std::numeric_limits<double>::infinity();
  for (double p : probs) {
    if (p > 0.0) hi = std::max(hi, std::log(p) * inv_t);
  }
  double total = 0.0;
  for (double& p : probs) {
    p = p > 0.0 ? std::exp(std::log(p) * inv_t - hi) : 0.0;
    total += p;
  }
  for (double& p : probs) p /= total;
}

std::vector<double> next_distribution(const ConditionalModel& model, ContextView ctx,
                                      Temperature temp) {
  validate_context(model, ctx);
  auto probs = model.base_distribution(ctx);
  apply_temperature(probs, temp);
  return probs;
}

TokenSeq sample_sequence(const ConditionalModel& model, ContextView ctx, std::size_t length,
                         Temperature temp, Rng& rng) {
  TokenSeq full(ctx.begin(), ctx.end());
  full.reserve(ctx.size() + length);
  for (std::size_t i = 0; i < length; ++i) {
    const auto probs = next_distribution(model, full, temp);
    const Token next = temp.is_greedy() ? argmax_token(probs) : rng.categorical(probs);
    full.push_back(next);
  }
  return TokenSeq(full.begin() + static_cast<std::ptrdiff_t>(ctx.size()), full.end());
}

double sequence_log_prob(const ConditionalModel& model, ContextView ctx,
                         std::span<const Token> seq, Temperature temp) {
  TokenSeq full(ctx.begin(), ctx.end());
  double total = 0.0;
  for (Token t : seq) {
    const auto probs = next_distribution(model, full, temp);
    if (t < 0 || t >= model.vocab_size()) throw std::domain_error("token outside vocabulary");
    const double p = probs[static_cast<std::size_t>(t)];
    if (p <= 0.0) return -std::numeric_limits<double>::infinity();
    total += std::log(p);
    full.push_back(t);
  }
  return total;
}

// ---------------------------------------------------------------------------

WindowModel::WindowModel(int vocab, int order, Token pad) : vocab_(vocab), order_(order), pad_(pad) {
  static_cast<void>(Vocab(vocab));
  if (order < 0 || order > 6) throw std::domain_error("window order must be in [0, 6]");
  if (pad < 0 || pad >= vocab) throw std::domain_error("padding token outside vocabulary");
  rows_ = 1;
  for (int i = 0; i < order; ++i) rows_ *= static_cast<std::size_t>(vocab);
}

std::size_t WindowModel::row_index(ContextView ctx) const {
  std::size_t row = 0;
  const auto n = static_cast<std::ptrdiff_t>(ctx.size());
  for (int j = 0; j < order_; ++j) {
    // Window slot j holds ctx[n - order + j], or pad when that is before the start.
    const std::ptrdiff_t pos = n - order_ + j;
    const Token t = pos >= 0 ? ctx[static_cast<std::size_t>(pos)] : pad_;
    row = row * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(t);
  }
  return row;
}

TabularMarkovModel::TabularMarkovModel(int vocab, int order, Token pad, std::vector<double> table)
    : WindowModel(vocab, order, pad), table_(std::move(table)) {
  if (table_.size() != num_rows() * static_cast<std::size_t>(vocab)) {
    throw std::domain_error("tabular model: table size does not match vocab^order x vocab");
  }
  for (std::size_t r = 0; r < num_rows(); ++r) {
    const auto probs = row(r);
    double sum = 0.0;
    for (double p : probs) {
      if (!(p >= 0.0)) throw std::domain_error("tabular model: negative or NaN probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kRowTolerance) {
      throw std::domain_error("tabular model: row " + std::to_string(r) + " does not sum to 1");
    }
  }
}

std::span<const double> TabularMarkovModel::row(std::size_t r) const {
  const auto v = static_cast<std::size_t>(vocab_size());
  return std::span<const double>(table_).subspan(r * v, v);
}

std::vector<double> TabularMarkovModel::base_distribution(ContextView ctx) const {
  const auto probs = row(row_index(ctx));
  return {probs.begin(), probs.end()};
}

LinearSoftmaxModel::LinearSoftmaxModel(int vocab, int order, Token pad)
    : WindowModel(vocab, order, pad), logits_(num_rows() * static_cast<std::size_t>(vocab), 0.0) {}

LinearSoftmaxModel::LinearSoftmaxModel(int vocab, int order, Token pad, std::vector<double> logits,
                                       std::uint64_t steps)
    : WindowModel(vocab, order, pad), logits_(std::move(logits)), steps_(steps) {
  if (logits_.size() != num_rows() * static_cast<std::size_t>(vocab)) {
    throw std::domain_error("softmax model: logit count does not match vocab^order x vocab");
  }
  for (double x : logits_) {
    if (!std::isfinite(x)) throw std::domain_error("softmax model: non-finite logit");
  }
}

std::vector<double> LinearSoftmaxModel::row_log_softmax(std::size_t r) const {
  const auto v = static_cast<std::size_t>(vocab_size());
  std::span<const double> z(logits_.data() + r * v, v);
  const double lse = log_sum_exp(z);
  std::vector<double> out(v);
  for (std::size_t i = 0; i < v; ++i) out[i] = z[i] - lse;
  return out;
}

std::vector<double> LinearSoftmaxModel::row_softmax(std::size_t r) const {
  auto out = row_log_softmax(r);
  for (double& x : out) x = std::exp(x);
  return out;
}

std::vector<double> LinearSoftmaxModel::base_distribution(ContextView ctx) const {
  return row_softmax(row_index(ctx));
}

void LinearSoftmaxModel::apply_gradient(std::span<const double> grad, double lr) {
  if (grad.size() != logits_.size()) throw std::invalid_argument("gradient shape mismatch");
  for (std::size_t i = 0; i < logits_.size(); ++i) logits_[i] -= lr * grad[i];
  ++steps_;
}

std::uint64_t LinearSoftmaxModel::parameter_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double x : logits_) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &x, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------

double token_loss(const LinearSoftmaxModel& draft, const ConditionalModel& target,
                  std::span<const ContextView> ctxs) {
  if (ctxs.empty()) throw std::domain_error("token_loss: empty context list");
  if (draft.vocab_size() != target.vocab_size()) throw std::domain_error("vocab mismatch");
  double total = 0.0;
  for (const auto& ctx : ctxs) {
    validate_context(target, ctx);
    const auto p_target = target.base_distribution(ctx);
    const auto log_q = draft.row_log_softmax(draft.row_index(ctx));
    for (std::size_t v = 0; v < p_target.size(); ++v) {
      if (p_target[v] > 0.0) total -= p_target[v] * log_q[v];
    }
  }
  return total / static_cast<double>(ctxs.size());
}

std::vector<double> grad_token_loss(const LinearSoftmaxModel& draft,
                                    const ConditionalModel& target,
                                    std::span<const ContextView> ctxs) {
  if (ctxs.empty()) throw std::domain_error("grad_token_loss: empty context list");
  if (draft.vocab_size() != target.vocab_size()) throw std::domain_error("vocab mismatch");
  const auto v = static_cast<std::size_t>(draft.vocab_size());
  const double scale = 1.0 / static_cast<double>(ctxs.size());
  std::vector<double> grad(draft.logits().size(), 0.0);
  for (const auto& ctx : ctxs) {
    validate_context(target, ctx);
    const auto p_target = target.base_distribution(ctx);
    const std::size_t row = draft.row_index(ctx);
    const auto q = draft.row_softmax(row);
    double* g = grad.data() + row * v;
    for (std::size_t i = 0; i < v; ++i) g[i] += (q[i] - p_target[i]) * scale;
  }
  return grad;
}

std::vector<ContextView> teacher_forced_contexts(std::span<const Token> seq) {
  std::vector<ContextView> out;
  out.reserve(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) out.push_back(seq.first(i));
  return out;
}

}  // namespace gto
