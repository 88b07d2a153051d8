#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gto/random.hpp"

namespace gto {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;
/// Non-owning view of a context x_{1:t}.
using ContextView = std::span<const Token>;

class Vocab {
 public:
  explicit Vocab(int size);
  int size() const { return size_; }
  bool contains(Token t) const { return t >= 0 && t < size_; }

 private:
  int size_;
};

/// Decoding temperature. Zero means deterministic argmax decoding.
class Temperature {
 public:
  constexpr Temperature() = default;
  explicit Temperature(double value);

  static Temperature greedy() { return Temperature(0.0); }
  double value() const { return value_; }
  bool is_greedy() const { return value_ == 0.0; }

 private:
  double value_ = 1.0;
};

/// Any autoregressive next-token distribution over a finite vocabulary.
class ConditionalModel {
 public:
  virtual ~ConditionalModel() = default;

  virtual int vocab_size() const = 0;

  /// Untempered next-token distribution. The context is assumed valid;
  /// use next_distribution() for checked access.
  virtual std::vector<double> base_distribution(ContextView ctx) const = 0;
};

/// Throws std::domain_error if any token of `ctx` is outside [0, V).
void validate_context(const ConditionalModel& model, ContextView ctx);

/// Applies temperature to a probability vector in place: argmax one-hot
/// (lowest id wins ties) at T = 0, p^(1/T) renormalized otherwise.
void apply_temperature(std::vector<double>& probs, Temperature temp);

/// Index of the largest entry; ties go to the lowest index.
Token argmax_token(std::span<const double> probs);

std::vector<double> next_distribution(const ConditionalModel& model, ContextView ctx,
                                      Temperature temp);

TokenSeq sample_sequence(const ConditionalModel& model, ContextView ctx, std::size_t length,
                         Temperature temp, Rng& rng);

/// Sum of per-position log-probabilities of `seq` continuing `ctx`.
/// A zero-probability token yields -infinity.
double sequence_log_prob(const ConditionalModel& model, ContextView ctx,
                         std::span<const Token> seq, Temperature temp);

/// Shared machinery for models that condition on the last `order` tokens.
/// Contexts shorter than the order are left-padded with `pad`.
class WindowModel : public ConditionalModel {
 public:
  WindowModel(int vocab, int order, Token pad);

  int vocab_size() const override { return vocab_; }
  int order() const { return order_; }
  Token pad_token() const { return pad_; }
  std::size_t num_rows() const { return rows_; }

  /// Row of the parameter table selected by the trailing window of `ctx`.
  std::size_t row_index(ContextView ctx) const;

 private:
  int vocab_;
  int order_;
  Token pad_;
  std::size_t rows_;
};

/// Order-o Markov model with an explicit probability table.
class TabularMarkovModel final : public WindowModel {
 public:
  /// `table` is row-major, num_rows() x vocab. Rows must be distributions.
  TabularMarkovModel(int vocab, int order, Token pad, std::vector<double> table);

  std::vector<double> base_distribution(ContextView ctx) const override;

  std::span<const double> row(std::size_t r) const;
  const std::vector<double>& table() const { return table_; }

 private:
  std::vector<double> table_;
};

/// Trainable order-o drafter: one free logit per (window, next token).
class LinearSoftmaxModel final : public WindowModel {
 public:
  /// All-zero logits, i.e. uniform rows.
  LinearSoftmaxModel(int vocab, int order, Token pad);
  LinearSoftmaxModel(int vocab, int order, Token pad, std::vector<double> logits,
                     std::uint64_t steps = 0);

  std::vector<double> base_distribution(ContextView ctx) const override;

  std::vector<double> row_softmax(std::size_t r) const;
  std::vector<double> row_log_softmax(std::size_t r) const;

  const std::vector<double>& logits() const { return logits_; }
  std::span<double> mutable_logits() { return logits_; }

  /// logits -= lr * grad; bumps the step counter.
  void apply_gradient(std::span<const double> grad, double lr);

  std::uint64_t steps() const { return steps_; }

  /// FNV-1a over the raw logit bytes; used to prove a model was not mutated.
  std::uint64_t parameter_hash() const;

 private:
  std::vector<double> logits_;
  std::uint64_t steps_ = 0;
};

/// Mean full-vocabulary cross-entropy H(p_target, p_draft) over contexts,
/// both at T = 1. Throws std::domain_error on an empty context list.
double token_loss(const LinearSoftmaxModel& draft, const ConditionalModel& target,
                  std::span<const ContextView> ctxs);

/// Analytic gradient of token_loss w.r.t. draft logits: (p_draft - p_target)/|ctxs|
/// accumulated into each visited row.
std::vector<double> grad_token_loss(const LinearSoftmaxModel& draft,
                                    const ConditionalModel& target,
                                    std::span<const ContextView> ctxs);

/// Views of every prefix x_{1:i-1}, i = 1..|seq| (lengths 0..|seq|-1).
std::vector<ContextView> teacher_forced_contexts(std::span<const Token> seq);

}  // namespace gto
