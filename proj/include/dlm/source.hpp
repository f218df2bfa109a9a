#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dlm/core.hpp"
#include "dlm/random.hpp"

namespace dlm {

/// Order-1 or order-2 Markov chain over a dense vocabulary.
///
/// An optional reset token models structural markers (block headers). It has
/// zero mass in every distribution, is never sampled, scores with probability
/// one wherever it is observed, and returns the chain to its initial state.
class MarkovSource {
 public:
  /// Order 1: `transition` is V*V row-major, p(next | prev).
  /// Order 2: `second` is V*V, p(y1 | y0); `transition` is V*V*V, p(y_i | y_{i-2}, y_{i-1}).
  MarkovSource(int order, std::size_t vocab_size, std::vector<double> initial,
               std::vector<double> transition, std::vector<double> second = {},
               std::optional<Token> reset_token = std::nullopt);

  int order() const noexcept { return order_; }
  std::size_t vocab_size() const noexcept { return vocab_size_; }
  const std::optional<Token>& reset_token() const noexcept { return reset_token_; }
  const std::vector<double>& initial() const noexcept { return initial_; }
  const std::vector<double>& transition() const noexcept { return transition_; }
  const std::vector<double>& second() const noexcept { return second_; }

  /// Initial distribution selected by a prompt id; unknown or empty ids fall
  /// back to the unconditioned initial vector.
  const std::vector<double>& initial_for(std::string_view prompt) const;
  void add_prompt(const std::string& prompt, std::vector<double> initial);
  const std::map<std::string, std::vector<double>, std::less<>>& prompts() const noexcept {
    return prompts_;
  }

  /// Rows raised to 1/tau and renormalised (tau == 1 is the identity).
  MarkovSource tempered(double tau) const;
  /// Every row mixed with the uniform distribution over non-reset tokens.
  MarkovSource smoothed(double weight) const;

  /// Preset description used in manifests and config round-trips.
  const nlohmann::json& description() const noexcept { return description_; }
  void set_description(nlohmann::json d) { description_ = std::move(d); }

 private:
  void validate() const;
  MarkovSource map_rows(const auto& fn) const;

  int order_;
  std::size_t vocab_size_;
  std::vector<double> initial_;
  std::vector<double> transition_;
  std::vector<double> second_;
  std::optional<Token> reset_token_;
  std::map<std::string, std::vector<double>, std::less<>> prompts_;
  nlohmann::json description_;
};

/// Lifts a source to a first-order chain over "history states" so that every
/// exact algorithm can treat order 1 and order 2 alike. State 0 is the fresh
/// state (nothing emitted since the start or the last reset).
class ChainView {
 public:
  ChainView(const MarkovSource& source, std::string_view prompt = {});

  static constexpr std::size_t fresh = 0;
  std::size_t num_states() const noexcept { return num_states_; }
  std::size_t vocab_size() const noexcept { return source_->vocab_size(); }
  bool is_reset(Token y) const noexcept { return reset_ && *reset_ == y; }

  double prob(std::size_t state, Token y) const;
  std::size_t next(std::size_t state, Token y) const;

 private:
  const MarkovSource* source_;
  const std::vector<double>* initial_;
  std::optional<Token> reset_;
  std::size_t num_states_;
};

/// Named presets. All are order 1 with a uniform initial distribution unless
/// `start` pins the first token.
MarkovSource make_iid(std::size_t vocab_size, std::vector<double> probs = {});
MarkovSource make_sticky(std::size_t vocab_size, double stay);
MarkovSource make_cycle(std::size_t vocab_size, std::optional<Token> start = std::nullopt);
/// y' = y + 1 mod V with probability 1 - epsilon, otherwise y' = 0.
MarkovSource make_lossy_counter(std::size_t vocab_size, double epsilon,
                                std::optional<Token> start = std::nullopt);
/// Random rows drawn from a symmetric Dirichlet(alpha) with the given seed.
MarkovSource make_random_chain(int order, std::size_t vocab_size, std::uint64_t seed,
                               double alpha = 1.0);
/// Copy of `source` with one extra token id V acting as the reset token.
MarkovSource with_reset_token(const MarkovSource& source);

/// Builds a source from a preset object: {order, V, kind, parameters, seed,
/// reset_token, prompts}. Throws ConfigError with the offending key path.
MarkovSource source_from_json(const nlohmann::json& config, const std::string& path = "source");

enum class ConfidenceKind { top1, margin };

struct PositionPosterior {
  std::size_t position = 0;
  std::vector<double> probs;
  double confidence = 0.0;
  Token argmax = 0;
  /// Accepted Monte Carlo samples behind the estimate; 0 for exact routes.
  std::size_t samples = 0;
};

struct Posterior {
  /// One entry per masked position, ascending by position.
  std::vector<PositionPosterior> entries;
  /// False when the unmasked evidence had probability zero under the model
  /// and the denoiser fell back to a smoothed model.
  bool evidence_consistent = true;

  const PositionPosterior* find(std::size_t position) const;
  const PositionPosterior& at(std::size_t position) const;
};

struct PosteriorOptions {
  std::string prompt;
  /// Independent chain runs, each an ordered list of positions. Empty means
  /// one run over the whole state. Positions outside every group are ignored
  /// and must not be masked.
  std::vector<std::vector<std::size_t>> groups;
  std::size_t enumeration_cap = std::size_t{1} << 22;
  ConfidenceKind confidence = ConfidenceKind::top1;
  /// Fall back to a smoothed model instead of throwing on impossible evidence.
  bool smooth_inconsistent = true;
  double smoothing_weight = 1e-6;
};

std::vector<Token> sample_sequence(const MarkovSource& source, std::size_t length,
                                   std::uint64_t seed, std::string_view prompt = {});
/// Continues the chain for `count` tokens after `prefix`.
std::vector<Token> sample_continuation(const MarkovSource& source, std::span<const Token> prefix,
                                       std::size_t count, Rng& rng, std::string_view prompt = {});

/// Probability of a fully observed token run (reset tokens score 1).
double sequence_prob(const ChainView& chain, std::span<const Token> tokens);

/// Exact conditionals by summing the joint over every completion of the
/// masked slots. Throws CapacityError when V^masked exceeds the cap.
Posterior oracle_posterior(const MarkovSource& source, const MaskedState& state,
                           const PosteriorOptions& options = {});

/// Exact conditionals by forward-backward message passing; no capacity limit.
Posterior exact_posterior(const MarkovSource& source, const MaskedState& state,
                          const PosteriorOptions& options = {});

/// Rejection-sampling estimate: draw whole sequences, keep those matching
/// every unmasked position, histogram the masked ones.
Posterior mc_posterior(const MarkovSource& source, const MaskedState& state,
                       std::size_t n_samples, std::uint64_t seed,
                       const PosteriorOptions& options = {});

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log p(continuation | context) in nats; kNegInf when impossible. Throws
/// DomainError when the context itself is impossible, unless a reset token
/// later in the context wipes the impossible part.
double ar_logprob(const MarkovSource& source, std::span<const Token> context,
                  std::span<const Token> continuation);
/// log p(continuation placed `gap` unobserved tokens after context | context),
/// marginalising the chain over the gap.
double ar_logprob_gap(const MarkovSource& source, std::span<const Token> context, std::size_t gap,
                      std::span<const Token> continuation);

/// Fills confidence and argmax of an entry from its probability vector.
void finalize_entry(PositionPosterior& entry, ConfidenceKind kind);

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Posterior predict(const MaskedState& state) const = 0;
  virtual std::size_t vocab_size() const = 0;
};

enum class PosteriorMethod { forward_backward, enumeration };

/// Oracle denoiser backed by a Markov source's exact conditionals.
class ChainDenoiser final : public Denoiser {
 public:
  ChainDenoiser(std::shared_ptr<const MarkovSource> source, PosteriorOptions options = {},
                PosteriorMethod method = PosteriorMethod::forward_backward);

  Posterior predict(const MaskedState& state) const override;
  std::size_t vocab_size() const override { return source_->vocab_size(); }
  const MarkovSource& source() const noexcept { return *source_; }
  const PosteriorOptions& options() const noexcept { return options_; }

 private:
  std::shared_ptr<const MarkovSource> source_;
  PosteriorOptions options_;
  PosteriorMethod method_;
};

}  // namespace dlm
