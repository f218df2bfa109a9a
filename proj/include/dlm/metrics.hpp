#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dlm/core.hpp"
#include "dlm/endpoint.hpp"
#include "dlm/scheduler.hpp"
#include "dlm/source.hpp"

namespace dlm {

// ---------------------------------------------------------------------------
// Global-ARness@k

/// Throws InvalidTrajectory when a position is committed twice, lies outside
/// [0, length), or the committed set differs from initial_masked (when the
/// latter is recorded).
void validate_trajectory(const Trajectory& trajectory);

/// Fraction of commits landing among the k leftmost positions still masked.
/// Commits inside one step are taken in ascending position order and the mask
/// set shrinks after each. Normalised by the number of commits.
double global_arness(const Trajectory& trajectory, std::size_t k);

/// Per-commit hit indicators for one k, in evaluation order.
std::vector<bool> arness_indicators(const Trajectory& trajectory, std::size_t k);

inline const std::vector<std::size_t> kDefaultKList = {1, 8, 32};

struct ARnessReport {
  std::vector<std::size_t> k_list;
  std::vector<double> scores;  // parallel to k_list
  std::vector<std::vector<bool>> indicators;
  std::size_t commits = 0;
  std::size_t length = 0;
  std::string scheduler;
  std::string prompt_id;
  std::uint64_t seed = 0;

  double score(std::size_t k) const;
  nlohmann::ordered_json to_json(bool with_indicators = false) const;
};

ARnessReport arness_report(const Trajectory& trajectory, const std::vector<std::size_t>& k_list = kDefaultKList);

// ---------------------------------------------------------------------------
// Segmentation

enum class SegmenterKind { fixed_window, delimiter, think_blocks };

struct SegmenterConfig {
  SegmenterKind kind = SegmenterKind::think_blocks;
  std::size_t window = 1;
  Token delimiter = 0;
  /// think_blocks only: token placed at the start of every block.
  std::optional<Token> block_marker;

  std::string name() const;
};

/// "think_blocks", "fixed_window:<w>" or "delimiter:<token id>".
SegmenterConfig parse_segmenter(const std::string& text);

struct Segmentation {
  std::vector<std::vector<Token>> segments;
  SegmenterConfig segmenter;

  std::size_t total_tokens() const noexcept;
  std::vector<Token> concatenated() const;
};

/// Consecutive windows of w tokens; the last may be shorter.
Segmentation segment_fixed_window(std::span<const Token> output, std::size_t window);
/// Splits after every delimiter; the delimiter stays with the segment it ends.
Segmentation segment_delimiter(std::span<const Token> output, Token delimiter);
/// One segment per block, each prefixed with the block marker when set.
Segmentation segment_blocks(const std::vector<std::vector<Token>>& blocks, std::optional<Token> marker);

// ---------------------------------------------------------------------------
// AR scorers

struct ScoreRequest {
  std::vector<Token> context;
  /// Unobserved tokens between the context and the continuation.
  std::size_t gap = 0;
  std::vector<Token> continuation;
};

/// log p(continuation | context) in nats, kNegInf when the continuation is
/// impossible, NaN when the context is. Scorers throw ScorerError subclasses
/// on failure.
class ArScorer {
 public:
  virtual ~ArScorer() = default;
  virtual double logprob(const ScoreRequest& request) const = 0;
  virtual std::string name() const = 0;
};

/// Exact scorer over a Markov source; the gap is marginalised.
class SourceScorer final : public ArScorer {
 public:
  explicit SourceScorer(std::shared_ptr<const MarkovSource> source);
  double logprob(const ScoreRequest& request) const override;
  std::string name() const override { return "source"; }

 private:
  std::shared_ptr<const MarkovSource> source_;
};

/// Out-of-process scorer. Request {id, context_tokens, continuation_tokens,
/// gap}; response {id, logprob_nats} where logprob_nats is a number, or
/// "-inf"/null for an impossible continuation, or "nan" for an impossible
/// context.
class ExternalScorer final : public ArScorer {
 public:
  explicit ExternalScorer(EndpointConfig config);
  double logprob(const ScoreRequest& request) const override;
  std::string name() const override { return "external:" + client_->config().address; }

 private:
  std::unique_ptr<JsonLineClient> client_;
};

// ---------------------------------------------------------------------------
// SeqDep

struct SeqDepReport {
  /// gains[i] belongs to boundary n = i + 2 (1-based segment index).
  std::vector<double> gains;
  std::optional<double> mean;  // empty when no gain is finite
  std::size_t neg_inf_count = 0;
  /// Boundaries whose prefix is impossible under the scorer (NaN gains).
  std::size_t undefined_count = 0;
  std::size_t segments = 0;
  std::size_t length = 0;  // output tokens, used for binning

  nlohmann::ordered_json to_json() const;
};

/// Gain for boundary n is log p(s_n | x, s_<n) - log p(s_n | x). Infinite
/// gains are left out of the mean and counted in neg_inf_count; NaN gains
/// (impossible prefix) likewise, counted in undefined_count.
SeqDepReport seqdep(const ArScorer& scorer, std::span<const Token> prompt, const Segmentation& segmentation);

struct SeqDepItem {
  std::vector<Token> prompt;
  Segmentation segmentation;
};

struct ProfileBin {
  std::size_t low = 0;   // inclusive
  std::size_t high = 0;  // exclusive
  std::size_t count = 0;
  std::optional<double> mean;
};

struct SeqDepProfile {
  std::vector<ProfileBin> bins;
  std::vector<SeqDepReport> reports;  // input order
  std::size_t neg_inf_count = 0;
  std::size_t undefined_gain_count = 0;
  /// Items whose own mean was undefined; they do not enter any bin mean.
  std::size_t undefined_count = 0;
  std::string segmenter;
  std::string scorer;

  nlohmann::ordered_json to_json() const;
  std::string to_csv() const;
};

/// Ascending edges; bin i covers [edges[i], edges[i+1]). Throws DomainError
/// when an item's length falls outside every bin. Work is split over `jobs`
/// threads; results do not depend on it.
SeqDepProfile seqdep_profile(const std::vector<SeqDepItem>& items, const ArScorer& scorer,
                             const std::vector<std::size_t>& edges, std::size_t jobs = 1);

/// `count` equal-width edges covering [min, max] of the item lengths.
std::vector<std::size_t> auto_bin_edges(const std::vector<SeqDepItem>& items, std::size_t count);

/// Reads a profile CSV written by SeqDepProfile::to_csv.
std::vector<ProfileBin> read_profile_csv(const std::string& text);

}  // namespace dlm
