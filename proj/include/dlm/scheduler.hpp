#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "dlm/canvas.hpp"
#include "dlm/core.hpp"
#include "dlm/source.hpp"

namespace dlm {

enum class SchedulerKind { ar, confidence, random, blockwise, threshold, nap };

/// lowest_position treats confidences within 1e-12 of each other as tied and
/// prefers the leftmost; highest_confidence_then_lowest_position compares the
/// raw values and only falls back to position on exact equality.
enum class TieBreak { lowest_position, highest_confidence_then_lowest_position };

enum class SummaryPhase { after, interleaved };

struct SchedulerConfig {
  SchedulerKind kind = SchedulerKind::confidence;
  TieBreak tie_break = TieBreak::lowest_position;
  std::uint64_t seed = 0;
  // blockwise
  std::size_t block_len = 0;
  std::shared_ptr<const SchedulerConfig> inner;
  // threshold
  double theta = 0.9;
  // nap
  std::size_t per_block_quota = 1;
  SummaryPhase summary_phase = SummaryPhase::after;

  static SchedulerConfig ar();
  static SchedulerConfig confidence(TieBreak tie = TieBreak::lowest_position);
  static SchedulerConfig random(std::uint64_t seed);
  static SchedulerConfig threshold(double theta);
  static SchedulerConfig nap(std::size_t per_block_quota = 1, SummaryPhase phase = SummaryPhase::after);

  std::string name() const;
  void validate() const;
};

/// Restricts `inner` to the earliest block of `block_len` positions that still
/// holds masks.
SchedulerConfig wrap_blockwise(SchedulerConfig inner, std::size_t block_len);

SchedulerConfig scheduler_from_json(const nlohmann::json& config, const std::string& path = "scheduler");
nlohmann::json to_json(const SchedulerConfig& config);

struct TrajectoryCommit {
  std::size_t position = 0;
  Token token = 0;
  double confidence = 0.0;
  int block_id = 0;

  friend bool operator==(const TrajectoryCommit&, const TrajectoryCommit&) = default;
};

struct Trajectory {
  /// One group per decoding step, ascending by position within the group.
  std::vector<std::vector<TrajectoryCommit>> steps;
  std::size_t length = 0;
  std::vector<std::size_t> initial_masked;
  std::string prompt_id;
  std::string scheduler;
  std::uint64_t seed = 0;

  std::size_t total_commits() const noexcept;
  /// Commit positions in evaluation order (step, then ascending position).
  std::vector<std::size_t> positions() const;
};

// Single-step rules. Each returns commits carrying the posterior argmax.
std::vector<Commit> select_ar(const MaskedState& state, const Posterior& posterior, std::size_t quota);
std::vector<Commit> select_confidence(const MaskedState& state, const Posterior& posterior, std::size_t quota,
                                      TieBreak tie_break = TieBreak::lowest_position);
std::vector<Commit> select_random(const MaskedState& state, const Posterior& posterior, std::size_t quota,
                                  std::uint64_t seed);
/// Every candidate at or above theta; if none qualifies, the single most
/// confident one.
std::vector<Commit> select_threshold(const MaskedState& state, const Posterior& posterior, double theta,
                                     TieBreak tie_break = TieBreak::lowest_position);
/// Macro-parallel, micro-confidence: up to per_block_quota commits inside
/// every reasoning block that still has masks. Budget freed by exhausted
/// blocks is spread evenly over the surviving ones. With SummaryPhase::after
/// the summary is decoded only once every reasoning block is complete.
std::vector<Commit> select_nap(const MaskedState& state, const Posterior& posterior, const CanvasRegions& regions,
                               std::size_t per_block_quota, SummaryPhase phase = SummaryPhase::after,
                               TieBreak tie_break = TieBreak::lowest_position);

/// Dispatches one step of any configured rule. Quotas are capped at the
/// number of available candidates; threshold and nap ignore them.
std::vector<Commit> select_step(const SchedulerConfig& config, const MaskedState& state, const Posterior& posterior,
                                std::size_t quota, const CanvasRegions* regions, std::size_t step);

struct DecodeOptions {
  std::string prompt_id;
  /// Required for nap; also used to label block ids in the trajectory.
  const CanvasRegions* regions = nullptr;
  /// Hard cap on loop iterations; 0 means 4 * length + 16.
  std::size_t max_steps = 0;
};

struct DecodeResult {
  MaskedState final_state;
  Trajectory trajectory;
  bool evidence_consistent = true;
};

/// Query denoiser, select, commit; repeat until no masks remain. Steps past
/// the end of the schedule reuse its last quota.
DecodeResult decode(const Denoiser& denoiser, const SchedulerConfig& scheduler, const StepSchedule& schedule,
                    const MaskedState& init, const DecodeOptions& options = {});

}  // namespace dlm
