#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dlm/canvas.hpp"
#include "dlm/core.hpp"
#include "dlm/metrics.hpp"
#include "dlm/scheduler.hpp"
#include "dlm/source.hpp"

namespace dlm {

inline constexpr const char* kToolName = "dlmlab";
inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kOutputEnv = "DLMLAB_OUT";

namespace exit_codes {
inline constexpr int ok = 0;
inline constexpr int config = 2;
inline constexpr int infeasible = 3;
inline constexpr int unavailable = 4;
inline constexpr int internal = 5;
}  // namespace exit_codes

/// 0 ok, 2 config/usage, 3 infeasible schedule, 4 scorer or teacher
/// unavailable, 5 internal invariant violation.
int exit_code_for(const std::exception& e) noexcept;

/// FNV-1a 64 of the compact JSON dump, as 16 hex digits. Object keys are
/// sorted by nlohmann::json, so key order in the file does not matter.
std::string config_hash(const nlohmann::json& config);

/// Explicit flag, else $DLMLAB_OUT, else "dlmlab_out".
std::filesystem::path output_root(const std::optional<std::string>& flag);

nlohmann::json read_json_file(const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Trajectory files

/// Columns step,position,token,confidence,block_id; confidence as %.17g.
std::string trajectory_to_csv(const Trajectory& trajectory);
/// length and initial_masked are taken from the committed positions.
Trajectory trajectory_from_csv(std::string_view text);
/// Position-vs-step plot data: step,position,block_id.
std::string plot_to_csv(const Trajectory& trajectory);

// ---------------------------------------------------------------------------
// Decode plans

/// Parsed decode configuration. Keys:
///   source        preset object (required)
///   scheduler     scheduler object (required)
///   length        sequence length without a canvas (default 32)
///   canvas        layout object plus "dependence": independent | spanning
///   clamp_prefix  leading positions fixed to a per-run sample of the source
///   clamp_tokens  explicit leading tokens (instead of clamp_prefix)
///   prompt        prompt id selecting the source's initial distribution
///   steps         integer, or "M", "M/<d>" relative to the masked count
///   quotas        explicit per-step quotas (instead of steps)
///   denoiser      {method: forward_backward | enumeration, confidence: top1 | margin}
///   runs, seed    run count and root seed
///   k_list        ARness k values (default [1, 8, 32])
struct DecodePlan {
  nlohmann::json config;
  std::shared_ptr<const MarkovSource> source;
  SchedulerConfig scheduler;
  std::optional<CanvasLayout> layout;
  CanvasDependence dependence = CanvasDependence::independent;
  std::size_t length = 32;
  std::size_t clamp_prefix = 0;
  std::vector<Token> clamp_tokens;
  std::string prompt;
  nlohmann::json steps;  // null, integer or "M/<d>" string
  std::vector<std::size_t> quotas;
  PosteriorMethod method = PosteriorMethod::forward_backward;
  ConfidenceKind confidence = ConfidenceKind::top1;
  std::vector<std::size_t> k_list = kDefaultKList;
  std::size_t runs = 1;
  std::uint64_t seed = 0;

  std::shared_ptr<const Denoiser> make_denoiser() const;
  /// Fresh canvas regions, or nullopt without a canvas.
  std::optional<CanvasRegions> regions() const;
  /// Initial state of run `run_seed` (clamps filled in).
  MaskedState initial_state(std::uint64_t run_seed) const;
  StepSchedule schedule_for(std::size_t masked) const;
};

DecodePlan plan_from_json(const nlohmann::json& config);

struct RunRecord {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  MaskedState initial;
  StepSchedule schedule;
  DecodeResult result;
  ARnessReport arness;
  /// Set when the source admits exactly one completion of the initial state.
  std::optional<std::vector<Token>> unique_completion;
};

/// Run `index` of the plan: run seed split_seed(plan.seed, index); clamp
/// sample from split_seed(run_seed, 0); scheduler randomness from
/// split_seed(run_seed, 1).
RunRecord execute_run(const DecodePlan& plan, const Denoiser& denoiser, std::size_t index);

// ---------------------------------------------------------------------------
// Commands. Each returns an exit code and throws dlm::Error subclasses on
// failure; the CLI maps them with exit_code_for.

struct DecodeArgs {
  std::string config_path;
  std::optional<std::size_t> runs;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};
int cmd_decode(const DecodeArgs& args, std::ostream& log);

struct ArnessArgs {
  std::vector<std::string> trajectories;
  std::vector<std::size_t> k_list = kDefaultKList;
  bool allow_mixed = false;
  std::optional<std::string> json_out;
};
int cmd_arness(const ArnessArgs& args, std::ostream& out);

struct SeqdepArgs {
  std::string corpus;
  /// Path to a scorer JSON file, or inline JSON starting with '{'.
  std::string scorer;
  std::string segmenter = "think_blocks";
  /// Bin count ("5") or comma-separated edges ("0,10,20").
  std::string bins = "5";
  std::size_t jobs = 1;
  std::optional<std::string> out;
};
int cmd_seqdep(const SeqdepArgs& args, std::ostream& log);

struct SweepArgs {
  std::string grid_path;
  std::size_t jobs = 1;
  std::optional<std::string> out;
};
int cmd_sweep(const SweepArgs& args, std::ostream& log);

struct CurateArgs {
  std::string config_path;
  std::optional<std::size_t> queries;
  std::optional<std::size_t> traces;
  std::optional<double> temperature;
  std::optional<double> corruption_rate;
  std::optional<std::string> out;
};
int cmd_curate(const CurateArgs& args, std::ostream& log);

/// Scorer from a config object: {"kind": "source", "source": {...}} or
/// {"kind": "external", "endpoint": ...}. Optional "labels" and
/// "block_marker" feed tokenisation and the think_blocks segmenter.
struct ScorerSetup {
  std::unique_ptr<ArScorer> scorer;
  std::shared_ptr<const Vocabulary> vocab;
  std::optional<Token> block_marker;
};
ScorerSetup scorer_from_json(const nlohmann::json& config, const std::string& path = "scorer");

}  // namespace dlm
