#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dlm/core.hpp"
#include "dlm/source.hpp"

namespace dlm {

enum class HeaderStyle { tagged, compact };

/// Header tokens are structural ids at or above the content vocabulary size:
///   V      "<think"
///   V + 1  "<summary>"
///   V + 1 + j  "#j>"   (j = 1..m)
/// Tagged headers render as "<think #j>" / "<summary>"; compact ones drop the
/// "<think" prefix.
namespace header_ids {
inline Token think(std::size_t vocab_size) { return static_cast<Token>(vocab_size); }
inline Token summary(std::size_t vocab_size) { return static_cast<Token>(vocab_size + 1); }
inline Token number(std::size_t vocab_size, std::size_t j) { return static_cast<Token>(vocab_size + 1 + j); }
}  // namespace header_ids

/// Label for any token, content or structural.
std::string canvas_label(const Vocabulary& vocab, Token t);

struct CanvasLayout {
  std::vector<std::vector<Token>> headers;  // B_1..B_m
  std::vector<Token> summary_header;        // B_S
  std::vector<std::size_t> budgets;         // L_1..L_m, content only
  std::size_t summary_budget = 0;           // L_S

  std::size_t m() const noexcept { return headers.size(); }
  /// sum_j (|B_j| + L_j) + (|B_S| + L_S)
  std::size_t total_length() const noexcept;
  std::size_t total_budget() const noexcept;
  /// Throws LayoutError on empty/duplicate headers, zero budgets or m == 0.
  void validate() const;
};

/// Layout with generated headers. A single budget is broadcast to all blocks.
CanvasLayout make_layout(std::size_t vocab_size, std::size_t m, std::vector<std::size_t> budgets,
                         std::size_t summary_budget, HeaderStyle style = HeaderStyle::tagged);

/// Keys: m (3), budgets (330, scalar or per-block list), total_budget (split
/// evenly, remainder to the first blocks), summary_budget (32), header_style.
CanvasLayout layout_from_json(const nlohmann::json& config, std::size_t vocab_size,
                              const std::string& path = "canvas");

struct Interval {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
  bool contains(std::size_t p) const noexcept { return p >= begin && p < end; }
};

struct BlockRegion {
  Interval header;
  Interval content;
};

struct CanvasRegions {
  std::vector<BlockRegion> blocks;  // reasoning blocks in canvas order
  BlockRegion summary;
  std::size_t length = 0;

  std::size_t m() const noexcept { return blocks.size(); }
  /// Reasoning block index, m for the summary region, nullopt for headers.
  std::optional<std::size_t> content_block_of(std::size_t position) const;
  std::vector<std::size_t> content_positions(std::size_t block) const;
};

struct Canvas {
  MaskedState state;
  CanvasRegions regions;
  /// Conditioning context; not part of the canvas positions.
  std::vector<Token> prompt;
};

Canvas build_canvas(const CanvasLayout& layout, std::span<const Token> prompt = {});

/// Tokens of the summary content interval, with leading and trailing pad
/// tokens removed when a pad id is given.
std::vector<Token> extract_summary(const MaskedState& state, const CanvasRegions& regions,
                                   std::optional<Token> pad = std::nullopt);

enum class CanvasDependence {
  independent,  // every content region is its own chain run
  spanning      // one chain threads through all content regions in order
};

/// Position groups for a ChainDenoiser over the canvas.
std::vector<std::vector<std::size_t>> canvas_groups(const CanvasRegions& regions,
                                                    CanvasDependence dependence);

struct DivergenceTable {
  /// divergence[i][j]: largest L-infinity change of block j's posteriors when
  /// block i is revealed versus masked. The diagonal is 0.
  std::vector<std::vector<double>> divergence;
  std::size_t samples = 0;

  double max() const;
};

/// Draws complete canvases from the denoiser, masks half of the content at
/// random, and measures how much revealing block i moves block j.
DivergenceTable conditional_independence_probe(const Denoiser& denoiser, const CanvasLayout& layout,
                                               std::span<const Token> prompt, std::size_t n_seeds,
                                               std::uint64_t seed = 0);

/// Ancestral completion: repeatedly samples the leftmost masked position from
/// the denoiser's conditional and commits it.
MaskedState sample_completion(const Denoiser& denoiser, MaskedState state, Rng& rng);

}  // namespace dlm
