#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dlm {

using Token = std::int32_t;

/// Reserved id for a masked slot. Content ids are dense in [0, V), so the
/// mask can never collide with one.
inline constexpr Token kMask = -1;

class Vocabulary {
 public:
  /// Labels default to "t<id>".
  explicit Vocabulary(std::size_t size, std::vector<std::string> labels = {});

  std::size_t size() const noexcept { return size_; }
  static constexpr Token mask_id() noexcept { return kMask; }
  bool is_content(Token t) const noexcept { return t >= 0 && static_cast<std::size_t>(t) < size_; }

  /// Display label for a content id, "[MASK]" for the mask, and "<id>" for
  /// structural ids at or above V (canvas headers register their own).
  std::string label(Token t) const;
  /// Inverse of label() restricted to content ids.
  std::optional<Token> find(const std::string& label) const;
  const std::vector<std::string>& labels() const noexcept { return labels_; }

 private:
  std::size_t size_;
  std::vector<std::string> labels_;
};

struct Commit {
  std::size_t position = 0;
  Token token = 0;

  friend bool operator==(const Commit&, const Commit&) = default;
};

/// The token canvas every scheduler mutates. Value type; unmasking is monotone.
class MaskedState {
 public:
  MaskedState() = default;
  /// Fully masked, nothing clamped.
  explicit MaskedState(std::size_t length);
  MaskedState(std::vector<Token> tokens, std::vector<bool> clamped);

  std::size_t length() const noexcept { return tokens_.size(); }
  Token token(std::size_t i) const { return tokens_.at(i); }
  bool is_masked(std::size_t i) const { return tokens_.at(i) == kMask; }
  bool is_clamped(std::size_t i) const { return clamped_.at(i); }
  std::span<const Token> tokens() const noexcept { return tokens_; }
  const std::vector<bool>& clamped() const noexcept { return clamped_; }

  /// Nominal mask ratio t: masked fraction of the canvas.
  double time() const noexcept { return time_; }

  std::size_t mask_count() const noexcept { return mask_count_; }
  /// Masked positions in ascending order. Clamped positions are never masked.
  std::vector<std::size_t> masked_positions() const;

  /// Write a clamped token (used for prompts and canvas headers).
  void clamp(std::size_t i, Token t);

  friend bool operator==(const MaskedState& a, const MaskedState& b) {
    return a.tokens_ == b.tokens_ && a.clamped_ == b.clamped_;
  }

 private:
  friend MaskedState apply_commits(const MaskedState&, std::span<const Commit>, std::size_t);
  void refresh();

  std::vector<Token> tokens_;
  std::vector<bool> clamped_;
  std::size_t mask_count_ = 0;
  double time_ = 0.0;
};

enum class ScheduleKind { linear, custom };

struct StepSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  std::vector<std::size_t> quotas;

  std::size_t total_steps() const noexcept { return quotas.size(); }
  std::size_t total_tokens() const noexcept;
};

/// Independently replaces every position of y0 by the mask with probability t.
/// t == 0 is the identity and t == 1 masks everything, for any seed.
MaskedState forward_mask(std::span<const Token> y0, double t, std::uint64_t seed);

/// Linear kind: quota at step s (1-based) is ceil(M*s/T) - ceil(M*(s-1)/T).
/// Custom kind validates and adopts `custom_quotas`.
StepSchedule build_schedule(std::size_t initial_mask_count, std::size_t total_steps,
                            ScheduleKind kind = ScheduleKind::linear,
                            std::span<const std::size_t> custom_quotas = {});

/// Unmasks exactly the listed positions. Listing the same (position, token)
/// twice is harmless; anything touching a clamped or already-unmasked slot,
/// or a token outside [0, vocab_size), throws ProtocolViolation.
MaskedState apply_commits(const MaskedState& state, std::span<const Commit> commits,
                          std::size_t vocab_size);

}  // namespace dlm
