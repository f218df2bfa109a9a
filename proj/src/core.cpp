#include "dlm/core.hpp"

#include <algorithm>
#include <numeric>

#include "dlm/error.hpp"
#include "dlm/random.hpp"

namespace dlm {

Vocabulary::Vocabulary(std::size_t size, std::vector<std::string> labels)
    : size_(size), labels_(std::move(labels)) {
  if (size_ < 2) throw InvalidInput("vocabulary needs at least two content tokens");
  if (labels_.empty()) {
    labels_.reserve(size_);
    for (std::size_t i = 0; i < size_; ++i) labels_.push_back("t" + std::to_string(i));
  }
  if (labels_.size() != size_) throw InvalidInput("vocabulary label count does not match size");
  auto sorted = labels_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw InvalidInput("vocabulary labels must be distinct");
}

std::string Vocabulary::label(Token t) const {
  if (t == kMask) return "[MASK]";
  if (is_content(t)) return labels_[static_cast<std::size_t>(t)];
  return "<" + std::to_string(t) + ">";
}

std::optional<Token> Vocabulary::find(const std::string& label) const {
  for (std::size_t i = 0; i < labels_.size(); ++i)
    if (labels_[i] == label) return static_cast<Token>(i);
  return std::nullopt;
}

MaskedState::MaskedState(std::size_t length)
    : tokens_(length, kMask), clamped_(length, false) {
  refresh();
}

MaskedState::MaskedState(std::vector<Token> tokens, std::vector<bool> clamped)
    : tokens_(std::move(tokens)), clamped_(std::move(clamped)) {
  if (clamped_.empty()) clamped_.assign(tokens_.size(), false);
  if (clamped_.size() != tokens_.size())
    throw InvalidInput("clamp mask length does not match token length");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (clamped_[i] && tokens_[i] == kMask) throw InvalidInput("clamped position holds the mask");
    if (tokens_[i] < kMask) throw InvalidInput("negative token id other than the mask");
  }
  refresh();
}

void MaskedState::refresh() {
  mask_count_ = static_cast<std::size_t>(std::count(tokens_.begin(), tokens_.end(), kMask));
  time_ = tokens_.empty() ? 0.0
                          : static_cast<double>(mask_count_) / static_cast<double>(tokens_.size());
}

std::vector<std::size_t> MaskedState::masked_positions() const {
  std::vector<std::size_t> out;
  out.reserve(mask_count_);
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (tokens_[i] == kMask) out.push_back(i);
  return out;
}

void MaskedState::clamp(std::size_t i, Token t) {
  if (i >= tokens_.size()) throw ProtocolViolation("clamp position out of range");
  if (t == kMask) throw ProtocolViolation("cannot clamp the mask token");
  tokens_[i] = t;
  clamped_[i] = true;
  refresh();
}

std::size_t StepSchedule::total_tokens() const noexcept {
  return std::accumulate(quotas.begin(), quotas.end(), std::size_t{0});
}

MaskedState forward_mask(std::span<const Token> y0, double t, std::uint64_t seed) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("mask ratio t must lie in [0, 1]");
  std::vector<Token> tokens(y0.begin(), y0.end());
  for (Token tok : tokens)
    if (tok == kMask) throw InvalidInput("clean sequence already contains the mask token");
  Rng rng(seed);
  for (auto& tok : tokens)
    if (rng.bernoulli(t)) tok = kMask;
  return MaskedState(std::move(tokens), {});
}

StepSchedule build_schedule(std::size_t initial_mask_count, std::size_t total_steps,
                            ScheduleKind kind, std::span<const std::size_t> custom_quotas) {
  const std::size_t m = initial_mask_count;
  StepSchedule schedule;
  schedule.kind = kind;
  if (kind == ScheduleKind::custom) {
    schedule.quotas.assign(custom_quotas.begin(), custom_quotas.end());
    if (schedule.quotas.empty()) throw InfeasibleSchedule("custom schedule has no steps");
    if (std::find(schedule.quotas.begin(), schedule.quotas.end(), 0) != schedule.quotas.end())
      throw InfeasibleSchedule("custom schedule has a zero quota");
    if (schedule.total_tokens() != m)
      throw InfeasibleSchedule("custom quotas sum to " + std::to_string(schedule.total_tokens()) +
                               " but " + std::to_string(m) + " positions are masked");
    return schedule;
  }
  if (total_steps == 0) throw InfeasibleSchedule("schedule needs at least one step");
  if (total_steps > m)
    throw InfeasibleSchedule(std::to_string(total_steps) + " steps exceed the " +
                             std::to_string(m) + " masked positions");
  auto ceil_div = [](std::size_t a, std::size_t b) { return (a + b - 1) / b; };
  schedule.quotas.reserve(total_steps);
  for (std::size_t s = 1; s <= total_steps; ++s)
    schedule.quotas.push_back(ceil_div(m * s, total_steps) - ceil_div(m * (s - 1), total_steps));
  return schedule;
}

MaskedState apply_commits(const MaskedState& state, std::span<const Commit> commits,
                          std::size_t vocab_size) {
  MaskedState next = state;
  for (const Commit& c : commits) {
    if (c.position >= next.length())
      throw ProtocolViolation("commit position " + std::to_string(c.position) + " out of range");
    if (c.token < 0 || static_cast<std::size_t>(c.token) >= vocab_size)
      throw ProtocolViolation("commit token " + std::to_string(c.token) + " is not a content id");
    if (state.is_clamped(c.position))
      throw ProtocolViolation("commit to clamped position " + std::to_string(c.position));
    if (!state.is_masked(c.position))
      throw ProtocolViolation("commit to unmasked position " + std::to_string(c.position));
    Token& slot = next.tokens_[c.position];
    if (slot != kMask && slot != c.token)
      throw ProtocolViolation("conflicting commits to position " + std::to_string(c.position));
    slot = c.token;
  }
  next.refresh();
  return next;
}

}  // namespace dlm
