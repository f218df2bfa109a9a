#include "dlm/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dlm/error.hpp"
#include "dlm/random.hpp"

namespace dlm {

SchedulerConfig SchedulerConfig::ar() {
  SchedulerConfig c;
  c.kind = SchedulerKind::ar;
  return c;
}

SchedulerConfig SchedulerConfig::confidence(TieBreak tie) {
  SchedulerConfig c;
  c.kind = SchedulerKind::confidence;
  c.tie_break = tie;
  return c;
}

SchedulerConfig SchedulerConfig::random(std::uint64_t seed) {
  SchedulerConfig c;
  c.kind = SchedulerKind::random;
  c.seed = seed;
  return c;
}

SchedulerConfig SchedulerConfig::threshold(double theta) {
  SchedulerConfig c;
  c.kind = SchedulerKind::threshold;
  c.theta = theta;
  return c;
}

SchedulerConfig SchedulerConfig::nap(std::size_t per_block_quota, SummaryPhase phase) {
  SchedulerConfig c;
  c.kind = SchedulerKind::nap;
  c.per_block_quota = per_block_quota;
  c.summary_phase = phase;
  return c;
}

SchedulerConfig wrap_blockwise(SchedulerConfig inner, std::size_t block_len) {
  SchedulerConfig c;
  c.kind = SchedulerKind::blockwise;
  c.block_len = block_len;
  c.tie_break = inner.tie_break;
  c.seed = inner.seed;
  c.inner = std::make_shared<const SchedulerConfig>(std::move(inner));
  c.validate();
  return c;
}

std::string SchedulerConfig::name() const {
  std::ostringstream os;
  switch (kind) {
    case SchedulerKind::ar: return "ar";
    case SchedulerKind::confidence: return "confidence_ao";
    case SchedulerKind::random: return "random";
    case SchedulerKind::blockwise:
      os << "blockwise(" << (inner ? inner->name() : "?") << "," << block_len << ")";
      return os.str();
    case SchedulerKind::threshold:
      os << "threshold(" << theta << ")";
      return os.str();
    case SchedulerKind::nap:
      os << "nap_parallel(q=" << per_block_quota << (summary_phase == SummaryPhase::after ? "" : ",interleaved") << ")";
      return os.str();
  }
  return "unknown";
}

void SchedulerConfig::validate() const {
  switch (kind) {
    case SchedulerKind::blockwise:
      if (block_len == 0) throw InvalidInput("block_len must be at least 1");
      if (!inner) throw InvalidInput("blockwise scheduler needs an inner rule");
      if (inner->kind == SchedulerKind::nap) throw InvalidInput("nap cannot run inside blockwise");
      inner->validate();
      break;
    case SchedulerKind::threshold:
      if (!(theta > 0.0 && theta <= 1.0)) throw InvalidInput("theta must lie in (0, 1]");
      break;
    case SchedulerKind::nap:
      if (per_block_quota == 0) throw InvalidInput("per_block_quota must be at least 1");
      break;
    default:
      break;
  }
}

namespace {

SchedulerKind kind_from_name(const std::string& name, const std::string& path) {
  if (name == "ar") return SchedulerKind::ar;
  if (name == "confidence" || name == "confidence_ao") return SchedulerKind::confidence;
  if (name == "random") return SchedulerKind::random;
  if (name == "blockwise") return SchedulerKind::blockwise;
  if (name == "threshold") return SchedulerKind::threshold;
  if (name == "nap" || name == "nap_parallel") return SchedulerKind::nap;
  throw ConfigError(path, "unknown scheduler kind '" + name + "'");
}

const char* kind_name(SchedulerKind k) {
  switch (k) {
    case SchedulerKind::ar: return "ar";
    case SchedulerKind::confidence: return "confidence_ao";
    case SchedulerKind::random: return "random";
    case SchedulerKind::blockwise: return "blockwise";
    case SchedulerKind::threshold: return "threshold";
    case SchedulerKind::nap: return "nap_parallel";
  }
  return "?";
}

}  // namespace

SchedulerConfig scheduler_from_json(const nlohmann::json& config, const std::string& path) {
  if (!config.is_object()) throw ConfigError(path, "expected an object");
  if (!config.contains("kind") || !config.at("kind").is_string()) throw ConfigError(path + ".kind", "missing scheduler kind");
  SchedulerConfig c;
  c.kind = kind_from_name(config.at("kind").get<std::string>(), path + ".kind");
  try {
    if (config.contains("tie_break")) {
      const auto t = config.at("tie_break").get<std::string>();
      if (t == "lowest_position") {
        c.tie_break = TieBreak::lowest_position;
      } else if (t == "highest_confidence_then_lowest_position") {
        c.tie_break = TieBreak::highest_confidence_then_lowest_position;
      } else {
        throw ConfigError(path + ".tie_break", "unknown tie rule '" + t + "'");
      }
    }
    c.seed = config.value("seed", std::uint64_t{0});
    if (c.kind == SchedulerKind::blockwise) {
      if (!config.contains("block_len")) throw ConfigError(path + ".block_len", "missing block length");
      c.block_len = config.at("block_len").get<std::size_t>();
      if (!config.contains("inner")) throw ConfigError(path + ".inner", "missing inner scheduler");
      auto inner = scheduler_from_json(config.at("inner"), path + ".inner");
      if (!config.at("inner").contains("seed")) inner.seed = c.seed;
      c.inner = std::make_shared<const SchedulerConfig>(std::move(inner));
    }
    c.theta = config.value("theta", 0.9);
    c.per_block_quota = config.value("per_block_quota", std::size_t{1});
    if (config.contains("summary_phase")) {
      const auto p = config.at("summary_phase").get<std::string>();
      if (p == "after") {
        c.summary_phase = SummaryPhase::after;
      } else if (p == "interleaved") {
        c.summary_phase = SummaryPhase::interleaved;
      } else {
        throw ConfigError(path + ".summary_phase", "unknown summary phase '" + p + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path, e.what());
  }
  try {
    c.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(path, e.what());
  }
  return c;
}

nlohmann::json to_json(const SchedulerConfig& c) {
  nlohmann::json j = {{"kind", kind_name(c.kind)}};
  j["tie_break"] = c.tie_break == TieBreak::lowest_position ? "lowest_position" : "highest_confidence_then_lowest_position";
  j["seed"] = c.seed;
  switch (c.kind) {
    case SchedulerKind::blockwise:
      j["block_len"] = c.block_len;
      j["inner"] = to_json(*c.inner);
      break;
    case SchedulerKind::threshold:
      j["theta"] = c.theta;
      break;
    case SchedulerKind::nap:
      j["per_block_quota"] = c.per_block_quota;
      j["summary_phase"] = c.summary_phase == SummaryPhase::after ? "after" : "interleaved";
      break;
    default:
      break;
  }
  return j;
}

std::size_t Trajectory::total_commits() const noexcept {
  std::size_t n = 0;
  for (const auto& s : steps) n += s.size();
  return n;
}

std::vector<std::size_t> Trajectory::positions() const {
  std::vector<std::size_t> out;
  out.reserve(total_commits());
  for (const auto& s : steps) {
    std::vector<std::size_t> group;
    for (const auto& c : s) group.push_back(c.position);
    std::sort(group.begin(), group.end());
    out.insert(out.end(), group.begin(), group.end());
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

using Candidates = std::vector<std::size_t>;

Commit commit_argmax(const Posterior& post, std::size_t pos) { return {pos, post.at(pos).argmax}; }

/// Candidates ordered most-confident first under the tie rule.
Candidates by_confidence(Candidates cand, const Posterior& post, TieBreak tie) {
  if (tie == TieBreak::lowest_position) {
    auto key = [&](std::size_t p) { return std::llround(post.at(p).confidence * 1e12); };
    std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
      const auto ka = key(a), kb = key(b);
      return ka != kb ? ka > kb : a < b;
    });
  } else {
    std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
      const double ca = post.at(a).confidence, cb = post.at(b).confidence;
      return ca != cb ? ca > cb : a < b;
    });
  }
  return cand;
}

std::vector<Commit> choose_ar(const Candidates& cand, const Posterior& post, std::size_t quota) {
  std::vector<Commit> out;
  for (std::size_t i = 0; i < std::min(quota, cand.size()); ++i) out.push_back(commit_argmax(post, cand[i]));
  return out;
}

std::vector<Commit> choose_confidence(const Candidates& cand, const Posterior& post, std::size_t quota, TieBreak tie) {
  const auto ranked = by_confidence(cand, post, tie);
  std::vector<Commit> out;
  for (std::size_t i = 0; i < std::min(quota, ranked.size()); ++i) out.push_back(commit_argmax(post, ranked[i]));
  return out;
}

std::vector<Commit> choose_random(Candidates cand, const Posterior& post, std::size_t quota, Rng& rng) {
  const std::size_t k = std::min(quota, cand.size());
  for (std::size_t i = 0; i < k; ++i) std::swap(cand[i], cand[i + rng.below(cand.size() - i)]);
  std::vector<Commit> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(commit_argmax(post, cand[i]));
  return out;
}

std::vector<Commit> choose_threshold(const Candidates& cand, const Posterior& post, double theta, TieBreak tie) {
  std::vector<Commit> out;
  for (std::size_t p : cand)
    if (post.at(p).confidence >= theta) out.push_back(commit_argmax(post, p));
  if (out.empty() && !cand.empty()) out.push_back(commit_argmax(post, by_confidence(cand, post, tie).front()));
  return out;
}

std::vector<Commit> choose_nap(const MaskedState& state, const Posterior& post, const CanvasRegions& regions,
                               std::size_t q, SummaryPhase phase, TieBreak tie) {
  if (regions.length != state.length()) throw ProtocolViolation("canvas layout does not match the decode state");
  const std::size_t m = regions.m();
  std::vector<Candidates> per_block(m + 1);
  for (std::size_t p : state.masked_positions()) {
    const auto b = regions.content_block_of(p);
    if (!b) throw ProtocolViolation("masked position " + std::to_string(p) + " lies in a canvas header");
    per_block[*b].push_back(p);
  }
  const bool reasoning_left = std::any_of(per_block.begin(), per_block.begin() + static_cast<std::ptrdiff_t>(m),
                                          [](const Candidates& c) { return !c.empty(); });
  std::vector<std::size_t> active;
  std::size_t budget = 0;
  if (phase == SummaryPhase::after) {
    if (reasoning_left) {
      for (std::size_t j = 0; j < m; ++j)
        if (!per_block[j].empty()) active.push_back(j);
      budget = m * q;
    } else if (!per_block[m].empty()) {
      active.push_back(m);
      budget = q;
    }
  } else {
    for (std::size_t j = 0; j <= m; ++j)
      if (!per_block[j].empty()) active.push_back(j);
    budget = (m + 1) * q;
  }

  // Even split with the remainder going to the earliest blocks; shares a block
  // cannot use flow back to the others.
  std::vector<std::size_t> share(m + 1, 0);
  while (budget > 0) {
    std::vector<std::size_t> open;
    for (std::size_t j : active)
      if (share[j] < per_block[j].size()) open.push_back(j);
    if (open.empty()) break;
    const std::size_t base = budget / open.size();
    std::size_t extra = budget % open.size();
    std::size_t used = 0;
    for (std::size_t j : open) {
      const std::size_t want = base + (extra > 0 ? 1 : 0);
      if (extra > 0) --extra;
      const std::size_t give = std::min(want, per_block[j].size() - share[j]);
      share[j] += give;
      used += give;
    }
    if (used == 0) break;
    budget -= used;
  }

  std::vector<Commit> out;
  for (std::size_t j : active) {
    auto picks = choose_confidence(per_block[j], post, share[j], tie);
    out.insert(out.end(), picks.begin(), picks.end());
  }
  return out;
}

std::vector<Commit> dispatch(const SchedulerConfig& c, const MaskedState& state, const Candidates& cand,
                             const Posterior& post, std::size_t quota, const CanvasRegions* regions, std::size_t step) {
  switch (c.kind) {
    case SchedulerKind::ar: return choose_ar(cand, post, quota);
    case SchedulerKind::confidence: return choose_confidence(cand, post, quota, c.tie_break);
    case SchedulerKind::random: {
      Rng rng(split_seed(c.seed, step));
      return choose_random(cand, post, quota, rng);
    }
    case SchedulerKind::threshold: return choose_threshold(cand, post, c.theta, c.tie_break);
    case SchedulerKind::blockwise: {
      if (cand.empty()) return {};
      const std::size_t block = cand.front() / c.block_len;
      Candidates in_block;
      for (std::size_t p : cand)
        if (p / c.block_len == block) in_block.push_back(p);
      return dispatch(*c.inner, state, in_block, post, quota, regions, step);
    }
    case SchedulerKind::nap:
      if (!regions) throw ProtocolViolation("nap scheduling needs canvas regions");
      return choose_nap(state, post, *regions, c.per_block_quota, c.summary_phase, c.tie_break);
  }
  return {};
}

void check_quota(const MaskedState& state, std::size_t quota) {
  if (quota == 0) throw ProtocolViolation("quota must be at least 1");
  if (quota > state.mask_count())
    throw ProtocolViolation("quota " + std::to_string(quota) + " exceeds the " + std::to_string(state.mask_count()) +
                            " masked positions");
}

}  // namespace

std::vector<Commit> select_ar(const MaskedState& state, const Posterior& posterior, std::size_t quota) {
  check_quota(state, quota);
  return choose_ar(state.masked_positions(), posterior, quota);
}

std::vector<Commit> select_confidence(const MaskedState& state, const Posterior& posterior, std::size_t quota,
                                      TieBreak tie_break) {
  check_quota(state, quota);
  return choose_confidence(state.masked_positions(), posterior, quota, tie_break);
}

std::vector<Commit> select_random(const MaskedState& state, const Posterior& posterior, std::size_t quota,
                                  std::uint64_t seed) {
  check_quota(state, quota);
  Rng rng(seed);
  return choose_random(state.masked_positions(), posterior, quota, rng);
}

std::vector<Commit> select_threshold(const MaskedState& state, const Posterior& posterior, double theta,
                                     TieBreak tie_break) {
  if (!(theta > 0.0 && theta <= 1.0)) throw InvalidInput("theta must lie in (0, 1]");
  return choose_threshold(state.masked_positions(), posterior, theta, tie_break);
}

std::vector<Commit> select_nap(const MaskedState& state, const Posterior& posterior, const CanvasRegions& regions,
                               std::size_t per_block_quota, SummaryPhase phase, TieBreak tie_break) {
  if (per_block_quota == 0) throw ProtocolViolation("per_block_quota must be at least 1");
  return choose_nap(state, posterior, regions, per_block_quota, phase, tie_break);
}

std::vector<Commit> select_step(const SchedulerConfig& config, const MaskedState& state, const Posterior& posterior,
                                std::size_t quota, const CanvasRegions* regions, std::size_t step) {
  return dispatch(config, state, state.masked_positions(), posterior, quota, regions, step);
}

DecodeResult decode(const Denoiser& denoiser, const SchedulerConfig& scheduler, const StepSchedule& schedule,
                    const MaskedState& init, const DecodeOptions& options) {
  scheduler.validate();
  const bool nap = scheduler.kind == SchedulerKind::nap;
  if (nap && !options.regions) throw ProtocolViolation("nap scheduling needs canvas regions");
  if (!nap && schedule.total_tokens() != init.mask_count())
    throw InfeasibleSchedule("schedule covers " + std::to_string(schedule.total_tokens()) + " tokens but " +
                             std::to_string(init.mask_count()) + " positions are masked");

  DecodeResult result;
  Trajectory& traj = result.trajectory;
  traj.length = init.length();
  traj.initial_masked = init.masked_positions();
  traj.prompt_id = options.prompt_id;
  traj.scheduler = scheduler.name();
  traj.seed = scheduler.seed;

  auto block_id = [&](std::size_t p) -> int {
    if (options.regions) {
      const auto b = options.regions->content_block_of(p);
      return b ? static_cast<int>(*b) : -1;
    }
    if (scheduler.kind == SchedulerKind::blockwise) return static_cast<int>(p / scheduler.block_len);
    return 0;
  };

  const std::size_t max_steps = options.max_steps ? options.max_steps : 4 * init.length() + 16;
  MaskedState state = init;
  for (std::size_t step = 0; state.mask_count() > 0; ++step) {
    if (step >= max_steps) throw StallError("decode exceeded " + std::to_string(max_steps) + " steps");
    const Posterior post = denoiser.predict(state);
    if (!post.evidence_consistent) result.evidence_consistent = false;
    std::size_t quota = 1;
    if (!schedule.quotas.empty()) quota = step < schedule.quotas.size() ? schedule.quotas[step] : schedule.quotas.back();
    auto commits = select_step(scheduler, state, post, quota, options.regions, step);
    if (commits.empty())
      throw StallError("scheduler committed nothing at step " + std::to_string(step) + " with " +
                       std::to_string(state.mask_count()) + " masks left");
    std::sort(commits.begin(), commits.end(), [](const Commit& a, const Commit& b) { return a.position < b.position; });
    std::vector<TrajectoryCommit> group;
    for (const Commit& c : commits)
      group.push_back({c.position, c.token, post.at(c.position).confidence, block_id(c.position)});
    state = apply_commits(state, commits, denoiser.vocab_size());
    traj.steps.push_back(std::move(group));
  }
  result.final_state = std::move(state);
  return result;
}

}  // namespace dlm
