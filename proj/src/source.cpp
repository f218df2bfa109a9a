#include "dlm/source.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dlm/error.hpp"

namespace dlm {

namespace {

constexpr double kRowTolerance = 1e-9;

void check_distribution(std::span<const double> row, const std::string& what) {
  double sum = 0.0;
  for (double p : row) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidInput(what + " has a negative or non-finite entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kRowTolerance)
    throw InvalidInput(what + " sums to " + std::to_string(sum) + ", not 1");
}

std::size_t ipow_capped(std::size_t base, std::size_t exp, std::size_t cap) {
  std::size_t out = 1;
  for (std::size_t i = 0; i < exp; ++i) {
    if (out > cap / std::max<std::size_t>(base, 1)) return cap + 1;
    out *= base;
  }
  return out;
}

double sample_gamma(Rng& rng, double shape) {
  if (shape < 1.0) {
    const double u = rng.uniform();
    return sample_gamma(rng, shape + 1.0) * std::pow(std::max(u, 1e-300), 1.0 / shape);
  }
  // Marsaglia-Tsang.
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      const double u1 = std::max(rng.uniform(), 1e-300);
      const double u2 = rng.uniform();
      x = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(std::max(u, 1e-300)) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::vector<double> dirichlet_row(Rng& rng, std::size_t n, double alpha) {
  std::vector<double> row(n);
  double sum = 0.0;
  for (auto& p : row) {
    p = sample_gamma(rng, alpha);
    sum += p;
  }
  for (auto& p : row) p /= sum;
  return row;
}

std::vector<double> uniform_row(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

std::vector<double> delta_row(std::size_t n, Token at) {
  std::vector<double> row(n, 0.0);
  row.at(static_cast<std::size_t>(at)) = 1.0;
  return row;
}

}  // namespace

// ---------------------------------------------------------------------------
// MarkovSource

MarkovSource::MarkovSource(int order, std::size_t vocab_size, std::vector<double> initial,
                           std::vector<double> transition, std::vector<double> second,
                           std::optional<Token> reset_token)
    : order_(order),
      vocab_size_(vocab_size),
      initial_(std::move(initial)),
      transition_(std::move(transition)),
      second_(std::move(second)),
      reset_token_(reset_token) {
  validate();
}

void MarkovSource::validate() const {
  const std::size_t v = vocab_size_;
  if (order_ != 1 && order_ != 2) throw InvalidInput("source order must be 1 or 2");
  if (v < 2) throw InvalidInput("source vocabulary needs at least two tokens");
  if (initial_.size() != v) throw InvalidInput("initial vector length must equal V");
  check_distribution(initial_, "initial vector");
  const std::size_t rows = order_ == 1 ? v : v * v;
  if (transition_.size() != rows * v) throw InvalidInput("transition table has the wrong size");
  for (std::size_t r = 0; r < rows; ++r)
    check_distribution(std::span(transition_).subspan(r * v, v), "transition row " + std::to_string(r));
  if (order_ == 2) {
    if (second_.size() != v * v) throw InvalidInput("order-2 source needs a V*V second-token table");
    for (std::size_t r = 0; r < v; ++r)
      check_distribution(std::span(second_).subspan(r * v, v), "second-token row " + std::to_string(r));
  } else if (!second_.empty()) {
    throw InvalidInput("second-token table is only meaningful for order 2");
  }
  if (reset_token_) {
    const Token r = *reset_token_;
    if (r < 0 || static_cast<std::size_t>(r) >= v) throw InvalidInput("reset token outside the vocabulary");
    const auto ri = static_cast<std::size_t>(r);
    auto zero_mass = [&](const std::vector<double>& table) {
      for (std::size_t i = ri; i < table.size(); i += v)
        if (table[i] != 0.0) return false;
      return true;
    };
    if (initial_[ri] != 0.0 || !zero_mass(transition_) || !zero_mass(second_))
      throw InvalidInput("reset token must have zero probability everywhere");
  }
  for (const auto& [id, init] : prompts_) check_distribution(init, "prompt '" + id + "' initial vector");
}

const std::vector<double>& MarkovSource::initial_for(std::string_view prompt) const {
  if (prompt.empty()) return initial_;
  auto it = prompts_.find(prompt);
  return it == prompts_.end() ? initial_ : it->second;
}

void MarkovSource::add_prompt(const std::string& prompt, std::vector<double> initial) {
  if (initial.size() != vocab_size_) throw InvalidInput("prompt initial vector length must equal V");
  check_distribution(initial, "prompt '" + prompt + "' initial vector");
  if (reset_token_ && initial[static_cast<std::size_t>(*reset_token_)] != 0.0)
    throw InvalidInput("reset token must have zero probability everywhere");
  prompts_[prompt] = std::move(initial);
}

MarkovSource MarkovSource::map_rows(const auto& fn) const {
  const std::size_t v = vocab_size_;
  auto apply = [&](std::vector<double> table) {
    for (std::size_t r = 0; r * v < table.size(); ++r) fn(std::span(table).subspan(r * v, v));
    return table;
  };
  MarkovSource out(order_, v, apply(initial_), apply(transition_), apply(second_), reset_token_);
  for (const auto& [id, init] : prompts_) out.prompts_[id] = apply(init);
  out.description_ = description_;
  return out;
}

MarkovSource MarkovSource::tempered(double tau) const {
  if (!(tau > 0.0)) throw DomainError("temperature must be positive");
  if (tau == 1.0) return *this;
  auto out = map_rows([tau](std::span<double> row) {
    double sum = 0.0;
    for (double& p : row) {
      p = p > 0.0 ? std::pow(p, 1.0 / tau) : 0.0;
      sum += p;
    }
    for (double& p : row) p /= sum;
  });
  return out;
}

MarkovSource MarkovSource::smoothed(double weight) const {
  const std::size_t v = vocab_size_;
  const std::optional<Token> reset = reset_token_;
  const double support = static_cast<double>(reset ? v - 1 : v);
  return map_rows([=](std::span<double> row) {
    for (std::size_t y = 0; y < v; ++y) {
      if (reset && static_cast<std::size_t>(*reset) == y) continue;
      row[y] = (1.0 - weight) * row[y] + weight / support;
    }
  });
}

// ---------------------------------------------------------------------------
// ChainView

ChainView::ChainView(const MarkovSource& source, std::string_view prompt)
    : source_(&source), initial_(&source.initial_for(prompt)), reset_(source.reset_token()) {
  const std::size_t v = source.vocab_size();
  num_states_ = source.order() == 1 ? 1 + v : 1 + v + v * v;
}

double ChainView::prob(std::size_t state, Token y) const {
  const std::size_t v = source_->vocab_size();
  const auto yi = static_cast<std::size_t>(y);
  if (state == fresh) return (*initial_)[yi];
  if (source_->order() == 1) return source_->transition()[(state - 1) * v + yi];
  if (state <= v) return source_->second()[(state - 1) * v + yi];
  return source_->transition()[(state - 1 - v) * v + yi];
}

std::size_t ChainView::next(std::size_t state, Token y) const {
  if (is_reset(y)) return fresh;
  const std::size_t v = source_->vocab_size();
  const auto yi = static_cast<std::size_t>(y);
  if (source_->order() == 1) return 1 + yi;
  if (state == fresh) return 1 + yi;
  const std::size_t last = state <= v ? state - 1 : (state - 1 - v) % v;
  return 1 + v + last * v + yi;
}

double sequence_prob(const ChainView& chain, std::span<const Token> tokens) {
  double p = 1.0;
  std::size_t state = ChainView::fresh;
  for (Token y : tokens) {
    if (!chain.is_reset(y)) p *= chain.prob(state, y);
    if (p == 0.0) return 0.0;
    state = chain.next(state, y);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Presets

MarkovSource make_iid(std::size_t vocab_size, std::vector<double> probs) {
  if (probs.empty()) probs = uniform_row(vocab_size);
  std::vector<double> transition;
  transition.reserve(vocab_size * vocab_size);
  for (std::size_t r = 0; r < vocab_size; ++r) transition.insert(transition.end(), probs.begin(), probs.end());
  MarkovSource src(1, vocab_size, probs, std::move(transition));
  src.set_description({{"kind", "iid"}, {"order", 1}, {"V", vocab_size}, {"parameters", {{"probs", probs}}}});
  return src;
}

MarkovSource make_sticky(std::size_t vocab_size, double stay) {
  if (!(stay >= 0.0 && stay <= 1.0)) throw DomainError("sticky stay probability must lie in [0, 1]");
  const double move = (1.0 - stay) / static_cast<double>(vocab_size - 1);
  std::vector<double> transition(vocab_size * vocab_size, move);
  for (std::size_t r = 0; r < vocab_size; ++r) transition[r * vocab_size + r] = stay;
  MarkovSource src(1, vocab_size, uniform_row(vocab_size), std::move(transition));
  src.set_description({{"kind", "sticky"}, {"order", 1}, {"V", vocab_size}, {"parameters", {{"stay", stay}}}});
  return src;
}

MarkovSource make_cycle(std::size_t vocab_size, std::optional<Token> start) {
  std::vector<double> transition(vocab_size * vocab_size, 0.0);
  for (std::size_t r = 0; r < vocab_size; ++r) transition[r * vocab_size + (r + 1) % vocab_size] = 1.0;
  auto init = start ? delta_row(vocab_size, *start) : uniform_row(vocab_size);
  MarkovSource src(1, vocab_size, std::move(init), std::move(transition));
  nlohmann::json params = nlohmann::json::object();
  if (start) params["start"] = *start;
  src.set_description({{"kind", "cycle"}, {"order", 1}, {"V", vocab_size}, {"parameters", params}});
  return src;
}

MarkovSource make_lossy_counter(std::size_t vocab_size, double epsilon, std::optional<Token> start) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw DomainError("lossy counter epsilon must lie in [0, 1]");
  std::vector<double> transition(vocab_size * vocab_size, 0.0);
  for (std::size_t r = 0; r < vocab_size; ++r) {
    transition[r * vocab_size + (r + 1) % vocab_size] += 1.0 - epsilon;
    transition[r * vocab_size + 0] += epsilon;
  }
  auto init = start ? delta_row(vocab_size, *start) : uniform_row(vocab_size);
  MarkovSource src(1, vocab_size, std::move(init), std::move(transition));
  nlohmann::json params = {{"epsilon", epsilon}};
  if (start) params["start"] = *start;
  src.set_description({{"kind", "lossy_counter"}, {"order", 1}, {"V", vocab_size}, {"parameters", params}});
  return src;
}

MarkovSource make_random_chain(int order, std::size_t vocab_size, std::uint64_t seed, double alpha) {
  if (!(alpha > 0.0)) throw DomainError("Dirichlet concentration must be positive");
  Rng rng(seed);
  auto table = [&](std::size_t rows) {
    std::vector<double> out;
    out.reserve(rows * vocab_size);
    for (std::size_t r = 0; r < rows; ++r) {
      auto row = dirichlet_row(rng, vocab_size, alpha);
      out.insert(out.end(), row.begin(), row.end());
    }
    return out;
  };
  auto initial = table(1);
  std::vector<double> second;
  if (order == 2) second = table(vocab_size);
  auto transition = table(order == 1 ? vocab_size : vocab_size * vocab_size);
  MarkovSource src(order, vocab_size, std::move(initial), std::move(transition), std::move(second));
  src.set_description({{"kind", "custom"},
                       {"order", order},
                       {"V", vocab_size},
                       {"seed", seed},
                       {"parameters", {{"alpha", alpha}}}});
  return src;
}

MarkovSource with_reset_token(const MarkovSource& source) {
  if (source.reset_token()) throw InvalidInput("source already has a reset token");
  const std::size_t v = source.vocab_size();
  const std::size_t w = v + 1;
  auto widen = [&](const std::vector<double>& table) {
    std::vector<double> out;
    out.reserve(table.size() / v * w);
    for (std::size_t r = 0; r * v < table.size(); ++r) {
      out.insert(out.end(), table.begin() + static_cast<std::ptrdiff_t>(r * v),
                 table.begin() + static_cast<std::ptrdiff_t>((r + 1) * v));
      out.push_back(0.0);
    }
    return out;
  };
  // Rows conditioned on the reset token itself are unreachable; give them the
  // initial distribution so every row is still a distribution.
  const auto init = widen(source.initial());
  std::vector<double> transition, second;
  if (source.order() == 1) {
    transition = widen(source.transition());
    transition.insert(transition.end(), init.begin(), init.end());
  } else {
    second = widen(source.second());
    second.insert(second.end(), init.begin(), init.end());
    const auto narrow = widen(source.transition());
    for (std::size_t a = 0; a < w; ++a)
      for (std::size_t b = 0; b < w; ++b) {
        if (a < v && b < v) {
          const auto off = static_cast<std::ptrdiff_t>((a * v + b) * w);
          transition.insert(transition.end(), narrow.begin() + off, narrow.begin() + off + static_cast<std::ptrdiff_t>(w));
        } else {
          transition.insert(transition.end(), init.begin(), init.end());
        }
      }
  }
  MarkovSource out(source.order(), w, init, std::move(transition), std::move(second),
                   static_cast<Token>(v));
  for (const auto& [id, p] : source.prompts()) out.add_prompt(id, widen(p));
  auto desc = source.description();
  desc["reset_token"] = true;
  out.set_description(std::move(desc));
  return out;
}

MarkovSource source_from_json(const nlohmann::json& config, const std::string& path) {
  if (!config.is_object()) throw ConfigError(path, "expected an object");
  auto key = [&](const std::string& k) { return path + "." + k; };
  auto get_size = [&](const nlohmann::json& obj, const std::string& k, const std::string& p) -> std::size_t {
    if (!obj.contains(k)) throw ConfigError(p, "missing required key");
    const auto& v = obj.at(k);
    if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(p, "expected a non-negative integer");
    return v.get<std::size_t>();
  };
  const std::string kind = config.value("kind", std::string{});
  if (kind.empty()) throw ConfigError(key("kind"), "missing source kind");
  const std::size_t v = get_size(config, "V", key("V"));
  if (v < 2) throw ConfigError(key("V"), "V must be at least 2");
  const int order = config.contains("order") ? static_cast<int>(get_size(config, "order", key("order"))) : 1;
  const nlohmann::json params = config.value("parameters", nlohmann::json::object());
  const std::string ppath = key("parameters");
  auto number = [&](const std::string& k, double fallback) {
    if (!params.contains(k)) return fallback;
    if (!params.at(k).is_number()) throw ConfigError(ppath + "." + k, "expected a number");
    return params.at(k).get<double>();
  };
  auto start = [&]() -> std::optional<Token> {
    if (!params.contains("start")) return std::nullopt;
    const auto s = get_size(params, "start", ppath + ".start");
    if (s >= v) throw ConfigError(ppath + ".start", "start token outside the vocabulary");
    return static_cast<Token>(s);
  };
  if (kind != "custom" && order != 1) throw ConfigError(key("order"), "preset '" + kind + "' is order 1");

  try {
    std::optional<MarkovSource> src;
    if (kind == "iid") {
      std::vector<double> probs;
      if (params.contains("probs")) probs = params.at("probs").get<std::vector<double>>();
      src = make_iid(v, std::move(probs));
    } else if (kind == "sticky") {
      src = make_sticky(v, number("stay", 0.9));
    } else if (kind == "cycle") {
      src = make_cycle(v, start());
    } else if (kind == "lossy_counter") {
      src = make_lossy_counter(v, number("epsilon", 0.05), start());
    } else if (kind == "custom") {
      if (params.contains("transition")) {
        auto flat = [](const nlohmann::json& j) {
          std::vector<double> out;
          auto rec = [&](const auto& self, const nlohmann::json& x) -> void {
            if (x.is_array()) {
              for (const auto& e : x) self(self, e);
            } else {
              out.push_back(x.get<double>());
            }
          };
          rec(rec, j);
          return out;
        };
        auto initial = params.contains("initial") ? flat(params.at("initial")) : uniform_row(v);
        auto second = params.contains("second") ? flat(params.at("second")) : std::vector<double>{};
        src.emplace(order, v, std::move(initial), flat(params.at("transition")), std::move(second));
        auto desc = config;
        desc.erase("prompts");
        desc.erase("reset_token");
        src->set_description(desc);
      } else {
        const std::uint64_t seed = config.value("seed", std::uint64_t{0});
        src = make_random_chain(order, v, seed, number("alpha", 1.0));
      }
    } else {
      throw ConfigError(key("kind"), "unknown source kind '" + kind + "'");
    }
    if (config.contains("prompts")) {
      for (const auto& [id, init] : config.at("prompts").items()) {
        if (init.is_number_integer()) {
          src->add_prompt(id, delta_row(v, init.get<Token>()));
        } else {
          src->add_prompt(id, init.get<std::vector<double>>());
        }
      }
    }
    if (config.value("reset_token", false)) src = with_reset_token(*src);
    return *std::move(src);
  } catch (const ConfigError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path, e.what());
  } catch (const Error& e) {
    throw ConfigError(path, e.what());
  }
}

// ---------------------------------------------------------------------------
// Posteriors

const PositionPosterior* Posterior::find(std::size_t position) const {
  auto it = std::lower_bound(entries.begin(), entries.end(), position,
                             [](const PositionPosterior& e, std::size_t p) { return e.position < p; });
  return it != entries.end() && it->position == position ? &*it : nullptr;
}

const PositionPosterior& Posterior::at(std::size_t position) const {
  const auto* e = find(position);
  if (!e) throw ProtocolViolation("no posterior for position " + std::to_string(position));
  return *e;
}

void finalize_entry(PositionPosterior& entry, ConfidenceKind kind) {
  double best = -1.0, second = -1.0;
  Token arg = 0;
  for (std::size_t y = 0; y < entry.probs.size(); ++y) {
    const double p = entry.probs[y];
    if (p > best) {
      second = best;
      best = p;
      arg = static_cast<Token>(y);
    } else if (p > second) {
      second = p;
    }
  }
  entry.argmax = arg;
  entry.confidence = kind == ConfidenceKind::top1 ? best : best - std::max(second, 0.0);
}

namespace {

struct GroupView {
  std::vector<std::size_t> positions;
  std::vector<Token> observed;  // kMask where free
};

std::vector<GroupView> collect_groups(const MaskedState& state, const PosteriorOptions& options) {
  std::vector<GroupView> groups;
  std::vector<bool> covered(state.length(), false);
  auto add = [&](const std::vector<std::size_t>& positions) {
    GroupView g;
    g.positions = positions;
    for (std::size_t p : positions) {
      if (p >= state.length()) throw ProtocolViolation("denoiser group position out of range");
      if (covered[p]) throw ProtocolViolation("denoiser groups overlap at position " + std::to_string(p));
      covered[p] = true;
      g.observed.push_back(state.token(p));
    }
    groups.push_back(std::move(g));
  };
  if (options.groups.empty()) {
    std::vector<std::size_t> all(state.length());
    std::iota(all.begin(), all.end(), std::size_t{0});
    add(all);
  } else {
    for (const auto& g : options.groups) add(g);
  }
  for (std::size_t p = 0; p < state.length(); ++p)
    if (state.is_masked(p) && !covered[p])
      throw ProtocolViolation("masked position " + std::to_string(p) + " is outside every denoiser group");
  return groups;
}

void check_observed(const GroupView& g, std::size_t v) {
  for (Token t : g.observed)
    if (t != kMask && (t < 0 || static_cast<std::size_t>(t) >= v))
      throw ProtocolViolation("observed token " + std::to_string(t) + " is not a content id of the source");
}

Posterior assemble(std::vector<PositionPosterior> entries, ConfidenceKind kind) {
  std::sort(entries.begin(), entries.end(),
            [](const PositionPosterior& a, const PositionPosterior& b) { return a.position < b.position; });
  for (auto& e : entries) finalize_entry(e, kind);
  Posterior out;
  out.entries = std::move(entries);
  return out;
}

// Forward-backward over one group. Returns false if the evidence is impossible.
bool forward_backward(const ChainView& chain, const GroupView& g, std::vector<PositionPosterior>& out) {
  const std::size_t n = g.positions.size();
  const std::size_t s_count = chain.num_states();
  const auto v = static_cast<Token>(chain.vocab_size());
  if (n == 0) return true;

  auto normalize = [](std::vector<double>& x) {
    double sum = 0.0;
    for (double a : x) sum += a;
    if (sum <= 0.0) return false;
    for (double& a : x) a /= sum;
    return true;
  };

  // alpha[i]: distribution of the history state after position i-1 (alpha[0] = fresh).
  std::vector<std::vector<double>> alpha(n + 1, std::vector<double>(s_count, 0.0));
  alpha[0][ChainView::fresh] = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = alpha[i];
    auto& b = alpha[i + 1];
    const Token obs = g.observed[i];
    for (std::size_t s = 0; s < s_count; ++s) {
      if (a[s] == 0.0) continue;
      if (obs != kMask) {
        if (chain.is_reset(obs)) {
          b[ChainView::fresh] += a[s];
        } else {
          b[chain.next(s, obs)] += a[s] * chain.prob(s, obs);
        }
        continue;
      }
      for (Token y = 0; y < v; ++y) {
        const double p = chain.prob(s, y);
        if (p != 0.0) b[chain.next(s, y)] += a[s] * p;
      }
    }
    if (!normalize(b)) return false;
  }

  // beta[i]: likelihood of observations after position i-1 given the state.
  std::vector<std::vector<double>> beta(n + 1, std::vector<double>(s_count, 0.0));
  std::fill(beta[n].begin(), beta[n].end(), 1.0);
  for (std::size_t i = n; i-- > 0;) {
    const auto& nb = beta[i + 1];
    auto& cb = beta[i];
    const Token obs = g.observed[i];
    for (std::size_t s = 0; s < s_count; ++s) {
      double acc = 0.0;
      if (obs != kMask) {
        acc = chain.is_reset(obs) ? nb[ChainView::fresh] : chain.prob(s, obs) * nb[chain.next(s, obs)];
      } else {
        for (Token y = 0; y < v; ++y) {
          const double p = chain.prob(s, y);
          if (p != 0.0) acc += p * nb[chain.next(s, y)];
        }
      }
      cb[s] = acc;
    }
    double mx = *std::max_element(cb.begin(), cb.end());
    if (mx <= 0.0) return false;
    for (double& x : cb) x /= mx;
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (g.observed[i] != kMask) continue;
    PositionPosterior e;
    e.position = g.positions[i];
    e.probs.assign(static_cast<std::size_t>(v), 0.0);
    double total = 0.0;
    for (std::size_t s = 0; s < s_count; ++s) {
      const double a = alpha[i][s];
      if (a == 0.0) continue;
      for (Token y = 0; y < v; ++y) {
        const double p = chain.prob(s, y);
        if (p == 0.0) continue;
        const double w = a * p * beta[i + 1][chain.next(s, y)];
        e.probs[static_cast<std::size_t>(y)] += w;
        total += w;
      }
    }
    if (total <= 0.0) return false;
    for (double& p : e.probs) p /= total;
    out.push_back(std::move(e));
  }
  return true;
}

std::optional<Posterior> exact_posterior_once(const MarkovSource& source, const MaskedState& state,
                                              const PosteriorOptions& options) {
  const ChainView chain(source, options.prompt);
  std::vector<PositionPosterior> entries;
  for (const auto& g : collect_groups(state, options)) {
    check_observed(g, source.vocab_size());
    if (!forward_backward(chain, g, entries)) return std::nullopt;
  }
  return assemble(std::move(entries), options.confidence);
}

}  // namespace

Posterior exact_posterior(const MarkovSource& source, const MaskedState& state,
                          const PosteriorOptions& options) {
  if (auto p = exact_posterior_once(source, state, options)) return *std::move(p);
  if (!options.smooth_inconsistent) throw DomainError("unmasked evidence has probability zero under the source");
  const MarkovSource smooth = source.smoothed(options.smoothing_weight);
  auto p = exact_posterior_once(smooth, state, options);
  if (!p) throw DomainError("unmasked evidence has probability zero even after smoothing");
  p->evidence_consistent = false;
  return *std::move(p);
}

Posterior oracle_posterior(const MarkovSource& source, const MaskedState& state,
                           const PosteriorOptions& options) {
  const ChainView chain(source, options.prompt);
  const std::size_t v = source.vocab_size();
  auto groups = collect_groups(state, options);
  for (const auto& g : groups) check_observed(g, v);

  // Free slots as (group, index-in-group).
  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t gi = 0; gi < groups.size(); ++gi)
    for (std::size_t i = 0; i < groups[gi].observed.size(); ++i)
      if (groups[gi].observed[i] == kMask) slots.emplace_back(gi, i);

  const std::size_t completions = ipow_capped(v, slots.size(), options.enumeration_cap);
  if (completions > options.enumeration_cap)
    throw CapacityError(std::to_string(slots.size()) + " masked positions over V=" + std::to_string(v) +
                        " exceed the enumeration cap of " + std::to_string(options.enumeration_cap) +
                        " completions; reduce L or V, or use mc_posterior");

  std::vector<std::vector<double>> mass(slots.size(), std::vector<double>(v, 0.0));
  std::vector<std::size_t> digits(slots.size(), 0);
  double total = 0.0;
  for (std::size_t c = 0; c < completions; ++c) {
    for (std::size_t k = 0; k < slots.size(); ++k)
      groups[slots[k].first].observed[slots[k].second] = static_cast<Token>(digits[k]);
    // Free slots never hold the reset token; it is structural, not generated.
    double joint = 1.0;
    if (const auto r = source.reset_token())
      for (std::size_t d : digits)
        if (d == static_cast<std::size_t>(*r)) joint = 0.0;
    for (const auto& g : groups) {
      if (joint == 0.0) break;
      joint *= sequence_prob(chain, g.observed);
      if (joint == 0.0) break;
    }
    if (joint != 0.0) {
      total += joint;
      for (std::size_t k = 0; k < slots.size(); ++k) mass[k][digits[k]] += joint;
    }
    for (std::size_t k = 0; k < digits.size(); ++k) {
      if (++digits[k] < v) break;
      digits[k] = 0;
    }
  }
  if (total <= 0.0) throw DomainError("unmasked evidence has probability zero under the source");

  std::vector<PositionPosterior> entries;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    PositionPosterior e;
    e.position = groups[slots[k].first].positions[slots[k].second];
    e.probs = std::move(mass[k]);
    for (double& p : e.probs) p /= total;
    entries.push_back(std::move(e));
  }
  return assemble(std::move(entries), options.confidence);
}

Posterior mc_posterior(const MarkovSource& source, const MaskedState& state, std::size_t n_samples,
                       std::uint64_t seed, const PosteriorOptions& options) {
  if (n_samples == 0) throw DomainError("mc_posterior needs at least one sample");
  const ChainView chain(source, options.prompt);
  const std::size_t v = source.vocab_size();
  auto groups = collect_groups(state, options);
  for (const auto& g : groups) check_observed(g, v);

  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t gi = 0; gi < groups.size(); ++gi)
    for (std::size_t i = 0; i < groups[gi].observed.size(); ++i)
      if (groups[gi].observed[i] == kMask) slots.emplace_back(gi, i);

  Rng rng(seed);
  std::vector<std::vector<Token>> draw(groups.size());
  std::vector<std::vector<std::size_t>> counts(slots.size(), std::vector<std::size_t>(v, 0));
  std::vector<double> weights(v);
  std::size_t accepted = 0;
  for (std::size_t n = 0; n < n_samples; ++n) {
    bool ok = true;
    for (std::size_t gi = 0; gi < groups.size() && ok; ++gi) {
      const auto& g = groups[gi];
      auto& out = draw[gi];
      out.resize(g.observed.size());
      std::size_t s = ChainView::fresh;
      for (std::size_t i = 0; i < g.observed.size(); ++i) {
        const Token obs = g.observed[i];
        Token y;
        if (obs != kMask && chain.is_reset(obs)) {
          y = obs;
        } else {
          for (std::size_t t = 0; t < v; ++t) weights[t] = chain.prob(s, static_cast<Token>(t));
          y = static_cast<Token>(rng.categorical(weights));
          if (obs != kMask && y != obs) {
            ok = false;
            break;
          }
        }
        out[i] = y;
        s = chain.next(s, y);
      }
    }
    if (!ok) continue;
    ++accepted;
    for (std::size_t k = 0; k < slots.size(); ++k)
      ++counts[k][static_cast<std::size_t>(draw[slots[k].first][slots[k].second])];
  }
  const double rate = static_cast<double>(accepted) / static_cast<double>(n_samples);
  if (accepted == 0)
    throw EstimationFailure("no sample matched the unmasked evidence (acceptance rate 0 of " +
                                std::to_string(n_samples) + ")",
                            rate);

  std::vector<PositionPosterior> entries;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    PositionPosterior e;
    e.position = groups[slots[k].first].positions[slots[k].second];
    e.samples = accepted;
    e.probs.resize(v);
    for (std::size_t t = 0; t < v; ++t)
      e.probs[t] = static_cast<double>(counts[k][t]) / static_cast<double>(accepted);
    entries.push_back(std::move(e));
  }
  return assemble(std::move(entries), options.confidence);
}

// ---------------------------------------------------------------------------
// Sampling and scoring

std::vector<Token> sample_continuation(const MarkovSource& source, std::span<const Token> prefix,
                                       std::size_t count, Rng& rng, std::string_view prompt) {
  const ChainView chain(source, prompt);
  const std::size_t v = source.vocab_size();
  std::size_t s = ChainView::fresh;
  for (Token y : prefix) s = chain.next(s, y);
  std::vector<Token> out;
  out.reserve(count);
  std::vector<double> weights(v);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t t = 0; t < v; ++t) weights[t] = chain.prob(s, static_cast<Token>(t));
    const auto y = static_cast<Token>(rng.categorical(weights));
    out.push_back(y);
    s = chain.next(s, y);
  }
  return out;
}

std::vector<Token> sample_sequence(const MarkovSource& source, std::size_t length, std::uint64_t seed,
                                   std::string_view prompt) {
  if (length == 0) throw DomainError("sequence length must be at least 1");
  Rng rng(seed);
  return sample_continuation(source, {}, length, rng, prompt);
}

double ar_logprob_gap(const MarkovSource& source, std::span<const Token> context, std::size_t gap,
                      std::span<const Token> continuation) {
  if (continuation.empty()) throw DomainError("continuation must be non-empty");
  const ChainView chain(source);
  const std::size_t s_count = chain.num_states();
  const auto v = static_cast<Token>(source.vocab_size());
  std::vector<double> dist(s_count, 0.0), next(s_count, 0.0);
  dist[ChainView::fresh] = 1.0;

  // Returns the normaliser of the step (1 for free steps and resets).
  auto step = [&](Token obs) {
    std::fill(next.begin(), next.end(), 0.0);
    if (obs != kMask && (obs < 0 || obs >= v))
      throw DomainError("token " + std::to_string(obs) + " is outside the source vocabulary");
    // Set while every live state emits obs with the same probability.
    std::optional<double> common;
    bool shared_prob = obs != kMask && !chain.is_reset(obs);
    for (std::size_t s = 0; s < s_count; ++s) {
      const double a = dist[s];
      if (a == 0.0) continue;
      if (shared_prob) {
        const double p = chain.prob(s, obs);
        if (!common) common = p;
        else if (*common != p) shared_prob = false;
      }
      if (obs == kMask) {
        for (Token y = 0; y < v; ++y) {
          const double p = chain.prob(s, y);
          if (p != 0.0) next[chain.next(s, y)] += a * p;
        }
      } else if (chain.is_reset(obs)) {
        next[ChainView::fresh] += a;
      } else {
        next[chain.next(s, obs)] += a * chain.prob(s, obs);
      }
    }
    double sum = 0.0;
    for (double x : next) sum += x;
    if (sum > 0.0)
      for (double& x : next) x /= sum;
    std::swap(dist, next);
    return shared_prob && common ? *common : sum;
  };

  // An impossible stretch of context is forgiven once a reset token follows
  // it: the chain forgets everything before the reset.
  bool dead = false;
  for (Token y : context) {
    if (dead && chain.is_reset(y)) {
      std::fill(dist.begin(), dist.end(), 0.0);
      dist[ChainView::fresh] = 1.0;
      dead = false;
      continue;
    }
    if (!dead && step(y) == 0.0) dead = true;
  }
  if (dead) throw DomainError("context has probability zero under the source");
  for (std::size_t i = 0; i < gap; ++i) step(kMask);
  double logp = 0.0;
  for (Token y : continuation) {
    const double c = step(y);
    if (c == 0.0) return kNegInf;
    if (!chain.is_reset(y)) logp += std::log(c);
  }
  return logp;
}

double ar_logprob(const MarkovSource& source, std::span<const Token> context,
                  std::span<const Token> continuation) {
  return ar_logprob_gap(source, context, 0, continuation);
}

// ---------------------------------------------------------------------------

ChainDenoiser::ChainDenoiser(std::shared_ptr<const MarkovSource> source, PosteriorOptions options,
                             PosteriorMethod method)
    : source_(std::move(source)), options_(std::move(options)), method_(method) {
  if (!source_) throw InvalidInput("denoiser needs a source");
}

Posterior ChainDenoiser::predict(const MaskedState& state) const {
  return method_ == PosteriorMethod::enumeration ? oracle_posterior(*source_, state, options_)
                                                 : exact_posterior(*source_, state, options_);
}

}  // namespace dlm
