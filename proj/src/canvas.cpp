#include "dlm/canvas.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "dlm/error.hpp"

namespace dlm {

std::string canvas_label(const Vocabulary& vocab, Token t) {
  const std::size_t v = vocab.size();
  if (t == kMask || vocab.is_content(t)) return vocab.label(t);
  if (t == header_ids::think(v)) return "<think";
  if (t == header_ids::summary(v)) return "<summary>";
  if (t > header_ids::summary(v)) return "#" + std::to_string(static_cast<std::size_t>(t) - v - 1) + ">";
  return vocab.label(t);
}

std::size_t CanvasLayout::total_length() const noexcept {
  std::size_t n = summary_header.size() + summary_budget;
  for (std::size_t j = 0; j < headers.size(); ++j) n += headers[j].size() + (j < budgets.size() ? budgets[j] : 0);
  return n;
}

std::size_t CanvasLayout::total_budget() const noexcept {
  std::size_t n = 0;
  for (auto b : budgets) n += b;
  return n;
}

void CanvasLayout::validate() const {
  if (headers.empty()) throw LayoutError("canvas needs at least one reasoning block");
  if (budgets.size() != headers.size())
    throw LayoutError("expected " + std::to_string(headers.size()) + " budgets, got " + std::to_string(budgets.size()));
  std::set<std::vector<Token>> seen;
  for (std::size_t j = 0; j < headers.size(); ++j) {
    if (headers[j].empty()) throw LayoutError("header of block " + std::to_string(j + 1) + " is empty");
    if (budgets[j] == 0) throw LayoutError("budget of block " + std::to_string(j + 1) + " is zero");
    if (!seen.insert(headers[j]).second) throw LayoutError("header of block " + std::to_string(j + 1) + " is repeated");
  }
  if (summary_header.empty()) throw LayoutError("summary header is empty");
  if (summary_budget == 0) throw LayoutError("summary budget is zero");
  if (!seen.insert(summary_header).second) throw LayoutError("summary header repeats a block header");
  for (const auto& h : headers)
    for (Token t : h)
      if (t == kMask) throw LayoutError("header contains the mask token");
  for (Token t : summary_header)
    if (t == kMask) throw LayoutError("summary header contains the mask token");
}

CanvasLayout make_layout(std::size_t vocab_size, std::size_t m, std::vector<std::size_t> budgets,
                         std::size_t summary_budget, HeaderStyle style) {
  if (m == 0) throw LayoutError("canvas needs at least one reasoning block");
  if (budgets.size() == 1 && m > 1) budgets.assign(m, budgets.front());
  CanvasLayout layout;
  for (std::size_t j = 1; j <= m; ++j) {
    if (style == HeaderStyle::tagged) {
      layout.headers.push_back({header_ids::think(vocab_size), header_ids::number(vocab_size, j)});
    } else {
      layout.headers.push_back({header_ids::number(vocab_size, j)});
    }
  }
  layout.summary_header = {header_ids::summary(vocab_size)};
  layout.budgets = std::move(budgets);
  layout.summary_budget = summary_budget;
  layout.validate();
  return layout;
}

CanvasLayout layout_from_json(const nlohmann::json& config, std::size_t vocab_size, const std::string& path) {
  if (!config.is_object()) throw ConfigError(path, "expected an object");
  auto size_at = [&](const nlohmann::json& v, const std::string& p) -> std::size_t {
    if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(p, "expected a non-negative integer");
    return v.get<std::size_t>();
  };
  const std::size_t m = config.contains("m") ? size_at(config.at("m"), path + ".m") : 3;
  if (m == 0) throw ConfigError(path + ".m", "m must be at least 1");
  std::vector<std::size_t> budgets;
  if (config.contains("total_budget")) {
    if (config.contains("budgets")) throw ConfigError(path + ".total_budget", "give either budgets or total_budget");
    const std::size_t total = size_at(config.at("total_budget"), path + ".total_budget");
    for (std::size_t j = 0; j < m; ++j) budgets.push_back(total / m + (j < total % m ? 1 : 0));
  } else if (config.contains("budgets") && config.at("budgets").is_array()) {
    for (std::size_t j = 0; j < config.at("budgets").size(); ++j)
      budgets.push_back(size_at(config.at("budgets")[j], path + ".budgets[" + std::to_string(j) + "]"));
    if (budgets.size() != m) throw ConfigError(path + ".budgets", "list length must equal m");
  } else {
    budgets.push_back(config.contains("budgets") ? size_at(config.at("budgets"), path + ".budgets") : 330);
  }
  const std::size_t summary =
      config.contains("summary_budget") ? size_at(config.at("summary_budget"), path + ".summary_budget") : 32;
  const std::string style_name = config.value("header_style", std::string("tagged"));
  HeaderStyle style;
  if (style_name == "tagged") {
    style = HeaderStyle::tagged;
  } else if (style_name == "compact") {
    style = HeaderStyle::compact;
  } else {
    throw ConfigError(path + ".header_style", "unknown header style '" + style_name + "'");
  }
  try {
    return make_layout(vocab_size, m, std::move(budgets), summary, style);
  } catch (const LayoutError& e) {
    throw ConfigError(path, e.what());
  }
}

std::optional<std::size_t> CanvasRegions::content_block_of(std::size_t position) const {
  for (std::size_t j = 0; j < blocks.size(); ++j)
    if (blocks[j].content.contains(position)) return j;
  if (summary.content.contains(position)) return blocks.size();
  return std::nullopt;
}

std::vector<std::size_t> CanvasRegions::content_positions(std::size_t block) const {
  const Interval iv = block < blocks.size() ? blocks[block].content : summary.content;
  std::vector<std::size_t> out;
  for (std::size_t p = iv.begin; p < iv.end; ++p) out.push_back(p);
  return out;
}

Canvas build_canvas(const CanvasLayout& layout, std::span<const Token> prompt) {
  layout.validate();
  Canvas canvas;
  canvas.prompt.assign(prompt.begin(), prompt.end());
  canvas.state = MaskedState(layout.total_length());
  std::size_t cursor = 0;
  auto place = [&](const std::vector<Token>& header, std::size_t budget) {
    BlockRegion r;
    r.header = {cursor, cursor + header.size()};
    for (Token t : header) canvas.state.clamp(cursor++, t);
    r.content = {cursor, cursor + budget};
    cursor += budget;
    return r;
  };
  for (std::size_t j = 0; j < layout.m(); ++j) canvas.regions.blocks.push_back(place(layout.headers[j], layout.budgets[j]));
  canvas.regions.summary = place(layout.summary_header, layout.summary_budget);
  canvas.regions.length = cursor;
  if (cursor != layout.total_length()) throw LayoutError("canvas regions do not tile the layout length");
  return canvas;
}

std::vector<Token> extract_summary(const MaskedState& state, const CanvasRegions& regions, std::optional<Token> pad) {
  if (state.length() != regions.length) throw ProtocolViolation("state length does not match the canvas regions");
  const Interval iv = regions.summary.content;
  std::vector<Token> out;
  for (std::size_t p = iv.begin; p < iv.end; ++p) {
    if (state.is_masked(p)) throw IncompleteDecode("summary position " + std::to_string(p) + " is still masked");
    out.push_back(state.token(p));
  }
  if (pad) {
    auto first = std::find_if(out.begin(), out.end(), [&](Token t) { return t != *pad; });
    out.erase(out.begin(), first);
    while (!out.empty() && out.back() == *pad) out.pop_back();
  }
  return out;
}

std::vector<std::vector<std::size_t>> canvas_groups(const CanvasRegions& regions, CanvasDependence dependence) {
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t j = 0; j <= regions.m(); ++j) groups.push_back(regions.content_positions(j));
  if (dependence == CanvasDependence::spanning) {
    std::vector<std::size_t> all;
    for (const auto& g : groups) all.insert(all.end(), g.begin(), g.end());
    return {all};
  }
  return groups;
}

double DivergenceTable::max() const {
  double m = 0.0;
  for (const auto& row : divergence)
    for (double d : row) m = std::max(m, d);
  return m;
}

MaskedState sample_completion(const Denoiser& denoiser, MaskedState state, Rng& rng) {
  while (state.mask_count() > 0) {
    const Posterior post = denoiser.predict(state);
    const std::size_t pos = state.masked_positions().front();
    const auto& entry = post.at(pos);
    const Commit c{pos, static_cast<Token>(rng.categorical(entry.probs))};
    state = apply_commits(state, std::span(&c, 1), denoiser.vocab_size());
  }
  return state;
}

DivergenceTable conditional_independence_probe(const Denoiser& denoiser, const CanvasLayout& layout,
                                               std::span<const Token> prompt, std::size_t n_seeds,
                                               std::uint64_t seed) {
  const Canvas canvas = build_canvas(layout, prompt);
  const std::size_t m = layout.m();
  DivergenceTable table;
  table.divergence.assign(m, std::vector<double>(m, 0.0));
  const std::size_t v = denoiser.vocab_size();

  auto with_tokens = [&](const MaskedState& base, const std::vector<std::pair<std::size_t, Token>>& set) {
    std::vector<Token> tokens(base.tokens().begin(), base.tokens().end());
    for (const auto& [p, t] : set) tokens[p] = t;
    return MaskedState(std::move(tokens), base.clamped());
  };

  for (std::size_t s = 0; s < n_seeds; ++s) {
    Rng rng(split_seed(seed, s));
    const MaskedState full = sample_completion(denoiser, canvas.state, rng);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        if (i == j) continue;
        // Random partial canvas; block j keeps at least one masked slot.
        std::vector<std::pair<std::size_t, Token>> partial;
        for (std::size_t p = 0; p < full.length(); ++p) {
          if (full.is_clamped(p)) continue;
          partial.emplace_back(p, rng.bernoulli(0.5) ? kMask : full.token(p));
        }
        const auto j_positions = canvas.regions.content_positions(j);
        const bool j_has_mask = std::any_of(partial.begin(), partial.end(), [&](const auto& pt) {
          return pt.second == kMask && canvas.regions.blocks[j].content.contains(pt.first);
        });
        if (!j_has_mask) {
          for (auto& pt : partial)
            if (pt.first == j_positions.front()) pt.second = kMask;
        }
        auto hidden = partial, shown = partial;
        for (auto& pt : hidden)
          if (canvas.regions.blocks[i].content.contains(pt.first)) pt.second = kMask;
        for (auto& pt : shown)
          if (canvas.regions.blocks[i].content.contains(pt.first)) pt.second = full.token(pt.first);
        const Posterior a = denoiser.predict(with_tokens(full, hidden));
        const Posterior b = denoiser.predict(with_tokens(full, shown));
        double d = 0.0;
        for (std::size_t p : j_positions) {
          const auto* ea = a.find(p);
          const auto* eb = b.find(p);
          if (!ea || !eb) continue;
          for (std::size_t y = 0; y < v; ++y) d = std::max(d, std::abs(ea->probs[y] - eb->probs[y]));
        }
        table.divergence[i][j] = std::max(table.divergence[i][j], d);
      }
    }
    ++table.samples;
  }
  return table;
}

}  // namespace dlm
