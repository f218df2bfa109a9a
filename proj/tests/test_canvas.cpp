#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <memory>

#include "dlm/canvas.hpp"
#include "dlm/error.hpp"
#include "dlm/random.hpp"

using namespace dlm;

TEST_CASE("canvas length is headers plus budgets") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t v = 2 + rng.below(10);
    const std::size_t m = 1 + rng.below(6);
    std::vector<std::size_t> budgets;
    for (std::size_t j = 0; j < m; ++j) budgets.push_back(1 + rng.below(20));
    const std::size_t summary = 1 + rng.below(8);
    const auto style = rng.bernoulli(0.5) ? HeaderStyle::tagged : HeaderStyle::compact;
    const auto layout = make_layout(v, m, budgets, summary, style);
    const std::size_t header = style == HeaderStyle::tagged ? 2 : 1;
    std::size_t expect = 1 + summary;
    for (auto b : budgets) expect += header + b;
    CHECK(layout.total_length() == expect);
    const auto canvas = build_canvas(layout);
    CHECK(canvas.state.length() == expect);
    CHECK(canvas.state.mask_count() == layout.total_budget() + summary);
  }
}

TEST_CASE("regions tile the canvas") {
  const auto layout = make_layout(4, 3, {2, 3, 1}, 2);
  const std::vector<Token> prompt = {1, 2};
  const auto canvas = build_canvas(layout, prompt);
  const auto& reg = canvas.regions;
  CHECK(canvas.prompt == prompt);
  CHECK(reg.length == 2 + 2 + 2 + 3 + 2 + 1 + 1 + 2);
  std::vector<int> cover(reg.length, 0);
  for (std::size_t j = 0; j < reg.m(); ++j) {
    for (std::size_t p = reg.blocks[j].header.begin; p < reg.blocks[j].header.end; ++p) {
      ++cover[p];
      CHECK(canvas.state.is_clamped(p));
      CHECK_FALSE(reg.content_block_of(p).has_value());
    }
    CHECK(reg.blocks[j].content.size() == layout.budgets[j]);
    for (std::size_t p : reg.content_positions(j)) {
      ++cover[p];
      CHECK(canvas.state.is_masked(p));
      CHECK(reg.content_block_of(p) == j);
    }
  }
  for (std::size_t p = reg.summary.header.begin; p < reg.summary.header.end; ++p) ++cover[p];
  for (std::size_t p : reg.content_positions(reg.m())) {
    ++cover[p];
    CHECK(reg.content_block_of(p) == reg.m());
  }
  for (int c : cover) CHECK(c == 1);
  CHECK(canvas.state.token(0) == header_ids::think(4));
  CHECK(canvas.state.token(1) == header_ids::number(4, 1));
  CHECK(canvas.state.token(reg.summary.header.begin) == header_ids::summary(4));

  const Vocabulary vocab(4);
  CHECK(canvas_label(vocab, header_ids::think(4)) == "<think");
  CHECK(canvas_label(vocab, header_ids::number(4, 2)) == "#2>");
  CHECK(canvas_label(vocab, header_ids::summary(4)) == "<summary>");
  CHECK(canvas_label(vocab, 3) == "t3");
}

TEST_CASE("layout validation") {
  CHECK_THROWS_AS(make_layout(4, 0, {3}, 2), LayoutError);
  CHECK_THROWS_AS(make_layout(4, 2, {3, 0}, 2), LayoutError);
  CHECK_THROWS_AS(make_layout(4, 2, {3}, 0), LayoutError);
  CHECK_THROWS_AS(make_layout(4, 3, {3, 3}, 1), LayoutError);
  CanvasLayout dup = make_layout(4, 2, {3}, 1);
  dup.headers[1] = dup.headers[0];
  CHECK_THROWS_AS(dup.validate(), LayoutError);
  CanvasLayout empty = make_layout(4, 2, {3}, 1);
  empty.headers[0].clear();
  CHECK_THROWS_AS(build_canvas(empty), LayoutError);
}

TEST_CASE("layouts from json") {
  const auto a = layout_from_json(nlohmann::json::parse(R"({"m":3,"total_budget":10,"summary_budget":4})"), 5);
  CHECK(a.budgets == std::vector<std::size_t>{4, 3, 3});
  CHECK(a.summary_budget == 4);
  const auto b = layout_from_json(nlohmann::json::parse(R"({"m":2,"budgets":[5,7],"header_style":"compact"})"), 5);
  CHECK(b.budgets == std::vector<std::size_t>{5, 7});
  CHECK(b.headers[0].size() == 1);
  CHECK(b.summary_budget == 32);
  const auto d = layout_from_json(nlohmann::json::object(), 5);
  CHECK(d.m() == 3);
  CHECK(d.budgets == std::vector<std::size_t>{330, 330, 330});

  auto key_of = [](const char* text) {
    try {
      layout_from_json(nlohmann::json::parse(text), 5);
    } catch (const ConfigError& e) {
      return e.key_path();
    }
    return std::string("no error");
  };
  CHECK(key_of(R"({"m":0})") == "canvas.m");
  CHECK(key_of(R"({"m":2,"budgets":[1]})") == "canvas.budgets");
  CHECK(key_of(R"({"budgets":-1})") == "canvas.budgets");
  CHECK(key_of(R"({"header_style":"loud"})") == "canvas.header_style");
  CHECK(key_of(R"({"budgets":3,"total_budget":9})") == "canvas.total_budget");
}

TEST_CASE("summary extraction") {
  const auto layout = make_layout(4, 1, {2}, 4);
  auto canvas = build_canvas(layout);
  const auto& reg = canvas.regions;
  CHECK_THROWS_AS(extract_summary(canvas.state, reg), IncompleteDecode);
  std::vector<Commit> fill;
  const std::vector<Token> content = {0, 1, 0, 0, 3, 0};
  std::size_t k = 0;
  for (std::size_t p : canvas.state.masked_positions()) fill.push_back({p, content[k++]});
  const auto done = apply_commits(canvas.state, fill, 4);
  CHECK(extract_summary(done, reg) == std::vector<Token>{0, 0, 3, 0});
  CHECK(extract_summary(done, reg, Token{0}) == std::vector<Token>{3});
  CHECK_THROWS_AS(extract_summary(MaskedState(3), reg), ProtocolViolation);
}

TEST_CASE("conditional independence probe") {
  const auto src = std::make_shared<const MarkovSource>(make_sticky(3, 0.8));
  const auto layout = make_layout(3, 3, {3}, 2);
  const auto canvas = build_canvas(layout);

  PosteriorOptions indep;
  indep.groups = canvas_groups(canvas.regions, CanvasDependence::independent);
  CHECK(indep.groups.size() == 4);
  const auto t0 = conditional_independence_probe(ChainDenoiser(src, indep), layout, {}, 5, 1);
  CHECK(t0.samples == 5);
  CHECK(t0.max() < 1e-12);

  PosteriorOptions span;
  span.groups = canvas_groups(canvas.regions, CanvasDependence::spanning);
  CHECK(span.groups.size() == 1);
  const auto t1 = conditional_independence_probe(ChainDenoiser(src, span), layout, {}, 5, 1);
  CHECK(t1.max() > 0.01);
  for (std::size_t i = 0; i < 3; ++i) CHECK(t1.divergence[i][i] == 0.0);
}
