#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <numeric>

#include "dlm/core.hpp"
#include "dlm/error.hpp"
#include "dlm/random.hpp"

using namespace dlm;

namespace {

// ceil(a / b) for the linear schedule, computed with plain integer arithmetic.
std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace

TEST_CASE("linear schedule distributes quotas by ceiling differences") {
  const auto s = build_schedule(7, 3);
  CHECK(s.quotas == std::vector<std::size_t>{3, 2, 2});
  CHECK(s.total_tokens() == 7);

  for (std::size_t m = 1; m <= 40; ++m) {
    for (std::size_t t = 1; t <= m; ++t) {
      const auto sched = build_schedule(m, t);
      REQUIRE(sched.total_steps() == t);
      CHECK(sched.total_tokens() == m);
      for (std::size_t step = 1; step <= t; ++step) {
        const std::size_t expect = ceil_div(m * step, t) - ceil_div(m * (step - 1), t);
        CHECK(sched.quotas[step - 1] == expect);
        CHECK(sched.quotas[step - 1] >= 1);
      }
    }
  }
}

TEST_CASE("schedule rejects infeasible requests") {
  CHECK_THROWS_AS(build_schedule(3, 4), InfeasibleSchedule);
  CHECK_THROWS_AS(build_schedule(3, 0), InfeasibleSchedule);
  const std::vector<std::size_t> bad = {2, 2};
  CHECK_THROWS_AS(build_schedule(3, 2, ScheduleKind::custom, bad), InfeasibleSchedule);
  const std::vector<std::size_t> zero = {3, 0};
  CHECK_THROWS(build_schedule(3, 2, ScheduleKind::custom, zero));
  const std::vector<std::size_t> ok = {1, 2};
  const auto s = build_schedule(3, 2, ScheduleKind::custom, ok);
  CHECK(s.quotas == ok);
  CHECK(s.kind == ScheduleKind::custom);
}

TEST_CASE("forward mask endpoints and rate") {
  std::vector<Token> y0(200);
  std::iota(y0.begin(), y0.end(), 0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto none = forward_mask(y0, 0.0, seed);
    CHECK(none.mask_count() == 0);
    CHECK(std::equal(y0.begin(), y0.end(), none.tokens().begin()));
    const auto all = forward_mask(y0, 1.0, seed);
    CHECK(all.mask_count() == y0.size());
    CHECK(all.time() == doctest::Approx(1.0));
  }
  std::size_t masked = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto half = forward_mask(y0, 0.3, seed);
    masked += half.mask_count();
    for (std::size_t i = 0; i < y0.size(); ++i)
      if (!half.is_masked(i)) CHECK(half.token(i) == y0[i]);
  }
  const double rate = static_cast<double>(masked) / (50.0 * 200.0);
  CHECK(rate == doctest::Approx(0.3).epsilon(0.05));
  CHECK(forward_mask(y0, 0.5, 9) == forward_mask(y0, 0.5, 9));
  CHECK_THROWS_AS(forward_mask(y0, 1.5, 0), DomainError);
}

TEST_CASE("apply_commits enforces monotone unmasking") {
  MaskedState s(4);
  s.clamp(0, 2);
  CHECK(s.mask_count() == 3);
  CHECK(s.masked_positions() == std::vector<std::size_t>{1, 2, 3});
  CHECK(s.time() == doctest::Approx(0.75));

  const std::vector<Commit> c = {{1, 0}, {3, 1}};
  const auto s2 = apply_commits(s, c, 4);
  CHECK(s2.mask_count() == 1);
  CHECK(s2.token(3) == 1);
  CHECK(s.mask_count() == 3);

  const std::vector<Commit> dup = {{2, 3}, {2, 3}};
  CHECK(apply_commits(s2, dup, 4).mask_count() == 0);

  const std::vector<Commit> again = {{1, 0}};
  CHECK_THROWS_AS(apply_commits(s2, again, 4), ProtocolViolation);
  const std::vector<Commit> clamped = {{0, 1}};
  CHECK_THROWS_AS(apply_commits(s, clamped, 4), ProtocolViolation);
  const std::vector<Commit> out_of_vocab = {{1, 4}};
  CHECK_THROWS_AS(apply_commits(s, out_of_vocab, 4), ProtocolViolation);
  const std::vector<Commit> mask_token = {{1, kMask}};
  CHECK_THROWS_AS(apply_commits(s, mask_token, 4), ProtocolViolation);
  const std::vector<Commit> conflict = {{1, 0}, {1, 2}};
  CHECK_THROWS_AS(apply_commits(s, conflict, 4), ProtocolViolation);
  const std::vector<Commit> beyond = {{9, 0}};
  CHECK_THROWS(apply_commits(s, beyond, 4));
}

TEST_CASE("vocabulary labels") {
  Vocabulary v(3, {"a", "b", "c"});
  CHECK(v.label(1) == "b");
  CHECK(v.label(kMask) == "[MASK]");
  CHECK(v.find("c") == Token{2});
  CHECK_FALSE(v.find("z").has_value());
  Vocabulary d(2);
  CHECK(d.label(0) == "t0");
  CHECK(d.find("t1") == Token{1});
  CHECK_THROWS(Vocabulary(2, {"x"}));
}

TEST_CASE("seed splitting is deterministic and spreads children") {
  CHECK(split_seed(1, 2) == split_seed(1, 2));
  CHECK(split_seed(1, 2) != split_seed(2, 1));
  CHECK(split_seed(0, 0) != split_seed(0, 1));
  Rng a(5), b(5);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng r(11);
  std::vector<std::size_t> hist(4, 0);
  for (int i = 0; i < 40000; ++i) ++hist[r.below(4)];
  for (auto h : hist) CHECK(static_cast<double>(h) / 40000.0 == doctest::Approx(0.25).epsilon(0.05));
  const std::vector<double> w = {0.0, 1.0, 0.0, 3.0};
  std::vector<std::size_t> cat(4, 0);
  for (int i = 0; i < 40000; ++i) ++cat[r.categorical(w)];
  CHECK(cat[0] == 0);
  CHECK(cat[2] == 0);
  CHECK(static_cast<double>(cat[3]) / 40000.0 == doctest::Approx(0.75).epsilon(0.03));
}
