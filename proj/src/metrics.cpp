#include "dlm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <set>
#include <sstream>
#include <thread>

#include "dlm/error.hpp"

namespace dlm {

namespace {

class Fenwick {
 public:
  explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t i, int delta) {
    for (++i; i < tree_.size(); i += i & (~i + 1)) tree_[i] += delta;
  }
  /// Sum over [0, i).
  int prefix(std::size_t i) const {
    int s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<int> tree_;
};

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

nlohmann::ordered_json gain_json(double g) {
  if (std::isfinite(g)) return g;
  return g < 0 ? "-inf" : (g > 0 ? "inf" : "nan");
}

}  // namespace

void validate_trajectory(const Trajectory& t) {
  if (t.total_commits() == 0) throw InvalidTrajectory("trajectory has no commits");
  std::set<std::size_t> seen;
  for (std::size_t s = 0; s < t.steps.size(); ++s) {
    if (t.steps[s].empty()) throw InvalidTrajectory("step " + std::to_string(s) + " is empty");
    for (const auto& c : t.steps[s]) {
      if (t.length && c.position >= t.length)
        throw InvalidTrajectory("position " + std::to_string(c.position) + " is outside length " +
                                std::to_string(t.length));
      if (!seen.insert(c.position).second)
        throw InvalidTrajectory("position " + std::to_string(c.position) + " is committed twice");
    }
  }
  if (!t.initial_masked.empty()) {
    const std::set<std::size_t> initial(t.initial_masked.begin(), t.initial_masked.end());
    if (initial != seen) throw InvalidTrajectory("committed positions differ from the initially masked set");
  }
}

std::vector<bool> arness_indicators(const Trajectory& t, std::size_t k) {
  if (k == 0) throw DomainError("k must be at least 1");
  validate_trajectory(t);
  const auto order = t.positions();
  std::size_t length = t.length;
  for (std::size_t p : order) length = std::max(length, p + 1);
  Fenwick masked(length);
  for (std::size_t p : order) masked.add(p, 1);
  std::vector<bool> hits;
  hits.reserve(order.size());
  for (std::size_t p : order) {
    hits.push_back(static_cast<std::size_t>(masked.prefix(p)) < k);
    masked.add(p, -1);
  }
  return hits;
}

double global_arness(const Trajectory& t, std::size_t k) {
  const auto hits = arness_indicators(t, k);
  const auto n = static_cast<std::size_t>(std::count(hits.begin(), hits.end(), true));
  return static_cast<double>(n) / static_cast<double>(hits.size());
}

double ARnessReport::score(std::size_t k) const {
  for (std::size_t i = 0; i < k_list.size(); ++i)
    if (k_list[i] == k) return scores[i];
  throw DomainError("k=" + std::to_string(k) + " is not in the report");
}

nlohmann::ordered_json ARnessReport::to_json(bool with_indicators) const {
  nlohmann::ordered_json j;
  j["scheduler"] = scheduler;
  j["prompt_id"] = prompt_id;
  j["seed"] = seed;
  j["length"] = length;
  j["commits"] = commits;
  nlohmann::ordered_json s = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < k_list.size(); ++i) s[std::to_string(k_list[i])] = scores[i];
  j["arness"] = s;
  if (with_indicators) {
    nlohmann::ordered_json ind = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < k_list.size(); ++i) {
      std::string bits;
      for (bool b : indicators[i]) bits += b ? '1' : '0';
      ind[std::to_string(k_list[i])] = bits;
    }
    j["indicators"] = ind;
  }
  return j;
}

ARnessReport arness_report(const Trajectory& t, const std::vector<std::size_t>& k_list) {
  if (k_list.empty()) throw DomainError("k list is empty");
  ARnessReport r;
  r.k_list = k_list;
  r.commits = t.total_commits();
  r.length = t.length;
  r.scheduler = t.scheduler;
  r.prompt_id = t.prompt_id;
  r.seed = t.seed;
  for (std::size_t k : k_list) {
    auto hits = arness_indicators(t, k);
    const auto n = static_cast<std::size_t>(std::count(hits.begin(), hits.end(), true));
    r.scores.push_back(static_cast<double>(n) / static_cast<double>(hits.size()));
    r.indicators.push_back(std::move(hits));
  }
  return r;
}

// ---------------------------------------------------------------------------

std::string SegmenterConfig::name() const {
  switch (kind) {
    case SegmenterKind::fixed_window: return "fixed_window:" + std::to_string(window);
    case SegmenterKind::delimiter: return "delimiter:" + std::to_string(delimiter);
    case SegmenterKind::think_blocks: return "think_blocks";
  }
  return "?";
}

SegmenterConfig parse_segmenter(const std::string& text) {
  SegmenterConfig c;
  auto number_after = [&](std::size_t prefix) -> long long {
    const std::string rest = text.substr(prefix);
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(rest, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (rest.empty() || used != rest.size()) throw ConfigError("segmenter", "bad number in '" + text + "'");
    return v;
  };
  if (text == "think_blocks") {
    c.kind = SegmenterKind::think_blocks;
  } else if (text.rfind("fixed_window:", 0) == 0) {
    c.kind = SegmenterKind::fixed_window;
    const auto w = number_after(13);
    if (w < 1) throw ConfigError("segmenter", "window must be at least 1");
    c.window = static_cast<std::size_t>(w);
  } else if (text.rfind("delimiter:", 0) == 0) {
    c.kind = SegmenterKind::delimiter;
    const auto d = number_after(10);
    if (d < 0) throw ConfigError("segmenter", "delimiter must be a token id");
    c.delimiter = static_cast<Token>(d);
  } else {
    throw ConfigError("segmenter", "unknown segmenter '" + text + "'");
  }
  return c;
}

std::size_t Segmentation::total_tokens() const noexcept {
  std::size_t n = 0;
  for (const auto& s : segments) n += s.size();
  return n;
}

std::vector<Token> Segmentation::concatenated() const {
  std::vector<Token> out;
  for (const auto& s : segments) out.insert(out.end(), s.begin(), s.end());
  return out;
}

Segmentation segment_fixed_window(std::span<const Token> output, std::size_t window) {
  if (window == 0) throw DomainError("window must be at least 1");
  Segmentation seg;
  seg.segmenter.kind = SegmenterKind::fixed_window;
  seg.segmenter.window = window;
  for (std::size_t i = 0; i < output.size(); i += window) {
    const std::size_t end = std::min(output.size(), i + window);
    seg.segments.emplace_back(output.begin() + static_cast<std::ptrdiff_t>(i),
                              output.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return seg;
}

Segmentation segment_delimiter(std::span<const Token> output, Token delimiter) {
  Segmentation seg;
  seg.segmenter.kind = SegmenterKind::delimiter;
  seg.segmenter.delimiter = delimiter;
  std::vector<Token> cur;
  for (Token t : output) {
    cur.push_back(t);
    if (t == delimiter) {
      seg.segments.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) seg.segments.push_back(std::move(cur));
  return seg;
}

Segmentation segment_blocks(const std::vector<std::vector<Token>>& blocks, std::optional<Token> marker) {
  Segmentation seg;
  seg.segmenter.kind = SegmenterKind::think_blocks;
  seg.segmenter.block_marker = marker;
  for (const auto& b : blocks) {
    std::vector<Token> s;
    if (marker) s.push_back(*marker);
    s.insert(s.end(), b.begin(), b.end());
    seg.segments.push_back(std::move(s));
  }
  return seg;
}

// ---------------------------------------------------------------------------

SourceScorer::SourceScorer(std::shared_ptr<const MarkovSource> source) : source_(std::move(source)) {
  if (!source_) throw InvalidInput("scorer needs a source");
}

double SourceScorer::logprob(const ScoreRequest& r) const {
  try {
    return ar_logprob_gap(*source_, r.context, r.gap, r.continuation);
  } catch (const DomainError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

ExternalScorer::ExternalScorer(EndpointConfig config)
    : client_(std::make_unique<JsonLineClient>(std::move(config))) {}

double ExternalScorer::logprob(const ScoreRequest& r) const {
  nlohmann::json req = {{"context_tokens", r.context}, {"continuation_tokens", r.continuation}, {"gap", r.gap}};
  const nlohmann::json reply = client_->call(std::move(req));
  if (!reply.contains("logprob_nats")) throw ProtocolError("response lacks logprob_nats", reply.dump());
  const auto& v = reply.at("logprob_nats");
  if (v.is_null() || (v.is_string() && v.get<std::string>() == "-inf")) return kNegInf;
  if (v.is_string() && v.get<std::string>() == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (!v.is_number()) throw ProtocolError("logprob_nats is not a number", reply.dump());
  const double x = v.get<double>();
  if (x > 1e-9) throw ProtocolError("logprob_nats is positive", reply.dump());
  return x;
}

// ---------------------------------------------------------------------------

nlohmann::ordered_json SeqDepReport::to_json() const {
  nlohmann::ordered_json j;
  j["segments"] = segments;
  j["length"] = length;
  nlohmann::ordered_json g = nlohmann::ordered_json::array();
  for (double x : gains) g.push_back(gain_json(x));
  j["boundaries"] = g;
  j["mean"] = mean ? nlohmann::ordered_json(*mean) : nlohmann::ordered_json(nullptr);
  j["neg_inf_count"] = neg_inf_count;
  j["undefined_count"] = undefined_count;
  return j;
}

SeqDepReport seqdep(const ArScorer& scorer, std::span<const Token> prompt, const Segmentation& seg) {
  if (seg.segments.size() < 2) throw DomainError("SeqDep needs at least two segments");
  for (std::size_t i = 0; i < seg.segments.size(); ++i)
    if (seg.segments[i].empty()) throw DomainError("segment " + std::to_string(i + 1) + " is empty");
  SeqDepReport r;
  r.segments = seg.segments.size();
  r.length = seg.total_tokens();
  std::vector<Token> prefix(prompt.begin(), prompt.end());
  prefix.insert(prefix.end(), seg.segments[0].begin(), seg.segments[0].end());
  std::size_t preceding = seg.segments[0].size();
  double sum = 0.0;
  std::size_t finite = 0;
  for (std::size_t n = 1; n < seg.segments.size(); ++n) {
    const auto& s = seg.segments[n];
    double with_prefix, prompt_only;
    try {
      with_prefix = scorer.logprob({prefix, 0, s});
      prompt_only = scorer.logprob({std::vector<Token>(prompt.begin(), prompt.end()), preceding, s});
    } catch (ScorerError& e) {
      e.set_boundary(n + 1);
      throw;
    }
    double g;
    if (std::isnan(with_prefix) || std::isnan(prompt_only)) {
      g = std::numeric_limits<double>::quiet_NaN();
    } else if (with_prefix == kNegInf) {
      g = kNegInf;
    } else if (prompt_only == kNegInf) {
      g = std::numeric_limits<double>::infinity();
    } else {
      g = with_prefix - prompt_only;
    }
    r.gains.push_back(g);
    if (std::isfinite(g)) {
      sum += g;
      ++finite;
    } else if (std::isnan(g)) {
      ++r.undefined_count;
    } else {
      ++r.neg_inf_count;
    }
    prefix.insert(prefix.end(), s.begin(), s.end());
    preceding += s.size();
  }
  if (finite > 0) r.mean = sum / static_cast<double>(finite);
  return r;
}

std::vector<std::size_t> auto_bin_edges(const std::vector<SeqDepItem>& items, std::size_t count) {
  if (items.empty()) throw DomainError("no items to bin");
  if (count == 0) throw DomainError("bin count must be at least 1");
  std::size_t lo = SIZE_MAX, hi = 0;
  for (const auto& it : items) {
    lo = std::min(lo, it.segmentation.total_tokens());
    hi = std::max(hi, it.segmentation.total_tokens());
  }
  const std::size_t span = hi + 1 - lo;
  const std::size_t width = (span + count - 1) / count;
  std::vector<std::size_t> edges;
  for (std::size_t e = lo; e < hi + 1; e += width) edges.push_back(e);
  edges.push_back(edges.back() + width);
  return edges;
}

SeqDepProfile seqdep_profile(const std::vector<SeqDepItem>& items, const ArScorer& scorer,
                             const std::vector<std::size_t>& edges, std::size_t jobs) {
  if (edges.size() < 2) throw DomainError("need at least two bin edges");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (edges[i] <= edges[i - 1]) throw DomainError("bin edges must be strictly increasing");
  auto bin_of = [&](std::size_t len) -> std::size_t {
    const auto it = std::upper_bound(edges.begin(), edges.end(), len);
    if (it == edges.begin() || it == edges.end())
      throw DomainError("length " + std::to_string(len) + " is outside the bins [" + std::to_string(edges.front()) +
                        ", " + std::to_string(edges.back()) + ")");
    return static_cast<std::size_t>(it - edges.begin()) - 1;
  };
  for (const auto& it : items) bin_of(it.segmentation.total_tokens());

  SeqDepProfile prof;
  prof.scorer = scorer.name();
  if (!items.empty()) prof.segmenter = items.front().segmentation.segmenter.name();
  prof.reports.resize(items.size());
  std::vector<std::exception_ptr> errors(items.size());
  jobs = std::max<std::size_t>(1, std::min(jobs, items.size()));
  auto work = [&](std::size_t first) {
    for (std::size_t i = first; i < items.size(); i += jobs) {
      try {
        prof.reports[i] = seqdep(scorer, items[i].prompt, items[i].segmentation);
      } catch (...) {
        errors[i] = std::current_exception();
        return;
      }
    }
  };
  if (jobs == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(work, j);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<double> sums(edges.size() - 1, 0.0);
  for (std::size_t b = 0; b + 1 < edges.size(); ++b) prof.bins.push_back({edges[b], edges[b + 1], 0, std::nullopt});
  for (const auto& r : prof.reports) {
    prof.neg_inf_count += r.neg_inf_count;
    prof.undefined_gain_count += r.undefined_count;
    if (!r.mean) {
      ++prof.undefined_count;
      continue;
    }
    const std::size_t b = bin_of(r.length);
    sums[b] += *r.mean;
    ++prof.bins[b].count;
  }
  for (std::size_t b = 0; b < prof.bins.size(); ++b)
    if (prof.bins[b].count) prof.bins[b].mean = sums[b] / static_cast<double>(prof.bins[b].count);
  return prof;
}

nlohmann::ordered_json SeqDepProfile::to_json() const {
  nlohmann::ordered_json j;
  j["scorer"] = scorer;
  j["segmenter"] = segmenter;
  j["instances"] = reports.size();
  j["neg_inf_count"] = neg_inf_count;
  j["undefined_gain_count"] = undefined_gain_count;
  j["undefined_count"] = undefined_count;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : reports)
    if (r.mean) {
      sum += *r.mean;
      ++n;
    }
  j["mean"] = n ? nlohmann::ordered_json(sum / static_cast<double>(n)) : nlohmann::ordered_json(nullptr);
  nlohmann::ordered_json bins = nlohmann::ordered_json::array();
  for (const auto& b : this->bins) {
    nlohmann::ordered_json e;
    e["bin_low"] = b.low;
    e["bin_high"] = b.high;
    e["mean"] = b.mean ? nlohmann::ordered_json(*b.mean) : nlohmann::ordered_json(nullptr);
    e["count"] = b.count;
    bins.push_back(e);
  }
  j["bins"] = bins;
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& r : reports) per.push_back(r.to_json());
  j["reports"] = per;
  return j;
}

std::string SeqDepProfile::to_csv() const {
  std::string out = "bin_low,bin_high,mean,count\n";
  for (const auto& b : bins) {
    out += std::to_string(b.low) + "," + std::to_string(b.high) + "," + (b.mean ? fmt_double(*b.mean) : "") + "," +
           std::to_string(b.count) + "\n";
  }
  return out;
}

std::vector<ProfileBin> read_profile_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "bin_low,bin_high,mean,count")
    throw ParseError("profile CSV header mismatch", 0);
  std::vector<ProfileBin> bins;
  std::size_t offset = line.size() + 1;
  while (std::getline(in, line)) {
    if (line.empty()) {
      offset += 1;
      continue;
    }
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        f.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (f.size() != 4) throw ParseError("profile CSV row needs 4 fields", offset);
    try {
      ProfileBin b;
      b.low = std::stoull(f[0]);
      b.high = std::stoull(f[1]);
      if (!f[2].empty()) b.mean = std::stod(f[2]);
      b.count = std::stoull(f[3]);
      bins.push_back(b);
    } catch (const std::exception&) {
      throw ParseError("bad number in profile CSV", offset);
    }
    offset += line.size() + 1;
  }
  return bins;
}

}  // namespace dlm
