#include "dlm/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "dlm/dataforge.hpp"
#include "dlm/error.hpp"

namespace dlm {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

int exit_code_for(const std::exception& e) noexcept {
  if (dynamic_cast<const InfeasibleSchedule*>(&e)) return exit_codes::infeasible;
  if (dynamic_cast<const ScorerError*>(&e) || dynamic_cast<const CurationError*>(&e)) return exit_codes::unavailable;
  if (dynamic_cast<const ProtocolViolation*>(&e) || dynamic_cast<const StallError*>(&e)) return exit_codes::internal;
  if (dynamic_cast<const Error*>(&e)) return exit_codes::config;
  return exit_codes::internal;
}

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

fs::path output_root(const std::optional<std::string>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
  return "dlmlab_out";
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("cannot read " + path.string());
  return ss.str();
}

nlohmann::json read_json_file(const fs::path& path) {
  const std::string text = read_text_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), e.byte);
  }
}

namespace {

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

/// Files written into an output directory; removed again unless committed.
class Staging {
 public:
  explicit Staging(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    created_ = !fs::exists(dir_);
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create " + dir_.string() + ": " + ec.message());
  }
  Staging(const Staging&) = delete;
  Staging& operator=(const Staging&) = delete;
  ~Staging() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& p : written_) fs::remove(p, ec);
    if (created_ && fs::is_empty(dir_, ec)) fs::remove(dir_, ec);
  }

  fs::path write(const std::string& name, const std::string& content) {
    const fs::path p = dir_ / name;
    written_.push_back(p);
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << content;
    out.close();
    if (!out) throw IoError("cannot write " + p.string());
    return p;
  }
  void commit() { committed_ = true; }
  const fs::path& dir() const noexcept { return dir_; }

 private:
  fs::path dir_;
  std::vector<fs::path> written_;
  bool created_ = false;
  bool committed_ = false;
};

template <class T>
T get_or(const nlohmann::json& obj, const char* key, const std::string& path, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path + "." + key, "has the wrong type");
  }
}

SchedulerConfig reseed(SchedulerConfig c, std::uint64_t seed) {
  c.seed = seed;
  if (c.inner) c.inner = std::make_shared<const SchedulerConfig>(reseed(*c.inner, split_seed(seed, 0)));
  return c;
}

std::size_t steps_for(const nlohmann::json& spec, std::size_t masked, const std::string& path) {
  if (spec.is_null()) return masked;
  if (spec.is_number_integer() && spec.get<std::int64_t>() >= 0) return spec.get<std::size_t>();
  if (spec.is_string()) {
    const std::string s = spec.get<std::string>();
    if (s == "M") return masked;
    if (s.rfind("M/", 0) == 0) {
      std::size_t d = 0;
      try {
        d = std::stoul(s.substr(2));
      } catch (const std::exception&) {
        d = 0;
      }
      if (d == 0) throw ConfigError(path, "bad divisor in '" + s + "'");
      return masked / d;
    }
  }
  throw ConfigError(path, "expected a step count or \"M/<d>\"");
}

}  // namespace

// ---------------------------------------------------------------------------

std::string trajectory_to_csv(const Trajectory& t) {
  std::string out = "step,position,token,confidence,block_id\n";
  for (std::size_t s = 0; s < t.steps.size(); ++s)
    for (const auto& c : t.steps[s])
      out += std::to_string(s) + "," + std::to_string(c.position) + "," + std::to_string(c.token) + "," +
             fmt(c.confidence) + "," + std::to_string(c.block_id) + "\n";
  return out;
}

std::string plot_to_csv(const Trajectory& t) {
  std::string out = "step,position,block_id\n";
  for (std::size_t s = 0; s < t.steps.size(); ++s)
    for (const auto& c : t.steps[s])
      out += std::to_string(s) + "," + std::to_string(c.position) + "," + std::to_string(c.block_id) + "\n";
  return out;
}

Trajectory trajectory_from_csv(std::string_view text) {
  constexpr std::string_view header = "step,position,token,confidence,block_id";
  Trajectory t;
  std::size_t offset = 0;
  bool first = true;
  std::set<std::size_t> positions;
  while (offset < text.size()) {
    auto nl = text.find('\n', offset);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(offset, nl - offset);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const std::size_t line_offset = offset;
    offset = nl + 1;
    if (first) {
      if (line != header) throw ParseError("trajectory CSV header mismatch", 0);
      first = false;
      continue;
    }
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 5) throw ParseError("trajectory row needs 5 fields", line_offset);
    std::size_t step;
    TrajectoryCommit c;
    try {
      std::size_t used = 0;
      step = std::stoull(f[0], &used);
      if (used != f[0].size()) throw std::invalid_argument("step");
      c.position = std::stoull(f[1], &used);
      if (used != f[1].size()) throw std::invalid_argument("position");
      c.token = static_cast<Token>(std::stol(f[2], &used));
      if (used != f[2].size()) throw std::invalid_argument("token");
      c.confidence = std::stod(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument("confidence");
      c.block_id = std::stoi(f[4], &used);
      if (used != f[4].size()) throw std::invalid_argument("block_id");
    } catch (const std::exception&) {
      throw ParseError("bad number in trajectory row", line_offset);
    }
    if (step + 1 < t.steps.size() || step > t.steps.size())
      throw InvalidTrajectory("step " + std::to_string(step) + " is out of sequence");
    if (step == t.steps.size()) t.steps.emplace_back();
    t.steps[step].push_back(c);
    positions.insert(c.position);
  }
  if (first) throw ParseError("trajectory CSV is empty", 0);
  t.initial_masked.assign(positions.begin(), positions.end());
  t.length = positions.empty() ? 0 : *positions.rbegin() + 1;
  return t;
}

// ---------------------------------------------------------------------------

DecodePlan plan_from_json(const nlohmann::json& config) {
  if (!config.is_object()) throw ConfigError("", "decode config must be an object");
  DecodePlan plan;
  plan.config = config;
  if (!config.contains("source")) throw ConfigError("source", "missing source preset");
  plan.source = std::make_shared<const MarkovSource>(source_from_json(config.at("source"), "source"));
  if (!config.contains("scheduler")) throw ConfigError("scheduler", "missing scheduler");
  plan.scheduler = scheduler_from_json(config.at("scheduler"), "scheduler");
  const std::size_t v = plan.source->vocab_size();

  if (config.contains("canvas")) {
    plan.layout = layout_from_json(config.at("canvas"), v, "canvas");
    const auto dep = get_or<std::string>(config.at("canvas"), "dependence", "canvas", "independent");
    if (dep == "independent") {
      plan.dependence = CanvasDependence::independent;
    } else if (dep == "spanning") {
      plan.dependence = CanvasDependence::spanning;
    } else {
      throw ConfigError("canvas.dependence", "expected independent or spanning");
    }
    if (config.contains("length")) throw ConfigError("length", "length is derived from the canvas");
    if (config.contains("clamp_prefix") || config.contains("clamp_tokens"))
      throw ConfigError("clamp_prefix", "canvas headers are the only clamped positions");
  } else if (plan.scheduler.kind == SchedulerKind::nap) {
    throw ConfigError("canvas", "nap scheduling needs a canvas");
  }
  plan.length = get_or<std::size_t>(config, "length", "", 32);
  if (plan.length == 0) throw ConfigError("length", "must be at least 1");
  plan.clamp_prefix = get_or<std::size_t>(config, "clamp_prefix", "", 0);
  plan.clamp_tokens = get_or<std::vector<Token>>(config, "clamp_tokens", "", {});
  if (plan.clamp_prefix && !plan.clamp_tokens.empty())
    throw ConfigError("clamp_tokens", "give either clamp_prefix or clamp_tokens");
  for (std::size_t i = 0; i < plan.clamp_tokens.size(); ++i)
    if (plan.clamp_tokens[i] < 0 || static_cast<std::size_t>(plan.clamp_tokens[i]) >= v)
      throw ConfigError("clamp_tokens[" + std::to_string(i) + "]", "token outside the vocabulary");
  if (std::max(plan.clamp_prefix, plan.clamp_tokens.size()) >= plan.length && !plan.layout)
    throw ConfigError("clamp_prefix", "clamps cover the whole sequence");
  plan.prompt = get_or<std::string>(config, "prompt", "", "");
  if (config.contains("steps")) {
    plan.steps = config.at("steps");
    steps_for(plan.steps, 1, "steps");
  }
  plan.quotas = get_or<std::vector<std::size_t>>(config, "quotas", "", {});
  if (!plan.quotas.empty() && config.contains("steps")) throw ConfigError("quotas", "give either steps or quotas");
  if (config.contains("denoiser")) {
    const auto& d = config.at("denoiser");
    const auto method = get_or<std::string>(d, "method", "denoiser", "forward_backward");
    if (method == "forward_backward") {
      plan.method = PosteriorMethod::forward_backward;
    } else if (method == "enumeration") {
      plan.method = PosteriorMethod::enumeration;
    } else {
      throw ConfigError("denoiser.method", "expected forward_backward or enumeration");
    }
    const auto conf = get_or<std::string>(d, "confidence", "denoiser", "top1");
    if (conf == "top1") {
      plan.confidence = ConfidenceKind::top1;
    } else if (conf == "margin") {
      plan.confidence = ConfidenceKind::margin;
    } else {
      throw ConfigError("denoiser.confidence", "expected top1 or margin");
    }
  }
  plan.k_list = get_or<std::vector<std::size_t>>(config, "k_list", "", kDefaultKList);
  if (plan.k_list.empty() || std::count(plan.k_list.begin(), plan.k_list.end(), 0))
    throw ConfigError("k_list", "k values must be at least 1");
  plan.runs = get_or<std::size_t>(config, "runs", "", 1);
  if (plan.runs == 0) throw ConfigError("runs", "must be at least 1");
  plan.seed = get_or<std::uint64_t>(config, "seed", "", 0);
  return plan;
}

std::shared_ptr<const Denoiser> DecodePlan::make_denoiser() const {
  PosteriorOptions options;
  options.prompt = prompt;
  options.confidence = confidence;
  if (const auto r = regions()) options.groups = canvas_groups(*r, dependence);
  return std::make_shared<const ChainDenoiser>(source, options, method);
}

std::optional<CanvasRegions> DecodePlan::regions() const {
  if (!layout) return std::nullopt;
  return build_canvas(*layout).regions;
}

MaskedState DecodePlan::initial_state(std::uint64_t run_seed) const {
  if (layout) return build_canvas(*layout).state;
  MaskedState state(length);
  std::vector<Token> prefix = clamp_tokens;
  if (clamp_prefix) prefix = sample_sequence(*source, clamp_prefix, split_seed(run_seed, 0), prompt);
  for (std::size_t i = 0; i < prefix.size(); ++i) state.clamp(i, prefix[i]);
  return state;
}

StepSchedule DecodePlan::schedule_for(std::size_t masked) const {
  if (!quotas.empty()) return build_schedule(masked, quotas.size(), ScheduleKind::custom, quotas);
  return build_schedule(masked, steps_for(steps, masked, "steps"));
}

RunRecord execute_run(const DecodePlan& plan, const Denoiser& denoiser, std::size_t index) {
  RunRecord rec;
  rec.index = index;
  rec.seed = split_seed(plan.seed, index);
  rec.initial = plan.initial_state(rec.seed);
  const bool nap = plan.scheduler.kind == SchedulerKind::nap;
  if (!nap) rec.schedule = plan.schedule_for(rec.initial.mask_count());
  const SchedulerConfig sched = reseed(plan.scheduler, split_seed(split_seed(rec.seed, 1), plan.scheduler.seed));
  const auto regions = plan.regions();
  DecodeOptions options;
  options.prompt_id = plan.prompt;
  options.regions = regions ? &*regions : nullptr;
  rec.result = decode(denoiser, sched, rec.schedule, rec.initial, options);
  rec.result.trajectory.seed = rec.seed;
  rec.result.trajectory.scheduler = plan.scheduler.name();
  rec.arness = arness_report(rec.result.trajectory, plan.k_list);

  const Posterior post = denoiser.predict(rec.initial);
  if (post.evidence_consistent) {
    std::vector<Token> completion(rec.initial.tokens().begin(), rec.initial.tokens().end());
    bool unique = true;
    for (const auto& e : post.entries) {
      if (e.probs[static_cast<std::size_t>(e.argmax)] < 1.0 - 1e-12) {
        unique = false;
        break;
      }
      completion[e.position] = e.argmax;
    }
    if (unique) rec.unique_completion = std::move(completion);
  }
  return rec;
}

// ---------------------------------------------------------------------------

namespace {

ojson schedule_json(const StepSchedule& s) {
  ojson j;
  j["kind"] = s.kind == ScheduleKind::linear ? "linear" : "custom";
  j["quotas"] = s.quotas;
  return j;
}

ojson aggregate_arness(const std::vector<ARnessReport>& reports, const std::vector<std::size_t>& k_list) {
  ojson agg = ojson::object();
  for (std::size_t i = 0; i < k_list.size(); ++i) {
    double sum = 0.0;
    for (const auto& r : reports) sum += r.scores[i];
    agg[std::to_string(k_list[i])] = reports.empty() ? 0.0 : sum / static_cast<double>(reports.size());
  }
  return agg;
}

ojson canvas_json(const CanvasLayout& layout) {
  ojson j;
  j["m"] = layout.m();
  j["budgets"] = layout.budgets;
  j["summary_budget"] = layout.summary_budget;
  j["total_length"] = layout.total_length();
  return j;
}

}  // namespace

int cmd_decode(const DecodeArgs& args, std::ostream& log) {
  nlohmann::json config = read_json_file(args.config_path);
  if (!config.is_object()) throw ConfigError("", "decode config must be an object");
  if (args.runs) config["runs"] = *args.runs;
  if (args.seed) config["seed"] = *args.seed;
  const DecodePlan plan = plan_from_json(config);
  const std::string hash = config_hash(config);
  const fs::path dir = args.out ? fs::path(*args.out) : output_root(std::nullopt) / ("decode-" + hash);

  const auto denoiser = plan.make_denoiser();
  std::vector<RunRecord> records;
  for (std::size_t i = 0; i < plan.runs; ++i) records.push_back(execute_run(plan, *denoiser, i));

  Staging stage(dir);
  ojson runs = ojson::array();
  std::vector<ARnessReport> reports;
  ojson seeds = ojson::array();
  std::vector<std::string> artifacts;
  for (const auto& rec : records) {
    const std::string traj = "trajectory_" + std::to_string(rec.index) + ".csv";
    const std::string plot = "plot_" + std::to_string(rec.index) + ".csv";
    stage.write(traj, trajectory_to_csv(rec.result.trajectory));
    stage.write(plot, plot_to_csv(rec.result.trajectory));
    artifacts.push_back(traj);
    artifacts.push_back(plot);
    ojson r;
    r["index"] = rec.index;
    r["seed"] = rec.seed;
    r["trajectory"] = traj;
    r["plot"] = plot;
    r["steps"] = rec.result.trajectory.steps.size();
    r["commits"] = rec.result.trajectory.total_commits();
    r["evidence_consistent"] = rec.result.evidence_consistent;
    r["schedule"] = schedule_json(rec.schedule);
    r["final_tokens"] = std::vector<Token>(rec.result.final_state.tokens().begin(), rec.result.final_state.tokens().end());
    runs.push_back(r);
    reports.push_back(rec.arness);
    seeds.push_back(rec.seed);
  }
  ojson arness;
  arness["k_list"] = plan.k_list;
  ojson per = ojson::array();
  for (const auto& r : reports) per.push_back(r.to_json());
  arness["runs"] = per;
  arness["aggregate"] = aggregate_arness(reports, plan.k_list);
  stage.write("arness.json", arness.dump(2) + "\n");
  artifacts.push_back("arness.json");

  ojson manifest;
  manifest["tool"] = kToolName;
  manifest["tool_version"] = kToolVersion;
  manifest["config_hash"] = hash;
  manifest["config"] = ojson::parse(config.dump());
  manifest["source"] = plan.source->description();
  manifest["scheduler"] = to_json(plan.scheduler);
  manifest["scheduler_name"] = plan.scheduler.name();
  if (plan.layout) manifest["canvas"] = canvas_json(*plan.layout);
  manifest["root_seed"] = plan.seed;
  manifest["seeds"] = seeds;
  manifest["runs"] = runs;
  manifest["artifacts"] = artifacts;
  stage.write("manifest.json", manifest.dump(2) + "\n");
  stage.commit();

  log << "decode: " << plan.runs << " run(s) of " << plan.scheduler.name() << " -> " << dir.string() << "\n";
  const auto agg = aggregate_arness(reports, plan.k_list);
  for (auto it = agg.begin(); it != agg.end(); ++it) log << "  ARness@" << it.key() << " = " << fmt(it.value()) << "\n";
  return exit_codes::ok;
}

int cmd_arness(const ArnessArgs& args, std::ostream& out) {
  if (args.trajectories.empty()) throw ConfigError("trajectories", "no trajectory files given");
  if (args.k_list.empty() || std::count(args.k_list.begin(), args.k_list.end(), 0))
    throw ConfigError("k-list", "k values must be at least 1");
  std::vector<ARnessReport> reports;
  for (const auto& path : args.trajectories) {
    const Trajectory t = trajectory_from_csv(read_text_file(path));
    reports.push_back(arness_report(t, args.k_list));
  }
  const std::size_t commits = reports.front().commits;
  const bool mixed = std::any_of(reports.begin(), reports.end(), [&](const auto& r) { return r.commits != commits; });
  if (mixed && !args.allow_mixed)
    throw ConfigError("allow-mixed", "trajectories have different lengths; pass --allow-mixed to aggregate");

  std::size_t width = 9;
  for (const auto& p : args.trajectories) width = std::max(width, p.size());
  out << std::left << std::setw(static_cast<int>(width)) << "trajectory" << "  " << std::setw(7) << "commits";
  for (std::size_t k : args.k_list) out << "  " << std::setw(8) << ("@" + std::to_string(k));
  out << "\n";
  char buf[32];
  for (std::size_t i = 0; i < reports.size(); ++i) {
    out << std::setw(static_cast<int>(width)) << args.trajectories[i] << "  " << std::setw(7) << reports[i].commits;
    for (double s : reports[i].scores) {
      std::snprintf(buf, sizeof buf, "%.4f", s);
      out << "  " << std::setw(8) << buf;
    }
    out << "\n";
  }
  const ojson agg = aggregate_arness(reports, args.k_list);
  out << std::setw(static_cast<int>(width)) << "aggregate" << "  " << std::setw(7) << reports.size();
  for (auto it = agg.begin(); it != agg.end(); ++it) {
    std::snprintf(buf, sizeof buf, "%.4f", it.value().get<double>());
    out << "  " << std::setw(8) << buf;
  }
  out << "\n" << std::right;

  if (args.json_out) {
    ojson j;
    j["k_list"] = args.k_list;
    ojson per = ojson::array();
    for (std::size_t i = 0; i < reports.size(); ++i) {
      ojson r = reports[i].to_json();
      r["path"] = args.trajectories[i];
      per.push_back(r);
    }
    j["trajectories"] = per;
    j["aggregate"] = agg;
    j["mixed_lengths"] = mixed;
    const fs::path p(*args.json_out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f << j.dump(2) << "\n";
    if (!f) throw IoError("cannot write " + p.string());
  }
  return exit_codes::ok;
}

ScorerSetup scorer_from_json(const nlohmann::json& config, const std::string& path) {
  if (!config.is_object()) throw ConfigError(path, "expected an object");
  const auto kind = get_or<std::string>(config, "kind", path, "source");
  ScorerSetup setup;
  std::size_t vocab_size = 0;
  if (kind == "source") {
    if (!config.contains("source")) throw ConfigError(path + ".source", "missing source preset");
    auto src = std::make_shared<const MarkovSource>(source_from_json(config.at("source"), path + ".source"));
    vocab_size = src->vocab_size();
    setup.block_marker = src->reset_token();
    setup.scorer = std::make_unique<SourceScorer>(src);
  } else if (kind == "external") {
    if (!config.contains("endpoint")) throw ConfigError(path + ".endpoint", "missing endpoint");
    setup.scorer = std::make_unique<ExternalScorer>(endpoint_from_json(config.at("endpoint"), path + ".endpoint"));
    vocab_size = get_or<std::size_t>(config, "vocab_size", path, 0);
  } else {
    throw ConfigError(path + ".kind", "expected source or external");
  }
  auto labels = get_or<std::vector<std::string>>(config, "labels", path, {});
  if (!labels.empty()) {
    if (vocab_size && labels.size() != vocab_size)
      throw ConfigError(path + ".labels", "expected " + std::to_string(vocab_size) + " labels");
    vocab_size = labels.size();
  }
  if (vocab_size < 2) throw ConfigError(path + ".vocab_size", "vocabulary size unknown; give labels or vocab_size");
  try {
    setup.vocab = std::make_shared<const Vocabulary>(vocab_size, labels);
  } catch (const InvalidInput& e) {
    throw ConfigError(path + ".labels", e.what());
  }
  if (config.contains("block_marker")) {
    if (config.at("block_marker").is_null()) {
      setup.block_marker.reset();
    } else {
      setup.block_marker = get_or<Token>(config, "block_marker", path, 0);
    }
  }
  return setup;
}

namespace {

std::vector<std::size_t> parse_edges(const std::string& bins, const std::vector<SeqDepItem>& items) {
  if (bins.find(',') == std::string::npos) {
    std::size_t count = 0;
    try {
      count = std::stoul(bins);
    } catch (const std::exception&) {
      throw ConfigError("bins", "expected a bin count or comma-separated edges");
    }
    return auto_bin_edges(items, count);
  }
  std::vector<std::size_t> edges;
  for (const auto& f : split(bins, ',')) {
    try {
      edges.push_back(std::stoul(f));
    } catch (const std::exception&) {
      throw ConfigError("bins", "bad edge '" + f + "'");
    }
  }
  return edges;
}

}  // namespace

int cmd_seqdep(const SeqdepArgs& args, std::ostream& log) {
  const std::string corpus_text = read_text_file(args.corpus);
  std::istringstream corpus_in(corpus_text);
  const auto corpus = read_jsonl(corpus_in);
  if (corpus.empty()) throw ConfigError("corpus", "corpus is empty");
  nlohmann::json scorer_config;
  if (!args.scorer.empty() && args.scorer.front() == '{') {
    try {
      scorer_config = nlohmann::json::parse(args.scorer);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("scorer", e.what());
    }
  } else {
    if (args.scorer.empty()) throw ConfigError("scorer", "no scorer given");
    scorer_config = read_json_file(args.scorer);
  }
  ScorerSetup setup = scorer_from_json(scorer_config);
  SegmenterConfig seg = parse_segmenter(args.segmenter);
  seg.block_marker = setup.block_marker;
  const auto items = seqdep_items(corpus, *setup.vocab, seg);
  std::vector<std::size_t> edges;
  try {
    edges = parse_edges(args.bins, items);
  } catch (const DomainError& e) {
    throw ConfigError("bins", e.what());
  }
  SeqDepProfile profile;
  try {
    profile = seqdep_profile(items, *setup.scorer, edges, args.jobs);
  } catch (const DomainError& e) {
    throw ConfigError("bins", e.what());
  }

  nlohmann::json key = {{"corpus", config_hash(nlohmann::json(corpus_text))},
                        {"scorer", scorer_config},
                        {"segmenter", seg.name()},
                        {"bins", edges}};
  const std::string hash = config_hash(key);
  const fs::path dir = args.out ? fs::path(*args.out) : output_root(std::nullopt) / ("seqdep-" + hash);
  Staging stage(dir);
  ojson j = profile.to_json();
  ojson wrapped;
  wrapped["tool"] = kToolName;
  wrapped["tool_version"] = kToolVersion;
  wrapped["config_hash"] = hash;
  wrapped["corpus"] = args.corpus;
  wrapped["seqdep"] = j;
  stage.write("profile.json", wrapped.dump(2) + "\n");
  stage.write("profile.csv", profile.to_csv());
  stage.commit();

  log << "seqdep: " << items.size() << " instance(s), segmenter " << seg.name() << ", scorer " << profile.scorer
      << " -> " << dir.string() << "\n";
  for (const auto& b : profile.bins)
    log << "  [" << b.low << ", " << b.high << ")  count " << b.count << "  mean "
        << (b.mean ? fmt(*b.mean) : std::string("-")) << "\n";
  if (profile.neg_inf_count) log << "  excluded infinite gains: " << profile.neg_inf_count << "\n";
  if (profile.undefined_gain_count) log << "  excluded undefined gains: " << profile.undefined_gain_count << "\n";
  return exit_codes::ok;
}

// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string> kAxisOrder = {"source", "scheduler", "steps", "theta", "m", "per_block_quota"};

void apply_axis(nlohmann::json& cfg, const std::string& axis, const nlohmann::json& value) {
  if (axis == "source") {
    cfg["source"] = value;
  } else if (axis == "scheduler") {
    cfg["scheduler"] = value;
  } else if (axis == "steps") {
    cfg.erase("quotas");
    cfg["steps"] = value;
  } else if (axis == "theta") {
    auto* s = &cfg["scheduler"];
    while (s->is_object() && s->value("kind", "") == "blockwise" && s->contains("inner")) s = &(*s)["inner"];
    (*s)["theta"] = value;
  } else if (axis == "m") {
    cfg["canvas"]["m"] = value;
  } else if (axis == "per_block_quota") {
    cfg["scheduler"]["per_block_quota"] = value;
  }
}

std::string axis_label(const std::string& axis, const nlohmann::json& value) {
  if (axis == "scheduler") {
    try {
      return scheduler_from_json(value).name();
    } catch (const Error&) {
      return value.dump();
    }
  }
  if (axis == "source" && value.is_object() && value.contains("kind")) return value.at("kind").get<std::string>();
  if (value.is_string()) return value.get<std::string>();
  return value.dump();
}

struct CellResult {
  std::string key;
  std::map<std::string, std::string> labels;
  bool skipped = false;
  std::string reason;
  std::size_t masked = 0;
  double mean_steps = 0.0;
  std::vector<double> arness;
  std::optional<double> accuracy;
  std::size_t runs = 0;
  bool evidence_consistent = true;
};

}  // namespace

int cmd_sweep(const SweepArgs& args, std::ostream& log) {
  const nlohmann::json grid = read_json_file(args.grid_path);
  if (!grid.is_object() || !grid.contains("base")) throw ConfigError("base", "grid needs a base decode config");
  const nlohmann::json axes = grid.value("axes", nlohmann::json::object());
  if (!axes.is_object()) throw ConfigError("axes", "expected an object");
  std::vector<std::pair<std::string, std::vector<nlohmann::json>>> dims;
  for (auto it = axes.begin(); it != axes.end(); ++it)
    if (std::find(kAxisOrder.begin(), kAxisOrder.end(), it.key()) == kAxisOrder.end())
      throw ConfigError("axes." + it.key(), "unknown axis");
  for (const auto& name : kAxisOrder) {
    if (!axes.contains(name)) continue;
    const auto& vals = axes.at(name);
    if (!vals.is_array() || vals.empty()) throw ConfigError("axes." + name, "expected a non-empty list");
    dims.emplace_back(name, std::vector<nlohmann::json>(vals.begin(), vals.end()));
  }
  nlohmann::json base = grid.at("base");
  if (grid.contains("runs")) base["runs"] = grid.at("runs");
  if (grid.contains("seed")) base["seed"] = grid.at("seed");
  const std::vector<std::size_t> k_list = get_or<std::vector<std::size_t>>(base, "k_list", "base", kDefaultKList);

  std::size_t cells = 1;
  for (const auto& d : dims) cells *= d.second.size();
  std::vector<CellResult> results(cells);
  std::vector<nlohmann::json> cell_configs(cells);
  const std::size_t key_width = std::to_string(cells).size();
  for (std::size_t c = 0; c < cells; ++c) {
    nlohmann::json cfg = base;
    std::size_t rest = c;
    std::vector<std::size_t> idx(dims.size());
    for (std::size_t d = dims.size(); d-- > 0;) {
      idx[d] = rest % dims[d].second.size();
      rest /= dims[d].second.size();
    }
    std::string key;
    for (std::size_t d = 0; d < dims.size(); ++d) {
      apply_axis(cfg, dims[d].first, dims[d].second[idx[d]]);
      results[c].labels[dims[d].first] = axis_label(dims[d].first, dims[d].second[idx[d]]);
    }
    std::ostringstream k;
    k << std::setw(static_cast<int>(key_width)) << std::setfill('0') << c;
    results[c].key = k.str();
    cell_configs[c] = cfg;
  }

  // Config errors abort the sweep before any work starts.
  std::vector<DecodePlan> plans;
  for (std::size_t c = 0; c < cells; ++c) {
    try {
      plans.push_back(plan_from_json(cell_configs[c]));
    } catch (ConfigError& e) {
      throw ConfigError("cell " + results[c].key + "." + e.key_path(), e.what());
    }
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(cells);
  auto worker = [&] {
    for (std::size_t c = next++; c < cells; c = next++) {
      CellResult& res = results[c];
      try {
        const DecodePlan& plan = plans[c];
        const auto denoiser = plan.make_denoiser();
        std::vector<double> sums(k_list.size(), 0.0);
        std::size_t steps = 0, correct = 0, checkable = 0;
        for (std::size_t i = 0; i < plan.runs; ++i) {
          const RunRecord rec = execute_run(plan, *denoiser, i);
          res.masked = rec.initial.mask_count();
          steps += rec.result.trajectory.steps.size();
          for (std::size_t k = 0; k < k_list.size(); ++k) sums[k] += rec.arness.scores[k];
          if (!rec.result.evidence_consistent) res.evidence_consistent = false;
          if (rec.unique_completion) {
            ++checkable;
            const auto final_tokens = rec.result.final_state.tokens();
            if (std::equal(final_tokens.begin(), final_tokens.end(), rec.unique_completion->begin())) ++correct;
          }
        }
        res.runs = plan.runs;
        res.mean_steps = static_cast<double>(steps) / static_cast<double>(plan.runs);
        for (double s : sums) res.arness.push_back(s / static_cast<double>(plan.runs));
        if (checkable == plan.runs) res.accuracy = static_cast<double>(correct) / static_cast<double>(plan.runs);
      } catch (const InfeasibleSchedule& e) {
        res.skipped = true;
        res.reason = e.what();
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(args.jobs, cells));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::string csv = "cell";
  for (const auto& d : dims) csv += "," + d.first;
  csv += ",masked,mean_steps,tok_per_step";
  for (std::size_t k : k_list) csv += ",arness@" + std::to_string(k);
  csv += ",accuracy,runs\n";
  ojson rows = ojson::array();
  ojson skipped = ojson::array();
  for (const auto& r : results) {
    if (r.skipped) {
      ojson s;
      s["cell"] = r.key;
      for (const auto& d : dims) s[d.first] = r.labels.at(d.first);
      s["reason"] = r.reason;
      skipped.push_back(s);
      continue;
    }
    const double tps = static_cast<double>(r.masked) / r.mean_steps;
    csv += r.key;
    for (const auto& d : dims) {
      std::string label = r.labels.at(d.first);
      if (label.find_first_of(",\"") != std::string::npos) {
        std::string q = "\"";
        for (char ch : label) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
        label = q + "\"";
      }
      csv += "," + label;
    }
    csv += "," + std::to_string(r.masked) + "," + fmt(r.mean_steps) + "," + fmt(tps);
    for (double a : r.arness) csv += "," + fmt(a);
    csv += "," + (r.accuracy ? fmt(*r.accuracy) : std::string()) + "," + std::to_string(r.runs) + "\n";
    ojson row;
    row["cell"] = r.key;
    for (const auto& d : dims) row[d.first] = r.labels.at(d.first);
    row["masked"] = r.masked;
    row["mean_steps"] = r.mean_steps;
    row["tok_per_step"] = tps;
    ojson a = ojson::object();
    for (std::size_t k = 0; k < k_list.size(); ++k) a[std::to_string(k_list[k])] = r.arness[k];
    row["arness"] = a;
    row["accuracy"] = r.accuracy ? ojson(*r.accuracy) : ojson(nullptr);
    row["runs"] = r.runs;
    row["evidence_consistent"] = r.evidence_consistent;
    rows.push_back(row);
  }

  const std::string hash = config_hash(grid);
  const fs::path dir = args.out ? fs::path(*args.out) : output_root(std::nullopt) / ("sweep-" + hash);
  Staging stage(dir);
  ojson summary;
  summary["tool"] = kToolName;
  summary["tool_version"] = kToolVersion;
  summary["config_hash"] = hash;
  summary["grid"] = ojson::parse(grid.dump());
  summary["rows"] = rows;
  summary["skipped"] = skipped;
  stage.write("summary.json", summary.dump(2) + "\n");
  stage.write("summary.csv", csv);
  stage.commit();

  log << "sweep: " << rows.size() << " cell(s) run, " << skipped.size() << " skipped -> " << dir.string() << "\n";
  for (const auto& s : skipped) log << "  skipped cell " << s["cell"].get<std::string>() << ": " << s["reason"].get<std::string>() << "\n";
  return exit_codes::ok;
}

// ---------------------------------------------------------------------------

int cmd_curate(const CurateArgs& args, std::ostream& log) {
  nlohmann::json config = read_json_file(args.config_path);
  if (!config.is_object()) throw ConfigError("", "curation config must be an object");
  if (args.queries) config["queries"] = *args.queries;
  if (args.traces) config["P"] = *args.traces;
  if (args.temperature) config["temperature"] = *args.temperature;
  if (args.corruption_rate) config["teacher"]["corruption_rate"] = *args.corruption_rate;

  const std::size_t queries = get_or<std::size_t>(config, "queries", "", 100);
  if (queries == 0) throw ConfigError("queries", "must be at least 1");
  CurationConfig cur;
  cur.traces = get_or<std::size_t>(config, "P", "", 3);
  cur.temperature = get_or<double>(config, "temperature", "", 1.0);
  try {
    cur.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError("P", e.what());
  }
  const std::uint64_t seed = get_or<std::uint64_t>(config, "seed", "", 0);
  if (!config.contains("teacher") || !config.at("teacher").is_object())
    throw ConfigError("teacher", "missing teacher object");
  const auto& tc = config.at("teacher");
  const auto kind = get_or<std::string>(tc, "kind", "teacher", "synthetic");
  if (!tc.contains("source")) throw ConfigError("teacher.source", "queries are generated from a source preset");

  SyntheticTeacherConfig stc;
  stc.source = std::make_shared<const MarkovSource>(source_from_json(tc.at("source"), "teacher.source"));
  const auto labels = get_or<std::vector<std::string>>(tc, "labels", "teacher", {});
  try {
    stc.vocab = std::make_shared<const Vocabulary>(stc.source->vocab_size(), labels);
  } catch (const InvalidInput& e) {
    throw ConfigError("teacher.labels", e.what());
  }
  const auto steps = get_or<std::vector<std::size_t>>(tc, "steps", "teacher", {4, 12});
  if (steps.size() != 2) throw ConfigError("teacher.steps", "expected [min, max]");
  stc.min_steps = steps[0];
  stc.max_steps = steps[1];
  stc.corruption_rate = get_or<double>(tc, "corruption_rate", "teacher", 0.0);
  stc.anchored = get_or<bool>(tc, "anchored", "teacher", true);
  std::unique_ptr<SyntheticTeacher> synthetic;
  try {
    synthetic = std::make_unique<SyntheticTeacher>(stc);
  } catch (const InvalidInput& e) {
    throw ConfigError("teacher", e.what());
  }
  std::unique_ptr<ExternalTeacher> external;
  if (kind == "external") {
    if (!tc.contains("endpoint")) throw ConfigError("teacher.endpoint", "missing endpoint");
    external = std::make_unique<ExternalTeacher>(endpoint_from_json(tc.at("endpoint"), "teacher.endpoint"));
  } else if (kind != "synthetic") {
    throw ConfigError("teacher.kind", "expected synthetic or external");
  }
  const Teacher& teacher = external ? static_cast<const Teacher&>(*external) : *synthetic;

  const std::string hash = config_hash(config);
  const std::uint64_t query_stream = split_seed(seed, 0);
  const std::uint64_t trace_stream = split_seed(seed, 1);
  std::vector<TrainingInstance> corpus;
  std::size_t wrong = 0, total_traces = 0;
  for (std::size_t i = 0; i < queries; ++i) {
    const Query q = synthetic->make_query(split_seed(query_stream, i));
    TrainingInstance inst = curate_instance(q, cur, split_seed(trace_stream, i), teacher);
    inst.metadata["config_hash"] = hash;
    for (const auto& ok : inst.metadata.at("trace_correct")) {
      ++total_traces;
      if (!ok.get<bool>()) ++wrong;
    }
    corpus.push_back(std::move(inst));
  }

  std::ostringstream jsonl;
  write_jsonl(jsonl, corpus);
  std::istringstream check(jsonl.str());
  ValidationConfig vc;
  vc.min_traces = vc.max_traces = cur.traces;
  const ValidationReport report = validate_corpus(check, vc);

  const fs::path dir = args.out ? fs::path(*args.out) : output_root(std::nullopt) / ("curate-" + hash);
  Staging stage(dir);
  stage.write("corpus.jsonl", jsonl.str());
  ojson v = report.to_json();
  v["wrong_traces"] = wrong;
  v["total_traces"] = total_traces;
  stage.write("validation.json", v.dump(2) + "\n");
  ojson manifest;
  manifest["tool"] = kToolName;
  manifest["tool_version"] = kToolVersion;
  manifest["config_hash"] = hash;
  manifest["config"] = ojson::parse(config.dump());
  manifest["source"] = stc.source->description();
  manifest["teacher"] = teacher.name();
  manifest["root_seed"] = seed;
  manifest["artifacts"] = {"corpus.jsonl", "validation.json"};
  stage.write("manifest.json", manifest.dump(2) + "\n");
  stage.commit();

  log << "curate: " << corpus.size() << " instance(s), " << report.passed << " passed validation, " << wrong << "/"
      << total_traces << " traces wrong -> " << dir.string() << "\n";
  return report.failed() ? exit_codes::internal : exit_codes::ok;
}

}  // namespace dlm
