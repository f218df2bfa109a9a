#include "dlm/dataforge.hpp"

#include <algorithm>
#include <cctype>
#include <istream>
#include <ostream>

#include "dlm/error.hpp"

namespace dlm {

namespace {

constexpr std::string_view kQueryMarker = "[Input Query]";
constexpr std::string_view kOutputMarker = "[Model Output]";

/// "<name>", "</name>", "<name 12>" or "</name 12>" with a lowercase name.
bool is_tag_line(std::string_view s) {
  if (s.size() < 3 || s.front() != '<' || s.back() != '>') return false;
  std::size_t i = 1;
  if (s[i] == '/') ++i;
  const std::size_t name_start = i;
  while (i < s.size() && s[i] >= 'a' && s[i] <= 'z') ++i;
  if (i == name_start) return false;
  if (s[i] == '>') return i + 1 == s.size();
  if (s[i] != ' ') return false;
  ++i;
  const std::size_t num_start = i;
  while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
  return i > num_start && i + 1 == s.size();
}

bool is_structural(std::string_view line) { return is_tag_line(line) || line == kQueryMarker || line == kOutputMarker; }

void check_text(const std::string& text, const std::string& what) {
  if (text.empty()) throw InvalidInput(what + " is empty");
  std::size_t start = 0;
  for (;;) {
    const auto nl = text.find('\n', start);
    const std::string_view line(text.data() + start, (nl == std::string::npos ? text.size() : nl) - start);
    if (is_structural(line)) throw InvalidInput(what + " contains a line that reads as a tag: " + std::string(line));
    if (nl == std::string::npos) break;
    start = nl + 1;
  }
}

std::string think_open(std::size_t j) { return "<think " + std::to_string(j) + ">"; }
std::string think_close(std::size_t j) { return "</think " + std::to_string(j) + ">"; }

}  // namespace

bool TrainingInstance::same_fields(const TrainingInstance& o) const {
  return query == o.query && traces == o.traces && answer == o.answer;
}

void validate_instance(const TrainingInstance& inst) {
  if (inst.traces.empty()) throw InvalidInput("instance needs at least one trace");
  check_text(inst.query, "query");
  for (std::size_t j = 0; j < inst.traces.size(); ++j) check_text(inst.traces[j], "trace " + std::to_string(j + 1));
  if (inst.answer.empty()) throw InvalidInput("answer is empty");
  if (inst.answer.find('\n') != std::string::npos) throw InvalidInput("answer contains a line break");
}

std::string render_instance(const TrainingInstance& inst) {
  validate_instance(inst);
  std::string out;
  out.append(kQueryMarker).append("\n");
  out.append(inst.query).append("\n");
  out.append(kOutputMarker).append("\n");
  for (std::size_t j = 1; j <= inst.traces.size(); ++j) {
    out.append(think_open(j)).append("\n");
    out.append(inst.traces[j - 1]).append("\n");
    out.append(think_close(j)).append("\n");
  }
  out.append("<summary>\n");
  out.append(kSummaryLead).append(inst.answer).append(kSummaryTail).append("\n");
  out.append("</summary>\n");
  return out;
}

TrainingInstance parse_instance(std::string_view text) {
  struct Line {
    std::string_view text;
    std::size_t offset;
  };
  if (text.empty()) throw ParseError("empty text", 0);
  if (text.back() != '\n') throw ParseError("text must end with a line break", text.size());
  std::vector<Line> lines;
  for (std::size_t start = 0; start < text.size();) {
    const auto nl = text.find('\n', start);
    lines.push_back({text.substr(start, nl - start), start});
    start = nl + 1;
  }
  std::size_t i = 0;
  auto at_end = [&] { return i >= lines.size(); };
  auto offset_here = [&] { return at_end() ? text.size() : lines[i].offset; };
  auto join = [](const std::vector<std::string_view>& parts) {
    std::string s;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (k) s += '\n';
      s.append(parts[k]);
    }
    return s;
  };

  TrainingInstance inst;
  if (at_end() || lines[i].text != kQueryMarker) throw ParseError("missing [Input Query] section", offset_here());
  ++i;
  std::vector<std::string_view> body;
  while (!at_end() && lines[i].text != kOutputMarker) {
    if (is_structural(lines[i].text))
      throw ParseError("unexpected tag " + std::string(lines[i].text) + " in query", lines[i].offset);
    body.push_back(lines[i++].text);
  }
  if (at_end()) throw ParseError("missing [Model Output] section", text.size());
  if (body.empty()) throw ParseError("empty query", lines[i].offset);
  inst.query = join(body);
  ++i;

  for (std::size_t j = 1;; ++j) {
    if (at_end()) throw ParseError("missing <summary> section", text.size());
    const std::string_view head = lines[i].text;
    if (head == "<summary>") {
      if (j == 1) throw ParseError("no <think 1> block before <summary>", lines[i].offset);
      break;
    }
    if (head != think_open(j)) {
      if (is_tag_line(head) && head.rfind("<think ", 0) == 0)
        throw ParseError("misnumbered tag " + std::string(head) + ", expected " + think_open(j), lines[i].offset);
      throw ParseError("expected " + think_open(j) + " or <summary>", lines[i].offset);
    }
    ++i;
    body.clear();
    const std::string close = think_close(j);
    while (!at_end() && lines[i].text != close) {
      if (is_structural(lines[i].text))
        throw ParseError("unexpected tag " + std::string(lines[i].text) + " inside " + think_open(j), lines[i].offset);
      body.push_back(lines[i++].text);
    }
    if (at_end()) throw ParseError("unclosed " + think_open(j), text.size());
    if (body.empty()) throw ParseError("empty " + think_open(j) + " block", lines[i].offset);
    inst.traces.push_back(join(body));
    ++i;
  }

  ++i;  // <summary>
  if (at_end()) throw ParseError("summary sentence missing", text.size());
  const std::string_view s = lines[i].text;
  if (s.size() <= kSummaryLead.size() + kSummaryTail.size() || s.substr(0, kSummaryLead.size()) != kSummaryLead ||
      s.substr(s.size() - kSummaryTail.size()) != kSummaryTail)
    throw ParseError("summary sentence does not follow the template", lines[i].offset);
  inst.answer = std::string(s.substr(kSummaryLead.size(), s.size() - kSummaryLead.size() - kSummaryTail.size()));
  ++i;
  if (at_end() || lines[i].text != "</summary>") throw ParseError("missing </summary>", offset_here());
  ++i;
  if (!at_end()) throw ParseError("trailing text after </summary>", lines[i].offset);
  return inst;
}

// ---------------------------------------------------------------------------

std::vector<Token> tokenize_labels(std::string_view text, const Vocabulary& vocab) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i == start) break;
    const std::string word(text.substr(start, i - start));
    const auto t = vocab.find(word);
    if (!t) throw ParseError("unknown label '" + word + "'", start);
    out.push_back(*t);
  }
  return out;
}

std::string join_labels(std::span<const Token> tokens, const Vocabulary& vocab) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += vocab.label(tokens[i]);
  }
  return s;
}

SyntheticTeacher::SyntheticTeacher(SyntheticTeacherConfig config) : config_(std::move(config)) {
  if (!config_.source) throw InvalidInput("synthetic teacher needs a source");
  if (!config_.vocab) config_.vocab = std::make_shared<const Vocabulary>(config_.source->vocab_size());
  if (config_.vocab->size() != config_.source->vocab_size())
    throw InvalidInput("vocabulary size does not match the source");
  if (const auto r = config_.source->reset_token(); r && static_cast<std::size_t>(*r) + 1 != config_.source->vocab_size())
    throw InvalidInput("reset token must be the last id");
  if (content_size() < 2) throw InvalidInput("synthetic teacher needs at least two content tokens");
  if (config_.min_steps == 0 || config_.max_steps < config_.min_steps)
    throw InvalidInput("step range must satisfy 1 <= min_steps <= max_steps");
  if (!(config_.corruption_rate >= 0.0 && config_.corruption_rate <= 1.0))
    throw InvalidInput("corruption_rate must lie in [0, 1]");
}

std::size_t SyntheticTeacher::content_size() const noexcept {
  return config_.source->vocab_size() - (config_.source->reset_token() ? 1 : 0);
}

Query SyntheticTeacher::make_query(std::uint64_t seed) const {
  Rng rng(seed);
  const Vocabulary& vocab = *config_.vocab;
  const std::size_t content = content_size();
  const auto start = static_cast<Token>(rng.below(content));
  Query q;
  q.steps = config_.min_steps + rng.below(config_.max_steps - config_.min_steps + 1);
  if (config_.anchored) {
    q.context = {start};
    q.text = "count " + std::to_string(q.steps) + " from " + vocab.label(start) + " mod " + std::to_string(content);
  } else {
    q.text = "continue for " + std::to_string(q.steps) + " steps";
  }
  const ChainView chain(*config_.source);
  std::size_t state = ChainView::fresh;
  for (Token t : q.context) state = chain.next(state, t);
  Token last = 0;
  for (std::size_t s = 0; s < q.steps; ++s) {
    Token best = 0;
    double best_p = -1.0;
    for (Token y = 0; y < static_cast<Token>(content); ++y) {
      const double p = chain.prob(state, y);
      if (p > best_p) {
        best_p = p;
        best = y;
      }
    }
    last = best;
    state = chain.next(state, best);
  }
  q.answer = vocab.label(last);
  return q;
}

std::string SyntheticTeacher::trace(const Query& query, double temperature, std::uint64_t seed) const {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  if (query.steps == 0) throw DomainError("query has no steps");
  const MarkovSource tempered = config_.source->tempered(temperature);
  Rng rng(seed);
  auto tokens = sample_continuation(tempered, query.context, query.steps, rng);
  Rng corrupt(split_seed(seed, 1));
  if (corrupt.bernoulli(config_.corruption_rate) && content_size() > 1) {
    const std::size_t content = content_size();
    const auto shift = static_cast<Token>(1 + corrupt.below(content - 1));
    tokens.back() = static_cast<Token>((tokens.back() + shift) % static_cast<Token>(content));
  }
  return join_labels(tokens, *config_.vocab);
}

bool SyntheticTeacher::corrupted(std::uint64_t seed) const {
  if (content_size() < 2) return false;
  Rng corrupt(split_seed(seed, 1));
  return corrupt.bernoulli(config_.corruption_rate);
}

ExternalTeacher::ExternalTeacher(EndpointConfig config) : client_(std::make_unique<JsonLineClient>(std::move(config))) {}

std::string ExternalTeacher::trace(const Query& query, double temperature, std::uint64_t seed) const {
  const nlohmann::json reply = client_->call({{"query", query.text}, {"temperature", temperature}, {"seed", seed}});
  if (!reply.contains("trace") || !reply.at("trace").is_string())
    throw ProtocolError("response lacks a trace string", reply.dump());
  return reply.at("trace").get<std::string>();
}

void CurationConfig::validate() const {
  if (traces == 0) throw InvalidInput("trace count P must be at least 1");
  if (!(temperature > 0.0)) throw InvalidInput("temperature must be positive");
}

TrainingInstance curate_instance(const Query& query, const CurationConfig& config, std::uint64_t seed,
                                 const Teacher& teacher) {
  config.validate();
  TrainingInstance inst;
  inst.query = query.text;
  inst.answer = query.answer;
  nlohmann::ordered_json seeds = nlohmann::ordered_json::array();
  nlohmann::ordered_json correct = nlohmann::ordered_json::array();
  for (std::size_t j = 0; j < config.traces; ++j) {
    const std::uint64_t trace_seed = split_seed(seed, j);
    std::string text;
    try {
      text = teacher.trace(query, config.temperature, trace_seed);
    } catch (const Error& e) {
      throw CurationError(e.what(), j);
    }
    if (text.empty()) throw CurationError("teacher returned an empty trace", j);
    const auto last_space = text.find_last_of(" \n");
    const std::string last = last_space == std::string::npos ? text : text.substr(last_space + 1);
    correct.push_back(last == query.answer);
    seeds.push_back(trace_seed);
    inst.traces.push_back(std::move(text));
  }
  const bool duplicate =
      inst.traces.size() > 1 && std::all_of(inst.traces.begin(), inst.traces.end(),
                                            [&](const std::string& t) { return t == inst.traces.front(); });
  inst.metadata["seeds"] = seeds;
  inst.metadata["trace_correct"] = correct;
  inst.metadata["duplicate_traces"] = duplicate;
  inst.metadata["temperature"] = config.temperature;
  inst.metadata["context"] = query.context;
  inst.metadata["teacher"] = teacher.name();
  try {
    validate_instance(inst);
  } catch (const InvalidInput& e) {
    throw CurationError(e.what(), 0);
  }
  return inst;
}

// ---------------------------------------------------------------------------

nlohmann::ordered_json instance_to_json(const TrainingInstance& inst) {
  nlohmann::ordered_json j;
  j["query"] = inst.query;
  j["traces"] = inst.traces;
  j["answer"] = inst.answer;
  j["rendered"] = render_instance(inst);
  j["metadata"] = inst.metadata;
  return j;
}

TrainingInstance instance_from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw InvalidInput("instance is not a JSON object");
  for (const char* key : {"query", "answer", "rendered"})
    if (!j.contains(key) || !j.at(key).is_string()) throw InvalidInput(std::string("missing string field ") + key);
  if (!j.contains("traces") || !j.at("traces").is_array()) throw InvalidInput("missing array field traces");
  TrainingInstance inst;
  inst.query = j.at("query").get<std::string>();
  inst.answer = j.at("answer").get<std::string>();
  for (const auto& t : j.at("traces")) {
    if (!t.is_string()) throw InvalidInput("trace is not a string");
    inst.traces.push_back(t.get<std::string>());
  }
  if (j.contains("metadata")) {
    if (!j.at("metadata").is_object()) throw InvalidInput("metadata is not an object");
    inst.metadata = j.at("metadata");
  }
  return inst;
}

void write_jsonl(std::ostream& out, const std::vector<TrainingInstance>& instances) {
  for (const auto& inst : instances) out << instance_to_json(inst).dump() << '\n';
  if (!out) throw IoError("failed to write corpus");
}

std::vector<TrainingInstance> read_jsonl(std::istream& in) {
  std::vector<TrainingInstance> out;
  std::string line;
  std::size_t line_no = 0, offset = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t line_offset = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    try {
      out.push_back(instance_from_json(nlohmann::ordered_json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what(), line_offset);
    } catch (const InvalidInput& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what(), line_offset);
    }
  }
  if (in.bad()) throw IoError("corpus stream is unreadable");
  return out;
}

nlohmann::ordered_json ValidationReport::to_json() const {
  nlohmann::ordered_json j;
  j["total"] = total;
  j["passed"] = passed;
  j["failed"] = failed();
  j["duplicate_flags"] = duplicate_flags;
  nlohmann::ordered_json f = nlohmann::ordered_json::array();
  for (const auto& x : failures) f.push_back({{"line", x.line}, {"reasons", x.reasons}});
  j["failures"] = f;
  return j;
}

ValidationReport validate_corpus(std::istream& in, const ValidationConfig& config) {
  if (!in) throw IoError("corpus stream is unreadable");
  ValidationReport report;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    ++report.total;
    std::vector<std::string> reasons;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::ordered_json::parse_error& e) {
      reasons.push_back(line.empty() ? "empty line" : std::string("invalid JSON: ") + e.what());
    }
    if (reasons.empty()) {
      try {
        const TrainingInstance fields = instance_from_json(j);
        const std::string rendered = j.at("rendered").get<std::string>();
        const std::size_t p = fields.traces.size();
        if (p < config.min_traces || p > config.max_traces)
          reasons.push_back("trace count " + std::to_string(p) + " outside [" + std::to_string(config.min_traces) +
                            ", " + std::to_string(config.max_traces) + "]");
        try {
          const TrainingInstance parsed = parse_instance(rendered);
          if (!parsed.same_fields(fields)) reasons.push_back("fields differ from the rendered text");
        } catch (const ParseError& e) {
          reasons.push_back(std::string("tag grammar: ") + e.what());
        }
        try {
          if (render_instance(fields) != rendered) reasons.push_back("rendering is not byte-identical");
        } catch (const InvalidInput& e) {
          reasons.push_back(e.what());
        }
        const std::string boxed = "\\boxed{" + fields.answer + "}";
        if (rendered.find(boxed) == std::string::npos) reasons.push_back("summary lacks the answer");
        const bool dup = p > 1 && std::all_of(fields.traces.begin(), fields.traces.end(),
                                              [&](const std::string& t) { return t == fields.traces.front(); });
        if (dup) ++report.duplicate_flags;
        if (fields.metadata.contains("duplicate_traces") && fields.metadata.at("duplicate_traces").is_boolean() &&
            fields.metadata.at("duplicate_traces").get<bool>() != dup)
          reasons.push_back("duplicate_traces flag is inconsistent");
      } catch (const InvalidInput& e) {
        reasons.push_back(e.what());
      }
    }
    if (reasons.empty()) {
      ++report.passed;
    } else {
      report.failures.push_back({line_no, std::move(reasons)});
    }
  }
  if (in.bad()) throw IoError("corpus stream is unreadable");
  return report;
}

std::vector<SeqDepItem> seqdep_items(const std::vector<TrainingInstance>& corpus, const Vocabulary& vocab,
                                     const SegmenterConfig& segmenter) {
  std::vector<SeqDepItem> items;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& inst = corpus[i];
    SeqDepItem item;
    if (inst.metadata.contains("context")) {
      for (const auto& t : inst.metadata.at("context")) {
        if (!t.is_number_integer()) throw InvalidInput("instance " + std::to_string(i + 1) + ": bad context token");
        item.prompt.push_back(t.get<Token>());
      }
    }
    std::vector<std::vector<Token>> blocks;
    for (const auto& trace : inst.traces) blocks.push_back(tokenize_labels(trace, vocab));
    if (segmenter.kind == SegmenterKind::think_blocks) {
      item.segmentation = segment_blocks(blocks, segmenter.block_marker);
    } else {
      std::vector<Token> output;
      for (const auto& b : blocks) {
        if (segmenter.block_marker) output.push_back(*segmenter.block_marker);
        output.insert(output.end(), b.begin(), b.end());
      }
      item.segmentation = segmenter.kind == SegmenterKind::fixed_window ? segment_fixed_window(output, segmenter.window)
                                                                        : segment_delimiter(output, segmenter.delimiter);
      item.segmentation.segmenter.block_marker = segmenter.block_marker;
    }
    items.push_back(std::move(item));
  }
  return items;
}

}  // namespace dlm
