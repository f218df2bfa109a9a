#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dlm/core.hpp"
#include "dlm/endpoint.hpp"
#include "dlm/metrics.hpp"
#include "dlm/source.hpp"

namespace dlm {

/// One parallel-reasoning training example.
struct TrainingInstance {
  std::string query;
  std::vector<std::string> traces;
  std::string answer;
  /// Not part of the rendering; carried alongside in corpus files.
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();

  /// Field equality, ignoring metadata.
  bool same_fields(const TrainingInstance& other) const;
};

inline constexpr std::string_view kSummaryLead =
    "By analyzing multiple reasoning processes above, I concluded that: The final answer is \\boxed{";
inline constexpr std::string_view kSummaryTail = "}.";

/// Throws InvalidInput when the instance cannot be rendered faithfully: no
/// traces, empty fields, an answer with a line break, or text lines that
/// would read as tags.
void validate_instance(const TrainingInstance& instance);

/// Line-oriented tagged text:
///   [Input Query]
///   <query>
///   [Model Output]
///   <think 1>
///   <trace 1>
///   </think 1>
///   ...
///   <summary>
///   By analyzing ... The final answer is \boxed{<answer>}.
///   </summary>
std::string render_instance(const TrainingInstance& instance);

/// Inverse of render_instance. Throws ParseError with a byte offset.
TrainingInstance parse_instance(std::string_view text);

// ---------------------------------------------------------------------------
// Teachers

/// A counting task over the source's content vocabulary.
struct Query {
  std::string text;
  /// Conditioning tokens handed to the teacher and to SeqDep scorers.
  std::vector<Token> context;
  std::size_t steps = 0;
  std::string answer;
};

class Teacher {
 public:
  virtual ~Teacher() = default;
  /// One reasoning trace for `query`, a function of (query, temperature, seed) only.
  virtual std::string trace(const Query& query, double temperature, std::uint64_t seed) const = 0;
  virtual std::string name() const = 0;
};

struct SyntheticTeacherConfig {
  std::shared_ptr<const MarkovSource> source;
  std::shared_ptr<const Vocabulary> vocab;
  std::size_t min_steps = 4;
  std::size_t max_steps = 12;
  /// Per-trace probability of replacing the final token with a wrong one.
  double corruption_rate = 0.0;
  /// Condition on a start token named in the query; otherwise the query
  /// carries no tokens and traces start from the source's initial state.
  bool anchored = true;
};

/// Query generator and trace sampler driven by a Markov source. A trace is
/// the space-separated label rollout of the tempered source after the query
/// context; its last token is the trace's answer.
class SyntheticTeacher final : public Teacher {
 public:
  explicit SyntheticTeacher(SyntheticTeacherConfig config);

  /// Start token and step count drawn from the seed; the answer is the final
  /// token of the greedy rollout of the untempered source.
  Query make_query(std::uint64_t seed) const;
  std::string trace(const Query& query, double temperature, std::uint64_t seed) const override;
  std::string name() const override { return "synthetic"; }

  /// Whether sampling trace `seed` hit the corruption branch.
  bool corrupted(std::uint64_t seed) const;
  const SyntheticTeacherConfig& config() const noexcept { return config_; }
  /// Content labels, i.e. the vocabulary without a reset token.
  std::size_t content_size() const noexcept;

 private:
  SyntheticTeacherConfig config_;
};

/// Out-of-process teacher. Request {id, query, temperature, seed}; response
/// {id, trace}.
class ExternalTeacher final : public Teacher {
 public:
  explicit ExternalTeacher(EndpointConfig config);
  std::string trace(const Query& query, double temperature, std::uint64_t seed) const override;
  std::string name() const override { return "external:" + client_->config().address; }

 private:
  std::unique_ptr<JsonLineClient> client_;
};

struct CurationConfig {
  std::size_t traces = 3;  // P
  double temperature = 1.0;
  void validate() const;
};

/// Samples P traces independently (trace j uses split_seed(seed, j)) and
/// builds the instance with the summary carrying query.answer. Metadata:
/// seeds, trace_correct, duplicate_traces, temperature, context.
TrainingInstance curate_instance(const Query& query, const CurationConfig& config, std::uint64_t seed,
                                 const Teacher& teacher);

/// Splits a trace into tokens by whitespace using vocabulary labels.
std::vector<Token> tokenize_labels(std::string_view text, const Vocabulary& vocab);
std::string join_labels(std::span<const Token> tokens, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Corpus files

/// {query, traces, answer, rendered, metadata}
nlohmann::ordered_json instance_to_json(const TrainingInstance& instance);
TrainingInstance instance_from_json(const nlohmann::ordered_json& j);

void write_jsonl(std::ostream& out, const std::vector<TrainingInstance>& instances);
/// Throws ParseError naming the 1-based line.
std::vector<TrainingInstance> read_jsonl(std::istream& in);

struct ValidationConfig {
  std::size_t min_traces = 1;
  std::size_t max_traces = 64;
};

struct ValidationFailure {
  std::size_t line = 0;  // 1-based
  std::vector<std::string> reasons;
};

struct ValidationReport {
  std::size_t total = 0;
  std::size_t passed = 0;
  std::size_t duplicate_flags = 0;
  std::vector<ValidationFailure> failures;

  std::size_t failed() const noexcept { return failures.size(); }
  nlohmann::ordered_json to_json() const;
};

/// Checks every line: JSON shape, tag grammar, render/parse round trip,
/// trace-count bounds, answer in the summary, duplicate flag consistency.
/// Throws IoError when the stream is unreadable.
ValidationReport validate_corpus(std::istream& in, const ValidationConfig& config = {});

/// SeqDep inputs for a corpus: context tokens from metadata, output tokens
/// from the traces (concatenated for the window and delimiter segmenters,
/// one block per trace for think_blocks).
std::vector<SeqDepItem> seqdep_items(const std::vector<TrainingInstance>& corpus, const Vocabulary& vocab,
                                     const SegmenterConfig& segmenter);

}  // namespace dlm
