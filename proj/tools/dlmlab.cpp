#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dlm/error.hpp"
#include "dlm/harness.hpp"

namespace {

std::vector<std::size_t> parse_k_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const std::string field = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(field, &used));
      if (used != field.size()) throw std::invalid_argument(field);
    } catch (const std::exception&) {
      throw dlm::ConfigError("k-list", "bad k value '" + field + "'");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoding-order experiments for masked diffusion language models"};
  app.set_version_flag("--version", std::string(dlm::kToolVersion));
  app.require_subcommand(1);

  dlm::DecodeArgs decode;
  std::size_t decode_runs = 0;
  std::uint64_t decode_seed = 0;
  std::string decode_out;
  auto* dc = app.add_subcommand("decode", "Run seeded decodes and write trajectories, plot data and a manifest");
  dc->add_option("config", decode.config_path, "Decode config (JSON)")->required();
  auto* dc_runs = dc->add_option("--seeds,--runs", decode_runs, "Number of runs (overrides the config)");
  auto* dc_seed = dc->add_option("--seed", decode_seed, "Root seed (overrides the config)");
  auto* dc_out = dc->add_option("--out", decode_out, "Output directory");

  dlm::ArnessArgs arness;
  std::string k_list = "1,8,32";
  std::string arness_json;
  auto* ac = app.add_subcommand("arness", "Global-ARness@k of trajectory CSV files");
  ac->add_option("trajectories", arness.trajectories, "Trajectory CSV files");
  ac->add_option("--k-list", k_list, "Comma-separated k values")->capture_default_str();
  ac->add_flag("--allow-mixed", arness.allow_mixed, "Aggregate trajectories of different lengths");
  auto* ac_json = ac->add_option("--json", arness_json, "Also write the report as JSON");

  dlm::SeqdepArgs seqdep;
  std::string seqdep_out;
  auto* sc = app.add_subcommand("seqdep", "Binned SeqDep profile of a corpus");
  sc->add_option("corpus", seqdep.corpus, "Corpus JSONL")->required();
  sc->add_option("--scorer", seqdep.scorer, "Scorer config file or inline JSON")->required();
  sc->add_option("--segmenter", seqdep.segmenter, "think_blocks | fixed_window:<w> | delimiter:<id>")
      ->capture_default_str();
  sc->add_option("--bins", seqdep.bins, "Bin count or comma-separated edges")->capture_default_str();
  sc->add_option("--jobs", seqdep.jobs, "Worker threads")->capture_default_str();
  auto* sc_out = sc->add_option("--out", seqdep_out, "Output directory");

  dlm::SweepArgs sweep;
  std::string sweep_out;
  auto* wc = app.add_subcommand("sweep", "Full-factorial grid of decodes with one summary row per cell");
  wc->add_option("grid", sweep.grid_path, "Grid config (JSON)")->required();
  wc->add_option("--jobs", sweep.jobs, "Cells run concurrently")->capture_default_str();
  auto* wc_out = wc->add_option("--out", sweep_out, "Output directory");

  dlm::CurateArgs curate;
  std::size_t cur_queries = 0, cur_traces = 0;
  double cur_temp = 1.0, cur_corrupt = 0.0;
  std::string cur_out;
  auto* cc = app.add_subcommand("curate", "Build and validate a parallel-reasoning corpus");
  cc->add_option("config", curate.config_path, "Curation config (JSON)")->required();
  auto* cc_q = cc->add_option("--queries", cur_queries, "Number of queries");
  auto* cc_p = cc->add_option("-P,--traces", cur_traces, "Traces per query");
  auto* cc_t = cc->add_option("--temperature", cur_temp, "Sampling temperature");
  auto* cc_c = cc->add_option("--corruption-rate", cur_corrupt, "Per-trace corruption probability");
  auto* cc_out = cc->add_option("--out", cur_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : dlm::exit_codes::config;
  }

  try {
    if (*dc) {
      if (*dc_runs) decode.runs = decode_runs;
      if (*dc_seed) decode.seed = decode_seed;
      if (*dc_out) decode.out = decode_out;
      return dlm::cmd_decode(decode, std::cout);
    }
    if (*ac) {
      arness.k_list = parse_k_list(k_list);
      if (*ac_json) arness.json_out = arness_json;
      return dlm::cmd_arness(arness, std::cout);
    }
    if (*sc) {
      if (*sc_out) seqdep.out = seqdep_out;
      return dlm::cmd_seqdep(seqdep, std::cout);
    }
    if (*wc) {
      if (*wc_out) sweep.out = sweep_out;
      return dlm::cmd_sweep(sweep, std::cout);
    }
    if (*cc) {
      if (*cc_q) curate.queries = cur_queries;
      if (*cc_p) curate.traces = cur_traces;
      if (*cc_t) curate.temperature = cur_temp;
      if (*cc_c) curate.corruption_rate = cur_corrupt;
      if (*cc_out) curate.out = cur_out;
      return dlm::cmd_curate(curate, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "dlmlab: error: " << e.what() << "\n";
    return dlm::exit_code_for(e);
  }
  return dlm::exit_codes::config;
}
