#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "tdnas/config.hpp"
#include "tdnas/data_synth.hpp"
#include "tdnas/lattice.hpp"
#include "tdnas/nas_search.hpp"
#include "tdnas/oracle.hpp"
#include "tdnas/supernet.hpp"
#include "tdnas/trainer.hpp"

namespace {

using namespace tdnas;

constexpr const char* kUsage =
    "usage: tdnas <command> --config <path> [options]\n"
    "\n"
    "commands:\n"
    "  gen-data   generate the synthetic dataset from [data]\n"
    "  search     run architecture search, write checkpoint + trajectory\n"
    "  extract    rank the top-N candidates from a search checkpoint\n"
    "  retrain    retrain the top-N candidates from scratch\n"
    "  oracle     brute-force rank every candidate and compare\n"
    "  report     summarize a completed run\n"
    "\n"
    "options:\n"
    "  --config <path>   run configuration (required)\n"
    "  --seed <int>      override the train and data seeds\n"
    "  --out <dir>       override the output directory\n"
    "  --top <N>         override the number of candidates\n"
    "  --method <name>   override the search method\n"
    "  --eta <float>     override the parameter penalty weight\n";

struct CliError {
  std::string message;
};

struct CliOptions {
  std::string command;
  std::string config_path;
  bool has_seed = false;
  std::uint64_t seed = 0;
  bool has_out = false;
  std::string out;
  bool has_top = false;
  int top = 0;
  bool has_method = false;
  NasMethod method = NasMethod::softmax;
  bool has_eta = false;
  double eta = 0.0;
};

long long parse_flag_int(const std::string& flag, const std::string& value) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(value, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  if (used != value.size())
    throw CliError{flag + " expects an integer, got '" + value + "'"};
  return v;
}

double parse_flag_double(const std::string& flag, const std::string& value) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  if (used != value.size())
    throw CliError{flag + " expects a number, got '" + value + "'"};
  return v;
}

CliOptions parse_cli(int argc, char** argv) {
  CliOptions opt;
  if (argc < 2) throw CliError{"missing command"};
  opt.command = argv[1];
  const std::vector<std::string> commands = {"gen-data", "search",  "extract",
                                             "retrain",  "oracle", "report"};
  if (std::find(commands.begin(), commands.end(), opt.command) ==
      commands.end())
    throw CliError{"unknown command '" + opt.command + "'"};

  for (int i = 2; i < argc; ++i) {
    std::string flag = argv[i];
    if (i + 1 >= argc) throw CliError{flag + " expects a value"};
    std::string value = argv[++i];
    if (flag == "--config")
      opt.config_path = value;
    else if (flag == "--seed") {
      opt.seed = static_cast<std::uint64_t>(parse_flag_int(flag, value));
      opt.has_seed = true;
    } else if (flag == "--out") {
      opt.out = value;
      opt.has_out = true;
    } else if (flag == "--top") {
      opt.top = static_cast<int>(parse_flag_int(flag, value));
      opt.has_top = true;
    } else if (flag == "--method") {
      try {
        opt.method = method_from_name(value);
      } catch (const ValueError&) {
        throw CliError{"--method: unknown search method '" + value + "'"};
      }
      opt.has_method = true;
    } else if (flag == "--eta") {
      opt.eta = parse_flag_double(flag, value);
      opt.has_eta = true;
    } else {
      throw CliError{"unknown option '" + flag + "'"};
    }
  }
  if (opt.config_path.empty()) throw CliError{"--config is required"};
  return opt;
}

RunConfig load_run_config(const CliOptions& opt) {
  RunConfig cfg = parse_config(opt.config_path);
  if (opt.has_seed) {
    cfg.train.seed = opt.seed;
    cfg.task.seed = opt.seed;
  }
  if (opt.has_out) cfg.out_dir = opt.out;
  if (opt.has_top) cfg.nas.top_n = opt.top;
  if (opt.has_method) cfg.nas.method = opt.method;
  if (opt.has_eta) cfg.nas.eta = opt.eta;
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);
  return cfg;
}

// The search and retrain commands must agree on the train/heldout
// partition, so both derive it from the same stream of the train seed.
std::pair<Dataset, Dataset> load_and_split(const RunConfig& cfg) {
  Dataset all = load_dataset(cfg.resolved_dataset());
  Rng split_rng(cfg.train.seed, streams::kSplit);
  return split_heldout(all, cfg.nas.heldout_fraction, split_rng);
}

std::vector<std::pair<CandidateArchitecture, double>> ranked_from_state(
    const SupernetState& state, int top_n) {
  NasLattice lattice = build_lattice(state.net.arch, state.net.spec);
  return k_best(lattice, top_n);
}

int cmd_gen_data(const RunConfig& cfg) {
  Rng rng(cfg.task.seed, streams::kData);
  Dataset d = cfg.task.kind == TaskKind::planted_context
                  ? gen_context_task(cfg.task, rng)
                  : gen_rank_task(cfg.task, rng);
  save_dataset(d, cfg.resolved_dataset());
  std::printf("wrote %s (%zu sequences, %d classes)\n",
              cfg.resolved_dataset().c_str(), d.items.size(), d.num_classes);
  return 0;
}

int cmd_search(const RunConfig& cfg) {
  auto [train, heldout] = load_and_split(cfg);
  Rng init_rng(cfg.train.seed, streams::kInit);
  SuperNetwork net = make_supernet(cfg.space, train.feature_dim(),
                                   cfg.hidden_dim, train.num_classes, init_rng);
  SearchSession session(std::move(net), std::move(train), std::move(heldout),
                        cfg.nas, cfg.train);
  session.run_all();
  save_checkpoint(session.checkpoint(), cfg.resolved_checkpoint());
  write_trajectory_csv(cfg.out_dir + "/lambda_trajectory.csv",
                       session.trajectory());
  CandidateArchitecture best = argmax_candidate(session.net().arch, cfg.space);
  std::printf("search done: method=%s steps=%lld\n%s",
              method_name(cfg.nas.method), session.step(),
              candidate_to_text(best, cfg.space).c_str());
  return 0;
}

int cmd_extract(const RunConfig& cfg) {
  SupernetState state =
      supernet_from_checkpoint(load_checkpoint(cfg.resolved_checkpoint()));
  auto ranked = ranked_from_state(state, cfg.nas.top_n);
  std::string text = ranked_candidates_text(ranked, state.net.spec);
  std::string path = cfg.out_dir + "/topN.txt";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("extract: cannot open " + path);
  out << text;
  std::printf("%s", text.c_str());
  return 0;
}

int cmd_retrain(const RunConfig& cfg) {
  SupernetState state =
      supernet_from_checkpoint(load_checkpoint(cfg.resolved_checkpoint()));
  auto [train, heldout] = load_and_split(cfg);
  auto ranked = ranked_from_state(state, cfg.nas.top_n);
  TrainConfig rt = cfg.train;
  rt.epochs = cfg.nas.retrain_epochs;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    RetrainResult res = retrain_candidate(
        ranked[k].first, state.net.spec, state.net.in_dim,
        state.net.hidden_dim, state.net.num_classes, train, heldout, rt);
    std::string path =
        cfg.out_dir + "/retrain_" + std::to_string(k + 1) + ".tdnf";
    save_checkpoint(network_to_checkpoint(res.net, res.val_loss), path);
    char loss[64];
    auto conv = std::to_chars(loss, loss + sizeof loss, res.val_loss);
    *conv.ptr = '\0';
    std::printf("retrain %zu: params=%lld val_loss=%s\n", k + 1,
                res.net.param_count(), loss);
  }
  return 0;
}

int cmd_oracle(const RunConfig& cfg) {
  SupernetState state =
      supernet_from_checkpoint(load_checkpoint(cfg.resolved_checkpoint()));
  auto [train, heldout] = load_and_split(cfg);
  TrainConfig rt = cfg.train;
  rt.epochs = cfg.nas.retrain_epochs;
  int threads = static_cast<int>(
      std::clamp(std::thread::hardware_concurrency(), 1u, 4u));
  OracleReport report =
      brute_force_rank(state.net.spec, state.net.in_dim, state.net.hidden_dim,
                       state.net.num_classes, train, heldout, rt,
                       /*cap=*/10000, threads);
  report = compare_nas_to_oracle(state.net.arch, state.net.spec,
                                 std::move(report));
  write_oracle_csv(cfg.out_dir + "/oracle.csv", report);
  std::string line;
  detail::append_double(line, report.spearman_corr);
  line += " kendall=";
  detail::append_double(line, report.kendall_corr);
  std::printf("oracle done: %zu candidates, spearman=%s top1_rank=%d\n",
              report.entries.size(), line.c_str(),
              report.nas_top1_oracle_rank);
  return 0;
}

// Pulls the correlation summary back out of oracle.csv, if present.
std::string oracle_summary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return "";
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty() && line[0] == '#') last = line;
  return last;
}

int cmd_report(const RunConfig& cfg) {
  SupernetState state =
      supernet_from_checkpoint(load_checkpoint(cfg.resolved_checkpoint()));
  const SearchSpaceSpec& spec = state.net.spec;
  CandidateArchitecture best = argmax_candidate(state.net.arch, spec);
  ExtractedNetwork net = extract_network(state.net, best);

  std::string text = "selected architecture:\n";
  text += candidate_to_text(best, spec);
  text += "parameters: " + std::to_string(net.param_count()) + "\n";
  text += "search steps: " + std::to_string(state.step) + "\n";
  std::string summary = oracle_summary(cfg.out_dir + "/oracle.csv");
  if (summary.empty())
    text += "oracle: not computed\n";
  else
    text += "oracle: " + summary.substr(2) + "\n";

  std::string path = cfg.out_dir + "/report.txt";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("report: cannot open " + path);
  out << text;
  std::printf("%s", text.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CliOptions opt;
  try {
    opt = parse_cli(argc, argv);
  } catch (const CliError& e) {
    std::fprintf(stderr, "tdnas: %s\n%s", e.message.c_str(), kUsage);
    return 2;
  }
  try {
    RunConfig cfg = load_run_config(opt);
    if (opt.command == "gen-data") return cmd_gen_data(cfg);
    if (opt.command == "search") return cmd_search(cfg);
    if (opt.command == "extract") return cmd_extract(cfg);
    if (opt.command == "retrain") return cmd_retrain(cfg);
    if (opt.command == "oracle") return cmd_oracle(cfg);
    return cmd_report(cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "tdnas: %s\n", e.what());
    return 1;
  }
}
