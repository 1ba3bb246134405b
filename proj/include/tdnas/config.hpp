#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tdnas/data_synth.hpp"
#include "tdnas/errors.hpp"
#include "tdnas/nas_search.hpp"
#include "tdnas/supernet.hpp"
#include "tdnas/trainer.hpp"

namespace tdnas {

// Everything a command needs, with usable defaults for keys the file
// does not mention.
struct RunConfig {
  SearchSpaceSpec space;
  int hidden_dim = 16;
  NasConfig nas;
  TrainConfig train;
  SyntheticTaskSpec task;
  std::string out_dir = ".";
  std::string dataset_path;     // empty: <out_dir>/dataset.synd
  std::string checkpoint_path;  // empty: <out_dir>/supernet.tdnf

  RunConfig() {
    space.d_left = 2;
    space.d_right = 2;
    space.dim_choices = {2, 4, 8};
  }

  std::string resolved_dataset() const {
    return dataset_path.empty() ? out_dir + "/dataset.synd" : dataset_path;
  }
  std::string resolved_checkpoint() const {
    return checkpoint_path.empty() ? out_dir + "/supernet.tdnf"
                                   : checkpoint_path;
  }

  void validate() const {
    space.validate();
    nas.validate();
    train.validate();
    task.validate();
    if (hidden_dim < 1) throw ValueError("config: hidden_dim must be >= 1");
  }
};

namespace detail {

struct ConfigLine {
  int number = 0;
  std::string section;
  std::string key;
  std::string value;
};

inline std::string config_trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

// Drops everything from the first '#' that is not inside a quoted
// string.
inline std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

inline ConfigError key_error(const ConfigLine& at, const std::string& what) {
  return ConfigError("config: " + what + " (line " +
                     std::to_string(at.number) + ")");
}

inline long long parse_config_int(const ConfigLine& at) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(at.value, &used);
  } catch (const std::exception&) {
    throw key_error(at, "key '" + at.key + "' expects an integer, got '" +
                            at.value + "'");
  }
  if (used != at.value.size())
    throw key_error(at, "key '" + at.key + "' expects an integer, got '" +
                            at.value + "'");
  return v;
}

inline double parse_config_double(const ConfigLine& at) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(at.value, &used);
  } catch (const std::exception&) {
    throw key_error(at, "key '" + at.key + "' expects a decimal, got '" +
                            at.value + "'");
  }
  if (used != at.value.size())
    throw key_error(at, "key '" + at.key + "' expects a decimal, got '" +
                            at.value + "'");
  return v;
}

inline bool parse_config_bool(const ConfigLine& at) {
  if (at.value == "true") return true;
  if (at.value == "false") return false;
  throw key_error(at, "key '" + at.key +
                          "' expects a boolean (true or false), got '" +
                          at.value + "'");
}

inline std::string parse_config_string(const ConfigLine& at) {
  if (at.value.size() < 2 || at.value.front() != '"' ||
      at.value.back() != '"')
    throw key_error(at, "key '" + at.key + "' expects a quoted string, got '" +
                            at.value + "'");
  return at.value.substr(1, at.value.size() - 2);
}

inline std::vector<int> parse_config_int_list(const ConfigLine& at) {
  std::vector<int> out;
  std::string token;
  std::stringstream ss(at.value);
  while (std::getline(ss, token, ',')) {
    ConfigLine item = at;
    item.value = config_trim(token);
    if (item.value.empty())
      throw key_error(at, "key '" + at.key +
                              "' expects a comma-separated integer list");
    out.push_back(static_cast<int>(parse_config_int(item)));
  }
  if (out.empty())
    throw key_error(at, "key '" + at.key +
                            "' expects a comma-separated integer list");
  return out;
}

}  // namespace detail

// Line-based `key = value` format under [space], [search], [train] and
// [data] headers. '#' starts a comment outside quotes. Unknown
// sections or keys, duplicate keys, and type mismatches are reported
// with their line number.
inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::vector<int> def_left, def_right, def_dim;

  std::string section;
  std::set<std::pair<std::string, std::string>> seen;
  std::stringstream ss(text);
  std::string raw;
  int number = 0;
  while (std::getline(ss, raw)) {
    ++number;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    std::string line = detail::config_trim(detail::strip_comment(raw));
    if (line.empty()) continue;

    detail::ConfigLine at;
    at.number = number;

    if (line.front() == '[') {
      if (line.back() != ']')
        throw detail::key_error(at, "malformed section header '" + line + "'");
      section = line.substr(1, line.size() - 2);
      if (section != "space" && section != "search" && section != "train" &&
          section != "data")
        throw detail::key_error(at, "unknown section '" + section + "'");
      continue;
    }

    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw detail::key_error(at, "expected 'key = value', got '" + line + "'");
    at.section = section;
    at.key = detail::config_trim(line.substr(0, eq));
    at.value = detail::config_trim(line.substr(eq + 1));
    if (at.key.empty())
      throw detail::key_error(at, "missing key before '='");
    if (at.value.empty())
      throw detail::key_error(at, "missing value for key '" + at.key + "'");
    if (section.empty())
      throw detail::key_error(at, "key '" + at.key + "' appears before any "
                                  "section header");
    if (!seen.insert({section, at.key}).second)
      throw detail::key_error(at, "duplicate key '" + at.key + "' in [" +
                                      section + "]");

    using detail::parse_config_bool;
    using detail::parse_config_double;
    using detail::parse_config_int;
    using detail::parse_config_int_list;
    using detail::parse_config_string;

    if (section == "space") {
      if (at.key == "num_layers")
        cfg.space.num_layers = static_cast<int>(parse_config_int(at));
      else if (at.key == "d_left")
        cfg.space.d_left = static_cast<int>(parse_config_int(at));
      else if (at.key == "d_right")
        cfg.space.d_right = static_cast<int>(parse_config_int(at));
      else if (at.key == "dim_choices")
        cfg.space.dim_choices = parse_config_int_list(at);
      else if (at.key == "search_contexts")
        cfg.space.search_contexts = parse_config_bool(at);
      else if (at.key == "search_dims")
        cfg.space.search_dims = parse_config_bool(at);
      else if (at.key == "defaults_left")
        def_left = parse_config_int_list(at);
      else if (at.key == "defaults_right")
        def_right = parse_config_int_list(at);
      else if (at.key == "defaults_dim")
        def_dim = parse_config_int_list(at);
      else if (at.key == "hidden_dim")
        cfg.hidden_dim = static_cast<int>(parse_config_int(at));
      else
        throw detail::key_error(at, "unknown key '" + at.key + "' in [space]");
    } else if (section == "search") {
      if (at.key == "method") {
        std::string name = parse_config_string(at);
        try {
          cfg.nas.method = method_from_name(name);
        } catch (const ValueError&) {
          throw detail::key_error(at, "unknown search method '" + name + "'");
        }
      } else if (at.key == "gumbel_samples")
        cfg.nas.gumbel_samples = static_cast<int>(parse_config_int(at));
      else if (at.key == "temp_start")
        cfg.nas.temperature.start = parse_config_double(at);
      else if (at.key == "temp_end")
        cfg.nas.temperature.end = parse_config_double(at);
      else if (at.key == "eta")
        cfg.nas.eta = parse_config_double(at);
      else if (at.key == "heldout_fraction")
        cfg.nas.heldout_fraction = parse_config_double(at);
      else if (at.key == "search_epochs")
        cfg.nas.search_epochs = static_cast<int>(parse_config_int(at));
      else if (at.key == "stage2_epochs")
        cfg.nas.stage2_epochs = static_cast<int>(parse_config_int(at));
      else if (at.key == "retrain_epochs")
        cfg.nas.retrain_epochs = static_cast<int>(parse_config_int(at));
      else if (at.key == "top_n")
        cfg.nas.top_n = static_cast<int>(parse_config_int(at));
      else
        throw detail::key_error(at, "unknown key '" + at.key + "' in [search]");
    } else if (section == "train") {
      if (at.key == "lr_layers")
        cfg.train.lr_layers = parse_config_double(at);
      else if (at.key == "lr_arch")
        cfg.train.lr_arch = parse_config_double(at);
      else if (at.key == "momentum")
        cfg.train.momentum = parse_config_double(at);
      else if (at.key == "batch_size")
        cfg.train.batch_size = static_cast<int>(parse_config_int(at));
      else if (at.key == "epochs")
        cfg.train.epochs = static_cast<int>(parse_config_int(at));
      else if (at.key == "seed")
        cfg.train.seed = static_cast<std::uint64_t>(parse_config_int(at));
      else if (at.key == "ortho_period")
        cfg.train.ortho_period = static_cast<int>(parse_config_int(at));
      else
        throw detail::key_error(at, "unknown key '" + at.key + "' in [train]");
    } else {  // data
      if (at.key == "kind") {
        std::string name = parse_config_string(at);
        if (name == "planted-context")
          cfg.task.kind = TaskKind::planted_context;
        else if (name == "planted-rank")
          cfg.task.kind = TaskKind::planted_rank;
        else
          throw detail::key_error(at, "unknown task kind '" + name + "'");
      } else if (at.key == "num_sequences")
        cfg.task.num_sequences = static_cast<int>(parse_config_int(at));
      else if (at.key == "frames")
        cfg.task.frames = static_cast<int>(parse_config_int(at));
      else if (at.key == "feature_dim")
        cfg.task.feature_dim = static_cast<int>(parse_config_int(at));
      else if (at.key == "num_classes")
        cfg.task.num_classes = static_cast<int>(parse_config_int(at));
      else if (at.key == "planted_left")
        cfg.task.planted_left = static_cast<int>(parse_config_int(at));
      else if (at.key == "planted_right")
        cfg.task.planted_right = static_cast<int>(parse_config_int(at));
      else if (at.key == "planted_rank")
        cfg.task.planted_rank = static_cast<int>(parse_config_int(at));
      else if (at.key == "noise_sigma")
        cfg.task.noise_sigma = parse_config_double(at);
      else if (at.key == "seed")
        cfg.task.seed = static_cast<std::uint64_t>(parse_config_int(at));
      else if (at.key == "dataset")
        cfg.dataset_path = parse_config_string(at);
      else if (at.key == "checkpoint")
        cfg.checkpoint_path = parse_config_string(at);
      else if (at.key == "out")
        cfg.out_dir = parse_config_string(at);
      else
        throw detail::key_error(at, "unknown key '" + at.key + "' in [data]");
    }
  }

  if (!def_left.empty() || !def_right.empty() || !def_dim.empty()) {
    std::size_t n = static_cast<std::size_t>(cfg.space.num_layers);
    if (def_left.size() != n || def_right.size() != n || def_dim.size() != n)
      throw ConfigError(
          "config: defaults_left, defaults_right and defaults_dim must each "
          "list one entry per layer");
    cfg.space.defaults.clear();
    for (std::size_t l = 0; l < n; ++l)
      cfg.space.defaults.push_back(
          LayerChoice{def_left[l], def_right[l], def_dim[l]});
  }
  return cfg;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("parse_config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace tdnas
