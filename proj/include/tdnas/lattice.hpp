#pragma once

#include <algorithm>
#include <charconv>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tdnas/errors.hpp"
#include "tdnas/matrix.hpp"
#include "tdnas/supernet.hpp"

namespace tdnas {

enum class AttrTag { left, right, dim };

inline const char* attr_name(AttrTag tag) {
  switch (tag) {
    case AttrTag::left: return "left";
    case AttrTag::right: return "right";
    default: return "dim";
  }
}

// One independent decision: which value a (layer, attribute) pair
// takes. Choices are listed in index order, so position k corresponds
// to choice index k of the candidate encoding; `value` carries the
// displayed magnitude (offset or width).
struct LatticeGroup {
  int layer = 0;
  AttrTag tag = AttrTag::left;
  std::vector<std::pair<int, double>> choices;  // (value, lambda)
};

struct NasLattice {
  SearchSpaceSpec spec;
  std::vector<LatticeGroup> groups;
};

namespace detail {

inline std::vector<double> group_softmax(const std::vector<double>& log_alpha) {
  return stable_softmax(log_alpha);
}

}  // namespace detail

// Noise-free probabilities for every searched group, one group per
// (layer, attribute) in layer order with left before right before dim.
inline NasLattice build_lattice(const ArchitectureWeights& weights,
                                const SearchSpaceSpec& spec) {
  spec.validate();
  NasLattice lattice;
  lattice.spec = spec;
  for (int l = 0; l < spec.num_layers; ++l) {
    if (spec.search_contexts) {
      LatticeGroup left{l, AttrTag::left, {}};
      std::vector<double> lam = detail::group_softmax(weights.log_left.at(l));
      for (int c = 0; c <= spec.d_left; ++c) left.choices.emplace_back(c, lam[c]);
      lattice.groups.push_back(std::move(left));

      LatticeGroup right{l, AttrTag::right, {}};
      lam = detail::group_softmax(weights.log_right.at(l));
      for (int r = 0; r <= spec.d_right; ++r)
        right.choices.emplace_back(r, lam[r]);
      lattice.groups.push_back(std::move(right));
    }
    if (spec.search_dims) {
      LatticeGroup dim{l, AttrTag::dim, {}};
      std::vector<double> lam = detail::group_softmax(weights.log_dim.at(l));
      for (int i = 0; i < spec.num_dims(); ++i)
        dim.choices.emplace_back(spec.dim_choices[i], lam[i]);
      lattice.groups.push_back(std::move(dim));
    }
  }
  return lattice;
}

namespace detail {

inline int candidate_choice_index(const CandidateArchitecture& cand,
                                  const LatticeGroup& g) {
  const LayerChoice& c = cand.layers[g.layer];
  int idx = g.tag == AttrTag::left    ? c.left
            : g.tag == AttrTag::right ? c.right
                                      : c.dim_index;
  if (idx < 0 || idx >= static_cast<int>(g.choices.size()))
    throw ValueError(std::string("path_probability: ") + attr_name(g.tag) +
                     " choice " + std::to_string(idx) + " of layer " +
                     std::to_string(g.layer) + " is outside the lattice");
  return idx;
}

}  // namespace detail

// Product over groups of the chosen probability.
inline double path_probability(const NasLattice& lattice,
                               const CandidateArchitecture& cand) {
  if (static_cast<int>(cand.layers.size()) != lattice.spec.num_layers)
    throw ValueError("path_probability: candidate layer count mismatch");
  double prob = 1.0;
  for (const LatticeGroup& g : lattice.groups)
    prob *= g.choices[detail::candidate_choice_index(cand, g)].second;
  return prob;
}

namespace detail {

inline CandidateArchitecture candidate_from_indices(
    const NasLattice& lattice, const std::vector<int>& choice_idx) {
  CandidateArchitecture cand;
  cand.layers.resize(lattice.spec.num_layers);
  for (int l = 0; l < lattice.spec.num_layers; ++l)
    cand.layers[l] = lattice.spec.default_choice(l);
  for (std::size_t g = 0; g < lattice.groups.size(); ++g) {
    LayerChoice& c = cand.layers[lattice.groups[g].layer];
    switch (lattice.groups[g].tag) {
      case AttrTag::left: c.left = choice_idx[g]; break;
      case AttrTag::right: c.right = choice_idx[g]; break;
      case AttrTag::dim: c.dim_index = choice_idx[g]; break;
    }
  }
  return cand;
}

}  // namespace detail

// Exact top-N paths by probability, descending, ties broken by
// lexicographically smaller choice indices. Asking for more paths than
// the space holds returns every path.
inline std::vector<std::pair<CandidateArchitecture, double>> k_best(
    const NasLattice& lattice, int n) {
  if (n < 1) throw ValueError("k_best: N must be at least 1");
  const std::size_t num_groups = lattice.groups.size();

  // Per group, choice indices sorted by probability descending with
  // index as the tie break.
  std::vector<std::vector<int>> order(num_groups);
  for (std::size_t g = 0; g < num_groups; ++g) {
    const auto& choices = lattice.groups[g].choices;
    order[g].resize(choices.size());
    for (std::size_t i = 0; i < choices.size(); ++i)
      order[g][i] = static_cast<int>(i);
    std::stable_sort(order[g].begin(), order[g].end(), [&](int a, int b) {
      return choices[a].second > choices[b].second;
    });
  }

  struct Node {
    std::vector<int> ranks;       // position within each group's order
    std::vector<int> choice_idx;  // materialized choice index per group
    double prob = 1.0;
  };
  auto materialize = [&](const std::vector<int>& ranks) {
    Node node;
    node.ranks = ranks;
    node.choice_idx.resize(num_groups);
    for (std::size_t g = 0; g < num_groups; ++g) {
      node.choice_idx[g] = order[g][ranks[g]];
      node.prob *= lattice.groups[g].choices[node.choice_idx[g]].second;
    }
    return node;
  };
  auto worse = [](const Node& a, const Node& b) {
    if (a.prob != b.prob) return a.prob < b.prob;
    return a.choice_idx > b.choice_idx;
  };

  std::priority_queue<Node, std::vector<Node>, decltype(worse)> queue(worse);
  std::set<std::vector<int>> seen;
  std::vector<int> root(num_groups, 0);
  queue.push(materialize(root));
  seen.insert(root);

  std::vector<std::pair<CandidateArchitecture, double>> out;
  while (!queue.empty() && static_cast<int>(out.size()) < n) {
    Node best = queue.top();
    queue.pop();
    out.emplace_back(detail::candidate_from_indices(lattice, best.choice_idx),
                     best.prob);
    for (std::size_t g = 0; g < num_groups; ++g) {
      if (best.ranks[g] + 1 >=
          static_cast<int>(lattice.groups[g].choices.size()))
        continue;
      std::vector<int> next = best.ranks;
      ++next[g];
      if (seen.insert(next).second) queue.push(materialize(next));
    }
  }
  return out;
}

// One line per layer: `L<l>: left=-c right=+r dim=<n>`. Zero offsets
// are written unsigned.
inline std::string candidate_to_text(const CandidateArchitecture& cand,
                                     const SearchSpaceSpec& spec) {
  if (static_cast<int>(cand.layers.size()) != spec.num_layers)
    throw ValueError("candidate_to_text: layer count mismatch");
  std::string out;
  for (int l = 0; l < spec.num_layers; ++l) {
    const LayerChoice& c = cand.layers[l];
    if (c.left < 0 || c.left > spec.d_left || c.right < 0 ||
        c.right > spec.d_right || c.dim_index < 0 ||
        c.dim_index >= spec.num_dims())
      throw ValueError("candidate_to_text: choice out of range in layer " +
                       std::to_string(l));
    out += "L" + std::to_string(l) + ": left=";
    out += c.left > 0 ? "-" + std::to_string(c.left) : "0";
    out += " right=";
    out += c.right > 0 ? "+" + std::to_string(c.right) : "0";
    out += " dim=" + std::to_string(spec.dim_choices[c.dim_index]) + "\n";
  }
  return out;
}

namespace detail {

inline int parse_candidate_int(const std::string& token,
                               const std::string& line) {
  std::size_t pos = 0;
  int value = 0;
  try {
    value = std::stoi(token, &pos);
  } catch (const std::exception&) {
    throw ValueError("candidate_from_text: bad number in line: " + line);
  }
  if (pos != token.size())
    throw ValueError("candidate_from_text: bad number in line: " + line);
  return value;
}

}  // namespace detail

inline CandidateArchitecture candidate_from_text(const std::string& text,
                                                 const SearchSpaceSpec& spec) {
  spec.validate();
  CandidateArchitecture cand;
  std::istringstream stream(text);
  std::string line;
  while (std::getline(stream, line)) {
    if (line.empty()) continue;
    int l = static_cast<int>(cand.layers.size());
    std::istringstream fields(line);
    std::string tag, left_tok, right_tok, dim_tok, extra;
    fields >> tag >> left_tok >> right_tok >> dim_tok;
    if (!fields || fields >> extra)
      throw ValueError("candidate_from_text: expected three fields in line: " +
                       line);
    if (tag != "L" + std::to_string(l) + ":")
      throw ValueError("candidate_from_text: expected L" + std::to_string(l) +
                       ": but got line: " + line);
    auto value_of = [&](std::string token, const char* name) {
      std::string prefix = std::string(name) + "=";
      if (token.rfind(prefix, 0) != 0)
        throw ValueError(std::string("candidate_from_text: expected ") +
                         prefix + "... in line: " + line);
      return detail::parse_candidate_int(token.substr(prefix.size()), line);
    };
    LayerChoice choice;
    int left = value_of(left_tok, "left");
    int right = value_of(right_tok, "right");
    int dim = value_of(dim_tok, "dim");
    if (left > 0)
      throw ValueError("candidate_from_text: left offsets are negative: " +
                       line);
    if (right < 0)
      throw ValueError("candidate_from_text: right offsets are positive: " +
                       line);
    choice.left = -left;
    choice.right = right;
    choice.dim_index = -1;
    for (int i = 0; i < spec.num_dims(); ++i)
      if (spec.dim_choices[i] == dim) choice.dim_index = i;
    if (choice.dim_index < 0)
      throw ValueError("candidate_from_text: dim " + std::to_string(dim) +
                       " is not in the search space");
    if (choice.left > spec.d_left || choice.right > spec.d_right)
      throw ValueError("candidate_from_text: offset outside the search space: " +
                       line);
    cand.layers.push_back(choice);
  }
  if (static_cast<int>(cand.layers.size()) != spec.num_layers)
    throw ValueError("candidate_from_text: expected " +
                     std::to_string(spec.num_layers) + " layers, got " +
                     std::to_string(cand.layers.size()));
  return cand;
}

// Ranked list as text: a `# rank <k> prob=<p>` line followed by the
// candidate block, for each entry in order.
inline std::string ranked_candidates_text(
    const std::vector<std::pair<CandidateArchitecture, double>>& ranked,
    const SearchSpaceSpec& spec) {
  std::string out;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, ranked[k].second);
    out += "# rank " + std::to_string(k + 1) + " prob=";
    out.append(buf, res.ptr);
    out += "\n";
    out += candidate_to_text(ranked[k].first, spec);
  }
  return out;
}

}  // namespace tdnas
