#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "tdnas/data_synth.hpp"
#include "tdnas/errors.hpp"
#include "tdnas/lattice.hpp"
#include "tdnas/supernet.hpp"
#include "tdnas/trainer.hpp"

namespace tdnas {

// Every candidate in the space, ordered lexicographically by
// (layer 0 left, layer 0 right, layer 0 dim, layer 1 left, ...).
// Unsearched attributes stay pinned at the layer default.
inline std::vector<CandidateArchitecture> enumerate_candidates(
    const SearchSpaceSpec& spec, long long cap = 10000) {
  spec.validate();
  if (cap < 1) throw ValueError("enumerate_candidates: cap must be positive");
  long long size = 1;
  for (int l = 0; l < spec.num_layers; ++l) {
    if (spec.search_contexts)
      size *= static_cast<long long>(spec.d_left + 1) * (spec.d_right + 1);
    if (spec.search_dims) size *= spec.num_dims();
    if (size > cap)
      throw CapacityError("enumerate_candidates: space has at least " +
                          std::to_string(size) + " candidates, cap is " +
                          std::to_string(cap));
  }

  CandidateArchitecture cur;
  for (int l = 0; l < spec.num_layers; ++l)
    cur.layers.push_back(spec.default_choice(l));

  std::vector<CandidateArchitecture> out;
  out.reserve(static_cast<std::size_t>(size));
  auto rec = [&](auto&& self, int layer) -> void {
    if (layer == spec.num_layers) {
      out.push_back(cur);
      return;
    }
    if (spec.search_contexts) {
      for (int c = 0; c <= spec.d_left; ++c) {
        cur.layers[layer].left = c;
        for (int r = 0; r <= spec.d_right; ++r) {
          cur.layers[layer].right = r;
          if (spec.search_dims) {
            for (int i = 0; i < spec.num_dims(); ++i) {
              cur.layers[layer].dim_index = i;
              self(self, layer + 1);
            }
          } else {
            self(self, layer + 1);
          }
        }
      }
      cur.layers[layer] = spec.default_choice(layer);
    } else {
      for (int i = 0; i < spec.num_dims(); ++i) {
        cur.layers[layer].dim_index = i;
        self(self, layer + 1);
      }
      cur.layers[layer] = spec.default_choice(layer);
    }
  };
  rec(rec, 0);
  return out;
}

struct OracleEntry {
  int id = 0;
  CandidateArchitecture candidate;
  double loss = 0.0;
  long long params = 0;
  double nas_prob = 0.0;
  int oracle_rank = 0;
  int nas_rank = 0;
};

struct OracleReport {
  std::vector<OracleEntry> entries;
  double spearman_corr = 0.0;
  double kendall_corr = 0.0;
  int nas_top1_oracle_rank = 0;
  bool compared = false;
};

namespace detail {

// Ranks ids 0..n-1 so that smaller keys get smaller ranks; exact key
// ties fall to the lower id. Returns 1-based ranks by id.
template <typename Key>
std::vector<int> ordinal_ranks(const std::vector<Key>& keys) {
  std::vector<int> ids(keys.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(),
                   [&](int a, int b) { return keys[a] < keys[b]; });
  std::vector<int> rank(keys.size());
  for (std::size_t pos = 0; pos < ids.size(); ++pos)
    rank[ids[pos]] = static_cast<int>(pos) + 1;
  return rank;
}

}  // namespace detail

// Trains every candidate from scratch and records its held-out loss.
// Each candidate gets its own seed derived from the config seed and
// its id, so results do not depend on how work is scheduled; with
// threads > 1 the trainings run concurrently.
inline OracleReport brute_force_rank(const SearchSpaceSpec& spec, int in_dim,
                                     int hidden_dim, int num_classes,
                                     const Dataset& train,
                                     const Dataset& heldout,
                                     const TrainConfig& cfg,
                                     long long cap = 10000, int threads = 1) {
  cfg.validate();
  if (threads < 1) throw ValueError("brute_force_rank: threads must be >= 1");
  std::vector<CandidateArchitecture> cands = enumerate_candidates(spec, cap);
  OracleReport report;
  report.entries.resize(cands.size());

  auto train_one = [&](int id) {
    TrainConfig c = cfg;
    c.seed = detail::mix64(cfg.seed ^
                           detail::mix64(static_cast<std::uint64_t>(id) +
                                         detail::kGolden));
    RetrainResult r = retrain_candidate(cands[id], spec, in_dim, hidden_dim,
                                        num_classes, train, heldout, c);
    OracleEntry& e = report.entries[id];
    e.id = id;
    e.candidate = cands[id];
    e.loss = r.val_loss;
    e.params = r.net.param_count();
  };

  int n = static_cast<int>(cands.size());
  int workers = std::min(threads, n);
  if (workers <= 1) {
    for (int id = 0; id < n; ++id) train_one(id);
  } else {
    std::mutex mu;
    std::exception_ptr first_error;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w]() {
        for (int id = w; id < n; id += workers) {
          try {
            train_one(id);
          } catch (...) {
            std::lock_guard<std::mutex> lock(mu);
            if (!first_error) first_error = std::current_exception();
            return;
          }
        }
      });
    for (std::thread& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  std::vector<std::pair<double, int>> loss_keys;
  for (const OracleEntry& e : report.entries)
    loss_keys.emplace_back(e.loss, e.id);
  std::vector<int> ranks = detail::ordinal_ranks(loss_keys);
  for (std::size_t i = 0; i < ranks.size(); ++i)
    report.entries[i].oracle_rank = ranks[i];
  return report;
}

namespace detail {

// 1-based ranks of the scores, smallest first, ties replaced by the
// mean of the positions they span.
inline std::vector<double> average_ranks(const std::vector<double>& scores) {
  std::vector<int> ids(scores.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(),
                   [&](int a, int b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  std::size_t i = 0;
  while (i < ids.size()) {
    std::size_t j = i;
    while (j + 1 < ids.size() && scores[ids[j + 1]] == scores[ids[i]]) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[ids[k]] = avg;
    i = j + 1;
  }
  return rank;
}

inline double pearson(const std::vector<double>& a,
                      const std::vector<double>& b) {
  double n = static_cast<double>(a.size());
  double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double num = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return num / std::sqrt(va * vb);
}

}  // namespace detail

// Rank correlation over average ranks; a constant input (all scores
// tied) has no ordering information and yields 0.
inline double spearman(const std::vector<double>& a,
                       const std::vector<double>& b) {
  if (a.size() != b.size())
    throw ValueError("spearman: score vectors differ in length");
  if (a.size() < 2) throw ValueError("spearman: need at least 2 scores");
  return detail::pearson(detail::average_ranks(a), detail::average_ranks(b));
}

// Kendall tau-b: concordant minus discordant pairs over the geometric
// mean of the tie-adjusted pair counts; 0 when either input is
// constant.
inline double kendall(const std::vector<double>& a,
                      const std::vector<double>& b) {
  if (a.size() != b.size())
    throw ValueError("kendall: score vectors differ in length");
  if (a.size() < 2) throw ValueError("kendall: need at least 2 scores");
  long long concordant = 0, discordant = 0, ties_a = 0, ties_b = 0;
  std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double da = a[i] - a[j];
      double db = b[i] - b[j];
      if (da == 0.0 && db == 0.0) continue;
      if (da == 0.0) {
        ++ties_a;
      } else if (db == 0.0) {
        ++ties_b;
      } else if ((da > 0.0) == (db > 0.0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  double pairs_a = static_cast<double>(concordant + discordant + ties_b);
  double pairs_b = static_cast<double>(concordant + discordant + ties_a);
  if (pairs_a == 0.0 || pairs_b == 0.0) return 0.0;
  return static_cast<double>(concordant - discordant) /
         std::sqrt(pairs_a * pairs_b);
}

// Fills the NAS side of a brute-force report: path probabilities from
// the weights, both rank columns, and the rank correlations between
// the NAS ordering (higher probability = better) and the oracle
// ordering (lower loss = better).
inline OracleReport compare_nas_to_oracle(const ArchitectureWeights& weights,
                                          const SearchSpaceSpec& spec,
                                          OracleReport report) {
  std::vector<CandidateArchitecture> cands = enumerate_candidates(
      spec, std::max<long long>(10000,
                                static_cast<long long>(report.entries.size())));
  if (cands.size() != report.entries.size())
    throw ValueError("compare_nas_to_oracle: report covers " +
                     std::to_string(report.entries.size()) +
                     " candidates, the space has " +
                     std::to_string(cands.size()));
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const CandidateArchitecture& a = cands[i];
    const CandidateArchitecture& b = report.entries[i].candidate;
    for (std::size_t l = 0; l < a.layers.size(); ++l)
      if (a.layers[l].left != b.layers[l].left ||
          a.layers[l].right != b.layers[l].right ||
          a.layers[l].dim_index != b.layers[l].dim_index)
        throw ValueError("compare_nas_to_oracle: candidate " +
                         std::to_string(i) + " is not the space's candidate");
  }

  NasLattice lattice = build_lattice(weights, spec);
  for (OracleEntry& e : report.entries)
    e.nas_prob = path_probability(lattice, e.candidate);

  std::vector<std::pair<double, int>> loss_keys, prob_keys;
  std::vector<double> losses, neg_probs;
  for (const OracleEntry& e : report.entries) {
    loss_keys.emplace_back(e.loss, e.id);
    prob_keys.emplace_back(-e.nas_prob, e.id);
    losses.push_back(e.loss);
    neg_probs.push_back(-e.nas_prob);
  }
  std::vector<int> oracle_ranks = detail::ordinal_ranks(loss_keys);
  std::vector<int> nas_ranks = detail::ordinal_ranks(prob_keys);
  for (std::size_t i = 0; i < report.entries.size(); ++i) {
    report.entries[i].oracle_rank = oracle_ranks[i];
    report.entries[i].nas_rank = nas_ranks[i];
    if (nas_ranks[i] == 1)
      report.nas_top1_oracle_rank = oracle_ranks[i];
  }
  report.spearman_corr = spearman(losses, neg_probs);
  report.kendall_corr = kendall(losses, neg_probs);
  report.compared = true;
  return report;
}

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

}  // namespace detail

inline void write_oracle_csv(const std::string& path,
                             const OracleReport& report) {
  std::string out = "candidate,loss,params,nas_prob,oracle_rank,nas_rank\n";
  for (const OracleEntry& e : report.entries) {
    out += std::to_string(e.id);
    out += ',';
    detail::append_double(out, e.loss);
    out += ',';
    out += std::to_string(e.params);
    out += ',';
    detail::append_double(out, e.nas_prob);
    out += ',';
    out += std::to_string(e.oracle_rank);
    out += ',';
    out += std::to_string(e.nas_rank);
    out += '\n';
  }
  out += "# spearman=";
  detail::append_double(out, report.spearman_corr);
  out += " kendall=";
  detail::append_double(out, report.kendall_corr);
  out += " nas_top1_oracle_rank=";
  out += std::to_string(report.nas_top1_oracle_rank);
  out += '\n';
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("write_oracle_csv: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write_oracle_csv: write failed on " + path);
}

}  // namespace tdnas
