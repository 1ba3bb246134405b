#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tdnas/data_synth.hpp"
#include "tdnas/errors.hpp"
#include "tdnas/lattice.hpp"
#include "tdnas/matrix.hpp"
#include "tdnas/rng.hpp"
#include "tdnas/supernet.hpp"
#include "tdnas/trainer.hpp"

namespace tdnas {

enum class NasMethod { softmax, gumbel, pipe_softmax, pipe_gumbel };

inline const char* method_name(NasMethod m) {
  switch (m) {
    case NasMethod::softmax: return "softmax";
    case NasMethod::gumbel: return "gumbel";
    case NasMethod::pipe_softmax: return "pipe-softmax";
    default: return "pipe-gumbel";
  }
}

inline NasMethod method_from_name(const std::string& name) {
  if (name == "softmax") return NasMethod::softmax;
  if (name == "gumbel") return NasMethod::gumbel;
  if (name == "pipe-softmax") return NasMethod::pipe_softmax;
  if (name == "pipe-gumbel") return NasMethod::pipe_gumbel;
  throw ValueError("unknown search method: " + name);
}

inline bool is_pipelined(NasMethod m) {
  return m == NasMethod::pipe_softmax || m == NasMethod::pipe_gumbel;
}

inline bool uses_gumbel(NasMethod m) {
  return m == NasMethod::gumbel || m == NasMethod::pipe_gumbel;
}

struct TemperatureSchedule {
  double start = 1.0;
  double end = 0.03;
};

struct NasConfig {
  NasMethod method = NasMethod::softmax;
  int gumbel_samples = 1;
  TemperatureSchedule temperature;
  double eta = 0.0;  // complexity penalty strength
  double heldout_fraction = 0.05;
  int search_epochs = 3;
  int stage2_epochs = 3;   // pipelined methods only
  int retrain_epochs = 3;  // from-scratch candidate training
  int top_n = 3;

  void validate() const {
    if (gumbel_samples < 1)
      throw ValueError("search config: gumbel_samples must be at least 1");
    if (!(temperature.start > 0.0) || !(temperature.end > 0.0))
      throw ValueError("search config: temperatures must be positive");
    if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0))
      throw ValueError("search config: heldout fraction must lie in (0, 1)");
    if (!(eta >= 0.0))
      throw ValueError("search config: penalty strength must be >= 0");
    if (search_epochs < 0 || stage2_epochs < 0 || retrain_epochs < 0)
      throw ValueError("search config: negative epoch count");
    if (top_n < 1) throw ValueError("search config: top_n must be at least 1");
  }
};

inline std::vector<double> softmax_lambda(const std::vector<double>& log_alpha) {
  return stable_softmax(log_alpha);
}

// Gradient of the loss with respect to log alpha through the softmax:
// grad_k = lambda_k (v_k - sum_i lambda_i v_i), where v_i is the
// sensitivity of the loss to choice i's mixture weight.
inline std::vector<double> softmax_arch_grad(const std::vector<double>& lam,
                                             const std::vector<double>& v) {
  if (lam.size() != v.size())
    throw ShapeError("softmax_arch_grad: " + std::to_string(lam.size()) +
                     " weights against " + std::to_string(v.size()) +
                     " sensitivities");
  double mean = 0.0;
  for (std::size_t i = 0; i < lam.size(); ++i) mean += lam[i] * v[i];
  std::vector<double> grad(lam.size());
  for (std::size_t k = 0; k < lam.size(); ++k)
    grad[k] = lam[k] * (v[k] - mean);
  return grad;
}

struct GumbelSample {
  std::vector<double> lambda;
  std::vector<double> noise;
};

// lambda_i proportional to exp((log alpha_i + G_i) / T) for given
// Gumbel draws G.
inline std::vector<double> gumbel_lambda_from_noise(
    const std::vector<double>& log_alpha, double temperature,
    const std::vector<double>& noise) {
  if (!(temperature > 0.0))
    throw ValueError("gumbel_lambda: temperature must be positive");
  if (log_alpha.size() != noise.size())
    throw ShapeError("gumbel_lambda: " + std::to_string(log_alpha.size()) +
                     " logits against " + std::to_string(noise.size()) +
                     " noise draws");
  std::vector<double> scaled(log_alpha.size());
  for (std::size_t i = 0; i < scaled.size(); ++i)
    scaled[i] = (log_alpha[i] + noise[i]) / temperature;
  return stable_softmax(scaled);
}

inline GumbelSample gumbel_lambda(const std::vector<double>& log_alpha,
                                  double temperature, Rng& rng) {
  GumbelSample s;
  s.noise.resize(log_alpha.size());
  for (double& g : s.noise) g = rng.draw_gumbel();
  s.lambda = gumbel_lambda_from_noise(log_alpha, temperature, s.noise);
  return s;
}

struct ArchSample {
  std::vector<double> lambda;
  std::vector<double> v;
};

// Average over J retained samples of the tempered softmax gradient:
// grad_k = (1/J) sum_j lambda_k^j (v_k^j - sum_i lambda_i^j v_i^j) / T.
inline std::vector<double> gumbel_arch_grad(
    const std::vector<ArchSample>& samples, double temperature) {
  if (samples.empty())
    throw ValueError("gumbel_arch_grad: need at least one sample");
  if (!(temperature > 0.0))
    throw ValueError("gumbel_arch_grad: temperature must be positive");
  std::vector<double> grad(samples[0].lambda.size(), 0.0);
  const double scale = 1.0 / (temperature * samples.size());
  for (const ArchSample& s : samples) {
    if (s.lambda.size() != grad.size() || s.v.size() != grad.size())
      throw ShapeError("gumbel_arch_grad: sample sizes disagree");
    double mean = 0.0;
    for (std::size_t i = 0; i < grad.size(); ++i) mean += s.lambda[i] * s.v[i];
    for (std::size_t k = 0; k < grad.size(); ++k)
      grad[k] += s.lambda[k] * (s.v[k] - mean) * scale;
  }
  return grad;
}

// Linear interpolation between the schedule endpoints; both endpoints
// are returned exactly.
inline double anneal_temperature(const TemperatureSchedule& schedule,
                                 long long step, long long total_steps) {
  if (!(schedule.start > 0.0) || !(schedule.end > 0.0))
    throw ValueError("anneal_temperature: temperatures must be positive");
  if (total_steps < 1)
    throw ValueError("anneal_temperature: total_steps must be at least 1");
  if (step < 0 || step > total_steps)
    throw ValueError("anneal_temperature: step " + std::to_string(step) +
                     " outside [0, " + std::to_string(total_steps) + "]");
  if (step == 0) return schedule.start;
  if (step == total_steps) return schedule.end;
  return schedule.start + (schedule.end - schedule.start) *
                              (static_cast<double>(step) /
                               static_cast<double>(total_steps));
}

// Per-group mixture weights, one entry layout shared with
// ArchitectureWeights (outer vectors empty for unsearched groups).
struct ArchLambdas {
  std::vector<std::vector<double>> left;
  std::vector<std::vector<double>> right;
  std::vector<std::vector<double>> dim;
};

inline ArchLambdas softmax_lambdas(const ArchitectureWeights& w) {
  ArchLambdas lam;
  for (const std::vector<double>& g : w.log_left)
    lam.left.push_back(softmax_lambda(g));
  for (const std::vector<double>& g : w.log_right)
    lam.right.push_back(softmax_lambda(g));
  for (const std::vector<double>& g : w.log_dim)
    lam.dim.push_back(softmax_lambda(g));
  return lam;
}

// Current hard selection: per group the highest log alpha, lowest
// index on exact ties; unsearched attributes take the default.
inline CandidateArchitecture argmax_candidate(const ArchitectureWeights& w,
                                              const SearchSpaceSpec& spec) {
  auto argmax = [](const std::vector<double>& g) {
    int best = 0;
    for (std::size_t i = 1; i < g.size(); ++i)
      if (g[i] > g[best]) best = static_cast<int>(i);
    return best;
  };
  CandidateArchitecture cand;
  for (int l = 0; l < spec.num_layers; ++l) {
    LayerChoice c = spec.default_choice(l);
    if (spec.search_contexts) {
      c.left = argmax(w.log_left.at(l));
      c.right = argmax(w.log_right.at(l));
    }
    if (spec.search_dims) c.dim_index = argmax(w.log_dim.at(l));
    cand.layers.push_back(c);
  }
  return cand;
}

// Per-choice parameter costs C_i for every searched group. The cost of
// a choice is the parameter count its layer would have if that single
// attribute were swapped in while the layer's other attributes stay at
// the conditioning candidate.
struct PenaltyTable {
  std::vector<std::vector<double>> left;
  std::vector<std::vector<double>> right;
  std::vector<std::vector<double>> dim;
};

inline PenaltyTable build_penalty_table(
    const SuperNetwork& net, const CandidateArchitecture& conditioning) {
  const SearchSpaceSpec& spec = net.spec;
  if (static_cast<int>(conditioning.layers.size()) != spec.num_layers)
    throw ValueError("penalty table: conditioning layer count mismatch");
  PenaltyTable table;
  for (int l = 0; l < spec.num_layers; ++l) {
    const FactoredLayer& layer = net.layers[l];
    if (spec.search_contexts) {
      std::vector<double> left, right;
      for (int c = 0; c <= spec.d_left; ++c) {
        LayerChoice variant = conditioning.layers[l];
        variant.left = c;
        left.push_back(static_cast<double>(
            candidate_param_count(layer, variant, spec.dim_choices)));
      }
      for (int r = 0; r <= spec.d_right; ++r) {
        LayerChoice variant = conditioning.layers[l];
        variant.right = r;
        right.push_back(static_cast<double>(
            candidate_param_count(layer, variant, spec.dim_choices)));
      }
      table.left.push_back(std::move(left));
      table.right.push_back(std::move(right));
    }
    if (spec.search_dims) {
      std::vector<double> dim;
      for (int i = 0; i < spec.num_dims(); ++i) {
        LayerChoice variant = conditioning.layers[l];
        variant.dim_index = i;
        dim.push_back(static_cast<double>(
            candidate_param_count(layer, variant, spec.dim_choices)));
      }
      table.dim.push_back(std::move(dim));
    }
  }
  return table;
}

namespace detail {

inline double penalty_term(const std::vector<std::vector<double>>& lam,
                           const std::vector<std::vector<double>>& costs,
                           const char* what) {
  if (lam.size() != costs.size())
    throw ShapeError(std::string("penalized_loss: ") + what +
                     " group count mismatch");
  double sum = 0.0;
  for (std::size_t l = 0; l < lam.size(); ++l) {
    if (lam[l].size() != costs[l].size())
      throw ShapeError(std::string("penalized_loss: ") + what +
                       " choice count mismatch");
    for (std::size_t i = 0; i < lam[l].size(); ++i)
      sum += lam[l][i] * costs[l][i];
  }
  return sum;
}

}  // namespace detail

// task_loss + eta * sum over groups and choices of lambda_i * C_i.
inline double penalized_loss(double task_loss, const ArchLambdas& lam,
                             const PenaltyTable& penalties, double eta) {
  if (!(eta >= 0.0))
    throw ValueError("penalized_loss: penalty strength must be >= 0");
  double total = detail::penalty_term(lam.left, penalties.left, "left") +
                 detail::penalty_term(lam.right, penalties.right, "right") +
                 detail::penalty_term(lam.dim, penalties.dim, "dim");
  return task_loss + eta * total;
}

// ---------------------------------------------------------------------------
// Batch-level gradient core shared by every method.

struct ArchGradients {
  std::vector<std::vector<double>> left;
  std::vector<std::vector<double>> right;
  std::vector<std::vector<double>> dim;
};

namespace detail {

inline std::vector<GateVector> gates_from_lambdas(const ArchLambdas& lam,
                                                  const SearchSpaceSpec& spec) {
  static const std::vector<double> kNone;
  std::vector<GateVector> gates;
  for (int l = 0; l < spec.num_layers; ++l)
    gates.push_back(gates_from_lambda(
        lam.left.empty() ? kNone : lam.left[l],
        lam.right.empty() ? kNone : lam.right[l],
        lam.dim.empty() ? kNone : lam.dim[l], spec, spec.default_choice(l)));
  return gates;
}

// Sensitivities of the batch loss to each group's mixture weights,
// read off the gate gradients. The offset-zero entry is reported as 0:
// its block is shared by every candidate, so its contribution is a
// constant shift across the group and drops out of the softmax
// Jacobian. Dim sensitivities are prefix sums over row gates.
inline void lambda_sensitivities(const SupernetGrads& grads,
                                 const SearchSpaceSpec& spec, int layer,
                                 std::vector<double>* v_left,
                                 std::vector<double>* v_right,
                                 std::vector<double>* v_dim) {
  const LayerGrads& lg = grads.layers[layer];
  if (spec.search_contexts) {
    v_left->assign(spec.d_left + 1, 0.0);
    for (int c = 1; c <= spec.d_left; ++c) (*v_left)[c] = lg.gate_left[c];
    v_right->assign(spec.d_right + 1, 0.0);
    for (int r = 1; r <= spec.d_right; ++r) (*v_right)[r] = lg.gate_right[r];
  }
  if (spec.search_dims) {
    v_dim->assign(spec.num_dims(), 0.0);
    double prefix = 0.0;
    int k = 0;
    for (int i = 0; i < spec.num_dims(); ++i) {
      for (; k < spec.dim_choices[i]; ++k) prefix += lg.gate_dim[k];
      (*v_dim)[i] = prefix;
    }
  }
}

inline void add_scaled(std::vector<double>& dst, const std::vector<double>& src,
                       double a) {
  if (dst.empty()) dst.assign(src.size(), 0.0);
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += a * src[i];
}

}  // namespace detail

// Task loss, layer-parameter gradients and log alpha gradients for one
// minibatch under J mixture-weight samples. For the softmax methods
// pass a single sample and temperature 0 (plain chain rule); a
// positive temperature applies the tempered Gumbel Jacobian averaged
// over the samples. A penalty table with eta > 0 augments each
// sensitivity with eta * C_i, and the returned loss includes the
// penalty term.
inline double arch_gradients_for_batch(
    const SuperNetwork& net, const std::vector<const Sequence*>& batch,
    const std::vector<ArchLambdas>& samples, double temperature,
    const PenaltyTable* penalties, double eta, SupernetGrads* layer_grads,
    ArchGradients* arch_grads) {
  if (batch.empty()) throw ValueError("arch gradients: empty batch");
  if (samples.empty()) throw ValueError("arch gradients: no weight samples");
  if (temperature == 0.0 && samples.size() != 1)
    throw ValueError("arch gradients: multiple samples need a temperature");
  const SearchSpaceSpec& spec = net.spec;
  const double inv_b = 1.0 / batch.size();
  const double inv_j = 1.0 / samples.size();

  if (arch_grads) {
    if (spec.search_contexts) {
      arch_grads->left.assign(spec.num_layers,
                              std::vector<double>(spec.d_left + 1, 0.0));
      arch_grads->right.assign(spec.num_layers,
                               std::vector<double>(spec.d_right + 1, 0.0));
    }
    if (spec.search_dims)
      arch_grads->dim.assign(spec.num_layers,
                             std::vector<double>(spec.num_dims(), 0.0));
  }

  double total_loss = 0.0;
  bool first_sample = true;
  for (const ArchLambdas& lam : samples) {
    std::vector<GateVector> gates = detail::gates_from_lambdas(lam, spec);
    SupernetGrads acc;
    bool first_seq = true;
    double sample_loss = 0.0;
    for (const Sequence* seq : batch) {
      ForwardTrace trace;
      SeqTensor logits = supernet_forward(net, gates, seq->features, &trace);
      LossGrad lg = cross_entropy_loss(logits, seq->labels);
      sample_loss += lg.loss * inv_b;
      for (double& v : lg.grad.data) v *= inv_b;
      SupernetGrads g = supernet_backward(net, gates, trace, lg.grad);
      if (first_seq) {
        acc = std::move(g);
        first_seq = false;
      } else {
        axpy_arrays(grad_arrays(acc), grad_arrays(g), 1.0);
        for (std::size_t l = 0; l < acc.layers.size(); ++l) {
          detail::add_scaled(acc.layers[l].gate_left, g.layers[l].gate_left,
                             1.0);
          detail::add_scaled(acc.layers[l].gate_right, g.layers[l].gate_right,
                             1.0);
          detail::add_scaled(acc.layers[l].gate_dim, g.layers[l].gate_dim, 1.0);
        }
      }
    }
    if (penalties) sample_loss = penalized_loss(sample_loss, lam, *penalties, eta);
    total_loss += sample_loss * inv_j;

    if (layer_grads) {
      if (first_sample) {
        *layer_grads = acc;
        if (samples.size() > 1) {
          SupernetGrads zero = acc;
          for (std::vector<double>* a : grad_arrays(zero))
            for (double& v : *a) v = 0.0;
          axpy_arrays(grad_arrays(zero), grad_arrays(acc), inv_j);
          *layer_grads = std::move(zero);
        }
      } else {
        axpy_arrays(grad_arrays(*layer_grads), grad_arrays(acc), inv_j);
      }
    }

    if (arch_grads) {
      for (int l = 0; l < spec.num_layers; ++l) {
        std::vector<double> v_left, v_right, v_dim;
        detail::lambda_sensitivities(acc, spec, l, &v_left, &v_right, &v_dim);
        auto accumulate = [&](const std::vector<double>& lam_g,
                              std::vector<double> v,
                              const std::vector<std::vector<double>>* costs,
                              std::vector<double>& out) {
          if (costs && eta > 0.0)
            for (std::size_t i = 0; i < v.size(); ++i)
              v[i] += eta * (*costs)[l][i];
          std::vector<double> grad =
              temperature > 0.0
                  ? gumbel_arch_grad({ArchSample{lam_g, v}}, temperature)
                  : softmax_arch_grad(lam_g, v);
          detail::add_scaled(out, grad, inv_j);
        };
        if (spec.search_contexts) {
          accumulate(lam.left[l], v_left,
                     penalties ? &penalties->left : nullptr,
                     arch_grads->left[l]);
          accumulate(lam.right[l], v_right,
                     penalties ? &penalties->right : nullptr,
                     arch_grads->right[l]);
        }
        if (spec.search_dims)
          accumulate(lam.dim[l], v_dim, penalties ? &penalties->dim : nullptr,
                     arch_grads->dim[l]);
      }
    }
    first_sample = false;
  }
  return total_loss;
}

// ---------------------------------------------------------------------------
// Search orchestration.

struct TrajectoryPoint {
  long long step = 0;
  int layer = 0;
  AttrTag group = AttrTag::left;
  int choice = 0;
  double lambda = 0.0;
};

inline void write_trajectory_csv(const std::string& path,
                                 const std::vector<TrajectoryPoint>& points) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("write_trajectory_csv: cannot open " + path);
  out << "step,layer,group,choice,lambda\n";
  char buf[64];
  for (const TrajectoryPoint& p : points) {
    auto res = std::to_chars(buf, buf + sizeof buf, p.lambda);
    out << p.step << ',' << p.layer << ',' << attr_name(p.group) << ','
        << p.choice << ',' << std::string_view(buf, res.ptr - buf) << '\n';
  }
  if (!out) throw IoError("write_trajectory_csv: write failed on " + path);
}

struct SearchResult {
  ArchitectureWeights weights;
  std::vector<TrajectoryPoint> trajectory;
};

// Resumable search driver. A session advances one minibatch update per
// step; pipelined methods run their layer-only stage first and their
// architecture-only stage second within the same step counter.
// Checkpoints capture parameters, momenta, log alpha, the step index
// and the rng words; the lambda trajectory records steps observed by
// this session object and is not part of the checkpoint.
class SearchSession {
 public:
  SearchSession(SuperNetwork net, Dataset train, Dataset heldout,
                const NasConfig& nas, const TrainConfig& tcfg)
      : net_(std::move(net)),
        train_(std::move(train)),
        heldout_(std::move(heldout)),
        nas_(nas),
        tcfg_(tcfg),
        rng_(tcfg.seed, streams::kSearch) {
    momenta_ = make_momenta(param_arrays(net_));
    init_totals();
  }

  SearchSession(SupernetState state, Dataset train, Dataset heldout,
                const NasConfig& nas, const TrainConfig& tcfg)
      : net_(std::move(state.net)),
        train_(std::move(train)),
        heldout_(std::move(heldout)),
        nas_(nas),
        tcfg_(tcfg),
        momenta_(std::move(state.momenta)),
        step_(state.step),
        rng_(state.rng) {
    if (momenta_.size() != param_arrays(net_).size())
      throw StateError("search resume: momenta do not match the network");
    init_totals();
    if (step_ > total_steps_)
      throw StateError("search resume: step index exceeds the schedule");
  }

  long long step() const { return step_; }
  long long total_steps() const { return total_steps_; }
  long long stage1_steps() const { return stage1_total_; }
  bool done() const { return step_ >= total_steps_; }
  const SuperNetwork& net() const { return net_; }
  const std::vector<TrajectoryPoint>& trajectory() const { return trajectory_; }

  Checkpoint checkpoint() const {
    return supernet_to_checkpoint(net_, momenta_, step_, rng_);
  }

  void run_steps(long long count) {
    for (long long i = 0; i < count && !done(); ++i) do_step();
  }

  void run_all() { run_steps(total_steps_ - step_); }

  SearchResult result() const {
    return SearchResult{net_.arch, trajectory_};
  }

 private:
  static int batches_per_epoch(const Dataset& d, int batch_size) {
    int n = static_cast<int>(d.items.size());
    return (n + batch_size - 1) / batch_size;
  }

  void init_totals() {
    nas_.validate();
    tcfg_.validate();
    net_.spec.validate();
    if (train_.items.empty()) throw TrainingError("no training data", 0);
    bpe_train_ = batches_per_epoch(train_, tcfg_.batch_size);
    stage1_total_ =
        static_cast<long long>(nas_.search_epochs) * bpe_train_;
    stage2_total_ = 0;
    if (is_pipelined(nas_.method)) {
      if (nas_.stage2_epochs > 0 && heldout_.items.empty())
        throw TrainingError("no held-out data for the second stage",
                            stage1_total_);
      if (nas_.stage2_epochs > 0) {
        bpe_stage2_ = batches_per_epoch(heldout_, tcfg_.batch_size);
        stage2_total_ =
            static_cast<long long>(nas_.stage2_epochs) * bpe_stage2_;
      }
    }
    total_steps_ = stage1_total_ + stage2_total_;
  }

  void snapshot() {
    ArchLambdas lam = softmax_lambdas(net_.arch);
    for (int l = 0; l < net_.spec.num_layers; ++l) {
      if (net_.spec.search_contexts) {
        for (std::size_t c = 0; c < lam.left[l].size(); ++c)
          trajectory_.push_back(
              {step_, l, AttrTag::left, static_cast<int>(c), lam.left[l][c]});
        for (std::size_t r = 0; r < lam.right[l].size(); ++r)
          trajectory_.push_back(
              {step_, l, AttrTag::right, static_cast<int>(r), lam.right[l][r]});
      }
      if (net_.spec.search_dims)
        for (std::size_t i = 0; i < lam.dim[l].size(); ++i)
          trajectory_.push_back(
              {step_, l, AttrTag::dim, static_cast<int>(i), lam.dim[l][i]});
    }
  }

  void update_arch(const ArchGradients& grads) {
    ArchitectureWeights& w = net_.arch;
    for (std::size_t l = 0; l < w.log_left.size(); ++l)
      for (std::size_t i = 0; i < w.log_left[l].size(); ++i)
        w.log_left[l][i] -= tcfg_.lr_arch * grads.left[l][i];
    for (std::size_t l = 0; l < w.log_right.size(); ++l)
      for (std::size_t i = 0; i < w.log_right[l].size(); ++i)
        w.log_right[l][i] -= tcfg_.lr_arch * grads.right[l][i];
    for (std::size_t l = 0; l < w.log_dim.size(); ++l)
      for (std::size_t i = 0; i < w.log_dim[l].size(); ++i)
        w.log_dim[l][i] -= tcfg_.lr_arch * grads.dim[l][i];
  }

  void do_step() {
    const bool stage2 = is_pipelined(nas_.method) && step_ >= stage1_total_;
    const Dataset& data = stage2 ? heldout_ : train_;
    const int bpe = stage2 ? bpe_stage2_ : bpe_train_;
    const long long local = stage2 ? step_ - stage1_total_ : step_;
    const long long epoch = local / bpe;
    const int batch_index = static_cast<int>(local % bpe);
    const int n = static_cast<int>(data.items.size());

    std::uint64_t order_tag =
        streams::kEpochOrder + static_cast<std::uint64_t>(epoch) +
        (stage2 ? (1ull << 32) : 0ull);
    std::vector<int> order = shuffled_indices(n, rng_.split(order_tag));
    int start = batch_index * tcfg_.batch_size;
    int stop = std::min(n, start + tcfg_.batch_size);
    std::vector<const Sequence*> batch;
    for (int b = start; b < stop; ++b) batch.push_back(&data.items[order[b]]);

    const SearchSpaceSpec& spec = net_.spec;
    double reported = 0.0;
    SupernetGrads layer_grads;
    ArchGradients arch_grads;
    bool update_layers = !stage2;
    bool update_weights = !is_pipelined(nas_.method) || stage2;

    if (is_pipelined(nas_.method) && !stage2) {
      // Layer-only stage: one uniform architecture sample per batch.
      CandidateArchitecture sample = sample_onehot_uniform(spec, rng_);
      std::vector<GateVector> gates;
      for (int l = 0; l < spec.num_layers; ++l)
        gates.push_back(onehot_gates(spec, sample.layers[l]));
      SupernetGrads acc;
      bool first = true;
      const double inv_b = 1.0 / batch.size();
      for (const Sequence* seq : batch) {
        ForwardTrace trace;
        SeqTensor logits = supernet_forward(net_, gates, seq->features, &trace);
        LossGrad lg = cross_entropy_loss(logits, seq->labels);
        reported += lg.loss * inv_b;
        for (double& v : lg.grad.data) v *= inv_b;
        SupernetGrads g = supernet_backward(net_, gates, trace, lg.grad);
        if (first) {
          acc = std::move(g);
          first = false;
        } else {
          axpy_arrays(grad_arrays(acc), grad_arrays(g), 1.0);
        }
      }
      layer_grads = std::move(acc);
    } else {
      PenaltyTable table;
      bool penalize = nas_.eta > 0.0;
      if (penalize)
        table = build_penalty_table(net_, argmax_candidate(net_.arch, spec));

      std::vector<ArchLambdas> samples;
      double temperature = 0.0;
      if (uses_gumbel(nas_.method)) {
        const long long t_total = stage2 ? stage2_total_ : total_steps_;
        temperature = anneal_temperature(nas_.temperature, local, t_total);
        for (int j = 0; j < nas_.gumbel_samples; ++j) {
          ArchLambdas lam;
          for (int l = 0; l < spec.num_layers; ++l) {
            if (spec.search_contexts) {
              lam.left.push_back(
                  gumbel_lambda(net_.arch.log_left[l], temperature, rng_)
                      .lambda);
              lam.right.push_back(
                  gumbel_lambda(net_.arch.log_right[l], temperature, rng_)
                      .lambda);
            }
            if (spec.search_dims)
              lam.dim.push_back(
                  gumbel_lambda(net_.arch.log_dim[l], temperature, rng_)
                      .lambda);
          }
          samples.push_back(std::move(lam));
        }
      } else {
        samples.push_back(softmax_lambdas(net_.arch));
      }

      reported = arch_gradients_for_batch(
          net_, batch, samples, temperature, penalize ? &table : nullptr,
          nas_.eta, update_layers ? &layer_grads : nullptr, &arch_grads);
    }

    if (!std::isfinite(reported))
      throw TrainingError("non-finite search loss", step_);

    if (update_layers) {
      apply_sgd(param_arrays(net_), grad_arrays(layer_grads), momenta_,
                tcfg_.lr_layers, tcfg_.momentum);
      if ((step_ + 1) % tcfg_.ortho_period == 0)
        for (FactoredLayer& layer : net_.layers) semi_orthogonal_step(layer);
    }
    if (update_weights) update_arch(arch_grads);

    ++step_;
    snapshot();
  }

  SuperNetwork net_;
  Dataset train_;
  Dataset heldout_;
  NasConfig nas_;
  TrainConfig tcfg_;
  std::vector<std::vector<double>> momenta_;
  long long step_ = 0;
  Rng rng_;
  int bpe_train_ = 1;
  int bpe_stage2_ = 1;
  long long stage1_total_ = 0;
  long long stage2_total_ = 0;
  long long total_steps_ = 0;
  std::vector<TrajectoryPoint> trajectory_;
};

// Runs a full search on `net` in place and returns the final weights
// with the per-step lambda trajectory.
inline SearchResult run_search(SuperNetwork& net, const Dataset& train,
                               const Dataset& heldout, const NasConfig& nas,
                               const TrainConfig& tcfg) {
  SearchSession session(std::move(net), train, heldout, nas, tcfg);
  session.run_all();
  SearchResult result = session.result();
  net = session.net();
  return result;
}

// Sequential search: contexts first with dims pinned to their default,
// then dims with the winning contexts pinned. The factory builds a
// fresh supernet for each phase's space.
inline CandidateArchitecture run_two_stage_search(
    const std::function<SuperNetwork(const SearchSpaceSpec&)>& factory,
    const SearchSpaceSpec& spec, const Dataset& train, const Dataset& heldout,
    const NasConfig& nas, const TrainConfig& tcfg) {
  spec.validate();
  if (!spec.search_contexts || !spec.search_dims)
    throw ValueError("two-stage search needs both attribute groups enabled");

  SearchSpaceSpec spec_a = spec;
  spec_a.search_dims = false;
  spec_a.defaults.clear();
  for (int l = 0; l < spec.num_layers; ++l)
    spec_a.defaults.push_back(spec.default_choice(l));
  SuperNetwork net_a = factory(spec_a);
  run_search(net_a, train, heldout, nas, tcfg);
  CandidateArchitecture contexts =
      k_best(build_lattice(net_a.arch, spec_a), 1)[0].first;

  SearchSpaceSpec spec_b = spec;
  spec_b.search_contexts = false;
  spec_b.defaults.clear();
  for (int l = 0; l < spec.num_layers; ++l) {
    LayerChoice pinned = contexts.layers[l];
    pinned.dim_index = spec.default_choice(l).dim_index;
    spec_b.defaults.push_back(pinned);
  }
  SuperNetwork net_b = factory(spec_b);
  run_search(net_b, train, heldout, nas, tcfg);
  return k_best(build_lattice(net_b.arch, spec_b), 1)[0].first;
}

struct BaselineSample {
  CandidateArchitecture candidate;
  double val_loss = 0.0;
  long long params = 0;
};

struct BaselineResult {
  CandidateArchitecture candidate;
  double val_loss = 0.0;
  long long params = 0;
  std::vector<BaselineSample> samples;
};

// Retrains k uniformly sampled candidates and keeps the lowest
// held-out loss; exact ties fall to the smaller model, then to the
// earlier sample.
inline BaselineResult random_search_baseline(
    const SearchSpaceSpec& spec, int in_dim, int hidden_dim, int num_classes,
    const Dataset& train, const Dataset& heldout, int k,
    const TrainConfig& retrain_cfg, Rng& rng) {
  if (k < 1) throw ValueError("random baseline: need at least one sample");
  spec.validate();
  BaselineResult result;
  int best = -1;
  for (int i = 0; i < k; ++i) {
    BaselineSample s;
    s.candidate = sample_onehot_uniform(spec, rng);
    RetrainResult r = retrain_candidate(s.candidate, spec, in_dim, hidden_dim,
                                        num_classes, train, heldout,
                                        retrain_cfg);
    s.val_loss = r.val_loss;
    s.params = r.net.param_count();
    result.samples.push_back(std::move(s));
    const BaselineSample& cur = result.samples.back();
    if (best < 0 || cur.val_loss < result.samples[best].val_loss ||
        (cur.val_loss == result.samples[best].val_loss &&
         cur.params < result.samples[best].params))
      best = i;
  }
  result.candidate = result.samples[best].candidate;
  result.val_loss = result.samples[best].val_loss;
  result.params = result.samples[best].params;
  return result;
}

}  // namespace tdnas
