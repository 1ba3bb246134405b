#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tdnas/errors.hpp"
#include "tdnas/matrix.hpp"
#include "tdnas/rng.hpp"
#include "tdnas/tdnnf_layer.hpp"

namespace tdnas {

// Describes the per-layer search space. Left contexts range over
// {-0, ..., -d_left}, right contexts over {+0, ..., +d_right}, and
// bottleneck widths over dim_choices (strictly ascending; the largest
// entry is the shared width n_max every layer is built with). Either
// attribute group can be switched off, in which case layers are pinned
// to their default choice for that group.
struct SearchSpaceSpec {
  int num_layers = 1;
  int d_left = 0;
  int d_right = 0;
  std::vector<int> dim_choices;
  bool search_contexts = true;
  bool search_dims = true;
  // Optional per-layer pinned choices for unsearched attributes. When
  // empty, layers default to left=0, right=0 and the widest dim.
  std::vector<LayerChoice> defaults;

  int n_max() const { return dim_choices.back(); }
  int num_dims() const { return static_cast<int>(dim_choices.size()); }

  LayerChoice default_choice(int layer) const {
    if (!defaults.empty()) return defaults[layer];
    return LayerChoice{0, 0, num_dims() - 1};
  }

  void validate() const {
    if (num_layers < 1) throw ValueError("search space: num_layers < 1");
    if (d_left < 0 || d_right < 0)
      throw ValueError("search space: negative offset range");
    if (dim_choices.empty())
      throw ValueError("search space: dim_choices is empty");
    for (std::size_t i = 0; i < dim_choices.size(); ++i) {
      if (dim_choices[i] < 1)
        throw ValueError("search space: bottleneck widths must be positive");
      if (i > 0 && dim_choices[i] <= dim_choices[i - 1])
        throw ValueError("search space: dim_choices must be strictly ascending");
    }
    if (!search_contexts && !search_dims)
      throw ValueError("search space: no attribute group is searched");
    if (!defaults.empty() &&
        static_cast<int>(defaults.size()) != num_layers)
      throw ValueError("search space: defaults must cover every layer");
    for (const LayerChoice& c : defaults) {
      if (c.left < 0 || c.left > d_left || c.right < 0 || c.right > d_right ||
          c.dim_index < 0 || c.dim_index >= num_dims())
        throw ValueError("search space: default choice out of range");
    }
  }
};

// Log-domain architecture parameters (the log alpha of each softmax
// group). Outer vectors are empty for attribute groups that are not
// searched.
struct ArchitectureWeights {
  std::vector<std::vector<double>> log_left;   // per layer, d_left + 1
  std::vector<std::vector<double>> log_right;  // per layer, d_right + 1
  std::vector<std::vector<double>> log_dim;    // per layer, num_dims

  static ArchitectureWeights zeros(const SearchSpaceSpec& spec) {
    ArchitectureWeights w;
    if (spec.search_contexts) {
      w.log_left.assign(spec.num_layers,
                        std::vector<double>(spec.d_left + 1, 0.0));
      w.log_right.assign(spec.num_layers,
                         std::vector<double>(spec.d_right + 1, 0.0));
    }
    if (spec.search_dims)
      w.log_dim.assign(spec.num_layers,
                       std::vector<double>(spec.num_dims(), 0.0));
    return w;
  }
};

// Per-layer multiplicative gates. left[c] scales linear block B_c,
// right[r] scales affine block A_r, dim[k] scales bottleneck row k.
// left[0] and right[0] are pinned to 1: the offset-zero blocks are
// shared by every candidate, so their lambda values sum to one.
struct GateVector {
  std::vector<double> left;
  std::vector<double> right;
  std::vector<double> dim;
};

// A fully specified architecture: one concrete choice per layer.
struct CandidateArchitecture {
  std::vector<LayerChoice> layers;

  bool operator==(const CandidateArchitecture&) const = default;
};

namespace detail {

inline void check_simplex(const std::vector<double>& lam, const char* what) {
  double sum = 0.0;
  for (double v : lam) {
    if (!(v >= 0.0))
      throw ValueError(std::string(what) + ": negative or non-finite entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ValueError(std::string(what) + ": entries sum to " +
                     std::to_string(sum) + ", not 1");
}

}  // namespace detail

// Turns per-group mixture weights into gates. An empty lambda marks an
// unsearched group, which gets the one-hot gates of `fallback`. The
// dim gate is a non-increasing prefix profile: row k is active in
// every candidate whose width exceeds k, so its gate accumulates the
// lambda mass of those candidates.
inline GateVector gates_from_lambda(const std::vector<double>& lam_left,
                                    const std::vector<double>& lam_right,
                                    const std::vector<double>& lam_dim,
                                    const SearchSpaceSpec& spec,
                                    const LayerChoice& fallback) {
  GateVector g;
  g.left.assign(spec.d_left + 1, 0.0);
  g.right.assign(spec.d_right + 1, 0.0);
  g.dim.assign(spec.n_max(), 0.0);

  if (lam_left.empty()) {
    g.left[0] = 1.0;
    if (fallback.left > 0) g.left[fallback.left] = 1.0;
  } else {
    if (static_cast<int>(lam_left.size()) != spec.d_left + 1)
      throw ShapeError("gates_from_lambda: left lambda has " +
                       std::to_string(lam_left.size()) + " entries, want " +
                       std::to_string(spec.d_left + 1));
    detail::check_simplex(lam_left, "left lambda");
    g.left[0] = 1.0;
    for (int c = 1; c <= spec.d_left; ++c) g.left[c] = lam_left[c];
  }

  if (lam_right.empty()) {
    g.right[0] = 1.0;
    if (fallback.right > 0) g.right[fallback.right] = 1.0;
  } else {
    if (static_cast<int>(lam_right.size()) != spec.d_right + 1)
      throw ShapeError("gates_from_lambda: right lambda has " +
                       std::to_string(lam_right.size()) + " entries, want " +
                       std::to_string(spec.d_right + 1));
    detail::check_simplex(lam_right, "right lambda");
    g.right[0] = 1.0;
    for (int r = 1; r <= spec.d_right; ++r) g.right[r] = lam_right[r];
  }

  if (lam_dim.empty()) {
    int n = spec.dim_choices[fallback.dim_index];
    for (int k = 0; k < n; ++k) g.dim[k] = 1.0;
  } else {
    if (static_cast<int>(lam_dim.size()) != spec.num_dims())
      throw ShapeError("gates_from_lambda: dim lambda has " +
                       std::to_string(lam_dim.size()) + " entries, want " +
                       std::to_string(spec.num_dims()));
    detail::check_simplex(lam_dim, "dim lambda");
    for (int k = 0; k < spec.n_max(); ++k) {
      double acc = 0.0;
      for (int i = 0; i < spec.num_dims(); ++i)
        if (spec.dim_choices[i] > k) acc += lam_dim[i];
      g.dim[k] = acc;
    }
  }
  return g;
}

// Exact one-hot gates of a concrete choice.
inline GateVector onehot_gates(const SearchSpaceSpec& spec,
                               const LayerChoice& choice) {
  GateVector g;
  g.left.assign(spec.d_left + 1, 0.0);
  g.right.assign(spec.d_right + 1, 0.0);
  g.dim.assign(spec.n_max(), 0.0);
  g.left[0] = 1.0;
  if (choice.left > 0) g.left[choice.left] = 1.0;
  g.right[0] = 1.0;
  if (choice.right > 0) g.right[choice.right] = 1.0;
  for (int k = 0; k < spec.dim_choices[choice.dim_index]; ++k) g.dim[k] = 1.0;
  return g;
}

// Shared-parameter network: a stack of factored layers sized for the
// widest candidate, plus a linear classifier.
struct SuperNetwork {
  SearchSpaceSpec spec;
  int in_dim = 0;
  int hidden_dim = 0;
  int num_classes = 0;
  std::vector<FactoredLayer> layers;
  Matrix classifier_w;
  std::vector<double> classifier_b;
  ArchitectureWeights arch;
};

// Builds a supernet with scaled-normal layer entries (stddev
// 1/sqrt(fan_in)), zero biases and uniform (all-zero log alpha)
// architecture weights. Draw order is fixed so a seed fully
// determines the initialization.
inline SuperNetwork make_supernet(const SearchSpaceSpec& spec, int in_dim,
                                  int hidden_dim, int num_classes, Rng& rng) {
  spec.validate();
  if (in_dim < 1 || hidden_dim < 1 || num_classes < 2)
    throw ValueError("make_supernet: need in_dim, hidden_dim >= 1 and >= 2 classes");
  SuperNetwork net;
  net.spec = spec;
  net.in_dim = in_dim;
  net.hidden_dim = hidden_dim;
  net.num_classes = num_classes;
  for (int l = 0; l < spec.num_layers; ++l) {
    int din = l == 0 ? in_dim : hidden_dim;
    FactoredLayer layer = FactoredLayer::make(din, hidden_dim, spec.n_max(),
                                              spec.d_left, spec.d_right);
    double lin_scale = 1.0 / std::sqrt(static_cast<double>(din));
    double aff_scale = 1.0 / std::sqrt(static_cast<double>(spec.n_max()));
    for (Matrix& b : layer.linear_blocks)
      for (double& v : b.data) v = lin_scale * rng.draw_normal();
    for (Matrix& a : layer.affine_blocks)
      for (double& v : a.data) v = aff_scale * rng.draw_normal();
    net.layers.push_back(std::move(layer));
  }
  net.classifier_w = Matrix(num_classes, hidden_dim);
  double cls_scale = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  for (double& v : net.classifier_w.data) v = cls_scale * rng.draw_normal();
  net.classifier_b.assign(num_classes, 0.0);
  net.arch = ArchitectureWeights::zeros(spec);
  return net;
}

// Intermediates of one gated layer, kept for backward.
struct LayerTrace {
  SeqTensor input;
  SeqTensor z;   // bottleneck before the dim gate
  SeqTensor zt;  // bottleneck after the dim gate
  SeqTensor y;   // pre-activation output
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  SeqTensor hidden;  // output of the last gated layer
};

namespace detail {

inline void check_gates(const SuperNetwork& net,
                        const std::vector<GateVector>& gates) {
  if (gates.size() != net.layers.size())
    throw ShapeError("supernet: got " + std::to_string(gates.size()) +
                     " gate vectors for " + std::to_string(net.layers.size()) +
                     " layers");
  for (std::size_t l = 0; l < gates.size(); ++l) {
    const GateVector& g = gates[l];
    if (static_cast<int>(g.left.size()) != net.spec.d_left + 1 ||
        static_cast<int>(g.right.size()) != net.spec.d_right + 1 ||
        static_cast<int>(g.dim.size()) != net.spec.n_max())
      throw ShapeError("supernet: gate lengths do not match layer " +
                       std::to_string(l));
    require_finite(g.left, "gate left");
    require_finite(g.right, "gate right");
    require_finite(g.dim, "gate dim");
  }
}

// Number of leading dim-gate entries that are in use. Gates are a
// non-increasing prefix profile, so everything past the last nonzero
// entry contributes exactly zero and can be skipped.
inline int active_rows(const std::vector<double>& dim_gate) {
  int n = static_cast<int>(dim_gate.size());
  while (n > 0 && dim_gate[n - 1] == 0.0) --n;
  return n;
}

}  // namespace detail

// Gated forward pass. Each linear block feeds the bottleneck scaled by
// its left gate, each bottleneck row is scaled by its dim gate, and
// each affine block consumes the gated bottleneck scaled by its right
// gate. With one-hot gates this reproduces a single candidate exactly;
// with mixture gates it evaluates all candidates at shared cost.
inline SeqTensor supernet_forward(const SuperNetwork& net,
                                  const std::vector<GateVector>& gates,
                                  const SeqTensor& x,
                                  ForwardTrace* trace = nullptr) {
  detail::check_gates(net, gates);
  if (x.dim != net.in_dim)
    throw ShapeError("supernet: input " + x.shape_str() +
                     " does not match in_dim " + std::to_string(net.in_dim));
  if (trace) trace->layers.assign(net.layers.size(), LayerTrace{});
  const int T = x.frames;
  SeqTensor h = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const FactoredLayer& layer = net.layers[l];
    const GateVector& g = gates[l];
    const int nm = layer.n_max;
    SeqTensor z(T, nm);
    for (int c = 0; c <= layer.d_left; ++c) {
      double gc = g.left[c];
      if (gc == 0.0) continue;
      const Matrix& b = layer.linear_blocks[c];
      for (int t = 0; t < T; ++t) {
        const double* src = h.frame(detail::clamp_frame(t - c, T));
        double* zt = z.frame(t);
        for (int k = 0; k < nm; ++k)
          zt[k] += gc * detail::dot(b.row(k), src, layer.in_dim);
      }
    }
    SeqTensor zg(T, nm);
    for (int t = 0; t < T; ++t) {
      const double* zt = z.frame(t);
      double* zgt = zg.frame(t);
      for (int k = 0; k < nm; ++k) zgt[k] = g.dim[k] * zt[k];
    }
    int na = detail::active_rows(g.dim);
    SeqTensor y(T, layer.out_dim);
    for (int r = 0; r <= layer.d_right; ++r) {
      double gr = g.right[r];
      if (gr == 0.0) continue;
      const Matrix& a = layer.affine_blocks[r];
      for (int t = 0; t < T; ++t) {
        const double* src = zg.frame(detail::clamp_frame(t + r, T));
        double* yt = y.frame(t);
        for (int d = 0; d < layer.out_dim; ++d)
          yt[d] += gr * detail::dot(a.row(d), src, na);
      }
    }
    for (int t = 0; t < T; ++t) {
      double* yt = y.frame(t);
      for (int d = 0; d < layer.out_dim; ++d) yt[d] += layer.bias[d];
    }
    SeqTensor out = layer.is_final ? y : relu(y);
    if (trace) {
      LayerTrace& lt = trace->layers[l];
      lt.input = std::move(h);
      lt.z = std::move(z);
      lt.zt = std::move(zg);
      lt.y = std::move(y);
    }
    h = std::move(out);
  }
  if (trace) trace->hidden = h;
  SeqTensor logits(T, net.num_classes);
  for (int t = 0; t < T; ++t) {
    const double* ht = h.frame(t);
    double* lt = logits.frame(t);
    for (int k = 0; k < net.num_classes; ++k)
      lt[k] = detail::dot(net.classifier_w.row(k), ht, net.hidden_dim) +
              net.classifier_b[k];
  }
  return logits;
}

// Gradients of everything the forward touched. Gate gradients are
// plain sensitivities d loss / d gate for every gate entry, including
// entries whose gate is currently zero: the parameter gradients of a
// zero-gated block are exactly zero, but its gate gradient is not.
struct LayerGrads {
  std::vector<Matrix> linear;
  std::vector<Matrix> affine;
  std::vector<double> bias;
  std::vector<double> gate_left;
  std::vector<double> gate_right;
  std::vector<double> gate_dim;
};

struct SupernetGrads {
  std::vector<LayerGrads> layers;
  Matrix classifier_w;
  std::vector<double> classifier_b;
};

inline SupernetGrads supernet_backward(const SuperNetwork& net,
                                       const std::vector<GateVector>& gates,
                                       const ForwardTrace& trace,
                                       const SeqTensor& dlogits) {
  detail::check_gates(net, gates);
  if (trace.layers.size() != net.layers.size() || trace.hidden.frames == 0)
    throw StateError("supernet backward: forward trace is missing");
  if (dlogits.frames != trace.hidden.frames || dlogits.dim != net.num_classes)
    throw ShapeError("supernet backward: gradient " + dlogits.shape_str() +
                     " does not match logits");
  const int T = dlogits.frames;
  SupernetGrads grads;
  grads.layers.resize(net.layers.size());
  grads.classifier_w = Matrix(net.num_classes, net.hidden_dim);
  grads.classifier_b.assign(net.num_classes, 0.0);

  SeqTensor dh(T, net.hidden_dim);
  for (int t = 0; t < T; ++t) {
    const double* ht = trace.hidden.frame(t);
    const double* dl = dlogits.frame(t);
    double* dht = dh.frame(t);
    for (int k = 0; k < net.num_classes; ++k) {
      double g = dl[k];
      grads.classifier_b[k] += g;
      if (g == 0.0) continue;
      double* gw = grads.classifier_w.row(k);
      const double* w = net.classifier_w.row(k);
      for (int j = 0; j < net.hidden_dim; ++j) {
        gw[j] += g * ht[j];
        dht[j] += g * w[j];
      }
    }
  }

  for (int l = static_cast<int>(net.layers.size()) - 1; l >= 0; --l) {
    const FactoredLayer& layer = net.layers[l];
    const GateVector& g = gates[l];
    const LayerTrace& lt = trace.layers[l];
    LayerGrads& lg = grads.layers[l];
    const int nm = layer.n_max;
    lg.linear.assign(layer.d_left + 1, Matrix(nm, layer.in_dim));
    lg.affine.assign(layer.d_right + 1, Matrix(layer.out_dim, nm));
    lg.bias.assign(layer.out_dim, 0.0);
    lg.gate_left.assign(layer.d_left + 1, 0.0);
    lg.gate_right.assign(layer.d_right + 1, 0.0);
    lg.gate_dim.assign(nm, 0.0);

    SeqTensor dy = dh;
    if (!layer.is_final) {
      for (int t = 0; t < T; ++t)
        for (int d = 0; d < layer.out_dim; ++d)
          if (lt.y.at(t, d) <= 0.0) dy.at(t, d) = 0.0;
    }
    for (int t = 0; t < T; ++t)
      for (int d = 0; d < layer.out_dim; ++d) lg.bias[d] += dy.at(t, d);

    SeqTensor dzg(T, nm);
    for (int r = 0; r <= layer.d_right; ++r) {
      double gr = g.right[r];
      const Matrix& a = layer.affine_blocks[r];
      Matrix& da = lg.affine[r];
      double gate_grad = 0.0;
      for (int t = 0; t < T; ++t) {
        int ts = detail::clamp_frame(t + r, T);
        const double* src = lt.zt.frame(ts);
        double* dzs = dzg.frame(ts);
        const double* dyt = dy.frame(t);
        for (int d = 0; d < layer.out_dim; ++d) {
          double gd = dyt[d];
          if (gd == 0.0) continue;
          gate_grad += gd * detail::dot(a.row(d), src, nm);
          if (gr != 0.0) {
            double* dar = da.row(d);
            const double* ar = a.row(d);
            double s = gr * gd;
            for (int k = 0; k < nm; ++k) {
              dar[k] += s * src[k];
              dzs[k] += s * ar[k];
            }
          }
        }
      }
      lg.gate_right[r] = gate_grad;
    }

    SeqTensor dz(T, nm);
    for (int t = 0; t < T; ++t) {
      const double* zt = lt.z.frame(t);
      const double* dzgt = dzg.frame(t);
      double* dzt = dz.frame(t);
      for (int k = 0; k < nm; ++k) {
        lg.gate_dim[k] += dzgt[k] * zt[k];
        dzt[k] = dzgt[k] * g.dim[k];
      }
    }

    SeqTensor dinput(T, layer.in_dim);
    for (int c = 0; c <= layer.d_left; ++c) {
      double gc = g.left[c];
      const Matrix& b = layer.linear_blocks[c];
      Matrix& db = lg.linear[c];
      double gate_grad = 0.0;
      for (int t = 0; t < T; ++t) {
        int ts = detail::clamp_frame(t - c, T);
        const double* src = lt.input.frame(ts);
        double* dis = dinput.frame(ts);
        const double* dzt = dz.frame(t);
        for (int k = 0; k < nm; ++k) {
          double gk = dzt[k];
          if (gk == 0.0) continue;
          gate_grad += gk * detail::dot(b.row(k), src, layer.in_dim);
          if (gc != 0.0) {
            double* dbr = db.row(k);
            const double* br = b.row(k);
            double s = gc * gk;
            for (int j = 0; j < layer.in_dim; ++j) {
              dbr[j] += s * src[j];
              dis[j] += s * br[j];
            }
          }
        }
      }
      lg.gate_left[c] = gate_grad;
    }
    dh = std::move(dinput);
  }
  return grads;
}

// Uniform one-hot architecture sample. Only searched attribute groups
// consume randomness; pinned groups take their default.
inline CandidateArchitecture sample_onehot_uniform(const SearchSpaceSpec& spec,
                                                   Rng& rng) {
  spec.validate();
  CandidateArchitecture cand;
  for (int l = 0; l < spec.num_layers; ++l) {
    LayerChoice c = spec.default_choice(l);
    if (spec.search_contexts) {
      c.left = static_cast<int>(rng.next_below(spec.d_left + 1));
      c.right = static_cast<int>(rng.next_below(spec.d_right + 1));
    }
    if (spec.search_dims)
      c.dim_index = static_cast<int>(rng.next_below(spec.num_dims()));
    cand.layers.push_back(c);
  }
  return cand;
}

// A candidate copied out of the supernet into standalone form.
struct ExtractedNetwork {
  int in_dim = 0;
  int hidden_dim = 0;
  int num_classes = 0;
  std::vector<ExtractedLayer> layers;
  Matrix classifier_w;
  std::vector<double> classifier_b;

  long long param_count() const {
    long long count = static_cast<long long>(classifier_w.rows) *
                          classifier_w.cols +
                      static_cast<long long>(classifier_b.size());
    for (const ExtractedLayer& l : layers) count += l.param_count();
    return count;
  }
};

inline ExtractedNetwork extract_network(const SuperNetwork& net,
                                        const CandidateArchitecture& cand) {
  if (cand.layers.size() != net.layers.size())
    throw ValueError("extract_network: candidate has " +
                     std::to_string(cand.layers.size()) + " layers, net has " +
                     std::to_string(net.layers.size()));
  ExtractedNetwork out;
  out.in_dim = net.in_dim;
  out.hidden_dim = net.hidden_dim;
  out.num_classes = net.num_classes;
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    out.layers.push_back(
        extract_layer(net.layers[l], cand.layers[l], net.spec.dim_choices));
  out.classifier_w = net.classifier_w;
  out.classifier_b = net.classifier_b;
  return out;
}

struct NetworkTrace {
  std::vector<ExtractedLayerTrace> layers;
  SeqTensor hidden;
};

inline SeqTensor network_forward(const ExtractedNetwork& net,
                                 const SeqTensor& x,
                                 NetworkTrace* trace = nullptr) {
  if (x.dim != net.in_dim)
    throw ShapeError("network forward: input " + x.shape_str() +
                     " does not match in_dim " + std::to_string(net.in_dim));
  if (trace) trace->layers.assign(net.layers.size(), ExtractedLayerTrace{});
  SeqTensor h = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    h = extracted_layer_forward(net.layers[l], h,
                                trace ? &trace->layers[l] : nullptr);
  if (trace) trace->hidden = h;
  const int T = x.frames;
  SeqTensor logits(T, net.num_classes);
  for (int t = 0; t < T; ++t) {
    const double* ht = h.frame(t);
    double* lt = logits.frame(t);
    for (int k = 0; k < net.num_classes; ++k)
      lt[k] = detail::dot(net.classifier_w.row(k), ht, net.hidden_dim) +
              net.classifier_b[k];
  }
  return logits;
}

struct NetworkGrads {
  std::vector<ExtractedLayerGrads> layers;
  Matrix classifier_w;
  std::vector<double> classifier_b;
};

inline NetworkGrads network_backward(const ExtractedNetwork& net,
                                     const NetworkTrace& trace,
                                     const SeqTensor& dlogits) {
  if (trace.layers.size() != net.layers.size() || trace.hidden.frames == 0)
    throw StateError("network backward: forward trace is missing");
  const int T = dlogits.frames;
  NetworkGrads grads;
  grads.layers.resize(net.layers.size());
  grads.classifier_w = Matrix(net.num_classes, net.hidden_dim);
  grads.classifier_b.assign(net.num_classes, 0.0);
  SeqTensor dh(T, net.hidden_dim);
  for (int t = 0; t < T; ++t) {
    const double* ht = trace.hidden.frame(t);
    const double* dl = dlogits.frame(t);
    double* dht = dh.frame(t);
    for (int k = 0; k < net.num_classes; ++k) {
      double g = dl[k];
      grads.classifier_b[k] += g;
      if (g == 0.0) continue;
      double* gw = grads.classifier_w.row(k);
      const double* w = net.classifier_w.row(k);
      for (int j = 0; j < net.hidden_dim; ++j) {
        gw[j] += g * ht[j];
        dht[j] += g * w[j];
      }
    }
  }
  for (int l = static_cast<int>(net.layers.size()) - 1; l >= 0; --l)
    dh = extracted_layer_backward(net.layers[l], trace.layers[l], dh,
                                  grads.layers[l]);
  return grads;
}

// Scalar parameter count of a candidate, computable without building
// any network: the factored-layer counts plus the classifier.
inline long long network_param_count(const SearchSpaceSpec& spec, int in_dim,
                                     int hidden_dim, int num_classes,
                                     const CandidateArchitecture& cand) {
  if (static_cast<int>(cand.layers.size()) != spec.num_layers)
    throw ValueError("network_param_count: candidate layer count mismatch");
  long long total = 0;
  for (int l = 0; l < spec.num_layers; ++l) {
    const LayerChoice& c = cand.layers[l];
    if (c.left < 0 || c.left > spec.d_left || c.right < 0 ||
        c.right > spec.d_right || c.dim_index < 0 ||
        c.dim_index >= spec.num_dims())
      throw ValueError("network_param_count: choice out of range");
    long long din = l == 0 ? in_dim : hidden_dim;
    long long n = spec.dim_choices[c.dim_index];
    total += n * din * (c.left > 0 ? 2 : 1);
    total += static_cast<long long>(hidden_dim) * n * (c.right > 0 ? 2 : 1);
    total += hidden_dim;
  }
  total += static_cast<long long>(num_classes) * hidden_dim + num_classes;
  return total;
}

inline long long network_param_count(const SuperNetwork& net,
                                     const CandidateArchitecture& cand) {
  return network_param_count(net.spec, net.in_dim, net.hidden_dim,
                             net.num_classes, cand);
}

}  // namespace tdnas
