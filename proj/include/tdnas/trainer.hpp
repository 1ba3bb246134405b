#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "tdnas/data_synth.hpp"
#include "tdnas/errors.hpp"
#include "tdnas/matrix.hpp"
#include "tdnas/rng.hpp"
#include "tdnas/supernet.hpp"

namespace tdnas {

struct TrainConfig {
  double lr_layers = 0.05;  // layer parameters, SGD with momentum
  double lr_arch = 0.01;    // log alpha, plain gradient descent
  double momentum = 0.9;
  int batch_size = 8;  // whole sequences per update
  int epochs = 3;
  std::uint64_t seed = 1;
  int ortho_period = 4;  // apply the semi-orthogonal step every N updates

  void validate() const {
    if (!(lr_layers > 0.0) || !(lr_arch > 0.0))
      throw ValueError("train config: learning rates must be positive");
    if (momentum < 0.0 || momentum >= 1.0)
      throw ValueError("train config: momentum must lie in [0, 1)");
    if (batch_size < 1) throw ValueError("train config: batch size < 1");
    if (epochs < 0) throw ValueError("train config: negative epoch count");
    if (ortho_period < 1) throw ValueError("train config: ortho period < 1");
  }
};

// Stream tags for deriving independent substreams from one seed.
namespace streams {
constexpr std::uint64_t kData = 1;
constexpr std::uint64_t kSplit = 2;
constexpr std::uint64_t kInit = 3;
constexpr std::uint64_t kSearch = 4;
constexpr std::uint64_t kRetrain = 5;
constexpr std::uint64_t kEpochOrder = 100;
}  // namespace streams

struct LossGrad {
  double loss = 0.0;
  SeqTensor grad;  // d loss / d logits
};

// Mean over frames of -log softmax(logits)[label]. The gradient is
// (softmax - onehot) / num_frames.
inline LossGrad cross_entropy_loss(const SeqTensor& logits,
                                   const std::vector<int>& labels) {
  if (static_cast<int>(labels.size()) != logits.frames)
    throw ShapeError("cross entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(logits.frames) +
                     " frames");
  if (logits.frames == 0) throw ValueError("cross entropy: empty sequence");
  LossGrad out;
  out.grad = SeqTensor(logits.frames, logits.dim);
  const double inv_t = 1.0 / logits.frames;
  std::vector<double> row(logits.dim);
  for (int t = 0; t < logits.frames; ++t) {
    int y = labels[t];
    if (y < 0 || y >= logits.dim)
      throw ValueError("cross entropy: label " + std::to_string(y) +
                       " outside [0, " + std::to_string(logits.dim) + ")");
    row.assign(logits.frame(t), logits.frame(t) + logits.dim);
    std::vector<double> p = stable_softmax(row);
    out.loss -= std::log(p[y]) * inv_t;
    double* g = out.grad.frame(t);
    for (int k = 0; k < logits.dim; ++k)
      g[k] = (p[k] - (k == y ? 1.0 : 0.0)) * inv_t;
  }
  return out;
}

// One heavy-ball update: m <- momentum m + g; p <- p - lr m.
inline void sgd_momentum_step(std::vector<double>& params,
                              const std::vector<double>& grads,
                              std::vector<double>& momenta, double lr,
                              double momentum) {
  if (params.size() != grads.size() || params.size() != momenta.size())
    throw ShapeError("sgd step: sizes " + std::to_string(params.size()) +
                     " / " + std::to_string(grads.size()) + " / " +
                     std::to_string(momenta.size()) + " disagree");
  for (std::size_t i = 0; i < params.size(); ++i) {
    momenta[i] = momentum * momenta[i] + grads[i];
    params[i] -= lr * momenta[i];
  }
}

// Flattened views over every trainable array of a network, in a fixed
// order shared with the matching gradient struct.
inline std::vector<std::vector<double>*> param_arrays(ExtractedNetwork& net) {
  std::vector<std::vector<double>*> out;
  for (ExtractedLayer& l : net.layers) {
    out.push_back(&l.b0.data);
    out.push_back(&l.bc.data);
    out.push_back(&l.a0.data);
    out.push_back(&l.ar.data);
    out.push_back(&l.bias);
  }
  out.push_back(&net.classifier_w.data);
  out.push_back(&net.classifier_b);
  return out;
}

inline std::vector<std::vector<double>*> grad_arrays(NetworkGrads& grads) {
  std::vector<std::vector<double>*> out;
  for (ExtractedLayerGrads& l : grads.layers) {
    out.push_back(&l.b0.data);
    out.push_back(&l.bc.data);
    out.push_back(&l.a0.data);
    out.push_back(&l.ar.data);
    out.push_back(&l.bias);
  }
  out.push_back(&grads.classifier_w.data);
  out.push_back(&grads.classifier_b);
  return out;
}

inline std::vector<std::vector<double>*> param_arrays(SuperNetwork& net) {
  std::vector<std::vector<double>*> out;
  for (FactoredLayer& l : net.layers) {
    for (Matrix& b : l.linear_blocks) out.push_back(&b.data);
    for (Matrix& a : l.affine_blocks) out.push_back(&a.data);
    out.push_back(&l.bias);
  }
  out.push_back(&net.classifier_w.data);
  out.push_back(&net.classifier_b);
  return out;
}

inline std::vector<std::vector<double>*> grad_arrays(SupernetGrads& grads) {
  std::vector<std::vector<double>*> out;
  for (LayerGrads& l : grads.layers) {
    for (Matrix& b : l.linear) out.push_back(&b.data);
    for (Matrix& a : l.affine) out.push_back(&a.data);
    out.push_back(&l.bias);
  }
  out.push_back(&grads.classifier_w.data);
  out.push_back(&grads.classifier_b);
  return out;
}

inline std::vector<std::vector<double>> make_momenta(
    const std::vector<std::vector<double>*>& params) {
  std::vector<std::vector<double>> m;
  for (const std::vector<double>* p : params)
    m.emplace_back(p->size(), 0.0);
  return m;
}

inline void apply_sgd(const std::vector<std::vector<double>*>& params,
                      const std::vector<std::vector<double>*>& grads,
                      std::vector<std::vector<double>>& momenta, double lr,
                      double momentum) {
  if (params.size() != grads.size() || params.size() != momenta.size())
    throw ShapeError("sgd step: array group counts disagree");
  for (std::size_t i = 0; i < params.size(); ++i)
    sgd_momentum_step(*params[i], *grads[i], momenta[i], lr, momentum);
}

inline void axpy_arrays(const std::vector<std::vector<double>*>& dst,
                        const std::vector<std::vector<double>*>& src,
                        double a) {
  if (dst.size() != src.size())
    throw ShapeError("axpy: array group counts disagree");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->size() != src[i]->size())
      throw ShapeError("axpy: array sizes disagree");
    for (std::size_t j = 0; j < src[i]->size(); ++j)
      (*dst[i])[j] += a * (*src[i])[j];
  }
}

struct EvalResult {
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

// Mean of per-sequence mean losses plus overall frame accuracy.
inline EvalResult evaluate(const ExtractedNetwork& net, const Dataset& data) {
  if (data.items.empty()) throw ValueError("evaluate: empty dataset");
  EvalResult res;
  long long frames = 0, hits = 0;
  for (const Sequence& seq : data.items) {
    SeqTensor logits = network_forward(net, seq.features);
    LossGrad lg = cross_entropy_loss(logits, seq.labels);
    res.mean_loss += lg.loss;
    for (int t = 0; t < logits.frames; ++t) {
      hits += detail::argmax_row(logits.frame(t), logits.dim) == seq.labels[t];
      ++frames;
    }
  }
  res.mean_loss /= static_cast<double>(data.items.size());
  res.accuracy = static_cast<double>(hits) / static_cast<double>(frames);
  return res;
}

inline std::vector<int> shuffled_indices(int n, Rng rng) {
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  for (int i = 0; i < n - 1; ++i) {
    int j = i + static_cast<int>(rng.next_below(n - i));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

// Fresh standalone network for a candidate, scaled-normal initialized
// by fan-in (in_dim for linear blocks, the bottleneck width for affine
// blocks), biases zero.
inline ExtractedNetwork make_network(const SearchSpaceSpec& spec,
                                     const CandidateArchitecture& cand,
                                     int in_dim, int hidden_dim,
                                     int num_classes, Rng& rng) {
  spec.validate();
  if (static_cast<int>(cand.layers.size()) != spec.num_layers)
    throw ValueError("make_network: candidate layer count mismatch");
  ExtractedNetwork net;
  net.in_dim = in_dim;
  net.hidden_dim = hidden_dim;
  net.num_classes = num_classes;
  for (int l = 0; l < spec.num_layers; ++l) {
    const LayerChoice& c = cand.layers[l];
    if (c.left < 0 || c.left > spec.d_left || c.right < 0 ||
        c.right > spec.d_right || c.dim_index < 0 ||
        c.dim_index >= spec.num_dims())
      throw ValueError("make_network: choice out of range");
    ExtractedLayer layer;
    layer.in_dim = l == 0 ? in_dim : hidden_dim;
    layer.out_dim = hidden_dim;
    layer.n = spec.dim_choices[c.dim_index];
    layer.left = c.left;
    layer.right = c.right;
    layer.is_final = false;
    double lin_scale = 1.0 / std::sqrt(static_cast<double>(layer.in_dim));
    double aff_scale = 1.0 / std::sqrt(static_cast<double>(layer.n));
    layer.b0 = Matrix(layer.n, layer.in_dim);
    for (double& v : layer.b0.data) v = lin_scale * rng.draw_normal();
    if (c.left > 0) {
      layer.bc = Matrix(layer.n, layer.in_dim);
      for (double& v : layer.bc.data) v = lin_scale * rng.draw_normal();
    }
    layer.a0 = Matrix(hidden_dim, layer.n);
    for (double& v : layer.a0.data) v = aff_scale * rng.draw_normal();
    if (c.right > 0) {
      layer.ar = Matrix(hidden_dim, layer.n);
      for (double& v : layer.ar.data) v = aff_scale * rng.draw_normal();
    }
    layer.bias.assign(hidden_dim, 0.0);
    net.layers.push_back(std::move(layer));
  }
  net.classifier_w = Matrix(num_classes, hidden_dim);
  double cls_scale = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  for (double& v : net.classifier_w.data) v = cls_scale * rng.draw_normal();
  net.classifier_b.assign(num_classes, 0.0);
  return net;
}

// Trains a standalone network in place: per-epoch shuffled whole-
// sequence batches, SGD with momentum, semi-orthogonal step on every
// layer each ortho_period updates. `rng` drives only the batch order.
inline void train_network(ExtractedNetwork& net, const Dataset& train,
                          const TrainConfig& cfg, const Rng& rng) {
  cfg.validate();
  if (train.items.empty()) throw TrainingError("no training data", 0);
  std::vector<std::vector<double>*> params = param_arrays(net);
  std::vector<std::vector<double>> momenta = make_momenta(params);
  long long step = 0;
  const int n = static_cast<int>(train.items.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order =
        shuffled_indices(n, rng.split(streams::kEpochOrder + epoch));
    for (int start = 0; start < n; start += cfg.batch_size) {
      int stop = std::min(n, start + cfg.batch_size);
      double inv_b = 1.0 / (stop - start);
      NetworkGrads batch;
      bool first = true;
      double batch_loss = 0.0;
      for (int b = start; b < stop; ++b) {
        const Sequence& seq = train.items[order[b]];
        NetworkTrace trace;
        SeqTensor logits = network_forward(net, seq.features, &trace);
        LossGrad lg = cross_entropy_loss(logits, seq.labels);
        batch_loss += lg.loss * inv_b;
        for (double& v : lg.grad.data) v *= inv_b;
        NetworkGrads g = network_backward(net, trace, lg.grad);
        if (first) {
          batch = std::move(g);
          first = false;
        } else {
          axpy_arrays(grad_arrays(batch), grad_arrays(g), 1.0);
        }
      }
      if (!std::isfinite(batch_loss))
        throw TrainingError("non-finite training loss", step);
      apply_sgd(params, grad_arrays(batch), momenta, cfg.lr_layers,
                cfg.momentum);
      ++step;
      if (step % cfg.ortho_period == 0)
        for (ExtractedLayer& l : net.layers) semi_orthogonal_step(l);
    }
  }
}

struct RetrainResult {
  ExtractedNetwork net;
  double val_loss = 0.0;
};

// Fresh seeded initialization, full training, held-out evaluation.
inline RetrainResult retrain_candidate(const CandidateArchitecture& cand,
                                       const SearchSpaceSpec& spec, int in_dim,
                                       int hidden_dim, int num_classes,
                                       const Dataset& train,
                                       const Dataset& heldout,
                                       const TrainConfig& cfg) {
  cfg.validate();
  Rng init_rng(cfg.seed, streams::kInit);
  RetrainResult res;
  res.net = make_network(spec, cand, in_dim, hidden_dim, num_classes, init_rng);
  Rng order_rng(cfg.seed, streams::kRetrain);
  train_network(res.net, train, cfg, order_rng);
  res.val_loss = evaluate(res.net, heldout).mean_loss;
  if (!std::isfinite(res.val_loss))
    throw TrainingError("non-finite validation loss", cfg.epochs);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpointing: a named-array container serialized as
//   "TDNF" | u32 version | u32 array count |
//   per array: u32 name length | name bytes | u32 value count | f64 values
// All integers little-endian. 64-bit integer state (rng words, step
// counters) is stored by bit pattern inside f64 slots so round-trips
// are exact.

struct Checkpoint {
  std::uint32_t version = 1;
  std::vector<std::pair<std::string, std::vector<double>>> arrays;

  void add(const std::string& name, std::vector<double> values) {
    for (const auto& [existing, _] : arrays)
      if (existing == name)
        throw ValueError("checkpoint: duplicate array " + name);
    arrays.emplace_back(name, std::move(values));
  }
  bool has(const std::string& name) const {
    for (const auto& [n, _] : arrays)
      if (n == name) return true;
    return false;
  }
  const std::vector<double>& get(const std::string& name) const {
    for (const auto& [n, v] : arrays)
      if (n == name) return v;
    throw FormatError("checkpoint: missing array " + name, 0);
  }
  double scalar(const std::string& name) const {
    const std::vector<double>& v = get(name);
    if (v.size() != 1)
      throw FormatError("checkpoint: array " + name + " is not a scalar", 0);
    return v[0];
  }
};

inline double bits_to_f64(std::uint64_t bits) {
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline std::uint64_t f64_to_bits(double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  return bits;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string buf;
  buf.append("TDNF", 4);
  detail::put_u32(buf, ckpt.version);
  detail::put_u32(buf, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& [name, values] : ckpt.arrays) {
    detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    detail::put_u32(buf, static_cast<std::uint32_t>(values.size()));
    for (double v : values) detail::put_f64(buf, v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("save_checkpoint: write failed on " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  detail::ByteReader r{buf};
  r.need(4, "magic");
  if (buf.compare(0, 4, "TDNF") != 0)
    throw FormatError("bad magic, expected TDNF", 0);
  r.pos = 4;
  Checkpoint ckpt;
  ckpt.version = r.u32("version");
  if (ckpt.version != 1)
    throw FormatError("unsupported version " + std::to_string(ckpt.version),
                      4);
  std::uint32_t count = r.u32("array count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = r.u32("name length");
    std::uint64_t at = r.pos;
    if (name_len > 4096) throw FormatError("implausible name length", at - 4);
    r.need(name_len, "name");
    std::string name = buf.substr(r.pos, name_len);
    r.pos += name_len;
    std::uint32_t values = r.u32("value count");
    std::vector<double> data(values);
    for (std::uint32_t j = 0; j < values; ++j) data[j] = r.f64("values");
    ckpt.arrays.emplace_back(std::move(name), std::move(data));
  }
  if (r.pos != buf.size())
    throw FormatError("trailing bytes after checkpoint payload", r.pos);
  return ckpt;
}

namespace detail {

inline std::vector<double> int_array(const std::vector<int>& v) {
  return std::vector<double>(v.begin(), v.end());
}

inline int as_int(double v, const char* what) {
  int i = static_cast<int>(v);
  if (static_cast<double>(i) != v)
    throw FormatError(std::string("checkpoint: ") + what +
                          " is not an integer",
                      0);
  return i;
}

}  // namespace detail

// Serializes the full training state of a supernet search: the search
// space, every parameter array, architecture weights, optimizer
// momenta, the step counter and the rng words.
inline Checkpoint supernet_to_checkpoint(
    const SuperNetwork& net, const std::vector<std::vector<double>>& momenta,
    long long step, const Rng& rng) {
  Checkpoint c;
  c.add("kind", {1.0});
  const SearchSpaceSpec& spec = net.spec;
  c.add("spec/shape",
        {double(spec.num_layers), double(spec.d_left), double(spec.d_right),
         spec.search_contexts ? 1.0 : 0.0, spec.search_dims ? 1.0 : 0.0});
  c.add("spec/dim_choices", detail::int_array(spec.dim_choices));
  std::vector<double> defaults;
  for (const LayerChoice& d : spec.defaults) {
    defaults.push_back(d.left);
    defaults.push_back(d.right);
    defaults.push_back(d.dim_index);
  }
  c.add("spec/defaults", defaults);
  c.add("net/shape",
        {double(net.in_dim), double(net.hidden_dim), double(net.num_classes)});
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const FactoredLayer& layer = net.layers[l];
    std::string base = "layer" + std::to_string(l) + "/";
    for (int cidx = 0; cidx <= layer.d_left; ++cidx)
      c.add(base + "linear" + std::to_string(cidx),
            layer.linear_blocks[cidx].data);
    for (int r = 0; r <= layer.d_right; ++r)
      c.add(base + "affine" + std::to_string(r), layer.affine_blocks[r].data);
    c.add(base + "bias", layer.bias);
  }
  c.add("classifier/w", net.classifier_w.data);
  c.add("classifier/b", net.classifier_b);
  for (int l = 0; l < spec.num_layers; ++l) {
    std::string base = "arch" + std::to_string(l) + "/";
    if (spec.search_contexts) {
      c.add(base + "left", net.arch.log_left[l]);
      c.add(base + "right", net.arch.log_right[l]);
    }
    if (spec.search_dims) c.add(base + "dim", net.arch.log_dim[l]);
  }
  for (std::size_t i = 0; i < momenta.size(); ++i)
    c.add("momenta/" + std::to_string(i), momenta[i]);
  c.add("train/step", {bits_to_f64(static_cast<std::uint64_t>(step))});
  c.add("train/rng", {bits_to_f64(rng.key()), bits_to_f64(rng.counter())});
  return c;
}

struct SupernetState {
  SuperNetwork net;
  std::vector<std::vector<double>> momenta;
  long long step = 0;
  Rng rng;
};

inline SupernetState supernet_from_checkpoint(const Checkpoint& c) {
  if (c.scalar("kind") != 1.0)
    throw FormatError("checkpoint does not hold a supernet search state", 0);
  const std::vector<double>& sh = c.get("spec/shape");
  if (sh.size() != 5) throw FormatError("checkpoint: bad spec/shape", 0);
  SearchSpaceSpec spec;
  spec.num_layers = detail::as_int(sh[0], "num_layers");
  spec.d_left = detail::as_int(sh[1], "d_left");
  spec.d_right = detail::as_int(sh[2], "d_right");
  spec.search_contexts = sh[3] != 0.0;
  spec.search_dims = sh[4] != 0.0;
  for (double v : c.get("spec/dim_choices"))
    spec.dim_choices.push_back(detail::as_int(v, "dim choice"));
  const std::vector<double>& defs = c.get("spec/defaults");
  if (defs.size() % 3 != 0) throw FormatError("checkpoint: bad defaults", 0);
  for (std::size_t i = 0; i < defs.size(); i += 3)
    spec.defaults.push_back(LayerChoice{detail::as_int(defs[i], "default"),
                                        detail::as_int(defs[i + 1], "default"),
                                        detail::as_int(defs[i + 2], "default")});
  spec.validate();
  const std::vector<double>& ns = c.get("net/shape");
  if (ns.size() != 3) throw FormatError("checkpoint: bad net/shape", 0);

  SupernetState state;
  Rng dummy(0, 0);
  state.net = make_supernet(spec, detail::as_int(ns[0], "in_dim"),
                            detail::as_int(ns[1], "hidden_dim"),
                            detail::as_int(ns[2], "num_classes"), dummy);
  SuperNetwork& net = state.net;
  auto fill = [&](const std::string& name, std::vector<double>& dst) {
    const std::vector<double>& src = c.get(name);
    if (src.size() != dst.size())
      throw FormatError("checkpoint: array " + name + " has wrong size", 0);
    dst = src;
  };
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    FactoredLayer& layer = net.layers[l];
    std::string base = "layer" + std::to_string(l) + "/";
    for (int cidx = 0; cidx <= layer.d_left; ++cidx)
      fill(base + "linear" + std::to_string(cidx),
           layer.linear_blocks[cidx].data);
    for (int r = 0; r <= layer.d_right; ++r)
      fill(base + "affine" + std::to_string(r), layer.affine_blocks[r].data);
    fill(base + "bias", layer.bias);
  }
  fill("classifier/w", net.classifier_w.data);
  fill("classifier/b", net.classifier_b);
  for (int l = 0; l < spec.num_layers; ++l) {
    std::string base = "arch" + std::to_string(l) + "/";
    if (spec.search_contexts) {
      fill(base + "left", net.arch.log_left[l]);
      fill(base + "right", net.arch.log_right[l]);
    }
    if (spec.search_dims) fill(base + "dim", net.arch.log_dim[l]);
  }
  for (std::size_t i = 0; c.has("momenta/" + std::to_string(i)); ++i)
    state.momenta.push_back(c.get("momenta/" + std::to_string(i)));
  state.step =
      static_cast<long long>(f64_to_bits(c.scalar("train/step")));
  const std::vector<double>& rw = c.get("train/rng");
  if (rw.size() != 2) throw FormatError("checkpoint: bad rng state", 0);
  state.rng = Rng::from_state(f64_to_bits(rw[0]), f64_to_bits(rw[1]));
  return state;
}

// Serializes a trained standalone network together with its held-out
// loss.
inline Checkpoint network_to_checkpoint(const ExtractedNetwork& net,
                                        double val_loss) {
  Checkpoint c;
  c.add("kind", {2.0});
  c.add("net/shape",
        {double(net.in_dim), double(net.hidden_dim), double(net.num_classes),
         double(net.layers.size())});
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const ExtractedLayer& layer = net.layers[l];
    std::string base = "xlayer" + std::to_string(l) + "/";
    c.add(base + "meta", {double(layer.in_dim), double(layer.out_dim),
                          double(layer.n), double(layer.left),
                          double(layer.right), layer.is_final ? 1.0 : 0.0});
    c.add(base + "b0", layer.b0.data);
    c.add(base + "bc", layer.bc.data);
    c.add(base + "a0", layer.a0.data);
    c.add(base + "ar", layer.ar.data);
    c.add(base + "bias", layer.bias);
  }
  c.add("classifier/w", net.classifier_w.data);
  c.add("classifier/b", net.classifier_b);
  c.add("eval/val_loss", {val_loss});
  return c;
}

struct NetworkState {
  ExtractedNetwork net;
  double val_loss = 0.0;
};

inline NetworkState network_from_checkpoint(const Checkpoint& c) {
  if (c.scalar("kind") != 2.0)
    throw FormatError("checkpoint does not hold a standalone network", 0);
  const std::vector<double>& ns = c.get("net/shape");
  if (ns.size() != 4) throw FormatError("checkpoint: bad net/shape", 0);
  NetworkState state;
  ExtractedNetwork& net = state.net;
  net.in_dim = detail::as_int(ns[0], "in_dim");
  net.hidden_dim = detail::as_int(ns[1], "hidden_dim");
  net.num_classes = detail::as_int(ns[2], "num_classes");
  int num_layers = detail::as_int(ns[3], "layer count");
  for (int l = 0; l < num_layers; ++l) {
    std::string base = "xlayer" + std::to_string(l) + "/";
    const std::vector<double>& meta = c.get(base + "meta");
    if (meta.size() != 6) throw FormatError("checkpoint: bad layer meta", 0);
    ExtractedLayer layer;
    layer.in_dim = detail::as_int(meta[0], "layer in_dim");
    layer.out_dim = detail::as_int(meta[1], "layer out_dim");
    layer.n = detail::as_int(meta[2], "layer n");
    layer.left = detail::as_int(meta[3], "layer left");
    layer.right = detail::as_int(meta[4], "layer right");
    layer.is_final = meta[5] != 0.0;
    auto load_mat = [&](const std::string& name, int rows, int cols) {
      const std::vector<double>& src = c.get(name);
      Matrix m(rows, cols);
      if (src.size() != m.data.size())
        throw FormatError("checkpoint: array " + name + " has wrong size", 0);
      m.data = src;
      return m;
    };
    layer.b0 = load_mat(base + "b0", layer.n, layer.in_dim);
    layer.bc = layer.left > 0 ? load_mat(base + "bc", layer.n, layer.in_dim)
                              : Matrix();
    layer.a0 = load_mat(base + "a0", layer.out_dim, layer.n);
    layer.ar = layer.right > 0 ? load_mat(base + "ar", layer.out_dim, layer.n)
                               : Matrix();
    layer.bias = c.get(base + "bias");
    if (static_cast<int>(layer.bias.size()) != layer.out_dim)
      throw FormatError("checkpoint: bad layer bias size", 0);
    net.layers.push_back(std::move(layer));
  }
  net.classifier_w = Matrix(net.num_classes, net.hidden_dim);
  const std::vector<double>& w = c.get("classifier/w");
  if (w.size() != net.classifier_w.data.size())
    throw FormatError("checkpoint: bad classifier size", 0);
  net.classifier_w.data = w;
  net.classifier_b = c.get("classifier/b");
  if (static_cast<int>(net.classifier_b.size()) != net.num_classes)
    throw FormatError("checkpoint: bad classifier bias size", 0);
  state.val_loss = c.scalar("eval/val_loss");
  return state;
}

}  // namespace tdnas
