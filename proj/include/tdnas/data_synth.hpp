#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tdnas/errors.hpp"
#include "tdnas/matrix.hpp"
#include "tdnas/rng.hpp"
#include "tdnas/tdnnf_layer.hpp"

namespace tdnas {

enum class TaskKind { planted_context, planted_rank };

// Recipe for a synthetic sequence-classification task whose optimal
// architecture is known by construction.
struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::planted_context;
  int num_sequences = 100;
  int frames = 20;
  int feature_dim = 8;
  int num_classes = 4;
  int planted_left = 2;    // context task: label needs frame t - k_L
  int planted_right = 3;   // context task: label needs frame t + k_R
  int planted_rank = 2;    // rank task: rank of the frozen label map
  double noise_sigma = 0.1;  // rank task: logit noise
  std::uint64_t seed = 1;

  void validate() const {
    if (num_sequences < 1 || frames < 1 || feature_dim < 1)
      throw ValueError("task spec: sizes must be positive");
    if (num_classes < 2) throw ValueError("task spec: need at least 2 classes");
    if (planted_left < 0 || planted_right < 0)
      throw ValueError("task spec: planted offsets must be non-negative");
    if (planted_rank < 1 || planted_rank > feature_dim)
      throw ValueError("task spec: planted rank must lie in [1, D]");
    if (noise_sigma < 0.0) throw ValueError("task spec: negative noise sigma");
  }
};

struct Sequence {
  SeqTensor features;
  std::vector<int> labels;
};

struct Dataset {
  std::vector<Sequence> items;
  int num_classes = 0;

  int frames() const { return items.empty() ? 0 : items[0].features.frames; }
  int feature_dim() const { return items.empty() ? 0 : items[0].features.dim; }
};

// Generator internals exposed for verification: the frozen maps the
// labels were derived from.
struct ContextTaskGround {
  Matrix projection;  // K x 2D, applied to [x_{t-kL}; x_{t+kR}]
};

struct RankTaskGround {
  Matrix u;  // K x r
  Matrix v;  // r x D
};

namespace detail {

inline int argmax_row(const double* v, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace detail

// Labels are the argmax of a fixed random projection of the frames at
// the planted offsets. Features are i.i.d. standard normal, so no
// other frame carries any information about the label: a model can
// only fit this task by splicing exactly (-k_L, +k_R).
inline Dataset gen_context_task(const SyntheticTaskSpec& spec, Rng& rng,
                                ContextTaskGround* ground = nullptr) {
  spec.validate();
  const int D = spec.feature_dim;
  const int K = spec.num_classes;
  Matrix proj(K, 2 * D);
  double scale = 1.0 / std::sqrt(2.0 * D);
  for (double& v : proj.data) v = scale * rng.draw_normal();
  Dataset out;
  out.num_classes = K;
  std::vector<double> logits(K);
  for (int s = 0; s < spec.num_sequences; ++s) {
    Sequence seq;
    seq.features = SeqTensor(spec.frames, D);
    for (double& v : seq.features.data) v = rng.draw_normal();
    seq.labels.resize(spec.frames);
    for (int t = 0; t < spec.frames; ++t) {
      const double* xl = seq.features.frame(
          detail::clamp_frame(t - spec.planted_left, spec.frames));
      const double* xr = seq.features.frame(
          detail::clamp_frame(t + spec.planted_right, spec.frames));
      for (int k = 0; k < K; ++k) {
        const double* p = proj.row(k);
        double acc = 0.0;
        for (int j = 0; j < D; ++j) acc += p[j] * xl[j];
        for (int j = 0; j < D; ++j) acc += p[D + j] * xr[j];
        logits[k] = acc;
      }
      seq.labels[t] = detail::argmax_row(logits.data(), K);
    }
    out.items.push_back(std::move(seq));
  }
  if (ground) ground->projection = proj;
  return out;
}

// Labels are the argmax of a frozen rank-r linear map of the current
// frame plus Gaussian logit noise. Any bottleneck of width >= r can
// represent the map; narrower ones cannot.
inline Dataset gen_rank_task(const SyntheticTaskSpec& spec, Rng& rng,
                             RankTaskGround* ground = nullptr) {
  spec.validate();
  const int D = spec.feature_dim;
  const int K = spec.num_classes;
  const int r = spec.planted_rank;
  Matrix u(K, r), v(r, D);
  double us = 1.0 / std::sqrt(static_cast<double>(r));
  double vs = 1.0 / std::sqrt(static_cast<double>(D));
  for (double& x : u.data) x = us * rng.draw_normal();
  for (double& x : v.data) x = vs * rng.draw_normal();
  Dataset out;
  out.num_classes = K;
  std::vector<double> proj(r), logits(K);
  for (int s = 0; s < spec.num_sequences; ++s) {
    Sequence seq;
    seq.features = SeqTensor(spec.frames, D);
    for (double& x : seq.features.data) x = rng.draw_normal();
    seq.labels.resize(spec.frames);
    for (int t = 0; t < spec.frames; ++t) {
      const double* xt = seq.features.frame(t);
      for (int i = 0; i < r; ++i) proj[i] = detail::dot(v.row(i), xt, D);
      for (int k = 0; k < K; ++k)
        logits[k] = detail::dot(u.row(k), proj.data(), r) +
                    spec.noise_sigma * rng.draw_normal();
      seq.labels[t] = detail::argmax_row(logits.data(), K);
    }
    out.items.push_back(std::move(seq));
  }
  if (ground) {
    ground->u = u;
    ground->v = v;
  }
  return out;
}

// Uniform random partition by sequence. The held-out part receives
// round(fraction * N) sequences; both parts keep the original order.
inline std::pair<Dataset, Dataset> split_heldout(const Dataset& d,
                                                 double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ValueError("split_heldout: fraction must lie in (0, 1)");
  const int n = static_cast<int>(d.items.size());
  const int k = static_cast<int>(std::llround(fraction * n));
  if (k < 1 || k >= n)
    throw ValueError("split_heldout: fraction " + std::to_string(fraction) +
                     " of " + std::to_string(n) +
                     " sequences would leave a part empty");
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  for (int i = 0; i < n - 1; ++i) {
    int j = i + static_cast<int>(rng.next_below(n - i));
    std::swap(idx[i], idx[j]);
  }
  std::vector<bool> held(n, false);
  for (int i = 0; i < k; ++i) held[idx[i]] = true;
  Dataset train, heldout;
  train.num_classes = heldout.num_classes = d.num_classes;
  for (int i = 0; i < n; ++i)
    (held[i] ? heldout : train).items.push_back(d.items[i]);
  return {std::move(train), std::move(heldout)};
}

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  char b[4];
  b[0] = static_cast<char>(v & 0xFF);
  b[1] = static_cast<char>((v >> 8) & 0xFF);
  b[2] = static_cast<char>((v >> 16) & 0xFF);
  b[3] = static_cast<char>((v >> 24) & 0xFF);
  buf.append(b, 4);
}

inline void put_f64(std::string& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  buf.append(b, 8);
}

// Cursor over an in-memory file image; throws FormatError carrying the
// byte offset at which decoding failed.
struct ByteReader {
  const std::string& buf;
  std::uint64_t pos = 0;

  void need(std::uint64_t n, const char* what) {
    if (pos + n > buf.size())
      throw FormatError(std::string("truncated while reading ") + what, pos);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | static_cast<unsigned char>(buf[pos + i]);
    pos += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i)
      bits = (bits << 8) | static_cast<unsigned char>(buf[pos + i]);
    pos += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
};

}  // namespace detail

inline void save_dataset(const Dataset& d, const std::string& path) {
  if (d.items.empty()) throw ValueError("save_dataset: empty dataset");
  if (d.num_classes < 1) throw ValueError("save_dataset: num_classes unset");
  const int T = d.frames();
  const int D = d.feature_dim();
  for (const Sequence& s : d.items) {
    if (s.features.frames != T || s.features.dim != D ||
        static_cast<int>(s.labels.size()) != T)
      throw ValueError("save_dataset: sequences disagree on shape");
    for (int label : s.labels)
      if (label < 0 || label >= d.num_classes)
        throw ValueError("save_dataset: label out of range");
  }
  std::string buf;
  buf.reserve(24 + d.items.size() * (static_cast<std::size_t>(T) * D * 8 + T * 4));
  buf.append("SYND", 4);
  detail::put_u32(buf, 1);  // version
  detail::put_u32(buf, static_cast<std::uint32_t>(d.items.size()));
  detail::put_u32(buf, static_cast<std::uint32_t>(T));
  detail::put_u32(buf, static_cast<std::uint32_t>(D));
  detail::put_u32(buf, static_cast<std::uint32_t>(d.num_classes));
  for (const Sequence& s : d.items) {
    for (double v : s.features.data) detail::put_f64(buf, v);
    for (int label : s.labels)
      detail::put_u32(buf, static_cast<std::uint32_t>(label));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("save_dataset: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("save_dataset: write failed on " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_dataset: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  detail::ByteReader r{buf};
  r.need(4, "magic");
  if (buf.compare(0, 4, "SYND") != 0)
    throw FormatError("bad magic, expected SYND", 0);
  r.pos = 4;
  std::uint32_t version = r.u32("version");
  if (version != 1)
    throw FormatError("unsupported version " + std::to_string(version), 4);
  std::uint64_t count_pos = r.pos;
  std::uint32_t num_seq = r.u32("sequence count");
  std::uint32_t T = r.u32("frame count");
  std::uint32_t D = r.u32("feature dim");
  std::uint32_t K = r.u32("class count");
  if (num_seq == 0 || T == 0 || D == 0 || K == 0)
    throw FormatError("zero-sized dataset header field", count_pos);
  // 1 GiB of payload is far beyond any desk-scale dataset; treat
  // larger headers as corruption rather than attempting the allocation.
  std::uint64_t payload =
      static_cast<std::uint64_t>(num_seq) * (static_cast<std::uint64_t>(T) * D * 8 + static_cast<std::uint64_t>(T) * 4);
  if (payload > (1ull << 30))
    throw FormatError("header describes an implausibly large dataset",
                      count_pos);
  Dataset d;
  d.num_classes = static_cast<int>(K);
  for (std::uint32_t s = 0; s < num_seq; ++s) {
    Sequence seq;
    seq.features = SeqTensor(static_cast<int>(T), static_cast<int>(D));
    for (double& v : seq.features.data) {
      std::uint64_t at = r.pos;
      v = r.f64("features");
      if (!std::isfinite(v)) throw FormatError("non-finite feature", at);
    }
    seq.labels.resize(T);
    for (std::uint32_t t = 0; t < T; ++t) {
      std::uint64_t at = r.pos;
      std::uint32_t label = r.u32("label");
      if (label >= K) throw FormatError("label out of range", at);
      seq.labels[t] = static_cast<int>(label);
    }
    d.items.push_back(std::move(seq));
  }
  if (r.pos != buf.size())
    throw FormatError("trailing bytes after dataset payload", r.pos);
  return d;
}

}  // namespace tdnas
