#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tdnas/errors.hpp"
#include "tdnas/matrix.hpp"

namespace tdnas {

// One concrete hyperparameter choice for a layer: splice c frames to
// the left (context {-c, 0}), r frames to the right (context {0, +r}),
// and use bottleneck width dims[dim_index].
struct LayerChoice {
  int left = 0;
  int right = 0;
  int dim_index = 0;

  bool operator==(const LayerChoice&) const = default;
};

// Factored layer holding one linear block per left offset and one
// affine block per right offset. Block B_c (n_max x in_dim) consumes
// the frame c steps back; block A_r (out_dim x n_max) consumes the
// bottleneck vector r steps ahead. All candidate sub-layers share
// these blocks; narrower bottlenecks use a prefix of the n_max rows.
struct FactoredLayer {
  int in_dim = 0;
  int out_dim = 0;
  int n_max = 0;
  int d_left = 0;
  int d_right = 0;
  std::vector<Matrix> linear_blocks;  // d_left + 1 blocks of n_max x in_dim
  std::vector<Matrix> affine_blocks;  // d_right + 1 blocks of out_dim x n_max
  std::vector<double> bias;           // out_dim
  bool is_final = false;              // final layers skip the ReLU

  static FactoredLayer make(int in_dim, int out_dim, int n_max, int d_left,
                            int d_right, bool is_final = false) {
    if (in_dim <= 0 || out_dim <= 0 || n_max <= 0)
      throw ValueError("FactoredLayer: dimensions must be positive");
    if (d_left < 0 || d_right < 0)
      throw ValueError("FactoredLayer: offset ranges must be non-negative");
    FactoredLayer l;
    l.in_dim = in_dim;
    l.out_dim = out_dim;
    l.n_max = n_max;
    l.d_left = d_left;
    l.d_right = d_right;
    l.linear_blocks.assign(d_left + 1, Matrix(n_max, in_dim));
    l.affine_blocks.assign(d_right + 1, Matrix(out_dim, n_max));
    l.bias.assign(out_dim, 0.0);
    l.is_final = is_final;
    return l;
  }
};

namespace detail {

inline double dot(const double* a, const double* b, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

inline int clamp_frame(int t, int frames) {
  if (t < 0) return 0;
  if (t >= frames) return frames - 1;
  return t;
}

}  // namespace detail

// Shifts a sequence by `offset` frames with edge replication: output
// frame t is input frame clamp(t + offset, 0, T-1).
inline SeqTensor splice(const SeqTensor& x, int offset) {
  SeqTensor out(x.frames, x.dim);
  for (int t = 0; t < x.frames; ++t) {
    const double* src = x.frame(detail::clamp_frame(t + offset, x.frames));
    double* dst = out.frame(t);
    for (int d = 0; d < x.dim; ++d) dst[d] = src[d];
  }
  return out;
}

inline void validate_choice(const FactoredLayer& layer, const LayerChoice& c,
                            const std::vector<int>& dims) {
  if (c.left < 0 || c.left > layer.d_left)
    throw ValueError("layer choice: left offset " + std::to_string(c.left) +
                     " outside [0, " + std::to_string(layer.d_left) + "]");
  if (c.right < 0 || c.right > layer.d_right)
    throw ValueError("layer choice: right offset " + std::to_string(c.right) +
                     " outside [0, " + std::to_string(layer.d_right) + "]");
  if (c.dim_index < 0 || c.dim_index >= static_cast<int>(dims.size()))
    throw ValueError("layer choice: dim index " + std::to_string(c.dim_index) +
                     " outside the choice list");
  if (dims[c.dim_index] > layer.n_max)
    throw ValueError("layer choice: bottleneck " +
                     std::to_string(dims[c.dim_index]) + " exceeds n_max " +
                     std::to_string(layer.n_max));
}

// Runs one candidate sub-layer: only B_0, B_c, A_0, A_r and the first
// n_i bottleneck rows participate.
inline SeqTensor layer_forward_onehot(const FactoredLayer& layer,
                                      const LayerChoice& choice,
                                      const std::vector<int>& dims,
                                      const SeqTensor& input) {
  validate_choice(layer, choice, dims);
  if (input.dim != layer.in_dim)
    throw ShapeError("layer forward: input dim " + input.shape_str() +
                     " does not match layer in_dim " +
                     std::to_string(layer.in_dim));
  const int T = input.frames;
  const int n = dims[choice.dim_index];
  const Matrix& b0 = layer.linear_blocks[0];
  const Matrix* bc = choice.left > 0 ? &layer.linear_blocks[choice.left] : nullptr;
  SeqTensor z(T, n);
  for (int t = 0; t < T; ++t) {
    const double* x0 = input.frame(t);
    const double* xc =
        bc ? input.frame(detail::clamp_frame(t - choice.left, T)) : nullptr;
    double* zt = z.frame(t);
    for (int k = 0; k < n; ++k) {
      double acc = detail::dot(b0.row(k), x0, layer.in_dim);
      if (bc) acc += detail::dot(bc->row(k), xc, layer.in_dim);
      zt[k] = acc;
    }
  }
  const Matrix& a0 = layer.affine_blocks[0];
  const Matrix* ar =
      choice.right > 0 ? &layer.affine_blocks[choice.right] : nullptr;
  SeqTensor y(T, layer.out_dim);
  for (int t = 0; t < T; ++t) {
    const double* z0 = z.frame(t);
    const double* zr =
        ar ? z.frame(detail::clamp_frame(t + choice.right, T)) : nullptr;
    double* yt = y.frame(t);
    for (int d = 0; d < layer.out_dim; ++d) {
      double acc = detail::dot(a0.row(d), z0, n);
      if (ar) acc += detail::dot(ar->row(d), zr, n);
      yt[d] = acc + layer.bias[d];
    }
  }
  return layer.is_final ? y : relu(y);
}

// Scalar parameter count of one candidate sub-layer:
//   n_i * D_in * (1 + [c > 0]) + D_out * n_i * (1 + [r > 0]) + D_out.
inline long long candidate_param_count(const FactoredLayer& layer,
                                       const LayerChoice& choice,
                                       const std::vector<int>& dims) {
  validate_choice(layer, choice, dims);
  long long n = dims[choice.dim_index];
  long long lin = n * layer.in_dim * (choice.left > 0 ? 2 : 1);
  long long aff = static_cast<long long>(layer.out_dim) * n *
                  (choice.right > 0 ? 2 : 1);
  return lin + aff + layer.out_dim;
}

// A candidate sub-layer copied out into standalone parameters. bc/ar
// are empty when the corresponding offset is zero.
struct ExtractedLayer {
  int in_dim = 0;
  int out_dim = 0;
  int n = 0;
  int left = 0;
  int right = 0;
  Matrix b0, bc;  // n x in_dim
  Matrix a0, ar;  // out_dim x n
  std::vector<double> bias;
  bool is_final = false;

  long long param_count() const {
    long long count = static_cast<long long>(b0.rows) * b0.cols +
                      static_cast<long long>(bc.rows) * bc.cols +
                      static_cast<long long>(a0.rows) * a0.cols +
                      static_cast<long long>(ar.rows) * ar.cols;
    return count + static_cast<long long>(bias.size());
  }
};

// Intermediates of one extracted-layer forward, kept for backward.
struct ExtractedLayerTrace {
  SeqTensor input;
  SeqTensor z;  // bottleneck activations
  SeqTensor y;  // pre-activation output
};

struct ExtractedLayerGrads {
  Matrix b0, bc, a0, ar;
  std::vector<double> bias;
};

inline SeqTensor extracted_layer_forward(const ExtractedLayer& layer,
                                         const SeqTensor& input,
                                         ExtractedLayerTrace* trace = nullptr) {
  if (input.dim != layer.in_dim)
    throw ShapeError("extracted forward: input " + input.shape_str() +
                     " does not match in_dim " + std::to_string(layer.in_dim));
  const int T = input.frames;
  SeqTensor z(T, layer.n);
  for (int t = 0; t < T; ++t) {
    const double* x0 = input.frame(t);
    const double* xc = layer.left > 0
                           ? input.frame(detail::clamp_frame(t - layer.left, T))
                           : nullptr;
    double* zt = z.frame(t);
    for (int k = 0; k < layer.n; ++k) {
      double acc = detail::dot(layer.b0.row(k), x0, layer.in_dim);
      if (xc) acc += detail::dot(layer.bc.row(k), xc, layer.in_dim);
      zt[k] = acc;
    }
  }
  SeqTensor y(T, layer.out_dim);
  for (int t = 0; t < T; ++t) {
    const double* z0 = z.frame(t);
    const double* zr = layer.right > 0
                           ? z.frame(detail::clamp_frame(t + layer.right, T))
                           : nullptr;
    double* yt = y.frame(t);
    for (int d = 0; d < layer.out_dim; ++d) {
      double acc = detail::dot(layer.a0.row(d), z0, layer.n);
      if (zr) acc += detail::dot(layer.ar.row(d), zr, layer.n);
      yt[d] = acc + layer.bias[d];
    }
  }
  if (trace) {
    trace->input = input;
    trace->z = z;
    trace->y = y;
  }
  return layer.is_final ? y : relu(y);
}

// Backward through one extracted layer. `doutput` is the gradient at
// the layer output (after ReLU unless final). Returns the gradient at
// the layer input and fills `grads`.
inline SeqTensor extracted_layer_backward(const ExtractedLayer& layer,
                                          const ExtractedLayerTrace& trace,
                                          const SeqTensor& doutput,
                                          ExtractedLayerGrads& grads) {
  if (trace.y.frames != doutput.frames || trace.y.dim != doutput.dim)
    throw StateError("extracted backward: trace does not match gradient " +
                     doutput.shape_str());
  const int T = doutput.frames;
  SeqTensor dy = doutput;
  if (!layer.is_final) {
    for (int t = 0; t < T; ++t)
      for (int d = 0; d < layer.out_dim; ++d)
        if (trace.y.at(t, d) <= 0.0) dy.at(t, d) = 0.0;
  }
  grads.b0 = Matrix(layer.b0.rows, layer.b0.cols);
  grads.bc = Matrix(layer.bc.rows, layer.bc.cols);
  grads.a0 = Matrix(layer.a0.rows, layer.a0.cols);
  grads.ar = Matrix(layer.ar.rows, layer.ar.cols);
  grads.bias.assign(layer.out_dim, 0.0);

  SeqTensor dz(T, layer.n);
  for (int t = 0; t < T; ++t) {
    const double* dyt = dy.frame(t);
    for (int d = 0; d < layer.out_dim; ++d) grads.bias[d] += dyt[d];
    // A_0 consumes z_t directly.
    const double* z0 = trace.z.frame(t);
    for (int d = 0; d < layer.out_dim; ++d) {
      double g = dyt[d];
      if (g == 0.0) continue;
      double* ga = grads.a0.row(d);
      const double* a = layer.a0.row(d);
      double* dzt = dz.frame(t);
      for (int k = 0; k < layer.n; ++k) {
        ga[k] += g * z0[k];
        dzt[k] += g * a[k];
      }
    }
    if (layer.right > 0) {
      int ts = detail::clamp_frame(t + layer.right, T);
      const double* zr = trace.z.frame(ts);
      double* dzs = dz.frame(ts);
      for (int d = 0; d < layer.out_dim; ++d) {
        double g = dyt[d];
        if (g == 0.0) continue;
        double* ga = grads.ar.row(d);
        const double* a = layer.ar.row(d);
        for (int k = 0; k < layer.n; ++k) {
          ga[k] += g * zr[k];
          dzs[k] += g * a[k];
        }
      }
    }
  }

  SeqTensor dinput(T, layer.in_dim);
  for (int t = 0; t < T; ++t) {
    const double* dzt = dz.frame(t);
    const double* x0 = trace.input.frame(t);
    int tc = detail::clamp_frame(t - layer.left, T);
    const double* xc = layer.left > 0 ? trace.input.frame(tc) : nullptr;
    double* di0 = dinput.frame(t);
    double* dic = layer.left > 0 ? dinput.frame(tc) : nullptr;
    for (int k = 0; k < layer.n; ++k) {
      double g = dzt[k];
      if (g == 0.0) continue;
      double* gb = grads.b0.row(k);
      const double* b = layer.b0.row(k);
      for (int j = 0; j < layer.in_dim; ++j) {
        gb[j] += g * x0[j];
        di0[j] += g * b[j];
      }
      if (xc) {
        double* gbc = grads.bc.row(k);
        const double* bc = layer.bc.row(k);
        for (int j = 0; j < layer.in_dim; ++j) {
          gbc[j] += g * xc[j];
          dic[j] += g * bc[j];
        }
      }
    }
  }
  return dinput;
}

// Copies the candidate sub-layer (first n bottleneck rows, the two
// context blocks per stage) out of the shared layer.
inline ExtractedLayer extract_layer(const FactoredLayer& layer,
                                    const LayerChoice& choice,
                                    const std::vector<int>& dims) {
  validate_choice(layer, choice, dims);
  ExtractedLayer out;
  out.in_dim = layer.in_dim;
  out.out_dim = layer.out_dim;
  out.n = dims[choice.dim_index];
  out.left = choice.left;
  out.right = choice.right;
  out.is_final = layer.is_final;
  auto top_rows = [&](const Matrix& m) {
    Matrix r(out.n, m.cols);
    for (int i = 0; i < out.n; ++i)
      for (int j = 0; j < m.cols; ++j) r.at(i, j) = m.at(i, j);
    return r;
  };
  auto left_cols = [&](const Matrix& m) {
    Matrix r(m.rows, out.n);
    for (int i = 0; i < m.rows; ++i)
      for (int j = 0; j < out.n; ++j) r.at(i, j) = m.at(i, j);
    return r;
  };
  out.b0 = top_rows(layer.linear_blocks[0]);
  if (choice.left > 0) out.bc = top_rows(layer.linear_blocks[choice.left]);
  out.a0 = left_cols(layer.affine_blocks[0]);
  if (choice.right > 0) out.ar = left_cols(layer.affine_blocks[choice.right]);
  out.bias = layer.bias;
  return out;
}

namespace detail {

// P = M M^T for the horizontal concatenation M of the given blocks.
// All blocks must share a row count.
inline Matrix gram_of_concat(const std::vector<const Matrix*>& blocks) {
  if (blocks.empty()) throw ValueError("semi-orthogonal: no blocks");
  int n = blocks[0]->rows;
  for (const Matrix* b : blocks)
    if (b->rows != n)
      throw ShapeError("semi-orthogonal: blocks disagree on rows, " +
                       blocks[0]->shape_str() + " vs " + b->shape_str());
  Matrix p(n, n);
  for (const Matrix* b : blocks)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        p.at(i, j) += dot(b->row(i), b->row(j), b->cols);
  return p;
}

inline double gram_scale(const Matrix& p) {
  double tr = 0.0, tr2 = 0.0;
  for (int i = 0; i < p.rows; ++i) {
    tr += p.at(i, i);
    tr2 += dot(p.row(i), p.row(i), p.cols);
  }
  if (tr == 0.0)
    throw DegenerateParameterError(
        "semi-orthogonal: gram matrix has zero trace");
  return tr2 / tr;
}

}  // namespace detail

// Frobenius distance of M M^T from alpha I at the self-chosen scale
// alpha = tr(P^2) / tr(P).
inline double semi_orthogonality_residual(
    const std::vector<const Matrix*>& blocks) {
  Matrix p = detail::gram_of_concat(blocks);
  double alpha = detail::gram_scale(p);
  double sq = 0.0;
  for (int i = 0; i < p.rows; ++i)
    for (int j = 0; j < p.cols; ++j) {
      double e = p.at(i, j) - (i == j ? alpha : 0.0);
      sq += e * e;
    }
  return std::sqrt(sq);
}

// One floating-scale constraint step on the concatenation M of the
// blocks: with P = M M^T and alpha = tr(P^2)/tr(P),
//   M <- M - (1 / (2 alpha)) (P - alpha I) M.
// Iterating drives M M^T toward alpha I without pinning the scale.
inline void semi_orthogonal_step(const std::vector<Matrix*>& blocks) {
  std::vector<const Matrix*> view(blocks.begin(), blocks.end());
  Matrix p = detail::gram_of_concat(view);
  double alpha = detail::gram_scale(p);
  int n = p.rows;
  // E = (1 / (2 alpha)) (P - alpha I)
  Matrix e(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      e.at(i, j) = (p.at(i, j) - (i == j ? alpha : 0.0)) / (2.0 * alpha);
  for (Matrix* b : blocks) {
    Matrix upd = mat_mul(e, *b);
    for (std::size_t i = 0; i < b->data.size(); ++i) b->data[i] -= upd.data[i];
  }
}

// Applies the constraint step to a shared layer's linear stage.
inline void semi_orthogonal_step(FactoredLayer& layer) {
  std::vector<Matrix*> blocks;
  for (Matrix& b : layer.linear_blocks) blocks.push_back(&b);
  semi_orthogonal_step(blocks);
}

// Applies the constraint step to an extracted layer's linear stage.
inline void semi_orthogonal_step(ExtractedLayer& layer) {
  std::vector<Matrix*> blocks{&layer.b0};
  if (layer.left > 0) blocks.push_back(&layer.bc);
  semi_orthogonal_step(blocks);
}

inline double semi_orthogonality_residual(const FactoredLayer& layer) {
  std::vector<const Matrix*> blocks;
  for (const Matrix& b : layer.linear_blocks) blocks.push_back(&b);
  return semi_orthogonality_residual(blocks);
}

inline double semi_orthogonality_residual(const ExtractedLayer& layer) {
  std::vector<const Matrix*> blocks{&layer.b0};
  if (layer.left > 0) blocks.push_back(&layer.bc);
  return semi_orthogonality_residual(blocks);
}

}  // namespace tdnas
