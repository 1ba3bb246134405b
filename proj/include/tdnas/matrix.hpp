#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "tdnas/errors.hpp"

namespace tdnas {

// Dense row-major matrix of doubles.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c) {
    if (r < 0 || c < 0) throw ValueError("Matrix: negative dimension");
    data.assign(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill);
  }

  double& at(int r, int c) {
    return data[static_cast<std::size_t>(r) * cols + c];
  }
  double at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols + c];
  }

  const double* row(int r) const {
    return data.data() + static_cast<std::size_t>(r) * cols;
  }
  double* row(int r) {
    return data.data() + static_cast<std::size_t>(r) * cols;
  }

  bool empty() const { return rows == 0 || cols == 0; }

  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
};

// A sequence of feature frames: `frames` rows of dimension `dim`.
// Same layout as Matrix but kept a distinct type because frame count
// and feature dimension play different roles everywhere they appear.
struct SeqTensor {
  int frames = 0;
  int dim = 0;
  std::vector<double> data;

  SeqTensor() = default;
  SeqTensor(int t, int d, double fill = 0.0) : frames(t), dim(d) {
    if (t < 0 || d < 0) throw ValueError("SeqTensor: negative dimension");
    data.assign(static_cast<std::size_t>(t) * static_cast<std::size_t>(d), fill);
  }

  double& at(int t, int d) {
    return data[static_cast<std::size_t>(t) * dim + d];
  }
  double at(int t, int d) const {
    return data[static_cast<std::size_t>(t) * dim + d];
  }

  const double* frame(int t) const {
    return data.data() + static_cast<std::size_t>(t) * dim;
  }
  double* frame(int t) {
    return data.data() + static_cast<std::size_t>(t) * dim;
  }

  std::string shape_str() const {
    return std::to_string(frames) + "x" + std::to_string(dim);
  }
};

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline void require_finite(const std::vector<double>& v, const char* what) {
  if (!all_finite(v)) throw ValueError(std::string(what) + ": non-finite entry");
}

// Plain triple-loop product. Throws ShapeError naming both shapes on a
// mismatch and ValueError if either operand has a non-finite entry.
inline Matrix mat_mul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows)
    throw ShapeError("mat_mul: inner dimensions disagree, " + a.shape_str() +
                     " times " + b.shape_str());
  require_finite(a.data, "mat_mul lhs");
  require_finite(b.data, "mat_mul rhs");
  Matrix out(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    for (int k = 0; k < a.cols; ++k) {
      double aik = a.at(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.row(k);
      double* orow = out.row(i);
      for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

inline SeqTensor relu(const SeqTensor& x) {
  SeqTensor out = x;
  for (double& v : out.data)
    if (v < 0.0) v = 0.0;
  return out;
}

// Softmax with max subtraction. Preserves the argmax and keeps every
// intermediate exp() in range for finite inputs.
inline std::vector<double> stable_softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw ValueError("stable_softmax: empty input");
  require_finite(logits, "stable_softmax");
  double m = logits[0];
  for (double v : logits)
    if (v > m) m = v;
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

}  // namespace tdnas
