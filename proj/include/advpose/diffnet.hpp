// Minimal deterministic differentiable-network engine.
//
// A Tape records batched operations (every node value is a B x features
// matrix, 64-bit) and differentiates them in reverse creation order.  Network
// parameters are named Tensors owned by the models; affine nodes accumulate
// into their grad buffers directly.  On top of the tape: dense networks,
// binary cross entropy, Adam, finite-difference gradient checking, and a named
// -record binary checkpoint format.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "advpose/core.hpp"
#include "advpose/skeleton.hpp"

namespace advpose {

// ------ tensors ------

struct Tensor {
  std::string name;
  Mat value;
  Mat grad;
  int rank = 2;  // 1 for bias vectors (stored as 1 x n), 2 for weight matrices

  Tensor() = default;
  Tensor(std::string n, Mat v, int r = 2)
      : name(std::move(n)), value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())),
        rank(r) {}
  long size() const { return value.size(); }
};

inline constexpr double kBceEps = 1e-7;

// Plain scalar form of the clamped binary cross entropy.
inline double bce(double y_hat, double y) {
  double c = std::min(std::max(y_hat, kBceEps), 1.0 - kBceEps);
  return -(y * std::log(c) + (1.0 - y) * std::log(1.0 - c));
}

// ------ tape ------

enum class Reduce { Sum, Mean };

struct Tape {
  enum class Op {
    Leaf,
    Affine,
    Relu,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    ScaleInterleaved,
    ConcatCols,
    SliceCols,
    SoftArgmax,
    ScaleMapsByDepths,
    Compose3D,
    PairDescriptor,
    Sse,
    SseRows,
    Bce,
  };

  struct Node {
    Op op;
    Mat val, grad;
    int a = -1, b = -1;
    std::vector<int> srcs;    // ConcatCols
    Tensor* w = nullptr;      // Affine
    Tensor* bias = nullptr;   // Affine
    double c0 = 0.0, c1 = 0.0;
    int p = 0, h = 0, wd = 0;  // map dims / slice start+len
    Mat aux;                   // Bce targets, SseRows mask, Compose3D intrinsics
    Reduce reduce = Reduce::Sum;
  };

  std::vector<Node> nodes;

  const Mat& val(int i) const { return nodes[i].val; }
  const Mat& grad(int i) const { return nodes[i].grad; }

  int push(Node n) {
    if (!n.val.allFinite()) throw NonFiniteValue("tape node " + std::to_string(nodes.size()));
    n.grad = Mat::Zero(n.val.rows(), n.val.cols());
    nodes.push_back(std::move(n));
    return static_cast<int>(nodes.size()) - 1;
  }

  int leaf(Mat v) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(v);
    return push(std::move(n));
  }

  // y = x * W^T + b, with W out x in and b 1 x out.
  int affine(int x, Tensor& w, Tensor& b) {
    if (val(x).cols() != w.value.cols())
      throw ShapeMismatch("affine: input width " + std::to_string(val(x).cols()) + " vs " +
                          std::to_string(w.value.cols()) + " (" + w.name + ")");
    Node n;
    n.op = Op::Affine;
    n.a = x;
    n.w = &w;
    n.bias = &b;
    n.val = (val(x) * w.value.transpose()).rowwise() + b.value.row(0);
    return push(std::move(n));
  }

  int relu(int x) {
    Node n;
    n.op = Op::Relu;
    n.a = x;
    n.val = val(x).cwiseMax(0.0);
    return push(std::move(n));
  }

  int sigmoid(int x) {
    Node n;
    n.op = Op::Sigmoid;
    n.a = x;
    n.val = val(x).unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    return push(std::move(n));
  }

  int add(int x, int y) { return binary(Op::Add, x, y, val(x) + val(y)); }
  int sub(int x, int y) { return binary(Op::Sub, x, y, val(x) - val(y)); }
  int mul(int x, int y) { return binary(Op::Mul, x, y, val(x).cwiseProduct(val(y))); }

  int scale(int x, double c) {
    Node n;
    n.op = Op::Scale;
    n.a = x;
    n.c0 = c;
    n.val = c * val(x);
    return push(std::move(n));
  }

  int add_scalar(int x, double c) {
    Node n;
    n.op = Op::AddScalar;
    n.a = x;
    n.c0 = c;
    n.val = val(x).array() + c;
    return push(std::move(n));
  }

  // Even columns scaled by sx, odd columns by sy (interleaved 2D coordinates).
  int scale_interleaved(int x, double sx, double sy) {
    Node n;
    n.op = Op::ScaleInterleaved;
    n.a = x;
    n.c0 = sx;
    n.c1 = sy;
    n.val = val(x);
    for (int c = 0; c < n.val.cols(); c++) n.val.col(c) *= (c % 2 == 0 ? sx : sy);
    return push(std::move(n));
  }

  int concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat of nothing");
    long rows = val(parts[0]).rows(), cols = 0;
    for (int s : parts) {
      if (val(s).rows() != rows) throw ShapeMismatch("concat: row mismatch");
      cols += val(s).cols();
    }
    Node n;
    n.op = Op::ConcatCols;
    n.srcs = parts;
    n.val = Mat(rows, cols);
    long at = 0;
    for (int s : parts) {
      n.val.middleCols(at, val(s).cols()) = val(s);
      at += val(s).cols();
    }
    return push(std::move(n));
  }

  int slice_cols(int x, int start, int len) {
    if (start < 0 || start + len > val(x).cols()) throw ShapeMismatch("slice out of range");
    Node n;
    n.op = Op::SliceCols;
    n.a = x;
    n.p = start;
    n.h = len;
    n.val = val(x).middleCols(start, len);
    return push(std::move(n));
  }

  // B x (P*H*W) maps -> B x 2P expected pixel coordinates, interleaved
  // (x_0, y_0, x_1, y_1, ...).  Pixel (x=col, y=row) at integer centers.
  int soft_argmax(int maps, int p, int h, int w) {
    if (val(maps).cols() != static_cast<long>(p) * h * w)
      throw ShapeMismatch("soft_argmax: map width mismatch");
    const Mat& m = val(maps);
    Node n;
    n.op = Op::SoftArgmax;
    n.a = maps;
    n.p = p;
    n.h = h;
    n.wd = w;
    n.val = Mat(m.rows(), 2 * p);
    for (long r = 0; r < m.rows(); r++) {
      for (int j = 0; j < p; j++) {
        double s = 0.0, sx = 0.0, sy = 0.0;
        for (int y = 0; y < h; y++)
          for (int x = 0; x < w; x++) {
            double v = m(r, static_cast<long>(j) * h * w + static_cast<long>(y) * w + x);
            s += v;
            sx += v * x;
            sy += v * y;
          }
        if (s <= 0.0)
          throw DegenerateMap("soft_argmax: map " + std::to_string(j) + " sums to " +
                              format_double(s));
        n.val(r, 2 * j) = sx / s;
        n.val(r, 2 * j + 1) = sy / s;
      }
    }
    return push(std::move(n));
  }

  // out[b, j*HW + q] = maps[b, j*HW + q] * depths[b, j]
  int scale_maps_by_depths(int maps, int depths, int p, int hw) {
    const Mat& m = val(maps);
    const Mat& d = val(depths);
    if (m.cols() != static_cast<long>(p) * hw || d.cols() != p || m.rows() != d.rows())
      throw ShapeMismatch("scale_maps_by_depths");
    Node n;
    n.op = Op::ScaleMapsByDepths;
    n.a = maps;
    n.b = depths;
    n.p = p;
    n.h = hw;
    n.val = Mat(m.rows(), m.cols());
    for (long r = 0; r < m.rows(); r++)
      for (int j = 0; j < p; j++)
        n.val.row(r).segment(static_cast<long>(j) * hw, hw) =
            m.row(r).segment(static_cast<long>(j) * hw, hw) * d(r, j);
    return push(std::move(n));
  }

  // coords2d: B x 2P pixel coords (u, v interleaved); depths: B x P absolute
  // mm; cams: B x 4 rows (fx, fy, cx, cy).  Output B x 3P (x, y, z per joint).
  int compose3d(int coords2d, int depths, Mat cams) {
    const Mat& uv = val(coords2d);
    const Mat& z = val(depths);
    const int p = static_cast<int>(z.cols());
    if (uv.cols() != 2 * p || uv.rows() != z.rows() || cams.rows() != z.rows() || cams.cols() != 4)
      throw ShapeMismatch("compose3d");
    Node n;
    n.op = Op::Compose3D;
    n.a = coords2d;
    n.b = depths;
    n.aux = std::move(cams);
    n.val = Mat(z.rows(), 3 * p);
    for (long r = 0; r < z.rows(); r++) {
      double fx = n.aux(r, 0), fy = n.aux(r, 1), cx = n.aux(r, 2), cy = n.aux(r, 3);
      for (int j = 0; j < p; j++) {
        double depth = z(r, j);
        if (depth <= 0.0) throw NonPositiveDepth("compose3d: joint " + std::to_string(j));
        n.val(r, 3 * j) = (uv(r, 2 * j) - cx) * depth / fx;
        n.val(r, 3 * j + 1) = (uv(r, 2 * j + 1) - cy) * depth / fy;
        n.val(r, 3 * j + 2) = depth;
      }
    }
    return push(std::move(n));
  }

  // coords3d: B x 3P -> B x 6*P*P pairwise descriptor, channel-major layout
  // ch*P*P + i*P + j.  Channels 0-2: (c_i - c_j) * s_off; 3-5: (c_i - c_j)^2
  // * s_sq.
  int pairwise_descriptor(int coords3d, double s_off, double s_sq) {
    const Mat& c = val(coords3d);
    if (c.cols() % 3 != 0) throw ShapeMismatch("pairwise_descriptor: need B x 3P");
    const int p = static_cast<int>(c.cols() / 3);
    Node n;
    n.op = Op::PairDescriptor;
    n.a = coords3d;
    n.c0 = s_off;
    n.c1 = s_sq;
    n.p = p;
    n.val = Mat(c.rows(), 6 * p * p);
    for (long r = 0; r < c.rows(); r++)
      for (int k = 0; k < 3; k++)
        for (int i = 0; i < p; i++)
          for (int j = 0; j < p; j++) {
            double d = c(r, 3 * i + k) - c(r, 3 * j + k);
            n.val(r, (k * p + i) * p + j) = d * s_off;
            n.val(r, ((k + 3) * p + i) * p + j) = d * d * s_sq;
          }
    return push(std::move(n));
  }

  // Scalar: sum over all entries of (a - b)^2.
  int sse(int x, int y) {
    if (val(x).rows() != val(y).rows() || val(x).cols() != val(y).cols())
      throw ShapeMismatch("sse");
    Node n;
    n.op = Op::Sse;
    n.a = x;
    n.b = y;
    n.val = Mat::Constant(1, 1, (val(x) - val(y)).squaredNorm());
    return push(std::move(n));
  }

  // Scalar: sum over rows r of mask_r * ||a_r - b_r||^2 (row mask selects the
  // labeled samples of a mixed batch).
  int sse_rows(int x, int y, Vec mask) {
    if (val(x).rows() != val(y).rows() || val(x).cols() != val(y).cols() ||
        mask.size() != val(x).rows())
      throw ShapeMismatch("sse_rows");
    Node n;
    n.op = Op::SseRows;
    n.a = x;
    n.b = y;
    n.aux = mask;
    double total = 0.0;
    for (long r = 0; r < mask.size(); r++)
      total += mask(r) * (val(x).row(r) - val(y).row(r)).squaredNorm();
    n.val = Mat::Constant(1, 1, total);
    return push(std::move(n));
  }

  // Scalar: clamped binary cross entropy of scores (B x 1) against targets.
  int bce_loss(int scores, Vec targets, Reduce reduce) {
    const Mat& s = val(scores);
    if (s.cols() != 1 || s.rows() != targets.size()) throw ShapeMismatch("bce_loss");
    Node n;
    n.op = Op::Bce;
    n.a = scores;
    n.aux = targets;
    n.reduce = reduce;
    double total = 0.0;
    for (long r = 0; r < s.rows(); r++) total += bce(s(r, 0), targets(r));
    if (reduce == Reduce::Mean) total /= static_cast<double>(s.rows());
    n.val = Mat::Constant(1, 1, total);
    return push(std::move(n));
  }

  // Reverse pass from `out`, seeding with ones (scalar outputs get d=1) or
  // with the given upstream gradient.  Parameter gradients accumulate into the
  // Tensors referenced by affine nodes; call zero_grads on the owner first.
  void backward(int out, const Mat* seed = nullptr) {
    if (seed) {
      if (seed->rows() != nodes[out].val.rows() || seed->cols() != nodes[out].val.cols())
        throw ShapeMismatch("backward: seed shape mismatch");
      nodes[out].grad = *seed;
    } else {
      nodes[out].grad.setOnes();
    }
    for (int i = out; i >= 0; i--) {
      Node& n = nodes[i];
      if (n.grad.isZero(0.0)) continue;
      const Mat& g = n.grad;
      switch (n.op) {
        case Op::Leaf:
          break;
        case Op::Affine:
          n.w->grad.noalias() += g.transpose() * nodes[n.a].val;
          n.bias->grad.row(0) += g.colwise().sum();
          nodes[n.a].grad.noalias() += g * n.w->value;
          break;
        case Op::Relu:
          nodes[n.a].grad.array() +=
              g.array() * (nodes[n.a].val.array() > 0.0).cast<double>();
          break;
        case Op::Sigmoid:
          nodes[n.a].grad.array() += g.array() * n.val.array() * (1.0 - n.val.array());
          break;
        case Op::Add:
          nodes[n.a].grad += g;
          nodes[n.b].grad += g;
          break;
        case Op::Sub:
          nodes[n.a].grad += g;
          nodes[n.b].grad -= g;
          break;
        case Op::Mul:
          nodes[n.a].grad.array() += g.array() * nodes[n.b].val.array();
          nodes[n.b].grad.array() += g.array() * nodes[n.a].val.array();
          break;
        case Op::Scale:
          nodes[n.a].grad += n.c0 * g;
          break;
        case Op::AddScalar:
          nodes[n.a].grad += g;
          break;
        case Op::ScaleInterleaved:
          for (int c = 0; c < g.cols(); c++)
            nodes[n.a].grad.col(c) += g.col(c) * (c % 2 == 0 ? n.c0 : n.c1);
          break;
        case Op::ConcatCols: {
          long at = 0;
          for (int s : n.srcs) {
            nodes[s].grad += g.middleCols(at, nodes[s].val.cols());
            at += nodes[s].val.cols();
          }
          break;
        }
        case Op::SliceCols:
          nodes[n.a].grad.middleCols(n.p, n.h) += g;
          break;
        case Op::SoftArgmax: {
          const Mat& m = nodes[n.a].val;
          Mat& dm = nodes[n.a].grad;
          for (long r = 0; r < m.rows(); r++)
            for (int j = 0; j < n.p; j++) {
              double s = 0.0;
              long base = static_cast<long>(j) * n.h * n.wd;
              for (int q = 0; q < n.h * n.wd; q++) s += m(r, base + q);
              double mx = n.val(r, 2 * j), my = n.val(r, 2 * j + 1);
              double gx = g(r, 2 * j), gy = g(r, 2 * j + 1);
              for (int y = 0; y < n.h; y++)
                for (int x = 0; x < n.wd; x++)
                  dm(r, base + static_cast<long>(y) * n.wd + x) +=
                      (gx * (x - mx) + gy * (y - my)) / s;
            }
          break;
        }
        case Op::ScaleMapsByDepths: {
          const Mat& m = nodes[n.a].val;
          const Mat& d = nodes[n.b].val;
          for (long r = 0; r < m.rows(); r++)
            for (int j = 0; j < n.p; j++) {
              long base = static_cast<long>(j) * n.h;
              nodes[n.a].grad.row(r).segment(base, n.h) += g.row(r).segment(base, n.h) * d(r, j);
              nodes[n.b].grad(r, j) +=
                  g.row(r).segment(base, n.h).dot(m.row(r).segment(base, n.h));
            }
          break;
        }
        case Op::Compose3D: {
          const Mat& uv = nodes[n.a].val;
          const Mat& z = nodes[n.b].val;
          const int p = static_cast<int>(z.cols());
          for (long r = 0; r < z.rows(); r++) {
            double fx = n.aux(r, 0), fy = n.aux(r, 1), cx = n.aux(r, 2), cy = n.aux(r, 3);
            for (int j = 0; j < p; j++) {
              double gx = g(r, 3 * j), gy = g(r, 3 * j + 1), gz = g(r, 3 * j + 2);
              nodes[n.a].grad(r, 2 * j) += gx * z(r, j) / fx;
              nodes[n.a].grad(r, 2 * j + 1) += gy * z(r, j) / fy;
              nodes[n.b].grad(r, j) += gx * (uv(r, 2 * j) - cx) / fx +
                                       gy * (uv(r, 2 * j + 1) - cy) / fy + gz;
            }
          }
          break;
        }
        case Op::PairDescriptor: {
          const Mat& c = nodes[n.a].val;
          Mat& dc = nodes[n.a].grad;
          const int p = n.p;
          for (long r = 0; r < c.rows(); r++)
            for (int k = 0; k < 3; k++)
              for (int i = 0; i < p; i++)
                for (int j = 0; j < p; j++) {
                  double d = c(r, 3 * i + k) - c(r, 3 * j + k);
                  double pull = g(r, (k * p + i) * p + j) * n.c0 +
                                g(r, ((k + 3) * p + i) * p + j) * 2.0 * d * n.c1;
                  dc(r, 3 * i + k) += pull;
                  dc(r, 3 * j + k) -= pull;
                }
          break;
        }
        case Op::Sse: {
          Mat diff = 2.0 * g(0, 0) * (nodes[n.a].val - nodes[n.b].val);
          nodes[n.a].grad += diff;
          nodes[n.b].grad -= diff;
          break;
        }
        case Op::SseRows: {
          for (long r = 0; r < n.aux.rows(); r++) {
            if (n.aux(r, 0) == 0.0) continue;
            Mat diff = 2.0 * g(0, 0) * n.aux(r, 0) * (nodes[n.a].val.row(r) - nodes[n.b].val.row(r));
            nodes[n.a].grad.row(r) += diff;
            nodes[n.b].grad.row(r) -= diff;
          }
          break;
        }
        case Op::Bce: {
          const Mat& s = nodes[n.a].val;
          double f = g(0, 0);
          if (n.reduce == Reduce::Mean) f /= static_cast<double>(s.rows());
          for (long r = 0; r < s.rows(); r++) {
            double v = s(r, 0);
            if (v <= kBceEps || v >= 1.0 - kBceEps) continue;  // clamped flat region
            nodes[n.a].grad(r, 0) += f * (v - n.aux(r, 0)) / (v * (1.0 - v));
          }
          break;
        }
      }
    }
    // Engine invariant: no operation may produce non-finite gradients.
    for (const Node& n : nodes) {
      if (!n.grad.allFinite()) throw NonFiniteValue("non-finite node gradient");
      if (n.w && (!n.w->grad.allFinite() || !n.bias->grad.allFinite()))
        throw NonFiniteValue("non-finite parameter gradient: " + n.w->name);
    }
  }

 private:
  int binary(Op op, int x, int y, Mat v) {
    if (val(x).rows() != val(y).rows() || val(x).cols() != val(y).cols())
      throw ShapeMismatch("elementwise op shape mismatch");
    Node n;
    n.op = op;
    n.a = x;
    n.b = y;
    n.val = std::move(v);
    return push(std::move(n));
  }
};

// ------ dense networks ------

enum class Act { Identity, Relu, Sigmoid };

struct DenseNetSpec {
  std::vector<int> widths;  // [input, hidden..., output]
  std::vector<Act> acts;    // one per layer = widths.size() - 1
  uint64_t seed = 0;
};

inline void validate_spec(const DenseNetSpec& spec) {
  if (spec.widths.size() < 2) throw ConfigError("dense net needs at least one layer");
  for (int w : spec.widths)
    if (w <= 0) throw ConfigError("dense net widths must be positive");
  if (spec.acts.size() != spec.widths.size() - 1)
    throw ConfigError("dense net needs one activation per layer");
}

struct DenseNet {
  DenseNetSpec spec;
  std::vector<Tensor> ws, bs;

  DenseNet() = default;

  DenseNet(DenseNetSpec s, const std::string& name_prefix) : spec(std::move(s)) {
    validate_spec(spec);
    Rng rng(spec.seed);
    for (size_t l = 0; l + 1 < spec.widths.size(); l++) {
      int fan_in = spec.widths[l], fan_out = spec.widths[l + 1];
      double a = std::sqrt(6.0 / (fan_in + fan_out));
      Mat w(fan_out, fan_in);
      for (long r = 0; r < w.rows(); r++)
        for (long c = 0; c < w.cols(); c++) w(r, c) = rng.uniform(-a, a);
      ws.emplace_back(name_prefix + "/w" + std::to_string(l), std::move(w), 2);
      bs.emplace_back(name_prefix + "/b" + std::to_string(l), Mat::Zero(1, fan_out), 1);
    }
  }

  int layers() const { return static_cast<int>(ws.size()); }
  int in_width() const { return spec.widths.front(); }
  int out_width() const { return spec.widths.back(); }

  // Tape-recorded forward.  tap_out, when non-null, receives the node id of
  // the penultimate activation (the feature tap used by the depth regressor).
  int forward(Tape& t, int x, int* tap_out = nullptr) {
    for (int l = 0; l < layers(); l++) {
      if (tap_out && l == layers() - 1) *tap_out = x;
      x = t.affine(x, ws[l], bs[l]);
      if (spec.acts[l] == Act::Relu) x = t.relu(x);
      else if (spec.acts[l] == Act::Sigmoid) x = t.sigmoid(x);
    }
    return x;
  }

  // Plain forward without recording; usable from const contexts.
  Mat infer(const Mat& x, Mat* tap_out = nullptr) const {
    if (x.cols() != in_width()) throw ShapeMismatch("infer: input width mismatch");
    Mat h = x;
    for (int l = 0; l < layers(); l++) {
      if (tap_out && l == layers() - 1) *tap_out = h;
      h = (h * ws[l].value.transpose()).rowwise() + bs[l].value.row(0);
      if (spec.acts[l] == Act::Relu) h = h.cwiseMax(0.0);
      else if (spec.acts[l] == Act::Sigmoid)
        h = h.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    }
    if (!h.allFinite()) throw NonFiniteValue("infer produced non-finite output");
    return h;
  }

  // Record-and-replay surface: forward stores a tape, backward replays it.
  Mat forward(const Mat& x) {
    recorded_ = std::make_unique<Tape>();
    recorded_input_ = recorded_->leaf(x);
    recorded_output_ = forward(*recorded_, recorded_input_);
    return recorded_->val(recorded_output_);
  }

  // Accumulates parameter gradients for upstream dL/dout; returns dL/dinput.
  Mat backward(const Mat& upstream) {
    if (!recorded_) throw NoForwardRecorded();
    recorded_->backward(recorded_output_, &upstream);
    Mat gin = recorded_->grad(recorded_input_);
    recorded_.reset();
    return gin;
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out;
    for (auto& w : ws) out.push_back(&w);
    for (auto& b : bs) out.push_back(&b);
    return out;
  }

  void zero_grads() {
    for (Tensor* p : params()) p->grad.setZero();
  }

 private:
  std::unique_ptr<Tape> recorded_;
  int recorded_input_ = -1, recorded_output_ = -1;
};

// ------ optimizer ------

struct Adam {
  std::vector<Tensor*> params;
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step_count = 0;
  std::vector<Mat> m, v;

  Adam() = default;
  explicit Adam(std::vector<Tensor*> ps, double lr_ = 1e-3, double b1 = 0.9, double b2 = 0.999,
                double e = 1e-8)
      : params(std::move(ps)), lr(lr_), beta1(b1), beta2(b2), eps(e) {
    for (Tensor* p : params) {
      m.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
      v.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void zero_grads() {
    for (Tensor* p : params) p->grad.setZero();
  }

  void step() {
    step_count++;
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (size_t i = 0; i < params.size(); i++) {
      const Mat& g = params[i]->grad;
      if (g.rows() != params[i]->value.rows() || g.cols() != params[i]->value.cols())
        throw ShapeMismatch("adam: grad shape mismatch for " + params[i]->name);
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g.cwiseProduct(g);
      Mat mh = m[i] / c1;
      Mat vh = v[i] / c2;
      params[i]->value.array() -= lr * mh.array() / (vh.array().sqrt() + eps);
      if (!params[i]->value.allFinite())
        throw NonFiniteValue("adam produced non-finite parameter: " + params[i]->name);
    }
  }
};

// ------ gradient checking ------

// Central finite differences over every entry of every parameter: relative
// error |a - f| / max(1, |a|, |f|), maximum over entries.  compute_grads must
// zero and then fill each parameter's grad; loss_value must evaluate the same
// scalar without side effects.
inline double grad_check(const std::vector<Tensor*>& params,
                         const std::function<void()>& compute_grads,
                         const std::function<double()>& loss_value, double eps = 1e-4) {
  compute_grads();
  std::vector<Mat> analytic;
  for (Tensor* p : params) analytic.push_back(p->grad);
  double worst = 0.0;
  for (size_t i = 0; i < params.size(); i++) {
    Mat& val = params[i]->value;
    for (long r = 0; r < val.rows(); r++)
      for (long c = 0; c < val.cols(); c++) {
        double keep = val(r, c);
        val(r, c) = keep + eps;
        double up = loss_value();
        val(r, c) = keep - eps;
        double down = loss_value();
        val(r, c) = keep;
        double fd = (up - down) / (2.0 * eps);
        double a = analytic[i](r, c);
        double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
        worst = std::max(worst, rel);
      }
  }
  return worst;
}

// Convenience form for a bare dense net with a loss over its output.
inline double grad_check(DenseNet& net, const Mat& input,
                         const std::function<double(const Mat&)>& loss_of_output,
                         const std::function<Mat(const Mat&)>& dloss_of_output,
                         double eps = 1e-4) {
  auto compute = [&] {
    net.zero_grads();
    Mat out = net.forward(input);
    net.backward(dloss_of_output(out));
  };
  auto value = [&] { return loss_of_output(net.infer(input)); };
  return grad_check(net.params(), compute, value, eps);
}

// ------ checkpoints ------

struct Checkpoint {
  struct Record {
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<double> data;
  };
  std::vector<Record> records;

  static constexpr char kMagic[9] = "ADVPOSE1";
  static constexpr uint32_t kVersion = 1;

  const Record* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }

  void put(const std::string& name, const Mat& m, int rank = 2) {
    Record r;
    r.name = name;
    if (rank == 1) r.dims = {static_cast<uint32_t>(m.size())};
    else r.dims = {static_cast<uint32_t>(m.rows()), static_cast<uint32_t>(m.cols())};
    r.data.reserve(m.size());
    for (long i = 0; i < m.rows(); i++)
      for (long j = 0; j < m.cols(); j++) r.data.push_back(m(i, j));
    records.push_back(std::move(r));
  }

  void put_scalar(const std::string& name, double v) {
    Record r;
    r.name = name;
    r.dims = {1};
    r.data = {v};
    records.push_back(std::move(r));
  }

  double get_scalar(const std::string& name) const {
    const Record* r = find(name);
    if (!r || r->data.size() != 1) throw IoError("checkpoint record missing: " + name);
    return r->data[0];
  }

  // Reads a record into an existing matrix; shape must match exactly.
  void get(const std::string& name, Mat& out) const {
    const Record* r = find(name);
    if (!r) throw IoError("checkpoint record missing: " + name);
    if (static_cast<long>(r->data.size()) != out.size())
      throw ShapeMismatch("checkpoint record " + name + " holds " +
                          std::to_string(r->data.size()) + " values, expected " +
                          std::to_string(out.size()));
    size_t k = 0;
    for (long i = 0; i < out.rows(); i++)
      for (long j = 0; j < out.cols(); j++) out(i, j) = r->data[k++];
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write(kMagic, 8);
    write_u32(f, kVersion);
    write_u32(f, static_cast<uint32_t>(records.size()));
    for (const auto& r : records) {
      write_u32(f, static_cast<uint32_t>(r.name.size()));
      f.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
      write_u32(f, static_cast<uint32_t>(r.dims.size()));
      for (uint32_t d : r.dims) write_u32(f, d);
      f.write(reinterpret_cast<const char*>(r.data.data()),
              static_cast<std::streamsize>(r.data.size() * sizeof(double)));
    }
    if (!f.good()) throw IoError("write failed: " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
      throw BadMagic("not a checkpoint: " + path);
    uint32_t version = read_u32(f, true);
    if (version != kVersion)
      throw VersionMismatch("checkpoint version " + std::to_string(version));
    Checkpoint ck;
    uint32_t count = read_u32(f);
    for (uint32_t i = 0; i < count; i++) {
      Record r;
      uint32_t name_len = read_u32(f);
      if (name_len > 4096) throw IoError("unreasonable record name length");
      r.name.resize(name_len);
      f.read(r.name.data(), name_len);
      uint32_t rank = read_u32(f);
      if (rank > 8) throw IoError("unreasonable record rank");
      uint64_t total = 1;
      for (uint32_t d = 0; d < rank; d++) {
        r.dims.push_back(read_u32(f));
        total *= r.dims.back();
      }
      if (total > (1ULL << 28)) throw IoError("unreasonable record size");
      r.data.resize(total);
      f.read(reinterpret_cast<char*>(r.data.data()),
             static_cast<std::streamsize>(total * sizeof(double)));
      if (!f.good()) throw IoError("truncated checkpoint: " + path);
      ck.records.push_back(std::move(r));
    }
    return ck;
  }

 private:
  static void write_u32(std::ofstream& f, uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    f.write(buf, 4);
  }
  static uint32_t read_u32(std::ifstream& f, bool version_field = false) {
    char buf[4];
    f.read(buf, 4);
    if (f.gcount() != 4) {
      if (version_field) throw VersionMismatch("checkpoint too short for a version field");
      throw IoError("truncated checkpoint");
    }
    uint32_t v;
    std::memcpy(&v, buf, 4);
    return v;
  }
};

inline void save_net(Checkpoint& ck, const DenseNet& net) {
  for (const auto& w : net.ws) ck.put(w.name, w.value, w.rank);
  for (const auto& b : net.bs) ck.put(b.name, b.value, b.rank);
}

inline void load_net(const Checkpoint& ck, DenseNet& net) {
  for (auto& w : net.ws) ck.get(w.name, w.value);
  for (auto& b : net.bs) ck.get(b.name, b.value);
}

inline void save_adam(Checkpoint& ck, const Adam& opt, const std::string& prefix) {
  ck.put_scalar(prefix + "/step", static_cast<double>(opt.step_count));
  for (size_t i = 0; i < opt.params.size(); i++) {
    ck.put(prefix + "/m/" + opt.params[i]->name, opt.m[i]);
    ck.put(prefix + "/v/" + opt.params[i]->name, opt.v[i]);
  }
}

inline void load_adam(const Checkpoint& ck, Adam& opt, const std::string& prefix) {
  opt.step_count = static_cast<long>(ck.get_scalar(prefix + "/step"));
  for (size_t i = 0; i < opt.params.size(); i++) {
    ck.get(prefix + "/m/" + opt.params[i]->name, opt.m[i]);
    ck.get(prefix + "/v/" + opt.params[i]->name, opt.v[i]);
  }
}

}  // namespace advpose
