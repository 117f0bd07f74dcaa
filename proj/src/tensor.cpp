// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#include "pemma/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "pemma/rng.hpp"

namespace pemma {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

thread_local Tape* g_current_tape = nullptr;

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (g_current_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void ensure_finite(const TensorImpl& t, const char* op) {
  for (size_t i = 0; i < t.value.size(); ++i) {
    if (!std::isfinite(t.value[i])) {
      throw DataError(format_msg("non-finite value from op '", op, "' at flat index ", i));
    }
  }
}

std::span<float> ensure_grad(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.value.size(), 0.0f);
  return t.grad;
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<float> values) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(values);
  return impl;
}

/// Finishes an op: finite check, optional tape recording.
Tensor finish(const char* op, std::shared_ptr<TensorImpl> out,
              std::initializer_list<const Tensor*> inputs, std::function<void()> backward_fn) {
  ensure_finite(*out, op);
  if (recording(inputs)) {
    out->requires_grad = true;
    std::vector<std::shared_ptr<TensorImpl>> ins;
    ins.reserve(inputs.size());
    for (const Tensor* t : inputs) ins.push_back(t->ptr());
    Tape::current()->record(op, std::move(ins), out, std::move(backward_fn));
  }
  return Tensor::from_impl(std::move(out));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(format_msg(op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
void axis_extents(const Shape& shape, int axis, int64_t& outer, int64_t& len, int64_t& inner) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw ShapeError(format_msg("axis ", axis, " out of bounds for shape ", shape_str(shape)));
  }
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  len = shape[static_cast<size_t>(axis)];
  inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

struct Conv3dDims {
  int c, d, h, w;     // input channels and spatial extent
  int f, k;           // output channels, cubic kernel side
  int stride, pad;
  int od, oh, ow;     // output spatial extent
  int64_t in_vox() const { return int64_t(d) * h * w; }
  int64_t out_vox() const { return int64_t(od) * oh * ow; }
};

Conv3dDims conv_dims(const Shape& xs, const Shape& ws, int stride, int padding) {
  if (xs.size() != 4 || ws.size() != 5) {
    throw ShapeError(format_msg("conv3d: expected x[c,d,h,w] and w[f,c,k,k,k], got ",
                                shape_str(xs), " and ", shape_str(ws)));
  }
  Conv3dDims dd;
  dd.c = static_cast<int>(xs[0]);
  dd.d = static_cast<int>(xs[1]);
  dd.h = static_cast<int>(xs[2]);
  dd.w = static_cast<int>(xs[3]);
  dd.f = static_cast<int>(ws[0]);
  dd.k = static_cast<int>(ws[2]);
  dd.stride = stride;
  dd.pad = padding;
  if (ws[1] != xs[0] || ws[2] != ws[3] || ws[3] != ws[4]) {
    throw ShapeError(format_msg("conv3d: weight ", shape_str(ws), " incompatible with input ", shape_str(xs)));
  }
  auto out_side = [&](int in) { return (in + 2 * padding - dd.k) / stride + 1; };
  dd.od = out_side(dd.d);
  dd.oh = out_side(dd.h);
  dd.ow = out_side(dd.w);
  if (dd.od <= 0 || dd.oh <= 0 || dd.ow <= 0) {
    throw ShapeError(format_msg("conv3d: empty output for input ", shape_str(xs), " kernel ", dd.k));
  }
  return dd;
}

/// cols[(c*k+kz)*k*k + ky*k + kx, out_voxel] = x[c, z, y, x] with zero padding.
void im2col_3d(const float* x, const Conv3dDims& dd, float* cols) {
  const int64_t out_vox = dd.out_vox();
  const int k3 = dd.k * dd.k * dd.k;
  for (int c = 0; c < dd.c; ++c) {
    const float* xc = x + int64_t(c) * dd.in_vox();
    for (int kz = 0; kz < dd.k; ++kz) {
      for (int ky = 0; ky < dd.k; ++ky) {
        for (int kx = 0; kx < dd.k; ++kx) {
          float* row = cols + (int64_t(c) * k3 + (kz * dd.k + ky) * dd.k + kx) * out_vox;
          int64_t col = 0;
          for (int oz = 0; oz < dd.od; ++oz) {
            const int z = oz * dd.stride - dd.pad + kz;
            for (int oy = 0; oy < dd.oh; ++oy) {
              const int y = oy * dd.stride - dd.pad + ky;
              for (int ox = 0; ox < dd.ow; ++ox, ++col) {
                const int xq = ox * dd.stride - dd.pad + kx;
                const bool inside = z >= 0 && z < dd.d && y >= 0 && y < dd.h && xq >= 0 && xq < dd.w;
                row[col] = inside ? xc[(int64_t(z) * dd.h + y) * dd.w + xq] : 0.0f;
              }
            }
          }
        }
      }
    }
  }
}

/// Scatter-add transpose of im2col_3d: accumulates cols back into x.
void col2im_3d(const float* cols, const Conv3dDims& dd, float* x_accum) {
  const int64_t out_vox = dd.out_vox();
  const int k3 = dd.k * dd.k * dd.k;
  for (int c = 0; c < dd.c; ++c) {
    float* xc = x_accum + int64_t(c) * dd.in_vox();
    for (int kz = 0; kz < dd.k; ++kz) {
      for (int ky = 0; ky < dd.k; ++ky) {
        for (int kx = 0; kx < dd.k; ++kx) {
          const float* row = cols + (int64_t(c) * k3 + (kz * dd.k + ky) * dd.k + kx) * out_vox;
          int64_t col = 0;
          for (int oz = 0; oz < dd.od; ++oz) {
            const int z = oz * dd.stride - dd.pad + kz;
            for (int oy = 0; oy < dd.oh; ++oy) {
              const int y = oy * dd.stride - dd.pad + ky;
              for (int ox = 0; ox < dd.ow; ++ox, ++col) {
                const int xq = ox * dd.stride - dd.pad + kx;
                if (z >= 0 && z < dd.d && y >= 0 && y < dd.h && xq >= 0 && xq < dd.w) {
                  xc[(int64_t(z) * dd.h + y) * dd.w + xq] += row[col];
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, float fill, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) throw ShapeError(format_msg("non-positive dimension in shape ", shape_str(shape)));
  }
  const int64_t n = numel(shape);
  impl_ = make_impl(std::move(shape), std::vector<float>(static_cast<size_t>(n), fill));
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) throw ShapeError(format_msg("non-positive dimension in shape ", shape_str(shape)));
  }
  if (numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError(format_msg("shape ", shape_str(shape), " does not match ", values.size(), " values"));
  }
  impl_ = make_impl(std::move(shape), std::move(values));
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return Tensor(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

float Tensor::item() const {
  if (size() != 1) throw ContractError(format_msg("item() on tensor of shape ", shape_str(shape())));
  return impl_->value[0];
}

void Tensor::set_requires_grad(bool v) {
  impl_->requires_grad = v;
  if (!v) impl_->grad = {};
}

std::span<const float> Tensor::grad() const {
  if (impl_->grad.empty()) throw ContractError("gradient not populated");
  return impl_->grad;
}

std::span<float> Tensor::grad() {
  if (impl_->grad.empty()) throw ContractError("gradient not populated");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->requires_grad) impl_->grad.assign(impl_->value.size(), 0.0f);
}

Tensor Tensor::clone() const {
  auto impl = make_impl(impl_->shape, impl_->value);
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() : prev_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

int Tape::record(const char* op, std::vector<std::shared_ptr<TensorImpl>> inputs,
                 std::shared_ptr<TensorImpl> output, std::function<void()> backward_fn) {
  const int id = static_cast<int>(nodes_.size());
  output->node = id;
  nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward_fn)});
  return id;
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError(format_msg("backward requires a scalar loss, got shape ", shape_str(loss.shape())));
  }
  TensorImpl* root = loss.impl();
  if (root->node < 0) return;  // constant loss: nothing reachable requires grad
  if (root->node >= static_cast<int>(nodes_.size()) ||
      nodes_[static_cast<size_t>(root->node)].output.get() != root) {
    throw ContractError("loss tensor was not recorded on this tape");
  }
  root->grad.assign(1, 1.0f);
  for (size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    if (node.output->grad.empty()) continue;  // not an ancestor of the loss
    node.backward_fn();
  }
}

void Tape::clear() { nodes_.clear(); }

void backward(const Tensor& loss) {
  Tape* tape = Tape::current();
  if (tape == nullptr) throw ContractError("backward called with no active tape");
  tape->backward(loss);
}

void accumulate_grad(TensorImpl& t, std::span<const float> g) {
  if (!t.requires_grad) return;
  auto buf = ensure_grad(t);
  for (size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto out = make_impl(a.shape(), std::vector<float>(a.data().begin(), a.data().end()));
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] += b.data()[i];
  auto ai = a.ptr(), bi = b.ptr(), oi = out;
  return finish("add", out, {&a, &b}, [ai, bi, oi] {
    accumulate_grad(*ai, oi->grad);
    accumulate_grad(*bi, oi->grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto out = make_impl(a.shape(), std::vector<float>(a.data().begin(), a.data().end()));
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] -= b.data()[i];
  auto ai = a.ptr(), bi = b.ptr(), oi = out;
  return finish("sub", out, {&a, &b}, [ai, bi, oi] {
    accumulate_grad(*ai, oi->grad);
    if (bi->requires_grad) {
      auto g = ensure_grad(*bi);
      for (size_t i = 0; i < g.size(); ++i) g[i] -= oi->grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto out = make_impl(a.shape(), std::vector<float>(a.data().begin(), a.data().end()));
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] *= b.data()[i];
  auto ai = a.ptr(), bi = b.ptr(), oi = out;
  return finish("mul", out, {&a, &b}, [ai, bi, oi] {
    if (ai->requires_grad) {
      auto g = ensure_grad(*ai);
      for (size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * bi->value[i];
    }
    if (bi->requires_grad) {
      auto g = ensure_grad(*bi);
      for (size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * ai->value[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  auto out = make_impl(a.shape(), std::vector<float>(a.data().begin(), a.data().end()));
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] /= b.data()[i];
  auto ai = a.ptr(), bi = b.ptr(), oi = out;
  return finish("div", out, {&a, &b}, [ai, bi, oi] {
    if (ai->requires_grad) {
      auto g = ensure_grad(*ai);
      for (size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] / bi->value[i];
    }
    if (bi->requires_grad) {
      auto g = ensure_grad(*bi);
      for (size_t i = 0; i < g.size(); ++i) {
        g[i] -= oi->grad[i] * ai->value[i] / (bi->value[i] * bi->value[i]);
      }
    }
  });
}

Tensor scale(const Tensor& a, float s) {
  auto out = make_impl(a.shape(), std::vector<float>(a.data().begin(), a.data().end()));
  for (float& v : out->value) v *= s;
  auto ai = a.ptr();
  auto oi = out;
  return finish("scale", out, {&a}, [ai, oi, s] {
    if (ai->requires_grad) {
      auto g = ensure_grad(*ai);
      for (size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * s;
    }
  });
}

Tensor add_scalar(const Tensor& a, float s) {
  auto out = make_impl(a.shape(), std::vector<float>(a.data().begin(), a.data().end()));
  for (float& v : out->value) v += s;
  auto ai = a.ptr();
  auto oi = out;
  return finish("add_scalar", out, {&a}, [ai, oi] { accumulate_grad(*ai, oi->grad); });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  auto out = make_impl({1}, {static_cast<float>(acc)});
  auto ai = a.ptr();
  auto oi = out;
  return finish("sum", out, {&a}, [ai, oi] {
    if (ai->requires_grad) {
      auto g = ensure_grad(*ai);
      const float up = oi->grad[0];
      for (float& v : g) v += up;
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError(format_msg("matmul: incompatible shapes ", shape_str(a.shape()), " and ", shape_str(b.shape())));
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = make_impl({m, n}, std::vector<float>(static_cast<size_t>(m * n)));
  CMapRM am(a.data().data(), m, k);
  CMapRM bm(b.data().data(), k, n);
  MapRM(out->value.data(), m, n).noalias() = am * bm;
  auto ai = a.ptr(), bi = b.ptr(), oi = out;
  return finish("matmul", out, {&a, &b}, [ai, bi, oi, m, k, n] {
    CMapRM up(oi->grad.data(), m, n);
    if (ai->requires_grad) {
      MapRM(ensure_grad(*ai).data(), m, k).noalias() += up * CMapRM(bi->value.data(), k, n).transpose();
    }
    if (bi->requires_grad) {
      MapRM(ensure_grad(*bi).data(), k, n).noalias() += CMapRM(ai->value.data(), m, k).transpose() * up;
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError(format_msg("transpose: expected 2-D, got ", shape_str(a.shape())));
  const int64_t m = a.dim(0), n = a.dim(1);
  auto out = make_impl({n, m}, std::vector<float>(static_cast<size_t>(m * n)));
  MapRM(out->value.data(), n, m) = CMapRM(a.data().data(), m, n).transpose();
  auto ai = a.ptr();
  auto oi = out;
  return finish("transpose", out, {&a}, [ai, oi, m, n] {
    if (ai->requires_grad) {
      MapRM(ensure_grad(*ai).data(), m, n) += CMapRM(oi->grad.data(), n, m).transpose();
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || x.dim(x.rank() - 1) != b.dim(0)) {
    throw ShapeError(format_msg("add_bias: ", shape_str(x.shape()), " with bias ", shape_str(b.shape())));
  }
  const int64_t d = b.dim(0);
  const int64_t rows = x.size() / d;
  auto out = make_impl(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
  for (int64_t r = 0; r < rows; ++r) {
    float* row = out->value.data() + r * d;
    for (int64_t j = 0; j < d; ++j) row[j] += b.data()[static_cast<size_t>(j)];
  }
  auto xi = x.ptr(), bi = b.ptr(), oi = out;
  return finish("add_bias", out, {&x, &b}, [xi, bi, oi, rows, d] {
    accumulate_grad(*xi, oi->grad);
    if (bi->requires_grad) {
      auto g = ensure_grad(*bi);
      for (int64_t r = 0; r < rows; ++r) {
        const float* row = oi->grad.data() + r * d;
        for (int64_t j = 0; j < d; ++j) g[static_cast<size_t>(j)] += row[j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  int64_t outer, len, inner;
  axis_extents(x.shape(), axis, outer, len, inner);
  auto out = make_impl(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      float* base = out->value.data() + o * len * inner + in;
      float mx = base[0];
      for (int64_t i = 1; i < len; ++i) mx = std::max(mx, base[i * inner]);
      float total = 0.0f;
      for (int64_t i = 0; i < len; ++i) {
        const float e = std::exp(base[i * inner] - mx);
        base[i * inner] = e;
        total += e;
      }
      const float inv = 1.0f / total;
      for (int64_t i = 0; i < len; ++i) base[i * inner] *= inv;
    }
  }
  auto xi = x.ptr();
  auto oi = out;
  return finish("softmax", out, {&x}, [xi, oi, outer, len, inner] {
    if (!xi->requires_grad) return;
    auto g = ensure_grad(*xi);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t off = o * len * inner + in;
        float dot = 0.0f;
        for (int64_t i = 0; i < len; ++i) dot += oi->grad[off + i * inner] * oi->value[off + i * inner];
        for (int64_t i = 0; i < len; ++i) {
          const float s = oi->value[off + i * inner];
          g[off + i * inner] += s * (oi->grad[off + i * inner] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  int64_t outer, len, inner;
  axis_extents(x.shape(), axis, outer, len, inner);
  auto out = make_impl(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      float* base = out->value.data() + o * len * inner + in;
      float mx = base[0];
      for (int64_t i = 1; i < len; ++i) mx = std::max(mx, base[i * inner]);
      double total = 0.0;
      for (int64_t i = 0; i < len; ++i) total += std::exp(double(base[i * inner]) - mx);
      const float lse = mx + static_cast<float>(std::log(total));
      for (int64_t i = 0; i < len; ++i) base[i * inner] -= lse;
    }
  }
  auto xi = x.ptr();
  auto oi = out;
  return finish("log_softmax", out, {&x}, [xi, oi, outer, len, inner] {
    if (!xi->requires_grad) return;
    auto g = ensure_grad(*xi);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t off = o * len * inner + in;
        float up_total = 0.0f;
        for (int64_t i = 0; i < len; ++i) up_total += oi->grad[off + i * inner];
        for (int64_t i = 0; i < len; ++i) {
          const float p = std::exp(oi->value[off + i * inner]);
          g[off + i * inner] += oi->grad[off + i * inner] - p * up_total;
        }
      }
    }
  });
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Tensor gelu(const Tensor& x) {
  auto out = make_impl(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
  for (float& v : out->value) {
    const float u = kGeluC * (v + kGeluA * v * v * v);
    v = 0.5f * v * (1.0f + std::tanh(u));
  }
  auto xi = x.ptr();
  auto oi = out;
  return finish("gelu", out, {&x}, [xi, oi] {
    if (!xi->requires_grad) return;
    auto g = ensure_grad(*xi);
    for (size_t i = 0; i < g.size(); ++i) {
      const float v = xi->value[i];
      const float t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const float sech2 = 1.0f - t * t;
      const float du = kGeluC * (1.0f + 3.0f * kGeluA * v * v);
      g[i] += oi->grad[i] * (0.5f * (1.0f + t) + 0.5f * v * sech2 * du);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const int64_t d = x.dim(x.rank() - 1);
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != d || beta.dim(0) != d) {
    throw ShapeError(format_msg("layer_norm: gamma/beta must be [", d, "]"));
  }
  const int64_t rows = x.size() / d;
  auto out = make_impl(x.shape(), std::vector<float>(static_cast<size_t>(x.size())));
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = x.data().data() + r * d;
    float* o = out->value.data() + r * d;
    float mean = 0.0f;
    for (int64_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (int64_t j = 0; j < d; ++j) {
      const float c = in[j] - mean;
      var += c * c;
    }
    var /= static_cast<float>(d);
    const float inv_sigma = 1.0f / std::sqrt(var + eps);
    for (int64_t j = 0; j < d; ++j) {
      o[j] = (in[j] - mean) * inv_sigma * gamma.data()[static_cast<size_t>(j)] + beta.data()[static_cast<size_t>(j)];
    }
  }
  auto xi = x.ptr(), gi = gamma.ptr(), bi = beta.ptr(), oi = out;
  return finish("layer_norm", out, {&x, &gamma, &beta}, [xi, gi, bi, oi, rows, d, eps] {
    for (int64_t r = 0; r < rows; ++r) {
      const float* in = xi->value.data() + r * d;
      const float* up = oi->grad.data() + r * d;
      float mean = 0.0f;
      for (int64_t j = 0; j < d; ++j) mean += in[j];
      mean /= static_cast<float>(d);
      float var = 0.0f;
      for (int64_t j = 0; j < d; ++j) {
        const float c = in[j] - mean;
        var += c * c;
      }
      var /= static_cast<float>(d);
      const float inv_sigma = 1.0f / std::sqrt(var + eps);
      if (bi->requires_grad) {
        auto gb = ensure_grad(*bi);
        for (int64_t j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += up[j];
      }
      if (gi->requires_grad) {
        auto gg = ensure_grad(*gi);
        for (int64_t j = 0; j < d; ++j) {
          gg[static_cast<size_t>(j)] += up[j] * (in[j] - mean) * inv_sigma;
        }
      }
      if (xi->requires_grad) {
        auto gx = ensure_grad(*xi);
        // dx = (g - mean(g) - xhat * mean(g .* xhat)) / sigma, g = up .* gamma
        float g_mean = 0.0f, gx_mean = 0.0f;
        for (int64_t j = 0; j < d; ++j) {
          const float xhat = (in[j] - mean) * inv_sigma;
          const float g = up[j] * gi->value[static_cast<size_t>(j)];
          g_mean += g;
          gx_mean += g * xhat;
        }
        g_mean /= static_cast<float>(d);
        gx_mean /= static_cast<float>(d);
        for (int64_t j = 0; j < d; ++j) {
          const float xhat = (in[j] - mean) * inv_sigma;
          const float g = up[j] * gi->value[static_cast<size_t>(j)];
          gx[static_cast<size_t>(r * d + j)] += (g - g_mean - xhat * gx_mean) * inv_sigma;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (numel(new_shape) != x.size()) {
    throw ShapeError(format_msg("reshape: ", shape_str(x.shape()), " -> ", shape_str(new_shape), " changes element count"));
  }
  auto out = make_impl(std::move(new_shape), std::vector<float>(x.data().begin(), x.data().end()));
  auto xi = x.ptr();
  auto oi = out;
  return finish("reshape", out, {&x}, [xi, oi] { accumulate_grad(*xi, oi->grad); });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError(format_msg("concat_rows: ", shape_str(a.shape()), " with ", shape_str(b.shape())));
  }
  const int64_t ra = a.dim(0), rb = b.dim(0), c = a.dim(1);
  std::vector<float> vals;
  vals.reserve(static_cast<size_t>((ra + rb) * c));
  vals.insert(vals.end(), a.data().begin(), a.data().end());
  vals.insert(vals.end(), b.data().begin(), b.data().end());
  auto out = make_impl({ra + rb, c}, std::move(vals));
  auto ai = a.ptr(), bi = b.ptr(), oi = out;
  return finish("concat_rows", out, {&a, &b}, [ai, bi, oi, ra, rb, c] {
    if (ai->requires_grad) {
      accumulate_grad(*ai, std::span<const float>(oi->grad.data(), static_cast<size_t>(ra * c)));
    }
    if (bi->requires_grad) {
      accumulate_grad(*bi, std::span<const float>(oi->grad.data() + ra * c, static_cast<size_t>(rb * c)));
    }
  });
}

Tensor gather_rows(const Tensor& x, std::vector<int64_t> rows) {
  if (x.rank() != 2) throw ShapeError(format_msg("gather_rows: expected 2-D, got ", shape_str(x.shape())));
  const int64_t c = x.dim(1);
  for (int64_t r : rows) {
    if (r < 0 || r >= x.dim(0)) throw ShapeError(format_msg("gather_rows: row ", r, " out of range"));
  }
  auto out = make_impl({static_cast<int64_t>(rows.size()), c},
                       std::vector<float>(rows.size() * static_cast<size_t>(c)));
  for (size_t i = 0; i < rows.size(); ++i) {
    std::memcpy(out->value.data() + static_cast<int64_t>(i) * c, x.data().data() + rows[i] * c,
                static_cast<size_t>(c) * sizeof(float));
  }
  auto xi = x.ptr();
  auto oi = out;
  return finish("gather_rows", out, {&x}, [xi, oi, rows = std::move(rows), c] {
    if (!xi->requires_grad) return;
    auto g = ensure_grad(*xi);
    for (size_t i = 0; i < rows.size(); ++i) {
      const float* src = oi->grad.data() + static_cast<int64_t>(i) * c;
      float* dst = g.data() + rows[i] * c;
      for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Tensor gather_flat(const Tensor& x, Shape out_shape, std::vector<int64_t> flat_indices) {
  if (numel(out_shape) != static_cast<int64_t>(flat_indices.size())) {
    throw ShapeError("gather_flat: index count does not match output shape");
  }
  for (int64_t idx : flat_indices) {
    if (idx < 0 || idx >= x.size()) throw ShapeError(format_msg("gather_flat: index ", idx, " out of range"));
  }
  auto out = make_impl(std::move(out_shape), std::vector<float>(flat_indices.size()));
  for (size_t i = 0; i < flat_indices.size(); ++i) {
    out->value[i] = x.data()[static_cast<size_t>(flat_indices[i])];
  }
  auto xi = x.ptr();
  auto oi = out;
  return finish("gather_flat", out, {&x}, [xi, oi, idx = std::move(flat_indices)] {
    if (!xi->requires_grad) return;
    auto g = ensure_grad(*xi);
    for (size_t i = 0; i < idx.size(); ++i) g[static_cast<size_t>(idx[i])] += oi->grad[i];
  });
}

Tensor slice_cols(const Tensor& x, int64_t start, int64_t count) {
  if (x.rank() != 2 || start < 0 || count <= 0 || start + count > x.dim(1)) {
    throw ShapeError(format_msg("slice_cols: [", start, ",", start + count, ") of ", shape_str(x.shape())));
  }
  const int64_t m = x.dim(0), n = x.dim(1);
  auto out = make_impl({m, count}, std::vector<float>(static_cast<size_t>(m * count)));
  for (int64_t r = 0; r < m; ++r) {
    std::memcpy(out->value.data() + r * count, x.data().data() + r * n + start,
                static_cast<size_t>(count) * sizeof(float));
  }
  auto xi = x.ptr();
  auto oi = out;
  return finish("slice_cols", out, {&x}, [xi, oi, start, count, m, n] {
    if (!xi->requires_grad) return;
    auto g = ensure_grad(*xi);
    for (int64_t r = 0; r < m; ++r) {
      const float* src = oi->grad.data() + r * count;
      float* dst = g.data() + r * n + start;
      for (int64_t j = 0; j < count; ++j) dst[j] += src[j];
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int64_t m = parts[0].dim(0);
  int64_t n = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) throw ShapeError("concat_cols: row counts differ");
    n += p.dim(1);
  }
  auto out = make_impl({m, n}, std::vector<float>(static_cast<size_t>(m * n)));
  int64_t off = 0;
  for (const Tensor& p : parts) {
    const int64_t pc = p.dim(1);
    for (int64_t r = 0; r < m; ++r) {
      std::memcpy(out->value.data() + r * n + off, p.data().data() + r * pc,
                  static_cast<size_t>(pc) * sizeof(float));
    }
    off += pc;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  impls.reserve(parts.size());
  for (const Tensor& p : parts) impls.push_back(p.ptr());
  auto oi = out;
  auto backward_fn = [impls, oi, m, n] {
    int64_t off2 = 0;
    for (const auto& pi : impls) {
      const int64_t pc = pi->shape[1];
      if (pi->requires_grad) {
        auto g = ensure_grad(*pi);
        for (int64_t r = 0; r < m; ++r) {
          const float* src = oi->grad.data() + r * n + off2;
          float* dst = g.data() + r * pc;
          for (int64_t j = 0; j < pc; ++j) dst[j] += src[j];
        }
      }
      off2 += pc;
    }
  };
  ensure_finite(*out, "concat_cols");
  bool rec = Tape::current() != nullptr;
  if (rec) {
    rec = false;
    for (const Tensor& p : parts) rec = rec || p.requires_grad();
  }
  if (rec) {
    out->requires_grad = true;
    Tape::current()->record("concat_cols", impls, out, std::move(backward_fn));
  }
  return Tensor::from_impl(std::move(out));
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
  const Conv3dDims dd = conv_dims(x.shape(), w.shape(), stride, padding);
  if (b.rank() != 1 || b.dim(0) != dd.f) {
    throw ShapeError(format_msg("conv3d: bias ", shape_str(b.shape()), " does not match ", dd.f, " filters"));
  }
  const int64_t out_vox = dd.out_vox();
  const int64_t krows = int64_t(dd.c) * dd.k * dd.k * dd.k;
  std::vector<float> cols(static_cast<size_t>(krows * out_vox));
  im2col_3d(x.data().data(), dd, cols.data());
  auto out = make_impl({dd.f, dd.od, dd.oh, dd.ow}, std::vector<float>(static_cast<size_t>(dd.f) * out_vox));
  MapRM om(out->value.data(), dd.f, out_vox);
  om.noalias() = CMapRM(w.data().data(), dd.f, krows) * CMapRM(cols.data(), krows, out_vox);
  for (int f = 0; f < dd.f; ++f) om.row(f).array() += b.data()[static_cast<size_t>(f)];
  auto xi = x.ptr(), wi = w.ptr(), bi = b.ptr(), oi = out;
  return finish("conv3d", out, {&x, &w, &b}, [xi, wi, bi, oi, dd, krows, out_vox] {
    CMapRM up(oi->grad.data(), dd.f, out_vox);
    if (bi->requires_grad) {
      auto g = ensure_grad(*bi);
      for (int f = 0; f < dd.f; ++f) g[static_cast<size_t>(f)] += up.row(f).sum();
    }
    if (wi->requires_grad || xi->requires_grad) {
      std::vector<float> cols2(static_cast<size_t>(krows * out_vox));
      im2col_3d(xi->value.data(), dd, cols2.data());
      if (wi->requires_grad) {
        MapRM(ensure_grad(*wi).data(), dd.f, krows).noalias() +=
            up * CMapRM(cols2.data(), krows, out_vox).transpose();
      }
      if (xi->requires_grad) {
        std::vector<float> dcols(static_cast<size_t>(krows * out_vox));
        MapRM(dcols.data(), krows, out_vox).noalias() =
            CMapRM(wi->value.data(), dd.f, krows).transpose() * up;
        ensure_grad(*xi);
        col2im_3d(dcols.data(), dd, xi->grad.data());
      }
    }
  });
}

Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  if (x.rank() != 4 || w.rank() != 5 || w.dim(0) != x.dim(0) || w.dim(2) != w.dim(3) || w.dim(3) != w.dim(4)) {
    throw ShapeError(format_msg("conv_transpose3d: x ", shape_str(x.shape()), " w ", shape_str(w.shape())));
  }
  const int c = static_cast<int>(x.dim(0));
  const int f = static_cast<int>(w.dim(1));
  const int k = static_cast<int>(w.dim(2));
  if (b.rank() != 1 || b.dim(0) != f) {
    throw ShapeError(format_msg("conv_transpose3d: bias ", shape_str(b.shape()), " does not match ", f, " filters"));
  }
  // The transposed conv is the gradient of a stride-s, pad-0 conv whose
  // input is this op's output; reuse that geometry for im2col/col2im.
  Conv3dDims dd;
  dd.c = f;
  dd.d = (static_cast<int>(x.dim(1)) - 1) * stride + k;
  dd.h = (static_cast<int>(x.dim(2)) - 1) * stride + k;
  dd.w = (static_cast<int>(x.dim(3)) - 1) * stride + k;
  dd.f = c;
  dd.k = k;
  dd.stride = stride;
  dd.pad = 0;
  dd.od = static_cast<int>(x.dim(1));
  dd.oh = static_cast<int>(x.dim(2));
  dd.ow = static_cast<int>(x.dim(3));
  const int64_t in_vox = dd.out_vox();   // voxels of x
  const int64_t out_vox = dd.in_vox();   // voxels of the produced volume
  const int64_t krows = int64_t(f) * k * k * k;
  auto out = make_impl({f, dd.d, dd.h, dd.w}, std::vector<float>(static_cast<size_t>(f) * out_vox));
  // cols = w^T [f*k^3, c] x x [c, in_vox], scattered to the upsampled grid
  std::vector<float> cols(static_cast<size_t>(krows * in_vox));
  MapRM(cols.data(), krows, in_vox).noalias() =
      CMapRM(w.data().data(), c, krows).transpose() * CMapRM(x.data().data(), c, in_vox);
  col2im_3d(cols.data(), dd, out->value.data());
  for (int fi = 0; fi < f; ++fi) {
    float* ch = out->value.data() + int64_t(fi) * out_vox;
    const float bias = b.data()[static_cast<size_t>(fi)];
    for (int64_t i = 0; i < out_vox; ++i) ch[i] += bias;
  }
  auto xi = x.ptr(), wi = w.ptr(), bi = b.ptr(), oi = out;
  return finish("conv_transpose3d", out, {&x, &w, &b}, [xi, wi, bi, oi, dd, c, f, krows, in_vox, out_vox] {
    if (bi->requires_grad) {
      auto g = ensure_grad(*bi);
      for (int fi = 0; fi < f; ++fi) {
        const float* ch = oi->grad.data() + int64_t(fi) * out_vox;
        double acc = 0.0;
        for (int64_t i = 0; i < out_vox; ++i) acc += ch[i];
        g[static_cast<size_t>(fi)] += static_cast<float>(acc);
      }
    }
    if (wi->requires_grad || xi->requires_grad) {
      // gcols[(f,k), in_vox] gathers upstream grad at each scatter target
      std::vector<float> gcols(static_cast<size_t>(krows * in_vox));
      im2col_3d(oi->grad.data(), dd, gcols.data());
      if (xi->requires_grad) {
        MapRM(ensure_grad(*xi).data(), c, in_vox).noalias() +=
            CMapRM(wi->value.data(), c, krows) * CMapRM(gcols.data(), krows, in_vox);
      }
      if (wi->requires_grad) {
        MapRM(ensure_grad(*wi).data(), c, krows).noalias() +=
            CMapRM(xi->value.data(), c, in_vox) * CMapRM(gcols.data(), krows, in_vox).transpose();
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor()>& f, Tensor x, const GradCheckOptions& opts) {
  GradCheckResult res;
  x.set_requires_grad(true);
  x.zero_grad();

  std::vector<float> analytic(static_cast<size_t>(x.size()), 0.0f);
  try {
    Tape tape;
    Tensor loss = f();
    if (loss.size() != 1) throw ContractError("grad_check: f must return a one-element tensor");
    tape.backward(loss);
    if (x.has_grad()) {
      auto g = x.grad();
      analytic.assign(g.begin(), g.end());
    }
  } catch (const DataError& e) {
    res.finite = false;
    res.message = format_msg("analytic pass: ", e.what());
    return res;
  }

  std::vector<int64_t> coords;
  const int64_t n = x.size();
  if (opts.max_coords > 0 && n > opts.max_coords) {
    std::vector<int64_t> all(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
    Rng rng(opts.sample_seed);
    for (int64_t i = 0; i < opts.max_coords; ++i) {
      const int64_t j = i + static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(n - i));
      std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
      coords.push_back(all[static_cast<size_t>(i)]);
    }
  } else {
    coords.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
  }

  auto eval = [&]() -> double { return static_cast<double>(f().item()); };

  for (int64_t i : coords) {
    float& slot = x.data()[static_cast<size_t>(i)];
    const float orig = slot;
    const float xp = orig + opts.eps;
    const float xm = orig - opts.eps;
    double fp = 0.0, fm = 0.0;
    try {
      slot = xp;
      fp = eval();
      slot = xm;
      fm = eval();
    } catch (const DataError& e) {
      slot = orig;
      res.finite = false;
      res.worst_index = i;
      res.message = format_msg("non-finite at coordinate ", i, ": ", e.what());
      return res;
    }
    slot = orig;
    const double h = static_cast<double>(xp) - static_cast<double>(xm);
    const double numeric = (fp - fm) / h;
    const double a = analytic[static_cast<size_t>(i)];
    if (std::abs(a) < opts.noise_floor && std::abs(numeric) < opts.noise_floor) continue;
    // the numeric probe cannot resolve differences below the f32 rounding of
    // the loss readout; a multi-op forward accumulates several ulps, so the
    // band is 16 ulp-equivalents wide (real gradient bugs sit orders of
    // magnitude outside it)
    const double resolution = (std::max(std::abs(fp), std::abs(fm)) * 1.1920929e-7 + 1e-30) / h;
    if (std::abs(a - numeric) <= 16.0 * resolution) continue;
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (static_cast<float>(err) > res.max_rel_error) {
      res.max_rel_error = static_cast<float>(err);
      res.worst_index = i;
    }
  }
  if (res.max_rel_error > 0.0f && res.worst_index >= 0) {
    res.message = format_msg("max rel error ", res.max_rel_error, " at coordinate ", res.worst_index);
  }
  return res;
}

}  // namespace pemma
