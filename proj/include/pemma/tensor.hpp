// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense float32 tensor with reverse-mode automatic differentiation.
// Ops are free functions; while a Tape is active they append nodes in
// execution order (a topological order by construction) and backward() walks
// the nodes exactly once in reverse. Without an active tape every op is a
// plain eager computation, which is the inference path.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pemma/common.hpp"

namespace pemma {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty until first accumulation; never allocated when !requires_grad
  bool requires_grad = false;
  int node = -1;  // tape handle, -1 when not produced by a recorded op
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, float fill, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(float v);
  static Tensor from_impl(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t size() const { return static_cast<int64_t>(impl_->value.size()); }
  int64_t dim(int axis) const { return impl_->shape[static_cast<size_t>(axis)]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }

  std::span<float> data() { return impl_->value; }
  std::span<const float> data() const { return impl_->value; }
  /// Value of a one-element tensor.
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  /// Flipping requires_grad off also drops any gradient storage.
  void set_requires_grad(bool v);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const float> grad() const;
  std::span<float> grad();
  void zero_grad();

  /// Deep copy of the values; the copy is a fresh leaf (no tape link, no grad).
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<TensorImpl> ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

/// Reverse-mode tape. Constructing a Tape makes it the active tape for the
/// current thread (RAII scope); one tape per training step, one thread per tape.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Seeds d(loss)/d(loss)=1 and accumulates gradients into every
  /// requires_grad tensor reachable from `loss`. Frozen tensors receive no
  /// gradient storage. Throws ContractError if loss is not a one-element
  /// tensor recorded on this tape.
  void backward(const Tensor& loss);

  size_t node_count() const { return nodes_.size(); }
  void clear();

  static Tape* current();

  /// Appends a node; returns its id. Inputs must already exist, so append
  /// order is a topological order.
  int record(const char* op, std::vector<std::shared_ptr<TensorImpl>> inputs,
             std::shared_ptr<TensorImpl> output, std::function<void()> backward_fn);

 private:
  struct Node {
    const char* op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
};

/// Convenience: backward on the active tape.
void backward(const Tensor& loss);

/// Adds `g` into the gradient buffer of `t`, allocating zeros on first use.
/// No-op when t does not require grad.
void accumulate_grad(TensorImpl& t, std::span<const float> g);

// ---------------------------------------------------------------------------
// Ops. All differentiable, all validate shapes, all reject non-finite outputs.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
/// Sum of all elements -> shape {1}.
Tensor sum(const Tensor& a);

/// [m,k] x [k,n] -> [m,n]. Backward: dA = dC.B^T, dB = A^T.dC.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// x:[..., d] + b:[d], broadcast over the last axis.
Tensor add_bias(const Tensor& x, const Tensor& b);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
/// tanh-approximation GELU.
Tensor gelu(const Tensor& x);
/// Normalizes the last axis, then scales/shifts with gamma/beta (each [d]).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

/// Same data, new shape (copy with pass-through gradient).
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor concat_rows(const Tensor& a, const Tensor& b);
/// Selects rows of a 2-D tensor; backward scatter-adds.
Tensor gather_rows(const Tensor& x, std::vector<int64_t> rows);
/// out.value[i] = x.value[flat_indices[i]]; backward scatter-adds. Indices may
/// repeat. Used for patch extraction and other reindexing layers.
Tensor gather_flat(const Tensor& x, Shape out_shape, std::vector<int64_t> flat_indices);
Tensor slice_cols(const Tensor& x, int64_t start, int64_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);

/// x:[c,D,H,W], w:[f,c,k,k,k], b:[f]; zero padding, unit dilation.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding);
/// x:[c,D,H,W], w:[c,f,k,k,k], b:[f]; output side = (in-1)*stride + k.
Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckResult {
  float max_rel_error = 0.0f;
  int64_t worst_index = -1;
  bool finite = true;         // false when an evaluation produced NaN/Inf
  std::string message;        // failure details incl. coordinate index
  bool ok(float tol) const { return finite && max_rel_error < tol; }
};

struct GradCheckOptions {
  float eps = 1e-3f;
  /// Coordinates where |analytic| and |numeric| both fall below this floor
  /// count as exact: the f32 central-difference measurement resolution is
  /// about ulp(|f|)/(2 eps) ~ 1e-4 for O(1) losses, so smaller values carry
  /// no signal either way.
  float noise_floor = 1e-4f;
  /// When >0, check only this many coordinates (deterministically sampled).
  int64_t max_coords = 0;
  uint64_t sample_seed = 17;
};

/// Checks d f / d x against central finite differences by mutating x in
/// place. `f` must re-run the full forward each call and return a one-element
/// tensor. Error metric: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check(const std::function<Tensor()>& f, Tensor x, const GradCheckOptions& opts = {});

}  // namespace pemma
