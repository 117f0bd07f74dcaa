// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adaptation of the Q and V attention projections: the update to a
// frozen d x d weight is decomposed as alpha * B A with A [r, d] and B [d, r],
// B zero-initialized so the delta is exactly zero at birth.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include "pemma/layers.hpp"
#include "pemma/tensor.hpp"

namespace pemma {

enum class LoraTarget { kQuery, kValue };

std::string_view to_string(LoraTarget t);

struct LoraAdapter {
  Tensor a;  // [r, d]
  Tensor b;  // [d, r]
  float alpha = 16.0f;
  int block = 0;  // 0-based block index
  LoraTarget target = LoraTarget::kQuery;
  int rank() const { return static_cast<int>(a.shape()[0]); }
};

/// One adapter per (block, projection) pair, covering exactly Q and V for
/// every block — never K or O.
struct AdapterSet {
  std::map<std::pair<int, LoraTarget>, LoraAdapter> adapters;
  int rank = 8;
  float alpha = 16.0f;

  const LoraAdapter* find(int block, LoraTarget t) const;
  LoraAdapter* find(int block, LoraTarget t);
  size_t count() const { return adapters.size(); }
};

/// Builds 2L adapters (Q and V per block) into group `lora`:
/// A ~ N(0, 0.02), B = 0. Base weights are untouched.
AdapterSet make_adapter_set(ParamRegistry& reg, int blocks, int dim, int rank, float alpha, const Rng& base);

/// The adapter's contribution alpha * (h A^T) B^T, computed as two rank-r
/// products; [M, d] -> [M, d].
Tensor lora_delta(const LoraAdapter& adapter, const Tensor& h);

/// Adapted projection W h + alpha B A h, with W stored input-major so the row
/// form is h W + alpha (h A^T) B^T.
Tensor lora_forward(const Tensor& w, const LoraAdapter& adapter, const Tensor& h);

/// W + alpha * (B A) folded into the stored (input-major) orientation:
/// returns w + alpha * A^T B^T. Forward with the merged weight matches
/// lora_forward within 1e-5 per element.
Tensor merge_weights(const Tensor& w, const LoraAdapter& adapter);

/// Exact trainable-parameter count carried by an adapter set:
/// L * 2 * (r*d + d*r) = 4*L*r*d (adapters have no biases).
int64_t lora_param_count(int blocks, int rank, int dim);

}  // namespace pemma
