// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#include "pemma/lora.hpp"

#include <cmath>

namespace pemma {

std::string_view to_string(LoraTarget t) { return t == LoraTarget::kQuery ? "q" : "v"; }

const LoraAdapter* AdapterSet::find(int block, LoraTarget t) const {
  auto it = adapters.find({block, t});
  return it == adapters.end() ? nullptr : &it->second;
}

LoraAdapter* AdapterSet::find(int block, LoraTarget t) {
  auto it = adapters.find({block, t});
  return it == adapters.end() ? nullptr : &it->second;
}

AdapterSet make_adapter_set(ParamRegistry& reg, int blocks, int dim, int rank, float alpha, const Rng& base) {
  if (rank < 1 || rank >= dim) {
    throw ConfigError(format_msg("lora rank ", rank, " must satisfy 1 <= r < d (d=", dim, ")"));
  }
  AdapterSet set;
  set.rank = rank;
  set.alpha = alpha;
  for (int blk = 0; blk < blocks; ++blk) {
    for (LoraTarget target : {LoraTarget::kQuery, LoraTarget::kValue}) {
      std::string prefix = format_msg("lora.block", blk < 10 ? "0" : "", blk, ".", to_string(target));
      LoraAdapter ad;
      ad.alpha = alpha;
      ad.block = blk;
      ad.target = target;
      Rng rng = base.fork(prefix + ".a");
      std::vector<float> a_vals(static_cast<size_t>(rank) * dim);
      for (float& v : a_vals) v = static_cast<float>(rng.normal(0.0, 0.02));
      ad.a = reg.add(prefix + ".a", Tensor({rank, dim}, std::move(a_vals)), ParamGroup::kLora);
      ad.b = reg.add(prefix + ".b", Tensor({dim, rank}, 0.0f), ParamGroup::kLora);
      set.adapters.emplace(std::make_pair(blk, target), std::move(ad));
    }
  }
  return set;
}

Tensor lora_delta(const LoraAdapter& adapter, const Tensor& h) {
  // two rank-r products; B A is never materialized here
  return scale(matmul(matmul(h, transpose(adapter.a)), transpose(adapter.b)), adapter.alpha);
}

Tensor lora_forward(const Tensor& w, const LoraAdapter& adapter, const Tensor& h) {
  return add(matmul(h, w), lora_delta(adapter, h));
}

Tensor merge_weights(const Tensor& w, const LoraAdapter& adapter) {
  return add(w, scale(matmul(transpose(adapter.a), transpose(adapter.b)), adapter.alpha));
}

int64_t lora_param_count(int blocks, int rank, int dim) {
  return 4ll * blocks * rank * dim;
}

}  // namespace pemma
