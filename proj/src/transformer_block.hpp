#pragma once

// Pre-norm transformer block shared by the causal model and the
// bidirectional classifier encoder. Linear sites are resolved through a
// caller-supplied functor so adapters can hook them.

#include "dpmem/numerics.hpp"

namespace dpmem::detail {

inline constexpr std::size_t kSitesPerBlock = 6;
enum BlockSite : std::size_t { kSiteQ = 0, kSiteK, kSiteV, kSiteO, kSiteUp, kSiteDown };

template <typename T>
struct BlockNorms {
  const numerics::Tensor<T>& ln1_gamma;
  const numerics::Tensor<T>& ln1_beta;
  const numerics::Tensor<T>& ln2_gamma;
  const numerics::Tensor<T>& ln2_beta;
};

// linear(x, site_offset) must return x W^T (+ adapter terms) for the site.
template <typename T, typename LinearFn>
numerics::Tensor<T> block_forward(const numerics::Tensor<T>& x, const BlockNorms<T>& norms,
                                  std::size_t num_heads, bool causal, std::size_t valid_len,
                                  LinearFn&& linear) {
  using namespace numerics;
  Tensor<T> h = layer_norm(x, norms.ln1_gamma, norms.ln1_beta);
  Tensor<T> q = linear(h, kSiteQ);
  Tensor<T> k = linear(h, kSiteK);
  Tensor<T> v = linear(h, kSiteV);
  Tensor<T> mixed = attention(q, k, v, num_heads, causal, valid_len);
  Tensor<T> y = add(x, linear(mixed, kSiteO));
  h = layer_norm(y, norms.ln2_gamma, norms.ln2_beta);
  Tensor<T> hidden = gelu(linear(h, kSiteUp));
  return add(y, linear(hidden, kSiteDown));
}

}  // namespace dpmem::detail
