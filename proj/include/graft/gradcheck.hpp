#ifndef GRAFT_GRADCHECK_HPP
#define GRAFT_GRADCHECK_HPP

#include <cstdint>

#include "graft/bank.hpp"
#include "graft/fallback.hpp"
#include "graft/layer.hpp"
#include "graft/numerics.hpp"

namespace graft {

// Flattening of every trainable parameter group (layer projections, norm
// scales, conv kernels, attn projections when present, fallback tables) into
// one vector, in a fixed order. The frozen bank is deliberately absent.
Vector pack_params(const GraftLayerParams& params, const FallbackTables* tables);
void unpack_params(const Vector& theta, GraftLayerParams& params, FallbackTables* tables);

// Dense flattening of analytic gradients in the same order (sparse fallback
// grads are scattered into their table layout).
Vector pack_grads(const GraftGrads& grads, const GraftLayerParams& shape,
                  const FallbackTables* tables);

// Self-contained randomized small instance: seeded corpus, bank, tables,
// hidden block, and a fixed linear loss over the layer output. Returns the
// max relative error between analytic gradients and central differences.
struct GradCheckInstance {
    std::size_t batch = 2, time = 4, branches = 2, dim = 8;
    std::size_t d_mem = 6, d_fb = 4;
    int heads = 2;  // with one fallback order, d_sub = d_fb / heads
};

double layer_gradcheck(GraftMode mode, uint64_t seed,
                       const GradCheckInstance& inst = {}, double h = 1e-5);

}  // namespace graft

#endif
