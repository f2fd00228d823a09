#ifndef GRAFT_DIAGNOSTICS_HPP
#define GRAFT_DIAGNOSTICS_HPP

#include <cstdint>
#include <utility>
#include <vector>

#include "graft/bank.hpp"
#include "graft/corpus.hpp"
#include "graft/numerics.hpp"

namespace graft {

struct GeometrySampleSizes {
    std::size_t norm_rows = 10000;
    std::size_t rank_rows = 2048;
    std::size_t nn_rows = 1024;
};

struct GeometryReport {
    double effective_rank = 0.0;  // exp of spectrum entropy on the centered sample
    double pc1_fraction = 0.0;    // lambda_1 / sum(lambda) of the covariance
    double norm_mean = 0.0;
    double norm_std = 0.0;
    double norm_cv = 0.0;  // "norm instability": coefficient of variation
    double nn_cosine_mean = 0.0;
    double nn_cosine_p95 = 0.0;
    uint64_t seed = 0;
    bool clamped = false;  // a sample size exceeded the bank and was clamped
};

// Memory-geometry statistics over seeded row samples of the bank.
GeometryReport geometry(const MemoryBank& bank, const GeometrySampleSizes& sizes,
                        uint64_t seed);

struct HitRateCurve {
    std::vector<std::pair<std::size_t, double>> points;  // (bank size k, hit rate)
};

// Hit rate of nested top-k prefix banks over `seq`. `ordered_keys` must be
// sorted by descending frequency; positions with fewer than 2 in-document
// tokens are excluded from the denominator's hit opportunities but counted
// as misses, matching lookup semantics.
HitRateCurve hit_rate_curve(const TokenSequence& seq,
                            const std::vector<NgramKey>& ordered_keys,
                            const std::vector<std::size_t>& checkpoints);

// Linear CKA on column-centered matrices:
//   ||Y^T X||_F^2 / (||X^T X||_F * ||Y^T Y||_F)
// Zero-variance input yields 0 (flagged via *degenerate when non-null).
double linear_cka(const Matrix& x, const Matrix& y, bool* degenerate = nullptr);

struct CkaHeatmap {
    Matrix grid;                      // |layers_a| x |layers_b|
    std::vector<std::size_t> argmax;  // per A layer, best B layer (ties: lowest)
};

CkaHeatmap cka_heatmap(const std::vector<Matrix>& layers_a,
                       const std::vector<Matrix>& layers_b);

}  // namespace graft

#endif
