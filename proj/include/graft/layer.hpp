#ifndef GRAFT_LAYER_HPP
#define GRAFT_LAYER_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "graft/bank.hpp"
#include "graft/fallback.hpp"
#include "graft/numerics.hpp"

namespace graft {

// Dense hidden-state block, shape (batch, time, branch, dim).
struct HiddenBlock {
    std::size_t B = 0, T = 0, C = 0, D = 0;
    std::vector<double> data;

    HiddenBlock() = default;
    HiddenBlock(std::size_t b, std::size_t t, std::size_t c, std::size_t d)
        : B(b), T(t), C(c), D(d), data(b * t * c * d, 0.0) {}

    double& at(std::size_t b, std::size_t t, std::size_t c, std::size_t d) {
        return data[((b * T + t) * C + c) * D + d];
    }
    double at(std::size_t b, std::size_t t, std::size_t c, std::size_t d) const {
        return data[((b * T + t) * C + c) * D + d];
    }
};

enum class GraftMode {
    AttnOnly,              // aggregate all matches by attention, no gate
    AttnGated,             // attention aggregation + query-key gate
    LongestGated,          // longest match only, gated; misses contribute zero
    LongestGatedFallback,  // longest match, gated, hashed fallback at misses
};

const char* mode_name(GraftMode mode);
std::optional<GraftMode> mode_from_name(const std::string& name);

struct GraftLayerParams {
    std::size_t D = 0, D_mem = 0, d_fb = 0, C = 0, ksize = 4;
    GraftMode mode = GraftMode::LongestGatedFallback;

    std::vector<Matrix> w_k_mem;  // per branch, D x D_mem
    Matrix w_v_mem;               // D x D_mem (shared value projection)
    std::vector<Matrix> w_k_eng;  // per branch, D x d_fb
    Matrix w_v_eng;               // D x d_fb
    std::vector<Vector> q_scale;  // per branch, D
    std::vector<Vector> k_scale;  // per branch, D
    std::vector<Matrix> conv;     // per branch, ksize x D
    Matrix w_q_attn;              // D x D, attn modes only
    Matrix w_k_attn;              // D x D_mem, attn modes only

    // Seeded init: projections uniform with 1/sqrt(fan_in) scale, norm scales
    // ones, conv kernels zero (the layer starts as dH = U).
    static GraftLayerParams init(std::size_t d, std::size_t d_mem, std::size_t d_fb,
                                 std::size_t branches, std::size_t ksize, GraftMode mode,
                                 uint64_t seed);

    void save(const std::string& path) const;  // "GRFTLAYR" blob, real32 payload
    static GraftLayerParams load(const std::string& path);
};

// Per-position feature provenance.
enum class FeatureSource : uint8_t { Zero = 0, Memory = 1, Fallback = 2, Attn = 3 };

struct PositionRecord {
    FeatureSource source = FeatureSource::Zero;
    bool hit = false;
    uint64_t row = 0;
    int matched_order = 0;
    Vector feature;            // e (D_mem, d_fb, or empty for Zero)
    FallbackAddress address;   // Fallback only
    // attn modes
    std::vector<uint64_t> attn_rows;
    std::vector<Vector> attn_features;
    std::vector<double> attn_weights;
    Vector attn_query;  // q = W_q_attn * hbar
    Vector attn_hbar;
};

// Everything the backward pass and the probes need from one forward call.
struct GraftForwardRecord {
    std::size_t B = 0, T = 0, C = 0, D = 0;
    GraftMode mode = GraftMode::LongestGatedFallback;
    HiddenBlock h_in;
    std::vector<PositionRecord> positions;  // B*T
    std::vector<Vector> values;             // B*T, shared V per position (dim D)
    std::vector<Vector> keys;               // B*T*C, K per branch (dim D)
    std::vector<double> alpha;              // B*T*C
    std::vector<Matrix> u_blocks;           // B*C matrices of (T x D)
    HiddenBlock delta_h;

    std::size_t pos(std::size_t b, std::size_t t) const { return b * T + t; }
    std::size_t posc(std::size_t b, std::size_t t, std::size_t c) const {
        return (b * T + t) * C + c;
    }
};

struct GraftForwardResult {
    HiddenBlock h_out;
    GraftForwardRecord record;
};

// One gated residual injection pass. `seq` supplies one document per batch
// row, each of length T, with ids already compressed. `bank` may be null
// (every position misses); `scheme`/`tables` are required only in mode
// LongestGatedFallback.
GraftForwardResult graft_forward(const HiddenBlock& h, const TokenSequence& seq,
                                 const MemoryBank* bank, const HashScheme* scheme,
                                 const FallbackTables* tables,
                                 const GraftLayerParams& params);

struct GraftGrads {
    std::vector<Matrix> w_k_mem;
    Matrix w_v_mem;
    std::vector<Matrix> w_k_eng;
    Matrix w_v_eng;
    std::vector<Vector> q_scale;
    std::vector<Vector> k_scale;
    std::vector<Matrix> conv;
    Matrix w_q_attn;
    Matrix w_k_attn;
    FallbackGrads fallback;  // sparse, touched rows only
    HiddenBlock dh;
};

// Analytic gradients for every trainable parameter group plus the input.
// The frozen memory rows receive no gradient slot at all.
GraftGrads graft_backward(const GraftForwardRecord& record, const GraftLayerParams& params,
                          const HiddenBlock& d_h_out);

// Softmax attention over matched memory features, used by the attn modes.
// Returns the aggregated feature; zero vector for an empty match list.
Vector attn_aggregate(const Vector& h_query, const std::vector<Vector>& features,
                      const Matrix& w_q_attn, const Matrix& w_k_attn,
                      std::vector<double>* weights_out = nullptr,
                      Vector* query_out = nullptr);

struct GateProbe {
    std::vector<std::size_t> gate_histogram;  // 10 uniform bins over (0,1)
    std::optional<double> mean_abs_dh_hits;
    std::optional<double> mean_abs_dh_misses;
    double hit_fraction = 0.0;
};

GateProbe probe_gates(const GraftForwardRecord& record);

}  // namespace graft

#endif
