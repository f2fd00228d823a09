#include "graft/gradcheck.hpp"

#include <stdexcept>

#include "graft/corpus.hpp"
#include "graft/hashmix.hpp"

namespace graft {

namespace {

bool has_attn(const GraftLayerParams& p) {
    return p.mode == GraftMode::AttnOnly || p.mode == GraftMode::AttnGated;
}

template <typename Fn>
void walk_params(const GraftLayerParams& p, const FallbackTables* tables, Fn&& fn) {
    for (const Matrix& m : p.w_k_mem) fn(m.data);
    fn(p.w_v_mem.data);
    for (const Matrix& m : p.w_k_eng) fn(m.data);
    fn(p.w_v_eng.data);
    for (const Vector& v : p.q_scale) fn(v.data);
    for (const Vector& v : p.k_scale) fn(v.data);
    for (const Matrix& m : p.conv) fn(m.data);
    if (has_attn(p)) {
        fn(p.w_q_attn.data);
        fn(p.w_k_attn.data);
    }
    if (tables) {
        for (const Matrix& m : tables->tables) fn(m.data);
    }
}

template <typename Fn>
void walk_params_mut(GraftLayerParams& p, FallbackTables* tables, Fn&& fn) {
    for (Matrix& m : p.w_k_mem) fn(m.data);
    fn(p.w_v_mem.data);
    for (Matrix& m : p.w_k_eng) fn(m.data);
    fn(p.w_v_eng.data);
    for (Vector& v : p.q_scale) fn(v.data);
    for (Vector& v : p.k_scale) fn(v.data);
    for (Matrix& m : p.conv) fn(m.data);
    if (has_attn(p)) {
        fn(p.w_q_attn.data);
        fn(p.w_k_attn.data);
    }
    if (tables) {
        for (Matrix& m : tables->tables) fn(m.data);
    }
}

}  // namespace

Vector pack_params(const GraftLayerParams& params, const FallbackTables* tables) {
    Vector theta;
    walk_params(params, tables, [&](const std::vector<double>& block) {
        theta.data.insert(theta.data.end(), block.begin(), block.end());
    });
    return theta;
}

void unpack_params(const Vector& theta, GraftLayerParams& params, FallbackTables* tables) {
    std::size_t off = 0;
    walk_params_mut(params, tables, [&](std::vector<double>& block) {
        if (off + block.size() > theta.dim()) {
            throw std::invalid_argument("unpack_params: theta too short");
        }
        std::copy(theta.data.begin() + static_cast<std::ptrdiff_t>(off),
                  theta.data.begin() + static_cast<std::ptrdiff_t>(off + block.size()),
                  block.begin());
        off += block.size();
    });
    if (off != theta.dim()) throw std::invalid_argument("unpack_params: theta size mismatch");
}

Vector pack_grads(const GraftGrads& grads, const GraftLayerParams& shape,
                  const FallbackTables* tables) {
    GraftLayerParams dense = shape;  // copy for shapes; fill from grads
    for (std::size_t c = 0; c < shape.C; ++c) {
        dense.w_k_mem[c] = grads.w_k_mem[c];
        dense.w_k_eng[c] = grads.w_k_eng[c];
        dense.q_scale[c] = grads.q_scale[c];
        dense.k_scale[c] = grads.k_scale[c];
        dense.conv[c] = grads.conv[c];
    }
    dense.w_v_mem = grads.w_v_mem;
    dense.w_v_eng = grads.w_v_eng;
    if (has_attn(shape)) {
        dense.w_q_attn = grads.w_q_attn;
        dense.w_k_attn = grads.w_k_attn;
    }
    FallbackTables dense_tables;
    const FallbackTables* tables_ptr = nullptr;
    if (tables) {
        dense_tables.d_sub = tables->d_sub;
        dense_tables.d_fallback = tables->d_fallback;
        for (const Matrix& m : tables->tables) dense_tables.tables.emplace_back(m.rows, m.cols);
        for (std::size_t s = 0; s < grads.fallback.per_table.size(); ++s) {
            for (const auto& [row, g] : grads.fallback.per_table[s]) {
                for (std::size_t d = 0; d < g.dim(); ++d) {
                    dense_tables.tables[s].at(row, d) = g[d];
                }
            }
        }
        tables_ptr = &dense_tables;
    }
    return pack_params(dense, tables_ptr);
}

double layer_gradcheck(GraftMode mode, uint64_t seed, const GradCheckInstance& inst,
                       double h) {
    const uint32_t vocab = 8;

    // Seeded corpus: one document per batch row.
    TokenSequence seq;
    uint64_t ctr = mix64(seed ^ 0x67636865636BULL);
    for (std::size_t b = 0; b < inst.batch; ++b) {
        seq.doc_starts.push_back(seq.ids.size());
        for (std::size_t t = 0; t < inst.time; ++t) {
            seq.ids.push_back(static_cast<uint32_t>(mix64(ctr++) % vocab));
        }
    }

    // Bank over the corpus' own bigrams/trigrams so hits and misses both occur.
    const NgramCountTable counts = count_ngrams(seq, {2, 3});
    const auto keys = select_topk(counts, {2, 3}, 2);
    const SyntheticProvider provider(seed + 1, static_cast<uint32_t>(inst.d_mem));
    const MemoryBank bank =
        MemoryBank::build(keys, provider, StorageDtype::BFloat16);

    const HashScheme scheme = HashScheme::make({2}, inst.heads, 7, seed + 2);
    FallbackTables tables =
        FallbackTables::init(scheme, static_cast<uint32_t>(inst.d_fb), seed + 3);
    const bool use_tables = mode == GraftMode::LongestGatedFallback;

    GraftLayerParams params = GraftLayerParams::init(inst.dim, inst.d_mem, inst.d_fb,
                                                     inst.branches, 4, mode, seed + 4);
    // Non-zero conv kernels so their gradients are exercised.
    for (Matrix& m : params.conv) {
        for (double& v : m.data) v = 0.2 * (2.0 * (static_cast<double>(mix64(ctr++) >> 11) * 0x1.0p-53) - 1.0);
    }

    HiddenBlock hidden(inst.batch, inst.time, inst.branches, inst.dim);
    for (double& v : hidden.data) {
        v = 2.0 * (static_cast<double>(mix64(ctr++) >> 11) * 0x1.0p-53) - 1.0;
    }
    HiddenBlock loss_w = hidden;
    for (double& v : loss_w.data) {
        v = 2.0 * (static_cast<double>(mix64(ctr++) >> 11) * 0x1.0p-53) - 1.0;
    }

    // Fixed linear loss: L = sum(w .* H_out); dL/dH_out = w.
    auto loss_at = [&](const Vector& theta) {
        GraftLayerParams p = params;
        FallbackTables t = tables;
        unpack_params(theta, p, use_tables ? &t : nullptr);
        const auto fwd = graft_forward(hidden, seq, &bank, &scheme, use_tables ? &t : nullptr, p);
        double loss = 0.0;
        for (std::size_t i = 0; i < fwd.h_out.data.size(); ++i) {
            loss += loss_w.data[i] * fwd.h_out.data[i];
        }
        return loss;
    };

    const auto fwd = graft_forward(hidden, seq, &bank, &scheme, use_tables ? &tables : nullptr, params);
    const GraftGrads grads = graft_backward(fwd.record, params, loss_w);
    const Vector theta = pack_params(params, use_tables ? &tables : nullptr);
    const Vector grad = pack_grads(grads, params, use_tables ? &tables : nullptr);
    return finite_diff_check(loss_at, theta, grad, h);
}

}  // namespace graft
