#include "graft/layer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "graft/hashmix.hpp"

namespace graft {

namespace {

constexpr char kParamsMagic[8] = {'G', 'R', 'F', 'T', 'L', 'A', 'Y', 'R'};
constexpr uint32_t kParamsVersion = 1;

bool is_attn_mode(GraftMode m) {
    return m == GraftMode::AttnOnly || m == GraftMode::AttnGated;
}

double next_uniform(uint64_t& ctr) {
    return static_cast<double>(mix64(ctr++) >> 11) * 0x1.0p-53;
}

Matrix init_projection(std::size_t rows, std::size_t cols, uint64_t& ctr) {
    Matrix m(rows, cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    for (double& v : m.data) v = (2.0 * next_uniform(ctr) - 1.0) * scale;
    return m;
}

}  // namespace

const char* mode_name(GraftMode mode) {
    switch (mode) {
        case GraftMode::AttnOnly: return "attn_only";
        case GraftMode::AttnGated: return "attn_gated";
        case GraftMode::LongestGated: return "longest_gated";
        case GraftMode::LongestGatedFallback: return "longest_gated_fallback";
    }
    return "?";
}

std::optional<GraftMode> mode_from_name(const std::string& name) {
    if (name == "attn_only") return GraftMode::AttnOnly;
    if (name == "attn_gated") return GraftMode::AttnGated;
    if (name == "longest_gated") return GraftMode::LongestGated;
    if (name == "longest_gated_fallback") return GraftMode::LongestGatedFallback;
    return std::nullopt;
}

GraftLayerParams GraftLayerParams::init(std::size_t d, std::size_t d_mem, std::size_t d_fb,
                                        std::size_t branches, std::size_t ksize,
                                        GraftMode mode, uint64_t seed) {
    if (d < 1 || d_mem < 1 || branches < 1 || ksize < 1) {
        throw std::invalid_argument("layer params: dims must be >= 1");
    }
    GraftLayerParams p;
    p.D = d;
    p.D_mem = d_mem;
    p.d_fb = d_fb;
    p.C = branches;
    p.ksize = ksize;
    p.mode = mode;
    uint64_t ctr = mix64(seed ^ 0x4C41594552ULL);
    for (std::size_t c = 0; c < branches; ++c) p.w_k_mem.push_back(init_projection(d, d_mem, ctr));
    p.w_v_mem = init_projection(d, d_mem, ctr);
    for (std::size_t c = 0; c < branches; ++c) p.w_k_eng.push_back(init_projection(d, d_fb, ctr));
    p.w_v_eng = init_projection(d, d_fb, ctr);
    for (std::size_t c = 0; c < branches; ++c) p.q_scale.emplace_back(d, 1.0);
    for (std::size_t c = 0; c < branches; ++c) p.k_scale.emplace_back(d, 1.0);
    for (std::size_t c = 0; c < branches; ++c) p.conv.emplace_back(ksize, d);
    if (is_attn_mode(mode)) {
        p.w_q_attn = init_projection(d, d, ctr);
        p.w_k_attn = init_projection(d, d_mem, ctr);
    }
    return p;
}

Vector attn_aggregate(const Vector& h_query, const std::vector<Vector>& features,
                      const Matrix& w_q_attn, const Matrix& w_k_attn,
                      std::vector<double>* weights_out, Vector* query_out) {
    const std::size_t d_mem = w_k_attn.cols;
    if (features.empty()) return Vector(d_mem);
    const std::size_t d = w_q_attn.rows;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const Vector q = matvec(w_q_attn, h_query);
    std::vector<double> logits;
    logits.reserve(features.size());
    for (const Vector& f : features) {
        logits.push_back(dot(q, matvec(w_k_attn, f)) * inv_sqrt_d);
    }
    const double lmax = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& l : logits) {
        l = std::exp(l - lmax);
        z += l;
    }
    Vector e(d_mem);
    for (std::size_t m = 0; m < features.size(); ++m) {
        logits[m] /= z;
        for (std::size_t i = 0; i < d_mem; ++i) e[i] += logits[m] * features[m][i];
    }
    if (weights_out) *weights_out = logits;
    if (query_out) *query_out = q;
    return e;
}

GraftForwardResult graft_forward(const HiddenBlock& h, const TokenSequence& seq,
                                 const MemoryBank* bank, const HashScheme* scheme,
                                 const FallbackTables* tables,
                                 const GraftLayerParams& params) {
    const std::size_t B = h.B, T = h.T, C = h.C, D = h.D;
    if (D != params.D || C != params.C) throw std::invalid_argument("graft_forward: shape mismatch");
    if (seq.doc_count() != B) throw std::invalid_argument("graft_forward: need one document per batch row");
    for (std::size_t b = 0; b < B; ++b) {
        if (seq.doc_end(b) - seq.doc_begin(b) != T) {
            throw std::invalid_argument("graft_forward: document length != T");
        }
    }
    if (bank && bank->d_mem() != params.D_mem) {
        throw std::invalid_argument("graft_forward: bank dim mismatch");
    }
    const bool attn = is_attn_mode(params.mode);
    const bool use_fallback = params.mode == GraftMode::LongestGatedFallback;
    if (use_fallback && (!scheme || !tables)) {
        throw std::invalid_argument("graft_forward: fallback mode needs scheme and tables");
    }
    if (use_fallback && tables->d_fallback != params.d_fb) {
        throw std::invalid_argument("graft_forward: fallback dim mismatch");
    }
    for (double v : h.data) {
        if (!std::isfinite(v)) throw std::invalid_argument("graft_forward: non-finite input");
    }

    GraftForwardResult res;
    res.record.B = B;
    res.record.T = T;
    res.record.C = C;
    res.record.D = D;
    res.record.mode = params.mode;
    res.record.h_in = h;
    res.record.positions.resize(B * T);
    res.record.values.assign(B * T, Vector(D));
    res.record.keys.assign(B * T * C, Vector(D));
    res.record.alpha.assign(B * T * C, 0.0);
    res.record.u_blocks.assign(B * C, Matrix(T, D));
    res.record.delta_h = HiddenBlock(B, T, C, D);
    res.h_out = h;

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t begin = seq.doc_begin(b);
        for (std::size_t t = 0; t < T; ++t) {
            PositionRecord& pr = res.record.positions[res.record.pos(b, t)];
            const std::size_t avail = t + 1;
            const std::size_t take = std::min<std::size_t>(avail, kMaxNgramOrder);
            const std::span<const uint32_t> suffix{seq.ids.data() + begin + t + 1 - take, take};

            if (attn) {
                if (bank && avail >= 2) {
                    for (int n : bank->orders()) {
                        if (avail < static_cast<std::size_t>(n)) continue;
                        const NgramKey key = NgramKey::from(
                            suffix.subspan(suffix.size() - static_cast<std::size_t>(n)));
                        if (auto j = bank->find(key)) {
                            pr.attn_rows.push_back(*j);
                            pr.attn_features.push_back(bank->row(*j));
                            pr.hit = true;
                            pr.matched_order = n;  // longest seen so far (ascending scan)
                            pr.row = *j;
                        }
                    }
                }
                if (pr.attn_features.empty()) {
                    pr.source = FeatureSource::Zero;
                } else {
                    pr.source = FeatureSource::Attn;
                    pr.attn_hbar = Vector(D);
                    for (std::size_t c = 0; c < C; ++c) {
                        for (std::size_t d = 0; d < D; ++d) {
                            pr.attn_hbar[d] += h.at(b, t, c, d) / static_cast<double>(C);
                        }
                    }
                    pr.feature = attn_aggregate(pr.attn_hbar, pr.attn_features, params.w_q_attn,
                                                params.w_k_attn, &pr.attn_weights, &pr.attn_query);
                }
            } else {
                LookupResult lr;
                if (bank && avail >= 2) lr = bank->exact_lookup(suffix);
                if (lr.hit) {
                    pr.source = FeatureSource::Memory;
                    pr.hit = true;
                    pr.row = lr.row;
                    pr.matched_order = lr.matched_order;
                    pr.feature = bank->row(lr.row);
                } else if (use_fallback) {
                    pr.source = FeatureSource::Fallback;
                    pr.feature = fallback_retrieve(suffix, *scheme, *tables, &pr.address);
                } else {
                    pr.source = FeatureSource::Zero;  // mode (3): miss contributes nothing
                }
            }

            // Projections, gate, gated value.
            Vector v_shared(D);
            if (pr.source == FeatureSource::Fallback) {
                v_shared = matvec(params.w_v_eng, pr.feature);
            } else if (pr.source != FeatureSource::Zero) {
                v_shared = matvec(params.w_v_mem, pr.feature);
            }
            res.record.values[res.record.pos(b, t)] = v_shared;

            for (std::size_t c = 0; c < C; ++c) {
                double a;
                Vector k(D);
                if (params.mode == GraftMode::AttnOnly) {
                    a = 1.0;  // no gate in this variant
                } else if (pr.source == FeatureSource::Zero) {
                    a = 0.5;  // sigma(0): zero key against any query
                } else {
                    const Matrix& wk = pr.source == FeatureSource::Fallback
                                           ? params.w_k_eng[c]
                                           : params.w_k_mem[c];
                    k = matvec(wk, pr.feature);
                    Vector hvec(D);
                    for (std::size_t d = 0; d < D; ++d) hvec[d] = h.at(b, t, c, d);
                    const Vector q = rmsnorm(hvec, params.q_scale[c]);
                    const Vector kbar = rmsnorm(k, params.k_scale[c]);
                    a = sigmoid(dot(kbar, q) * inv_sqrt_d);
                }
                res.record.keys[res.record.posc(b, t, c)] = std::move(k);
                res.record.alpha[res.record.posc(b, t, c)] = a;
                Matrix& u = res.record.u_blocks[b * C + c];
                for (std::size_t d = 0; d < D; ++d) u.at(t, d) = a * v_shared[d];
            }
        }
    }

    // Residual update: dH = U + ShortConv(U), per batch row and branch.
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            const Matrix& u = res.record.u_blocks[b * C + c];
            const Matrix convd = depthwise_causal_conv(u, params.conv[c]);
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t d = 0; d < D; ++d) {
                    const double dh = u.at(t, d) + convd.at(t, d);
                    res.record.delta_h.at(b, t, c, d) = dh;
                    res.h_out.at(b, t, c, d) += dh;
                }
            }
        }
    }
    return res;
}

GraftGrads graft_backward(const GraftForwardRecord& record, const GraftLayerParams& params,
                          const HiddenBlock& d_h_out) {
    const std::size_t B = record.B, T = record.T, C = record.C, D = record.D;
    if (d_h_out.B != B || d_h_out.T != T || d_h_out.C != C || d_h_out.D != D) {
        throw std::invalid_argument("graft_backward: gradient shape mismatch");
    }
    GraftGrads g;
    for (std::size_t c = 0; c < C; ++c) {
        g.w_k_mem.emplace_back(D, params.D_mem);
        g.w_k_eng.emplace_back(D, params.d_fb);
        g.q_scale.emplace_back(D);
        g.k_scale.emplace_back(D);
        g.conv.emplace_back(params.ksize, D);
    }
    g.w_v_mem = Matrix(D, params.D_mem);
    g.w_v_eng = Matrix(D, params.d_fb);
    if (is_attn_mode(params.mode)) {
        g.w_q_attn = Matrix(D, D);
        g.w_k_attn = Matrix(D, params.D_mem);
    }
    g.dh = d_h_out;  // residual branch passes the gradient straight through

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

    // dU = dDeltaH + conv^T(dDeltaH); conv kernel gradients alongside.
    std::vector<Matrix> du_blocks(B * C, Matrix(T, D));
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            Matrix d_delta(T, D);
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t d = 0; d < D; ++d) d_delta.at(t, d) = d_h_out.at(b, t, c, d);
            }
            Matrix& du = du_blocks[b * C + c];
            du = d_delta;
            depthwise_causal_conv_backward(record.u_blocks[b * C + c], params.conv[c], d_delta,
                                           du, g.conv[c]);
        }
    }

    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
            const PositionRecord& pr = record.positions[record.pos(b, t)];
            if (pr.source == FeatureSource::Zero) continue;  // constant zero path
            const Vector& v_shared = record.values[record.pos(b, t)];
            Vector dv(D);
            Vector de(pr.feature.dim());

            for (std::size_t c = 0; c < C; ++c) {
                const Matrix& du = du_blocks[b * C + c];
                Vector gu(D);
                for (std::size_t d = 0; d < D; ++d) gu[d] = du.at(t, d);

                if (params.mode == GraftMode::AttnOnly) {
                    for (std::size_t d = 0; d < D; ++d) dv[d] += gu[d];
                    continue;
                }
                const double a = record.alpha[record.posc(b, t, c)];
                const Vector& k = record.keys[record.posc(b, t, c)];
                double dalpha = 0.0;
                for (std::size_t d = 0; d < D; ++d) {
                    dalpha += gu[d] * v_shared[d];
                    dv[d] += a * gu[d];
                }
                const double ds = dalpha * a * (1.0 - a);
                Vector hvec(D);
                for (std::size_t d = 0; d < D; ++d) hvec[d] = record.h_in.at(b, t, c, d);
                const Vector q = rmsnorm(hvec, params.q_scale[c]);
                const Vector kbar = rmsnorm(k, params.k_scale[c]);
                Vector dkbar(D), dq(D);
                for (std::size_t d = 0; d < D; ++d) {
                    dkbar[d] = ds * inv_sqrt_d * q[d];
                    dq[d] = ds * inv_sqrt_d * kbar[d];
                }
                Vector dhvec(D), dk(D);
                rmsnorm_backward(hvec, params.q_scale[c], dq, dhvec, g.q_scale[c]);
                rmsnorm_backward(k, params.k_scale[c], dkbar, dk, g.k_scale[c]);
                for (std::size_t d = 0; d < D; ++d) g.dh.at(b, t, c, d) += dhvec[d];

                if (pr.source == FeatureSource::Fallback) {
                    add_outer(g.w_k_eng[c], dk, pr.feature);
                    const Vector de_k = matvec_t(params.w_k_eng[c], dk);
                    for (std::size_t i = 0; i < de.dim(); ++i) de[i] += de_k[i];
                } else {
                    add_outer(g.w_k_mem[c], dk, pr.feature);
                    const Vector de_k = matvec_t(params.w_k_mem[c], dk);
                    for (std::size_t i = 0; i < de.dim(); ++i) de[i] += de_k[i];
                }
            }

            if (pr.source == FeatureSource::Fallback) {
                add_outer(g.w_v_eng, dv, pr.feature);
                const Vector de_v = matvec_t(params.w_v_eng, dv);
                for (std::size_t i = 0; i < de.dim(); ++i) de[i] += de_v[i];
                fallback_grad(de, pr.address, g.fallback);
            } else {
                add_outer(g.w_v_mem, dv, pr.feature);
                const Vector de_v = matvec_t(params.w_v_mem, dv);
                for (std::size_t i = 0; i < de.dim(); ++i) de[i] += de_v[i];
            }

            if (pr.source == FeatureSource::Attn) {
                // de -> attention aggregation backward. Frozen features get none.
                const std::size_t m_count = pr.attn_features.size();
                std::vector<double> dw(m_count, 0.0);
                for (std::size_t m = 0; m < m_count; ++m) {
                    dw[m] = dot(de, pr.attn_features[m]);
                }
                double wdw = 0.0;
                for (std::size_t m = 0; m < m_count; ++m) wdw += pr.attn_weights[m] * dw[m];
                Vector dq_attn(D);
                for (std::size_t m = 0; m < m_count; ++m) {
                    const double dl = pr.attn_weights[m] * (dw[m] - wdw);
                    const Vector kf = matvec(params.w_k_attn, pr.attn_features[m]);
                    for (std::size_t d = 0; d < D; ++d) dq_attn[d] += dl * inv_sqrt_d * kf[d];
                    Vector dkf(D);
                    for (std::size_t d = 0; d < D; ++d) dkf[d] = dl * inv_sqrt_d * pr.attn_query[d];
                    add_outer(g.w_k_attn, dkf, pr.attn_features[m]);
                }
                add_outer(g.w_q_attn, dq_attn, pr.attn_hbar);
                const Vector dhbar = matvec_t(params.w_q_attn, dq_attn);
                for (std::size_t c = 0; c < C; ++c) {
                    for (std::size_t d = 0; d < D; ++d) {
                        g.dh.at(b, t, c, d) += dhbar[d] / static_cast<double>(C);
                    }
                }
            }
            // FeatureSource::Memory: frozen bank rows, de is intentionally dropped.
        }
    }
    return g;
}

GateProbe probe_gates(const GraftForwardRecord& record) {
    GateProbe p;
    p.gate_histogram.assign(10, 0);
    std::size_t hits = 0;
    double abs_hit = 0.0, abs_miss = 0.0;
    std::size_t n_hit = 0, n_miss = 0;
    for (std::size_t b = 0; b < record.B; ++b) {
        for (std::size_t t = 0; t < record.T; ++t) {
            const PositionRecord& pr = record.positions[record.pos(b, t)];
            if (pr.hit) ++hits;
            for (std::size_t c = 0; c < record.C; ++c) {
                const double a = record.alpha[record.posc(b, t, c)];
                const std::size_t bin = std::min<std::size_t>(9, static_cast<std::size_t>(a * 10.0));
                ++p.gate_histogram[bin];
                for (std::size_t d = 0; d < record.D; ++d) {
                    const double m = std::abs(record.delta_h.at(b, t, c, d));
                    if (pr.hit) {
                        abs_hit += m;
                        ++n_hit;
                    } else {
                        abs_miss += m;
                        ++n_miss;
                    }
                }
            }
        }
    }
    p.hit_fraction = record.B * record.T == 0
                         ? 0.0
                         : static_cast<double>(hits) / static_cast<double>(record.B * record.T);
    if (n_hit) p.mean_abs_dh_hits = abs_hit / static_cast<double>(n_hit);
    if (n_miss) p.mean_abs_dh_misses = abs_miss / static_cast<double>(n_miss);
    return p;
}

// ------------------------------------------------------------ params blob

namespace {

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>(v >> (8 * i)));
}

void put_f32(std::string& buf, double v) {
    put_u32(buf, std::bit_cast<uint32_t>(static_cast<float>(v)));
}

void put_matrix(std::string& buf, const Matrix& m) {
    for (double v : m.data) put_f32(buf, v);
}

struct BlobReader {
    const std::string& buf;
    std::size_t pos = 0;
    uint32_t u32(const char* field) {
        if (pos + 4 > buf.size()) throw std::runtime_error(std::string("truncated params blob (") + field + ")");
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    double f32(const char* field) {
        return static_cast<double>(std::bit_cast<float>(u32(field)));
    }
    void fill(Matrix& m, const char* field) {
        for (double& v : m.data) v = f32(field);
    }
};

}  // namespace

void GraftLayerParams::save(const std::string& path) const {
    std::string buf;
    put_u32(buf, kParamsVersion);
    put_u32(buf, static_cast<uint32_t>(mode));
    put_u32(buf, static_cast<uint32_t>(D));
    put_u32(buf, static_cast<uint32_t>(D_mem));
    put_u32(buf, static_cast<uint32_t>(d_fb));
    put_u32(buf, static_cast<uint32_t>(C));
    put_u32(buf, static_cast<uint32_t>(ksize));
    for (const Matrix& m : w_k_mem) put_matrix(buf, m);
    put_matrix(buf, w_v_mem);
    for (const Matrix& m : w_k_eng) put_matrix(buf, m);
    put_matrix(buf, w_v_eng);
    for (const Vector& v : q_scale)
        for (double x : v.data) put_f32(buf, x);
    for (const Vector& v : k_scale)
        for (double x : v.data) put_f32(buf, x);
    for (const Matrix& m : conv) put_matrix(buf, m);
    if (is_attn_mode(mode)) {
        put_matrix(buf, w_q_attn);
        put_matrix(buf, w_k_attn);
    }
    const uint64_t check = fnv1a64(buf.data(), buf.size());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open params file for write: " + path);
    out.write(kParamsMagic, 8);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    char cb[8];
    for (int i = 0; i < 8; ++i) cb[i] = static_cast<char>(check >> (8 * i));
    out.write(cb, 8);
    if (!out) throw std::runtime_error("params write failed: " + path);
}

GraftLayerParams GraftLayerParams::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open params file: " + path);
    std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (raw.size() < 16 || std::memcmp(raw.data(), kParamsMagic, 8) != 0) {
        throw std::runtime_error("bad params magic in " + path);
    }
    const std::string buf = raw.substr(8, raw.size() - 16);
    uint64_t stored = 0;
    for (int i = 0; i < 8; ++i) {
        stored |= static_cast<uint64_t>(static_cast<unsigned char>(raw[raw.size() - 8 + i])) << (8 * i);
    }
    if (stored != fnv1a64(buf.data(), buf.size())) {
        throw std::runtime_error("params checksum mismatch in " + path);
    }
    BlobReader r{buf};
    const uint32_t version = r.u32("version");
    if (version != kParamsVersion) {
        throw std::runtime_error("unsupported params version " + std::to_string(version));
    }
    GraftLayerParams p;
    p.mode = static_cast<GraftMode>(r.u32("mode"));
    p.D = r.u32("D");
    p.D_mem = r.u32("D_mem");
    p.d_fb = r.u32("d_fb");
    p.C = r.u32("C");
    p.ksize = r.u32("ksize");
    for (std::size_t c = 0; c < p.C; ++c) {
        p.w_k_mem.emplace_back(p.D, p.D_mem);
        r.fill(p.w_k_mem.back(), "w_k_mem");
    }
    p.w_v_mem = Matrix(p.D, p.D_mem);
    r.fill(p.w_v_mem, "w_v_mem");
    for (std::size_t c = 0; c < p.C; ++c) {
        p.w_k_eng.emplace_back(p.D, p.d_fb);
        r.fill(p.w_k_eng.back(), "w_k_eng");
    }
    p.w_v_eng = Matrix(p.D, p.d_fb);
    r.fill(p.w_v_eng, "w_v_eng");
    for (std::size_t c = 0; c < p.C; ++c) {
        Vector v(p.D);
        for (double& x : v.data) x = r.f32("q_scale");
        p.q_scale.push_back(std::move(v));
    }
    for (std::size_t c = 0; c < p.C; ++c) {
        Vector v(p.D);
        for (double& x : v.data) x = r.f32("k_scale");
        p.k_scale.push_back(std::move(v));
    }
    for (std::size_t c = 0; c < p.C; ++c) {
        p.conv.emplace_back(p.ksize, p.D);
        r.fill(p.conv.back(), "conv");
    }
    if (is_attn_mode(p.mode)) {
        p.w_q_attn = Matrix(p.D, p.D);
        r.fill(p.w_q_attn, "w_q_attn");
        p.w_k_attn = Matrix(p.D, p.D_mem);
        r.fill(p.w_k_attn, "w_k_attn");
    }
    if (r.pos != buf.size()) throw std::runtime_error("params blob has trailing bytes");
    return p;
}

}  // namespace graft
