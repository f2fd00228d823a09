#include "graft/diagnostics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "graft/hashmix.hpp"

namespace graft {

namespace {

// Seeded sample of `want` distinct row indices (partial Fisher-Yates).
std::vector<uint64_t> sample_rows(uint64_t total, std::size_t want, uint64_t seed,
                                  bool* clamped) {
    if (want > total) {
        want = static_cast<std::size_t>(total);
        if (clamped) *clamped = true;
    }
    std::vector<uint64_t> idx(total);
    std::iota(idx.begin(), idx.end(), 0);
    uint64_t ctr = mix64(seed ^ 0x73616D706C65ULL);
    for (std::size_t i = 0; i < want; ++i) {
        const uint64_t j = i + mix64(ctr++) % (total - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(want);
    return idx;
}

Eigen::MatrixXd sampled_rows_matrix(const MemoryBank& bank, const std::vector<uint64_t>& rows) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), bank.d_mem());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Vector v = bank.row(rows[i]);
        for (uint32_t d = 0; d < bank.d_mem(); ++d) m(static_cast<Eigen::Index>(i), d) = v[d];
    }
    return m;
}

}  // namespace

GeometryReport geometry(const MemoryBank& bank, const GeometrySampleSizes& sizes,
                        uint64_t seed) {
    if (bank.entry_count() == 0) throw std::invalid_argument("geometry: empty bank");
    GeometryReport rep;
    rep.seed = seed;

    // Norm statistics.
    {
        const auto rows = sample_rows(bank.entry_count(), sizes.norm_rows, seed, &rep.clamped);
        double sum = 0.0, sum2 = 0.0;
        for (uint64_t j : rows) {
            const Vector v = bank.row(j);
            double n2 = 0.0;
            for (double x : v.data) n2 += x * x;
            const double n = std::sqrt(n2);
            sum += n;
            sum2 += n * n;
        }
        const double m = sum / static_cast<double>(rows.size());
        const double var = std::max(0.0, sum2 / static_cast<double>(rows.size()) - m * m);
        rep.norm_mean = m;
        rep.norm_std = std::sqrt(var);
        rep.norm_cv = m > 0.0 ? rep.norm_std / m : 0.0;
    }

    // Effective rank and PC1 dominance on a centered sample.
    {
        const auto rows =
            sample_rows(bank.entry_count(), sizes.rank_rows, seed + 1, &rep.clamped);
        Eigen::MatrixXd x = sampled_rows_matrix(bank, rows);
        x.rowwise() -= x.colwise().mean();
        // eigenvalues of X^T X are the squared singular values
        const Eigen::MatrixXd gram = x.transpose() * x;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
        Eigen::VectorXd lambda = es.eigenvalues().cwiseMax(0.0);
        const double lam_sum = lambda.sum();
        if (lam_sum <= 0.0) {
            rep.effective_rank = 1.0;
            rep.pc1_fraction = 1.0;
        } else {
            double entropy = 0.0;
            double sigma_sum = 0.0;
            Eigen::VectorXd sigma = lambda.cwiseSqrt();
            sigma_sum = sigma.sum();
            for (Eigen::Index i = 0; i < sigma.size(); ++i) {
                const double p = sigma(i) / sigma_sum;
                if (p > 0.0) entropy -= p * std::log(p);
            }
            rep.effective_rank = std::exp(entropy);
            rep.pc1_fraction = lambda(lambda.size() - 1) / lam_sum;
        }
    }

    // Local nearest-neighbor structure: cosine to the closest other sampled row.
    {
        const auto rows = sample_rows(bank.entry_count(), sizes.nn_rows, seed + 2, &rep.clamped);
        Eigen::MatrixXd x = sampled_rows_matrix(bank, rows);
        Eigen::VectorXd norms = x.rowwise().norm();
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            if (norms(i) > 0.0) x.row(i) /= norms(i);
        }
        const Eigen::MatrixXd cos = x * x.transpose();
        std::vector<double> nn;
        nn.reserve(static_cast<std::size_t>(x.rows()));
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            double best = -1.0;
            for (Eigen::Index j = 0; j < x.rows(); ++j) {
                if (i != j) best = std::max(best, cos(i, j));
            }
            if (x.rows() > 1) nn.push_back(best);
        }
        if (!nn.empty()) {
            rep.nn_cosine_mean = std::accumulate(nn.begin(), nn.end(), 0.0) /
                                 static_cast<double>(nn.size());
            std::sort(nn.begin(), nn.end());
            const std::size_t p95 = std::min(nn.size() - 1,
                                             static_cast<std::size_t>(0.95 * static_cast<double>(nn.size())));
            rep.nn_cosine_p95 = nn[p95];
        }
    }
    return rep;
}

HitRateCurve hit_rate_curve(const TokenSequence& seq,
                            const std::vector<NgramKey>& ordered_keys,
                            const std::vector<std::size_t>& checkpoints) {
    HitRateCurve curve;
    std::unordered_set<NgramKey, NgramKeyHash> prefix;
    std::size_t consumed = 0;

    int max_order = 2;
    for (const NgramKey& k : ordered_keys) max_order = std::max(max_order, static_cast<int>(k.order));

    // Eligible positions: t >= 2 in-document tokens available.
    std::size_t eligible = 0;
    for (std::size_t d = 0; d < seq.doc_count(); ++d) {
        const std::size_t len = seq.doc_end(d) - seq.doc_begin(d);
        eligible += len >= 2 ? len - 1 : 0;
    }
    for (std::size_t k : checkpoints) {
        const std::size_t take = std::min(k, ordered_keys.size());
        for (; consumed < take; ++consumed) prefix.insert(ordered_keys[consumed]);
        std::size_t hits = 0;
        if (!prefix.empty()) {
            for (std::size_t d = 0; d < seq.doc_count(); ++d) {
                const std::size_t begin = seq.doc_begin(d);
                const std::size_t end = seq.doc_end(d);
                for (std::size_t t = begin + 1; t < end; ++t) {
                    const std::size_t avail = t + 1 - begin;
                    for (int n = std::min<int>(max_order, static_cast<int>(avail)); n >= 2; --n) {
                        const NgramKey key = NgramKey::from(
                            {seq.ids.data() + t + 1 - static_cast<std::size_t>(n),
                             static_cast<std::size_t>(n)});
                        if (prefix.contains(key)) {
                            ++hits;
                            break;
                        }
                    }
                }
            }
        }
        curve.points.emplace_back(
            k, eligible == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(eligible));
    }
    return curve;
}

double linear_cka(const Matrix& x, const Matrix& y, bool* degenerate) {
    if (x.rows != y.rows || x.rows < 2) {
        throw std::invalid_argument("linear_cka: row counts must match and be >= 2");
    }
    if (degenerate) *degenerate = false;
    const Eigen::Index n = static_cast<Eigen::Index>(x.rows);
    Eigen::MatrixXd xc = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                        Eigen::RowMajor>>(
        x.data.data(), n, static_cast<Eigen::Index>(x.cols));
    Eigen::MatrixXd yc = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                        Eigen::RowMajor>>(
        y.data.data(), n, static_cast<Eigen::Index>(y.cols));
    xc.rowwise() -= xc.colwise().mean();
    yc.rowwise() -= yc.colwise().mean();
    const double cross = (yc.transpose() * xc).squaredNorm();
    const double nx = (xc.transpose() * xc).norm();
    const double ny = (yc.transpose() * yc).norm();
    if (nx == 0.0 || ny == 0.0) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    return cross / (nx * ny);
}

CkaHeatmap cka_heatmap(const std::vector<Matrix>& layers_a,
                       const std::vector<Matrix>& layers_b) {
    CkaHeatmap hm;
    hm.grid = Matrix(layers_a.size(), layers_b.size());
    const std::size_t n = layers_a.empty() ? 0 : layers_a.front().rows;
    for (const auto& m : layers_a) {
        if (m.rows != n) throw std::invalid_argument("cka_heatmap: mismatched row counts");
    }
    for (const auto& m : layers_b) {
        if (m.rows != n) throw std::invalid_argument("cka_heatmap: mismatched row counts");
    }
    for (std::size_t a = 0; a < layers_a.size(); ++a) {
        std::size_t best = 0;
        double best_val = -1.0;
        for (std::size_t b = 0; b < layers_b.size(); ++b) {
            const double v = linear_cka(layers_a[a], layers_b[b]);
            hm.grid.at(a, b) = v;
            if (v > best_val) {  // ties keep the lowest index
                best_val = v;
                best = b;
            }
        }
        hm.argmax.push_back(best);
    }
    return hm;
}

}  // namespace graft
