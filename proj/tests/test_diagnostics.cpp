#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <set>

#include "graft/diagnostics.hpp"
#include "util.hpp"

using namespace graft;

namespace {

NgramKey key2(uint32_t a, uint32_t b) {
    return NgramKey::from(std::vector<uint32_t>{a, b});
}

// All rows lie along one direction with varying length plus tiny noise,
// so the centered sample is (nearly) rank one.
class RayProvider final : public EmbeddingProvider {
  public:
    RayProvider(uint32_t dim, double noise) : dim_(dim), noise_(noise) {}
    Vector embed(const NgramKey& key) const override {
        std::mt19937_64 rng(key.ids[0] * 1000003ULL + key.ids[1]);
        std::uniform_real_distribution<double> len(1.0, 2.0);
        std::normal_distribution<double> n(0.0, noise_);
        const double a = len(rng);
        Vector v(dim_);
        for (auto& x : v.data) x = a + n(rng);
        return v;
    }
    uint32_t out_dim() const override { return dim_; }
    std::string id() const override { return "ray"; }

  private:
    uint32_t dim_;
    double noise_;
};

MemoryBank bigram_bank(const EmbeddingProvider& provider, std::size_t count,
                       StorageDtype dtype = StorageDtype::BFloat16) {
    std::vector<NgramKey> keys;
    for (uint32_t i = 0; i < count; ++i) keys.push_back(key2(i / 1000, i % 1000));
    return MemoryBank::build({keys}, provider, dtype);
}

Matrix random_matrix(std::size_t rows, std::size_t cols, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    Matrix m(rows, cols);
    for (auto& v : m.data) v = n(rng);
    return m;
}

// Textbook linear CKA: HSIC with centered Gram matrices, written without the
// library's shortcuts.
double oracle_cka(const Matrix& xm, const Matrix& ym) {
    const auto n = static_cast<Eigen::Index>(xm.rows);
    Eigen::MatrixXd x(n, static_cast<Eigen::Index>(xm.cols));
    Eigen::MatrixXd y(n, static_cast<Eigen::Index>(ym.cols));
    for (Eigen::Index i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < xm.cols; ++j) x(i, static_cast<Eigen::Index>(j)) = xm.at(static_cast<std::size_t>(i), j);
        for (std::size_t j = 0; j < ym.cols; ++j) y(i, static_cast<Eigen::Index>(j)) = ym.at(static_cast<std::size_t>(i), j);
    }
    const Eigen::MatrixXd h =
        Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
    const Eigen::MatrixXd k = h * (x * x.transpose()) * h;
    const Eigen::MatrixXd l = h * (y * y.transpose()) * h;
    const double hsic_xy = (k.array() * l.array()).sum();
    const double hsic_xx = (k.array() * k.array()).sum();
    const double hsic_yy = (l.array() * l.array()).sum();
    return hsic_xy / std::sqrt(hsic_xx * hsic_yy);
}

}  // namespace

TEST_CASE("geometry of an isotropic synthetic bank") {
    const SyntheticProvider provider(31, 64);
    const MemoryBank bank = bigram_bank(provider, 3000);
    const GeometryReport rep = geometry(bank, GeometrySampleSizes{}, 1);
    CHECK(rep.clamped);  // 10000-row sample clamps to 3000
    CHECK(rep.effective_rank > 64.0 * 0.95);
    CHECK(rep.effective_rank < 64.0 * 1.05);
    CHECK(rep.pc1_fraction > (1.0 / 64.0) * 0.5);
    CHECK(rep.pc1_fraction < (1.0 / 64.0) * 1.5);
    // provider normalizes every row to sqrt(64): constant norms
    CHECK(rep.norm_mean == doctest::Approx(8.0).epsilon(0.01));
    CHECK(rep.norm_cv < 1e-2);

    const GeometryReport again = geometry(bank, GeometrySampleSizes{}, 1);
    CHECK(again.effective_rank == rep.effective_rank);
    CHECK(again.nn_cosine_mean == rep.nn_cosine_mean);
    const GeometryReport other = geometry(bank, GeometrySampleSizes{}, 2);
    CHECK(other.seed == 2);
}

TEST_CASE("geometry of a rank-1 bank") {
    const RayProvider provider(8, 1e-4);
    const MemoryBank bank = bigram_bank(provider, 500, StorageDtype::Float16);
    const GeometryReport rep = geometry(bank, GeometrySampleSizes{}, 7);
    CHECK(rep.effective_rank >= 1.0);
    CHECK(rep.effective_rank <= 1.1);
    CHECK(rep.pc1_fraction >= 0.95);
    CHECK(rep.nn_cosine_mean > 0.99);
    CHECK_THROWS(geometry(MemoryBank::build({}, provider, StorageDtype::BFloat16),
                          GeometrySampleSizes{}, 1));
}

TEST_CASE("hit rate curve endpoints and brute-force agreement") {
    std::mt19937_64 rng(17);
    TokenSequence seq;
    for (int d = 0; d < 4; ++d) {
        seq.doc_starts.push_back(seq.ids.size());
        for (int i = 0; i < 300; ++i) seq.ids.push_back(static_cast<uint32_t>(rng() % 12));
    }
    const NgramCountTable counts = count_ngrams(seq, {2, 3});
    std::vector<std::pair<NgramKey, uint64_t>> freq(counts.counts.begin(), counts.counts.end());
    std::sort(freq.begin(), freq.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<NgramKey> ordered;
    for (const auto& [k, c] : freq) ordered.push_back(k);

    std::vector<std::size_t> checkpoints{0, 1, 2, 5, 20, 50, ordered.size()};
    const HitRateCurve curve = hit_rate_curve(seq, ordered, checkpoints);
    REQUIRE(curve.points.size() == checkpoints.size());
    CHECK(curve.points.front().second == 0.0);
    CHECK(curve.points.back().second == 1.0);  // all bigrams covered at the end
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
        CHECK(curve.points[i].second >= curve.points[i - 1].second);
    }

    // brute-force recount per checkpoint
    for (std::size_t ci = 0; ci < checkpoints.size(); ++ci) {
        std::set<std::vector<uint32_t>> bank;
        for (std::size_t i = 0; i < std::min(checkpoints[ci], ordered.size()); ++i) {
            const NgramKey& k = ordered[i];
            bank.insert(std::vector<uint32_t>(k.ids.begin(), k.ids.begin() + k.order));
        }
        std::size_t hits = 0, eligible = 0;
        for (std::size_t d = 0; d < seq.doc_count(); ++d) {
            for (std::size_t t = seq.doc_begin(d) + 1; t < seq.doc_end(d); ++t) {
                ++eligible;
                for (int n = 3; n >= 2; --n) {
                    if (t + 1 - seq.doc_begin(d) < static_cast<std::size_t>(n)) continue;
                    std::vector<uint32_t> tup(seq.ids.begin() + static_cast<std::ptrdiff_t>(t + 1 - static_cast<std::size_t>(n)),
                                              seq.ids.begin() + static_cast<std::ptrdiff_t>(t + 1));
                    if (bank.contains(tup)) {
                        ++hits;
                        break;
                    }
                }
            }
        }
        const double expect = static_cast<double>(hits) / static_cast<double>(eligible);
        CHECK(curve.points[ci].second == expect);
    }
}

TEST_CASE("linear CKA identities") {
    const Matrix x = random_matrix(512, 32, 1);
    const Matrix g = random_matrix(512, 32, 2);

    CHECK(std::abs(linear_cka(x, x) - 1.0) < 1e-10);
    CHECK(std::abs(linear_cka(x, g) - linear_cka(g, x)) < 1e-12);

    // orthogonal rotation invariance
    Eigen::MatrixXd rnd(32, 32);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    for (Eigen::Index i = 0; i < 32; ++i)
        for (Eigen::Index j = 0; j < 32; ++j) rnd(i, j) = n(rng);
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(rnd).householderQ();
    Matrix xr(512, 32);
    for (std::size_t r = 0; r < 512; ++r) {
        for (std::size_t c = 0; c < 32; ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < 32; ++k) {
                s += x.at(r, k) * q(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
            }
            xr.at(r, c) = s;
        }
    }
    CHECK(std::abs(linear_cka(x, xr) - 1.0) < 1e-10);

    // isotropic scaling invariance
    Matrix sx = x;
    for (auto& v : sx.data) v *= 17.5;
    CHECK(std::abs(linear_cka(sx, g) - linear_cka(x, g)) < 1e-12);

    // independent Gaussians: small value matching the textbook formula
    const double v = linear_cka(x, g);
    CHECK(v < 0.2);
    CHECK(std::abs(v - oracle_cka(x, g)) < 1e-10);
}

TEST_CASE("linear CKA degenerate and error cases") {
    const Matrix x = random_matrix(10, 3, 4);
    bool degenerate = false;
    CHECK(linear_cka(Matrix(10, 3), x, &degenerate) == 0.0);
    CHECK(degenerate);
    CHECK_THROWS(linear_cka(random_matrix(4, 2, 1), random_matrix(5, 2, 1)));
    CHECK_THROWS(linear_cka(random_matrix(1, 2, 1), random_matrix(1, 2, 1)));
}

TEST_CASE("cka heatmap grid and trajectory") {
    std::vector<Matrix> a, b;
    for (uint64_t s = 0; s < 3; ++s) a.push_back(random_matrix(64, 8, 10 + s));
    b = a;
    const CkaHeatmap self = cka_heatmap(a, b);
    CHECK(self.argmax == std::vector<std::size_t>{0, 1, 2});
    for (std::size_t i = 0; i < 3; ++i) CHECK(self.grid.at(i, i) == doctest::Approx(1.0).epsilon(1e-10));

    std::vector<Matrix> c;
    for (uint64_t s = 0; s < 3; ++s) c.push_back(random_matrix(64, 8, 20 + s));
    const CkaHeatmap grid = cka_heatmap(a, c);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(grid.grid.at(i, j) == linear_cka(a[i], c[j]));
        }
    }

    const CkaHeatmap one = cka_heatmap({a[0]}, {c[0]});
    CHECK(one.grid.rows == 1);
    CHECK(one.grid.cols == 1);

    std::vector<Matrix> bad{random_matrix(32, 8, 1)};
    CHECK_THROWS(cka_heatmap(a, bad));
}
