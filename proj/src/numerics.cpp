#include "graft/numerics.hpp"

#include <cmath>
#include <stdexcept>

namespace graft {

Vector rmsnorm(const Vector& x, const Vector& scale) {
    if (x.dim() != scale.dim() || x.dim() == 0) {
        throw std::invalid_argument("rmsnorm: dim mismatch");
    }
    double ms = 0.0;
    for (double v : x.data) ms += v * v;
    ms /= static_cast<double>(x.dim());
    const double inv = 1.0 / std::sqrt(ms + kRmsNormEps);
    Vector y(x.dim());
    for (std::size_t i = 0; i < x.dim(); ++i) y[i] = scale[i] * x[i] * inv;
    return y;
}

void rmsnorm_backward(const Vector& x, const Vector& scale, const Vector& dy,
                      Vector& dx, Vector& dscale) {
    const std::size_t n = x.dim();
    double ms = 0.0;
    for (double v : x.data) ms += v * v;
    ms /= static_cast<double>(n);
    const double r = std::sqrt(ms + kRmsNormEps);
    const double inv = 1.0 / r;
    // a_i = dy_i * scale_i; dx_j = a_j/r - x_j * (sum_i a_i x_i) / (n r^3)
    double ax = 0.0;
    for (std::size_t i = 0; i < n; ++i) ax += dy[i] * scale[i] * x[i];
    const double coef = ax / (static_cast<double>(n) * r * r * r);
    for (std::size_t i = 0; i < n; ++i) {
        dx[i] += dy[i] * scale[i] * inv - x[i] * coef;
        dscale[i] += dy[i] * x[i] * inv;
    }
}

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double dot(const Vector& a, const Vector& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) s += a[i] * b[i];
    return s;
}

Vector matvec(const Matrix& w, const Vector& x) {
    Vector y(w.rows);
    for (std::size_t r = 0; r < w.rows; ++r) {
        double s = 0.0;
        const double* row = &w.data[r * w.cols];
        for (std::size_t c = 0; c < w.cols; ++c) s += row[c] * x[c];
        y[r] = s;
    }
    return y;
}

Vector matvec_t(const Matrix& w, const Vector& x) {
    Vector y(w.cols);
    for (std::size_t r = 0; r < w.rows; ++r) {
        const double* row = &w.data[r * w.cols];
        const double xr = x[r];
        for (std::size_t c = 0; c < w.cols; ++c) y[c] += row[c] * xr;
    }
    return y;
}

void add_outer(Matrix& dw, const Vector& g, const Vector& x) {
    for (std::size_t r = 0; r < dw.rows; ++r) {
        double* row = &dw.data[r * dw.cols];
        const double gr = g[r];
        for (std::size_t c = 0; c < dw.cols; ++c) row[c] += gr * x[c];
    }
}

Matrix depthwise_causal_conv(const Matrix& u, const Matrix& kernels) {
    const std::size_t ksize = kernels.rows;
    if (ksize < 1) throw std::invalid_argument("conv: ksize < 1");
    if (kernels.cols != u.cols) throw std::invalid_argument("conv: channel mismatch");
    Matrix y(u.rows, u.cols);
    const std::ptrdiff_t k1 = static_cast<std::ptrdiff_t>(ksize) - 1;
    for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(u.rows); ++t) {
        for (std::ptrdiff_t j = 0; j <= k1; ++j) {
            const std::ptrdiff_t src = t - k1 + j;
            if (src < 0) continue;  // left zero padding
            for (std::size_t d = 0; d < u.cols; ++d) {
                y.at(t, d) += kernels.at(j, d) * u.at(src, d);
            }
        }
    }
    return y;
}

void depthwise_causal_conv_backward(const Matrix& u, const Matrix& kernels,
                                    const Matrix& dy, Matrix& du, Matrix& dkernels) {
    const std::ptrdiff_t k1 = static_cast<std::ptrdiff_t>(kernels.rows) - 1;
    for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(u.rows); ++t) {
        for (std::ptrdiff_t j = 0; j <= k1; ++j) {
            const std::ptrdiff_t src = t - k1 + j;
            if (src < 0) continue;
            for (std::size_t d = 0; d < u.cols; ++d) {
                du.at(src, d) += kernels.at(j, d) * dy.at(t, d);
                dkernels.at(j, d) += u.at(src, d) * dy.at(t, d);
            }
        }
    }
}

double finite_diff_check(const std::function<double(const Vector&)>& f,
                         const Vector& theta, const Vector& grad, double h) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h <= 0");
    double worst = 0.0;
    Vector probe = theta;
    for (std::size_t i = 0; i < theta.dim(); ++i) {
        probe[i] = theta[i] + h;
        const double fp = f(probe);
        probe[i] = theta[i] - h;
        const double fm = f(probe);
        probe[i] = theta[i];
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw std::runtime_error("finite_diff_check: non-finite objective");
        }
        const double cd = (fp - fm) / (2.0 * h);
        const double rel = std::abs(cd - grad[i]) / (std::abs(grad[i]) + 1e-8);
        if (rel > worst) worst = rel;
    }
    return worst;
}

}  // namespace graft
