#ifndef GRAFT_NUMERICS_HPP
#define GRAFT_NUMERICS_HPP

#include <cstddef>
#include <functional>
#include <vector>

namespace graft {

// Row-major dense matrix of doubles. All compute in the engine is real64;
// storage precision only enters at the bank encode/decode boundary.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::size_t size() const { return data.size(); }
};

struct Vector {
    std::vector<double> data;

    Vector() = default;
    explicit Vector(std::size_t n, double fill = 0.0) : data(n, fill) {}
    Vector(std::initializer_list<double> init) : data(init) {}

    std::size_t dim() const { return data.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
};

inline constexpr double kRmsNormEps = 1e-6;  // fixed, not configurable

// y_i = scale_i * x_i / sqrt(mean_j x_j^2 + eps)
Vector rmsnorm(const Vector& x, const Vector& scale);

// Backward of rmsnorm. Given dL/dy, accumulates dL/dx and dL/dscale.
void rmsnorm_backward(const Vector& x, const Vector& scale, const Vector& dy,
                      Vector& dx, Vector& dscale);

double sigmoid(double x);

double dot(const Vector& a, const Vector& b);

// y = W x, W is (rows x cols), x has dim cols.
Vector matvec(const Matrix& w, const Vector& x);

// y = W^T x, x has dim rows.
Vector matvec_t(const Matrix& w, const Vector& x);

// dW += g x^T  (g has dim rows, x has dim cols)
void add_outer(Matrix& dw, const Vector& g, const Vector& x);

// Depthwise causal convolution over the time axis. U is (time x dim),
// kernels is (ksize x dim), per-channel taps, left zero padding:
//   y[t,d] = sum_j kernels[j,d] * U[t-(k-1)+j, d]
Matrix depthwise_causal_conv(const Matrix& u, const Matrix& kernels);

// Backward: given dL/dy accumulates dL/dU and dL/dkernels.
void depthwise_causal_conv_backward(const Matrix& u, const Matrix& kernels,
                                    const Matrix& dy, Matrix& du, Matrix& dkernels);

// Central-difference gradient verification. Returns
//   max_i |cd_i - grad_i| / (|grad_i| + 1e-8).
double finite_diff_check(const std::function<double(const Vector&)>& f,
                         const Vector& theta, const Vector& grad, double h);

}  // namespace graft

#endif
