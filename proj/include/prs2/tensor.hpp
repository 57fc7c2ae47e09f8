#pragma once

// Dense row-major float64 tensors with explicit forward/backward functions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace prs2 {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_volume(const Shape& s)
{
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_volume(shape_), fill)
    {
        check_extents();
    }

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data))
    {
        check_extents();
        if (shape_volume(shape_) != data_.size()) {
            throw DimensionError("tensor shape " + shape_string(shape_) + " holds " +
                                 std::to_string(shape_volume(shape_)) + " values, got " +
                                 std::to_string(data_.size()));
        }
    }

    static Tensor like(const Tensor& other, double fill = 0.0) { return Tensor(other.shape_, fill); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t extent(std::size_t axis) const
    {
        if (axis >= shape_.size()) {
            throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape_));
        }
        return shape_[axis];
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    double& operator()(std::size_t c, std::size_t h, std::size_t w) { return data_[(c * shape_[1] + h) * shape_[2] + w]; }
    double operator()(std::size_t c, std::size_t h, std::size_t w) const
    {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }

    Tensor reshaped(Shape shape) const
    {
        if (shape_volume(shape) != data_.size()) {
            throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    Tensor& operator+=(const Tensor& o)
    {
        require_same_shape(*this, o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Tensor& operator*=(double s)
    {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

    static void require_same_shape(const Tensor& a, const Tensor& b, const char* what)
    {
        if (a.shape_ != b.shape_) {
            throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape_) + " vs " +
                                 shape_string(b.shape_));
        }
    }

private:
    void check_extents() const
    {
        for (std::size_t e : shape_) {
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

inline Tensor operator+(Tensor a, const Tensor& b)
{
    a += b;
    return a;
}

inline Tensor operator*(Tensor a, double s)
{
    a *= s;
    return a;
}

/// Forward value plus a vector-Jacobian product. `backward` maps the gradient
/// of the output to the gradients of each input, in argument order.
struct GradPair {
    Tensor value;
    std::function<std::vector<Tensor>(const Tensor&)> backward;
};

// ---------------------------------------------------------------- matmul

inline void require_rank(const Tensor& t, std::size_t rank, const char* what)
{
    if (t.rank() != rank) {
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_string(t.shape()));
    }
}

inline Tensor matmul(const Tensor& a, const Tensor& b)
{
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t p = a.extent(0), q = a.extent(1), r = b.extent(1);
    if (b.extent(0) != q) {
        throw DimensionError("matmul: inner extents disagree for " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    }
    Tensor out({p, r});
    auto A = a.data();
    auto B = b.data();
    auto C = out.data();
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t k = 0; k < q; ++k) {
            const double aik = A[i * q + k];
            if (aik == 0.0) continue;
            const double* brow = &B[k * r];
            double* crow = &C[i * r];
            for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
        }
    }
    return out;
}

inline Tensor transpose(const Tensor& a)
{
    require_rank(a, 2, "transpose");
    const std::size_t rows = a.extent(0), cols = a.extent(1);
    Tensor out({cols, rows});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out(j, i) = a(i, j);
    return out;
}

/// dA = dOut * B^T, dB = A^T * dOut.
inline std::pair<Tensor, Tensor> matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dout)
{
    return {matmul(dout, transpose(b)), matmul(transpose(a), dout)};
}

inline GradPair matmul_op(const Tensor& a, const Tensor& b)
{
    return {matmul(a, b), [a, b](const Tensor& dout) {
                auto [da, db] = matmul_backward(a, b, dout);
                return std::vector<Tensor>{std::move(da), std::move(db)};
            }};
}

// ---------------------------------------------------------------- softmax

namespace detail {

// Iterates over every 1-D slice of `shape` along `axis`, calling
// fn(offset, stride) with the flat offset of the slice's first element.
template <class Fn>
void for_each_slice(const Shape& shape, std::size_t axis, Fn&& fn)
{
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t n = shape[axis];
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) fn(o * n * inner + in, inner);
}

} // namespace detail

inline Tensor softmax_axis(const Tensor& x, std::size_t axis)
{
    if (axis >= x.rank()) {
        throw DimensionError("softmax_axis: axis " + std::to_string(axis) + " invalid for " + shape_string(x.shape()));
    }
    Tensor y = Tensor::like(x);
    const std::size_t n = x.extent(axis);
    auto X = x.data();
    auto Y = y.data();
    detail::for_each_slice(x.shape(), axis, [&](std::size_t off, std::size_t stride) {
        double m = X[off];
        for (std::size_t k = 1; k < n; ++k) m = std::max(m, X[off + k * stride]);
        double z = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            const double e = std::exp(X[off + k * stride] - m);
            Y[off + k * stride] = e;
            z += e;
        }
        for (std::size_t k = 0; k < n; ++k) Y[off + k * stride] /= z;
    });
    return y;
}

/// dx_k = y_k (dy_k - sum_j y_j dy_j) along the normalized axis.
inline Tensor softmax_axis_backward(const Tensor& y, const Tensor& dy, std::size_t axis)
{
    Tensor::require_same_shape(y, dy, "softmax_axis_backward");
    Tensor dx = Tensor::like(y);
    const std::size_t n = y.extent(axis);
    auto Y = y.data();
    auto DY = dy.data();
    auto DX = dx.data();
    detail::for_each_slice(y.shape(), axis, [&](std::size_t off, std::size_t stride) {
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += Y[off + k * stride] * DY[off + k * stride];
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t i = off + k * stride;
            DX[i] = Y[i] * (DY[i] - dot);
        }
    });
    return dx;
}

inline GradPair softmax_op(const Tensor& x, std::size_t axis)
{
    Tensor y = softmax_axis(x, axis);
    return {y, [y, axis](const Tensor& dy) { return std::vector<Tensor>{softmax_axis_backward(y, dy, axis)}; }};
}

// ---------------------------------------------------------------- elementwise

inline double sigmoid_scalar(double v)
{
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x)
{
    Tensor y = Tensor::like(x);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid_scalar(x[i]);
    return y;
}

inline Tensor sigmoid_backward(const Tensor& y, const Tensor& dy)
{
    Tensor::require_same_shape(y, dy, "sigmoid_backward");
    Tensor dx = Tensor::like(y);
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (1.0 - y[i]);
    return dx;
}

inline GradPair sigmoid_op(const Tensor& x)
{
    Tensor y = sigmoid(x);
    return {y, [y](const Tensor& dy) { return std::vector<Tensor>{sigmoid_backward(y, dy)}; }};
}

inline Tensor relu(const Tensor& x)
{
    Tensor y = Tensor::like(x);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& dy)
{
    Tensor::require_same_shape(x, dy, "relu_backward");
    Tensor dx = Tensor::like(x);
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
    return dx;
}

// ---------------------------------------------------------------- reshape

/// C x H x W -> C x (H*W); element (c, h, w) lands in column h*W + w.
inline Tensor collapse(const Tensor& f)
{
    require_rank(f, 3, "collapse");
    return f.reshaped({f.extent(0), f.extent(1) * f.extent(2)});
}

inline Tensor uncollapse(const Tensor& g, std::size_t height, std::size_t width)
{
    require_rank(g, 2, "uncollapse");
    if (g.extent(1) != height * width) {
        throw DimensionError("uncollapse: " + shape_string(g.shape()) + " cannot unfold to " + std::to_string(height) +
                             "x" + std::to_string(width));
    }
    return g.reshaped({g.extent(0), height, width});
}

// ---------------------------------------------------------------- spatial ops

/// Cross-correlation weights (Cout x Cin x KH x KW) with per-output-channel bias.
struct Kernel {
    Tensor weight;
    Tensor bias;

    std::size_t out_channels() const { return weight.extent(0); }
    std::size_t in_channels() const { return weight.extent(1); }
    std::size_t kh() const { return weight.extent(2); }
    std::size_t kw() const { return weight.extent(3); }
};

struct ConvGeometry {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

struct ConvGradients {
    Tensor input;
    Tensor weight;
    Tensor bias;
};

namespace detail {

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, const ConvGeometry& g)
{
    if (g.stride == 0) throw DimensionError("conv2d: stride must be positive");
    const std::size_t padded = in + 2 * g.padding;
    if (k > padded) {
        throw DimensionError("conv2d: kernel extent " + std::to_string(k) + " exceeds padded input " +
                             std::to_string(padded));
    }
    return (padded - k) / g.stride + 1;
}

inline void check_kernel(const Tensor& x, const Kernel& k)
{
    require_rank(x, 3, "conv2d input");
    require_rank(k.weight, 4, "conv2d weight");
    require_rank(k.bias, 1, "conv2d bias");
    if (k.in_channels() != x.extent(0)) {
        throw DimensionError("conv2d: kernel expects " + std::to_string(k.in_channels()) + " input channels, input " +
                             shape_string(x.shape()));
    }
    if (k.bias.extent(0) != k.out_channels()) {
        throw DimensionError("conv2d: bias " + shape_string(k.bias.shape()) + " does not match weight " +
                             shape_string(k.weight.shape()));
    }
}

} // namespace detail

inline Tensor conv2d(const Tensor& x, const Kernel& k, ConvGeometry g = {})
{
    detail::check_kernel(x, k);
    const std::size_t cin = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t cout = k.out_channels(), kh = k.kh(), kw = k.kw();
    const std::size_t oh = detail::conv_out_extent(h, kh, g), ow = detail::conv_out_extent(w, kw, g);
    const auto pad = static_cast<std::ptrdiff_t>(g.padding);
    const auto s = static_cast<std::ptrdiff_t>(g.stride);

    Tensor y({cout, oh, ow});
    auto X = x.data();
    auto Wt = k.weight.data();
    auto Y = y.data();
    for (std::size_t co = 0; co < cout; ++co) {
        double* yplane = &Y[co * oh * ow];
        std::fill(yplane, yplane + oh * ow, k.bias[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xplane = &X[ci * h * w];
            for (std::size_t a = 0; a < kh; ++a) {
                for (std::size_t b = 0; b < kw; ++b) {
                    const double wv = Wt[((co * cin + ci) * kh + a) * kw + b];
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s + static_cast<std::ptrdiff_t>(a) - pad;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        const double* xrow = xplane + iy * static_cast<std::ptrdiff_t>(w);
                        double* yrow = yplane + oy * ow;
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s + static_cast<std::ptrdiff_t>(b) - pad;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            yrow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    return y;
}

inline ConvGradients conv2d_backward(const Tensor& x, const Kernel& k, ConvGeometry g, const Tensor& dy)
{
    detail::check_kernel(x, k);
    const std::size_t cin = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t cout = k.out_channels(), kh = k.kh(), kw = k.kw();
    const std::size_t oh = detail::conv_out_extent(h, kh, g), ow = detail::conv_out_extent(w, kw, g);
    if (dy.shape() != Shape{cout, oh, ow}) {
        throw DimensionError("conv2d_backward: output gradient " + shape_string(dy.shape()) + ", expected " +
                             shape_string({cout, oh, ow}));
    }
    const auto pad = static_cast<std::ptrdiff_t>(g.padding);
    const auto s = static_cast<std::ptrdiff_t>(g.stride);

    ConvGradients grads{Tensor::like(x), Tensor::like(k.weight), Tensor::like(k.bias)};
    auto X = x.data();
    auto Wt = k.weight.data();
    auto DY = dy.data();
    auto DX = grads.input.data();
    auto DW = grads.weight.data();

    for (std::size_t co = 0; co < cout; ++co) {
        const double* dyplane = &DY[co * oh * ow];
        double bsum = 0.0;
        for (std::size_t i = 0; i < oh * ow; ++i) bsum += dyplane[i];
        grads.bias[co] = bsum;
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xplane = &X[ci * h * w];
            double* dxplane = &DX[ci * h * w];
            for (std::size_t a = 0; a < kh; ++a) {
                for (std::size_t b = 0; b < kw; ++b) {
                    const std::size_t widx = ((co * cin + ci) * kh + a) * kw + b;
                    const double wv = Wt[widx];
                    double wacc = 0.0;
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s + static_cast<std::ptrdiff_t>(a) - pad;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        const double* xrow = xplane + iy * static_cast<std::ptrdiff_t>(w);
                        double* dxrow = dxplane + iy * static_cast<std::ptrdiff_t>(w);
                        const double* dyrow = dyplane + oy * ow;
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s + static_cast<std::ptrdiff_t>(b) - pad;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            wacc += dyrow[ox] * xrow[ix];
                            dxrow[ix] += wv * dyrow[ox];
                        }
                    }
                    DW[widx] += wacc;
                }
            }
        }
    }
    return grads;
}

/// Nearest-neighbour upsampling of a C x H x W tensor by an integer factor.
inline Tensor upsample_nearest(const Tensor& x, std::size_t factor)
{
    require_rank(x, 3, "upsample_nearest");
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    Tensor y({c, h * factor, w * factor});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h * factor; ++i)
            for (std::size_t j = 0; j < w * factor; ++j) y(ch, i, j) = x(ch, i / factor, j / factor);
    return y;
}

inline Tensor upsample_nearest_backward(const Tensor& dy, std::size_t factor)
{
    require_rank(dy, 3, "upsample_nearest_backward");
    const std::size_t c = dy.extent(0), h = dy.extent(1) / factor, w = dy.extent(2) / factor;
    Tensor dx({c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h * factor; ++i)
            for (std::size_t j = 0; j < w * factor; ++j) dx(ch, i / factor, j / factor) += dy(ch, i, j);
    return dx;
}

// ---------------------------------------------------------------- gradient check

struct GradCheckReport {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t worst_index = 0;
    bool finite = true;
    bool passed = false;
};

/// Central finite differences (step h) of a scalar function against an
/// analytic gradient. The relative error of element i is
/// |analytic - numeric| / max(|numeric|, floor).
template <class Scalar, class Gradient>
GradCheckReport grad_check(Scalar&& f, Gradient&& analytic_grad, const Tensor& x, double tolerance,
                           double h = 1e-5, double floor = 1e-6)
{
    GradCheckReport rep;
    const Tensor analytic = analytic_grad(x);
    Tensor::require_same_shape(analytic, x, "grad_check");
    if (!analytic.all_finite()) {
        rep.finite = false;
        return rep;
    }
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = f(probe);
        probe[i] = orig - h;
        const double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            rep.finite = false;
            rep.worst_index = i;
            return rep;
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double abs_err = std::abs(analytic[i] - numeric);
        const double rel_err = abs_err / std::max(std::abs(numeric), floor);
        rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
        if (rel_err > rep.max_rel_error) {
            rep.max_rel_error = rel_err;
            rep.worst_index = i;
        }
    }
    rep.passed = rep.max_rel_error < tolerance;
    return rep;
}

/// Checks an operation's VJP on the scalar sum(w .* op(x)) for a fixed weight
/// tensor w (ones when empty), so every output element contributes.
inline GradCheckReport grad_check(const std::function<GradPair(const Tensor&)>& op, const Tensor& x, double tolerance,
                                  const Tensor& output_weights = {})
{
    auto weights_for = [&](const Tensor& y) {
        return output_weights.size() ? output_weights : Tensor::like(y, 1.0);
    };
    auto scalar = [&](const Tensor& in) {
        const Tensor y = op(in).value;
        const Tensor w = weights_for(y);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
        return s;
    };
    auto grad = [&](const Tensor& in) {
        GradPair gp = op(in);
        return gp.backward(weights_for(gp.value)).front();
    };
    return grad_check(scalar, grad, x, tolerance);
}

} // namespace prs2
