#include "cdlm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace cdlm::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
Graph<T>& graph_of(Var<T> a) {
    if (!a.graph) fail(ErrorKind::Usage, "variable is not attached to a graph");
    return *a.graph;
}

template <typename T>
Graph<T>& graph_of(Var<T> a, Var<T> b) {
    if (a.graph != b.graph) fail(ErrorKind::Usage, "operands belong to different graphs");
    return graph_of(a);
}

// Offsets into each operand for every element of the broadcast result.
struct BroadcastMap {
    Shape out;
    std::vector<std::uint32_t> a;
    std::vector<std::uint32_t> b;
    bool identity = false;
};

std::vector<std::uint32_t> offsets_for(const Shape& src, const Shape& out) {
    const std::size_t rank = out.size();
    const std::size_t pad = rank - src.size();
    std::vector<std::size_t> stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t d = rank; d-- > pad;) {
        const auto extent = src[d - pad];
        stride[d] = extent == 1 ? 0 : s;
        s *= extent;
    }
    std::vector<std::uint32_t> offs(shape_size(out));
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t k = 0; k < offs.size(); ++k) {
        offs[k] = static_cast<std::uint32_t>(off);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            off += stride[d];
            if (idx[d] < out[d]) break;
            off -= stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    return offs;
}

BroadcastMap make_broadcast(const Shape& a, const Shape& b) {
    BroadcastMap m;
    m.out = broadcast_shape(a, b);
    if (a == b) {
        m.identity = true;
        return m;
    }
    m.a = offsets_for(a, m.out);
    m.b = offsets_for(b, m.out);
    return m;
}

enum class BinOp { Add, Sub, Mul };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, BinOp op, const char* name) {
    auto& g = graph_of(a, b);
    auto map = std::make_shared<BroadcastMap>(make_broadcast(a.shape(), b.shape()));
    const auto& av = a.value();
    const auto& bv = b.value();
    Tensor<T> out(map->out);
    const std::size_t n = out.size();
    for (std::size_t k = 0; k < n; ++k) {
        const T x = map->identity ? av[k] : av[map->a[k]];
        const T y = map->identity ? bv[k] : bv[map->b[k]];
        switch (op) {
            case BinOp::Add: out[k] = x + y; break;
            case BinOp::Sub: out[k] = x - y; break;
            case BinOp::Mul: out[k] = x * y; break;
        }
    }
    const auto ia = a.id, ib = b.id;
    return g.record(name, std::move(out), {ia, ib}, [ia, ib, op, map](Graph<T>& g, std::uint32_t self) {
        const auto& gout = g.adjoint(self);
        const auto& av = g.value(ia);
        const auto& bv = g.value(ib);
        const std::size_t n = gout.size();
        if (g.active(ia)) {
            auto& ga = g.adjoint(ia);
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t oa = map->identity ? k : map->a[k];
                const std::size_t ob = map->identity ? k : map->b[k];
                ga[oa] += op == BinOp::Mul ? gout[k] * bv[ob] : gout[k];
            }
        }
        if (g.active(ib)) {
            auto& gb = g.adjoint(ib);
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t oa = map->identity ? k : map->a[k];
                const std::size_t ob = map->identity ? k : map->b[k];
                switch (op) {
                    case BinOp::Add: gb[ob] += gout[k]; break;
                    case BinOp::Sub: gb[ob] -= gout[k]; break;
                    case BinOp::Mul: gb[ob] += gout[k] * av[oa]; break;
                }
            }
        }
    });
}

// Elementwise op whose derivative is expressed through input x and output y.
template <typename T, typename Fwd, typename Deriv>
Var<T> unary(Var<T> x, const char* name, Fwd fwd, Deriv deriv) {
    auto& g = graph_of(x);
    const auto& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = fwd(xv[k]);
    const auto ix = x.id;
    return g.record(name, std::move(out), {ix}, [ix, deriv](Graph<T>& g, std::uint32_t self) {
        if (!g.active(ix)) return;
        const auto& gout = g.adjoint(self);
        const auto& xv = g.value(ix);
        const auto& yv = g.value(self);
        auto& gx = g.adjoint(ix);
        for (std::size_t k = 0; k < gout.size(); ++k) gx[k] += gout[k] * deriv(xv[k], yv[k]);
    });
}

template <typename T>
void require_positive(Var<T> x, const char* op) {
    const auto& v = x.value();
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (!(v[k] > T(0))) {
            fail(ErrorKind::Domain, std::string(op) + " of non-positive value " + std::to_string(v[k]) +
                                        " at flat index " + std::to_string(k));
        }
    }
}

// Patch geometry shared by conv2d and its transpose. The "image" side has
// `channels` planes of height x width; the column side has out_h x out_w
// window positions.
struct PatchGeometry {
    std::size_t batch, channels, height, width;
    std::size_t kh, kw, stride, pad;
    std::size_t out_h, out_w;

    std::size_t rows() const { return channels * kh * kw; }
    std::size_t positions() const { return out_h * out_w; }
    std::size_t cols() const { return batch * positions(); }
};

// cols[r, n*P + p] with r = (c*kh + ki)*kw + kj.
template <typename T>
void im2col(const PatchGeometry& geo, const T* image, T* cols) {
    const std::size_t P = geo.positions();
    const std::size_t ncols = geo.cols();
    for (std::size_t c = 0; c < geo.channels; ++c) {
        for (std::size_t ki = 0; ki < geo.kh; ++ki) {
            for (std::size_t kj = 0; kj < geo.kw; ++kj) {
                T* row = cols + ((c * geo.kh + ki) * geo.kw + kj) * ncols;
                for (std::size_t n = 0; n < geo.batch; ++n) {
                    const T* plane = image + (n * geo.channels + c) * geo.height * geo.width;
                    T* dst = row + n * P;
                    for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
                        const long iy = static_cast<long>(oy * geo.stride + ki) - static_cast<long>(geo.pad);
                        const bool row_ok = iy >= 0 && iy < static_cast<long>(geo.height);
                        for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
                            const long ix =
                                static_cast<long>(ox * geo.stride + kj) - static_cast<long>(geo.pad);
                            dst[oy * geo.out_w + ox] =
                                row_ok && ix >= 0 && ix < static_cast<long>(geo.width)
                                    ? plane[static_cast<std::size_t>(iy) * geo.width + static_cast<std::size_t>(ix)]
                                    : T(0);
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add of columns back onto the image (adjoint of im2col).
template <typename T>
void col2im(const PatchGeometry& geo, const T* cols, T* image) {
    const std::size_t P = geo.positions();
    const std::size_t ncols = geo.cols();
    for (std::size_t c = 0; c < geo.channels; ++c) {
        for (std::size_t ki = 0; ki < geo.kh; ++ki) {
            for (std::size_t kj = 0; kj < geo.kw; ++kj) {
                const T* row = cols + ((c * geo.kh + ki) * geo.kw + kj) * ncols;
                for (std::size_t n = 0; n < geo.batch; ++n) {
                    T* plane = image + (n * geo.channels + c) * geo.height * geo.width;
                    const T* src = row + n * P;
                    for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
                        const long iy = static_cast<long>(oy * geo.stride + ki) - static_cast<long>(geo.pad);
                        if (iy < 0 || iy >= static_cast<long>(geo.height)) continue;
                        for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
                            const long ix =
                                static_cast<long>(ox * geo.stride + kj) - static_cast<long>(geo.pad);
                            if (ix < 0 || ix >= static_cast<long>(geo.width)) continue;
                            plane[static_cast<std::size_t>(iy) * geo.width + static_cast<std::size_t>(ix)] +=
                                src[oy * geo.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

// [n, ch, P] <-> [ch, n*P]
template <typename T>
void nchw_to_channel_major(const T* src, T* dst, std::size_t n, std::size_t ch, std::size_t P) {
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < ch; ++c)
            std::copy_n(src + (b * ch + c) * P, P, dst + c * n * P + b * P);
}

template <typename T>
void channel_major_to_nchw(const T* src, T* dst, std::size_t n, std::size_t ch, std::size_t P) {
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < ch; ++c)
            std::copy_n(src + c * n * P + b * P, P, dst + (b * ch + c) * P);
}

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
    if (s.size() != rank) {
        fail(ErrorKind::Dimension, std::string(op) + ": " + what + " must have rank " +
                                       std::to_string(rank) + ", got " + shape_str(s));
    }
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t d = 0; d < rank; ++d) {
        const std::size_t da = d + a.size() >= rank ? a[d + a.size() - rank] : 1;
        const std::size_t db = d + b.size() >= rank ? b[d + b.size() - rank] : 1;
        if (da != db && da != 1 && db != 1) {
            fail(ErrorKind::Dimension,
                 "shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcast-compatible");
        }
        out[d] = std::max(da, db);
    }
    return out;
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    return binary(a, b, BinOp::Add, "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    return binary(a, b, BinOp::Sub, "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    return binary(a, b, BinOp::Mul, "mul");
}

template <typename T>
Var<T> broadcast_to(Var<T> x, const Shape& shape) {
    auto& g = graph_of(x);
    if (broadcast_shape(x.shape(), shape) != shape) {
        fail(ErrorKind::Dimension, "cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    auto offs = std::make_shared<std::vector<std::uint32_t>>(offsets_for(x.shape(), shape));
    const auto& xv = x.value();
    Tensor<T> out(shape);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = xv[(*offs)[k]];
    const auto ix = x.id;
    return g.record("broadcast_to", std::move(out), {ix}, [ix, offs](Graph<T>& g, std::uint32_t self) {
        if (!g.active(ix)) return;
        const auto& gout = g.adjoint(self);
        auto& gx = g.adjoint(ix);
        for (std::size_t k = 0; k < gout.size(); ++k) gx[(*offs)[k]] += gout[k];
    });
}

template <typename T>
Var<T> scale(Var<T> x, double factor) {
    const T f = static_cast<T>(factor);
    return unary(x, "scale", [f](T v) { return f * v; }, [f](T, T) { return f; });
}

template <typename T>
Var<T> add_scalar(Var<T> x, double value) {
    const T c = static_cast<T>(value);
    return unary(x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> exp(Var<T> x) {
    return unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> x) {
    require_positive(x, "log");
    return unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    constexpr T lo = std::numeric_limits<T>::epsilon();
    constexpr T hi = T(1) - std::numeric_limits<T>::epsilon();
    return unary(
        x, "sigmoid",
        [=](T v) {
            const T y = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
            return std::clamp(y, lo, hi);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(Var<T> x) {
    return unary(x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> leaky_relu(Var<T> x, double slope) {
    const T s = static_cast<T>(slope);
    return unary(
        x, "leaky_relu", [s](T v) { return v > T(0) ? v : s * v; },
        [s](T v, T) { return v > T(0) ? T(1) : s; });
}

template <typename T>
Var<T> square(Var<T> x) {
    return unary(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Var<T> sqrt(Var<T> x) {
    require_positive(x, "sqrt");
    return unary(x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Var<T> sum(Var<T> x) {
    auto& g = graph_of(x);
    T acc = T(0);
    for (T v : x.value().data()) acc += v;
    const auto ix = x.id;
    return g.record("sum", Tensor<T>({1}, std::vector<T>{acc}), {ix}, [ix](Graph<T>& g, std::uint32_t self) {
        if (!g.active(ix)) return;
        const T gout = g.adjoint(self)[0];
        for (auto& v : g.adjoint(ix)) v += gout;
    });
}

template <typename T>
Var<T> mean(Var<T> x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

template <typename T>
Var<T> mean_rows(Var<T> x) {
    auto& g = graph_of(x);
    const auto& shape = x.shape();
    if (shape.empty()) fail(ErrorKind::Dimension, "mean_rows needs rank >= 1");
    const std::size_t rows = shape[0];
    Shape out_shape(shape.begin() + 1, shape.end());
    if (out_shape.empty()) out_shape = {1};
    const std::size_t width = x.size() / rows;
    const auto& xv = x.value();
    Tensor<T> out(out_shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < width; ++c) out[c] += xv[r * width + c];
    for (auto& v : out.data()) v /= static_cast<T>(rows);
    const auto ix = x.id;
    return g.record("mean_rows", std::move(out), {ix}, [ix, rows, width](Graph<T>& g, std::uint32_t self) {
        if (!g.active(ix)) return;
        const auto& gout = g.adjoint(self);
        auto& gx = g.adjoint(ix);
        const T inv = T(1) / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < width; ++c) gx[r * width + c] += gout[c] * inv;
    });
}

template <typename T>
Var<T> reshape(Var<T> x, const Shape& shape) {
    auto& g = graph_of(x);
    Tensor<T> out = x.value().reshaped(shape);
    const auto ix = x.id;
    return g.record("reshape", std::move(out), {ix}, [ix](Graph<T>& g, std::uint32_t self) {
        if (!g.active(ix)) return;
        const auto& gout = g.adjoint(self);
        auto& gx = g.adjoint(ix);
        for (std::size_t k = 0; k < gout.size(); ++k) gx[k] += gout[k];
    });
}

template <typename T>
Var<T> flatten(Var<T> x) {
    const auto& s = x.shape();
    if (s.empty()) fail(ErrorKind::Dimension, "flatten needs rank >= 1");
    return reshape(x, {s[0], x.size() / s[0]});
}

template <typename T>
Var<T> detach(Var<T> x) {
    return graph_of(x).input(x.value());
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    auto& g = graph_of(a, b);
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
        fail(ErrorKind::Dimension, "matmul: cannot multiply " + shape_str(sa) + " by " + shape_str(sb));
    }
    const auto m = static_cast<Eigen::Index>(sa[0]);
    const auto k = static_cast<Eigen::Index>(sa[1]);
    const auto n = static_cast<Eigen::Index>(sb[1]);
    Tensor<T> out({sa[0], sb[1]});
    MapMat<T>(out.data().data(), m, n).noalias() =
        ConstMapMat<T>(a.value().data().data(), m, k) * ConstMapMat<T>(b.value().data().data(), k, n);
    const auto ia = a.id, ib = b.id;
    return g.record("matmul", std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph<T>& g, std::uint32_t self) {
        ConstMapMat<T> gout(g.adjoint(self).data(), m, n);
        if (g.active(ia)) {
            MapMat<T>(g.adjoint(ia).data(), m, k).noalias() +=
                gout * ConstMapMat<T>(g.value(ib).data().data(), k, n).transpose();
        }
        if (g.active(ib)) {
            MapMat<T>(g.adjoint(ib).data(), k, n).noalias() +=
                ConstMapMat<T>(g.value(ia).data().data(), m, k).transpose() * gout;
        }
    });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    const auto& sb = b.shape();
    if (sb.size() != 1 || w.shape().size() != 2 || sb[0] != w.shape()[1]) {
        fail(ErrorKind::Dimension,
             "linear: bias " + shape_str(sb) + " does not match weight " + shape_str(w.shape()));
    }
    return add(matmul(x, w), b);
}

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, int stride, int padding) {
    auto& g = graph_of(input, kernel);
    const auto& si = input.shape();
    const auto& sk = kernel.shape();
    require_rank(si, 4, "conv2d", "input");
    require_rank(sk, 4, "conv2d", "kernel");
    if (si[1] != sk[1]) {
        fail(ErrorKind::Dimension, "conv2d: input " + shape_str(si) + " has " + std::to_string(si[1]) +
                                       " channels but kernel " + shape_str(sk) + " expects " +
                                       std::to_string(sk[1]));
    }
    if (stride <= 0 || padding < 0) {
        fail(ErrorKind::Configuration, "conv2d: stride must be positive and padding non-negative");
    }
    const long span_h = static_cast<long>(si[2]) + 2 * padding - static_cast<long>(sk[2]);
    const long span_w = static_cast<long>(si[3]) + 2 * padding - static_cast<long>(sk[3]);
    if (span_h < 0 || span_w < 0) {
        fail(ErrorKind::Configuration, "conv2d: kernel " + shape_str(sk) + " with padding " +
                                           std::to_string(padding) + " yields a non-positive output for input " +
                                           shape_str(si));
    }
    PatchGeometry geo{si[0], si[1], si[2], si[3], sk[2], sk[3],
                      static_cast<std::size_t>(stride), static_cast<std::size_t>(padding),
                      static_cast<std::size_t>(span_h / stride + 1), static_cast<std::size_t>(span_w / stride + 1)};
    const std::size_t O = sk[0];

    auto cols = std::make_shared<std::vector<T>>(geo.rows() * geo.cols());
    im2col(geo, input.value().data().data(), cols->data());
    std::vector<T> out_cm(O * geo.cols());
    MapMat<T>(out_cm.data(), O, geo.cols()).noalias() =
        ConstMapMat<T>(kernel.value().data().data(), O, geo.rows()) *
        ConstMapMat<T>(cols->data(), geo.rows(), geo.cols());
    Tensor<T> out({geo.batch, O, geo.out_h, geo.out_w});
    channel_major_to_nchw(out_cm.data(), out.data().data(), geo.batch, O, geo.positions());

    const auto ii = input.id, ik = kernel.id;
    return g.record("conv2d", std::move(out), {ii, ik}, [ii, ik, geo, O, cols](Graph<T>& g, std::uint32_t self) {
        std::vector<T> gout_cm(O * geo.cols());
        nchw_to_channel_major(g.adjoint(self).data(), gout_cm.data(), geo.batch, O, geo.positions());
        ConstMapMat<T> gout(gout_cm.data(), O, geo.cols());
        if (g.active(ik)) {
            MapMat<T>(g.adjoint(ik).data(), O, geo.rows()).noalias() +=
                gout * ConstMapMat<T>(cols->data(), geo.rows(), geo.cols()).transpose();
        }
        if (g.active(ii)) {
            std::vector<T> gcols(geo.rows() * geo.cols());
            MapMat<T>(gcols.data(), geo.rows(), geo.cols()).noalias() =
                ConstMapMat<T>(g.value(ik).data().data(), O, geo.rows()).transpose() * gout;
            col2im(geo, gcols.data(), g.adjoint(ii).data());
        }
    });
}

template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
    const auto& sx = x.shape();
    require_rank(sx, 4, "add_channel_bias", "input");
    if (bias.shape().size() != 1 || bias.shape()[0] != sx[1]) {
        fail(ErrorKind::Dimension,
             "add_channel_bias: bias " + shape_str(bias.shape()) + " does not match input " + shape_str(sx));
    }
    return add(x, reshape(bias, {sx[1], 1, 1}));
}

template <typename T>
Var<T> conv_transpose2d(Var<T> input, Var<T> kernel, int stride, int padding) {
    auto& g = graph_of(input, kernel);
    const auto& si = input.shape();
    const auto& sk = kernel.shape();
    require_rank(si, 4, "conv_transpose2d", "input");
    require_rank(sk, 4, "conv_transpose2d", "kernel");
    if (si[1] != sk[0]) {
        fail(ErrorKind::Dimension, "conv_transpose2d: input " + shape_str(si) + " has " +
                                       std::to_string(si[1]) + " channels but kernel " + shape_str(sk) +
                                       " expects " + std::to_string(sk[0]));
    }
    if (stride <= 0 || padding < 0) {
        fail(ErrorKind::Configuration, "conv_transpose2d: stride must be positive and padding non-negative");
    }
    const long oh = (static_cast<long>(si[2]) - 1) * stride - 2 * padding + static_cast<long>(sk[2]);
    const long ow = (static_cast<long>(si[3]) - 1) * stride - 2 * padding + static_cast<long>(sk[3]);
    if (oh <= 0 || ow <= 0) {
        fail(ErrorKind::Configuration,
             "conv_transpose2d: non-positive output extent for input " + shape_str(si));
    }
    const std::size_t C = si[1];
    const std::size_t O = sk[1];
    // The output plays the image role; the input grid is the window grid.
    PatchGeometry geo{si[0], O, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), sk[2], sk[3],
                      static_cast<std::size_t>(stride), static_cast<std::size_t>(padding), si[2], si[3]};

    auto x_cm = std::make_shared<std::vector<T>>(C * geo.cols());
    nchw_to_channel_major(input.value().data().data(), x_cm->data(), geo.batch, C, geo.positions());
    std::vector<T> cols(geo.rows() * geo.cols());
    MapMat<T>(cols.data(), geo.rows(), geo.cols()).noalias() =
        ConstMapMat<T>(kernel.value().data().data(), C, geo.rows()).transpose() *
        ConstMapMat<T>(x_cm->data(), C, geo.cols());
    Tensor<T> out({geo.batch, O, geo.height, geo.width});
    col2im(geo, cols.data(), out.data().data());

    const auto ii = input.id, ik = kernel.id;
    return g.record("conv_transpose2d", std::move(out), {ii, ik},
                    [ii, ik, geo, C, x_cm](Graph<T>& g, std::uint32_t self) {
                        std::vector<T> gcols(geo.rows() * geo.cols());
                        im2col(geo, g.adjoint(self).data(), gcols.data());
                        ConstMapMat<T> gc(gcols.data(), geo.rows(), geo.cols());
                        if (g.active(ik)) {
                            MapMat<T>(g.adjoint(ik).data(), C, geo.rows()).noalias() +=
                                ConstMapMat<T>(x_cm->data(), C, geo.cols()) * gc.transpose();
                        }
                        if (g.active(ii)) {
                            std::vector<T> gx_cm(C * geo.cols());
                            MapMat<T>(gx_cm.data(), C, geo.cols()).noalias() =
                                ConstMapMat<T>(g.value(ik).data().data(), C, geo.rows()) * gc;
                            std::vector<T> gx(gx_cm.size());
                            channel_major_to_nchw(gx_cm.data(), gx.data(), geo.batch, C, geo.positions());
                            auto& dst = g.adjoint(ii);
                            for (std::size_t k = 0; k < gx.size(); ++k) dst[k] += gx[k];
                        }
                    });
}

template <typename T>
Var<T> grad_reverse(Var<T> x, double scale) {
    if (!(scale >= 0.0)) fail(ErrorKind::Usage, "grad_reverse scale must be non-negative");
    auto& g = graph_of(x);
    const auto ix = x.id;
    const T s = static_cast<T>(scale);
    return g.record("grad_reverse", x.value(), {ix}, [ix, s](Graph<T>& g, std::uint32_t self) {
        if (!g.active(ix)) return;
        const auto& gout = g.adjoint(self);
        auto& gx = g.adjoint(ix);
        for (std::size_t k = 0; k < gout.size(); ++k) gx[k] -= s * gout[k];
    });
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels) {
    auto& g = graph_of(logits);
    const auto& s = logits.shape();
    require_rank(s, 2, "softmax_cross_entropy", "logits");
    const std::size_t n = s[0], k = s[1];
    if (labels.size() != n) {
        fail(ErrorKind::Dimension, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                       " labels for logits " + shape_str(s));
    }
    auto probs = std::make_shared<std::vector<T>>(n * k);
    auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
    const auto& lv = logits.value();
    T loss = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = (*lab)[i];
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            fail(ErrorKind::Domain, "softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                        std::to_string(k) + ")");
        }
        const T* row = lv.data().data() + i * k;
        const T mx = *std::max_element(row, row + k);
        T z = T(0);
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const T logz = mx + std::log(z);
        for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - logz);
        loss -= row[y] - logz;
    }
    loss /= static_cast<T>(n);
    const auto il = logits.id;
    return g.record("softmax_cross_entropy", Tensor<T>({1}, std::vector<T>{loss}), {il},
                    [il, probs, lab, n, k](Graph<T>& g, std::uint32_t self) {
                        if (!g.active(il)) return;
                        const T gout = g.adjoint(self)[0] / static_cast<T>(n);
                        auto& gl = g.adjoint(il);
                        for (std::size_t i = 0; i < n; ++i) {
                            for (std::size_t j = 0; j < k; ++j) {
                                const T onehot = static_cast<int>(j) == (*lab)[i] ? T(1) : T(0);
                                gl[i * k + j] += gout * ((*probs)[i * k + j] - onehot);
                            }
                        }
                    });
}

#define CDLM_INSTANTIATE_OPS(T)                                                  \
    template Var<T> add(Var<T>, Var<T>);                                         \
    template Var<T> sub(Var<T>, Var<T>);                                         \
    template Var<T> mul(Var<T>, Var<T>);                                         \
    template Var<T> broadcast_to(Var<T>, const Shape&);                          \
    template Var<T> scale(Var<T>, double);                                       \
    template Var<T> add_scalar(Var<T>, double);                                  \
    template Var<T> exp(Var<T>);                                                 \
    template Var<T> log(Var<T>);                                                 \
    template Var<T> sigmoid(Var<T>);                                             \
    template Var<T> tanh(Var<T>);                                                \
    template Var<T> leaky_relu(Var<T>, double);                                  \
    template Var<T> square(Var<T>);                                              \
    template Var<T> sqrt(Var<T>);                                                \
    template Var<T> sum(Var<T>);                                                 \
    template Var<T> mean(Var<T>);                                                \
    template Var<T> mean_rows(Var<T>);                                           \
    template Var<T> reshape(Var<T>, const Shape&);                               \
    template Var<T> flatten(Var<T>);                                             \
    template Var<T> detach(Var<T>);                                              \
    template Var<T> matmul(Var<T>, Var<T>);                                      \
    template Var<T> linear(Var<T>, Var<T>, Var<T>);                              \
    template Var<T> conv2d(Var<T>, Var<T>, int, int);                            \
    template Var<T> add_channel_bias(Var<T>, Var<T>);                            \
    template Var<T> conv_transpose2d(Var<T>, Var<T>, int, int);                  \
    template Var<T> grad_reverse(Var<T>, double);                                \
    template Var<T> softmax_cross_entropy(Var<T>, std::span<const int>);

CDLM_INSTANTIATE_OPS(float)
CDLM_INSTANTIATE_OPS(double)

#undef CDLM_INSTANTIATE_OPS

}  // namespace cdlm::ops
