#include "dfmad/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <string>
#include <unordered_set>

#include <cblas.h>

#include "dfmad/error.hpp"

namespace dfmad {

namespace {

thread_local bool g_grad_enabled = true;

void check_finite(const Tensor& t, std::string_view op)
{
    if (!t.all_finite()) {
        throw NumericError("non-finite value produced by '" + std::string(op) + "' (output shape " +
                           shape_str(t.shape()) + ")");
    }
}

Var make_node(Tensor value, std::string_view op, std::vector<Var> parents, std::function<void(Node&)> rule)
{
    check_finite(value, op);
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    bool needs_grad = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) {
            needs_grad = needs_grad || p->requires_grad;
        }
    }
    if (needs_grad) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_rule = std::move(rule);
    }
    return node;
}

void accumulate(Node& node, Tensor g)
{
    if (!node.requires_grad) {
        return;
    }
    if (!node.has_grad()) {
        node.grad = std::move(g);
        return;
    }
    auto dst = node.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
}

void require_matrix(const Tensor& t, std::string_view op)
{
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
    }
}

bool is_suffix(const Shape& small, const Shape& big)
{
    std::size_t first = 0;
    while (first < small.size() && small[first] == 1) {
        ++first;
    }
    const std::size_t len = small.size() - first;
    if (len > big.size()) {
        return false;
    }
    return std::equal(small.begin() + static_cast<std::ptrdiff_t>(first), small.end(),
                      big.end() - static_cast<std::ptrdiff_t>(len));
}

Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op)
{
    if (a == b) {
        return a;
    }
    const std::size_t na = shape_numel(a);
    const std::size_t nb = shape_numel(b);
    if (nb == 1 || (na >= nb && is_suffix(b, a))) {
        return a;
    }
    if (na == 1 || is_suffix(a, b)) {
        return b;
    }
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// Sums a broadcast gradient back down to an operand of `n` elements.
Tensor reduce_to(const Tensor& g, const Shape& shape)
{
    const std::size_t n = shape_numel(shape);
    if (n == g.numel()) {
        return g.reshaped(shape);
    }
    Tensor out(shape);
    auto src = g.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i % n] += src[i];
    }
    return out;
}

std::string_view binary_name(ElementwiseOp op)
{
    switch (op) {
    case ElementwiseOp::Add:
        return "add";
    case ElementwiseOp::Subtract:
        return "subtract";
    case ElementwiseOp::Multiply:
        return "multiply";
    case ElementwiseOp::Divide:
        return "divide";
    default:
        return "elementwise";
    }
}

Var binary(ElementwiseOp op, const Var& a, const Var& b)
{
    const std::string_view name = binary_name(op);
    const Shape out_shape = broadcast_shape(a->value.shape(), b->value.shape(), name);
    Tensor out(out_shape);
    const auto av = a->value.data();
    const auto bv = b->value.data();
    const std::size_t na = av.size();
    const std::size_t nb = bv.size();
    auto ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        const double x = av[i % na];
        const double y = bv[i % nb];
        switch (op) {
        case ElementwiseOp::Add:
            ov[i] = x + y;
            break;
        case ElementwiseOp::Subtract:
            ov[i] = x - y;
            break;
        case ElementwiseOp::Multiply:
            ov[i] = x * y;
            break;
        case ElementwiseOp::Divide:
            if (y == 0.0) {
                throw DomainError("divide: division by zero");
            }
            ov[i] = x / y;
            break;
        default:
            throw ContractError("not a binary op");
        }
    }
    return make_node(std::move(out), name, {a, b}, [op](Node& self) {
        const Node& pa = *self.parents[0];
        const Node& pb = *self.parents[1];
        const auto g = self.grad.data();
        const auto av = pa.value.data();
        const auto bv = pb.value.data();
        const std::size_t na = av.size();
        const std::size_t nb = bv.size();
        Tensor ga(self.value.shape());
        Tensor gb(self.value.shape());
        auto gav = ga.data();
        auto gbv = gb.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = av[i % na];
            const double y = bv[i % nb];
            switch (op) {
            case ElementwiseOp::Add:
                gav[i] = g[i];
                gbv[i] = g[i];
                break;
            case ElementwiseOp::Subtract:
                gav[i] = g[i];
                gbv[i] = -g[i];
                break;
            case ElementwiseOp::Multiply:
                gav[i] = g[i] * y;
                gbv[i] = g[i] * x;
                break;
            default:
                gav[i] = g[i] / y;
                gbv[i] = -g[i] * x / (y * y);
                break;
            }
        }
        if (pa.requires_grad) {
            accumulate(*self.parents[0], reduce_to(ga, pa.value.shape()));
        }
        if (pb.requires_grad) {
            accumulate(*self.parents[1], reduce_to(gb, pb.value.shape()));
        }
    });
}

// Unary op from a value function and a derivative expressed in terms of input
// x and output y.
template <typename Fn, typename Deriv>
Var unary(const Var& a, std::string_view name, Fn fn, Deriv deriv)
{
    Tensor out(a->value.shape());
    const auto av = a->value.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        ov[i] = fn(av[i]);
    }
    return make_node(std::move(out), name, {a}, [deriv](Node& self) {
        Node& pa = *self.parents[0];
        const auto g = self.grad.data();
        const auto x = pa.value.data();
        const auto y = self.value.data();
        Tensor ga(pa.value.shape());
        auto gav = ga.data();
        for (std::size_t i = 0; i < gav.size(); ++i) {
            gav[i] = g[i] * deriv(x[i], y[i]);
        }
        accumulate(pa, std::move(ga));
    });
}

double stable_sigmoid(double x)
{
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Dense products go through single-threaded BLAS. Every call accumulates into C.
void pin_blas_threads()
{
    static std::once_flag once;
    std::call_once(once, [] { openblas_set_num_threads(1); });
}

int blas_dim(std::size_t v)
{
    return static_cast<int>(v);
}

// C += A . B with A [m x k], B [k x n].
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
             std::size_t k, std::size_t n)
{
    pin_blas_threads();
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_dim(m), blas_dim(n), blas_dim(k), 1.0, a.data(),
                blas_dim(k), b.data(), blas_dim(n), 1.0, c.data(), blas_dim(n));
}

// C += A . B^T with A [m x k], B [n x k].
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
             std::size_t k, std::size_t n)
{
    pin_blas_threads();
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_dim(m), blas_dim(n), blas_dim(k), 1.0, a.data(),
                blas_dim(k), b.data(), blas_dim(k), 1.0, c.data(), blas_dim(n));
}

// C += A^T . B with A [k x m], B [k x n].
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
             std::size_t k, std::size_t n)
{
    pin_blas_threads();
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_dim(m), blas_dim(n), blas_dim(k), 1.0, a.data(),
                blas_dim(m), b.data(), blas_dim(n), 1.0, c.data(), blas_dim(n));
}

} // namespace

Var constant(Tensor value)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = "constant";
    return node;
}

Var parameter(Tensor value)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->op = "parameter";
    return node;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled)
{
    g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard()
{
    g_grad_enabled = previous_;
}

bool grad_enabled() noexcept
{
    return g_grad_enabled;
}

Var elementwise(ElementwiseOp op, const Var& a, const Var& b)
{
    switch (op) {
    case ElementwiseOp::Add:
    case ElementwiseOp::Subtract:
    case ElementwiseOp::Multiply:
    case ElementwiseOp::Divide:
        if (!b) {
            throw ContractError("binary elementwise op needs two operands");
        }
        return binary(op, a, b);
    case ElementwiseOp::Sigmoid:
        return unary(a, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
    case ElementwiseOp::Gelu:
        return unary(
            a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); },
            [](double x, double) {
                const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
                const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
                return cdf + x * pdf;
            });
    case ElementwiseOp::Log:
        for (double v : a->value.data()) {
            if (!(v > 0.0)) {
                throw DomainError("log: non-positive input " + std::to_string(v));
            }
        }
        return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
    case ElementwiseOp::Exp:
        return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
    case ElementwiseOp::Negate:
        return unary(a, "negate", [](double x) { return -x; }, [](double, double) { return -1.0; });
    }
    throw ContractError("unknown elementwise op");
}

Var add(const Var& a, const Var& b)
{
    return elementwise(ElementwiseOp::Add, a, b);
}

Var sub(const Var& a, const Var& b)
{
    return elementwise(ElementwiseOp::Subtract, a, b);
}

Var mul(const Var& a, const Var& b)
{
    return elementwise(ElementwiseOp::Multiply, a, b);
}

Var div(const Var& a, const Var& b)
{
    return elementwise(ElementwiseOp::Divide, a, b);
}

Var neg(const Var& a)
{
    return elementwise(ElementwiseOp::Negate, a);
}

Var sigmoid(const Var& a)
{
    return elementwise(ElementwiseOp::Sigmoid, a);
}

Var gelu(const Var& a)
{
    return elementwise(ElementwiseOp::Gelu, a);
}

Var log(const Var& a)
{
    return elementwise(ElementwiseOp::Log, a);
}

Var exp(const Var& a)
{
    return elementwise(ElementwiseOp::Exp, a);
}

Var pow(const Var& a, double exponent)
{
    const bool integral = std::floor(exponent) == exponent;
    for (double v : a->value.data()) {
        if ((!integral && v < 0.0) || (exponent < 1.0 && v == 0.0 && exponent != 0.0)) {
            throw DomainError("pow: base " + std::to_string(v) + " outside domain for exponent " +
                              std::to_string(exponent));
        }
    }
    return unary(
        a, "pow", [exponent](double x) { return std::pow(x, exponent); },
        [exponent](double x, double) { return exponent == 0.0 ? 0.0 : exponent * std::pow(x, exponent - 1.0); });
}

Var scale(const Var& a, double factor)
{
    return unary(a, "scale", [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Var add_scalar(const Var& a, double value)
{
    return unary(a, "add_scalar", [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Var clamp(const Var& a, double lo, double hi)
{
    return unary(
        a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var matmul(const Var& a, const Var& b)
{
    require_matrix(a->value, "matmul");
    require_matrix(b->value, "matmul");
    const std::size_t m = a->value.dim(0);
    const std::size_t k = a->value.dim(1);
    const std::size_t n = b->value.dim(1);
    if (b->value.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a->value.shape()) + " . " +
                         shape_str(b->value.shape()));
    }
    Tensor out({m, n});
    gemm_nn(a->value.data(), b->value.data(), out.data(), m, k, n);
    return make_node(std::move(out), "matmul", {a, b}, [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            Tensor ga({m, k});
            gemm_nt(self.grad.data(), pb.value.data(), ga.data(), m, n, k);
            accumulate(pa, std::move(ga));
        }
        if (pb.requires_grad) {
            Tensor gb({k, n});
            gemm_tn(pa.value.data(), self.grad.data(), gb.data(), k, m, n);
            accumulate(pb, std::move(gb));
        }
    });
}

Var transpose(const Var& a)
{
    require_matrix(a->value, "transpose");
    const std::size_t r = a->value.dim(0);
    const std::size_t c = a->value.dim(1);
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out.at(j, i) = a->value.at(i, j);
        }
    }
    return make_node(std::move(out), "transpose", {a}, [r, c](Node& self) {
        Tensor ga({r, c});
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                ga.at(i, j) = self.grad.at(j, i);
            }
        }
        accumulate(*self.parents[0], std::move(ga));
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias)
{
    require_matrix(weight->value, "linear");
    const bool vector_input = x->value.rank() == 1;
    if (!vector_input && x->value.rank() != 2) {
        throw ShapeError("linear expects a vector or matrix input, got " + shape_str(x->value.shape()));
    }
    const std::size_t t = vector_input ? 1 : x->value.dim(0);
    const std::size_t k = x->value.shape().back();
    const std::size_t n = weight->value.dim(0);
    if (weight->value.dim(1) != k) {
        throw ShapeError("linear: input " + shape_str(x->value.shape()) + " does not match weight " +
                         shape_str(weight->value.shape()));
    }
    if (bias && bias->value.numel() != n) {
        throw ShapeError("linear: bias " + shape_str(bias->value.shape()) + " does not match " + std::to_string(n) +
                         " outputs");
    }
    Tensor out(vector_input ? Shape{n} : Shape{t, n});
    gemm_nt(x->value.data(), weight->value.data(), out.data(), t, k, n);
    if (bias) {
        auto ov = out.data();
        const auto bv = bias->value.data();
        for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                ov[i * n + j] += bv[j];
            }
        }
    }
    std::vector<Var> parents{x, weight};
    if (bias) {
        parents.push_back(bias);
    }
    return make_node(std::move(out), "linear", std::move(parents), [t, k, n](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        const auto g = self.grad.data();
        if (px.requires_grad) {
            Tensor gx(px.value.shape());
            gemm_nn(g, pw.value.data(), gx.data(), t, n, k);
            accumulate(px, std::move(gx));
        }
        if (pw.requires_grad) {
            Tensor gw({n, k});
            gemm_tn(g, px.value.data(), gw.data(), n, t, k);
            accumulate(pw, std::move(gw));
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            Node& pb = *self.parents[2];
            Tensor gb(pb.value.shape());
            auto gbv = gb.data();
            for (std::size_t i = 0; i < t; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    gbv[j] += g[i * n + j];
                }
            }
            accumulate(pb, std::move(gb));
        }
    });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps)
{
    if (!(eps > 0.0)) {
        throw ConfigError("layer_norm: eps must be positive, got " + std::to_string(eps));
    }
    if (x->value.rank() == 0) {
        throw ShapeError("layer_norm needs at least one axis");
    }
    const std::size_t width = x->value.shape().back();
    const std::size_t rows = x->value.numel() / width;
    if (gain->value.numel() != width || bias->value.numel() != width) {
        throw ShapeError("layer_norm: gain " + shape_str(gain->value.shape()) + " / bias " +
                         shape_str(bias->value.shape()) + " do not match last axis of " +
                         shape_str(x->value.shape()));
    }
    Tensor normalized(x->value.shape());
    std::vector<double> inv_std(rows);
    Tensor out(x->value.shape());
    const auto xv = x->value.data();
    const auto gv = gain->value.data();
    const auto bv = bias->value.data();
    auto nv = normalized.data();
    auto ov = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * width;
        double mu = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            mu += xr[j];
        }
        mu /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            var += (xr[j] - mu) * (xr[j] - mu);
        }
        var /= static_cast<double>(width);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t j = 0; j < width; ++j) {
            const double xhat = (xr[j] - mu) * inv;
            nv[r * width + j] = xhat;
            ov[r * width + j] = xhat * gv[j] + bv[j];
        }
    }
    return make_node(std::move(out), "layer_norm", {x, gain, bias},
                     [rows, width, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node& self) {
                         Node& px = *self.parents[0];
                         Node& pg = *self.parents[1];
                         Node& pb = *self.parents[2];
                         const auto g = self.grad.data();
                         const auto nv = normalized.data();
                         const auto gv = pg.value.data();
                         if (px.requires_grad) {
                             Tensor gx(px.value.shape());
                             auto gxv = gx.data();
                             const double w = static_cast<double>(width);
                             for (std::size_t r = 0; r < rows; ++r) {
                                 double sum_d = 0.0;
                                 double sum_dx = 0.0;
                                 for (std::size_t j = 0; j < width; ++j) {
                                     const double d = g[r * width + j] * gv[j];
                                     sum_d += d;
                                     sum_dx += d * nv[r * width + j];
                                 }
                                 for (std::size_t j = 0; j < width; ++j) {
                                     const double d = g[r * width + j] * gv[j];
                                     gxv[r * width + j] =
                                         inv_std[r] / w * (w * d - sum_d - nv[r * width + j] * sum_dx);
                                 }
                             }
                             accumulate(px, std::move(gx));
                         }
                         if (pg.requires_grad || pb.requires_grad) {
                             Tensor gg(pg.value.shape());
                             Tensor gb(pb.value.shape());
                             auto ggv = gg.data();
                             auto gbv = gb.data();
                             for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t j = 0; j < width; ++j) {
                                     ggv[j] += g[r * width + j] * nv[r * width + j];
                                     gbv[j] += g[r * width + j];
                                 }
                             }
                             accumulate(pg, std::move(gg));
                             accumulate(pb, std::move(gb));
                         }
                     });
}

Var softmax(const Var& x, std::size_t axis)
{
    const Shape& shape = x->value.shape();
    if (axis >= shape.size()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    }
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= shape[i];
    }
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < shape.size(); ++i) {
        inner *= shape[i];
    }
    const std::size_t len = shape[axis];
    Tensor out(shape);
    const auto xv = x->value.data();
    auto ov = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double m = xv[base];
            for (std::size_t j = 1; j < len; ++j) {
                m = std::max(m, xv[base + j * inner]);
            }
            double s = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(xv[base + j * inner] - m);
                ov[base + j * inner] = e;
                s += e;
            }
            for (std::size_t j = 0; j < len; ++j) {
                ov[base + j * inner] /= s;
            }
        }
    }
    return make_node(std::move(out), "softmax", {x}, [outer, inner, len](Node& self) {
        Node& px = *self.parents[0];
        const auto g = self.grad.data();
        const auto y = self.value.data();
        Tensor gx(px.value.shape());
        auto gxv = gx.data();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) {
                    dot += g[base + j * inner] * y[base + j * inner];
                }
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t idx = base + j * inner;
                    gxv[idx] = y[idx] * (g[idx] - dot);
                }
            }
        }
        accumulate(px, std::move(gx));
    });
}

Var sum(const Var& x)
{
    double s = 0.0;
    for (double v : x->value.data()) {
        s += v;
    }
    return make_node(Tensor::scalar(s), "sum", {x}, [](Node& self) {
        Node& px = *self.parents[0];
        accumulate(px, Tensor(px.value.shape(), self.grad.item()));
    });
}

Var mean(const Var& x)
{
    return scale(sum(x), 1.0 / static_cast<double>(x->value.numel()));
}

Var reshape(const Var& x, Shape shape)
{
    if (shape_numel(shape) != x->value.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x->value.shape()) + " as " + shape_str(shape));
    }
    return make_node(x->value.reshaped(std::move(shape)), "reshape", {x}, [](Node& self) {
        Node& px = *self.parents[0];
        accumulate(px, self.grad.reshaped(px.value.shape()));
    });
}

Var slice_cols(const Var& x, std::size_t start, std::size_t count)
{
    require_matrix(x->value, "slice_cols");
    const std::size_t rows = x->value.dim(0);
    const std::size_t cols = x->value.dim(1);
    if (count == 0 || start + count > cols) {
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_str(x->value.shape()));
    }
    Tensor out({rows, count});
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < count; ++j) {
            out.at(i, j) = x->value.at(i, start + j);
        }
    }
    return make_node(std::move(out), "slice_cols", {x}, [rows, start, count](Node& self) {
        Node& px = *self.parents[0];
        Tensor gx(px.value.shape());
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < count; ++j) {
                gx.at(i, start + j) = self.grad.at(i, j);
            }
        }
        accumulate(px, std::move(gx));
    });
}

Var concat_cols(std::span<const Var> parts)
{
    if (parts.empty()) {
        throw ShapeError("concat_cols: no inputs");
    }
    const std::size_t rows = parts.front()->value.dim(0);
    std::size_t cols = 0;
    for (const auto& p : parts) {
        require_matrix(p->value, "concat_cols");
        if (p->value.dim(0) != rows) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts.front()->value.shape()) + " vs " +
                             shape_str(p->value.shape()));
        }
        cols += p->value.dim(1);
    }
    Tensor out({rows, cols});
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t c = p->value.dim(1);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                out.at(i, offset + j) = p->value.at(i, j);
            }
        }
        offset += c;
    }
    return make_node(std::move(out), "concat_cols", {parts.begin(), parts.end()}, [rows](Node& self) {
        std::size_t offset = 0;
        for (auto& parent : self.parents) {
            const std::size_t c = parent->value.dim(1);
            if (parent->requires_grad) {
                Tensor g({rows, c});
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = 0; j < c; ++j) {
                        g.at(i, j) = self.grad.at(i, offset + j);
                    }
                }
                accumulate(*parent, std::move(g));
            }
            offset += c;
        }
    });
}

Var concat_rows(const Var& top, const Var& bottom)
{
    require_matrix(top->value, "concat_rows");
    require_matrix(bottom->value, "concat_rows");
    if (top->value.dim(1) != bottom->value.dim(1)) {
        throw ShapeError("concat_rows: column mismatch " + shape_str(top->value.shape()) + " vs " +
                         shape_str(bottom->value.shape()));
    }
    const std::size_t top_n = top->value.numel();
    std::vector<double> data(top->value.values());
    data.insert(data.end(), bottom->value.values().begin(), bottom->value.values().end());
    Tensor out({top->value.dim(0) + bottom->value.dim(0), top->value.dim(1)}, std::move(data));
    return make_node(std::move(out), "concat_rows", {top, bottom}, [top_n](Node& self) {
        Node& pt = *self.parents[0];
        Node& pb = *self.parents[1];
        const auto& g = self.grad.values();
        if (pt.requires_grad) {
            accumulate(pt, Tensor(pt.value.shape(), std::vector<double>(g.begin(), g.begin() + top_n)));
        }
        if (pb.requires_grad) {
            accumulate(pb, Tensor(pb.value.shape(), std::vector<double>(g.begin() + top_n, g.end())));
        }
    });
}

Var row(const Var& x, std::size_t index)
{
    require_matrix(x->value, "row");
    const std::size_t cols = x->value.dim(1);
    if (index >= x->value.dim(0)) {
        throw ShapeError("row: index " + std::to_string(index) + " out of range for " +
                         shape_str(x->value.shape()));
    }
    const auto& v = x->value.values();
    const auto first = v.begin() + static_cast<std::ptrdiff_t>(index * cols);
    Tensor out({cols}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(cols)));
    return make_node(std::move(out), "row", {x}, [index, cols](Node& self) {
        Node& px = *self.parents[0];
        Tensor gx(px.value.shape());
        for (std::size_t j = 0; j < cols; ++j) {
            gx[index * cols + j] = self.grad[j];
        }
        accumulate(px, std::move(gx));
    });
}

void backward(const Var& loss)
{
    if (loss->value.numel() != 1) {
        throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss->value.shape()));
    }
    if (!loss->requires_grad) {
        return;
    }

    // Iterative post-order DFS gives a topological order (inputs before outputs).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* node : order) {
        if (!node->is_leaf()) {
            node->zero_grad();
        }
    }
    accumulate(*loss, Tensor(loss->value.shape(), 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_rule && node->has_grad()) {
            node->backward_rule(*node);
        }
    }
}

void zero_grad(std::span<const Var> params)
{
    for (const auto& p : params) {
        p->zero_grad();
    }
}

GradCheckResult finite_difference_check(const std::function<Var()>& loss_fn, std::span<const Var> params, double h)
{
    if (!(h > 0.0)) {
        throw ConfigError("finite_difference_check: step must be positive");
    }
    zero_grad(params);
    backward(loss_fn());
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        analytic.push_back(p->has_grad() ? p->grad : Tensor(p->value.shape()));
    }

    GradCheckResult result;
    NoGradGuard no_grad;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto values = params[pi]->value.data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = loss_fn()->value.item();
            values[i] = saved - h;
            const double down = loss_fn()->value.item();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[pi][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > result.max_relative_error) {
                result = {rel, pi, i, a, numeric};
            }
        }
    }
    return result;
}

} // namespace dfmad
