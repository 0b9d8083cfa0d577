#include "prem/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace prem {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

thread_local Tape* g_active_tape = nullptr;

void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
    for (auto d : shape)
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
}

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericalError(std::string("non-finite value produced by ") + op);
}

// out (m x n) += a (m x k) * b (k x n). Each output element sums over p in
// order, so the AVX2 clone matches the baseline bit for bit (no FMA).
#if defined(__x86_64__) && defined(__GNUC__) && !defined(__clang__)
__attribute__((target_clones("avx2", "default")))
#endif
void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
        }
    }
}

void transpose_into(const double* src, double* dst, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

Tensor make_result(Shape shape, std::vector<double> values, bool track, const char* op) {
    check_finite(values, op);
    auto node = std::make_shared<Node>();
    node->value = std::move(values);
    node->requires_grad = track;
    return Tensor(std::move(shape), std::move(node));
}

void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw ShapeError(std::string(op) + " expects a 2-D tensor, got " + shape_string(t.shape()));
}

// Accumulate `src` into `dst` node grad when the node participates in autodiff.
void accumulate(const NodePtr& dst, const std::vector<double>& src) {
    if (!dst->requires_grad) return;
    auto& g = dst->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

struct AxisSplit {
    std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) throw ShapeError("axis out of range for shape " + shape_string(shape));
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : shape_{1}, node_(std::make_shared<Node>()) { node_->value.assign(1, 0.0); }

Tensor::Tensor(Shape shape, std::shared_ptr<Node> node) : shape_(std::move(shape)), node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    check_shape(shape);
    std::vector<double> v(shape_numel(shape), value);
    return make_result(std::move(shape), std::move(v), false, "full");
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    check_shape(shape);
    if (shape_numel(shape) != values.size())
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_string(shape));
    return make_result(std::move(shape), std::move(values), false, "from");
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("axis out of range for shape " + shape_string(shape_));
    return shape_[axis];
}

std::size_t Tensor::rows() const { return shape_.size() == 1 ? 1 : shape_[0]; }
std::size_t Tensor::cols() const { return shape_.back(); }

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const { return node_->value[row * cols() + col]; }

std::vector<double> Tensor::grad() const {
    if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
    return node_->grad;
}

Tensor Tensor::detach() const {
    auto node = std::make_shared<Node>();
    node->value = node_->value;
    return Tensor(shape_, std::move(node));
}

Tensor Tensor::clone() const {
    auto node = std::make_shared<Node>();
    node->value = node_->value;
    node->requires_grad = node_->requires_grad;
    return Tensor(shape_, std::move(node));
}

Tensor Tensor::reshape(Shape shape) const {
    check_shape(shape);
    if (shape_numel(shape) != numel())
        throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    bool track = tracking({this});
    Tensor out = make_result(std::move(shape), node_->value, track, "reshape");
    if (track) {
        Tape::active()->record([in = node_, out = out.node()] {
            if (out->grad.empty()) return;
            accumulate(in, out->grad);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tape

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
    if (consumed_) throw std::logic_error("tape already replayed");
    records_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_string(loss.shape()));
    if (consumed_) throw std::logic_error("tape already replayed");
    if (!std::isfinite(loss.item())) throw NumericalError("non-finite loss");
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    records_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (!tape) throw std::logic_error("backward without an active tape");
    tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul inner dimensions disagree: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    std::vector<double> out(m * n, 0.0);
    gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
    bool track = tracking({&a, &b});
    Tensor result = make_result({m, n}, std::move(out), track, "matmul");
    if (track) {
        Tape::active()->record([an = a.node(), bn = b.node(), on = result.node(), m, k, n] {
            if (on->grad.empty()) return;
            const double* g = on->grad.data();
            if (an->requires_grad) {
                auto& ga = an->ensure_grad();
                // ga += g b^T; summed into a fresh buffer first so every element
                // accumulates over j in order before touching ga.
                std::vector<double> bt(k * n), acc(m * k, 0.0);
                transpose_into(bn->value.data(), bt.data(), k, n);
                gemm_acc(g, bt.data(), acc.data(), m, n, k);
                for (std::size_t i = 0; i < m * k; ++i) ga[i] += acc[i];
            }
            if (bn->requires_grad) {
                auto& gb = bn->ensure_grad();
                std::vector<double> at(m * k);
                transpose_into(an->value.data(), at.data(), m, k);
                gemm_acc(at.data(), g, gb.data(), k, m, n);
            }
        });
    }
    return result;
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    auto v = a.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
    bool track = tracking({&a});
    Tensor result = make_result({n, m}, std::move(out), track, "transpose");
    if (track) {
        Tape::active()->record([an = a.node(), on = result.node(), m, n] {
            if (on->grad.empty()) return;
            auto& ga = an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += on->grad[j * m + i];
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

// `b` equal to `a` in shape, or matching a's trailing axes (repeat over the rest).
std::size_t broadcast_block(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return a.numel();
    const auto& as = a.shape();
    const auto& bs = b.shape();
    bool ok = bs.size() <= as.size();
    for (std::size_t i = 0; ok && i < bs.size(); ++i) ok = bs[bs.size() - 1 - i] == as[as.size() - 1 - i];
    // A leading unit axis on b (1 x D against L x D) is also accepted.
    if (!ok && bs.size() == as.size() && bs[0] == 1) {
        ok = true;
        for (std::size_t i = 1; i < bs.size(); ++i) ok = ok && bs[i] == as[i];
    }
    if (!ok)
        throw ShapeError(std::string(op) + " shape mismatch: " + shape_string(as) + " vs " + shape_string(bs));
    return b.numel();
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const std::size_t block = broadcast_block(a, b, "add");
    std::vector<double> out(a.values().begin(), a.values().end());
    auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % block];
    bool track = tracking({&a, &b});
    Tensor result = make_result(a.shape(), std::move(out), track, "add");
    if (track) {
        Tape::active()->record([an = a.node(), bn = b.node(), on = result.node(), block] {
            if (on->grad.empty()) return;
            accumulate(an, on->grad);
            if (bn->requires_grad) {
                auto& gb = bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) gb[i % block] += on->grad[i];
            }
        });
    }
    return result;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
    const std::size_t block = broadcast_block(a, b, "mul");
    auto av = a.values();
    auto bv = b.values();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i % block];
    bool track = tracking({&a, &b});
    Tensor result = make_result(a.shape(), std::move(out), track, "mul");
    if (track) {
        Tape::active()->record([an = a.node(), bn = b.node(), on = result.node(), block] {
            if (on->grad.empty()) return;
            const auto& g = on->grad;
            if (an->requires_grad) {
                auto& ga = an->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i % block];
            }
            if (bn->requires_grad) {
                auto& gb = bn->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % block] += g[i] * an->value[i];
            }
        });
    }
    return result;
}

namespace {

// Shared helper for unary elementwise maps with derivative f'(x, y).
template <typename F, typename DF>
Tensor unary(const Tensor& a, const char* op, F f, DF df) {
    auto av = a.values();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    bool track = tracking({&a});
    Tensor result = make_result(a.shape(), std::move(out), track, op);
    if (track) {
        Tape::active()->record([an = a.node(), on = result.node(), df] {
            if (on->grad.empty()) return;
            auto& ga = an->ensure_grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i] * df(an->value[i], on->value[i]);
        });
    }
    return result;
}

}  // namespace

Tensor scale(const Tensor& a, double factor) {
    return unary(a, "scale", [factor](double x) { return x * factor; },
                 [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
    return unary(a, "add_scalar", [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
    return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
    return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor softplus(const Tensor& a) {
    return unary(
        a, "softplus", [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.values()) s += x;
    bool track = tracking({&a});
    Tensor result = make_result({1}, {s}, track, "sum");
    if (track) {
        Tape::active()->record([an = a.node(), on = result.node()] {
            if (on->grad.empty()) return;
            auto& ga = an->ensure_grad();
            for (auto& g : ga) g += on->grad[0];
        });
    }
    return result;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor softmax(const Tensor& x, std::size_t axis) {
    const AxisSplit s = split_axis(x.shape(), axis);
    auto xv = x.values();
    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.extent * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < s.extent; ++k) {
                const double e = std::exp(xv[base + k * s.inner] - mx);
                out[base + k * s.inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= z;
        }
    bool track = tracking({&x});
    Tensor result = make_result(x.shape(), std::move(out), track, "softmax");
    if (track) {
        Tape::active()->record([xn = x.node(), on = result.node(), s] {
            if (on->grad.empty()) return;
            auto& gx = xn->ensure_grad();
            const auto& y = on->value;
            const auto& g = on->grad;
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t in = 0; in < s.inner; ++in) {
                    const std::size_t base = o * s.extent * s.inner + in;
                    double dot = 0.0;
                    for (std::size_t k = 0; k < s.extent; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
                    for (std::size_t k = 0; k < s.extent; ++k) {
                        const std::size_t idx = base + k * s.inner;
                        gx[idx] += y[idx] * (g[idx] - dot);
                    }
                }
        });
    }
    return result;
}

Tensor masked_softmax(const Tensor& x, const std::vector<bool>& mask) {
    require_2d(x, "masked_softmax");
    if (!mask.empty() && mask.size() != x.numel())
        throw ShapeError("mask size " + std::to_string(mask.size()) + " does not match " + shape_string(x.shape()));
    if (mask.empty()) return softmax(x, 1);
    const std::size_t m = x.dim(0), n = x.dim(1);
    auto xv = x.values();
    std::vector<double> out(x.numel(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (!mask[i * n + j]) mx = std::max(mx, xv[i * n + j]);
        if (!std::isfinite(mx)) continue;
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (!mask[i * n + j]) {
                out[i * n + j] = std::exp(xv[i * n + j] - mx);
                z += out[i * n + j];
            }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    bool track = tracking({&x});
    Tensor result = make_result(x.shape(), std::move(out), track, "masked_softmax");
    if (track) {
        Tape::active()->record([xn = x.node(), on = result.node(), m, n] {
            if (on->grad.empty()) return;
            auto& gx = xn->ensure_grad();
            const auto& y = on->value;
            const auto& g = on->grad;
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
            }
        });
    }
    return result;
}

Tensor logsumexp(const Tensor& x) {
    auto xv = x.values();
    const double mx = *std::max_element(xv.begin(), xv.end());
    double z = 0.0;
    for (double v : xv) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    bool track = tracking({&x});
    Tensor result = make_result({1}, {lse}, track, "logsumexp");
    if (track) {
        Tape::active()->record([xn = x.node(), on = result.node(), lse] {
            if (on->grad.empty()) return;
            auto& gx = xn->ensure_grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[0] * std::exp(xn->value[i] - lse);
        });
    }
    return result;
}

Tensor cross_entropy(const Tensor& logits, std::size_t target) {
    if (target >= logits.numel()) throw ShapeError("cross_entropy target index out of range");
    const std::size_t idx[1] = {target};
    return sub(logsumexp(logits), gather(logits, idx));
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels) {
    if (labels.size() != logits.numel()) throw ShapeError("bce_with_logits label count mismatch");
    // y*softplus(-x) + (1-y)*softplus(x)
    std::vector<double> sign(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) sign[i] = labels[i] > 0.5 ? -1.0 : 1.0;
    Tensor signed_logits = mul(logits, Tensor::from(logits.shape(), std::move(sign)));
    return mean(softplus(signed_logits));
}

// ---------------------------------------------------------------------------
// Normalization

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t d = x.shape().back();
    if (gain.numel() != d || bias.numel() != d)
        throw ShapeError("layer_norm parameter length must equal last axis " + std::to_string(d));
    const std::size_t rows = x.numel() / d;
    auto xv = x.values();
    auto gv = gain.values();
    auto bv = bias.values();
    std::vector<double> xhat(x.numel()), out(x.numel()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (row[j] - mu) * inv_std[r];
            out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
        }
    }
    bool track = tracking({&x, &gain, &bias});
    Tensor result = make_result(x.shape(), std::move(out), track, "layer_norm");
    if (track) {
        Tape::active()->record([xn = x.node(), gn = gain.node(), bn = bias.node(), on = result.node(),
                                xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
            if (on->grad.empty()) return;
            const auto& g = on->grad;
            if (gn->requires_grad || bn->requires_grad) {
                auto& gg = gn->ensure_grad();
                auto& gb = bn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                        gb[j] += g[r * d + j];
                    }
            }
            if (xn->requires_grad) {
                auto& gx = xn->ensure_grad();
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[r * d + j] * gn->value[j];
                        s1 += dxh;
                        s2 += dxh * xhat[r * d + j];
                    }
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[r * d + j] * gn->value[j];
                        gx[r * d + j] += inv_std[r] * (dxh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                    }
                }
            }
        });
    }
    return result;
}

Tensor l2_normalize(const Tensor& x) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    auto xv = x.values();
    std::vector<double> out(x.numel(), 0.0), norms(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
        norms[r] = std::sqrt(ss);
        if (norms[r] == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / norms[r];
    }
    bool track = tracking({&x});
    Tensor result = make_result(x.shape(), std::move(out), track, "l2_normalize");
    if (track) {
        Tape::active()->record([xn = x.node(), on = result.node(), norms = std::move(norms), rows, d] {
            if (on->grad.empty()) return;
            auto& gx = xn->ensure_grad();
            const auto& y = on->value;
            const auto& g = on->grad;
            for (std::size_t r = 0; r < rows; ++r) {
                if (norms[r] == 0.0) continue;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
                for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / norms[r];
            }
        });
    }
    return result;
}

double cosine_value(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("cosine dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel())
        throw ShapeError("cosine_similarity dimension mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    Tensor an = l2_normalize(a.reshape({a.numel()}));
    Tensor bn = l2_normalize(b.reshape({b.numel()}));
    return sum(mul(an, bn));
}

// ---------------------------------------------------------------------------
// Structural

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw ShapeError("concat axis out of range");
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.ndim() != ref.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t i = 0; i < ref.size(); ++i)
            if (i != axis && p.shape()[i] != ref[i])
                throw ShapeError("concat shape mismatch: " + shape_string(p.shape()) + " vs " + shape_string(ref));
        out_shape[axis] += p.shape()[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
    for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
    const std::size_t out_block = out_shape[axis] * inner;

    std::vector<double> out(shape_numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    bool track = false;
    for (const auto& p : parts) {
        const std::size_t block = p.shape()[axis] * inner;
        auto pv = p.values();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(pv.data() + o * block, block, out.data() + o * out_block + offset);
        offsets.push_back(offset);
        offset += block;
        track = track || tracking({&p});
    }
    Tensor result = make_result(out_shape, std::move(out), track, "concat");
    if (track) {
        std::vector<NodePtr> nodes;
        std::vector<std::size_t> blocks;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            blocks.push_back(p.shape()[axis] * inner);
        }
        Tape::active()->record([nodes = std::move(nodes), blocks = std::move(blocks),
                                offsets = std::move(offsets), on = result.node(), outer, out_block] {
            if (on->grad.empty()) return;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                if (!nodes[k]->requires_grad) continue;
                auto& g = nodes[k]->ensure_grad();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < blocks[k]; ++i)
                        g[o * blocks[k] + i] += on->grad[o * out_block + offsets[k] + i];
            }
        });
    }
    return result;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    require_2d(x, "slice_rows");
    if (begin >= end || end > x.dim(0)) throw ShapeError("slice_rows range out of bounds");
    const std::size_t n = x.dim(1);
    auto xv = x.values();
    std::vector<double> out(xv.begin() + begin * n, xv.begin() + end * n);
    bool track = tracking({&x});
    Tensor result = make_result({end - begin, n}, std::move(out), track, "slice_rows");
    if (track) {
        Tape::active()->record([xn = x.node(), on = result.node(), off = begin * n] {
            if (on->grad.empty()) return;
            auto& g = xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) g[off + i] += on->grad[i];
        });
    }
    return result;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    require_2d(x, "slice_cols");
    if (begin >= end || end > x.dim(1)) throw ShapeError("slice_cols range out of bounds");
    const std::size_t m = x.dim(0), n = x.dim(1), w = end - begin;
    auto xv = x.values();
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i) std::copy_n(xv.data() + i * n + begin, w, out.data() + i * w);
    bool track = tracking({&x});
    Tensor result = make_result({m, w}, std::move(out), track, "slice_cols");
    if (track) {
        Tape::active()->record([xn = x.node(), on = result.node(), m, n, w, begin] {
            if (on->grad.empty()) return;
            auto& g = xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += on->grad[i * w + j];
        });
    }
    return result;
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices) {
    require_2d(table, "embedding_lookup");
    if (indices.empty()) throw ShapeError("embedding_lookup with no indices");
    const std::size_t n = table.dim(1);
    auto tv = table.values();
    std::vector<double> out(indices.size() * n);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= table.dim(0)) throw ShapeError("embedding index out of range");
        std::copy_n(tv.data() + indices[r] * n, n, out.data() + r * n);
    }
    bool track = tracking({&table});
    Tensor result = make_result({indices.size(), n}, std::move(out), track, "embedding_lookup");
    if (track) {
        Tape::active()->record([tn = table.node(), on = result.node(),
                                idx = std::vector<std::size_t>(indices.begin(), indices.end()), n] {
            if (on->grad.empty()) return;
            auto& g = tn->ensure_grad();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += on->grad[r * n + j];
        });
    }
    return result;
}

Tensor gather(const Tensor& x, std::span<const std::size_t> flat_indices) {
    if (flat_indices.empty()) throw ShapeError("gather with no indices");
    auto xv = x.values();
    std::vector<double> out(flat_indices.size());
    for (std::size_t i = 0; i < flat_indices.size(); ++i) {
        if (flat_indices[i] >= x.numel()) throw ShapeError("gather index out of range");
        out[i] = xv[flat_indices[i]];
    }
    bool track = tracking({&x});
    Tensor result = make_result({flat_indices.size()}, std::move(out), track, "gather");
    if (track) {
        Tape::active()->record([xn = x.node(), on = result.node(),
                                idx = std::vector<std::size_t>(flat_indices.begin(), flat_indices.end())] {
            if (on->grad.empty()) return;
            auto& g = xn->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += on->grad[i];
        });
    }
    return result;
}

MaxPoolResult max_pool_over_axis(const Tensor& x, std::size_t axis) {
    const AxisSplit s = split_axis(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
    auto xv = x.values();
    std::vector<double> out(s.outer * s.inner);
    std::vector<std::size_t> arg(s.outer * s.inner);
    std::vector<std::size_t> src(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.extent * s.inner + in;
            std::size_t best = 0;
            for (std::size_t k = 1; k < s.extent; ++k)
                if (xv[base + k * s.inner] > xv[base + best * s.inner]) best = k;
            out[o * s.inner + in] = xv[base + best * s.inner];
            arg[o * s.inner + in] = best;
            src[o * s.inner + in] = base + best * s.inner;
        }
    bool track = tracking({&x});
    Tensor values = make_result(std::move(out_shape), std::move(out), track, "max_pool_over_axis");
    if (track) {
        Tape::active()->record([xn = x.node(), on = values.node(), src = std::move(src)] {
            if (on->grad.empty()) return;
            auto& g = xn->ensure_grad();
            for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += on->grad[i];
        });
    }
    return {values, std::move(arg)};
}

Tensor conv1d(const Tensor& x, const Tensor& kernel) {
    const std::size_t out_dim = kernel.ndim() == 3 ? kernel.dim(2) : 1;
    return conv1d(x, kernel, Tensor::zeros({out_dim}));
}

Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    require_2d(x, "conv1d");
    if (kernel.ndim() != 3) throw ShapeError("conv1d kernel must be k x D x D'");
    const std::size_t len = x.dim(0), din = x.dim(1);
    const std::size_t width = kernel.dim(0), dout = kernel.dim(2);
    if (width % 2 == 0) throw ShapeError("conv1d kernel width must be odd");
    if (kernel.dim(1) != din)
        throw ShapeError("conv1d input width " + std::to_string(din) + " does not match kernel " +
                         shape_string(kernel.shape()));
    if (bias.numel() != dout) throw ShapeError("conv1d bias length mismatch");
    const std::size_t half = width / 2;
    // Tap w maps output rows [t0, t1) to input rows starting at t0 + w - half.
    auto tap_range = [len, half](std::size_t w) {
        const std::size_t t0 = w < half ? half - w : 0;
        const std::size_t t1 = w > half ? (len > w - half ? len - (w - half) : 0) : len;
        return std::pair{t0, std::max(t0, t1)};
    };
    auto xv = x.values();
    auto kv = kernel.values();
    auto bv = bias.values();
    std::vector<double> out(len * dout);
    for (std::size_t t = 0; t < len; ++t) std::copy(bv.begin(), bv.end(), out.begin() + t * dout);
    for (std::size_t w = 0; w < width; ++w) {
        const auto [t0, t1] = tap_range(w);
        if (t0 >= t1) continue;
        gemm_acc(xv.data() + (t0 + w - half) * din, kv.data() + w * din * dout, out.data() + t0 * dout, t1 - t0, din,
                 dout);
    }
    bool track = tracking({&x, &kernel, &bias});
    Tensor result = make_result({len, dout}, std::move(out), track, "conv1d");
    if (track) {
        Tape::active()->record([xn = x.node(), kn = kernel.node(), bn = bias.node(), on = result.node(), len, din,
                                dout, width, half, tap_range] {
            if (on->grad.empty()) return;
            const auto& g = on->grad;
            if (bn->requires_grad) {
                auto& gb = bn->ensure_grad();
                for (std::size_t t = 0; t < len; ++t)
                    for (std::size_t o = 0; o < dout; ++o) gb[o] += g[t * dout + o];
            }
            const bool gx_on = xn->requires_grad, gk_on = kn->requires_grad;
            if (!gx_on && !gk_on) return;
            auto* gx = gx_on ? &xn->ensure_grad() : nullptr;
            auto* gk = gk_on ? &kn->ensure_grad() : nullptr;
            std::vector<double> xt(din * len), kt(dout * din), tmp;
            if (gk) transpose_into(xn->value.data(), xt.data(), len, din);
            for (std::size_t w = 0; w < width; ++w) {
                const auto [t0, t1] = tap_range(w);
                if (t0 >= t1) continue;
                const std::size_t rows = t1 - t0, s0 = t0 + w - half;
                if (gx) {
                    // gx[s0 + r] += g[t0 + r] K_w^T
                    transpose_into(kn->value.data() + w * din * dout, kt.data(), din, dout);
                    tmp.assign(rows * din, 0.0);
                    gemm_acc(g.data() + t0 * dout, kt.data(), tmp.data(), rows, dout, din);
                    double* dst = gx->data() + s0 * din;
                    for (std::size_t e = 0; e < rows * din; ++e) dst[e] += tmp[e];
                }
                if (gk) {
                    // gk_w += x[s0:s0+rows]^T g[t0:t1]; xt is din x len, so take its column block.
                    std::vector<double> xs(din * rows);
                    for (std::size_t i = 0; i < din; ++i)
                        std::copy_n(xt.data() + i * len + s0, rows, xs.data() + i * rows);
                    gemm_acc(xs.data(), g.data() + t0 * dout, gk->data() + w * din * dout, din, rows, dout);
                }
            }
        });
    }
    return result;
}

}  // namespace prem
