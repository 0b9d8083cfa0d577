#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prem {

/// Raised when a forward op produces NaN/Inf or a loss becomes non-finite.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised on operand shape disagreement.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
    std::vector<double> value;
    std::vector<double> grad;  // empty until something flows into it
    bool requires_grad = false;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

/// Dense row-major float64 array. Copies share storage; ops never mutate inputs.
class Tensor {
public:
    Tensor();

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    /// Leaf tensor that accumulates gradients during backward.
    static Tensor parameter(Shape shape, std::vector<double> values);

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return node_->value.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const { return node_->value; }
    std::vector<double> to_vector() const { return node_->value; }
    double item() const;
    double operator[](std::size_t flat) const { return node_->value[flat]; }
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const { return node_->requires_grad; }
    /// Accumulated gradient; zeros when nothing reached this tensor.
    std::vector<double> grad() const;
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    /// In-place access for optimizers and checkpoint loading only.
    std::span<double> mutable_values() { return node_->value; }
    std::span<double> mutable_grad() { return node_->ensure_grad(); }

    /// Same values, cut from the tape.
    Tensor detach() const;
    /// Deep copy with independent storage (keeps requires_grad).
    Tensor clone() const;
    Tensor reshape(Shape shape) const;

    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    // Used by op implementations.
    Tensor(Shape shape, std::shared_ptr<detail::Node> node);
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    Shape shape_;
    std::shared_ptr<detail::Node> node_;
};

/// Records differentiable ops while active. Single-threaded; one per thread.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Currently active tape on this thread, or nullptr.
    static Tape* active();

    void record(std::function<void()> backward_fn);
    std::size_t size() const { return records_.size(); }

    /// Seeds d(loss)=1 and replays records in reverse creation order. A tape
    /// can be replayed only once.
    void backward(const Tensor& loss);

private:
    std::vector<std::function<void()>> records_;
    bool consumed_ = false;
};

/// RAII activation of a tape on the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// Backward through the active tape.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Differentiable operations.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Elementwise add. `b` may also match a trailing block of `a`'s shape
/// (bias broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor softmax(const Tensor& x, std::size_t axis);
/// Row-wise softmax of a 2-D tensor; `mask[i*cols+j] == true` excludes the
/// entry (weight 0). Fully masked rows yield zeros.
Tensor masked_softmax(const Tensor& x, const std::vector<bool>& mask);
/// log(sum(exp(x))) over every element, max-stabilized.
Tensor logsumexp(const Tensor& x);
/// -log softmax(logits)[target] for a flat logit vector.
Tensor cross_entropy(const Tensor& logits, std::size_t target);
/// Mean binary cross-entropy on raw logits.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels);

/// Normalizes over the last axis, then applies gain and bias (both length D).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// Row-wise (last axis) L2 normalization; zero rows stay zero.
Tensor l2_normalize(const Tensor& x);
double cosine_value(std::span<const double> a, std::span<const double> b);
/// Scalar cosine similarity of two equal-length vectors; 0 if either is zero.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
/// Rows of a 2-D table selected by index.
Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices);
/// Flat-index gather into a 1-D tensor.
Tensor gather(const Tensor& x, std::span<const std::size_t> flat_indices);

struct MaxPoolResult {
    Tensor values;
    std::vector<std::size_t> indices;
};
/// Max over `axis`; ties go to the lowest index.
MaxPoolResult max_pool_over_axis(const Tensor& x, std::size_t axis);

/// Same-length 1-D convolution along rows. x: L x D, kernel: k x D x D'
/// (odd k), optional bias D'. Zero padding of (k-1)/2 on both ends.
Tensor conv1d(const Tensor& x, const Tensor& kernel);
Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias);

}  // namespace prem
