#pragma once

// Minimal dense tensor with reverse-mode autodiff.
//
// A Tensor is a shared handle to a graph node.  Operations record their
// parents and a backward closure when any input requires a gradient;
// Tensor::backward() on a scalar walks the graph in reverse topological
// order.  Leaf gradients accumulate across backward() calls until
// zero_grad().  Layouts are row-major; images are N x C x H x W.
//
// Explicitly instantiated for float (training) and double (gradient checks).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace confseg::nn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

template <typename Real>
struct Node {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    /// Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
    }
};

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool grad_enabled() noexcept;

private:
    bool previous_;
};

/// Fingerprints the on/off pattern of every relu evaluated on this thread
/// while alive.  Gradient checks use it to spot finite differences that
/// straddle a kink.
class ActivationTrace {
public:
    ActivationTrace();
    ~ActivationTrace();
    ActivationTrace(const ActivationTrace&) = delete;
    ActivationTrace& operator=(const ActivationTrace&) = delete;

    std::uint64_t fingerprint() const noexcept { return hash_; }
    static ActivationTrace* current() noexcept;
    void fold(bool active) noexcept { hash_ = (hash_ ^ (active ? 0x9eULL : 0x3bULL)) * 0x100000001b3ULL; }

private:
    ActivationTrace* previous_;
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

template <typename Real>
class Tensor {
public:
    using NodeType = Node<Real>;
    using BackwardFn = std::function<void(NodeType&)>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, Real value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
    static Tensor scalar(Real value);

    /// Builds an operation result.  `backward` runs only if some parent
    /// requires a gradient and grad recording is enabled.
    static Tensor from_op(Shape shape, std::vector<Real> value, const std::vector<Tensor>& parents,
                          BackwardFn backward);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<Real> data() { return node_->value; }
    std::span<const Real> data() const { return node_->value; }
    /// Allocates (zeroed) on first access.
    std::span<Real> grad();
    std::span<const Real> grad() const;
    bool has_grad() const noexcept { return node_ && node_->grad.size() == node_->value.size(); }

    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad();

    Real item() const;
    /// Seeds d(self)/d(self) = 1 and back-propagates.  Requires a scalar.
    void backward();

    /// Deep copy of values, detached from the graph.
    Tensor detach() const;

    NodeType* node() const noexcept { return node_.get(); }
    const std::shared_ptr<NodeType>& node_ptr() const noexcept { return node_; }

private:
    explicit Tensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

    std::shared_ptr<NodeType> node_;
};

// ---------------------------------------------------------------------------
// Primitives

/// x: N x C x H x W, weight: O x C x K x K, bias: O.  Zero padding.
/// pad < 0 means "same" (K / 2).
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias, std::size_t stride = 1,
                    int pad = -1);

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& x);

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& x);

/// x: N x I, weight: O x I, bias: O -> N x O.
template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias);

/// N x C x H x W -> N x C x 2H x 2W.
template <typename Real>
Tensor<Real> upsample_nearest2x(const Tensor<Real>& x);

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);

/// N x C x H x W -> N x C.
template <typename Real>
Tensor<Real> global_avg_pool(const Tensor<Real>& x);

/// N x F -> 1 x F (mean over the leading axis).
template <typename Real>
Tensor<Real> mean_rows(const Tensor<Real>& x);

/// Stacks N_i x F inputs into (sum N_i) x F.
template <typename Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts);

/// Sum of all elements -> scalar.
template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x);

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape);

/// x: T x C x H x W.  The first floor(C * fraction) channels take their value
/// from the previous frame, the next floor(C * fraction) from the following
/// frame; missing frames are zero.  Throws ShapeError if floor(C * fraction) < 1.
template <typename Real>
Tensor<Real> temporal_shift(const Tensor<Real>& x, double fraction = 0.125);

/// mean(-w * [y log(sigmoid(z)) + (1 - y) log(1 - sigmoid(z))]) over all
/// elements; probabilities clamped to [1e-7, 1 - 1e-7].  d/dz = w (p - y) / N.
template <typename Real>
Tensor<Real> weighted_bce_loss(const Tensor<Real>& logits, std::span<const Real> targets, std::span<const Real> weights);

/// Unweighted binary cross-entropy with logits, same clamping.
template <typename Real>
Tensor<Real> bce_loss(const Tensor<Real>& logits, std::span<const Real> targets);

/// mean((pred - target)^2).
template <typename Real>
Tensor<Real> mse_loss(const Tensor<Real>& pred, std::span<const Real> targets);

/// logits: N x K, labels in [0, K).  Mean over rows.
template <typename Real>
Tensor<Real> softmax_cross_entropy(const Tensor<Real>& logits, std::span<const int> labels);

}  // namespace confseg::nn
