#include "confseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include <Eigen/Core>

namespace confseg::nn {

namespace {

thread_local bool g_grad_enabled = true;

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMatMap = Eigen::Map<const RowMat<Real>>;

void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

template <typename Real>
bool wants_grad(const std::shared_ptr<Node<Real>>& n) {
    return n && n->requires_grad;
}

template <typename Real>
Real stable_sigmoid(Real z) {
    if (z >= 0) return Real(1) / (Real(1) + std::exp(-z));
    const Real e = std::exp(z);
    return e / (Real(1) + e);
}

struct ConvGeometry {
    std::size_t n, c, h, w;
    std::size_t out_c, k;
    std::size_t stride, pad;
    std::size_t oh, ow;

    std::size_t patch() const { return c * k * k; }
    std::size_t out_area() const { return oh * ow; }
    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

template <typename Real>
void im2col(const Real* x, const ConvGeometry& g, Real* col) {
    const std::size_t area = g.out_area();
    for (std::size_t ci = 0; ci < g.c; ++ci) {
        const Real* plane = x + ci * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                Real* row = col + ((ci * g.k + ky) * g.k + kx) * area;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    Real* dst = row + oy * g.ow;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + g.ow, Real(0));
                        continue;
                    }
                    const Real* src = plane + static_cast<std::size_t>(iy) * g.w;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? Real(0) : src[ix];
                    }
                }
            }
        }
    }
}

template <typename Real>
void col2im_add(const Real* col, const ConvGeometry& g, Real* dx) {
    const std::size_t area = g.out_area();
    for (std::size_t ci = 0; ci < g.c; ++ci) {
        Real* plane = dx + ci * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const Real* row = col + ((ci * g.k + ky) * g.k + kx) * area;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    const Real* src = row + oy * g.ow;
                    Real* dst = plane + static_cast<std::size_t>(iy) * g.w;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

std::size_t numel(const Shape& shape) noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
    out << ']';
    return out.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
    g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
    g_grad_enabled = previous_;
}

bool NoGradGuard::grad_enabled() noexcept {
    return g_grad_enabled;
}

namespace {
thread_local ActivationTrace* g_trace = nullptr;
}

ActivationTrace::ActivationTrace() : previous_(g_trace) { g_trace = this; }
ActivationTrace::~ActivationTrace() { g_trace = previous_; }
ActivationTrace* ActivationTrace::current() noexcept { return g_trace; }

// ---------------------------------------------------------------------------
// Tensor

template <typename Real>
Tensor<Real> Tensor<Real>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), Real(0), requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::full(Shape shape, Real value, bool requires_grad) {
    const auto n = nn::numel(shape);
    return from(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::from(Shape shape, std::vector<Real> values, bool requires_grad) {
    require(values.size() == nn::numel(shape),
            "value count " + std::to_string(values.size()) + " does not match shape " + shape_string(shape));
    auto node = std::make_shared<NodeType>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename Real>
Tensor<Real> Tensor<Real>::scalar(Real value) {
    return from({}, {value});
}

template <typename Real>
Tensor<Real> Tensor<Real>::from_op(Shape shape, std::vector<Real> value, const std::vector<Tensor>& parents,
                                   BackwardFn backward) {
    Tensor out = from(std::move(shape), std::move(value));
    if (!g_grad_enabled) return out;
    const bool any = std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    for (const auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward = std::move(backward);
    return out;
}

template <typename Real>
std::span<Real> Tensor<Real>::grad() {
    node_->ensure_grad();
    return node_->grad;
}

template <typename Real>
std::span<const Real> Tensor<Real>::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

template <typename Real>
void Tensor<Real>::zero_grad() {
    if (node_) node_->grad.assign(node_->value.size(), Real(0));
}

template <typename Real>
Real Tensor<Real>::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
}

template <typename Real>
void Tensor<Real>::backward() {
    if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + shape_string(shape()));
    if (!node_->requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

    std::vector<NodeType*> order;
    std::unordered_set<NodeType*> visited;
    std::vector<std::pair<NodeType*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            NodeType* p = n->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (NodeType* n : order) {
        if (!n->parents.empty()) n->grad.assign(n->value.size(), Real(0));
    }
    node_->ensure_grad();
    node_->grad[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

template <typename Real>
Tensor<Real> Tensor<Real>::detach() const {
    return from(node_->shape, node_->value);
}

// ---------------------------------------------------------------------------
// Primitives

template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias, std::size_t stride,
                    int pad) {
    require(x.rank() == 4, "conv2d input must be NxCxHxW, got " + shape_string(x.shape()));
    require(weight.rank() == 4, "conv2d weight must be OxCxKxK, got " + shape_string(weight.shape()));
    require(weight.dim(2) == weight.dim(3), "conv2d kernel must be square");
    require(weight.dim(1) == x.dim(1), "conv2d channel mismatch: input " + shape_string(x.shape()) + " weight " +
                                           shape_string(weight.shape()));
    require(bias.numel() == weight.dim(0), "conv2d bias size mismatch");
    require(stride >= 1, "conv2d stride must be positive");

    ConvGeometry g{};
    g.n = x.dim(0);
    g.c = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.out_c = weight.dim(0);
    g.k = weight.dim(2);
    g.stride = stride;
    g.pad = pad < 0 ? g.k / 2 : static_cast<std::size_t>(pad);
    require(g.h + 2 * g.pad >= g.k && g.w + 2 * g.pad >= g.k, "conv2d kernel larger than padded input");
    g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
    g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;

    const std::size_t patch = g.patch();
    const std::size_t area = g.out_area();
    const std::size_t in_image = g.c * g.h * g.w;

    auto cols = std::make_shared<std::vector<Real>>();
    if (!g.pointwise()) {
        cols->resize(g.n * patch * area);
        for (std::size_t n = 0; n < g.n; ++n) im2col(x.data().data() + n * in_image, g, cols->data() + n * patch * area);
    }

    std::vector<Real> out(g.n * g.out_c * area);
    ConstMatMap<Real> wm(weight.data().data(), static_cast<Eigen::Index>(g.out_c), static_cast<Eigen::Index>(patch));
    const Real* b = bias.data().data();
    for (std::size_t n = 0; n < g.n; ++n) {
        const Real* col = g.pointwise() ? x.data().data() + n * in_image : cols->data() + n * patch * area;
        ConstMatMap<Real> cm(col, static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(area));
        MatMap<Real> om(out.data() + n * g.out_c * area, static_cast<Eigen::Index>(g.out_c),
                        static_cast<Eigen::Index>(area));
        om.noalias() = wm * cm;
        for (std::size_t o = 0; o < g.out_c; ++o) om.row(static_cast<Eigen::Index>(o)).array() += b[o];
    }

    return Tensor<Real>::from_op(
        {g.n, g.out_c, g.oh, g.ow}, std::move(out), {x, weight, bias}, [g, cols](Node<Real>& self) {
            auto& xn = *self.parents[0];
            auto& wn = *self.parents[1];
            auto& bn = *self.parents[2];
            const std::size_t patch = g.patch();
            const std::size_t area = g.out_area();
            const std::size_t in_image = g.c * g.h * g.w;
            const auto P = static_cast<Eigen::Index>(patch);
            const auto A = static_cast<Eigen::Index>(area);
            const auto O = static_cast<Eigen::Index>(g.out_c);
            ConstMatMap<Real> wm(wn.value.data(), O, P);
            std::vector<Real> dcol;
            if (xn.requires_grad) {
                xn.ensure_grad();
                if (!g.pointwise()) dcol.resize(patch * area);
            }
            if (wn.requires_grad) wn.ensure_grad();
            if (bn.requires_grad) bn.ensure_grad();
            for (std::size_t n = 0; n < g.n; ++n) {
                ConstMatMap<Real> dout(self.grad.data() + n * g.out_c * area, O, A);
                const Real* col = g.pointwise() ? xn.value.data() + n * in_image : cols->data() + n * patch * area;
                ConstMatMap<Real> cm(col, P, A);
                if (wn.requires_grad) {
                    MatMap<Real> dw(wn.grad.data(), O, P);
                    dw.noalias() += dout * cm.transpose();
                }
                if (bn.requires_grad) {
                    for (std::size_t o = 0; o < g.out_c; ++o) bn.grad[o] += dout.row(static_cast<Eigen::Index>(o)).sum();
                }
                if (xn.requires_grad) {
                    if (g.pointwise()) {
                        MatMap<Real> dx(xn.grad.data() + n * in_image, P, A);
                        dx.noalias() += wm.transpose() * dout;
                    } else {
                        MatMap<Real> dc(dcol.data(), P, A);
                        dc.noalias() = wm.transpose() * dout;
                        col2im_add(dcol.data(), g, xn.grad.data() + n * in_image);
                    }
                }
            }
        });
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& x) {
    std::vector<Real> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > Real(0) ? in[i] : Real(0);
    if (auto* trace = ActivationTrace::current()) {
        for (std::size_t i = 0; i < out.size(); ++i) trace->fold(in[i] > Real(0));
    }
    return Tensor<Real>::from_op(x.shape(), std::move(out), {x}, [](Node<Real>& self) {
        auto& xn = *self.parents[0];
        xn.ensure_grad();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
            if (self.value[i] > Real(0)) xn.grad[i] += self.grad[i];
        }
    });
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
    std::vector<Real> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(in[i]);
    return Tensor<Real>::from_op(x.shape(), std::move(out), {x}, [](Node<Real>& self) {
        auto& xn = *self.parents[0];
        xn.ensure_grad();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
            const Real s = self.value[i];
            xn.grad[i] += self.grad[i] * s * (Real(1) - s);
        }
    });
}

template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias) {
    require(x.rank() == 2, "linear input must be NxI, got " + shape_string(x.shape()));
    require(weight.rank() == 2 && weight.dim(1) == x.dim(1),
            "linear weight " + shape_string(weight.shape()) + " incompatible with input " + shape_string(x.shape()));
    require(bias.numel() == weight.dim(0), "linear bias size mismatch");
    const auto N = static_cast<Eigen::Index>(x.dim(0));
    const auto I = static_cast<Eigen::Index>(x.dim(1));
    const auto O = static_cast<Eigen::Index>(weight.dim(0));
    std::vector<Real> out(static_cast<std::size_t>(N * O));
    MatMap<Real> om(out.data(), N, O);
    om.noalias() = ConstMatMap<Real>(x.data().data(), N, I) * ConstMatMap<Real>(weight.data().data(), O, I).transpose();
    for (Eigen::Index r = 0; r < N; ++r) {
        for (Eigen::Index o = 0; o < O; ++o) om(r, o) += bias.data()[static_cast<std::size_t>(o)];
    }
    return Tensor<Real>::from_op({x.dim(0), weight.dim(0)}, std::move(out), {x, weight, bias},
                                 [N, I, O](Node<Real>& self) {
                                     auto& xn = *self.parents[0];
                                     auto& wn = *self.parents[1];
                                     auto& bn = *self.parents[2];
                                     ConstMatMap<Real> dout(self.grad.data(), N, O);
                                     if (xn.requires_grad) {
                                         xn.ensure_grad();
                                         MatMap<Real>(xn.grad.data(), N, I).noalias() +=
                                             dout * ConstMatMap<Real>(wn.value.data(), O, I);
                                     }
                                     if (wn.requires_grad) {
                                         wn.ensure_grad();
                                         MatMap<Real>(wn.grad.data(), O, I).noalias() +=
                                             dout.transpose() * ConstMatMap<Real>(xn.value.data(), N, I);
                                     }
                                     if (bn.requires_grad) {
                                         bn.ensure_grad();
                                         for (Eigen::Index o = 0; o < O; ++o) {
                                             bn.grad[static_cast<std::size_t>(o)] += dout.col(o).sum();
                                         }
                                     }
                                 });
}

template <typename Real>
Tensor<Real> upsample_nearest2x(const Tensor<Real>& x) {
    require(x.rank() == 4, "upsample input must be NxCxHxW, got " + shape_string(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1);
    const std::size_t h = x.dim(2);
    const std::size_t w = x.dim(3);
    std::vector<Real> out(planes * 4 * h * w);
    const auto in = x.data();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t y = 0; y < 2 * h; ++y) {
            const Real* src = in.data() + (p * h + y / 2) * w;
            Real* dst = out.data() + (p * 2 * h + y) * 2 * w;
            for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
        }
    }
    return Tensor<Real>::from_op({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x},
                                 [planes, h, w](Node<Real>& self) {
                                     auto& xn = *self.parents[0];
                                     xn.ensure_grad();
                                     for (std::size_t p = 0; p < planes; ++p) {
                                         for (std::size_t y = 0; y < 2 * h; ++y) {
                                             const Real* src = self.grad.data() + (p * 2 * h + y) * 2 * w;
                                             Real* dst = xn.grad.data() + (p * h + y / 2) * w;
                                             for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx / 2] += src[xx];
                                         }
                                     }
                                 });
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    require(a.shape() == b.shape(), "add shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor<Real>::from_op(a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *self.parents[static_cast<std::size_t>(k)];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        }
    });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    require(a.shape() == b.shape(), "sub shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return Tensor<Real>::from_op(a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        }
    });
}

template <typename Real>
Tensor<Real> global_avg_pool(const Tensor<Real>& x) {
    require(x.rank() == 4, "global_avg_pool input must be NxCxHxW, got " + shape_string(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1);
    const std::size_t area = x.dim(2) * x.dim(3);
    std::vector<Real> out(planes);
    for (std::size_t p = 0; p < planes; ++p) {
        const Real* src = x.data().data() + p * area;
        Real s = 0;
        for (std::size_t i = 0; i < area; ++i) s += src[i];
        out[p] = s / static_cast<Real>(area);
    }
    return Tensor<Real>::from_op({x.dim(0), x.dim(1)}, std::move(out), {x}, [planes, area](Node<Real>& self) {
        auto& xn = *self.parents[0];
        xn.ensure_grad();
        const Real scale = Real(1) / static_cast<Real>(area);
        for (std::size_t p = 0; p < planes; ++p) {
            const Real g = self.grad[p] * scale;
            Real* dst = xn.grad.data() + p * area;
            for (std::size_t i = 0; i < area; ++i) dst[i] += g;
        }
    });
}

template <typename Real>
Tensor<Real> mean_rows(const Tensor<Real>& x) {
    require(x.rank() == 2, "mean_rows input must be NxF, got " + shape_string(x.shape()));
    const std::size_t n = x.dim(0);
    const std::size_t f = x.dim(1);
    std::vector<Real> out(f, Real(0));
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < f; ++j) out[j] += x.data()[r * f + j];
    }
    for (auto& v : out) v /= static_cast<Real>(n);
    return Tensor<Real>::from_op({1, f}, std::move(out), {x}, [n, f](Node<Real>& self) {
        auto& xn = *self.parents[0];
        xn.ensure_grad();
        const Real scale = Real(1) / static_cast<Real>(n);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < f; ++j) xn.grad[r * f + j] += self.grad[j] * scale;
        }
    });
}

template <typename Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
    require(!parts.empty(), "concat_rows needs at least one input");
    const std::size_t f = parts.front().rank() == 2 ? parts.front().dim(1) : 0;
    std::size_t rows = 0;
    for (const auto& p : parts) {
        require(p.rank() == 2 && p.dim(1) == f, "concat_rows inputs must be Nx" + std::to_string(f) + ", got " +
                                                    shape_string(p.shape()));
        rows += p.dim(0);
    }
    std::vector<Real> out;
    out.reserve(rows * f);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return Tensor<Real>::from_op({rows, f}, std::move(out), parts, [](Node<Real>& self) {
        std::size_t offset = 0;
        for (auto& parent : self.parents) {
            const std::size_t n = parent->value.size();
            if (parent->requires_grad) {
                parent->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) parent->grad[i] += self.grad[offset + i];
            }
            offset += n;
        }
    });
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
    Real s = 0;
    for (Real v : x.data()) s += v;
    return Tensor<Real>::from_op({}, {s}, {x}, [](Node<Real>& self) {
        auto& xn = *self.parents[0];
        xn.ensure_grad();
        for (auto& g : xn.grad) g += self.grad[0];
    });
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
    require(numel(shape) == x.numel(), "reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
    std::vector<Real> out(x.data().begin(), x.data().end());
    return Tensor<Real>::from_op(std::move(shape), std::move(out), {x}, [](Node<Real>& self) {
        auto& xn = *self.parents[0];
        xn.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn.grad[i] += self.grad[i];
    });
}

template <typename Real>
Tensor<Real> temporal_shift(const Tensor<Real>& x, double fraction) {
    require(x.rank() == 4, "temporal_shift input must be TxCxHxW, got " + shape_string(x.shape()));
    const std::size_t t_len = x.dim(0);
    const std::size_t c_len = x.dim(1);
    const std::size_t area = x.dim(2) * x.dim(3);
    const auto fold = static_cast<std::size_t>(std::floor(static_cast<double>(c_len) * fraction));
    require(t_len >= 1, "temporal_shift needs at least one frame");
    require(fold >= 1 && 2 * fold <= c_len,
            "temporal_shift: " + std::to_string(c_len) + " channels too few for fraction " + std::to_string(fraction));

    // Source frame offset for channel c: -1 (previous), +1 (next) or 0.
    auto offset = [fold](std::size_t c) -> std::ptrdiff_t {
        if (c < fold) return -1;
        if (c < 2 * fold) return 1;
        return 0;
    };
    std::vector<Real> out(x.numel(), Real(0));
    const auto in = x.data();
    for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t c = 0; c < c_len; ++c) {
            const auto src_t = static_cast<std::ptrdiff_t>(t) + offset(c);
            if (src_t < 0 || src_t >= static_cast<std::ptrdiff_t>(t_len)) continue;
            const Real* src = in.data() + (static_cast<std::size_t>(src_t) * c_len + c) * area;
            std::copy(src, src + area, out.data() + (t * c_len + c) * area);
        }
    }
    return Tensor<Real>::from_op(x.shape(), std::move(out), {x}, [t_len, c_len, area, offset](Node<Real>& self) {
        auto& xn = *self.parents[0];
        xn.ensure_grad();
        for (std::size_t t = 0; t < t_len; ++t) {
            for (std::size_t c = 0; c < c_len; ++c) {
                const auto src_t = static_cast<std::ptrdiff_t>(t) + offset(c);
                if (src_t < 0 || src_t >= static_cast<std::ptrdiff_t>(t_len)) continue;
                const Real* g = self.grad.data() + (t * c_len + c) * area;
                Real* dst = xn.grad.data() + (static_cast<std::size_t>(src_t) * c_len + c) * area;
                for (std::size_t i = 0; i < area; ++i) dst[i] += g[i];
            }
        }
    });
}

template <typename Real>
Tensor<Real> weighted_bce_loss(const Tensor<Real>& logits, std::span<const Real> targets, std::span<const Real> weights) {
    const std::size_t n = logits.numel();
    require(targets.size() == n && weights.size() == n, "weighted_bce_loss: target/weight size mismatch");
    const Real eps = static_cast<Real>(1e-7);
    auto probs = std::make_shared<std::vector<Real>>(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Real p = stable_sigmoid(logits.data()[i]);
        (*probs)[i] = p;
        const double q = std::clamp(static_cast<double>(p), static_cast<double>(eps), 1.0 - static_cast<double>(eps));
        const double y = targets[i];
        total += -static_cast<double>(weights[i]) * (y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
    }
    std::vector<Real> t(targets.begin(), targets.end());
    std::vector<Real> w(weights.begin(), weights.end());
    return Tensor<Real>::from_op(
        {}, {static_cast<Real>(total / static_cast<double>(n))}, {logits},
        [probs, t = std::move(t), w = std::move(w)](Node<Real>& self) {
            auto& zn = *self.parents[0];
            zn.ensure_grad();
            const Real scale = self.grad[0] / static_cast<Real>(probs->size());
            for (std::size_t i = 0; i < probs->size(); ++i) zn.grad[i] += scale * w[i] * ((*probs)[i] - t[i]);
        });
}

template <typename Real>
Tensor<Real> bce_loss(const Tensor<Real>& logits, std::span<const Real> targets) {
    const std::size_t n = logits.numel();
    require(targets.size() == n, "bce_loss: target size mismatch");
    const double eps = 1e-7;
    auto probs = std::make_shared<std::vector<Real>>(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Real p = stable_sigmoid(logits.data()[i]);
        (*probs)[i] = p;
        const double q = std::clamp(static_cast<double>(p), eps, 1.0 - eps);
        total -= targets[i] * std::log(q) + (1.0 - targets[i]) * std::log(1.0 - q);
    }
    std::vector<Real> t(targets.begin(), targets.end());
    return Tensor<Real>::from_op({}, {static_cast<Real>(total / static_cast<double>(n))}, {logits},
                                 [probs, t = std::move(t)](Node<Real>& self) {
                                     auto& zn = *self.parents[0];
                                     zn.ensure_grad();
                                     const Real scale = self.grad[0] / static_cast<Real>(probs->size());
                                     for (std::size_t i = 0; i < probs->size(); ++i) {
                                         zn.grad[i] += scale * ((*probs)[i] - t[i]);
                                     }
                                 });
}

template <typename Real>
Tensor<Real> mse_loss(const Tensor<Real>& pred, std::span<const Real> targets) {
    const std::size_t n = pred.numel();
    require(targets.size() == n, "mse_loss: target size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pred.data()[i]) - targets[i];
        total += d * d;
    }
    std::vector<Real> t(targets.begin(), targets.end());
    return Tensor<Real>::from_op({}, {static_cast<Real>(total / static_cast<double>(n))}, {pred},
                                 [t = std::move(t)](Node<Real>& self) {
                                     auto& pn = *self.parents[0];
                                     pn.ensure_grad();
                                     const Real scale = Real(2) * self.grad[0] / static_cast<Real>(t.size());
                                     for (std::size_t i = 0; i < t.size(); ++i) {
                                         pn.grad[i] += scale * (pn.value[i] - t[i]);
                                     }
                                 });
}

template <typename Real>
Tensor<Real> softmax_cross_entropy(const Tensor<Real>& logits, std::span<const int> labels) {
    require(logits.rank() == 2, "softmax_cross_entropy logits must be NxK, got " + shape_string(logits.shape()));
    const std::size_t n = logits.dim(0);
    const std::size_t k = logits.dim(1);
    require(labels.size() == n, "softmax_cross_entropy: label count mismatch");
    auto probs = std::make_shared<std::vector<Real>>(n * k);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const Real* z = logits.data().data() + r * k;
        require(labels[r] >= 0 && static_cast<std::size_t>(labels[r]) < k, "softmax_cross_entropy: label out of range");
        const Real m = *std::max_element(z, z + k);
        double denom = 0.0;
        for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(z[j] - m));
        for (std::size_t j = 0; j < k; ++j) {
            (*probs)[r * k + j] = static_cast<Real>(std::exp(static_cast<double>(z[j] - m)) / denom);
        }
        total += std::log(denom) + static_cast<double>(m) - static_cast<double>(z[labels[r]]);
    }
    std::vector<int> lab(labels.begin(), labels.end());
    return Tensor<Real>::from_op({}, {static_cast<Real>(total / static_cast<double>(n))}, {logits},
                                 [probs, lab = std::move(lab), n, k](Node<Real>& self) {
                                     auto& zn = *self.parents[0];
                                     zn.ensure_grad();
                                     const Real scale = self.grad[0] / static_cast<Real>(n);
                                     for (std::size_t r = 0; r < n; ++r) {
                                         for (std::size_t j = 0; j < k; ++j) {
                                             const Real onehot = static_cast<int>(j) == lab[r] ? Real(1) : Real(0);
                                             zn.grad[r * k + j] += scale * ((*probs)[r * k + j] - onehot);
                                         }
                                     }
                                 });
}

#define CONFSEG_INSTANTIATE(Real)                                                                                   \
    template class Tensor<Real>;                                                                                    \
    template Tensor<Real> conv2d(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&, std::size_t, int);   \
    template Tensor<Real> relu(const Tensor<Real>&);                                                                \
    template Tensor<Real> sigmoid(const Tensor<Real>&);                                                             \
    template Tensor<Real> linear(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&);                    \
    template Tensor<Real> upsample_nearest2x(const Tensor<Real>&);                                                  \
    template Tensor<Real> add(const Tensor<Real>&, const Tensor<Real>&);                                            \
    template Tensor<Real> sub(const Tensor<Real>&, const Tensor<Real>&);                                            \
    template Tensor<Real> global_avg_pool(const Tensor<Real>&);                                                     \
    template Tensor<Real> mean_rows(const Tensor<Real>&);                                                           \
    template Tensor<Real> concat_rows(const std::vector<Tensor<Real>>&);                                            \
    template Tensor<Real> sum(const Tensor<Real>&);                                                                 \
    template Tensor<Real> reshape(const Tensor<Real>&, Shape);                                                      \
    template Tensor<Real> temporal_shift(const Tensor<Real>&, double);                                              \
    template Tensor<Real> weighted_bce_loss(const Tensor<Real>&, std::span<const Real>, std::span<const Real>);     \
    template Tensor<Real> bce_loss(const Tensor<Real>&, std::span<const Real>);                                     \
    template Tensor<Real> mse_loss(const Tensor<Real>&, std::span<const Real>);                                     \
    template Tensor<Real> softmax_cross_entropy(const Tensor<Real>&, std::span<const int>);

CONFSEG_INSTANTIATE(float)
CONFSEG_INSTANTIATE(double)

#undef CONFSEG_INSTANTIATE

}  // namespace confseg::nn
