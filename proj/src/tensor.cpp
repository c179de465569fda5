// SPDX-License-Identifier: Apache-2.0
#include "t4dg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace t4dg::ad {

namespace {

struct Tape {
    std::vector<std::shared_ptr<Node>> nodes;
    bool enabled = true;
};

Tape& tape() {
    static thread_local Tape t;
    return t;
}

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) {
        if (e < 0) throw ShapeError("negative extent");
        n *= e;
    }
    return n;
}

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

bool any_requires(const std::vector<std::shared_ptr<Node>>& parents) {
    for (const auto& p : parents)
        if (p->requires_grad) return true;
    return false;
}

// c[m,n] += a[m,k] * b[k,n]
void matmul_accum(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        float* crow = c + i * n;
        const float* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const float av = arow[p];
            const float* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace

namespace detail {

std::shared_ptr<Node> make_node(std::vector<int> shape, bool track,
                                std::vector<std::shared_ptr<Node>> parents) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data.resize(static_cast<size_t>(shape_numel(node->shape)));
    if (track && tape().enabled && any_requires(parents)) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->id = tape().nodes.size();
        tape().nodes.push_back(node);
    }
    return node;
}

void accumulate(Node& parent, const float* g, int64_t n) {
    if (!parent.requires_grad) return;
    if (parent.grad.empty()) parent.grad.assign(static_cast<size_t>(parent.numel()), 0.0f);
    for (int64_t i = 0; i < n; ++i) parent.grad[static_cast<size_t>(i)] += g[i];
}

int64_t check_suffix_broadcast(const Tensor& a, const Tensor& b, const char* op) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sb.size() > sa.size())
        throw ShapeError(std::string(op) + ": " + shape_str(sb) + " does not broadcast onto " +
                         shape_str(sa));
    const size_t off = sa.size() - sb.size();
    for (size_t i = 0; i < sb.size(); ++i)
        if (sb[i] != sa[off + i])
            throw ShapeError(std::string(op) + ": " + shape_str(sb) + " is not a suffix of " +
                             shape_str(sa));
    const int64_t bn = b.numel();
    return bn == 0 ? 0 : a.numel() / bn;
}

} // namespace detail

using detail::accumulate;
using detail::make_node;

// ---------------------------------------------------------------------------
// Tensor basics

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data.assign(static_cast<size_t>(shape_numel(node->shape)), 0.0f);
    node->requires_grad = requires_grad;
    return Tensor(node);
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("from_data: element count mismatch for " + shape_str(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(node);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = rng.normal(0.0f, stddev);
    return t;
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
    return node->data[0];
}

std::vector<float>& Tensor::grad() {
    if (node->grad.empty()) node->grad.assign(static_cast<size_t>(numel()), 0.0f);
    return node->grad;
}

void Tensor::zero_grad() {
    if (!node->grad.empty()) std::fill(node->grad.begin(), node->grad.end(), 0.0f);
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<Node>();
    n->shape = node->shape;
    n->data = node->data;
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// Tape control

void clear_tape() { tape().nodes.clear(); }

size_t tape_size() { return tape().nodes.size(); }

bool grad_enabled() { return tape().enabled; }

NoGradGuard::NoGradGuard() : prev_(tape().enabled) { tape().enabled = false; }
NoGradGuard::~NoGradGuard() { tape().enabled = prev_; }

void backward(const Tensor& loss) {
    if (!loss.defined()) throw ShapeError("backward: undefined tensor");
    if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar");
    Node* top = loss.node.get();
    if (top->is_leaf()) {
        if (top->requires_grad) {
            if (top->grad.empty()) top->grad.assign(1, 0.0f);
            top->grad[0] += 1.0f;
        }
        return;
    }
    auto& nodes = tape().nodes;
    if (top->id >= nodes.size() || nodes[top->id].get() != top)
        throw std::runtime_error("backward: node does not belong to the live tape");
    if (top->grad.empty()) top->grad.assign(1, 0.0f);
    top->grad[0] += 1.0f;
    for (int64_t i = static_cast<int64_t>(top->id); i >= 0; --i) {
        Node& cur = *nodes[static_cast<size_t>(i)];
        if (cur.grad.empty()) continue;
        cur.backward_fn(cur);
        cur.grad = {};
    }
}

// ---------------------------------------------------------------------------
// Elementwise with suffix broadcast

namespace {

template <class Fwd, class BwdA, class BwdB>
Tensor binary_suffix(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, BwdA bwd_a,
                     BwdB bwd_b) {
    detail::check_suffix_broadcast(a, b, name);
    const int64_t bn = b.numel();
    const int64_t an = a.numel();
    auto node = make_node(a.shape(), true, {a.node, b.node});
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* out = node->data.data();
    for (int64_t i = 0; i < an; ++i) out[i] = fwd(pa[i], pb[bn ? i % bn : 0]);
    if (node->requires_grad) {
        node->backward_fn = [bwd_a, bwd_b, an, bn](Node& self) {
            Node& na = *self.parents[0];
            Node& nb = *self.parents[1];
            const float* g = self.grad.data();
            const float* pa2 = na.data.data();
            const float* pb2 = nb.data.data();
            if (na.requires_grad) {
                if (na.grad.empty()) na.grad.assign(static_cast<size_t>(an), 0.0f);
                for (int64_t i = 0; i < an; ++i)
                    na.grad[static_cast<size_t>(i)] += bwd_a(g[i], pa2[i], pb2[bn ? i % bn : 0]);
            }
            if (nb.requires_grad) {
                if (nb.grad.empty()) nb.grad.assign(static_cast<size_t>(bn), 0.0f);
                for (int64_t i = 0; i < an; ++i)
                    nb.grad[static_cast<size_t>(i % bn)] += bwd_b(g[i], pa2[i], pb2[i % bn]);
            }
        };
    }
    return Tensor(node);
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_suffix(
        a, b, "add", [](float x, float y) { return x + y; },
        [](float g, float, float) { return g; }, [](float g, float, float) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_suffix(
        a, b, "sub", [](float x, float y) { return x - y; },
        [](float g, float, float) { return g; }, [](float g, float, float) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_suffix(
        a, b, "mul", [](float x, float y) { return x * y; },
        [](float g, float, float y) { return g * y; }, [](float g, float x, float) { return g * x; });
}

// ---------------------------------------------------------------------------
// Unary

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& x, Fwd fwd, Bwd bwd /* (g, x, y) -> dx */) {
    auto node = make_node(x.shape(), true, {x.node});
    const int64_t n = x.numel();
    const float* px = x.data().data();
    float* out = node->data.data();
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(px[i]);
    if (node->requires_grad) {
        node->backward_fn = [bwd, n](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            if (nx.grad.empty()) nx.grad.assign(static_cast<size_t>(n), 0.0f);
            const float* g = self.grad.data();
            const float* px2 = nx.data.data();
            const float* py = self.data.data();
            for (int64_t i = 0; i < n; ++i)
                nx.grad[static_cast<size_t>(i)] += bwd(g[i], px2[i], py[i]);
        };
    }
    return Tensor(node);
}

float stable_softplus(float x) {
    if (x > 20.0f) return x;
    if (x < -20.0f) return std::exp(x);
    return std::log1p(std::exp(x));
}

float stable_sigmoid(float x) {
    if (x >= 0.0f) {
        const float z = std::exp(-x);
        return 1.0f / (1.0f + z);
    }
    const float z = std::exp(x);
    return z / (1.0f + z);
}

} // namespace

Tensor neg(const Tensor& x) {
    return unary_op(
        x, [](float v) { return -v; }, [](float g, float, float) { return -g; });
}

Tensor scale(const Tensor& x, float s) {
    return unary_op(
        x, [s](float v) { return v * s; }, [s](float g, float, float) { return g * s; });
}

Tensor add_scalar(const Tensor& x, float s) {
    return unary_op(
        x, [s](float v) { return v + s; }, [](float g, float, float) { return g; });
}

Tensor exp(const Tensor& x) {
    return unary_op(
        x, [](float v) { return std::exp(v); }, [](float g, float, float y) { return g * y; });
}

Tensor log(const Tensor& x) {
    return unary_op(
        x, [](float v) { return std::log(v); }, [](float g, float v, float) { return g / v; });
}

Tensor sqrt(const Tensor& x) {
    return unary_op(
        x, [](float v) { return std::sqrt(v); },
        [](float g, float, float y) { return y > 0.0f ? g * 0.5f / y : 0.0f; });
}

Tensor tanh(const Tensor& x) {
    return unary_op(
        x, [](float v) { return std::tanh(v); },
        [](float g, float, float y) { return g * (1.0f - y * y); });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x, [](float v) { return stable_sigmoid(v); },
        [](float g, float, float y) { return g * y * (1.0f - y); });
}

Tensor softplus(const Tensor& x) {
    return unary_op(
        x, [](float v) { return stable_softplus(v); },
        [](float g, float v, float) { return g * stable_sigmoid(v); });
}

Tensor gelu(const Tensor& x) {
    constexpr float inv_sqrt2 = 0.70710678118654752f;
    constexpr float inv_sqrt2pi = 0.39894228040143268f;
    return unary_op(
        x, [=](float v) { return 0.5f * v * (1.0f + std::erf(v * inv_sqrt2)); },
        [=](float g, float v, float) {
            const float cdf = 0.5f * (1.0f + std::erf(v * inv_sqrt2));
            const float pdf = inv_sqrt2pi * std::exp(-0.5f * v * v);
            return g * (cdf + v * pdf);
        });
}

Tensor abs(const Tensor& x) {
    return unary_op(
        x, [](float v) { return std::fabs(v); },
        [](float g, float v, float) { return v > 0.0f ? g : (v < 0.0f ? -g : 0.0f); });
}

Tensor square(const Tensor& x) {
    return unary_op(
        x, [](float v) { return v * v; }, [](float g, float v, float) { return 2.0f * g * v; });
}

Tensor reciprocal(const Tensor& x) {
    return unary_op(
        x, [](float v) { return 1.0f / v; }, [](float g, float, float y) { return -g * y * y; });
}

Tensor clamp(const Tensor& x, float lo, float hi) {
    return unary_op(
        x, [lo, hi](float v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](float g, float v, float) { return (v >= lo && v <= hi) ? g : 0.0f; });
}

// ---------------------------------------------------------------------------
// Matmul / transpose

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: rank-2 operands required");
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner extents differ (" + std::to_string(k) + " vs " +
                         std::to_string(k2) + ")");
    auto node = make_node({static_cast<int>(m), static_cast<int>(n)}, true, {a.node, b.node});
    std::fill(node->data.begin(), node->data.end(), 0.0f);
    matmul_accum(a.data().data(), b.data().data(), node->data.data(), m, k, n);
    if (node->requires_grad) {
        node->backward_fn = [m, k, n](Node& self) {
            Node& na = *self.parents[0];
            Node& nb = *self.parents[1];
            const float* g = self.grad.data();
            if (na.requires_grad) {
                if (na.grad.empty()) na.grad.assign(static_cast<size_t>(m * k), 0.0f);
                const float* pb = nb.data.data();
                // dA[i,p] += sum_j g[i,j] * B[p,j]
                for (int64_t i = 0; i < m; ++i) {
                    const float* grow = g + i * n;
                    float* da = na.grad.data() + i * k;
                    for (int64_t p = 0; p < k; ++p) {
                        const float* brow = pb + p * n;
                        float acc = 0.0f;
                        for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        da[p] += acc;
                    }
                }
            }
            if (nb.requires_grad) {
                if (nb.grad.empty()) nb.grad.assign(static_cast<size_t>(k * n), 0.0f);
                const float* pa = na.data.data();
                // dB[p,j] += sum_i A[i,p] * g[i,j]
                for (int64_t i = 0; i < m; ++i) {
                    const float* arow = pa + i * k;
                    const float* grow = g + i * n;
                    for (int64_t p = 0; p < k; ++p) {
                        const float av = arow[p];
                        float* db = nb.grad.data() + p * n;
                        for (int64_t j = 0; j < n; ++j) db[j] += av * grow[j];
                    }
                }
            }
        };
    }
    return Tensor(node);
}

Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose2d: rank-2 operand required");
    const int64_t m = x.dim(0), n = x.dim(1);
    auto node = make_node({static_cast<int>(n), static_cast<int>(m)}, true, {x.node});
    const float* px = x.data().data();
    float* out = node->data.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[j * m + i] = px[i * n + j];
    if (node->requires_grad) {
        node->backward_fn = [m, n](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            if (nx.grad.empty()) nx.grad.assign(static_cast<size_t>(m * n), 0.0f);
            const float* g = self.grad.data();
            for (int64_t j = 0; j < n; ++j)
                for (int64_t i = 0; i < m; ++i) nx.grad[static_cast<size_t>(i * n + j)] += g[j * m + i];
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Normalizations / softmax

Tensor layer_norm_lastdim(const Tensor& x, float eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm_lastdim: rank >= 1 required");
    const int64_t c = x.dim(x.rank() - 1);
    if (c < 1) throw ShapeError("layer_norm_lastdim: empty last axis");
    const int64_t rows = x.numel() / c;
    auto node = make_node(x.shape(), true, {x.node});
    std::vector<float> inv_std(static_cast<size_t>(rows));
    const float* px = x.data().data();
    float* out = node->data.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* row = px + r * c;
        double mean = 0.0;
        for (int64_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        inv_std[static_cast<size_t>(r)] = is;
        float* orow = out + r * c;
        for (int64_t j = 0; j < c; ++j) orow[j] = (row[j] - static_cast<float>(mean)) * is;
    }
    if (node->requires_grad) {
        node->backward_fn = [rows, c, inv_std = std::move(inv_std)](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            if (nx.grad.empty()) nx.grad.assign(static_cast<size_t>(rows * c), 0.0f);
            const float* g = self.grad.data();
            const float* y = self.data.data();
            for (int64_t r = 0; r < rows; ++r) {
                const float* grow = g + r * c;
                const float* yrow = y + r * c;
                double gsum = 0.0, gysum = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    gsum += grow[j];
                    gysum += grow[j] * yrow[j];
                }
                const float gmean = static_cast<float>(gsum / static_cast<double>(c));
                const float gymean = static_cast<float>(gysum / static_cast<double>(c));
                const float is = inv_std[static_cast<size_t>(r)];
                float* dx = nx.grad.data() + r * c;
                for (int64_t j = 0; j < c; ++j)
                    dx[j] += is * (grow[j] - gmean - yrow[j] * gymean);
            }
        };
    }
    return Tensor(node);
}

Tensor l2_normalize_lastdim(const Tensor& x, float eps) {
    if (x.rank() < 1) throw ShapeError("l2_normalize_lastdim: rank >= 1 required");
    const int64_t c = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / c;
    auto node = make_node(x.shape(), true, {x.node});
    std::vector<float> inv_norm(static_cast<size_t>(rows));
    const float* px = x.data().data();
    float* out = node->data.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* row = px + r * c;
        double ss = 0.0;
        for (int64_t j = 0; j < c; ++j) ss += static_cast<double>(row[j]) * row[j];
        const float in = static_cast<float>(1.0 / std::sqrt(ss + eps));
        inv_norm[static_cast<size_t>(r)] = in;
        float* orow = out + r * c;
        for (int64_t j = 0; j < c; ++j) orow[j] = row[j] * in;
    }
    if (node->requires_grad) {
        node->backward_fn = [rows, c, inv_norm = std::move(inv_norm)](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            if (nx.grad.empty()) nx.grad.assign(static_cast<size_t>(rows * c), 0.0f);
            const float* g = self.grad.data();
            const float* y = self.data.data();
            for (int64_t r = 0; r < rows; ++r) {
                const float* grow = g + r * c;
                const float* yrow = y + r * c;
                double dot = 0.0;
                for (int64_t j = 0; j < c; ++j) dot += grow[j] * yrow[j];
                const float in = inv_norm[static_cast<size_t>(r)];
                float* dx = nx.grad.data() + r * c;
                for (int64_t j = 0; j < c; ++j)
                    dx[j] += in * (grow[j] - yrow[j] * static_cast<float>(dot));
            }
        };
    }
    return Tensor(node);
}

Tensor softmax_lastdim(const Tensor& x, const Tensor* additive_mask) {
    if (x.rank() < 1) throw ShapeError("softmax_lastdim: rank >= 1 required");
    const int64_t c = x.dim(x.rank() - 1);
    if (c < 1) throw ShapeError("softmax_lastdim: empty last axis");
    const int64_t rows = x.numel() / c;
    int64_t mask_n = 0;
    const float* pm = nullptr;
    if (additive_mask) {
        detail::check_suffix_broadcast(x, *additive_mask, "softmax_lastdim");
        mask_n = additive_mask->numel();
        pm = additive_mask->data().data();
    }
    auto node = make_node(x.shape(), true, {x.node});
    const float* px = x.data().data();
    float* out = node->data.data();
    const float neg_inf = -std::numeric_limits<float>::infinity();
    for (int64_t r = 0; r < rows; ++r) {
        const float* row = px + r * c;
        float m = neg_inf;
        for (int64_t j = 0; j < c; ++j) {
            const int64_t idx = r * c + j;
            const float v = row[j] + (pm ? pm[idx % mask_n] : 0.0f);
            m = std::max(m, v);
        }
        if (m == neg_inf)
            throw std::runtime_error("softmax_lastdim: fully masked row " + std::to_string(r));
        double denom = 0.0;
        float* orow = out + r * c;
        for (int64_t j = 0; j < c; ++j) {
            const int64_t idx = r * c + j;
            const float v = row[j] + (pm ? pm[idx % mask_n] : 0.0f);
            const float e = std::exp(v - m);
            orow[j] = e;
            denom += e;
        }
        const float inv = static_cast<float>(1.0 / denom);
        for (int64_t j = 0; j < c; ++j) orow[j] *= inv;
    }
    if (node->requires_grad) {
        node->backward_fn = [rows, c](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            if (nx.grad.empty()) nx.grad.assign(static_cast<size_t>(rows * c), 0.0f);
            const float* g = self.grad.data();
            const float* p = self.data.data();
            for (int64_t r = 0; r < rows; ++r) {
                const float* grow = g + r * c;
                const float* prow = p + r * c;
                double dot = 0.0;
                for (int64_t j = 0; j < c; ++j) dot += grow[j] * prow[j];
                float* dx = nx.grad.data() + r * c;
                for (int64_t j = 0; j < c; ++j)
                    dx[j] += prow[j] * (grow[j] - static_cast<float>(dot));
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum_all(const Tensor& x) {
    auto node = make_node({}, true, {x.node});
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    node->data[0] = static_cast<float>(acc);
    if (node->requires_grad) {
        node->backward_fn = [](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            if (nx.grad.empty()) nx.grad.assign(static_cast<size_t>(nx.numel()), 0.0f);
            const float g = self.grad[0];
            for (auto& v : nx.grad) v += g;
        };
    }
    return Tensor(node);
}

Tensor mean_all(const Tensor& x) {
    const int64_t n = x.numel();
    if (n == 0) throw ShapeError("mean_all: empty tensor");
    auto node = make_node({}, true, {x.node});
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    node->data[0] = static_cast<float>(acc / static_cast<double>(n));
    if (node->requires_grad) {
        node->backward_fn = [n](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            if (nx.grad.empty()) nx.grad.assign(static_cast<size_t>(n), 0.0f);
            const float g = self.grad[0] / static_cast<float>(n);
            for (auto& v : nx.grad) v += g;
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: element count mismatch for " + shape_str(shape));
    auto node = make_node(std::move(shape), true, {x.node});
    node->data = x.data();
    if (node->requires_grad) {
        node->backward_fn = [](Node& self) {
            Node& nx = *self.parents[0];
            accumulate(nx, self.grad.data(), self.numel());
        };
    }
    return Tensor(node);
}

namespace {

void axis_extents(const std::vector<int>& shape, int axis, int64_t& outer, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

} // namespace

Tensor slice(const Tensor& x, int axis, int lo, int hi) {
    if (axis < 0 || axis >= x.rank()) throw ShapeError("slice: bad axis");
    const int extent = x.dim(axis);
    if (lo < 0 || hi > extent || lo >= hi) throw IndexError("slice: bad range");
    int64_t outer, inner;
    axis_extents(x.shape(), axis, outer, inner);
    std::vector<int> oshape = x.shape();
    oshape[static_cast<size_t>(axis)] = hi - lo;
    auto node = make_node(std::move(oshape), true, {x.node});
    const int len = hi - lo;
    const float* px = x.data().data();
    float* out = node->data.data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out + o * len * inner, px + (o * extent + lo) * inner,
                    static_cast<size_t>(len * inner) * sizeof(float));
    if (node->requires_grad) {
        node->backward_fn = [outer, inner, extent, lo, len](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            if (nx.grad.empty()) nx.grad.assign(static_cast<size_t>(nx.numel()), 0.0f);
            const float* g = self.grad.data();
            for (int64_t o = 0; o < outer; ++o) {
                float* dst = nx.grad.data() + (o * extent + lo) * inner;
                const float* src = g + o * len * inner;
                for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        };
    }
    return Tensor(node);
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const int r = xs[0].rank();
    if (axis < 0 || axis >= r) throw ShapeError("concat: bad axis");
    int total = 0;
    for (const auto& t : xs) {
        if (t.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && t.dim(i) != xs[0].dim(i)) throw ShapeError("concat: extent mismatch");
        total += t.dim(axis);
    }
    std::vector<int> oshape = xs[0].shape();
    oshape[static_cast<size_t>(axis)] = total;
    std::vector<std::shared_ptr<Node>> parents;
    parents.reserve(xs.size());
    for (const auto& t : xs) parents.push_back(t.node);
    auto node = make_node(std::move(oshape), true, std::move(parents));
    int64_t outer, inner;
    axis_extents(node->shape, axis, outer, inner);
    std::vector<int> lens;
    lens.reserve(xs.size());
    for (const auto& t : xs) lens.push_back(t.dim(axis));
    float* out = node->data.data();
    for (int64_t o = 0; o < outer; ++o) {
        int64_t off = 0;
        for (size_t s = 0; s < xs.size(); ++s) {
            const int64_t chunk = static_cast<int64_t>(lens[s]) * inner;
            std::memcpy(out + (o * total) * inner + off, xs[s].data().data() + o * chunk,
                        static_cast<size_t>(chunk) * sizeof(float));
            off += chunk;
        }
    }
    if (node->requires_grad) {
        node->backward_fn = [outer, inner, total, lens](Node& self) {
            const float* g = self.grad.data();
            for (int64_t o = 0; o < outer; ++o) {
                int64_t off = 0;
                for (size_t s = 0; s < self.parents.size(); ++s) {
                    Node& np = *self.parents[s];
                    const int64_t chunk = static_cast<int64_t>(lens[s]) * inner;
                    if (np.requires_grad) {
                        if (np.grad.empty()) np.grad.assign(static_cast<size_t>(np.numel()), 0.0f);
                        float* dst = np.grad.data() + o * chunk;
                        const float* src = g + o * total * inner + off;
                        for (int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
                    }
                    off += chunk;
                }
            }
        };
    }
    return Tensor(node);
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    if (x.rank() < 1) throw ShapeError("gather_rows: rank >= 1 required");
    const int n0 = x.dim(0);
    const int64_t stride = x.numel() / n0;
    for (int r : rows)
        if (r < 0 || r >= n0) throw IndexError("gather_rows: index " + std::to_string(r));
    std::vector<int> oshape = x.shape();
    oshape[0] = static_cast<int>(rows.size());
    auto node = make_node(std::move(oshape), true, {x.node});
    const float* px = x.data().data();
    float* out = node->data.data();
    for (size_t i = 0; i < rows.size(); ++i)
        std::memcpy(out + static_cast<int64_t>(i) * stride, px + rows[i] * stride,
                    static_cast<size_t>(stride) * sizeof(float));
    if (node->requires_grad) {
        node->backward_fn = [rows, stride](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            if (nx.grad.empty()) nx.grad.assign(static_cast<size_t>(nx.numel()), 0.0f);
            const float* g = self.grad.data();
            for (size_t i = 0; i < rows.size(); ++i) {
                float* dst = nx.grad.data() + rows[i] * stride;
                const float* src = g + static_cast<int64_t>(i) * stride;
                for (int64_t j = 0; j < stride; ++j) dst[j] += src[j];
            }
        };
    }
    return Tensor(node);
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    if (x.rank() != 2 || s.rank() != 1) throw ShapeError("scale_rows: x rank-2, s rank-1");
    const int64_t n = x.dim(0), c = x.dim(1);
    if (s.dim(0) != n) throw ShapeError("scale_rows: row count mismatch");
    auto node = make_node(x.shape(), true, {x.node, s.node});
    const float* px = x.data().data();
    const float* ps = s.data().data();
    float* out = node->data.data();
    for (int64_t r = 0; r < n; ++r)
        for (int64_t j = 0; j < c; ++j) out[r * c + j] = px[r * c + j] * ps[r];
    if (node->requires_grad) {
        node->backward_fn = [n, c](Node& self) {
            Node& nx = *self.parents[0];
            Node& ns = *self.parents[1];
            const float* g = self.grad.data();
            if (nx.requires_grad) {
                if (nx.grad.empty()) nx.grad.assign(static_cast<size_t>(n * c), 0.0f);
                const float* ps2 = ns.data.data();
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t j = 0; j < c; ++j) nx.grad[static_cast<size_t>(r * c + j)] += g[r * c + j] * ps2[r];
            }
            if (ns.requires_grad) {
                if (ns.grad.empty()) ns.grad.assign(static_cast<size_t>(n), 0.0f);
                const float* px2 = nx.data.data();
                for (int64_t r = 0; r < n; ++r) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < c; ++j) acc += g[r * c + j] * px2[r * c + j];
                    ns.grad[static_cast<size_t>(r)] += static_cast<float>(acc);
                }
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Gradient checking

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
    Tensor xv = Tensor::from_data(x.shape(), x.data(), true);
    Tensor y = f(xv);
    if (y.numel() != 1) throw ShapeError("grad_check: f must return a scalar");
    backward(y);
    std::vector<float> analytic = xv.node->grad;
    if (analytic.empty()) analytic.assign(static_cast<size_t>(x.numel()), 0.0f);
    double worst = 0.0;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const float orig = xv.data()[static_cast<size_t>(i)];
        const double h = step * (1.0 + std::fabs(static_cast<double>(orig)));
        const float xp = static_cast<float>(orig + h);
        const float xm = static_cast<float>(orig - h);
        double fp, fm;
        {
            NoGradGuard ng;
            xv.data()[static_cast<size_t>(i)] = xp;
            fp = static_cast<double>(f(xv).item());
            xv.data()[static_cast<size_t>(i)] = xm;
            fm = static_cast<double>(f(xv).item());
            xv.data()[static_cast<size_t>(i)] = orig;
        }
        const double numeric = (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
        const double a = static_cast<double>(analytic[static_cast<size_t>(i)]);
        if (std::isnan(a) || std::isnan(numeric)) return std::numeric_limits<double>::infinity();
        const double rel = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
        worst = std::max(worst, rel);
    }
    return worst;
}

} // namespace t4dg::ad
