// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "t4dg/common.hpp"
#include "t4dg/rng.hpp"

namespace t4dg::ad {

// One value node. Gradients of interior nodes live only during a backward
// sweep; leaf gradients persist and accumulate across sweeps.
struct Node {
    std::vector<int> shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    uint64_t id = 0;

    int64_t numel() const {
        int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }
    bool is_leaf() const { return !backward_fn; }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                            bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f,
                        bool requires_grad = false);

    bool defined() const { return node != nullptr; }
    const std::vector<int>& shape() const { return node->shape; }
    int rank() const { return static_cast<int>(node->shape.size()); }
    int dim(int i) const { return node->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return node->numel(); }
    bool requires_grad() const { return node->requires_grad; }

    std::vector<float>& data() { return node->data; }
    const std::vector<float>& data() const { return node->data; }
    float item() const;

    // Leaf gradient buffer; allocated zero on first access.
    std::vector<float>& grad();
    void zero_grad();

    // Detached copy sharing no graph state.
    Tensor detach() const;

    std::shared_ptr<Node> node;
};

// Tape control. Nodes are recorded in creation order; backward replays them
// strictly in reverse. Leaves are never recorded.
void clear_tape();
size_t tape_size();
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Scalar-only reverse sweep. Throws ShapeError for non-scalar input.
void backward(const Tensor& loss);

// Elementwise; the second operand may have a shape that is a trailing suffix
// of the first (broadcast over leading axes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, float s);
Tensor add_scalar(const Tensor& x, float s);

Tensor matmul(const Tensor& a, const Tensor& b); // rank-2 only
Tensor transpose2d(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor reciprocal(const Tensor& x);
Tensor clamp(const Tensor& x, float lo, float hi);

// Normalization over the last axis, no affine terms.
Tensor layer_norm_lastdim(const Tensor& x, float eps = 1e-5f);
Tensor l2_normalize_lastdim(const Tensor& x, float eps = 1e-12f);

// Softmax over the last axis with an optional additive mask (same shape or
// trailing suffix). A row whose entries are all -inf after masking throws.
Tensor softmax_lastdim(const Tensor& x, const Tensor* additive_mask = nullptr);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor slice(const Tensor& x, int axis, int lo, int hi);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
// y[i, :] = x[i, :] * s[i] for rank-2 x and rank-1 s.
Tensor scale_rows(const Tensor& x, const Tensor& s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, float s) { return scale(a, s); }
inline Tensor operator*(float s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, float s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Worst-case relative error between analytic gradients of f at x and central
// finite differences: max over coordinates of
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// Any NaN in either gradient yields +inf. f must return a scalar.
// The default step is near the float32 central-difference optimum.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double step = 5e-3);

namespace detail {
std::shared_ptr<Node> make_node(std::vector<int> shape, bool track,
                                std::vector<std::shared_ptr<Node>> parents);
void accumulate(Node& parent, const float* g, int64_t n);
int64_t check_suffix_broadcast(const Tensor& a, const Tensor& b, const char* op);
} // namespace detail

} // namespace t4dg::ad
