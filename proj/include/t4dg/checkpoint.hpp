// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "t4dg/tensor.hpp"

namespace t4dg {

struct NamedTensor {
    std::string name;
    ad::Tensor value;
};

// Binary tensor container. Layout: magic "T4DG", u32 version, u32 count,
// then per entry u32 name length, name bytes, u32 rank, u32 extents,
// float32 payload. All integers and floats little-endian.
void save_container(const std::string& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_container(const std::string& path);

// Ordered collection of trainable parameters with unique names.
class ParamStore {
public:
    // Creates a leaf tensor with requires_grad set and registers it.
    ad::Tensor create(const std::string& name, std::vector<int> shape,
                      const std::vector<float>& init);
    ad::Tensor create_zeros(const std::string& name, std::vector<int> shape);
    ad::Tensor create_randn(const std::string& name, std::vector<int> shape, Rng& rng,
                            float stddev);

    bool has(const std::string& name) const;
    ad::Tensor get(const std::string& name) const;
    const std::vector<NamedTensor>& items() const { return items_; }
    std::vector<NamedTensor>& items() { return items_; }

    int64_t value_count() const;
    void zero_grad();

    void save(const std::string& path) const;
    // Strict: every registered parameter must be present with matching shape.
    void load(const std::string& path);

private:
    std::vector<NamedTensor> items_;
};

class Adam {
public:
    explicit Adam(ParamStore& store, float lr, float beta1 = 0.9f, float beta2 = 0.95f,
                  float eps = 1e-8f);

    void set_lr(float lr) { lr_ = lr; }
    float lr() const { return lr_; }
    int64_t steps() const { return t_; }

    // Applies one update from current gradients, then zeroes them.
    void step();

private:
    ParamStore& store_;
    float lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

// Linear warmup over the first `warmup` steps, then constant.
inline float warmup_lr(float base_lr, int64_t step, int64_t warmup = 100) {
    if (warmup <= 0 || step >= warmup) return base_lr;
    return base_lr * static_cast<float>(step + 1) / static_cast<float>(warmup);
}

} // namespace t4dg
