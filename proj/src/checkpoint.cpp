// SPDX-License-Identifier: Apache-2.0
#include "t4dg/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "container i/o assumes a little-endian host");

namespace t4dg {

namespace {

constexpr char kMagic[4] = {'T', '4', 'D', 'G'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32(std::istream& is, const std::string& path) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw IoError("truncated container: " + path);
    return v;
}

} // namespace

void save_container(const std::string& path, const std::vector<NamedTensor>& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    write_u32(os, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        write_u32(os, static_cast<uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        const auto& shape = e.value.shape();
        write_u32(os, static_cast<uint32_t>(shape.size()));
        for (int ext : shape) write_u32(os, static_cast<uint32_t>(ext));
        const auto& data = e.value.data();
        os.write(reinterpret_cast<const char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(float)));
    }
    if (!os) throw IoError("write failed: " + path);
}

std::vector<NamedTensor> load_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("bad magic in container: " + path);
    const uint32_t version = read_u32(is, path);
    if (version != kVersion)
        throw IoError("unsupported container version " + std::to_string(version) + ": " + path);
    const uint32_t count = read_u32(is, path);
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_u32(is, path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw IoError("truncated container: " + path);
        const uint32_t rank = read_u32(is, path);
        std::vector<int> shape(rank);
        int64_t numel = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            shape[r] = static_cast<int>(read_u32(is, path));
            numel *= shape[r];
        }
        std::vector<float> data(static_cast<size_t>(numel));
        if (!is.read(reinterpret_cast<char*>(data.data()),
                     static_cast<std::streamsize>(data.size() * sizeof(float))))
            throw IoError("truncated container: " + path);
        out.push_back({std::move(name), ad::Tensor::from_data(std::move(shape), std::move(data))});
    }
    return out;
}

ad::Tensor ParamStore::create(const std::string& name, std::vector<int> shape,
                              const std::vector<float>& init) {
    if (has(name)) throw ConfigError("duplicate parameter name: " + name);
    ad::Tensor t = ad::Tensor::from_data(std::move(shape), init, true);
    items_.push_back({name, t});
    return t;
}

ad::Tensor ParamStore::create_zeros(const std::string& name, std::vector<int> shape) {
    if (has(name)) throw ConfigError("duplicate parameter name: " + name);
    ad::Tensor t = ad::Tensor::zeros(std::move(shape), true);
    items_.push_back({name, t});
    return t;
}

ad::Tensor ParamStore::create_randn(const std::string& name, std::vector<int> shape, Rng& rng,
                                    float stddev) {
    if (has(name)) throw ConfigError("duplicate parameter name: " + name);
    ad::Tensor t = ad::Tensor::randn(std::move(shape), rng, stddev, true);
    items_.push_back({name, t});
    return t;
}

bool ParamStore::has(const std::string& name) const {
    for (const auto& it : items_)
        if (it.name == name) return true;
    return false;
}

ad::Tensor ParamStore::get(const std::string& name) const {
    for (const auto& it : items_)
        if (it.name == name) return it.value;
    throw ConfigError("unknown parameter: " + name);
}

int64_t ParamStore::value_count() const {
    int64_t n = 0;
    for (const auto& it : items_) n += it.value.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& it : items_) it.value.zero_grad();
}

void ParamStore::save(const std::string& path) const { save_container(path, items_); }

void ParamStore::load(const std::string& path) {
    auto entries = load_container(path);
    for (auto& it : items_) {
        bool found = false;
        for (auto& e : entries) {
            if (e.name != it.name) continue;
            if (e.value.shape() != it.value.shape())
                throw IoError("shape mismatch for " + it.name + " in " + path);
            it.value.data() = e.value.data();
            found = true;
            break;
        }
        if (!found) throw IoError("missing parameter " + it.name + " in " + path);
    }
}

Adam::Adam(ParamStore& store, float lr, float beta1, float beta2, float eps)
    : store_(store), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(store_.items().size());
    v_.resize(store_.items().size());
    for (size_t i = 0; i < store_.items().size(); ++i) {
        const size_t n = static_cast<size_t>(store_.items()[i].value.numel());
        m_[i].assign(n, 0.0f);
        v_[i].assign(n, 0.0f);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_));
    for (size_t i = 0; i < store_.items().size(); ++i) {
        auto& p = store_.items()[i].value;
        auto& g = p.node->grad;
        if (g.empty()) continue;
        auto& m = m_[i];
        auto& v = v_[i];
        float* pd = p.data().data();
        for (size_t j = 0; j < g.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0f - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0f - beta2_) * g[j] * g[j];
            const float mhat = m[j] / static_cast<float>(bc1);
            const float vhat = v[j] / static_cast<float>(bc2);
            pd[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
    store_.zero_grad();
}

} // namespace t4dg
