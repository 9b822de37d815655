#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfusion/tensor.hpp"

namespace xfusion {

// Named parameters plus the frozen partition. Iteration order is the sorted
// name order everywhere (updates, serialization, digests) so runs replay
// bit-identically.
template <typename T>
struct ParameterSet {
    std::map<std::string, Tensor<T>> params;
    std::set<std::string> frozen;

    Tensor<T>& at(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw std::out_of_range("no parameter named '" + name + "'");
        return it->second;
    }

    const Tensor<T>& at(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw std::out_of_range("no parameter named '" + name + "'");
        return it->second;
    }

    bool has(const std::string& name) const { return params.count(name) != 0; }

    void add(const std::string& name, Tensor<T> t) {
        if (params.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
        t.set_requires_grad(true);
        params.emplace(name, std::move(t));
    }

    void freeze(const std::string& name) {
        at(name).set_frozen(true);
        frozen.insert(name);
    }

    void unfreeze_all() {
        for (auto& [name, t] : params) {
            t.set_frozen(false);
            t.set_requires_grad(true);
        }
        frozen.clear();
    }

    bool is_frozen(const std::string& name) const { return frozen.count(name) != 0; }

    void zero_grad() {
        for (auto& [name, t] : params)
            if (!frozen.count(name)) t.zero_grad();
    }

    size_t total_elements() const {
        size_t n = 0;
        for (auto& [name, t] : params) n += t.numel();
        return n;
    }
};

// FNV-1a over name, shape, frozen flag and raw element bytes, in sorted name
// order. Used by the freezing-contract checks and reproducibility tests.
template <typename T>
uint64_t digest(const ParameterSet<T>& ps, bool frozen_only = false) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto feed = [&h](const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& [name, t] : ps.params) {
        const bool fr = ps.frozen.count(name) != 0;
        if (frozen_only && !fr) continue;
        feed(name.data(), name.size());
        for (int e : t.shape()) feed(&e, sizeof(e));
        feed(&fr, 1);
        feed(t.data().data(), t.numel() * sizeof(T));
    }
    return h;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay, bias correction and linear warmup
// ---------------------------------------------------------------------------

template <typename T>
struct OptimizerState {
    int64_t step = 0;
    double peak_lr = 1e-4;
    int64_t warmup_steps = 0;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::map<std::string, std::vector<T>> m;  // first moments, trainable only
    std::map<std::string, std::vector<T>> v;  // second moments

    double lr_at(int64_t s) const {
        if (warmup_steps > 0 && s <= warmup_steps)
            return peak_lr * static_cast<double>(s) / static_cast<double>(warmup_steps);
        return peak_lr;
    }
};

template <typename T>
void adamw_step(ParameterSet<T>& ps, OptimizerState<T>& opt) {
    opt.step += 1;
    const double lr = opt.lr_at(opt.step);
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
    for (auto& [name, t] : ps.params) {
        if (ps.frozen.count(name)) {
            if (opt.m.count(name))
                throw std::logic_error("optimizer state exists for frozen parameter '" + name + "'");
            continue;
        }
        if (t.grad().size() != t.numel())
            throw std::logic_error("adamw_step: parameter '" + name + "' has no populated gradient");
        auto& m = opt.m[name];
        auto& v = opt.v[name];
        if (m.size() != t.numel()) m.assign(t.numel(), T(0));
        if (v.size() != t.numel()) v.assign(t.numel(), T(0));
        T* p = t.data().data();
        const T* g = t.grad().data();
        for (size_t i = 0; i < t.numel(); ++i) {
            m[i] = static_cast<T>(opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i]);
            v[i] = static_cast<T>(opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i]);
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p[i] -= static_cast<T>(lr * (mh / (std::sqrt(vh) + opt.eps) + opt.weight_decay * p[i]));
        }
    }
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------
// Self-describing binary: magic+version header, then one record per entry:
// name, ndim, extents, dtype, frozen flag, little-endian raw element bytes.
// Optimizer moments and counters ride along as plain entries so a resumed
// run continues bit-compatibly.

inline constexpr char kCkptMagic[8] = {'X', 'F', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
constexpr uint8_t dtype_code() {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8, "unsupported scalar type");
    return sizeof(T) == 4 ? 0 : 1;
}

template <typename T>
void save_checkpoint(const std::string& path, const ParameterSet<T>& ps,
                     const OptimizerState<T>* opt = nullptr) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    auto w32 = [&f](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    auto w64 = [&f](uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
    auto w8 = [&f](uint8_t v) { f.write(reinterpret_cast<const char*>(&v), 1); };

    f.write(kCkptMagic, 8);
    uint32_t count = static_cast<uint32_t>(ps.params.size());
    if (opt) count += static_cast<uint32_t>(opt->m.size() + opt->v.size()) + 1;
    w32(count);

    auto write_entry = [&](const std::string& name, const std::vector<int>& shape, uint8_t frozen,
                           const void* bytes, size_t nbytes) {
        w32(static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        w32(static_cast<uint32_t>(shape.size()));
        for (int e : shape) w64(static_cast<uint64_t>(e));
        w8(dtype_code<T>());
        w8(frozen);
        w64(nbytes);
        f.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(nbytes));
    };

    for (const auto& [name, t] : ps.params)
        write_entry(name, t.shape(), ps.frozen.count(name) ? 1 : 0, t.data().data(), t.numel() * sizeof(T));
    if (opt) {
        for (const auto& [name, m] : opt->m)
            write_entry("__opt.m." + name, {static_cast<int>(m.size())}, 0, m.data(), m.size() * sizeof(T));
        for (const auto& [name, v] : opt->v)
            write_entry("__opt.v." + name, {static_cast<int>(v.size())}, 0, v.data(), v.size() * sizeof(T));
        double meta[6] = {static_cast<double>(opt->step), opt->peak_lr, static_cast<double>(opt->warmup_steps),
                          opt->beta1, opt->beta2, opt->weight_decay};
        w32(10);
        f.write("__opt.meta", 10);
        w32(1);
        w64(6);
        w8(1);  // meta is always 64-bit
        w8(0);
        w64(sizeof(meta));
        f.write(reinterpret_cast<const char*>(meta), sizeof(meta));
    }
    if (!f) throw std::runtime_error("short write on checkpoint: " + path);
}

template <typename T>
void load_checkpoint(const std::string& path, ParameterSet<T>& ps, OptimizerState<T>* opt = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error("bad checkpoint header in " + path);
    auto r32 = [&f]() { uint32_t v; f.read(reinterpret_cast<char*>(&v), 4); return v; };
    auto r64 = [&f]() { uint64_t v; f.read(reinterpret_cast<char*>(&v), 8); return v; };
    auto r8 = [&f]() { uint8_t v; f.read(reinterpret_cast<char*>(&v), 1); return v; };

    ps.params.clear();
    ps.frozen.clear();
    const uint32_t count = r32();
    for (uint32_t e = 0; e < count; ++e) {
        const uint32_t nlen = r32();
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        const uint32_t ndim = r32();
        std::vector<int> shape(ndim);
        for (auto& s : shape) s = static_cast<int>(r64());
        const uint8_t dtype = r8();
        const uint8_t frozen = r8();
        const uint64_t nbytes = r64();
        if (!f) throw std::runtime_error("truncated checkpoint: " + path);

        if (name == "__opt.meta") {
            double meta[6];
            if (nbytes != sizeof(meta)) throw std::runtime_error("bad optimizer meta in " + path);
            f.read(reinterpret_cast<char*>(meta), sizeof(meta));
            if (opt) {
                opt->step = static_cast<int64_t>(meta[0]);
                opt->peak_lr = meta[1];
                opt->warmup_steps = static_cast<int64_t>(meta[2]);
                opt->beta1 = meta[3];
                opt->beta2 = meta[4];
                opt->weight_decay = meta[5];
            }
            continue;
        }
        if (dtype != dtype_code<T>()) throw std::runtime_error("dtype mismatch for '" + name + "' in " + path);
        std::vector<T> data(nbytes / sizeof(T));
        f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(nbytes));
        if (!f) throw std::runtime_error("truncated checkpoint: " + path);

        if (name.rfind("__opt.m.", 0) == 0) {
            if (opt) opt->m[name.substr(8)] = std::move(data);
        } else if (name.rfind("__opt.v.", 0) == 0) {
            if (opt) opt->v[name.substr(8)] = std::move(data);
        } else {
            auto t = Tensor<T>::from_data(shape, std::move(data), true);
            ps.params.emplace(name, std::move(t));
            if (frozen) ps.freeze(name);
        }
    }
}

// ---------------------------------------------------------------------------
// per-sample parameter context
// ---------------------------------------------------------------------------
// Forward graphs reference parameters through ref-leaves so each sample owns
// its gradient buffers; merge() folds them into the shared parameters in
// sorted name order, keeping accumulation order independent of scheduling.

template <typename T>
class ParamContext {
public:
    explicit ParamContext(ParameterSet<T>& ps) : ps_(&ps) {}

    Tensor<T> operator()(const std::string& name) {
        auto it = refs_.find(name);
        if (it != refs_.end()) return it->second;
        Tensor<T> r = Tensor<T>::ref(ps_->at(name));
        refs_.emplace(name, r);
        return r;
    }

    // Add this sample's gradients to the parameter grads.
    void merge() {
        for (auto& [name, ref] : refs_) {
            if (ref.grad().empty()) continue;
            auto& p = ps_->at(name);
            p.zero_grad_if_missing();
            auto& dst = p.grad();
            const auto& src = ref.grad();
            for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        }
    }

private:
    ParameterSet<T>* ps_;
    std::map<std::string, Tensor<T>> refs_;
};

}  // namespace xfusion
