#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <unordered_map>
#include <string>
#include <vector>

#include "captrack/common.hpp"

namespace captrack {

namespace detail {

/// Per-thread LIFO cache of 64-byte-aligned blocks, bucketed by exact size.
/// Feature maps of the same handful of shapes are allocated and freed
/// constantly; recycling the same addresses keeps TLB and caches warm and
/// keeps SIMD loop peeling identical (bit-determinism relies on alignment).
class BlockCache {
public:
    static constexpr size_t kMaxCachedBytes = size_t(384) << 20;
    static constexpr size_t kMinCachedBlock = 4096;

    void* get(size_t bytes) {
        if (bytes >= kMinCachedBlock) {
            auto it = buckets_.find(bytes);
            if (it != buckets_.end() && !it->second.empty()) {
                void* p = it->second.back();
                it->second.pop_back();
                cached_ -= bytes;
                return p;
            }
        }
        return ::operator new(bytes, std::align_val_t(64));
    }

    void put(void* p, size_t bytes) noexcept {
        if (bytes >= kMinCachedBlock && cached_ + bytes <= kMaxCachedBytes) {
            try {
                buckets_[bytes].push_back(p);
                cached_ += bytes;
                return;
            } catch (...) {
            }
        }
        ::operator delete(p, std::align_val_t(64));
    }

    ~BlockCache() {
        for (auto& [size, blocks] : buckets_)
            for (void* p : blocks) ::operator delete(p, std::align_val_t(64));
    }

private:
    std::unordered_map<size_t, std::vector<void*>> buckets_;
    size_t cached_ = 0;
};

inline BlockCache& block_cache() {
    thread_local BlockCache cache;
    return cache;
}

}  // namespace detail

/// Allocator for tensor storage: 64-byte aligned, recycled through a
/// per-thread block cache, and default-initializing on resize (layer kernels
/// overwrite whole buffers, so the usual zero-fill is pure cost).
template <class T>
struct TensorAlloc {
    using value_type = T;

    TensorAlloc() = default;
    template <class U>
    TensorAlloc(const TensorAlloc<U>&) {}

    T* allocate(size_t n) { return static_cast<T*>(detail::block_cache().get(n * sizeof(T))); }
    void deallocate(T* p, size_t n) noexcept { detail::block_cache().put(p, n * sizeof(T)); }

    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0)
            ::new (static_cast<void*>(p)) U;
        else
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }

    template <class U>
    bool operator==(const TensorAlloc<U>&) const {
        return true;
    }
    template <class U>
    bool operator!=(const TensorAlloc<U>&) const {
        return false;
    }
};

using dvec = std::vector<double, TensorAlloc<double>>;

/// Dense row-major tensor of doubles. Shapes are small (rank <= 4 in
/// practice); all layer kernels operate on these.
struct Tensor {
    std::vector<int> shape;
    dvec data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), 0.0);
    }
    Tensor(std::vector<int> s, dvec d) : shape(std::move(s)), data(std::move(d)) {
        require(data.size() == numel_of(shape), "tensor: data length does not match shape");
    }
    Tensor(std::vector<int> s, std::initializer_list<double> d) : shape(std::move(s)), data(d) {
        require(data.size() == numel_of(shape), "tensor: data length does not match shape");
    }

    /// Allocates without zero-filling; caller must write every element.
    static Tensor uninit(std::vector<int> s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.resize(numel_of(t.shape));
        return t;
    }

    static size_t numel_of(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) {
            require(d >= 0, "tensor: negative dimension");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    size_t numel() const { return data.size(); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    double& operator()(int i) { return data[static_cast<size_t>(i)]; }
    double operator()(int i) const { return data[static_cast<size_t>(i)]; }
    double& operator()(int i, int j) { return data[static_cast<size_t>(i) * dim(1) + j]; }
    double operator()(int i, int j) const { return data[static_cast<size_t>(i) * dim(1) + j]; }
    double& operator()(int c, int h, int w) {
        return data[(static_cast<size_t>(c) * dim(1) + h) * dim(2) + w];
    }
    double operator()(int c, int h, int w) const {
        return data[(static_cast<size_t>(c) * dim(1) + h) * dim(2) + w];
    }
    double& operator()(int a, int b, int h, int w) {
        return data[((static_cast<size_t>(a) * dim(1) + b) * dim(2) + h) * dim(3) + w];
    }
    double operator()(int a, int b, int h, int w) const {
        return data[((static_cast<size_t>(a) * dim(1) + b) * dim(2) + h) * dim(3) + w];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void zero() { std::fill(data.begin(), data.end(), 0.0); }

    Tensor& operator+=(const Tensor& o) {
        require(same_shape(o), "tensor: shape mismatch in +=");
        for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }
    Tensor& operator*=(double s) {
        for (double& v : data) v *= s;
        return *this;
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, double v) {
        Tensor t = uninit(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
        Tensor t = uninit(std::move(s));
        for (double& v : t.data) v = rng.normal() * stddev;
        return t;
    }
};

inline std::string shape_str(const Tensor& t) {
    std::string s = "[";
    for (size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

inline double dot(const Tensor& a, const Tensor& b) {
    require(a.numel() == b.numel(), "dot: size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double sum(const Tensor& a) {
    return std::accumulate(a.data.begin(), a.data.end(), 0.0);
}

inline double l2_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace captrack
