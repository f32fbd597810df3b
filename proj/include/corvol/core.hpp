// core.hpp - small value types, dense grids, errors and the worker pool shared by every corvol module.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace corvol {

// ---------------------------------------------------------------------------------------------
// Errors. InputError maps to CLI exit code 2, NumericalError to exit code 3.
// ---------------------------------------------------------------------------------------------
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class InputError : public Error {
  public:
    using Error::Error;
};

class NumericalError : public Error {
  public:
    using Error::Error;
};

// ---------------------------------------------------------------------------------------------
// Small vectors.
// ---------------------------------------------------------------------------------------------
struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    constexpr Vec3 &operator+=(const Vec3 &o) { x += o.x; y += o.y; z += o.z; return *this; }
    constexpr Vec3 &operator-=(const Vec3 &o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    constexpr Vec3 &operator*=(double s) { x *= s; y *= s; z *= s; return *this; }
    constexpr double &operator[](int a) { return a == 0 ? x : (a == 1 ? y : z); }
    constexpr double operator[](int a) const { return a == 0 ? x : (a == 1 ? y : z); }
    friend constexpr Vec3 operator+(Vec3 a, const Vec3 &b) { return a += b; }
    friend constexpr Vec3 operator-(Vec3 a, const Vec3 &b) { return a -= b; }
    friend constexpr Vec3 operator-(const Vec3 &a) { return {-a.x, -a.y, -a.z}; }
    friend constexpr Vec3 operator*(Vec3 a, double s) { return a *= s; }
    friend constexpr Vec3 operator*(double s, Vec3 a) { return a *= s; }
    friend constexpr bool operator==(const Vec3 &, const Vec3 &) = default;
};

constexpr double dot(const Vec3 &a, const Vec3 &b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3 &a, const Vec3 &b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3 &a) { return std::sqrt(dot(a, a)); }
inline bool is_finite(const Vec3 &a) { return std::isfinite(a.x) && std::isfinite(a.y) && std::isfinite(a.z); }

// 2D vector on the spherical grid: x is the azimuth (column) direction, y the elevation (row) direction.
struct Vec2 {
    double x = 0.0, y = 0.0;

    constexpr Vec2 &operator+=(const Vec2 &o) { x += o.x; y += o.y; return *this; }
    constexpr Vec2 &operator-=(const Vec2 &o) { x -= o.x; y -= o.y; return *this; }
    constexpr Vec2 &operator*=(double s) { x *= s; y *= s; return *this; }
    constexpr double &operator[](int a) { return a == 0 ? x : y; }
    constexpr double operator[](int a) const { return a == 0 ? x : y; }
    friend constexpr Vec2 operator+(Vec2 a, const Vec2 &b) { return a += b; }
    friend constexpr Vec2 operator-(Vec2 a, const Vec2 &b) { return a -= b; }
    friend constexpr Vec2 operator-(const Vec2 &a) { return {-a.x, -a.y}; }
    friend constexpr Vec2 operator*(Vec2 a, double s) { return a *= s; }
    friend constexpr Vec2 operator*(double s, Vec2 a) { return a *= s; }
    friend constexpr bool operator==(const Vec2 &, const Vec2 &) = default;
};

constexpr double dot(const Vec2 &a, const Vec2 &b) { return a.x * b.x + a.y * b.y; }
inline double norm(const Vec2 &a) { return std::sqrt(dot(a, a)); }
inline bool is_finite(const Vec2 &a) { return std::isfinite(a.x) && std::isfinite(a.y); }

inline bool is_finite(double v) { return std::isfinite(v); }

// Squared magnitude helpers used by generic field code.
inline double sq_norm(double v) { return v * v; }
inline double sq_norm(const Vec2 &v) { return dot(v, v); }
inline double sq_norm(const Vec3 &v) { return dot(v, v); }

// ---------------------------------------------------------------------------------------------
// Extents. Storage is row-major with x fastest: index = x + nx * (y + ny * z).
// ---------------------------------------------------------------------------------------------
struct Extent3 {
    int nx = 0, ny = 0, nz = 0;

    constexpr std::size_t size() const {
        return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
    }
    constexpr int operator[](int a) const { return a == 0 ? nx : (a == 1 ? ny : nz); }
    constexpr std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * z);
    }
    friend constexpr bool operator==(const Extent3 &, const Extent3 &) = default;
};

// Spherical grid extent: width columns of azimuth (periodic), height rows of elevation.
struct Extent2 {
    int width = 0, height = 0;

    constexpr std::size_t size() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
    constexpr std::size_t index(int col, int row) const {
        return static_cast<std::size_t>(col) + static_cast<std::size_t>(width) * static_cast<std::size_t>(row);
    }
    friend constexpr bool operator==(const Extent2 &, const Extent2 &) = default;
};

inline std::string to_string(const Extent3 &e) {
    return std::to_string(e.nx) + "x" + std::to_string(e.ny) + "x" + std::to_string(e.nz);
}
inline std::string to_string(const Extent2 &e) { return std::to_string(e.width) + "x" + std::to_string(e.height); }

// ---------------------------------------------------------------------------------------------
// Dense grids.
// ---------------------------------------------------------------------------------------------
template <class T> class Grid3 {
  public:
    Grid3() = default;
    explicit Grid3(Extent3 e, T fill = T{}) : extent_(e), data_(e.size(), fill) {}

    const Extent3 &extent() const { return extent_; }
    std::size_t size() const { return data_.size(); }

    T &operator[](std::size_t i) { return data_[i]; }
    const T &operator[](std::size_t i) const { return data_[i]; }
    T &at(int x, int y, int z) { return data_[extent_.index(x, y, z)]; }
    const T &at(int x, int y, int z) const { return data_[extent_.index(x, y, z)]; }

    std::vector<T> &data() { return data_; }
    const std::vector<T> &data() const { return data_; }

    friend bool operator==(const Grid3 &, const Grid3 &) = default;

  private:
    Extent3 extent_{};
    std::vector<T> data_;
};

template <class T> class Grid2 {
  public:
    Grid2() = default;
    explicit Grid2(Extent2 e, T fill = T{}) : extent_(e), data_(e.size(), fill) {}

    const Extent2 &extent() const { return extent_; }
    std::size_t size() const { return data_.size(); }
    int width() const { return extent_.width; }
    int height() const { return extent_.height; }

    T &operator[](std::size_t i) { return data_[i]; }
    const T &operator[](std::size_t i) const { return data_[i]; }
    T &at(int col, int row) { return data_[extent_.index(col, row)]; }
    const T &at(int col, int row) const { return data_[extent_.index(col, row)]; }

    std::vector<T> &data() { return data_; }
    const std::vector<T> &data() const { return data_; }

    friend bool operator==(const Grid2 &, const Grid2 &) = default;

  private:
    Extent2 extent_{};
    std::vector<T> data_;
};

// ---------------------------------------------------------------------------------------------
// Worker pool. Loops handed to parallel_for must write disjoint elements only; all reductions in
// corvol run sequentially so results do not depend on the worker count.
// ---------------------------------------------------------------------------------------------
namespace detail {
inline int &worker_slot() {
    thread_local int workers = 1;
    return workers;
}
} // namespace detail

inline int default_worker_count() {
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

inline int worker_count() { return detail::worker_slot(); }

// Sets the worker count for the calling thread for the lifetime of the guard.
class ScopedWorkers {
  public:
    explicit ScopedWorkers(int n) : previous_(detail::worker_slot()) { detail::worker_slot() = std::max(1, n); }
    ~ScopedWorkers() { detail::worker_slot() = previous_; }
    ScopedWorkers(const ScopedWorkers &) = delete;
    ScopedWorkers &operator=(const ScopedWorkers &) = delete;

  private:
    int previous_;
};

// Calls body(begin, end) over a static partition of [0, n).
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)> &body,
                         std::size_t min_chunk = 8192) {
    const int workers = worker_count();
    if (workers <= 1 || n < 2 * min_chunk) {
        body(0, n);
        return;
    }
    const std::size_t chunks = std::min<std::size_t>(static_cast<std::size_t>(workers), n / min_chunk);
    std::vector<std::thread> pool;
    pool.reserve(chunks - 1);
    const std::size_t step = (n + chunks - 1) / chunks;
    for (std::size_t c = 1; c < chunks; ++c) {
        const std::size_t b = c * step;
        const std::size_t e = std::min(n, b + step);
        if (b < e) pool.emplace_back([&body, b, e] { body(b, e); });
    }
    body(0, std::min(n, step));
    for (auto &t : pool) t.join();
}

// ---------------------------------------------------------------------------------------------
// Stencil signature. While a StencilProbe is alive on a thread, every interpolation stencil and
// triangle lookup folds its discrete choice (cell index, clamp state, triangle id) into a hash.
// Two evaluations with equal signatures lie on the same smooth piece of the piecewise-smooth
// objective, which is what finite-difference checks need to know.
// ---------------------------------------------------------------------------------------------
namespace detail {
inline std::uint64_t *&probe_slot() {
    thread_local std::uint64_t *slot = nullptr;
    return slot;
}
} // namespace detail

inline void probe_mix(std::uint64_t v) {
    if (auto *h = detail::probe_slot()) {
        *h ^= v + 0x9e3779b97f4a7c15ULL + (*h << 6) + (*h >> 2);
    }
}

class StencilProbe {
  public:
    StencilProbe() : previous_(detail::probe_slot()) { detail::probe_slot() = &hash_; }
    ~StencilProbe() { detail::probe_slot() = previous_; }
    StencilProbe(const StencilProbe &) = delete;
    StencilProbe &operator=(const StencilProbe &) = delete;
    std::uint64_t signature() const { return hash_; }

  private:
    std::uint64_t hash_ = 1469598103934665603ULL;
    std::uint64_t *previous_;
};

} // namespace corvol
