#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gpr {

constexpr double kSpeedOfLight = 299792458.0;  // m/s
constexpr double kVacuumPermittivity = 8.8541878128e-12;
constexpr double kVacuumPermeability = 1.25663706212e-6;
constexpr double kPi = 3.14159265358979323846;

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o) {
        x += o.x;
        y += o.y;
        z += o.z;
        return *this;
    }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm2() const { return x * x + y * y + z * z; }
    double norm() const { return std::sqrt(norm2()); }
    Vec3 normalized() const {
        const double n = norm();
        if (n < 1e-300) throw std::invalid_argument("cannot normalize zero vector");
        return *this / n;
    }
    bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// 3x3 row-major matrix, used for poses and small transforms.
struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return Mat3{}; }
    static Mat3 rotation_z(double angle_rad) {
        const double c = std::cos(angle_rad), s = std::sin(angle_rad);
        Mat3 r;
        r.m = {c, -s, 0, s, c, 0, 0, 0, 1};
        return r;
    }

    double operator()(int r, int c) const { return m[static_cast<size_t>(r * 3 + c)]; }
    double& operator()(int r, int c) { return m[static_cast<size_t>(r * 3 + c)]; }

    Vec3 apply(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 transpose() const {
        Mat3 t;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) t(r, c) = (*this)(c, r);
        return t;
    }
    Mat3 mul(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }
    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }
    double orthonormality_error() const {
        const Mat3 g = transpose().mul(*this);
        double e = 0;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                const double d = g(r, c) - (r == c ? 1.0 : 0.0);
                e += d * d;
            }
        return std::sqrt(e);
    }
};

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distribution transforms here avoid the implementation-defined std
// distributions so streams are reproducible everywhere.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_index(uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_index: n must be > 0");
        // rejection sampling to avoid modulo bias
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = engine_();
        while (v >= limit) v = engine_();
        return v % n;
    }

    int uniform_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(uniform_index(static_cast<uint64_t>(hi - lo + 1)));
    }

    // standard normal via Box-Muller (cached second draw)
    double normal() {
        if (has_cache_) {
            has_cache_ = false;
            return cache_;
        }
        double u1 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        cache_ = r * std::sin(2.0 * kPi * u2);
        has_cache_ = true;
        return r * std::cos(2.0 * kPi * u2);
    }

private:
    std::mt19937_64 engine_;
    bool has_cache_ = false;
    double cache_ = 0.0;
};

// Thread count: GPR_THREADS env var, default = hardware concurrency.
int thread_count();

// Deterministic parallel loop: [0, n) split into contiguous chunks, each index
// computed exactly once regardless of thread count. Results must be written to
// disjoint locations by the body.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk_body);

}  // namespace gpr
