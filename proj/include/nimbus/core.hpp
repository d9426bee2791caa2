#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <type_traits>
#include <vector>

namespace nimbus {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

/// Caller supplied arguments that violate a precondition.
struct InvalidInput : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// An operation was invoked in a state that does not permit it.
struct InvalidState : std::logic_error {
    using std::logic_error::logic_error;
};

/// Files on disk are missing, truncated or malformed.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A loss or gradient became non-finite during optimization.
struct NumericalAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) {
    // log(1 + e^x) without overflow for large |x|
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double inverse_softplus(double y) {
    return y > 30.0 ? y : std::log(std::expm1(y));
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline bool all_finite(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Threading. Work is always split into a fixed number of chunks that does not
// depend on the thread count, and per-chunk partial results are merged in
// chunk order, so results are bit-identical for any NIMBUS_THREADS value.

inline int thread_count() {
    if (const char* env = std::getenv("NIMBUS_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) {
            return n;
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

template <class Fn>
void parallel_for_chunks(std::size_t n_chunks, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(n_chunks, static_cast<std::size_t>(thread_count()));
    if (workers <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) {
            fn(c);
        }
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t) {
        pool.emplace_back([&, t] {
            for (std::size_t c = t; c < n_chunks; c += workers) {
                fn(c);
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
}

// ---------------------------------------------------------------------------
// Little-endian binary helpers shared by every on-disk format.

namespace io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <class T>
void write_pod(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    static_assert(std::is_trivially_copyable_v<T>);
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!is) {
        throw DataError("unexpected end of binary stream");
    }
    return value;
}

inline void write_f64_array(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> read_f64_array(std::istream& is, std::size_t n) {
    std::vector<double> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) {
        throw DataError("unexpected end of binary stream");
    }
    return v;
}

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), 4); }

inline void expect_magic(std::istream& is, std::string_view magic) {
    char buf[4] = {};
    is.read(buf, 4);
    if (!is || std::string_view(buf, 4) != magic) {
        throw DataError("bad magic, expected " + std::string(magic));
    }
}

}  // namespace io

/// 64-bit FNV-1a, used for config fingerprints and per-view seed derivation.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over a ^ rotated b
    std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace nimbus
