#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>

namespace anm {

using real_t = double;

/* ======================= errors ======================= */

// Base class for everything thrown by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed shapes, unknown operators, arity mismatches: raised at
// construction/build time.
struct ShapeError : Error {
    using Error::Error;
};

// A numerical precondition was violated while evaluating (log of a
// nonpositive value, singular matrix, ...). Carries the offending batch
// index when known (-1 otherwise) and the vertex name when raised from a
// graph evaluation.
struct DomainError : Error {
    std::string bare;  // message without location decoration
    std::string where;
    long batch_index = -1;

    DomainError(const std::string& msg, std::string where_ = {},
                long batch = -1)
            : Error(format(msg, where_, batch)),
              bare{msg},
              where{std::move(where_)},
              batch_index{batch} {}

private:
    static std::string format(const std::string& msg, const std::string& w,
                              long b) {
        std::ostringstream os;
        os << "numerical domain error: " << msg;
        if (!w.empty())
            os << " (at " << w << ')';
        if (b >= 0)
            os << " [batch " << b << ']';
        return os.str();
    }
};

// Continuation failures: stagnation, iteration caps, invalid starting
// points, factorization breakdown.
struct SolverError : Error {
    using Error::Error;
};

// File parsing / writing problems.
struct IoError : Error {
    using Error::Error;
};

namespace detail {
inline void format_parts(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_parts(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    format_parts(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string str_concat(const Args&... args) {
    std::ostringstream os;
    detail::format_parts(os, args...);
    return os.str();
}

template <typename Exc = ShapeError, typename... Args>
void check(bool cond, const Args&... args) {
    if (!cond)
        throw Exc{str_concat(args...)};
}

/* ======================= threading ======================= */

// Number of worker threads used to split batched operators along the batch
// dimension. Results are independent of this setting.
void set_num_threads(int nr);
int get_num_threads();

// Runs fn(begin, end) over a partition of [0, n). Serial when the thread
// count is 1 or the range is small.
void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn);

}  // namespace anm
