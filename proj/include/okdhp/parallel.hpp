#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "okdhp/common.hpp"

namespace okdhp {

/// Worker cap: min(hardware, OKDHP_THREADS). Evaluated once.
inline int max_threads() {
    static const int cached = [] {
        int n = 1;
#ifdef _OPENMP
        n = omp_get_max_threads();
#endif
        if (const char* env = std::getenv("OKDHP_THREADS")) {
            const int cap = std::atoi(env);
            if (cap >= 1) n = std::min(n, cap);
        }
        return std::max(n, 1);
    }();
    return cached;
}

// Static partition of [0,n) into contiguous chunks, one per worker. Each
// index is processed by exactly one worker with a fixed inner order, so
// results are bitwise independent of the worker count.
template <typename Fn>
void parallel_for(dim_t n, dim_t grain, Fn&& fn) {
    if (n <= 0) return;
    const int nt = static_cast<int>(std::min<dim_t>(max_threads(), (n + grain - 1) / grain));
    if (nt <= 1) {
        fn(dim_t{0}, n);
        return;
    }
#ifdef _OPENMP
#pragma omp parallel num_threads(nt)
    {
        const int id = omp_get_thread_num();
        const dim_t chunk = (n + nt - 1) / nt;
        const dim_t b = std::min<dim_t>(n, chunk * id);
        const dim_t e = std::min<dim_t>(n, b + chunk);
        if (b < e) fn(b, e);
    }
#else
    fn(dim_t{0}, n);
#endif
}

} // namespace okdhp
