#pragma once

// Minimal deterministic data parallelism. Work is split into contiguous
// index chunks; every output element is written by exactly one worker and
// per-element reduction order never depends on the worker count, so results
// are bit-identical for any thread setting.

#include <functional>

#include "dycaf/common.hpp"

namespace dycaf {

// Worker cap resolved from the DYCAF_THREADS environment variable on first
// use (0 or unset means hardware concurrency).
int max_workers();

// Programmatic override; 0 restores the environment-derived value.
void set_max_workers(int n);

// Runs fn(begin, end) over disjoint chunks of [0, n). Small ranges run
// inline on the calling thread.
void parallel_for(i64 n, i64 grain, const std::function<void(i64, i64)>& fn);

}  // namespace dycaf
