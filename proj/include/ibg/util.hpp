#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace ibg {

// All randomness flows from one root seed, forked per stage by stable labels.
uint64_t splitmix64(uint64_t x);
uint64_t fork_seed(uint64_t root, std::string_view label);
std::mt19937_64 make_rng(uint64_t seed);

// Counter-keyed +-1 draw. Independent of evaluation order, so parallel
// scheduling cannot change results.
double rademacher(uint64_t seed, uint64_t datapoint, uint64_t source, uint64_t token);

// Explicit draw algorithms (not standard-library distributions, whose output
// is implementation-defined): identical results on every platform.
double rng_uniform01(std::mt19937_64& rng);           // [0, 1)
double rng_normal(std::mt19937_64& rng);              // Box-Muller, fresh pair per call
double rng_uniform_pm(std::mt19937_64& rng, double a);  // [-a, a)

std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::string& path);

// Static partition into fixed-size chunks; chunk results must be merged by the
// caller in chunk order. Deterministic for any thread count.
void parallel_chunks(size_t n_items, size_t chunk_size, size_t n_threads,
                     const std::function<void(size_t chunk_idx, size_t begin, size_t end)>& fn);

size_t num_chunks(size_t n_items, size_t chunk_size);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace ibg
