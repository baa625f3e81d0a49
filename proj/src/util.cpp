#include "ibg/util.hpp"

#include <openssl/evp.h>

#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include "ibg/common.hpp"

namespace ibg {

bool all_finite(const Mat& m) { return m.allFinite(); }
bool all_finite(const Vec& v) { return v.allFinite(); }

void check_finite(const Mat& m, const std::string& what) {
  check(m.allFinite(), what + ": non-finite entries");
}

void check_finite(const Vec& v, const std::string& what) {
  check(v.allFinite(), what + ": non-finite entries");
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t fork_seed(uint64_t root, std::string_view label) {
  // FNV-1a over the label, then mixed with the root.
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(root ^ splitmix64(h));
}

std::mt19937_64 make_rng(uint64_t seed) { return std::mt19937_64(splitmix64(seed)); }

double rademacher(uint64_t seed, uint64_t datapoint, uint64_t source, uint64_t token) {
  uint64_t k = splitmix64(seed);
  k = splitmix64(k ^ (datapoint * 0x9e3779b97f4a7c15ULL + 1));
  k = splitmix64(k ^ (source * 0xd1342543de82ef95ULL + 2));
  k = splitmix64(k ^ (token * 0xaf251af3b0f025b5ULL + 3));
  return (k >> 63) ? 1.0 : -1.0;
}

double rng_uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double rng_normal(std::mt19937_64& rng) {
  double u1;
  do {
    u1 = rng_uniform01(rng);
  } while (u1 <= 0.0);
  double u2 = rng_uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double rng_uniform_pm(std::mt19937_64& rng, double a) {
  return (2.0 * rng_uniform01(rng) - 1.0) * a;
}

std::string sha256_hex(const void* data, size_t n) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  check(ctx != nullptr, "sha256: EVP context allocation failed");
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, data, n);
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hexd = "0123456789abcdef";
  std::string out(len * 2, '0');
  for (unsigned int i = 0; i < len; ++i) {
    out[2 * i] = hexd[digest[i] >> 4];
    out[2 * i + 1] = hexd[digest[i] & 0xf];
  }
  return out;
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string sha256_file_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "sha256: cannot open " + path);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 20);
  while (in.good()) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    std::streamsize got = in.gcount();
    if (got > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<size_t>(got));
  }
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hexd = "0123456789abcdef";
  std::string out(len * 2, '0');
  for (unsigned int i = 0; i < len; ++i) {
    out[2 * i] = hexd[digest[i] >> 4];
    out[2 * i + 1] = hexd[digest[i] & 0xf];
  }
  return out;
}

size_t num_chunks(size_t n_items, size_t chunk_size) {
  if (chunk_size == 0) chunk_size = 1;
  return (n_items + chunk_size - 1) / chunk_size;
}

void parallel_chunks(size_t n_items, size_t chunk_size, size_t n_threads,
                     const std::function<void(size_t, size_t, size_t)>& fn) {
  if (n_items == 0) return;
  if (chunk_size == 0) chunk_size = 1;
  size_t chunks = num_chunks(n_items, chunk_size);
  if (n_threads <= 1 || chunks <= 1) {
    for (size_t c = 0; c < chunks; ++c) {
      size_t b = c * chunk_size;
      fn(c, b, std::min(b + chunk_size, n_items));
    }
    return;
  }
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      size_t c = next.fetch_add(1);
      if (c >= chunks) return;
      size_t b = c * chunk_size;
      fn(c, b, std::min(b + chunk_size, n_items));
    }
  };
  std::vector<std::thread> pool;
  size_t use = std::min(n_threads, chunks);
  pool.reserve(use);
  for (size_t i = 0; i < use; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(out.good(), "cannot write " + path);
  out << content;
  check(out.good(), "write failed for " + path);
}

}  // namespace ibg
