#include "ibg/data.hpp"

#include <fstream>

#include "ibg/util.hpp"

namespace ibg {

namespace {

// Unbiased bounded draw via rejection; depends only on the engine's specified
// output sequence, so results are identical across standard libraries.
uint64_t draw_below(std::mt19937_64& rng, uint64_t bound) {
  uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % bound;
}

constexpr Eigen::Index kCifarRecord = 3073;
constexpr Eigen::Index kCifarPixels = 3072;

}  // namespace

std::vector<Eigen::Index> shuffled_indices(Eigen::Index n, uint64_t seed) {
  std::vector<Eigen::Index> idx(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  std::mt19937_64 rng = make_rng(seed);
  for (Eigen::Index i = n - 1; i > 0; --i) {
    auto j = static_cast<Eigen::Index>(draw_below(rng, static_cast<uint64_t>(i) + 1));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  return idx;
}

Batch ModAddDataset::batch(const std::vector<Eigen::Index>& idx) const {
  Batch b;
  b.n = static_cast<Eigen::Index>(idx.size());
  b.ids.reserve(idx.size() * 3);
  for (Eigen::Index i : idx) {
    check(i >= 0 && i < n, "datapoint index out of range");
    for (int t = 0; t < 3; ++t) b.ids.push_back(ids[static_cast<size_t>(3 * i + t)]);
  }
  return b;
}

Batch ModAddDataset::full_batch() const {
  Batch b;
  b.n = n;
  b.ids = ids;
  return b;
}

std::vector<int32_t> ModAddDataset::labels_at(const std::vector<Eigen::Index>& idx) const {
  std::vector<int32_t> out;
  out.reserve(idx.size());
  for (Eigen::Index i : idx) out.push_back(labels[static_cast<size_t>(i)]);
  return out;
}

ModAddDataset gen_modadd(int p, uint64_t seed) {
  check_cfg(p >= 2, "modulus must be at least 2");
  ModAddDataset d;
  d.p = p;
  d.n = static_cast<Eigen::Index>(p) * p;
  auto order = shuffled_indices(d.n, fork_seed(seed, "modadd-split"));
  d.ids.reserve(static_cast<size_t>(d.n) * 3);
  d.labels.reserve(static_cast<size_t>(d.n));
  for (Eigen::Index k = 0; k < d.n; ++k) {
    auto pair = order[static_cast<size_t>(k)];
    int x = static_cast<int>(pair / p);
    int y = static_cast<int>(pair % p);
    d.ids.push_back(x);
    d.ids.push_back(y);
    d.ids.push_back(p);
    d.labels.push_back(static_cast<int32_t>((x + y) % p));
  }
  auto n_train = static_cast<Eigen::Index>(0.3 * static_cast<double>(d.n));
  d.is_train.assign(static_cast<size_t>(d.n), 0);
  for (Eigen::Index i = 0; i < d.n; ++i) {
    if (i < n_train) {
      d.is_train[static_cast<size_t>(i)] = 1;
      d.train_idx.push_back(i);
    } else {
      d.test_idx.push_back(i);
    }
  }
  return d;
}

bool Cifar10Dataset::is_animal(int label) { return label >= 2 && label <= 7; }

Batch Cifar10Dataset::batch(const std::vector<Eigen::Index>& idx) const {
  Batch b;
  b.n = static_cast<Eigen::Index>(idx.size());
  b.reals.resize(b.n, kCifarPixels + 1);
  for (Eigen::Index r = 0; r < b.n; ++r) {
    Eigen::Index i = idx[static_cast<size_t>(r)];
    check(i >= 0 && i < n, "image index out of range");
    b.reals(r, 0) = 1.0;
    const uint8_t* px = pixels.data() + i * kCifarPixels;
    for (Eigen::Index k = 0; k < kCifarPixels; ++k)
      b.reals(r, k + 1) = static_cast<double>(px[k]) / 255.0;
  }
  return b;
}

Batch Cifar10Dataset::batch_range(Eigen::Index begin, Eigen::Index end) const {
  check(begin >= 0 && end >= begin && end <= n, "image range out of bounds");
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<size_t>(end - begin));
  for (Eigen::Index i = begin; i < end; ++i) idx.push_back(i);
  return batch(idx);
}

std::vector<int32_t> Cifar10Dataset::labels_at(const std::vector<Eigen::Index>& idx) const {
  std::vector<int32_t> out;
  out.reserve(idx.size());
  for (Eigen::Index i : idx) out.push_back(labels[static_cast<size_t>(i)]);
  return out;
}

Cifar10Dataset load_cifar10(const std::vector<std::string>& paths) {
  check_cfg(!paths.empty(), "no image batch files given");
  Cifar10Dataset d;
  for (const std::string& path : paths) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    check_cfg(in.good(), "cannot open " + path + " for reading");
    auto size = static_cast<int64_t>(in.tellg());
    check(size > 0 && size % kCifarRecord == 0,
          path + ": size " + std::to_string(size) + " is not a whole number of 3073-byte records");
    in.seekg(0);
    auto records = static_cast<Eigen::Index>(size / kCifarRecord);
    for (Eigen::Index r = 0; r < records; ++r) {
      char label = 0;
      in.read(&label, 1);
      auto lab = static_cast<int32_t>(static_cast<uint8_t>(label));
      check(lab <= 9, path + ": corrupt record " + std::to_string(r) + " with label " +
                          std::to_string(lab));
      d.labels.push_back(lab);
      size_t at = d.pixels.size();
      d.pixels.resize(at + kCifarPixels);
      in.read(reinterpret_cast<char*>(d.pixels.data() + at), kCifarPixels);
      check(in.good(), path + ": unreadable record " + std::to_string(r));
    }
    d.n += records;
  }
  return d;
}

}  // namespace ibg
