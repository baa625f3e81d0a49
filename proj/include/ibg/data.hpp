#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ibg/common.hpp"
#include "ibg/model.hpp"

namespace ibg {

// Deterministic Fisher-Yates permutation of 0..n-1; identical output for a
// given seed on every platform (no standard-library distributions involved).
std::vector<Eigen::Index> shuffled_indices(Eigen::Index n, uint64_t seed);

// All p^2 sequences [x, y, =] with =-token id p and label (x+y) mod p,
// in a seed-shuffled order whose first 30% (floor) is the train split.
struct ModAddDataset {
  int p = 0;
  Eigen::Index n = 0;
  std::vector<int32_t> ids;     // n * 3 tokens
  std::vector<int32_t> labels;  // n labels in [0, p)
  std::vector<uint8_t> is_train;
  std::vector<Eigen::Index> train_idx, test_idx;

  Batch batch(const std::vector<Eigen::Index>& idx) const;
  Batch full_batch() const;
  std::vector<int32_t> labels_at(const std::vector<Eigen::Index>& idx) const;
};

ModAddDataset gen_modadd(int p, uint64_t seed);

// Images stay in byte form (plane-ordered R, G, B); batches materialize rows
// [1, pixels / 255] on demand.
struct Cifar10Dataset {
  Eigen::Index n = 0;
  std::vector<uint8_t> pixels;  // n * 3072
  std::vector<int32_t> labels;  // n values in [0, 9]

  static bool is_animal(int label);
  Batch batch(const std::vector<Eigen::Index>& idx) const;
  Batch batch_range(Eigen::Index begin, Eigen::Index end) const;
  std::vector<int32_t> labels_at(const std::vector<Eigen::Index>& idx) const;
};

Cifar10Dataset load_cifar10(const std::vector<std::string>& paths);

}  // namespace ibg
