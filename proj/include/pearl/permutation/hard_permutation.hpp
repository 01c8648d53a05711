#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pearl/core/error.hpp"
#include "pearl/core/rng.hpp"
#include "pearl/core/tensor.hpp"

namespace pearl {

/// A bijection on {0..n-1}. Position i of a reordered sequence holds item perm[i].
class HardPermutation {
 public:
  HardPermutation() = default;

  explicit HardPermutation(std::vector<std::size_t> perm) : perm_(std::move(perm)) {
    std::vector<bool> seen(perm_.size(), false);
    for (std::size_t p : perm_) {
      PEARL_REQUIRE(p < perm_.size() && !seen[p], ShapeError,
                    "not a permutation of 0.." + std::to_string(perm_.size()));
      seen[p] = true;
    }
  }

  static HardPermutation identity(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    return HardPermutation(std::move(p));
  }

  /// Uniformly random permutation (Fisher-Yates).
  static HardPermutation random(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.index(i)]);
    return HardPermutation(std::move(p));
  }

  std::size_t size() const noexcept { return perm_.size(); }
  std::size_t operator[](std::size_t i) const { return perm_[i]; }
  const std::vector<std::size_t>& indices() const noexcept { return perm_; }

  HardPermutation inverse() const {
    std::vector<std::size_t> inv(perm_.size());
    for (std::size_t i = 0; i < perm_.size(); ++i) inv[perm_[i]] = i;
    return HardPermutation(std::move(inv));
  }

  bool is_identity() const {
    for (std::size_t i = 0; i < perm_.size(); ++i)
      if (perm_[i] != i) return false;
    return true;
  }

  /// 0/1 matrix with M[i, perm[i]] = 1, so (M * blocks)_i = blocks[perm[i]].
  template <class T>
  Tensor<T> matrix() const {
    const std::size_t n = perm_.size();
    Tensor<T> m(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) m(i, perm_[i]) = T{1};
    return m;
  }

  friend bool operator==(const HardPermutation&, const HardPermutation&) = default;

 private:
  std::vector<std::size_t> perm_;
};

/// Reorders items so that output position i holds items[perm[i]].
template <class Item>
std::vector<Item> apply_hard(const HardPermutation& perm, std::span<const Item> items) {
  PEARL_REQUIRE(perm.size() == items.size(), ShapeError,
                "apply_hard: permutation of size " + std::to_string(perm.size()) +
                    " applied to " + std::to_string(items.size()) + " items");
  std::vector<Item> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out.push_back(items[perm[i]]);
  return out;
}

template <class Item>
std::vector<Item> apply_hard(const HardPermutation& perm, const std::vector<Item>& items) {
  return apply_hard(perm, std::span<const Item>(items));
}

inline std::size_t factorial(std::size_t n) {
  std::size_t f = 1;
  for (std::size_t i = 2; i <= n; ++i) f *= i;
  return f;
}

/// All n! permutations in lexicographic order. Throws when n exceeds `cap`.
inline std::vector<HardPermutation> enumerate_permutations(std::size_t n, std::size_t cap) {
  PEARL_REQUIRE(n <= cap, ConfigError,
                "enumeration of " + std::to_string(n) + "! permutations exceeds cap n <= " +
                    std::to_string(cap));
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::vector<HardPermutation> out;
  out.reserve(factorial(n));
  do {
    out.emplace_back(p);
  } while (std::next_permutation(p.begin(), p.end()));
  return out;
}

}  // namespace pearl
