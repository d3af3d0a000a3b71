#pragma once

#include "hetsense/common.hpp"

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>

#include <cstdint>
#include <string_view>

namespace hetsense {

using Engine = boost::random::mt19937_64;

/// SplitMix64 finalizer; a bijective 64-bit mixer.
std::uint64_t mix64(std::uint64_t x);

/// Hierarchical seed derivation.
///
/// A stream is identified by a 64-bit key. Children are derived from the parent
/// key and a label (or an integer counter) by hashing, never by drawing from a
/// parent generator, so adding or removing a consumer of randomness leaves every
/// other stream untouched. `SeedStream(7).child("batch").child(t)` always yields
/// the same engine state regardless of what else the program has sampled.
class SeedStream {
 public:
  explicit SeedStream(std::uint64_t master_seed);

  SeedStream child(std::string_view label) const;
  SeedStream child(std::uint64_t index) const;

  std::uint64_t key() const { return key_; }
  Engine engine() const { return Engine(key_); }

 private:
  struct FromKey {};
  SeedStream(FromKey, std::uint64_t key) : key_(key) {}
  std::uint64_t key_;
};

/// Fills `out` with i.i.d. N(0, 1) draws in column-major order.
void fill_standard_normal(Engine& engine, Eigen::Ref<Matrix> out);

Matrix standard_normal_matrix(Engine& engine, Index rows, Index cols);

}  // namespace hetsense
