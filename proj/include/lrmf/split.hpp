#ifndef LRMF_SPLIT_HPP
#define LRMF_SPLIT_HPP

#include <cstddef>
#include <cstdint>
#include <vector>

namespace lrmf {

enum class SplitMode { Random, Sequential };

struct SplitSpec {
  SplitMode mode = SplitMode::Random;
  double train_fraction = 0.7;
  std::uint64_t seed = 0;
  bool augment_random_ic = false;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

/// Partitions frame indices 0..frame_count-1 into disjoint train, validation,
/// and test sets covering every index. Training takes ceil(fraction * T)
/// indices (first in time for Sequential, a seeded shuffle for Random); the
/// remainder splits into validation then test with sizes differing by at most
/// one, validation first. Throws std::invalid_argument if frame_count < 10,
/// the fraction is outside (0, 1), or any set would come out empty.
SplitIndices make_split(std::size_t frame_count, const SplitSpec& spec);

}  // namespace lrmf

#endif
