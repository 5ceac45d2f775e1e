#include "lrmf/split.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "lrmf/rng.hpp"

namespace lrmf {

SplitIndices make_split(std::size_t frame_count, const SplitSpec& spec) {
  if (frame_count < 10) {
    throw std::invalid_argument("make_split: need at least 10 frames, got " +
                                std::to_string(frame_count));
  }
  if (!(spec.train_fraction > 0.0) || !(spec.train_fraction < 1.0)) {
    throw std::invalid_argument("make_split: train_fraction must lie in (0, 1)");
  }

  // The guard keeps fraction * T from ceiling up when the product lands an
  // ulp above an integer (0.7 * 10 = 7 + 1e-16).
  auto n_train = static_cast<std::size_t>(
      std::ceil(spec.train_fraction * static_cast<double>(frame_count) - 1e-9));
  std::size_t rest = frame_count - n_train;
  if (n_train == 0 || rest < 2) {
    throw std::invalid_argument("make_split: split leaves an empty partition");
  }
  std::size_t n_val = rest / 2;
  std::size_t n_test = rest - n_val;

  std::vector<std::size_t> order(frame_count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (spec.mode == SplitMode::Random) {
    Rng rng(spec.seed);
    shuffle(order, rng);
  }

  SplitIndices out;
  out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                        order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.validation.begin(), out.validation.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

}  // namespace lrmf
