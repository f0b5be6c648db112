#pragma once

#include <cstddef>
#include <vector>

namespace nullcal {

// Probability vector over a verbalizer's ordered label set.
struct ClassDistribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }

  static ClassDistribution uniform(std::size_t n) { return {std::vector<double>(n, 1.0 / static_cast<double>(n))}; }

  // Index of the largest probability; ties go to the lowest index.
  std::size_t argmax() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
      if (probs[i] > probs[best]) best = i;
    return best;
  }
};

}  // namespace nullcal
