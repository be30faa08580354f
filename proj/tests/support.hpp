#pragma once

// Oracles shared by the unit tests and the acceptance binary.

#include <cstdint>
#include <string>
#include <vector>

#include "normlab/tensor.hpp"
#include "normlab/theory.hpp"

namespace normlab::testkit {

struct GradCheck {
  std::string op;
  std::uint64_t seed = 0;
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12)
};

/// Central-difference check of every graph primitive, plus a full CNN with
/// Train-mode BatchNorm, for seeds 0..seeds-1.
std::vector<GradCheck> gradient_suite(std::size_t seeds);

/// Hard-margin solution in two dimensions by enumerating every active set of
/// size one and two and keeping the smallest feasible ||U theta||.
theory::Vector brute_force_max_margin_2d(const theory::Matrix& X, const theory::Vector& Y,
                                         const theory::Vector& U);

/// Separable instance through the origin: labels are sign(x . w*) and points
/// closer than `gap` to the separating hyperplane are redrawn.
void separable_instance(std::uint64_t seed, std::size_t n, std::size_t d, theory::Matrix& X,
                        theory::Vector& Y, double gap = 0.1);

/// N samples over k classes whose labels are drawn from the predicted
/// distribution itself, i.e. perfectly calibrated in expectation.
void calibrated_sample(std::uint64_t seed, std::size_t n, std::size_t k, Tensor& probs,
                       std::vector<int>& labels);

}  // namespace normlab::testkit
