#pragma once

// Finite-difference checks over every primitive, loss and encoder pass.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mkd/tensor.hpp"

namespace mkd {

struct GradCheckCase {
  std::string name;
  /// Builds one random instance from `rng` and checks it at `eps`.
  std::function<tensor::GradCheckResult(std::mt19937_64& rng, double eps)> run;
};

std::vector<GradCheckCase> primitive_cases();
std::vector<GradCheckCase> loss_cases();
std::vector<GradCheckCase> encoder_cases();
/// Primitives, losses and encoders together.
std::vector<GradCheckCase> default_gradcheck_cases();

inline constexpr double kGradCheckTolerance = 1e-3;

struct GradCheckRow {
  std::string name;
  double eps = 0.0;
  std::size_t instances = 0;
  tensor::GradCheckResult worst;
  bool passed = false;
};

/// Runs each case on `instances` random draws; a row passes when the worst
/// relative error stays below `tolerance`.
std::vector<GradCheckRow> run_gradcheck(const std::vector<GradCheckCase>& cases, double eps, std::size_t instances,
                                        std::uint64_t seed, double tolerance = kGradCheckTolerance);

}  // namespace mkd
