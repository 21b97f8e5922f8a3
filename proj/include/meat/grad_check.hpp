#pragma once

#include <cstdint>
#include <functional>

#include "meat/tensor.hpp"

namespace meat {

using TensorFn = std::function<Tensor(const Tensor&)>;

// Central-difference verification of the analytic gradient of a scalar-valued
// function at x. Returns max over entries of
//   |analytic - central| / max(1, |analytic|).
// The function must be deterministic; two base evaluations are compared and a
// ContractError is thrown if they differ.
double grad_check(const TensorFn& f, const Tensor& x, double step);

// Same check restricted to `max_entries` seeded-random coordinates of x; used
// where a full sweep is too expensive (e.g. FFN-sized mask logit matrices).
double grad_check_sampled(const TensorFn& f, const Tensor& x, double step,
                          std::size_t max_entries, std::uint64_t seed);

}  // namespace meat
