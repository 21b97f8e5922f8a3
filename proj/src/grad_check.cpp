#include "meat/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "meat/error.hpp"
#include "meat/rng.hpp"

namespace meat {

namespace {

double check_entries(const TensorFn& f, const Tensor& x, double step,
                     const std::vector<std::size_t>& entries) {
    Tensor probe = x.clone();
    probe.set_requires_grad(true);
    Tensor loss = f(probe);
    if (loss.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
    const double base = loss.item();
    if (f(probe).item() != base) {
        throw ContractError("grad_check: function is not deterministic");
    }
    backward(loss);
    const std::vector<double> analytic = probe.grad();

    Tensor shifted = x.clone();
    double worst = 0.0;
    for (std::size_t i : entries) {
        const double orig = shifted.data()[i];
        shifted.data()[i] = orig + step;
        const double up = f(shifted).item();
        shifted.data()[i] = orig - step;
        const double down = f(shifted).item();
        shifted.data()[i] = orig;
        const double central = (up - down) / (2.0 * step);
        const double err = std::abs(analytic[i] - central) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace

double grad_check(const TensorFn& f, const Tensor& x, double step) {
    std::vector<std::size_t> all(x.numel());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return check_entries(f, x, step, all);
}

double grad_check_sampled(const TensorFn& f, const Tensor& x, double step,
                          std::size_t max_entries, std::uint64_t seed) {
    if (x.numel() <= max_entries) return grad_check(f, x, step);
    Rng rng(seed);
    std::vector<std::size_t> all(x.numel());
    std::iota(all.begin(), all.end(), std::size_t{0});
    rng.shuffle(all);
    all.resize(max_entries);
    return check_entries(f, x, step, all);
}

}  // namespace meat
