#pragma once

#include <functional>

#include "fwi/tensor.hpp"

namespace fwi {

/// Compare the taped gradient of a scalar function against central finite
/// differences, element by element. Returns the max relative error
///   |analytic - (f(x+h e) - f(x-h e)) / 2h| / (|analytic| + 1e-12).
///
/// `f` must be deterministic, scalar-valued and read `wrt` by storage (it is
/// perturbed in place and restored). f64 only; f32 has too little headroom
/// for h = 1e-5. `max_probes` > 0 checks a seeded random subset of elements
/// instead of all of them.
inline double finite_difference_check(const std::function<Tensor<double>()>& f,
                                      Tensor<double> wrt, double h,
                                      size_t max_probes = 0, uint64_t probe_seed = 0) {
    const double eps = 1e-12;
    bool prior = wrt.requires_grad();
    wrt.set_requires_grad(true);
    wrt.zero_grad();
    std::vector<double> analytic;
    {
        Tape<double> tape;
        Tensor<double> y = f();
        if (y.numel() != 1)
            throw ValueError("finite_difference_check: f must be scalar-valued");
        tape.backward(y);
        auto g = wrt.grad_tensor();
        analytic.assign(g.data().begin(), g.data().end());
    }
    wrt.zero_grad();
    wrt.set_requires_grad(prior);

    std::vector<size_t> idx(wrt.numel());
    std::iota(idx.begin(), idx.end(), size_t(0));
    if (max_probes > 0 && max_probes < idx.size()) {
        Rng rng(probe_seed);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(max_probes);
    }

    auto data = wrt.data_mut();
    double worst = 0.0;
    for (size_t i : idx) {
        double saved = data[i];
        data[i] = saved + h;
        double yp = f().item();
        data[i] = saved - h;
        double ym = f().item();
        data[i] = saved;
        double numeric = (yp - ym) / (2.0 * h);
        double rel = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + eps);
        worst = std::max(worst, rel);
    }
    return worst;
}

/// Convenience overload for f expressed as a function of its input tensor.
inline double finite_difference_check(
    const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
    double h, size_t max_probes = 0, uint64_t probe_seed = 0) {
    return finite_difference_check([&f, &x]() { return f(x); }, x, h, max_probes, probe_seed);
}

} // namespace fwi
