#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace prem::testing {

Tensor random_param(Shape shape, std::uint64_t seed, double stddev) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = n(rng);
    return Tensor::parameter(std::move(shape), std::move(v));
}

GradCheck check_gradients(const NamedTensors& inputs, const std::function<Tensor()>& loss, std::uint64_t seed,
                          std::size_t per_tensor, double h) {
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor l = loss();
        for (auto [_, t] : inputs) t.zero_grad();
        tape.backward(l);
        for (const auto& [_, t] : inputs) analytic.push_back(t.grad());
    }

    std::mt19937_64 rng(seed ^ 0xC0FFEEull);
    GradCheck result;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor t = inputs[k].second;
        std::vector<std::size_t> idx(t.numel());
        std::iota(idx.begin(), idx.end(), 0);
        if (per_tensor && per_tensor < idx.size()) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(per_tensor);
        }
        double diff = 0.0, na = 0.0, nn = 0.0;
        for (std::size_t i : idx) {
            auto v = t.mutable_values();
            const double orig = v[i];
            v[i] = orig + h;
            const double up = loss().item();
            v[i] = orig - h;
            const double down = loss().item();
            v[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[k][i];
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nn += numeric * numeric;
            ++result.checked;
        }
        // Floor for gradients that vanish identically; there only round-off remains.
        const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-5});
        const double rel = std::sqrt(diff) / denom;
        if (rel > result.max_rel_err || result.worst.empty()) {
            result.max_rel_err = std::max(rel, result.max_rel_err);
            result.worst = inputs[k].first;
        }
    }
    return result;
}

}  // namespace prem::testing
