#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "prem/nn.hpp"

namespace prem {

struct AdamWConfig {
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Decoupled-weight-decay Adam. Moments are keyed by parameter name.
class AdamW {
public:
    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    /// One update of every parameter in `params` from its accumulated gradient
    /// (missing gradient counts as zero).
    void step(ParamStore& params);

    /// Single-tensor form; `grad` must match `param` in shape.
    void step(const std::string& name, Tensor& param, std::span<const double> grad);

    std::uint64_t step_count() const { return steps_; }
    const AdamWConfig& config() const { return config_; }
    const std::vector<double>& first_moment(const std::string& name) const { return m_.at(name); }
    const std::vector<double>& second_moment(const std::string& name) const { return v_.at(name); }

private:
    void update(const std::string& name, std::span<double> values, std::span<const double> grad);

    AdamWConfig config_;
    std::uint64_t steps_ = 0;
    std::map<std::string, std::vector<double>> m_;
    std::map<std::string, std::vector<double>> v_;
};

}  // namespace prem
