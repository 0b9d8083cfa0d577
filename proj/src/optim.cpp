#include "prem/optim.hpp"

#include <cmath>

namespace prem {

void AdamW::step(ParamStore& params) {
    ++steps_;
    for (auto& [name, p] : params.all()) {
        std::vector<double> g = p.grad();
        update(name, p.mutable_values(), g);
    }
}

void AdamW::step(const std::string& name, Tensor& param, std::span<const double> grad) {
    if (grad.size() != param.numel()) throw ShapeError("AdamW gradient shape mismatch for " + name);
    ++steps_;
    update(name, param.mutable_values(), grad);
}

void AdamW::update(const std::string& name, std::span<double> values, std::span<const double> grad) {
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
        m.assign(values.size(), 0.0);
        v.assign(values.size(), 0.0);
    }
    if (m.size() != values.size()) throw ShapeError("AdamW moment shape mismatch for " + name);
    const auto& c = config_;
    const double t = static_cast<double>(steps_);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < values.size(); ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        values[i] -= c.learning_rate * c.weight_decay * values[i];
        values[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
}

}  // namespace prem
