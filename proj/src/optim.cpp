#include "dce/nn/optim.hpp"

#include <cmath>

namespace dce::nn {

void AdamConfig::validate() const {
    if (!(lr > 0)) throw ConfigError("adam: lr must be > 0");
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1))
        throw ConfigError("adam: betas must lie in (0,1)");
    if (!(epsilon > 0)) throw ConfigError("adam: epsilon must be > 0");
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    for (const Tensor& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void Adam::step() {
    step_count_++;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step_count_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step_count_);
    for (size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = params_[k];
        const std::vector<double>& g = p.grad();
        if (g.size() != m_[k].size()) throw ShapeMismatch("adam: gradient/moment size mismatch");
        auto& data = p.data();
        for (size_t i = 0; i < g.size(); ++i) {
            m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g[i];
            v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = m_[k][i] / bc1;
            const double vhat = v_[k][i] / bc2;
            data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
        }
    }
}

void Adam::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

void Adam::restore(int step_count, std::vector<std::vector<double>> m,
                   std::vector<std::vector<double>> v) {
    if (m.size() != m_.size() || v.size() != v_.size())
        throw ShapeMismatch("adam: restore state count mismatch");
    for (size_t k = 0; k < m.size(); ++k)
        if (m[k].size() != m_[k].size() || v[k].size() != v_[k].size())
            throw ShapeMismatch("adam: restore moment size mismatch");
    step_count_ = step_count;
    m_ = std::move(m);
    v_ = std::move(v);
}

double lr_linear_decay(double initial_lr, int epoch, int total_epochs, int decay_start) {
    if (!(initial_lr > 0)) throw ConfigError("lr_linear_decay: initial_lr must be > 0");
    if (epoch < 0 || epoch > total_epochs) throw ConfigError("lr_linear_decay: epoch out of range");
    if (epoch < decay_start) return initial_lr;
    const double span = total_epochs - decay_start;
    if (span <= 0) return 0.0;
    return initial_lr * (total_epochs - epoch) / span;
}

}  // namespace dce::nn
