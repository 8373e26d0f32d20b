#pragma once

#include "dce/nn/tensor.hpp"

namespace dce::nn {

struct AdamConfig {
    double lr = 1e-5;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const;
};

// Bias-corrected Adam over a fixed parameter list.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig cfg);

    void step();       // consumes the gradients currently on the parameters
    void zero_grad();  // resets parameter gradients
    int step_count() const { return step_count_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }
    void restore(int step_count, std::vector<std::vector<double>> m,
                 std::vector<std::vector<double>> v);

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int step_count_ = 0;
};

// initial_lr until decay_start, then a linear ramp reaching 0 at total_epochs.
double lr_linear_decay(double initial_lr, int epoch, int total_epochs, int decay_start);

}  // namespace dce::nn
