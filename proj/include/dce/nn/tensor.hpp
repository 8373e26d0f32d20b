#pragma once

#include "dce/core.hpp"

#include <functional>
#include <memory>

namespace dce::nn {

struct NonScalarOutput : Error {
    using Error::Error;
};
struct TapeMissing : Error {
    using Error::Error;
};

using Shape = std::vector<int>;

size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool backward_done = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

// Dense double tensor participating in a dynamically built reverse-mode tape.
// Copies share the underlying node (shallow value semantics, like a handle).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double fill, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    size_t numel() const { return node_->value.size(); }
    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }
    const std::vector<double>& grad() const;
    bool requires_grad() const { return node_->requires_grad; }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    // Reverse pass from a scalar output, accumulating exact adjoints into every
    // requires_grad leaf. A second backward on the same output throws.
    void backward() const;

    std::shared_ptr<detail::Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

Tensor make_op(Shape shape, std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward_fn);

// Elementwise and reduction ops
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor mean(const Tensor& a);  // scalar [1]

// NN ops over [N, C, H, W]
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad,
              int dilation);
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps = 1e-5);
Tensor global_avg_pool(const Tensor& x);                               // -> [N, C]
Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& b);  // [N,F] -> [N,out]
Tensor concat_channels(const Tensor& a, const Tensor& b);

}  // namespace dce::nn
