#include "dce/nn/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace dce::nn {

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeMismatch("tensor: non-positive dimension");
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double fill, bool requires_grad) {
    auto n = std::make_shared<detail::Node>();
    n->shape = shape;
    n->value.assign(shape_numel(shape), fill);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
    if (data.size() != shape_numel(shape))
        throw ShapeMismatch("tensor: data length does not match shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = shape;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.size() != node_->value.size())
        throw TapeMissing("tensor: gradient not populated (run backward first)");
    return node_->grad;
}

void Tensor::backward() const {
    if (!node_) throw TapeMissing("backward: undefined tensor");
    if (node_->value.size() != 1) throw NonScalarOutput("backward: output must be scalar");
    if (!node_->requires_grad)
        throw TapeMissing("backward: output does not depend on any requires_grad leaf");
    if (node_->backward_done) throw TapeMissing("backward: tape already consumed for this output");
    node_->backward_done = true;

    // topological order by DFS
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::function<void(detail::Node*)> visit = [&](detail::Node* n) {
        if (!n->requires_grad || seen.count(n)) return;
        seen.insert(n);
        for (auto& p : n->parents) visit(p.get());
        order.push_back(n);
    };
    visit(node_.get());

    for (detail::Node* n : order) n->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

Tensor make_op(Shape shape, std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward_fn) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value.assign(shape_numel(n->shape), 0.0);
    for (const Tensor& p : parents) {
        n->parents.push_back(p.node());
        n->requires_grad = n->requires_grad || p.requires_grad();
    }
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return Tensor::wrap(std::move(n));
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeMismatch(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = make_op(a.shape(), {a, b}, [](detail::Node& self) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *self.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = make_op(a.shape(), {a, b}, [](detail::Node& self) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *self.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            const double sign = k == 0 ? 1.0 : -1.0;
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += sign * self.grad[i];
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = make_op(a.shape(), {a, b}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pa.grad[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pb.grad[i] += self.grad[i] * pa.value[i];
        }
    });
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

Tensor scale(const Tensor& a, double factor) {
    Tensor out = make_op(a.shape(), {a}, [factor](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += factor * self.grad[i];
    });
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = factor * a.data()[i];
    return out;
}

Tensor add_scalar(const Tensor& a, double value) {
    Tensor out = make_op(a.shape(), {a}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + value;
    return out;
}

Tensor leaky_relu(const Tensor& a, double slope) {
    Tensor out = make_op(a.shape(), {a}, [slope](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            p.grad[i] += self.grad[i] * (p.value[i] > 0 ? 1.0 : slope);
    });
    for (size_t i = 0; i < out.numel(); ++i)
        out.data()[i] = a.data()[i] > 0 ? a.data()[i] : slope * a.data()[i];
    return out;
}

Tensor relu(const Tensor& a) { return leaky_relu(a, 0.0); }

Tensor abs(const Tensor& a) {
    Tensor out = make_op(a.shape(), {a}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            p.grad[i] += self.grad[i] * (p.value[i] >= 0 ? 1.0 : -1.0);
    });
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = std::abs(a.data()[i]);
    return out;
}

Tensor square(const Tensor& a) {
    Tensor out = make_op(a.shape(), {a}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            p.grad[i] += self.grad[i] * 2.0 * p.value[i];
    });
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * a.data()[i];
    return out;
}

Tensor mean(const Tensor& a) {
    const double inv_n = 1.0 / static_cast<double>(a.numel());
    Tensor out = make_op({1}, {a}, [inv_n](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const double g = self.grad[0] * inv_n;
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
    });
    double s = 0;
    for (double v : a.data()) s += v;
    out.data()[0] = s * inv_n;
    return out;
}

}  // namespace dce::nn
