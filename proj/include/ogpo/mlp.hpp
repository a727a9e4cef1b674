#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "ogpo/autodiff.hpp"
#include "ogpo/rng.hpp"
#include "ogpo/tensor.hpp"

namespace ogpo {

enum class Activation { Tanh, Relu, Gelu };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::Tanh: return "tanh";
        case Activation::Relu: return "relu";
        case Activation::Gelu: return "gelu";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    if (s == "gelu") return Activation::Gelu;
    throw std::invalid_argument("unknown activation: " + s);
}

// Plain fully-connected net, linear output layer. Parameters live in a flat
// list (W0, b0, W1, b1, ...) so optimizers and checkpoints can walk them
// uniformly.
class Mlp {
public:
    Mlp() = default;

    Mlp(std::vector<std::size_t> widths, Activation act, Rng& rng)
        : widths_(std::move(widths)), act_(act) {
        if (widths_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output");
        for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
            const std::size_t in = widths_[l], out = widths_[l + 1];
            Tensor w({out, in});
            // Glorot-uniform: +-sqrt(6/(fan_in+fan_out)).
            const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
            params_.push_back(std::move(w));
            params_.push_back(Tensor({out}));
        }
    }

    const std::vector<std::size_t>& widths() const { return widths_; }
    std::size_t input_dim() const { return widths_.front(); }
    std::size_t output_dim() const { return widths_.back(); }
    Activation activation() const { return act_; }
    std::size_t layer_count() const { return widths_.size() - 1; }

    std::vector<Tensor>& params() { return params_; }
    const std::vector<Tensor>& params() const { return params_; }

    Tensor& weight(std::size_t layer) { return params_[2 * layer]; }
    Tensor& bias(std::size_t layer) { return params_[2 * layer + 1]; }
    const Tensor& weight(std::size_t layer) const { return params_[2 * layer]; }
    const Tensor& bias(std::size_t layer) const { return params_[2 * layer + 1]; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }

    // Fast inference path, no graph. Accepts (in) or (B,in).
    Tensor forward(const Tensor& input) const {
        check_input_(input);
        Tensor h = input;
        for (std::size_t l = 0; l < layer_count(); ++l) {
            h = affine_(h, weight(l), bias(l));
            if (l + 1 < layer_count()) activate_(h);
        }
        return h;
    }

    // Graph-building path: records the forward pass on the tape.
    Tape::Ref forward(Tape& tape, Tape::Ref input) const {
        check_input_(tape.value(input));
        Tape::Ref h = input;
        for (std::size_t l = 0; l < layer_count(); ++l) {
            h = tape.affine(h, tape.param(weight(l)), tape.param(bias(l)));
            if (l + 1 < layer_count()) {
                switch (act_) {
                    case Activation::Tanh: h = tape.tanh_op(h); break;
                    case Activation::Relu: h = tape.relu(h); break;
                    case Activation::Gelu: h = tape.gelu(h); break;
                }
            }
        }
        return h;
    }

    void copy_params_from(const Mlp& o) {
        if (o.params_.size() != params_.size()) throw std::invalid_argument("Mlp: copy mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (!params_[i].same_shape(o.params_[i])) {
                throw std::invalid_argument("Mlp: copy shape mismatch");
            }
            params_[i] = o.params_[i];
        }
    }

    void zero_params() {
        for (auto& p : params_) p.fill(0.0);
    }

private:
    void check_input_(const Tensor& input) const {
        if (input.cols() != input_dim()) {
            throw std::invalid_argument("Mlp: input dim " + std::to_string(input.cols()) +
                                        " != " + std::to_string(input_dim()));
        }
        input.assert_finite("Mlp input");
    }

    static Tensor affine_(const Tensor& x, const Tensor& w, const Tensor& b) {
        const std::size_t in = x.cols(), batch = x.rows(), out = w.rows();
        Tensor y = x.rank() == 2 ? Tensor({batch, out}) : Tensor({out});
        for (std::size_t r = 0; r < batch; ++r) {
            const double* xr = x.data() + r * in;
            double* yr = y.data() + r * out;
            for (std::size_t o = 0; o < out; ++o) yr[o] = b[o] + dot(w.data() + o * in, xr, in);
        }
        return y;
    }

    void activate_(Tensor& h) const {
        switch (act_) {
            case Activation::Tanh:
                for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::tanh(h[i]);
                break;
            case Activation::Relu:
                for (std::size_t i = 0; i < h.size(); ++i) h[i] = h[i] > 0.0 ? h[i] : 0.0;
                break;
            case Activation::Gelu:
                for (std::size_t i = 0; i < h.size(); ++i) {
                    h[i] = 0.5 * h[i] * (1.0 + std::erf(h[i] * M_SQRT1_2));
                }
                break;
        }
    }

    std::vector<std::size_t> widths_;
    Activation act_ = Activation::Tanh;
    std::vector<Tensor> params_;
};

// mlp_forward: free-function spelling of the two forward paths.
inline Tensor mlp_forward(const Mlp& net, const Tensor& input) { return net.forward(input); }
inline Tape::Ref mlp_forward(const Mlp& net, Tape& tape, Tape::Ref input) {
    return net.forward(tape, input);
}

// Central-difference gradient oracle: (f(p+eps) - f(p-eps)) / (2 eps) per
// coordinate. Used by every loss head's gradient test; deliberately knows
// nothing about the tape.
inline std::vector<Tensor> finite_diff_grad(const std::function<double()>& f,
                                            std::vector<Tensor*> params, double eps) {
    if (eps <= 0.0) throw std::invalid_argument("finite_diff_grad: eps must be positive");
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (Tensor* p : params) {
        Tensor g(p->shape());
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double saved = (*p)[i];
            (*p)[i] = saved + eps;
            const double fp = f();
            (*p)[i] = saved - eps;
            const double fm = f();
            (*p)[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw std::runtime_error("finite_diff_grad: non-finite objective");
            }
            g[i] = (fp - fm) / (2.0 * eps);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

}  // namespace ogpo
