#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "ogpo/tensor.hpp"

namespace ogpo {

// Reverse-mode tape over tensor-valued primitives. Nodes are created in
// forward order, so walking the node list backwards is a reverse topological
// visit. A tape is single-use: build one loss, call backward once.
class Tape {
public:
    using Ref = int;
    static constexpr Ref kNone = -1;

    struct Node {
        Tensor value;
        Tensor grad;
        Ref a = kNone;
        Ref b = kNone;
        std::function<void(Tape&, Node&)> back;  // empty for leaves
        const Tensor* param = nullptr;           // set for parameter leaves
        bool needs_grad = false;
    };

    // --- leaves ---------------------------------------------------------

    Ref constant(Tensor v) {
        return push_(Node{std::move(v), Tensor{}, kNone, kNone, nullptr, nullptr, false});
    }

    Ref constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // Parameter leaf. Repeated registration of the same tensor returns the
    // same node so gradients accumulate across multiple uses (e.g. the K
    // velocity-net calls inside one chain ratio).
    Ref param(const Tensor& p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return it->second;
        Ref r = push_(Node{p, Tensor{}, kNone, kNone, nullptr, &p, true});
        param_nodes_.emplace(&p, r);
        return r;
    }

    const Tensor& value(Ref r) const { return nodes_[static_cast<std::size_t>(r)].value; }
    double scalar_value(Ref r) const {
        const Tensor& v = value(r);
        if (v.size() != 1) throw std::logic_error("Tape: node is not a scalar");
        return v[0];
    }

    // --- primitives ------------------------------------------------------

    // y = x W^T + b with W:(out,in), b:(out), x:(B,in) or (in) row-major.
    Ref affine(Ref x, Ref w, Ref b) {
        const Tensor& xv = value(x);
        const Tensor& wv = value(w);
        const Tensor& bv = value(b);
        const std::size_t in = xv.cols(), batch = xv.rows();
        const std::size_t out = wv.rows();
        if (wv.cols() != in || bv.size() != out) {
            throw std::invalid_argument("affine: shape mismatch " + xv.shape_str() + " x " +
                                        wv.shape_str());
        }
        Tensor y = xv.rank() == 2 ? Tensor({batch, out}) : Tensor({out});
        for (std::size_t r = 0; r < batch; ++r) {
            const double* xr = xv.data() + r * in;
            double* yr = y.data() + r * out;
            for (std::size_t o = 0; o < out; ++o) {
                yr[o] = bv[o] + dot(wv.data() + o * in, xr, in);
            }
        }
        Ref res = push_(Node{std::move(y), Tensor{}, x, w, nullptr, nullptr,
                             needs_(x) || needs_(w) || needs_(b)});
        Node& n = nodes_.back();
        n.back = [b](Tape& t, Node& self) {
            Node& nx = t.node_(self.a);
            Node& nw = t.node_(self.b);
            Node& nb = t.node_(b);
            const std::size_t in = nx.value.cols(), batch = nx.value.rows();
            const std::size_t out = nw.value.rows();
            const Tensor& g = self.grad;
            if (nx.needs_grad) {
                Tensor& gx = t.grad_(self.a);
                for (std::size_t r = 0; r < batch; ++r) {
                    const double* gr = g.data() + r * out;
                    double* gxr = gx.data() + r * in;
                    for (std::size_t o = 0; o < out; ++o) {
                        axpy(gr[o], nw.value.data() + o * in, gxr, in);
                    }
                }
            }
            if (nw.needs_grad) {
                Tensor& gw = t.grad_(self.b);
                for (std::size_t r = 0; r < batch; ++r) {
                    const double* gr = g.data() + r * out;
                    const double* xr = nx.value.data() + r * in;
                    for (std::size_t o = 0; o < out; ++o) {
                        axpy(gr[o], xr, gw.data() + o * in, in);
                    }
                }
            }
            if (nb.needs_grad) {
                Tensor& gb = t.grad_(b);
                for (std::size_t r = 0; r < batch; ++r) {
                    const double* gr = g.data() + r * out;
                    for (std::size_t o = 0; o < out; ++o) gb[o] += gr[o];
                }
            }
        };
        return res;
    }

    Ref tanh_op(Ref x) {
        return unary_(x, [](double v) { return std::tanh(v); },
                      [](double v, double y) { (void)v; return 1.0 - y * y; });
    }

    Ref relu(Ref x) {
        return unary_(x, [](double v) { return v > 0.0 ? v : 0.0; },
                      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
    }

    Ref gelu(Ref x) {
        return unary_(x,
                      [](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); },
                      [](double v, double) {
                          const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
                          const double pdf = std::exp(-0.5 * v * v) * 0.3989422804014327;
                          return cdf + v * pdf;
                      });
    }

    Ref exp_op(Ref x) {
        return unary_(x, [](double v) { return std::exp(v); },
                      [](double, double y) { return y; });
    }

    Ref log_op(Ref x) {
        return unary_(x, [](double v) { return std::log(v); },
                      [](double v, double) { return 1.0 / v; });
    }

    Ref square(Ref x) {
        return unary_(x, [](double v) { return v * v; },
                      [](double v, double) { return 2.0 * v; });
    }

    Ref abs_op(Ref x) {
        return unary_(x, [](double v) { return std::fabs(v); },
                      [](double v, double) { return v >= 0.0 ? 1.0 : -1.0; });
    }

    Ref neg(Ref x) { return scale(x, -1.0); }

    Ref scale(Ref x, double c) {
        return unary_(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
    }

    Ref add_scalar(Ref x, double c) {
        return unary_(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
    }

    Ref add(Ref a, Ref b) { return binary_(a, b, Bin::Add); }
    Ref sub(Ref a, Ref b) { return binary_(a, b, Bin::Sub); }
    Ref mul(Ref a, Ref b) { return binary_(a, b, Bin::Mul); }

    // Elementwise min with tie broken toward the first argument. The tie rule
    // makes the clipped PPO surrogate reduce to the plain estimator at
    // ratio == 1 exactly.
    Ref min_elem(Ref a, Ref b) { return binary_(a, b, Bin::Min); }

    Ref clamp(Ref x, double lo, double hi) {
        return unary_(x,
                      [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
                      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
    }

    Ref clamp_min(Ref x, double lo) {
        return unary_(x, [lo](double v) { return v < lo ? lo : v; },
                      [lo](double v, double) { return v >= lo ? 1.0 : 0.0; });
    }

    Ref sum(Ref x) {
        const Tensor& xv = value(x);
        double s = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
        Ref res = push_(Node{Tensor::scalar(s), Tensor{}, x, kNone, nullptr, nullptr, needs_(x)});
        nodes_.back().back = [](Tape& t, Node& self) {
            if (!t.node_(self.a).needs_grad) return;
            Tensor& gx = t.grad_(self.a);
            const double g = self.grad[0];
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        };
        return res;
    }

    Ref mean(Ref x) {
        const std::size_t n = value(x).size();
        return scale(sum(x), 1.0 / static_cast<double>(n));
    }

    // (B,n) -> (B): sum over each row.
    Ref row_sum(Ref x) {
        const Tensor& xv = value(x);
        const std::size_t batch = xv.rows(), n = xv.cols();
        Tensor y({batch});
        for (std::size_t r = 0; r < batch; ++r) {
            y[r] = 0.0;
            const double* xr = xv.data() + r * n;
            for (std::size_t i = 0; i < n; ++i) y[r] += xr[i];
        }
        Ref res = push_(Node{std::move(y), Tensor{}, x, kNone, nullptr, nullptr, needs_(x)});
        nodes_.back().back = [](Tape& t, Node& self) {
            if (!t.node_(self.a).needs_grad) return;
            Tensor& gx = t.grad_(self.a);
            const std::size_t n = gx.cols();
            for (std::size_t r = 0; r < gx.rows(); ++r) {
                const double g = self.grad[r];
                double* gxr = gx.data() + r * n;
                for (std::size_t i = 0; i < n; ++i) gxr[i] += g;
            }
        };
        return res;
    }

    // Column-wise concatenation of equally-batched blocks.
    Ref concat_cols(const std::vector<Ref>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
        const std::size_t batch = value(parts[0]).rows();
        std::size_t total = 0;
        bool ng = false;
        for (Ref p : parts) {
            if (value(p).rows() != batch) throw std::invalid_argument("concat_cols: row mismatch");
            total += value(p).cols();
            ng = ng || needs_(p);
        }
        Tensor y = value(parts[0]).rank() == 2 ? Tensor({batch, total}) : Tensor({total});
        std::size_t off = 0;
        for (Ref p : parts) {
            const Tensor& pv = value(p);
            const std::size_t n = pv.cols();
            for (std::size_t r = 0; r < batch; ++r) {
                const double* src = pv.data() + r * n;
                double* dst = y.data() + r * total + off;
                for (std::size_t i = 0; i < n; ++i) dst[i] = src[i];
            }
            off += n;
        }
        Ref res = push_(Node{std::move(y), Tensor{}, kNone, kNone, nullptr, nullptr, ng});
        Node& node = nodes_.back();
        std::vector<Ref> ps = parts;
        node.back = [ps](Tape& t, Node& self) {
            const std::size_t total = self.value.cols();
            std::size_t off = 0;
            for (Ref p : ps) {
                Node& np = t.node_(p);
                const std::size_t n = np.value.cols();
                if (np.needs_grad) {
                    Tensor& gp = t.grad_(p);
                    for (std::size_t r = 0; r < self.value.rows(); ++r) {
                        const double* src = self.grad.data() + r * total + off;
                        double* dst = gp.data() + r * n;
                        for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
                    }
                }
                off += n;
            }
        };
        return res;
    }

    // Columns [start, start+len) of a (B,n) node.
    Ref slice_cols(Ref x, std::size_t start, std::size_t len) {
        const Tensor& xv = value(x);
        const std::size_t n = xv.cols(), batch = xv.rows();
        if (start + len > n) throw std::invalid_argument("slice_cols: out of range");
        Tensor y = xv.rank() == 2 ? Tensor({batch, len}) : Tensor({len});
        for (std::size_t r = 0; r < batch; ++r) {
            for (std::size_t i = 0; i < len; ++i) y.data()[r * len + i] = xv.at(r, start + i);
        }
        Ref res = push_(Node{std::move(y), Tensor{}, x, kNone, nullptr, nullptr, needs_(x)});
        nodes_.back().back = [start, len](Tape& t, Node& self) {
            if (!t.node_(self.a).needs_grad) return;
            Tensor& gx = t.grad_(self.a);
            const std::size_t n = gx.cols();
            for (std::size_t r = 0; r < self.value.rows(); ++r) {
                for (std::size_t i = 0; i < len; ++i) {
                    gx.data()[r * n + start + i] += self.grad.data()[r * len + i];
                }
            }
        };
        return res;
    }

    // (n*g) -> (n): mean over consecutive blocks of g entries.
    Ref group_mean(Ref x, std::size_t g) {
        const Tensor& xv = value(x);
        if (g == 0 || xv.size() % g != 0) throw std::invalid_argument("group_mean: bad group");
        const std::size_t n = xv.size() / g;
        Tensor y({n});
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < g; ++j) s += xv[i * g + j];
            y[i] = s / static_cast<double>(g);
        }
        Ref res = push_(Node{std::move(y), Tensor{}, x, kNone, nullptr, nullptr, needs_(x)});
        nodes_.back().back = [g](Tape& t, Node& self) {
            if (!t.node_(self.a).needs_grad) return;
            Tensor& gx = t.grad_(self.a);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double gv = self.grad[i] / static_cast<double>(g);
                for (std::size_t j = 0; j < g; ++j) gx[i * g + j] += gv;
            }
        };
        return res;
    }

    // --- backward --------------------------------------------------------

    // Seeds the given scalar root and accumulates gradients. The gradient
    // map afterwards holds one entry per registered parameter tensor; params
    // off the loss path keep their zero initialization.
    void backward(Ref loss, double seed = 1.0) {
        if (backward_done_) throw std::logic_error("Tape: backward called twice");
        if (nodes_.empty()) throw std::logic_error("Tape: backward before forward");
        if (value(loss).size() != 1) throw std::logic_error("Tape: loss root must be a scalar");
        backward_done_ = true;
        for (auto& n : nodes_) {
            if (n.needs_grad) {
                n.grad = Tensor(n.value.shape());
            }
        }
        Node& root = node_(loss);
        if (!root.needs_grad) return;  // constant loss: all gradients stay zero
        root.grad[0] = seed;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.back && n.needs_grad) n.back(*this, n);
        }
    }

    bool backward_done() const { return backward_done_; }

    // Gradient of a parameter after backward. Zero tensor if untouched by
    // the loss path.
    Tensor grad_of(const Tensor& p) const {
        auto it = param_nodes_.find(&p);
        if (it == param_nodes_.end()) {
            throw std::logic_error("Tape: parameter was not registered on this tape");
        }
        const Node& n = nodes_[static_cast<std::size_t>(it->second)];
        if (!backward_done_) throw std::logic_error("Tape: gradients read before backward");
        return n.grad;
    }

    bool has_param(const Tensor& p) const { return param_nodes_.count(&p) > 0; }

    std::size_t node_count() const { return nodes_.size(); }

private:
    enum class Bin { Add, Sub, Mul, Min };

    bool needs_(Ref r) const { return nodes_[static_cast<std::size_t>(r)].needs_grad; }
    Node& node_(Ref r) { return nodes_[static_cast<std::size_t>(r)]; }
    Tensor& grad_(Ref r) { return nodes_[static_cast<std::size_t>(r)].grad; }

    Ref push_(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<Ref>(nodes_.size() - 1);
    }

    template <class F, class DF>
    Ref unary_(Ref x, F f, DF df) {
        const Tensor& xv = value(x);
        Tensor y(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
        Ref res = push_(Node{std::move(y), Tensor{}, x, kNone, nullptr, nullptr, needs_(x)});
        nodes_.back().back = [df](Tape& t, Node& self) {
            Node& nx = t.node_(self.a);
            if (!nx.needs_grad) return;
            Tensor& gx = t.grad_(self.a);
            for (std::size_t i = 0; i < gx.size(); ++i) {
                gx[i] += self.grad[i] * df(nx.value[i], self.value[i]);
            }
        };
        return res;
    }

    Ref binary_(Ref a, Ref b, Bin op) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        if (!av.same_shape(bv)) {
            throw std::invalid_argument("binary op: shape mismatch " + av.shape_str() + " vs " +
                                        bv.shape_str());
        }
        Tensor y(av.shape());
        for (std::size_t i = 0; i < av.size(); ++i) {
            switch (op) {
                case Bin::Add: y[i] = av[i] + bv[i]; break;
                case Bin::Sub: y[i] = av[i] - bv[i]; break;
                case Bin::Mul: y[i] = av[i] * bv[i]; break;
                case Bin::Min: y[i] = av[i] <= bv[i] ? av[i] : bv[i]; break;
            }
        }
        Ref res =
            push_(Node{std::move(y), Tensor{}, a, b, nullptr, nullptr, needs_(a) || needs_(b)});
        nodes_.back().back = [op](Tape& t, Node& self) {
            Node& na = t.node_(self.a);
            Node& nb = t.node_(self.b);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double g = self.grad[i];
                switch (op) {
                    case Bin::Add:
                        if (na.needs_grad) t.grad_(self.a)[i] += g;
                        if (nb.needs_grad) t.grad_(self.b)[i] += g;
                        break;
                    case Bin::Sub:
                        if (na.needs_grad) t.grad_(self.a)[i] += g;
                        if (nb.needs_grad) t.grad_(self.b)[i] -= g;
                        break;
                    case Bin::Mul:
                        if (na.needs_grad) t.grad_(self.a)[i] += g * nb.value[i];
                        if (nb.needs_grad) t.grad_(self.b)[i] += g * na.value[i];
                        break;
                    case Bin::Min:
                        if (na.value[i] <= nb.value[i]) {
                            if (na.needs_grad) t.grad_(self.a)[i] += g;
                        } else {
                            if (nb.needs_grad) t.grad_(self.b)[i] += g;
                        }
                        break;
                }
            }
        };
        return res;
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Tensor*, Ref> param_nodes_;
    bool backward_done_ = false;
};

}  // namespace ogpo
