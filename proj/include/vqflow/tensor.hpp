// tensor.hpp - dense float32 tensors with reverse-mode gradient recording
//
// Layout convention: feature maps are stored position-major [H, W, D] so that
// every per-position network is a plain matrix product over the trailing
// dimension. Vectors are [D], matrices [R, C], scalars [1].
#pragma once

#include <cassert>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <utility>

#include "vqflow/common.hpp"

namespace vqflow {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

class Tape;

// Value-semantic tensor; the payload is shared copy-on-write so that graph
// records can keep inputs alive without duplicating buffers.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<float>>(shape_numel(shape_))) {}

    Tensor(Shape shape, std::vector<float> values)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<float>>(std::move(values))) {
        if (data_->size() != shape_numel(shape_))
            throw DimensionError("payload length " + std::to_string(data_->size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    static Tensor full(Shape shape, float v) {
        Tensor t(std::move(shape));
        std::fill(t.mut().begin(), t.mut().end(), v);
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return data_ ? data_->size() : 0; }

    const float* data() const { return data_->data(); }
    float value() const {
        if (numel() != 1) throw ContractError("value() on non-scalar tensor " + shape_str(shape_));
        return (*data_)[0];
    }
    float operator[](std::size_t i) const { return (*data_)[i]; }

    std::span<const float> span() const { return {data_->data(), data_->size()}; }

    // Mutable access; detaches from any shared payload and from the tape.
    std::vector<float>& mut() {
        if (data_.use_count() > 1) data_ = std::make_shared<std::vector<float>>(*data_);
        node_ = -1;
        tape_id_ = 0;
        return *data_;
    }

    bool requires_grad() const { return node_ >= 0; }

    // tape linkage (managed by Tape and the op layer)
    int node_ = -1;
    std::uint64_t tape_id_ = 0;

    std::shared_ptr<const std::vector<float>> payload() const { return data_; }

private:
    Shape shape_;
    std::shared_ptr<std::vector<float>> data_;
};

inline Tensor detach(const Tensor& t) {
    Tensor out = t;
    out.node_ = -1;
    out.tape_id_ = 0;
    return out;
}

// ---------------------------------------------------------------------------
// GradientTape. Records primitive applications in execution order; backward
// replays them in reverse, which is a reverse topological order by
// construction, visiting each record exactly once. Intermediate gradient
// buffers are released as soon as they have been consumed; leaf (parameter)
// buffers are kept.
// ---------------------------------------------------------------------------

class Tape {
public:
    Tape() : id_(next_id()++) {
        prev_ = active_;
        active_ = this;
    }
    ~Tape() { active_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    std::uint64_t id() const { return id_; }

    // Register a leaf (parameter). Gradients accumulate into its buffer.
    void watch(Tensor& t) {
        if (t.tape_id_ == id_ && t.node_ >= 0) return;
        t.node_ = make_node(t.shape(), /*leaf=*/true);
        t.tape_id_ = id_;
    }

    bool tracked(const Tensor& t) const { return t.tape_id_ == id_ && t.node_ >= 0; }

    int make_node(const Shape& shape, bool leaf) {
        nodes_.push_back(Node{shape, {}, leaf});
        return static_cast<int>(nodes_.size()) - 1;
    }

    void record(const char* name, int out, std::vector<int> inputs, std::function<void(Tape&)> fn) {
        ops_.push_back(OpRec{name, out, std::move(inputs), std::move(fn)});
    }

    // Gradient accumulation buffer for a node, allocated on first touch.
    std::vector<float>& grad_buf(int node) {
        Node& n = nodes_[static_cast<std::size_t>(node)];
        if (n.grad.empty()) n.grad.assign(shape_numel(n.shape), 0.0f);
        return n.grad;
    }

    bool has_grad(int node) const { return !nodes_[static_cast<std::size_t>(node)].grad.empty(); }

    void backward(const Tensor& loss) {
        if (ran_backward_) throw ContractError("backward already ran on this tape");
        if (!tracked(loss)) throw ContractError("loss is not a tensor recorded on this tape");
        if (loss.numel() != 1)
            throw ContractError("loss must be scalar, got shape " + shape_str(loss.shape()));
        ran_backward_ = true;
        grad_buf(loss.node_)[0] = 1.0f;
        for (std::size_t i = ops_.size(); i-- > 0;) {
            OpRec& op = ops_[i];
            Node& out = nodes_[static_cast<std::size_t>(op.out)];
            if (!out.grad.empty()) {
                op.fn(*this);
                for (int in : op.inputs) {
                    if (in < 0) continue;
                    const Node& n = nodes_[static_cast<std::size_t>(in)];
                    if (!n.grad.empty() && !all_finite(n.grad.data(), n.grad.size()))
                        throw NumericError(std::string("non-finite gradient out of primitive '") +
                                           op.name + "'");
                }
            }
            if (!out.leaf) out.grad.clear();  // consumed; release
            op.fn = nullptr;
        }
    }

    std::span<const float> grad(const Tensor& t) const {
        if (!tracked(t)) throw ContractError("gradient requested for tensor not on this tape");
        const Node& n = nodes_[static_cast<std::size_t>(t.node_)];
        return {n.grad.data(), n.grad.size()};
    }

    bool recording() const { return !ran_backward_; }

private:
    struct Node {
        Shape shape;
        std::vector<float> grad;
        bool leaf;
    };
    struct OpRec {
        const char* name;
        int out;
        std::vector<int> inputs;
        std::function<void(Tape&)> fn;
    };

    static std::uint64_t& next_id() {
        static std::uint64_t counter = 1;
        return counter;
    }

    std::vector<Node> nodes_;
    std::vector<OpRec> ops_;
    bool ran_backward_ = false;
    std::uint64_t id_;
    Tape* prev_ = nullptr;
    inline static thread_local Tape* active_ = nullptr;
};

namespace detail {

inline int node_of(const Tensor& t, Tape* tape) {
    return (tape && t.tape_id_ == tape->id()) ? t.node_ : -1;
}

// Finish a primitive: validate finiteness and, when a tape is active and any
// input is tracked, register the output node and the backward closure.
template <typename BackwardFn>
inline void finish(const char* name, Tensor& out, std::initializer_list<const Tensor*> ins,
                   BackwardFn&& make_backward) {
    if (!all_finite(out.data(), out.numel()))
        throw NumericError(std::string("non-finite output of primitive '") + name + "'");
    Tape* tape = Tape::active();
    if (!tape || !tape->recording()) return;
    bool any = false;
    std::vector<int> in_nodes;
    in_nodes.reserve(ins.size());
    for (const Tensor* t : ins) {
        int n = node_of(*t, tape);
        in_nodes.push_back(n);
        any |= (n >= 0);
    }
    if (!any) return;
    int out_node = tape->make_node(out.shape(), /*leaf=*/false);
    out.node_ = out_node;
    out.tape_id_ = tape->id();
    tape->record(name, out_node, in_nodes,
                 make_backward(out_node, std::vector<int>(in_nodes)));
}

inline void check_same_shape(const char* name, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(name) + ": operand shapes " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive set: linear, add, sub, mul (and scalar forms), exp, log, softplus,
// tanh, concat/split/permute on the channel axis, spatial average pool,
// sum/mean reductions, row gather, and the straight-through pass_through.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("add", a, b);
    Tensor out(a.shape());
    auto& o = out.mut();
    const float* pa = a.data();
    const float* pb = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] + pb[i];
    detail::finish("add", out, {&a, &b}, [&](int on, std::vector<int> in) {
        return [on, in](Tape& t) {
            const auto& g = t.grad_buf(on);
            for (int k = 0; k < 2; ++k)
                if (in[static_cast<std::size_t>(k)] >= 0) {
                    auto& gi = t.grad_buf(in[static_cast<std::size_t>(k)]);
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                }
        };
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("sub", a, b);
    Tensor out(a.shape());
    auto& o = out.mut();
    const float* pa = a.data();
    const float* pb = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] - pb[i];
    detail::finish("sub", out, {&a, &b}, [&](int on, std::vector<int> in) {
        return [on, in](Tape& t) {
            const auto& g = t.grad_buf(on);
            if (in[0] >= 0) {
                auto& ga = t.grad_buf(in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (in[1] >= 0) {
                auto& gb = t.grad_buf(in[1]);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("mul", a, b);
    Tensor out(a.shape());
    auto& o = out.mut();
    const float* pa = a.data();
    const float* pb = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] * pb[i];
    detail::finish("mul", out, {&a, &b}, [&, av = a.payload(), bv = b.payload()](
                                             int on, std::vector<int> in) {
        return [on, in, av, bv](Tape& t) {
            const auto& g = t.grad_buf(on);
            if (in[0] >= 0) {
                auto& ga = t.grad_buf(in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bv)[i];
            }
            if (in[1] >= 0) {
                auto& gb = t.grad_buf(in[1]);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*av)[i];
            }
        };
    });
    return out;
}

inline Tensor mul_scalar(const Tensor& a, float c) {
    Tensor out(a.shape());
    auto& o = out.mut();
    const float* pa = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] * c;
    detail::finish("mul_scalar", out, {&a}, [&](int on, std::vector<int> in) {
        return [on, in, c](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& ga = t.grad_buf(in[0]);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        };
    });
    return out;
}

inline Tensor add_scalar(const Tensor& a, float c) {
    Tensor out(a.shape());
    auto& o = out.mut();
    const float* pa = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] + c;
    detail::finish("add_scalar", out, {&a}, [&](int on, std::vector<int> in) {
        return [on, in](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& ga = t.grad_buf(in[0]);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        };
    });
    return out;
}

inline Tensor exp(const Tensor& a) {
    Tensor out(a.shape());
    auto& o = out.mut();
    const float* pa = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(pa[i]);
    detail::finish("exp", out, {&a}, [&, ov = out.payload()](int on, std::vector<int> in) {
        return [on, in, ov](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& ga = t.grad_buf(in[0]);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*ov)[i];
        };
    });
    return out;
}

inline Tensor log(const Tensor& a) {
    Tensor out(a.shape());
    auto& o = out.mut();
    const float* pa = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::log(pa[i]);
    detail::finish("log", out, {&a}, [&, av = a.payload()](int on, std::vector<int> in) {
        return [on, in, av](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& ga = t.grad_buf(in[0]);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (*av)[i];
        };
    });
    return out;
}

inline Tensor softplus(const Tensor& a) {
    Tensor out(a.shape());
    auto& o = out.mut();
    const float* pa = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        float x = pa[i];
        o[i] = x > 20.0f ? x : std::log1p(std::exp(x));
    }
    detail::finish("softplus", out, {&a}, [&, av = a.payload()](int on, std::vector<int> in) {
        return [on, in, av](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& ga = t.grad_buf(in[0]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                float x = (*av)[i];
                float sig = x > 20.0f ? 1.0f : 1.0f / (1.0f + std::exp(-x));
                ga[i] += g[i] * sig;
            }
        };
    });
    return out;
}

inline Tensor tanh(const Tensor& a) {
    Tensor out(a.shape());
    auto& o = out.mut();
    const float* pa = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(pa[i]);
    detail::finish("tanh", out, {&a}, [&, ov = out.payload()](int on, std::vector<int> in) {
        return [on, in, ov](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& ga = t.grad_buf(in[0]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                float y = (*ov)[i];
                ga[i] += g[i] * (1.0f - y * y);
            }
        };
    });
    return out;
}

// out = x . W^T + b over the trailing dimension of x.
// W is [Dout x Din], b is [Dout], x is [... x Din].
inline Tensor linear(const Tensor& w, const Tensor& b, const Tensor& x) {
    if (w.rank() != 2) throw DimensionError("linear: weights must be rank 2, got " + shape_str(w.shape()));
    const int dout = w.dim(0), din = w.dim(1);
    if (x.rank() < 1 || x.dim(x.rank() - 1) != din)
        throw DimensionError("linear: trailing dim of input " + shape_str(x.shape()) +
                             " does not match weights " + shape_str(w.shape()));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != dout))
        throw DimensionError("linear: bias shape " + shape_str(b.shape()) + " vs Dout " +
                             std::to_string(dout));
    const std::size_t rows = x.numel() / static_cast<std::size_t>(din);
    Shape out_shape = x.shape();
    out_shape.back() = dout;
    Tensor out(out_shape);
    auto& o = out.mut();
    const float* pw = w.data();
    const float* pb = b.defined() ? b.data() : nullptr;
    const float* px = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = px + r * static_cast<std::size_t>(din);
        float* orow = o.data() + r * static_cast<std::size_t>(dout);
        for (int k = 0; k < dout; ++k) {
            const float* wr = pw + static_cast<std::size_t>(k) * static_cast<std::size_t>(din);
            float acc = pb ? pb[k] : 0.0f;
            for (int j = 0; j < din; ++j) acc += wr[j] * xr[j];
            orow[k] = acc;
        }
    }
    detail::finish("linear", out, {&w, &b, &x},
                   [&, wv = w.payload(), xv = x.payload(), rows, dout, din](int on,
                                                                            std::vector<int> in) {
                       return [on, in, wv, xv, rows, dout, din](Tape& t) {
                           const auto& g = t.grad_buf(on);
                           if (in[0] >= 0) {
                               auto& gw = t.grad_buf(in[0]);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const float* gr = g.data() + r * static_cast<std::size_t>(dout);
                                   const float* xr =
                                       xv->data() + r * static_cast<std::size_t>(din);
                                   for (int k = 0; k < dout; ++k) {
                                       float gk = gr[k];
                                       if (gk == 0.0f) continue;
                                       float* gwr = gw.data() +
                                                    static_cast<std::size_t>(k) *
                                                        static_cast<std::size_t>(din);
                                       for (int j = 0; j < din; ++j) gwr[j] += gk * xr[j];
                                   }
                               }
                           }
                           if (in[1] >= 0) {
                               auto& gb = t.grad_buf(in[1]);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const float* gr = g.data() + r * static_cast<std::size_t>(dout);
                                   for (int k = 0; k < dout; ++k) gb[static_cast<std::size_t>(k)] += gr[k];
                               }
                           }
                           if (in[2] >= 0) {
                               auto& gx = t.grad_buf(in[2]);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const float* gr = g.data() + r * static_cast<std::size_t>(dout);
                                   float* gxr = gx.data() + r * static_cast<std::size_t>(din);
                                   for (int k = 0; k < dout; ++k) {
                                       float gk = gr[k];
                                       if (gk == 0.0f) continue;
                                       const float* wr = wv->data() +
                                                         static_cast<std::size_t>(k) *
                                                             static_cast<std::size_t>(din);
                                       for (int j = 0; j < din; ++j) gxr[j] += gk * wr[j];
                                   }
                               }
                           }
                       };
                   });
    return out;
}

// [H, W, D] -> [D], mean over all spatial positions.
inline Tensor avg_pool_spatial(const Tensor& x) {
    if (x.rank() != 3)
        throw DimensionError("avg_pool_spatial: expected [H,W,D], got " + shape_str(x.shape()));
    const int h = x.dim(0), w = x.dim(1), d = x.dim(2);
    if (h < 1 || w < 1) throw DimensionError("avg_pool_spatial: empty spatial extent");
    const std::size_t positions = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    Tensor out(Shape{d});
    auto& o = out.mut();
    pairwise_row_sum(x.data(), positions, static_cast<std::size_t>(d), o.data());
    const float inv = 1.0f / static_cast<float>(positions);
    for (auto& v : o) v *= inv;
    detail::finish("avg_pool_spatial", out, {&x}, [&, positions, d](int on, std::vector<int> in) {
        return [on, in, positions, d](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& gx = t.grad_buf(in[0]);
            const float inv = 1.0f / static_cast<float>(positions);
            for (std::size_t p = 0; p < positions; ++p)
                for (int c = 0; c < d; ++c)
                    gx[p * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] +=
                        g[static_cast<std::size_t>(c)] * inv;
        };
    });
    return out;
}

inline Tensor sum_all(const Tensor& x) {
    Tensor out = Tensor::scalar(pairwise_sum(x.data(), x.numel()));
    detail::finish("sum", out, {&x}, [&](int on, std::vector<int> in) {
        return [on, in](Tape& t) {
            if (in[0] < 0) return;
            float g = t.grad_buf(on)[0];
            auto& gx = t.grad_buf(in[0]);
            for (auto& v : gx) v += g;
        };
    });
    return out;
}

inline Tensor mean_all(const Tensor& x) {
    const std::size_t n = x.numel();
    Tensor out = Tensor::scalar(pairwise_sum(x.data(), n) / static_cast<float>(n));
    detail::finish("mean", out, {&x}, [&, n](int on, std::vector<int> in) {
        return [on, in, n](Tape& t) {
            if (in[0] < 0) return;
            float g = t.grad_buf(on)[0] / static_cast<float>(n);
            auto& gx = t.grad_buf(in[0]);
            for (auto& v : gx) v += g;
        };
    });
    return out;
}

// [H, W, D] -> [H, W], sum over the channel axis.
inline Tensor sum_channels(const Tensor& x) {
    if (x.rank() != 3)
        throw DimensionError("sum_channels: expected [H,W,D], got " + shape_str(x.shape()));
    const int h = x.dim(0), w = x.dim(1), d = x.dim(2);
    const std::size_t positions = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    Tensor out(Shape{h, w});
    auto& o = out.mut();
    for (std::size_t p = 0; p < positions; ++p)
        o[p] = pairwise_sum(x.data() + p * static_cast<std::size_t>(d),
                            static_cast<std::size_t>(d));
    detail::finish("sum_channels", out, {&x}, [&, positions, d](int on, std::vector<int> in) {
        return [on, in, positions, d](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& gx = t.grad_buf(in[0]);
            for (std::size_t p = 0; p < positions; ++p)
                for (int c = 0; c < d; ++c)
                    gx[p * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] += g[p];
        };
    });
    return out;
}

// [D] -> [H, W, D]; backward sums over positions.
inline Tensor tile_spatial(const Tensor& v, int h, int w) {
    if (v.rank() != 1) throw DimensionError("tile_spatial: expected vector, got " + shape_str(v.shape()));
    const int d = v.dim(0);
    const std::size_t positions = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    Tensor out(Shape{h, w, d});
    auto& o = out.mut();
    for (std::size_t p = 0; p < positions; ++p)
        std::memcpy(o.data() + p * static_cast<std::size_t>(d), v.data(),
                    static_cast<std::size_t>(d) * sizeof(float));
    detail::finish("tile_spatial", out, {&v}, [&, positions, d](int on, std::vector<int> in) {
        return [on, in, positions, d](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& gv = t.grad_buf(in[0]);
            for (std::size_t p = 0; p < positions; ++p)
                for (int c = 0; c < d; ++c)
                    gv[static_cast<std::size_t>(c)] +=
                        g[p * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)];
        };
    });
    return out;
}

namespace detail {
inline std::pair<std::size_t, int> rows_and_channels(const Tensor& x, const char* op) {
    if (x.rank() < 1) throw DimensionError(std::string(op) + ": scalar input");
    int d = x.dim(x.rank() - 1);
    return {x.numel() / static_cast<std::size_t>(d), d};
}
}  // namespace detail

// Concatenate along the trailing (channel) axis. Leading shapes must agree.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank())
        throw DimensionError("concat_channels: rank mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    for (int i = 0; i + 1 < a.rank(); ++i)
        if (a.dim(i) != b.dim(i))
            throw DimensionError("concat_channels: leading dims differ, " + shape_str(a.shape()) +
                                 " vs " + shape_str(b.shape()));
    auto [rows, da] = detail::rows_and_channels(a, "concat_channels");
    int db = b.dim(b.rank() - 1);
    Shape out_shape = a.shape();
    out_shape.back() = da + db;
    Tensor out(out_shape);
    auto& o = out.mut();
    const float* pa = a.data();
    const float* pb = b.data();
    const std::size_t sda = static_cast<std::size_t>(da), sdb = static_cast<std::size_t>(db);
    for (std::size_t r = 0; r < rows; ++r) {
        std::memcpy(o.data() + r * (sda + sdb), pa + r * sda, sda * sizeof(float));
        std::memcpy(o.data() + r * (sda + sdb) + sda, pb + r * sdb, sdb * sizeof(float));
    }
    detail::finish("concat_channels", out, {&a, &b}, [&, rows, sda, sdb](int on, std::vector<int> in) {
        return [on, in, rows, sda, sdb](Tape& t) {
            const auto& g = t.grad_buf(on);
            if (in[0] >= 0) {
                auto& ga = t.grad_buf(in[0]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < sda; ++c) ga[r * sda + c] += g[r * (sda + sdb) + c];
            }
            if (in[1] >= 0) {
                auto& gb = t.grad_buf(in[1]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < sdb; ++c)
                        gb[r * sdb + c] += g[r * (sda + sdb) + sda + c];
            }
        };
    });
    return out;
}

// Split the trailing axis at d_first.
inline std::pair<Tensor, Tensor> split_channels(const Tensor& x, int d_first) {
    auto [rows, d] = detail::rows_and_channels(x, "split_channels");
    if (d_first <= 0 || d_first >= d)
        throw DimensionError("split_channels: split point " + std::to_string(d_first) +
                             " outside channel count " + std::to_string(d));
    const int d_second = d - d_first;
    Shape sa = x.shape();
    sa.back() = d_first;
    Shape sb = x.shape();
    sb.back() = d_second;
    Tensor a(sa), b(sb);
    auto& oa = a.mut();
    auto& ob = b.mut();
    const float* px = x.data();
    const std::size_t s1 = static_cast<std::size_t>(d_first), s2 = static_cast<std::size_t>(d_second);
    for (std::size_t r = 0; r < rows; ++r) {
        std::memcpy(oa.data() + r * s1, px + r * (s1 + s2), s1 * sizeof(float));
        std::memcpy(ob.data() + r * s2, px + r * (s1 + s2) + s1, s2 * sizeof(float));
    }
    detail::finish("split_channels", a, {&x}, [&, rows, s1, s2](int on, std::vector<int> in) {
        return [on, in, rows, s1, s2](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& gx = t.grad_buf(in[0]);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < s1; ++c) gx[r * (s1 + s2) + c] += g[r * s1 + c];
        };
    });
    detail::finish("split_channels", b, {&x}, [&, rows, s1, s2](int on, std::vector<int> in) {
        return [on, in, rows, s1, s2](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& gx = t.grad_buf(in[0]);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < s2; ++c) gx[r * (s1 + s2) + s1 + c] += g[r * s2 + c];
        };
    });
    return {a, b};
}

// Reorder the trailing axis: out[..., c] = x[..., perm[c]].
inline Tensor permute_channels(const Tensor& x, std::span<const int> perm) {
    auto [rows, d] = detail::rows_and_channels(x, "permute_channels");
    if (static_cast<int>(perm.size()) != d)
        throw DimensionError("permute_channels: permutation size " + std::to_string(perm.size()) +
                             " vs channels " + std::to_string(d));
    Tensor out(x.shape());
    auto& o = out.mut();
    const float* px = x.data();
    const std::size_t sd = static_cast<std::size_t>(d);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < sd; ++c)
            o[r * sd + c] = px[r * sd + static_cast<std::size_t>(perm[c])];
    detail::finish("permute_channels", out, {&x},
                   [&, rows, sd, p = std::vector<int>(perm.begin(), perm.end())](
                       int on, std::vector<int> in) {
                       return [on, in, rows, sd, p](Tape& t) {
                           if (in[0] < 0) return;
                           const auto& g = t.grad_buf(on);
                           auto& gx = t.grad_buf(in[0]);
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < sd; ++c)
                                   gx[r * sd + static_cast<std::size_t>(p[c])] += g[r * sd + c];
                       };
                   });
    return out;
}

inline std::vector<int> invert_permutation(std::span<const int> perm) {
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i)
        inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    return inv;
}

// Gather rows of a [K x D] table; backward scatter-adds into the table.
inline Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
    if (table.rank() != 2)
        throw DimensionError("gather_rows: table must be [K,D], got " + shape_str(table.shape()));
    const int k = table.dim(0), d = table.dim(1);
    for (int idx : indices)
        if (idx < 0 || idx >= k)
            throw ContractError("gather_rows: index " + std::to_string(idx) + " outside [0," +
                                std::to_string(k) + ")");
    Tensor out(Shape{static_cast<int>(indices.size()), d});
    auto& o = out.mut();
    const float* pt = table.data();
    const std::size_t sd = static_cast<std::size_t>(d);
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::memcpy(o.data() + r * sd, pt + static_cast<std::size_t>(indices[r]) * sd,
                    sd * sizeof(float));
    detail::finish("gather_rows", out, {&table},
                   [&, sd, idx = std::vector<int>(indices.begin(), indices.end())](
                       int on, std::vector<int> in) {
                       return [on, in, sd, idx](Tape& t) {
                           if (in[0] < 0) return;
                           const auto& g = t.grad_buf(on);
                           auto& gt = t.grad_buf(in[0]);
                           for (std::size_t r = 0; r < idx.size(); ++r)
                               for (std::size_t c = 0; c < sd; ++c)
                                   gt[static_cast<std::size_t>(idx[r]) * sd + c] += g[r * sd + c];
                       };
                   });
    return out;
}

// Straight-through primitive: forward takes `value`'s data, backward routes
// the incoming gradient to `carrier`.
inline Tensor pass_through(const Tensor& value, const Tensor& carrier) {
    detail::check_same_shape("pass_through", value, carrier);
    Tensor out(value.shape(), std::vector<float>(value.data(), value.data() + value.numel()));
    detail::finish("pass_through", out, {&carrier}, [&](int on, std::vector<int> in) {
        return [on, in](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& gc = t.grad_buf(in[0]);
            for (std::size_t i = 0; i < g.size(); ++i) gc[i] += g[i];
        };
    });
    return out;
}

// A named handle to a parameter tensor; models expose their state as a flat
// registry of these in a fixed order.
struct ParamRef {
    std::string name;
    Tensor* tensor;
};

// Central-difference gradient checks. Both overloads report
//   max over parameters of |analytic - numeric| / max(1, |analytic|)
// with numeric = (f(p+eps) - f(p-eps)) / (2 eps), and require f to be
// deterministic (verified by evaluating it twice at the base point).

// Double-precision form for arbitrary scalar objectives; the caller owns the
// parameter cells and supplies the analytic derivative per cell.
struct FdVar {
    double* value;
    double analytic;
};

inline double finite_difference_check(const std::function<double()>& f, std::span<const FdVar> vars,
                                      double eps) {
    if (!(eps > 0.0)) throw ContractError("finite_difference_check: eps must be positive");
    const double base1 = f();
    const double base2 = f();
    if (base1 != base2)
        throw ContractError("finite_difference_check: f is not deterministic (" +
                            std::to_string(base1) + " vs " + std::to_string(base2) + ")");
    double worst = 0.0;
    for (const FdVar& v : vars) {
        const double saved = *v.value;
        *v.value = saved + eps;
        const double fp = f();
        *v.value = saved - eps;
        const double fm = f();
        *v.value = saved;
        const double numeric = (fp - fm) / (2.0 * eps);
        worst = std::max(worst, std::abs(v.analytic - numeric) / std::max(1.0, std::abs(v.analytic)));
    }
    return worst;
}

// Tape-backed form: runs `f` once under a fresh tape to obtain analytic
// gradients for every registered parameter, then perturbs each element in
// place.
inline double finite_difference_check(const std::function<Tensor()>& f,
                                      std::vector<ParamRef> params, float eps) {
    if (!(eps > 0.0f)) throw ContractError("finite_difference_check: eps must be positive");
    const float base1 = f().value();
    const float base2 = f().value();
    if (base1 != base2)
        throw ContractError("finite_difference_check: f is not deterministic (" +
                            std::to_string(base1) + " vs " + std::to_string(base2) + ")");

    std::vector<std::vector<float>> analytic(params.size());
    {
        Tape tape;
        for (auto& p : params) tape.watch(*p.tensor);
        Tensor loss = f();
        tape.backward(loss);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto g = tape.grad(*params[i].tensor);
            analytic[i].assign(g.begin(), g.end());
            if (analytic[i].empty()) analytic[i].assign(params[i].tensor->numel(), 0.0f);
        }
    }

    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& t = *params[i].tensor;
        for (std::size_t j = 0; j < t.numel(); ++j) {
            const float saved = t.data()[j];
            t.mut()[j] = saved + eps;
            const double fp = f().value();
            t.mut()[j] = saved - eps;
            const double fm = f().value();
            t.mut()[j] = saved;
            const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
            const double a = static_cast<double>(analytic[i][j]);
            const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// Reshape without moving data. Same element count required.
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                             shape_str(shape));
    Tensor out(std::move(shape), std::vector<float>(x.data(), x.data() + x.numel()));
    detail::finish("reshape", out, {&x}, [&](int on, std::vector<int> in) {
        return [on, in](Tape& t) {
            if (in[0] < 0) return;
            const auto& g = t.grad_buf(on);
            auto& gx = t.grad_buf(in[0]);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        };
    });
    return out;
}

}  // namespace vqflow
