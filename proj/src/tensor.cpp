#include "lpa3/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace lpa3 {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
    for (auto d : shape) {
        if (d == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor() : shape_{1}, data_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (numel(shape_) != data_.size()) {
        throw ShapeError("shape " + to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
    }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::vector(std::initializer_list<double> values) { return vector(std::vector<double>(values)); }

Tensor Tensor::vector(std::vector<double> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("axis out of range for shape " + to_string(shape_));
    return shape_[axis];
}

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
}

void Tensor::zero_grad() { grad_.assign(data_.size(), 0.0); }

void Tensor::accumulate_grad(std::span<const double> g) {
    if (g.size() != data_.size()) throw ShapeError("gradient size mismatch");
    if (grad_.empty()) grad_.assign(data_.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) grad_[i] += g[i];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------- Var / Tape

const Tensor& Var::value() const {
    if (!tape_) throw TapeError("use of an unbound Var");
    return tape_->value(id_);
}

bool Var::requires_grad() const { return tape().requires_grad(id_); }

Tape& Var::tape() const {
    if (!tape_) throw TapeError("use of an unbound Var");
    return *tape_;
}

void Tape::check_live() const {
    if (consumed_) throw TapeError("tape already consumed by a backward pass");
}

Var Tape::constant(Tensor value) { return record(std::move(value), false, nullptr); }

Var Tape::leaf(Tensor value) { return record(std::move(value), true, nullptr); }

Var Tape::watch(Tensor& external) {
    check_live();
    Node node;
    node.value = external;
    node.requires_grad = external.requires_grad();
    node.external = &external;
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, bool requires_grad, BackwardFn backward) {
    check_live();
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

std::vector<double>& Tape::grad_buffer(std::size_t id) {
    auto& node = nodes_.at(id);
    if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
    return node.grad;
}

void Tape::backward(Var scalar) {
    check_live();
    if (&scalar.tape() != this) throw TapeError("backward on a Var from another tape");
    if (scalar.size() != 1) {
        throw TapeError("backward requires a single-element output, got shape " + to_string(scalar.shape()));
    }
    consumed_ = true;
    if (!nodes_[scalar.id()].requires_grad) return;
    grad_buffer(scalar.id())[0] = 1.0;
    for (std::size_t k = scalar.id() + 1; k-- > 0;) {
        Node& node = nodes_[k];
        if (!node.requires_grad || node.grad.empty()) continue;
        if (node.backward) node.backward(*this, k, node.grad);
        if (node.external && node.external->requires_grad()) node.external->accumulate_grad(node.grad);
    }
}

Tensor Tape::grad(Var v) const {
    const Node& node = nodes_.at(v.id());
    if (node.grad.empty()) return Tensor(node.value.shape(), 0.0);
    return Tensor(node.value.shape(), node.grad);
}

// ---------------------------------------------------------------- ops

namespace ops {
namespace {

Tape& common_tape(Var a, Var b) {
    Tape& t = a.tape();
    if (&b.tape() != &t) throw TapeError("operands recorded on different tapes");
    return t;
}

Tensor finite_or_throw(Tensor t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string("non-finite result in ") + op);
    return t;
}

Shape reduced_last(const Shape& s) {
    if (s.size() == 1) return Shape{1};
    return Shape(s.begin(), s.end() - 1);
}

void require_rank(const Var& v, std::size_t rank, const char* op) {
    if (v.shape().size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(v.shape()));
    }
}

enum class Bcast { Same, ScalarA, ScalarB };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::Same;
    if (b.size() == 1) return Bcast::ScalarB;
    if (a.size() == 1) return Bcast::ScalarA;
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

// Accumulate g into a gradient buffer, summing when the operand was a
// broadcast scalar.
void accumulate(std::vector<double>& buf, std::span<const double> g, bool scalar, double factor = 1.0) {
    if (scalar) {
        double s = 0.0;
        for (double v : g) s += v;
        buf[0] += factor * s;
    } else {
        for (std::size_t i = 0; i < g.size(); ++i) buf[i] += factor * g[i];
    }
}

}  // namespace

Var add(Var a, Var b) {
    Tape& t = common_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    auto kind = broadcast_kind(av, bv, "add");
    Tensor out(kind == Bcast::ScalarA ? bv.shape() : av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[kind == Bcast::ScalarA ? 0 : i] + bv[kind == Bcast::ScalarB ? 0 : i];
    }
    bool rg = a.requires_grad() || b.requires_grad();
    auto ia = a.id(), ib = b.id();
    return t.record(finite_or_throw(std::move(out), "add"), rg, [ia, ib, kind](Tape& tp, std::size_t, std::span<const double> g) {
        if (tp.requires_grad(ia)) accumulate(tp.grad_buffer(ia), g, kind == Bcast::ScalarA);
        if (tp.requires_grad(ib)) accumulate(tp.grad_buffer(ib), g, kind == Bcast::ScalarB);
    });
}

Var sub(Var a, Var b) {
    Tape& t = common_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    auto kind = broadcast_kind(av, bv, "sub");
    Tensor out(kind == Bcast::ScalarA ? bv.shape() : av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[kind == Bcast::ScalarA ? 0 : i] - bv[kind == Bcast::ScalarB ? 0 : i];
    }
    bool rg = a.requires_grad() || b.requires_grad();
    auto ia = a.id(), ib = b.id();
    return t.record(finite_or_throw(std::move(out), "sub"), rg, [ia, ib, kind](Tape& tp, std::size_t, std::span<const double> g) {
        if (tp.requires_grad(ia)) accumulate(tp.grad_buffer(ia), g, kind == Bcast::ScalarA);
        if (tp.requires_grad(ib)) accumulate(tp.grad_buffer(ib), g, kind == Bcast::ScalarB, -1.0);
    });
}

Var mul(Var a, Var b) {
    Tape& t = common_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    auto kind = broadcast_kind(av, bv, "mul");
    Tensor out(kind == Bcast::ScalarA ? bv.shape() : av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[kind == Bcast::ScalarA ? 0 : i] * bv[kind == Bcast::ScalarB ? 0 : i];
    }
    bool rg = a.requires_grad() || b.requires_grad();
    auto ia = a.id(), ib = b.id();
    return t.record(finite_or_throw(std::move(out), "mul"), rg, [ia, ib, kind](Tape& tp, std::size_t, std::span<const double> g) {
        const Tensor& av = tp.value(ia);
        const Tensor& bv = tp.value(ib);
        const bool sa = kind == Bcast::ScalarA, sb = kind == Bcast::ScalarB;
        if (tp.requires_grad(ia)) {
            auto& ga = tp.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[sa ? 0 : i] += g[i] * bv[sb ? 0 : i];
        }
        if (tp.requires_grad(ib)) {
            auto& gb = tp.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[sb ? 0 : i] += g[i] * av[sa ? 0 : i];
        }
    });
}

Var scale(Var a, double factor) {
    Tape& t = a.tape();
    Tensor out = a.value();
    out.set_requires_grad(false);
    out.clear_grad();
    for (auto& v : out.data()) v *= factor;
    auto ia = a.id();
    return t.record(finite_or_throw(std::move(out), "scale"), a.requires_grad(),
                    [ia, factor](Tape& tp, std::size_t, std::span<const double> g) {
                        accumulate(tp.grad_buffer(ia), g, false, factor);
                    });
}

Var add_scalar(Var a, double offset) {
    Tape& t = a.tape();
    Tensor out(a.shape());
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + offset;
    auto ia = a.id();
    return t.record(finite_or_throw(std::move(out), "add_scalar"), a.requires_grad(),
                    [ia](Tape& tp, std::size_t, std::span<const double> g) { accumulate(tp.grad_buffer(ia), g, false); });
}

Var neg(Var a) { return scale(a, -1.0); }

Var matmul(Var a, Var b) {
    Tape& t = common_tape(a, b);
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* row = &out[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double x = av[i * k + p];
            const double* brow = &bv.data()[p * n];
            for (std::size_t j = 0; j < n; ++j) row[j] += x * brow[j];
        }
    }
    bool rg = a.requires_grad() || b.requires_grad();
    auto ia = a.id(), ib = b.id();
    return t.record(finite_or_throw(std::move(out), "matmul"), rg,
                    [ia, ib, m, k, n](Tape& tp, std::size_t, std::span<const double> g) {
                        const Tensor& av = tp.value(ia);
                        const Tensor& bv = tp.value(ib);
                        if (tp.requires_grad(ia)) {
                            auto& ga = tp.grad_buffer(ia);
                            for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t p = 0; p < k; ++p) {
                                    double s = 0.0;
                                    for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
                                    ga[i * k + p] += s;
                                }
                            }
                        }
                        if (tp.requires_grad(ib)) {
                            auto& gb = tp.grad_buffer(ib);
                            for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t p = 0; p < k; ++p) {
                                    const double x = av[i * k + p];
                                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += x * g[i * n + j];
                                }
                            }
                        }
                    });
}

Var transpose(Var a) {
    Tape& t = a.tape();
    require_rank(a, 2, "transpose");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    const Tensor& av = a.value();
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    auto ia = a.id();
    return t.record(std::move(out), a.requires_grad(), [ia, r, c](Tape& tp, std::size_t, std::span<const double> g) {
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
}

Var linear(Var x, Var weight, Var bias) {
    Tape& t = common_tape(x, weight);
    common_tape(x, bias);
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    const std::size_t batch = x.shape()[0], in = x.shape()[1], out_w = weight.shape()[0];
    if (weight.shape()[1] != in || bias.shape() != Shape{out_w}) {
        throw ShapeError("linear: input " + to_string(x.shape()) + " weight " + to_string(weight.shape()) +
                         " bias " + to_string(bias.shape()));
    }
    const Tensor& xv = x.value();
    const Tensor& wv = weight.value();
    const Tensor& bv = bias.value();
    // Transposed copy so the inner loop runs over contiguous output columns.
    std::vector<double> wt(in * out_w);
    for (std::size_t o = 0; o < out_w; ++o)
        for (std::size_t i = 0; i < in; ++i) wt[i * out_w + o] = wv[o * in + i];
    Tensor out({batch, out_w});
    for (std::size_t b = 0; b < batch; ++b) {
        double* row = &out[b * out_w];
        for (std::size_t o = 0; o < out_w; ++o) row[o] = bv[o];
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = xv[b * in + i];
            if (xi == 0.0) continue;
            const double* wrow = &wt[i * out_w];
            for (std::size_t o = 0; o < out_w; ++o) row[o] += xi * wrow[o];
        }
    }
    bool rg = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
    auto ix = x.id(), iw = weight.id(), ib = bias.id();
    return t.record(finite_or_throw(std::move(out), "linear"), rg,
                    [ix, iw, ib, batch, in, out_w](Tape& tp, std::size_t, std::span<const double> g) {
                        const Tensor& xv = tp.value(ix);
                        const Tensor& wv = tp.value(iw);
                        if (tp.requires_grad(ix)) {
                            auto& gx = tp.grad_buffer(ix);
                            for (std::size_t b = 0; b < batch; ++b) {
                                double* grow = &gx[b * in];
                                for (std::size_t o = 0; o < out_w; ++o) {
                                    const double go = g[b * out_w + o];
                                    if (go == 0.0) continue;
                                    const double* wrow = &wv.data()[o * in];
                                    for (std::size_t i = 0; i < in; ++i) grow[i] += go * wrow[i];
                                }
                            }
                        }
                        if (tp.requires_grad(iw)) {
                            auto& gw = tp.grad_buffer(iw);
                            for (std::size_t b = 0; b < batch; ++b) {
                                const double* xrow = &xv.data()[b * in];
                                for (std::size_t o = 0; o < out_w; ++o) {
                                    const double go = g[b * out_w + o];
                                    if (go == 0.0) continue;
                                    double* gwrow = &gw[o * in];
                                    for (std::size_t i = 0; i < in; ++i) gwrow[i] += go * xrow[i];
                                }
                            }
                        }
                        if (tp.requires_grad(ib)) {
                            auto& gb = tp.grad_buffer(ib);
                            for (std::size_t b = 0; b < batch; ++b)
                                for (std::size_t o = 0; o < out_w; ++o) gb[o] += g[b * out_w + o];
                        }
                    });
}

Var conv2d(Var x, Var weight, Var bias, std::size_t padding) {
    Tape& t = common_tape(x, weight);
    common_tape(x, bias);
    require_rank(x, 4, "conv2d");
    require_rank(weight, 4, "conv2d");
    const auto& xs = x.shape();
    const auto& ws = weight.shape();
    const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t O = ws[0], K = ws[2];
    if (ws[1] != C || ws[3] != K || bias.shape() != Shape{O}) {
        throw ShapeError("conv2d: input " + to_string(xs) + " weight " + to_string(ws) + " bias " +
                         to_string(bias.shape()));
    }
    if (K > 5) throw ShapeError("conv2d: kernel size above 5 is not supported");
    if (H + 2 * padding < K || W + 2 * padding < K) throw ShapeError("conv2d: kernel larger than padded input");
    const std::size_t OH = H + 2 * padding - K + 1, OW = W + 2 * padding - K + 1;
    const Tensor& xv = x.value();
    const Tensor& wv = weight.value();
    const Tensor& bv = bias.value();
    Tensor out({B, O, OH, OW});
    const auto pad = static_cast<long>(padding);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t o = 0; o < O; ++o) {
            double* plane = &out[((b * O) + o) * OH * OW];
            for (std::size_t i = 0; i < OH * OW; ++i) plane[i] = bv[o];
            for (std::size_t c = 0; c < C; ++c) {
                const double* xin = &xv.data()[((b * C) + c) * H * W];
                const double* ker = &wv.data()[((o * C) + c) * K * K];
                for (std::size_t ky = 0; ky < K; ++ky) {
                    for (std::size_t kx = 0; kx < K; ++kx) {
                        const double wk = ker[ky * K + kx];
                        for (std::size_t oy = 0; oy < OH; ++oy) {
                            const long iy = static_cast<long>(oy + ky) - pad;
                            if (iy < 0 || iy >= static_cast<long>(H)) continue;
                            for (std::size_t ox = 0; ox < OW; ++ox) {
                                const long ix = static_cast<long>(ox + kx) - pad;
                                if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                plane[oy * OW + ox] += wk * xin[iy * static_cast<long>(W) + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    bool rg = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
    auto ixx = x.id(), iw = weight.id(), ib = bias.id();
    return t.record(
        finite_or_throw(std::move(out), "conv2d"), rg,
        [ixx, iw, ib, B, C, H, W, O, K, OH, OW, pad](Tape& tp, std::size_t, std::span<const double> g) {
            const Tensor& xv = tp.value(ixx);
            const Tensor& wv = tp.value(iw);
            const bool gx_on = tp.requires_grad(ixx), gw_on = tp.requires_grad(iw);
            std::vector<double>* gx = gx_on ? &tp.grad_buffer(ixx) : nullptr;
            std::vector<double>* gw = gw_on ? &tp.grad_buffer(iw) : nullptr;
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t o = 0; o < O; ++o) {
                    const double* gplane = &g[((b * O) + o) * OH * OW];
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t xoff = ((b * C) + c) * H * W;
                        const std::size_t koff = ((o * C) + c) * K * K;
                        for (std::size_t ky = 0; ky < K; ++ky) {
                            for (std::size_t kx = 0; kx < K; ++kx) {
                                const double wk = wv[koff + ky * K + kx];
                                double acc = 0.0;
                                for (std::size_t oy = 0; oy < OH; ++oy) {
                                    const long iy = static_cast<long>(oy + ky) - pad;
                                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                    for (std::size_t ox = 0; ox < OW; ++ox) {
                                        const long ix = static_cast<long>(ox + kx) - pad;
                                        if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                        const std::size_t xi = xoff + static_cast<std::size_t>(iy) * W +
                                                               static_cast<std::size_t>(ix);
                                        const double go = gplane[oy * OW + ox];
                                        if (gx) (*gx)[xi] += go * wk;
                                        acc += go * xv[xi];
                                    }
                                }
                                if (gw) (*gw)[koff + ky * K + kx] += acc;
                            }
                        }
                    }
                }
            }
            if (tp.requires_grad(ib)) {
                auto& gb = tp.grad_buffer(ib);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t o = 0; o < O; ++o) {
                        const double* gplane = &g[((b * O) + o) * OH * OW];
                        for (std::size_t i = 0; i < OH * OW; ++i) gb[o] += gplane[i];
                    }
            }
        });
}

Var relu(Var a) {
    Tape& t = a.tape();
    const Tensor& av = a.value();
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    auto ia = a.id();
    return t.record(std::move(out), a.requires_grad(), [ia](Tape& tp, std::size_t, std::span<const double> g) {
        const Tensor& av = tp.value(ia);
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (av[i] > 0.0) ga[i] += g[i];
    });
}

Var log(Var a) {
    Tape& t = a.tape();
    const Tensor& av = a.value();
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
    auto ia = a.id();
    return t.record(finite_or_throw(std::move(out), "log"), a.requires_grad(),
                    [ia](Tape& tp, std::size_t, std::span<const double> g) {
                        const Tensor& av = tp.value(ia);
                        auto& ga = tp.grad_buffer(ia);
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av[i];
                    });
}

Var exp(Var a) {
    Tape& t = a.tape();
    const Tensor& av = a.value();
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    auto ia = a.id();
    return t.record(finite_or_throw(std::move(out), "exp"), a.requires_grad(), [ia](Tape& tp, std::size_t self, std::span<const double> g) {
        const Tensor& ov = tp.value(self);
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ov[i];
    });
}

Var clamp(Var a, double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
    Tape& t = a.tape();
    const Tensor& av = a.value();
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(av[i], lo, hi);
    auto ia = a.id();
    return t.record(std::move(out), a.requires_grad(), [ia, lo, hi](Tape& tp, std::size_t, std::span<const double> g) {
        const Tensor& av = tp.value(ia);
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (av[i] >= lo && av[i] <= hi) ga[i] += g[i];
    });
}

Var sum(Var a) {
    Tape& t = a.tape();
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    auto ia = a.id();
    return t.record(finite_or_throw(Tensor::scalar(s), "sum"), a.requires_grad(),
                    [ia](Tape& tp, std::size_t, std::span<const double> g) {
                        auto& ga = tp.grad_buffer(ia);
                        for (auto& v : ga) v += g[0];
                    });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var sum_last(Var a) {
    Tape& t = a.tape();
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.size() / n;
    const Tensor& av = a.value();
    Tensor out(reduced_last(a.shape()));
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += av[r * n + j];
        out[r] = s;
    }
    auto ia = a.id();
    return t.record(finite_or_throw(std::move(out), "sum_last"), a.requires_grad(),
                    [ia, rows, n](Tape& tp, std::size_t, std::span<const double> g) {
                        auto& ga = tp.grad_buffer(ia);
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r];
                    });
}

Var l2_norm(Var a) {
    Tape& t = a.tape();
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.size() / n;
    const Tensor& av = a.value();
    Tensor out(reduced_last(a.shape()));
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += av[r * n + j] * av[r * n + j];
        out[r] = std::sqrt(s);
    }
    auto ia = a.id();
    return t.record(finite_or_throw(std::move(out), "l2_norm"), a.requires_grad(), [ia, rows, n](Tape& tp, std::size_t self, std::span<const double> g) {
        const Tensor& av = tp.value(ia);
        const Tensor& nv = tp.value(self);
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) {
            if (nv[r] == 0.0) continue;
            const double f = g[r] / nv[r];
            for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += f * av[r * n + j];
        }
    });
}

Var max_last(Var a) {
    Tape& t = a.tape();
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.size() / n;
    const Tensor& av = a.value();
    Tensor out(reduced_last(a.shape()));
    std::vector<std::size_t> arg(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (av[r * n + j] > av[r * n + best]) best = j;
        arg[r] = best;
        out[r] = av[r * n + best];
    }
    auto ia = a.id();
    return t.record(std::move(out), a.requires_grad(),
                    [ia, n, arg = std::move(arg)](Tape& tp, std::size_t, std::span<const double> g) {
                        auto& ga = tp.grad_buffer(ia);
                        for (std::size_t r = 0; r < arg.size(); ++r) ga[r * n + arg[r]] += g[r];
                    });
}

Var softmax(Var a) {
    Tape& t = a.tape();
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.size() / n;
    const Tensor& av = a.value();
    Tensor out(a.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = &av.data()[r * n];
        double* o = &out[r * n];
        const double m = *std::max_element(in, in + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp(in[j] - m);
            s += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= s;
    }
    auto ia = a.id();
    return t.record(finite_or_throw(std::move(out), "softmax"), a.requires_grad(), [ia, rows, n](Tape& tp, std::size_t self, std::span<const double> g) {
        const Tensor& y = tp.value(self);
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
            for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
        }
    });
}

Var log_softmax(Var a) {
    Tape& t = a.tape();
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.size() / n;
    const Tensor& av = a.value();
    Tensor out(a.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = &av.data()[r * n];
        const double m = *std::max_element(in, in + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(in[j] - m);
        const double lse = m + std::log(s);
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = in[j] - lse;
    }
    auto ia = a.id();
    return t.record(finite_or_throw(std::move(out), "log_softmax"), a.requires_grad(), [ia, rows, n](Tape& tp, std::size_t self, std::span<const double> g) {
        const Tensor& y = tp.value(self);
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t r = 0; r < rows; ++r) {
            double gs = 0.0;
            for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
            for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gs;
        }
    });
}

Var reshape(Var a, Shape shape) {
    Tape& t = a.tape();
    Tensor out = a.value().reshaped(std::move(shape));
    out.set_requires_grad(false);
    auto ia = a.id();
    return t.record(std::move(out), a.requires_grad(),
                    [ia](Tape& tp, std::size_t, std::span<const double> g) { accumulate(tp.grad_buffer(ia), g, false); });
}

Var pick(Var a, std::span<const std::size_t> index) {
    Tape& t = a.tape();
    require_rank(a, 2, "pick");
    const std::size_t rows = a.shape()[0], n = a.shape()[1];
    if (index.size() != rows) throw ShapeError("pick: one index per row required");
    Tensor out({rows});
    const Tensor& av = a.value();
    std::vector<std::size_t> idx(index.begin(), index.end());
    for (std::size_t r = 0; r < rows; ++r) {
        if (idx[r] >= n) {
            throw std::out_of_range("pick: index " + std::to_string(idx[r]) + " out of range for " +
                                    std::to_string(n) + " columns");
        }
        out[r] = av[r * n + idx[r]];
    }
    auto ia = a.id();
    return t.record(std::move(out), a.requires_grad(),
                    [ia, n, idx = std::move(idx)](Tape& tp, std::size_t, std::span<const double> g) {
                        auto& ga = tp.grad_buffer(ia);
                        for (std::size_t r = 0; r < idx.size(); ++r) ga[r * n + idx[r]] += g[r];
                    });
}

Var concat_columns(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_columns: no inputs");
    Tape& t = parts[0].tape();
    const std::size_t rows = parts[0].shape()[0];
    std::size_t total = 0;
    std::vector<std::size_t> widths, ids;
    bool rg = false;
    for (const Var& p : parts) {
        require_rank(p, 2, "concat_columns");
        if (&p.tape() != &t) throw TapeError("operands recorded on different tapes");
        if (p.shape()[0] != rows) throw ShapeError("concat_columns: row counts differ");
        widths.push_back(p.shape()[1]);
        ids.push_back(p.id());
        total += p.shape()[1];
        rg = rg || p.requires_grad();
    }
    Tensor out({rows, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& pv = parts[k].value();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(&pv.data()[r * widths[k]], widths[k], &out[r * total + off]);
        off += widths[k];
    }
    return t.record(std::move(out), rg, [ids, widths, rows, total](Tape& tp, std::size_t, std::span<const double> g) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (tp.requires_grad(ids[k])) {
                auto& gp = tp.grad_buffer(ids[k]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < widths[k]; ++j) gp[r * widths[k] + j] += g[r * total + off + j];
            }
            off += widths[k];
        }
    });
}

namespace {

// Normalizes groups of `len` elements spaced `stride` apart. Group g starts at
// starts[g].
Var group_normalize(Var a, std::vector<std::size_t> starts, std::size_t len, std::size_t stride, const char* op) {
    Tape& t = a.tape();
    const Tensor& av = a.value();
    Tensor out(a.shape());
    std::vector<double> norms(starts.size());
    for (std::size_t gi = 0; gi < starts.size(); ++gi) {
        double s = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
            const double v = av[starts[gi] + j * stride];
            s += v * v;
        }
        const double nrm = std::sqrt(s);
        norms[gi] = nrm;
        if (nrm == 0.0) continue;
        for (std::size_t j = 0; j < len; ++j) out[starts[gi] + j * stride] = av[starts[gi] + j * stride] / nrm;
    }
    auto ia = a.id();
    return t.record(finite_or_throw(std::move(out), op), a.requires_grad(),
                    [ia, starts = std::move(starts), norms = std::move(norms), len,
                     stride](Tape& tp, std::size_t self, std::span<const double> g) {
                        const Tensor& y = tp.value(self);
                        auto& ga = tp.grad_buffer(ia);
                        for (std::size_t gi = 0; gi < starts.size(); ++gi) {
                            if (norms[gi] == 0.0) continue;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < len; ++j) {
                                const std::size_t k = starts[gi] + j * stride;
                                dot += y[k] * g[k];
                            }
                            for (std::size_t j = 0; j < len; ++j) {
                                const std::size_t k = starts[gi] + j * stride;
                                ga[k] += (g[k] - y[k] * dot) / norms[gi];
                            }
                        }
                    });
}

}  // namespace

Var channel_normalize(Var a) {
    const auto& s = a.shape();
    if (s.size() == 2) {
        std::vector<std::size_t> starts(s[0]);
        for (std::size_t r = 0; r < s[0]; ++r) starts[r] = r * s[1];
        return group_normalize(a, std::move(starts), s[1], 1, "channel_normalize");
    }
    if (s.size() == 4) {
        const std::size_t B = s[0], C = s[1], HW = s[2] * s[3];
        std::vector<std::size_t> starts;
        starts.reserve(B * HW);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < HW; ++p) starts.push_back(b * C * HW + p);
        return group_normalize(a, std::move(starts), C, HW, "channel_normalize");
    }
    throw ShapeError("channel_normalize: expected rank 2 or 4, got " + to_string(s));
}

Var sample_normalize(Var a) {
    const auto& s = a.shape();
    if (s.size() < 2) throw ShapeError("sample_normalize: expected a batch axis, got " + to_string(s));
    const std::size_t per = a.size() / s[0];
    std::vector<std::size_t> starts(s[0]);
    for (std::size_t b = 0; b < s[0]; ++b) starts[b] = b * per;
    return group_normalize(a, std::move(starts), per, 1, "sample_normalize");
}

Var normalize_affine(Var x, std::span<const double> mean, std::span<const double> var, Var gamma, Var beta,
                     double eps) {
    Tape& t = common_tape(x, gamma);
    common_tape(x, beta);
    const auto& s = x.shape();
    if (s.size() != 2 && s.size() != 4) throw ShapeError("normalize_affine: expected rank 2 or 4");
    const std::size_t B = s[0], C = s[1], inner = s.size() == 4 ? s[2] * s[3] : 1;
    if (mean.size() != C || var.size() != C || gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
        throw ShapeError("normalize_affine: channel count mismatch for input " + to_string(s));
    }
    std::vector<double> mu(mean.begin(), mean.end());
    std::vector<double> inv(C);
    for (std::size_t c = 0; c < C; ++c) inv[c] = 1.0 / std::sqrt(var[c] + eps);
    const Tensor& xv = x.value();
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    Tensor out(s);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < inner; ++p) {
                const std::size_t k = (b * C + c) * inner + p;
                out[k] = gv[c] * (xv[k] - mu[c]) * inv[c] + bv[c];
            }
    bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    auto ix = x.id(), ig = gamma.id(), ib = beta.id();
    return t.record(finite_or_throw(std::move(out), "normalize_affine"), rg,
                    [ix, ig, ib, B, C, inner, mu = std::move(mu), inv = std::move(inv)](Tape& tp, std::size_t,
                                                                                      std::span<const double> g) {
                        const Tensor& xv = tp.value(ix);
                        const Tensor& gv = tp.value(ig);
                        std::vector<double>* gx = tp.requires_grad(ix) ? &tp.grad_buffer(ix) : nullptr;
                        std::vector<double>* gg = tp.requires_grad(ig) ? &tp.grad_buffer(ig) : nullptr;
                        std::vector<double>* gb = tp.requires_grad(ib) ? &tp.grad_buffer(ib) : nullptr;
                        for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t p = 0; p < inner; ++p) {
                                    const std::size_t k = (b * C + c) * inner + p;
                                    if (gx) (*gx)[k] += g[k] * gv[c] * inv[c];
                                    if (gg) (*gg)[c] += g[k] * (xv[k] - mu[c]) * inv[c];
                                    if (gb) (*gb)[c] += g[k];
                                }
                    });
}

}  // namespace ops
}  // namespace lpa3
