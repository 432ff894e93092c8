#include "gpr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "gpr/common.hpp"

namespace gpr::ad {

namespace {

void validate_finite(const std::vector<double>& data, const char* what) {
    for (const double v : data) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string(what) + ": non-finite value produced");
        }
    }
}

std::string shape_str(const std::vector<int>& s) {
    std::string r = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + ")";
}

[[noreturn]] void shape_error(const char* op, const std::vector<int>& a,
                              const std::vector<int>& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
}

}  // namespace

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (const int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dimension must be positive");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape_, double fill)
    : shape(std::move(shape_)), data(static_cast<size_t>(shape_numel(shape)), fill) {
    if (!std::isfinite(fill)) throw std::invalid_argument("Tensor: non-finite fill value");
}

Tensor::Tensor(std::vector<int> shape_, std::vector<double> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
        throw std::invalid_argument("Tensor: data length does not match shape");
    }
    validate_finite(data, "Tensor");
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

int64_t Tensor::numel() const { return static_cast<int64_t>(data.size()); }

int Tensor::rows() const {
    if (shape.size() != 2) throw std::logic_error("rows(): tensor is not 2-D");
    return shape[0];
}

int Tensor::cols() const {
    if (shape.size() != 2) throw std::logic_error("cols(): tensor is not 2-D");
    return shape[1];
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

Var Graph::leaf(const Tensor& t) {
    Node n;
    n.shape = t.shape;
    n.value = t.data;
    n.is_leaf = true;
    n.needs_grad = t.requires_grad;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    leaves_.push_back(id);
    sinks_.push_back(nullptr);
    return Var{this, id};
}

Var Graph::leaf(Tensor& t) {
    const Var v = leaf(static_cast<const Tensor&>(t));
    sinks_.back() = &t;
    return v;
}

Var Graph::constant(const Tensor& t) {
    Node n;
    n.shape = t.shape;
    n.value = t.data;
    n.is_leaf = true;
    n.needs_grad = false;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::constant(double v) { return constant(Tensor::scalar(v)); }

const std::vector<int>& Graph::shape(Var v) const { return node(v.id).shape; }
const std::vector<double>& Graph::value(Var v) const { return node(v.id).value; }

Tensor Graph::value_tensor(Var v) const {
    const Node& n = node(v.id);
    return Tensor(n.shape, n.value);
}

double Graph::scalar_value(Var v) const {
    const Node& n = node(v.id);
    if (n.value.size() != 1) throw std::invalid_argument("scalar_value: node is not scalar");
    return n.value[0];
}

Tensor Graph::grad_tensor(Var v) const {
    const Node& n = node(v.id);
    Tensor g(n.shape);
    if (!n.adjoint.empty()) g.data = n.adjoint;
    return g;
}

Var Graph::make_node(std::vector<int> shape, std::vector<double> value, std::vector<int> inputs,
                     std::function<void(Graph&, int)> backward_fn) {
    if (static_cast<int64_t>(value.size()) != shape_numel(shape)) {
        throw std::logic_error("make_node: value length does not match shape");
    }
    validate_finite(value, "op");
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward_fn = std::move(backward_fn);
    for (const int in : n.inputs) {
        if (node(in).needs_grad) {
            n.needs_grad = true;
            break;
        }
    }
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

std::vector<double>& Graph::adjoint(int id) {
    Node& n = node(id);
    if (n.adjoint.empty()) n.adjoint.assign(n.value.size(), 0.0);
    return n.adjoint;
}

void Graph::backward(Var output) {
    if (output.graph != this) throw std::invalid_argument("backward: var from another graph");
    Node& out = node(output.id);
    if (out.value.size() != 1) {
        throw std::invalid_argument("backward: output must be scalar, got shape " +
                                    shape_str(out.shape));
    }
    for (Node& n : nodes_) n.adjoint.clear();
    adjoint(output.id)[0] = 1.0;
    for (int id = output.id; id >= 0; --id) {
        Node& n = node(id);
        if (!n.needs_grad || n.adjoint.empty() || !n.backward_fn) continue;
        n.backward_fn(*this, id);
    }
    // every requires_grad leaf holds a gradient after backward (zeros if unused)
    for (size_t i = 0; i < leaves_.size(); ++i) {
        Node& n = node(leaves_[i]);
        if (n.needs_grad && n.adjoint.empty()) n.adjoint.assign(n.value.size(), 0.0);
        if (sinks_[i] != nullptr && n.needs_grad) sinks_[i]->grad = n.adjoint;
    }
}

// ---------------------------------------------------------------------------
// primitive helpers
// ---------------------------------------------------------------------------

namespace {

Graph& gof(Var a) {
    if (!a.valid()) throw std::invalid_argument("op: invalid Var");
    return *a.graph;
}

void check_same_graph(Var a, Var b) {
    if (a.graph != b.graph) throw std::invalid_argument("op: vars from different graphs");
}

bool is_scalar(const Graph& g, Var v) { return g.node(v.id).value.size() == 1; }

// Elementwise binary with scalar-tensor broadcast on either side.
Var binary_op(const char* name, Var a, Var b, double (*fwd)(double, double),
              void (*bwd)(double av, double bv, double dy, double& da, double& db)) {
    check_same_graph(a, b);
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    const auto& nb = g.node(b.id);
    const bool sa = na.value.size() == 1, sb = nb.value.size() == 1;
    if (!(na.shape == nb.shape || sa || sb)) shape_error(name, na.shape, nb.shape);

    const std::vector<int>& out_shape = sa && !sb ? nb.shape : na.shape;
    const size_t n = std::max(na.value.size(), nb.value.size());
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) {
        out[i] = fwd(na.value[sa ? 0 : i], nb.value[sb ? 0 : i]);
    }
    return g.make_node(out_shape, std::move(out), {a.id, b.id},
                       [sa, sb, bwd](Graph& gg, int id) {
                           const auto& node = gg.node(id);
                           const int ia = node.inputs[0], ib = node.inputs[1];
                           const auto& va = gg.node(ia).value;
                           const auto& vb = gg.node(ib).value;
                           const bool ga = gg.node(ia).needs_grad;
                           const bool gb = gg.node(ib).needs_grad;
                           std::vector<double>* da = ga ? &gg.adjoint(ia) : nullptr;
                           std::vector<double>* db = gb ? &gg.adjoint(ib) : nullptr;
                           const size_t n = node.value.size();
                           for (size_t i = 0; i < n; ++i) {
                               double dav = 0, dbv = 0;
                               bwd(va[sa ? 0 : i], vb[sb ? 0 : i], node.adjoint[i], dav, dbv);
                               if (da) (*da)[sa ? 0 : i] += dav;
                               if (db) (*db)[sb ? 0 : i] += dbv;
                           }
                       });
}

Var unary_op(const char* name, Var a, const std::function<double(double)>& fwd,
             const std::function<double(double x, double y)>& dydx) {
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    std::vector<double> out(na.value.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(na.value[i]);
    try {
        validate_finite(out, name);
    } catch (const std::exception&) {
        throw std::domain_error(std::string(name) + ": produced non-finite output");
    }
    return g.make_node(na.shape, std::move(out), {a.id}, [dydx](Graph& gg, int id) {
        const auto& node = gg.node(id);
        const int ia = node.inputs[0];
        if (!gg.node(ia).needs_grad) return;
        auto& da = gg.adjoint(ia);
        const auto& va = gg.node(ia).value;
        for (size_t i = 0; i < node.value.size(); ++i) {
            da[i] += node.adjoint[i] * dydx(va[i], node.value[i]);
        }
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// primitive operations
// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double dy, double& da, double& db) {
            da = dy;
            db = dy;
        });
}

Var sub(Var a, Var b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double dy, double& da, double& db) {
            da = dy;
            db = -dy;
        });
}

Var mul(Var a, Var b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double dy, double& da, double& db) {
            da = dy * y;
            db = dy * x;
        });
}

Var div(Var a, Var b) {
    const auto& vb = gof(b).node(b.id).value;
    for (const double v : vb) {
        if (v == 0.0) throw std::domain_error("div: division by zero");
    }
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double x, double y, double dy, double& da, double& db) {
            da = dy / y;
            db = -dy * x / (y * y);
        });
}

Var minimum(Var a, Var b) {
    return binary_op(
        "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
        [](double x, double y, double dy, double& da, double& db) {
            if (x <= y)
                da = dy;
            else
                db = dy;
        });
}

Var maximum(Var a, Var b) {
    return binary_op(
        "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
        [](double x, double y, double dy, double& da, double& db) {
            if (x >= y)
                da = dy;
            else
                db = dy;
        });
}

Var neg(Var a) {
    return unary_op(
        "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var relu(Var a) {
    return unary_op(
        "relu", a, [](double x) { return x > 0 ? x : 0.0; },
        [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
    return unary_op(
        "sigmoid", a,
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Var softplus(Var a) {
    return unary_op(
        "softplus", a,
        [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
        [](double x, double) {
            return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        });
}

Var exp(Var a) {
    return unary_op(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
    for (const double v : gof(a).node(a.id).value) {
        if (v <= 0.0) throw std::domain_error("log: input must be positive");
    }
    return unary_op(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
    for (const double v : gof(a).node(a.id).value) {
        if (v < 0.0) throw std::domain_error("sqrt: input must be nonnegative");
    }
    // subgradient 0 at x == 0 keeps gradients finite on exact-zero distances
    return unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double x, double y) { return x == 0.0 ? 0.0 : 0.5 / y; });
}

Var square(Var a) {
    return unary_op(
        "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(Var a) {
    return unary_op(
        "abs", a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var scale(Var a, double s) {
    return unary_op(
        "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
    return unary_op(
        "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var matmul(Var a, Var b) {
    check_same_graph(a, b);
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    const auto& nb = g.node(b.id);
    if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0]) {
        shape_error("matmul", na.shape, nb.shape);
    }
    const int n = na.shape[0], k = na.shape[1], m = nb.shape[1];
    std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
    const double* A = na.value.data();
    const double* B = nb.value.data();
    double* C = out.data();
    const int64_t flops = static_cast<int64_t>(n) * k * m;
    auto row_block = [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const double* arow = A + i * k;
            double* crow = C + i * m;
            for (int kk = 0; kk < k; ++kk) {
                const double av = arow[kk];
                if (av == 0.0) continue;
                const double* brow = B + static_cast<int64_t>(kk) * m;
                for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
            }
        }
    };
    if (flops > 1 << 20) {
        parallel_for(n, row_block);
    } else {
        row_block(0, n);
    }

    return g.make_node({n, m}, std::move(out), {a.id, b.id}, [n, k, m](Graph& gg, int id) {
        const auto& node = gg.node(id);
        const int ia = node.inputs[0], ib = node.inputs[1];
        const double* dC = node.adjoint.data();
        const int64_t flops = static_cast<int64_t>(n) * k * m;
        if (gg.node(ia).needs_grad) {
            const double* B = gg.node(ib).value.data();
            double* dA = gg.adjoint(ia).data();
            // dA[i,kk] += sum_j dC[i,j] * B[kk,j]
            auto block = [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) {
                    const double* dcrow = dC + i * m;
                    double* darow = dA + i * k;
                    for (int kk = 0; kk < k; ++kk) {
                        const double* brow = B + static_cast<int64_t>(kk) * m;
                        double s = 0;
                        for (int j = 0; j < m; ++j) s += dcrow[j] * brow[j];
                        darow[kk] += s;
                    }
                }
            };
            if (flops > 1 << 20)
                parallel_for(n, block);
            else
                block(0, n);
        }
        if (gg.node(ib).needs_grad) {
            const double* A = gg.node(ia).value.data();
            double* dB = gg.adjoint(ib).data();
            // dB[kk,j] += sum_i A[i,kk] * dC[i,j]
            auto block = [&](int64_t lo, int64_t hi) {
                for (int64_t kk = lo; kk < hi; ++kk) {
                    double* dbrow = dB + kk * m;
                    for (int i = 0; i < n; ++i) {
                        const double av = A[static_cast<int64_t>(i) * k + kk];
                        if (av == 0.0) continue;
                        const double* dcrow = dC + static_cast<int64_t>(i) * m;
                        for (int j = 0; j < m; ++j) dbrow[j] += av * dcrow[j];
                    }
                }
            };
            if (flops > 1 << 20)
                parallel_for(k, block);
            else
                block(0, k);
        }
    });
}

namespace {

void softmax_row(const double* x, double* y, int m) {
    double mx = x[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, x[j]);
    double sum = 0;
    for (int j = 0; j < m; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
    }
    for (int j = 0; j < m; ++j) y[j] /= sum;
}

}  // namespace

Var softmax(Var a, int axis) {
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    int rows = 1, cols = 0;
    if (na.shape.size() == 1) {
        if (axis != 0) throw std::invalid_argument("softmax: 1-D tensors use axis 0");
        cols = na.shape[0];
    } else if (na.shape.size() == 2) {
        if (axis != 1) throw std::invalid_argument("softmax: 2-D tensors use axis 1 (rows)");
        rows = na.shape[0];
        cols = na.shape[1];
    } else {
        throw std::invalid_argument("softmax: rank must be 1 or 2");
    }
    std::vector<double> out(na.value.size());
    for (int r = 0; r < rows; ++r) {
        softmax_row(na.value.data() + static_cast<int64_t>(r) * cols,
                    out.data() + static_cast<int64_t>(r) * cols, cols);
    }
    return g.make_node(na.shape, std::move(out), {a.id}, [rows, cols](Graph& gg, int id) {
        const auto& node = gg.node(id);
        const int ia = node.inputs[0];
        if (!gg.node(ia).needs_grad) return;
        auto& da = gg.adjoint(ia);
        for (int r = 0; r < rows; ++r) {
            const double* y = node.value.data() + static_cast<int64_t>(r) * cols;
            const double* dy = node.adjoint.data() + static_cast<int64_t>(r) * cols;
            double dot = 0;
            for (int j = 0; j < cols; ++j) dot += dy[j] * y[j];
            double* d = da.data() + static_cast<int64_t>(r) * cols;
            for (int j = 0; j < cols; ++j) d[j] += y[j] * (dy[j] - dot);
        }
    });
}

Var log_softmax_rows(Var a) {
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    if (na.shape.size() != 2) throw std::invalid_argument("log_softmax_rows: rank must be 2");
    const int rows = na.shape[0], cols = na.shape[1];
    std::vector<double> out(na.value.size());
    for (int r = 0; r < rows; ++r) {
        const double* x = na.value.data() + static_cast<int64_t>(r) * cols;
        double* y = out.data() + static_cast<int64_t>(r) * cols;
        double mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double sum = 0;
        for (int j = 0; j < cols; ++j) sum += std::exp(x[j] - mx);
        const double lse = mx + std::log(sum);
        for (int j = 0; j < cols; ++j) y[j] = x[j] - lse;
    }
    return g.make_node(na.shape, std::move(out), {a.id}, [rows, cols](Graph& gg, int id) {
        const auto& node = gg.node(id);
        const int ia = node.inputs[0];
        if (!gg.node(ia).needs_grad) return;
        auto& da = gg.adjoint(ia);
        for (int r = 0; r < rows; ++r) {
            const double* y = node.value.data() + static_cast<int64_t>(r) * cols;
            const double* dy = node.adjoint.data() + static_cast<int64_t>(r) * cols;
            double sum_dy = 0;
            for (int j = 0; j < cols; ++j) sum_dy += dy[j];
            double* d = da.data() + static_cast<int64_t>(r) * cols;
            for (int j = 0; j < cols; ++j) d[j] += dy[j] - std::exp(y[j]) * sum_dy;
        }
    });
}

Var reduce_sum(Var a) {
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    double s = 0;
    for (const double v : na.value) s += v;
    return g.make_node({1}, {s}, {a.id}, [](Graph& gg, int id) {
        const auto& node = gg.node(id);
        const int ia = node.inputs[0];
        if (!gg.node(ia).needs_grad) return;
        auto& da = gg.adjoint(ia);
        const double dy = node.adjoint[0];
        for (double& v : da) v += dy;
    });
}

Var reduce_mean(Var a) {
    Graph& g = gof(a);
    const double n = static_cast<double>(g.node(a.id).value.size());
    return scale(reduce_sum(a), 1.0 / n);
}

Var max_over_rows(Var a) {
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    if (na.shape.size() != 2) throw std::invalid_argument("max_over_rows: rank must be 2");
    const int rows = na.shape[0], cols = na.shape[1];
    std::vector<double> out(static_cast<size_t>(cols));
    std::vector<int> argmax(static_cast<size_t>(cols), 0);
    for (int j = 0; j < cols; ++j) {
        double best = na.value[static_cast<size_t>(j)];
        int bi = 0;
        for (int i = 1; i < rows; ++i) {
            const double v = na.value[static_cast<size_t>(i) * cols + j];
            if (v > best) {  // ties keep the lowest row index
                best = v;
                bi = i;
            }
        }
        out[static_cast<size_t>(j)] = best;
        argmax[static_cast<size_t>(j)] = bi;
    }
    return g.make_node({1, cols}, std::move(out), {a.id},
                       [argmax, cols](Graph& gg, int id) {
                           const auto& node = gg.node(id);
                           const int ia = node.inputs[0];
                           if (!gg.node(ia).needs_grad) return;
                           auto& da = gg.adjoint(ia);
                           for (int j = 0; j < cols; ++j) {
                               da[static_cast<size_t>(argmax[static_cast<size_t>(j)]) * cols + j] +=
                                   node.adjoint[static_cast<size_t>(j)];
                           }
                       });
}

Var concat(Var a, Var b, int axis) {
    check_same_graph(a, b);
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    const auto& nb = g.node(b.id);
    if (na.shape.size() == 1 && nb.shape.size() == 1) {
        if (axis != 0) throw std::invalid_argument("concat: 1-D tensors use axis 0");
        std::vector<double> out(na.value);
        out.insert(out.end(), nb.value.begin(), nb.value.end());
        const int n0 = na.shape[0];
        return g.make_node({na.shape[0] + nb.shape[0]}, std::move(out), {a.id, b.id},
                           [n0](Graph& gg, int id) {
                               const auto& node = gg.node(id);
                               const int ia = node.inputs[0], ib = node.inputs[1];
                               if (gg.node(ia).needs_grad) {
                                   auto& da = gg.adjoint(ia);
                                   for (size_t i = 0; i < da.size(); ++i) da[i] += node.adjoint[i];
                               }
                               if (gg.node(ib).needs_grad) {
                                   auto& db = gg.adjoint(ib);
                                   for (size_t i = 0; i < db.size(); ++i)
                                       db[i] += node.adjoint[static_cast<size_t>(n0) + i];
                               }
                           });
    }
    if (na.shape.size() != 2 || nb.shape.size() != 2) {
        throw std::invalid_argument("concat: rank must be 1 or 2");
    }
    if (axis == 0) {
        if (na.shape[1] != nb.shape[1]) shape_error("concat", na.shape, nb.shape);
        std::vector<double> out(na.value);
        out.insert(out.end(), nb.value.begin(), nb.value.end());
        return g.make_node({na.shape[0] + nb.shape[0], na.shape[1]}, std::move(out), {a.id, b.id},
                           [](Graph& gg, int id) {
                               const auto& node = gg.node(id);
                               const int ia = node.inputs[0], ib = node.inputs[1];
                               const size_t n0 = gg.node(ia).value.size();
                               if (gg.node(ia).needs_grad) {
                                   auto& da = gg.adjoint(ia);
                                   for (size_t i = 0; i < da.size(); ++i) da[i] += node.adjoint[i];
                               }
                               if (gg.node(ib).needs_grad) {
                                   auto& db = gg.adjoint(ib);
                                   for (size_t i = 0; i < db.size(); ++i)
                                       db[i] += node.adjoint[n0 + i];
                               }
                           });
    }
    if (axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
    if (na.shape[0] != nb.shape[0]) shape_error("concat", na.shape, nb.shape);
    const int rows = na.shape[0], ca = na.shape[1], cb = nb.shape[1];
    std::vector<double> out(static_cast<size_t>(rows) * (ca + cb));
    for (int r = 0; r < rows; ++r) {
        std::memcpy(out.data() + static_cast<int64_t>(r) * (ca + cb),
                    na.value.data() + static_cast<int64_t>(r) * ca, sizeof(double) * ca);
        std::memcpy(out.data() + static_cast<int64_t>(r) * (ca + cb) + ca,
                    nb.value.data() + static_cast<int64_t>(r) * cb, sizeof(double) * cb);
    }
    return g.make_node({rows, ca + cb}, std::move(out), {a.id, b.id},
                       [rows, ca, cb](Graph& gg, int id) {
                           const auto& node = gg.node(id);
                           const int ia = node.inputs[0], ib = node.inputs[1];
                           const int cw = ca + cb;
                           if (gg.node(ia).needs_grad) {
                               auto& da = gg.adjoint(ia);
                               for (int r = 0; r < rows; ++r)
                                   for (int c = 0; c < ca; ++c)
                                       da[static_cast<size_t>(r) * ca + c] +=
                                           node.adjoint[static_cast<size_t>(r) * cw + c];
                           }
                           if (gg.node(ib).needs_grad) {
                               auto& db = gg.adjoint(ib);
                               for (int r = 0; r < rows; ++r)
                                   for (int c = 0; c < cb; ++c)
                                       db[static_cast<size_t>(r) * cb + c] +=
                                           node.adjoint[static_cast<size_t>(r) * cw + ca + c];
                           }
                       });
}

Var slice_rows(Var a, int start, int len) {
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    if (na.shape.empty() || na.shape.size() > 2) {
        throw std::invalid_argument("slice_rows: rank must be 1 or 2");
    }
    const int rows = na.shape[0];
    const int cols = na.shape.size() == 2 ? na.shape[1] : 1;
    if (start < 0 || len <= 0 || start + len > rows) {
        throw std::invalid_argument("slice_rows: range out of bounds");
    }
    std::vector<double> out(na.value.begin() + static_cast<int64_t>(start) * cols,
                            na.value.begin() + static_cast<int64_t>(start + len) * cols);
    std::vector<int> shape = na.shape;
    shape[0] = len;
    return g.make_node(std::move(shape), std::move(out), {a.id},
                       [start, cols](Graph& gg, int id) {
                           const auto& node = gg.node(id);
                           const int ia = node.inputs[0];
                           if (!gg.node(ia).needs_grad) return;
                           auto& da = gg.adjoint(ia);
                           const int64_t off = static_cast<int64_t>(start) * cols;
                           for (size_t i = 0; i < node.adjoint.size(); ++i)
                               da[static_cast<size_t>(off) + i] += node.adjoint[i];
                       });
}

Var reshape(Var a, std::vector<int> shape) {
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    if (shape_numel(shape) != static_cast<int64_t>(na.value.size())) {
        throw std::invalid_argument("reshape: numel mismatch");
    }
    std::vector<double> out(na.value);
    return g.make_node(std::move(shape), std::move(out), {a.id}, [](Graph& gg, int id) {
        const auto& node = gg.node(id);
        const int ia = node.inputs[0];
        if (!gg.node(ia).needs_grad) return;
        auto& da = gg.adjoint(ia);
        for (size_t i = 0; i < da.size(); ++i) da[i] += node.adjoint[i];
    });
}

Var element(Var a, int64_t flat_index) {
    return gather_elements(a, {flat_index});
}

Var gather_rows(Var a, const std::vector<int>& rows_idx) {
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    if (na.shape.size() != 2) throw std::invalid_argument("gather_rows: rank must be 2");
    const int rows = na.shape[0], cols = na.shape[1];
    std::vector<double> out(rows_idx.size() * static_cast<size_t>(cols));
    for (size_t i = 0; i < rows_idx.size(); ++i) {
        const int r = rows_idx[i];
        if (r < 0 || r >= rows) throw std::invalid_argument("gather_rows: index out of bounds");
        std::memcpy(out.data() + i * static_cast<size_t>(cols),
                    na.value.data() + static_cast<int64_t>(r) * cols, sizeof(double) * cols);
    }
    return g.make_node({static_cast<int>(rows_idx.size()), cols}, std::move(out), {a.id},
                       [rows_idx, cols](Graph& gg, int id) {
                           const auto& node = gg.node(id);
                           const int ia = node.inputs[0];
                           if (!gg.node(ia).needs_grad) return;
                           auto& da = gg.adjoint(ia);
                           for (size_t i = 0; i < rows_idx.size(); ++i) {
                               const int64_t dst = static_cast<int64_t>(rows_idx[i]) * cols;
                               const int64_t src = static_cast<int64_t>(i) * cols;
                               for (int c = 0; c < cols; ++c)
                                   da[static_cast<size_t>(dst + c)] +=
                                       node.adjoint[static_cast<size_t>(src + c)];
                           }
                       });
}

Var gather_elements(Var a, const std::vector<int64_t>& idx) {
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    std::vector<double> out(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= static_cast<int64_t>(na.value.size())) {
            throw std::invalid_argument("gather_elements: index out of bounds");
        }
        out[i] = na.value[static_cast<size_t>(idx[i])];
    }
    return g.make_node({static_cast<int>(idx.size())}, std::move(out), {a.id},
                       [idx](Graph& gg, int id) {
                           const auto& node = gg.node(id);
                           const int ia = node.inputs[0];
                           if (!gg.node(ia).needs_grad) return;
                           auto& da = gg.adjoint(ia);
                           for (size_t i = 0; i < idx.size(); ++i)
                               da[static_cast<size_t>(idx[i])] += node.adjoint[i];
                       });
}

Var tile_rows(Var a, int n) {
    Graph& g = gof(a);
    const auto& na = g.node(a.id);
    if (na.shape.size() != 2 || na.shape[0] != 1) {
        throw std::invalid_argument("tile_rows: input must be (1,m)");
    }
    if (n <= 0) throw std::invalid_argument("tile_rows: n must be positive");
    const int cols = na.shape[1];
    std::vector<double> out(static_cast<size_t>(n) * cols);
    for (int r = 0; r < n; ++r) {
        std::memcpy(out.data() + static_cast<int64_t>(r) * cols, na.value.data(),
                    sizeof(double) * cols);
    }
    return g.make_node({n, cols}, std::move(out), {a.id}, [n, cols](Graph& gg, int id) {
        const auto& node = gg.node(id);
        const int ia = node.inputs[0];
        if (!gg.node(ia).needs_grad) return;
        auto& da = gg.adjoint(ia);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < cols; ++c)
                da[static_cast<size_t>(c)] += node.adjoint[static_cast<size_t>(r) * cols + c];
    });
}

Var conv2d(Var input, Var kernel, int pad) {
    check_same_graph(input, kernel);
    Graph& g = gof(input);
    const auto& ni = g.node(input.id);
    const auto& nk = g.node(kernel.id);
    if (ni.shape.size() != 3 || nk.shape.size() != 4 || nk.shape[1] != ni.shape[0]) {
        shape_error("conv2d", ni.shape, nk.shape);
    }
    if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
    const int cin = ni.shape[0], h = ni.shape[1], w = ni.shape[2];
    const int cout = nk.shape[0], kh = nk.shape[2], kw = nk.shape[3];
    const int oh = h + 2 * pad - kh + 1, ow = w + 2 * pad - kw + 1;
    if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: kernel larger than padded input");

    auto in_at = [&](const std::vector<double>& v, int c, int y, int x) -> double {
        if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
        return v[(static_cast<size_t>(c) * h + y) * w + x];
    };

    std::vector<double> out(static_cast<size_t>(cout) * oh * ow, 0.0);
    for (int co = 0; co < cout; ++co) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double s = 0;
                for (int ci = 0; ci < cin; ++ci) {
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            const double iv = in_at(ni.value, ci, oy - pad + ky, ox - pad + kx);
                            const double kv =
                                nk.value[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw +
                                         kx];
                            s += iv * kv;
                        }
                    }
                }
                out[(static_cast<size_t>(co) * oh + oy) * ow + ox] = s;
            }
        }
    }
    return g.make_node(
        {cout, oh, ow}, std::move(out), {input.id, kernel.id},
        [cin, h, w, cout, kh, kw, oh, ow, pad](Graph& gg, int id) {
            const auto& node = gg.node(id);
            const int ii = node.inputs[0], ik = node.inputs[1];
            const auto& iv = gg.node(ii).value;
            const auto& kv = gg.node(ik).value;
            const bool gi = gg.node(ii).needs_grad;
            const bool gk = gg.node(ik).needs_grad;
            std::vector<double>* di = gi ? &gg.adjoint(ii) : nullptr;
            std::vector<double>* dk = gk ? &gg.adjoint(ik) : nullptr;
            for (int co = 0; co < cout; ++co) {
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const double dy =
                            node.adjoint[(static_cast<size_t>(co) * oh + oy) * ow + ox];
                        if (dy == 0.0) continue;
                        for (int ci = 0; ci < cin; ++ci) {
                            for (int ky = 0; ky < kh; ++ky) {
                                const int y = oy - pad + ky;
                                if (y < 0 || y >= h) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int x = ox - pad + kx;
                                    if (x < 0 || x >= w) continue;
                                    const size_t kidx =
                                        ((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx;
                                    const size_t iidx =
                                        (static_cast<size_t>(ci) * h + y) * w + x;
                                    if (di) (*di)[iidx] += dy * kv[kidx];
                                    if (dk) (*dk)[kidx] += dy * iv[iidx];
                                }
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

void sgd_step(std::vector<Tensor*> params, const std::vector<Tensor>& grads,
              const SgdConfig& config, std::vector<Tensor>& velocity) {
    if (config.learning_rate <= 0) throw std::invalid_argument("sgd_step: learning_rate must be > 0");
    if (config.momentum < 0 || config.momentum >= 1) {
        throw std::invalid_argument("sgd_step: momentum must be in [0,1)");
    }
    if (params.size() != grads.size()) throw std::invalid_argument("sgd_step: size mismatch");
    if (velocity.empty()) {
        velocity.reserve(params.size());
        for (const Tensor* p : params) velocity.emplace_back(p->shape);
    }
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& gr = grads[i];
        Tensor& v = velocity[i];
        if (!p.same_shape(gr) || !p.same_shape(v)) {
            throw std::invalid_argument("sgd_step: parameter/gradient shape mismatch");
        }
        for (size_t j = 0; j < p.data.size(); ++j) {
            v.data[j] = config.momentum * v.data[j] + gr.data[j];
            p.data[j] -= config.learning_rate * v.data[j];
        }
    }
}

void adam_step(std::vector<Tensor*> params, const std::vector<Tensor>& grads,
               const AdamConfig& config, AdamState& state) {
    if (params.size() != grads.size()) throw std::invalid_argument("adam_step: size mismatch");
    if (state.m.empty()) {
        for (const Tensor* p : params) {
            state.m.emplace_back(p->shape);
            state.v.emplace_back(p->shape);
        }
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& gr = grads[i];
        if (!p.same_shape(gr)) throw std::invalid_argument("adam_step: shape mismatch");
        for (size_t j = 0; j < p.data.size(); ++j) {
            state.m[i].data[j] = config.beta1 * state.m[i].data[j] + (1 - config.beta1) * gr.data[j];
            state.v[i].data[j] =
                config.beta2 * state.v[i].data[j] + (1 - config.beta2) * gr.data[j] * gr.data[j];
            const double mh = state.m[i].data[j] / bc1;
            const double vh = state.v[i].data[j] / bc2;
            p.data[j] -= config.learning_rate * mh / (std::sqrt(vh) + config.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

FdReport finite_diff_check(const GraphFn& f, const std::vector<Tensor>& params, double eps,
                           double tolerance) {
    // autodiff pass
    Graph g;
    std::vector<Var> vars;
    std::vector<Tensor> tracked = params;
    for (Tensor& t : tracked) {
        t.requires_grad = true;
        vars.push_back(g.leaf(t));
    }
    Var out = f(g, vars);
    if (g.value(out).size() != 1) {
        throw std::invalid_argument("finite_diff_check: f must produce a scalar");
    }
    g.backward(out);
    std::vector<Tensor> ad_grads;
    ad_grads.reserve(vars.size());
    for (const Var v : vars) ad_grads.push_back(g.grad_tensor(v));

    auto eval = [&](const std::vector<Tensor>& p) {
        Graph ge;
        std::vector<Var> vs;
        for (const Tensor& t : p) {
            Tensor c = t;
            c.requires_grad = false;
            vs.push_back(ge.constant(c));
        }
        return ge.scalar_value(f(ge, vs));
    };

    FdReport report;
    report.pass = true;
    std::vector<Tensor> work = params;
    for (size_t pi = 0; pi < work.size(); ++pi) {
        for (size_t j = 0; j < work[pi].data.size(); ++j) {
            const double orig = work[pi].data[j];
            work[pi].data[j] = orig + eps;
            const double fp = eval(work);
            work[pi].data[j] = orig - eps;
            const double fm = eval(work);
            work[pi].data[j] = orig;
            const double fd = (fp - fm) / (2 * eps);
            const double ad = ad_grads[pi].data[j];
            const double err = std::fabs(ad - fd) / std::max({std::fabs(ad), std::fabs(fd), 1.0});
            report.checked += 1;
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = {static_cast<int>(pi), static_cast<int64_t>(j), ad, fd, err};
            }
        }
    }
    report.pass = report.max_rel_error < tolerance;
    return report;
}

}  // namespace gpr::ad
