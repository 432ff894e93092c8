#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace gpr::ad {

// Dense row-major float64 tensor. Values are validated finite at construction.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // same size as data once backward() has run

    Tensor() = default;
    explicit Tensor(std::vector<int> shape_, double fill = 0.0);
    Tensor(std::vector<int> shape_, std::vector<double> data_);

    static Tensor scalar(double v);
    static Tensor zeros(std::vector<int> shape_) { return Tensor(std::move(shape_)); }
    static Tensor full(std::vector<int> shape_, double v) { return Tensor(std::move(shape_), v); }

    int64_t numel() const;
    int rank() const { return static_cast<int>(shape.size()); }
    int rows() const;
    int cols() const;

    double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return data[static_cast<size_t>(i)]; }
    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    void zero_grad();
};

int64_t shape_numel(const std::vector<int>& shape);

class Graph;

// Lightweight handle to a node owned by a Graph.
struct Var {
    Graph* graph = nullptr;
    int id = -1;

    bool valid() const { return graph != nullptr && id >= 0; }
};

// Recording tape of primitive operations. Evaluation is eager: each op
// computes its forward value when recorded. Nodes are stored in creation
// order, which is topological by construction; backward() walks the tape in
// reverse exactly once per node.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // ---- node creation ----
    Var leaf(const Tensor& t);                    // requires_grad taken from the tensor
    Var leaf(Tensor& t);                          // additionally fills t.grad after backward()
    Var constant(const Tensor& t);                // never receives gradient
    Var constant(double v);                       // scalar constant

    // ---- inspection ----
    const std::vector<int>& shape(Var v) const;
    const std::vector<double>& value(Var v) const;
    Tensor value_tensor(Var v) const;
    double scalar_value(Var v) const;             // requires numel == 1
    // gradient of the last backward() output wrt this node (zeros if unused)
    Tensor grad_tensor(Var v) const;
    const std::vector<int>& leaves() const { return leaves_; }
    size_t node_count() const { return nodes_.size(); }

    // ---- backward ----
    // output must be scalar. Populates gradients for all requires_grad leaves;
    // also copies them into the `grad` buffer of `leaf_sinks` registered via
    // leaf(). Deterministic: identical graphs yield bit-identical gradients.
    void backward(Var output);

    struct Node {
        std::vector<int> shape;
        std::vector<double> value;
        std::vector<double> adjoint;
        std::vector<int> inputs;
        std::function<void(Graph&, int)> backward_fn;  // nullptr for leaves/constants
        bool needs_grad = false;
        bool is_leaf = false;
    };

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

    // internal: create an op node (used by the primitive implementations)
    Var make_node(std::vector<int> shape, std::vector<double> value, std::vector<int> inputs,
                  std::function<void(Graph&, int)> backward_fn);
    std::vector<double>& adjoint(int id);

private:
    std::vector<Node> nodes_;
    std::vector<int> leaves_;
    std::vector<Tensor*> sinks_;  // parallel to leaves_; nullptr when untracked
};

// ---- primitive operations ----
// Elementwise binaries accept equal shapes, or a scalar on either side.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var minimum(Var a, Var b);  // ties: gradient to the first argument
Var maximum(Var a, Var b);  // ties: gradient to the first argument

Var neg(Var a);
Var relu(Var a);            // subgradient 0 at the kink
Var sigmoid(Var a);
Var softplus(Var a);        // log(1 + e^x), numerically stable
Var exp(Var a);
Var log(Var a);             // error on non-positive input
Var sqrt(Var a);            // error on negative input
Var square(Var a);
Var abs(Var a);             // subgradient 0 at the kink
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

Var matmul(Var a, Var b);            // (n,k) x (k,m) -> (n,m)
Var softmax(Var a, int axis);        // 1-D (axis 0) or rows of 2-D (axis 1)
Var log_softmax_rows(Var a);         // stable row-wise log softmax of 2-D
Var reduce_sum(Var a);               // -> scalar
Var reduce_mean(Var a);              // -> scalar
Var max_over_rows(Var a);            // (n,m) -> (1,m); ties to the lowest row
Var concat(Var a, Var b, int axis);  // 2-D along axis 0/1, or 1-D along 0
Var slice_rows(Var a, int start, int len);   // contiguous rows of 2-D (or 1-D span)
Var reshape(Var a, std::vector<int> shape);  // numel-preserving view copy
Var element(Var a, int64_t flat_index);      // scalar pick
Var gather_rows(Var a, const std::vector<int>& rows);      // (n,m) -> (k,m)
Var gather_elements(Var a, const std::vector<int64_t>& idx);  // -> 1-D

Var tile_rows(Var a, int n);  // (1,m) -> (n,m); backward sums over rows

// 2-D cross-correlation: input (Cin,H,W), kernel (Cout,Cin,kh,kw), zero
// padding `pad`, stride 1 -> (Cout, H+2p-kh+1, W+2p-kw+1).
Var conv2d(Var input, Var kernel, int pad);

// ---- optimizers ----
struct SgdConfig {
    double learning_rate = 0.01;  // > 0
    double momentum = 0.0;        // in [0,1)
    uint64_t seed = 0;
};

// p <- p - lr * v,  v <- momentum * v + g. `velocity` is created on first use.
void sgd_step(std::vector<Tensor*> params, const std::vector<Tensor>& grads,
              const SgdConfig& config, std::vector<Tensor>& velocity);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Tensor> m, v;
    int64_t step = 0;
};

void adam_step(std::vector<Tensor*> params, const std::vector<Tensor>& grads,
               const AdamConfig& config, AdamState& state);

// ---- finite-difference verification ----
// Builds the scalar output from leaf Vars created for `params`.
using GraphFn = std::function<Var(Graph&, const std::vector<Var>&)>;

struct FdEntry {
    int param = 0;
    int64_t index = 0;
    double autodiff = 0.0;
    double central_diff = 0.0;
    double rel_error = 0.0;
};

struct FdReport {
    bool pass = false;
    double max_rel_error = 0.0;
    int64_t checked = 0;
    FdEntry worst;
};

// rel error = |ad - fd| / max(|ad|, |fd|, 1): relative for O(1) gradients,
// absolute floor for vanishing ones where central differences are noise-bound.
FdReport finite_diff_check(const GraphFn& f, const std::vector<Tensor>& params, double eps,
                           double tolerance);

}  // namespace gpr::ad
