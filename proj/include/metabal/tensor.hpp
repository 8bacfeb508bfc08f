#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace metabal::ad {

using Shape = std::vector<int64_t>;

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class Graph;

// A dense 64-bit float tensor. Bound tensors carry the identity of a node in
// a Graph; unbound tensors (graph == nullptr) are plain constants.
struct Tensor {
    Shape shape;
    std::shared_ptr<const std::vector<double>> values;
    Graph* graph = nullptr;
    int64_t node = -1;

    int64_t numel() const { return numel_of(shape); }
    bool bound() const { return graph != nullptr && node >= 0; }
    double at(int64_t flat) const { return (*values)[static_cast<size_t>(flat)]; }
    double scalar() const;
    const std::vector<double>& data() const { return *values; }
};

Tensor make_tensor(Shape shape, std::vector<double> values);
Tensor make_scalar(double v);
Tensor make_filled(Shape shape, double v);

enum class Op : uint8_t {
    Constant,
    Add,
    Sub,
    Mul,
    ScalarMul,
    MatMul,
    Transpose,
    Relu,
    Step,
    Exp,
    Log,
    Reciprocal,
    Softmax,
    GatherRows,
    ScatterRows,
    Concat,
    Slice,
    Reshape,
    Broadcast,
    ReduceSum,
    ReduceMean,
    ReduceVar,
};

const char* op_name(Op op);

// Per-record metadata. `axis` serves softmax/reductions/concat; `scalar` is
// the factor of ScalarMul; `ints` holds gather/scatter indices, slice
// bounds, or target shapes depending on the op.
struct OpMeta {
    int axis = -1;
    double scalar = 0.0;
    std::vector<int64_t> ints;
};

// Computation graph: an append-only list of operation records in topological
// (insertion) order. Forward values are computed eagerly. Gradients are
// emitted as further graph nodes, so a gradient can itself be differentiated;
// this single mechanism provides the second-order derivatives the outer
// objective needs through inner-loop updates.
class Graph {
  public:
    struct Record {
        Op op;
        std::vector<int64_t> inputs;
        Shape shape;
        std::shared_ptr<const std::vector<double>> values;
        OpMeta meta;
    };

    Tensor constant(Shape shape, std::vector<double> values);
    Tensor constant_filled(Shape shape, double v);
    Tensor scalar_const(double v);
    // Binds an unbound tensor's current values as a leaf of this graph.
    Tensor leaf(const Tensor& t);

    Tensor apply(Op op, const std::vector<Tensor>& inputs, OpMeta meta = {});

    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor smul(const Tensor& a, double c);
    Tensor neg(const Tensor& a) { return smul(a, -1.0); }
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor transpose(const Tensor& a);
    Tensor relu(const Tensor& a);
    Tensor step(const Tensor& a);
    Tensor exp(const Tensor& a);
    Tensor log(const Tensor& a);
    Tensor reciprocal(const Tensor& a);
    Tensor softmax(const Tensor& a, int axis);
    Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& indices);
    Tensor scatter_rows(const Tensor& a, int64_t num_rows, const std::vector<int64_t>& indices);
    Tensor concat(const std::vector<Tensor>& parts, int axis);
    Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
    Tensor reshape(const Tensor& a, Shape shape);
    Tensor broadcast_to(const Tensor& a, Shape shape);
    Tensor reduce_sum(const Tensor& a, std::optional<int> axis = std::nullopt);
    Tensor reduce_mean(const Tensor& a, std::optional<int> axis = std::nullopt);
    Tensor reduce_var(const Tensor& a, std::optional<int> axis = std::nullopt);

    // d(output)/d(wrt_i) for a scalar output. With as_graph the returned
    // gradients are nodes of this graph and can be differentiated again;
    // without it they are returned as plain constants and every node emitted
    // during backpropagation is discarded from the graph.
    std::vector<Tensor> gradients(const Tensor& output, const std::vector<Tensor>& wrt,
                                  bool as_graph);

    size_t size() const { return records_.size(); }
    const Record& record(int64_t id) const { return records_[static_cast<size_t>(id)]; }

    // Recomputes every non-constant record from the leaves and checks the
    // stored values are reproduced bit-exactly.
    bool replay_bitexact() const;

  private:
    Tensor handle(int64_t id);
    void check_input(const Tensor& t, Op op) const;
    std::vector<int64_t> intern_inputs(const std::vector<Tensor>& inputs);

    std::vector<Record> records_;
};

// Max over all parameter coordinates of
// |analytic - central difference| / max(1, |analytic|), where `fn` builds a
// scalar from graph-bound copies of `params`. The central-difference side
// re-evaluates `fn` on perturbed plain values and never touches the
// gradient path it is checking.
double finite_diff_check(const std::function<Tensor(Graph&, const std::vector<Tensor>&)>& fn,
                         const std::vector<Tensor>& params, double step);

}  // namespace metabal::ad
