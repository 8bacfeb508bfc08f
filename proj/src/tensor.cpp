#include "metabal/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_map>

namespace metabal::ad {

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

double Tensor::scalar() const {
    if (numel() != 1) {
        throw ShapeError("scalar() on tensor of shape " + shape_str(shape));
    }
    return (*values)[0];
}

Tensor make_tensor(Shape shape, std::vector<double> values) {
    if (numel_of(shape) != static_cast<int64_t>(values.size())) {
        throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.shape = std::move(shape);
    t.values = std::make_shared<const std::vector<double>>(std::move(values));
    return t;
}

Tensor make_scalar(double v) { return make_tensor({}, {v}); }

Tensor make_filled(Shape shape, double v) {
    auto n = numel_of(shape);
    return make_tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), v));
}

const char* op_name(Op op) {
    switch (op) {
        case Op::Constant: return "constant";
        case Op::Add: return "add";
        case Op::Sub: return "subtract";
        case Op::Mul: return "multiply";
        case Op::ScalarMul: return "scalar-multiply";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Relu: return "relu";
        case Op::Step: return "step";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Reciprocal: return "reciprocal";
        case Op::Softmax: return "softmax";
        case Op::GatherRows: return "gather-rows";
        case Op::ScatterRows: return "scatter-rows";
        case Op::Concat: return "concatenate";
        case Op::Slice: return "slice";
        case Op::Reshape: return "reshape";
        case Op::Broadcast: return "broadcast";
        case Op::ReduceSum: return "reduce-sum";
        case Op::ReduceMean: return "reduce-mean";
        case Op::ReduceVar: return "reduce-population-variance";
    }
    return "?";
}

namespace {

[[noreturn]] void shape_fail(Op op, const std::string& detail) {
    throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

void require_same_shape(Op op, const Shape& a, const Shape& b) {
    if (a != b) shape_fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_axis(Op op, const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        shape_fail(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
}

// outer x axis x inner decomposition used by axis-wise kernels.
struct AxisSplit {
    int64_t outer, mid, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
    AxisSplit sp{1, s[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) sp.inner *= s[i];
    return sp;
}

Shape drop_axis(const Shape& s, int axis) {
    Shape out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (static_cast<int>(i) != axis) out.push_back(s[i]);
    }
    return out;
}

}  // namespace

Tensor Graph::handle(int64_t id) {
    const Record& r = records_[static_cast<size_t>(id)];
    Tensor t;
    t.shape = r.shape;
    t.values = r.values;
    t.graph = this;
    t.node = id;
    return t;
}

Tensor Graph::constant(Shape shape, std::vector<double> values) {
    Tensor raw = make_tensor(std::move(shape), std::move(values));
    return leaf(raw);
}

Tensor Graph::constant_filled(Shape shape, double v) {
    return leaf(make_filled(std::move(shape), v));
}

Tensor Graph::scalar_const(double v) { return leaf(make_scalar(v)); }

Tensor Graph::leaf(const Tensor& t) {
    Record rec;
    rec.op = Op::Constant;
    rec.shape = t.shape;
    rec.values = t.values;
    records_.push_back(std::move(rec));
    return handle(static_cast<int64_t>(records_.size()) - 1);
}

std::vector<int64_t> Graph::intern_inputs(const std::vector<Tensor>& inputs) {
    std::vector<int64_t> ids;
    ids.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        if (t.bound()) {
            if (t.graph != this) {
                throw std::invalid_argument("tensor belongs to a different graph");
            }
            ids.push_back(t.node);
        } else {
            ids.push_back(leaf(t).node);
        }
    }
    return ids;
}

namespace {

// Forward kernels. Each returns the output values and fills out_shape, or
// throws a structured error naming the op and offending shapes.
std::vector<double> eval_op(Op op, const std::vector<const Graph::Record*>& in, const OpMeta& meta,
                            Shape& out_shape) {
    auto v = [&](size_t i) -> const std::vector<double>& { return *in[i]->values; };
    auto sh = [&](size_t i) -> const Shape& { return in[i]->shape; };

    switch (op) {
        case Op::Constant:
            throw std::logic_error("constant records are not evaluated");

        case Op::Add:
        case Op::Sub:
        case Op::Mul: {
            require_same_shape(op, sh(0), sh(1));
            out_shape = sh(0);
            const auto& a = v(0);
            const auto& b = v(1);
            std::vector<double> out(a.size());
            if (op == Op::Add) {
                for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
            } else if (op == Op::Sub) {
                for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
            } else {
                for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
            }
            return out;
        }

        case Op::ScalarMul: {
            out_shape = sh(0);
            const auto& a = v(0);
            std::vector<double> out(a.size());
            for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * meta.scalar;
            return out;
        }

        case Op::MatMul: {
            if (sh(0).size() != 2 || sh(1).size() != 2) {
                shape_fail(op, "expects 2-D operands, got " + shape_str(sh(0)) + " and " +
                                   shape_str(sh(1)));
            }
            int64_t m = sh(0)[0], k = sh(0)[1], k2 = sh(1)[0], n = sh(1)[1];
            if (k != k2) {
                shape_fail(op, "inner dimensions differ: " + shape_str(sh(0)) + " x " +
                                   shape_str(sh(1)));
            }
            out_shape = {m, n};
            const auto& a = v(0);
            const auto& b = v(1);
            std::vector<double> out(static_cast<size_t>(m * n), 0.0);
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t kk = 0; kk < k; ++kk) {
                    double aik = a[static_cast<size_t>(i * k + kk)];
                    const double* brow = b.data() + kk * n;
                    double* orow = out.data() + i * n;
                    for (int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
                }
            }
            return out;
        }

        case Op::Transpose: {
            if (sh(0).size() != 2) shape_fail(op, "expects a 2-D operand, got " + shape_str(sh(0)));
            int64_t m = sh(0)[0], n = sh(0)[1];
            out_shape = {n, m};
            const auto& a = v(0);
            std::vector<double> out(a.size());
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j)
                    out[static_cast<size_t>(j * m + i)] = a[static_cast<size_t>(i * n + j)];
            return out;
        }

        case Op::Relu:
        case Op::Step: {
            out_shape = sh(0);
            const auto& a = v(0);
            std::vector<double> out(a.size());
            if (op == Op::Relu) {
                for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
            } else {
                for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] > 0.0 ? 1.0 : 0.0;
            }
            return out;
        }

        case Op::Exp: {
            out_shape = sh(0);
            const auto& a = v(0);
            std::vector<double> out(a.size());
            for (size_t i = 0; i < a.size(); ++i) out[i] = std::exp(a[i]);
            return out;
        }

        case Op::Log: {
            out_shape = sh(0);
            const auto& a = v(0);
            std::vector<double> out(a.size());
            for (size_t i = 0; i < a.size(); ++i) {
                if (!(a[i] > 0.0)) {
                    throw DomainError("log of non-positive value " + std::to_string(a[i]));
                }
                out[i] = std::log(a[i]);
            }
            return out;
        }

        case Op::Reciprocal: {
            out_shape = sh(0);
            const auto& a = v(0);
            std::vector<double> out(a.size());
            for (size_t i = 0; i < a.size(); ++i) {
                if (a[i] == 0.0) throw DomainError("reciprocal of zero");
                out[i] = 1.0 / a[i];
            }
            return out;
        }

        case Op::Softmax: {
            require_axis(op, sh(0), meta.axis);
            out_shape = sh(0);
            auto sp = split_axis(sh(0), meta.axis);
            const auto& a = v(0);
            std::vector<double> out(a.size());
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t i = 0; i < sp.inner; ++i) {
                    int64_t base = o * sp.mid * sp.inner + i;
                    double mx = a[static_cast<size_t>(base)];
                    for (int64_t m = 1; m < sp.mid; ++m) {
                        mx = std::max(mx, a[static_cast<size_t>(base + m * sp.inner)]);
                    }
                    double sum = 0.0;
                    for (int64_t m = 0; m < sp.mid; ++m) {
                        double e = std::exp(a[static_cast<size_t>(base + m * sp.inner)] - mx);
                        out[static_cast<size_t>(base + m * sp.inner)] = e;
                        sum += e;
                    }
                    for (int64_t m = 0; m < sp.mid; ++m) {
                        out[static_cast<size_t>(base + m * sp.inner)] /= sum;
                    }
                }
            }
            return out;
        }

        case Op::GatherRows: {
            if (sh(0).empty()) shape_fail(op, "expects rank >= 1, got " + shape_str(sh(0)));
            int64_t rows = sh(0)[0];
            int64_t row_size = numel_of(sh(0)) / std::max<int64_t>(rows, 1);
            out_shape = sh(0);
            out_shape[0] = static_cast<int64_t>(meta.ints.size());
            const auto& a = v(0);
            std::vector<double> out(static_cast<size_t>(out_shape[0] * row_size));
            for (size_t r = 0; r < meta.ints.size(); ++r) {
                int64_t src = meta.ints[r];
                if (src < 0 || src >= rows) {
                    shape_fail(op, "row index " + std::to_string(src) + " out of range [0," +
                                       std::to_string(rows) + ")");
                }
                std::copy_n(a.data() + src * row_size, row_size,
                            out.data() + static_cast<int64_t>(r) * row_size);
            }
            return out;
        }

        case Op::ScatterRows: {
            if (sh(0).empty()) shape_fail(op, "expects rank >= 1, got " + shape_str(sh(0)));
            if (meta.ints.empty()) shape_fail(op, "missing target row count");
            int64_t num_rows = meta.ints[0];
            size_t n_idx = meta.ints.size() - 1;
            if (static_cast<int64_t>(n_idx) != sh(0)[0]) {
                shape_fail(op, "index count " + std::to_string(n_idx) + " does not match rows of " +
                                   shape_str(sh(0)));
            }
            int64_t row_size = numel_of(sh(0)) / std::max<int64_t>(sh(0)[0], 1);
            out_shape = sh(0);
            out_shape[0] = num_rows;
            const auto& a = v(0);
            std::vector<double> out(static_cast<size_t>(num_rows * row_size), 0.0);
            for (size_t r = 0; r < n_idx; ++r) {
                int64_t dst = meta.ints[r + 1];
                if (dst < 0 || dst >= num_rows) {
                    shape_fail(op, "row index " + std::to_string(dst) + " out of range [0," +
                                       std::to_string(num_rows) + ")");
                }
                const double* src = a.data() + static_cast<int64_t>(r) * row_size;
                double* d = out.data() + dst * row_size;
                for (int64_t j = 0; j < row_size; ++j) d[j] += src[j];
            }
            return out;
        }

        case Op::Concat: {
            require_axis(op, sh(0), meta.axis);
            size_t rank = sh(0).size();
            int64_t axis_total = 0;
            for (size_t p = 0; p < in.size(); ++p) {
                if (sh(p).size() != rank) {
                    shape_fail(op, "rank mismatch " + shape_str(sh(0)) + " vs " + shape_str(sh(p)));
                }
                for (size_t d = 0; d < rank; ++d) {
                    if (static_cast<int>(d) != meta.axis && sh(p)[d] != sh(0)[d]) {
                        shape_fail(op, "shape mismatch off the concat axis: " + shape_str(sh(0)) +
                                           " vs " + shape_str(sh(p)));
                    }
                }
                axis_total += sh(p)[static_cast<size_t>(meta.axis)];
            }
            out_shape = sh(0);
            out_shape[static_cast<size_t>(meta.axis)] = axis_total;
            auto osp = split_axis(out_shape, meta.axis);
            std::vector<double> out(static_cast<size_t>(numel_of(out_shape)));
            int64_t offset = 0;
            for (size_t p = 0; p < in.size(); ++p) {
                auto isp = split_axis(sh(p), meta.axis);
                const auto& a = v(p);
                for (int64_t o = 0; o < isp.outer; ++o) {
                    std::copy_n(a.data() + o * isp.mid * isp.inner, isp.mid * isp.inner,
                                out.data() + (o * osp.mid + offset) * osp.inner);
                }
                offset += isp.mid;
            }
            return out;
        }

        case Op::Slice: {
            int axis = static_cast<int>(meta.ints[0]);
            int64_t start = meta.ints[1], len = meta.ints[2];
            require_axis(op, sh(0), axis);
            int64_t dim = sh(0)[static_cast<size_t>(axis)];
            if (start < 0 || len < 0 || start + len > dim) {
                shape_fail(op, "range [" + std::to_string(start) + "," +
                                   std::to_string(start + len) + ") out of bounds for axis size " +
                                   std::to_string(dim));
            }
            out_shape = sh(0);
            out_shape[static_cast<size_t>(axis)] = len;
            auto isp = split_axis(sh(0), axis);
            const auto& a = v(0);
            std::vector<double> out(static_cast<size_t>(numel_of(out_shape)));
            for (int64_t o = 0; o < isp.outer; ++o) {
                std::copy_n(a.data() + (o * isp.mid + start) * isp.inner, len * isp.inner,
                            out.data() + o * len * isp.inner);
            }
            return out;
        }

        case Op::Reshape: {
            Shape target(meta.ints.begin(), meta.ints.end());
            if (numel_of(target) != numel_of(sh(0))) {
                shape_fail(op, "cannot reshape " + shape_str(sh(0)) + " to " + shape_str(target));
            }
            out_shape = target;
            return v(0);
        }

        case Op::Broadcast: {
            Shape target(meta.ints.begin(), meta.ints.end());
            const Shape& src = sh(0);
            if (src.size() > target.size()) {
                shape_fail(op, "cannot broadcast " + shape_str(src) + " to " + shape_str(target));
            }
            size_t off = target.size() - src.size();
            for (size_t d = 0; d < src.size(); ++d) {
                if (src[d] != target[off + d] && src[d] != 1) {
                    shape_fail(op,
                               "cannot broadcast " + shape_str(src) + " to " + shape_str(target));
                }
            }
            out_shape = target;
            // Strides into the source per target dim (0 where expanded).
            std::vector<int64_t> stride(target.size(), 0);
            int64_t s = 1;
            for (size_t d = src.size(); d-- > 0;) {
                stride[off + d] = (src[d] == 1) ? 0 : s;
                s *= src[d];
            }
            const auto& a = v(0);
            int64_t n = numel_of(target);
            std::vector<double> out(static_cast<size_t>(n));
            std::vector<int64_t> idx(target.size(), 0);
            for (int64_t flat = 0; flat < n; ++flat) {
                int64_t src_flat = 0;
                for (size_t d = 0; d < target.size(); ++d) src_flat += idx[d] * stride[d];
                out[static_cast<size_t>(flat)] = a[static_cast<size_t>(src_flat)];
                for (size_t d = target.size(); d-- > 0;) {
                    if (++idx[d] < target[d]) break;
                    idx[d] = 0;
                }
            }
            return out;
        }

        case Op::ReduceSum:
        case Op::ReduceMean:
        case Op::ReduceVar: {
            const auto& a = v(0);
            int64_t outer = 1, mid = 1, inner = 1;
            if (meta.axis < 0) {
                mid = numel_of(sh(0));
                out_shape = {};
            } else {
                require_axis(op, sh(0), meta.axis);
                auto sp = split_axis(sh(0), meta.axis);
                outer = sp.outer;
                mid = sp.mid;
                inner = sp.inner;
                out_shape = drop_axis(sh(0), meta.axis);
            }
            if (mid == 0) shape_fail(op, "reduction over an empty axis");
            std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
            // Accumulation is left-to-right over storage order for bit-exact
            // replay.
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t m = 0; m < mid; ++m) {
                    for (int64_t i = 0; i < inner; ++i) {
                        out[static_cast<size_t>(o * inner + i)] +=
                            a[static_cast<size_t>((o * mid + m) * inner + i)];
                    }
                }
            }
            if (op == Op::ReduceSum) return out;
            for (auto& x : out) x /= static_cast<double>(mid);
            if (op == Op::ReduceMean) return out;
            // Population variance on values shifted by each slice's first
            // element: shift-invariant, and exactly 0 for slices of
            // identical values (including single-element slices).
            std::vector<double> shifted_mean(out.size(), 0.0);
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t m = 0; m < mid; ++m) {
                    for (int64_t i = 0; i < inner; ++i) {
                        shifted_mean[static_cast<size_t>(o * inner + i)] +=
                            a[static_cast<size_t>((o * mid + m) * inner + i)] -
                            a[static_cast<size_t>(o * mid * inner + i)];
                    }
                }
            }
            for (auto& x : shifted_mean) x /= static_cast<double>(mid);
            std::vector<double> var(out.size(), 0.0);
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t m = 0; m < mid; ++m) {
                    for (int64_t i = 0; i < inner; ++i) {
                        double d = (a[static_cast<size_t>((o * mid + m) * inner + i)] -
                                    a[static_cast<size_t>(o * mid * inner + i)]) -
                                   shifted_mean[static_cast<size_t>(o * inner + i)];
                        var[static_cast<size_t>(o * inner + i)] += d * d;
                    }
                }
            }
            for (auto& x : var) x /= static_cast<double>(mid);
            return var;
        }
    }
    throw std::logic_error("unhandled op");
}

}  // namespace

Tensor Graph::apply(Op op, const std::vector<Tensor>& inputs, OpMeta meta) {
    std::vector<int64_t> ids = intern_inputs(inputs);
    std::vector<const Record*> recs;
    recs.reserve(ids.size());
    for (int64_t id : ids) recs.push_back(&records_[static_cast<size_t>(id)]);

    Shape out_shape;
    std::vector<double> out = eval_op(op, recs, meta, out_shape);
    for (double x : out) {
        if (!std::isfinite(x)) {
            throw DomainError(std::string(op_name(op)) + " produced a non-finite value");
        }
    }

    Record rec;
    rec.op = op;
    rec.inputs = std::move(ids);
    rec.shape = std::move(out_shape);
    rec.values = std::make_shared<const std::vector<double>>(std::move(out));
    rec.meta = std::move(meta);
    records_.push_back(std::move(rec));
    return handle(static_cast<int64_t>(records_.size()) - 1);
}

Tensor Graph::add(const Tensor& a, const Tensor& b) { return apply(Op::Add, {a, b}); }
Tensor Graph::sub(const Tensor& a, const Tensor& b) { return apply(Op::Sub, {a, b}); }
Tensor Graph::mul(const Tensor& a, const Tensor& b) { return apply(Op::Mul, {a, b}); }

Tensor Graph::smul(const Tensor& a, double c) {
    OpMeta m;
    m.scalar = c;
    return apply(Op::ScalarMul, {a}, std::move(m));
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) { return apply(Op::MatMul, {a, b}); }
Tensor Graph::transpose(const Tensor& a) { return apply(Op::Transpose, {a}); }
Tensor Graph::relu(const Tensor& a) { return apply(Op::Relu, {a}); }
Tensor Graph::step(const Tensor& a) { return apply(Op::Step, {a}); }
Tensor Graph::exp(const Tensor& a) { return apply(Op::Exp, {a}); }
Tensor Graph::log(const Tensor& a) { return apply(Op::Log, {a}); }
Tensor Graph::reciprocal(const Tensor& a) { return apply(Op::Reciprocal, {a}); }

Tensor Graph::softmax(const Tensor& a, int axis) {
    OpMeta m;
    m.axis = axis;
    return apply(Op::Softmax, {a}, std::move(m));
}

Tensor Graph::gather_rows(const Tensor& a, const std::vector<int64_t>& indices) {
    OpMeta m;
    m.ints = indices;
    return apply(Op::GatherRows, {a}, std::move(m));
}

Tensor Graph::scatter_rows(const Tensor& a, int64_t num_rows, const std::vector<int64_t>& indices) {
    OpMeta m;
    m.ints.push_back(num_rows);
    m.ints.insert(m.ints.end(), indices.begin(), indices.end());
    return apply(Op::ScatterRows, {a}, std::move(m));
}

Tensor Graph::concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concatenate: no inputs");
    OpMeta m;
    m.axis = axis;
    return apply(Op::Concat, parts, std::move(m));
}

Tensor Graph::slice(const Tensor& a, int axis, int64_t start, int64_t len) {
    OpMeta m;
    m.ints = {axis, start, len};
    return apply(Op::Slice, {a}, std::move(m));
}

Tensor Graph::reshape(const Tensor& a, Shape shape) {
    OpMeta m;
    m.ints.assign(shape.begin(), shape.end());
    return apply(Op::Reshape, {a}, std::move(m));
}

Tensor Graph::broadcast_to(const Tensor& a, Shape shape) {
    OpMeta m;
    m.ints.assign(shape.begin(), shape.end());
    return apply(Op::Broadcast, {a}, std::move(m));
}

Tensor Graph::reduce_sum(const Tensor& a, std::optional<int> axis) {
    OpMeta m;
    m.axis = axis.value_or(-1);
    return apply(Op::ReduceSum, {a}, std::move(m));
}

Tensor Graph::reduce_mean(const Tensor& a, std::optional<int> axis) {
    OpMeta m;
    m.axis = axis.value_or(-1);
    return apply(Op::ReduceMean, {a}, std::move(m));
}

Tensor Graph::reduce_var(const Tensor& a, std::optional<int> axis) {
    OpMeta m;
    m.axis = axis.value_or(-1);
    return apply(Op::ReduceVar, {a}, std::move(m));
}

namespace {

Shape keepdims_shape(const Shape& s, int axis) {
    Shape out = s;
    out[static_cast<size_t>(axis)] = 1;
    return out;
}

}  // namespace

std::vector<Tensor> Graph::gradients(const Tensor& output, const std::vector<Tensor>& wrt,
                                     bool as_graph) {
    if (!output.bound() || output.graph != this) {
        throw std::invalid_argument("grad: output is not a node of this graph");
    }
    if (output.numel() != 1) {
        throw ShapeError("grad: output must be scalar, got " + shape_str(output.shape));
    }
    for (const Tensor& t : wrt) {
        if (!t.bound() || t.graph != this) {
            throw std::invalid_argument("grad: wrt tensor is not a node of this graph");
        }
    }

    size_t pre_size = records_.size();
    std::unordered_map<int64_t, Tensor> adj;
    adj.emplace(output.node, constant_filled(output.shape, 1.0));

    auto accumulate = [&](int64_t id, const Tensor& contrib) {
        auto it = adj.find(id);
        if (it == adj.end()) {
            adj.emplace(id, contrib);
        } else {
            it->second = add(it->second, contrib);
        }
    };

    for (int64_t id = output.node; id >= 0; --id) {
        auto it = adj.find(id);
        if (it == adj.end()) continue;
        // Copy: `records_` may reallocate while emitting adjoint nodes.
        const Record rec = records_[static_cast<size_t>(id)];
        if (rec.op == Op::Constant) continue;
        Tensor g = it->second;
        auto in = [&](size_t i) { return handle(rec.inputs[i]); };

        switch (rec.op) {
            case Op::Constant:
                break;
            case Op::Add:
                accumulate(rec.inputs[0], g);
                accumulate(rec.inputs[1], g);
                break;
            case Op::Sub:
                accumulate(rec.inputs[0], g);
                accumulate(rec.inputs[1], neg(g));
                break;
            case Op::Mul:
                accumulate(rec.inputs[0], mul(g, in(1)));
                accumulate(rec.inputs[1], mul(g, in(0)));
                break;
            case Op::ScalarMul:
                accumulate(rec.inputs[0], smul(g, rec.meta.scalar));
                break;
            case Op::MatMul:
                accumulate(rec.inputs[0], matmul(g, transpose(in(1))));
                accumulate(rec.inputs[1], matmul(transpose(in(0)), g));
                break;
            case Op::Transpose:
                accumulate(rec.inputs[0], transpose(g));
                break;
            case Op::Relu:
                accumulate(rec.inputs[0], mul(g, step(in(0))));
                break;
            case Op::Step:
                break;  // zero derivative almost everywhere
            case Op::Exp:
                accumulate(rec.inputs[0], mul(g, handle(id)));
                break;
            case Op::Log:
                accumulate(rec.inputs[0], mul(g, reciprocal(in(0))));
                break;
            case Op::Reciprocal: {
                Tensor out = handle(id);
                accumulate(rec.inputs[0], neg(mul(g, mul(out, out))));
                break;
            }
            case Op::Softmax: {
                Tensor s = handle(id);
                Tensor dot = reduce_sum(mul(g, s), rec.meta.axis);
                Tensor dotb = broadcast_to(reshape(dot, keepdims_shape(rec.shape, rec.meta.axis)),
                                           rec.shape);
                accumulate(rec.inputs[0], mul(s, sub(g, dotb)));
                break;
            }
            case Op::GatherRows: {
                const Shape src = records_[static_cast<size_t>(rec.inputs[0])].shape;
                accumulate(rec.inputs[0], scatter_rows(g, src[0], rec.meta.ints));
                break;
            }
            case Op::ScatterRows: {
                std::vector<int64_t> idx(rec.meta.ints.begin() + 1, rec.meta.ints.end());
                accumulate(rec.inputs[0], gather_rows(g, idx));
                break;
            }
            case Op::Concat: {
                int64_t offset = 0;
                for (int64_t input : rec.inputs) {
                    int64_t len = records_[static_cast<size_t>(input)]
                                      .shape[static_cast<size_t>(rec.meta.axis)];
                    accumulate(input, slice(g, rec.meta.axis, offset, len));
                    offset += len;
                }
                break;
            }
            case Op::Slice: {
                const Shape src = records_[static_cast<size_t>(rec.inputs[0])].shape;
                int axis = static_cast<int>(rec.meta.ints[0]);
                int64_t start = rec.meta.ints[1], len = rec.meta.ints[2];
                int64_t dim = src[static_cast<size_t>(axis)];
                std::vector<Tensor> parts;
                if (start > 0) {
                    Shape s = src;
                    s[static_cast<size_t>(axis)] = start;
                    parts.push_back(constant_filled(s, 0.0));
                }
                parts.push_back(g);
                if (start + len < dim) {
                    Shape s = src;
                    s[static_cast<size_t>(axis)] = dim - start - len;
                    parts.push_back(constant_filled(s, 0.0));
                }
                accumulate(rec.inputs[0], parts.size() == 1 ? g : concat(parts, axis));
                break;
            }
            case Op::Reshape: {
                const Shape src = records_[static_cast<size_t>(rec.inputs[0])].shape;
                accumulate(rec.inputs[0], reshape(g, src));
                break;
            }
            case Op::Broadcast: {
                const Shape src = records_[static_cast<size_t>(rec.inputs[0])].shape;
                Tensor cur = g;
                size_t extra = rec.shape.size() - src.size();
                for (size_t d = 0; d < extra; ++d) cur = reduce_sum(cur, 0);
                for (size_t d = 0; d < src.size(); ++d) {
                    if (src[d] == 1 && cur.shape[d] != 1) {
                        Shape kd = cur.shape;
                        kd[d] = 1;
                        cur = reshape(reduce_sum(cur, static_cast<int>(d)), kd);
                    }
                }
                accumulate(rec.inputs[0], reshape(cur, src));
                break;
            }
            case Op::ReduceSum:
            case Op::ReduceMean: {
                const Shape src = records_[static_cast<size_t>(rec.inputs[0])].shape;
                Tensor gb;
                int64_t n;
                if (rec.meta.axis < 0) {
                    n = numel_of(src);
                    gb = broadcast_to(reshape(g, {}), src);
                } else {
                    n = src[static_cast<size_t>(rec.meta.axis)];
                    gb = broadcast_to(reshape(g, keepdims_shape(src, rec.meta.axis)), src);
                }
                accumulate(rec.inputs[0],
                           rec.op == Op::ReduceSum ? gb : smul(gb, 1.0 / static_cast<double>(n)));
                break;
            }
            case Op::ReduceVar: {
                // d var / d a_j = 2 (a_j - mean) / n within the reduced slice.
                const Shape src = records_[static_cast<size_t>(rec.inputs[0])].shape;
                Tensor a = in(0);
                Tensor gb, mb;
                int64_t n;
                if (rec.meta.axis < 0) {
                    n = numel_of(src);
                    gb = broadcast_to(reshape(g, {}), src);
                    mb = broadcast_to(reduce_mean(a), src);
                } else {
                    n = src[static_cast<size_t>(rec.meta.axis)];
                    Shape kd = keepdims_shape(src, rec.meta.axis);
                    gb = broadcast_to(reshape(g, kd), src);
                    mb = broadcast_to(reshape(reduce_mean(a, rec.meta.axis), kd), src);
                }
                accumulate(rec.inputs[0],
                           mul(gb, smul(sub(a, mb), 2.0 / static_cast<double>(n))));
                break;
            }
        }
    }

    std::vector<Tensor> result;
    result.reserve(wrt.size());
    for (const Tensor& t : wrt) {
        auto it = adj.find(t.node);
        if (it == adj.end()) {
            result.push_back(as_graph ? constant_filled(t.shape, 0.0) : make_filled(t.shape, 0.0));
        } else if (as_graph) {
            result.push_back(it->second);
        } else {
            Tensor plain;
            plain.shape = it->second.shape;
            plain.values = it->second.values;
            result.push_back(std::move(plain));
        }
    }
    if (!as_graph) {
        records_.resize(pre_size);
    }
    return result;
}

bool Graph::replay_bitexact() const {
    for (const Record& rec : records_) {
        if (rec.op == Op::Constant) continue;
        std::vector<const Record*> in;
        in.reserve(rec.inputs.size());
        for (int64_t id : rec.inputs) in.push_back(&records_[static_cast<size_t>(id)]);
        Shape out_shape;
        std::vector<double> out = eval_op(rec.op, in, rec.meta, out_shape);
        if (out_shape != rec.shape) return false;
        if (out.size() != rec.values->size()) return false;
        if (std::memcmp(out.data(), rec.values->data(), out.size() * sizeof(double)) != 0) {
            return false;
        }
    }
    return true;
}

double finite_diff_check(const std::function<Tensor(Graph&, const std::vector<Tensor>&)>& fn,
                         const std::vector<Tensor>& params, double step) {
    if (!(step > 0.0)) {
        throw std::invalid_argument("finite_diff_check: step must be > 0");
    }

    Graph g;
    std::vector<Tensor> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) leaves.push_back(g.leaf(p));
    Tensor y = fn(g, leaves);
    if (y.numel() != 1) {
        throw ShapeError("finite_diff_check: fn must return a scalar");
    }
    if (!std::isfinite(y.scalar())) {
        throw DomainError("finite_diff_check: fn returned a non-finite value");
    }
    std::vector<Tensor> analytic = g.gradients(y, leaves, false);

    auto eval_at = [&](const std::vector<Tensor>& pts) {
        Graph g2;
        std::vector<Tensor> l2;
        l2.reserve(pts.size());
        for (const Tensor& p : pts) l2.push_back(g2.leaf(p));
        double v = fn(g2, l2).scalar();
        if (!std::isfinite(v)) {
            throw DomainError("finite_diff_check: fn returned a non-finite value");
        }
        return v;
    };

    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        for (int64_t j = 0; j < params[pi].numel(); ++j) {
            std::vector<Tensor> plus = params;
            std::vector<Tensor> minus = params;
            auto bump = [&](std::vector<Tensor>& v, double delta) {
                std::vector<double> vals = v[pi].data();
                vals[static_cast<size_t>(j)] += delta;
                v[pi] = make_tensor(v[pi].shape, std::move(vals));
            };
            bump(plus, step);
            bump(minus, -step);
            double central = (eval_at(plus) - eval_at(minus)) / (2.0 * step);
            double a = analytic[pi].at(j);
            double err = std::abs(a - central) / std::max(1.0, std::abs(a));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace metabal::ad
