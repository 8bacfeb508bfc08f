#include "metabal/task_model.hpp"

#include <cmath>
#include <stdexcept>

namespace metabal::model {

using ad::make_filled;
using ad::make_tensor;
using ad::Shape;
using ad::ShapeError;

int64_t ModelParams::total_modulated() const {
    int64_t n = 0;
    for (int64_t m : modulation_layout) n += m;
    return n;
}

ModelParams init_params(const std::vector<int64_t>& arch, Rng& rng, bool alpha_scalar,
                        double alpha_init) {
    if (arch.size() < 2) {
        throw std::invalid_argument("init_params: architecture needs input and output widths");
    }
    for (int64_t w : arch) {
        if (w <= 0) throw std::invalid_argument("init_params: widths must be positive");
    }

    ModelParams p;
    p.alpha_scalar = alpha_scalar;
    for (size_t l = 0; l + 1 < arch.size(); ++l) {
        int64_t fan_in = arch[l], fan_out = arch[l + 1];
        double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::vector<double> w(static_cast<size_t>(fan_in * fan_out));
        for (auto& x : w) x = (2.0 * rng.uniform() - 1.0) * limit;
        p.layers.push_back(DenseLayer{
            make_tensor({fan_in, fan_out}, std::move(w)),
            make_filled({fan_out}, 0.0),
        });
        p.modulation_layout.push_back(fan_out);
    }

    if (alpha_scalar) {
        p.alpha.push_back(ad::make_scalar(alpha_init));
    } else {
        for (const DenseLayer& layer : p.layers) {
            p.alpha.push_back(make_filled(layer.w.shape, alpha_init));
            p.alpha.push_back(make_filled(layer.b.shape, alpha_init));
        }
    }
    return p;
}

ModelParams bind_params(Graph& g, const ModelParams& params) {
    ModelParams out = params;
    for (DenseLayer& layer : out.layers) {
        layer.w = g.leaf(layer.w);
        layer.b = g.leaf(layer.b);
    }
    for (Tensor& a : out.alpha) a = g.leaf(a);
    return out;
}

std::vector<Tensor*> param_tensors(ModelParams& params) {
    std::vector<Tensor*> out;
    for (DenseLayer& layer : params.layers) {
        out.push_back(&layer.w);
        out.push_back(&layer.b);
    }
    for (Tensor& a : params.alpha) out.push_back(&a);
    return out;
}

std::vector<const Tensor*> param_tensors(const ModelParams& params) {
    std::vector<const Tensor*> out;
    for (const DenseLayer& layer : params.layers) {
        out.push_back(&layer.w);
        out.push_back(&layer.b);
    }
    for (const Tensor& a : params.alpha) out.push_back(&a);
    return out;
}

Tensor forward(Graph& g, const std::vector<DenseLayer>& layers, const Tensor& inputs) {
    if (layers.empty()) throw std::invalid_argument("forward: no layers");
    if (inputs.shape.size() != 2 || inputs.shape[1] != layers[0].w.shape[0]) {
        throw ShapeError("forward: input width " + ad::shape_str(inputs.shape) +
                         " does not match first layer " + ad::shape_str(layers[0].w.shape));
    }
    Tensor h = inputs;
    for (size_t l = 0; l < layers.size(); ++l) {
        int64_t batch = h.shape[0];
        int64_t out = layers[l].w.shape[1];
        Tensor z = g.add(g.matmul(h, layers[l].w),
                         g.broadcast_to(g.reshape(layers[l].b, {1, out}), {batch, out}));
        h = (l + 1 < layers.size()) ? g.relu(z) : z;
    }
    return h;
}

Tensor nll_loss(Graph& g, const Tensor& logits, const std::vector<int>& labels) {
    int64_t n = logits.shape[0], c = logits.shape[1];
    if (static_cast<int64_t>(labels.size()) != n) {
        throw ShapeError("nll_loss: label count does not match logits rows");
    }

    // Row-max shift held constant: the shift cancels exactly in log-sum-exp,
    // so gradients are unaffected.
    std::vector<double> mx(static_cast<size_t>(n));
    std::vector<double> onehot(static_cast<size_t>(n * c), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        double m = logits.at(i * c);
        for (int64_t j = 1; j < c; ++j) m = std::max(m, logits.at(i * c + j));
        mx[static_cast<size_t>(i)] = m;
        int y = labels[static_cast<size_t>(i)];
        if (y < 0 || y >= c) throw std::invalid_argument("nll_loss: label out of range");
        onehot[static_cast<size_t>(i * c + y)] = 1.0;
    }
    Tensor mrow = g.constant({n, 1}, std::move(mx));
    Tensor shifted = g.sub(logits, g.broadcast_to(mrow, {n, c}));
    Tensor lse = g.add(g.log(g.reduce_sum(g.exp(shifted), 1)), g.reshape(mrow, {n}));
    Tensor picked = g.reduce_sum(g.mul(logits, g.constant({n, c}, std::move(onehot))), 1);
    return g.reduce_mean(g.sub(lse, picked));
}

Tensor class_loss(Graph& g, const std::vector<DenseLayer>& layers, const Tensor& class_inputs,
                  int c, int num_classes) {
    if (class_inputs.shape.empty() || class_inputs.shape[0] == 0) {
        throw std::invalid_argument("class_loss: class " + std::to_string(c) + " is empty");
    }
    Tensor logits = forward(g, layers, class_inputs);
    if (logits.shape[1] != num_classes) {
        throw ShapeError("class_loss: model emits " + std::to_string(logits.shape[1]) +
                         " classes, episode has " + std::to_string(num_classes));
    }
    return nll_loss(g, logits, std::vector<int>(static_cast<size_t>(class_inputs.shape[0]), c));
}

std::vector<DenseLayer> modulate(Graph& g, const ModelParams& params, const Tensor& shift) {
    if (shift.numel() != params.total_modulated()) {
        throw ShapeError("modulate: shift length " + std::to_string(shift.numel()) +
                         " does not match modulation layout total " +
                         std::to_string(params.total_modulated()));
    }
    std::vector<DenseLayer> out;
    out.reserve(params.layers.size());
    Tensor flat = g.reshape(shift.bound() ? shift : g.leaf(shift), {shift.numel()});
    int64_t offset = 0;
    for (size_t l = 0; l < params.layers.size(); ++l) {
        const DenseLayer& layer = params.layers[l];
        int64_t m = params.modulation_layout[l];
        if (m == 0) {
            out.push_back(layer);
            continue;
        }
        int64_t in = layer.w.shape[0], width = layer.w.shape[1];
        Tensor seg = g.slice(flat, 0, offset, m);
        offset += m;

        Tensor factor = g.add(g.constant_filled({m}, 1.0), seg);
        Tensor bias_shift = seg;
        if (m < width) {
            factor = g.concat({factor, g.constant_filled({width - m}, 1.0)}, 0);
            bias_shift = g.concat({seg, g.constant_filled({width - m}, 0.0)}, 0);
        }
        Tensor w = g.mul(layer.w, g.broadcast_to(g.reshape(factor, {1, width}), {in, width}));
        Tensor b = g.add(layer.b, bias_shift);
        out.push_back(DenseLayer{w, b});
    }
    return out;
}

}  // namespace metabal::model
