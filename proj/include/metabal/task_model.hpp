#pragma once

#include <cstdint>
#include <vector>

#include "metabal/rng.hpp"
#include "metabal/tensor.hpp"

namespace metabal::model {

using ad::Graph;
using ad::Tensor;

struct DenseLayer {
    Tensor w;  // [in, out]
    Tensor b;  // [out]
};

// Shared meta-knowledge of the task network: layer parameters, the learned
// per-step scale alpha (one entry per parameter coordinate, or a single
// scalar), and which output units of each layer receive modulation.
struct ModelParams {
    std::vector<DenseLayer> layers;
    // Per-coordinate mode: alpha[2l] matches layers[l].w, alpha[2l+1] matches
    // layers[l].b. Scalar mode: a single rank-0 tensor.
    std::vector<Tensor> alpha;
    bool alpha_scalar = false;
    // Number of leading output units modulated per layer.
    std::vector<int64_t> modulation_layout;

    int64_t num_layers() const { return static_cast<int64_t>(layers.size()); }
    int64_t total_modulated() const;
};

// Glorot-uniform weights, zero biases, alpha filled with alpha_init.
ModelParams init_params(const std::vector<int64_t>& arch, Rng& rng, bool alpha_scalar = false,
                        double alpha_init = 0.01);

// Binds every parameter tensor as a leaf of `g`.
ModelParams bind_params(Graph& g, const ModelParams& params);

// Flat list of the trainable tensors (layers then alpha), and the matching
// writeback. Used by the outer optimizer and checkpointing.
std::vector<Tensor*> param_tensors(ModelParams& params);
std::vector<const Tensor*> param_tensors(const ModelParams& params);

// Hidden layers relu, final layer linear. inputs: [batch, features].
Tensor forward(Graph& g, const std::vector<DenseLayer>& layers, const Tensor& inputs);

// Mean negative log-likelihood of rows of `inputs` under class label
// `labels[i]`, computed with a max-shifted log-sum-exp.
Tensor nll_loss(Graph& g, const Tensor& logits, const std::vector<int>& labels);

// Mean NLL over the instances of one class (all labelled `c`).
Tensor class_loss(Graph& g, const std::vector<DenseLayer>& layers, const Tensor& class_inputs,
                  int c, int num_classes);

// theta * z: weight columns of modulated units scale by (1 + shift_u), the
// matching bias entries gain shift_u. `shift` is the concatenation of
// per-layer segments in modulation_layout order.
std::vector<DenseLayer> modulate(Graph& g, const ModelParams& params, const Tensor& shift);

}  // namespace metabal::model
