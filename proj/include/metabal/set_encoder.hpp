#pragma once

#include <cstdint>
#include <vector>

#include "metabal/rng.hpp"
#include "metabal/task_model.hpp"
#include "metabal/tensor.hpp"

namespace metabal::enc {

using ad::Graph;
using ad::Tensor;
using model::DenseLayer;

struct EncoderConfig {
    std::vector<int64_t> nn1_widths{64, 64};
    std::vector<int64_t> nn2_widths{128, 32};
    int64_t head_hidden = 64;
    bool higher_moments = false;
};

// Amortized-posterior network weights (psi): the per-instance embedder NN1,
// the class-level embedder NN2, one statistics-mixing map per pooling level,
// and the three posterior heads. The omega head is shared across classes,
// which is what makes the omega posterior permutation-equivariant.
struct EncoderParams {
    EncoderConfig config;
    std::vector<DenseLayer> nn1;
    DenseLayer mix1;  // statistics-axis mixing to 4 channels
    std::vector<DenseLayer> nn2;
    DenseLayer mix2;
    std::vector<DenseLayer> omega_head;  // s_c -> (mu, raw sigma)
    std::vector<DenseLayer> gamma_head;  // v -> L pairs
    std::vector<DenseLayer> z_head;      // v -> one pair per modulated unit

    int64_t num_layers = 0;       // L of the task network
    int64_t num_modulated = 0;    // total modulated units
    int64_t class_repr_dim() const { return 4 * config.nn1_widths.back(); }
    int64_t task_repr_dim() const { return 4 * config.nn2_widths.back(); }
};

// Per-task Gaussian posterior parameters for the balancing variables, kept
// as graph tensors so the objective differentiates through psi.
struct BalancingPosterior {
    Tensor omega_mu, omega_sigma;  // [C]
    Tensor gamma_mu, gamma_sigma;  // [L]
    Tensor z_mu, z_sigma;          // [num_modulated]
};

EncoderParams init_encoder(int64_t feature_dim, int64_t num_layers, int64_t num_modulated,
                           const EncoderConfig& config, Rng& rng);

std::vector<Tensor*> param_tensors(EncoderParams& params);
std::vector<const Tensor*> param_tensors(const EncoderParams& params);
EncoderParams bind_params(Graph& g, const EncoderParams& params);

// Per-feature mean, per-feature population variance and a log(1+N)
// cardinality channel, stacked as rows of a [stats, d] block; with
// higher_moments, sample skewness and excess kurtosis rows follow (defined 0
// when N < 3 and N < 4 respectively).
Tensor pool_statistics(Graph& g, const Tensor& vectors, bool higher_moments);

// s_c: embed each instance with NN1, pool, mix the statistics axis.
Tensor encode_class(Graph& g, const EncoderParams& enc, const Tensor& instances);

// v: transform each s_c with NN2, pool over classes, mix. Needs C >= 2.
Tensor encode_task(Graph& g, const EncoderParams& enc, const std::vector<Tensor>& class_reprs);

BalancingPosterior posterior_params(Graph& g, const EncoderParams& enc,
                                    const std::vector<Tensor>& class_reprs, const Tensor& task_repr);

// Numerically safe softplus built from graph ops.
Tensor softplus(Graph& g, const Tensor& x);

}  // namespace metabal::enc
