#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "metabal/episodes.hpp"
#include "metabal/rng.hpp"
#include "metabal/set_encoder.hpp"
#include "metabal/task_model.hpp"
#include "metabal/tensor.hpp"

namespace metabal::bal {

using ad::Graph;
using ad::Tensor;

// Raised when an inner-loop loss blows past the guard or goes non-finite;
// the trainer skips the episode rather than masking the instability.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct VariantConfig {
    bool use_omega = true;
    bool use_gamma = true;
    bool use_z = true;
    bool deterministic = false;  // posterior means instead of samples
    bool gamma_decay = false;    // bounded gamma in (0,1), off by default
    int mc_train = 1;
    int mc_test = 10;
    int inner_steps_train = 5;
    int inner_steps_test = 10;
};

// One reparameterized draw of the balancing variables, transformed into the
// forms the update rule consumes. Disabled variables sit at their identity
// values (uniform omega, gamma 1, zero shift).
struct BalancingSample {
    Tensor omega;    // [C], simplex over classes
    Tensor gamma;    // [L], positive step multipliers
    Tensor z_shift;  // [num_modulated] raw shift (weights x(1+z), biases +z)
    // Pre-transform draws for the enabled blocks (unbound when disabled).
    Tensor raw_omega, raw_gamma, raw_z;
};

BalancingSample sample_balancing(Graph& g, const enc::BalancingPosterior& post,
                                 const VariantConfig& variant, Rng& rng);
// Per-block control over which draws are stochastic (the rest sit at their
// posterior means). Used by the displacement diagnostic.
BalancingSample sample_balancing_custom(Graph& g, const enc::BalancingPosterior& post,
                                        const VariantConfig& variant, Rng& rng,
                                        bool stochastic_omega, bool stochastic_gamma,
                                        bool stochastic_z);

struct AdaptState {
    std::vector<model::DenseLayer> theta0;
    // theta after each step; steps.size() == K.
    std::vector<std::vector<model::DenseLayer>> steps;

    const std::vector<model::DenseLayer>& final_layers() const {
        return steps.empty() ? theta0 : steps.back();
    }
    int step_index() const { return static_cast<int>(steps.size()); }
};

// Per-class scalar loss for the current parameters; class index in [0, C).
using ClassLossFn =
    std::function<Tensor(Graph&, const std::vector<model::DenseLayer>&, int)>;

// The balanced inner loop: theta_0 = modulate(theta, z), then K steps of
//   theta_k = theta_{k-1} - gamma_l * alpha * sum_c omega_c grad L_c
// where L_c is the class-c mean NLL in the pooled normalization (scaled by
// C*N_c/N), so uniform omega reproduces the pooled-mean update exactly and
// learned omega rebalances the class influence. With record_for_outer the
// chain stays differentiable end to end.
AdaptState inner_adapt(Graph& g, const model::ModelParams& params, const BalancingSample& sample,
                       const std::vector<Tensor>& support, int k, bool record_for_outer);
AdaptState inner_adapt_losses(Graph& g, const model::ModelParams& params,
                              const BalancingSample& sample, const ClassLossFn& loss_fn,
                              int num_classes, int k, bool record_for_outer);

// Closed-form KL(N(mu, sigma^2) || N(0, 1)) summed over one block.
Tensor kl_block(Graph& g, const Tensor& mu, const Tensor& sigma);
// Sum over the blocks enabled in `variant`.
Tensor kl_divergence(Graph& g, const enc::BalancingPosterior& post, const VariantConfig& variant);

struct ObjectiveParts {
    Tensor total;
    double nll = 0.0;
    double kl = 0.0;        // or the l2 penalty in deterministic mode
    double kl_weight = 0.0; // 1 / (N + M)
};

ObjectiveParts objective_with_posterior(Graph& g, const model::ModelParams& bound_params,
                                        const enc::BalancingPosterior& post,
                                        const ep::Episode& episode, const VariantConfig& variant,
                                        Rng& rng);
ObjectiveParts meta_objective(Graph& g, const model::ModelParams& bound_params,
                              const enc::EncoderParams& bound_enc, const ep::Episode& episode,
                              const VariantConfig& variant, Rng& rng);

// Convenience wrappers over a fresh graph; noise_seed freezes the
// reparameterization draws so finite differences see a fixed objective.
double meta_objective_value(const model::ModelParams& params, const enc::EncoderParams& encp,
                            const ep::Episode& episode, const VariantConfig& variant,
                            uint64_t noise_seed);
struct ObjectiveEval {
    double total = 0.0, nll = 0.0, kl = 0.0, kl_weight = 0.0;
    // One gradient buffer per tensor: theta/alpha first, then psi.
    std::vector<std::vector<double>> grads;
};
ObjectiveEval meta_objective_eval(const model::ModelParams& params,
                                  const enc::EncoderParams& encp, const ep::Episode& episode,
                                  const VariantConfig& variant, uint64_t noise_seed,
                                  bool with_grads);

// Mean of S posterior-sample predictive distributions; rows sum to 1.
std::vector<std::vector<double>> predict_mc(const model::ModelParams& params,
                                            const enc::EncoderParams& encp,
                                            const ep::Episode& episode,
                                            const VariantConfig& variant, int samples, Rng& rng);
// Single adaptation at the posterior means pushed through the transforms.
std::vector<std::vector<double>> predict_naive(const model::ModelParams& params,
                                               const enc::EncoderParams& encp,
                                               const ep::Episode& episode,
                                               const VariantConfig& variant);

enum class BaselineMode { Maml, MetaSgd, MetaSgdInvN };

// maml: scalar alpha on the pooled-mean loss. metasgd: elementwise alpha on
// the pooled-mean loss. metasgd_inv_n: per-class mean-loss gradients
// weighted by 1/N_c and summed.
AdaptState baseline_update(Graph& g, const model::ModelParams& params,
                           const std::vector<Tensor>& support, BaselineMode mode, int k,
                           bool record_for_outer = false);

// (||theta^tau(E[z]) - E[theta_0]||, ||mean_s theta^tau(z_s) - E[theta_0]||):
// the expectation over z taken before vs after adaptation. omega and gamma
// are held at their posterior means throughout.
std::pair<double, double> displacement_diagnostic(const model::ModelParams& params,
                                                  const enc::EncoderParams& encp,
                                                  const ep::Episode& episode,
                                                  const VariantConfig& variant, int samples, int k,
                                                  Rng& rng);

// Posterior summaries used in reports: softmax of the omega means, and the
// exact log-normal mean exp(mu + sigma^2/2) for gamma.
std::vector<double> expected_omega(const enc::BalancingPosterior& post);
std::vector<double> expected_gamma(const enc::BalancingPosterior& post);

}  // namespace metabal::bal
