#include "metabal/balancing.hpp"

#include <algorithm>
#include <cmath>

namespace metabal::bal {

using ad::DomainError;
using ad::make_tensor;
using enc::BalancingPosterior;
using model::DenseLayer;
using model::ModelParams;

namespace {

constexpr double kLossGuard = 1e6;

Tensor gaussian_draw(Graph& g, const Tensor& mu, const Tensor& sigma, Rng& rng) {
    std::vector<double> eps(static_cast<size_t>(mu.numel()));
    for (auto& e : eps) e = rng.normal();
    return g.add(mu, g.mul(sigma, g.constant(mu.shape, std::move(eps))));
}

}  // namespace

BalancingSample sample_balancing_custom(Graph& g, const BalancingPosterior& post,
                                        const VariantConfig& variant, Rng& rng,
                                        bool stochastic_omega, bool stochastic_gamma,
                                        bool stochastic_z) {
    const int64_t c = post.omega_mu.numel();
    const int64_t l = post.gamma_mu.numel();
    const int64_t zn = post.z_mu.numel();
    if (variant.deterministic) {
        stochastic_omega = stochastic_gamma = stochastic_z = false;
    }

    BalancingSample s;
    if (variant.use_omega) {
        s.raw_omega = stochastic_omega ? gaussian_draw(g, post.omega_mu, post.omega_sigma, rng)
                                       : post.omega_mu;
        s.omega = g.softmax(s.raw_omega, 0);
    } else {
        s.omega = g.constant_filled({c}, 1.0 / static_cast<double>(c));
    }
    if (variant.use_gamma) {
        s.raw_gamma = stochastic_gamma ? gaussian_draw(g, post.gamma_mu, post.gamma_sigma, rng)
                                       : post.gamma_mu;
        s.gamma = variant.gamma_decay ? g.exp(g.neg(enc::softplus(g, s.raw_gamma)))
                                      : g.exp(s.raw_gamma);
    } else {
        s.gamma = g.constant_filled({l}, 1.0);
    }
    if (variant.use_z) {
        s.raw_z = stochastic_z ? gaussian_draw(g, post.z_mu, post.z_sigma, rng) : post.z_mu;
        s.z_shift = s.raw_z;
    } else {
        s.z_shift = g.constant_filled({zn}, 0.0);
    }
    return s;
}

BalancingSample sample_balancing(Graph& g, const BalancingPosterior& post,
                                 const VariantConfig& variant, Rng& rng) {
    return sample_balancing_custom(g, post, variant, rng, true, true, true);
}

namespace {

// One balanced gradient step from `layers`, differentiable through omega,
// gamma, alpha and the incoming parameters.
std::vector<DenseLayer> balanced_step(Graph& g, const ModelParams& params,
                                      const std::vector<DenseLayer>& layers,
                                      const BalancingSample& sample, const ClassLossFn& loss_fn,
                                      int num_classes, int step_index, bool record_for_outer) {
    Tensor weighted;
    for (int c = 0; c < num_classes; ++c) {
        Tensor loss = loss_fn(g, layers, c);
        double value = loss.scalar();
        if (!std::isfinite(value) || std::abs(value) > kLossGuard) {
            throw DivergenceError("inner step " + std::to_string(step_index) + ": loss for class " +
                                  std::to_string(c) + " diverged to " + std::to_string(value));
        }
        Tensor w = g.reshape(g.slice(sample.omega, 0, c, 1), {});
        Tensor term = g.mul(w, g.reshape(loss, {}));
        weighted = (c == 0) ? term : g.add(weighted, term);
    }

    std::vector<Tensor> wrt;
    for (const DenseLayer& layer : layers) {
        wrt.push_back(layer.w);
        wrt.push_back(layer.b);
    }
    std::vector<Tensor> grads = g.gradients(weighted, wrt, record_for_outer);

    std::vector<DenseLayer> next;
    next.reserve(layers.size());
    for (size_t l = 0; l < layers.size(); ++l) {
        Tensor gl = g.broadcast_to(g.slice(sample.gamma, 0, static_cast<int64_t>(l), 1),
                                   layers[l].w.shape);
        Tensor glb = g.broadcast_to(g.slice(sample.gamma, 0, static_cast<int64_t>(l), 1),
                                    layers[l].b.shape);
        Tensor aw, ab;
        if (params.alpha_scalar) {
            aw = g.broadcast_to(g.reshape(params.alpha[0], {1}), layers[l].w.shape);
            ab = g.broadcast_to(g.reshape(params.alpha[0], {1}), layers[l].b.shape);
        } else {
            aw = params.alpha[2 * l];
            ab = params.alpha[2 * l + 1];
        }
        Tensor w = g.sub(layers[l].w, g.mul(gl, g.mul(aw, grads[2 * l])));
        Tensor b = g.sub(layers[l].b, g.mul(glb, g.mul(ab, grads[2 * l + 1])));
        next.push_back(DenseLayer{w, b});
    }
    return next;
}

// Class losses for the balanced update, in the pooled normalization: the
// per-class mean NLL scaled by C*N_c/N, so that uniform omega reproduces the
// pooled-mean gradient exactly on any episode (balanced or not), and head
// classes dominate at uniform omega the way they do under plain MAML.
ClassLossFn support_loss_fn(const std::vector<Tensor>& support) {
    int num_classes = static_cast<int>(support.size());
    int64_t total = 0;
    for (const Tensor& s : support) total += s.shape[0];
    return [&support, num_classes, total](Graph& g, const std::vector<DenseLayer>& layers,
                                          int c) {
        Tensor loss =
            model::class_loss(g, layers, support[static_cast<size_t>(c)], c, num_classes);
        double n_c = static_cast<double>(support[static_cast<size_t>(c)].shape[0]);
        return g.smul(loss, static_cast<double>(num_classes) * n_c /
                                static_cast<double>(total));
    };
}

}  // namespace

AdaptState inner_adapt_losses(Graph& g, const ModelParams& params, const BalancingSample& sample,
                              const ClassLossFn& loss_fn, int num_classes, int k,
                              bool record_for_outer) {
    if (k < 0) throw std::invalid_argument("inner_adapt: K must be >= 0");
    AdaptState state;
    state.theta0 = model::modulate(g, params, sample.z_shift);
    const std::vector<DenseLayer>* current = &state.theta0;
    for (int step = 1; step <= k; ++step) {
        try {
            state.steps.push_back(balanced_step(g, params, *current, sample, loss_fn, num_classes,
                                                step, record_for_outer));
        } catch (const DomainError& e) {
            throw DivergenceError("inner step " + std::to_string(step) + ": " + e.what());
        }
        current = &state.steps.back();
    }
    return state;
}

AdaptState inner_adapt(Graph& g, const ModelParams& params, const BalancingSample& sample,
                       const std::vector<Tensor>& support, int k, bool record_for_outer) {
    for (size_t c = 0; c < support.size(); ++c) {
        if (support[c].shape[0] == 0) {
            throw std::invalid_argument("inner_adapt: class " + std::to_string(c) + " is empty");
        }
    }
    return inner_adapt_losses(g, params, sample, support_loss_fn(support),
                              static_cast<int>(support.size()), k, record_for_outer);
}

Tensor kl_block(Graph& g, const Tensor& mu, const Tensor& sigma) {
    for (int64_t i = 0; i < sigma.numel(); ++i) {
        if (!(sigma.at(i) > 0.0)) {
            throw DomainError("kl_divergence: sigma must be positive, got " +
                              std::to_string(sigma.at(i)));
        }
    }
    Tensor var = g.mul(sigma, sigma);
    Tensor t = g.sub(g.sub(g.add(g.mul(mu, mu), var), g.constant_filled(mu.shape, 1.0)),
                     g.log(var));
    return g.smul(g.reduce_sum(t), 0.5);
}

Tensor kl_divergence(Graph& g, const BalancingPosterior& post, const VariantConfig& variant) {
    std::vector<Tensor> parts;
    if (variant.use_omega) parts.push_back(kl_block(g, post.omega_mu, post.omega_sigma));
    if (variant.use_gamma) parts.push_back(kl_block(g, post.gamma_mu, post.gamma_sigma));
    if (variant.use_z) parts.push_back(kl_block(g, post.z_mu, post.z_sigma));
    if (parts.empty()) return g.scalar_const(0.0);
    Tensor total = parts[0];
    for (size_t i = 1; i < parts.size(); ++i) total = g.add(total, parts[i]);
    return total;
}

namespace {

// l2 penalty replacing the KL for the deterministic variant: half the
// squared norm of the enabled raw variables.
Tensor l2_penalty(Graph& g, const BalancingSample& sample, const VariantConfig& variant) {
    std::vector<Tensor> parts;
    auto sq = [&](const Tensor& t) { return g.reduce_sum(g.mul(t, t)); };
    if (variant.use_omega) parts.push_back(sq(sample.raw_omega));
    if (variant.use_gamma) parts.push_back(sq(sample.raw_gamma));
    if (variant.use_z) parts.push_back(sq(sample.raw_z));
    if (parts.empty()) return g.scalar_const(0.0);
    Tensor total = parts[0];
    for (size_t i = 1; i < parts.size(); ++i) total = g.add(total, parts[i]);
    return g.smul(total, 0.5);
}

}  // namespace

ObjectiveParts objective_with_posterior(Graph& g, const ModelParams& bound_params,
                                        const BalancingPosterior& post, const ep::Episode& episode,
                                        const VariantConfig& variant, Rng& rng) {
    if (episode.query_total() == 0) {
        throw std::invalid_argument("meta_objective: empty query set");
    }
    const int s_count = std::max(variant.mc_train, 1);
    std::vector<Tensor> support;
    support.reserve(episode.support.size());
    for (const Tensor& t : episode.support) support.push_back(g.leaf(t));
    Tensor query_x = g.leaf(episode.query_x);

    Tensor query_term;
    Tensor reg;
    for (int s = 0; s < s_count; ++s) {
        BalancingSample sample = sample_balancing(g, post, variant, rng);
        AdaptState adapted = inner_adapt(g, bound_params, sample, support,
                                         variant.inner_steps_train, true);
        Tensor logits = model::forward(g, adapted.final_layers(), query_x);
        Tensor nll = model::nll_loss(g, logits, episode.query_y);
        query_term = (s == 0) ? nll : g.add(query_term, nll);
        if (s == 0) {
            reg = variant.deterministic ? l2_penalty(g, sample, variant)
                                        : kl_divergence(g, post, variant);
        }
    }
    if (s_count > 1) query_term = g.smul(query_term, 1.0 / static_cast<double>(s_count));

    ObjectiveParts parts;
    parts.kl_weight =
        1.0 / static_cast<double>(episode.support_total() + episode.query_total());
    parts.total = g.add(query_term, g.smul(reg, parts.kl_weight));
    parts.nll = query_term.scalar();
    parts.kl = reg.scalar();
    return parts;
}

ObjectiveParts meta_objective(Graph& g, const ModelParams& bound_params,
                              const enc::EncoderParams& bound_enc, const ep::Episode& episode,
                              const VariantConfig& variant, Rng& rng) {
    std::vector<Tensor> reprs;
    reprs.reserve(episode.support.size());
    for (const Tensor& s : episode.support) {
        reprs.push_back(enc::encode_class(g, bound_enc, g.leaf(s)));
    }
    Tensor v = enc::encode_task(g, bound_enc, reprs);
    BalancingPosterior post = enc::posterior_params(g, bound_enc, reprs, v);
    return objective_with_posterior(g, bound_params, post, episode, variant, rng);
}

double meta_objective_value(const ModelParams& params, const enc::EncoderParams& encp,
                            const ep::Episode& episode, const VariantConfig& variant,
                            uint64_t noise_seed) {
    return meta_objective_eval(params, encp, episode, variant, noise_seed, false).total;
}

ObjectiveEval meta_objective_eval(const ModelParams& params, const enc::EncoderParams& encp,
                                  const ep::Episode& episode, const VariantConfig& variant,
                                  uint64_t noise_seed, bool with_grads) {
    Graph g;
    ModelParams bound = model::bind_params(g, params);
    enc::EncoderParams bound_enc = enc::bind_params(g, encp);
    Rng rng(noise_seed);
    ObjectiveParts parts = meta_objective(g, bound, bound_enc, episode, variant, rng);

    ObjectiveEval eval;
    eval.total = parts.total.scalar();
    eval.nll = parts.nll;
    eval.kl = parts.kl;
    eval.kl_weight = parts.kl_weight;
    if (with_grads) {
        std::vector<Tensor> wrt;
        for (const Tensor* t : model::param_tensors(bound)) wrt.push_back(*t);
        for (const Tensor* t : enc::param_tensors(bound_enc)) wrt.push_back(*t);
        std::vector<Tensor> grads = g.gradients(parts.total, wrt, false);
        eval.grads.reserve(grads.size());
        for (const Tensor& t : grads) eval.grads.push_back(t.data());
    }
    return eval;
}

namespace {

std::vector<std::vector<double>> predict_impl(const ModelParams& params,
                                              const enc::EncoderParams& encp,
                                              const ep::Episode& episode,
                                              const VariantConfig& variant, int samples,
                                              Rng& rng) {
    if (samples < 1) throw std::invalid_argument("predict: S must be >= 1");
    Graph g;
    ModelParams bound = model::bind_params(g, params);
    enc::EncoderParams bound_enc = enc::bind_params(g, encp);
    std::vector<Tensor> reprs;
    for (const Tensor& s : episode.support) {
        reprs.push_back(enc::encode_class(g, bound_enc, g.leaf(s)));
    }
    Tensor v = enc::encode_task(g, bound_enc, reprs);
    BalancingPosterior post = enc::posterior_params(g, bound_enc, reprs, v);

    std::vector<Tensor> support;
    for (const Tensor& s : episode.support) support.push_back(g.leaf(s));
    Tensor query_x = g.leaf(episode.query_x);

    const int64_t m = episode.query_total();
    const int64_t c = episode.num_classes();
    std::vector<std::vector<double>> probs(static_cast<size_t>(m),
                                           std::vector<double>(static_cast<size_t>(c), 0.0));
    for (int s = 0; s < samples; ++s) {
        BalancingSample sample = sample_balancing(g, post, variant, rng);
        AdaptState adapted =
            inner_adapt(g, bound, sample, support, variant.inner_steps_test, false);
        Tensor p = g.softmax(model::forward(g, adapted.final_layers(), query_x), 1);
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < c; ++j) {
                probs[static_cast<size_t>(i)][static_cast<size_t>(j)] +=
                    p.at(i * c + j) / samples;
            }
        }
    }
    return probs;
}

}  // namespace

std::vector<std::vector<double>> predict_mc(const ModelParams& params,
                                            const enc::EncoderParams& encp,
                                            const ep::Episode& episode,
                                            const VariantConfig& variant, int samples, Rng& rng) {
    return predict_impl(params, encp, episode, variant, samples, rng);
}

std::vector<std::vector<double>> predict_naive(const ModelParams& params,
                                               const enc::EncoderParams& encp,
                                               const ep::Episode& episode,
                                               const VariantConfig& variant) {
    VariantConfig v = variant;
    v.deterministic = true;
    Rng rng(0);
    return predict_impl(params, encp, episode, v, 1, rng);
}

AdaptState baseline_update(Graph& g, const ModelParams& params, const std::vector<Tensor>& support,
                           BaselineMode mode, int k, bool record_for_outer) {
    for (size_t c = 0; c < support.size(); ++c) {
        if (support[c].shape[0] == 0) {
            throw std::invalid_argument("baseline_update: class " + std::to_string(c) +
                                        " is empty");
        }
    }
    if (mode == BaselineMode::Maml && !params.alpha_scalar) {
        throw std::invalid_argument("baseline_update: maml mode expects a scalar alpha");
    }
    const int num_classes = static_cast<int>(support.size());

    // Identity balancing; the loss weighting below carries the mode.
    BalancingSample identity;
    identity.omega = g.constant_filled({num_classes}, 1.0 / num_classes);
    identity.gamma = g.constant_filled({params.num_layers()}, 1.0);
    identity.z_shift = g.constant_filled({params.total_modulated()}, 0.0);

    ClassLossFn loss_fn;
    if (mode == BaselineMode::MetaSgdInvN) {
        // Per-class mean-loss gradients weighted 1/N_c and summed; the C
        // factor cancels the uniform 1/C in the identity omega.
        loss_fn = [&support, num_classes](Graph& gg, const std::vector<DenseLayer>& layers,
                                          int c) {
            Tensor loss = model::class_loss(gg, layers, support[static_cast<size_t>(c)], c,
                                            num_classes);
            double n_c = static_cast<double>(support[static_cast<size_t>(c)].shape[0]);
            return gg.smul(loss, static_cast<double>(num_classes) / n_c);
        };
    } else {
        // Pooled-mean loss over all support instances.
        loss_fn = support_loss_fn(support);
    }
    return inner_adapt_losses(g, params, identity, loss_fn, num_classes, k, record_for_outer);
}

namespace {

std::vector<double> flatten_layers(const std::vector<DenseLayer>& layers) {
    std::vector<double> out;
    for (const DenseLayer& l : layers) {
        out.insert(out.end(), l.w.data().begin(), l.w.data().end());
        out.insert(out.end(), l.b.data().begin(), l.b.data().end());
    }
    return out;
}

double l2_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double d2 = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        d2 += d * d;
    }
    return std::sqrt(d2);
}

}  // namespace

std::pair<double, double> displacement_diagnostic(const ModelParams& params,
                                                  const enc::EncoderParams& encp,
                                                  const ep::Episode& episode,
                                                  const VariantConfig& variant, int samples, int k,
                                                  Rng& rng) {
    if (samples < 2) throw std::invalid_argument("displacement_diagnostic: S must be >= 2");
    Graph g;
    ModelParams bound = model::bind_params(g, params);
    enc::EncoderParams bound_enc = enc::bind_params(g, encp);
    std::vector<Tensor> reprs;
    for (const Tensor& s : episode.support) {
        reprs.push_back(enc::encode_class(g, bound_enc, g.leaf(s)));
    }
    Tensor v = enc::encode_task(g, bound_enc, reprs);
    BalancingPosterior post = enc::posterior_params(g, bound_enc, reprs, v);
    std::vector<Tensor> support;
    for (const Tensor& s : episode.support) support.push_back(g.leaf(s));

    // E[theta_0]: initialization modulated by the posterior mean of z.
    BalancingSample mean_sample = sample_balancing_custom(g, post, variant, rng, false, false,
                                                          false);
    std::vector<double> theta0_mean = flatten_layers(model::modulate(g, bound, mean_sample.z_shift));

    AdaptState mean_adapt = inner_adapt(g, bound, mean_sample, support, k, false);
    double d_mean_first = l2_distance(flatten_layers(mean_adapt.final_layers()), theta0_mean);

    std::vector<double> avg(theta0_mean.size(), 0.0);
    for (int s = 0; s < samples; ++s) {
        BalancingSample zs = sample_balancing_custom(g, post, variant, rng, false, false, true);
        AdaptState adapted = inner_adapt(g, bound, zs, support, k, false);
        std::vector<double> flat = flatten_layers(adapted.final_layers());
        for (size_t i = 0; i < avg.size(); ++i) avg[i] += flat[i] / samples;
    }
    double d_mean_outside = l2_distance(avg, theta0_mean);
    return {d_mean_first, d_mean_outside};
}

std::vector<double> expected_omega(const BalancingPosterior& post) {
    // E_q[softmax(raw)] has no closed form; estimate it with a fixed set of
    // reproducible draws. The posterior variance matters here: a noisier
    // coordinate has a larger pushforward mean at equal mu.
    const auto& mu = post.omega_mu.data();
    const auto& sigma = post.omega_sigma.data();
    const int draws = 512;
    Rng rng(0x0e0a5u);
    std::vector<double> out(mu.size(), 0.0);
    std::vector<double> raw(mu.size());
    for (int s = 0; s < draws; ++s) {
        for (size_t i = 0; i < mu.size(); ++i) raw[i] = mu[i] + sigma[i] * rng.normal();
        double mx = *std::max_element(raw.begin(), raw.end());
        double sum = 0.0;
        for (double& x : raw) {
            x = std::exp(x - mx);
            sum += x;
        }
        for (size_t i = 0; i < mu.size(); ++i) out[i] += raw[i] / sum;
    }
    for (auto& x : out) x /= draws;
    return out;
}

std::vector<double> expected_gamma(const BalancingPosterior& post) {
    std::vector<double> out(post.gamma_mu.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        double s = post.gamma_sigma.at(static_cast<int64_t>(i));
        out[i] = std::exp(post.gamma_mu.at(static_cast<int64_t>(i)) + 0.5 * s * s);
    }
    return out;
}

}  // namespace metabal::bal
