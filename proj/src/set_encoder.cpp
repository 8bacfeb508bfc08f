#include "metabal/set_encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace metabal::enc {

using ad::make_filled;
using ad::make_tensor;
using ad::Shape;

namespace {

constexpr double kSigmaFloor = 1e-4;
constexpr double kMomentEps = 1e-12;

std::vector<DenseLayer> make_mlp(int64_t in_dim, const std::vector<int64_t>& widths, Rng& rng,
                                 double final_scale = 1.0, double final_bias = 0.0) {
    std::vector<DenseLayer> layers;
    int64_t prev = in_dim;
    for (size_t l = 0; l < widths.size(); ++l) {
        int64_t out = widths[l];
        double limit = std::sqrt(6.0 / static_cast<double>(prev + out));
        bool last = (l + 1 == widths.size());
        if (last) limit *= final_scale;
        std::vector<double> w(static_cast<size_t>(prev * out));
        for (auto& x : w) x = (2.0 * rng.uniform() - 1.0) * limit;
        layers.push_back(DenseLayer{
            make_tensor({prev, out}, std::move(w)),
            make_filled({out}, last ? final_bias : 0.0),
        });
        prev = out;
    }
    return layers;
}

DenseLayer make_mix(int64_t stats, Rng& rng) {
    double limit = std::sqrt(6.0 / static_cast<double>(stats + 4));
    std::vector<double> w(static_cast<size_t>(4 * stats));
    for (auto& x : w) x = (2.0 * rng.uniform() - 1.0) * limit;
    return DenseLayer{make_tensor({4, stats}, std::move(w)), make_filled({4}, 0.0)};
}

// A posterior head ends in (mu, raw sigma) pairs: mu entries first, then raw
// sigma entries. Small final weights and a raw-sigma bias of
// softplus^-1(0.1) start every posterior near N(0, 0.1^2).
std::vector<DenseLayer> make_head(int64_t in_dim, int64_t hidden, int64_t pairs, Rng& rng) {
    double raw_bias = std::log(std::exp(0.1) - 1.0);
    auto layers = make_mlp(in_dim, {hidden, 2 * pairs}, rng, 0.01, 0.0);
    std::vector<double> b = layers.back().b.data();
    for (int64_t i = pairs; i < 2 * pairs; ++i) b[static_cast<size_t>(i)] = raw_bias;
    layers.back().b = make_tensor({2 * pairs}, std::move(b));
    return layers;
}

void collect(std::vector<Tensor*>& out, std::vector<DenseLayer>& mlp) {
    for (DenseLayer& l : mlp) {
        out.push_back(&l.w);
        out.push_back(&l.b);
    }
}

Tensor mix_statistics(Graph& g, const DenseLayer& mix, const Tensor& block) {
    int64_t d = block.shape[1];
    Tensor h = g.add(g.matmul(mix.w, block),
                     g.broadcast_to(g.reshape(mix.b, {4, 1}), {4, d}));
    return g.reshape(g.relu(h), {4 * d});
}

}  // namespace

EncoderParams init_encoder(int64_t feature_dim, int64_t num_layers, int64_t num_modulated,
                           const EncoderConfig& config, Rng& rng) {
    if (config.nn1_widths.empty() || config.nn2_widths.empty()) {
        throw std::invalid_argument("init_encoder: empty embedder widths");
    }
    EncoderParams p;
    p.config = config;
    p.num_layers = num_layers;
    p.num_modulated = num_modulated;
    int64_t stats = config.higher_moments ? 5 : 3;
    p.nn1 = make_mlp(feature_dim, config.nn1_widths, rng);
    p.mix1 = make_mix(stats, rng);
    p.nn2 = make_mlp(p.class_repr_dim(), config.nn2_widths, rng);
    p.mix2 = make_mix(stats, rng);
    p.omega_head = make_head(p.class_repr_dim(), config.head_hidden, 1, rng);
    p.gamma_head = make_head(p.task_repr_dim(), config.head_hidden, num_layers, rng);
    p.z_head = make_head(p.task_repr_dim(), config.head_hidden, num_modulated, rng);
    return p;
}

std::vector<Tensor*> param_tensors(EncoderParams& params) {
    std::vector<Tensor*> out;
    collect(out, params.nn1);
    out.push_back(&params.mix1.w);
    out.push_back(&params.mix1.b);
    collect(out, params.nn2);
    out.push_back(&params.mix2.w);
    out.push_back(&params.mix2.b);
    collect(out, params.omega_head);
    collect(out, params.gamma_head);
    collect(out, params.z_head);
    return out;
}

std::vector<const Tensor*> param_tensors(const EncoderParams& params) {
    auto mutable_view = param_tensors(const_cast<EncoderParams&>(params));
    return {mutable_view.begin(), mutable_view.end()};
}

EncoderParams bind_params(Graph& g, const EncoderParams& params) {
    EncoderParams out = params;
    for (Tensor* t : param_tensors(out)) *t = g.leaf(*t);
    return out;
}

Tensor softplus(Graph& g, const Tensor& x) {
    // relu(x) + log(1 + exp(-|x|)); the exponent is bounded in (0, 1].
    Tensor neg_abs = g.neg(g.add(g.relu(x), g.relu(g.neg(x))));
    return g.add(g.relu(x), g.log(g.add(g.constant_filled(x.shape, 1.0), g.exp(neg_abs))));
}

Tensor pool_statistics(Graph& g, const Tensor& vectors, bool higher_moments) {
    if (vectors.shape.size() != 2 || vectors.shape[0] == 0) {
        throw std::invalid_argument("pool_statistics: expects a non-empty [N, d] set");
    }
    int64_t n = vectors.shape[0], d = vectors.shape[1];
    Tensor mean = g.reduce_mean(vectors, 0);
    Tensor var = g.reduce_var(vectors, 0);
    Tensor card = g.constant_filled({1, d}, std::log(1.0 + static_cast<double>(n)));

    std::vector<Tensor> rows{g.reshape(mean, {1, d}), g.reshape(var, {1, d}), card};
    if (higher_moments) {
        Tensor skew, kurt;
        if (n >= 3) {
            Tensor centered = g.sub(vectors, g.broadcast_to(g.reshape(mean, {1, d}), {n, d}));
            Tensor c2 = g.mul(centered, centered);
            Tensor safe_var = g.add(var, g.constant_filled({d}, kMomentEps));
            if (n >= 3) {
                Tensor m3 = g.reduce_mean(g.mul(c2, centered), 0);
                Tensor denom = g.exp(g.smul(g.log(safe_var), 1.5));
                skew = g.mul(m3, g.reciprocal(denom));
            }
            if (n >= 4) {
                Tensor m4 = g.reduce_mean(g.mul(c2, c2), 0);
                Tensor ratio = g.mul(m4, g.reciprocal(g.mul(safe_var, safe_var)));
                kurt = g.sub(ratio, g.constant_filled({d}, 3.0));
            }
        }
        rows.push_back(n >= 3 ? g.reshape(skew, {1, d}) : g.constant_filled({1, d}, 0.0));
        rows.push_back(n >= 4 ? g.reshape(kurt, {1, d}) : g.constant_filled({1, d}, 0.0));
    }
    return g.concat(rows, 0);
}

Tensor encode_class(Graph& g, const EncoderParams& enc, const Tensor& instances) {
    if (instances.shape.size() != 2 || instances.shape[0] == 0) {
        throw std::invalid_argument("encode_class: empty class");
    }
    Tensor emb = model::forward(g, enc.nn1, instances);
    Tensor block = pool_statistics(g, emb, enc.config.higher_moments);
    return mix_statistics(g, enc.mix1, block);
}

Tensor encode_task(Graph& g, const EncoderParams& enc, const std::vector<Tensor>& class_reprs) {
    if (class_reprs.size() < 2) {
        throw std::invalid_argument("encode_task: needs at least 2 classes");
    }
    std::vector<Tensor> rows;
    rows.reserve(class_reprs.size());
    for (const Tensor& s : class_reprs) {
        rows.push_back(model::forward(g, enc.nn2, g.reshape(s, {1, s.numel()})));
    }
    Tensor stacked = g.concat(rows, 0);
    Tensor block = pool_statistics(g, stacked, enc.config.higher_moments);
    return mix_statistics(g, enc.mix2, block);
}

namespace {

// Splits a flat head output [2k] into (mu [k], sigma [k]); sigma is
// softplus(raw) + floor to keep it strictly positive.
std::pair<Tensor, Tensor> split_head(Graph& g, const Tensor& flat, int64_t k) {
    Tensor mu = g.slice(flat, 0, 0, k);
    Tensor raw = g.slice(flat, 0, k, k);
    Tensor sigma = g.add(softplus(g, raw), g.constant_filled({k}, kSigmaFloor));
    return {mu, sigma};
}

}  // namespace

BalancingPosterior posterior_params(Graph& g, const EncoderParams& enc,
                                    const std::vector<Tensor>& class_reprs,
                                    const Tensor& task_repr) {
    BalancingPosterior post;
    std::vector<Tensor> rows;
    rows.reserve(class_reprs.size());
    for (const Tensor& s : class_reprs) {
        rows.push_back(model::forward(g, enc.omega_head, g.reshape(s, {1, s.numel()})));
    }
    Tensor stacked = g.concat(rows, 0);  // [C, 2]
    int64_t c = static_cast<int64_t>(class_reprs.size());
    post.omega_mu = g.reshape(g.slice(stacked, 1, 0, 1), {c});
    Tensor raw = g.reshape(g.slice(stacked, 1, 1, 1), {c});
    post.omega_sigma = g.add(softplus(g, raw), g.constant_filled({c}, kSigmaFloor));

    Tensor v = g.reshape(task_repr, {1, task_repr.numel()});
    Tensor gout = g.reshape(model::forward(g, enc.gamma_head, v), {2 * enc.num_layers});
    std::tie(post.gamma_mu, post.gamma_sigma) = split_head(g, gout, enc.num_layers);

    Tensor zout = g.reshape(model::forward(g, enc.z_head, v), {2 * enc.num_modulated});
    std::tie(post.z_mu, post.z_sigma) = split_head(g, zout, enc.num_modulated);
    return post;
}

}  // namespace metabal::enc
