#include "metabal/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace metabal::train {

using ad::make_tensor;
using ad::Tensor;
using nlohmann::json;

namespace {

// ---- strict JSON helpers ----

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                ok = true;
                break;
            }
        }
        if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

TrainConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    check_keys(j,
               {"seed", "arch", "meta_batch", "outer_lr", "outer_optimizer", "total_iters",
                "eval_every", "patience", "val_episodes", "alpha_mode", "alpha_init", "variant",
                "dist", "ood", "encoder"},
               "config");

    TrainConfig c;
    read_field(j, "seed", c.seed);
    read_field(j, "arch", c.arch);
    read_field(j, "meta_batch", c.meta_batch);
    read_field(j, "outer_lr", c.outer_lr);
    read_field(j, "total_iters", c.total_iters);
    read_field(j, "eval_every", c.eval_every);
    read_field(j, "patience", c.patience);
    read_field(j, "val_episodes", c.val_episodes);
    read_field(j, "alpha_init", c.alpha_init);
    if (j.contains("alpha_mode")) {
        std::string mode = j.at("alpha_mode");
        if (mode == "scalar") {
            c.alpha_scalar = true;
        } else if (mode == "per_coordinate") {
            c.alpha_scalar = false;
        } else {
            throw ConfigError("alpha_mode must be scalar or per_coordinate, got '" + mode + "'");
        }
    }
    if (j.contains("outer_optimizer")) {
        const json& o = j.at("outer_optimizer");
        check_keys(o, {"beta1", "beta2", "eps"}, "outer_optimizer");
        read_field(o, "beta1", c.outer_optimizer.beta1);
        read_field(o, "beta2", c.outer_optimizer.beta2);
        read_field(o, "eps", c.outer_optimizer.eps);
    }
    if (j.contains("variant")) {
        const json& v = j.at("variant");
        check_keys(v,
                   {"use_omega", "use_gamma", "use_z", "deterministic", "gamma_decay", "mc_train",
                    "mc_test", "inner_steps_train", "inner_steps_test"},
                   "variant");
        read_field(v, "use_omega", c.variant.use_omega);
        read_field(v, "use_gamma", c.variant.use_gamma);
        read_field(v, "use_z", c.variant.use_z);
        read_field(v, "deterministic", c.variant.deterministic);
        read_field(v, "gamma_decay", c.variant.gamma_decay);
        read_field(v, "mc_train", c.variant.mc_train);
        read_field(v, "mc_test", c.variant.mc_test);
        read_field(v, "inner_steps_train", c.variant.inner_steps_train);
        read_field(v, "inner_steps_test", c.variant.inner_steps_test);
    }
    if (j.contains("dist")) {
        const json& d = j.at("dist");
        check_keys(d,
                   {"classes_per_episode", "shot_min", "shot_max", "class_imbalance_prob",
                    "queries_per_class", "source"},
                   "dist");
        read_field(d, "classes_per_episode", c.dist.classes_per_episode);
        read_field(d, "shot_min", c.dist.shot_min);
        read_field(d, "shot_max", c.dist.shot_max);
        read_field(d, "class_imbalance_prob", c.dist.class_imbalance_prob);
        read_field(d, "queries_per_class", c.dist.queries_per_class);
        if (d.contains("source")) {
            const json& s = d.at("source");
            check_keys(s,
                       {"kind", "dim", "classes_per_split", "center_scale", "noise_scale",
                        "min_separation", "family_seed", "manifest"},
                       "dist.source");
            read_field(s, "kind", c.source.kind);
            if (c.source.kind != "gaussian_blobs" && c.source.kind != "ring_mixtures" &&
                c.source.kind != "dataset") {
                throw ConfigError("dist.source.kind must be gaussian_blobs, ring_mixtures or "
                                  "dataset, got '" + c.source.kind + "'");
            }
            c.source.family.family = c.source.kind == "ring_mixtures"
                                         ? ep::Family::RingMixtures
                                         : ep::Family::GaussianBlobs;
            read_field(s, "dim", c.source.family.dim);
            read_field(s, "classes_per_split", c.source.family.classes_per_split);
            read_field(s, "center_scale", c.source.family.center_scale);
            read_field(s, "noise_scale", c.source.family.noise_scale);
            read_field(s, "min_separation", c.source.family.min_separation);
            read_field(s, "family_seed", c.source.family.seed);
            read_field(s, "manifest", c.source.manifest);
        }
    }
    if (j.contains("ood")) {
        const json& o = j.at("ood");
        check_keys(o, {"shift", "amount", "offset"}, "ood");
        std::string kind = o.value("shift", "identity");
        if (kind == "identity") {
            c.ood.kind = ep::ShiftKind::Identity;
        } else if (kind == "scale") {
            c.ood.kind = ep::ShiftKind::Scale;
        } else if (kind == "rotate") {
            c.ood.kind = ep::ShiftKind::Rotate;
        } else if (kind == "translate") {
            c.ood.kind = ep::ShiftKind::Translate;
        } else if (kind == "family_swap") {
            c.ood.kind = ep::ShiftKind::FamilySwap;
        } else {
            throw ConfigError("ood.shift must be identity, scale, rotate, translate or "
                              "family_swap, got '" + kind + "'");
        }
        read_field(o, "amount", c.ood.amount);
        read_field(o, "offset", c.ood.offset);
    }
    if (j.contains("encoder")) {
        const json& e = j.at("encoder");
        check_keys(e, {"nn1_widths", "nn2_widths", "head_hidden", "higher_moments"}, "encoder");
        read_field(e, "nn1_widths", c.encoder.nn1_widths);
        read_field(e, "nn2_widths", c.encoder.nn2_widths);
        read_field(e, "head_hidden", c.encoder.head_hidden);
        read_field(e, "higher_moments", c.encoder.higher_moments);
    }

    if (c.meta_batch < 1) throw ConfigError("meta_batch must be >= 1");
    if (!(c.outer_lr > 0)) throw ConfigError("outer_lr must be > 0");
    if (c.total_iters != 0 && c.total_iters < c.eval_every) {
        throw ConfigError("total_iters must be >= eval_every");
    }
    if (c.arch.size() < 2) throw ConfigError("arch needs at least input and output widths");
    if (c.arch.back() != c.dist.classes_per_episode) {
        throw ConfigError("arch output width " + std::to_string(c.arch.back()) +
                          " must equal classes_per_episode " +
                          std::to_string(c.dist.classes_per_episode));
    }
    if (c.variant.mc_train < 1 || c.variant.mc_test < 1) throw ConfigError("MC sizes must be >= 1");
    if (c.variant.inner_steps_train < 0 || c.variant.inner_steps_test < 0) {
        throw ConfigError("inner step counts must be >= 0");
    }
    if (c.dist.class_imbalance_prob < 0.0 || c.dist.class_imbalance_prob > 1.0) {
        throw ConfigError("class_imbalance_prob must be in [0, 1]");
    }
    if (c.dist.shot_min < 1 || c.dist.shot_max < c.dist.shot_min) {
        throw ConfigError("shot range must satisfy 1 <= shot_min <= shot_max");
    }
    return c;
}

TrainConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string config_to_json(const TrainConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["arch"] = c.arch;
    j["meta_batch"] = c.meta_batch;
    j["outer_lr"] = c.outer_lr;
    j["outer_optimizer"] = {{"beta1", c.outer_optimizer.beta1},
                            {"beta2", c.outer_optimizer.beta2},
                            {"eps", c.outer_optimizer.eps}};
    j["total_iters"] = c.total_iters;
    j["eval_every"] = c.eval_every;
    j["patience"] = c.patience;
    j["val_episodes"] = c.val_episodes;
    j["alpha_mode"] = c.alpha_scalar ? "scalar" : "per_coordinate";
    j["alpha_init"] = c.alpha_init;
    j["variant"] = {{"use_omega", c.variant.use_omega},
                    {"use_gamma", c.variant.use_gamma},
                    {"use_z", c.variant.use_z},
                    {"deterministic", c.variant.deterministic},
                    {"gamma_decay", c.variant.gamma_decay},
                    {"mc_train", c.variant.mc_train},
                    {"mc_test", c.variant.mc_test},
                    {"inner_steps_train", c.variant.inner_steps_train},
                    {"inner_steps_test", c.variant.inner_steps_test}};
    json source = {{"kind", c.source.kind}};
    if (c.source.kind == "dataset") {
        source["manifest"] = c.source.manifest;
    } else {
        source["dim"] = c.source.family.dim;
        source["classes_per_split"] = c.source.family.classes_per_split;
        source["center_scale"] = c.source.family.center_scale;
        source["noise_scale"] = c.source.family.noise_scale;
        source["min_separation"] = c.source.family.min_separation;
        source["family_seed"] = c.source.family.seed;
    }
    j["dist"] = {{"classes_per_episode", c.dist.classes_per_episode},
                 {"shot_min", c.dist.shot_min},
                 {"shot_max", c.dist.shot_max},
                 {"class_imbalance_prob", c.dist.class_imbalance_prob},
                 {"queries_per_class", c.dist.queries_per_class},
                 {"source", source}};
    const char* shift = "identity";
    switch (c.ood.kind) {
        case ep::ShiftKind::Identity: shift = "identity"; break;
        case ep::ShiftKind::Scale: shift = "scale"; break;
        case ep::ShiftKind::Rotate: shift = "rotate"; break;
        case ep::ShiftKind::Translate: shift = "translate"; break;
        case ep::ShiftKind::FamilySwap: shift = "family_swap"; break;
    }
    j["ood"] = {{"shift", shift}, {"amount", c.ood.amount}, {"offset", c.ood.offset}};
    j["encoder"] = {{"nn1_widths", c.encoder.nn1_widths},
                    {"nn2_widths", c.encoder.nn2_widths},
                    {"head_hidden", c.encoder.head_hidden},
                    {"higher_moments", c.encoder.higher_moments}};
    return j.dump(2);
}

// ---- optimizer ----

void Adam::step(std::vector<Tensor*>& targets, const std::vector<std::vector<double>>& grads) {
    if (state_.m.empty()) {
        state_.m.resize(targets.size());
        state_.v.resize(targets.size());
        for (size_t i = 0; i < targets.size(); ++i) {
            state_.m[i].assign(static_cast<size_t>(targets[i]->numel()), 0.0);
            state_.v[i].assign(static_cast<size_t>(targets[i]->numel()), 0.0);
        }
    }
    if (grads.size() != targets.size()) {
        throw std::invalid_argument("Adam::step: gradient/target count mismatch");
    }
    ++state_.t;
    double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(state_.t));
    double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(state_.t));
    for (size_t i = 0; i < targets.size(); ++i) {
        std::vector<double> values = targets[i]->data();
        auto& m = state_.m[i];
        auto& v = state_.v[i];
        for (size_t k = 0; k < values.size(); ++k) {
            double gk = grads[i][k];
            m[k] = opt_.beta1 * m[k] + (1.0 - opt_.beta1) * gk;
            v[k] = opt_.beta2 * v[k] + (1.0 - opt_.beta2) * gk * gk;
            values[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + opt_.eps);
        }
        *targets[i] = make_tensor(targets[i]->shape, std::move(values));
    }
}

// ---- checkpoint serialization ----

namespace {

json tensor_to_json(const Tensor& t) {
    return json{{"shape", t.shape}, {"data", t.data()}};
}

Tensor tensor_from_json(const json& j) {
    return make_tensor(j.at("shape").get<ad::Shape>(), j.at("data").get<std::vector<double>>());
}

json layers_to_json(const std::vector<model::DenseLayer>& layers) {
    json arr = json::array();
    for (const auto& l : layers) {
        arr.push_back({{"w", tensor_to_json(l.w)}, {"b", tensor_to_json(l.b)}});
    }
    return arr;
}

std::vector<model::DenseLayer> layers_from_json(const json& arr) {
    std::vector<model::DenseLayer> out;
    for (const auto& l : arr) {
        out.push_back({tensor_from_json(l.at("w")), tensor_from_json(l.at("b"))});
    }
    return out;
}

json params_to_json(const model::ModelParams& p) {
    json alpha = json::array();
    for (const Tensor& a : p.alpha) alpha.push_back(tensor_to_json(a));
    return json{{"layers", layers_to_json(p.layers)},
                {"alpha", alpha},
                {"alpha_scalar", p.alpha_scalar},
                {"modulation_layout", p.modulation_layout}};
}

model::ModelParams params_from_json(const json& j) {
    model::ModelParams p;
    p.layers = layers_from_json(j.at("layers"));
    for (const auto& a : j.at("alpha")) p.alpha.push_back(tensor_from_json(a));
    p.alpha_scalar = j.at("alpha_scalar");
    p.modulation_layout = j.at("modulation_layout").get<std::vector<int64_t>>();
    return p;
}

json encoder_to_json(const enc::EncoderParams& e) {
    return json{{"nn1", layers_to_json(e.nn1)},
                {"mix1", {{"w", tensor_to_json(e.mix1.w)}, {"b", tensor_to_json(e.mix1.b)}}},
                {"nn2", layers_to_json(e.nn2)},
                {"mix2", {{"w", tensor_to_json(e.mix2.w)}, {"b", tensor_to_json(e.mix2.b)}}},
                {"omega_head", layers_to_json(e.omega_head)},
                {"gamma_head", layers_to_json(e.gamma_head)},
                {"z_head", layers_to_json(e.z_head)},
                {"num_layers", e.num_layers},
                {"num_modulated", e.num_modulated},
                {"config",
                 {{"nn1_widths", e.config.nn1_widths},
                  {"nn2_widths", e.config.nn2_widths},
                  {"head_hidden", e.config.head_hidden},
                  {"higher_moments", e.config.higher_moments}}}};
}

enc::EncoderParams encoder_from_json(const json& j) {
    enc::EncoderParams e;
    e.nn1 = layers_from_json(j.at("nn1"));
    e.mix1 = {tensor_from_json(j.at("mix1").at("w")), tensor_from_json(j.at("mix1").at("b"))};
    e.nn2 = layers_from_json(j.at("nn2"));
    e.mix2 = {tensor_from_json(j.at("mix2").at("w")), tensor_from_json(j.at("mix2").at("b"))};
    e.omega_head = layers_from_json(j.at("omega_head"));
    e.gamma_head = layers_from_json(j.at("gamma_head"));
    e.z_head = layers_from_json(j.at("z_head"));
    e.num_layers = j.at("num_layers");
    e.num_modulated = j.at("num_modulated");
    e.config.nn1_widths = j.at("config").at("nn1_widths").get<std::vector<int64_t>>();
    e.config.nn2_widths = j.at("config").at("nn2_widths").get<std::vector<int64_t>>();
    e.config.head_hidden = j.at("config").at("head_hidden");
    e.config.higher_moments = j.at("config").at("higher_moments");
    return e;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    json j;
    j["format_version"] = ckpt.format_version;
    j["config"] = json::parse(config_to_json(ckpt.config));
    j["iteration"] = ckpt.iteration;
    j["episode_counter"] = ckpt.episode_counter;
    j["best_val_accuracy"] = ckpt.best_val_accuracy;
    j["best_iteration"] = ckpt.best_iteration;
    j["evals_since_improvement"] = ckpt.evals_since_improvement;
    j["params"] = params_to_json(ckpt.params);
    j["encoder"] = encoder_to_json(ckpt.encoder);
    j["adam"] = {{"m", ckpt.adam.m}, {"v", ckpt.adam.v}, {"t", ckpt.adam.t}};
    j["has_best"] = ckpt.has_best;
    if (ckpt.has_best) {
        j["best_params"] = params_to_json(ckpt.best_params);
        j["best_encoder"] = encoder_to_json(ckpt.best_encoder);
    }
    std::ofstream out(path);
    if (!out) throw ep::IoError(path + ": cannot open for writing");
    out << j.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ep::IoError(path + ": cannot open");
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw ep::IoError(path + ": parse error at byte " + std::to_string(e.byte) + ": " +
                          e.what());
    }
    int version = j.value("format_version", -1);
    if (version != 1) {
        throw ep::IoError(path + ": checkpoint format_version " + std::to_string(version) +
                          " is not supported; this build reads format_version 1");
    }
    Checkpoint c;
    c.format_version = version;
    c.config = parse_config(j.at("config").dump());
    c.iteration = j.at("iteration");
    c.episode_counter = j.at("episode_counter");
    c.best_val_accuracy = j.at("best_val_accuracy");
    c.best_iteration = j.at("best_iteration");
    c.evals_since_improvement = j.at("evals_since_improvement");
    c.params = params_from_json(j.at("params"));
    c.encoder = encoder_from_json(j.at("encoder"));
    c.adam.m = j.at("adam").at("m").get<std::vector<std::vector<double>>>();
    c.adam.v = j.at("adam").at("v").get<std::vector<std::vector<double>>>();
    c.adam.t = j.at("adam").at("t");
    c.has_best = j.value("has_best", false);
    if (c.has_best) {
        c.best_params = params_from_json(j.at("best_params"));
        c.best_encoder = encoder_from_json(j.at("best_encoder"));
    }
    return c;
}

// ---- pools ----

std::unique_ptr<ep::Pool> build_pool(const TrainConfig& config, const std::string& id) {
    if (id == "train" || id == "val" || id == "test") {
        ep::Split split = id == "train"   ? ep::Split::MetaTrain
                          : id == "val"   ? ep::Split::MetaVal
                                          : ep::Split::MetaTest;
        if (config.source.kind == "dataset") {
            std::string name = id == "train" ? "meta_train" : id == "val" ? "meta_val" : "meta_test";
            return ep::load_manifest_pool(config.source.manifest, name,
                                          ep::Origin::InDistribution);
        }
        return ep::synth_task_family(config.source.family, split);
    }
    if (id == "ood") {
        if (config.source.kind == "dataset") {
            throw ConfigError("ood pool requires a generator-backed source");
        }
        Rng rng(tag_seed(config.source.family.seed, "ood"));
        return ep::make_ood_pool(config.source.family, ep::Split::MetaTest, config.ood, rng);
    }
    if (id.size() > 5 && id.substr(id.size() - 5) == ".json") {
        return ep::load_manifest_pool(id, "meta_test", ep::Origin::OutOfDistribution);
    }
    if (id.size() > 4 && id.substr(id.size() - 4) == ".csv") {
        ep::PoolData data = ep::load_pool(id, ep::PoolFormat::CsvLabeled);
        return ep::make_dataset_pool(std::move(data), ep::Normalization{},
                                     ep::Origin::OutOfDistribution);
    }
    throw ConfigError("unknown pool id '" + id + "' (expected train|val|test|ood or a path)");
}

// ---- metrics ----

namespace {

class MetricsWriter {
  public:
    explicit MetricsWriter(const std::string& path) {
        if (path.empty()) return;
        out_.open(path);
        if (!out_) throw ep::IoError(path + ": cannot open for writing");
        out_ << "run_id,seed,cell,iter,split,metric,value\n";
    }
    void row(const std::string& run_id, uint64_t seed, const std::string& cell, int iter,
             const std::string& split, const std::string& metric, double value) {
        if (!out_.is_open()) return;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", value);
        out_ << run_id << "," << seed << "," << cell << "," << iter << "," << split << ","
             << metric << "," << buf << "\n";
    }
    void flush() {
        if (out_.is_open()) out_.flush();
    }

  private:
    std::ofstream out_;
};

double accuracy_of(const std::vector<std::vector<double>>& probs, const std::vector<int>& labels) {
    int correct = 0;
    for (size_t i = 0; i < probs.size(); ++i) {
        size_t arg = 0;
        for (size_t j = 1; j < probs[i].size(); ++j) {
            if (probs[i][j] > probs[i][arg]) arg = j;
        }
        if (static_cast<int>(arg) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(probs.size());
}

double validation_accuracy(const model::ModelParams& params, const enc::EncoderParams& encp,
                           const TrainConfig& config, const ep::Pool& pool, int iteration) {
    double sum = 0.0;
    int n = 0;
    for (int i = 0; i < config.val_episodes; ++i) {
        uint64_t s = mix_seed(tag_seed(config.seed, "val"),
                              static_cast<uint64_t>(iteration) * 1000003ULL +
                                  static_cast<uint64_t>(i));
        Rng rng(s);
        try {
            ep::Episode episode = ep::sample_episode(config.dist, pool, rng);
            auto probs = bal::predict_naive(params, encp, episode, config.variant);
            sum += accuracy_of(probs, episode.query_y);
            ++n;
        } catch (const bal::DivergenceError&) {
            continue;
        }
    }
    return n > 0 ? sum / n : 0.0;
}

}  // namespace

// ---- training ----

TrainResult meta_train(const TrainConfig& config, const std::string& out_dir,
                       const Checkpoint* resume) {
    auto train_pool = build_pool(config, "train");
    auto val_pool = build_pool(config, "val");

    Checkpoint state;
    if (resume) {
        if (resume->format_version != 1) {
            throw ep::IoError("resume checkpoint has unsupported format_version");
        }
        state = *resume;
        state.config = config;
    } else {
        state.config = config;
        Rng theta_rng(tag_seed(config.seed, "init_theta"));
        std::vector<int64_t> arch = config.arch;
        arch[0] = train_pool->feature_dim();
        state.params = model::init_params(arch, theta_rng, config.alpha_scalar, config.alpha_init);
        Rng psi_rng(tag_seed(config.seed, "init_psi"));
        state.encoder = enc::init_encoder(train_pool->feature_dim(), state.params.num_layers(),
                                          state.params.total_modulated(), config.encoder, psi_rng);
    }

    Adam adam(config.outer_lr, config.outer_optimizer);
    adam.state() = state.adam;

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
    MetricsWriter metrics(out_dir.empty() ? "" : out_dir + "/metrics.csv");
    const std::string run_id = "train-" + std::to_string(config.seed);

    TrainResult result;
    // Divergence accounting over a sliding window of recent episodes.
    constexpr size_t kWindow = 40;
    std::deque<bool> window;
    size_t window_skipped = 0;

    std::vector<Tensor*> targets;
    for (Tensor* t : model::param_tensors(state.params)) targets.push_back(t);
    for (Tensor* t : enc::param_tensors(state.encoder)) targets.push_back(t);

    for (int iter = state.iteration; iter < config.total_iters; ++iter) {
        std::vector<std::vector<double>> acc;
        int successes = 0;
        double batch_loss = 0.0;
        for (int b = 0; b < config.meta_batch; ++b) {
            ++state.episode_counter;
            uint64_t stream = mix_seed(tag_seed(config.seed, "episode"), state.episode_counter);
            Rng ep_rng(stream);
            bool skipped = false;
            try {
                ep::Episode episode = ep::sample_episode(config.dist, *train_pool, ep_rng);
                bal::ObjectiveEval eval = bal::meta_objective_eval(
                    state.params, state.encoder, episode, config.variant,
                    mix_seed(stream, 0x5e5e5e5eULL), true);
                if (acc.empty()) {
                    acc.resize(eval.grads.size());
                    for (size_t i = 0; i < acc.size(); ++i) {
                        acc[i].assign(eval.grads[i].size(), 0.0);
                    }
                }
                for (size_t i = 0; i < acc.size(); ++i) {
                    for (size_t k = 0; k < acc[i].size(); ++k) acc[i][k] += eval.grads[i][k];
                }
                batch_loss += eval.total;
                ++successes;
            } catch (const bal::DivergenceError& e) {
                skipped = true;
                ++result.skipped;
                std::cerr << "iter " << iter << ": skipping episode: " << e.what() << "\n";
            }
            ++result.attempted;
            window.push_back(skipped);
            if (skipped) ++window_skipped;
            if (window.size() > kWindow) {
                if (window.front()) --window_skipped;
                window.pop_front();
            }
            if (window.size() == kWindow && window_skipped * 2 > kWindow) {
                throw std::runtime_error(
                    "meta_train: more than half of the last " + std::to_string(kWindow) +
                    " episodes diverged (" + std::to_string(window_skipped) + "); aborting run");
            }
        }

        if (successes > 0) {
            for (auto& gbuf : acc) {
                for (auto& gk : gbuf) gk /= static_cast<double>(successes);
            }
            adam.step(targets, acc);
            result.loss_trace.push_back(batch_loss / successes);
        } else {
            result.loss_trace.push_back(0.0);
        }
        metrics.row(run_id, config.seed, "base", iter + 1, "meta_train", "objective",
                    result.loss_trace.back());

        state.iteration = iter + 1;
        if (config.eval_every > 0 && (iter + 1) % config.eval_every == 0) {
            double val_acc = validation_accuracy(state.params, state.encoder, config, *val_pool,
                                                 iter + 1);
            result.val_trace.push_back({iter + 1, val_acc});
            metrics.row(run_id, config.seed, "base", iter + 1, "meta_val", "accuracy", val_acc);
            metrics.flush();
            if (val_acc > state.best_val_accuracy) {
                state.best_val_accuracy = val_acc;
                state.best_iteration = iter + 1;
                state.evals_since_improvement = 0;
                state.has_best = true;
                state.best_params = state.params;
                state.best_encoder = state.encoder;
            } else if (++state.evals_since_improvement >= config.patience) {
                result.stopped_early = true;
                break;
            }
        }
    }

    state.adam = adam.state();
    result.checkpoint = state;
    if (!out_dir.empty()) {
        save_checkpoint(state, out_dir + "/last.json");
        Checkpoint best = state;
        if (state.has_best) {
            best.params = state.best_params;
            best.encoder = state.best_encoder;
            best.iteration = state.best_iteration;
        }
        best.has_best = false;
        best.best_params = {};
        best.best_encoder = {};
        save_checkpoint(best, out_dir + "/best.json");
    }
    return result;
}

std::pair<std::vector<double>, std::vector<double>> posterior_summary(
    const enc::EncoderParams& encp, const ep::Episode& episode) {
    ad::Graph g;
    enc::EncoderParams bound = enc::bind_params(g, encp);
    std::vector<Tensor> reprs;
    for (const Tensor& s : episode.support) {
        reprs.push_back(enc::encode_class(g, bound, g.leaf(s)));
    }
    Tensor v = enc::encode_task(g, bound, reprs);
    enc::BalancingPosterior post = enc::posterior_params(g, bound, reprs, v);
    return {bal::expected_omega(post), bal::expected_gamma(post)};
}

EvalReport evaluate(const Checkpoint& ckpt, const ep::Pool& pool, int n_episodes, PredictMode mode,
                    int samples, uint64_t seed, const EvalOptions& opts) {
    if (n_episodes < 1) throw std::invalid_argument("evaluate: n_episodes must be >= 1");
    const TrainConfig& config = ckpt.config;
    EvalReport report;
    report.requested = n_episodes;
    report.per_class_accuracy.assign(static_cast<size_t>(config.dist.classes_per_episode), 0.0);
    std::vector<int64_t> per_class_total(static_cast<size_t>(config.dist.classes_per_episode), 0);
    report.mean_gamma.assign(static_cast<size_t>(ckpt.params.num_layers()), 0.0);

    for (int i = 0; i < n_episodes; ++i) {
        Rng ep_rng(mix_seed(tag_seed(seed, "eval"), static_cast<uint64_t>(i)));
        try {
            ep::Episode episode =
                opts.forced_shared.has_value() || opts.forced_shot.has_value()
                    ? ep::sample_episode_forced(config.dist, pool, ep_rng,
                                                opts.forced_shared.value_or(true),
                                                opts.forced_shot)
                    : ep::sample_episode(config.dist, pool, ep_rng);
            Rng pred_rng(mix_seed(tag_seed(seed, "pred"), static_cast<uint64_t>(i)));
            std::vector<std::vector<double>> probs =
                mode == PredictMode::Mc
                    ? bal::predict_mc(ckpt.params, ckpt.encoder, episode, config.variant, samples,
                                      pred_rng)
                    : bal::predict_naive(ckpt.params, ckpt.encoder, episode, config.variant);

            report.episode_accuracy.push_back(accuracy_of(probs, episode.query_y));
            for (size_t q = 0; q < probs.size(); ++q) {
                size_t arg = 0;
                for (size_t j = 1; j < probs[q].size(); ++j) {
                    if (probs[q][j] > probs[q][arg]) arg = j;
                }
                int y = episode.query_y[q];
                ++per_class_total[static_cast<size_t>(y)];
                if (static_cast<int>(arg) == y) {
                    report.per_class_accuracy[static_cast<size_t>(y)] += 1.0;
                }
            }

            auto [omega_mean, gamma_mean] = posterior_summary(ckpt.encoder, episode);
            for (size_t l = 0; l < gamma_mean.size(); ++l) report.mean_gamma[l] += gamma_mean[l];
            auto counts = episode.counts();
            for (size_t c = 0; c < omega_mean.size(); ++c) {
                report.omega_vs_count.push_back({counts[c], omega_mean[c]});
            }
            auto mn = std::min_element(counts.begin(), counts.end());
            auto mx = std::max_element(counts.begin(), counts.end());
            if (*mn != *mx) {
                report.omega_smallest_mean += omega_mean[static_cast<size_t>(mn - counts.begin())];
                report.omega_largest_mean += omega_mean[static_cast<size_t>(mx - counts.begin())];
                ++report.omega_trend_episodes;
            }
            if (opts.displacement) {
                Rng disp_rng(mix_seed(tag_seed(seed, "disp"), static_cast<uint64_t>(i)));
                auto [d_first, d_outside] = bal::displacement_diagnostic(
                    ckpt.params, ckpt.encoder, episode, config.variant,
                    opts.displacement_samples, config.variant.inner_steps_test, disp_rng);
                report.d_mean_first += d_first;
                report.d_mean_outside += d_outside;
                report.has_displacement = true;
            }
            ++report.evaluated;
        } catch (const bal::DivergenceError&) {
            ++report.skipped;
        }
    }

    int n = report.evaluated;
    if (n > 0) {
        for (double a : report.episode_accuracy) report.mean_accuracy += a;
        report.mean_accuracy /= n;
        if (n > 1) {
            double ss = 0.0;
            for (double a : report.episode_accuracy) {
                ss += (a - report.mean_accuracy) * (a - report.mean_accuracy);
            }
            double sd = std::sqrt(ss / (n - 1));
            report.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(n));
        }
        for (auto& gsum : report.mean_gamma) gsum /= n;
        if (report.omega_trend_episodes > 0) {
            report.omega_smallest_mean /= report.omega_trend_episodes;
            report.omega_largest_mean /= report.omega_trend_episodes;
        }
        for (size_t c = 0; c < report.per_class_accuracy.size(); ++c) {
            if (per_class_total[c] > 0) {
                report.per_class_accuracy[c] /= static_cast<double>(per_class_total[c]);
            }
        }
        if (report.has_displacement) {
            report.d_mean_first /= n;
            report.d_mean_outside /= n;
        }
    }
    return report;
}

// ---- sweep ----

SweepAxes parse_axes(const std::string& spec) {
    SweepAxes axes;
    std::stringstream ss(spec);
    std::string part;
    while (std::getline(ss, part, ';')) {
        if (part.empty()) continue;
        auto colon = part.find(':');
        if (colon == std::string::npos) {
            throw ConfigError("axes: expected key:v1,v2 in '" + part + "'");
        }
        std::string key = part.substr(0, colon);
        std::stringstream vals(part.substr(colon + 1));
        std::string v;
        while (std::getline(vals, v, ',')) {
            if (key == "variants") {
                axes.variants.push_back(v);
            } else if (key == "deterministic") {
                axes.deterministic.push_back(v == "true" || v == "1");
            } else if (key == "task_size") {
                axes.task_sizes.push_back(std::stoi(v));
            } else if (key == "samples") {
                axes.mc_samples.push_back(std::stoi(v));
            } else {
                throw ConfigError("axes: unknown axis '" + key + "'");
            }
        }
    }
    return axes;
}

namespace {

bal::VariantConfig variant_for(const std::string& name, const bal::VariantConfig& base) {
    bal::VariantConfig v = base;
    if (name == "full") {
        v.use_omega = v.use_gamma = v.use_z = true;
    } else if (name == "omega") {
        v.use_omega = true;
        v.use_gamma = v.use_z = false;
    } else if (name == "gamma") {
        v.use_gamma = true;
        v.use_omega = v.use_z = false;
    } else if (name == "z") {
        v.use_z = true;
        v.use_omega = v.use_gamma = false;
    } else if (name == "none") {
        v.use_omega = v.use_gamma = v.use_z = false;
    } else {
        throw ConfigError("unknown variant cell '" + name + "'");
    }
    return v;
}

}  // namespace

void ablation_sweep(const TrainConfig& config, const SweepAxes& axes, const std::string& out_csv) {
    MetricsWriter metrics(out_csv);
    const std::string run_id = "sweep-" + std::to_string(config.seed);
    constexpr int kEvalEpisodes = 200;

    std::vector<std::string> variants = axes.variants.empty()
                                            ? std::vector<std::string>{"full"}
                                            : axes.variants;
    std::vector<bool> determinism = axes.deterministic.empty()
                                        ? std::vector<bool>{config.variant.deterministic}
                                        : axes.deterministic;
    std::vector<int> task_sizes = axes.task_sizes.empty() ? std::vector<int>{0} : axes.task_sizes;
    std::vector<int> samples = axes.mc_samples.empty()
                                   ? std::vector<int>{config.variant.mc_test}
                                   : axes.mc_samples;

    for (const std::string& vname : variants) {
        for (bool det : determinism) {
            std::string cell_base = vname + (det ? "+det" : "");
            TrainConfig cfg = config;
            cfg.variant = variant_for(vname, config.variant);
            cfg.variant.deterministic = det;
            Checkpoint best;
            try {
                TrainResult tr = meta_train(cfg);
                best = tr.checkpoint;
                if (best.has_best) {
                    best.params = tr.checkpoint.best_params;
                    best.encoder = tr.checkpoint.best_encoder;
                }
            } catch (const std::exception& e) {
                std::cerr << "sweep cell " << cell_base << ": training failed: " << e.what()
                          << "\n";
                metrics.row(run_id, config.seed, cell_base, 0, "meta_train", "train_error", 1.0);
                continue;
            }

            std::vector<std::pair<std::string, std::unique_ptr<ep::Pool>>> pools;
            pools.emplace_back("meta_test", build_pool(cfg, "test"));
            if (cfg.ood.kind != ep::ShiftKind::Identity && cfg.source.kind != "dataset") {
                pools.emplace_back("ood", build_pool(cfg, "ood"));
            }
            for (int ts : task_sizes) {
                for (int s : samples) {
                    std::string cell = cell_base + "+n" + std::to_string(ts) + "+s" +
                                       std::to_string(s);
                    EvalOptions opts;
                    if (ts > 0) {
                        opts.forced_shared = true;
                        opts.forced_shot = ts;
                    }
                    for (auto& [split, pool] : pools) {
                        try {
                            EvalReport rep = evaluate(best, *pool, kEvalEpisodes, PredictMode::Mc,
                                                      s, cfg.seed, opts);
                            int iter = best.iteration;
                            metrics.row(run_id, cfg.seed, cell, iter, split, "accuracy_mean",
                                        rep.mean_accuracy);
                            metrics.row(run_id, cfg.seed, cell, iter, split, "accuracy_ci95",
                                        rep.ci95);
                            metrics.row(run_id, cfg.seed, cell, iter, split, "episodes_evaluated",
                                        rep.evaluated);
                            metrics.row(run_id, cfg.seed, cell, iter, split, "episodes_skipped",
                                        rep.skipped);
                            for (size_t l = 0; l < rep.mean_gamma.size(); ++l) {
                                metrics.row(run_id, cfg.seed, cell, iter, split,
                                            "mean_gamma_" + std::to_string(l), rep.mean_gamma[l]);
                            }
                            if (rep.omega_trend_episodes > 0) {
                                metrics.row(run_id, cfg.seed, cell, iter, split,
                                            "omega_smallest_mean", rep.omega_smallest_mean);
                                metrics.row(run_id, cfg.seed, cell, iter, split,
                                            "omega_largest_mean", rep.omega_largest_mean);
                            }
                            for (size_t c = 0; c < rep.per_class_accuracy.size(); ++c) {
                                metrics.row(run_id, cfg.seed, cell, iter, split,
                                            "class_accuracy_" + std::to_string(c),
                                            rep.per_class_accuracy[c]);
                            }
                        } catch (const std::exception& e) {
                            std::cerr << "sweep cell " << cell << " (" << split
                                      << "): evaluation failed: " << e.what() << "\n";
                            metrics.row(run_id, cfg.seed, cell, 0, split, "eval_error", 1.0);
                        }
                    }
                }
            }
            metrics.flush();
        }
    }
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) {
        throw std::invalid_argument("spearman: needs two equal-length series of size >= 2");
    }
    auto ranks = [](const std::vector<double>& x) {
        std::vector<size_t> order(x.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](size_t i, size_t j) { return x[i] < x[j]; });
        std::vector<double> r(x.size());
        size_t i = 0;
        while (i < order.size()) {
            size_t j = i;
            while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
            double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= ra.size();
    mb /= rb.size();
    double num = 0, da = 0, db = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da == 0.0 || db == 0.0) return 0.0;
    return num / std::sqrt(da * db);
}

std::string eval_report_json(const EvalReport& r) {
    json j;
    j["requested"] = r.requested;
    j["evaluated"] = r.evaluated;
    j["skipped"] = r.skipped;
    j["mean_accuracy"] = r.mean_accuracy;
    j["ci95"] = r.ci95;
    j["per_class_accuracy"] = r.per_class_accuracy;
    j["mean_gamma"] = r.mean_gamma;
    if (r.omega_trend_episodes > 0) {
        j["omega_smallest_mean"] = r.omega_smallest_mean;
        j["omega_largest_mean"] = r.omega_largest_mean;
        j["omega_trend_episodes"] = r.omega_trend_episodes;
    }
    if (r.has_displacement) {
        j["d_mean_first"] = r.d_mean_first;
        j["d_mean_outside"] = r.d_mean_outside;
    }
    return j.dump(2);
}

}  // namespace metabal::train
