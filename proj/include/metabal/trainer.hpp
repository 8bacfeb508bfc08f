#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "metabal/balancing.hpp"
#include "metabal/episodes.hpp"
#include "metabal/rng.hpp"
#include "metabal/set_encoder.hpp"
#include "metabal/task_model.hpp"

namespace metabal::train {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// How episodes are generated: a synthetic family or an on-disk manifest.
struct SourceConfig {
    std::string kind = "gaussian_blobs";  // gaussian_blobs | ring_mixtures | dataset
    ep::FamilyParams family;
    std::string manifest;
};

struct OptimizerConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    uint64_t seed = 0;
    std::vector<int64_t> arch{2, 32, 32, 5};
    int meta_batch = 4;
    double outer_lr = 1e-3;
    OptimizerConfig outer_optimizer;
    int total_iters = 2000;
    int eval_every = 200;
    int patience = 10;
    int val_episodes = 600;
    bool alpha_scalar = false;
    double alpha_init = 0.01;
    bal::VariantConfig variant;
    ep::EpisodeDistribution dist;
    SourceConfig source;
    ep::OodShift ood;
    enc::EncoderConfig encoder;
};

// Strict parse: unknown keys are a hard error.
TrainConfig parse_config(const std::string& json_text);
TrainConfig parse_config_file(const std::string& path);
std::string config_to_json(const TrainConfig& config);

struct AdamState {
    std::vector<std::vector<double>> m, v;
    int64_t t = 0;
};

// First-order adaptive-moment outer optimizer; a zero gradient leaves
// parameters and fresh moments unchanged.
class Adam {
  public:
    Adam(double lr, const OptimizerConfig& opt) : lr_(lr), opt_(opt) {}
    void step(std::vector<ad::Tensor*>& targets, const std::vector<std::vector<double>>& grads);
    AdamState& state() { return state_; }
    const AdamState& state() const { return state_; }

  private:
    double lr_;
    OptimizerConfig opt_;
    AdamState state_;
};

struct Checkpoint {
    int format_version = 1;
    TrainConfig config;
    model::ModelParams params;
    enc::EncoderParams encoder;
    AdamState adam;
    uint64_t episode_counter = 0;
    int iteration = 0;
    double best_val_accuracy = -1.0;
    int best_iteration = -1;
    int evals_since_improvement = 0;
    bool has_best = false;
    model::ModelParams best_params;
    enc::EncoderParams best_encoder;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct TrainResult {
    Checkpoint checkpoint;           // final state, resumable
    std::vector<double> loss_trace;  // mean objective per outer iteration
    std::vector<std::pair<int, double>> val_trace;
    int attempted = 0;
    int skipped = 0;
    bool stopped_early = false;
};

// Builds pools from the config; `id` is train|val|test|ood or a path to a
// manifest (.json) or labelled csv.
std::unique_ptr<ep::Pool> build_pool(const TrainConfig& config, const std::string& id);

TrainResult meta_train(const TrainConfig& config, const std::string& out_dir = "",
                       const Checkpoint* resume = nullptr);

enum class PredictMode { Mc, Naive };

struct EvalOptions {
    std::optional<bool> forced_shared;
    std::optional<int> forced_shot;
    bool displacement = false;
    int displacement_samples = 10;
};

struct EvalReport {
    int requested = 0, evaluated = 0, skipped = 0;
    std::vector<double> episode_accuracy;
    double mean_accuracy = 0.0;
    double ci95 = 0.0;  // 1.96 * stderr over episode accuracies
    std::vector<double> per_class_accuracy;
    std::vector<double> mean_gamma;                        // E[gamma_l], averaged
    std::vector<std::pair<int64_t, double>> omega_vs_count;  // (N_c, E[omega_c])
    // Mean E[omega] of the smallest and largest class, over episodes whose
    // class counts are not all equal.
    double omega_smallest_mean = 0.0, omega_largest_mean = 0.0;
    int omega_trend_episodes = 0;
    double d_mean_first = 0.0, d_mean_outside = 0.0;
    bool has_displacement = false;
};

EvalReport evaluate(const Checkpoint& ckpt, const ep::Pool& pool, int n_episodes,
                    PredictMode mode, int samples, uint64_t seed, const EvalOptions& opts = {});

// Posterior summaries for one episode under the checkpointed encoder:
// (E[omega] per class, E[gamma] per layer).
std::pair<std::vector<double>, std::vector<double>> posterior_summary(
    const enc::EncoderParams& encp, const ep::Episode& episode);

struct SweepAxes {
    std::vector<std::string> variants;  // full|omega|gamma|z|none
    std::vector<bool> deterministic;
    std::vector<int> task_sizes;   // forced shared-N at evaluation; 0 = natural
    std::vector<int> mc_samples;   // S at evaluation
};

SweepAxes parse_axes(const std::string& spec);

// Cross-product over the axes; one long-format CSV row per (cell, seed,
// metric). Per-cell failures are recorded and the sweep continues.
void ablation_sweep(const TrainConfig& config, const SweepAxes& axes,
                    const std::string& out_csv);

double spearman(const std::vector<double>& a, const std::vector<double>& b);

std::string eval_report_json(const EvalReport& report);

}  // namespace metabal::train
