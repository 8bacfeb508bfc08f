#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>

#include "metabal/trainer.hpp"

using namespace metabal;

int main(int argc, char** argv) {
    CLI::App app{"metabal: balanced episodic meta-learning on imbalanced few-shot tasks"};
    app.require_subcommand(1);

    // train
    std::string config_path, out_dir, resume_path;
    int64_t seed_override = -1;
    auto* train_cmd = app.add_subcommand("train", "meta-train a model from a config file");
    train_cmd->add_option("--config", config_path, "config JSON path")->required();
    train_cmd->add_option("--seed", seed_override, "override the config seed");
    train_cmd->add_option("--out", out_dir, "output directory (metrics, checkpoints)");
    train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");

    // eval
    std::string ckpt_path, pool_id = "test", mode = "mc";
    int episodes = 200, samples = 10;
    int64_t eval_seed = -1;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a pool");
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    eval_cmd->add_option("--pool", pool_id, "train|val|test|ood or a manifest/csv path");
    eval_cmd->add_option("--episodes", episodes, "number of evaluation episodes");
    eval_cmd->add_option("--mode", mode, "mc or naive")->check(CLI::IsMember({"mc", "naive"}));
    eval_cmd->add_option("--samples", samples, "posterior samples for mc mode");
    eval_cmd->add_option("--seed", eval_seed, "evaluation seed (default: config seed)");

    // sweep
    std::string axes_spec, sweep_out = "sweep.csv";
    auto* sweep_cmd = app.add_subcommand("sweep", "ablation sweep over variant/eval axes");
    sweep_cmd->add_option("--config", config_path, "config JSON path")->required();
    sweep_cmd->add_option("--axes", axes_spec,
                          "e.g. variants:full,omega;task_size:5,25,50;samples:1,10");
    sweep_cmd->add_option("--out", sweep_out, "output CSV path");

    // sample-episodes
    std::string dist_path, episodes_out;
    int count = 10;
    auto* sample_cmd =
        app.add_subcommand("sample-episodes", "draw episodes and write them as JSON");
    sample_cmd->add_option("--dist", dist_path, "config JSON carrying dist/source")->required();
    sample_cmd->add_option("--count", count, "number of episodes");
    sample_cmd->add_option("--out", episodes_out, "output JSON path")->required();

    // diag-displacement
    int disp_samples = 10, disp_episodes = 20;
    auto* diag_cmd = app.add_subcommand(
        "diag-displacement", "parameter displacement with z expectation inside vs outside");
    diag_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    diag_cmd->add_option("--pool", pool_id, "train|val|test|ood or a manifest/csv path");
    diag_cmd->add_option("--samples", disp_samples, "MC samples over z");
    diag_cmd->add_option("--episodes", disp_episodes, "episodes to average over");
    diag_cmd->add_option("--seed", eval_seed, "evaluation seed (default: config seed)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) {
            train::TrainConfig config = train::parse_config_file(config_path);
            if (seed_override >= 0) config.seed = static_cast<uint64_t>(seed_override);
            train::Checkpoint resume;
            const train::Checkpoint* resume_ptr = nullptr;
            if (!resume_path.empty()) {
                resume = train::load_checkpoint(resume_path);
                resume_ptr = &resume;
            }
            train::TrainResult result = train::meta_train(config, out_dir, resume_ptr);
            nlohmann::json summary;
            summary["iterations"] = result.checkpoint.iteration;
            summary["episodes_attempted"] = result.attempted;
            summary["episodes_skipped"] = result.skipped;
            summary["stopped_early"] = result.stopped_early;
            summary["best_val_accuracy"] = result.checkpoint.best_val_accuracy;
            summary["best_iteration"] = result.checkpoint.best_iteration;
            if (!result.loss_trace.empty()) summary["final_objective"] = result.loss_trace.back();
            std::cout << summary.dump(2) << "\n";
        } else if (eval_cmd->parsed()) {
            train::Checkpoint ckpt = train::load_checkpoint(ckpt_path);
            auto pool = train::build_pool(ckpt.config, pool_id);
            uint64_t seed = eval_seed >= 0 ? static_cast<uint64_t>(eval_seed) : ckpt.config.seed;
            train::EvalReport report = train::evaluate(
                ckpt, *pool, episodes,
                mode == "mc" ? train::PredictMode::Mc : train::PredictMode::Naive, samples, seed);
            std::cout << train::eval_report_json(report) << "\n";
        } else if (sweep_cmd->parsed()) {
            train::TrainConfig config = train::parse_config_file(config_path);
            train::ablation_sweep(config, train::parse_axes(axes_spec), sweep_out);
            std::cout << "wrote " << sweep_out << "\n";
        } else if (sample_cmd->parsed()) {
            train::TrainConfig config = train::parse_config_file(dist_path);
            auto pool = train::build_pool(config, "train");
            std::vector<ep::Episode> out;
            for (int i = 0; i < count; ++i) {
                Rng rng(mix_seed(tag_seed(config.seed, "sample-episodes"),
                                 static_cast<uint64_t>(i)));
                out.push_back(ep::sample_episode(config.dist, *pool, rng));
            }
            std::ofstream f(episodes_out);
            if (!f) throw ep::IoError(episodes_out + ": cannot open for writing");
            f << ep::episodes_to_json(out) << "\n";
            std::cout << "wrote " << count << " episodes to " << episodes_out << "\n";
        } else if (diag_cmd->parsed()) {
            train::Checkpoint ckpt = train::load_checkpoint(ckpt_path);
            auto pool = train::build_pool(ckpt.config, pool_id);
            uint64_t seed = eval_seed >= 0 ? static_cast<uint64_t>(eval_seed) : ckpt.config.seed;
            train::EvalOptions opts;
            opts.displacement = true;
            opts.displacement_samples = disp_samples;
            train::EvalReport report = train::evaluate(ckpt, *pool, disp_episodes,
                                                       train::PredictMode::Naive, 1, seed, opts);
            nlohmann::json j;
            j["episodes"] = report.evaluated;
            j["d_mean_first"] = report.d_mean_first;
            j["d_mean_outside"] = report.d_mean_outside;
            j["mean_accuracy"] = report.mean_accuracy;
            std::cout << j.dump(2) << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
