#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "metabal/balancing.hpp"
#include "metabal/tensor.hpp"
#include "metabal/trainer.hpp"

#include <json.hpp>

namespace py = pybind11;
using namespace metabal;

namespace {

std::string train_from_json(const std::string& config_json, const std::string& out_dir) {
    train::TrainConfig config = train::parse_config(config_json);
    train::TrainResult result = train::meta_train(config, out_dir);
    nlohmann::json j;
    j["iterations"] = result.checkpoint.iteration;
    j["episodes_attempted"] = result.attempted;
    j["episodes_skipped"] = result.skipped;
    j["stopped_early"] = result.stopped_early;
    j["best_val_accuracy"] = result.checkpoint.best_val_accuracy;
    j["loss_trace"] = result.loss_trace;
    return j.dump();
}

std::string evaluate_checkpoint(const std::string& ckpt_path, const std::string& pool_id,
                                int episodes, const std::string& mode, int samples,
                                int64_t seed) {
    train::Checkpoint ckpt = train::load_checkpoint(ckpt_path);
    auto pool = train::build_pool(ckpt.config, pool_id);
    uint64_t eval_seed = seed >= 0 ? static_cast<uint64_t>(seed) : ckpt.config.seed;
    train::EvalReport report = train::evaluate(
        ckpt, *pool, episodes, mode == "mc" ? train::PredictMode::Mc : train::PredictMode::Naive,
        samples, eval_seed);
    return train::eval_report_json(report);
}

std::string sample_episodes_json(const std::string& config_json, int count, uint64_t seed) {
    train::TrainConfig config = train::parse_config(config_json);
    auto pool = train::build_pool(config, "train");
    std::vector<ep::Episode> episodes;
    for (int i = 0; i < count; ++i) {
        Rng rng(mix_seed(tag_seed(seed, "sample-episodes"), static_cast<uint64_t>(i)));
        episodes.push_back(ep::sample_episode(config.dist, *pool, rng));
    }
    return ep::episodes_to_json(episodes);
}

double kl_standard_normal(const std::vector<double>& mu, const std::vector<double>& sigma) {
    ad::Graph g;
    return bal::kl_block(g, g.constant({static_cast<int64_t>(mu.size())}, mu),
                         g.constant({static_cast<int64_t>(sigma.size())}, sigma))
        .scalar();
}

// Max relative gradient error of a random two-layer network against central
// finite differences; a quick numerical self-check for smoke tests.
double gradient_check_max_error(uint64_t seed) {
    Rng rng(seed);
    auto net = [](ad::Graph& g, const std::vector<ad::Tensor>& p) {
        ad::Tensor x = g.constant({4, 3}, {0.3, -0.8, 1.1, 0.4, -0.5, 0.9, 1.2, 0.1, -0.7, 0.6,
                                           -1.1, 0.2});
        ad::Tensor h = g.relu(g.matmul(x, p[0]));
        ad::Tensor out = g.softmax(g.matmul(h, p[1]), 1);
        return g.reduce_mean(g.mul(out, out));
    };
    auto rand_tensor = [&rng](ad::Shape shape) {
        std::vector<double> v(static_cast<size_t>(ad::numel_of(shape)));
        for (auto& x : v) {
            x = 2.0 * rng.uniform() - 1.0;
            if (std::abs(x) < 1e-2) x = x < 0 ? -1e-2 : 1e-2;
        }
        return ad::make_tensor(std::move(shape), std::move(v));
    };
    std::vector<ad::Tensor> params{rand_tensor({3, 5}), rand_tensor({5, 4})};
    return ad::finite_diff_check(net, params, 1e-5);
}

}  // namespace

PYBIND11_MODULE(metabal, m) {
    m.doc() = "balanced episodic meta-learning: training, evaluation and episode sampling";

    m.def("default_config", [] { return train::config_to_json(train::TrainConfig{}); },
          "default training configuration as a JSON string");
    m.def("train", &train_from_json, py::arg("config_json"), py::arg("out_dir") = "",
          "meta-train from a config JSON string; returns a JSON summary");
    m.def("evaluate", &evaluate_checkpoint, py::arg("checkpoint"), py::arg("pool") = "test",
          py::arg("episodes") = 200, py::arg("mode") = "mc", py::arg("samples") = 10,
          py::arg("seed") = -1, "evaluate a checkpoint; returns a JSON report");
    m.def("sample_episodes", &sample_episodes_json, py::arg("config_json"), py::arg("count"),
          py::arg("seed") = 0, "draw episodes from the config's distribution as JSON");
    m.def("kl_standard_normal", &kl_standard_normal, py::arg("mu"), py::arg("sigma"),
          "closed-form KL(N(mu, sigma^2) || N(0,1)) summed over dimensions");
    m.def("gradient_check_max_error", &gradient_check_max_error, py::arg("seed") = 0,
          "max relative error of analytic gradients vs central differences");

    m.attr("__version__") = "0.1.0";
}
