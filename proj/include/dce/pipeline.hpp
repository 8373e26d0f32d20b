#pragma once

#include "dce/fitting.hpp"
#include "dce/phantom.hpp"

#include "json.hpp"

#include <optional>
#include <string>

namespace dce {

// Command implementations behind the CLI. Each returns a process exit code:
// 0 success, 2 configuration/usage error, 3 I/O error, 4 fit-failure policy,
// 5 non-finite training loss. Diagnostics go to stderr, summaries to stdout.

struct SimulateArgs {
    std::string config_path;  // empty => defaults
    std::string out_dir = ".";
    std::optional<uint64_t> seed;  // overrides the config seed
};
int cmd_simulate(const SimulateArgs& args);

struct FitArgs {
    FitMethod method = FitMethod::LLS;
    TkModel model = TkModel::Patlak;
    std::string series, aif, t1, s0, mask;
    std::string out_dir = ".";
};
int cmd_fit(const FitArgs& args);

struct TrainArgs {
    std::string config_path, data_dir;
    std::string out_dir = ".";
    std::string resume;  // checkpoint path, empty => fresh
};
int cmd_train(const TrainArgs& args);

struct InferArgs {
    std::string checkpoint, series, mask;  // mask optional (empty)
    std::string out_dir = ".";
};
int cmd_infer(const InferArgs& args);

struct EvaluateArgs {
    std::string pred, reference, mask;
    std::string regions;  // optional labels volume
    std::string out_csv = "metrics.csv";
    std::string plot;          // optional SVG path
    std::string aif_true;      // optional CSV for the overlay
    std::string aif_estimate;  // optional CSV for the overlay
};
int cmd_evaluate(const EvaluateArgs& args);

nlohmann::json phantom_config_to_json(const PhantomConfig& cfg);
PhantomConfig phantom_config_from_json(const nlohmann::json& j);

}  // namespace dce
