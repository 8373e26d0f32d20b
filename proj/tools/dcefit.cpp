// dcefit: simulate, fit, train, infer, and evaluate DCE-MRI pharmacokinetic
// parameter maps from the command line.
#include "dce/pipeline.hpp"

#include "CLI11.hpp"

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"DCE-MRI pharmacokinetic parameter estimation toolkit"};
    app.require_subcommand(1);

    dce::SimulateArgs sim;
    uint64_t seed_flag = 0;
    CLI::App* simulate = app.add_subcommand("simulate", "Generate a digital phantom dataset");
    simulate->add_option("--config", sim.config_path, "Phantom config JSON (defaults if omitted)");
    simulate->add_option("--out", sim.out_dir, "Output directory");
    CLI::Option* seed_opt = simulate->add_option("--seed", seed_flag, "Override the config seed");

    dce::FitArgs fit;
    std::string method = "lls", model = "patlak";
    CLI::App* fit_cmd = app.add_subcommand("fit", "Voxelwise tracer-kinetic model fitting");
    fit_cmd->add_option("--method", method, "lls|nlls")->check(CLI::IsMember({"lls", "nlls"}));
    fit_cmd->add_option("--model", model, "etofts|patlak")
        ->check(CLI::IsMember({"etofts", "patlak"}));
    fit_cmd->add_option("--series", fit.series, "Signal series volume")->required();
    fit_cmd->add_option("--aif", fit.aif, "Plasma AIF CSV")->required();
    fit_cmd->add_option("--t1", fit.t1, "T1 map volume")->required();
    fit_cmd->add_option("--s0", fit.s0, "S0 map volume")->required();
    fit_cmd->add_option("--mask", fit.mask, "Mask volume")->required();
    fit_cmd->add_option("--out", fit.out_dir, "Output directory");

    dce::TrainArgs train;
    CLI::App* train_cmd = app.add_subcommand("train", "Train the parameter-estimation network");
    train_cmd->add_option("--config", train.config_path, "Training config JSON")->required();
    train_cmd->add_option("--data", train.data_dir, "Dataset directory")->required();
    train_cmd->add_option("--out", train.out_dir, "Output directory");
    train_cmd->add_option("--resume", train.resume, "Checkpoint to resume from");

    dce::InferArgs infer;
    CLI::App* infer_cmd = app.add_subcommand("infer", "Run a trained checkpoint on a series");
    infer_cmd->add_option("--checkpoint", infer.checkpoint, "Trained checkpoint")->required();
    infer_cmd->add_option("--series", infer.series, "Signal series volume")->required();
    infer_cmd->add_option("--mask", infer.mask, "Optional mask volume");
    infer_cmd->add_option("--out", infer.out_dir, "Output directory");

    dce::EvaluateArgs eval;
    CLI::App* eval_cmd = app.add_subcommand("evaluate", "Compare parameter maps and report metrics");
    eval_cmd->add_option("--pred", eval.pred, "Predicted PK volume")->required();
    eval_cmd->add_option("--reference", eval.reference, "Reference PK volume")->required();
    eval_cmd->add_option("--mask", eval.mask, "Mask volume")->required();
    eval_cmd->add_option("--regions", eval.regions, "Optional labels volume for region means");
    eval_cmd->add_option("--out", eval.out_csv, "Metrics CSV path");
    eval_cmd->add_option("--plot", eval.plot, "Optional SVG figure path");
    eval_cmd->add_option("--aif-true", eval.aif_true, "Reference AIF CSV for the overlay");
    eval_cmd->add_option("--aif-estimate", eval.aif_estimate, "Estimated AIF CSV for the overlay");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // usage problems are configuration errors
    }

    if (*simulate) {
        if (*seed_opt) sim.seed = seed_flag;
        return dce::cmd_simulate(sim);
    }
    if (*fit_cmd) {
        fit.method = method == "lls" ? dce::FitMethod::LLS : dce::FitMethod::NLLS;
        fit.model = dce::tk_model_from_string(model);
        return dce::cmd_fit(fit);
    }
    if (*train_cmd) return dce::cmd_train(train);
    if (*infer_cmd) return dce::cmd_infer(infer);
    if (*eval_cmd) return dce::cmd_evaluate(eval);
    std::cerr << "error: no subcommand selected\n";
    return 2;
}
