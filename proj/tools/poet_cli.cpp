// Experiment runner: gen-data / train / eval / report subcommands.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "poet/experiment.hpp"

namespace {

// config=2, data=3, training=4, io=5, anything unexpected=1
int run_guarded(const std::function<void()>& fn) {
    try {
        fn();
        return 0;
    } catch (const poet::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const poet::ParseError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const poet::ProtocolError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const poet::TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 4;
    } catch (const poet::NumericError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 4;
    } catch (const poet::IntegrityError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 5;
    } catch (const poet::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"poet: prompt-offset tuning for few-shot class-incremental "
                 "skeleton action recognition"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "write a synthetic skeleton benchmark");
    poet::GenDataOptions gopt;
    gopt.out_dir = poet::default_out_root() + "/data";
    gen->add_option("--out", gopt.out_dir, "output directory");
    gen->add_option("--classes", gopt.classes, "total classes");
    gen->add_option("--per-class-train", gopt.per_class_train, "train clips per class");
    gen->add_option("--per-class-test", gopt.per_class_test, "test clips per class");
    gen->add_option("--frames", gopt.frames, "frames per clip (T)");
    gen->add_option("--joints", gopt.joints, "joints per frame (25 or 22)");
    gen->add_option("--noise", gopt.noise_sigma, "gaussian noise sigma");
    gen->add_option("--seed", gopt.seed, "generator seed");
    gen->add_option("--sessions", gopt.sessions, "incremental sessions");
    gen->add_option("--ways", gopt.ways, "classes per session");
    gen->add_option("--shots", gopt.shots, "shots per class");

    // train
    auto* train = app.add_subcommand("train", "run a config-driven experiment");
    std::string train_config;
    poet::RunOptions ropt;
    train->add_option("--config", train_config, "experiment config file")->required();
    train->add_flag("--force", ropt.force, "redo completed runs");
    train->add_flag("--resume", ropt.resume, "continue from the last checkpoint");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on its protocol");
    std::string eval_ckpt, eval_config;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--config", eval_config, "experiment config file")->required();

    // report
    auto* report = app.add_subcommand("report", "derive tables and diagnostics from a run");
    std::string report_dir;
    report->add_option("--run", report_dir, "run directory (out/<hash>/seed_<k>)")->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed())
        return run_guarded([&] { poet::cmd_gen_data(gopt, std::cout); });
    if (train->parsed())
        return run_guarded([&] {
            auto doc = poet::IniDoc::parse_file(train_config);
            const auto cfg = poet::experiment_from_ini(doc);
            poet::run_experiment(cfg, ropt, std::cout);
        });
    if (eval->parsed())
        return run_guarded([&] { poet::cmd_eval(eval_ckpt, eval_config, std::cout); });
    if (report->parsed())
        return run_guarded([&] { poet::cmd_report(report_dir, std::cout); });
    return 1;
}
