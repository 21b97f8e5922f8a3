// meat: train, evaluate and inspect task-continual ViT mask experiments.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 training divergence,
// 4 incomplete run directory.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "meat/bytes.hpp"
#include "meat/continual.hpp"
#include "meat/error.hpp"
#include "meat/masks.hpp"
#include "meat/plan.hpp"
#include "meat/vit.hpp"

namespace fs = std::filesystem;
using namespace meat;

namespace {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

LogLevel log_level() {
    const char* env = std::getenv("MEAT_LOG");
    if (!env) return LogLevel::Info;
    const std::string v = env;
    if (v == "error") return LogLevel::Error;
    if (v == "debug") return LogLevel::Debug;
    return LogLevel::Info;
}

struct CommonArgs {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool force = false;
};

// Refuses to reuse a non-empty directory unless --force is given.
void prepare_out_dir(const std::string& out, bool force) {
    if (out.empty()) throw ConfigError("--out directory is required");
    const fs::path dir(out);
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw ConfigError("--out exists and is not a directory");
        if (!fs::is_empty(dir) && !force) {
            throw ConfigError("output directory " + out +
                              " is not empty; pass --force to overwrite");
        }
    } else {
        fs::create_directories(dir);
    }
}

ExperimentPlan plan_for(const CommonArgs& args) {
    if (args.config.empty()) throw ConfigError("--config is required");
    ExperimentPlan plan = load_plan(args.config);
    if (args.seed_set) plan.run_seeds = {args.seed};
    return plan;
}

void copy_plan_into(const CommonArgs& args, const std::string& out) {
    std::ifstream src(args.config, std::ios::binary);
    std::ofstream dst(fs::path(out) / "plan.json", std::ios::binary | std::ios::trunc);
    dst << src.rdbuf();
}

fs::path find_mask_file(const fs::path& seed_dir, int task_id) {
    const std::string name = "task_" + std::to_string(task_id) + ".mask";
    if (fs::exists(seed_dir / name)) return seed_dir / name;
    for (int order = 0; order < 64; ++order) {
        const fs::path p = seed_dir / ("order_" + std::to_string(order)) / name;
        if (fs::exists(p)) return p;
    }
    throw ConfigError("no mask file for task " + std::to_string(task_id) + " under " +
                      seed_dir.string());
}

std::size_t task_index(const ExperimentPlan& plan, int task_id) {
    for (std::size_t i = 0; i < plan.tasks.size(); ++i) {
        if (plan.tasks[i].task_id == task_id) return i;
    }
    throw ConfigError("task " + std::to_string(task_id) + " is not in the plan");
}

Dataset prepared_test_split(const ExperimentPlan& plan, int task_id) {
    PreparedExperimentData data = prepare_experiment_data(plan);
    if (task_id == 0) return std::move(data.base_test);
    return std::move(data.task_test[task_index(plan, task_id)]);
}

Dataset prepared_train_split(const ExperimentPlan& plan, int task_id) {
    PreparedExperimentData data = prepare_experiment_data(plan);
    if (task_id == 0) return std::move(data.base_train);
    return std::move(data.task_train[task_index(plan, task_id)]);
}

int cmd_train_base(const CommonArgs& args) {
    ExperimentPlan plan = plan_for(args);
    prepare_out_dir(args.out, args.force);
    copy_plan_into(args, args.out);
    const std::uint64_t run_seed = plan.run_seeds.front();
    TaskSpec base = plan.base;
    base.seed = seed_mix(run_seed, base.seed);

    Dataset train = prepared_train_split(plan, 0);
    ViTModel model(plan.model, seed_mix(base.seed, 0xBA5E));
    train_base(model, base, train, plan.optimizer);

    const fs::path seed_dir = fs::path(args.out) / ("seed_" + std::to_string(run_seed));
    fs::create_directories(seed_dir);
    save_checkpoint(model, (seed_dir / "model.ckpt").string());

    TaskMaskStore store;
    Dataset test = prepared_test_split(plan, 0);
    const double acc = evaluate(model, 0, store, test);
    std::cout << "base task trained: test accuracy " << acc << "\n";
    std::cout << "checkpoint: " << (seed_dir / "model.ckpt").string() << "\n";
    return 0;
}

int cmd_train_task(const CommonArgs& args, int task_id) {
    ExperimentPlan plan = plan_for(args);
    const std::uint64_t run_seed = plan.run_seeds.front();
    const fs::path seed_dir = fs::path(args.out) / ("seed_" + std::to_string(run_seed));
    const fs::path ckpt = seed_dir / "model.ckpt";
    if (!fs::exists(ckpt)) {
        throw ConfigError("no checkpoint at " + ckpt.string() + "; run train-base first");
    }
    ViTModel model = load_checkpoint(ckpt.string());

    const TaskSpec* found = nullptr;
    for (const TaskSpec& t : plan.tasks) {
        if (t.task_id == task_id) found = &t;
    }
    if (!found) throw ConfigError("task " + std::to_string(task_id) + " is not in the plan");
    TaskSpec spec = *found;
    spec.seed = seed_mix(run_seed, spec.seed);

    Dataset train = prepared_train_split(plan, task_id);
    TaskMaskSet set = train_task(model, spec, plan.meat, train, plan.optimizer);
    save_masks(set, plan.model, (seed_dir / ("task_" + std::to_string(task_id) + ".mask")).string());

    TaskMaskStore store;
    store[task_id] = set;
    Dataset test = prepared_test_split(plan, task_id);
    std::cout << "task " << task_id << " trained: test accuracy "
              << evaluate(model, task_id, store, test) << "\n";
    std::cout << "masks: " << (seed_dir / ("task_" + std::to_string(task_id) + ".mask")).string()
              << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, int task_id) {
    ExperimentPlan plan = plan_for(args);
    const std::uint64_t run_seed = plan.run_seeds.front();
    const fs::path seed_dir = fs::path(args.out) / ("seed_" + std::to_string(run_seed));
    ViTModel model = load_checkpoint((seed_dir / "model.ckpt").string());

    TaskMaskStore store;
    if (task_id != 0) {
        store[task_id] = load_masks(find_mask_file(seed_dir, task_id).string(),
                                    config_digest(plan.model));
    }
    Dataset test = prepared_test_split(plan, task_id);
    std::cout << "task " << task_id << " accuracy: " << evaluate(model, task_id, store, test)
              << "\n";
    return 0;
}

int cmd_run_plan(const CommonArgs& args) {
    ExperimentPlan plan = plan_for(args);
    prepare_out_dir(args.out, args.force);
    copy_plan_into(args, args.out);
    RunOptions opts;
    opts.out_dir = args.out;
    if (log_level() >= LogLevel::Info) opts.log = &std::cerr;
    Metrics metrics = run_experiment(plan, opts);
    write_summary(metrics, plan, std::cout);
    return 0;
}

void print_grid(std::ostream& out, const TaskMaskSet& set, const ViTConfig& cfg,
                std::size_t layer) {
    const std::size_t g = cfg.grid();
    out << "layer " << layer << " tokens (" << g << "x" << g << ", 1=active):\n";
    for (std::size_t y = 0; y < g; ++y) {
        for (std::size_t x = 0; x < g; ++x) {
            out << (get_bit(set.token_bits[layer], y * g + x) ? '1' : '0');
        }
        out << "\n";
    }
}

void write_pgm(const fs::path& path, const TaskMaskSet& set, const ViTConfig& cfg,
               std::size_t layer) {
    const std::size_t g = cfg.grid();
    ByteWriter w;
    const std::string header = "P5\n" + std::to_string(g) + " " + std::to_string(g) + "\n255\n";
    w.bytes(header.data(), header.size());
    for (std::size_t i = 0; i < g * g; ++i) {
        w.u8(get_bit(set.token_bits[layer], i) ? 255 : 0);
    }
    write_file_bytes(path.string(), w.data());
}

int cmd_inspect_masks(const CommonArgs& args, const std::string& mask_file, int layer,
                      const std::string& format) {
    ExperimentPlan plan = plan_for(args);
    const ViTConfig& cfg = plan.model;
    TaskMaskSet set = load_masks(mask_file, config_digest(cfg));

    std::cout << "task " << set.task_id << " (seed " << set.seed << ", " << set.epochs
              << " epochs)\n";
    ActivationRatios ratios = activation_ratios(set, cfg);
    std::vector<std::size_t> layers;
    if (layer >= 0) {
        if (static_cast<std::size_t>(layer) >= cfg.layers) {
            throw ConfigError("--layer out of range");
        }
        layers.push_back(static_cast<std::size_t>(layer));
    } else {
        for (std::size_t l = 0; l < cfg.layers; ++l) layers.push_back(l);
    }

    for (std::size_t l : layers) {
        if (format == "text") {
            print_grid(std::cout, set, cfg, l);
        } else {
            if (args.out.empty()) throw ConfigError("--out is required for pgm output");
            fs::create_directories(args.out);
            const fs::path p = fs::path(args.out) / ("task_" + std::to_string(set.task_id) +
                                                     "_layer_" + std::to_string(l) + ".pgm");
            write_pgm(p, set, cfg, l);
            std::cout << "wrote " << p.string() << "\n";
        }
    }
    std::cout << "activation ratios per layer:\n";
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        std::cout << "  layer " << l << ": tokens " << ratios.token[l] << ", ffn1 "
                  << ratios.ffn1[l] << ", ffn2 " << ratios.ffn2[l] << "\n";
    }
    return 0;
}

int cmd_report(const std::string& run_dir) {
    std::vector<std::string> missing;
    const fs::path dir(run_dir);
    if (!fs::exists(dir / "metrics.csv")) missing.push_back("metrics.csv");
    if (!fs::exists(dir / "plan.json")) missing.push_back("plan.json");

    Metrics metrics;
    ExperimentPlan plan;
    if (missing.empty()) {
        std::ifstream in(dir / "metrics.csv");
        metrics = read_metrics_csv(in);
        plan = load_plan((dir / "plan.json").string());
        for (const TaskResultRow& r : metrics.rows) {
            const fs::path ckpt = dir / ("seed_" + std::to_string(r.run_seed)) / "model.ckpt";
            if (!fs::exists(ckpt)) {
                const std::string rel = ckpt.lexically_relative(dir).string();
                if (std::find(missing.begin(), missing.end(), rel) == missing.end()) {
                    missing.push_back(rel);
                }
            }
            if (r.mask_bytes > 0) {
                const fs::path mask = dir / ("seed_" + std::to_string(r.run_seed)) /
                                      ("order_" + std::to_string(r.order_index)) /
                                      ("task_" + std::to_string(r.task_id) + ".mask");
                if (!fs::exists(mask)) missing.push_back(mask.lexically_relative(dir).string());
            }
        }
    }
    if (!missing.empty()) {
        std::cerr << "incomplete run directory " << run_dir << "; missing artifacts:\n";
        for (const std::string& m : missing) std::cerr << "  " << m << "\n";
        return 4;
    }
    write_summary(metrics, plan, std::cout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"task-continual ViT training with per-task binary attention/FFN masks"};
    app.require_subcommand(1);

    CommonArgs args;
    int task_id = -1;
    int layer = -1;
    std::string mask_file;
    std::string format = "text";
    std::string run_dir;

    auto add_common = [&](CLI::App* cmd, bool with_out = true) {
        cmd->add_option("--config", args.config, "experiment plan (JSON)");
        if (with_out) cmd->add_option("--out", args.out, "output directory");
        cmd->add_option("--seed", args.seed, "override the plan's run seeds")
            ->each([&](const std::string&) { args.seed_set = true; });
        cmd->add_flag("--force", args.force, "allow writing into a non-empty directory");
    };

    CLI::App* train_base_cmd = app.add_subcommand("train-base", "train and freeze the base model");
    add_common(train_base_cmd);
    CLI::App* train_task_cmd = app.add_subcommand("train-task", "train masks for one new task");
    add_common(train_task_cmd);
    train_task_cmd->add_option("--task", task_id, "task id (>= 1)")->required();
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a trained task");
    add_common(eval_cmd);
    eval_cmd->add_option("--task", task_id, "task id")->required();
    CLI::App* run_cmd = app.add_subcommand("run-plan", "run the full experiment plan");
    add_common(run_cmd);
    CLI::App* inspect_cmd = app.add_subcommand("inspect-masks", "visualize a mask file");
    inspect_cmd->add_option("mask_file", mask_file, "MEATMSK1 file")->required();
    add_common(inspect_cmd);
    inspect_cmd->add_option("--layer", layer, "layer to show (default: all)");
    inspect_cmd->add_option("--format", format, "text|pgm")
        ->check(CLI::IsMember({"text", "pgm"}));
    CLI::App* report_cmd = app.add_subcommand("report", "summarize a completed run directory");
    report_cmd->add_option("run_dir", run_dir, "directory written by run-plan")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(train_base_cmd)) return cmd_train_base(args);
        if (app.got_subcommand(train_task_cmd)) return cmd_train_task(args, task_id);
        if (app.got_subcommand(eval_cmd)) return cmd_eval(args, task_id);
        if (app.got_subcommand(run_cmd)) return cmd_run_plan(args);
        if (app.got_subcommand(inspect_cmd)) return cmd_inspect_masks(args, mask_file, layer, format);
        if (app.got_subcommand(report_cmd)) return cmd_report(run_dir);
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
