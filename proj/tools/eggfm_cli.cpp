// Command line front end for the staged pipeline.

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "eggfm/config.hpp"
#include "eggfm/data.hpp"
#include "eggfm/eval.hpp"
#include "eggfm/pipeline.hpp"

using namespace eggfm;
namespace fs = std::filesystem;

namespace {

/// Single-line, machine-parsable error record on stderr.
int report_error(const std::string& code, int exit, std::string message) {
    for (char& ch : message) {
        if (ch == '\n' || ch == '\r') ch = ' ';
    }
    std::cerr << "eggfm: error code=" << code << " exit=" << exit << ": " << message << std::endl;
    return exit;
}

struct ConfigArgs {
    std::string path;
    std::string preset;
    std::vector<std::string> sets;

    void attach(CLI::App* cmd, bool required = true) {
        auto* opt = cmd->add_option("--config", path, "JSON run config");
        if (required) opt->required();
        cmd->add_option("--preset", preset, "start from a preset (synthetic|eb|cite) instead of a file");
        cmd->add_option("--set", sets, "override a config key, key=value (repeatable)");
        if (!required) opt->excludes(cmd->get_option("--preset"));
    }

    config::RunConfig resolve() const {
        io::json j = path.empty() ? io::json{{"preset", preset.empty() ? "synthetic" : preset}} : config::load_json(path);
        return config::from_json(config::with_overrides(std::move(j), sets));
    }
};

void print_progress(const pipeline::RunSpec& r, pipeline::Stage s) {
    std::cout << "[" << (r.holdout ? "holdout " + std::to_string(*r.holdout) : std::string("full")) << "] stage "
              << pipeline::to_string(s) << std::endl;
}

void print_report(const eval::EvalReport& r) {
    std::cout << r.metric << " = " << r.value << " (std " << r.std << ", seeds " << r.seeds.size() << ")";
    if (r.extra.contains("chord")) {
        double chord = 0.0;
        for (double v : r.extra["chord"]) chord += v;
        std::cout << ", chord baseline " << chord / static_cast<double>(r.extra["chord"].size());
    }
    std::cout << std::endl;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Energy-geodesic flow matching: metric learning, geodesics and flows on point clouds"};
    app.require_subcommand(1);

    // gen-sphere
    auto* gen = app.add_subcommand("gen-sphere", "write uniform samples on the unit sphere");
    int dim = 10;
    long n_points = 40000;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    gen->add_option("--dim", dim, "ambient dimension")->required()->check(CLI::Range(2, 1 << 20));
    gen->add_option("--n", n_points, "number of points")->required()->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed, "random seed");
    gen->add_option("--out", gen_out, "output path (.csv or binary)")->required();

    // train
    auto* train = app.add_subcommand("train", "run pipeline stages");
    ConfigArgs train_cfg;
    train_cfg.attach(train, false);
    std::string stage = "all";
    train->add_option("--stage", stage, "score|energy|refine|geodesic|embedding|flow|all")
        ->check(CLI::IsMember({"score", "energy", "refine", "geodesic", "embedding", "flow", "all"}));

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate trained runs");
    ConfigArgs eval_cfg;
    eval_cfg.attach(ev, false);
    std::string metric = "both";
    ev->add_option("--metric", metric, "ave|w1|both")->check(CLI::IsMember({"ave", "w1", "both"}));

    // export-grid
    auto* grid = app.add_subcommand("export-grid", "energy or metric values on a 2d slice");
    ConfigArgs grid_cfg;
    grid_cfg.attach(grid, false);
    std::string field = "energy";
    int resolution = 64;
    std::vector<int> axes{0, 1};
    double lo = -1.5, hi = 1.5;
    std::string plane_path, grid_out, svg_out;
    grid->add_option("--field", field, "energy|metric")->check(CLI::IsMember({"energy", "metric"}));
    grid->add_option("--res", resolution, "grid resolution")->check(CLI::Range(2, 4096));
    grid->add_option("--axes", axes, "two coordinate axes spanning the slice")->expected(2)->delimiter(',');
    grid->add_option("--lo", lo, "lower extent on both axes");
    grid->add_option("--hi", hi, "upper extent on both axes");
    grid->add_option("--plane", plane_path, "JSON plane spec (overrides --axes/--lo/--hi)");
    grid->add_option("--out", grid_out, "grid CSV path")->required();
    grid->add_option("--svg", svg_out, "optional SVG heatmap path");

    // interpolate
    auto* interp = app.add_subcommand("interpolate", "integrate the flow between two timepoints");
    ConfigArgs interp_cfg;
    interp_cfg.attach(interp, false);
    int from = 0, to = 1, n_steps = 100;
    std::size_t max_points = 256;
    std::string traj_out;
    interp->add_option("--from", from, "start timepoint label")->required();
    interp->add_option("--to", to, "end timepoint label")->required();
    interp->add_option("--n-steps", n_steps, "integration steps")->check(CLI::PositiveNumber);
    interp->add_option("--max-points", max_points, "trajectories to integrate")->check(CLI::PositiveNumber);
    interp->add_option("--out", traj_out, "trajectory CSV path")->required();

    // show-config
    auto* show = app.add_subcommand("show-config", "print the effective config as JSON");
    ConfigArgs show_cfg;
    show_cfg.attach(show, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return report_error("usage", 2, e.what());
    }

    try {
        if (gen->parsed()) {
            const auto ds = data::sample_sphere(dim, static_cast<Eigen::Index>(n_points), gen_seed);
            data::save_dataset(gen_out, ds);
            const double dev = (ds.points.rowwise().norm().array() - 1.0).abs().maxCoeff();
            std::cout << "wrote " << gen_out << ": n=" << ds.n() << " d=" << ds.d() << " max|norm-1|=" << dev << std::endl;
        } else if (train->parsed()) {
            const auto cfg = train_cfg.resolve();
            if (stage == "all") {
                pipeline::train_all(cfg, print_progress);
            } else {
                pipeline::train(cfg, pipeline::stage_from_string(stage), print_progress);
            }
            std::cout << "outputs under " << pipeline::output_root(cfg).string() << std::endl;
        } else if (ev->parsed()) {
            const auto cfg = eval_cfg.resolve();
            if (metric == "ave" || metric == "both") {
                const auto r = pipeline::evaluate_ave(cfg);
                pipeline::write_report(cfg, r);
                print_report(r);
            }
            if (metric == "w1" || metric == "both") {
                const auto r = pipeline::evaluate_w1(cfg);
                pipeline::write_report(cfg, r);
                print_report(r);
            }
        } else if (grid->parsed()) {
            const auto cfg = grid_cfg.resolve();
            eval::PlaneSpec plane;
            if (!plane_path.empty()) {
                plane = eval::PlaneSpec::from_json(config::load_json(plane_path));
            } else {
                require(axes.size() == 2, ErrorCode::invalid_argument, "--axes needs two values");
                const auto full = pipeline::load_data(cfg);
                plane = eval::PlaneSpec::axes(static_cast<int>(full.d()), axes[0], axes[1], lo, hi);
            }
            const auto g = pipeline::export_grid(cfg, plane, resolution, field);
            std::ofstream os(grid_out);
            require(static_cast<bool>(os), ErrorCode::io, "cannot write " + grid_out);
            eval::write_grid_csv(os, g);
            if (!svg_out.empty()) {
                std::ofstream svg(svg_out);
                require(static_cast<bool>(svg), ErrorCode::io, "cannot write " + svg_out);
                eval::write_grid_svg(svg, g);
            }
            std::cout << "wrote " << grid_out << " (" << resolution << "x" << resolution << ")" << std::endl;
        } else if (interp->parsed()) {
            const auto cfg = interp_cfg.resolve();
            const auto tr = pipeline::interpolate(cfg, from, to, n_steps, max_points);
            std::ofstream os(traj_out);
            require(static_cast<bool>(os), ErrorCode::io, "cannot write " + traj_out);
            transport::write_trajectory_csv(os, tr);
            require(static_cast<bool>(os), ErrorCode::io, "failed writing " + traj_out);
            std::cout << "wrote " << traj_out << std::endl;
        } else if (show->parsed()) {
            std::cout << config::to_json(show_cfg.resolve()).dump(2) << std::endl;
        }
    } catch (const Error& e) {
        return report_error(std::string(to_string(e.code())), exit_code(e.code()), e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return report_error("io", 5, e.what());
    } catch (const std::exception& e) {
        return report_error("internal", 1, e.what());
    }
    return 0;
}
