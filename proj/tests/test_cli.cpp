#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "eggfm/pipeline.hpp"

using namespace eggfm;
namespace fs = std::filesystem;
using io::json;

#ifndef EGGFM_CLI_PATH
#error "EGGFM_CLI_PATH must point at the built command line tool"
#endif

namespace {

struct Result {
    int exit = -1;
    std::string out;
    std::string err;
};

class CliTest : public ::testing::Test {
protected:
    fs::path dir;

    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir = fs::temp_directory_path() / (std::string("eggfm_cli_") + info->name());
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    Result run(const std::string& args, const std::string& env = "") const {
        const fs::path out = dir / "stdout.txt";
        const fs::path err = dir / "stderr.txt";
        const std::string cmd = "cd " + dir.string() + " && " + env + (env.empty() ? "" : " ") + EGGFM_CLI_PATH + " " + args +
                                " >" + out.string() + " 2>" + err.string();
        const int status = std::system(cmd.c_str());
        Result r;
        r.exit = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = io::read_file(out);
        r.err = io::read_file(err);
        return r;
    }

    /// Three labelled clouds along a quarter arc in 2d.
    void write_arc(const std::string& name = "arc.csv") const {
        data::Dataset ds;
        Rng rng(3);
        const int per = 40;
        ds.points.resize(3 * per, 2);
        std::vector<int> t;
        std::normal_distribution<double> nd(0.0, 0.05);
        for (int k = 0; k < 3; ++k) {
            for (int i = 0; i < per; ++i) {
                const double a = 0.785 * k + nd(rng);
                ds.points.row(k * per + i) << std::cos(a) + nd(rng), std::sin(a) + nd(rng);
                t.push_back(k + 1);
            }
        }
        ds.timepoint = t;
        data::save_dataset(dir / name, ds);
    }

    void write_config(const json& extra, const std::string& name = "cfg.json") const {
        json j = {{"data_path", "arc.csv"}, {"output_dir", "out"},       {"hidden_dim", 8},      {"n_layers", 2},
                  {"n_freq", 4},            {"score_steps", 5},         {"energy_steps", 5},    {"geodesic_steps", 5},
                  {"embedding_steps", 5},   {"flow_steps", 5},          {"score_batch_size", 32}, {"flow_batch_size", 16},
                  {"n_noise_scales", 4},    {"w1_max_n", 32},           {"n_steps", 5}};
        for (const auto& [k, v] : extra.items()) j[k] = v;
        io::write_file(dir / name, j.dump());
    }

    static std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }
};

/// Single line, "eggfm: error code=<name> exit=<n>: <message>".
void expect_error_line(const Result& r, const std::string& code, int exit) {
    EXPECT_EQ(r.exit, exit) << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
    EXPECT_EQ(r.err.rfind("eggfm: error code=" + code + " exit=" + std::to_string(exit) + ": ", 0), 0u) << r.err;
}

} // namespace

TEST_F(CliTest, GenSphereWritesUnitNormRows) {
    const auto r = run("gen-sphere --dim 10 --n 40000 --seed 1 --out s.bin");
    ASSERT_EQ(r.exit, 0) << r.err;
    const auto ds = data::load_dataset(dir / "s.bin");
    EXPECT_EQ(ds.n(), 40000);
    EXPECT_EQ(ds.d(), 10);
    EXPECT_LT((ds.points.rowwise().norm().array() - 1.0).abs().maxCoeff(), 1e-12);
    EXPECT_NE(r.out.find("n=40000 d=10"), std::string::npos);
}

TEST_F(CliTest, GenSphereIsByteIdenticalForFixedSeed) {
    ASSERT_EQ(run("gen-sphere --dim 2 --n 4 --seed 9 --out a.bin").exit, 0);
    ASSERT_EQ(run("gen-sphere --dim 2 --n 4 --seed 9 --out b.bin").exit, 0);
    EXPECT_EQ(io::read_file(dir / "a.bin"), io::read_file(dir / "b.bin"));
}

TEST_F(CliTest, GenSphereZeroPointsIsUsageError) {
    expect_error_line(run("gen-sphere --dim 3 --n 0 --out s.bin"), "usage", 2);
}

TEST_F(CliTest, UnknownSubcommandIsUsageError) { expect_error_line(run("frobnicate"), "usage", 2); }

TEST_F(CliTest, FlowWithoutGeodesicNamesMissingStage) {
    write_arc();
    write_config({{"holdouts", {2}}});
    const auto r = run("train --config cfg.json --stage flow");
    expect_error_line(r, "prerequisite", 3);
    EXPECT_NE(r.err.find("requires: geodesic"), std::string::npos) << r.err;
}

TEST_F(CliTest, ConfigErrorsListEveryViolation) {
    write_arc();
    write_config({{"sigma_min", 0.5}, {"sigma_max", 0.1}, {"annealing_steps", 0}, {"colour", "blue"}});
    const auto r = run("train --config cfg.json --stage score");
    expect_error_line(r, "config", 2);
    EXPECT_NE(r.err.find("3 problems"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("unknown key 'colour'"), std::string::npos);
    EXPECT_NE(r.err.find("sigma_min must be < sigma_max"), std::string::npos);
    EXPECT_NE(r.err.find("annealing_steps (K) must be >= 1"), std::string::npos);
}

TEST_F(CliTest, MalformedConfigFileIsConfigError) {
    io::write_file(dir / "cfg.json", "{\"seed\": ");
    expect_error_line(run("train --config cfg.json"), "config", 2);
}

TEST_F(CliTest, MissingDataFileIsIoError) {
    write_config({{"data_path", "nowhere.csv"}});
    expect_error_line(run("train --config cfg.json --stage score"), "io", 5);
}

TEST_F(CliTest, AllStagesWriteCheckpointsTracesAndConfig) {
    write_arc();
    write_config({{"holdouts", {2}}});
    const auto r = run("train --config cfg.json --stage all");
    ASSERT_EQ(r.exit, 0) << r.err;
    const fs::path run_dir = dir / "out" / "holdout_2";
    int ckpts = 0;
    for (const auto& e : fs::directory_iterator(run_dir)) ckpts += e.path().extension() == ".ckpt";
    EXPECT_GE(ckpts, 5);
    for (const char* f : {"score.ckpt", "energy.ckpt", "metric.json", "geodesic.ckpt", "embedding.ckpt", "flow.ckpt",
                          "weights_1.bin", "weights_2.bin", "loss_flow.csv"}) {
        EXPECT_TRUE(fs::exists(run_dir / f)) << f;
    }
    const auto effective = config::load(dir / "out" / "config.json");
    EXPECT_EQ(effective.hidden_dim, 8);
    EXPECT_EQ(count_lines(io::read_file(run_dir / "loss_flow.csv")), 6u); // header + 5 steps
}

TEST_F(CliTest, StagewiseEqualsAllAndRepeatsBitIdentically) {
    write_arc();
    write_config({{"holdouts", {2}}, {"output_dir", "a"}}, "a.json");
    write_config({{"holdouts", {2}}, {"output_dir", "b"}}, "b.json");
    ASSERT_EQ(run("train --config a.json --stage all").exit, 0);
    for (const char* s : {"score", "energy", "refine", "geodesic", "embedding", "flow"}) {
        ASSERT_EQ(run(std::string("train --config b.json --stage ") + s).exit, 0) << s;
    }
    const fs::path a = dir / "a" / "holdout_2";
    const fs::path b = dir / "b" / "holdout_2";
    // Checkpoint headers carry the config hash, which differs through output_dir; compare tensors.
    for (const char* f : {"score.ckpt", "energy_2.ckpt", "metric_energy.ckpt", "geodesic.ckpt", "embedding.ckpt", "flow.ckpt"}) {
        const auto ca = nn::read_checkpoint(a / f);
        const auto cb = nn::read_checkpoint(b / f);
        ASSERT_EQ(ca.params.num_tensors(), cb.params.num_tensors()) << f;
        for (std::size_t i = 0; i < ca.params.num_tensors(); ++i) EXPECT_EQ(ca.params.tensor(i), cb.params.tensor(i)) << f;
    }
    for (const char* f : {"metric.json", "weights_2.bin", "loss_flow.csv", "loss_score_2.csv"}) {
        EXPECT_EQ(io::read_file(a / f), io::read_file(b / f)) << f;
    }
    ASSERT_EQ(run("train --config a.json --stage all --set output_dir=c").exit, 0);
    // Same effective config apart from output_dir: identical traces and weights.
    EXPECT_EQ(io::read_file(dir / "a" / "holdout_2" / "loss_energy_2.csv"),
              io::read_file(dir / "c" / "holdout_2" / "loss_energy_2.csv"));
    EXPECT_EQ(io::read_file(dir / "a" / "holdout_2" / "weights_2.bin"), io::read_file(dir / "c" / "holdout_2" / "weights_2.bin"));
}

TEST_F(CliTest, RepeatedRunIsBitIdentical) {
    write_arc();
    write_config({{"holdouts", {2}}});
    ASSERT_EQ(run("train --config cfg.json --stage all").exit, 0);
    const fs::path d = dir / "out" / "holdout_2";
    std::map<std::string, std::string> first;
    for (const auto& e : fs::directory_iterator(d)) first[e.path().filename().string()] = io::read_file(e.path());
    ASSERT_EQ(run("train --config cfg.json --stage all").exit, 0);
    ASSERT_EQ(run("eval --config cfg.json --metric w1").exit, 0);
    const std::string report = io::read_file(dir / "out" / "eval_w1.json");
    for (const auto& [name, bytes] : first) EXPECT_EQ(io::read_file(d / name), bytes) << name;
    ASSERT_EQ(run("eval --config cfg.json --metric w1").exit, 0);
    EXPECT_EQ(io::read_file(dir / "out" / "eval_w1.json"), report);
    EXPECT_EQ(count_lines(io::read_file(dir / "out" / "results.csv")), 3u); // header + 2 rows
}

TEST_F(CliTest, IdentityMetricSkipsDensityStages) {
    write_arc();
    write_config({{"holdouts", {2}}, {"metric", "identity"}});
    ASSERT_EQ(run("train --config cfg.json --stage all").exit, 0);
    const fs::path d = dir / "out" / "holdout_2";
    EXPECT_FALSE(fs::exists(d / "score.ckpt"));
    EXPECT_FALSE(fs::exists(d / "embedding.ckpt"));
    EXPECT_TRUE(fs::exists(d / "flow.ckpt"));
    const pipeline::Store store(d, 0, "");
    const auto metric = store.load_metric();
    EXPECT_DOUBLE_EQ(metric.at(Eigen::MatrixXd::Random(3, 2))(1), 1.0);
    // psi = 0: the interpolant is the chord.
    const auto geo = store.load_geodesic();
    const Eigen::MatrixXd a = Eigen::MatrixXd::Random(4, 2), b = Eigen::MatrixXd::Random(4, 2);
    const Eigen::VectorXd t = Eigen::VectorXd::Constant(4, 0.3);
    EXPECT_LT((geometry::path_point(geo, a, b, t) - eval::chord(a, b, t)).norm(), 1e-15);
}

TEST_F(CliTest, OutputRootEnvironmentVariable) {
    write_arc();
    write_config({{"holdouts", {2}}, {"metric", "identity"}});
    ASSERT_EQ(run("train --config cfg.json --stage refine", "EGGFM_OUTPUT_ROOT=" + (dir / "root").string()).exit, 0);
    EXPECT_TRUE(fs::exists(dir / "root" / "out" / "holdout_2" / "metric.json"));
}

TEST_F(CliTest, ExportGridWritesHeaderAndRows) {
    write_arc();
    write_config({});
    ASSERT_EQ(run("train --config cfg.json --stage score").exit, 0);
    ASSERT_EQ(run("train --config cfg.json --stage energy").exit, 0);
    ASSERT_EQ(run("train --config cfg.json --stage refine").exit, 0);
    const auto r = run("export-grid --config cfg.json --res 64 --out g.csv --svg g.svg");
    ASSERT_EQ(r.exit, 0) << r.err;
    std::ifstream is(dir / "g.csv");
    const auto g = eval::read_grid_csv(is);
    EXPECT_EQ(g.values.rows(), 64);
    EXPECT_EQ(g.values.cols(), 64);
    EXPECT_EQ(count_lines(io::read_file(dir / "g.csv")), 65u);
    EXPECT_TRUE(g.values.allFinite());
    EXPECT_NE(io::read_file(dir / "g.svg").find("<svg"), std::string::npos);
}

TEST_F(CliTest, ExportGridBeforeRefineIsPrerequisiteError) {
    write_arc();
    write_config({});
    const auto r = run("export-grid --config cfg.json --res 8 --out g.csv");
    expect_error_line(r, "prerequisite", 3);
    EXPECT_NE(r.err.find("requires: refine"), std::string::npos);
}

TEST_F(CliTest, InterpolateConstantFlowGivesStraightTrajectories) {
    write_arc();
    write_config({});
    // A flow whose network outputs the constant (1, -2): zero weights, read-out bias c.
    auto flow = transport::FlowModel::init(2, 4, 8, 2, 1);
    for (auto& layer : flow.params.layers) {
        layer.weight.setZero();
        layer.bias.setZero();
    }
    flow.params.layers.back().bias << 1.0, -2.0;
    const pipeline::Store store(dir / "out" / "full", 0, "");
    fs::create_directories(store.paths.dir);
    store.save_flow(flow);
    const auto r = run("interpolate --config cfg.json --from 1 --to 3 --n-steps 4 --max-points 3 --out traj.csv");
    ASSERT_EQ(r.exit, 0) << r.err;
    std::istringstream is(io::read_file(dir / "traj.csv"));
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "traj_id,step,t,f0,f1");
    std::map<int, std::vector<std::array<double, 3>>> rows;
    while (std::getline(is, line)) {
        std::array<double, 5> v{};
        char comma;
        std::istringstream ls(line);
        ls >> v[0] >> comma >> v[1] >> comma >> v[2] >> comma >> v[3] >> comma >> v[4];
        rows[static_cast<int>(v[0])].push_back({v[2], v[3], v[4]});
    }
    ASSERT_EQ(rows.size(), 3u);
    for (const auto& [id, traj] : rows) {
        ASSERT_EQ(traj.size(), 5u);
        for (const auto& s : traj) {
            EXPECT_NEAR(s[1] - traj.front()[1], 1.0 * s[0], 1e-12);
            EXPECT_NEAR(s[2] - traj.front()[2], -2.0 * s[0], 1e-12);
        }
        EXPECT_DOUBLE_EQ(traj.back()[0], 1.0);
    }
}

TEST_F(CliTest, AveOnSphereRunReportsChordBaseline) {
    ASSERT_EQ(run("gen-sphere --dim 3 --n 200 --seed 2 --out s.bin").exit, 0);
    io::write_file(dir / "cfg.json",
                   json{{"data_path", "s.bin"}, {"output_dir", "out"}, {"metric", "identity"}, {"hidden_dim", 8},
                        {"n_layers", 2}, {"n_freq", 4}, {"ave_pairs", 200}, {"ave_n_t", 4}, {"eval_seeds", {0, 1}}}
                       .dump());
    ASSERT_EQ(run("train --config cfg.json --stage refine").exit, 0);
    ASSERT_EQ(run("train --config cfg.json --stage geodesic").exit, 0);
    const auto r = run("eval --config cfg.json --metric ave");
    ASSERT_EQ(r.exit, 0) << r.err;
    const auto rep = eval::EvalReport::from_json(json::parse(io::read_file(dir / "out" / "eval_ave.json")));
    // The identity metric's geodesic is the chord itself.
    ASSERT_EQ(rep.values.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(rep.values[i], rep.extra["chord"][i].get<double>());
    EXPECT_GT(rep.value, 0.0);
}
