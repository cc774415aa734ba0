#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "eggfm/checkpoint.hpp"
#include "eggfm/config.hpp"
#include "eggfm/data.hpp"
#include "eggfm/error.hpp"
#include "eggfm/eval.hpp"
#include "eggfm/geometry.hpp"
#include "eggfm/refine.hpp"
#include "eggfm/score_energy.hpp"
#include "eggfm/transport.hpp"

namespace eggfm::pipeline {

namespace fs = std::filesystem;
using config::RunConfig;
using io::json;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Stage { score, energy, refine, geodesic, embedding, flow };

inline constexpr Stage all_stages[] = {Stage::score,    Stage::energy,    Stage::refine,
                                       Stage::geodesic, Stage::embedding, Stage::flow};

inline std::string to_string(Stage s) {
    switch (s) {
    case Stage::score: return "score";
    case Stage::energy: return "energy";
    case Stage::refine: return "refine";
    case Stage::geodesic: return "geodesic";
    case Stage::embedding: return "embedding";
    case Stage::flow: return "flow";
    }
    return "unknown";
}

inline Stage stage_from_string(const std::string& s) {
    for (Stage st : all_stages) {
        if (to_string(st) == s) return st;
    }
    fail(ErrorCode::config, "unknown stage '" + s + "' (expected score|energy|refine|geodesic|embedding|flow|all)");
}

// ---------------------------------------------------------------------------
// Output layout

/// `output_dir`, placed under $EGGFM_OUTPUT_ROOT when it is relative and the variable is set.
inline fs::path output_root(const RunConfig& c) {
    fs::path p(c.output_dir);
    if (p.is_relative()) {
        if (const char* root = std::getenv("EGGFM_OUTPUT_ROOT"); root != nullptr && *root != '\0') return fs::path(root) / p;
    }
    return p;
}

/// One training run: all data (`full`) or all data minus one held-out timepoint.
struct RunSpec {
    std::optional<int> holdout;
    fs::path dir;
};

inline std::vector<RunSpec> runs(const RunConfig& c) {
    const fs::path root = output_root(c);
    if (c.holdouts.empty()) return {{std::nullopt, root / "full"}};
    std::vector<RunSpec> out;
    for (int h : c.holdouts) out.push_back({h, root / ("holdout_" + std::to_string(h))});
    return out;
}

struct Paths {
    fs::path dir;
    fs::path score(int k) const { return dir / (k == 1 ? std::string("score.ckpt") : "score_" + std::to_string(k) + ".ckpt"); }
    fs::path energy(int k) const { return dir / (k == 1 ? std::string("energy.ckpt") : "energy_" + std::to_string(k) + ".ckpt"); }
    fs::path weights(int k) const { return dir / ("weights_" + std::to_string(k) + ".bin"); }
    fs::path score_global() const { return dir / "score_global.ckpt"; }
    fs::path energy_global() const { return dir / "energy_global.ckpt"; }
    fs::path metric_energy() const { return dir / "metric_energy.ckpt"; }
    fs::path metric() const { return dir / "metric.json"; }
    fs::path geodesic() const { return dir / "geodesic.ckpt"; }
    fs::path embedding() const { return dir / "embedding.ckpt"; }
    fs::path flow() const { return dir / "flow.ckpt"; }
    fs::path trace(const std::string& name) const { return dir / ("loss_" + name + ".csv"); }
};

inline void require_artifact(const fs::path& p, Stage needed, const std::string& what) {
    require(fs::exists(p), ErrorCode::prerequisite,
            what + " requires: " + to_string(needed) + " (missing " + p.string() + ")");
}

inline void require_artifact(const fs::path& p, Stage needed, Stage for_stage) {
    require_artifact(p, needed, "stage " + to_string(for_stage));
}

inline void write_trace(const fs::path& p, const std::vector<double>& trace) {
    std::ostringstream os;
    os << "step,loss\n" << std::setprecision(17);
    for (std::size_t i = 0; i < trace.size(); ++i) os << i << ',' << trace[i] << '\n';
    io::write_file(p, os.str());
}

// ---------------------------------------------------------------------------
// Data

/**
 * The dataset a config names, with optional PCA whitening. Unlabeled data is split
 * into two halves labelled 0 and 1 so the transport stages have a source and target.
 */
inline data::Dataset load_data(const RunConfig& c) {
    require(!c.data_path.empty(), ErrorCode::config, "data_path is not set");
    std::optional<data::Format> fmt;
    if (c.data_format == "csv") fmt = data::Format::csv;
    if (c.data_format == "binary") fmt = data::Format::binary;
    data::Dataset ds = data::load_dataset(c.data_path, fmt);
    ds.cluster_id.reset();
    ds.weight.reset();
    if (c.pca_dim > 0) ds.points = data::pca_whiten(ds.points, c.pca_dim).second;
    if (!ds.timepoint) {
        require(ds.n() >= 2, ErrorCode::invalid_argument, "unlabeled data needs at least 2 rows");
        std::vector<int> t(static_cast<std::size_t>(ds.n()), 0);
        for (Eigen::Index i = ds.n() / 2; i < ds.n(); ++i) t[static_cast<std::size_t>(i)] = 1;
        ds.timepoint = std::move(t);
    }
    ds.validate();
    return ds;
}

inline data::Dataset without_timepoint(const data::Dataset& ds, std::optional<int> holdout) {
    if (!holdout) return ds;
    std::vector<Eigen::Index> keep;
    for (std::size_t i = 0; i < ds.timepoint->size(); ++i) {
        if ((*ds.timepoint)[i] != *holdout) keep.push_back(static_cast<Eigen::Index>(i));
    }
    return data::subset(ds, keep);
}

/// Consecutive observed labels, with time normalized over the full label range.
inline std::vector<transport::Interval> train_intervals(const data::Dataset& full, std::optional<int> holdout) {
    const std::vector<int> labels = full.timepoints();
    if (holdout) return transport::multi_timepoint_schedule(labels, *holdout).intervals;
    require(labels.size() >= 2, ErrorCode::invalid_argument, "training needs at least 2 distinct timepoints");
    std::vector<transport::Interval> out;
    for (std::size_t i = 0; i + 1 < labels.size(); ++i) {
        out.push_back({labels[i], labels[i + 1], transport::label_time(labels[i], labels.front(), labels.back()),
                       transport::label_time(labels[i + 1], labels.front(), labels.back())});
    }
    return out;
}

inline void assign_clusters(data::Dataset& ds, const RunConfig& c, std::uint64_t seed) {
    if (c.clustering == "none") return;
    data::ClusterParams p;
    p.num_clusters = c.num_clusters;
    p.n_neighbors = c.leiden_n_neighbors;
    p.resolution = c.leiden_resolution;
    p.seed = seed;
    const auto method = c.clustering == "kmeans" ? data::ClusterMethod::kmeans : data::ClusterMethod::graph_community;
    auto model = data::fit_clusters(ds, method, p);
    ds.cluster_id = model.assignment;
}

// ---------------------------------------------------------------------------
// Model construction and checkpoints

inline refine::ModelSetup model_setup(const RunConfig& c, int dim) {
    refine::ModelSetup s;
    s.cond.dim = dim;
    s.cond.n_freq = c.n_freq;
    s.schedule = score::NoiseSchedule::log_spaced(c.n_noise_scales, c.sigma_min, c.sigma_max);
    s.score_shape = {c.hidden_dim, c.n_layers};
    s.energy_shape = {c.hidden_dim, c.n_layers};
    s.score_train = {c.score_steps, c.score_batch_size, c.learning_rate, c.grad_clip, c.ema_decay, true};
    s.energy_train = {c.energy_steps, c.score_batch_size, c.learning_rate, c.grad_clip, c.ema_decay, true};
    return s;
}

inline refine::RefineConfig refine_config(const RunConfig& c) {
    refine::RefineConfig r;
    r.steps = c.annealing_steps;
    r.beta_w = c.weight_beta;
    r.alpha = c.anneal_alpha;
    r.beta_min = c.temperature_min;
    r.beta_max = c.temperature_max;
    r.q_lo = c.energy_clip_lo;
    r.q_hi = c.energy_clip_hi;
    r.distill_norm = c.distill_norm == "l2" ? refine::DistillNorm::l2 : refine::DistillNorm::l1;
    r.distill_ratio = c.distill_ratio == "as_printed" ? refine::DistillRatio::as_printed : refine::DistillRatio::inverse;
    r.global_pass = c.global_pass;
    return r;
}

inline nn::TrainConfig flow_train(const RunConfig& c, long steps) {
    return {steps, c.flow_batch_size, c.learning_rate, c.grad_clip, c.ema_decay, true};
}

inline json conditioning_json(const score::NoiseSchedule& s, const score::Conditioning& cond) {
    return {{"sigmas", s.sigmas}, {"dim", cond.dim}, {"n_freq", cond.n_freq}, {"cluster_conditioned", cond.cluster_conditioned}};
}

template <typename Model>
Model conditioned_from_checkpoint(const nn::Checkpoint& ck, const fs::path& p) {
    Model m;
    m.params = ck.params;
    try {
        m.schedule.sigmas = ck.extra.at("sigmas").get<std::vector<double>>();
        m.cond.dim = ck.extra.at("dim").get<int>();
        m.cond.n_freq = ck.extra.at("n_freq").get<int>();
        m.cond.cluster_conditioned = ck.extra.at("cluster_conditioned").get<bool>();
    } catch (const json::exception& e) {
        fail(ErrorCode::format, p.string() + ": missing conditioning metadata (" + e.what() + ")");
    }
    m.schedule.validate();
    return m;
}

/// Writes/reads checkpoints stamped with the run seed and config hash.
class Store {
public:
    Store(fs::path dir, std::uint64_t seed, std::string config_hash)
        : paths{std::move(dir)}, seed_(seed), hash_(std::move(config_hash)) {}

    Paths paths;

    void save(const fs::path& p, const nn::ModelParams& params, json extra) const {
        nn::Checkpoint ck;
        ck.params = params;
        ck.seed = seed_;
        ck.config_hash = hash_;
        ck.extra = std::move(extra);
        nn::write_checkpoint(p, ck);
    }

    void save_score(const fs::path& p, const score::ScoreModel& m) const { save(p, m.params, conditioning_json(m.schedule, m.cond)); }
    void save_energy(const fs::path& p, const score::EnergyModel& m) const { save(p, m.params, conditioning_json(m.schedule, m.cond)); }

    score::ScoreModel load_score(const fs::path& p) const {
        return conditioned_from_checkpoint<score::ScoreModel>(nn::read_checkpoint(p), p);
    }
    score::EnergyModel load_energy(const fs::path& p) const {
        return conditioned_from_checkpoint<score::EnergyModel>(nn::read_checkpoint(p), p);
    }

    void save_geodesic(const geometry::GeodesicModel& g) const {
        save(paths.geodesic(), g.params, {{"dim", g.dim}, {"n_freq", g.n_freq}});
    }
    geometry::GeodesicModel load_geodesic() const {
        const auto ck = nn::read_checkpoint(paths.geodesic());
        return {ck.params, ck.extra.value("dim", ck.params.arch.out_dim), ck.extra.value("n_freq", 32)};
    }

    void save_embedding(const transport::EmbeddingModel& e) const { save(paths.embedding(), e.params, {{"dim", e.dim}}); }
    transport::EmbeddingModel load_embedding() const {
        const auto ck = nn::read_checkpoint(paths.embedding());
        return {ck.params, ck.extra.value("dim", ck.params.arch.in_dim)};
    }

    void save_flow(const transport::FlowModel& f) const { save(paths.flow(), f.params, {{"dim", f.dim}, {"n_freq", f.n_freq}}); }
    transport::FlowModel load_flow() const {
        const auto ck = nn::read_checkpoint(paths.flow());
        return {ck.params, ck.extra.value("dim", ck.params.arch.out_dim), ck.extra.value("n_freq", 32)};
    }

    void save_metric(const geometry::MetricField& m) const {
        if (m.energy) save_energy(paths.metric_energy(), *m.energy);
        io::write_file(paths.metric(), geometry::metric_sidecar(m).dump(2) + "\n");
    }
    geometry::MetricField load_metric() const {
        json j;
        try {
            j = json::parse(io::read_file(paths.metric()));
        } catch (const json::exception& e) {
            fail(ErrorCode::format, paths.metric().string() + ": " + e.what());
        }
        std::optional<score::EnergyModel> energy;
        if (j.value("has_energy", false)) energy = load_energy(paths.metric_energy());
        return geometry::metric_from_sidecar(j, std::move(energy));
    }

    void save_weights(int k, double beta, const refine::SnisWeights& w) const {
        io::write_file(paths.weights(k), refine::encode_weights({k, beta, w}));
    }
    refine::SnisWeights load_weights(int k) const {
        return refine::decode_weights(io::read_file(paths.weights(k)), paths.weights(k).string()).weights;
    }

private:
    std::uint64_t seed_;
    std::string hash_;
};

// ---------------------------------------------------------------------------
// Training

/// Everything a stage needs: config, data, seeds and the artifact store.
struct RunContext {
    RunConfig cfg;
    RunSpec spec;
    data::Dataset full;  // all timepoints
    data::Dataset train; // holdout removed, clusters assigned
    std::uint64_t seed = 0;
    Store store;

    bool identity_metric() const { return cfg.metric == "identity"; }
    int dim() const { return static_cast<int>(full.d()); }
};

/// Per-run seed: the config seed for the full-data run, a derived stream per holdout.
inline std::uint64_t run_seed(const RunConfig& c, const RunSpec& r) {
    return r.holdout ? derive_seed(c.seed, 7000 + static_cast<std::uint64_t>(*r.holdout)) : c.seed;
}

enum SeedStream : std::uint64_t {
    cluster_seed = 11,
    refine_seed = 12,
    geodesic_seed = 13,
    embedding_seed = 14,
    flow_seed = 15,
};

inline RunContext make_context(const RunConfig& cfg, const data::Dataset& full, const RunSpec& spec) {
    const std::uint64_t seed = run_seed(cfg, spec);
    RunContext ctx{cfg, spec, full, without_timepoint(full, spec.holdout), seed, Store(spec.dir, seed, config::hash(cfg))};
    assign_clusters(ctx.train, cfg, derive_seed(seed, cluster_seed));
    fs::create_directories(spec.dir);
    return ctx;
}

/// Product pairs on each training interval, concatenated (the geodesic and embedding batches).
inline geometry::PairSampler product_interval_pairs(const RunContext& ctx) {
    std::vector<geometry::PairSampler> parts;
    for (const auto& iv : train_intervals(ctx.full, ctx.spec.holdout)) {
        parts.push_back(geometry::product_pairs(ctx.train.rows_at_time(iv.label0), ctx.train.rows_at_time(iv.label1)));
    }
    return transport::concat_pairs(std::move(parts));
}

inline refine::RefineState refine_state_after(const RunContext& ctx, int k) {
    const auto setup = model_setup(ctx.cfg, ctx.dim());
    refine::RefineState st = refine::init_refine(ctx.train, setup, derive_seed(ctx.seed, refine_seed));
    st.score = ctx.store.load_score(ctx.store.paths.score(k));
    st.energy = ctx.store.load_energy(ctx.store.paths.energy(k));
    st.weights = ctx.store.load_weights(k);
    st.completed = k;
    return st;
}

inline geometry::MetricField metric_from_config(const RunConfig& c, const score::EnergyModel& energy, const Matrix& pts) {
    geometry::MetricParams mp;
    mp.gamma = c.metric_gamma;
    mp.lambda = c.metric_scale;
    mp.q_lo = c.energy_clip_lo;
    mp.q_hi = c.energy_clip_hi;
    mp.q_metric = c.metric_clip_lower_quantile;
    mp.floor_mode = geometry::floor_mode_from_string(c.floor_mode);
    return geometry::fit_metric(energy, pts, mp);
}

/// Score half of refinement step 1.
inline void stage_score(RunContext& ctx) {
    if (ctx.identity_metric()) return;
    const auto setup = model_setup(ctx.cfg, ctx.dim());
    const auto rcfg = refine_config(ctx.cfg);
    const std::uint64_t s = derive_seed(ctx.seed, refine_seed);
    refine::RefineState st = refine::init_refine(ctx.train, setup, s);
    const auto fit = refine::refine_score_step(st, ctx.train, rcfg, setup, s);
    ctx.store.save_score(ctx.store.paths.score(1), st.score);
    write_trace(ctx.store.paths.trace("score_1"), fit.trace);
}

/// Energy half of step 1 and the first SNIS weights.
inline void stage_energy(RunContext& ctx) {
    if (ctx.identity_metric()) return;
    require_artifact(ctx.store.paths.score(1), Stage::score, Stage::energy);
    const auto setup = model_setup(ctx.cfg, ctx.dim());
    const auto rcfg = refine_config(ctx.cfg);
    const std::uint64_t s = derive_seed(ctx.seed, refine_seed);
    refine::RefineState st = refine::init_refine(ctx.train, setup, s);
    st.score = ctx.store.load_score(ctx.store.paths.score(1));
    const auto fit = refine::refine_energy_step(st, ctx.train, rcfg, setup, s);
    ctx.store.save_energy(ctx.store.paths.energy(1), st.energy);
    ctx.store.save_weights(1, rcfg.beta(1), st.weights);
    write_trace(ctx.store.paths.trace("energy_1"), fit.trace);
}

/// Steps 2..K, the optional unconditional pass, and the metric built from the final energy.
inline void stage_refine(RunContext& ctx) {
    if (ctx.identity_metric()) {
        ctx.store.save_metric(geometry::MetricField::constant(1.0, 0.0));
        return;
    }
    require_artifact(ctx.store.paths.energy(1), Stage::energy, Stage::refine);
    require_artifact(ctx.store.paths.weights(1), Stage::energy, Stage::refine);
    const auto setup = model_setup(ctx.cfg, ctx.dim());
    const auto rcfg = refine_config(ctx.cfg);
    const std::uint64_t s = derive_seed(ctx.seed, refine_seed);
    refine::RefineState st = refine_state_after(ctx, 1);
    for (int k = 2; k <= rcfg.steps; ++k) {
        const auto sf = refine::refine_score_step(st, ctx.train, rcfg, setup, s);
        const auto ef = refine::refine_energy_step(st, ctx.train, rcfg, setup, s);
        ctx.store.save_score(ctx.store.paths.score(k), st.score);
        ctx.store.save_energy(ctx.store.paths.energy(k), st.energy);
        ctx.store.save_weights(k, rcfg.beta(k), st.weights);
        write_trace(ctx.store.paths.trace("score_" + std::to_string(k)), sf.trace);
        write_trace(ctx.store.paths.trace("energy_" + std::to_string(k)), ef.trace);
    }
    score::EnergyModel final_energy = st.energy;
    if (ctx.train.num_clusters() > 1) {
        require(rcfg.global_pass, ErrorCode::config,
                "clustered refinement needs global_pass = true to build an unconditional metric energy");
        const auto art = refine::refine_global_pass(st, ctx.train, rcfg, setup, s);
        ctx.store.save_score(ctx.store.paths.score_global(), art.score);
        ctx.store.save_energy(ctx.store.paths.energy_global(), art.energy);
        write_trace(ctx.store.paths.trace("score_global"), art.score_fit.trace);
        write_trace(ctx.store.paths.trace("energy_global"), art.energy_fit.trace);
        final_energy = art.energy;
    }
    ctx.store.save_metric(metric_from_config(ctx.cfg, final_energy, ctx.train.points));
}

inline void stage_geodesic(RunContext& ctx) {
    require_artifact(ctx.store.paths.metric(), Stage::refine, Stage::geodesic);
    const auto& c = ctx.cfg;
    auto geo = geometry::GeodesicModel::init(ctx.dim(), c.n_freq, c.hidden_dim, c.n_layers, derive_seed(ctx.seed, geodesic_seed));
    if (!ctx.identity_metric()) {
        const auto metric = ctx.store.load_metric();
        const auto fit = geometry::train_geodesic(geo, metric, product_interval_pairs(ctx), flow_train(c, c.geodesic_steps),
                                                  c.sigma_flow, derive_seed(ctx.seed, geodesic_seed + 100));
        geo.params = fit.params;
        write_trace(ctx.store.paths.trace("geodesic"), fit.trace);
    }
    // Under the identity metric psi stays at its zero initialization: the straight chord.
    ctx.store.save_geodesic(geo);
}

inline void stage_embedding(RunContext& ctx) {
    require_artifact(ctx.store.paths.geodesic(), Stage::geodesic, Stage::embedding);
    if (ctx.identity_metric()) return; // Euclidean distance is already isometric
    const auto& c = ctx.cfg;
    const auto geo = ctx.store.load_geodesic();
    const auto metric = ctx.store.load_metric();
    const int out = c.embedding_dim > 0 ? c.embedding_dim : ctx.dim();
    auto emb = transport::EmbeddingModel::init(ctx.dim(), out, c.hidden_dim, c.n_layers, derive_seed(ctx.seed, embedding_seed));
    const auto form = c.embedding_residual == "absolute" ? transport::EmbeddingResidual::absolute
                                                         : transport::EmbeddingResidual::squared;
    const auto fit = transport::train_embedding(emb, geo, metric, product_interval_pairs(ctx), flow_train(c, c.embedding_steps),
                                                c.sigma_flow, derive_seed(ctx.seed, embedding_seed + 100), form);
    emb.params = fit.params;
    ctx.store.save_embedding(emb);
    write_trace(ctx.store.paths.trace("embedding"), fit.trace);
}

inline void stage_flow(RunContext& ctx) {
    require_artifact(ctx.store.paths.geodesic(), Stage::geodesic, Stage::flow);
    const auto& c = ctx.cfg;
    const bool learned_cost = c.coupling == "ot" && !ctx.identity_metric();
    if (learned_cost) require_artifact(ctx.store.paths.embedding(), Stage::embedding, Stage::flow);
    const auto geo = ctx.store.load_geodesic();
    transport::CostFn cost = transport::euclidean_cost;
    if (learned_cost) cost = transport::embedding_cost(ctx.store.load_embedding());
    transport::OtOptions opt;
    opt.solver = transport::solver_from_string(c.ot_solver);
    opt.epsilon = c.ot_epsilon;
    std::vector<transport::IntervalPairs> intervals;
    std::uint64_t k = 0;
    for (const auto& iv : train_intervals(ctx.full, ctx.spec.holdout)) {
        Matrix p0 = ctx.train.rows_at_time(iv.label0);
        Matrix p1 = ctx.train.rows_at_time(iv.label1);
        opt.seed = derive_seed(ctx.seed, flow_seed + 100 + k++);
        auto pairs = c.coupling == "ot" ? transport::ot_pairs(std::move(p0), std::move(p1), cost, opt)
                                        : geometry::product_pairs(std::move(p0), std::move(p1));
        intervals.push_back({std::move(pairs), iv.tau0, iv.tau1});
    }
    auto flow = transport::FlowModel::init(ctx.dim(), c.n_freq, c.hidden_dim, c.n_layers, derive_seed(ctx.seed, flow_seed));
    const auto fit = transport::train_flow(flow, geo, intervals, flow_train(c, c.flow_steps), c.sigma_flow,
                                           derive_seed(ctx.seed, flow_seed + 1));
    flow.params = fit.params;
    ctx.store.save_flow(flow);
    write_trace(ctx.store.paths.trace("flow"), fit.trace);
}

inline void run_stage(RunContext& ctx, Stage s) {
    switch (s) {
    case Stage::score: return stage_score(ctx);
    case Stage::energy: return stage_energy(ctx);
    case Stage::refine: return stage_refine(ctx);
    case Stage::geodesic: return stage_geodesic(ctx);
    case Stage::embedding: return stage_embedding(ctx);
    case Stage::flow: return stage_flow(ctx);
    }
}

/// Persists the effective config beside the run outputs.
inline void write_effective_config(const RunConfig& c) {
    const fs::path root = output_root(c);
    fs::create_directories(root);
    io::write_file(root / "config.json", config::to_json(c).dump(2) + "\n");
}

using Progress = std::function<void(const RunSpec&, Stage)>;

/// Runs the given stages, in order, for every run (full data or each holdout).
inline void train(const RunConfig& c, const std::vector<Stage>& stages, const Progress& progress = nullptr) {
    config::validate(c);
    const data::Dataset full = load_data(c);
    write_effective_config(c);
    for (const RunSpec& r : runs(c)) {
        RunContext ctx = make_context(c, full, r);
        for (Stage s : stages) {
            if (progress) progress(r, s);
            run_stage(ctx, s);
        }
    }
}

inline void train(const RunConfig& c, Stage s, const Progress& progress = nullptr) {
    train(c, std::vector<Stage>{s}, progress);
}

inline void train_all(const RunConfig& c, const Progress& progress = nullptr) {
    train(c, std::vector<Stage>(std::begin(all_stages), std::end(all_stages)), progress);
}

// ---------------------------------------------------------------------------
// Evaluation

/// AVE of the full-data geodesic against great circles on fresh uniform sphere pairs, one value per eval seed.
inline eval::EvalReport evaluate_ave(const RunConfig& c) {
    config::validate(c);
    require(c.holdouts.empty(), ErrorCode::config, "ave evaluates the full-data run; clear holdouts");
    const RunSpec r = runs(c).front();
    const Store store(r.dir, run_seed(c, r), config::hash(c));
    require_artifact(store.paths.geodesic(), Stage::geodesic, "eval ave");
    const auto geo = store.load_geodesic();
    std::vector<double> values, chord_values, pair_std;
    for (std::uint64_t s : c.eval_seeds) {
        const Matrix pts = data::sample_sphere(geo.dim, static_cast<Eigen::Index>(2 * c.ave_pairs), derive_seed(s, 21)).points;
        const Matrix a = pts.topRows(static_cast<Eigen::Index>(c.ave_pairs));
        const Matrix b = pts.bottomRows(static_cast<Eigen::Index>(c.ave_pairs));
        const geometry::PairSampler fixed = [&](std::size_t, std::uint64_t) { return std::pair{a, b}; };
        eval::AveOptions opt;
        opt.n_pairs = c.ave_pairs;
        opt.n_t = c.ave_n_t;
        opt.seed = derive_seed(s, 22);
        const auto learned = eval::average_geodesic_error(eval::learned_geodesic(geo), eval::sphere_geodesic, fixed, opt);
        const auto chord = eval::average_geodesic_error(eval::chord, eval::sphere_geodesic, fixed, opt);
        values.push_back(learned.value);
        pair_std.push_back(learned.pair_std);
        chord_values.push_back(chord.value);
    }
    auto rep = eval::summarize("ave", values, c.eval_seeds, config::hash(c), c.ave_pairs * static_cast<std::size_t>(c.ave_n_t));
    rep.extra["chord"] = chord_values;
    rep.extra["pair_std"] = pair_std;
    return rep;
}

/// Leave-one-timepoint-out W1 for every holdout run and eval seed.
inline eval::EvalReport evaluate_w1(const RunConfig& c) {
    config::validate(c);
    require(!c.holdouts.empty(), ErrorCode::config, "w1 needs at least one holdout timepoint");
    const data::Dataset full = load_data(c);
    std::vector<double> values;
    json per_holdout = json::object();
    for (const RunSpec& r : runs(c)) {
        const Store store(r.dir, run_seed(c, r), config::hash(c));
        require_artifact(store.paths.flow(), Stage::flow, "eval w1");
        const auto flow = store.load_flow();
        const auto sched = transport::multi_timepoint_schedule(full.timepoints(), *r.holdout);
        std::vector<double> hv;
        for (std::uint64_t s : c.eval_seeds) {
            const auto res = eval::leave_one_out_eval(flow, full, sched, c.n_steps, c.w1_max_n, s,
                                                      transport::method_from_string(c.integrator));
            hv.push_back(res.w1);
            values.push_back(res.w1);
        }
        per_holdout[std::to_string(*r.holdout)] = hv;
    }
    auto rep = eval::summarize("w1", values, c.eval_seeds, config::hash(c), c.w1_max_n);
    rep.extra["per_holdout"] = per_holdout;
    return rep;
}

/// Writes `eval_<metric>.json` and appends to `results.csv` under the output root.
inline void write_report(const RunConfig& c, const eval::EvalReport& r) {
    const fs::path root = output_root(c);
    fs::create_directories(root);
    io::write_file(root / ("eval_" + r.metric + ".json"), r.to_json().dump(2) + "\n");
    eval::append_report_csv(root / "results.csv", r);
}

// ---------------------------------------------------------------------------
// Figure and trajectory exports

inline eval::Grid export_grid(const RunConfig& c, const eval::PlaneSpec& plane, int resolution, const std::string& field) {
    const RunSpec r = runs(c).front();
    const Store store(r.dir, run_seed(c, r), config::hash(c));
    require_artifact(store.paths.metric(), Stage::refine, "export-grid");
    const auto metric = store.load_metric();
    if (field == "metric") return eval::export_energy_grid(eval::metric_field(metric), plane, resolution, field);
    require(field == "energy", ErrorCode::invalid_argument, "export-grid: field must be energy or metric");
    require(metric.energy.has_value(), ErrorCode::prerequisite, "export-grid: the identity metric has no energy");
    return eval::export_energy_grid(eval::energy_field(*metric.energy, metric.sigma), plane, resolution, field);
}

/**
 * Integrates the first run's flow from the rows at label `from` to label `to`
 * (at most `max_points` rows, deterministic subsample).
 */
inline transport::Trajectory interpolate(const RunConfig& c, int from, int to, int n_steps, std::size_t max_points) {
    const data::Dataset full = load_data(c);
    const auto labels = full.timepoints();
    auto known = [&](int l) { return std::find(labels.begin(), labels.end(), l) != labels.end(); };
    require(known(from), ErrorCode::invalid_argument, "interpolate: --from " + std::to_string(from) + " is not a timepoint");
    require(labels.size() >= 2, ErrorCode::invalid_argument, "interpolate: need at least 2 timepoints");
    const RunSpec r = runs(c).front();
    const Store store(r.dir, run_seed(c, r), config::hash(c));
    require_artifact(store.paths.flow(), Stage::flow, "interpolate");
    const auto flow = store.load_flow();
    Rng rng(derive_seed(c.seed, 31));
    const Matrix x0 = eval::subsample_rows(full.rows_at_time(from), static_cast<Eigen::Index>(max_points), rng);
    const double t0 = transport::label_time(from, labels.front(), labels.back());
    const double t1 = transport::label_time(to, labels.front(), labels.back());
    return transport::integrate(flow, x0, t0, t1, n_steps, transport::method_from_string(c.integrator));
}

} // namespace eggfm::pipeline
