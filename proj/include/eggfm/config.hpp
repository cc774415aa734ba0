#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "eggfm/error.hpp"
#include "eggfm/io.hpp"

namespace eggfm::config {

using io::json;

/**
 * Every run hyperparameter. Defaults are the base synthetic configuration; `preset`
 * selects the EB or CITE overrides. Training lengths are optimizer steps.
 */
struct RunConfig {
    std::string preset = "synthetic";
    std::uint64_t seed = 0;
    std::string output_dir = "run";

    // data
    std::string data_path;
    std::string data_format = "auto"; // auto | csv | binary
    int pca_dim = 0;                  // 0 keeps the ambient coordinates
    std::vector<int> holdouts;

    // shared network / optimizer settings
    double learning_rate = 1e-4;
    int hidden_dim = 512;
    int n_layers = 4;
    double grad_clip = 10.0;
    double ema_decay = 0.999;
    int n_freq = 32;

    // score / energy
    std::size_t score_batch_size = 4196;
    long score_steps = 2000;
    long energy_steps = 2000;
    int n_noise_scales = 20;
    double sigma_min = 0.01;
    double sigma_max = 0.2;

    // refinement
    int annealing_steps = 2;
    double temperature_min = 1.0;
    double temperature_max = 1.0;
    double weight_beta = 0.3;
    double energy_clip_lo = 0.05;
    double energy_clip_hi = 0.98;
    double anneal_alpha = 1.0;
    std::string distill_norm = "l1";       // l1 | l2
    std::string distill_ratio = "inverse"; // inverse | as_printed
    bool global_pass = true;

    // clustering
    std::string clustering = "none"; // none | kmeans | graph
    int num_clusters = 2;            // kmeans
    int leiden_n_neighbors = 10;
    double leiden_resolution = 0.3;

    // metric
    std::string metric = "energy"; // energy | identity
    double metric_scale = 10.0;    // lambda
    double metric_gamma = 0.2;
    double metric_clip_lower_quantile = 0.05;
    std::string floor_mode = "lambda_exp"; // lambda_exp | energy

    // geodesic / embedding / flow
    std::size_t flow_batch_size = 256;
    long geodesic_steps = 2000;
    long embedding_steps = 2000;
    long flow_steps = 2000;
    double sigma_flow = 0.1;
    int embedding_dim = 0; // 0 keeps the ambient dimension
    std::string embedding_residual = "squared"; // squared | absolute
    std::string coupling = "ot";    // ot | product
    std::string ot_solver = "exact"; // exact | entropic
    double ot_epsilon = 0.05;

    // evaluation
    std::string integrator = "rk4"; // rk4 | euler
    int n_steps = 100;
    std::size_t w1_max_n = 1024;
    std::size_t ave_pairs = 1000;
    int ave_n_t = 16;
    std::vector<std::uint64_t> eval_seeds = {0};
};

namespace detail {

template <typename T>
void put(json& j, const char* key, const T& v) {
    j[key] = v;
}

} // namespace detail

/// Visits every (key, field) pair; the single source of the schema.
template <typename Cfg, typename Fn>
void for_each_field(Cfg& c, Fn&& fn) {
    fn("preset", c.preset);
    fn("seed", c.seed);
    fn("output_dir", c.output_dir);
    fn("data_path", c.data_path);
    fn("data_format", c.data_format);
    fn("pca_dim", c.pca_dim);
    fn("holdouts", c.holdouts);
    fn("learning_rate", c.learning_rate);
    fn("hidden_dim", c.hidden_dim);
    fn("n_layers", c.n_layers);
    fn("grad_clip", c.grad_clip);
    fn("ema_decay", c.ema_decay);
    fn("n_freq", c.n_freq);
    fn("score_batch_size", c.score_batch_size);
    fn("score_steps", c.score_steps);
    fn("energy_steps", c.energy_steps);
    fn("n_noise_scales", c.n_noise_scales);
    fn("sigma_min", c.sigma_min);
    fn("sigma_max", c.sigma_max);
    fn("annealing_steps", c.annealing_steps);
    fn("temperature_min", c.temperature_min);
    fn("temperature_max", c.temperature_max);
    fn("weight_beta", c.weight_beta);
    fn("energy_clip_lo", c.energy_clip_lo);
    fn("energy_clip_hi", c.energy_clip_hi);
    fn("anneal_alpha", c.anneal_alpha);
    fn("distill_norm", c.distill_norm);
    fn("distill_ratio", c.distill_ratio);
    fn("global_pass", c.global_pass);
    fn("clustering", c.clustering);
    fn("num_clusters", c.num_clusters);
    fn("leiden_n_neighbors", c.leiden_n_neighbors);
    fn("leiden_resolution", c.leiden_resolution);
    fn("metric", c.metric);
    fn("metric_scale", c.metric_scale);
    fn("metric_gamma", c.metric_gamma);
    fn("metric_clip_lower_quantile", c.metric_clip_lower_quantile);
    fn("floor_mode", c.floor_mode);
    fn("flow_batch_size", c.flow_batch_size);
    fn("geodesic_steps", c.geodesic_steps);
    fn("embedding_steps", c.embedding_steps);
    fn("flow_steps", c.flow_steps);
    fn("sigma_flow", c.sigma_flow);
    fn("embedding_dim", c.embedding_dim);
    fn("embedding_residual", c.embedding_residual);
    fn("coupling", c.coupling);
    fn("ot_solver", c.ot_solver);
    fn("ot_epsilon", c.ot_epsilon);
    fn("integrator", c.integrator);
    fn("n_steps", c.n_steps);
    fn("w1_max_n", c.w1_max_n);
    fn("ave_pairs", c.ave_pairs);
    fn("ave_n_t", c.ave_n_t);
    fn("eval_seeds", c.eval_seeds);
}

inline json to_json(const RunConfig& c) {
    json j = json::object();
    for_each_field(c, [&](const char* key, const auto& v) { detail::put(j, key, v); });
    return j;
}

/// Base values with the named preset applied.
inline RunConfig preset(const std::string& name) {
    RunConfig c;
    c.preset = name;
    if (name == "synthetic") return c;
    if (name == "eb") {
        c.score_steps = 500;
        c.energy_steps = 3000;
        c.embedding_steps = 2000;
        c.flow_steps = 2000;
        c.n_layers = 5;
        c.annealing_steps = 3;
        c.metric_scale = 4.0;
        c.temperature_min = 5.0;
        c.temperature_max = 10.0;
        c.sigma_min = 0.1;
        c.sigma_max = 0.2;
        c.sigma_flow = 0.05;
        c.leiden_resolution = 0.0;
        c.clustering = "graph";
        c.pca_dim = 5;
        c.holdouts = {2, 3, 4};
        return c;
    }
    if (name == "cite") {
        c.score_steps = 500;
        c.energy_steps = 3000;
        c.embedding_steps = 500;
        c.flow_steps = 2000;
        c.n_layers = 4;
        c.annealing_steps = 2;
        c.metric_scale = 1.0;
        c.temperature_min = 1.0;
        c.temperature_max = 1.0;
        c.sigma_min = 0.02;
        c.sigma_max = 0.3;
        c.sigma_flow = 0.2;
        c.energy_clip_lo = 0.05;
        c.energy_clip_hi = 0.95;
        c.metric_clip_lower_quantile = 0.05;
        c.metric_gamma = 0.5;
        c.weight_beta = 0.2;
        c.clustering = "graph";
        c.pca_dim = 5;
        c.holdouts = {3, 4};
        return c;
    }
    fail(ErrorCode::config, "unknown preset '" + name + "' (expected synthetic, eb or cite)");
}

/// Collects every range violation.
inline std::vector<std::string> violations(const RunConfig& c) {
    std::vector<std::string> v;
    auto check = [&](bool ok, const std::string& msg) {
        if (!ok) v.push_back(msg);
    };
    auto one_of = [&](const std::string& key, const std::string& val, std::initializer_list<const char*> allowed) {
        for (const char* a : allowed) {
            if (val == a) return;
        }
        std::string list;
        for (const char* a : allowed) list += (list.empty() ? "" : "|") + std::string(a);
        v.push_back(key + " must be one of " + list + ", got '" + val + "'");
    };
    one_of("preset", c.preset, {"synthetic", "eb", "cite"});
    check(!c.output_dir.empty(), "output_dir must not be empty");
    one_of("data_format", c.data_format, {"auto", "csv", "binary"});
    check(c.pca_dim >= 0, "pca_dim must be >= 0");
    check(c.learning_rate > 0.0, "learning_rate must be > 0");
    check(c.hidden_dim >= 1, "hidden_dim must be >= 1");
    check(c.n_layers >= 1, "n_layers must be >= 1");
    check(c.grad_clip > 0.0, "grad_clip must be > 0");
    check(c.ema_decay >= 0.0 && c.ema_decay < 1.0, "ema_decay must be in [0, 1)");
    check(c.n_freq >= 1, "n_freq must be >= 1");
    check(c.score_batch_size >= 1, "score_batch_size must be >= 1");
    check(c.score_steps >= 0, "score_steps must be >= 0");
    check(c.energy_steps >= 0, "energy_steps must be >= 0");
    check(c.n_noise_scales >= 1, "n_noise_scales must be >= 1");
    check(c.sigma_min > 0.0, "sigma_min must be > 0");
    check(c.sigma_min < c.sigma_max || (c.n_noise_scales == 1 && c.sigma_min == c.sigma_max),
          "sigma_min must be < sigma_max");
    check(c.annealing_steps >= 1, "annealing_steps (K) must be >= 1");
    check(c.temperature_min > 0.0, "temperature_min must be > 0");
    check(c.temperature_min <= c.temperature_max, "temperature_min must be <= temperature_max");
    check(c.weight_beta >= 0.0, "weight_beta must be >= 0");
    check(0.0 <= c.energy_clip_lo && c.energy_clip_lo < c.energy_clip_hi && c.energy_clip_hi <= 1.0,
          "energy clip quantiles must satisfy 0 <= energy_clip_lo < energy_clip_hi <= 1");
    check(0.0 <= c.anneal_alpha && c.anneal_alpha <= 1.0, "anneal_alpha must be in [0, 1]");
    one_of("distill_norm", c.distill_norm, {"l1", "l2"});
    one_of("distill_ratio", c.distill_ratio, {"inverse", "as_printed"});
    one_of("clustering", c.clustering, {"none", "kmeans", "graph"});
    check(c.num_clusters >= 1, "num_clusters must be >= 1");
    check(c.leiden_n_neighbors >= 1, "leiden_n_neighbors must be >= 1");
    check(c.leiden_resolution >= 0.0, "leiden_resolution must be >= 0");
    one_of("metric", c.metric, {"energy", "identity"});
    check(c.metric_scale >= 0.0, "metric_scale must be >= 0");
    check(c.metric_gamma > 0.0, "metric_gamma must be > 0");
    check(0.0 <= c.metric_clip_lower_quantile && c.metric_clip_lower_quantile <= 1.0,
          "metric_clip_lower_quantile must be in [0, 1]");
    one_of("floor_mode", c.floor_mode, {"lambda_exp", "energy"});
    check(c.flow_batch_size >= 1, "flow_batch_size must be >= 1");
    check(c.geodesic_steps >= 0, "geodesic_steps must be >= 0");
    check(c.embedding_steps >= 0, "embedding_steps must be >= 0");
    check(c.flow_steps >= 0, "flow_steps must be >= 0");
    check(c.sigma_flow >= 0.0, "sigma_flow must be >= 0");
    check(c.embedding_dim >= 0, "embedding_dim must be >= 0");
    one_of("embedding_residual", c.embedding_residual, {"squared", "absolute"});
    one_of("coupling", c.coupling, {"ot", "product"});
    one_of("ot_solver", c.ot_solver, {"exact", "entropic"});
    check(c.ot_epsilon > 0.0, "ot_epsilon must be > 0");
    one_of("integrator", c.integrator, {"rk4", "euler"});
    check(c.n_steps >= 1, "n_steps must be >= 1");
    check(c.w1_max_n >= 1, "w1_max_n must be >= 1");
    check(c.ave_pairs >= 1, "ave_pairs must be >= 1");
    check(c.ave_n_t >= 1, "ave_n_t must be >= 1");
    check(!c.eval_seeds.empty(), "eval_seeds must not be empty");
    return v;
}

inline void validate(const RunConfig& c) {
    const auto v = violations(c);
    if (v.empty()) return;
    std::string msg = "invalid config (" + std::to_string(v.size()) + " problem" + (v.size() > 1 ? "s" : "") + "): ";
    for (std::size_t i = 0; i < v.size(); ++i) msg += (i ? "; " : "") + v[i];
    fail(ErrorCode::config, msg);
}

/**
 * Overlays `j` on the preset it names (or on `base` when it names none). Unknown keys
 * and type mismatches are collected and reported together with range violations.
 */
inline RunConfig from_json(const json& j, const RunConfig& base = RunConfig{}) {
    require(j.is_object(), ErrorCode::config, "config must be a JSON object");
    RunConfig c = base;
    if (j.contains("preset") && j.at("preset").is_string() && j.at("preset").get<std::string>() != base.preset) {
        c = preset(j.at("preset").get<std::string>());
    }
    std::vector<std::string> problems;
    std::set<std::string> known;
    for_each_field(c, [&](const char* key, auto& field) {
        known.insert(key);
        if (!j.contains(key)) return;
        try {
            field = j.at(key).template get<std::decay_t<decltype(field)>>();
        } catch (const json::exception&) {
            problems.push_back(std::string(key) + " has the wrong type (" + j.at(key).type_name() + ")");
        }
    });
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) problems.push_back("unknown key '" + key + "'");
    }
    for (auto& v : violations(c)) problems.push_back(std::move(v));
    if (!problems.empty()) {
        std::string msg = "invalid config (" + std::to_string(problems.size()) + " problem" +
                          (problems.size() > 1 ? "s" : "") + "): ";
        for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
        fail(ErrorCode::config, msg);
    }
    return c;
}

inline json load_json(const std::filesystem::path& path) {
    const std::string text = io::read_file(path);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorCode::config, path.string() + ": " + e.what());
    }
}

inline RunConfig load(const std::filesystem::path& path) { return from_json(load_json(path)); }

/**
 * Applies "key=value" overrides to a config object. The value is parsed as JSON when
 * it is valid JSON (numbers, booleans, arrays) and taken as a plain string otherwise.
 */
inline json with_overrides(json j, const std::vector<std::string>& sets) {
    require(j.is_object(), ErrorCode::config, "config must be a JSON object");
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        require(eq != std::string::npos && eq > 0, ErrorCode::config, "override '" + s + "' is not key=value");
        const std::string key = s.substr(0, eq);
        const std::string text = s.substr(eq + 1);
        json v = json::parse(text, nullptr, false);
        j[key] = v.is_discarded() ? json(text) : v;
    }
    return j;
}

/// Stable hash of the canonical serialization.
inline std::string hash(const RunConfig& c) { return io::fnv1a_hex(to_json(c).dump()); }

} // namespace eggfm::config
