#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "eggfm/error.hpp"
#include "eggfm/io.hpp"
#include "eggfm/nn.hpp"
#include "eggfm/optim.hpp"

namespace eggfm::nn {

inline constexpr std::string_view checkpoint_magic = "EGGFMCK1";
inline constexpr int checkpoint_version = 1;

struct Checkpoint {
    ModelParams params;
    std::optional<OptState> opt;
    std::uint64_t seed = 0;
    std::string config_hash;
    /// Free-form metadata stored in the header (noise schedule, clip quantiles, ...).
    io::json extra = io::json::object();
};

inline io::json architecture_to_json(const Architecture& a) {
    return {{"role", to_string(a.role)}, {"in_dim", a.in_dim},         {"out_dim", a.out_dim},
            {"hidden_dim", a.hidden_dim}, {"n_layers", a.n_layers},     {"residual", a.residual},
            {"skip", a.skip},             {"zero_output", a.zero_output}};
}

inline Architecture architecture_from_json(const io::json& j) {
    Architecture a;
    a.role = role_from_string(j.at("role").get<std::string>());
    a.in_dim = j.at("in_dim").get<int>();
    a.out_dim = j.at("out_dim").get<int>();
    a.hidden_dim = j.at("hidden_dim").get<int>();
    a.n_layers = j.at("n_layers").get<int>();
    a.residual = j.at("residual").get<bool>();
    a.skip = j.at("skip").get<bool>();
    a.zero_output = j.value("zero_output", false);
    return a;
}

inline std::string save_checkpoint(const Checkpoint& ck) {
    ck.params.validate();
    io::json header;
    header["version"] = checkpoint_version;
    header["architecture"] = architecture_to_json(ck.params.arch);
    header["seed"] = ck.seed;
    header["config_hash"] = ck.config_hash;
    header["extra"] = ck.extra;

    std::vector<double> payload;
    payload.reserve(ck.params.num_scalars() * (ck.opt ? 4 : 1));
    io::json tensors = io::json::array();
    auto add_group = [&](const std::string& prefix, auto&& get) {
        for (std::size_t i = 0; i < ck.params.num_tensors(); ++i) {
            const Matrix& t = get(i);
            tensors.push_back({{"name", prefix + ModelParams::tensor_name(i)}, {"shape", {t.rows(), t.cols()}}});
            io::append_row_major(payload, t);
        }
    };
    add_group("", [&](std::size_t i) -> const Matrix& { return ck.params.tensor(i); });
    if (ck.opt) {
        const OptState& o = *ck.opt;
        header["optimizer"] = {{"step", o.step},          {"learning_rate", o.learning_rate},
                               {"grad_clip", o.grad_clip}, {"ema_decay", o.ema_decay},
                               {"beta1", o.beta1},         {"beta2", o.beta2},
                               {"eps", o.eps}};
        add_group("adam_m.", [&](std::size_t i) -> const Matrix& { return o.m[i]; });
        add_group("adam_v.", [&](std::size_t i) -> const Matrix& { return o.v[i]; });
        add_group("ema.", [&](std::size_t i) -> const Matrix& { return o.ema.tensor(i); });
    }
    header["tensors"] = tensors;
    return io::encode_framed(checkpoint_magic, header, payload);
}

/**
 * Decodes a checkpoint. When `expected` is given, every tensor shape must match
 * that architecture; a mismatch names the first offending layer.
 */
inline Checkpoint load_checkpoint(std::string_view bytes, const std::optional<Architecture>& expected = std::nullopt) {
    io::Framed f = io::decode_framed(bytes, checkpoint_magic, "checkpoint");
    Checkpoint ck;
    try {
        const int version = f.header.at("version").get<int>();
        if (version != checkpoint_version) {
            fail(ErrorCode::format, "checkpoint version " + std::to_string(version) + " is not supported");
        }
        ck.params.arch = architecture_from_json(f.header.at("architecture"));
        ck.seed = f.header.value("seed", std::uint64_t{0});
        ck.config_hash = f.header.value("config_hash", std::string{});
        ck.extra = f.header.value("extra", io::json::object());

        const io::json& tensors = f.header.at("tensors");
        const bool has_opt = f.header.contains("optimizer");
        const std::size_t n = static_cast<std::size_t>(ck.params.arch.n_layers + 1) * 2;
        if (tensors.size() != n * (has_opt ? 4 : 1)) {
            fail(ErrorCode::shape, "checkpoint declares " + std::to_string(tensors.size()) +
                                       " tensors, architecture needs " + std::to_string(n));
        }
        ModelParams shape_ref;
        shape_ref.arch = expected ? *expected : ck.params.arch;
        if (expected) {
            for (std::size_t i = 0; i < n; ++i) {
                const auto [er, ec] = shape_ref.expected_shape(i);
                const auto& shp = tensors[i].at("shape");
                if (shp[0].get<Eigen::Index>() != er || shp[1].get<Eigen::Index>() != ec) {
                    fail(ErrorCode::shape, "checkpoint " + ModelParams::tensor_name(i) + " has shape " +
                                               std::to_string(shp[0].get<long>()) + "x" +
                                               std::to_string(shp[1].get<long>()) + ", configuration expects " +
                                               std::to_string(er) + "x" + std::to_string(ec));
                }
            }
        }

        std::size_t offset = 0;
        std::size_t k = 0;
        auto read_group = [&](auto&& put) {
            for (std::size_t i = 0; i < n; ++i, ++k) {
                const auto& shp = tensors[k].at("shape");
                put(i, io::take_row_major(f.payload, offset, shp[0].get<Eigen::Index>(), shp[1].get<Eigen::Index>(),
                                          "checkpoint " + tensors[k].at("name").get<std::string>()));
            }
        };
        ck.params.layers.resize(static_cast<std::size_t>(ck.params.arch.n_layers + 1));
        read_group([&](std::size_t i, Matrix m) { ck.params.tensor(i) = std::move(m); });
        if (has_opt) {
            const io::json& o = f.header.at("optimizer");
            OptState s;
            s.step = o.at("step").get<long>();
            s.learning_rate = o.at("learning_rate").get<double>();
            s.grad_clip = o.at("grad_clip").get<double>();
            s.ema_decay = o.at("ema_decay").get<double>();
            s.beta1 = o.at("beta1").get<double>();
            s.beta2 = o.at("beta2").get<double>();
            s.eps = o.at("eps").get<double>();
            s.m.resize(n);
            s.v.resize(n);
            s.ema = ck.params;
            read_group([&](std::size_t i, Matrix m) { s.m[i] = std::move(m); });
            read_group([&](std::size_t i, Matrix m) { s.v[i] = std::move(m); });
            read_group([&](std::size_t i, Matrix m) { s.ema.tensor(i) = std::move(m); });
            ck.opt = std::move(s);
        }
        if (offset != f.payload.size()) fail(ErrorCode::format, "checkpoint payload has trailing data");
    } catch (const io::json::exception& e) {
        fail(ErrorCode::format, std::string("checkpoint header: ") + e.what());
    }
    ck.params.validate();
    return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    io::write_file(path, save_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path,
                                  const std::optional<Architecture>& expected = std::nullopt) {
    return load_checkpoint(io::read_file(path), expected);
}

} // namespace eggfm::nn
