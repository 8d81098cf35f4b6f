#pragma once

#include "ttadapt/adapter.hpp"
#include "ttadapt/dmrg.hpp"
#include "ttadapt/error.hpp"
#include "ttadapt/model.hpp"
#include "ttadapt/optim.hpp"
#include "ttadapt/task.hpp"
#include "ttadapt/train.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace ttadapt {

inline const std::vector<std::uint64_t> kDefaultSeeds{33305628, 2025, 42};

/// Everything one run needs. The adapter's d_in, d_out and num_layers follow
/// the model; its num_tasks follows the task section; its seed is the run seed.
struct RunConfig {
    ModelConfig model;
    AdapterSpec adapter;
    TeacherTaskSpec task;
    std::size_t num_tasks = 1;
    OptimizerConfig optimizer;
    TrainOptions train;
    std::size_t epochs = 10;
    std::optional<RankSchedule> schedule;
    std::vector<std::uint64_t> seeds = kDefaultSeeds;
    std::string output_dir = "runs";

    bool operator==(const RunConfig&) const = default;
};

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ConfigError("config: '" + where + "' must be an object");
    for (const auto& [key, value] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError("config: unknown key '" + where + "." + key + "'");
    }
}

inline std::uint64_t as_uint(const json& v, const std::string& where) {
    if (!v.is_number_unsigned()) throw ConfigError("config: '" + where + "' must be a non-negative integer");
    return v.get<std::uint64_t>();
}

inline double as_double(const json& v, const std::string& where) {
    if (!v.is_number()) throw ConfigError("config: '" + where + "' must be a number");
    return v.get<double>();
}

inline std::string as_string(const json& v, const std::string& where) {
    if (!v.is_string()) throw ConfigError("config: '" + where + "' must be a string");
    return v.get<std::string>();
}

template <typename T>
void read_uint(const json& obj, const char* key, T& out, const std::string& where) {
    if (obj.contains(key)) out = static_cast<T>(as_uint(obj.at(key), where + "." + key));
}

inline void read_double(const json& obj, const char* key, double& out, const std::string& where) {
    if (obj.contains(key)) out = as_double(obj.at(key), where + "." + key);
}

inline std::vector<std::size_t> as_rank_list(const json& v, const std::string& where) {
    if (v.is_number_unsigned()) return {static_cast<std::size_t>(v.get<std::uint64_t>())};
    if (!v.is_array() || v.empty()) throw ConfigError("config: '" + where + "' must be an integer or non-empty array");
    std::vector<std::size_t> out;
    for (const auto& e : v) out.push_back(static_cast<std::size_t>(as_uint(e, where)));
    return out;
}

inline std::vector<ProjModule> as_module_list(const json& v, const std::string& where) {
    if (v.is_string()) return parse_module_list(v.get<std::string>());
    if (!v.is_array()) throw ConfigError("config: '" + where + "' must be a string or array");
    std::vector<ProjModule> out;
    for (const auto& e : v) out.push_back(parse_module(as_string(e, where)));
    return out;
}

} // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& doc) {
    using detail::json;
    detail::reject_unknown(doc, "config",
                           {"model", "adapter", "task", "optimizer", "epochs", "batch_size", "early_stop_ratio",
                            "schedule", "seeds", "output_dir"});
    RunConfig cfg;
    const json empty = json::object();

    const json& m = doc.contains("model") ? doc.at("model") : empty;
    detail::reject_unknown(m, "model",
                           {"num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len",
                            "num_outputs", "seed"});
    detail::read_uint(m, "num_layers", cfg.model.num_layers, "model");
    detail::read_uint(m, "hidden_dim", cfg.model.hidden_dim, "model");
    detail::read_uint(m, "num_heads", cfg.model.num_heads, "model");
    detail::read_uint(m, "ffn_dim", cfg.model.ffn_dim, "model");
    detail::read_uint(m, "vocab_size", cfg.model.vocab_size, "model");
    detail::read_uint(m, "max_seq_len", cfg.model.max_seq_len, "model");
    detail::read_uint(m, "num_outputs", cfg.model.num_outputs, "model");
    detail::read_uint(m, "seed", cfg.model.seed, "model");
    validate_config(cfg.model);

    const json& t = doc.contains("task") ? doc.at("task") : empty;
    detail::reject_unknown(t, "task", {"kind", "delta_rank", "delta_scale", "n_train", "n_eval", "seq_len", "num_tasks", "seed"});
    if (t.contains("kind")) cfg.task.kind = parse_task_kind(detail::as_string(t.at("kind"), "task.kind"));
    detail::read_uint(t, "delta_rank", cfg.task.delta_rank, "task");
    detail::read_double(t, "delta_scale", cfg.task.delta_scale, "task");
    detail::read_uint(t, "n_train", cfg.task.n_train, "task");
    detail::read_uint(t, "n_eval", cfg.task.n_eval, "task");
    detail::read_uint(t, "seq_len", cfg.task.seq_len, "task");
    detail::read_uint(t, "num_tasks", cfg.num_tasks, "task");
    detail::read_uint(t, "seed", cfg.task.seed, "task");
    if (cfg.num_tasks == 0) throw ConfigError("config: task.num_tasks must be >= 1");
    if (cfg.task.n_train == 0) throw ConfigError("config: task.n_train must be >= 1");
    if (cfg.task.seq_len > cfg.model.max_seq_len) throw ConfigError("config: task.seq_len exceeds model.max_seq_len");

    const json& a = doc.contains("adapter") ? doc.at("adapter") : empty;
    detail::reject_unknown(a, "adapter", {"variant", "target_modules", "num_heads", "bond_ranks", "alpha", "init_strategy"});
    AdapterSpec& s = cfg.adapter;
    if (a.contains("variant")) s.variant = parse_variant(detail::as_string(a.at("variant"), "adapter.variant"));
    if (a.contains("target_modules")) s.target_modules = detail::as_module_list(a.at("target_modules"), "adapter.target_modules");
    s.num_heads = cfg.model.num_heads;
    detail::read_uint(a, "num_heads", s.num_heads, "adapter");
    if (a.contains("bond_ranks")) s.bond_ranks = detail::as_rank_list(a.at("bond_ranks"), "adapter.bond_ranks");
    detail::read_double(a, "alpha", s.alpha, "adapter");
    if (a.contains("init_strategy")) {
        s.init_strategy = parse_init_strategy(detail::as_string(a.at("init_strategy"), "adapter.init_strategy"));
    }
    s.d_in = s.d_out = cfg.model.hidden_dim;
    s.num_layers = cfg.model.num_layers;
    s.num_tasks = cfg.num_tasks;
    validate_spec(s);

    const json& o = doc.contains("optimizer") ? doc.at("optimizer") : empty;
    detail::reject_unknown(o, "optimizer", {"learning_rate", "beta1", "beta2", "epsilon", "weight_decay", "warmup_ratio", "clip_max_norm"});
    detail::read_double(o, "learning_rate", cfg.optimizer.learning_rate, "optimizer");
    detail::read_double(o, "beta1", cfg.optimizer.beta1, "optimizer");
    detail::read_double(o, "beta2", cfg.optimizer.beta2, "optimizer");
    detail::read_double(o, "epsilon", cfg.optimizer.epsilon, "optimizer");
    detail::read_double(o, "weight_decay", cfg.optimizer.weight_decay, "optimizer");
    detail::read_double(o, "warmup_ratio", cfg.optimizer.warmup_ratio, "optimizer");
    if (o.contains("clip_max_norm") && !o.at("clip_max_norm").is_null()) {
        cfg.optimizer.clip_max_norm = detail::as_double(o.at("clip_max_norm"), "optimizer.clip_max_norm");
    }
    validate_config(cfg.optimizer);

    detail::read_uint(doc, "epochs", cfg.epochs, "config");
    detail::read_uint(doc, "batch_size", cfg.train.batch_size, "config");
    if (cfg.train.batch_size == 0) throw ConfigError("config: batch_size must be >= 1");
    if (doc.contains("early_stop_ratio") && !doc.at("early_stop_ratio").is_null()) {
        cfg.train.early_stop_ratio = detail::as_double(doc.at("early_stop_ratio"), "early_stop_ratio");
        if (!(*cfg.train.early_stop_ratio > 0.0)) throw ConfigError("config: early_stop_ratio must be > 0");
    }

    if (doc.contains("schedule") && !doc.at("schedule").is_null()) {
        const json& sch = doc.at("schedule");
        if (!sch.is_array()) throw ConfigError("config: 'schedule' must be an array of {epoch, ranks}");
        std::vector<ScheduleEntry> entries;
        for (const auto& e : sch) {
            detail::reject_unknown(e, "schedule[]", {"epoch", "ranks"});
            if (!e.contains("epoch") || !e.contains("ranks")) throw ConfigError("config: schedule entries need epoch and ranks");
            entries.push_back({static_cast<std::size_t>(detail::as_uint(e.at("epoch"), "schedule.epoch")),
                               detail::as_rank_list(e.at("ranks"), "schedule.ranks")});
        }
        cfg.schedule = RankSchedule(std::move(entries));
    }

    if (doc.contains("seeds")) {
        const json& sd = doc.at("seeds");
        if (!sd.is_array() || sd.empty()) throw ConfigError("config: 'seeds' must be a non-empty array");
        cfg.seeds.clear();
        for (const auto& e : sd) cfg.seeds.push_back(detail::as_uint(e, "seeds"));
    }
    if (doc.contains("output_dir")) cfg.output_dir = detail::as_string(doc.at("output_dir"), "output_dir");
    return cfg;
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
    using detail::json;
    json doc;
    doc["model"] = {{"num_layers", cfg.model.num_layers}, {"hidden_dim", cfg.model.hidden_dim},
                    {"num_heads", cfg.model.num_heads},   {"ffn_dim", cfg.model.ffn_dim},
                    {"vocab_size", cfg.model.vocab_size}, {"max_seq_len", cfg.model.max_seq_len},
                    {"num_outputs", cfg.model.num_outputs}, {"seed", cfg.model.seed}};
    doc["task"] = {{"kind", to_string(cfg.task.kind)}, {"delta_rank", cfg.task.delta_rank},
                   {"delta_scale", cfg.task.delta_scale}, {"n_train", cfg.task.n_train},
                   {"n_eval", cfg.task.n_eval},         {"seq_len", cfg.task.seq_len},
                   {"num_tasks", cfg.num_tasks},        {"seed", cfg.task.seed}};
    json adapter = {{"variant", to_string(cfg.adapter.variant)},
                    {"target_modules", format_module_list(cfg.adapter.target_modules)},
                    {"num_heads", cfg.adapter.num_heads},
                    {"bond_ranks", cfg.adapter.bond_ranks},
                    {"alpha", cfg.adapter.alpha}};
    if (!cfg.adapter.init_strategy.empty()) adapter["init_strategy"] = format_init_strategy(cfg.adapter.init_strategy);
    doc["adapter"] = adapter;
    json opt = {{"learning_rate", cfg.optimizer.learning_rate}, {"beta1", cfg.optimizer.beta1},
                {"beta2", cfg.optimizer.beta2},                 {"epsilon", cfg.optimizer.epsilon},
                {"weight_decay", cfg.optimizer.weight_decay},   {"warmup_ratio", cfg.optimizer.warmup_ratio}};
    opt["clip_max_norm"] = cfg.optimizer.clip_max_norm ? json(*cfg.optimizer.clip_max_norm) : json(nullptr);
    doc["optimizer"] = opt;
    doc["epochs"] = cfg.epochs;
    doc["batch_size"] = cfg.train.batch_size;
    doc["early_stop_ratio"] = cfg.train.early_stop_ratio ? json(*cfg.train.early_stop_ratio) : json(nullptr);
    if (cfg.schedule) {
        json sch = json::array();
        for (const auto& e : cfg.schedule->entries()) sch.push_back({{"epoch", e.epoch}, {"ranks", e.ranks}});
        doc["schedule"] = sch;
    } else {
        doc["schedule"] = nullptr;
    }
    doc["seeds"] = cfg.seeds;
    doc["output_dir"] = cfg.output_dir;
    return doc;
}

inline RunConfig parse_run_config(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    return run_config_from_json(doc);
}

inline std::string serialize_run_config(const RunConfig& cfg) { return run_config_to_json(cfg).dump(2) + "\n"; }

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("config: cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_run_config(ss.str());
}

} // namespace ttadapt
