#pragma once

#include "ttadapt/adapter.hpp"
#include "ttadapt/checkpoint.hpp"
#include "ttadapt/config.hpp"
#include "ttadapt/dmrg.hpp"
#include "ttadapt/error.hpp"
#include "ttadapt/metrics.hpp"
#include "ttadapt/model.hpp"
#include "ttadapt/rng.hpp"
#include "ttadapt/task.hpp"
#include "ttadapt/train.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace ttadapt {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitNumerical = 2, kExitIo = 3 };

inline NamedTensors adapter_tensors(const MetaTTAdapter& ad) {
    NamedTensors out;
    const auto names = ad.parameter_names();
    const auto params = ad.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) out.emplace_back(names[i], *params[i]);
    return out;
}

/// Replaces the adapter's trainable tensors by name. TT cores may carry
/// different (for example truncated) bond ranks; the chain must stay valid.
inline void load_adapter_tensors(MetaTTAdapter& ad, const NamedTensors& tensors) {
    const auto names = ad.parameter_names();
    if (tensors.size() != names.size()) {
        throw ShapeError("adapter checkpoint holds " + std::to_string(tensors.size()) + " tensors, adapter expects " +
                         std::to_string(names.size()));
    }
    auto find = [&](const std::string& name) -> const DenseTensor& {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw ShapeError("adapter checkpoint lacks tensor '" + name + "'");
    };
    if (ad.is_tt()) {
        TensorTrain& tt = ad.train();
        TensorTrain updated = tt;
        for (std::size_t k = 0; k < names.size(); ++k) {
            const DenseTensor& t = find(names[k]);
            if (t.rank() != 3 || t.extent(1) != tt.core(k).mode_size()) {
                throw ShapeError("adapter checkpoint: '" + names[k] + "' has shape " + shape_to_string(t.shape()));
            }
            updated.core(k) = TTCore(t);
        }
        require_valid(updated, "load_adapter_tensors");
        tt = std::move(updated);
        return;
    }
    const auto params = ad.parameters();
    for (std::size_t i = 0; i < names.size(); ++i) {
        const DenseTensor& t = find(names[i]);
        if (t.shape() != params[i]->shape()) {
            throw ShapeError("adapter checkpoint: '" + names[i] + "' has shape " + shape_to_string(t.shape()) +
                             ", expected " + shape_to_string(params[i]->shape()));
        }
        *params[i] = t;
    }
}

inline NamedTensors merged_tensors(const MergedAdapter& merged) {
    NamedTensors out;
    out.emplace_back("A", merged.a);
    out.emplace_back("alpha", DenseTensor({1}, std::vector<double>{merged.alpha}));
    for (const auto& [key, b] : merged.b) {
        out.emplace_back("B." + std::to_string(key.layer) + "." + std::to_string(key.module) + "." +
                             std::to_string(key.task),
                         b);
    }
    return out;
}

enum class RunMode { Single, Scheduled, MultiTask };

struct SeedOutcome {
    std::uint64_t seed = 0;
    TrainReport report;
    MetaTTAdapter adapter;
    std::filesystem::path dir;
    std::string error;
    int code = kExitOk;
};

namespace detail {

inline std::filesystem::path resolve_output_dir(const RunConfig& cfg, const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("TTADAPT_OUT_DIR"); env && *env) return env;
    return cfg.output_dir;
}

inline void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f << text;
    if (!f) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string join_ranks(const std::vector<std::size_t>& r) {
    std::string s;
    for (std::size_t i = 0; i < r.size(); ++i) s += (i ? ";" : "") + std::to_string(r[i]);
    return s;
}

template <typename F>
int guarded(std::ostream& err, F&& f) {
    try {
        return f();
    } catch (const NumericalError& e) {
        err << "error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const nlohmann::json::exception& e) {
        err << "error: config: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitNumerical;
    }
}

inline SeedOutcome run_one_seed(const RunConfig& cfg, RunMode mode, std::uint64_t seed,
                                const std::filesystem::path& root) {
    SeedOutcome res;
    res.seed = seed;
    res.dir = root / ("seed_" + std::to_string(seed));
    std::ostringstream sink;
    res.code = guarded(sink, [&] {
        const FrozenTransformer model = build_frozen_model(cfg.model);
        AdapterSpec spec = cfg.adapter;
        spec.seed = seed;
        std::optional<RankSchedule> schedule = cfg.schedule;
        if (mode == RunMode::Scheduled && !schedule) {
            if (spec.bond_ranks.size() != 1) throw ConfigError("dmrg-train: give a schedule or a single uniform starting rank");
            const std::size_t bonds = mode_roles(spec.variant).size() - 1;
            schedule = default_rank_schedule(bonds, cfg.epochs);
        }
        if (mode == RunMode::Single) schedule.reset();
        res.adapter = build(spec);
        if (mode == RunMode::MultiTask) {
            const auto tasks = make_teacher_tasks(model, cfg.num_tasks, cfg.task);
            res.report = joint_train_run(model, res.adapter, tasks, cfg.optimizer, cfg.epochs, seed, cfg.train,
                                         schedule ? &*schedule : nullptr);
        } else {
            const SyntheticTask task = make_teacher_task(model, cfg.task);
            res.report = train_run(model, res.adapter, task, cfg.optimizer, cfg.epochs, schedule ? &*schedule : nullptr,
                                   seed, cfg.train);
        }
        ensure_dir(res.dir);
        RunConfig resolved = cfg;
        resolved.seeds = {seed};
        resolved.schedule = schedule;
        write_text(res.dir / "config.json", serialize_run_config(resolved));
        write_metrics(res.report, res.dir / "metrics.csv");
        save_checkpoint(adapter_tensors(res.adapter), res.dir / "adapter.mttc");
        if (res.report.diverged) throw NumericalError("seed " + std::to_string(seed) + ": " + res.report.divergence);
        if (res.report.frozen_fingerprint_after != res.report.frozen_fingerprint_before)
            throw NumericalError("frozen weights changed during training");
        return int{kExitOk};
    });
    res.error = sink.str();
    if (!res.error.empty() && res.error.back() == '\n') res.error.pop_back();
    return res;
}

inline int run_training(const std::string& config_path, const std::string& out_flag, const std::string& seeds_flag,
                        std::optional<std::size_t> epochs_flag, std::size_t jobs, RunMode mode, std::ostream& out,
                        std::ostream& err) {
    RunConfig cfg = load_run_config(config_path);
    if (!seeds_flag.empty()) {
        cfg.seeds.clear();
        for (auto part : split_view(seeds_flag, ',')) cfg.seeds.push_back(parse_number<std::uint64_t>(part, "seed"));
    }
    if (epochs_flag) cfg.epochs = *epochs_flag;
    if (mode == RunMode::MultiTask && cfg.adapter.variant == Variant::TT4plus1D && cfg.num_tasks < 1)
        throw ConfigError("mtl-train: task.num_tasks must be >= 1");
    const std::filesystem::path root = resolve_output_dir(cfg, out_flag);
    ensure_dir(root);

    std::vector<SeedOutcome> results(cfg.seeds.size());
    const std::size_t workers = std::max<std::size_t>(1, jobs);
    for (std::size_t start = 0; start < cfg.seeds.size(); start += workers) {
        std::vector<std::thread> pool;
        for (std::size_t i = start; i < std::min(cfg.seeds.size(), start + workers); ++i)
            pool.emplace_back([&, i] { results[i] = run_one_seed(cfg, mode, cfg.seeds[i], root); });
        for (auto& t : pool) t.join();
    }

    int code = kExitOk;
    for (const auto& r : results) {
        if (r.code != kExitOk) {
            err << r.error << '\n';
            code = std::max(code, r.code);
            continue;
        }
        for (std::size_t t = 0; t < std::max<std::size_t>(1, mode == RunMode::MultiTask ? cfg.num_tasks : 1); ++t) {
            const auto rows = r.report.task_rows(t);
            if (rows.empty()) {
                out << "seed " << r.seed << " task " << t << ": no epochs\n";
                continue;
            }
            const EpochRow& last = *rows.back();
            out << "seed " << r.seed << " task " << t << ": epochs " << last.epoch << " eval_loss "
                << format_double(last.eval_loss) << " metric " << format_double(last.eval_metric) << " ranks "
                << join_ranks(last.ranks) << " params " << last.param_count << '\n';
        }
        out << "seed " << r.seed << ": wrote " << r.dir.string() << '\n';
    }
    return code;
}

struct GradcheckCase {
    std::string name;
    AdapterSpec spec;
};

inline std::vector<GradcheckCase> gradcheck_cases(const ModelConfig& mc, std::uint64_t seed) {
    std::vector<GradcheckCase> cases;
    for (Variant v : {Variant::TT4D, Variant::TT5D, Variant::TT4plus1D, Variant::LoRA}) {
        AdapterSpec s;
        s.variant = v;
        s.d_in = s.d_out = mc.hidden_dim;
        s.num_layers = mc.num_layers;
        s.target_modules = {ProjModule::Q, ProjModule::K, ProjModule::V, ProjModule::O};
        s.num_heads = mc.num_heads;
        s.num_tasks = 2;
        s.bond_ranks = {3};
        s.alpha = 1.5;
        s.seed = derive_seed(seed, static_cast<std::uint64_t>(v) + 1);
        cases.push_back({to_string(v), s});
    }
    return cases;
}

/// Replaces every trainable entry with N(0, sd²) so no gradient path is zeroed out.
inline void randomize_parameters(MetaTTAdapter& ad, std::uint64_t seed, double sd) {
    Rng rng(seed);
    for (DenseTensor* p : ad.parameters()) fill_normal(*p, rng, 0.0, sd);
}

inline ModelConfig gradcheck_model_config(std::uint64_t seed) {
    ModelConfig mc;
    mc.num_layers = 2;
    mc.hidden_dim = 16;
    mc.num_heads = 2;
    mc.ffn_dim = 32;
    mc.vocab_size = 16;
    mc.max_seq_len = 4;
    mc.num_outputs = 3;
    mc.seed = seed;
    return mc;
}

inline int run_gradcheck(std::uint64_t seed, const std::string& only, std::ostream& out) {
    const ModelConfig mc = gradcheck_model_config(seed);
    const FrozenTransformer model = build_frozen_model(mc);
    Rng rng(derive_seed(seed, 5));
    TokenBatch batch{2, 3, {}};
    std::uniform_int_distribution<std::uint32_t> tok(0, static_cast<std::uint32_t>(mc.vocab_size - 1));
    for (std::size_t i = 0; i < batch.batch_size * batch.seq_len; ++i) batch.tokens.push_back(tok(rng));
    const DenseTensor targets = random_normal({batch.batch_size, mc.num_outputs}, rng);

    double worst = 0.0;
    bool ran = false;
    for (auto& c : gradcheck_cases(mc, seed)) {
        if (!only.empty() && only != "all" && parse_variant(only) != c.spec.variant) continue;
        MetaTTAdapter ad = build(c.spec);
        randomize_parameters(ad, derive_seed(c.spec.seed, 9), 0.3);
        const std::size_t task = c.spec.variant == Variant::TT4plus1D ? 1 : 0;
        const GradCheckResult r = gradient_check(model, ad, batch, targets, task, 1e-6);
        out << "gradcheck " << c.name << ": max_rel_err " << format_double(r.max_relative_error) << " entries "
            << r.entries_checked << " worst " << r.worst_parameter << '\n';
        worst = std::max(worst, r.max_relative_error);
        ran = true;
    }
    if (!ran) throw ConfigError("gradcheck: no variant matched '" + only + "'");
    out << "max_rel_err " << format_double(worst) << '\n';
    return worst <= 1e-4 ? kExitOk : kExitNumerical;
}

inline int run_param_count(const std::string& variant, std::size_t d, std::size_t d_out, std::size_t layers,
                           const std::string& modules, const std::string& ranks, std::size_t heads, std::size_t tasks,
                           std::ostream& out) {
    AdapterSpec s;
    s.variant = parse_variant(variant);
    s.d_in = d;
    s.d_out = d_out ? d_out : d;
    s.num_layers = layers;
    s.target_modules = parse_module_list(modules);
    s.num_heads = heads;
    s.num_tasks = tasks;
    s.bond_ranks.clear();
    for (auto part : split_view(ranks, ',')) s.bond_ranks.push_back(parse_number<std::size_t>(part, "rank"));
    const MetaTTAdapter ad = build(s);
    out << "params " << ad.parameter_count() << '\n';
    out << "lora_baseline " << baseline_lora_param_count(s.num_layers, s.num_modules(), s.d_in, s.bond_ranks[0]) << '\n';
    return kExitOk;
}

inline int run_export_merged(const std::string& config_path, const std::string& checkpoint, const std::string& out_path,
                             std::ostream& out) {
    const RunConfig cfg = load_run_config(config_path);
    MetaTTAdapter ad = build(cfg.adapter);
    load_adapter_tensors(ad, load_checkpoint(checkpoint));
    const MergedAdapter merged = merge_for_inference(ad);
    save_checkpoint(merged_tensors(merged), out_path);

    const FrozenTransformer model = build_frozen_model(cfg.model);
    Rng rng(derive_seed(cfg.model.seed, 17));
    const DenseTensor probe = random_normal({8, cfg.adapter.d_in}, rng);
    double worst = 0.0;
    for (const auto& [key, b] : merged.b) {
        const DenseTensor& w = model.weight(key.layer, cfg.adapter.target_modules[key.module]);
        const DenseTensor ref = adapted_forward(ad, probe, w, key);
        worst = std::max(worst, frobenius_distance(merged.forward(probe, w, key), ref) /
                                    std::max(frobenius_norm(ref), 1e-300));
    }
    out << "merged sites " << merged.b.size() << " max_rel_diff " << format_double(worst) << '\n';
    out << "wrote " << out_path << '\n';
    return worst <= 1e-10 ? kExitOk : kExitNumerical;
}

inline int run_tt_roundtrip(std::uint64_t seed, std::size_t trials, std::ostream& out) {
    Rng rng(seed);
    double sweep_err = 0.0, tail_err = 0.0, slice_err = 0.0;
    bool bits_ok = true;
    std::uniform_int_distribution<std::size_t> mode(2, 5), rank(1, 4);
    for (std::size_t trial = 0; trial < trials; ++trial) {
        const std::vector<std::size_t> modes{mode(rng), mode(rng), mode(rng), mode(rng)};
        const std::vector<std::size_t> ranks{rank(rng), rank(rng), rank(rng)};
        const TensorTrain tt = TensorTrain::random(modes, ranks, rng, 1.0);
        const DenseTensor dense = reconstruct_dense(tt);

        TensorTrain swept = tt;
        dmrg_sweep(swept, {kMaxBondRank});
        sweep_err = std::max(sweep_err, frobenius_distance(reconstruct_dense(swept), dense) / frobenius_norm(dense));

        const std::vector<std::size_t> idx{modes[1] - 1, modes[2] / 2};
        const DenseTensor sl = select_slice(tt, idx);
        for (std::size_t i = 0; i < modes[0]; ++i)
            for (std::size_t j = 0; j < modes[3]; ++j) {
                const std::size_t flat = ((i * modes[1] + idx[0]) * modes[2] + idx[1]) * modes[3] + j;
                slice_err = std::max(slice_err, std::abs(sl(i, j) - dense[flat]));
            }

        const std::vector<std::size_t> pair_modes{modes[0], modes[1]}, pair_rank{4};
        const TensorTrain pair = TensorTrain::random(pair_modes, pair_rank, rng, 1.0);
        const DenseTensor pd = reconstruct_dense(pair);
        const SvdResult full = svd(pd.reshaped({modes[0], modes[1]}));
        const std::size_t r = 1 + trial % 2;
        double tail = 0.0;
        for (std::size_t k = r; k < full.s.size(); ++k) tail += full.s[k] * full.s[k];
        TensorTrain cut = pair;
        dmrg_sweep(cut, {r});
        tail_err = std::max(tail_err, std::abs(frobenius_distance(reconstruct_dense(cut), pd) - std::sqrt(tail)));

        NamedTensors named;
        for (std::size_t k = 0; k < tt.order(); ++k) named.emplace_back("G" + std::to_string(k + 1), tt.core(k).values());
        const NamedTensors back = decode_checkpoint(encode_checkpoint(named));
        bits_ok = bits_ok && back == named;
    }
    const bool ok = sweep_err <= 1e-10 && tail_err <= 1e-10 && slice_err < 1e-12 && bits_ok;
    out << "sweep_rel_err " << format_double(sweep_err) << '\n';
    out << "tail_formula_err " << format_double(tail_err) << '\n';
    out << "select_slice_err " << format_double(slice_err) << '\n';
    out << "checkpoint_bit_exact " << (bits_ok ? "yes" : "no") << '\n';
    out << (ok ? "tt-roundtrip ok" : "tt-roundtrip FAILED") << '\n';
    return ok ? kExitOk : kExitNumerical;
}

} // namespace detail

/// Entry point shared by the executable and the tests. `args` excludes argv[0].
inline int run_command(const std::vector<std::string>& args, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
    CLI::App app{"Tensor-train adapters on a frozen toy encoder", "ttadapt"};
    app.require_subcommand(1);

    std::string config, out_dir, seeds, variant = "tt4d", modules = "q,v", ranks = "8", only = "all", checkpoint, dest;
    std::size_t jobs = 1, d = 768, d_out = 0, layers = 12, heads = 1, tasks = 1, trials = 20;
    std::optional<std::size_t> epochs;
    std::uint64_t seed = 0;
    std::optional<RunMode> mode;

    auto add_train = [&](const char* name, const char* help, RunMode m) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config, "run config (JSON)")->required();
        sub->add_option("--out", out_dir, "output directory (beats TTADAPT_OUT_DIR and the config)");
        sub->add_option("--seeds", seeds, "comma-separated seeds replacing the config list");
        sub->add_option("--epochs", epochs, "override the epoch count");
        sub->add_option("--jobs", jobs, "seeds trained concurrently")->check(CLI::PositiveNumber);
        sub->callback([&, m] { mode = m; });
    };
    add_train("train", "single-task fine-tuning", RunMode::Single);
    add_train("dmrg-train", "fine-tuning with interleaved rank-reducing sweeps", RunMode::Scheduled);
    add_train("mtl-train", "joint multi-task fine-tuning", RunMode::MultiTask);

    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference check of every adapter gradient");
    gc->add_option("--seed", seed, "model and adapter seed");
    gc->add_option("--variant", only, "tt4d, tt5d, tt4plus1d, lora or all");

    CLI::App* pc = app.add_subcommand("param-count", "trainable parameter count of an adapter");
    pc->add_option("--variant", variant, "tt4d, tt5d, tt4plus1d or lora");
    pc->add_option("--d", d, "input width");
    pc->add_option("--d-out", d_out, "output width (default: --d)");
    pc->add_option("--layers", layers, "number of layers");
    pc->add_option("--modules", modules, "target modules, e.g. q,v");
    pc->add_option("--rank", ranks, "bond rank, or comma-separated interior ranks");
    pc->add_option("--heads", heads, "heads (tt5d)");
    pc->add_option("--tasks", tasks, "tasks (tt4plus1d)");

    CLI::App* em = app.add_subcommand("export-merged", "write the merged inference form of a trained adapter");
    em->add_option("--config", config, "run config the adapter was trained with")->required();
    em->add_option("--checkpoint", checkpoint, "adapter checkpoint")->required();
    em->add_option("--out", dest, "merged checkpoint path")->required();

    CLI::App* rt = app.add_subcommand("tt-roundtrip", "construction, sweep and reconstruction self-test");
    rt->add_option("--seed", seed, "random seed");
    rt->add_option("--trials", trials, "random trains to test")->check(CLI::PositiveNumber);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::Success&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n' << app.help();
        return kExitConfig;
    }

    return detail::guarded(err, [&] {
        if (mode) return detail::run_training(config, out_dir, seeds, epochs, jobs, *mode, out, err);
        if (gc->parsed()) return detail::run_gradcheck(seed, only, out);
        if (pc->parsed()) return detail::run_param_count(variant, d, d_out, layers, modules, ranks, heads, tasks, out);
        if (em->parsed()) return detail::run_export_merged(config, checkpoint, dest, out);
        if (rt->parsed()) return detail::run_tt_roundtrip(seed, trials, out);
        err << "error: no subcommand\n" << app.help();
        return int{kExitConfig};
    });
}

inline int run_command(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return run_command(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

} // namespace ttadapt
