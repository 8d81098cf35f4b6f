#pragma once

#include "ttadapt/error.hpp"
#include "ttadapt/rng.hpp"
#include "ttadapt/tensor.hpp"
#include "ttadapt/tensor_train.hpp"

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ttadapt {

enum class Variant { TT4D, TT5D, TT4plus1D, LoRA };

/// Attention projection matrices eligible for adaptation.
enum class ProjModule { Q, K, V, O };

enum class InitTag { Zero, Identity, Normal };

/// Role of each TT mode, in core order.
enum class ModeRole { Input, Layer, Task, Module, Head, Output };

inline constexpr std::size_t kMaxBondRank = 4096;
inline constexpr double kNormalInitStddev = 0.2;
inline constexpr double kLoraInitStddev = 0.02;

inline std::string to_string(Variant v) {
    switch (v) {
    case Variant::TT4D: return "tt4d";
    case Variant::TT5D: return "tt5d";
    case Variant::TT4plus1D: return "tt4plus1d";
    case Variant::LoRA: return "lora";
    }
    return "?";
}

inline std::string lowercase(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

inline Variant parse_variant(std::string_view s) {
    const std::string v = lowercase(s);
    if (v == "tt4d" || v == "4d") return Variant::TT4D;
    if (v == "tt5d" || v == "5d") return Variant::TT5D;
    if (v == "tt4plus1d" || v == "tt4+1d" || v == "4+1d") return Variant::TT4plus1D;
    if (v == "lora") return Variant::LoRA;
    throw ConfigError("unknown adapter variant '" + std::string(s) + "'");
}

inline char to_char(ProjModule m) {
    switch (m) {
    case ProjModule::Q: return 'q';
    case ProjModule::K: return 'k';
    case ProjModule::V: return 'v';
    case ProjModule::O: return 'o';
    }
    return '?';
}

inline ProjModule parse_module(std::string_view s) {
    const std::string v = lowercase(s);
    if (v == "q" || v == "query") return ProjModule::Q;
    if (v == "k" || v == "key") return ProjModule::K;
    if (v == "v" || v == "value") return ProjModule::V;
    if (v == "o" || v == "dense" || v == "output") return ProjModule::O;
    throw ConfigError("unknown projection module '" + std::string(s) + "'");
}

/// "q,v" → {Q, V}
inline std::vector<ProjModule> parse_module_list(std::string_view s) {
    std::vector<ProjModule> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t end = std::min(s.find(',', start), s.size());
        out.push_back(parse_module(s.substr(start, end - start)));
        start = end + 1;
    }
    return out;
}

inline std::string format_module_list(const std::vector<ProjModule>& mods) {
    std::string out;
    for (std::size_t i = 0; i < mods.size(); ++i) {
        if (i) out += ',';
        out += to_char(mods[i]);
    }
    return out;
}

/// Hyphen-joined tags, e.g. "ze-id-id-id".
inline std::vector<InitTag> parse_init_strategy(std::string_view s) {
    std::vector<InitTag> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t end = std::min(s.find('-', start), s.size());
        const std::string tag = lowercase(s.substr(start, end - start));
        if (tag == "ze") out.push_back(InitTag::Zero);
        else if (tag == "id") out.push_back(InitTag::Identity);
        else if (tag == "no") out.push_back(InitTag::Normal);
        else throw ConfigError("unknown init tag '" + tag + "' in '" + std::string(s) + "'");
        start = end + 1;
    }
    return out;
}

inline std::string format_init_strategy(const std::vector<InitTag>& tags) {
    std::string out;
    for (std::size_t i = 0; i < tags.size(); ++i) {
        if (i) out += '-';
        out += tags[i] == InitTag::Zero ? "ze" : tags[i] == InitTag::Identity ? "id" : "no";
    }
    return out;
}

struct AdapterSpec {
    Variant variant = Variant::TT4D;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::size_t num_layers = 1;
    std::vector<ProjModule> target_modules{ProjModule::Q, ProjModule::V};
    std::size_t num_heads = 1; // TT5D only
    std::size_t num_tasks = 1; // TT4plus1D only
    /// Interior bond ranks (d-1 entries), or a single entry meaning uniform r.
    /// LoRA reads the first entry as its rank.
    std::vector<std::size_t> bond_ranks{8};
    double alpha = 1.0;
    /// One tag per core; empty selects ze-id-…-id.
    std::vector<InitTag> init_strategy;
    std::uint64_t seed = 0;

    [[nodiscard]] std::size_t num_modules() const noexcept { return target_modules.size(); }

    bool operator==(const AdapterSpec&) const = default;
};

inline std::vector<ModeRole> mode_roles(Variant v) {
    switch (v) {
    case Variant::TT4D: return {ModeRole::Input, ModeRole::Layer, ModeRole::Module, ModeRole::Output};
    case Variant::TT5D: return {ModeRole::Input, ModeRole::Layer, ModeRole::Module, ModeRole::Head, ModeRole::Output};
    case Variant::TT4plus1D:
        return {ModeRole::Input, ModeRole::Layer, ModeRole::Task, ModeRole::Module, ModeRole::Output};
    case Variant::LoRA: return {};
    }
    return {};
}

/// (d_in, L, M, d_out), (d_in, L, M, H, d_out/H) or (d_in, L, T, M, d_out).
inline std::vector<std::size_t> mode_sizes(const AdapterSpec& spec) {
    std::vector<std::size_t> out;
    for (ModeRole r : mode_roles(spec.variant)) {
        switch (r) {
        case ModeRole::Input: out.push_back(spec.d_in); break;
        case ModeRole::Layer: out.push_back(spec.num_layers); break;
        case ModeRole::Task: out.push_back(spec.num_tasks); break;
        case ModeRole::Module: out.push_back(spec.num_modules()); break;
        case ModeRole::Head: out.push_back(spec.num_heads); break;
        case ModeRole::Output:
            out.push_back(spec.variant == Variant::TT5D ? spec.d_out / spec.num_heads : spec.d_out);
            break;
        }
    }
    return out;
}

/// Expands the uniform-rank shorthand to the d-1 interior bonds.
inline std::vector<std::size_t> expanded_ranks(const AdapterSpec& spec) {
    const std::size_t bonds = spec.variant == Variant::LoRA ? 1 : mode_roles(spec.variant).size() - 1;
    if (spec.bond_ranks.size() == 1) return std::vector<std::size_t>(bonds, spec.bond_ranks[0]);
    if (spec.bond_ranks.size() != bonds) {
        throw ConfigError("adapter: expected 1 or " + std::to_string(bonds) + " bond ranks, got " +
                          std::to_string(spec.bond_ranks.size()));
    }
    return spec.bond_ranks;
}

inline std::vector<InitTag> default_init_strategy(Variant v) {
    std::vector<InitTag> tags(mode_roles(v).size(), InitTag::Identity);
    if (!tags.empty()) tags[0] = InitTag::Zero;
    return tags;
}

inline void validate_spec(const AdapterSpec& spec) {
    if (spec.d_in == 0 || spec.d_out == 0 || spec.num_layers == 0) {
        throw ConfigError("adapter: d_in, d_out and num_layers must be positive");
    }
    if (spec.target_modules.empty()) throw ConfigError("adapter: target_modules must be non-empty");
    for (std::size_t i = 0; i < spec.target_modules.size(); ++i)
        for (std::size_t j = i + 1; j < spec.target_modules.size(); ++j)
            if (spec.target_modules[i] == spec.target_modules[j]) {
                throw ConfigError(std::string("adapter: duplicate target module '") + to_char(spec.target_modules[i]) +
                                  "'");
            }
    if (!(spec.alpha > 0.0) || !std::isfinite(spec.alpha)) throw ConfigError("adapter: alpha must be finite and > 0");
    if (spec.variant == Variant::TT5D) {
        if (spec.num_heads == 0 || spec.d_out % spec.num_heads != 0) {
            throw ConfigError("adapter: num_heads " + std::to_string(spec.num_heads) + " does not divide d_out " +
                              std::to_string(spec.d_out));
        }
    }
    if (spec.variant == Variant::TT4plus1D && spec.num_tasks == 0) throw ConfigError("adapter: num_tasks must be >= 1");
    for (std::size_t r : expanded_ranks(spec)) {
        if (r == 0 || r > kMaxBondRank) {
            throw ConfigError("adapter: bond rank " + std::to_string(r) + " outside [1, " +
                              std::to_string(kMaxBondRank) + "]");
        }
    }
    if (spec.variant != Variant::LoRA) {
        const auto tags = spec.init_strategy.empty() ? default_init_strategy(spec.variant) : spec.init_strategy;
        if (tags.size() != mode_roles(spec.variant).size()) {
            throw ConfigError("adapter: init strategy '" + format_init_strategy(tags) + "' has " +
                              std::to_string(tags.size()) + " tags, expected " +
                              std::to_string(mode_roles(spec.variant).size()));
        }
        if (std::find(tags.begin(), tags.end(), InitTag::Zero) == tags.end()) {
            throw ConfigError("adapter: init strategy '" + format_init_strategy(tags) +
                              "' has no 'ze' core, adapter output would be nonzero at initialization");
        }
    }
}

/// Index of one adapted linear map: layer, module position in target_modules, task.
struct SiteKey {
    std::size_t layer = 0;
    std::size_t module = 0;
    std::size_t task = 0;

    auto operator<=>(const SiteKey&) const = default;
};

/// Activations kept by the adapter branch for its backward pass.
struct SiteTape {
    SiteKey key;
    DenseTensor input;                 // x
    std::vector<DenseTensor> chain;    // x·𝒢₁, then after each interior slice
    std::vector<DenseTensor> per_head; // 5D: chain.back()·𝒢_H[h]
};

class MetaTTAdapter {
public:
    MetaTTAdapter() = default;

    [[nodiscard]] const AdapterSpec& spec() const noexcept { return spec_; }
    [[nodiscard]] Variant variant() const noexcept { return spec_.variant; }
    [[nodiscard]] bool is_tt() const noexcept { return spec_.variant != Variant::LoRA; }
    [[nodiscard]] double alpha() const noexcept { return spec_.alpha; }
    /// Accepts 0 so callers can switch the adapter branch off.
    void set_alpha(double a) {
        if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("adapter: alpha must be finite and >= 0");
        spec_.alpha = a;
    }

    [[nodiscard]] const TensorTrain& train() const {
        require_tt("train");
        return train_;
    }
    [[nodiscard]] TensorTrain& train() {
        require_tt("train");
        return train_;
    }

    [[nodiscard]] std::vector<ModeRole> roles() const { return mode_roles(spec_.variant); }

    /// Core position of a mode role, if the variant has it.
    [[nodiscard]] std::optional<std::size_t> mode_position(ModeRole role) const {
        const auto r = roles();
        for (std::size_t i = 0; i < r.size(); ++i)
            if (r[i] == role) return i;
        return std::nullopt;
    }

    [[nodiscard]] const std::vector<DenseTensor>& lora_a() const { return lora_a_; }
    [[nodiscard]] const std::vector<DenseTensor>& lora_b() const { return lora_b_; }

    /// Trainable tensors in a fixed order: TT cores, or LoRA (A, B) pairs site by site.
    [[nodiscard]] std::vector<DenseTensor*> parameters() {
        std::vector<DenseTensor*> out;
        if (is_tt()) {
            for (auto& c : train_.cores()) out.push_back(&c.values());
        } else {
            for (std::size_t i = 0; i < lora_a_.size(); ++i) {
                out.push_back(&lora_a_[i]);
                out.push_back(&lora_b_[i]);
            }
        }
        return out;
    }
    [[nodiscard]] std::vector<const DenseTensor*> parameters() const {
        std::vector<const DenseTensor*> out;
        for (DenseTensor* p : const_cast<MetaTTAdapter*>(this)->parameters()) out.push_back(p);
        return out;
    }

    [[nodiscard]] std::vector<std::string> parameter_names() const {
        std::vector<std::string> out;
        if (is_tt()) {
            for (std::size_t k = 0; k < train_.order(); ++k) out.push_back("G" + std::to_string(k + 1));
        } else {
            for (std::size_t l = 0; l < spec_.num_layers; ++l)
                for (std::size_t m = 0; m < spec_.num_modules(); ++m) {
                    const std::string site = std::to_string(l) + "." + std::to_string(m);
                    out.push_back("A." + site);
                    out.push_back("B." + site);
                }
        }
        return out;
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const DenseTensor* p : parameters()) n += p->size();
        return n;
    }

    void check_site(const SiteKey& key) const {
        if (key.layer >= spec_.num_layers) {
            throw ShapeError("adapter: layer index " + std::to_string(key.layer) + " out of range [0," +
                             std::to_string(spec_.num_layers) + ")");
        }
        if (key.module >= spec_.num_modules()) {
            throw ShapeError("adapter: module index " + std::to_string(key.module) + " out of range [0," +
                             std::to_string(spec_.num_modules()) + ")");
        }
        const std::size_t tasks = spec_.variant == Variant::TT4plus1D ? spec_.num_tasks : 1;
        if (key.task >= tasks) {
            throw ShapeError("adapter: task index " + std::to_string(key.task) + " out of range [0," +
                             std::to_string(tasks) + ")");
        }
    }

    /// (core position, slice index) for every interior mode except heads, in chain order.
    [[nodiscard]] std::vector<std::pair<std::size_t, std::size_t>> interior_path(const SiteKey& key) const {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        const auto r = roles();
        for (std::size_t i = 1; i + 1 < r.size(); ++i) {
            switch (r[i]) {
            case ModeRole::Layer: out.emplace_back(i, key.layer); break;
            case ModeRole::Module: out.emplace_back(i, key.module); break;
            case ModeRole::Task: out.emplace_back(i, key.task); break;
            default: break;
            }
        }
        return out;
    }

    [[nodiscard]] std::size_t lora_index(const SiteKey& key) const { return key.layer * spec_.num_modules() + key.module; }

    friend MetaTTAdapter build(const AdapterSpec& spec);

private:
    void require_tt(const char* what) const {
        if (!is_tt()) throw ConfigError(std::string(what) + ": not available on the LoRA baseline");
    }

    AdapterSpec spec_;
    TensorTrain train_;
    std::vector<DenseTensor> lora_a_;
    std::vector<DenseTensor> lora_b_;
};

namespace detail {

// Leading-diagonal identity on an r_l × r_r slice.
inline void set_identity_slices(TTCore& core) {
    DenseTensor eye = DenseTensor::matrix(core.left_rank(), core.right_rank());
    for (std::size_t i = 0; i < std::min(core.left_rank(), core.right_rank()); ++i) eye(i, i) = 1.0;
    for (std::size_t s = 0; s < core.mode_size(); ++s) core.set_slice(s, eye);
}

// Boundary cores are matrices (n × r first, r × n last); identity goes on their leading diagonal.
inline void set_identity_boundary(TTCore& core, bool first) {
    core.values().fill(0.0);
    DenseTensor m = first ? core.as_left_boundary() : core.as_right_boundary();
    for (std::size_t i = 0; i < std::min(m.extent(0), m.extent(1)); ++i) m(i, i) = 1.0;
    core.values() = std::move(m).reshaped(core.values().shape());
}

} // namespace detail

inline MetaTTAdapter build(const AdapterSpec& spec) {
    validate_spec(spec);
    MetaTTAdapter ad;
    ad.spec_ = spec;
    Rng rng(spec.seed);
    const auto ranks = expanded_ranks(spec);

    if (spec.variant == Variant::LoRA) {
        const std::size_t sites = spec.num_layers * spec.num_modules();
        for (std::size_t i = 0; i < sites; ++i) {
            ad.lora_a_.push_back(random_normal({spec.d_in, ranks[0]}, rng, 0.0, kLoraInitStddev));
            ad.lora_b_.push_back(DenseTensor::matrix(ranks[0], spec.d_out));
        }
        return ad;
    }

    const auto modes = mode_sizes(spec);
    ad.train_ = TensorTrain::zeros(modes, ranks);
    const auto tags = spec.init_strategy.empty() ? default_init_strategy(spec.variant) : spec.init_strategy;
    ad.spec_.init_strategy = tags;
    const std::size_t d = modes.size();
    for (std::size_t k = 0; k < d; ++k) {
        TTCore& core = ad.train_.core(k);
        switch (tags[k]) {
        case InitTag::Zero: core.values().fill(0.0); break;
        case InitTag::Normal: fill_normal(core.values(), rng, 0.0, kNormalInitStddev); break;
        case InitTag::Identity:
            if (k == 0 || k + 1 == d) detail::set_identity_boundary(core, k == 0);
            else detail::set_identity_slices(core);
            break;
        }
    }
    return ad;
}

/// Unscaled ΔW for one site, d_in × d_out.
inline DenseTensor delta_matrix(const MetaTTAdapter& ad, const SiteKey& key) {
    ad.check_site(key);
    const AdapterSpec& spec = ad.spec();
    switch (spec.variant) {
    case Variant::LoRA: return matmul(ad.lora_a()[ad.lora_index(key)], ad.lora_b()[ad.lora_index(key)]);
    case Variant::TT4D: {
        const std::size_t idx[] = {key.layer, key.module};
        return select_slice(ad.train(), idx);
    }
    case Variant::TT4plus1D: {
        const std::size_t idx[] = {key.layer, key.task, key.module};
        return select_slice(ad.train(), idx);
    }
    case Variant::TT5D: {
        const std::size_t block = spec.d_out / spec.num_heads;
        DenseTensor out = DenseTensor::matrix(spec.d_in, spec.d_out);
        for (std::size_t h = 0; h < spec.num_heads; ++h) {
            const std::size_t idx[] = {key.layer, key.module, h};
            const DenseTensor part = select_slice(ad.train(), idx);
            for (std::size_t i = 0; i < spec.d_in; ++i)
                for (std::size_t j = 0; j < block; ++j) out(i, h * block + j) = part(i, j);
        }
        return out;
    }
    }
    return {};
}

/// α-scaled adapter branch applied to activations, x·𝒢₁·𝒢₂[l]⋯ left to right.
/// When `tape` is non-null it receives the intermediates needed by adapter_backward.
inline DenseTensor adapter_branch(const MetaTTAdapter& ad, const DenseTensor& x, const SiteKey& key,
                                  SiteTape* tape = nullptr) {
    ad.check_site(key);
    const AdapterSpec& spec = ad.spec();
    if (x.rank() != 2 || x.extent(1) != spec.d_in) {
        throw ShapeError("adapter_branch: input shape " + shape_to_string(x.shape()) + " does not have " +
                         std::to_string(spec.d_in) + " columns");
    }
    DenseTensor out;
    if (tape) {
        tape->key = key;
        tape->input = x;
        tape->chain.clear();
        tape->per_head.clear();
    }
    if (spec.variant == Variant::LoRA) {
        DenseTensor xa = matmul(x, ad.lora_a()[ad.lora_index(key)]);
        out = matmul(xa, ad.lora_b()[ad.lora_index(key)]);
        if (tape) tape->chain.push_back(std::move(xa));
    } else {
        const TensorTrain& tt = ad.train();
        DenseTensor a = matmul(x, tt.core(0).as_left_boundary());
        for (auto [pos, idx] : ad.interior_path(key)) {
            DenseTensor next = matmul(a, tt.core(pos).slice(idx));
            if (tape) tape->chain.push_back(std::move(a));
            a = std::move(next);
        }
        const DenseTensor last = tt.core(tt.order() - 1).as_right_boundary();
        if (spec.variant == Variant::TT5D) {
            const TTCore& head_core = tt.core(tt.order() - 2);
            const std::size_t block = spec.d_out / spec.num_heads;
            const std::size_t n = x.extent(0);
            out = DenseTensor::matrix(n, spec.d_out);
            for (std::size_t h = 0; h < spec.num_heads; ++h) {
                DenseTensor b = matmul(a, head_core.slice(h));
                const DenseTensor part = matmul(b, last);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < block; ++j) out(i, h * block + j) = part(i, j);
                if (tape) tape->per_head.push_back(std::move(b));
            }
        } else {
            out = matmul(a, last);
        }
        if (tape) tape->chain.push_back(std::move(a));
    }
    scale_in_place(out, spec.alpha);
    return out;
}

/// Y = X·W + α·X·ΔW_{l,m}, never materializing ΔW.
inline DenseTensor adapted_forward(const MetaTTAdapter& ad, const DenseTensor& x, const DenseTensor& w_frozen,
                                   const SiteKey& key, SiteTape* tape = nullptr) {
    if (w_frozen.rank() != 2 || w_frozen.extent(0) != ad.spec().d_in || w_frozen.extent(1) != ad.spec().d_out) {
        throw ShapeError("adapted_forward: frozen weight shape " + shape_to_string(w_frozen.shape()) +
                         " does not match adapter dims");
    }
    DenseTensor y = matmul(x, w_frozen);
    add_in_place(y, adapter_branch(ad, x, key, tape));
    return y;
}

/// Gradients for every adapter parameter, parallel to MetaTTAdapter::parameters().
using AdapterGrads = std::vector<DenseTensor>;

inline AdapterGrads zero_grads(const MetaTTAdapter& ad) {
    AdapterGrads g;
    for (const DenseTensor* p : ad.parameters()) g.emplace_back(p->shape());
    return g;
}

namespace detail {
inline void add_to_slice(DenseTensor& core_grad, std::size_t idx, const DenseTensor& m) {
    const std::size_t rl = core_grad.extent(0), n = core_grad.extent(1), rr = core_grad.extent(2);
    for (std::size_t a = 0; a < rl; ++a)
        for (std::size_t b = 0; b < rr; ++b) core_grad.data()[(a * n + idx) * rr + b] += m(a, b);
}
} // namespace detail

/// Reverse pass of adapter_branch. `d_out` is ∂loss/∂(branch output).
/// Accumulates parameter gradients into `grads` and returns ∂loss/∂x through the branch.
inline DenseTensor adapter_backward(const MetaTTAdapter& ad, const SiteTape& tape, const DenseTensor& d_out,
                                    AdapterGrads& grads) {
    const AdapterSpec& spec = ad.spec();
    DenseTensor g = d_out;
    scale_in_place(g, spec.alpha);

    if (spec.variant == Variant::LoRA) {
        const std::size_t i = ad.lora_index(tape.key);
        const DenseTensor& xa = tape.chain.at(0);
        add_in_place(grads[2 * i + 1], matmul_tn(xa, g));
        const DenseTensor d_xa = matmul_nt(g, ad.lora_b()[i]);
        add_in_place(grads[2 * i], matmul_tn(tape.input, d_xa));
        return matmul_nt(d_xa, ad.lora_a()[i]);
    }

    const TensorTrain& tt = ad.train();
    const std::size_t d = tt.order();
    const DenseTensor last = tt.core(d - 1).as_right_boundary();
    const DenseTensor& a_last = tape.chain.back();
    DenseTensor d_a;
    if (spec.variant == Variant::TT5D) {
        const std::size_t block = spec.d_out / spec.num_heads;
        const std::size_t n = g.extent(0);
        const TTCore& head_core = tt.core(d - 2);
        DenseTensor d_last = DenseTensor::matrix(last.extent(0), last.extent(1));
        d_a = DenseTensor::matrix(a_last.extent(0), a_last.extent(1));
        for (std::size_t h = 0; h < spec.num_heads; ++h) {
            DenseTensor gh = DenseTensor::matrix(n, block);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < block; ++j) gh(r, j) = g(r, h * block + j);
            const DenseTensor& b = tape.per_head.at(h);
            matmul_accumulate(transpose(b), gh, d_last);
            const DenseTensor d_b = matmul_nt(gh, last);
            detail::add_to_slice(grads[d - 2], h, matmul_tn(a_last, d_b));
            matmul_accumulate(d_b, transpose(head_core.slice(h)), d_a);
        }
        add_in_place(grads[d - 1], d_last);
    } else {
        add_in_place(grads[d - 1], matmul_tn(a_last, g));
        d_a = matmul_nt(g, last);
    }

    const auto path = ad.interior_path(tape.key);
    for (std::size_t p = path.size(); p-- > 0;) {
        const auto [pos, idx] = path[p];
        const DenseTensor& a_in = tape.chain.at(p);
        detail::add_to_slice(grads[pos], idx, matmul_tn(a_in, d_a));
        d_a = matmul_nt(d_a, tt.core(pos).slice(idx));
    }
    const DenseTensor first = tt.core(0).as_left_boundary();
    add_in_place(grads[0], matmul_tn(tape.input, d_a));
    return matmul_nt(d_a, first);
}

/// Precomputed inference form: a = 𝒢₁, b[site] = interior slices · last core.
struct MergedAdapter {
    DenseTensor a;
    std::map<SiteKey, DenseTensor> b;
    double alpha = 1.0;

    /// x·W + α·(x·a)·b[site]: two small products on top of the frozen map.
    [[nodiscard]] DenseTensor forward(const DenseTensor& x, const DenseTensor& w_frozen, const SiteKey& key) const {
        const auto it = b.find(key);
        if (it == b.end()) throw ShapeError("MergedAdapter: unknown site");
        DenseTensor y = matmul(x, w_frozen);
        DenseTensor delta = matmul(matmul(x, a), it->second);
        add_in_place(y, delta, alpha);
        return y;
    }
};

inline MergedAdapter merge_for_inference(const MetaTTAdapter& ad) {
    if (!ad.is_tt()) throw ConfigError("merge_for_inference: the LoRA baseline has no shared cores to merge");
    const AdapterSpec& spec = ad.spec();
    const TensorTrain& tt = ad.train();
    const std::size_t d = tt.order();
    const std::size_t r1 = tt.core(0).right_rank();
    MergedAdapter out{tt.core(0).as_left_boundary(), {}, spec.alpha};
    const DenseTensor last = tt.core(d - 1).as_right_boundary();
    const std::size_t tasks = spec.variant == Variant::TT4plus1D ? spec.num_tasks : 1;

    for (std::size_t l = 0; l < spec.num_layers; ++l)
        for (std::size_t m = 0; m < spec.num_modules(); ++m)
            for (std::size_t t = 0; t < tasks; ++t) {
                const SiteKey key{l, m, t};
                DenseTensor chain = DenseTensor::identity(r1);
                for (auto [pos, idx] : ad.interior_path(key)) chain = matmul(chain, tt.core(pos).slice(idx));
                if (spec.variant == Variant::TT5D) {
                    const std::size_t block = spec.d_out / spec.num_heads;
                    DenseTensor b = DenseTensor::matrix(r1, spec.d_out);
                    for (std::size_t h = 0; h < spec.num_heads; ++h) {
                        const DenseTensor part = matmul(matmul(chain, tt.core(d - 2).slice(h)), last);
                        for (std::size_t i = 0; i < r1; ++i)
                            for (std::size_t j = 0; j < block; ++j) b(i, h * block + j) = part(i, j);
                    }
                    out.b.emplace(key, std::move(b));
                } else {
                    out.b.emplace(key, matmul(chain, last));
                }
            }
    return out;
}

/// LoRA on every (layer, module) pair: 2·L·M·D·r.
inline std::size_t baseline_lora_param_count(std::size_t num_layers, std::size_t num_modules, std::size_t d,
                                             std::size_t r) {
    return 2 * num_layers * num_modules * d * r;
}

} // namespace ttadapt
