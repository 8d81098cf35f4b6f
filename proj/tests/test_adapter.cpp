#include "oracles.hpp"

#include "ttadapt/adapter.hpp"
#include "ttadapt/rng.hpp"

#include <gtest/gtest.h>

using namespace ttadapt;

namespace {

AdapterSpec roberta_like(Variant v, bool large, std::size_t rank) {
    AdapterSpec s;
    s.variant = v;
    s.d_in = s.d_out = large ? 1024 : 768;
    s.num_layers = large ? 24 : 12;
    s.num_heads = large ? 16 : 12;
    s.num_tasks = 3;
    s.bond_ranks = {rank};
    return s;
}

std::size_t count(Variant v, bool large, std::size_t rank) { return build(roberta_like(v, large, rank)).parameter_count(); }

} // namespace

TEST(ParamCount, ReferenceCountsBase) {
    EXPECT_EQ(count(Variant::TT4D, false, 8), 13184u);
    EXPECT_EQ(count(Variant::TT4D, false, 24), 44928u);
    EXPECT_EQ(count(Variant::TT4D, false, 64), 155648u);
    EXPECT_EQ(count(Variant::TT5D, false, 16), 19968u);
    EXPECT_EQ(count(Variant::TT5D, false, 64), 159744u);
    EXPECT_EQ(count(Variant::TT4plus1D, false, 8), 13376u);
    EXPECT_EQ(count(Variant::LoRA, false, 8), 294912u);
}

TEST(ParamCount, ReferenceCountsLarge) {
    EXPECT_EQ(count(Variant::TT4D, true, 16), 39424u);
    EXPECT_EQ(count(Variant::TT4D, true, 32), 92160u);
    EXPECT_EQ(count(Variant::TT5D, true, 32), 77824u);
    EXPECT_EQ(count(Variant::TT5D, true, 64), 241664u);
    EXPECT_EQ(count(Variant::TT4plus1D, true, 8), 18240u);
    EXPECT_EQ(count(Variant::LoRA, true, 8), 786432u);
}

TEST(ParamCount, ClosedForms) {
    for (std::size_t r : {1u, 5u, 13u}) {
        const std::size_t D = 768, L = 12, M = 2, H = 12;
        EXPECT_EQ(count(Variant::TT4D, false, r), 2 * D * r + (L + M) * r * r);
        EXPECT_EQ(count(Variant::TT5D, false, r), (D + D / H) * r + (L + M + H) * r * r);
        EXPECT_EQ(count(Variant::LoRA, false, r), baseline_lora_param_count(L, M, D, r));
    }
}

TEST(Build, DefaultInitIsZeroThenIdentity) {
    const MetaTTAdapter ad = build(oracle::small_spec(Variant::TT4D));
    EXPECT_EQ(format_init_strategy(ad.spec().init_strategy), "ze-id-id-id");
    EXPECT_EQ(frobenius_norm(ad.train().core(0).values()), 0.0);
    const DenseTensor s = ad.train().core(1).slice(2);
    EXPECT_EQ(s, DenseTensor::identity(3));
    const DenseTensor last = ad.train().core(3).as_right_boundary();
    for (std::size_t i = 0; i < last.extent(0); ++i)
        for (std::size_t j = 0; j < last.extent(1); ++j) EXPECT_EQ(last(i, j), i == j ? 1.0 : 0.0);
}

TEST(Build, NormalTagsDrawNonzeroAndSeedsRepeat) {
    AdapterSpec s = oracle::small_spec(Variant::TT4D);
    s.init_strategy = parse_init_strategy("ze-no-no-no");
    s.seed = 17;
    const MetaTTAdapter a = build(s), b = build(s);
    EXPECT_GT(frobenius_norm(a.train().core(2).values()), 0.0);
    EXPECT_EQ(a.train().core(2).values(), b.train().core(2).values());
}

TEST(Build, LoraStartsWithZeroB) {
    const MetaTTAdapter ad = build(oracle::small_spec(Variant::LoRA));
    ASSERT_EQ(ad.lora_a().size(), 6u);
    for (const auto& b : ad.lora_b()) EXPECT_EQ(frobenius_norm(b), 0.0);
    EXPECT_GT(frobenius_norm(ad.lora_a()[0]), 0.0);
}

TEST(Build, ModeShapesPerVariant) {
    EXPECT_EQ(build(oracle::small_spec(Variant::TT4D)).train().mode_sizes(), (std::vector<std::size_t>{6, 3, 2, 6}));
    EXPECT_EQ(build(oracle::small_spec(Variant::TT5D)).train().mode_sizes(), (std::vector<std::size_t>{6, 3, 2, 2, 3}));
    EXPECT_EQ(build(oracle::small_spec(Variant::TT4plus1D)).train().mode_sizes(),
              (std::vector<std::size_t>{6, 3, 3, 2, 6}));
}

TEST(ValidateSpec, RejectsBadSpecs) {
    auto with = [](auto f) {
        AdapterSpec s = oracle::small_spec(Variant::TT5D);
        f(s);
        return s;
    };
    EXPECT_THROW(build(with([](AdapterSpec& s) { s.num_heads = 4; })), ConfigError);
    EXPECT_THROW(build(with([](AdapterSpec& s) { s.bond_ranks = {0}; })), ConfigError);
    EXPECT_THROW(build(with([](AdapterSpec& s) { s.bond_ranks = {kMaxBondRank + 1}; })), ConfigError);
    EXPECT_THROW(build(with([](AdapterSpec& s) { s.bond_ranks = {2, 2}; })), ConfigError);
    EXPECT_THROW(build(with([](AdapterSpec& s) { s.alpha = 0.0; })), ConfigError);
    EXPECT_THROW(build(with([](AdapterSpec& s) { s.target_modules = {}; })), ConfigError);
    EXPECT_THROW(build(with([](AdapterSpec& s) { s.target_modules = {ProjModule::Q, ProjModule::Q}; })), ConfigError);
    EXPECT_THROW(build(with([](AdapterSpec& s) { s.init_strategy = parse_init_strategy("id-id-id-id-id"); })),
                 ConfigError);
    EXPECT_THROW(build(with([](AdapterSpec& s) { s.init_strategy = parse_init_strategy("ze-id-id"); })), ConfigError);
    EXPECT_THROW(parse_init_strategy("ze-xx"), ConfigError);
    EXPECT_THROW(parse_variant("6d"), ConfigError);
    EXPECT_THROW(parse_module_list("q,z"), ConfigError);
}

TEST(Build, PerBondRanks) {
    AdapterSpec s = oracle::small_spec(Variant::TT4D);
    s.bond_ranks = {2, 3, 4};
    const MetaTTAdapter ad = build(s);
    EXPECT_EQ(ad.train().interior_ranks(), (std::vector<std::size_t>{2, 3, 4}));
}

TEST(Parsing, ModuleListsRoundTrip) {
    EXPECT_EQ(parse_module_list("q,v"), (std::vector<ProjModule>{ProjModule::Q, ProjModule::V}));
    EXPECT_EQ(parse_module_list("Query,dense"), (std::vector<ProjModule>{ProjModule::Q, ProjModule::O}));
    EXPECT_EQ(format_module_list({ProjModule::K, ProjModule::O}), "k,o");
    EXPECT_EQ(parse_variant("4+1D"), Variant::TT4plus1D);
}

TEST(DeltaMatrix, ZeroAtDefaultInit) {
    for (Variant v : oracle::kAllVariants) {
        const MetaTTAdapter ad = build(oracle::small_spec(v));
        for (const SiteKey& k : oracle::all_sites(ad.spec())) EXPECT_EQ(frobenius_norm(delta_matrix(ad, k)), 0.0);
    }
}

TEST(DeltaMatrix, MatchesMaterializedTensor) {
    for (Variant v : oracle::kAllVariants) {
        MetaTTAdapter ad = build(oracle::small_spec(v));
        oracle::randomize(ad, 3);
        for (const SiteKey& k : oracle::all_sites(ad.spec()))
            EXPECT_LT(max_abs_diff(delta_matrix(ad, k), oracle::materialized_delta(ad, k)), 1e-12) << to_string(v);
    }
}

TEST(DeltaMatrix, SiteIndexErrors) {
    const MetaTTAdapter ad = build(oracle::small_spec(Variant::TT4plus1D));
    EXPECT_THROW((void)delta_matrix(ad, {3, 0, 0}), ShapeError);
    EXPECT_THROW((void)delta_matrix(ad, {0, 2, 0}), ShapeError);
    EXPECT_THROW((void)delta_matrix(ad, {0, 0, 3}), ShapeError);
    EXPECT_THROW((void)delta_matrix(build(oracle::small_spec(Variant::TT4D)), {0, 0, 1}), ShapeError);
}

TEST(AdaptedForward, EqualsFrozenMapPlusScaledDelta) {
    Rng rng(9);
    for (Variant v : oracle::kAllVariants) {
        MetaTTAdapter ad = build(oracle::small_spec(v));
        oracle::randomize(ad, 4);
        const DenseTensor x = random_normal({5, 6}, rng), w = random_normal({6, 6}, rng);
        for (const SiteKey& k : oracle::all_sites(ad.spec())) {
            DenseTensor ref = matmul(x, w);
            add_in_place(ref, matmul(x, oracle::materialized_delta(ad, k)), ad.alpha());
            EXPECT_LT(max_abs_diff(adapted_forward(ad, x, w, k), ref), 1e-12);
        }
        EXPECT_THROW((void)adapted_forward(ad, x, DenseTensor::matrix(6, 5), {}), ShapeError);
        EXPECT_THROW((void)adapter_branch(ad, DenseTensor::matrix(5, 4), {}), ShapeError);
    }
}

TEST(AdaptedForward, ZeroInitIsBitExact) {
    Rng rng(10);
    for (Variant v : oracle::kAllVariants) {
        const MetaTTAdapter ad = build(oracle::small_spec(v));
        const DenseTensor x = random_normal({4, 6}, rng), w = random_normal({6, 6}, rng);
        for (const SiteKey& k : oracle::all_sites(ad.spec())) EXPECT_EQ(adapted_forward(ad, x, w, k), matmul(x, w));
    }
}

TEST(AdapterBackward, MatchesFiniteDifferences) {
    Rng rng(12);
    for (Variant v : oracle::kAllVariants) {
        MetaTTAdapter ad = build(oracle::small_spec(v, 4, 2));
        oracle::randomize(ad, 5);
        const DenseTensor x = random_normal({3, 4}, rng), c = random_normal({3, 4}, rng);
        const SiteKey key{1, 1, v == Variant::TT4plus1D ? 2u : 0u};
        auto loss = [&] {
            const DenseTensor y = adapter_branch(ad, x, key);
            double s = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * c[i];
            return s;
        };
        SiteTape tape;
        (void)adapter_branch(ad, x, key, &tape);
        AdapterGrads g = zero_grads(ad);
        const DenseTensor dx = adapter_backward(ad, tape, c, g);
        // dx = c · (αΔW)ᵀ
        const DenseTensor ref_dx = matmul_nt(c, delta_matrix(ad, key));
        for (std::size_t i = 0; i < dx.size(); ++i) EXPECT_NEAR(dx[i], ad.alpha() * ref_dx[i], 1e-12);
        const auto params = ad.parameters();
        for (std::size_t p = 0; p < params.size(); ++p)
            for (std::size_t i = 0; i < params[p]->size(); ++i) {
                const double saved = (*params[p])[i];
                (*params[p])[i] = saved + 1e-6;
                const double up = loss();
                (*params[p])[i] = saved - 1e-6;
                const double down = loss();
                (*params[p])[i] = saved;
                EXPECT_NEAR(g[p][i], (up - down) / 2e-6, 1e-7) << to_string(v) << " param " << p << " entry " << i;
            }
    }
}

TEST(AdapterBackward, UnselectedSlicesGetNoGradient) {
    MetaTTAdapter ad = build(oracle::small_spec(Variant::TT4D));
    oracle::randomize(ad, 6);
    Rng rng(1);
    const DenseTensor x = random_normal({2, 6}, rng);
    SiteTape tape;
    (void)adapter_branch(ad, x, {0, 1, 0}, &tape);
    AdapterGrads g = zero_grads(ad);
    (void)adapter_backward(ad, tape, random_normal({2, 6}, rng), g);
    for (std::size_t l = 1; l < 3; ++l) {
        const DenseTensor sl = TTCore(g[1]).slice(l);
        EXPECT_EQ(frobenius_norm(sl), 0.0);
    }
    EXPECT_EQ(frobenius_norm(TTCore(g[2]).slice(0)), 0.0);
}

TEST(Merge, MatchesUnmergedPath) {
    Rng rng(13);
    for (Variant v : {Variant::TT4D, Variant::TT5D, Variant::TT4plus1D}) {
        MetaTTAdapter ad = build(oracle::small_spec(v));
        oracle::randomize(ad, 7);
        const MergedAdapter merged = merge_for_inference(ad);
        EXPECT_EQ(merged.b.size(), oracle::all_sites(ad.spec()).size());
        const DenseTensor w = random_normal({6, 6}, rng);
        for (const SiteKey& k : oracle::all_sites(ad.spec())) {
            const DenseTensor x = random_normal({3, 6}, rng);
            const DenseTensor ref = adapted_forward(ad, x, w, k);
            EXPECT_LT(frobenius_distance(merged.forward(x, w, k), ref) / frobenius_norm(ref), 1e-12);
        }
    }
    EXPECT_THROW(merge_for_inference(build(oracle::small_spec(Variant::LoRA))), ConfigError);
}

TEST(Adapter, NamesAndAlpha) {
    MetaTTAdapter ad = build(oracle::small_spec(Variant::TT5D));
    EXPECT_EQ(ad.parameter_names(), (std::vector<std::string>{"G1", "G2", "G3", "G4", "G5"}));
    EXPECT_THROW(ad.set_alpha(-1.0), ConfigError);
    ad.set_alpha(0.0);
    EXPECT_EQ(ad.alpha(), 0.0);
    const MetaTTAdapter lora = build(oracle::small_spec(Variant::LoRA));
    EXPECT_EQ(lora.parameter_names().front(), "A.0.0");
    EXPECT_THROW((void)lora.train(), ConfigError);
}
