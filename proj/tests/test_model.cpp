#include "oracles.hpp"

#include "ttadapt/model.hpp"
#include "ttadapt/rng.hpp"
#include "ttadapt/train.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ttadapt;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat mul(const Mat& a, const DenseTensor& w) {
    Mat out(a.size(), std::vector<double>(w.extent(1), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < w.extent(1); ++j)
            for (std::size_t k = 0; k < w.extent(0); ++k) out[i][j] += a[i][k] * w(k, j);
    return out;
}

Mat norm_rows(const Mat& x) {
    Mat out = x;
    for (auto& row : out) {
        double mean = 0.0, var = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(row.size());
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(row.size());
        for (double& v : row) v = (v - mean) / std::sqrt(var + 1e-5);
    }
    return out;
}

// Straight-line encoder: one sequence at a time, every weight applied as a dense matrix.
std::vector<double> reference_forward(const FrozenTransformer& m, const MetaTTAdapter* ad,
                                      const std::vector<std::uint32_t>& seq, std::size_t task) {
    const ModelConfig& c = m.config;
    const std::size_t D = c.hidden_dim, S = seq.size(), H = c.num_heads, dh = D / H;
    Mat x(S, std::vector<double>(D));
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t j = 0; j < D; ++j) x[s][j] = m.token_embedding(seq[s], j) + m.position_embedding(s, j);
    auto weight = [&](std::size_t l, ProjModule p) {
        DenseTensor w = m.weight(l, p);
        if (!ad) return w;
        const auto& mods = ad->spec().target_modules;
        for (std::size_t i = 0; i < mods.size(); ++i)
            if (mods[i] == p) add_in_place(w, oracle::materialized_delta(*ad, {l, i, task}), ad->alpha());
        return w;
    };
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const Mat h = norm_rows(x);
        const Mat q = mul(h, weight(l, ProjModule::Q)), k = mul(h, weight(l, ProjModule::K)),
                  v = mul(h, weight(l, ProjModule::V));
        Mat ctx(S, std::vector<double>(D, 0.0));
        for (std::size_t hd = 0; hd < H; ++hd)
            for (std::size_t i = 0; i < S; ++i) {
                std::vector<double> p(S);
                double z = 0.0;
                for (std::size_t j = 0; j < S; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) s += q[i][hd * dh + e] * k[j][hd * dh + e];
                    p[j] = std::exp(s / std::sqrt(static_cast<double>(dh)));
                    z += p[j];
                }
                for (std::size_t j = 0; j < S; ++j)
                    for (std::size_t e = 0; e < dh; ++e) ctx[i][hd * dh + e] += p[j] / z * v[j][hd * dh + e];
            }
        const Mat o = mul(ctx, weight(l, ProjModule::O));
        for (std::size_t i = 0; i < S; ++i)
            for (std::size_t j = 0; j < D; ++j) x[i][j] += o[i][j];
        Mat u = mul(norm_rows(x), m.layers[l].w_up);
        for (auto& row : u)
            for (double& e : row) e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
        const Mat dn = mul(u, m.layers[l].w_down);
        for (std::size_t i = 0; i < S; ++i)
            for (std::size_t j = 0; j < D; ++j) x[i][j] += dn[i][j];
    }
    const Mat hf = norm_rows(x);
    Mat pooled(1, std::vector<double>(D, 0.0));
    for (std::size_t i = 0; i < S; ++i)
        for (std::size_t j = 0; j < D; ++j) pooled[0][j] += hf[i][j] / static_cast<double>(S);
    return mul(pooled, m.head)[0];
}

ModelConfig tiny(std::uint64_t seed = 0) {
    ModelConfig c;
    c.num_layers = 2;
    c.hidden_dim = 8;
    c.num_heads = 2;
    c.ffn_dim = 12;
    c.vocab_size = 10;
    c.max_seq_len = 5;
    c.num_outputs = 3;
    c.seed = seed;
    return c;
}

TokenBatch random_batch(Rng& rng, std::size_t b, std::size_t s, std::size_t vocab) {
    TokenBatch batch{b, s, {}};
    std::uniform_int_distribution<std::uint32_t> tok(0, static_cast<std::uint32_t>(vocab - 1));
    for (std::size_t i = 0; i < b * s; ++i) batch.tokens.push_back(tok(rng));
    return batch;
}

MetaTTAdapter random_adapter(Variant v, const ModelConfig& c, std::uint64_t seed,
                             std::vector<ProjModule> mods = {ProjModule::Q, ProjModule::V}) {
    AdapterSpec s = oracle::small_spec(v, c.hidden_dim, c.num_layers);
    s.target_modules = std::move(mods);
    MetaTTAdapter ad = build(s);
    oracle::randomize(ad, seed, 0.4);
    return ad;
}

} // namespace

TEST(Model, ForwardMatchesStraightLineReference) {
    const FrozenTransformer m = build_frozen_model(tiny(1));
    Rng rng(2);
    const TokenBatch batch = random_batch(rng, 3, 4, 10);
    const DenseTensor out = model_forward(m, nullptr, batch);
    for (std::size_t b = 0; b < 3; ++b) {
        const std::vector<std::uint32_t> seq(batch.tokens.begin() + static_cast<long>(b * 4),
                                             batch.tokens.begin() + static_cast<long>(b * 4 + 4));
        const auto ref = reference_forward(m, nullptr, seq, 0);
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out(b, j), ref[j], 1e-12);
    }
}

TEST(Model, AdaptedForwardMatchesMaterializedWeights) {
    const FrozenTransformer m = build_frozen_model(tiny(3));
    Rng rng(4);
    const TokenBatch batch = random_batch(rng, 2, 5, 10);
    for (Variant v : oracle::kAllVariants) {
        const MetaTTAdapter ad =
            random_adapter(v, m.config, 5, {ProjModule::Q, ProjModule::K, ProjModule::V, ProjModule::O});
        const std::size_t task = v == Variant::TT4plus1D ? 2 : 0;
        const DenseTensor out = model_forward(m, &ad, batch, task);
        for (std::size_t b = 0; b < 2; ++b) {
            const std::vector<std::uint32_t> seq(batch.tokens.begin() + static_cast<long>(b * 5),
                                                 batch.tokens.begin() + static_cast<long>(b * 5 + 5));
            const auto ref = reference_forward(m, &ad, seq, task);
            for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out(b, j), ref[j], 1e-11) << to_string(v);
        }
    }
}

TEST(Model, ZeroInitAdapterIsBitExact) {
    const FrozenTransformer m = build_frozen_model(tiny(6));
    Rng rng(7);
    const TokenBatch batch = random_batch(rng, 2, 5, 10);
    const DenseTensor base = model_forward(m, nullptr, batch);
    for (Variant v : oracle::kAllVariants) {
        AdapterSpec s = oracle::small_spec(v, 8, 2);
        s.target_modules = {ProjModule::Q, ProjModule::K, ProjModule::V, ProjModule::O};
        const MetaTTAdapter ad = build(s);
        const std::size_t tasks = v == Variant::TT4plus1D ? s.num_tasks : 1;
        for (std::size_t t = 0; t < tasks; ++t) EXPECT_EQ(model_forward(m, &ad, batch, t), base) << to_string(v);
    }
}

TEST(Model, SeedDeterminesWeights) {
    EXPECT_EQ(build_frozen_model(tiny(9)).fingerprint(), build_frozen_model(tiny(9)).fingerprint());
    EXPECT_NE(build_frozen_model(tiny(9)).fingerprint(), build_frozen_model(tiny(10)).fingerprint());
}

TEST(Model, InputErrors) {
    const FrozenTransformer m = build_frozen_model(tiny());
    EXPECT_THROW((void)model_forward(m, nullptr, TokenBatch{1, 2, {1, 99}}), ShapeError);
    EXPECT_THROW((void)model_forward(m, nullptr, TokenBatch{1, 6, std::vector<std::uint32_t>(6, 0)}), ShapeError);
    EXPECT_THROW((void)model_forward(m, nullptr, TokenBatch{2, 2, {1, 2, 3}}), ShapeError);
    const MetaTTAdapter ad = random_adapter(Variant::TT4plus1D, m.config, 1);
    EXPECT_THROW((void)model_forward(m, &ad, TokenBatch{1, 2, {1, 2}}, 3), ShapeError);
    EXPECT_THROW((void)inject_adapter(m, ad, {ProjModule::V, ProjModule::Q}), ConfigError);
    ModelConfig bad = tiny();
    bad.num_heads = 3;
    EXPECT_THROW((void)build_frozen_model(bad), ConfigError);
    const FrozenTransformer wide = build_frozen_model([] {
        ModelConfig c = tiny();
        c.hidden_dim = 10;
        return c;
    }());
    EXPECT_THROW((void)inject_adapter(wide, ad, ad.spec().target_modules), ShapeError);
}

TEST(Backward, MatchesFiniteDifferencesForEveryVariant) {
    const FrozenTransformer m = build_frozen_model(tiny(11));
    Rng rng(12);
    const TokenBatch batch = random_batch(rng, 2, 3, 10);
    const DenseTensor targets = random_normal({2, 3}, rng);
    for (Variant v : oracle::kAllVariants) {
        MetaTTAdapter ad = random_adapter(v, m.config, 13, {ProjModule::Q, ProjModule::K, ProjModule::V, ProjModule::O});
        const GradCheckResult r = gradient_check(m, ad, batch, targets, v == Variant::TT4plus1D ? 1 : 0);
        EXPECT_LE(r.max_relative_error, 1e-6) << to_string(v) << " worst " << r.worst_parameter;
        EXPECT_EQ(r.entries_checked, ad.parameter_count());
    }
}

TEST(Backward, IsLinearInOutputGradient) {
    const FrozenTransformer m = build_frozen_model(tiny(14));
    Rng rng(15);
    const MetaTTAdapter ad = random_adapter(Variant::TT5D, m.config, 16);
    const AdaptedModel view = inject_adapter(m, ad, ad.spec().target_modules);
    const TokenBatch batch = random_batch(rng, 2, 4, 10);
    const DenseTensor g = random_normal({2, 3}, rng);
    DenseTensor g2 = g;
    scale_in_place(g2, 2.0);
    ForwardTape t1, t2;
    (void)view.forward(batch, 0, &t1);
    (void)view.forward(batch, 0, &t2);
    const AdapterGrads a = view.backward(t1, g), b = view.backward(t2, g2);
    for (std::size_t p = 0; p < a.size(); ++p)
        for (std::size_t i = 0; i < a[p].size(); ++i) EXPECT_NEAR(b[p][i], 2.0 * a[p][i], 1e-14 + 1e-12 * std::abs(a[p][i]));
}

TEST(Backward, TapeIsSingleUse) {
    const FrozenTransformer m = build_frozen_model(tiny());
    const MetaTTAdapter ad = random_adapter(Variant::TT4D, m.config, 1);
    const AdaptedModel view = inject_adapter(m, ad, ad.spec().target_modules);
    ForwardTape tape;
    (void)view.forward(TokenBatch{1, 2, {1, 2}}, 0, &tape);
    (void)view.backward(tape, DenseTensor::matrix(1, 3, 1.0));
    EXPECT_THROW((void)view.backward(tape, DenseTensor::matrix(1, 3, 1.0)), ShapeError);
    ForwardTape unrecorded;
    EXPECT_THROW((void)view.backward(unrecorded, DenseTensor::matrix(1, 3, 1.0)), ShapeError);
}

TEST(Backward, UnusedTaskSliceHasZeroGradient) {
    const FrozenTransformer m = build_frozen_model(tiny(17));
    const MetaTTAdapter ad = random_adapter(Variant::TT4plus1D, m.config, 18);
    const AdaptedModel view = inject_adapter(m, ad, ad.spec().target_modules);
    ForwardTape tape;
    (void)view.forward(TokenBatch{1, 3, {1, 2, 3}}, 1, &tape);
    const AdapterGrads g = view.backward(tape, DenseTensor::matrix(1, 3, 1.0));
    const TTCore task_grad(g[2]);
    EXPECT_EQ(frobenius_norm(task_grad.slice(0)), 0.0);
    EXPECT_EQ(frobenius_norm(task_grad.slice(2)), 0.0);
    EXPECT_GT(frobenius_norm(task_grad.slice(1)), 0.0);
}

TEST(Model, GeluAndLayerNormHelpers) {
    EXPECT_NEAR(detail::gelu(1.0), 0.8413447460685429, 1e-15);
    EXPECT_EQ(detail::gelu(0.0), 0.0);
    const double h = 1e-6;
    for (double x : {-2.0, -0.3, 0.0, 0.7, 3.0})
        EXPECT_NEAR(detail::gelu_grad(x), (detail::gelu(x + h) - detail::gelu(x - h)) / (2 * h), 1e-8);
    const DenseTensor y = detail::layer_norm(DenseTensor::matrix({{1, 2, 3, 4}}), {1, 1, 1, 1}, {0, 0, 0, 0}, nullptr);
    double mean = 0.0;
    for (double v : y.values()) mean += v;
    EXPECT_NEAR(mean, 0.0, 1e-14);
}
