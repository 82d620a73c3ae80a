#include "test_support.hpp"

#include <doctest.h>

#include "terdit/checkpoint.hpp"
#include "terdit/dit.hpp"

#include <map>
#include <set>

using namespace terdit;
using namespace terdit::dit;
using terdit::testing::randomize;
using terdit::testing::random_image;
using terdit::testing::random_mat;
using terdit::testing::rel_err;
using terdit::testing::tiny_config;

namespace {

std::vector<Conditioning> conds(std::initializer_list<Conditioning> c) { return c; }

// L = sum(out ⊙ R): dL/dout = R.
template <typename T>
double weighted_loss(const Model<T>& m, const Mat<T>& tokens, const std::vector<Conditioning>& c, const Mat<T>& r) {
    return static_cast<double>(m.forward(tokens, c).cwiseProduct(r).sum());
}

struct GradCase {
    Model<double> model;
    Mat<double> tokens;
    std::vector<Conditioning> cond;
    Mat<double> r;
};

GradCase make_case(bool quantize, bool adaln_rms, uint64_t seed) {
    Rng rng(seed);
    const auto cfg = tiny_config(quantize, adaln_rms);
    Model<double> m(cfg, rng);
    randomize(m, rng);
    auto cond = conds({{17, 1, false}, {903, 2, true}});
    Mat<double> tokens = random_mat<double>(2 * cfg.tokens(), cfg.patch_dim(), rng);
    Mat<double> r = random_mat<double>(tokens.rows(), cfg.patch_dim(), rng);
    return {std::move(m), std::move(tokens), std::move(cond), std::move(r)};
}

}  // namespace

TEST_CASE("patchify shapes and inverse") {
    Rng rng(1);
    auto img = random_image<float>(3, 16, 16, rng);
    const Mat<float> tok = patchify(img, 2);
    CHECK(tok.rows() == 64);
    CHECK(tok.cols() == 12);
    const auto back = unpatchify(tok, 3, 16, 16, 2);
    CHECK(back.data == img.data);

    const Mat<float> px = patchify(img, 1);
    CHECK(px.rows() == 256);
    CHECK(px.cols() == 3);
    CHECK(px(5 * 16 + 7, 2) == img.at(2, 5, 7));

    CHECK_THROWS_AS(patchify(img, 3), DomainError);
    CHECK_THROWS_AS(unpatchify(tok, 3, 16, 16, 4), DomainError);
}

TEST_CASE("patch token layout is (row, col, channel)") {
    ImageT<float> img(2, 2, 2);
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) img.at(c, y, x) = static_cast<float>(100 * c + 10 * y + x);
    const Mat<float> tok = patchify(img, 2);
    REQUIRE(tok.rows() == 1);
    const std::vector<float> want{0, 100, 1, 101, 10, 110, 11, 111};
    for (int i = 0; i < 8; ++i) CHECK(tok(0, i) == want[i]);
}

TEST_CASE("sinusoidal embedding at t = 0") {
    const RowVec<double> e = sinusoidal_embedding<double>(0, 16);
    for (int i = 0; i < 8; ++i) {
        CHECK(e(i) == 1.0);
        CHECK(e(8 + i) == 0.0);
    }
}

TEST_CASE("timestep embedding: deterministic, distinct, range checked") {
    Rng rng(3);
    Model<float> m(ModelConfig{}, rng);
    CHECK(m.timestep_embedding(5) == m.timestep_embedding(5));
    CHECK(m.timestep_embedding(0) != m.timestep_embedding(999));
    CHECK_THROWS_AS(m.timestep_embedding(-1), DomainError);
    CHECK_THROWS_AS(m.timestep_embedding(1000), DomainError);
}

TEST_CASE("label embedding: null row, distinct rows, range") {
    Rng rng(4);
    ModelConfig cfg;
    Model<float> m(cfg, rng);
    CHECK(m.label_embedding(0, true) == m.label_embedding(5, true));
    CHECK(m.label_embedding(0, true) == RowVec<float>(m.y_table.value.row(cfg.num_classes)));
    std::set<std::vector<float>> rows;
    for (int l = 0; l < cfg.num_classes; ++l) {
        const RowVec<float> r = m.label_embedding(l, false);
        rows.insert(std::vector<float>(r.data(), r.data() + r.size()));
    }
    CHECK(rows.size() == static_cast<size_t>(cfg.num_classes));
    CHECK_NOTHROW(m.label_embedding(cfg.num_classes - 1, false));
    CHECK_THROWS_AS(m.label_embedding(cfg.num_classes, false), DomainError);
    CHECK_THROWS_AS(m.label_embedding(-1, false), DomainError);
}

TEST_CASE("rms_norm") {
    const RowVec<double> ones = RowVec<double>::Ones(8);
    CHECK(rel_err(rms_norm<double>(ones, ones, 1e-12), ones) < 1e-10);
    const RowVec<double> zero = RowVec<double>::Zero(8);
    CHECK(rms_norm<double>(zero, ones, 1e-5) == zero);

    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const RowVec<double> x = random_mat<double>(1, 64, rng, 3.0);
        const RowVec<double> y = rms_norm<double>(x, RowVec<double>::Ones(64), 1e-5);
        const double ms = y.squaredNorm() / 64;
        CHECK(ms == doctest::Approx(1.0).epsilon(1e-4));
    }
    CHECK_THROWS_AS(rms_norm<double>(ones, RowVec<double>::Ones(4), 1e-5), DomainError);
}

TEST_CASE("adaLN modulation is zero at init for both variants") {
    for (bool rms : {false, true}) {
        auto cfg = tiny_config(true, rms);
        Rng rng(6);
        Model<double> m(cfg, rng);
        const auto c = conds({{10, 1, false}, {500, 0, true}});
        const Mat<double> mod = m.adaln_modulation(0, m.condition(c));
        CHECK(mod.rows() == 2);
        CHECK(mod.cols() == 6 * cfg.hidden_dim);
        CHECK(mod.isZero(0.0));
    }
}

TEST_CASE("RMS adaLN output has mean-square gain^2 under a non-zero projection") {
    auto cfg = tiny_config(true, true);
    Rng rng(7);
    Model<double> m(cfg, rng);
    randomize(m, rng);
    m.blocks[0].adaln_norm.gain.value.setConstant(1.0);
    const auto c = conds({{10, 1, false}});
    const Mat<double> mod = m.adaln_modulation(0, m.condition(c));
    CHECK(mod.squaredNorm() / mod.size() == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("blocks are exact identities at adaLN-Zero init") {
    for (bool quant : {false, true}) {
        for (bool rms : {false, true}) {
            ModelConfig cfg;
            cfg.quantize_blocks = quant;
            cfg.adaln_rms = rms;
            Rng rng(8);
            Model<float> m(cfg, rng);
            const auto c = m.condition(conds({{0, 0, false}, {999, 7, true}}));
            const Mat<float> x = random_mat<float>(2 * cfg.tokens(), cfg.hidden_dim, rng);
            for (int i = 0; i < cfg.depth; ++i) CHECK(m.block_forward(i, x, c) == x);
        }
    }
}

TEST_CASE("at init the output is the final layer applied to embedded tokens") {
    ModelConfig cfg;
    Rng rng(9);
    Model<float> m(cfg, rng);
    // Final layer is zero-initialized; give it weights so the check is not vacuous.
    terdit::testing::fill_normal(m.final_linear.weight.value, rng, 0.1);
    terdit::testing::fill_normal(m.final_adaln.weight.value, rng, 0.1);
    Model<float> stripped = m;
    stripped.blocks.clear();
    auto img = random_image<float>(3, 16, 16, rng);
    CHECK(m.predict(img, 12, 3, false).data == stripped.predict(img, 12, 3, false).data);
}

TEST_CASE("block forward preserves shape and rejects mismatches") {
    auto cfg = tiny_config(true, true);
    Rng rng(10);
    Model<double> m(cfg, rng);
    randomize(m, rng);
    const auto c = m.condition(conds({{1, 1, false}}));
    const Mat<double> x = random_mat<double>(cfg.tokens(), cfg.hidden_dim, rng);
    const Mat<double> y = m.block_forward(0, x, c);
    CHECK(y.rows() == x.rows());
    CHECK(y.cols() == x.cols());
    CHECK_THROWS_AS(m.block_forward(0, Mat<double>(x.topRows(2)), c), DomainError);
    CHECK_THROWS_AS(m.block_forward(1, x, c), DomainError);
}

TEST_CASE("quantized and full-precision blocks differ for the same master weights") {
    auto qcfg = tiny_config(true, true);
    auto fcfg = tiny_config(false, true);
    Rng rng(11);
    Model<double> q(qcfg, rng);
    randomize(q, rng);
    Model<double> f(fcfg);
    std::map<std::string, Mat<double>> vals;
    q.for_each_param([&](const std::string& n, ParamRole, const Param<double>& p) { vals[n] = p.value; });
    f.for_each_param([&](const std::string& n, ParamRole, Param<double>& p) { p.value = vals.at(n); });
    const auto c = q.condition(conds({{3, 2, false}}));
    const Mat<double> x = random_mat<double>(qcfg.tokens(), qcfg.hidden_dim, rng);
    CHECK(rel_err(q.block_forward(0, x, c), f.block_forward(0, x, c)) > 1e-3);
}

TEST_CASE("model forward: shape, determinism, argument errors") {
    ModelConfig cfg;
    Rng rng(12);
    Model<float> m(cfg, rng);
    randomize(m, rng, 0.05);
    auto img = random_image<float>(3, 16, 16, rng);
    const auto a = m.predict(img, 400, 2, false);
    const auto b = m.predict(img, 400, 2, false);
    CHECK(a.channels == 3);
    CHECK(a.height == 16);
    CHECK(a.width == 16);
    CHECK(a.data == b.data);
    CHECK_THROWS_AS(m.predict(img, 1000, 2, false), DomainError);
    CHECK_THROWS_AS(m.predict(img, 3, 8, false), DomainError);
    CHECK_NOTHROW(m.predict(img, 3, 8, true));
    ImageT<float> wrong(3, 8, 8);
    CHECK_THROWS_AS(m.predict(wrong, 3, 1, false), DomainError);
}

TEST_CASE("batched forward equals per-sample forward bit-exactly") {
    ModelConfig cfg;
    Rng rng(13);
    Model<float> m(cfg, rng);
    randomize(m, rng, 0.05);
    std::vector<ImageT<float>> imgs;
    for (int i = 0; i < 3; ++i) imgs.push_back(random_image<float>(3, 16, 16, rng));
    const auto c = conds({{1, 0, false}, {500, 4, true}, {999, 7, false}});
    const auto batched = m.predict(imgs, c);
    for (int i = 0; i < 3; ++i) CHECK(batched[i].data == m.predict(imgs[i], c[i].timestep, c[i].label, c[i].drop).data);
}

TEST_CASE("ternary layer census") {
    for (bool quant : {false, true}) {
        auto cfg = tiny_config(quant, true);
        cfg.depth = 2;
        Rng rng(14);
        Model<float> m(cfg, rng);
        int ternary = 0;
        m.for_each_block_linear([&](const std::string&, Linear<float>& l) { ternary += l.ternary; });
        CHECK(ternary == (quant ? 16 : 0));
        for (const Linear<float>* l : {&m.x_embedder, &m.t_fc1, &m.t_fc2, &m.final_adaln, &m.final_linear})
            CHECK_FALSE(l->ternary);

        const auto specs = parameter_specs(cfg);
        size_t i = 0;
        m.for_each_param([&](const std::string& name, ParamRole role, const Param<float>& p) {
            REQUIRE(i < specs.size());
            CHECK(specs[i].name == name);
            CHECK(specs[i].role == role);
            CHECK(specs[i].numel() == static_cast<uint64_t>(p.value.size()));
            if (role == ParamRole::TernaryWeight || role == ParamRole::Alpha)
                CHECK(name.rfind("blocks.", 0) == 0);
            ++i;
        });
        CHECK(i == specs.size());
    }
}

TEST_CASE("alpha is initialized inside [0.5, 1.5] of the Xavier std") {
    ModelConfig cfg;
    Rng rng(15);
    Model<float> m(cfg, rng);
    m.for_each_block_linear([&](const std::string& name, Linear<float>& l) {
        const double sigma = std::sqrt(2.0 / (l.in + l.out));
        const double a = l.alpha.value(0, 0);
        CHECK_MESSAGE(a >= 0.5 * sigma * (1 - 1e-6), name);
        CHECK_MESSAGE(a <= 1.5 * sigma * (1 + 1e-6), name);
    });
}

TEST_CASE("full-precision gradients match finite differences") {
    for (bool rms : {false, true}) {
        auto gc = make_case(false, rms, 100 + rms);
        auto& m = gc.model;
        ForwardCache<double> cache;
        m.zero_grad();
        m.forward(gc.tokens, gc.cond, &cache);
        Mat<double> dtok;
        m.backward(cache, gc.r, &dtok);

        Rng pick(7);
        const double h = 1e-6;
        m.for_each_param([&](const std::string& name, ParamRole, Param<double>& p) {
            std::uniform_int_distribution<Eigen::Index> idx(0, p.value.size() - 1);
            const int samples = static_cast<int>(std::min<Eigen::Index>(p.value.size(), 12));
            Eigen::VectorXd an(samples), fd(samples);
            for (int s = 0; s < samples; ++s) {
                const Eigen::Index k = p.value.size() <= 12 ? s : idx(pick);
                const double orig = p.value.data()[k];
                p.value.data()[k] = orig + h;
                const double lp = weighted_loss(m, gc.tokens, gc.cond, gc.r);
                p.value.data()[k] = orig - h;
                const double lm = weighted_loss(m, gc.tokens, gc.cond, gc.r);
                p.value.data()[k] = orig;
                fd(s) = (lp - lm) / (2 * h);
                an(s) = p.grad.data()[k];
            }
            CHECK_MESSAGE(rel_err(an, fd, 1e-8) < 1e-3, name);
        });

        Eigen::VectorXd an(20), fd(20);
        for (int s = 0; s < 20; ++s) {
            const Eigen::Index k = (s * 37) % gc.tokens.size();
            const double orig = gc.tokens.data()[k];
            gc.tokens.data()[k] = orig + h;
            const double lp = weighted_loss(m, gc.tokens, gc.cond, gc.r);
            gc.tokens.data()[k] = orig - h;
            const double lm = weighted_loss(m, gc.tokens, gc.cond, gc.r);
            gc.tokens.data()[k] = orig;
            fd(s) = (lp - lm) / (2 * h);
            an(s) = dtok.data()[k];
        }
        CHECK(rel_err(an, fd) < 1e-3);
    }
}

TEST_CASE("ternary gradients: activations and alpha match finite differences") {
    auto gc = make_case(true, true, 200);
    auto& m = gc.model;
    ForwardCache<double> cache;
    m.zero_grad();
    m.forward(gc.tokens, gc.cond, &cache);
    Mat<double> dtok;
    m.backward(cache, gc.r, &dtok);
    const double h = 1e-6;

    Eigen::VectorXd an(24), fd(24);
    for (int s = 0; s < 24; ++s) {
        const Eigen::Index k = (s * 53) % gc.tokens.size();
        const double orig = gc.tokens.data()[k];
        gc.tokens.data()[k] = orig + h;
        const double lp = weighted_loss(m, gc.tokens, gc.cond, gc.r);
        gc.tokens.data()[k] = orig - h;
        const double lm = weighted_loss(m, gc.tokens, gc.cond, gc.r);
        gc.tokens.data()[k] = orig;
        fd(s) = (lp - lm) / (2 * h);
        an(s) = dtok.data()[k];
    }
    CHECK(rel_err(an, fd) < 1e-3);

    m.for_each_block_linear([&](const std::string& name, Linear<double>& l) {
        const double orig = l.alpha.value(0, 0);
        l.alpha.value(0, 0) = orig + h;
        const double lp = weighted_loss(m, gc.tokens, gc.cond, gc.r);
        l.alpha.value(0, 0) = orig - h;
        const double lm = weighted_loss(m, gc.tokens, gc.cond, gc.r);
        l.alpha.value(0, 0) = orig;
        const double f = (lp - lm) / (2 * h);
        CHECK_MESSAGE(std::abs(l.alpha.grad(0, 0) - f) <= 1e-3 * std::max(1e-8, std::abs(f)), name);
    });
}

TEST_CASE("ternary master-weight gradients equal gradients of the effective weights") {
    auto gc = make_case(true, true, 300);
    auto& q = gc.model;
    // Full-precision twin whose block weights are the ternary effective weights.
    Model<double> f(tiny_config(false, true));
    std::map<std::string, Mat<double>> vals;
    q.for_each_param([&](const std::string& n, ParamRole, const Param<double>& p) { vals[n] = p.value; });
    f.for_each_param([&](const std::string& n, ParamRole, Param<double>& p) { p.value = vals.at(n); });
    std::vector<Mat<double>> eff;
    q.for_each_block_linear([&](const std::string&, Linear<double>& l) {
        eff.push_back(quant::ternarize(l.weight.value, l.alpha.value(0, 0)).effective<double>());
    });
    size_t i = 0;
    f.for_each_block_linear([&](const std::string&, Linear<double>& l) { l.weight.value = eff[i++]; });

    ForwardCache<double> cq, cf;
    q.zero_grad();
    f.zero_grad();
    CHECK(q.forward(gc.tokens, gc.cond, &cq) == f.forward(gc.tokens, gc.cond, &cf));
    q.backward(cq, gc.r);
    f.backward(cf, gc.r);
    std::vector<Mat<double>> fg;
    f.for_each_block_linear([&](const std::string&, Linear<double>& l) { fg.push_back(l.weight.grad); });
    i = 0;
    q.for_each_block_linear([&](const std::string& name, Linear<double>& l) {
        CHECK_MESSAGE(l.weight.grad == fg[i], name);
        ++i;
    });
}

TEST_CASE("backward requires a cache from a cached forward") {
    auto gc = make_case(false, true, 400);
    ForwardCache<double> empty;
    CHECK_THROWS_AS(gc.model.backward(empty, gc.r), DomainError);
}

TEST_CASE("master checkpoint round-trips the model exactly") {
    ModelConfig cfg;
    Rng rng(16);
    Model<float> m(cfg, rng);
    randomize(m, rng, 0.1);
    const auto ck = to_checkpoint(m);
    const auto bytes = pack::serialize(ck);
    const Model<float> back = from_checkpoint(pack::deserialize(bytes));
    CHECK(back.config() == cfg);
    CHECK(pack::serialize(to_checkpoint(back)) == bytes);
}

TEST_CASE("packed model forward equals quantized master forward bit-exactly") {
    ModelConfig cfg;
    Rng rng(17);
    Model<float> m(cfg, rng);
    randomize(m, rng, 0.05);
    const auto packed_ck = pack_checkpoint(to_checkpoint(m));
    CHECK(packed_ck.has_packed());
    const Model<float> p = from_checkpoint(pack::deserialize(pack::serialize(packed_ck)));
    CHECK(p.is_packed());
    CHECK_FALSE(m.is_packed());
    auto img = random_image<float>(3, 16, 16, rng);
    CHECK(p.predict(img, 250, 5, false).data == m.predict(img, 250, 5, false).data);
    CHECK(p.predict(img, 7, 0, true).data == m.predict(img, 7, 0, true).data);
}

TEST_CASE("pack_checkpoint rejects packed and full-precision inputs") {
    ModelConfig cfg;
    Rng rng(18);
    Model<float> m(cfg, rng);
    const auto packed_ck = pack_checkpoint(to_checkpoint(m));
    CHECK_THROWS_AS(pack_checkpoint(packed_ck), DomainError);

    cfg.quantize_blocks = false;
    Model<float> fp(cfg, rng);
    CHECK_THROWS_AS(pack_checkpoint(to_checkpoint(fp)), DomainError);
}

TEST_CASE("from_checkpoint rejects missing, extra and misshapen tensors") {
    auto cfg = tiny_config(true, true);
    Rng rng(19);
    Model<float> m(cfg, rng);
    auto ck = to_checkpoint(m);

    auto missing = ck;
    missing.tensors.pop_back();
    CHECK_THROWS_AS(from_checkpoint(missing), DomainError);

    auto extra = ck;
    extra.tensors.push_back(pack::make_dense("stray", {1}, {0.f}));
    CHECK_THROWS_AS(from_checkpoint(extra), DomainError);

    auto shaped = ck;
    shaped.tensors[0] = pack::make_dense(shaped.tensors[0].name, {shaped.tensors[0].numel()}, shaped.tensors[0].dense().values);
    CHECK_THROWS_AS(from_checkpoint(shaped), DomainError);

    auto badcfg = ck;
    badcfg.config_text += "hidden_dim=15\n";
    CHECK_THROWS_AS(from_checkpoint(badcfg), ConfigError);
}

TEST_CASE("model_cast preserves values") {
    auto cfg = tiny_config(true, false);
    Rng rng(20);
    Model<float> m(cfg, rng);
    randomize(m, rng);
    const Model<double> d = model_cast<double>(m);
    const Model<float> back = model_cast<float>(d);
    CHECK(pack::serialize(to_checkpoint(back)) == pack::serialize(to_checkpoint(m)));
}

TEST_CASE("modulation sites") {
    CHECK(site_name(ModSite::ScaleMlp) == "scale_mlp");
    CHECK(parse_site("gate_msa") == ModSite::GateMsa);
    CHECK_THROWS_AS(parse_site("scale"), DomainError);
}
