#include "test_support.hpp"

#include <doctest.h>

#include "terdit/diffusion.hpp"

#include <cmath>
#include <cstring>
#include <limits>

using namespace terdit;
using namespace terdit::diffusion;
using terdit::testing::randomize;
using terdit::testing::tiny_config;

namespace {

// Deterministic stand-in for a denoiser whose conditional and unconditional outputs differ.
struct FakePredictor {
    int* calls = nullptr;
    int* images = nullptr;

    std::vector<Image> operator()(std::span<const Image> x, std::span<const Conditioning> c) const {
        if (calls) ++*calls;
        if (images) *images += static_cast<int>(x.size());
        std::vector<Image> out;
        for (size_t i = 0; i < x.size(); ++i) {
            Image e = x[i];
            const float k = c[i].drop ? 0.3f : 0.7f + 0.01f * static_cast<float>(c[i].label);
            for (auto& v : e.data) v = k * v + 1e-4f * static_cast<float>(c[i].timestep);
            out.push_back(std::move(e));
        }
        return out;
    }
};

bool same_bits(const std::vector<Image>& a, const std::vector<Image>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].data.size() != b[i].data.size()) return false;
        if (std::memcmp(a[i].data.data(), b[i].data.data(), a[i].data.size() * sizeof(float)) != 0) return false;
    }
    return true;
}

dit::Model<float> random_model(bool rms, uint64_t seed) {
    Rng rng(seed);
    dit::Model<float> m(tiny_config(true, rms), rng);
    randomize(m, rng, 0.2);
    return m;
}

}  // namespace

TEST_CASE("linear beta schedule") {
    const NoiseSchedule s;
    CHECK(s.steps() == 1000);
    CHECK(s.beta(0) == 1e-4);
    CHECK(s.beta(999) == doctest::Approx(2e-2).epsilon(1e-14));
    CHECK(s.alpha_bar(0) == 1.0 - 1e-4);
    double prod = 1.0;
    for (int t = 0; t < 1000; ++t) {
        prod *= 1.0 - s.beta(t);
        REQUIRE(s.alpha_bar(t) == doctest::Approx(prod).epsilon(1e-12));
        if (t > 0) REQUIRE(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
    CHECK(s.alpha_bar(999) == doctest::Approx(4.0358e-5).epsilon(1e-3));
    CHECK_THROWS_AS(s.beta(1000), DomainError);
    CHECK_THROWS_AS(s.alpha_bar(-1), DomainError);
    CHECK_THROWS_AS(NoiseSchedule(0), DomainError);
    CHECK_THROWS_AS(NoiseSchedule(10, 0.5, 0.1), DomainError);
}

TEST_CASE("q_sample closed form and Monte-Carlo moments") {
    const NoiseSchedule s;
    Image x0(1, 1, 1), z(1, 1, 1);
    x0.data[0] = 0.6f;
    z.data[0] = -1.25f;
    const int t = 400;
    const double expect = std::sqrt(s.alpha_bar(t)) * 0.6 + std::sqrt(1 - s.alpha_bar(t)) * -1.25;
    CHECK(q_sample(s, x0, t, z).data[0] == doctest::Approx(expect).epsilon(1e-6));
    CHECK(q_sample(s, image_cast<double>(x0), t, image_cast<double>(z)).data[0] ==
          doctest::Approx(expect).epsilon(1e-7));

    for (int tt : {0, 250, 999}) {
        Rng rng(static_cast<uint64_t>(tt) + 7);
        const int n = 20000;
        double sum = 0, sq = 0;
        for (int i = 0; i < n; ++i) {
            const auto noise = standard_normal_image(1, 1, 1, rng);
            const double v = q_sample(s, image_cast<double>(x0), tt, image_cast<double>(noise)).data[0];
            sum += v;
            sq += v * v;
        }
        const double mean = sum / n;
        const double var = sq / n - mean * mean;
        const double mu = std::sqrt(s.alpha_bar(tt)) * 0.6;
        const double sigma2 = 1 - s.alpha_bar(tt);
        CHECK(std::abs(mean - mu) < 3 * std::sqrt(sigma2 / n));
        CHECK(std::abs(var - sigma2) < 3 * sigma2 * std::sqrt(2.0 / (n - 1)));
    }
    CHECK_THROWS_AS(q_sample(s, Image(1, 2, 2), 0, Image(1, 2, 1)), DomainError);
}

TEST_CASE("cfg_combine") {
    CHECK(cfg_combine(0.3, -7.0, 1.0) == 0.3);
    CHECK(cfg_combine(0.3, -7.0, 0.0) == -7.0);
    CHECK(cfg_combine(1.0, 0.0, 4.0) == 4.0);
    CHECK(cfg_combine(2.0, 1.0, 4.0) == doctest::Approx(1.0 + 4.0 * (2.0 - 1.0)));

    Rng rng(1);
    const auto c = standard_normal_image(3, 4, 4, rng);
    const auto u = standard_normal_image(3, 4, 4, rng);
    CHECK(cfg_combine(c, u, 1.0).data == c.data);
    CHECK(cfg_combine(c, u, 0.0).data == u.data);
    CHECK_THROWS_AS(cfg_combine(c, Image(3, 4, 2), 2.0), DomainError);
}

TEST_CASE("strided sampling timesteps") {
    const auto ts = sampling_timesteps(1000, 250);
    REQUIRE(ts.size() == 250);
    CHECK(ts.front() == 996);
    CHECK(ts.back() == 0);
    for (size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] == ts[i - 1] - 4);

    const auto all = sampling_timesteps(1000, 1000);
    CHECK(all.front() == 999);
    CHECK(all.back() == 0);
    CHECK(sampling_timesteps(1000, 1) == std::vector<int>{0});
    const auto odd = sampling_timesteps(10, 3);
    CHECK(odd == std::vector<int>{6, 3, 0});
    CHECK_THROWS_AS(sampling_timesteps(1000, 0), DomainError);
    CHECK_THROWS_AS(sampling_timesteps(1000, 1001), DomainError);
}

TEST_CASE("sampler makes two evaluations per step with guidance and one without") {
    const NoiseSchedule s;
    const std::vector<int> labels{0, 1, 2};
    for (bool guidance : {true, false}) {
        int calls = 0, images = 0;
        SamplerOptions opt{25, 3.0, guidance};
        Rng rng(4);
        ddpm_sample(FakePredictor{&calls, &images}, s, labels, 3, 4, 4, opt, rng);
        CHECK(calls == (guidance ? 50 : 25));
        CHECK(images == calls * 3);
    }
}

TEST_CASE("scale 1 reproduces conditional-only sampling bit-exactly") {
    const NoiseSchedule s;
    const std::vector<int> labels{2, 0};
    Rng a(9), b(9);
    const auto guided = ddpm_sample(FakePredictor{}, s, labels, 3, 4, 4, {40, 1.0, true}, a);
    const auto cond = ddpm_sample(FakePredictor{}, s, labels, 3, 4, 4, {40, 1.0, false}, b);
    CHECK(same_bits(guided, cond));

    const auto model = random_model(true, 3);
    Rng c(5), d(5);
    const auto g2 = ddpm_sample(model_predictor(model), s, labels, 3, 4, 4, {20, 1.0, true}, c);
    const auto c2 = ddpm_sample(model_predictor(model), s, labels, 3, 4, 4, {20, 1.0, false}, d);
    CHECK(same_bits(g2, c2));

    Rng e(5);
    const auto g4 = ddpm_sample(model_predictor(model), s, labels, 3, 4, 4, {20, 4.0, true}, e);
    CHECK(!same_bits(g4, c2));
}

TEST_CASE("sampling is reproducible under a seed and finite at high guidance") {
    const NoiseSchedule s;
    const auto model = random_model(false, 8);
    const std::vector<int> labels{1, 1, 2};
    Rng a(17), b(17), c(18);
    const auto x = ddpm_sample(model_predictor(model), s, labels, 3, 4, 4, {30, 10.0, true}, a);
    const auto y = ddpm_sample(model_predictor(model), s, labels, 3, 4, 4, {30, 10.0, true}, b);
    const auto z = ddpm_sample(model_predictor(model), s, labels, 3, 4, 4, {30, 10.0, true}, c);
    CHECK(same_bits(x, y));
    CHECK(!same_bits(x, z));
    for (const auto& img : x)
        for (float v : img.data) {
            REQUIRE(std::isfinite(v));
            REQUIRE(std::abs(v) <= 1.0f);
        }
}

TEST_CASE("final step returns the clamped clean estimate without noise") {
    const NoiseSchedule s;
    auto zero = [](std::span<const Image> x, std::span<const Conditioning>) {
        std::vector<Image> out;
        for (const auto& i : x) out.emplace_back(i.channels, i.height, i.width);
        return out;
    };
    Rng a(3), b(3);
    const auto out = ddpm_sample(zero, s, std::vector<int>{0}, 1, 3, 3, {1, 1.0, false}, a);
    const auto xt = standard_normal_image(1, 3, 3, b);
    for (size_t i = 0; i < xt.data.size(); ++i) {
        const double x0 = std::clamp(xt.data[i] / std::sqrt(s.alpha_bar(0)), -1.0, 1.0);
        CHECK(out[0].data[i] == static_cast<float>(x0));
    }
}

TEST_CASE("sampler argument errors") {
    const NoiseSchedule s;
    Rng rng(1);
    CHECK_THROWS_AS(ddpm_sample(FakePredictor{}, s, std::vector<int>{0}, 1, 2, 2, {10, 0.5, true}, rng), DomainError);
    CHECK_THROWS_AS(ddpm_sample(FakePredictor{}, s, std::vector<int>{0}, 1, 2, 2,
                                {10, std::numeric_limits<double>::infinity(), true}, rng),
                    DomainError);
    CHECK_THROWS_AS(ddpm_sample(FakePredictor{}, s, std::vector<int>{}, 1, 2, 2, {}, rng), DomainError);
    CHECK_THROWS_AS(ddpm_sample(FakePredictor{}, s, std::vector<int>{0}, 1, 2, 2, {0, 4.0, true}, rng), DomainError);
    auto short_batch = [](std::span<const Image>, std::span<const Conditioning>) { return std::vector<Image>{}; };
    CHECK_THROWS_AS(ddpm_sample(short_batch, s, std::vector<int>{0}, 1, 2, 2, {5, 4.0, true}, rng), DomainError);
}

TEST_CASE("training example draws t, then the drop flag, then noise") {
    const NoiseSchedule s;
    Rng rng(12), ref(12);
    Image x0(3, 4, 4);
    for (auto& v : x0.data) v = 0.5f;
    const auto ex = draw_training_example(s, x0, 2, 0.5, rng);

    const int t = std::uniform_int_distribution<int>(0, 999)(ref);
    const bool drop = std::bernoulli_distribution(0.5)(ref);
    const auto noise = standard_normal_image(3, 4, 4, ref);
    CHECK(ex.cond.timestep == t);
    CHECK(ex.cond.drop == drop);
    CHECK(ex.cond.label == 2);
    CHECK(ex.noise.data == noise.data);
    CHECK(ex.x_t.data == q_sample(s, x0, t, noise).data);

    Rng never(1), always(1);
    for (int i = 0; i < 50; ++i) {
        CHECK(!draw_training_example(s, x0, 0, 0.0, never).cond.drop);
        CHECK(draw_training_example(s, x0, 0, 1.0, always).cond.drop);
    }
    CHECK_THROWS_AS(draw_training_example(s, x0, 0, 1.5, rng), DomainError);
}

TEST_CASE("training loss is the mean squared noise error") {
    const NoiseSchedule s;
    Image x0(3, 4, 4);
    auto zero = [](std::span<const Image> x, std::span<const Conditioning>) {
        return std::vector<Image>{Image(x[0].channels, x[0].height, x[0].width)};
    };
    Rng a(2), b(2);
    const double loss = training_loss(zero, s, x0, 0, 0.1, a);
    const auto ex = draw_training_example(s, x0, 0, 0.1, b);
    double ms = 0;
    for (float v : ex.noise.data) ms += static_cast<double>(v) * v;
    CHECK(loss == doctest::Approx(ms / static_cast<double>(ex.noise.data.size())).epsilon(1e-12));
}

TEST_CASE("PPM encoding") {
    Image img(3, 1, 2);
    img.at(0, 0, 0) = -1.0f;
    img.at(1, 0, 0) = 0.0f;
    img.at(2, 0, 0) = 1.0f;
    img.at(0, 0, 1) = 5.0f;
    img.at(1, 0, 1) = std::numeric_limits<float>::quiet_NaN();
    img.at(2, 0, 1) = -5.0f;
    const auto bytes = encode_ppm(img);
    const std::string header = "P6\n2 1\n255\n";
    REQUIRE(bytes.size() == header.size() + 6);
    CHECK(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())) == header);
    const std::vector<uint8_t> px(bytes.begin() + static_cast<long>(header.size()), bytes.end());
    CHECK(px == std::vector<uint8_t>{0, 128, 255, 255, 128, 0});

    Image gray(1, 1, 1);
    gray.data[0] = 1.0f;
    const auto g = encode_ppm(gray);
    CHECK(std::vector<uint8_t>(g.end() - 3, g.end()) == std::vector<uint8_t>{255, 255, 255});
    CHECK_THROWS_AS(encode_ppm(Image(2, 1, 1)), DomainError);
}
