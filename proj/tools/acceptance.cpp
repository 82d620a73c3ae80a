// Acceptance checks 1-10. One PASS/FAIL line per criterion; exit status 0 only if all pass.

#include "cli.hpp"

#include "terdit/bitpack.hpp"
#include "terdit/checkpoint.hpp"
#include "terdit/diagnostics.hpp"
#include "terdit/diffusion.hpp"
#include "terdit/dit.hpp"
#include "terdit/linear_kernel.hpp"
#include "terdit/ternary_quant.hpp"
#include "terdit/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

using namespace terdit;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void expect(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

struct Options {
    uint64_t seed = 0;
    int batch = 8;
    int64_t steps = 5000;
    int sample_steps = 250;
    fs::path out;
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

template <typename T>
Mat<T> normal_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double std = 1.0) {
    Mat<T> m(r, c);
    std::normal_distribution<double> n(0.0, std);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
    return m;
}

std::vector<int8_t> random_trits(size_t n, Rng& rng) {
    std::uniform_int_distribution<int> d(-1, 1);
    std::vector<int8_t> v(n);
    for (auto& x : v) x = static_cast<int8_t>(d(rng));
    return v;
}

std::vector<int8_t> codes_of(const quant::TernaryTensor& t) { return {t.codes().begin(), t.codes().end()}; }

template <typename T>
void randomize(dit::Model<T>& m, Rng& rng, double std) {
    m.for_each_param([&](const std::string&, dit::ParamRole role, dit::Param<T>& p) {
        std::normal_distribution<double> n(0.0, std);
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(n(rng));
        if (role == dit::ParamRole::Alpha || role == dit::ParamRole::Gain) p.value = p.value.cwiseAbs().array() + T(0.5);
    });
}

dit::ModelConfig hidden16(bool quantize, bool rms) {
    dit::ModelConfig c;
    c.image_size = 4;
    c.patch_size = 2;
    c.hidden_dim = 16;
    c.depth = 1;
    c.num_heads = 2;
    c.num_classes = 3;
    c.quantize_blocks = quantize;
    c.adaln_rms = rms;
    return c;
}

bool same_bits(const std::vector<Image>& a, const std::vector<Image>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].data.size() != b[i].data.size() ||
            std::memcmp(a[i].data.data(), b[i].data.data(), a[i].data.size() * sizeof(float)) != 0)
            return false;
    return true;
}

// ---- 1 -------------------------------------------------------------------------

Outcome quantizer_exactness() {
    Outcome o;
    using quant::round_clip;
    Mat<double> m(2, 2);
    m << 1, -1, 0.5, -0.5;
    o.expect(quant::absmean_gamma(m) == 0.75, "absmean [[1,-1],[0.5,-0.5]]");
    o.expect(quant::absmean_gamma(Mat<double>::Zero(3, 3).eval()) == 0.0, "absmean zero");
    o.expect(quant::absmean_gamma(Mat<double>::Constant(1, 1, 2.0).eval()) == 2.0, "absmean [[2]]");
    o.expect(round_clip(1.33, -1, 1) == 1 && round_clip(-0.4, -1, 1) == 0 && round_clip(-2.63, -1, 1) == -1 &&
                 round_clip(0.5, -1, 1) == 1,
             "round_clip examples");

    Mat<double> w(2, 2);
    w << 0.9, -0.1, 0.05, -2.0;
    const auto t = quant::ternarize(w, 2.0);
    Mat<double> wt(2, 2);
    wt << 2, 0, 0, -2;
    o.expect(std::abs(quant::absmean_gamma(w) - 0.7625) < 1e-15, "gamma 0.7625");
    o.expect(codes_of(t) == std::vector<int8_t>{1, 0, 0, -1} && t.effective<double>() == wt, "ternarize example");
    o.expect(codes_of(quant::ternarize(Mat<double>::Zero(3, 3).eval(), 5.0)) == std::vector<int8_t>(9, 0),
             "zero matrix");
    for (double c : {0.1, 1.0, 10.0})
        o.expect(codes_of(quant::ternarize(Mat<double>::Constant(3, 3, c).eval(), 1.0)) == std::vector<int8_t>(9, 1),
                 "constant matrix");
    Mat<double> g(2, 2);
    g << 1, 2, 3, 4;
    const auto ste = quant::ste_backward(g, t);
    o.expect(ste.grad_w == g && ste.grad_alpha == -3.0, "ste example");

    Rng rng(101);
    std::uniform_int_distribution<int> dim(1, 16);
    std::uniform_real_distribution<double> logscale(-3, 3), alpha(0.01, 5), scale(-2, 2);
    int codomain = 0, sign = 0, equiv = 0, equiv_checked = 0;
    const int n = 10000;
    for (int trial = 0; trial < n; ++trial) {
        const Mat<double> x = normal_mat<double>(dim(rng), dim(rng), rng, std::pow(10.0, logscale(rng)));
        const auto q = quant::ternarize(x, alpha(rng));
        const double gamma = quant::absmean_gamma(x);
        bool ok_dom = true, ok_sign = true, near_tie = false;
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            const int c = q.codes()[i];
            ok_dom = ok_dom && (c == -1 || c == 0 || c == 1);
            ok_sign = ok_sign && (c == 0 || (c > 0) == (x.data()[i] > 0));
            near_tie = near_tie || std::abs(std::abs(x.data()[i]) / gamma - 0.5) < 1e-3;
        }
        codomain += ok_dom;
        sign += ok_sign;
        const double s = std::pow(10.0, scale(rng));
        if (near_tie || gamma * s < 1e-2) continue;
        ++equiv_checked;
        equiv += codes_of(quant::ternarize(Mat<double>(x * s), 1.0)) == codes_of(q);
    }
    o.expect(codomain == n, "codomain");
    o.expect(sign == n, "sign preservation");
    o.expect(equiv == equiv_checked && equiv_checked > n / 2, "scale equivariance");
    o.detail << "worked examples ok; " << n << " random matrices: codomain " << codomain << "/" << n << ", sign " << sign
             << "/" << n << ", scale-equivariance " << equiv << "/" << equiv_checked;
    return o;
}

// ---- 2 -------------------------------------------------------------------------

// L = sum(out * R) over a batch of two samples; returns max relative error over the checked vectors.
double model_fd_error(const dit::ModelConfig& cfg, uint64_t seed, bool skip_ternary_weights) {
    Rng rng(seed);
    dit::Model<double> m(cfg, rng);
    randomize(m, rng, 0.3);
    const std::vector<Conditioning> cond{{37, 1, false}, {811, 0, true}};
    const Mat<double> tokens = normal_mat<double>(2 * cfg.tokens(), cfg.patch_dim(), rng);
    const Mat<double> r = normal_mat<double>(tokens.rows(), tokens.cols(), rng);
    auto loss = [&](const Mat<double>& tok) { return m.forward(tok, cond).cwiseProduct(r).sum(); };

    dit::ForwardCache<double> cache;
    m.forward(tokens, cond, &cache);
    m.zero_grad();
    Mat<double> dtok;
    m.backward(cache, r, &dtok);

    const double h = 1e-6;
    double worst = 0.0;
    auto vec_err = [](const Mat<double>& a, const Mat<double>& b) {
        return (a - b).norm() / std::max(b.norm(), 1e-10);
    };
    std::vector<std::pair<Mat<double>, Mat<double>>> pairs;
    m.for_each_param([&](const std::string&, dit::ParamRole role, dit::Param<double>& p) {
        if (skip_ternary_weights && role == dit::ParamRole::TernaryWeight) return;
        Mat<double> fd(p.value.rows(), p.value.cols());
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            const double v = p.value.data()[i];
            p.value.data()[i] = v + h;
            const double lp = loss(tokens);
            p.value.data()[i] = v - h;
            const double lm = loss(tokens);
            p.value.data()[i] = v;
            fd.data()[i] = (lp - lm) / (2 * h);
        }
        if (fd.norm() > 1e-9 || p.grad.norm() > 1e-9) worst = std::max(worst, vec_err(p.grad, fd));
    });
    Mat<double> fdx(tokens.rows(), tokens.cols());
    for (Eigen::Index i = 0; i < tokens.size(); ++i) {
        Mat<double> a = tokens, b = tokens;
        a.data()[i] += h;
        b.data()[i] -= h;
        fdx.data()[i] = (loss(a) - loss(b)) / (2 * h);
    }
    return std::max(worst, vec_err(dtok, fdx));
}

Outcome gradient_fidelity() {
    Outcome o;
    Rng rng(202);
    double worst_alpha = 0.0, worst_x = 0.0;
    bool ste_bitwise = true;
    for (int trial = 0; trial < 100; ++trial) {
        const Mat<double> w = normal_mat<double>(8, 6, rng);
        const Mat<double> x = normal_mat<double>(4, 6, rng);
        const Mat<double> r = normal_mat<double>(4, 8, rng);
        const double alpha = 0.1 + std::abs(normal_mat<double>(1, 1, rng)(0, 0));
        const auto t = quant::ternarize(w, alpha);
        const Mat<double> codes = t.effective<double>() / alpha;
        auto loss = [&](double a, const Mat<double>& xx) { return (xx * (a * codes).transpose()).cwiseProduct(r).sum(); };
        const Mat<double> gw = r.transpose() * x;
        const auto ste = quant::ste_backward(gw, t);
        ste_bitwise = ste_bitwise && std::memcmp(ste.grad_w.data(), gw.data(), sizeof(double) * gw.size()) == 0;
        const double h = 1e-5;
        const double fd = (loss(alpha + h, x) - loss(alpha - h, x)) / (2 * h);
        worst_alpha = std::max(worst_alpha, std::abs(ste.grad_alpha - fd) / std::max(std::abs(fd), 1e-10));
        const Mat<double> gx = r * t.effective<double>();
        Mat<double> fdx(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            Mat<double> a = x, b = x;
            a.data()[i] += h;
            b.data()[i] -= h;
            fdx.data()[i] = (loss(alpha, a) - loss(alpha, b)) / (2 * h);
        }
        worst_x = std::max(worst_x, (gx - fdx).norm() / std::max(fdx.norm(), 1e-10));
    }
    o.expect(worst_alpha < 1e-4, "alpha gradient");
    o.expect(worst_x < 1e-4, "input gradient");
    o.expect(ste_bitwise, "STE identity");

    const double fp_rms = model_fd_error(hidden16(false, true), 1, false);
    const double fp_plain = model_fd_error(hidden16(false, false), 2, false);
    const double tern = model_fd_error(hidden16(true, true), 3, true);
    const double worst_model = std::max({fp_rms, fp_plain, tern});
    o.expect(worst_model < 1e-3, "full-model finite differences");
    o.detail << "linear: alpha rel " << fmt(worst_alpha, 2) << ", input rel " << fmt(worst_x, 2)
             << ", STE bitwise " << (ste_bitwise ? "yes" : "no") << "; model rel err: fp+rms " << fmt(fp_rms, 2)
             << ", fp " << fmt(fp_plain, 2) << ", ternary+rms (non-STE params, input) " << fmt(tern, 2);
    return o;
}

// ---- 3 -------------------------------------------------------------------------

Outcome packing_bijection() {
    Outcome o;
    int tuples = 0;
    for (int k = 0; k < 81; ++k) {
        std::vector<int8_t> v(4);
        int r = k;
        for (auto& x : v) {
            x = static_cast<int8_t>(r % 3 - 1);
            r /= 3;
        }
        const auto p = pack::pack(v);
        uint8_t want = 0;
        for (int i = 0; i < 4; ++i) want = static_cast<uint8_t>(want | ((v[i] + 1) << (6 - 2 * i)));
        tuples += p.payload.size() == 1 && p.payload[0] == want && pack::unpack(p.payload, 4) == v;
    }
    o.expect(tuples == 81, "81 tuples");

    int rejected = 0, invalid = 0;
    for (int b = 0; b < 256; ++b) {
        bool has3 = false;
        for (int i = 0; i < 4; ++i) has3 = has3 || ((b >> (2 * i)) & 3) == 3;
        if (!has3) continue;
        ++invalid;
        try {
            pack::unpack(std::vector<uint8_t>{static_cast<uint8_t>(b)}, 4);
        } catch (const pack::FormatError& e) {
            rejected += e.kind() == pack::FormatError::Kind::Corrupt;
        }
    }
    o.expect(rejected == invalid, "field value 3 rejected");

    Rng rng(303);
    std::uniform_int_distribution<int> dim(1, 48);
    int round_trips = 0;
    const int n = 10000;
    for (int trial = 0; trial < n; ++trial) {
        const size_t r = dim(rng), c = dim(rng);
        const float alpha = static_cast<float>(0.01 + std::abs(normal_mat<double>(1, 1, rng)(0, 0)));
        const quant::TernaryTensor t(r, c, random_trits(r * c, rng), alpha);
        const auto back = pack::to_ternary(pack::pack_tensor(t));
        round_trips += codes_of(back) == codes_of(t) && back.alpha() == t.alpha() && back.rows() == r && back.cols() == c;
    }
    o.expect(round_trips == n, "random tensors");

    double worst = 0.0;
    int exact = 0;
    const int m = 1000;
    for (int trial = 0; trial < m; ++trial) {
        const size_t out = dim(rng), in = dim(rng), rows = dim(rng) % 7 + 1;
        const double alpha = 0.01 + std::abs(normal_mat<double>(1, 1, rng)(0, 0));
        const quant::TernaryTensor t(out, in, random_trits(out * in, rng), alpha);
        const auto p = pack::pack_tensor(t);
        const Mat<float> x = normal_mat<float>(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in), rng);
        const Mat<float> bias = normal_mat<float>(1, static_cast<Eigen::Index>(out), rng);
        const Mat<float> y = pack::packed_linear<float>(x, p, bias.data());

        Mat<double> ref = x.cast<double>() * (static_cast<double>(p.alpha) * t.effective<double>() / alpha).transpose();
        ref.rowwise() += RowVec<double>(bias.cast<double>());
        worst = std::max(worst, (y.cast<double>() - ref).norm() / std::max(ref.norm(), 1e-12));

        // dense weights through the same accumulation order
        const Mat<float> dense = t.effective<float>() * (p.alpha / static_cast<float>(alpha));
        const auto panels = kernel::make_panels<float>(out, in, [&](size_t j, size_t k) {
            return dense(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k));
        });
        Mat<float> yd(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out));
        kernel::linear_forward<float>(x.data(), rows, in, in, panels, out, bias.data(), yd.data(), out);
        exact += std::memcmp(y.data(), yd.data(), sizeof(float) * y.size()) == 0;
    }
    o.expect(worst <= 1e-5, "packed_linear vs oracle");
    o.expect(exact == m, "packed_linear bit-exact vs dense path");
    o.detail << "81/81 tuples, " << rejected << "/" << invalid << " invalid bytes rejected, " << round_trips << "/" << n
             << " tensors round-trip; packed_linear rel err " << fmt(worst, 2) << ", bit-exact vs dense path " << exact
             << "/" << m;
    return o;
}

// ---- 4 -------------------------------------------------------------------------

Outcome checkpoint_ratio(const Options& opt) {
    Outcome o;
    Rng rng(opt.seed);
    const dit::Model<float> m(dit::ModelConfig{}, rng);
    const auto master = dit::to_checkpoint(m);
    const auto dense_bytes = pack::serialize(master).size();
    const auto packed_bytes = pack::serialize(dit::pack_checkpoint(master)).size();
    const double toy = static_cast<double>(dense_bytes) / static_cast<double>(packed_bytes);
    const auto xl = diag::size_report(diag::dit_xl2_config());
    o.expect(toy >= 8.0, "toy ratio >= 8");
    o.expect(xl.ratio() >= 10.0 && xl.ratio() <= 16.0, "XL/2 ratio in [10, 16]");
    o.detail << "toy serialized " << dense_bytes << " -> " << packed_bytes << " bytes (" << fmt(toy) << "x); XL/2-shaped "
             << diag::format_bytes(xl.fp_bytes) << " -> " << diag::format_bytes(xl.packed_bytes) << " (" << fmt(xl.ratio())
             << "x, " << xl.total_params << " params)";
    return o;
}

// ---- 5 -------------------------------------------------------------------------

Outcome pilot(const Options& opt) {
    Outcome o;
    const auto r = diag::activation_pilot(opt.seed);
    o.expect(r.ternary.stats.max_abs() > r.full_precision.stats.max_abs(), "ternary > full precision");
    o.expect(r.activation_ratio() >= 10.0, "ratio >= 10");
    o.expect(r.ternary_rms.max_row_ms_deviation <= 1e-4, "RMS mean-square within 1e-4");
    o.expect(r.ordering_holds(), "strict ordering");
    o.detail << "max|ternary| " << fmt(r.ternary.stats.max_abs()) << ", max|fp| " << fmt(r.full_precision.stats.max_abs())
             << " (ratio " << fmt(r.activation_ratio()) << "x), RMS row mean-square deviation "
             << fmt(r.ternary_rms.max_row_ms_deviation, 2);
    return o;
}

// ---- 6 -------------------------------------------------------------------------

Outcome identity_at_init(const Options& opt) {
    Outcome o;
    int checked = 0, identical = 0;
    for (bool rms : {true, false}) {
        dit::ModelConfig cfg;
        cfg.adaln_rms = rms;
        Rng rng(opt.seed + (rms ? 1 : 2));
        const dit::Model<float> m(cfg, rng);
        const std::vector<Conditioning> cond{{0, 0, false}, {500, 3, false}, {999, 7, true}};
        const Mat<float> c = m.condition(cond);
        const Mat<float> x = normal_mat<float>(3 * cfg.tokens(), cfg.hidden_dim, rng, 3.0);
        for (int b = 0; b < cfg.depth; ++b) {
            const Mat<float> y = m.block_forward(b, x, c);
            ++checked;
            identical += std::memcmp(y.data(), x.data(), sizeof(float) * x.size()) == 0;
        }
    }
    o.expect(identical == checked, "blocks are identities");
    o.detail << identical << "/" << checked << " blocks bitwise identical (adaln_rms on and off)";
    return o;
}

// ---- 7, 8 ----------------------------------------------------------------------

struct Arm {
    double at100 = NAN;
    double at_end = NAN;
    std::optional<train::TrainState> snapshot;  // at 3k, rms arm only
    std::optional<dit::Model<float>> final_model;
    double seconds = 0;
};

struct TrainingRuns {
    Arm rms, plain;
    double cont_drop = NAN, cont_nodrop = NAN;
    int64_t drop_step = 0;
    bool drop_schedule_ok = false;
};

train::TrainConfig arm_config(const Options& opt, int64_t total, int64_t drop) {
    train::TrainConfig tc;
    tc.batch_size = opt.batch;
    tc.total_steps = total;
    tc.lr_drop_step = drop;
    tc.seed = opt.seed;
    return tc;
}

void run_arm(Arm& arm, bool rms, const Options& opt, const train::SyntheticDataset& data, int64_t snapshot_at) {
    dit::ModelConfig mc;
    mc.adaln_rms = rms;
    const auto tc = arm_config(opt, opt.steps, opt.steps);
    auto state = train::make_train_state(mc, tc);
    std::ofstream log;
    if (!opt.out.empty()) {
        log.open(opt.out / (rms ? "loss_rms.tsv" : "loss_norms.tsv"));
        log << "step\traw\tsmoothed\n";
    }
    train::RunHooks hooks;
    if (log) hooks.loss_log = &log;
    hooks.on_step = [&](int64_t step, const train::StepResult& r) {
        if (step == 100) arm.at100 = r.smoothed;
        arm.at_end = r.smoothed;
    };
    const auto start = std::chrono::steady_clock::now();
    if (snapshot_at > 0 && snapshot_at < opt.steps) {
        train::run_training(state, tc, data, snapshot_at, hooks);
        arm.snapshot = state;
    }
    train::run_training(state, tc, data, opt.steps, hooks);
    arm.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    arm.final_model = state.model;
}

double continuation(const train::TrainState& from, const Options& opt, const train::SyntheticDataset& data,
                    int64_t drop_step, int64_t until) {
    auto state = from;
    const auto tc = arm_config(opt, until, drop_step);
    double last = NAN;
    train::RunHooks hooks;
    hooks.on_step = [&](int64_t, const train::StepResult& r) { last = r.smoothed; };
    train::run_training(state, tc, data, until, hooks);
    return last;
}

TrainingRuns run_training_arms(const Options& opt) {
    TrainingRuns t;
    const train::SyntheticDataset data(8, opt.seed);
    const int64_t snap = opt.steps * 3 / 5;  // 3k of 5k
    run_arm(t.rms, true, opt, data, snap);
    run_arm(t.plain, false, opt, data, 0);
    t.drop_step = snap;
    const int64_t until = snap + opt.steps / 5;
    const auto drop_cfg = arm_config(opt, until, snap);
    t.drop_schedule_ok = train::lr_at(snap - 1, drop_cfg) == 5e-4 && train::lr_at(snap, drop_cfg) == 1e-4 &&
                         train::lr_at(0, drop_cfg) == 5e-4 && train::lr_at(until, drop_cfg) == 1e-4;
    if (t.rms.snapshot) {
        t.cont_drop = continuation(*t.rms.snapshot, opt, data, snap, until);
        t.cont_nodrop = continuation(*t.rms.snapshot, opt, data, until, until);
    }
    return t;
}

Outcome training_trend(const TrainingRuns& t, const Options& opt) {
    Outcome o;
    const double rr = t.rms.at_end / t.rms.at100;
    const double rp = t.plain.at_end / t.plain.at100;
    o.expect(rr <= 0.7, "rms arm end <= 70% of step 100");
    o.expect(rp <= 0.7, "no-rms arm end <= 70% of step 100");
    o.expect(t.rms.at_end <= t.plain.at_end, "rms arm <= no-rms arm");
    o.detail << opt.steps << " steps, batch " << opt.batch << ": adaln_rms on " << fmt(t.rms.at100) << " -> "
             << fmt(t.rms.at_end) << " (" << fmt(100 * rr, 3) << "%), off " << fmt(t.plain.at100) << " -> "
             << fmt(t.plain.at_end) << " (" << fmt(100 * rp, 3) << "%); " << fmt(t.rms.seconds + t.plain.seconds, 4)
             << " s training";
    return o;
}

Outcome lr_ablation(const TrainingRuns& t) {
    Outcome o;
    o.expect(t.drop_schedule_ok, "lr_at 5e-4 -> 1e-4");
    o.expect(std::isfinite(t.cont_drop) && std::isfinite(t.cont_nodrop), "continuations ran");
    o.expect(t.cont_drop <= t.cont_nodrop, "drop <= no drop");
    o.detail << "drop at step " << t.drop_step << ": smoothed " << fmt(t.cont_drop) << " with drop vs "
             << fmt(t.cont_nodrop) << " without";
    return o;
}

// ---- 9 -------------------------------------------------------------------------

Outcome guidance_identities(const dit::Model<float>& model, const Options& opt) {
    Outcome o;
    Rng rng(opt.seed + 9);
    std::normal_distribution<double> n;
    int exact = 0;
    for (int i = 0; i < 10000; ++i) {
        const double c = n(rng) * std::pow(10.0, n(rng)), u = n(rng);
        exact += diffusion::cfg_combine(c, u, 1.0) == c;
    }
    const auto eps_c = diffusion::standard_normal_image(3, 16, 16, rng);
    const auto eps_u = diffusion::standard_normal_image(3, 16, 16, rng);
    o.expect(exact == 10000 && diffusion::cfg_combine(eps_c, eps_u, 1.0).data == eps_c.data, "cfg_combine(s=1)");

    const auto& mc = model.config();
    const diffusion::NoiseSchedule s(mc.num_timesteps);
    const std::vector<int> labels{1, 6};
    const auto predict = diffusion::model_predictor(model);
    Rng a(opt.seed), b(opt.seed), c(opt.seed);
    const auto guided = diffusion::ddpm_sample(predict, s, labels, mc.channels, mc.image_size, mc.image_size,
                                               {opt.sample_steps, 1.0, true}, a);
    const auto cond = diffusion::ddpm_sample(predict, s, labels, mc.channels, mc.image_size, mc.image_size,
                                             {opt.sample_steps, 1.0, false}, b);
    const auto hot = diffusion::ddpm_sample(predict, s, labels, mc.channels, mc.image_size, mc.image_size,
                                            {opt.sample_steps, 10.0, true}, c);
    o.expect(same_bits(guided, cond), "s=1 trajectory equals conditional-only");
    size_t non_finite = 0;
    for (const auto& img : hot)
        for (float v : img.data) non_finite += !std::isfinite(v);
    o.expect(non_finite == 0, "cfg=10 finite");
    o.detail << exact << "/10000 scalar identities; s=1 vs conditional-only over " << opt.sample_steps << " steps: "
             << (same_bits(guided, cond) ? "bit-identical" : "differ") << "; cfg=10: " << non_finite
             << " non-finite values";
    return o;
}

// ---- 10 ------------------------------------------------------------------------

Outcome deployment_equivalence(const dit::Model<float>& model, const Options& opt) {
    Outcome o;
    const fs::path dir = opt.out.empty() ? fs::temp_directory_path() / ("terdit_acceptance_" + std::to_string(::getpid()))
                                         : opt.out / "deploy";
    fs::create_directories(dir);
    pack::save_checkpoint(dir / "master.terd", dit::to_checkpoint(model));
    std::ostringstream sink;
    auto cli = [&](std::vector<std::string> args) {
        args.insert(args.begin(), "terdit");
        return cli::run(args, sink, sink);
    };
    const std::string steps = std::to_string(opt.sample_steps), seed = std::to_string(opt.seed);
    const int rc_pack = cli({"pack", "--in", (dir / "master.terd").string(), "--out", (dir / "packed.terd").string()});
    const int rc_a = cli({"sample", "--ckpt", (dir / "master.terd").string(), "--class", "2", "--class", "5", "--steps",
                          steps, "--seed", seed, "--out", (dir / "from_master").string()});
    const int rc_b = cli({"sample", "--ckpt", (dir / "packed.terd").string(), "--class", "2", "--class", "5", "--steps",
                          steps, "--seed", seed, "--out", (dir / "from_packed").string()});
    auto slurp = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    const auto a = slurp(dir / "from_master" / "samples.f32");
    const auto b = slurp(dir / "from_packed" / "samples.f32");
    o.expect(rc_pack == 0 && rc_a == 0 && rc_b == 0, "commands succeed");
    o.expect(!a.empty() && a == b, "packed sampling bit-identical");
    if (o.pass == false) o.detail << sink.str();

    const diffusion::NoiseSchedule s;
    Rng rng(opt.seed + 10);
    int within = 0, total = 0;
    std::ostringstream zs;
    for (int t : {0, 100, 500, 999}) {
        const double x0 = -0.7;
        const int n = 40000;
        double sum = 0, sq = 0;
        ImageT<double> img(1, 1, 1), noise(1, 1, 1);
        img.data[0] = x0;
        std::normal_distribution<double> nd;
        for (int i = 0; i < n; ++i) {
            noise.data[0] = nd(rng);
            const double v = diffusion::q_sample(s, img, t, noise).data[0];
            sum += v;
            sq += v * v;
        }
        const double mean = sum / n, var = sq / n - mean * mean;
        const double mu = std::sqrt(s.alpha_bar(t)) * x0, sigma2 = 1 - s.alpha_bar(t);
        const double z_mean = (mean - mu) / std::sqrt(sigma2 / n);
        const double z_var = (var - sigma2) / (sigma2 * std::sqrt(2.0 / (n - 1)));
        within += std::abs(z_mean) < 3;
        within += std::abs(z_var) < 3;
        total += 2;
        zs << " t=" << t << ":" << fmt(z_mean, 2) << "/" << fmt(z_var, 2);
    }
    o.expect(within == total, "q_sample moments within 3 standard errors");
    o.detail << "pack -> sample vs master sample (" << opt.sample_steps << " steps, " << a.size() / 4 << " values): "
             << (a == b && !a.empty() ? "bit-identical" : "differ") << "; q_sample z-scores mean/var" << zs.str();
    if (opt.out.empty()) fs::remove_all(dir);
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria 1-10"};
    Options opt;
    std::vector<int> only;
    std::string out;
    app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 10));
    app.add_option("--out", out, "keep loss logs and deployment artifacts here");
    app.add_option("--seed", opt.seed);
    app.add_option("--batch", opt.batch, "training batch size");
    app.add_option("--steps", opt.steps, "training steps per arm")->check(CLI::Range(int64_t{200}, int64_t{1} << 40));
    CLI11_PARSE(app, argc, argv);
    if (!out.empty()) {
        opt.out = out;
        fs::create_directories(opt.out);
    }
    const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}
                                                : std::set<int>(only.begin(), only.end());

    static const char* names[] = {"",
                                  "quantizer exactness",
                                  "gradient fidelity",
                                  "packing bijection",
                                  "checkpoint size ratio",
                                  "activation pilot",
                                  "identity at init",
                                  "training trend",
                                  "lr-schedule ablation",
                                  "guidance identities",
                                  "deployment equivalence"};
    bool all = true;
    auto report = [&](int id, const std::function<Outcome()>& f) {
        if (!selected.count(id)) return;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = f();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << "exception: " << e.what();
        }
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        all = all && o.pass;
        std::cout << "criterion " << id << " (" << names[id] << "): " << (o.pass ? "PASS" : "FAIL") << "  "
                  << o.detail.str() << "  [" << fmt(sec, 3) << " s]" << std::endl;
    };

    report(1, quantizer_exactness);
    report(2, gradient_fidelity);
    report(3, packing_bijection);
    report(4, [&] { return checkpoint_ratio(opt); });
    report(5, [&] { return pilot(opt); });
    report(6, [&] { return identity_at_init(opt); });

    std::optional<TrainingRuns> runs;
    const bool need_training = selected.count(7) || selected.count(8) || selected.count(9) || selected.count(10);
    if (need_training) {
        const auto start = std::chrono::steady_clock::now();
        runs = run_training_arms(opt);
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cout << "training arms finished in " << fmt(sec, 4) << " s" << std::endl;
    }
    report(7, [&] { return training_trend(*runs, opt); });
    report(8, [&] { return lr_ablation(*runs); });
    report(9, [&] { return guidance_identities(*runs->rms.final_model, opt); });
    report(10, [&] { return deployment_equivalence(*runs->rms.final_model, opt); });

    std::cout << (all ? "ALL PASS" : "SOME CRITERIA FAILED") << std::endl;
    return all ? 0 : 1;
}
