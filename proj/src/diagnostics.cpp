#include "terdit/diagnostics.hpp"

#include "terdit/bitpack.hpp"
#include "terdit/ternary_quant.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace terdit::diag {

namespace {

double quantile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

template <typename T>
Stats describe_impl(std::span<const T> values) {
    require(!values.empty(), "describe: no values");
    std::vector<double> v(values.begin(), values.end());
    double ms = 0.0;
    for (double x : v) {
        require(std::isfinite(x), "describe: non-finite value");
        ms += x * x;
    }
    std::sort(v.begin(), v.end());
    Stats s;
    s.count = v.size();
    s.min = v.front();
    s.max = v.back();
    s.q1 = quantile(v, 0.25);
    s.median = quantile(v, 0.5);
    s.q3 = quantile(v, 0.75);
    s.mean_square = ms / static_cast<double>(v.size());
    return s;
}

bool rows_identical(const Mat<float>& y) {
    for (Eigen::Index r = 1; r < y.rows(); ++r)
        if (y.row(r) != y.row(0)) return false;
    return true;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace

Stats describe(std::span<const double> values) { return describe_impl(values); }
Stats describe(std::span<const float> values) { return describe_impl(values); }

// ---- pilot -------------------------------------------------------------------

bool PilotReport::ordering_holds() const {
    const double t = ternary.stats.max_abs();
    const double f = full_precision.stats.max_abs();
    return t > f && f > ternary_rms.max_row_ms_deviation;
}

PilotReport activation_pilot(uint64_t seed, const PilotOptions& opt) {
    require(opt.in_features > 0 && opt.out_features > 0 && opt.rows > 0, "pilot: dimensions must be positive");
    Rng rng(seed);
    const double sigma = 1.0 / std::sqrt(static_cast<double>(opt.in_features));
    Mat<float> w(opt.out_features, opt.in_features);
    std::normal_distribution<double> nd(0.0, sigma);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(nd(rng));
    const double alpha = std::isnan(opt.alpha) ? quant::init_alpha(sigma, rng) : opt.alpha;

    const Mat<float> x = Mat<float>::Ones(opt.rows, opt.in_features);
    PilotReport r;
    r.seed = seed;
    r.alpha = alpha;

    Mat<float> fp(opt.rows, opt.out_features);
    fp.noalias() = x * w.transpose();
    r.full_precision.name = "full_precision";
    r.full_precision.stats = describe(std::span<const float>(fp.data(), fp.size()));
    r.full_precision.rows_identical = rows_identical(fp);

    const auto packed = pack::pack_tensor(quant::ternarize(w, alpha));
    w.resize(0, 0);
    const Mat<float> tern = pack::packed_linear<float>(x, packed);
    r.ternary.name = "ternary";
    r.ternary.stats = describe(std::span<const float>(tern.data(), tern.size()));
    r.ternary.rows_identical = rows_identical(tern);

    Mat<float> normed(tern.rows(), tern.cols());
    double dev = 0.0;
    for (Eigen::Index i = 0; i < tern.rows(); ++i) {
        const RowVec<double> row = tern.row(i).cast<double>();
        const RowVec<double> y = dit::rms_norm<double>(row, RowVec<double>::Ones(row.size()), opt.rms_eps);
        dev = std::max(dev, std::abs(y.squaredNorm() / static_cast<double>(y.size()) - 1.0));
        normed.row(i) = y.cast<float>();
    }
    r.ternary_rms.name = "ternary_rms";
    r.ternary_rms.stats = describe(std::span<const float>(normed.data(), normed.size()));
    r.ternary_rms.max_row_ms_deviation = dev;
    r.ternary_rms.rows_identical = rows_identical(normed);
    return r;
}

std::string format_pilot(const PilotReport& r) {
    std::ostringstream os;
    os << "activation pilot (seed " << r.seed << ", alpha " << fmt(r.alpha) << ")\n";
    char line[256];
    std::snprintf(line, sizeof line, "%-16s %12s %12s %12s %12s %12s %12s\n", "variant", "min", "q1", "median", "q3",
                  "max", "mean_sq");
    os << line;
    for (const auto* v : {&r.ternary, &r.ternary_rms, &r.full_precision}) {
        std::snprintf(line, sizeof line, "%-16s %12.5g %12.5g %12.5g %12.5g %12.5g %12.5g\n", v->name.c_str(),
                      v->stats.min, v->stats.q1, v->stats.median, v->stats.q3, v->stats.max, v->stats.mean_square);
        os << line;
    }
    os << "max|ternary| / max|full precision| = " << fmt(r.activation_ratio()) << "\n";
    os << "ternary+rms max row |mean_sq - 1| = " << fmt(r.ternary_rms.max_row_ms_deviation) << "\n";
    return os.str();
}

std::string pilot_csv(const PilotReport& r) {
    std::ostringstream os;
    os << "variant,min,q1,median,q3,max,mean_square\n";
    for (const auto* v : {&r.ternary, &r.ternary_rms, &r.full_precision})
        os << v->name << ',' << fmt(v->stats.min) << ',' << fmt(v->stats.q1) << ',' << fmt(v->stats.median) << ','
           << fmt(v->stats.q3) << ',' << fmt(v->stats.max) << ',' << fmt(v->stats.mean_square) << '\n';
    return os.str();
}

// ---- capture -----------------------------------------------------------------

diffusion::NoisePredictor capturing_predictor(const dit::Model<float>& model, int block, dit::ModSite site,
                                              std::vector<std::vector<double>>& sink) {
    require(block >= 0 && block < model.config().depth, "capture: block index out of range");
    return [&model, block, site, &sink](std::span<const Image> x, std::span<const Conditioning> c) {
        if (c.empty() || c[0].drop) return model.predict(x, c);
        const Eigen::Index d = model.config().hidden_dim;
        const dit::ModulationObserver<float> obs = [&](int b, const Mat<float>& mod) {
            if (b != block) return;
            const auto chunk = mod.row(0).segment(static_cast<Eigen::Index>(site) * d, d);
            sink.emplace_back(chunk.begin(), chunk.end());
        };
        return model.predict(x, c, &obs);
    };
}

Capture activation_capture(const dit::Model<float>& model, int block, std::string_view site, int timestep, int label,
                           double cfg_scale, uint64_t seed) {
    const dit::ModSite s = dit::parse_site(site);
    const auto& cfg = model.config();
    std::vector<std::vector<double>> sink;
    const auto predict = capturing_predictor(model, block, s, sink);
    Rng rng(seed);
    const std::vector<Image> x{diffusion::standard_normal_image(cfg.channels, cfg.image_size, cfg.image_size, rng)};
    const std::vector<Conditioning> cond{{timestep, label, false}};
    const std::vector<Conditioning> uncond{{timestep, label, true}};
    const auto eps_c = predict(x, cond);
    const auto eps_u = predict(x, uncond);
    (void)diffusion::cfg_combine(eps_c[0], eps_u[0], cfg_scale);
    require(sink.size() == 1, "capture: observer did not fire");
    Capture out;
    out.block = block;
    out.site = s;
    out.timestep = timestep;
    out.values = std::move(sink.front());
    out.stats = describe(std::span<const double>(out.values));
    return out;
}

double capture_mean_square_bound(const dit::Model<float>& model, int block) {
    require(block >= 0 && block < model.config().depth, "capture: block index out of range");
    const auto& b = model.blocks[block];
    if (!b.adaln_rms) return std::numeric_limits<double>::infinity();
    const double g = b.adaln_norm.gain.value.cwiseAbs().maxCoeff();
    return 6.0 * g * g;
}

// ---- sizes -------------------------------------------------------------------

SizeReport size_report(const dit::ModelConfig& cfg) {
    SizeReport r;
    for (const auto& s : dit::parameter_specs(cfg)) {
        TensorSize t;
        t.name = s.name;
        t.params = s.numel();
        t.ternary = s.role == dit::ParamRole::TernaryWeight;
        t.fp_bytes = 4 * t.params;
        if (t.ternary) {
            t.packed_bytes = pack::packed_size(t.params) + 4 + 1;
        } else if (s.role == dit::ParamRole::Alpha) {
            t.packed_bytes = 0;  // carried inside the packed tensor
        } else {
            t.packed_bytes = 4 * t.params;
        }
        r.total_params += t.params;
        if (t.ternary) r.ternary_params += t.params;
        r.fp_bytes += t.fp_bytes;
        r.packed_bytes += t.packed_bytes;
        r.tensors.push_back(std::move(t));
    }
    return r;
}

SizeReport size_report(const pack::Checkpoint& ckpt) { return size_report(dit::parse_config_text(ckpt.config_text)); }

dit::ModelConfig dit_xl2_config() {
    dit::ModelConfig c;
    c.image_size = 32;
    c.channels = 4;
    c.patch_size = 2;
    c.hidden_dim = 1152;
    c.depth = 28;
    c.num_heads = 16;
    c.num_classes = 1000;
    return c;
}

std::string format_bytes(uint64_t b) {
    const char* units[] = {"B", "KiB", "MiB", "GiB"};
    double v = static_cast<double>(b);
    int u = 0;
    while (v >= 1024.0 && u < 3) {
        v /= 1024.0;
        ++u;
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, u == 0 ? "%.0f %s" : "%.2f %s", v, units[u]);
    return buf;
}

std::string format_size_report(const SizeReport& r, bool per_tensor) {
    std::ostringstream os;
    char line[256];
    if (per_tensor) {
        std::snprintf(line, sizeof line, "%-36s %12s %8s %14s %14s\n", "tensor", "params", "ternary", "fp_bytes",
                      "packed_bytes");
        os << line;
        for (const auto& t : r.tensors) {
            std::snprintf(line, sizeof line, "%-36s %12llu %8s %14llu %14llu\n", t.name.c_str(),
                          static_cast<unsigned long long>(t.params), t.ternary ? "yes" : "no",
                          static_cast<unsigned long long>(t.fp_bytes), static_cast<unsigned long long>(t.packed_bytes));
            os << line;
        }
    }
    os << "parameters:   " << r.total_params << " (" << r.ternary_params << " ternary)\n";
    os << "fp_bytes:     " << r.fp_bytes << " (" << format_bytes(r.fp_bytes) << ")\n";
    os << "packed_bytes: " << r.packed_bytes << " (" << format_bytes(r.packed_bytes) << ")\n";
    std::snprintf(line, sizeof line, "ratio:        %.3fx\n", r.ratio());
    os << line;
    return os.str();
}

// ---- working set and timing --------------------------------------------------

WorkingSet working_set_estimate(const dit::ModelConfig& cfg, int batch) {
    require(batch > 0, "working set: batch must be positive");
    const auto sizes = size_report(cfg);
    WorkingSet ws;
    ws.weights_dense = sizes.fp_bytes;
    ws.weights_packed = sizes.packed_bytes;
    const uint64_t d = cfg.hidden_dim;
    const uint64_t f = cfg.ffn_dim();
    const uint64_t n = cfg.tokens();
    const uint64_t b = batch;
    ws.unpack_scratch = cfg.quantize_blocks ? 4ull * 32 * std::max(d, f) : 0;
    // x, norm, modulated, q, k, v, attention out, projection, residual; gate, up, product; one score matrix per head
    ws.activations = 4 * (b * n * (9 * d + 3 * f) + b * cfg.num_heads * n * n + b * 6 * d);
    return ws;
}

BenchResult bench_forward(const dit::Model<float>& dense, const dit::Model<float>& packed, int batch, int reps,
                          uint64_t seed) {
    require(batch > 0 && reps > 0, "bench: batch and reps must be positive");
    require(dense.config() == packed.config(), "bench: models have different configs");
    const auto& cfg = dense.config();
    Rng rng(seed);
    std::vector<Image> x;
    std::vector<Conditioning> c;
    std::uniform_int_distribution<int> t(0, cfg.num_timesteps - 1), l(0, cfg.num_classes - 1);
    for (int i = 0; i < batch; ++i) {
        x.push_back(diffusion::standard_normal_image(cfg.channels, cfg.image_size, cfg.image_size, rng));
        c.push_back({t(rng), l(rng), false});
    }
    using clock = std::chrono::steady_clock;
    auto time = [&](const dit::Model<float>& m, std::vector<Image>& out) {
        out = m.predict(x, c);
        const auto start = clock::now();
        for (int i = 0; i < reps; ++i) out = m.predict(x, c);
        return std::chrono::duration<double>(clock::now() - start).count() / reps;
    };
    BenchResult r;
    r.batch = batch;
    r.reps = reps;
    std::vector<Image> a, b;
    r.dense_seconds = time(dense, a);
    r.packed_seconds = time(packed, b);
    r.outputs_equal = true;
    for (int i = 0; i < batch; ++i) r.outputs_equal = r.outputs_equal && a[i].data == b[i].data;
    r.working_set = working_set_estimate(cfg, batch);
    return r;
}

}  // namespace terdit::diag
