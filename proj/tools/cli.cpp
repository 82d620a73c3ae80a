#include "cli.hpp"

#include "terdit/checkpoint.hpp"
#include "terdit/diagnostics.hpp"
#include "terdit/diffusion.hpp"
#include "terdit/dit.hpp"
#include "terdit/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

namespace terdit::cli {

namespace fs = std::filesystem;

namespace {

// Raised for bad flag combinations discovered after parsing.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

const std::vector<std::string> kOnOff{"on", "off"};

bool on(const std::string& v) { return v == "on"; }

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw UsageError("cannot create directory '" + p.string() + "': " + ec.message());
}

void write_bytes(const fs::path& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw UsageError("cannot open '" + path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw UsageError("failed writing '" + path.string() + "'");
}

void write_text(const fs::path& path, const std::string& text) {
    write_bytes(path, std::vector<uint8_t>(text.begin(), text.end()));
}

pack::Checkpoint read_checkpoint(const std::string& path) {
    if (!fs::exists(path)) throw UsageError("checkpoint '" + path + "' does not exist");
    return pack::load_checkpoint(path);
}

// ---- train ---------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    int64_t steps = 5000;
    double lr = 5e-4;
    int64_t lr_drop_step = -1;
    double lr_after = 1e-4;
    std::string adaln_rms;
    std::string quantize;
    uint64_t seed = 0;
    std::string out;
    int64_t ckpt_every = 0;
    std::string clip_grad = "on";
    int batch = 16;
    double ema_decay = 0.999;
    double weight_decay = 0.0;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    dit::ModelConfig mc;
    if (!a.config.empty()) mc = dit::load_config_file(a.config);
    if (!a.adaln_rms.empty()) mc.adaln_rms = on(a.adaln_rms);
    if (!a.quantize.empty()) mc.quantize_blocks = on(a.quantize);
    mc.validate();

    train::TrainConfig tc;
    tc.batch_size = a.batch;
    tc.total_steps = a.steps;
    tc.lr_initial = a.lr;
    tc.lr_after_drop = a.lr_after;
    tc.lr_drop_step = a.lr_drop_step < 0 ? a.steps : a.lr_drop_step;
    tc.ema_decay = a.ema_decay;
    tc.weight_decay = a.weight_decay;
    tc.clip_grad = on(a.clip_grad);
    tc.seed = a.seed;
    tc.validate();

    const fs::path dir(a.out);
    ensure_dir(dir);
    write_text(dir / "config.txt", dit::to_config_text(mc));

    auto state = train::make_train_state(mc, tc);
    const train::SyntheticDataset data(mc.num_classes, a.seed, mc.image_size, mc.channels);
    std::ofstream log(dir / "loss.tsv", std::ios::trunc);
    if (!log) throw UsageError("cannot open loss log in '" + dir.string() + "'");
    log << "step\traw\tsmoothed\n";

    train::RunHooks hooks;
    hooks.loss_log = &log;
    hooks.ckpt_every = a.ckpt_every;
    hooks.on_checkpoint = [&](const train::TrainState& s) {
        pack::save_checkpoint(dir / ("master_step" + std::to_string(s.step) + ".terd"), dit::to_checkpoint(s.model));
    };
    const int64_t report = std::max<int64_t>(1, a.steps / 20);
    hooks.on_step = [&](int64_t step, const train::StepResult& r) {
        if (step % report == 0 || step == a.steps)
            out << "step " << step << "  loss " << r.loss << "  smoothed " << r.smoothed << "  lr " << r.lr << '\n';
    };
    train::run_training(state, tc, data, a.steps, hooks);

    pack::save_checkpoint(dir / "master.terd", dit::to_checkpoint(state.model));
    pack::save_checkpoint(dir / "ema.terd", dit::to_checkpoint(train::ema_model(state)));
    out << "wrote " << (dir / "master.terd").string() << ", " << (dir / "ema.terd").string() << ", "
        << (dir / "loss.tsv").string() << '\n';
    return kExitOk;
}

// ---- sample --------------------------------------------------------------------

struct SampleArgs {
    std::string ckpt;
    std::vector<int> classes;
    double cfg_scale = 4.0;
    int steps = 250;
    uint64_t seed = 0;
    std::string out;
};

std::vector<uint8_t> raw_floats(const std::vector<Image>& imgs) {
    std::vector<uint8_t> bytes;
    for (const auto& img : imgs)
        for (float v : img.data) {
            const auto u = std::bit_cast<uint32_t>(v);
            for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<uint8_t>(u >> (8 * i)));
        }
    return bytes;
}

int cmd_sample(const SampleArgs& a, std::ostream& out) {
    const auto model = dit::from_checkpoint(read_checkpoint(a.ckpt));
    const auto& mc = model.config();
    std::vector<int> labels = a.classes.empty() ? std::vector<int>{0} : a.classes;
    for (int l : labels)
        if (l < 0 || l >= mc.num_classes)
            throw UsageError("class " + std::to_string(l) + " outside [0, " + std::to_string(mc.num_classes) + ")");
    const diffusion::NoiseSchedule schedule(mc.num_timesteps);
    if (a.steps < 1 || a.steps > schedule.steps())
        throw UsageError("--steps must lie in [1, " + std::to_string(schedule.steps()) + "]");
    diffusion::SamplerOptions opt;
    opt.steps = a.steps;
    opt.cfg_scale = a.cfg_scale;
    Rng rng(a.seed);
    const auto imgs = diffusion::ddpm_sample(diffusion::model_predictor(model), schedule, labels, mc.channels,
                                             mc.image_size, mc.image_size, opt, rng);
    const fs::path dir(a.out);
    ensure_dir(dir);
    size_t non_finite = 0;
    for (size_t i = 0; i < imgs.size(); ++i) {
        for (float v : imgs[i].data) non_finite += !std::isfinite(v);
        diffusion::write_ppm(dir / ("sample_" + std::to_string(i) + "_class" + std::to_string(labels[i]) + ".ppm"),
                             imgs[i]);
    }
    write_bytes(dir / "samples.f32", raw_floats(imgs));
    out << "wrote " << imgs.size() << " samples to " << dir.string() << '\n';
    if (non_finite > 0) {
        out << non_finite << " non-finite values in the samples\n";
        return kExitDivergence;
    }
    return kExitOk;
}

// ---- pack / inspect ------------------------------------------------------------

int cmd_pack(const std::string& in, const std::string& out_path, std::ostream& out) {
    const auto master = read_checkpoint(in);
    if (master.has_packed()) throw UsageError("'" + in + "' is already packed");
    const auto packed = dit::pack_checkpoint(master);
    pack::save_checkpoint(out_path, packed);
    const auto before = pack::serialize(master).size();
    const auto after = pack::serialize(packed).size();
    out << "packed " << in << " (" << before << " bytes) -> " << out_path << " (" << after << " bytes), "
        << static_cast<double>(before) / static_cast<double>(after) << "x smaller\n";
    return kExitOk;
}

int cmd_inspect(const std::string& path, bool per_tensor, std::ostream& out) {
    const auto ckpt = read_checkpoint(path);
    const auto report = diag::size_report(ckpt);
    size_t packed = 0;
    for (const auto& t : ckpt.tensors) packed += t.is_packed();
    out << path << ": " << (ckpt.has_packed() ? "packed" : "master") << " checkpoint, " << ckpt.tensors.size()
        << " tensors (" << packed << " packed), " << pack::payload_bytes(ckpt) << " payload bytes, "
        << std::filesystem::file_size(path) << " bytes on disk\n";
    out << ckpt.config_text;
    out << diag::format_size_report(report, per_tensor);
    return kExitOk;
}

// ---- diagnostics ---------------------------------------------------------------

int cmd_pilot(uint64_t seed, bool alpha_init, const std::string& csv, std::ostream& out) {
    diag::PilotOptions opt;
    if (alpha_init) opt.alpha = std::numeric_limits<double>::quiet_NaN();
    const auto r = diag::activation_pilot(seed, opt);
    out << diag::format_pilot(r);
    if (!csv.empty()) write_text(csv, diag::pilot_csv(r));
    return kExitOk;
}

int cmd_bench(const std::string& path, int batch, int reps, uint64_t seed, std::ostream& out) {
    if (batch < 1 || reps < 1) throw UsageError("--batch and --reps must be positive");
    const auto ckpt = read_checkpoint(path);
    if (ckpt.has_packed()) throw UsageError("bench needs a master checkpoint; it packs a copy itself");
    const auto dense = dit::from_checkpoint(ckpt);
    const auto packed = dit::from_checkpoint(dit::pack_checkpoint(ckpt));
    const auto r = diag::bench_forward(dense, packed, batch, reps, seed);
    out << "batch " << r.batch << ", " << r.reps << " reps\n";
    out << "dense forward:  " << r.dense_seconds * 1e3 << " ms\n";
    out << "packed forward: " << r.packed_seconds * 1e3 << " ms (" << r.packed_seconds / r.dense_seconds
        << "x dense)\n";
    out << "outputs identical: " << (r.outputs_equal ? "yes" : "no") << '\n';
    const auto& ws = r.working_set;
    out << "working set dense:  " << diag::format_bytes(ws.dense_total()) << " (weights "
        << diag::format_bytes(ws.weights_dense) << ", activations " << diag::format_bytes(ws.activations) << ")\n";
    out << "working set packed: " << diag::format_bytes(ws.packed_total()) << " (weights "
        << diag::format_bytes(ws.weights_packed) << ", unpack scratch " << diag::format_bytes(ws.unpack_scratch)
        << ", activations " << diag::format_bytes(ws.activations) << ")\n";
    return kExitOk;
}

struct CaptureArgs {
    std::string ckpt;
    int block = 1;
    std::string site = "scale_mlp";
    int timestep = -1;
    int label = 0;
    double cfg_scale = 4.0;
    uint64_t seed = 0;
    std::string csv;
};

int cmd_capture(const CaptureArgs& a, std::ostream& out) {
    const auto model = dit::from_checkpoint(read_checkpoint(a.ckpt));
    const auto& mc = model.config();
    if (a.block < 0 || a.block >= mc.depth)
        throw UsageError("--block must lie in [0, " + std::to_string(mc.depth) + ")");
    const int t = a.timestep < 0 ? mc.num_timesteps - 1 : a.timestep;
    const auto c = diag::activation_capture(model, a.block, a.site, t, a.label, a.cfg_scale, a.seed);
    const auto& s = c.stats;
    out << a.site << " of block " << a.block << " at t=" << t << " (" << s.count << " values)\n";
    out << "min " << s.min << "  q1 " << s.q1 << "  median " << s.median << "  q3 " << s.q3 << "  max " << s.max
        << "  mean_sq " << s.mean_square << '\n';
    if (mc.adaln_rms) out << "mean_sq bound " << diag::capture_mean_square_bound(model, a.block) << '\n';
    if (!a.csv.empty()) {
        std::string text = "index,value\n";
        for (size_t i = 0; i < c.values.size(); ++i) text += std::to_string(i) + "," + std::to_string(c.values[i]) + "\n";
        write_text(a.csv, text);
    }
    return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Ternary diffusion transformer toolkit", args.empty() ? "terdit" : args[0]};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "quantization-aware training on the synthetic dataset");
    train->add_option("--config", ta.config, "model config file (key=value lines)");
    train->add_option("--steps", ta.steps, "optimizer steps")->check(CLI::NonNegativeNumber);
    train->add_option("--lr", ta.lr, "learning rate before the drop");
    train->add_option("--lr-drop-step", ta.lr_drop_step, "first step using --lr-after (default: never)");
    train->add_option("--lr-after", ta.lr_after, "learning rate after the drop");
    train->add_option("--adaln-rms", ta.adaln_rms, "RMS norm on the adaLN output")->check(CLI::IsMember(kOnOff));
    train->add_option("--quantize", ta.quantize, "ternary block linears")->check(CLI::IsMember(kOnOff));
    train->add_option("--seed", ta.seed);
    train->add_option("--out", ta.out, "output directory")->required();
    train->add_option("--ckpt-every", ta.ckpt_every, "also save the master every K steps")->check(CLI::NonNegativeNumber);
    train->add_option("--clip-grad", ta.clip_grad, "global-norm gradient clipping at 1.0")->check(CLI::IsMember(kOnOff));
    train->add_option("--batch", ta.batch, "batch size");
    train->add_option("--ema-decay", ta.ema_decay);
    train->add_option("--weight-decay", ta.weight_decay);

    SampleArgs sa;
    auto* sample = app.add_subcommand("sample", "ancestral sampling with classifier-free guidance");
    sample->add_option("--ckpt", sa.ckpt, "master or packed checkpoint")->required();
    sample->add_option("--class", sa.classes, "class label, repeatable (default 0)");
    sample->add_option("--cfg-scale", sa.cfg_scale, "guidance scale, >= 1");
    sample->add_option("--steps", sa.steps, "sampling steps");
    sample->add_option("--seed", sa.seed);
    sample->add_option("--out", sa.out, "output directory")->required();

    std::string pack_in, pack_out;
    auto* packc = app.add_subcommand("pack", "convert a master checkpoint to packed ternary form");
    packc->add_option("--in", pack_in)->required();
    packc->add_option("--out", pack_out)->required();

    std::string inspect_ckpt;
    bool per_tensor = false;
    auto* inspect = app.add_subcommand("inspect", "print the size report of a checkpoint");
    inspect->add_option("--ckpt", inspect_ckpt)->required();
    inspect->add_flag("--per-tensor", per_tensor);

    uint64_t pilot_seed = 0;
    bool pilot_alpha_init = false;
    std::string pilot_csv;
    auto* pilot = app.add_subcommand("pilot", "activation pilot: ternary vs ternary+RMS vs full precision");
    pilot->add_option("--seed", pilot_seed);
    pilot->add_flag("--alpha-init", pilot_alpha_init, "scale the ternary layer by the alpha init rule instead of 1");
    pilot->add_option("--csv", pilot_csv, "also write comma-separated statistics");

    std::string bench_ckpt;
    int bench_batch = 8, bench_reps = 5;
    uint64_t bench_seed = 0;
    auto* bench = app.add_subcommand("bench", "time packed vs dense inference forwards");
    bench->add_option("--ckpt", bench_ckpt, "master checkpoint")->required();
    bench->add_option("--batch", bench_batch);
    bench->add_option("--reps", bench_reps);
    bench->add_option("--seed", bench_seed);

    CaptureArgs ca;
    auto* capture = app.add_subcommand("capture", "adaLN modulation statistics at the first sampling step");
    capture->add_option("--ckpt", ca.ckpt)->required();
    capture->add_option("--block", ca.block);
    capture->add_option("--site", ca.site, "shift_msa|scale_msa|gate_msa|shift_mlp|scale_mlp|gate_mlp");
    capture->add_option("--t", ca.timestep, "timestep (default: T-1)");
    capture->add_option("--class", ca.label);
    capture->add_option("--cfg-scale", ca.cfg_scale);
    capture->add_option("--seed", ca.seed);
    capture->add_option("--csv", ca.csv);

    std::vector<std::string> rest(args.begin() + (args.empty() ? 0 : 1), args.end());
    std::reverse(rest.begin(), rest.end());
    try {
        app.parse(std::move(rest));
    } catch (const CLI::Success& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitUsage;
    }

    try {
        if (*train) return cmd_train(ta, out);
        if (*sample) return cmd_sample(sa, out);
        if (*packc) return cmd_pack(pack_in, pack_out, out);
        if (*inspect) return cmd_inspect(inspect_ckpt, per_tensor, out);
        if (*pilot) return cmd_pilot(pilot_seed, pilot_alpha_init, pilot_csv, out);
        if (*bench) return cmd_bench(bench_ckpt, bench_batch, bench_reps, bench_seed, out);
        if (*capture) return cmd_capture(ca, out);
    } catch (const train::DivergenceError& e) {
        err << "error: training diverged: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const dit::ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const pack::FormatError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const DomainError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace terdit::cli
