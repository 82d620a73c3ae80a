#include "terdit/dit.hpp"

#include "terdit/linear_kernel.hpp"

#include <cmath>
#include <numbers>
#include <set>

namespace terdit::dit {

namespace {

template <typename T>
using Col = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
Mat<T> sigmoid(const Mat<T>& x) {
    return ((-x.array()).exp() + T(1)).inverse().matrix();
}

template <typename T>
Mat<T> silu(const Mat<T>& x) {
    return x.cwiseProduct(sigmoid(x));
}

// d silu(x) / dx
template <typename T>
Mat<T> silu_grad(const Mat<T>& x) {
    const Mat<T> s = sigmoid(x);
    return (s.array() * (T(1) + x.array() * (T(1) - s.array()))).matrix();
}

template <typename T>
Linear<T> make_linear(int in, int out, bool bias, bool ternary) {
    Linear<T> l;
    l.in = in;
    l.out = out;
    l.has_bias = bias;
    l.ternary = ternary;
    l.weight.value = Mat<T>::Zero(out, in);
    l.weight.grad = Mat<T>::Zero(out, in);
    if (bias) {
        l.bias.value = Mat<T>::Zero(1, out);
        l.bias.grad = Mat<T>::Zero(1, out);
    }
    if (ternary) {
        l.alpha.value = Mat<T>::Ones(1, 1);
        l.alpha.grad = Mat<T>::Zero(1, 1);
    }
    return l;
}

template <typename T>
Param<T> make_param(int rows, int cols, T fill = T(0)) {
    return {Mat<T>::Constant(rows, cols, fill), Mat<T>::Zero(rows, cols)};
}

double xavier_sigma(int in, int out) { return std::sqrt(2.0 / (in + out)); }

template <typename T>
void xavier_uniform(Mat<T>& w, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(u(rng));
}

template <typename T>
void normal_fill(Mat<T>& w, double std, Rng& rng) {
    std::normal_distribution<double> n(0.0, std);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(n(rng));
}

template <typename T>
void init_alpha(Linear<T>& l, Rng& rng) {
    if (l.ternary) l.alpha.value(0, 0) = static_cast<T>(quant::init_alpha(xavier_sigma(l.in, l.out), rng));
}

// Inference runs every linear through the panel kernel shared with packed weights, so
// a packed model reproduces its master bit for bit. Training uses a blocked GEMM.
template <typename T>
LinearPrep<T> prepare(const Linear<T>& l, bool training) {
    LinearPrep<T> p;
    if (l.packed) {
        require(!training, "cannot train through packed weights");
        p.packed = l.packed.get();
        return p;
    }
    const Mat<T>* w = &l.weight.value;
    if (l.ternary) {
        p.codes.emplace(quant::ternarize(l.weight.value, static_cast<double>(l.alpha.value(0, 0))));
        p.effective = p.codes->template effective<T>();
        w = &p.effective;
    }
    if (!training) p.panels = kernel::make_panels<T>(l.out, l.in, [&](size_t j, size_t k) { return (*w)(j, k); });
    return p;
}

template <typename T>
const Mat<T>& weight_of(const Linear<T>& l, const LinearPrep<T>& p) {
    return l.ternary ? p.effective : l.weight.value;
}

template <typename T>
Mat<T> apply(const Linear<T>& l, const LinearPrep<T>& p, const Mat<T>& x) {
    require(x.cols() == l.in, "linear: input width does not match layer");
    const T* bias = l.has_bias ? l.bias.value.data() : nullptr;
    if (p.packed) return pack::packed_linear<T>(x, *p.packed, bias);
    Mat<T> y(x.rows(), l.out);
    if (p.panels.empty()) {
        y.noalias() = x * weight_of(l, p).transpose();
        if (bias) y.rowwise() += l.bias.value.row(0);
        return y;
    }
    kernel::linear_forward<T>(x.data(), x.rows(), x.cols(), l.in, p.panels, l.out, bias, y.data(), l.out);
    return y;
}

template <typename T>
void linear_backward(Linear<T>& l, const LinearPrep<T>& p, const Mat<T>& x, const Mat<T>& dy, Mat<T>* dx) {
    require(!p.packed, "cannot backpropagate through packed weights");
    Mat<T> dw;
    dw.noalias() = dy.transpose() * x;
    if (l.ternary) l.alpha.grad(0, 0) += static_cast<T>(quant::alpha_gradient(dw, *p.codes));
    l.weight.grad += dw;
    if (l.has_bias) l.bias.grad += dy.colwise().sum();
    if (dx) dx->noalias() = dy * weight_of(l, p);
}

template <typename T>
Mat<T> rms_rows(const Mat<T>& x, const Mat<T>& gain, double eps, Col<T>& inv) {
    const auto d = static_cast<T>(x.cols());
    inv.resize(x.rows());
    Mat<T> y(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        inv(i) = T(1) / std::sqrt(x.row(i).squaredNorm() / d + static_cast<T>(eps));
        y.row(i) = (x.row(i) * inv(i)).cwiseProduct(gain);
    }
    return y;
}

template <typename T>
Mat<T> rms_rows_backward(const Mat<T>& x, const Mat<T>& gain, const Col<T>& inv, const Mat<T>& dy, Mat<T>& dgain) {
    const auto d = static_cast<T>(x.cols());
    Mat<T> dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const RowVec<T> xhat = x.row(i) * inv(i);
        dgain += dy.row(i).cwiseProduct(xhat);
        const RowVec<T> gdy = dy.row(i).cwiseProduct(gain);
        dx.row(i) = inv(i) * (gdy - xhat * (gdy.dot(xhat) / d));
    }
    return dx;
}

// rows of x are grouped per sample (n consecutive rows each); shift/scale come from mod row b.
template <typename T>
Mat<T> modulate(const Mat<T>& x, const Mat<T>& mod, int n, Eigen::Index shift, Eigen::Index scale) {
    const auto d = x.cols();
    Mat<T> y(x.rows(), d);
    for (Eigen::Index b = 0; b < mod.rows(); ++b) {
        const RowVec<T> sc = mod.row(b).segment(scale, d).array() + T(1);
        const RowVec<T> sh = mod.row(b).segment(shift, d);
        for (int r = 0; r < n; ++r) y.row(b * n + r) = x.row(b * n + r).cwiseProduct(sc) + sh;
    }
    return y;
}

template <typename T>
void modulate_backward(const Mat<T>& x, const Mat<T>& mod, int n, Eigen::Index shift, Eigen::Index scale,
                       const Mat<T>& dy, Mat<T>& dx, Mat<T>& dmod) {
    const auto d = x.cols();
    dx.resize(x.rows(), d);
    for (Eigen::Index b = 0; b < mod.rows(); ++b) {
        const RowVec<T> sc = mod.row(b).segment(scale, d).array() + T(1);
        auto rows = Eigen::seqN(b * n, n);
        dx(rows, Eigen::all) = dy(rows, Eigen::all).array().rowwise() * sc.array();
        dmod.row(b).segment(scale, d) += dy(rows, Eigen::all).cwiseProduct(x(rows, Eigen::all)).colwise().sum();
        dmod.row(b).segment(shift, d) += dy(rows, Eigen::all).colwise().sum();
    }
}

// out = x + gate_b ⊙ y
template <typename T>
Mat<T> gated_residual(const Mat<T>& x, const Mat<T>& y, const Mat<T>& mod, int n, Eigen::Index gate) {
    const auto d = x.cols();
    Mat<T> out(x.rows(), d);
    for (Eigen::Index b = 0; b < mod.rows(); ++b) {
        const RowVec<T> g = mod.row(b).segment(gate, d);
        for (int r = 0; r < n; ++r) out.row(b * n + r) = x.row(b * n + r) + y.row(b * n + r).cwiseProduct(g);
    }
    return out;
}

template <typename T>
Mat<T> gated_residual_backward(const Mat<T>& y, const Mat<T>& mod, int n, Eigen::Index gate, const Mat<T>& dout,
                               Mat<T>& dmod) {
    const auto d = y.cols();
    Mat<T> dy(y.rows(), d);
    for (Eigen::Index b = 0; b < mod.rows(); ++b) {
        const RowVec<T> g = mod.row(b).segment(gate, d);
        auto rows = Eigen::seqN(b * n, n);
        dy(rows, Eigen::all) = dout(rows, Eigen::all).array().rowwise() * g.array();
        dmod.row(b).segment(gate, d) += dout(rows, Eigen::all).cwiseProduct(y(rows, Eigen::all)).colwise().sum();
    }
    return dy;
}

template <typename T>
Mat<T> attention(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int batch, int n, int heads,
                 std::vector<Mat<T>>* probs) {
    const int dh = static_cast<int>(q.cols()) / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Mat<T> o(q.rows(), q.cols());
    if (probs) probs->assign(static_cast<size_t>(batch) * heads, Mat<T>());
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const Mat<T> qb = q.block(b * n, h * dh, n, dh);
            const Mat<T> kb = k.block(b * n, h * dh, n, dh);
            const Mat<T> vb = v.block(b * n, h * dh, n, dh);
            Mat<T> s = (qb * kb.transpose()) * scale;
            for (int i = 0; i < n; ++i) {
                const T m = s.row(i).maxCoeff();
                s.row(i) = (s.row(i).array() - m).exp();
                s.row(i) /= s.row(i).sum();
            }
            o.block(b * n, h * dh, n, dh) = s * vb;
            if (probs) (*probs)[static_cast<size_t>(b) * heads + h] = std::move(s);
        }
    }
    return o;
}

template <typename T>
void attention_backward(const BlockCache<T>& bc, int batch, int n, int heads, const Mat<T>& dout, Mat<T>& dq,
                        Mat<T>& dk, Mat<T>& dv) {
    const int dh = static_cast<int>(bc.q.cols()) / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    dq.resize(bc.q.rows(), bc.q.cols());
    dk.resize(bc.q.rows(), bc.q.cols());
    dv.resize(bc.q.rows(), bc.q.cols());
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const Mat<T>& p = bc.probs[static_cast<size_t>(b) * heads + h];
            const Mat<T> qb = bc.q.block(b * n, h * dh, n, dh);
            const Mat<T> kb = bc.k.block(b * n, h * dh, n, dh);
            const Mat<T> vb = bc.v.block(b * n, h * dh, n, dh);
            const Mat<T> dob = dout.block(b * n, h * dh, n, dh);
            const Mat<T> dp = dob * vb.transpose();
            dv.block(b * n, h * dh, n, dh) = p.transpose() * dob;
            const Col<T> rs = dp.cwiseProduct(p).rowwise().sum();
            const Mat<T> ds = p.cwiseProduct(dp.colwise() - rs) * scale;
            dq.block(b * n, h * dh, n, dh) = ds * kb;
            dk.block(b * n, h * dh, n, dh) = ds.transpose() * qb;
        }
    }
}

constexpr std::string_view kSiteNames[] = {"shift_msa", "scale_msa", "gate_msa", "shift_mlp", "scale_mlp", "gate_mlp"};

}  // namespace

std::string_view site_name(ModSite s) { return kSiteNames[static_cast<int>(s)]; }

ModSite parse_site(std::string_view name) {
    for (int i = 0; i < 6; ++i)
        if (kSiteNames[i] == name) return static_cast<ModSite>(i);
    throw DomainError("unknown modulation site '" + std::string(name) + "'");
}

template <typename T>
Mat<T> patchify(const ImageT<T>& img, int p) {
    require(p > 0 && img.height % p == 0 && img.width % p == 0, "patchify: image size not divisible by patch size");
    const int gh = img.height / p;
    const int gw = img.width / p;
    Mat<T> tok(gh * gw, p * p * img.channels);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx)
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int c = 0; c < img.channels; ++c)
                        tok(gy * gw + gx, (py * p + px) * img.channels + c) = img.at(c, gy * p + py, gx * p + px);
    return tok;
}

template <typename T>
ImageT<T> unpatchify(const Mat<T>& tok, int channels, int height, int width, int p) {
    require(p > 0 && height % p == 0 && width % p == 0, "unpatchify: image size not divisible by patch size");
    const int gh = height / p;
    const int gw = width / p;
    require(tok.rows() == gh * gw && tok.cols() == p * p * channels, "unpatchify: token shape mismatch");
    ImageT<T> img(channels, height, width);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx)
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int c = 0; c < channels; ++c)
                        img.at(c, gy * p + py, gx * p + px) = tok(gy * gw + gx, (py * p + px) * channels + c);
    return img;
}

template <typename T>
RowVec<T> sinusoidal_embedding(int t, int dim) {
    require(dim > 0, "sinusoidal_embedding: dim must be positive");
    const int half = dim / 2;
    RowVec<T> e = RowVec<T>::Zero(dim);
    for (int i = 0; i < half; ++i) {
        const double f = std::exp(-std::log(10000.0) * i / half);
        e(i) = static_cast<T>(std::cos(t * f));
        e(half + i) = static_cast<T>(std::sin(t * f));
    }
    return e;
}

template <typename T>
RowVec<T> rms_norm(const RowVec<T>& x, const RowVec<T>& gain, double eps) {
    require(x.size() == gain.size() && x.size() > 0, "rms_norm: size mismatch");
    Col<T> inv;
    return rms_rows<T>(Mat<T>(x), Mat<T>(gain), eps, inv);
}

// ---- construction --------------------------------------------------------------

template <typename T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg.hidden_dim;
    const bool q = cfg.quantize_blocks;
    x_embedder = make_linear<T>(cfg.patch_dim(), d, true, false);
    pos_embed = make_param<T>(cfg.tokens(), d);
    t_fc1 = make_linear<T>(cfg.freq_dim(), d, true, false);
    t_fc2 = make_linear<T>(d, d, true, false);
    y_table = make_param<T>(cfg.num_classes + 1, d);
    blocks.resize(cfg.depth);
    for (auto& b : blocks) {
        b.attn_norm.gain = make_param<T>(1, d, T(1));
        b.wq = make_linear<T>(d, d, false, q);
        b.wk = make_linear<T>(d, d, false, q);
        b.wv = make_linear<T>(d, d, false, q);
        b.wo = make_linear<T>(d, d, false, q);
        b.ffn_norm.gain = make_param<T>(1, d, T(1));
        b.w1 = make_linear<T>(d, cfg.ffn_dim(), false, q);
        b.w3 = make_linear<T>(d, cfg.ffn_dim(), false, q);
        b.w2 = make_linear<T>(cfg.ffn_dim(), d, false, q);
        b.adaln = make_linear<T>(d, 6 * d, true, q);
        b.adaln_rms = cfg.adaln_rms;
        if (cfg.adaln_rms) b.adaln_norm.gain = make_param<T>(1, 6 * d, T(1));
    }
    final_norm.gain = make_param<T>(1, d, T(1));
    final_adaln = make_linear<T>(d, 2 * d, true, false);
    final_linear = make_linear<T>(d, cfg.patch_dim(), true, false);
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, Rng& rng) : Model(cfg) {
    xavier_uniform(x_embedder.weight.value, rng);
    normal_fill(pos_embed.value, 0.02, rng);
    normal_fill(t_fc1.weight.value, 0.02, rng);
    normal_fill(t_fc2.weight.value, 0.02, rng);
    normal_fill(y_table.value, 0.02, rng);
    for (auto& b : blocks) {
        for (Linear<T>* l : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w3, &b.w2}) {
            xavier_uniform(l->weight.value, rng);
            init_alpha(*l, rng);
        }
        // adaLN-Zero: weights stay zero; alpha still drawn from the scale a Xavier layer would have.
        init_alpha(b.adaln, rng);
    }
}

// ---- forward -------------------------------------------------------------------

template <typename T>
RowVec<T> Model<T>::timestep_embedding(int t) const {
    require(t >= 0 && t < cfg_.num_timesteps, "timestep " + std::to_string(t) + " outside [0, T)");
    const Mat<T> f = sinusoidal_embedding<T>(t, cfg_.freq_dim());
    const Mat<T> h = silu(apply(t_fc1, prepare(t_fc1, false), f));
    return apply(t_fc2, prepare(t_fc2, false), h);
}

template <typename T>
RowVec<T> Model<T>::label_embedding(int label, bool drop) const {
    if (drop) return y_table.value.row(cfg_.num_classes);
    require(label >= 0 && label < cfg_.num_classes, "class label " + std::to_string(label) + " out of range");
    return y_table.value.row(label);
}

template <typename T>
Mat<T> Model<T>::condition(std::span<const Conditioning> cond) const {
    Mat<T> c(cond.size(), cfg_.hidden_dim);
    for (size_t b = 0; b < cond.size(); ++b)
        c.row(b) = timestep_embedding(cond[b].timestep) + label_embedding(cond[b].label, cond[b].drop);
    return c;
}

template <typename T>
Mat<T> Model<T>::adaln_modulation(int index, const Mat<T>& c) const {
    require(index >= 0 && index < static_cast<int>(blocks.size()), "block index out of range");
    require(c.cols() == cfg_.hidden_dim, "adaln_modulation: condition width mismatch");
    const auto& b = blocks[index];
    Mat<T> m = apply(b.adaln, prepare(b.adaln, false), silu(c));
    if (!b.adaln_rms) return m;
    Col<T> inv;
    return rms_rows(m, b.adaln_norm.gain.value, cfg_.rms_eps, inv);
}

template <typename T>
Mat<T> Model<T>::block_forward(int index, const Mat<T>& x, const Mat<T>& c) const {
    require(index >= 0 && index < static_cast<int>(blocks.size()), "block index out of range");
    require(c.cols() == cfg_.hidden_dim && x.cols() == cfg_.hidden_dim, "block_forward: width mismatch");
    require(c.rows() > 0 && x.rows() == c.rows() * cfg_.tokens(), "block_forward: token count mismatch");
    BlockCache<T> bc;
    return block_forward_impl(index, x, silu(c), bc, false, nullptr);
}

template <typename T>
Mat<T> Model<T>::block_forward_impl(int index, const Mat<T>& x, const Mat<T>& cs, BlockCache<T>& bc, bool keep,
                                    const ModulationObserver<T>* observer) const {
    const auto& b = blocks[index];
    const int n = cfg_.tokens();
    const int batch = static_cast<int>(cs.rows());
    const Eigen::Index d = cfg_.hidden_dim;
    const double eps = cfg_.rms_eps;

    bc.ada_prep = prepare(b.adaln, keep);
    bc.q_prep = prepare(b.wq, keep);
    bc.k_prep = prepare(b.wk, keep);
    bc.v_prep = prepare(b.wv, keep);
    bc.o_prep = prepare(b.wo, keep);
    bc.w1_prep = prepare(b.w1, keep);
    bc.w3_prep = prepare(b.w3, keep);
    bc.w2_prep = prepare(b.w2, keep);

    bc.m = apply(b.adaln, bc.ada_prep, cs);
    bc.mod = b.adaln_rms ? rms_rows(bc.m, b.adaln_norm.gain.value, eps, bc.inv_m) : bc.m;
    if (observer && *observer) (*observer)(index, bc.mod);

    bc.n1 = rms_rows(x, b.attn_norm.gain.value, eps, bc.inv1);
    bc.a = modulate(bc.n1, bc.mod, n, 0 * d, 1 * d);
    bc.q = apply(b.wq, bc.q_prep, bc.a);
    bc.k = apply(b.wk, bc.k_prep, bc.a);
    bc.v = apply(b.wv, bc.v_prep, bc.a);
    bc.o = attention(bc.q, bc.k, bc.v, batch, n, cfg_.num_heads, keep ? &bc.probs : nullptr);
    bc.ao = apply(b.wo, bc.o_prep, bc.o);
    bc.h = gated_residual(x, bc.ao, bc.mod, n, 2 * d);

    bc.n2 = rms_rows(bc.h, b.ffn_norm.gain.value, eps, bc.inv2);
    bc.f = modulate(bc.n2, bc.mod, n, 3 * d, 4 * d);
    bc.g = apply(b.w1, bc.w1_prep, bc.f);
    bc.u = apply(b.w3, bc.w3_prep, bc.f);
    bc.z = silu(bc.g).cwiseProduct(bc.u);
    bc.fo = apply(b.w2, bc.w2_prep, bc.z);
    Mat<T> out = gated_residual(bc.h, bc.fo, bc.mod, n, 5 * d);
    if (keep) bc.x = x;
    return out;
}

template <typename T>
Mat<T> Model<T>::forward(const Mat<T>& tokens, std::span<const Conditioning> cond, ForwardCache<T>* cache,
                         const ModulationObserver<T>* observer) const {
    const int n = cfg_.tokens();
    const int batch = static_cast<int>(cond.size());
    require(batch > 0, "forward: empty batch");
    require(tokens.rows() == static_cast<Eigen::Index>(batch) * n && tokens.cols() == cfg_.patch_dim(),
            "forward: token matrix shape mismatch");
    ForwardCache<T> local;
    ForwardCache<T>& fc = cache ? *cache : local;
    const bool keep = cache != nullptr;
    fc.batch = batch;

    fc.freq.resize(batch, cfg_.freq_dim());
    fc.label_rows.resize(batch);
    Mat<T> ye(batch, cfg_.hidden_dim);
    for (int b = 0; b < batch; ++b) {
        const auto& c = cond[b];
        require(c.timestep >= 0 && c.timestep < cfg_.num_timesteps,
                "timestep " + std::to_string(c.timestep) + " outside [0, T)");
        require(c.drop || (c.label >= 0 && c.label < cfg_.num_classes),
                "class label " + std::to_string(c.label) + " out of range");
        fc.freq.row(b) = sinusoidal_embedding<T>(c.timestep, cfg_.freq_dim());
        fc.label_rows[b] = c.drop ? cfg_.num_classes : c.label;
        ye.row(b) = y_table.value.row(fc.label_rows[b]);
    }
    fc.t1_prep = prepare(t_fc1, keep);
    fc.t2_prep = prepare(t_fc2, keep);
    fc.h1 = apply(t_fc1, fc.t1_prep, fc.freq);
    fc.a1 = silu(fc.h1);
    fc.c = apply(t_fc2, fc.t2_prep, fc.a1) + ye;
    fc.cs = silu(fc.c);

    fc.x_prep = prepare(x_embedder, keep);
    Mat<T> x = apply(x_embedder, fc.x_prep, tokens);
    for (int b = 0; b < batch; ++b) x.middleRows(static_cast<Eigen::Index>(b) * n, n) += pos_embed.value;

    fc.blocks.resize(blocks.size());
    for (size_t i = 0; i < blocks.size(); ++i) {
        x = block_forward_impl(static_cast<int>(i), x, fc.cs, fc.blocks[i], keep, observer);
        if (!keep) fc.blocks[i] = BlockCache<T>();
    }

    const Eigen::Index d = cfg_.hidden_dim;
    fc.fa_prep = prepare(final_adaln, keep);
    fc.fl_prep = prepare(final_linear, keep);
    fc.mf = apply(final_adaln, fc.fa_prep, fc.cs);
    fc.nf = rms_rows(x, final_norm.gain.value, cfg_.rms_eps, fc.inv_f);
    fc.yf = modulate(fc.nf, fc.mf, n, 0, d);
    Mat<T> out = apply(final_linear, fc.fl_prep, fc.yf);
    if (keep) {
        fc.tokens = tokens;
        fc.final_x = std::move(x);
    }
    return out;
}

template <typename T>
ImageT<T> Model<T>::predict(const ImageT<T>& x_t, int t, int label, bool drop) const {
    const Conditioning c{t, label, drop};
    return predict(std::span<const ImageT<T>>(&x_t, 1), std::span<const Conditioning>(&c, 1)).front();
}

template <typename T>
std::vector<ImageT<T>> Model<T>::predict(std::span<const ImageT<T>> x_t, std::span<const Conditioning> cond,
                                         const ModulationObserver<T>* observer) const {
    require(x_t.size() == cond.size(), "predict: image and conditioning counts differ");
    const int n = cfg_.tokens();
    Mat<T> tokens(static_cast<Eigen::Index>(x_t.size()) * n, cfg_.patch_dim());
    for (size_t b = 0; b < x_t.size(); ++b) {
        const auto& img = x_t[b];
        require(img.channels == cfg_.channels && img.height == cfg_.image_size && img.width == cfg_.image_size,
                "predict: image shape does not match model config");
        tokens.middleRows(static_cast<Eigen::Index>(b) * n, n) = patchify(img, cfg_.patch_size);
    }
    const Mat<T> out = forward(tokens, cond, nullptr, observer);
    std::vector<ImageT<T>> imgs;
    imgs.reserve(x_t.size());
    for (size_t b = 0; b < x_t.size(); ++b)
        imgs.push_back(unpatchify<T>(out.middleRows(static_cast<Eigen::Index>(b) * n, n), cfg_.channels,
                                     cfg_.image_size, cfg_.image_size, cfg_.patch_size));
    return imgs;
}

// ---- backward ------------------------------------------------------------------

template <typename T>
Mat<T> Model<T>::block_backward(int index, const BlockCache<T>& bc, const Mat<T>& cs, const Mat<T>& dout,
                                Mat<T>& dcs) {
    auto& b = blocks[index];
    const int n = cfg_.tokens();
    const int batch = static_cast<int>(cs.rows());
    const Eigen::Index d = cfg_.hidden_dim;
    Mat<T> dmod = Mat<T>::Zero(batch, 6 * d);

    const Mat<T> dfo = gated_residual_backward(bc.fo, bc.mod, n, 5 * d, dout, dmod);
    Mat<T> dz;
    linear_backward(b.w2, bc.w2_prep, bc.z, dfo, &dz);
    const Mat<T> dg = dz.cwiseProduct(bc.u).cwiseProduct(silu_grad(bc.g));
    const Mat<T> du = dz.cwiseProduct(silu(bc.g));
    Mat<T> df, df3;
    linear_backward(b.w1, bc.w1_prep, bc.f, dg, &df);
    linear_backward(b.w3, bc.w3_prep, bc.f, du, &df3);
    df += df3;
    Mat<T> dn2;
    modulate_backward(bc.n2, bc.mod, n, 3 * d, 4 * d, df, dn2, dmod);
    Mat<T> dh = dout + rms_rows_backward(bc.h, b.ffn_norm.gain.value, bc.inv2, dn2, b.ffn_norm.gain.grad);

    const Mat<T> dao = gated_residual_backward(bc.ao, bc.mod, n, 2 * d, dh, dmod);
    Mat<T> dob;
    linear_backward(b.wo, bc.o_prep, bc.o, dao, &dob);
    Mat<T> dq, dk, dv;
    attention_backward(bc, batch, n, cfg_.num_heads, dob, dq, dk, dv);
    Mat<T> da, dtmp;
    linear_backward(b.wq, bc.q_prep, bc.a, dq, &da);
    linear_backward(b.wk, bc.k_prep, bc.a, dk, &dtmp);
    da += dtmp;
    linear_backward(b.wv, bc.v_prep, bc.a, dv, &dtmp);
    da += dtmp;
    Mat<T> dn1;
    modulate_backward(bc.n1, bc.mod, n, 0, d, da, dn1, dmod);
    Mat<T> dx = dh + rms_rows_backward(bc.x, b.attn_norm.gain.value, bc.inv1, dn1, b.attn_norm.gain.grad);

    const Mat<T> dm =
        b.adaln_rms ? rms_rows_backward(bc.m, b.adaln_norm.gain.value, bc.inv_m, dmod, b.adaln_norm.gain.grad) : dmod;
    Mat<T> dc;
    linear_backward(b.adaln, bc.ada_prep, cs, dm, &dc);
    dcs += dc;
    return dx;
}

template <typename T>
void Model<T>::backward(const ForwardCache<T>& fc, const Mat<T>& d_out, Mat<T>* d_tokens) {
    const int n = cfg_.tokens();
    const Eigen::Index d = cfg_.hidden_dim;
    require(fc.batch > 0 && fc.blocks.size() == blocks.size() && fc.tokens.rows() == d_out.rows(),
            "backward: cache does not come from a cached forward pass of this model");
    require(d_out.cols() == cfg_.patch_dim(), "backward: gradient shape mismatch");

    Mat<T> dcs = Mat<T>::Zero(fc.batch, d);
    Mat<T> dmf = Mat<T>::Zero(fc.batch, 2 * d);
    Mat<T> dyf, dnf;
    linear_backward(final_linear, fc.fl_prep, fc.yf, d_out, &dyf);
    modulate_backward(fc.nf, fc.mf, n, 0, d, dyf, dnf, dmf);
    Mat<T> dx = rms_rows_backward(fc.final_x, final_norm.gain.value, fc.inv_f, dnf, final_norm.gain.grad);
    Mat<T> dcf;
    linear_backward(final_adaln, fc.fa_prep, fc.cs, dmf, &dcf);
    dcs += dcf;

    for (int i = static_cast<int>(blocks.size()) - 1; i >= 0; --i) dx = block_backward(i, fc.blocks[i], fc.cs, dx, dcs);

    for (int b = 0; b < fc.batch; ++b) pos_embed.grad += dx.middleRows(static_cast<Eigen::Index>(b) * n, n);
    linear_backward(x_embedder, fc.x_prep, fc.tokens, dx, d_tokens);

    const Mat<T> dc = dcs.cwiseProduct(silu_grad(fc.c));
    for (int b = 0; b < fc.batch; ++b) y_table.grad.row(fc.label_rows[b]) += dc.row(b);
    Mat<T> da1;
    linear_backward(t_fc2, fc.t2_prep, fc.a1, dc, &da1);
    linear_backward<T>(t_fc1, fc.t1_prep, fc.freq, Mat<T>(da1.cwiseProduct(silu_grad(fc.h1))), nullptr);
}

template <typename T>
void Model<T>::zero_grad() {
    for_each_param([](const std::string&, ParamRole, Param<T>& p) { p.grad.setZero(p.value.rows(), p.value.cols()); });
}

template <typename T>
bool Model<T>::is_packed() const {
    bool packed = false;
    const_cast<Model<T>*>(this)->for_each_block_linear(
        [&](const std::string&, Linear<T>& l) { packed = packed || static_cast<bool>(l.packed); });
    return packed;
}

// ---- checkpoints ---------------------------------------------------------------

pack::Checkpoint to_checkpoint(const Model<float>& m) {
    require(!m.is_packed(), "to_checkpoint: model holds packed weights; save the packed checkpoint instead");
    pack::Checkpoint c;
    c.config_text = to_config_text(m.config());
    const auto specs = parameter_specs(m.config());
    size_t i = 0;
    m.for_each_param([&](const std::string& name, ParamRole, const Param<float>& p) {
        const auto& s = specs.at(i++);
        require(s.name == name, "parameter order mismatch at '" + name + "'");
        c.tensors.push_back(pack::make_dense(name, s.shape, std::vector<float>(p.value.data(), p.value.data() + p.value.size())));
    });
    return c;
}

Model<float> from_checkpoint(const pack::Checkpoint& c) {
    const ModelConfig cfg = parse_config_text(c.config_text);
    Model<float> m(cfg);
    std::set<std::string> consumed;
    m.for_each_block_linear([&](const std::string& prefix, Linear<float>& l) {
        const auto* t = c.find(prefix + ".weight");
        if (!t || !t->is_packed()) return;
        require(l.ternary, "tensor '" + t->name + "' is packed but the layer is not ternary");
        const auto& p = t->packed();
        require(p.rows == static_cast<uint64_t>(l.out) && p.cols == static_cast<uint64_t>(l.in),
                "tensor '" + t->name + "' has the wrong shape");
        require(!c.find(prefix + ".alpha"), "packed tensor '" + t->name + "' must not carry a separate alpha");
        l.packed = std::make_shared<const pack::PackedTernary>(p);
        l.weight.value.resize(0, 0);
        l.weight.grad.resize(0, 0);
        l.alpha.value(0, 0) = p.alpha;
        consumed.insert(prefix + ".weight");
        consumed.insert(prefix + ".alpha");
    });
    const auto specs = parameter_specs(cfg);
    size_t i = 0;
    m.for_each_param([&](const std::string& name, ParamRole, Param<float>& p) {
        const auto& s = specs.at(i++);
        if (consumed.count(name)) return;
        const auto* t = c.find(name);
        require(t != nullptr, "checkpoint is missing tensor '" + name + "'");
        require(!t->is_packed(), "tensor '" + name + "' must be dense");
        require(t->shape == s.shape, "tensor '" + name + "' has the wrong shape");
        std::copy(t->dense().values.begin(), t->dense().values.end(), p.value.data());
        consumed.insert(name);
    });
    for (const auto& t : c.tensors) require(consumed.count(t.name) > 0, "unexpected tensor '" + t.name + "' in checkpoint");
    return m;
}

pack::Checkpoint pack_checkpoint(const pack::Checkpoint& master) {
    require(!master.has_packed(), "checkpoint is already packed");
    const ModelConfig cfg = parse_config_text(master.config_text);
    require(cfg.quantize_blocks && cfg.depth > 0, "checkpoint has no ternary layers to pack");
    std::set<std::string> ternary;
    for (const auto& s : parameter_specs(cfg))
        if (s.role == ParamRole::TernaryWeight) ternary.insert(s.name);

    pack::Checkpoint out;
    out.config_text = master.config_text;
    for (const auto& t : master.tensors) {
        if (ternary.count(t.name)) {
            const std::string prefix = t.name.substr(0, t.name.size() - std::string(".weight").size());
            const auto* a = master.find(prefix + ".alpha");
            require(a && !a->is_packed() && a->dense().values.size() == 1, "missing alpha for '" + t.name + "'");
            require(t.shape.size() == 2, "tensor '" + t.name + "' must be a matrix");
            Mat<float> w(t.shape[0], t.shape[1]);
            std::copy(t.dense().values.begin(), t.dense().values.end(), w.data());
            const auto tt = quant::ternarize(w, static_cast<double>(a->dense().values[0]));
            out.tensors.push_back(pack::make_packed(t.name, pack::pack_tensor(tt)));
        } else if (t.name.size() > 6 && t.name.ends_with(".alpha") &&
                   ternary.count(t.name.substr(0, t.name.size() - 6) + ".weight")) {
            continue;
        } else {
            out.tensors.push_back(t);
        }
    }
    return out;
}

template Mat<float> patchify(const ImageT<float>&, int);
template Mat<double> patchify(const ImageT<double>&, int);
template ImageT<float> unpatchify(const Mat<float>&, int, int, int, int);
template ImageT<double> unpatchify(const Mat<double>&, int, int, int, int);
template RowVec<float> sinusoidal_embedding(int, int);
template RowVec<double> sinusoidal_embedding(int, int);
template RowVec<float> rms_norm(const RowVec<float>&, const RowVec<float>&, double);
template RowVec<double> rms_norm(const RowVec<double>&, const RowVec<double>&, double);
template class Model<float>;
template class Model<double>;

}  // namespace terdit::dit
