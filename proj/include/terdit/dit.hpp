#pragma once

#include "terdit/bitpack.hpp"
#include "terdit/checkpoint.hpp"
#include "terdit/model_config.hpp"
#include "terdit/ternary_quant.hpp"
#include "terdit/tensor.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace terdit::dit {

template <typename T>
struct Param {
    Mat<T> value;
    Mat<T> grad;
};

/// y = x W^T (+ b). In ternary mode the forward uses alpha * RoundClip(W / (gamma + eps)),
/// recomputed from the master weight on every call; `packed` (deployment form) replaces the
/// master weight entirely.
template <typename T>
struct Linear {
    int in = 0;
    int out = 0;
    bool ternary = false;
    bool has_bias = false;
    Param<T> weight;  // out x in
    Param<T> bias;    // 1 x out
    Param<T> alpha;   // 1 x 1
    std::shared_ptr<const pack::PackedTernary> packed;
};

template <typename T>
struct RmsNorm {
    Param<T> gain;  // 1 x dim
};

template <typename T>
struct DiTBlock {
    RmsNorm<T> attn_norm;
    Linear<T> wq, wk, wv, wo;
    RmsNorm<T> ffn_norm;
    Linear<T> w1, w3, w2;  // gate, up, down
    Linear<T> adaln;       // hidden -> 6 * hidden
    bool adaln_rms = false;
    RmsNorm<T> adaln_norm;  // 6 * hidden, used iff adaln_rms
};

/// The six chunks of an adaLN modulation vector, in storage order.
enum class ModSite { ShiftMsa = 0, ScaleMsa, GateMsa, ShiftMlp, ScaleMlp, GateMlp };

std::string_view site_name(ModSite s);
/// Throws DomainError for an unknown name.
ModSite parse_site(std::string_view name);

/// Receives each block's (post-norm) modulation matrix, batch x 6*hidden.
template <typename T>
using ModulationObserver = std::function<void(int block, const Mat<T>& modulation)>;

template <typename T>
struct LinearPrep {
    std::optional<quant::TernaryTensor> codes;
    Mat<T> effective;
    std::vector<T> panels;
    const pack::PackedTernary* packed = nullptr;
};

template <typename T>
struct BlockCache {
    LinearPrep<T> q_prep, k_prep, v_prep, o_prep, w1_prep, w3_prep, w2_prep, ada_prep;
    Mat<T> m, mod;
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_m, inv1, inv2;
    Mat<T> x, n1, a, q, k, v, o, ao, h, n2, f, g, u, z, fo;
    std::vector<Mat<T>> probs;  // batch * heads attention matrices
};

template <typename T>
struct ForwardCache {
    int batch = 0;
    Mat<T> tokens, freq, h1, a1, c, cs;
    std::vector<int> label_rows;
    LinearPrep<T> x_prep, t1_prep, t2_prep, fa_prep, fl_prep;
    std::vector<BlockCache<T>> blocks;
    Mat<T> final_x, nf, mf, yf;
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_f;
};

// ---- stateless pieces --------------------------------------------------------

/// C x H x W image -> (H/p * W/p) x (p*p*C) tokens; token rows in raster order of the
/// patch grid, each token laid out as (row in patch, column in patch, channel).
template <typename T>
Mat<T> patchify(const ImageT<T>& img, int patch);

template <typename T>
ImageT<T> unpatchify(const Mat<T>& tokens, int channels, int height, int width, int patch);

/// [cos(t f_0) .. cos(t f_{h-1}), sin(t f_0) .. sin(t f_{h-1})], f_i = 10000^(-i/h), h = dim/2.
template <typename T>
RowVec<T> sinusoidal_embedding(int t, int dim);

/// y_i = gain_i * x_i / sqrt(mean_j x_j^2 + eps)
template <typename T>
RowVec<T> rms_norm(const RowVec<T>& x, const RowVec<T>& gain, double eps);

// ---- model -------------------------------------------------------------------

template <typename T>
class Model {
public:
    /// Allocates every parameter at zero (norm gains at one). Used for loading.
    explicit Model(const ModelConfig& cfg);
    /// adaLN-Zero initialization: blocks start as identities and the decoder outputs zero.
    Model(const ModelConfig& cfg, Rng& rng);

    const ModelConfig& config() const { return cfg_; }

    RowVec<T> timestep_embedding(int t) const;
    RowVec<T> label_embedding(int label, bool drop) const;
    /// c = timestep_embedding + label_embedding, one row per sample.
    Mat<T> condition(std::span<const Conditioning> cond) const;
    /// SiLU -> projection -> optional RMS norm; batch x 6*hidden.
    Mat<T> adaln_modulation(int block, const Mat<T>& c) const;
    /// x: (batch * tokens) x hidden, c: batch x hidden.
    Mat<T> block_forward(int block, const Mat<T>& x, const Mat<T>& c) const;

    /// tokens: (batch * tokens) x patch_dim. Returns the predicted-noise tokens.
    Mat<T> forward(const Mat<T>& tokens, std::span<const Conditioning> cond, ForwardCache<T>* cache = nullptr,
                   const ModulationObserver<T>* observer = nullptr) const;

    ImageT<T> predict(const ImageT<T>& x_t, int t, int label, bool drop) const;
    std::vector<ImageT<T>> predict(std::span<const ImageT<T>> x_t, std::span<const Conditioning> cond,
                                   const ModulationObserver<T>* observer = nullptr) const;

    /// Accumulates parameter gradients for d(loss)/d(output) = d_out. Optionally returns the input gradient.
    void backward(const ForwardCache<T>& cache, const Mat<T>& d_out, Mat<T>* d_tokens = nullptr);
    void zero_grad();

    bool is_packed() const;

    /// f(name, role, Param&) over every parameter, in parameter_specs order.
    template <class F>
    void for_each_param(F&& f);
    template <class F>
    void for_each_param(F&& f) const;
    /// f(prefix, Linear&) over the linears inside blocks.
    template <class F>
    void for_each_block_linear(F&& f);

    Linear<T> x_embedder;
    Param<T> pos_embed;
    Linear<T> t_fc1, t_fc2;
    Param<T> y_table;
    std::vector<DiTBlock<T>> blocks;
    RmsNorm<T> final_norm;
    Linear<T> final_adaln;
    Linear<T> final_linear;

private:
    Mat<T> block_forward_impl(int index, const Mat<T>& x, const Mat<T>& cs, BlockCache<T>& bc, bool keep,
                              const ModulationObserver<T>* observer) const;
    Mat<T> block_backward(int index, const BlockCache<T>& bc, const Mat<T>& cs, const Mat<T>& dout, Mat<T>& dcs);

    ModelConfig cfg_;
};

template <typename T>
template <class F>
void Model<T>::for_each_param(F&& f) {
    auto lin = [&](const std::string& p, Linear<T>& l, bool block) {
        f(p + ".weight", block && l.ternary ? ParamRole::TernaryWeight : ParamRole::Weight, l.weight);
        if (l.ternary) f(p + ".alpha", ParamRole::Alpha, l.alpha);
        if (l.has_bias) f(p + ".bias", ParamRole::Bias, l.bias);
    };
    lin("x_embedder", x_embedder, false);
    f("pos_embed", ParamRole::Embedding, pos_embed);
    lin("t_embedder.fc1", t_fc1, false);
    lin("t_embedder.fc2", t_fc2, false);
    f("y_embedder.table", ParamRole::Embedding, y_table);
    for (size_t i = 0; i < blocks.size(); ++i) {
        auto& b = blocks[i];
        const std::string p = "blocks." + std::to_string(i);
        f(p + ".attn_norm.gain", ParamRole::Gain, b.attn_norm.gain);
        lin(p + ".attn.wq", b.wq, true);
        lin(p + ".attn.wk", b.wk, true);
        lin(p + ".attn.wv", b.wv, true);
        lin(p + ".attn.wo", b.wo, true);
        f(p + ".ffn_norm.gain", ParamRole::Gain, b.ffn_norm.gain);
        lin(p + ".ffn.w1", b.w1, true);
        lin(p + ".ffn.w3", b.w3, true);
        lin(p + ".ffn.w2", b.w2, true);
        lin(p + ".adaln.linear", b.adaln, true);
        if (b.adaln_rms) f(p + ".adaln.norm.gain", ParamRole::Gain, b.adaln_norm.gain);
    }
    f("final.norm.gain", ParamRole::Gain, final_norm.gain);
    lin("final.adaln", final_adaln, false);
    lin("final.linear", final_linear, false);
}

template <typename T>
template <class F>
void Model<T>::for_each_param(F&& f) const {
    const_cast<Model<T>*>(this)->for_each_param(
        [&](const std::string& name, ParamRole role, Param<T>& p) { f(name, role, static_cast<const Param<T>&>(p)); });
}

template <typename T>
template <class F>
void Model<T>::for_each_block_linear(F&& f) {
    for (size_t i = 0; i < blocks.size(); ++i) {
        auto& b = blocks[i];
        const std::string p = "blocks." + std::to_string(i);
        f(p + ".attn.wq", b.wq);
        f(p + ".attn.wk", b.wk);
        f(p + ".attn.wv", b.wv);
        f(p + ".attn.wo", b.wo);
        f(p + ".ffn.w1", b.w1);
        f(p + ".ffn.w3", b.w3);
        f(p + ".ffn.w2", b.w2);
        f(p + ".adaln.linear", b.adaln);
    }
}

/// Copies all parameters (and shared packed weights) into a model of another scalar type.
template <typename To, typename From>
Model<To> model_cast(const Model<From>& src) {
    Model<To> dst(src.config());
    std::vector<const Param<From>*> from;
    src.for_each_param([&](const std::string&, ParamRole, const Param<From>& p) { from.push_back(&p); });
    size_t i = 0;
    dst.for_each_param([&](const std::string&, ParamRole, Param<To>& p) {
        p.value = from[i]->value.template cast<To>();
        p.grad = Mat<To>::Zero(p.value.rows(), p.value.cols());
        ++i;
    });
    auto& s = const_cast<Model<From>&>(src);
    std::vector<std::shared_ptr<const pack::PackedTernary>> packed;
    s.for_each_block_linear([&](const std::string&, Linear<From>& l) { packed.push_back(l.packed); });
    i = 0;
    dst.for_each_block_linear([&](const std::string&, Linear<To>& l) { l.packed = packed[i++]; });
    return dst;
}

/// Master (full-precision) checkpoint: every parameter as a dense tensor.
pack::Checkpoint to_checkpoint(const Model<float>& m);
/// Loads master or packed checkpoints; packed tensors become packed linears.
Model<float> from_checkpoint(const pack::Checkpoint& c);
/// Ternarizes each ternary linear once and stores it packed with its alpha.
/// Throws DomainError if the input already holds packed tensors or has no ternary layers.
pack::Checkpoint pack_checkpoint(const pack::Checkpoint& master);

}  // namespace terdit::dit
