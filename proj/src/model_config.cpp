#include "terdit/model_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace terdit::dit {

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid model config: " + m); };
    if (image_size <= 0 || channels <= 0 || patch_size <= 0) fail("image_size, channels and patch_size must be positive");
    if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
    if (hidden_dim <= 0 || depth < 0 || num_heads <= 0) fail("hidden_dim and num_heads must be positive, depth >= 0");
    if (hidden_dim % num_heads != 0) fail("hidden_dim must be divisible by num_heads");
    if (num_classes <= 0) fail("num_classes must be positive");
    if (!(rms_eps > 0.0) || !std::isfinite(rms_eps)) fail("rms_eps must be positive");
    if (!(class_dropout_prob >= 0.0 && class_dropout_prob <= 1.0)) fail("class_dropout_prob must lie in [0, 1]");
    if (num_timesteps <= 0) fail("num_timesteps must be positive");
}

std::string to_config_text(const ModelConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "image_size=" << c.image_size << "\n"
       << "channels=" << c.channels << "\n"
       << "patch_size=" << c.patch_size << "\n"
       << "hidden_dim=" << c.hidden_dim << "\n"
       << "depth=" << c.depth << "\n"
       << "num_heads=" << c.num_heads << "\n"
       << "num_classes=" << c.num_classes << "\n"
       << "adaln_rms=" << (c.adaln_rms ? "true" : "false") << "\n"
       << "quantize_blocks=" << (c.quantize_blocks ? "true" : "false") << "\n"
       << "rms_eps=" << c.rms_eps << "\n"
       << "class_dropout_prob=" << c.class_dropout_prob << "\n";
    return os.str();
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

int parse_int(const std::string& key, const std::string& v) {
    int out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

}  // namespace

ModelConfig parse_config_text(const std::string& text) {
    ModelConfig c;
    using Setter = std::function<void(const std::string&, const std::string&)>;
    const std::map<std::string, Setter> setters{
        {"image_size", [&](auto& k, auto& v) { c.image_size = parse_int(k, v); }},
        {"channels", [&](auto& k, auto& v) { c.channels = parse_int(k, v); }},
        {"patch_size", [&](auto& k, auto& v) { c.patch_size = parse_int(k, v); }},
        {"hidden_dim", [&](auto& k, auto& v) { c.hidden_dim = parse_int(k, v); }},
        {"depth", [&](auto& k, auto& v) { c.depth = parse_int(k, v); }},
        {"num_heads", [&](auto& k, auto& v) { c.num_heads = parse_int(k, v); }},
        {"num_classes", [&](auto& k, auto& v) { c.num_classes = parse_int(k, v); }},
        {"adaln_rms", [&](auto& k, auto& v) { c.adaln_rms = parse_bool(k, v); }},
        {"quantize_blocks", [&](auto& k, auto& v) { c.quantize_blocks = parse_bool(k, v); }},
        {"rms_eps", [&](auto& k, auto& v) { c.rms_eps = parse_double(k, v); }},
        {"class_dropout_prob", [&](auto& k, auto& v) { c.class_dropout_prob = parse_double(k, v); }},
    };
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        it->second(key, value);
    }
    c.validate();
    return c;
}

ModelConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

std::vector<ParamSpec> parameter_specs(const ModelConfig& c) {
    c.validate();
    using U = uint64_t;
    const U d = c.hidden_dim;
    const U pd = c.patch_dim();
    const U ff = c.ffn_dim();
    std::vector<ParamSpec> s;
    auto add = [&](std::string name, std::vector<U> shape, ParamRole role) {
        s.push_back({std::move(name), std::move(shape), role});
    };
    auto add_block_linear = [&](const std::string& prefix, U out, U in) {
        add(prefix + ".weight", {out, in}, c.quantize_blocks ? ParamRole::TernaryWeight : ParamRole::Weight);
        if (c.quantize_blocks) add(prefix + ".alpha", {1}, ParamRole::Alpha);
    };

    add("x_embedder.weight", {d, pd}, ParamRole::Weight);
    add("x_embedder.bias", {d}, ParamRole::Bias);
    add("pos_embed", {static_cast<U>(c.tokens()), d}, ParamRole::Embedding);
    add("t_embedder.fc1.weight", {d, static_cast<U>(c.freq_dim())}, ParamRole::Weight);
    add("t_embedder.fc1.bias", {d}, ParamRole::Bias);
    add("t_embedder.fc2.weight", {d, d}, ParamRole::Weight);
    add("t_embedder.fc2.bias", {d}, ParamRole::Bias);
    add("y_embedder.table", {static_cast<U>(c.num_classes) + 1, d}, ParamRole::Embedding);
    for (int i = 0; i < c.depth; ++i) {
        const std::string b = "blocks." + std::to_string(i);
        add(b + ".attn_norm.gain", {d}, ParamRole::Gain);
        add_block_linear(b + ".attn.wq", d, d);
        add_block_linear(b + ".attn.wk", d, d);
        add_block_linear(b + ".attn.wv", d, d);
        add_block_linear(b + ".attn.wo", d, d);
        add(b + ".ffn_norm.gain", {d}, ParamRole::Gain);
        add_block_linear(b + ".ffn.w1", ff, d);
        add_block_linear(b + ".ffn.w3", ff, d);
        add_block_linear(b + ".ffn.w2", d, ff);
        add_block_linear(b + ".adaln.linear", 6 * d, d);
        add(b + ".adaln.linear.bias", {6 * d}, ParamRole::Bias);
        if (c.adaln_rms) add(b + ".adaln.norm.gain", {6 * d}, ParamRole::Gain);
    }
    add("final.norm.gain", {d}, ParamRole::Gain);
    add("final.adaln.weight", {2 * d, d}, ParamRole::Weight);
    add("final.adaln.bias", {2 * d}, ParamRole::Bias);
    add("final.linear.weight", {pd, d}, ParamRole::Weight);
    add("final.linear.bias", {pd}, ParamRole::Bias);
    return s;
}

}  // namespace terdit::dit
